//! Lossless integer-flow image compression, the attacks that target it,
//! and the defenses and guarantees that answer them.
//!
//! The library builds one artifact — an exactly invertible integer flow
//! that doubles as an entropy model — and everything an experiment needs
//! around it. Pixels map through additive integer couplings to latents
//! whose discretized-logistic conditionals drive a range coder, so the
//! model's negative log-likelihood *is* the achievable code length.
//! Because compressibility is differentiable, it can be attacked with
//! gradient ascent, defended by regularized training, and bounded
//! analytically; each of those stories has a module here.
//!
//! Layered bottom to top:
//!
//! * [`array`] — dense little tensors (`f64`, NCHW) with the exact integer
//!   rounding helpers the bijection depends on.
//! * [`autodiff`] — a tape-based reverse-mode engine over those tensors;
//!   convolution, clamps, softmax, and the straight-through rounding
//!   estimator used by every gradient consumer.
//! * [`logistic`] — discretized-logistic mass, CDF, and bits-per-dimension
//!   helpers shared verbatim by the loss, the attacks, and the coder.
//! * [`flow`] — the model: squeeze, additive couplings, two factor-outs,
//!   a learned base prior; one tape-bound forward for training and a pure
//!   array forward/inverse pair for coding, cross-checked bit for bit.
//! * [`codec`] — range coding of latents under the model's conditionals
//!   with a raw-passthrough fallback, plus the framed bitstream container.
//! * [`attack`] — projected integer gradient ascent on coding cost: plain,
//!   adaptively weighted (per-component ceilings with softmax-of-increment
//!   weights), random-noise control, and the perturbation-transfer
//!   experiment.
//! * [`train`] — seeded training loops (clean, adversarial, hybrid, and
//!   regularized variants), the Frobenius/spectral kernel penalty, and the
//!   ablation grid.
//! * [`theory`] — numerical verification of the robustness bounds on
//!   continuous toy flows, with every constant measured from samples.
//! * Support: [`spectral`] (warm-started power iteration), [`parallel`]
//!   (feature-gated data parallelism), [`data`] (netpbm/RIFD I/O and the
//!   synthetic corpus), [`checkpoint`] (RIFM model files), [`config`]
//!   (key=value experiment files), [`report`] (deterministic CSV), and
//!   [`error`].
//!
//! Determinism is a contract throughout: every stochastic routine takes an
//! explicit seed, parallel loops collect by index, and reports embed the
//! seed and configuration hash that produced them, so identical inputs
//! reproduce identical bytes.

pub mod array;
pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod logistic;
pub mod parallel;
pub mod report;
pub mod spectral;
pub mod theory;
pub mod train;

pub use array::Array;
pub use error::{Error, Result};
