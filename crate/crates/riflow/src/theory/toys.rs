//! Purpose-built continuous toy flows for the robustness-bound checkers.
//!
//! The bounds under verification are statements about *Gaussian* densities
//! and continuous maps, so they are checked on small dense-network flows
//! with Gaussian conditionals and a standard-normal base — not on the
//! production integer model, whose discretized-logistic likelihoods would
//! produce spurious violations that say nothing about the math.
//!
//! Two structural choices keep the stated constants sound (the bound's
//! closing algebra assumes them implicitly):
//!
//! * scale heads are `softplus(net) + 1`, so predicted deviations never
//!   drop below one and inverse scales never exceed one;
//! * mean heads mix in the identity with gain 2, so the measured
//!   steepness of the conditioner stays comfortably above one.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::{softplus_scalar, Array};
use crate::error::{domain_err, shape_err, Result};

/// `ln(2*pi)`, the normalization constant of the Gaussian log-density.
pub const LN_2PI: f64 = 1.8378770664093453;

/// Log-density of the standard normal in `n` dimensions.
pub fn std_normal_logp(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * sq - 0.5 * z.len() as f64 * LN_2PI
}

/// A two-layer dense network `W2 tanh(W1 x + b1) + b2`, optionally mixed
/// with `gain * x` when input and output widths match.
#[derive(Debug, Clone)]
pub struct DenseNet {
    w1: Array,
    b1: Vec<f64>,
    w2: Array,
    b2: Vec<f64>,
    identity_gain: f64,
}

impl DenseNet {
    /// Random weights uniform in `[-scale, scale]`.
    pub fn random(
        inputs: usize,
        hidden: usize,
        outputs: usize,
        scale: f64,
        identity_gain: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            let data: Vec<f64> =
                (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
            Array::new(vec![rows, cols], data).expect("sized by construction")
        };
        let w1 = draw(hidden, inputs);
        let w2 = draw(outputs, hidden);
        let b1 = (0..hidden).map(|_| rng.gen_range(-scale..=scale)).collect();
        let b2 = (0..outputs).map(|_| rng.gen_range(-scale..=scale)).collect();
        DenseNet { w1, b1, w2, b2, identity_gain }
    }

    /// All-zero weights: the output is `gain * x` (or zero when widths
    /// differ).
    pub fn zeroed(inputs: usize, hidden: usize, outputs: usize, identity_gain: f64) -> Self {
        DenseNet {
            w1: Array::zeros(&[hidden, inputs]),
            b1: vec![0.0; hidden],
            w2: Array::zeros(&[outputs, hidden]),
            b2: vec![0.0; outputs],
            identity_gain,
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.w2.shape()[0]
    }

    /// Overwrites the final bias with a constant (used to shift scale nets
    /// into strictly positive output ranges).
    pub fn set_final_bias(&mut self, value: f64) {
        for b in &mut self.b2 {
            *b = value;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs());
        let hidden = self.w1.shape()[0];
        let mut h = vec![0.0; hidden];
        for (i, hi) in h.iter_mut().enumerate() {
            let row = &self.w1.data()[i * x.len()..(i + 1) * x.len()];
            let mut acc = self.b1[i];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *hi = acc.tanh();
        }
        let outputs = self.outputs();
        let mut y = vec![0.0; outputs];
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w2.data()[o * hidden..(o + 1) * hidden];
            let mut acc = self.b2[o];
            for (w, v) in row.iter().zip(&h) {
                acc += w * v;
            }
            *yo = acc;
        }
        if self.identity_gain != 0.0 && self.inputs() == outputs {
            for (yo, v) in y.iter_mut().zip(x) {
                *yo += self.identity_gain * v;
            }
        }
        y
    }
}

enum MeanHead {
    Net(DenseNet),
    /// Exact linear map `A y` (rank-2 matrix), for closed-form cases.
    Linear(Array),
}

enum ScaleHead {
    /// `softplus(net(y)) + floor`.
    Net { net: DenseNet, floor: f64 },
    Constant(f64),
}

/// Gaussian conditional `z ~ N(mu(y), diag(sigma(y)^2))` with positive
/// scales by construction.
pub struct GaussianConditioner {
    mu: MeanHead,
    sigma: ScaleHead,
    inputs: usize,
    outputs: usize,
}

impl GaussianConditioner {
    /// Random square conditioner: mean head mixes in `2 * y`, scale head is
    /// `softplus(net) + 1`.
    pub fn random(io: usize, hidden: usize, scale: f64, seed: u64) -> Self {
        GaussianConditioner {
            mu: MeanHead::Net(DenseNet::random(io, hidden, io, scale, 2.0, seed)),
            sigma: ScaleHead::Net {
                net: DenseNet::random(io, hidden, io, scale, 0.0, seed.wrapping_add(0x5157)),
                floor: 1.0,
            },
            inputs: io,
            outputs: io,
        }
    }

    /// Exact linear mean `A y` with a constant scale.
    pub fn linear(a: Array, sigma: f64) -> Result<Self> {
        let (outputs, inputs) = a.dims2()?;
        if !(sigma > 0.0) {
            return Err(domain_err("conditioner", "scale must be positive"));
        }
        Ok(GaussianConditioner {
            mu: MeanHead::Linear(a),
            sigma: ScaleHead::Constant(sigma),
            inputs,
            outputs,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn mu(&self, y: &[f64]) -> Vec<f64> {
        match &self.mu {
            MeanHead::Net(net) => net.forward(y),
            MeanHead::Linear(a) => {
                let (rows, cols) = a.dims2().expect("validated at construction");
                let mut out = vec![0.0; rows];
                for (r, o) in out.iter_mut().enumerate() {
                    let row = &a.data()[r * cols..(r + 1) * cols];
                    *o = row.iter().zip(y).map(|(w, v)| w * v).sum();
                }
                out
            }
        }
    }

    pub fn sigma(&self, y: &[f64]) -> Vec<f64> {
        match &self.sigma {
            ScaleHead::Net { net, floor } => {
                net.forward(y).into_iter().map(|v| softplus_scalar(v) + floor).collect()
            }
            ScaleHead::Constant(s) => vec![*s; self.outputs],
        }
    }

    /// `log N(z; mu(y), diag(sigma(y)^2))`.
    pub fn log_prob(&self, y: &[f64], z: &[f64]) -> Result<f64> {
        if y.len() != self.inputs || z.len() != self.outputs {
            return Err(shape_err(
                "conditioner",
                format!(
                    "expected y[{}], z[{}]; got y[{}], z[{}]",
                    self.inputs,
                    self.outputs,
                    y.len(),
                    z.len()
                ),
            ));
        }
        let mu = self.mu(y);
        let sigma = self.sigma(y);
        let mut logp = 0.0;
        for i in 0..z.len() {
            if !(sigma[i] > 0.0) {
                return Err(domain_err("conditioner", "nonpositive predicted scale"));
            }
            let d = (z[i] - mu[i]) / sigma[i];
            logp += -0.5 * d * d - sigma[i].ln() - 0.5 * LN_2PI;
        }
        Ok(logp)
    }
}

/// One additive coupling on a flat vector: the kept half passes through,
/// the other half is shifted by a network of the kept half. `swap` flips
/// which half is kept.
#[derive(Debug, Clone)]
struct AdditiveCoupling {
    t: DenseNet,
    swap: bool,
}

/// A stack of additive couplings; volume-preserving, so its negative
/// log-likelihood under a standard-normal base is just the base density at
/// the output.
#[derive(Debug, Clone)]
pub struct ToyAdditiveFlow {
    couplings: Vec<AdditiveCoupling>,
    dim: usize,
}

impl ToyAdditiveFlow {
    pub fn random(dim: usize, layers: usize, hidden: usize, scale: f64, seed: u64) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(domain_err("toy_flow", "dimension must be even and at least 2"));
        }
        let half = dim / 2;
        let couplings = (0..layers)
            .map(|l| AdditiveCoupling {
                t: DenseNet::random(half, hidden, half, scale, 0.0, seed.wrapping_add(l as u64)),
                swap: l % 2 == 1,
            })
            .collect();
        Ok(ToyAdditiveFlow { couplings, dim })
    }

    /// Zero shift networks: the flow is the identity map.
    pub fn identity(dim: usize, layers: usize) -> Result<Self> {
        let mut flow = Self::random(dim, layers, 1, 0.0, 0)?;
        for c in &mut flow.couplings {
            c.t = DenseNet::zeroed(dim / 2, 1, dim / 2, 0.0);
        }
        Ok(flow)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        let half = self.dim / 2;
        let mut v = x.to_vec();
        for c in &self.couplings {
            let keep = if c.swap { &v[half..] } else { &v[..half] };
            let shift = c.t.forward(keep);
            let mut out = v.clone();
            let target = if c.swap { 0..half } else { half..self.dim };
            for (slot, s) in out[target].iter_mut().zip(&shift) {
                *slot = *slot + s;
            }
            v = out;
        }
        v
    }

    /// Negative log-likelihood under a standard-normal base.
    pub fn nll(&self, x: &[f64]) -> f64 {
        -std_normal_logp(&self.forward(x))
    }
}

/// One affine coupling: the moved half is scaled by `exp(s(keep))` before
/// the shift, and the log-determinant picks up `sum s(keep)`.
#[derive(Debug, Clone)]
struct AffineCoupling {
    t: DenseNet,
    s: DenseNet,
    swap: bool,
}

/// A stack of affine couplings with a standard-normal base.
#[derive(Debug, Clone)]
pub struct ToyAffineFlow {
    couplings: Vec<AffineCoupling>,
    dim: usize,
}

impl ToyAffineFlow {
    /// Same shift networks as `additive`, plus scale networks whose outputs
    /// sit in a strictly positive band around `s_bias`.
    pub fn matched(additive: &ToyAdditiveFlow, s_scale: f64, s_bias: f64, seed: u64) -> Self {
        let half = additive.dim / 2;
        let couplings = additive
            .couplings
            .iter()
            .enumerate()
            .map(|(l, c)| {
                let mut s =
                    DenseNet::random(half, 4, half, s_scale, 0.0, seed.wrapping_add(l as u64));
                s.set_final_bias(s_bias);
                AffineCoupling { t: c.t.clone(), s, swap: c.swap }
            })
            .collect();
        ToyAffineFlow { couplings, dim: additive.dim }
    }

    /// Same shift networks, scale networks pinned to zero output: the map
    /// collapses to the additive flow exactly.
    pub fn zero_scaled(additive: &ToyAdditiveFlow) -> Self {
        let half = additive.dim / 2;
        let couplings = additive
            .couplings
            .iter()
            .map(|c| AffineCoupling {
                t: c.t.clone(),
                s: DenseNet::zeroed(half, 1, half, 0.0),
                swap: c.swap,
            })
            .collect();
        ToyAffineFlow { couplings, dim: additive.dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Returns the output and the accumulated log-determinant.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let half = self.dim / 2;
        let mut v = x.to_vec();
        let mut logdet = 0.0;
        for c in &self.couplings {
            let keep = if c.swap { &v[half..] } else { &v[..half] };
            let shift = c.t.forward(keep);
            let scale = c.s.forward(keep);
            logdet += scale.iter().sum::<f64>();
            let mut out = v.clone();
            let target = if c.swap { 0..half } else { half..self.dim };
            for ((slot, sh), sc) in out[target].iter_mut().zip(&shift).zip(&scale) {
                *slot = *slot * sc.exp() + sh;
            }
            v = out;
        }
        (v, logdet)
    }

    /// Negative log-likelihood under a standard-normal base, including the
    /// volume change.
    pub fn nll(&self, x: &[f64]) -> f64 {
        let (z, logdet) = self.forward(x);
        -(std_normal_logp(&z) + logdet)
    }
}

/// Everything a multi-scale forward pass produces.
#[derive(Debug, Clone)]
pub struct ToyLatents {
    /// First factored component and the half it is conditioned on.
    pub z1: Vec<f64>,
    pub y1: Vec<f64>,
    /// Second factored component and its conditioning half.
    pub z2: Vec<f64>,
    pub y2: Vec<f64>,
    /// Final latent, scored against the standard normal.
    pub z3: Vec<f64>,
}

/// A two-factor-out continuous toy: couplings, factor out half, couplings,
/// factor out half again, couplings, standard-normal base. Mirrors the
/// production topology at vector scale with Gaussian conditionals.
pub struct ToyMultiScaleFlow {
    stage1: ToyAdditiveFlow,
    pub fo1: GaussianConditioner,
    stage2: ToyAdditiveFlow,
    pub fo2: GaussianConditioner,
    stage3: ToyAdditiveFlow,
    dim: usize,
}

impl ToyMultiScaleFlow {
    pub fn random(dim: usize, hidden: usize, scale: f64, seed: u64) -> Result<Self> {
        if dim < 4 || dim % 4 != 0 {
            return Err(domain_err("toy_flow", "dimension must be a positive multiple of 4"));
        }
        Ok(ToyMultiScaleFlow {
            stage1: ToyAdditiveFlow::random(dim, 2, hidden, scale, seed)?,
            fo1: GaussianConditioner::random(dim / 2, hidden, scale, seed.wrapping_add(101)),
            stage2: ToyAdditiveFlow::random(dim / 2, 2, hidden, scale, seed.wrapping_add(202))?,
            fo2: GaussianConditioner::random(dim / 4, hidden, scale, seed.wrapping_add(303)),
            stage3: ToyAdditiveFlow::random(dim / 4, 2, hidden, scale, seed.wrapping_add(404))?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Dimensions of the factored components, largest (earliest) first.
    pub fn component_dims(&self) -> [usize; 2] {
        [self.dim / 2, self.dim / 4]
    }

    pub fn forward(&self, x: &[f64]) -> ToyLatents {
        debug_assert_eq!(x.len(), self.dim);
        let h1 = self.stage1.forward(x);
        let (z1, y1) = h1.split_at(self.dim / 2);
        let h2 = self.stage2.forward(y1);
        let (z2, y2) = h2.split_at(self.dim / 4);
        let z3 = self.stage3.forward(y2);
        ToyLatents {
            z1: z1.to_vec(),
            y1: y1.to_vec(),
            z2: z2.to_vec(),
            y2: y2.to_vec(),
            z3,
        }
    }

    /// Total log-likelihood and its `(fo1, fo2, base)` components.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<(f64, [f64; 3])> {
        let lat = self.forward(x);
        let fo1 = self.fo1.log_prob(&lat.y1, &lat.z1)?;
        let fo2 = self.fo2.log_prob(&lat.y2, &lat.z2)?;
        let mf = std_normal_logp(&lat.z3);
        Ok((fo1 + fo2 + mf, [fo1, fo2, mf]))
    }
}
