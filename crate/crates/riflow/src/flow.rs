//! Integer multi-scale flow over pixel tensors.
//!
//! The model is an exact bijection on integer tensors `(C, H, W)` built from
//! three stages. Stages 1 and 2 begin with a 2x2 space-to-depth squeeze and
//! end by factoring out half their channels; stage 3 transforms what
//! remains. Every stage applies a fixed number of additive coupling layers
//!
//! ```text
//! keep      = h[untouched half]
//! h[other] += round(t(normalize(keep)))
//! ```
//!
//! where `t` is a small convolutional network, `normalize(v) = (v-128)/128`
//! feeds the network a centred copy so the integer path itself is never
//! rescaled, and the rounding is straight-through differentiable. Because
//! the translation only ever depends on the untouched half, subtracting the
//! identical quantity inverts the layer exactly — integer in, integer out,
//! no drift.
//!
//! Factored-out latents `z1`, `z2` are scored under discretized logistics
//! whose location and log-scale are predicted from the half that continues;
//! the final latent `z3` is scored under a learned per-dimension logistic
//! base prior. The three negative log-likelihoods, each in bits per
//! dimension of its own component, form the [`LossBreakdown`] the codec,
//! the attacks, and training all consume.
//!
//! Two forward implementations exist side by side: a tape-recorded one for
//! gradients ([`FlowModel::bind`] + [`BoundModel::forward`]) and a pure
//! array one for inference ([`FlowModel::forward_arrays`]). They share the
//! same array kernels underneath and are cross-checked by tests; the
//! inverse ([`FlowModel::inverse`]) exists only in array form since decoding
//! never needs gradients.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::autodiff::{Tape, Var};
use crate::error::{domain_err, shape_err, Result};
use crate::logistic;

/// Centre used when feeding pixel-scaled values to conditioning networks.
pub const PIXEL_CENTER: f64 = 128.0;
/// Scale used when feeding pixel-scaled values to conditioning networks.
pub const PIXEL_SCALE: f64 = 128.0;
/// Translations are clamped to this magnitude before rounding, which keeps
/// every latent well inside the 16-bit escape range of the entropy coder no
/// matter what the networks output.
pub const TRANSLATION_LIMIT: f64 = 1024.0;
/// Log-scales are clamped to this magnitude before exponentiation.
pub const LOG_SCALE_LIMIT: f64 = 20.0;
/// Initial location of the logistic priors (mid pixel range).
pub const INIT_PRIOR_MU: f64 = 128.0;
/// Initial log-scale of the logistic priors (`ln 32`).
pub const INIT_PRIOR_LOG_S: f64 = 3.4657359027997265;

const LN_2: f64 = std::f64::consts::LN_2;
const STAGES: usize = 3;

/// Architecture descriptor. Models are bound to a fixed input shape because
/// the base prior is per-dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowArch {
    /// Input channels (3 for RGB, 1 for grayscale).
    pub in_channels: usize,
    /// Input height; must be divisible by 4 (two squeezes).
    pub height: usize,
    /// Input width; must be divisible by 4.
    pub width: usize,
    /// Additive coupling layers per stage.
    pub couplings_per_stage: usize,
    /// Hidden channel width of every conditioning network.
    pub hidden_width: usize,
}

impl FlowArch {
    /// Standard toy configuration: `c x h x w` with 4 couplings per stage
    /// and hidden width 32.
    pub fn new(in_channels: usize, height: usize, width: usize) -> Result<Self> {
        let arch = FlowArch {
            in_channels,
            height,
            width,
            couplings_per_stage: 4,
            hidden_width: 32,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Checks the divisibility and non-degeneracy constraints.
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(shape_err("flow_arch", "zero-sized input"));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(shape_err(
                "flow_arch",
                format!(
                    "spatial dims must be divisible by 4 (two squeezes), got {}x{}",
                    self.height, self.width
                ),
            ));
        }
        if self.couplings_per_stage == 0 || self.hidden_width == 0 {
            return Err(shape_err("flow_arch", "couplings and hidden width must be positive"));
        }
        Ok(())
    }

    /// Input shape `(C, H, W)`.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    /// Total number of input dimensions.
    pub fn dims(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Channel count each stage's couplings operate on.
    fn stage_channels(&self, stage: usize) -> usize {
        match stage {
            0 => 4 * self.in_channels,
            1 => 8 * self.in_channels,
            _ => 4 * self.in_channels,
        }
    }

    /// Shapes of the three latent components `(z1, z2, z3)`.
    pub fn latent_shapes(&self) -> [[usize; 3]; 3] {
        let c = self.in_channels;
        let (h, w) = (self.height, self.width);
        [
            [2 * c, h / 2, w / 2],
            [4 * c, h / 4, w / 4],
            [4 * c, h / 4, w / 4],
        ]
    }

    /// Element counts of the three latent components.
    pub fn latent_dims(&self) -> [usize; 3] {
        let shapes = self.latent_shapes();
        let mut out = [0; 3];
        for (o, s) in out.iter_mut().zip(shapes.iter()) {
            *o = s.iter().product();
        }
        out
    }
}

/// Three-layer 3x3 convolutional conditioning network (relu between layers,
/// linear output). Parameters are shared `Arc`s so binding them to a tape or
/// sharing the model across threads never copies.
#[derive(Debug, Clone)]
pub struct ConvNet {
    weights: Vec<Arc<Array>>,
    biases: Vec<Arc<Array>>,
}

impl ConvNet {
    /// Hidden layers drawn uniform in `±sqrt(1/fan_in)`; the final layer is
    /// zeroed when `zero_final` (identity-initialized coupling nets) and its
    /// bias can then be seeded via [`ConvNet::set_final_bias`].
    fn random(in_ch: usize, hidden: usize, out_ch: usize, rng: &mut ChaCha8Rng, zero_final: bool) -> Self {
        let dims = [(hidden, in_ch), (hidden, hidden), (out_ch, hidden)];
        let mut weights = Vec::with_capacity(3);
        let mut biases = Vec::with_capacity(3);
        for (l, &(o, i)) in dims.iter().enumerate() {
            let last = l == dims.len() - 1;
            let w = if last && zero_final {
                Array::zeros(&[o, i, 3, 3])
            } else {
                let s = (1.0 / (i * 9) as f64).sqrt();
                let data = (0..o * i * 9).map(|_| rng.gen_range(-s..s)).collect();
                Array::new(vec![o, i, 3, 3], data).expect("sized by construction")
            };
            weights.push(Arc::new(w));
            biases.push(Arc::new(Array::zeros(&[o])));
        }
        ConvNet { weights, biases }
    }

    /// All-zero network (test helper for hand-set couplings).
    pub fn zeroed(in_ch: usize, hidden: usize, out_ch: usize) -> Self {
        let dims = [(hidden, in_ch), (hidden, hidden), (out_ch, hidden)];
        ConvNet {
            weights: dims.iter().map(|&(o, i)| Arc::new(Array::zeros(&[o, i, 3, 3]))).collect(),
            biases: dims.iter().map(|&(o, _)| Arc::new(Array::zeros(&[o]))).collect(),
        }
    }

    /// Number of layers (always 3).
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Kernel of layer `l`.
    pub fn weight(&self, l: usize) -> &Arc<Array> {
        &self.weights[l]
    }

    /// Bias of layer `l`.
    pub fn bias(&self, l: usize) -> &Arc<Array> {
        &self.biases[l]
    }

    /// Overwrites the final layer's bias (e.g. to hand-set a constant
    /// translation or to centre predicted locations).
    pub fn set_final_bias(&mut self, values: &[f64]) -> Result<()> {
        let last = self.biases.len() - 1;
        if self.biases[last].numel() != values.len() {
            return Err(shape_err(
                "set_final_bias",
                format!("expected {} values, got {}", self.biases[last].numel(), values.len()),
            ));
        }
        self.biases[last] = Arc::new(Array::new(vec![values.len()], values.to_vec())?);
        Ok(())
    }

    /// Pure-array forward pass.
    pub fn forward_array(&self, x: &Array) -> Result<Array> {
        let mut h = x.conv2d(&self.weights[0], Some(&self.biases[0]), 1)?.relu();
        h = h.conv2d(&self.weights[1], Some(&self.biases[1]), 1)?.relu();
        h.conv2d(&self.weights[2], Some(&self.biases[2]), 1)
    }

    fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundConvNet<'t> {
        let reg = |a: &Arc<Array>| {
            if trainable {
                tape.leaf_shared(Arc::clone(a))
            } else {
                tape.constant_shared(Arc::clone(a))
            }
        };
        BoundConvNet {
            weights: self.weights.iter().map(reg).collect(),
            biases: self.biases.iter().map(reg).collect(),
        }
    }
}

/// Tape-bound view of a [`ConvNet`].
struct BoundConvNet<'t> {
    weights: Vec<Var<'t>>,
    biases: Vec<Var<'t>>,
}

impl<'t> BoundConvNet<'t> {
    fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x.conv2d(self.weights[0], Some(self.biases[0]), 1)?.relu();
        h = h.conv2d(self.weights[1], Some(self.biases[1]), 1)?.relu();
        h.conv2d(self.weights[2], Some(self.biases[2]), 1)
    }
}

/// The three latent components produced by the forward pass, in factor-out
/// order. All values are exact integers stored as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStack {
    pub z1: Array,
    pub z2: Array,
    pub z3: Array,
}

impl LatentStack {
    /// Latents in component order.
    pub fn components(&self) -> [&Array; 3] {
        [&self.z1, &self.z2, &self.z3]
    }
}

/// Location/scale pairs for each latent component (scales in linear space,
/// already exponentiated and clamped). What the entropy coder consumes.
#[derive(Debug, Clone)]
pub struct Conditionals {
    pub fo1: (Array, Array),
    pub fo2: (Array, Array),
    pub base: (Array, Array),
}

impl Conditionals {
    /// `(mu, s)` in component order.
    pub fn components(&self) -> [&(Array, Array); 3] {
        [&self.fo1, &self.fo2, &self.base]
    }
}

/// Per-component negative log-likelihood, each in bits per dimension *of
/// that component*, plus the dimension bookkeeping to recover totals.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    /// First factor-out component, bits/dim.
    pub fo1_bpd: f64,
    /// Second factor-out component, bits/dim.
    pub fo2_bpd: f64,
    /// Final (base-prior) component, bits/dim.
    pub mf_bpd: f64,
    /// Element counts of the three components.
    pub dims: [usize; 3],
    /// Whole-tensor bits per dimension (dimension-weighted mean).
    pub total_bpd: f64,
}

impl LossBreakdown {
    fn from_bits(bits: [f64; 3], dims: [usize; 3]) -> Self {
        let total: usize = dims.iter().sum();
        LossBreakdown {
            fo1_bpd: bits[0] / dims[0] as f64,
            fo2_bpd: bits[1] / dims[1] as f64,
            mf_bpd: bits[2] / dims[2] as f64,
            dims,
            total_bpd: bits.iter().sum::<f64>() / total as f64,
        }
    }

    /// Component bits-per-dim in order `(fo1, fo2, mf)`.
    pub fn component_bpd(&self) -> [f64; 3] {
        [self.fo1_bpd, self.fo2_bpd, self.mf_bpd]
    }

    /// Total NLL of the tensor in bits.
    pub fn total_bits(&self) -> f64 {
        self.total_bpd * self.dims.iter().sum::<usize>() as f64
    }
}

/// Model-level rate metrics derived from a [`LossBreakdown`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Metrics {
    /// Bits per dimension under the model.
    pub bpd: f64,
    /// Compression ratio against 8-bit raw; floored at 1.0 because the codec
    /// falls back to raw passthrough once the model stops helping.
    pub cr: f64,
}

/// Derives `(bpd, cr)` from a loss breakdown.
pub fn metrics(b: &LossBreakdown) -> Metrics {
    let bpd = b.total_bpd;
    let cr = if bpd >= 8.0 { 1.0 } else { 8.0 / bpd };
    Metrics { bpd, cr }
}

/// Differentiable forward-pass outputs.
pub struct FlowForward<'t> {
    /// Integer latents (plain arrays, detached).
    pub latents: LatentStack,
    /// Per-component bpd losses as tape scalars `(fo1, fo2, mf)`.
    pub component_bpd: [Var<'t>; 3],
    /// The same losses as plain numbers.
    pub breakdown: LossBreakdown,
}

/// The integer multi-scale flow model.
#[derive(Debug, Clone)]
pub struct FlowModel {
    arch: FlowArch,
    /// `couplings[stage][layer]`.
    couplings: Vec<Vec<ConvNet>>,
    /// Conditioning networks of the two factor-out stages.
    factor_outs: Vec<ConvNet>,
    base_mu: Arc<Array>,
    base_log_s: Arc<Array>,
}

impl FlowModel {
    /// Builds a model with seeded hidden weights and identity-initialized
    /// couplings: translation nets have zero final layers, so the initial
    /// flow is a pure rearrangement and priors start at
    /// `(mu, log s) = (128, ln 32)`.
    pub fn new(arch: FlowArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hw = arch.hidden_width;
        let mut couplings = Vec::with_capacity(STAGES);
        for stage in 0..STAGES {
            let ch = arch.stage_channels(stage);
            let half = ch / 2;
            let nets = (0..arch.couplings_per_stage)
                .map(|_| ConvNet::random(half, hw, half, &mut rng, true))
                .collect();
            couplings.push(nets);
        }
        let mut factor_outs = Vec::with_capacity(2);
        for stage in 0..2 {
            let ch = arch.stage_channels(stage);
            let half = ch / 2;
            // Output is (mu, log_s) for the factored half.
            let mut net = ConvNet::random(half, hw, 2 * half, &mut rng, true);
            let mut bias = vec![INIT_PRIOR_MU; half];
            bias.extend(std::iter::repeat(INIT_PRIOR_LOG_S).take(half));
            net.set_final_bias(&bias)?;
            factor_outs.push(net);
        }
        let z3_shape = arch.latent_shapes()[2];
        Ok(FlowModel {
            arch,
            couplings,
            factor_outs,
            base_mu: Arc::new(Array::full(&z3_shape, INIT_PRIOR_MU)),
            base_log_s: Arc::new(Array::full(&z3_shape, INIT_PRIOR_LOG_S)),
        })
    }

    /// Architecture descriptor.
    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    /// Overrides the final-stage base prior with constant location and
    /// log-scale (test/inspection helper).
    pub fn set_base_prior(&mut self, mu: f64, log_s: f64) {
        let shape = self.arch.latent_shapes()[2];
        self.base_mu = Arc::new(Array::full(&shape, mu));
        self.base_log_s = Arc::new(Array::full(&shape, log_s));
    }

    /// Mutable access to a coupling's translation network (test helper for
    /// hand-set layers).
    pub fn coupling_net_mut(&mut self, stage: usize, layer: usize) -> &mut ConvNet {
        &mut self.couplings[stage][layer]
    }

    /// The conditioning network of factor-out stage `idx` (0 or 1).
    pub fn factor_out_net(&self, idx: usize) -> &ConvNet {
        &self.factor_outs[idx]
    }

    /// Mutable counterpart of [`FlowModel::factor_out_net`].
    pub fn factor_out_net_mut(&mut self, idx: usize) -> &mut ConvNet {
        &mut self.factor_outs[idx]
    }

    /// Adds uniform noise in `±scale` to every parameter, including the
    /// zero-initialized final layers. Used by tests and probes that need a
    /// non-identity flow without running training.
    pub fn perturb_params(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in self.params_mut() {
            let arr = Arc::make_mut(p);
            for v in arr.data_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }

    /// Stable, named enumeration of every parameter tensor. The order
    /// defines the checkpoint layout and the optimizer state layout.
    pub fn named_params(&self) -> Vec<(String, Arc<Array>)> {
        let mut out = Vec::new();
        for (s, nets) in self.couplings.iter().enumerate() {
            for (j, net) in nets.iter().enumerate() {
                for l in 0..net.num_layers() {
                    out.push((format!("stage{s}.coupling{j}.conv{l}.weight"), Arc::clone(net.weight(l))));
                    out.push((format!("stage{s}.coupling{j}.conv{l}.bias"), Arc::clone(net.bias(l))));
                }
            }
        }
        for (i, net) in self.factor_outs.iter().enumerate() {
            for l in 0..net.num_layers() {
                out.push((format!("factor_out{i}.conv{l}.weight"), Arc::clone(net.weight(l))));
                out.push((format!("factor_out{i}.conv{l}.bias"), Arc::clone(net.bias(l))));
            }
        }
        out.push(("base.mu".to_string(), Arc::clone(&self.base_mu)));
        out.push(("base.log_s".to_string(), Arc::clone(&self.base_log_s)));
        out
    }

    /// Mutable parameter enumeration in the same order as
    /// [`FlowModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Arc<Array>)> {
        let mut out: Vec<(String, &mut Arc<Array>)> = Vec::new();
        for (s, nets) in self.couplings.iter_mut().enumerate() {
            for (j, net) in nets.iter_mut().enumerate() {
                for (l, (w, b)) in net.weights.iter_mut().zip(net.biases.iter_mut()).enumerate() {
                    out.push((format!("stage{s}.coupling{j}.conv{l}.weight"), w));
                    out.push((format!("stage{s}.coupling{j}.conv{l}.bias"), b));
                }
            }
        }
        for (i, net) in self.factor_outs.iter_mut().enumerate() {
            for (l, (w, b)) in net.weights.iter_mut().zip(net.biases.iter_mut()).enumerate() {
                out.push((format!("factor_out{i}.conv{l}.weight"), w));
                out.push((format!("factor_out{i}.conv{l}.bias"), b));
            }
        }
        out.push(("base.mu".to_string(), &mut self.base_mu));
        out.push(("base.log_s".to_string(), &mut self.base_log_s));
        out
    }

    /// Kernels of the first factor-out stage's conditioning network — the
    /// matrices the spectral/Frobenius regularizer targets.
    pub fn first_factor_out_kernels(&self) -> Vec<Arc<Array>> {
        (0..self.factor_outs[0].num_layers())
            .map(|l| Arc::clone(self.factor_outs[0].weight(l)))
            .collect()
    }

    /// Canonical byte serialization of the model-defining sections
    /// (architecture + parameters, little-endian); the checkpoint embeds
    /// exactly these bytes, and the model fingerprint hashes them.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [
            self.arch.in_channels,
            self.arch.height,
            self.arch.width,
            self.arch.couplings_per_stage,
            self.arch.hidden_width,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (name, values) in self.named_params() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(values.shape().len() as u8);
            for d in values.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in values.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// 64-bit model fingerprint: the leading bytes of a SHA-256 over
    /// [`FlowModel::canonical_bytes`]. Embedded in every bitstream so decode
    /// can reject a mismatched model.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.canonical_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    fn check_input(&self, x: &Array) -> Result<()> {
        if x.shape() != self.arch.input_shape() {
            return Err(shape_err(
                "flow_forward",
                format!(
                    "input shape {:?} does not match model shape {:?}",
                    x.shape(),
                    self.arch.input_shape()
                ),
            ));
        }
        if !x.is_integer_valued() {
            return Err(domain_err(
                "flow_forward",
                "input must be integer-valued (quantized pixels)",
            ));
        }
        Ok(())
    }

    /// Binds parameters onto a tape. With `trainable = true` parameters are
    /// tracked leaves (their gradients are accumulated); otherwise they are
    /// constants and only non-parameter inputs receive gradients.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        let reg = |a: &Arc<Array>| {
            if trainable {
                tape.leaf_shared(Arc::clone(a))
            } else {
                tape.constant_shared(Arc::clone(a))
            }
        };
        BoundModel {
            arch: self.arch,
            couplings: self
                .couplings
                .iter()
                .map(|nets| nets.iter().map(|n| n.bind(tape, trainable)).collect())
                .collect(),
            factor_outs: self.factor_outs.iter().map(|n| n.bind(tape, trainable)).collect(),
            base_mu: reg(&self.base_mu),
            base_log_s: reg(&self.base_log_s),
        }
    }

    // ------------------------------------------------------------------
    // Pure-array inference paths (no tape, no gradients).
    // ------------------------------------------------------------------

    /// Applies coupling `layer` of `stage` in the forward direction.
    fn couple_array(&self, stage: usize, layer: usize, h: &Array) -> Result<Array> {
        let c = h.dims3()?.0;
        let half = c / 2;
        let swap = layer % 2 == 1;
        let (a, b) = h.split_channels(half)?;
        let (keep, moved) = if swap { (b, a) } else { (a, b) };
        let t = self.translation_array(stage, layer, &keep)?;
        let moved = moved.add(&t)?;
        if swap {
            moved.concat_channels(&keep)
        } else {
            keep.concat_channels(&moved)
        }
    }

    /// Applies coupling `layer` of `stage` in the inverse direction.
    fn decouple_array(&self, stage: usize, layer: usize, h: &Array) -> Result<Array> {
        let c = h.dims3()?.0;
        let half = c / 2;
        let swap = layer % 2 == 1;
        let (a, b) = h.split_channels(half)?;
        let (keep, moved) = if swap { (b, a) } else { (a, b) };
        let t = self.translation_array(stage, layer, &keep)?;
        let moved = moved.sub(&t)?;
        if swap {
            moved.concat_channels(&keep)
        } else {
            keep.concat_channels(&moved)
        }
    }

    /// The rounded, clamped integer translation predicted from `keep`.
    fn translation_array(&self, stage: usize, layer: usize, keep: &Array) -> Result<Array> {
        let cond = normalize_array(keep);
        let raw = self.couplings[stage][layer].forward_array(&cond)?;
        Ok(raw
            .clamp(-TRANSLATION_LIMIT, TRANSLATION_LIMIT)
            .round_half_away())
    }

    /// Conditionals `(mu, s)` for factor-out stage `idx` given the carried
    /// half `y` (pure arrays; this is what the decoder calls).
    pub fn factor_out_conditionals(&self, idx: usize, y: &Array) -> Result<(Array, Array)> {
        let out = self.factor_outs[idx].forward_array(&normalize_array(y))?;
        let zc = out.dims3()?.0 / 2;
        let (mu, log_s) = out.split_channels(zc)?;
        let s = log_s.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp();
        Ok((mu, s))
    }

    /// Base-prior conditionals `(mu, s)` for the final latent.
    pub fn base_conditionals(&self) -> (Array, Array) {
        let s = self
            .base_log_s
            .clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
            .exp();
        ((*self.base_mu).clone(), s)
    }

    /// Full inference forward pass: latents, coder conditionals, and the
    /// loss breakdown, without building a tape.
    pub fn forward_arrays(&self, x: &Array) -> Result<(LatentStack, Conditionals, LossBreakdown)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut zs: Vec<Array> = Vec::with_capacity(3);
        let mut conds: Vec<(Array, Array)> = Vec::with_capacity(3);
        for stage in 0..STAGES {
            if stage < 2 {
                h = h.space_to_depth()?;
            }
            for layer in 0..self.arch.couplings_per_stage {
                h = self.couple_array(stage, layer, &h)?;
            }
            if stage < 2 {
                let half = h.dims3()?.0 / 2;
                let (z, y) = h.split_channels(half)?;
                conds.push(self.factor_out_conditionals(stage, &y)?);
                zs.push(z);
                h = y;
            } else {
                conds.push(self.base_conditionals());
                zs.push(h.clone());
            }
        }
        let mut bits = [0.0; 3];
        for i in 0..3 {
            let (mu, s) = &conds[i];
            let z = &zs[i];
            let mut nats = 0.0;
            for j in 0..z.numel() {
                nats -= logistic::logpmf_unchecked(z.data()[j], mu.data()[j], s.data()[j]);
            }
            bits[i] = nats / LN_2;
        }
        let breakdown = LossBreakdown::from_bits(bits, self.arch.latent_dims());
        let mut it = zs.into_iter();
        let latents = LatentStack {
            z1: it.next().expect("three components"),
            z2: it.next().expect("three components"),
            z3: it.next().expect("three components"),
        };
        let mut ic = conds.into_iter();
        let conditionals = Conditionals {
            fo1: ic.next().expect("three components"),
            fo2: ic.next().expect("three components"),
            base: ic.next().expect("three components"),
        };
        Ok((latents, conditionals, breakdown))
    }

    /// Inverts stage 3 (the final coupling block): `z3 -> y2`.
    pub fn invert_stage3(&self, z3: &Array) -> Result<Array> {
        let mut h = z3.clone();
        for layer in (0..self.arch.couplings_per_stage).rev() {
            h = self.decouple_array(2, layer, &h)?;
        }
        Ok(h)
    }

    /// Inverts stage 2 given both halves: `(z2, y2) -> y1`.
    pub fn invert_stage2(&self, z2: &Array, y2: &Array) -> Result<Array> {
        let mut h = z2.concat_channels(y2)?;
        for layer in (0..self.arch.couplings_per_stage).rev() {
            h = self.decouple_array(1, layer, &h)?;
        }
        h.depth_to_space()
    }

    /// Inverts stage 1 given both halves: `(z1, y1) -> x`.
    pub fn invert_stage1(&self, z1: &Array, y1: &Array) -> Result<Array> {
        let mut h = z1.concat_channels(y1)?;
        for layer in (0..self.arch.couplings_per_stage).rev() {
            h = self.decouple_array(0, layer, &h)?;
        }
        h.depth_to_space()
    }

    /// Exact inverse of the forward pass: reconstructs the input tensor
    /// from its latent stack.
    pub fn inverse(&self, latents: &LatentStack) -> Result<Array> {
        let shapes = self.arch.latent_shapes();
        for (z, shape) in latents.components().iter().zip(shapes.iter()) {
            if z.shape() != *shape {
                return Err(shape_err(
                    "flow_inverse",
                    format!("latent shape {:?} does not match model shape {:?}", z.shape(), shape),
                ));
            }
            if !z.is_integer_valued() {
                return Err(domain_err("flow_inverse", "latents must be integer-valued"));
            }
        }
        let y2 = self.invert_stage3(&latents.z3)?;
        let y1 = self.invert_stage2(&latents.z2, &y2)?;
        self.invert_stage1(&latents.z1, &y1)
    }
}

/// Tape-bound view of the full model.
pub struct BoundModel<'t> {
    arch: FlowArch,
    couplings: Vec<Vec<BoundConvNet<'t>>>,
    factor_outs: Vec<BoundConvNet<'t>>,
    base_mu: Var<'t>,
    base_log_s: Var<'t>,
}

impl<'t> BoundModel<'t> {
    /// Parameter vars in [`FlowModel::named_params`] order (names elided;
    /// positions match). Used by the trainer to read gradients back.
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for nets in &self.couplings {
            for net in nets {
                for l in 0..net.weights.len() {
                    out.push(net.weights[l]);
                    out.push(net.biases[l]);
                }
            }
        }
        for net in &self.factor_outs {
            for l in 0..net.weights.len() {
                out.push(net.weights[l]);
                out.push(net.biases[l]);
            }
        }
        out.push(self.base_mu);
        out.push(self.base_log_s);
        out
    }

    fn couple(&self, stage: usize, layer: usize, h: Var<'t>) -> Result<Var<'t>> {
        let c = h.value().shape()[0];
        let half = c / 2;
        let swap = layer % 2 == 1;
        let (a, b) = h.split_channels(half)?;
        let (keep, moved) = if swap { (b, a) } else { (a, b) };
        let cond = normalize_var(keep);
        let t = self.couplings[stage][layer]
            .forward(cond)?
            .clamp(-TRANSLATION_LIMIT, TRANSLATION_LIMIT)
            .round_ste();
        let moved = moved.add(t)?;
        if swap {
            moved.concat_channels(keep)
        } else {
            keep.concat_channels(moved)
        }
    }

    /// Differentiable forward pass. `x` must hold integer pixel values; its
    /// shape must match the architecture.
    pub fn forward(&self, x: Var<'t>) -> Result<FlowForward<'t>> {
        {
            let xv = x.value();
            if xv.shape() != self.arch.input_shape() {
                return Err(shape_err(
                    "flow_forward",
                    format!(
                        "input shape {:?} does not match model shape {:?}",
                        xv.shape(),
                        self.arch.input_shape()
                    ),
                ));
            }
            if !xv.is_integer_valued() {
                return Err(domain_err(
                    "flow_forward",
                    "input must be integer-valued (quantized pixels)",
                ));
            }
        }
        let dims = self.arch.latent_dims();
        let mut h = x;
        let mut latents: Vec<Array> = Vec::with_capacity(3);
        let mut bpd_vars: Vec<Var<'t>> = Vec::with_capacity(3);
        for stage in 0..STAGES {
            if stage < 2 {
                h = h.space_to_depth()?;
            }
            for layer in 0..self.arch.couplings_per_stage {
                h = self.couple(stage, layer, h)?;
            }
            let (z, lp) = if stage < 2 {
                let half = h.value().shape()[0] / 2;
                let (z, y) = h.split_channels(half)?;
                let out = self.factor_outs[stage].forward(normalize_var(y))?;
                let zc = out.value().shape()[0] / 2;
                let (mu, log_s) = out.split_channels(zc)?;
                let log_s = log_s.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT);
                let lp = z.disc_logistic_logpmf(mu, log_s)?;
                h = y;
                (z, lp)
            } else {
                let log_s = self.base_log_s.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT);
                let lp = h.disc_logistic_logpmf(self.base_mu, log_s)?;
                (h, lp)
            };
            latents.push((*z.value()).clone());
            // nats -> bits -> per-dimension, as one scale factor.
            let bpd = lp.sum().scale(-1.0 / (LN_2 * dims[stage] as f64));
            bpd_vars.push(bpd);
        }
        let bits: Vec<f64> = bpd_vars
            .iter()
            .zip(dims.iter())
            .map(|(v, d)| v.scalar_value().map(|b| b * *d as f64))
            .collect::<Result<_>>()?;
        let breakdown = LossBreakdown::from_bits([bits[0], bits[1], bits[2]], dims);
        let mut it = latents.into_iter();
        Ok(FlowForward {
            latents: LatentStack {
                z1: it.next().expect("three components"),
                z2: it.next().expect("three components"),
                z3: it.next().expect("three components"),
            },
            component_bpd: [bpd_vars[0], bpd_vars[1], bpd_vars[2]],
            breakdown,
        })
    }

    /// Differentiable total bpd: the dimension-weighted mean of the three
    /// component losses (the quantity training minimizes).
    pub fn total_bpd(&self, fwd: &FlowForward<'t>) -> Result<Var<'t>> {
        let dims = self.arch.latent_dims();
        let total: usize = dims.iter().sum();
        let mut acc: Option<Var<'t>> = None;
        for (v, d) in fwd.component_bpd.iter().zip(dims.iter()) {
            let term = v.scale(*d as f64 / total as f64);
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
        Ok(acc.expect("three components"))
    }
}

/// `(v - 128) / 128` on arrays.
fn normalize_array(v: &Array) -> Array {
    v.scale(1.0 / PIXEL_SCALE).add_scalar(-PIXEL_CENTER / PIXEL_SCALE)
}

/// `(v - 128) / 128` on tape vars.
fn normalize_var<'t>(v: Var<'t>) -> Var<'t> {
    v.scale(1.0 / PIXEL_SCALE).add_scalar(-PIXEL_CENTER / PIXEL_SCALE)
}
