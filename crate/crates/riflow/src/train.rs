//! Training loops: plain likelihood training plus the robustness recipes —
//! a spectral/Frobenius penalty on the first factor-out stage's kernels,
//! adversarial and mixed-batch training, and their combination.
//!
//! The optimizer is a hand-rolled adaptive-moment method (first/second
//! moment running averages, bias correction, per-epoch learning-rate
//! decay), chosen over fancier schedules because a fixed, fully specified
//! update rule is what makes training runs reproducible bit for bit.
//!
//! The penalty term is
//!
//! ```text
//! rho1 * sum_W ||W||_F^2  +  rho2 * sum_W sigma(W)^2
//! ```
//!
//! summed over the first factor-out stage's convolution kernels only, each
//! matricized to `(out, in*kh*kw)`. The spectral norm uses persistent
//! power-iteration state: warmed up on first use, then refreshed with a
//! single sweep per step, with the penalty differentiated through the
//! rank-one form `u^T W v` with frozen singular-vector estimates. When both
//! coefficients are zero the whole branch is skipped, so a regularized run
//! with zero weights reproduces the plain run exactly.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::attack::{awpgd_attack, pgd_attack, AttackConfig, AttackKind};
use crate::autodiff::Tape;
use crate::config::Config;
use crate::error::{domain_err, Error, Result};
use crate::flow::{metrics, FlowModel};
use crate::parallel::map_indices;
use crate::report::{sig6, CsvReport};
use crate::spectral::{matricize_kernel, spectral_norm, PowerIter};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Power-iteration sweeps on a kernel's first regularized step; afterwards
/// one sweep per step keeps the estimate current.
const POWER_WARMUP_SWEEPS: usize = 200;
/// Tolerance for fully-converged spectral norms in reported metrics.
const REPORT_SPECTRAL_TOL: f64 = 1e-6;
const COMPONENT_NAMES: [&str; 3] = ["fo1", "fo2", "mf"];

/// Training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Minimize the coding cost alone.
    Clean,
    /// Coding cost plus the factor-out kernel penalty.
    Ridf,
    /// Every batch replaced by gradient-attacked images.
    Adv,
    /// A fixed fraction of each batch attacked, the rest clean.
    Hybrid,
    /// Mixed batches and the kernel penalty together.
    RidfHybrid,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Clean => "clean",
            TrainMode::Ridf => "ridf",
            TrainMode::Adv => "adv",
            TrainMode::Hybrid => "hybrid",
            TrainMode::RidfHybrid => "ridf_hybrid",
        }
    }

    /// Fraction of each batch replaced by adversarial examples.
    fn adversarial_fraction(self, mixing: f64) -> f64 {
        match self {
            TrainMode::Clean | TrainMode::Ridf => 0.0,
            TrainMode::Adv => 1.0,
            TrainMode::Hybrid | TrainMode::RidfHybrid => mixing,
        }
    }

    /// Whether the kernel penalty is part of the loss.
    fn regularized(self) -> bool {
        matches!(self, TrainMode::Ridf | TrainMode::RidfHybrid)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(TrainMode::Clean),
            "ridf" => Ok(TrainMode::Ridf),
            "adv" => Ok(TrainMode::Adv),
            "hybrid" => Ok(TrainMode::Hybrid),
            "ridf_hybrid" => Ok(TrainMode::RidfHybrid),
            other => Err(domain_err(
                "train_mode",
                format!(
                    "unknown mode {other:?}; expected clean, ridf, adv, hybrid, or ridf_hybrid"
                ),
            )),
        }
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Frobenius coefficient of the kernel penalty.
    pub rho1: f64,
    /// Spectral coefficient of the kernel penalty.
    pub rho2: f64,
    /// Adversarial fraction for the hybrid modes.
    pub mixing: f64,
    /// Inner-maximization attack for adv/hybrid batches.
    pub attack: AttackConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Binds a run configuration to a mode and seed. The inner attack is
    /// plain gradient ascent.
    pub fn from_config(cfg: &Config, mode: TrainMode, seed: u64) -> Self {
        TrainConfig {
            mode,
            lr: cfg.lr,
            lr_decay: cfg.lr_decay,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            rho1: cfg.rho1,
            rho2: cfg.rho2,
            mixing: cfg.mixing,
            attack: AttackConfig::from_config(cfg, AttackKind::Pgd, seed),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(domain_err("train", "learning rate must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(domain_err("train", "lr decay must be in (0, 1]"));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(domain_err("train", "epochs and batch size must be at least 1"));
        }
        if self.rho1 < 0.0 || self.rho2 < 0.0 {
            return Err(domain_err("train", "penalty coefficients must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.mixing) {
            return Err(domain_err("train", "mixing fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One epoch's reported metrics. `wall_clock_seconds` is measured, so it is
/// the one column that varies between otherwise identical runs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: TrainMode,
    /// Mean bits/dim over the held-out clean images.
    pub clean_bpd: f64,
    /// Fully converged penalty value (0 in unregularized modes).
    pub penalty_value: f64,
    pub wall_clock_seconds: f64,
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub epochs: Vec<EpochMetrics>,
    /// Dataset indices used for gradient steps.
    pub train_indices: Vec<usize>,
    /// Dataset indices held out for the per-epoch evaluation. Empty for
    /// datasets too small to split; evaluation then covers every image.
    pub held_out: Vec<usize>,
}

/// Renders per-epoch metrics in the standard five-column layout.
pub fn epoch_report(epochs: &[EpochMetrics]) -> CsvReport {
    let mut report = CsvReport::new(&[
        "epoch",
        "mode",
        "clean_bpd",
        "penalty_value",
        "wall_clock_seconds",
    ]);
    for e in epochs {
        report
            .push_row(vec![
                e.epoch.to_string(),
                e.mode.to_string(),
                sig6(e.clean_bpd),
                sig6(e.penalty_value),
                sig6(e.wall_clock_seconds),
            ])
            .expect("column count fixed above");
    }
    report
}

/// The kernel penalty at full power-iteration convergence:
/// `rho1 * sum ||W||_F^2 + rho2 * sum sigma(W)^2`.
pub fn penalty_value<'a>(
    kernels: impl IntoIterator<Item = &'a Array>,
    rho1: f64,
    rho2: f64,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (ki, kernel) in kernels.into_iter().enumerate() {
        if rho1 > 0.0 {
            total += rho1 * kernel.frobenius_sq();
        }
        if rho2 > 0.0 {
            let sigma = spectral_norm(kernel, REPORT_SPECTRAL_TOL, seed.wrapping_add(ki as u64))?;
            total += rho2 * sigma * sigma;
        }
    }
    Ok(total)
}

/// The regularized objective: mean bits/dim over `batch` plus the kernel
/// penalty on the first factor-out stage. Pure evaluation (no gradients).
pub fn ridf_loss(
    model: &FlowModel,
    batch: &[Array],
    rho1: f64,
    rho2: f64,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(domain_err("ridf_loss", "empty batch"));
    }
    let mut bpd = 0.0;
    for x in batch {
        let (_, _, breakdown) = model.forward_arrays(x)?;
        bpd += breakdown.total_bpd;
    }
    bpd /= batch.len() as f64;
    let kernels = model.first_factor_out_kernels();
    Ok(bpd + penalty_value(kernels.iter().map(|k| k.as_ref()), rho1, rho2, seed)?)
}

/// Adaptive-moment state for one parameter tensor.
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Trains `model` on `dataset` under `cfg` and returns the trained model
/// with per-epoch held-out metrics.
pub fn train(model: FlowModel, dataset: &[Array], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(domain_err("train", "empty dataset"));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Deterministic 80/20 split; tiny datasets skip the split and evaluate
    // on the training images themselves.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let held_count = dataset.len() / 5;
    let held_out = order.split_off(order.len() - held_count);
    let train_indices = order;
    let eval_indices: &[usize] = if held_out.is_empty() { &train_indices } else { &held_out };

    // Parameter order is the model's canonical order; gradient slots, the
    // optimizer state, and the penalty targets are all keyed by it.
    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    let reg_positions: Vec<usize> = names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.starts_with("factor_out0.") && n.ends_with(".weight"))
        .map(|(k, _)| k)
        .collect();
    let mut adam: Vec<AdamSlot> = model
        .named_params()
        .iter()
        .map(|(_, p)| AdamSlot { m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] })
        .collect();
    let mut power: Vec<Option<PowerIter>> = vec![None; reg_positions.len()].into_iter().collect();
    let mut step = 0usize;

    let penalized = cfg.mode.regularized() && (cfg.rho1 > 0.0 || cfg.rho2 > 0.0);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let mut batch_order = train_indices.clone();
        batch_order.shuffle(&mut rng);

        for (batch_no, chunk) in batch_order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let samples = assemble_batch(&model, dataset, chunk, cfg)?;

            // Per-sample tapes; gradients merged by parameter position and
            // averaged over the batch.
            let inv_b = 1.0 / samples.len() as f64;
            let mut grads: Vec<Array> =
                model.named_params().iter().map(|(_, p)| Array::zeros(p.shape())).collect();
            for (slot, x) in samples.iter().enumerate() {
                let tape = Tape::new();
                let bound = model.bind(&tape, true);
                let xv = tape.constant(x.clone());
                let fwd = bound.forward(xv)?;
                for (ci, name) in COMPONENT_NAMES.iter().enumerate() {
                    let value = fwd.breakdown.component_bpd()[ci];
                    if !value.is_finite() {
                        return Err(Error::Train {
                            detail: format!(
                                "epoch {epoch}, batch {batch_no}, sample {slot}: \
                                 component {name} loss is not finite ({value})"
                            ),
                        });
                    }
                }
                let loss = bound.total_bpd(&fwd)?;
                tape.backward(loss)?;
                for (k, pv) in bound.param_vars().iter().enumerate() {
                    if let Some(g) = tape.grad(*pv) {
                        accumulate(&mut grads[k], &g, inv_b);
                    }
                }
            }

            if penalized {
                add_penalty_grads(
                    &model,
                    cfg,
                    &reg_positions,
                    &mut power,
                    &mut grads,
                    epoch,
                    batch_no,
                )?;
            }

            adam_update(&mut model, &mut adam, &grads, lr, step);
        }

        let clean_bpd = mean_bpd(&model, dataset, eval_indices)?;
        let penalty = if penalized {
            let kernels = model.first_factor_out_kernels();
            penalty_value(kernels.iter().map(|k| k.as_ref()), cfg.rho1, cfg.rho2, cfg.seed)?
        } else {
            0.0
        };
        epochs.push(EpochMetrics {
            epoch,
            mode: cfg.mode,
            clean_bpd,
            penalty_value: penalty,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome { model, epochs, train_indices, held_out })
}

/// Builds one batch: the leading `round(fraction * len)` slots are attacked
/// (in parallel, merged by index), the rest used as-is.
fn assemble_batch(
    model: &FlowModel,
    dataset: &[Array],
    chunk: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<Array>> {
    let fraction = cfg.mode.adversarial_fraction(cfg.mixing);
    let adv_count = (fraction * chunk.len() as f64).round() as usize;
    map_indices(chunk.len(), |i| {
        let x = &dataset[chunk[i]];
        if i < adv_count {
            pgd_attack(model, x, &cfg.attack).map(|outcome| outcome.x_adv)
        } else {
            Ok(x.clone())
        }
    })
    .into_iter()
    .collect()
}

/// Differentiates the kernel penalty on its own tape and adds the gradients
/// into the matching parameter slots (unaveraged; the penalty is per step,
/// not per sample).
fn add_penalty_grads(
    model: &FlowModel,
    cfg: &TrainConfig,
    reg_positions: &[usize],
    power: &mut [Option<PowerIter>],
    grads: &mut [Array],
    epoch: usize,
    batch_no: usize,
) -> Result<()> {
    let kernels = model.first_factor_out_kernels();
    let tape = Tape::new();
    let mut penalty: Option<crate::autodiff::Var<'_>> = None;
    let mut leaves = Vec::with_capacity(kernels.len());
    for (ki, kernel) in kernels.iter().enumerate() {
        let w = matricize_kernel(kernel)?;
        let wv = tape.leaf(w.clone());
        leaves.push(wv);
        let mut term = None;
        if cfg.rho1 > 0.0 {
            term = Some(wv.mul(wv)?.sum().scale(cfg.rho1));
        }
        if cfg.rho2 > 0.0 {
            let (rows, cols) = w.dims2()?;
            let fresh = power[ki].is_none();
            let state = power[ki].get_or_insert_with(|| {
                PowerIter::new(rows, cols, cfg.seed.wrapping_add(ki as u64))
            });
            let sweeps = if fresh { POWER_WARMUP_SWEEPS } else { 1 };
            let sigma = state.refine(&w, sweeps)?;
            // Cheap internal consistency check: no singular value exceeds
            // the Frobenius norm.
            assert!(
                sigma <= w.frobenius_sq().sqrt() + 1e-9,
                "power iteration overshot the Frobenius bound"
            );
            let sv = wv.uv_contract(state.u(), state.v())?;
            let spec = sv.mul(sv)?.scale(cfg.rho2);
            term = Some(match term {
                Some(t) => t.add(spec)?,
                None => spec,
            });
        }
        if let Some(t) = term {
            penalty = Some(match penalty {
                Some(p) => p.add(t)?,
                None => t,
            });
        }
    }
    let Some(penalty) = penalty else { return Ok(()) };
    let value = penalty.scalar_value()?;
    if !value.is_finite() {
        return Err(Error::Train {
            detail: format!("epoch {epoch}, batch {batch_no}: penalty is not finite ({value})"),
        });
    }
    tape.backward(penalty)?;
    for (ki, leaf) in leaves.iter().enumerate() {
        if let Some(g) = tape.grad(*leaf) {
            // The leaf is the matricized view; the parameter keeps its
            // 4-D kernel shape. Same element order either way.
            accumulate(&mut grads[reg_positions[ki]], &g, 1.0);
        }
    }
    Ok(())
}

fn accumulate(acc: &mut Array, g: &Array, scale: f64) {
    debug_assert_eq!(acc.numel(), g.numel(), "gradient/parameter size mismatch");
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b * scale;
    }
}

/// One adaptive-moment update across every parameter.
fn adam_update(model: &mut FlowModel, adam: &mut [AdamSlot], grads: &[Array], lr: f64, step: usize) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for (k, (_, param)) in model.params_mut().into_iter().enumerate() {
        let slot = &mut adam[k];
        let mut data = param.data().to_vec();
        for (i, g) in grads[k].data().iter().enumerate() {
            slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
            slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        let shape = param.shape().to_vec();
        *param = std::sync::Arc::new(Array::new(shape, data).expect("shape preserved"));
    }
}

/// Mean bits/dim of `model` over the indexed images.
pub fn mean_bpd(model: &FlowModel, dataset: &[Array], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(domain_err("eval", "no images to evaluate"));
    }
    let mut total = 0.0;
    for &i in indices {
        let (_, _, breakdown) = model.forward_arrays(&dataset[i])?;
        total += breakdown.total_bpd;
    }
    Ok(total / indices.len() as f64)
}

// ---------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------

/// Attacked compression ratio of one trained variant at one budget.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AblationCell {
    pub rho1: f64,
    pub rho2: f64,
    pub epsilon: f64,
    pub attacked_bpd: f64,
    pub attacked_cr: f64,
}

/// One trained penalty variant with its attacked-ratio curve.
#[derive(Debug, Clone)]
pub struct AblationVariant {
    pub rho1: f64,
    pub rho2: f64,
    pub model: FlowModel,
    pub cells: Vec<AblationCell>,
}

/// Trains the four penalty variants `(0,0)`, `(rho1,0)`, `(0,rho2)`,
/// `(rho1,rho2)` from the same initial model and reports each one's
/// attacked compression ratio over budgets 1..=5. All variants share the
/// same seed, so the `(0,0)` variant's trajectory is bit-identical to a
/// plain run.
pub fn ablation_suite(
    init: &FlowModel,
    dataset: &[Array],
    cfg: &TrainConfig,
) -> Result<Vec<AblationVariant>> {
    let pairs = [(0.0, 0.0), (cfg.rho1, 0.0), (0.0, cfg.rho2), (cfg.rho1, cfg.rho2)];
    let mut variants = Vec::with_capacity(pairs.len());
    for (rho1, rho2) in pairs {
        let sub = TrainConfig { mode: TrainMode::Ridf, rho1, rho2, ..*cfg };
        let outcome = train(init.clone(), dataset, &sub)?;
        let eval: &[usize] = if outcome.held_out.is_empty() {
            &outcome.train_indices
        } else {
            &outcome.held_out
        };
        let mut cells = Vec::with_capacity(5);
        for level in 1..=5u32 {
            let attack = AttackConfig {
                mode: AttackKind::AwPgd,
                epsilon: level as f64,
                ..cfg.attack
            };
            let mut bpd = 0.0;
            let mut cr = 0.0;
            for &i in eval {
                let out = awpgd_attack(&outcome.model, &dataset[i], &attack)?;
                bpd += out.attacked.total_bpd;
                cr += metrics(&out.attacked).cr;
            }
            cells.push(AblationCell {
                rho1,
                rho2,
                epsilon: level as f64,
                attacked_bpd: bpd / eval.len() as f64,
                attacked_cr: cr / eval.len() as f64,
            });
        }
        variants.push(AblationVariant { rho1, rho2, model: outcome.model, cells });
    }
    Ok(variants)
}

/// Renders the ablation grid, one row per (variant, budget).
pub fn ablation_report(variants: &[AblationVariant]) -> CsvReport {
    let mut report =
        CsvReport::new(&["rho1", "rho2", "epsilon", "attacked_bpd", "attacked_cr"]);
    for v in variants {
        for c in &v.cells {
            report
                .push_row(vec![
                    sig6(c.rho1),
                    sig6(c.rho2),
                    sig6(c.epsilon),
                    sig6(c.attacked_bpd),
                    sig6(c.attacked_cr),
                ])
                .expect("column count fixed above");
        }
    }
    report
}
