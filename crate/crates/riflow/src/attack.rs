//! Compressibility attacks: gradient perturbations that inflate a model's
//! coding cost without visibly changing the image.
//!
//! Both gradient attacks walk the same loop: differentiate a loss through
//! the flow's straight-through forward pass with the parameters frozen,
//! take a signed step per pixel, project back into the `L-inf` budget
//! around the clean image, then re-round and re-clamp so every iterate is
//! a genuine image. They differ only in the loss, which both carry as the
//! three components' code lengths in *bits* (not bits/dim):
//!
//! * **Plain ascent** maximizes their unweighted sum — the image's total
//!   coding cost.
//! * **Adaptively weighted ascent** first caps each component at a ceiling
//!   (saturated components stop carrying gradient), then reweights by a
//!   softmax over the per-iteration *increments*: components that are still
//!   climbing get the gradient budget, components that plateaued or
//!   saturated fade out. Because increments are measured in bits, a
//!   component covering more latent dimensions — the first factor-out
//!   level holds half of them — naturally produces larger increments and
//!   draws weight first, which is the point: coding cost lives in bits,
//!   and the biggest component is where an attacker buys the most.
//!   Weights are detached constants, refreshed every iteration;
//!   iteration 0 is a gradient-free baseline at the clean image, so the
//!   first gradient step always starts from uniform weights.
//!
//! A seeded random-noise baseline and a perturbation-transfer evaluation
//! round out the toolbox.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::{sign_scalar, softmax, Array};
use crate::autodiff::Tape;
use crate::config::Config;
use crate::error::{domain_err, Result};
use crate::flow::{metrics, FlowModel, LossBreakdown};
use crate::report::{sig6, CsvReport};

/// Attack hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AttackConfig {
    /// Which attack to run.
    pub mode: AttackKind,
    /// `L-inf` budget in integer pixel levels.
    pub epsilon: f64,
    /// Step size in pixel levels.
    pub alpha: f64,
    /// Gradient iterations.
    pub iters: usize,
    /// Weighted-attack ceiling in bits per dimension of each component
    /// (a component's code length is capped at `loss_bound * its dims`).
    pub loss_bound: f64,
    /// Seed for randomized baselines.
    pub seed: u64,
}

impl AttackConfig {
    /// Pulls the attack knobs out of a run configuration.
    pub fn from_config(cfg: &Config, mode: AttackKind, seed: u64) -> Self {
        AttackConfig {
            mode,
            epsilon: cfg.attack_epsilon,
            alpha: cfg.attack_alpha,
            iters: cfg.attack_iters,
            loss_bound: cfg.loss_bound,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(domain_err("attack", "epsilon must be non-negative"));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(domain_err("attack", "alpha must be at least one pixel level"));
        }
        if self.iters < 1 {
            return Err(domain_err("attack", "need at least one iteration"));
        }
        if !(self.loss_bound > 0.0) {
            return Err(domain_err("attack", "loss bound must be positive"));
        }
        Ok(())
    }
}

/// Which attack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Plain projected gradient ascent on the summed component losses.
    Pgd,
    /// Adaptively weighted ascent on capped component losses.
    AwPgd,
    /// Seeded uniform noise of the same budget (sanity baseline).
    Random,
}

impl AttackKind {
    /// Canonical lowercase name, matching [`FromStr`](std::str::FromStr).
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Pgd => "pgd",
            AttackKind::AwPgd => "awpgd",
            AttackKind::Random => "random",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(AttackKind::Pgd),
            "awpgd" => Ok(AttackKind::AwPgd),
            "random" => Ok(AttackKind::Random),
            other => Err(domain_err(
                "attack_kind",
                format!("unknown attack {other:?}; expected pgd, awpgd, or random"),
            )),
        }
    }
}

/// One iteration's bookkeeping. Losses are evaluated at the iterate the
/// iteration started from; `linf` measures the perturbation after its step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AttackTraceRow {
    pub iteration: usize,
    /// Raw component code lengths `(fo1, fo2, mf)` in bits.
    pub component_bits: [f64; 3],
    /// Code lengths after the ceiling (equal to raw for the unweighted
    /// attack). The ceiling is `loss_bound` bits per dimension *of that
    /// component*, so a cap of 8 bits/dim caps the bits at `8 * dims_j`.
    pub clamped_bits: [f64; 3],
    /// Non-negative per-component increments since the previous iteration.
    pub deltas: [f64; 3],
    /// Loss weights used for this iteration's gradient.
    pub weights: [f64; 3],
    /// The scalar objective `sum_j w_j * clamped_j`.
    pub loss: f64,
    /// `max |x - x_clean|` after this iteration's step.
    pub linf: f64,
}

/// Full result of one attack run.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// The perturbed image (integer pixels in range).
    pub x_adv: Array,
    /// Loss breakdown at the clean image.
    pub clean: LossBreakdown,
    /// Loss breakdown at the perturbed image.
    pub attacked: LossBreakdown,
    /// Per-iteration log (row 0 is the gradient-free baseline).
    pub trace: Vec<AttackTraceRow>,
}

impl AttackOutcome {
    /// Final `L-inf` distance from the clean image.
    pub fn linf(&self) -> f64 {
        self.trace.last().map(|r| r.linf).unwrap_or(0.0)
    }
}

/// Flat summary for JSON reports.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AttackSummary {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub iters: usize,
    pub clean_bpd: f64,
    pub attacked_bpd: f64,
    pub clean_cr: f64,
    pub attacked_cr: f64,
    pub linf: f64,
}

impl AttackSummary {
    pub fn new(attack: AttackKind, cfg: &AttackConfig, outcome: &AttackOutcome) -> Self {
        AttackSummary {
            attack,
            epsilon: cfg.epsilon,
            iters: cfg.iters,
            clean_bpd: outcome.clean.total_bpd,
            attacked_bpd: outcome.attacked.total_bpd,
            clean_cr: metrics(&outcome.clean).cr,
            attacked_cr: metrics(&outcome.attacked).cr,
            linf: outcome.linf(),
        }
    }
}

/// Loss-weighting rule of the shared ascent loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Weighting {
    /// Unweighted sum of raw component losses.
    Sum,
    /// Ceiling-capped losses, softmax-of-increments weights.
    Adaptive,
    /// Fixed uniform weights on raw losses. Exists to demonstrate that the
    /// adaptive loop degenerates to plain ascent: `sign` erases the 1/3
    /// scale, so iterates match bit for bit. Only the reduction tests
    /// construct it, hence the dead-code allowance for library builds.
    #[allow(dead_code)]
    UniformNoClamp,
}

/// Plain projected gradient ascent on the summed component losses.
pub fn pgd_attack(model: &FlowModel, x0: &Array, cfg: &AttackConfig) -> Result<AttackOutcome> {
    gradient_attack(model, x0, cfg, Weighting::Sum)
}

/// Adaptively weighted projected gradient ascent on capped losses.
pub fn awpgd_attack(model: &FlowModel, x0: &Array, cfg: &AttackConfig) -> Result<AttackOutcome> {
    gradient_attack(model, x0, cfg, Weighting::Adaptive)
}

pub(crate) fn gradient_attack(
    model: &FlowModel,
    x0: &Array,
    cfg: &AttackConfig,
    rule: Weighting,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_pixels(x0)?;
    let (_, _, clean) = model.forward_arrays(x0)?;
    // Component sizes convert bits/dim losses into bits; the ceiling is
    // specified per dimension, so it converts the same way.
    let dims = model.arch().latent_dims().map(|d| d as f64);
    let caps = dims.map(|d| cfg.loss_bound * d);
    let to_bits = |b: &LossBreakdown| -> [f64; 3] {
        let bpd = b.component_bpd();
        [bpd[0] * dims[0], bpd[1] * dims[1], bpd[2] * dims[2]]
    };
    let cap = |b: &LossBreakdown| -> [f64; 3] {
        let bits = to_bits(b);
        match rule {
            Weighting::Adaptive => [
                bits[0].min(caps[0]),
                bits[1].min(caps[1]),
                bits[2].min(caps[2]),
            ],
            _ => bits,
        }
    };

    let mut trace = Vec::with_capacity(cfg.iters + 1);
    // Iteration 0: gradient-free baseline at the clean image. Its capped
    // losses seed the increment computation, which is why the first real
    // iteration (same image, zero increments) always runs uniform weights.
    let mut prev_clamped = cap(&clean);
    trace.push(AttackTraceRow {
        iteration: 0,
        component_bits: to_bits(&clean),
        clamped_bits: prev_clamped,
        deltas: [0.0; 3],
        weights: [f64::NAN; 3],
        loss: f64::NAN,
        linf: 0.0,
    });

    let mut x = x0.clone();
    for iteration in 1..=cfg.iters {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bound = model.bind(&tape, false);
        let fwd = bound.forward(xv)?;

        let clamped_vars = std::array::from_fn::<_, 3, _>(|j| {
            let bits = fwd.component_bpd[j].scale(dims[j]);
            match rule {
                Weighting::Adaptive => bits.clamp_max(caps[j]),
                _ => bits,
            }
        });
        let raw = to_bits(&fwd.breakdown);
        let clamped: Vec<f64> = clamped_vars
            .iter()
            .map(|v| v.scalar_value())
            .collect::<Result<_>>()?;
        let mut deltas = [0.0; 3];
        for j in 0..3 {
            deltas[j] = (clamped[j] - prev_clamped[j]).max(0.0);
        }
        let weights = match rule {
            Weighting::Sum => [1.0; 3],
            Weighting::UniformNoClamp => [1.0 / 3.0; 3],
            // Weights are detached constants: the softmax sees increment
            // *values*, never their graph.
            Weighting::Adaptive => {
                let w = softmax(&deltas)?;
                [w[0], w[1], w[2]]
            }
        };

        let mut loss = clamped_vars[0].scale(weights[0]);
        for j in 1..3 {
            loss = loss.add(clamped_vars[j].scale(weights[j]))?;
        }
        tape.backward(loss)?;
        let grad = tape.grad(xv).ok_or_else(|| {
            domain_err("attack", "input gradient missing after backward pass")
        })?;

        step_project_round(&mut x, x0, &grad, cfg);
        prev_clamped = [clamped[0], clamped[1], clamped[2]];
        trace.push(AttackTraceRow {
            iteration,
            component_bits: raw,
            clamped_bits: prev_clamped,
            deltas,
            weights,
            loss: loss.scalar_value()?,
            linf: linf_distance(&x, x0),
        });
    }

    let (_, _, attacked) = model.forward_arrays(&x)?;
    Ok(AttackOutcome { x_adv: x, clean, attacked, trace })
}

/// Signed gradient step, `L-inf` projection, re-round, re-clamp.
fn step_project_round(x: &mut Array, x0: &Array, grad: &Array, cfg: &AttackConfig) {
    for ((xi, &x0i), &gi) in x.data_mut().iter_mut().zip(x0.data()).zip(grad.data()) {
        let stepped = *xi + cfg.alpha * sign_scalar(gi);
        let projected = stepped.clamp(x0i - cfg.epsilon, x0i + cfg.epsilon);
        *xi = crate::array::round_half_away_scalar(projected).clamp(0.0, 255.0);
    }
}

/// Seeded uniform integer noise within the same budget.
pub fn random_noise_attack(model: &FlowModel, x0: &Array, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_pixels(x0)?;
    let (_, _, clean) = model.forward_arrays(x0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let e = cfg.epsilon.floor() as i64;
    let mut x = x0.clone();
    for v in x.data_mut() {
        let noise = rng.gen_range(-e..=e) as f64;
        *v = (*v + noise).clamp(0.0, 255.0);
    }
    let (_, _, attacked) = model.forward_arrays(&x)?;
    let dims = model.arch().latent_dims().map(|d| d as f64);
    let row = |iteration: usize, b: &LossBreakdown, linf: f64| AttackTraceRow {
        iteration,
        component_bits: std::array::from_fn(|j| b.component_bpd()[j] * dims[j]),
        clamped_bits: std::array::from_fn(|j| b.component_bpd()[j] * dims[j]),
        deltas: [0.0; 3],
        weights: [f64::NAN; 3],
        loss: f64::NAN,
        linf,
    };
    let linf = linf_distance(&x, x0);
    let trace = vec![row(0, &clean, 0.0), row(1, &attacked, linf)];
    Ok(AttackOutcome { x_adv: x, clean, attacked, trace })
}

/// Runs the attack named by `cfg.mode`.
pub fn run_attack(model: &FlowModel, x0: &Array, cfg: &AttackConfig) -> Result<AttackOutcome> {
    match cfg.mode {
        AttackKind::Pgd => pgd_attack(model, x0, cfg),
        AttackKind::AwPgd => awpgd_attack(model, x0, cfg),
        AttackKind::Random => random_noise_attack(model, x0, cfg),
    }
}

/// Renders an attack trace as a CSV report (no metadata; callers prepend
/// their run context).
pub fn trace_report(trace: &[AttackTraceRow]) -> CsvReport {
    let mut report = CsvReport::new(&[
        "iteration",
        "fo1_bits",
        "fo2_bits",
        "mf_bits",
        "fo1_clamped",
        "fo2_clamped",
        "mf_clamped",
        "fo1_delta",
        "fo2_delta",
        "mf_delta",
        "fo1_weight",
        "fo2_weight",
        "mf_weight",
        "loss",
        "linf",
    ]);
    for row in trace {
        let mut cells = vec![row.iteration.to_string()];
        cells.extend(row.component_bits.iter().map(|&v| sig6(v)));
        cells.extend(row.clamped_bits.iter().map(|&v| sig6(v)));
        cells.extend(row.deltas.iter().map(|&v| sig6(v)));
        cells.extend(row.weights.iter().map(|&v| sig6(v)));
        cells.push(sig6(row.loss));
        cells.push(sig6(row.linf));
        report.push_row(cells).expect("column count fixed above");
    }
    report
}

// ---------------------------------------------------------------------
// Perturbation transfer
// ---------------------------------------------------------------------

/// Mean-of-means transfer result for one attack at one budget.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TransferSummary {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub repeats: usize,
    /// Mean (over repeats) of the mean clean compression ratio of the
    /// non-source images.
    pub mean_clean_cr: f64,
    /// Same images after adding the source's perturbation.
    pub mean_transferred_cr: f64,
}

/// Measures whether a perturbation computed on one image degrades *other*
/// images. Each repeat picks a random source, attacks it, lifts the
/// perturbation `x_adv - x_source`, adds it to every other image in the
/// corpus (clamped back into pixel range), and records the mean compression
/// ratio of those images before and after. The procedure runs once per
/// gradient attack; each gets its own summary row.
pub fn universality_eval(
    model: &FlowModel,
    corpus: &[Array],
    cfg: &AttackConfig,
    repeats: usize,
) -> Result<Vec<TransferSummary>> {
    if corpus.len() < 2 {
        return Err(domain_err("universality", "need at least two images"));
    }
    if repeats == 0 {
        return Err(domain_err("universality", "need at least one repeat"));
    }
    let mut summaries = Vec::with_capacity(2);
    for attack in [AttackKind::Pgd, AttackKind::AwPgd] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut clean_means = 0.0;
        let mut transferred_means = 0.0;
        for _ in 0..repeats {
            let source = rng.gen_range(0..corpus.len());
            let outcome = match attack {
                AttackKind::Pgd => pgd_attack(model, &corpus[source], cfg)?,
                _ => awpgd_attack(model, &corpus[source], cfg)?,
            };
            let delta = outcome.x_adv.sub(&corpus[source])?;
            let mut clean_sum = 0.0;
            let mut transferred_sum = 0.0;
            for (t, target) in corpus.iter().enumerate() {
                if t == source {
                    continue;
                }
                let mut x = target.clone();
                for (xi, &d) in x.data_mut().iter_mut().zip(delta.data()) {
                    *xi = (*xi + d).clamp(0.0, 255.0);
                }
                let (_, _, clean) = model.forward_arrays(target)?;
                let (_, _, transferred) = model.forward_arrays(&x)?;
                clean_sum += metrics(&clean).cr;
                transferred_sum += metrics(&transferred).cr;
            }
            let others = (corpus.len() - 1) as f64;
            clean_means += clean_sum / others;
            transferred_means += transferred_sum / others;
        }
        summaries.push(TransferSummary {
            attack,
            epsilon: cfg.epsilon,
            repeats,
            mean_clean_cr: clean_means / repeats as f64,
            mean_transferred_cr: transferred_means / repeats as f64,
        });
    }
    Ok(summaries)
}

/// Renders transfer summaries as a CSV report, one row per attack/budget.
pub fn universality_report(summaries: &[TransferSummary]) -> CsvReport {
    let mut report = CsvReport::new(&[
        "attack",
        "epsilon",
        "repeats",
        "mean_clean_cr",
        "mean_transferred_cr",
    ]);
    for s in summaries {
        report
            .push_row(vec![
                s.attack.to_string(),
                sig6(s.epsilon),
                s.repeats.to_string(),
                sig6(s.mean_clean_cr),
                sig6(s.mean_transferred_cr),
            ])
            .expect("column count fixed above");
    }
    report
}

fn linf_distance(a: &Array, b: &Array) -> f64 {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_pixels(x: &Array) -> Result<()> {
    if !x.is_integer_valued() || x.data().iter().any(|&v| !(0.0..=255.0).contains(&v)) {
        return Err(domain_err("attack", "input must hold integer pixels in [0, 255]"));
    }
    Ok(())
}
