//! Command-line front end tying the library into reproducible experiment
//! runs: training, coding, attacks, transfer studies, bound verification,
//! ablations, and evaluation, all seeded and emitting deterministic
//! artifacts (RIFM checkpoints, RIFL bitstreams, RIFD batches, CSV reports
//! whose metadata echoes the seed and configuration hash).

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use riflow::attack::{self, AttackConfig, AttackKind};
use riflow::checkpoint;
use riflow::codec;
use riflow::config::Config;
use riflow::data;
use riflow::flow::{metrics, FlowArch, FlowModel};
use riflow::report::{sig6, CsvReport};
use riflow::theory;
use riflow::theory::toys;
use riflow::train::{self, TrainConfig, TrainMode};

#[derive(Parser)]
#[command(
    name = "riflow",
    version,
    about = "Lossless integer-flow codec with attack, defense, and bound-verification tooling"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint plus an epoch CSV.
    Train(TrainArgs),
    /// Compress one image into a bitstream.
    Compress(CodecArgs),
    /// Decompress a bitstream back into an image.
    Decompress(CodecArgs),
    /// Attack a dataset's compressibility and tabulate the damage.
    Attack(AttackArgs),
    /// Measure how attack perturbations transfer across images.
    Universality(UniversalityArgs),
    /// Check the robustness bounds on toy flows; nonzero exit on violation.
    VerifyTheory(TheoryArgs),
    /// Train the regularization ablation grid and report attacked rates.
    Ablate(AblateArgs),
    /// Report model and realized rates of a dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment configuration file (key=value); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset: builtin name, directory, RIFD batch, or single image.
    #[arg(long, default_value = "synthetic-textures")]
    input: String,
    /// Training mode: clean | ridf | adv | hybrid | ridf_hybrid.
    #[arg(long, default_value = "clean")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for model.rifm and epochs.csv.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct CodecArgs {
    /// Model checkpoint (RIFM).
    #[arg(long)]
    model: PathBuf,
    /// Input file: image for compress, bitstream for decompress.
    #[arg(long)]
    input: PathBuf,
    /// Output file: bitstream for compress, image for decompress.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "synthetic-textures")]
    input: String,
    /// Attack to run: pgd | awpgd | random. Omit to run pgd and awpgd.
    #[arg(long)]
    mode: Option<String>,
    /// Budget in integer pixel levels; overrides the config value.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Ascent iterations; overrides the config value.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional directory for adversarial batches, traces, and the summary.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct UniversalityArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "synthetic-textures")]
    input: String,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Source images attacked per attack kind.
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV output path (the report always prints to stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryArgs {
    /// Perturbation trials per bound and radius.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV output path for the bound reports.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "synthetic-textures")]
    input: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV output path (the report always prints to stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "synthetic-textures")]
    input: String,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train(a) => run_train(a).context("train failed"),
        Cmd::Compress(a) => run_compress(a).context("compress failed"),
        Cmd::Decompress(a) => run_decompress(a).context("decompress failed"),
        Cmd::Attack(a) => run_attack_cmd(a).context("attack failed"),
        Cmd::Universality(a) => run_universality(a).context("universality failed"),
        Cmd::VerifyTheory(a) => run_verify_theory(a).context("verify-theory failed"),
        Cmd::Ablate(a) => run_ablate(a).context("ablate failed"),
        Cmd::Eval(a) => run_eval(a).context("eval failed"),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => {
            Config::from_file(p).with_context(|| format!("reading config {}", p.display()))
        }
        None => Ok(Config::default()),
    }
}

/// Builds the architecture for a dataset from its first image's shape.
fn arch_for(dataset: &[riflow::Array]) -> Result<FlowArch> {
    let shape = dataset[0].shape();
    if shape.len() != 3 {
        bail!("expected (C, H, W) images, got shape {shape:?}");
    }
    Ok(FlowArch::new(shape[0], shape[1], shape[2])?)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mode: TrainMode = a.mode.parse()?;
    let dataset = data::load_dataset(&a.input)?;
    let model = FlowModel::new(arch_for(&dataset)?, a.seed)?;
    let tc = TrainConfig::from_config(&cfg, mode, a.seed);
    let outcome = train::train(model, &dataset, &tc)?;

    fs::create_dir_all(&a.output)
        .with_context(|| format!("creating {}", a.output.display()))?;
    let ckpt_path = a.output.join("model.rifm");
    checkpoint::save_file(&ckpt_path, &outcome.model, mode.as_str(), a.seed)?;
    let mut report = train::epoch_report(&outcome.epochs);
    report.add_run_context(a.seed, &cfg);
    report.add_metadata("mode", mode);
    report.add_metadata("images", dataset.len());
    let csv_path = a.output.join("epochs.csv");
    report.write(&csv_path)?;

    let last = outcome.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs ({}) on {} images: clean {} bpd; wrote {} and {}",
        outcome.epochs.len(),
        mode,
        dataset.len(),
        sig6(last.clean_bpd),
        ckpt_path.display(),
        csv_path.display(),
    );
    Ok(())
}

fn run_compress(a: CodecArgs) -> Result<()> {
    let ckpt = checkpoint::load_file(&a.model)?;
    let image = data::load_image(&a.input)?;
    let (bytes, stats) = codec::compress(&ckpt.model, &image)?;
    fs::write(&a.output, &bytes).with_context(|| format!("writing {}", a.output.display()))?;
    println!(
        "payload {:?}: {} bytes total ({} payload), nll {} bits; \
         model {} bpd (cr {}), realized {} bpd (cr {})",
        stats.mode,
        stats.total_bytes,
        stats.payload_bytes,
        sig6(stats.nll_bits),
        sig6(stats.model.bpd),
        sig6(stats.model.cr),
        sig6(stats.realized_bpd),
        sig6(stats.realized_cr),
    );
    Ok(())
}

fn run_decompress(a: CodecArgs) -> Result<()> {
    let ckpt = checkpoint::load_file(&a.model)?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let image = codec::decompress(&ckpt.model, &bytes)?;
    data::save_image(&a.output, &image)?;
    let s = image.shape();
    println!("decoded {}x{}x{} image to {}", s[0], s[1], s[2], a.output.display());
    Ok(())
}

/// Per-attack aggregate over a dataset: model BPD plus realized CR, the
/// latter measured from actual payload bytes.
struct AttackRow {
    label: String,
    epsilon: f64,
    mean_bpd: f64,
    mean_cr: f64,
}

fn summary_table(rows: &[AttackRow]) -> String {
    let mut out = String::from(format!(
        "{:<8} {:>8} {:>12} {:>12}\n",
        "attack", "epsilon", "mean_bpd", "mean_cr"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:>8} {:>12} {:>12}\n",
            r.label,
            sig6(r.epsilon),
            sig6(r.mean_bpd),
            sig6(r.mean_cr),
        ));
    }
    out
}

fn summary_csv(rows: &[AttackRow], seed: u64, cfg: &Config) -> CsvReport {
    let mut csv = CsvReport::new(&["attack", "epsilon", "mean_bpd", "mean_cr"]);
    csv.add_run_context(seed, cfg);
    for r in rows {
        csv.push_row(vec![
            r.label.clone(),
            sig6(r.epsilon),
            sig6(r.mean_bpd),
            sig6(r.mean_cr),
        ])
        .expect("fixed column count");
    }
    csv
}

fn run_attack_cmd(a: AttackArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let ckpt = checkpoint::load_file(&a.model)?;
    let model = ckpt.model;
    let dataset = data::load_dataset(&a.input)?;
    let kinds: Vec<AttackKind> = match &a.mode {
        Some(s) => vec![s.parse()?],
        None => vec![AttackKind::Pgd, AttackKind::AwPgd],
    };

    // Clean baseline row: model BPD from the flow, CR from real payloads.
    let mut clean_bpd = 0.0;
    let mut clean_cr = 0.0;
    for x in &dataset {
        let (_, _, breakdown) = model.forward_arrays(x)?;
        clean_bpd += breakdown.total_bpd;
        clean_cr += codec::compress(&model, x)?.1.realized_cr;
    }
    let n = dataset.len() as f64;
    let mut rows = vec![AttackRow {
        label: "clean".into(),
        epsilon: 0.0,
        mean_bpd: clean_bpd / n,
        mean_cr: clean_cr / n,
    }];

    if let Some(dir) = &a.output {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let mut summaries = Vec::new();
    for kind in kinds {
        let mut acfg = AttackConfig::from_config(&cfg, kind, a.seed);
        if let Some(e) = a.epsilon {
            acfg.epsilon = e;
        }
        if let Some(i) = a.iters {
            acfg.iters = i;
        }
        let mut bpd = 0.0;
        let mut cr = 0.0;
        let mut adversarial = Vec::with_capacity(dataset.len());
        let mut first_trace: Option<CsvReport> = None;
        for (i, x) in dataset.iter().enumerate() {
            let per_image = AttackConfig { seed: a.seed.wrapping_add(i as u64), ..acfg };
            let outcome = attack::run_attack(&model, x, &per_image)?;
            bpd += outcome.attacked.total_bpd;
            cr += codec::compress(&model, &outcome.x_adv)?.1.realized_cr;
            if first_trace.is_none() {
                let mut trace = attack::trace_report(&outcome.trace);
                trace.add_run_context(a.seed, &cfg);
                trace.add_metadata("attack", kind);
                trace.add_metadata("epsilon", sig6(per_image.epsilon));
                first_trace = Some(trace);
            }
            summaries.push(attack::AttackSummary::new(kind, &per_image, &outcome));
            adversarial.push(outcome.x_adv);
        }
        rows.push(AttackRow {
            label: kind.to_string(),
            epsilon: acfg.epsilon,
            mean_bpd: bpd / n,
            mean_cr: cr / n,
        });
        if let Some(dir) = &a.output {
            data::save_batch(dir.join(format!("adv_{kind}.rifd")), &adversarial)?;
            first_trace
                .expect("datasets are non-empty")
                .write(dir.join(format!("trace_{kind}.csv")))?;
        }
    }

    print!("{}", summary_table(&rows));
    if let Some(dir) = &a.output {
        summary_csv(&rows, a.seed, &cfg).write(dir.join("summary.csv"))?;
        // Per-image outcome records for downstream tooling that prefers
        // structured data over the aggregate table.
        let json = serde_json::to_string_pretty(&summaries).context("serializing summaries")?;
        fs::write(dir.join("summary.json"), json + "\n")
            .with_context(|| format!("writing {}", dir.join("summary.json").display()))?;
    }
    Ok(())
}

fn run_universality(a: UniversalityArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let ckpt = checkpoint::load_file(&a.model)?;
    let dataset = data::load_dataset(&a.input)?;
    let mut acfg = AttackConfig::from_config(&cfg, AttackKind::Pgd, a.seed);
    if let Some(e) = a.epsilon {
        acfg.epsilon = e;
    }
    if let Some(i) = a.iters {
        acfg.iters = i;
    }
    let summaries = attack::universality_eval(&ckpt.model, &dataset, &acfg, a.repeats)?;
    let mut report = attack::universality_report(&summaries);
    report.add_run_context(a.seed, &cfg);
    report.add_metadata("images", dataset.len());
    print!("{}", report.render());
    if let Some(path) = &a.output {
        report.write(path)?;
    }
    Ok(())
}

fn run_verify_theory(a: TheoryArgs) -> Result<()> {
    let cond = toys::GaussianConditioner::random(6, 8, 0.6, a.seed);
    let drift_flow = toys::ToyAdditiveFlow::random(8, 3, 6, 0.6, a.seed.wrapping_add(1))?;
    let multi = toys::ToyMultiScaleFlow::random(8, 6, 0.5, a.seed.wrapping_add(2))?;

    let mut reports = Vec::new();
    for delta in [0.1, 1.0] {
        reports.push(theory::check_conditional_shift_bound(&cond, a.trials, delta, a.seed)?);
        let [perturbed, clean] =
            theory::check_latent_drift_bound(&drift_flow, a.trials, delta, a.seed)?;
        reports.push(perturbed);
        reports.push(clean);
        let composed = theory::check_composed_loss_bound(&multi, a.trials, delta, a.seed)?;
        println!("{composed}");
        reports.push(composed.report);
    }
    for r in &reports {
        println!("{r}");
    }
    let probe = theory::affine_vs_additive_probe(a.trials.min(1000), 0.5, a.seed)?;
    println!(
        "affine-vs-additive: L_hat {} vs {}; mean cost shift {} vs {}",
        sig6(probe.affine_l_hat),
        sig6(probe.additive_l_hat),
        sig6(probe.affine_nll_shift),
        sig6(probe.additive_nll_shift),
    );

    let mut csv = theory::bound_reports_csv(&reports);
    csv.add_metadata("seed", a.seed);
    csv.add_metadata("trials", a.trials);
    if let Some(path) = &a.output {
        csv.write(path)?;
    }

    let violations: usize = reports.iter().map(|r| r.violations).sum();
    if violations > 0 {
        bail!("{violations} bound violation(s) across {} reports", reports.len());
    }
    println!("all {} bound reports violation-free", reports.len());
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let dataset = data::load_dataset(&a.input)?;
    let init = FlowModel::new(arch_for(&dataset)?, a.seed)?;
    let tc = TrainConfig::from_config(&cfg, TrainMode::Ridf, a.seed);
    let variants = train::ablation_suite(&init, &dataset, &tc)?;
    let mut report = train::ablation_report(&variants);
    report.add_run_context(a.seed, &cfg);
    print!("{}", report.render());
    if let Some(path) = &a.output {
        report.write(path)?;
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load_file(&a.model)?;
    let dataset = data::load_dataset(&a.input)?;
    let mut model_bpd = 0.0;
    let mut model_cr = 0.0;
    let mut realized_bpd = 0.0;
    let mut realized_cr = 0.0;
    for x in &dataset {
        let (_, _, breakdown) = ckpt.model.forward_arrays(x)?;
        let m = metrics(&breakdown);
        model_bpd += m.bpd;
        model_cr += m.cr;
        let (_, stats) = codec::compress(&ckpt.model, x)?;
        realized_bpd += stats.realized_bpd;
        realized_cr += stats.realized_cr;
    }
    let n = dataset.len() as f64;
    println!("images       {}", dataset.len());
    println!("model_bpd    {}", sig6(model_bpd / n));
    println!("model_cr     {}", sig6(model_cr / n));
    println!("realized_bpd {}", sig6(realized_bpd / n));
    println!("realized_cr  {}", sig6(realized_cr / n));
    Ok(())
}
