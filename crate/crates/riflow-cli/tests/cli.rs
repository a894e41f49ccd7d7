//! End-to-end tests driving the installed binary: every subcommand, the
//! determinism contract of its artifacts, and the error paths.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use riflow::checkpoint;
use riflow::data::{save_image, synthetic_textures};
use riflow::flow::{FlowArch, FlowModel};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riflow"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed (status {:?}):\n{}\n{}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

/// Writes a small greyscale corpus as PGM files and returns the directory.
fn write_corpus(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let corpus_dir = dir.join("corpus");
    std::fs::create_dir_all(&corpus_dir).unwrap();
    for (i, x) in synthetic_textures([1, 8, 8], count, seed).iter().enumerate() {
        save_image(corpus_dir.join(format!("img{i:02}.pgm")), x).unwrap();
    }
    corpus_dir
}

/// A training configuration small enough to finish in well under a second.
fn write_toy_config(dir: &Path) -> PathBuf {
    let path = dir.join("toy.cfg");
    std::fs::write(
        &path,
        "lr=0.02\nlr_decay=0.95\nepochs=2\nbatch_size=4\n\
         attack_iters=2\nattack_epsilon=2\nattack_alpha=1\nloss_bound=8\n\
         rho1=2\nrho2=0.5\nmixing=0.5\n",
    )
    .unwrap();
    path
}

/// Trains a 2-epoch toy model through the binary; returns the checkpoint path.
fn train_toy_model(tmp: &Path, corpus: &Path, cfg: &Path, seed: u64, out: &str) -> PathBuf {
    let out_dir = tmp.join(out);
    let result = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        corpus.to_str().unwrap(),
        "--mode",
        "clean",
        "--seed",
        &seed.to_string(),
        "--output",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&result, "train");
    out_dir.join("model.rifm")
}

/// Drops the wall-clock column (the one legitimately nondeterministic cell)
/// from an epochs.csv body.
fn strip_wall_clock(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            if line.starts_with('#') {
                line.to_string()
            } else {
                let mut cells: Vec<&str> = line.split(',').collect();
                cells.pop();
                cells.join(",")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn training_is_deterministic_and_the_codec_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 6, 40);
    let cfg = write_toy_config(tmp.path());

    let model_a = train_toy_model(tmp.path(), &corpus, &cfg, 7, "run_a");
    let model_b = train_toy_model(tmp.path(), &corpus, &cfg, 7, "run_b");

    // Checkpoints are byte-identical across reruns of the same seed.
    let bytes_a = std::fs::read(&model_a).unwrap();
    let bytes_b = std::fs::read(&model_b).unwrap();
    assert_eq!(bytes_a, bytes_b, "seeded training must reproduce the checkpoint exactly");

    // Epoch reports agree except for wall-clock timings.
    let csv_a = std::fs::read_to_string(tmp.path().join("run_a/epochs.csv")).unwrap();
    let csv_b = std::fs::read_to_string(tmp.path().join("run_b/epochs.csv")).unwrap();
    assert_eq!(strip_wall_clock(&csv_a), strip_wall_clock(&csv_b));
    let data_rows = csv_a.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(data_rows, 1 + 2, "header plus one row per epoch");

    // Compress one corpus image and decompress it back, byte-exactly.
    let img = corpus.join("img00.pgm");
    let stream = tmp.path().join("img00.rifl");
    let restored = tmp.path().join("img00_restored.pgm");
    let compressed = run(&[
        "compress",
        "--model",
        model_a.to_str().unwrap(),
        "--input",
        img.to_str().unwrap(),
        "--output",
        stream.to_str().unwrap(),
    ]);
    assert_ok(&compressed, "compress");
    assert!(stdout(&compressed).contains("model"), "rate line expected");
    let decompressed = run(&[
        "decompress",
        "--model",
        model_a.to_str().unwrap(),
        "--input",
        stream.to_str().unwrap(),
        "--output",
        restored.to_str().unwrap(),
    ]);
    assert_ok(&decompressed, "decompress");
    assert_eq!(
        std::fs::read(&img).unwrap(),
        std::fs::read(&restored).unwrap(),
        "decompress(compress(x)) must reproduce the PGM byte-for-byte"
    );

    // Compressing twice yields the same bitstream.
    let stream2 = tmp.path().join("img00_again.rifl");
    let again = run(&[
        "compress",
        "--model",
        model_a.to_str().unwrap(),
        "--input",
        img.to_str().unwrap(),
        "--output",
        stream2.to_str().unwrap(),
    ]);
    assert_ok(&again, "second compress");
    assert_eq!(std::fs::read(&stream).unwrap(), std::fs::read(&stream2).unwrap());
}

/// Parses a `summary_table` stdout block into (label, epsilon, bpd, cr) rows.
fn parse_attack_table(text: &str) -> Vec<(String, f64, f64, f64)> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cells: Vec<&str> = l.split_whitespace().collect();
            assert_eq!(cells.len(), 4, "unexpected table row: {l:?}");
            (
                cells[0].to_string(),
                cells[1].parse().unwrap(),
                cells[2].parse().unwrap(),
                cells[3].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn attack_inflates_rates_and_writes_structured_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 6, 41);
    let cfg = write_toy_config(tmp.path());
    let model = train_toy_model(tmp.path(), &corpus, &cfg, 9, "train");

    // Zero budget: the attacked rows must match the clean row exactly.
    let frozen = run(&[
        "attack",
        "--model",
        model.to_str().unwrap(),
        "--input",
        corpus.to_str().unwrap(),
        "--mode",
        "awpgd",
        "--epsilon",
        "0",
        "--iters",
        "2",
    ]);
    assert_ok(&frozen, "zero-budget attack");
    let rows = parse_attack_table(&stdout(&frozen));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].0, "clean");
    assert_eq!(rows[1].0, "awpgd");
    assert_eq!(rows[0].2, rows[1].2, "zero budget must leave bpd untouched");
    assert_eq!(rows[0].3, rows[1].3, "zero budget must leave CR untouched");

    // Real budget, both gradient attacks, artifacts on disk.
    let out_dir = tmp.path().join("attack_out");
    let attacked = run(&[
        "attack",
        "--model",
        model.to_str().unwrap(),
        "--input",
        corpus.to_str().unwrap(),
        "--epsilon",
        "2",
        "--seed",
        "3",
        "--output",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&attacked, "attack");
    let rows = parse_attack_table(&stdout(&attacked));
    assert_eq!(rows.len(), 3, "clean plus both gradient attacks");
    let clean = &rows[0];
    for row in &rows[1..] {
        assert!(
            row.2 > clean.2,
            "{} should inflate model bpd: {} vs clean {}",
            row.0,
            row.2,
            clean.2
        );
        assert!(
            row.3 <= clean.3 + 1e-9,
            "{} should not improve realized CR: {} vs clean {}",
            row.0,
            row.3,
            clean.3
        );
    }

    for artifact in [
        "summary.csv",
        "summary.json",
        "adv_pgd.rifd",
        "adv_awpgd.rifd",
        "trace_pgd.csv",
        "trace_awpgd.csv",
    ] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }
    let trace = std::fs::read_to_string(out_dir.join("trace_awpgd.csv")).unwrap();
    let header = trace.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.starts_with("iteration,fo1_bits"), "trace header: {header}");

    // The JSON summary holds one record per (attack, image).
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    let records = json.as_array().expect("array of per-image records");
    assert_eq!(records.len(), 2 * 6);
    for r in records {
        assert!(r.get("attack").is_some());
        assert!(r["attacked_bpd"].as_f64().unwrap() >= 0.0);
        assert!(r["linf"].as_f64().unwrap() <= 2.0);
    }
}

#[test]
fn eval_reports_raw_passthrough_for_a_degenerate_model() {
    let tmp = tempfile::tempdir().unwrap();
    // A heavily perturbed untrained model assigns the corpus far more than
    // 8 bits/dim, so every image falls back to raw storage: realized CR 1.
    let arch = FlowArch::new(3, 16, 16).unwrap();
    let mut model = FlowModel::new(arch, 5).unwrap();
    model.perturb_params(6, 3.0);
    let ckpt = tmp.path().join("degenerate.rifm");
    checkpoint::save_file(&ckpt, &model, "clean", 5).unwrap();

    let out = run(&[
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--input",
        "synthetic-textures:4:11",
    ]);
    assert_ok(&out, "eval");
    let text = stdout(&out);
    let field = |name: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(name))
            .unwrap_or_else(|| panic!("missing {name} in:\n{text}"))
            .split_whitespace()
            .last()
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(field("model_bpd") > 8.0, "degenerate model should be expensive");
    assert!((field("realized_bpd") - 8.0).abs() < 1e-9, "raw fallback pays exactly 8 bpd");
    assert!((field("realized_cr") - 1.0).abs() < 1e-9, "raw fallback has CR 1");
}

#[test]
fn universality_reports_both_attacks_on_the_builtin_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 6, 42);
    let cfg = write_toy_config(tmp.path());
    let model = train_toy_model(tmp.path(), &corpus, &cfg, 11, "train");

    let csv = tmp.path().join("transfer.csv");
    let out = run(&[
        "universality",
        "--model",
        model.to_str().unwrap(),
        "--input",
        corpus.to_str().unwrap(),
        "--epsilon",
        "1",
        "--iters",
        "2",
        "--repeats",
        "2",
        "--seed",
        "13",
        "--output",
        csv.to_str().unwrap(),
    ]);
    assert_ok(&out, "universality");
    let text = stdout(&out);
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 3, "header plus one row per attack:\n{text}");
    assert!(data[1].starts_with("pgd,"));
    assert!(data[2].starts_with("awpgd,"));
    assert_eq!(
        std::fs::read_to_string(&csv).unwrap().trim_end(),
        text.trim_end(),
        "written report matches the printed one"
    );
}

#[test]
fn verify_theory_is_violation_free_and_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bounds.csv");
    let out = run(&[
        "verify-theory",
        "--trials",
        "200",
        "--seed",
        "3",
        "--output",
        csv.to_str().unwrap(),
    ]);
    assert_ok(&out, "verify-theory");
    assert!(stdout(&out).contains("violation-free"), "stdout:\n{}", stdout(&out));
    let report = std::fs::read_to_string(&csv).unwrap();
    assert!(report.contains("violations"), "bound CSV has a violations column");
}

#[test]
fn ablation_grid_prints_every_variant_and_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 6, 43);
    let cfg_path = tmp.path().join("ablate.cfg");
    // One epoch and two attack iterations keep the 4x5 grid quick.
    std::fs::write(
        &cfg_path,
        "lr=0.02\nlr_decay=0.95\nepochs=1\nbatch_size=4\n\
         attack_iters=2\nattack_epsilon=2\nattack_alpha=1\nloss_bound=8\n\
         rho1=2\nrho2=0.5\nmixing=0.5\n",
    )
    .unwrap();
    let out = run(&[
        "ablate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--input",
        corpus.to_str().unwrap(),
        "--seed",
        "17",
    ]);
    assert_ok(&out, "ablate");
    let text = stdout(&out);
    let data_rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(data_rows, 1 + 4 * 5, "header plus 4 variants x 5 budgets:\n{text}");
}

#[test]
fn malformed_inputs_exit_nonzero_with_context() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 4, 44);
    let cfg = write_toy_config(tmp.path());

    // Unknown configuration key.
    let bad_cfg = tmp.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "lr=0.02\nlearning_rate_decay=0.9\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--input",
        corpus.to_str().unwrap(),
        "--output",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "unknown config key must fail");
    assert!(stderr(&out).contains("unknown key"), "stderr:\n{}", stderr(&out));

    // Unknown training mode.
    let out = run(&[
        "train",
        "--input",
        corpus.to_str().unwrap(),
        "--mode",
        "robust",
        "--output",
        tmp.path().join("out2").to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "unknown mode must fail");

    // Missing checkpoint.
    let out = run(&[
        "eval",
        "--model",
        tmp.path().join("absent.rifm").to_str().unwrap(),
        "--input",
        corpus.to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "missing checkpoint must fail");

    // Malformed builtin dataset spec.
    let model = train_toy_model(tmp.path(), &corpus, &cfg, 19, "train");
    let out = run(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--input",
        "synthetic-textures:not-a-count",
    ]);
    assert!(!out.status.success(), "malformed dataset spec must fail");

    // Unknown attack kind.
    let out = run(&[
        "attack",
        "--model",
        model.to_str().unwrap(),
        "--input",
        corpus.to_str().unwrap(),
        "--mode",
        "fgsm",
    ]);
    assert!(!out.status.success(), "unknown attack kind must fail");
    assert!(stderr(&out).contains("expected pgd"), "stderr:\n{}", stderr(&out));

    // Corrupt bitstream.
    let garbage = tmp.path().join("garbage.rifl");
    std::fs::write(&garbage, b"not a bitstream").unwrap();
    let out = run(&[
        "decompress",
        "--model",
        model.to_str().unwrap(),
        "--input",
        garbage.to_str().unwrap(),
        "--output",
        tmp.path().join("restored.pgm").to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "corrupt bitstream must fail");
}
