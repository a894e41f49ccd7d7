//! End-to-end integration across module boundaries: dataset files on disk,
//! a short training run, checkpoint persistence, compression with the
//! trained weights, and an attack on the result. Everything here exercises
//! the same call sequence the CLI performs, but in-process, so failures
//! localize to library seams rather than argument parsing.

use riflow::attack::{run_attack, AttackConfig, AttackKind};
use riflow::data::{load_dataset, save_batch, save_image, synthetic_textures};
use riflow::flow::{metrics, FlowArch, FlowModel};
use riflow::train::{train, TrainConfig, TrainMode};
use riflow::{checkpoint, codec};

fn tiny_train_config(mode: TrainMode, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        lr: 0.02,
        lr_decay: 0.95,
        epochs,
        batch_size: 4,
        rho1: 1.0,
        rho2: 0.25,
        mixing: 0.5,
        attack: AttackConfig {
            mode: AttackKind::Pgd,
            epsilon: 2.0,
            alpha: 1.0,
            iters: 2,
            loss_bound: 8.0,
            seed,
        },
        seed,
    }
}

/// Dataset from disk -> train -> checkpoint file -> reload -> compress ->
/// decompress -> attack, asserting the contracts at every seam.
#[test]
fn disk_to_attack_pipeline_preserves_every_contract() {
    let dir = tempfile::tempdir().expect("tempdir");

    // Write a mixed on-disk corpus: individual images plus a batch file.
    let shape = [1usize, 8, 8];
    let corpus = synthetic_textures(shape, 12, 40);
    for (i, x) in corpus.iter().take(4).enumerate() {
        save_image(dir.path().join(format!("img_{i:02}.pgm")), x).expect("writable tempdir");
    }
    let from_dir = load_dataset(dir.path().to_str().expect("utf-8 tempdir")).expect("4 images");
    assert_eq!(from_dir.len(), 4);

    let batch_path = dir.path().join("corpus.rifd");
    save_batch(&batch_path, &corpus).expect("writable tempdir");
    let dataset = load_dataset(batch_path.to_str().expect("utf-8 path")).expect("batch loads");
    assert_eq!(dataset.len(), corpus.len());

    // Train briefly; the run must improve (or at least not corrupt) the model.
    let arch = FlowArch::new(shape[0], shape[1], shape[2]).expect("8x8 divides by 4");
    let init = FlowModel::new(arch, 7).expect("static arch");
    let outcome = train(init, &dataset, &tiny_train_config(TrainMode::Clean, 2, 7))
        .expect("clean training runs");
    assert_eq!(outcome.epochs.len(), 2);
    assert!(outcome.epochs.iter().all(|e| e.clean_bpd.is_finite()));
    assert_eq!(outcome.epochs[0].penalty_value, 0.0, "clean mode is unregularized");
    // Deterministic 80/20 split over 12 images: floor(12/5) = 2 held out.
    assert_eq!(outcome.train_indices.len(), 10);
    assert_eq!(outcome.held_out.len(), 2);

    // Persist and reload; the reloaded model must be the same function.
    let ckpt_path = dir.path().join("model.rifm");
    checkpoint::save_file(&ckpt_path, &outcome.model, TrainMode::Clean.as_str(), 7)
        .expect("writable tempdir");
    let ckpt = checkpoint::load_file(&ckpt_path).expect("own format loads");
    assert_eq!(ckpt.mode, "clean");
    assert_eq!(ckpt.seed, 7);
    assert_eq!(ckpt.model.fingerprint(), outcome.model.fingerprint());

    // Compress every image with the trained weights; decode must be exact
    // and the latent decode must agree with a fresh forward pass.
    for x in &dataset {
        let (bytes, stats) = codec::compress(&ckpt.model, x).expect("in-range pixels");
        assert!(stats.nll_bits.is_finite());
        let back = codec::decompress(&ckpt.model, &bytes).expect("own bytes decode");
        assert_eq!(back.data(), x.data(), "lossless round trip");
        let latents = codec::decode_latents(&ckpt.model, &bytes).expect("latents decode");
        let (fresh, _, _) = ckpt.model.forward_arrays(x).expect("forward");
        for (a, b) in latents.components().iter().zip(fresh.components().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    // Attack the trained model; budget respected, loss moves the right way.
    let acfg = AttackConfig {
        mode: AttackKind::AwPgd,
        epsilon: 2.0,
        alpha: 1.0,
        iters: 3,
        loss_bound: 8.0,
        seed: 9,
    };
    let out = run_attack(&ckpt.model, &dataset[0], &acfg).expect("attack runs");
    assert!(out.linf() <= 2.0);
    assert!(out.x_adv.is_integer_valued());
    assert!(
        out.attacked.total_bpd >= out.clean.total_bpd - 1e-9,
        "ascent never ends below the clean loss: {} vs {}",
        out.attacked.total_bpd,
        out.clean.total_bpd
    );
    // The adversarial image still compresses losslessly.
    let (bytes, _) = codec::compress(&ckpt.model, &out.x_adv).expect("in-range pixels");
    let back = codec::decompress(&ckpt.model, &bytes).expect("own bytes decode");
    assert_eq!(back.data(), out.x_adv.data());
    let _ = metrics(&out.attacked);
}

/// The penalized mode trains end to end and reports a positive penalty.
#[test]
fn penalized_training_reports_penalty_and_stays_deterministic() {
    let shape = [1usize, 8, 8];
    let dataset = synthetic_textures(shape, 8, 51);
    let arch = FlowArch::new(shape[0], shape[1], shape[2]).expect("8x8 divides by 4");
    let cfg = tiny_train_config(TrainMode::Ridf, 2, 13);

    let run = |seed: u64| {
        let init = FlowModel::new(arch, seed).expect("static arch");
        train(init, &dataset, &cfg).expect("penalized training runs")
    };
    let a = run(13);
    let b = run(13);
    assert_eq!(a.model.fingerprint(), b.model.fingerprint(), "training is deterministic");
    assert!(a.epochs.iter().all(|e| e.penalty_value > 0.0), "penalty is reported");
    for (ea, eb) in a.epochs.iter().zip(&b.epochs) {
        assert_eq!(ea.clean_bpd.to_bits(), eb.clean_bpd.to_bits());
        assert_eq!(ea.penalty_value.to_bits(), eb.penalty_value.to_bits());
    }
}
