//! Randomized invariant checks over the public API.
//!
//! Each property encodes a contract the rest of the system leans on:
//! the transform is an exact integer bijection, the codec is lossless for
//! *any* in-range image (not just plausible ones), frequency quantization
//! always yields a complete table with no starved slot, image files round
//! trip bit-for-bit, attacks never exceed their budget, and checkpoints
//! reproduce the exact model. Case counts are tuned so the whole file runs
//! in seconds; the fixed seeds in `acceptance.rs` cover the large-volume
//! versions.

use proptest::prelude::*;
use riflow::attack::{run_attack, AttackConfig, AttackKind};
use riflow::codec::cdf::quantize_frequencies;
use riflow::codec::{self, QuantizedCdf};
use riflow::data::{read_image, write_image};
use riflow::flow::{FlowArch, FlowModel};
use riflow::{checkpoint, Array};

/// Strategy: integer pixel tensor of the given shape, values in 0..=255.
fn pixels(c: usize, h: usize, w: usize) -> impl Strategy<Value = Array> {
    prop::collection::vec(0u8..=255, c * h * w).prop_map(move |bytes| {
        let data: Vec<f64> = bytes.iter().map(|&b| b as f64).collect();
        Array::new(vec![c, h, w], data).expect("shape matches data")
    })
}

/// Strategy: a small flow model with randomized weights.
fn small_model() -> impl Strategy<Value = FlowModel> {
    (any::<u64>(), 0.0f64..0.3).prop_map(|(seed, scale)| {
        let arch = FlowArch::new(1, 4, 4).expect("static shape");
        let mut model = FlowModel::new(arch, seed).expect("static arch");
        if scale > 0.0 {
            model.perturb_params(seed ^ 0x9e37, scale);
        }
        model
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// forward then inverse is the identity on any integer image, exactly.
    #[test]
    fn flow_is_an_exact_integer_bijection(model in small_model(), x in pixels(1, 4, 4)) {
        let (latents, _, _) = model.forward_arrays(&x).unwrap();
        for z in latents.components() {
            prop_assert!(z.is_integer_valued(), "latents must stay integral");
        }
        let back = model.inverse(&latents).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// decompress(compress(x)) == x for arbitrary in-range images, even ones
    /// the model finds extremely surprising (the raw fallback still applies).
    #[test]
    fn codec_is_lossless_on_arbitrary_images(model in small_model(), x in pixels(1, 4, 4)) {
        let (bytes, stats) = codec::compress(&model, &x).unwrap();
        prop_assert_eq!(bytes.len(), stats.total_bytes);
        let back = codec::decompress(&model, &bytes).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// The quantizer distributes exactly `total` mass and starves no slot.
    #[test]
    fn quantized_frequencies_sum_exactly_and_never_starve(
        raw in prop::collection::vec(1e-12f64..1.0, 2..300),
        extra in 0usize..4,
    ) {
        let total = 1u32 << (12 + extra); // the codec's table size and larger
        let freqs = quantize_frequencies(&raw, total);
        prop_assert_eq!(freqs.len(), raw.len());
        prop_assert_eq!(freqs.iter().map(|&f| f as u64).sum::<u64>(), total as u64);
        prop_assert!(freqs.iter().all(|&f| f >= 1));
    }

    /// Every conditional CDF the codec can build is complete: frequencies
    /// sum to the table size and every in-window value is codable.
    #[test]
    fn conditional_cdf_tables_are_complete(mu in -64.0f64..320.0, s in 0.05f64..64.0) {
        let cdf = QuantizedCdf::build(mu, s).unwrap();
        let (lo, hi) = cdf.window();
        prop_assert!(lo <= hi);
        for v in [lo, (lo + hi) / 2, hi] {
            prop_assert!(cdf.freq_of_value(v).unwrap_or(0) >= 1);
        }
        prop_assert!(cdf.escape_freq() >= 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Netpbm serialization round-trips greyscale and RGB images exactly.
    #[test]
    fn image_files_round_trip(x in prop_oneof![pixels(1, 4, 4), pixels(3, 4, 4)]) {
        let bytes = write_image(&x).unwrap();
        let back = read_image(&bytes).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Checkpoints reproduce the exact model: same fingerprint, same
    /// compressed bytes for the same input.
    #[test]
    fn checkpoints_restore_the_exact_model(model in small_model(), x in pixels(1, 4, 4)) {
        let bytes = checkpoint::save(&model, "clean", 5);
        let ckpt = checkpoint::load(&bytes).unwrap();
        prop_assert_eq!(ckpt.model.fingerprint(), model.fingerprint());
        let (a, _) = codec::compress(&model, &x).unwrap();
        let (b, _) = codec::compress(&ckpt.model, &x).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    /// No attack ever exceeds its pixel budget, leaves the integer grid,
    /// or steps outside [0, 255].
    #[test]
    fn attacks_respect_budget_grid_and_range(
        x in pixels(1, 4, 4),
        kind_idx in 0usize..3,
        epsilon in 0.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let arch = FlowArch::new(1, 4, 4).unwrap();
        let model = FlowModel::new(arch, 3).unwrap();
        let mode = [AttackKind::Pgd, AttackKind::AwPgd, AttackKind::Random][kind_idx];
        let epsilon = epsilon.round();
        let cfg = AttackConfig { mode, epsilon, alpha: 1.0, iters: 2, loss_bound: 8.0, seed };
        let out = run_attack(&model, &x, &cfg).unwrap();
        prop_assert!(out.x_adv.is_integer_valued());
        prop_assert!(out.linf() <= epsilon + 1e-12);
        for (adv, clean) in out.x_adv.data().iter().zip(x.data()) {
            prop_assert!((adv - clean).abs() <= epsilon + 1e-12);
            prop_assert!((0.0..=255.0).contains(adv));
        }
    }
}
