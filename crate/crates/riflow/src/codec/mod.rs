//! Lossless tensor codec built on the integer flow.
//!
//! Compression runs the flow forward, then entropy-codes each latent
//! against its predicted discretized-logistic conditional. Decompression
//! replays the same conditionals in the opposite direction: the base
//! prior is known up front, so the final latent decodes first, the flow
//! inverts one stage, and the freed half conditions the next component —
//! exactly mirroring the factor-out structure.
//!
//! When a model fits poorly enough that coding would expand the data, the
//! stream degrades to a raw passthrough of the pixels, so the container
//! never costs more than the original tensor plus its fixed header.

pub mod bitstream;
pub mod cdf;
pub mod rans;

use crate::array::Array;
use crate::error::{domain_err, shape_err, Error, Result};
use crate::flow::{metrics, FlowModel, LatentStack, Metrics};

pub use bitstream::{Bitstream, PayloadMode, HEADER_LEN};
pub use cdf::QuantizedCdf;

/// Rate accounting for one compression call. Realized figures count payload
/// bytes only; the fixed header is reported separately so a raw passthrough
/// realizes a compression ratio of exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CompressStats {
    pub mode: PayloadMode,
    /// Payload size in bytes (coded words or raw pixels).
    pub payload_bytes: usize,
    /// Full stream size including the container header.
    pub total_bytes: usize,
    /// Number of escape-coded latents.
    pub escapes: usize,
    /// Model NLL of the tensor in bits.
    pub nll_bits: f64,
    /// Model-implied rate metrics (bits/dim and ratio).
    pub model: Metrics,
    /// Payload bits per input dimension.
    pub realized_bpd: f64,
    /// Raw bytes over payload bytes.
    pub realized_cr: f64,
}

/// Compresses an integer pixel tensor in `[0, 255]` whose shape matches the
/// model. Returns the serialized stream and its rate accounting.
pub fn compress(model: &FlowModel, x: &Array) -> Result<(Vec<u8>, CompressStats)> {
    check_pixel_range(x)?;
    let (latents, conds, breakdown) = model.forward_arrays(x)?;
    let dims = model.arch().dims();

    let mut enc = rans::RansEncoder::new();
    let mut escapes = 0usize;
    // The coder is LIFO: encode components and indices in exact reverse of
    // the decode order (which is z3 first, each component front-to-back).
    for (z, (mu, s)) in latents.components().iter().zip(conds.components().iter()) {
        for j in (0..z.numel()).rev() {
            let v = z.data()[j];
            let table = QuantizedCdf::build(mu.data()[j], s.data()[j])?;
            let vi = v as i64;
            if table.freq_of_value(vi).is_none() {
                escapes += 1;
            }
            table.encode_value(&mut enc, vi)?;
        }
    }
    let coded = rans::words_to_bytes(&enc.finish());

    let (mode, payload) = if coded.len() > dims {
        let raw = x.data().iter().map(|&v| v as u8).collect::<Vec<u8>>();
        (PayloadMode::Raw, raw)
    } else {
        (PayloadMode::Coded, coded)
    };
    let arch = model.arch();
    let stream = Bitstream {
        mode,
        shape: [arch.in_channels as u32, arch.height as u32, arch.width as u32],
        fingerprint: model.fingerprint(),
        payload,
    };
    let bytes = stream.to_bytes();
    let payload_bytes = stream.payload.len();
    let stats = CompressStats {
        mode,
        payload_bytes,
        total_bytes: bytes.len(),
        escapes,
        nll_bits: breakdown.total_bits(),
        model: metrics(&breakdown),
        realized_bpd: payload_bytes as f64 * 8.0 / dims as f64,
        realized_cr: dims as f64 / payload_bytes as f64,
    };
    Ok((bytes, stats))
}

/// Decompresses a stream produced by [`compress`] with the same model.
pub fn decompress(model: &FlowModel, bytes: &[u8]) -> Result<Array> {
    let stream = Bitstream::from_bytes(bytes)?;
    let arch = model.arch();
    let expect = [arch.in_channels as u32, arch.height as u32, arch.width as u32];
    if stream.shape != expect {
        return Err(shape_err(
            "decompress",
            format!("stream shape {:?} does not match model shape {expect:?}", stream.shape),
        ));
    }
    match stream.mode {
        PayloadMode::Raw => {
            let dims = arch.dims();
            if stream.payload.len() != dims {
                return Err(Error::Format {
                    what: format!(
                        "raw payload holds {} bytes for a {dims}-element tensor",
                        stream.payload.len()
                    ),
                });
            }
            Array::new(
                arch.input_shape().to_vec(),
                stream.payload.iter().map(|&b| b as f64).collect(),
            )
        }
        PayloadMode::Coded => {
            let found = stream.fingerprint;
            let expected = model.fingerprint();
            if found != expected {
                return Err(Error::FingerprintMismatch { expected, found });
            }
            let words = rans::bytes_to_words(&stream.payload)?;
            let mut dec = rans::RansDecoder::new(&words)?;
            let shapes = arch.latent_shapes();
            // Decode order mirrors the factor-out structure backwards: the
            // base-prior component is available immediately, and each
            // inverted stage conditions the next component.
            let (mu, s) = model.base_conditionals();
            let z3 = decode_component(&mut dec, &mu, &s, &shapes[2])?;
            let y2 = model.invert_stage3(&z3)?;
            let (mu, s) = model.factor_out_conditionals(1, &y2)?;
            let z2 = decode_component(&mut dec, &mu, &s, &shapes[1])?;
            let y1 = model.invert_stage2(&z2, &y2)?;
            let (mu, s) = model.factor_out_conditionals(0, &y1)?;
            let z1 = decode_component(&mut dec, &mu, &s, &shapes[0])?;
            dec.finish()?;
            let x = model.invert_stage1(&z1, &y1)?;
            check_pixel_range(&x).map_err(|_| Error::Format {
                what: "decoded tensor leaves the pixel range; stream corrupt".to_string(),
            })?;
            Ok(x)
        }
    }
}

/// Decompresses via the staged inverse but returns the latents too
/// (diagnostic hook used by tests).
pub fn decode_latents(model: &FlowModel, bytes: &[u8]) -> Result<LatentStack> {
    let x = decompress(model, bytes)?;
    let (latents, _, _) = model.forward_arrays(&x)?;
    Ok(latents)
}

fn decode_component(
    dec: &mut rans::RansDecoder,
    mu: &Array,
    s: &Array,
    shape: &[usize; 3],
) -> Result<Array> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for j in 0..n {
        let table = QuantizedCdf::build(mu.data()[j], s.data()[j])?;
        data.push(table.decode_value(dec)? as f64);
    }
    Array::new(shape.to_vec(), data)
}

fn check_pixel_range(x: &Array) -> Result<()> {
    if !x.is_integer_valued() {
        return Err(domain_err("codec", "tensor must hold integer pixel values"));
    }
    if x.data().iter().any(|&v| !(0.0..=255.0).contains(&v)) {
        return Err(domain_err("codec", "pixel values must lie in [0, 255]"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowArch;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> FlowArch {
        FlowArch {
            in_channels: 3,
            height: 8,
            width: 8,
            couplings_per_stage: 2,
            hidden_width: 8,
        }
    }

    fn image_near_mid(arch: &FlowArch, seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..arch.dims()).map(|_| rng.gen_range(100..156) as f64).collect();
        Array::new(arch.input_shape().to_vec(), data).unwrap()
    }

    #[test]
    fn roundtrip_is_lossless_across_models_and_images() {
        let arch = small_arch();
        for seed in 0..4u64 {
            let mut model = FlowModel::new(arch, seed).unwrap();
            model.perturb_params(seed + 50, 0.3);
            for img_seed in 0..4u64 {
                let x = image_near_mid(&arch, 100 + img_seed);
                let (bytes, stats) = compress(&model, &x).unwrap();
                assert_eq!(stats.total_bytes, bytes.len());
                let back = decompress(&model, &bytes).unwrap();
                assert_eq!(back, x, "model {seed} image {img_seed}");
            }
        }
    }

    #[test]
    fn coded_payload_stays_between_nll_and_its_small_overhead() {
        let arch = small_arch();
        let model = FlowModel::new(arch, 1).unwrap();
        for seed in 0..6u64 {
            let x = image_near_mid(&arch, seed);
            let (_, stats) = compress(&model, &x).unwrap();
            assert_eq!(stats.mode, PayloadMode::Coded, "mid-range pixels should code");
            let bits = stats.payload_bytes as f64 * 8.0;
            assert!(
                bits >= stats.nll_bits,
                "seed {seed}: {bits} bits beats the model NLL {}",
                stats.nll_bits
            );
            assert!(
                bits <= 1.01 * stats.nll_bits + 192.0,
                "seed {seed}: {bits} bits exceeds NLL {} plus slack",
                stats.nll_bits
            );
        }
    }

    #[test]
    fn hopeless_model_falls_back_to_raw_with_unit_ratio() {
        let arch = small_arch();
        let mut model = FlowModel::new(arch, 2).unwrap();
        // Collapse every prior to a spike: almost every latent escapes, so
        // coding must expand and the codec should pass pixels through raw.
        model.set_base_prior(0.0, -20.0);
        for idx in 0..2 {
            let net = model.factor_out_net_mut(idx);
            let out = net.bias(net.num_layers() - 1).numel();
            let half = out / 2;
            let mut bias = vec![0.0; half];
            bias.extend(std::iter::repeat(-20.0).take(half));
            net.set_final_bias(&bias).unwrap();
        }
        let x = image_near_mid(&arch, 7);
        let (bytes, stats) = compress(&model, &x).unwrap();
        assert_eq!(stats.mode, PayloadMode::Raw);
        assert_eq!(stats.payload_bytes, arch.dims());
        assert_eq!(stats.realized_cr, 1.0);
        assert!((stats.realized_bpd - 8.0).abs() < 1e-12);
        assert!(stats.escapes > 0);
        let back = decompress(&model, &bytes).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn decoding_with_a_different_model_is_refused() {
        let arch = small_arch();
        let model = FlowModel::new(arch, 3).unwrap();
        let x = image_near_mid(&arch, 9);
        let (bytes, stats) = compress(&model, &x).unwrap();
        assert_eq!(stats.mode, PayloadMode::Coded);
        let mut other = model.clone();
        other.perturb_params(99, 1e-6);
        match decompress(&other, &bytes) {
            Err(Error::FingerprintMismatch { .. }) => {}
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_truncation_and_corruption_are_rejected() {
        let arch = small_arch();
        let model = FlowModel::new(arch, 4).unwrap();
        let x = image_near_mid(&arch, 11);
        let (bytes, _) = compress(&model, &x).unwrap();
        // Model bound to a different spatial size.
        let big = FlowModel::new(FlowArch::new(3, 16, 16).unwrap(), 4).unwrap();
        assert!(matches!(decompress(&big, &bytes), Err(Error::Shape { .. })));
        // Truncations anywhere in the stream.
        for cut in [4, HEADER_LEN, bytes.len() - 3] {
            assert!(decompress(&model, &bytes[..cut]).is_err(), "cut at {cut}");
        }
        // A header that inflates its payload claim.
        let mut longer = bytes.clone();
        let claimed = u32::from_le_bytes(longer[26..30].try_into().unwrap());
        longer[26..30].copy_from_slice(&(claimed + 4).to_le_bytes());
        assert!(decompress(&model, &longer).is_err());
    }

    #[test]
    fn out_of_range_inputs_are_rejected_before_coding() {
        let arch = small_arch();
        let model = FlowModel::new(arch, 5).unwrap();
        let mut x = image_near_mid(&arch, 13);
        x.data_mut()[0] = 256.0;
        assert!(compress(&model, &x).is_err());
        x.data_mut()[0] = -1.0;
        assert!(compress(&model, &x).is_err());
        x.data_mut()[0] = 77.5;
        assert!(compress(&model, &x).is_err());
    }
}
