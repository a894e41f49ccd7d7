//! Discretized logistic probability mass function.
//!
//! Integer latents are scored under a logistic distribution integrated over
//! unit bins: `P(z) = sigma((z + 0.5 - mu)/s) - sigma((z - 0.5 - mu)/s)`.
//! The log-mass is evaluated in a rearranged form that stays finite for
//! arbitrarily small scales and for latents far out in the tails, where the
//! naive `log(sigma - sigma)` would underflow to `log(0)`.
//!
//! With `a = (z - mu + 0.5)/s`, `b = (z - mu - 0.5)/s`, and `d = a - b = 1/s`:
//!
//! ```text
//! log P = -b + log(1 - exp(-d)) + log sigma(a) + log sigma(b)
//! ```
//!
//! since `sigma(a) - sigma(b) = (e^-b - e^-a) * sigma(a) * sigma(b)`. Each
//! term is evaluated with `softplus`/`exp_m1`, so the result is exact to
//! f64 precision across the whole domain. The same module exposes the
//! analytic partials used by the differentiation tape, keeping the forward
//! value and its adjoint in one place.

use crate::array::{sigmoid_scalar, softplus_scalar};
use crate::error::{domain_err, Result};

/// `log sigma(t)`, stable for any `t`.
#[inline]
fn log_sigmoid(t: f64) -> f64 {
    -softplus_scalar(-t)
}

/// Log-mass of the discretized logistic at integer `z` with location `mu`
/// and scale `s` (natural log). The scale must be positive and finite.
pub fn logpmf(z: f64, mu: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(domain_err(
            "disc_logistic_logpmf",
            format!("scale must be positive and finite, got {s}"),
        ));
    }
    Ok(logpmf_unchecked(z, mu, s))
}

/// [`logpmf`] without the scale check, for hot paths that already hold the
/// `s > 0` invariant structurally.
#[inline]
pub(crate) fn logpmf_unchecked(z: f64, mu: f64, s: f64) -> f64 {
    let a = (z - mu + 0.5) / s;
    let b = (z - mu - 0.5) / s;
    let d = a - b; // = 1/s > 0
    // log(1 - e^{-d}) via expm1 for accuracy when d is small.
    let log_bin = (-(-d).exp_m1()).ln();
    -b + log_bin + log_sigmoid(a) + log_sigmoid(b)
}

/// Log-mass together with its partials with respect to `a` and `b`
/// (the standardized bin edges). Used by the tape's adjoint rule:
///
/// * `d logP / dz     = (da + db) / s`
/// * `d logP / dmu    = -(da + db) / s`
/// * `d logP / dlog s = -a * da - b * db`
#[inline]
pub(crate) fn logpmf_parts(z: f64, mu: f64, s: f64) -> (f64, f64, f64) {
    let a = (z - mu + 0.5) / s;
    let b = (z - mu - 0.5) / s;
    let d = a - b;
    let log_bin = (-(-d).exp_m1()).ln();
    let log_p = -b + log_bin + log_sigmoid(a) + log_sigmoid(b);
    // sigma'(t) = sigma(t) * sigma(-t); both ratios are formed in log space
    // so the division by a tiny P never overflows.
    let d_a = (log_sigmoid(a) + log_sigmoid(-a) - log_p).exp();
    let d_b = -(log_sigmoid(b) + log_sigmoid(-b) - log_p).exp();
    (log_p, d_a, d_b)
}

/// Probability mass at integer `z` in linear space. Underflows to zero far
/// in the tails, which is the behaviour the frequency quantizer wants.
#[inline]
pub fn pmf(z: f64, mu: f64, s: f64) -> f64 {
    sigmoid_scalar((z - mu + 0.5) / s) - sigmoid_scalar((z - mu - 0.5) / s)
}

/// Total mass of the closed integer window `[lo, hi]`:
/// `sigma((hi + 0.5 - mu)/s) - sigma((lo - 0.5 - mu)/s)`.
#[inline]
pub fn window_mass(lo: i64, hi: i64, mu: f64, s: f64) -> f64 {
    sigmoid_scalar((hi as f64 + 0.5 - mu) / s) - sigmoid_scalar((lo as f64 - 0.5 - mu) / s)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: the direct two-sigmoid difference, evaluated
    /// without any of the rearrangement used by `logpmf`.
    fn naive_logpmf(z: f64, mu: f64, s: f64) -> f64 {
        (sigmoid_scalar((z - mu + 0.5) / s) - sigmoid_scalar((z - mu - 0.5) / s)).ln()
    }

    #[test]
    fn matches_frozen_high_precision_values() {
        // Reference values computed with 40-digit arithmetic.
        let got = logpmf(0.0, 0.0, 1.0).unwrap();
        assert!(
            (got - (-1.4068291137472953)).abs() < 1e-14,
            "logpmf(0,0,1) = {got}"
        );
        let got = logpmf(3.0, 1.0, 2.0).unwrap();
        assert!(
            (got - (-2.3215522170274614)).abs() < 1e-14,
            "logpmf(3,1,2) = {got}"
        );
    }

    #[test]
    fn agrees_with_naive_formula_where_naive_is_stable() {
        for z in -8..=8 {
            for &(mu, s) in &[(0.0, 1.0), (1.5, 0.7), (-2.0, 3.0), (0.25, 0.4)] {
                // The naive two-sigmoid difference cancels catastrophically
                // once both sigmoids saturate; it is only an oracle while the
                // bin keeps appreciable mass.
                if pmf(z as f64, mu, s) < 1e-5 {
                    continue;
                }
                let stable = logpmf(z as f64, mu, s).unwrap();
                let naive = naive_logpmf(z as f64, mu, s);
                assert!(
                    (stable - naive).abs() < 1e-10,
                    "z={z} mu={mu} s={s}: {stable} vs {naive}"
                );
            }
        }
    }

    #[test]
    fn mass_sums_to_one_over_wide_support() {
        let total: f64 = (-1000..=1000).map(|z| pmf(z as f64, 0.0, 1.0)).sum();
        assert!((total - 1.0).abs() < 1e-9, "total mass {total}");
    }

    #[test]
    fn stays_finite_deep_in_the_tails() {
        // Naive evaluation returns ln(0) = -inf here; the stable form keeps
        // the exact linear decay of the logistic tail.
        let lp = logpmf(255.0, 0.0, 0.1).unwrap();
        assert!(lp.is_finite());
        assert!(lp < -2000.0, "tail log-mass should be very negative: {lp}");
        let lp = logpmf(-30000.0, 0.0, 0.5).unwrap();
        assert!(lp.is_finite());
    }

    #[test]
    fn tiny_scale_concentrates_all_mass_on_the_mode() {
        let at_mode = logpmf(5.0, 5.0, 1e-9).unwrap();
        assert!(at_mode.abs() < 1e-12, "log P(mode) = {at_mode}");
        let next = logpmf(6.0, 5.0, 1e-9).unwrap();
        assert!(next < -1e8);
    }

    #[test]
    fn shifting_away_from_the_location_never_gains_mass() {
        for &s in &[0.3, 1.0, 4.0] {
            let mut prev = logpmf(0.0, 0.25, s).unwrap();
            for z in 1..20 {
                let cur = logpmf(z as f64, 0.25, s).unwrap();
                assert!(cur <= prev, "s={s} z={z}: {cur} > {prev}");
                prev = cur;
            }
        }
    }

    #[test]
    fn partials_match_central_finite_differences() {
        let h = 1e-6;
        for &(z, mu, s) in &[(0.0, 0.3, 1.0), (4.0, 1.0, 2.5), (-3.0, 0.0, 0.6)] {
            let (_, d_a, d_b) = logpmf_parts(z, mu, s);
            // d logP / dmu = -(d_a + d_b)/s.
            let num_mu = (logpmf_unchecked(z, mu + h, s) - logpmf_unchecked(z, mu - h, s)) / (2.0 * h);
            let ana_mu = -(d_a + d_b) / s;
            assert!(
                (num_mu - ana_mu).abs() < 1e-6,
                "mu partial at ({z},{mu},{s}): {ana_mu} vs {num_mu}"
            );
            // d logP / dlog s = -a*d_a - b*d_b.
            let ls = s.ln();
            let num_ls = (logpmf_unchecked(z, mu, (ls + h).exp())
                - logpmf_unchecked(z, mu, (ls - h).exp()))
                / (2.0 * h);
            let a = (z - mu + 0.5) / s;
            let b = (z - mu - 0.5) / s;
            let ana_ls = -a * d_a - b * d_b;
            assert!(
                (num_ls - ana_ls).abs() < 1e-6,
                "log-scale partial at ({z},{mu},{s}): {ana_ls} vs {num_ls}"
            );
        }
    }

    #[test]
    fn window_mass_matches_summed_pmf() {
        let summed: f64 = (-3..=7).map(|z| pmf(z as f64, 1.2, 1.7)).sum();
        let direct = window_mass(-3, 7, 1.2, 1.7);
        assert!((summed - direct).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_or_nonfinite_scale() {
        assert!(logpmf(0.0, 0.0, 0.0).is_err());
        assert!(logpmf(0.0, 0.0, -1.0).is_err());
        assert!(logpmf(0.0, 0.0, f64::NAN).is_err());
        assert!(logpmf(0.0, 0.0, f64::INFINITY).is_err());
    }
}
