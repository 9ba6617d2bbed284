//! Executable oracles for the soft-loss update algebra: the external
//! signal `q = p_N + gamma p_s`, the probability-space gradient
//! `-(q + 2 gamma p)`, the corresponding update map, and the closed-form
//! stationary point of the soft loss under the simplex equality
//! constraint.
//!
//! The stationary point may have negative entries: the closed form
//! enforces only the sum constraint, not nonnegativity, so feasibility is
//! reported rather than silently repaired.

use crate::error::{ProcalError, Result};
use crate::math::ScoreVector;
use crate::memory_bank::MemoryBank;

/// The gradient-free part of a sample's calibrated target.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSignal {
    pub q: ScoreVector,
    pub gamma: f64,
    pub classes: usize,
}

/// The stationary point of the soft loss under the simplex equality
/// constraint, together with its Lagrange multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub p_star: Vec<f64>,
    pub lambda: f64,
    /// True when every entry is at least `-1e-12`, i.e. the closed form
    /// landed (numerically) inside the simplex.
    pub feasible: bool,
}

/// Builds `q_i = p_i^N + gamma p_i^s` for sample `i` from bank state.
///
/// Requires `gamma > 0` because the downstream fixed point divides by
/// `2 gamma`.
pub fn build_external_signal(bank: &MemoryBank, i: usize, gamma: f64) -> Result<ExternalSignal> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(ProcalError::Parameter(format!(
            "external signal requires gamma > 0, got {gamma}"
        )));
    }
    if i >= bank.len() {
        return Err(ProcalError::Parameter(format!(
            "sample index {i} out of range for bank of {}",
            bank.len()
        )));
    }
    let mut q = bank.neighborhood_probability(i).into_vec();
    for (qk, &sk) in q.iter_mut().zip(bank.source_prior(i).as_slice()) {
        *qk += gamma * sk;
    }
    Ok(ExternalSignal {
        q: ScoreVector::new(q)?,
        gamma,
        classes: bank.classes(),
    })
}

/// Probability-space gradient of the soft loss: `-(q + 2 gamma p)`.
pub fn soft_gradient(q: &ScoreVector, gamma: f64, p: &[f64]) -> Result<Vec<f64>> {
    if q.len() != p.len() {
        return Err(ProcalError::ShapeMismatch(format!(
            "q has {} entries, p has {}",
            q.len(),
            p.len()
        )));
    }
    Ok(q.as_slice()
        .iter()
        .zip(p)
        .map(|(&qk, &pk)| -(qk + 2.0 * gamma * pk))
        .collect())
}

/// One unconstrained descent step on the soft loss:
/// `p <- p + eta (q + 2 gamma p)`.
///
/// Iterating this map without projection diverges for `gamma > 0` (its
/// linear part has spectral radius `1 + 2 eta gamma`); it is the
/// per-step description, not a convergent scheme.
pub fn update_map(p: &[f64], q: &ScoreVector, gamma: f64, eta: f64) -> Result<Vec<f64>> {
    if eta < 0.0 || !eta.is_finite() {
        return Err(ProcalError::Parameter(format!(
            "step size eta must be non-negative, got {eta}"
        )));
    }
    if q.len() != p.len() {
        return Err(ProcalError::ShapeMismatch(format!(
            "q has {} entries, p has {}",
            q.len(),
            p.len()
        )));
    }
    Ok(p.iter()
        .zip(q.as_slice())
        .map(|(&pk, &qk)| pk + eta * (qk + 2.0 * gamma * pk))
        .collect())
}

/// Closed-form stationary point of the soft loss on the simplex:
///
/// `p*_k = (lambda - q_k) / (2 gamma)` with
/// `lambda = (2 gamma + sum(q)) / C`.
///
/// The result always satisfies `sum(p*) = 1`; entries may be negative,
/// reported through the `feasible` flag.
pub fn fixed_point(q: &ScoreVector, gamma: f64, classes: usize) -> Result<FixedPoint> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(ProcalError::Parameter(format!(
            "fixed point requires gamma > 0, got {gamma}"
        )));
    }
    if q.len() != classes {
        return Err(ProcalError::ShapeMismatch(format!(
            "q has {} entries for {classes} classes",
            q.len()
        )));
    }
    let lambda = (2.0 * gamma + q.sum()) / classes as f64;
    let p_star: Vec<f64> = q
        .as_slice()
        .iter()
        .map(|&qk| (lambda - qk) / (2.0 * gamma))
        .collect();
    let feasible = p_star.iter().all(|&x| x >= -1e-12);
    Ok(FixedPoint {
        p_star,
        lambda,
        feasible,
    })
}

/// Distance of `p` from the stationarity conditions
/// `-(q_k + 2 gamma p_k) + lambda = 0`.
///
/// Returns the least-squares multiplier `lambda_hat` (the mean of
/// `q_k + 2 gamma p_k`) and the maximum absolute residual; the residual
/// is zero exactly when `p` is stationary for some `lambda`.
pub fn stationarity_residual(p: &[f64], q: &ScoreVector, gamma: f64) -> Result<(f64, f64)> {
    if q.len() != p.len() {
        return Err(ProcalError::ShapeMismatch(format!(
            "q has {} entries, p has {}",
            q.len(),
            p.len()
        )));
    }
    if p.is_empty() {
        return Err(ProcalError::Parameter("stationarity of an empty vector".into()));
    }
    let stat: Vec<f64> = q
        .as_slice()
        .iter()
        .zip(p)
        .map(|(&qk, &pk)| qk + 2.0 * gamma * pk)
        .collect();
    let lambda_hat = stat.iter().sum::<f64>() / stat.len() as f64;
    let residual = stat
        .iter()
        .map(|&s| (lambda_hat - s).abs())
        .fold(0.0, f64::max);
    Ok((lambda_hat, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{FeatureVector, ProbVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn sv(xs: &[f64]) -> ScoreVector {
        ScoreVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn external_signal_symmetric_inputs() {
        // One uniform neighbor, uniform prior, gamma = 1, C = 2.
        let probs = vec![ProbVector::uniform(2); 2];
        let features = vec![
            FeatureVector::new(vec![1.0, 0.0]).unwrap(),
            FeatureVector::new(vec![0.9, 0.1]).unwrap(),
        ];
        let bank = MemoryBank::initialize(&probs, &features, 1).unwrap();
        let sig = build_external_signal(&bank, 0, 1.0).unwrap();
        assert_eq!(sig.q.as_slice(), &[1.0, 1.0]);
        assert!((sig.q.sum() - (1.0 + 1.0)).abs() <= 1e-9);
    }

    #[test]
    fn external_signal_rejects_nonpositive_gamma() {
        let probs = vec![ProbVector::uniform(2); 2];
        let features = vec![
            FeatureVector::new(vec![1.0, 0.0]).unwrap(),
            FeatureVector::new(vec![0.9, 0.1]).unwrap(),
        ];
        let bank = MemoryBank::initialize(&probs, &features, 1).unwrap();
        assert!(build_external_signal(&bank, 0, 0.0).is_err());
        assert!(build_external_signal(&bank, 0, -1.0).is_err());
    }

    #[test]
    fn external_signal_hand_arithmetic() {
        // p_N = [1.4, 0.6], p_s = [0.7, 0.3], gamma = 0.5 -> q = [1.75, 0.75].
        let probs = vec![
            ProbVector::new(vec![0.7, 0.3]).unwrap(),
            ProbVector::new(vec![0.6, 0.4]).unwrap(),
            ProbVector::new(vec![0.8, 0.2]).unwrap(),
        ];
        let features = vec![
            FeatureVector::new(vec![1.0, 0.0]).unwrap(),
            FeatureVector::new(vec![0.98, 0.2]).unwrap(),
            FeatureVector::new(vec![0.95, 0.3]).unwrap(),
        ];
        let bank = MemoryBank::initialize(&probs, &features, 2).unwrap();
        let sig = build_external_signal(&bank, 0, 0.5).unwrap();
        assert!((sig.q.as_slice()[0] - 1.75).abs() <= 1e-12);
        assert!((sig.q.as_slice()[1] - 0.75).abs() <= 1e-12);
    }

    #[test]
    fn soft_gradient_examples() {
        let g = soft_gradient(&sv(&[1.0, 0.0]), 0.5, &[0.5, 0.5]).unwrap();
        assert_eq!(g, vec![-1.5, -0.5]);
        let g0 = soft_gradient(&sv(&[1.0, 0.0]), 0.0, &[0.5, 0.5]).unwrap();
        assert_eq!(g0, vec![-1.0, 0.0]);
        let gz = soft_gradient(&sv(&[1.0, 0.0]), 2.0, &[0.0, 0.0]).unwrap();
        assert_eq!(gz, vec![-1.0, 0.0]);
    }

    #[test]
    fn update_map_zero_step_is_identity() {
        let p = [0.3, 0.7];
        let out = update_map(&p, &sv(&[1.0, 2.0]), 0.8, 0.0).unwrap();
        assert_eq!(out, p.to_vec());
    }

    #[test]
    fn update_map_hand_arithmetic() {
        // p + eta (q + 2 gamma p) = [0.5,0.5] + 0.1 ([1,1] + [0.5,0.5]).
        let out = update_map(&[0.5, 0.5], &sv(&[1.0, 1.0]), 0.5, 0.1).unwrap();
        assert!((out[0] - 0.65).abs() < 1e-15);
        assert!((out[1] - 0.65).abs() < 1e-15);
    }

    #[test]
    fn update_map_diverges_without_projection() {
        // Spectral radius 1 + 2 eta gamma > 1: the norm grows every step.
        let q = sv(&[0.6, 0.4]);
        let gamma = 1.0;
        let eta = 0.1;
        let mut p = vec![0.5, 0.5];
        let mut prev_norm = crate::math::dot(&p, &p).sqrt();
        for _ in 0..50 {
            p = update_map(&p, &q, gamma, eta).unwrap();
            let norm = crate::math::dot(&p, &p).sqrt();
            assert!(norm > prev_norm);
            prev_norm = norm;
        }
        assert!(prev_norm > 1e3);
    }

    #[test]
    fn update_map_is_descent_on_soft_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let c = rng.gen_range(2..8);
            let q = sv(&(0..c).map(|_| rng.gen_range(0.0..5.0)).collect::<Vec<_>>());
            let p: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gamma = rng.gen_range(0.05..3.0);
            let eta = rng.gen_range(0.0..0.5);
            let stepped = update_map(&p, &q, gamma, eta).unwrap();
            let grad = soft_gradient(&q, gamma, &p).unwrap();
            for k in 0..c {
                let descent = p[k] - eta * grad[k];
                assert!((stepped[k] - descent).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fixed_point_symmetric_q_gives_uniform() {
        let fp = fixed_point(&sv(&[0.5, 0.5]), 1.0, 2).unwrap();
        assert!((fp.lambda - 1.5).abs() < 1e-15);
        assert!((fp.p_star[0] - 0.5).abs() < 1e-15);
        assert!((fp.p_star[1] - 0.5).abs() < 1e-15);
        assert!(fp.feasible);
    }

    #[test]
    fn fixed_point_two_class_hand_example() {
        let fp = fixed_point(&sv(&[1.0, 0.0]), 0.5, 2).unwrap();
        assert!((fp.lambda - 1.0).abs() < 1e-15);
        assert!((fp.p_star[0] - 0.0).abs() < 1e-15);
        assert!((fp.p_star[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_can_leave_the_simplex() {
        // Skewed q yields a negative component: feasibility is reported,
        // never clipped.
        let fp = fixed_point(&sv(&[3.0, 0.0, 0.0]), 1.0, 3).unwrap();
        assert!((fp.lambda - 5.0 / 3.0).abs() < 1e-15);
        assert!((fp.p_star[0] + 2.0 / 3.0).abs() < 1e-12);
        assert!((fp.p_star[1] - 5.0 / 6.0).abs() < 1e-12);
        assert!((fp.p_star[2] - 5.0 / 6.0).abs() < 1e-12);
        assert!(!fp.feasible);
        let sum: f64 = fp.p_star.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fixed_point_rejects_nonpositive_gamma() {
        assert!(fixed_point(&sv(&[1.0, 0.0]), 0.0, 2).is_err());
    }

    #[test]
    fn stationarity_zero_at_fixed_point() {
        let q = sv(&[1.2, 0.3, 0.5]);
        let fp = fixed_point(&q, 0.7, 3).unwrap();
        let (lambda_hat, residual) = stationarity_residual(&fp.p_star, &q, 0.7).unwrap();
        assert!(residual <= 1e-10);
        assert!((lambda_hat - fp.lambda).abs() <= 1e-12);
    }

    #[test]
    fn stationarity_positive_off_fixed_point() {
        let q = sv(&[1.0, 0.0]);
        let (_, residual) = stationarity_residual(&[0.5, 0.5], &q, 1.0).unwrap();
        assert!(residual > 0.0);
    }

    #[test]
    fn stationarity_zero_for_constant_q_at_uniform() {
        let q = sv(&[0.8, 0.8, 0.8, 0.8]);
        let (_, residual) = stationarity_residual(&[0.25; 4], &q, 1.3).unwrap();
        assert!(residual <= 1e-15);
    }

    #[test]
    fn fixed_point_random_suite() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..2000 {
            let c = rng.gen_range(2..=10);
            let q = sv(&(0..c).map(|_| rng.gen_range(0.0..10.0)).collect::<Vec<_>>());
            let gamma = rng.gen_range(0.05..5.0);
            let fp = fixed_point(&q, gamma, c).unwrap();
            let sum: f64 = fp.p_star.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            let (_, residual) = stationarity_residual(&fp.p_star, &q, gamma).unwrap();
            assert!(residual <= 1e-10);
        }
    }

    #[test]
    fn fixed_point_is_permutation_equivariant() {
        let q = sv(&[2.0, 0.3, 1.1, 0.6]);
        let gamma = 0.9;
        let fp = fixed_point(&q, gamma, 4).unwrap();
        let perm = [3usize, 1, 0, 2];
        let q_perm = sv(&perm.iter().map(|&k| q.as_slice()[k]).collect::<Vec<_>>());
        let fp_perm = fixed_point(&q_perm, gamma, 4).unwrap();
        for (slot, &k) in perm.iter().enumerate() {
            assert_eq!(fp_perm.p_star[slot].to_bits(), fp.p_star[k].to_bits());
        }
    }

    #[test]
    fn constant_shift_of_q_moves_lambda_only() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..200 {
            let c = rng.gen_range(2..8);
            let q: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..5.0)).collect();
            let gamma = rng.gen_range(0.1..3.0);
            let shift = rng.gen_range(-10.0..10.0);
            let base = fixed_point(&sv(&q), gamma, c).unwrap();
            let shifted_q: Vec<f64> = q.iter().map(|&x| x + shift).collect();
            let shifted = fixed_point(&sv(&shifted_q), gamma, c).unwrap();
            assert!((shifted.lambda - (base.lambda + shift)).abs() <= 1e-12);
            for k in 0..c {
                assert!((shifted.p_star[k] - base.p_star[k]).abs() <= 1e-12);
            }
        }
    }
}
