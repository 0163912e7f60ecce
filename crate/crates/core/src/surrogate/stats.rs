//! Spearman rank correlation with average ranks for ties, plus p-values via
//! the t-distribution approximation or a permutation test (exact for small
//! n, sampled otherwise).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("length mismatch: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least {need} points, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("input is constant; ranks carry no information")]
    ConstantInput,
    #[error("non-finite input value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PValueMethod {
    /// Two-sided p from `t = rho sqrt((n-2)/(1-rho^2))` with n-2 dof.
    TApprox,
    /// Permutation distribution of rho: exact when n! is small, otherwise
    /// `samples` seeded draws.
    Permutation { samples: usize, seed: u64 },
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share rank mean of (i+1)..=(j+1).
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn validate(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew {
            need: 3,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

fn rho_of_ranks(rx: &[f64], ry: &[f64]) -> Result<f64, StatsError> {
    pearson(rx, ry).ok_or(StatsError::ConstantInput)
}

/// Spearman's rho with a t-approximation p-value.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<(f64, f64), StatsError> {
    spearman_rho_with(x, y, PValueMethod::TApprox)
}

pub fn spearman_rho_with(
    x: &[f64],
    y: &[f64],
    method: PValueMethod,
) -> Result<(f64, f64), StatsError> {
    validate(x, y)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = rho_of_ranks(&rx, &ry)?;
    let n = x.len();
    let p = match method {
        PValueMethod::TApprox => t_approx_p(rho, n),
        PValueMethod::Permutation { samples, seed } => {
            permutation_p(&rx, &ry, rho, samples, seed)?
        }
    };
    Ok((rho, p))
}

fn t_approx_p(rho: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let denom = 1.0 - rho * rho;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = rho * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

/// Exact enumeration when n! <= 40320, otherwise seeded sampling.
fn permutation_p(
    rx: &[f64],
    ry: &[f64],
    observed: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, StatsError> {
    let n = rx.len();
    let observed = observed.abs();
    let factorial: Option<usize> = (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k));
    if let Some(total) = factorial.filter(|t| *t <= 40_320) {
        let mut perm: Vec<f64> = ry.to_vec();
        perm.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut hits = 0usize;
        let mut count = 0usize;
        permute(&mut perm, 0, &mut |candidate| {
            count += 1;
            if let Ok(rho) = rho_of_ranks(rx, candidate) {
                if rho.abs() >= observed - 1e-12 {
                    hits += 1;
                }
            }
        });
        debug_assert_eq!(count, total);
        Ok(hits as f64 / total as f64)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = ry.to_vec();
        let mut hits = 0usize;
        for _ in 0..samples {
            shuffled.shuffle(&mut rng);
            if let Ok(rho) = rho_of_ranks(rx, &shuffled) {
                if rho.abs() >= observed - 1e-12 {
                    hits += 1;
                }
            }
        }
        Ok(hits as f64 / samples as f64)
    }
}

fn permute(values: &mut Vec<f64>, k: usize, visit: &mut impl FnMut(&[f64])) {
    if k == values.len() {
        visit(values);
        return;
    }
    for i in k..values.len() {
        values.swap(k, i);
        permute(values, k + 1, visit);
        values.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn perfect_monotone_relations() {
        let (rho, p) = spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_eq!(rho, -1.0);
        assert_eq!(p, 0.0);
        let (rho, _) = spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(rho, 1.0);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(
            average_ranks(&[5.0, 3.0, 3.0, 3.0, 1.0]),
            vec![5.0, 3.0, 3.0, 3.0, 1.0]
        );
    }

    // Independent oracle: rank via a different algorithm (pair counting),
    // then textbook Pearson.
    fn oracle_ranks(values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|&v| {
                let below = values.iter().filter(|&&w| w < v).count() as f64;
                let equal = values.iter().filter(|&&w| w == v).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
        let rx = oracle_ranks(x);
        let ry = oracle_ranks(y);
        let n = rx.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let dx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let dy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
        num / (dx * dy).sqrt()
    }

    #[test]
    fn matches_independent_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = rng.gen_range(3..40);
            // Quantized values so ties occur.
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64).collect();
            let oracle = oracle_spearman(&x, &y);
            if !oracle.is_finite() {
                continue;
            }
            match spearman_rho(&x, &y) {
                Ok((rho, _)) => {
                    assert!((rho - oracle).abs() < 1e-12, "rho {rho} vs oracle {oracle}")
                }
                Err(StatsError::ConstantInput) => assert!(oracle.is_nan()),
                Err(other) => panic!("unexpected error {other}"),
            }
        }
    }

    #[test]
    fn invariant_under_strictly_increasing_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(4..25);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (rho, _) = spearman_rho(&x, &y).unwrap();
            let x2: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let y2: Vec<f64> = y.iter().map(|v| 3.0 * v + 11.0).collect();
            let (rho2, _) = spearman_rho(&x2, &y2).unwrap();
            assert!((rho - rho2).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_and_degenerate_inputs_are_errors() {
        assert!(matches!(
            spearman_rho(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(StatsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            spearman_rho(&[1.0, 2.0], &[1.0, 2.0]),
            Err(StatsError::TooFew { .. })
        ));
        assert!(matches!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(StatsError::ConstantInput)
        ));
    }

    #[test]
    fn exact_permutation_p_for_tiny_n() {
        // For n=3 and a perfect correlation, exactly 2 of 6 permutations
        // reach |rho| = 1.
        let (rho, p) = spearman_rho_with(
            &[1.0, 2.0, 3.0],
            &[10.0, 20.0, 30.0],
            PValueMethod::Permutation {
                samples: 0,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(rho, 1.0);
        assert!((p - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn t_approx_p_is_small_for_strong_monotone_data() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| -v * v).collect();
        let (rho, p) = spearman_rho(&x, &y).unwrap();
        assert_eq!(rho, -1.0);
        assert!(p < 0.01);
    }
}
