//! Empirical quantiles and small summaries shared by the calibrators.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{domain, substream};

/// 1-based rank `ceil((1 - alpha) n)` clamped to `[1, n]`.
///
/// A relative slack of `1e-9` absorbs the rounding in `(1 - alpha) n` so that,
/// say, `alpha = 0.05, n = 100` gives rank 95 rather than 96.
pub fn upper_rank(n: usize, alpha: f64) -> usize {
    let x = (1.0 - alpha) * n as f64;
    let r = (x - 1e-9 * x.max(1.0)).ceil() as usize;
    r.clamp(1, n)
}

/// Empirical `(1 - alpha)` quantile: the order statistic at [`upper_rank`].
pub fn quantile(sample: &[f64], alpha: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut buf = sample.to_vec();
    Ok(select_rank(&mut buf, upper_rank(sample.len(), alpha)))
}

/// Several quantiles from one sort of the sample.
pub fn quantiles(sample: &[f64], alphas: &[f64]) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(alphas
        .iter()
        .map(|a| sorted[upper_rank(sorted.len(), *a) - 1])
        .collect())
}

fn select_rank(buf: &mut [f64], rank: usize) -> f64 {
    let (_, v, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// Bootstrap standard error of [`quantile`] from `resamples` resamples.
pub fn quantile_standard_error(sample: &[f64], alpha: f64, resamples: usize, seed: u64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    if resamples < 2 {
        return Ok(0.0);
    }
    let n = sample.len();
    let rank = upper_rank(n, alpha);
    let estimates: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, &[domain::QUANTILE_SE, b as u64]);
            let mut buf: Vec<f64> = (0..n).map(|_| sample[rng.random_range(0..n)]).collect();
            select_rank(&mut buf, rank)
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / resamples as f64;
    let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (resamples - 1) as f64;
    Ok(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.2).unwrap(), 4.0);
        assert_eq!(quantile(&[7.0], 0.3).unwrap(), 7.0);
        assert_eq!(quantile(&[7.0], 0.999).unwrap(), 7.0);
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&hundred, 0.05).unwrap(), 95.0);
        assert_eq!(quantile(&[], 0.05), Err(Error::EmptySample));
    }

    #[test]
    fn quantile_ignores_input_order() {
        let fwd: Vec<f64> = (1..=100).map(f64::from).collect();
        let mut rev = fwd.clone();
        rev.reverse();
        for a in [0.01, 0.1, 0.25, 0.5] {
            assert_eq!(quantile(&fwd, a).unwrap(), quantile(&rev, a).unwrap());
        }
    }

    #[test]
    fn ranks_for_common_levels() {
        assert_eq!(upper_rank(50_000, 0.05), 47_500);
        assert_eq!(upper_rank(10_000, 0.05), 9_500);
        assert_eq!(upper_rank(3, 0.05), 3);
        assert_eq!(upper_rank(10, 0.999), 1);
    }

    #[test]
    fn batch_quantiles_match_single() {
        let sample: Vec<f64> = (0..997).map(|i| ((i * 7919) % 997) as f64 * 0.5).collect();
        let alphas = [0.01, 0.025, 0.05, 0.1, 0.25];
        let batch = quantiles(&sample, &alphas).unwrap();
        for (a, q) in alphas.iter().zip(&batch) {
            assert_eq!(*q, quantile(&sample, *a).unwrap());
        }
    }

    #[test]
    fn standard_error_vanishes_for_point_mass() {
        let se = quantile_standard_error(&[2.0; 500], 0.05, 50, 1).unwrap();
        assert_eq!(se, 0.0);
    }
}
