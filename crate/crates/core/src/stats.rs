//! Sample diagnostics: a dip-type unimodality test and a χ² goodness-of-fit
//! test for histograms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Dip statistic of a sample.
///
/// The empirical CDF (at mid-step heights) of a unimodal sample is convex left
/// of the mode and concave right of it. For every candidate mode `x_k` this
/// takes the largest gap between the CDF and its greatest convex minorant on
/// `[x_1, x_k]` and its least concave majorant on `[x_k, x_n]`; the dip is
/// half the smallest such gap over `k`.
pub fn dip_statistic(sample: &[f64]) -> f64 {
    let mut xs: Vec<f64> = sample.iter().copied().filter(|v| v.is_finite()).collect();
    let n = xs.len();
    if n < 3 {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let fs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();

    let left = prefix_convex_gaps(&xs, &fs);
    // The concave majorant of (x, f) on a suffix is the convex minorant of
    // (−x, −f) on the reversed prefix.
    let rx: Vec<f64> = xs.iter().rev().map(|v| -v).collect();
    let rf: Vec<f64> = fs.iter().rev().map(|v| -v).collect();
    let mut right = prefix_convex_gaps(&rx, &rf);
    right.reverse();

    left.iter()
        .zip(&right)
        .map(|(l, r)| l.max(*r))
        .fold(f64::INFINITY, f64::min)
        / 2.0
}

/// `gaps[k] = max_{i ≤ k} (f_i − GCM_{0..=k}(x_i))` for points sorted by x.
fn prefix_convex_gaps(xs: &[f64], fs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut gaps = Vec::with_capacity(n);
    let mut hull: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        // lower hull of points 0..=k, built incrementally (monotone chain)
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (xs[b] - xs[a]) * (fs[k] - fs[a]) - (fs[b] - fs[a]) * (xs[k] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
        let mut worst = 0.0_f64;
        let mut seg = 0;
        for i in 0..=k {
            while seg + 1 < hull.len() - 1 && xs[hull[seg + 1]] <= xs[i] {
                seg += 1;
            }
            let h = if hull.len() == 1 {
                fs[hull[0]]
            } else {
                let (a, b) = (hull[seg], hull[seg + 1]);
                let dx = xs[b] - xs[a];
                if dx == 0.0 {
                    fs[a].min(fs[b])
                } else {
                    fs[a] + (fs[b] - fs[a]) * (xs[i] - xs[a]) / dx
                }
            };
            worst = worst.max(fs[i] - h);
        }
        gaps.push(worst);
    }
    gaps
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipTest {
    pub statistic: f64,
    /// Fraction of uniform reference samples with a dip at least as large.
    pub p_value: f64,
    pub n: usize,
}

impl DipTest {
    /// Unimodality rejected at level `alpha`.
    pub fn is_multimodal(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Dip test calibrated against `reps` uniform samples of the same size (the
/// least favourable unimodal reference).
pub fn dip_test(sample: &[f64], reps: usize, seed: u64) -> DipTest {
    let statistic = dip_statistic(sample);
    let n = sample.len();
    let exceed = (0..reps)
        .into_par_iter()
        .filter(|&r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            dip_statistic(&u) >= statistic
        })
        .count();
    DipTest {
        statistic,
        p_value: (exceed as f64 + 1.0) / (reps as f64 + 1.0),
        n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson χ² test of `observed` counts against bin probabilities `probs`.
/// Neighbouring bins are pooled until each expects at least 5 counts.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> ChiSquareTest {
    assert_eq!(observed.len(), probs.len(), "one probability per bin");
    let total: u64 = observed.iter().sum();
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probs) {
        o_acc += o as f64;
        e_acc += p * total as f64;
        if e_acc >= 5.0 {
            pooled.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if o_acc > 0.0 || e_acc > 0.0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += o_acc;
                last.1 += e_acc;
            }
            None => pooled.push((o_acc, e_acc)),
        }
    }
    let statistic: f64 = pooled.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = pooled.len().saturating_sub(1).max(1);
    let p_value = ChiSquared::new(dof as f64)
        .map(|d| d.sf(statistic))
        .unwrap_or(f64::NAN);
    ChiSquareTest {
        statistic,
        dof,
        p_value,
    }
}

/// Counts of `sample` in `bins` equal-width bins on `[lo, hi)`; values outside
/// are dropped.
pub fn histogram(sample: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    for &v in sample {
        if v >= lo && v < hi {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn normal_sample(n: usize, mean: f64, std: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, std).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn dip_is_small_for_unimodal_and_large_for_two_modes() {
        let uni = normal_sample(800, 0.0, 1.0, 1);
        let mut bi = normal_sample(400, -2.0, 0.4, 2);
        bi.extend(normal_sample(400, 2.0, 0.4, 3));
        let du = dip_statistic(&uni);
        let db = dip_statistic(&bi);
        assert!(du < 0.03, "{du}");
        assert!(db > 0.08, "{db}");
    }

    #[test]
    fn dip_test_decisions() {
        let uni = normal_sample(800, 0.5, 0.7, 4);
        let t = dip_test(&uni, 100, 9);
        assert!(!t.is_multimodal(0.05), "{t:?}");
        let mut bi = normal_sample(400, -1.0, 0.2, 5);
        bi.extend(normal_sample(400, 1.0, 0.2, 6));
        let t = dip_test(&bi, 100, 9);
        assert!(t.is_multimodal(0.01), "{t:?}");
    }

    #[test]
    fn dip_of_tiny_samples() {
        assert_eq!(dip_statistic(&[1.0, 2.0]), 0.0);
        assert!(dip_statistic(&[1.0, 1.0, 1.0, 2.0]).is_finite());
    }

    #[test]
    fn chi_square_accepts_true_model() {
        let s = normal_sample(20_000, 0.0, 1.0, 7);
        let bins = 40;
        let (lo, hi) = (-4.0, 4.0);
        let counts = histogram(&s, lo, hi, bins);
        let n = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        let w = (hi - lo) / bins as f64;
        let probs: Vec<f64> = (0..bins)
            .map(|b| n.cdf(lo + w * (b + 1) as f64) - n.cdf(lo + w * b as f64))
            .collect();
        let kept: u64 = counts.iter().sum();
        let norm: f64 = probs.iter().sum();
        let probs: Vec<f64> = probs.iter().map(|p| p / norm).collect();
        let t = chi_square_gof(&counts, &probs);
        assert!(t.p_value > 0.001, "{t:?}");
        assert!(kept > 19_900);

        let shifted: Vec<f64> = s.iter().map(|v| v + 0.1).collect();
        let t = chi_square_gof(&histogram(&shifted, lo, hi, bins), &probs);
        assert!(t.p_value < 1e-6, "{t:?}");
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram(&[0.0, 0.5, 0.99, 1.0, -0.1], 0.0, 1.0, 2), vec![1, 2]);
    }
}
