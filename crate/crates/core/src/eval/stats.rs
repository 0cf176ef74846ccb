use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SeedStream;
use crate::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Percentile interval of sorted bootstrap statistics.
fn percentile_interval(mut stats: Vec<f64>, level: f64) -> Interval {
    stats.sort_by(f64::total_cmp);
    let b = stats.len();
    let alpha = (1.0 - level) / 2.0;
    let lo = ((alpha * b as f64).floor() as usize).min(b - 1);
    let hi = (((1.0 - alpha) * b as f64).ceil() as usize).clamp(1, b) - 1;
    Interval {
        lower: stats[lo],
        upper: stats[hi],
        level,
    }
}

fn check_level(resamples: usize, level: f64) -> Result<()> {
    if resamples == 0 {
        return Err(Error::invalid("need at least one bootstrap resample"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    Ok(())
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one value"));
    }
    check_level(resamples, level)?;
    let mut rng = SeedStream::new(seed).child("bootstrap").rng();
    let n = values.len();
    let stats = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    Ok(percentile_interval(stats, level))
}

/// `P(X > Y) + ½ P(X = Y)` over all run pairs of one task.
fn pairwise_win(a: &[f64], b: &[f64]) -> f64 {
    let mut wins = 0.0;
    for x in a {
        for y in b {
            wins += if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (a.len() * b.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub probability: f64,
    pub ci: Interval,
}

/// Mean over tasks of the probability that a run of A beats a run of B,
/// with a bootstrap interval that resamples runs within each task.
pub fn probability_of_improvement(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Improvement> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "score lists cover {} and {} tasks; need the same nonempty task set",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(Vec::is_empty) {
        return Err(Error::invalid("every task needs at least one run per algorithm"));
    }
    check_level(resamples, level)?;
    let point =
        |a: &[Vec<f64>], b: &[Vec<f64>]| a.iter().zip(b).map(|(x, y)| pairwise_win(x, y)).sum::<f64>() / a.len() as f64;
    let probability = point(a, b);
    let mut rng = SeedStream::new(seed).child("improvement").rng();
    let resample = |xs: &[f64], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).collect()
    };
    let stats = (0..resamples)
        .map(|_| {
            let ra: Vec<Vec<f64>> = a.iter().map(|x| resample(x, &mut rng)).collect();
            let rb: Vec<Vec<f64>> = b.iter().map(|x| resample(x, &mut rng)).collect();
            point(&ra, &rb)
        })
        .collect();
    Ok(Improvement {
        probability,
        ci: percentile_interval(stats, level),
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of at least 2"));
    }
    let r = pearson(&average_ranks(x), &average_ranks(y));
    if r.is_finite() {
        Ok(r)
    } else {
        Err(Error::invalid("spearman is undefined for a constant series"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;

    #[test]
    fn constant_values_give_a_point_interval() {
        let ci = bootstrap_ci(&[0.25; 17], 200, 0.95, 1).unwrap();
        assert_eq!((ci.lower, ci.upper), (0.25, 0.25));
        assert!(bootstrap_ci(&[], 10, 0.95, 0).is_err());
        assert_eq!(
            bootstrap_ci(&[1.0, 2.0], 50, 0.9, 3).unwrap(),
            bootstrap_ci(&[1.0, 2.0], 50, 0.9, 3).unwrap()
        );
    }

    #[test]
    fn width_shrinks_with_sample_size() {
        let mut rng = SeedStream::new(5).rng();
        let data: Vec<f64> = (0..1000).map(|_| standard_normal(&mut rng)).collect();
        let w: Vec<f64> = [10, 100, 1000]
            .iter()
            .map(|&n| bootstrap_ci(&data[..n], DEFAULT_RESAMPLES, 0.95, 0).unwrap().width())
            .collect();
        assert!(w[0] > w[1] && w[1] > w[2], "{w:?}");
    }

    #[test]
    fn improvement_edge_cases() {
        let ones = vec![vec![1.0; 5]; 3];
        let zeros = vec![vec![0.0; 5]; 3];
        assert_eq!(
            probability_of_improvement(&ones, &zeros, 100, 0.95, 0)
                .unwrap()
                .probability,
            1.0
        );
        let mixed = vec![vec![0.1, 0.7, 0.3], vec![0.9, 0.2]];
        assert_eq!(
            probability_of_improvement(&mixed, &mixed, 100, 0.95, 0)
                .unwrap()
                .probability,
            0.5
        );
        assert!(probability_of_improvement(&mixed, &ones, 100, 0.95, 0).is_err());
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // Hand-computed: ranks (1,2,3,4) vs (2,1,4,3), d² sum 4, 1 - 6·4/60.
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[20.0, 10.0, 40.0, 30.0]).unwrap() - 0.6).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
