//! Realism and accuracy metrics: jerk, jerk violation rate, Wasserstein-1
//! distance of acceleration samples, ADE/FDE, and histograms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Point;

/// Jerk magnitude above which a trajectory counts as uncomfortable (m/s^3).
pub const JERK_VIOLATION_THRESHOLD: f64 = 0.9;
/// Onset of jerk discomfort (m/s^3).
pub const JERK_COMFORT_ONSET: f64 = 0.3;

/// Euclidean norm of the third forward difference of positions, divided by `delta^3`.
pub fn jerk_profile(traj: &[Point], delta: f64) -> Result<Vec<f64>> {
    if traj.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "jerk needs at least 4 waypoints, got {}",
            traj.len()
        )));
    }
    let d3 = delta.powi(3);
    Ok(traj
        .windows(4)
        .map(|w| {
            let jx = w[3][0] - 3.0 * w[2][0] + 3.0 * w[1][0] - w[0][0];
            let jy = w[3][1] - 3.0 * w[2][1] + 3.0 * w[1][1] - w[0][1];
            jx.hypot(jy) / d3
        })
        .collect())
}

/// Uniform-bin histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` uniform bins over `[lo, hi]`; values outside are clamped into the end bins.
    pub fn with_range(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let bins = bins.max(1);
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let i = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self { edges, counts }
    }

    /// `bins` uniform bins over the observed range.
    pub fn new(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Self::with_range(values, bins, 0.0, 1.0);
        }
        Self::with_range(values, bins, lo, hi)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// CSV with header `bin_left,bin_right,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JerkStats {
    pub mean_abs_jerk: f64,
    /// Fraction of trajectories whose largest jerk magnitude exceeds the threshold.
    pub violation_rate: f64,
    pub threshold: f64,
    pub histogram: Histogram,
}

pub fn jerk_stats(
    trajs: &[Vec<Point>],
    delta: f64,
    threshold: f64,
    bins: usize,
) -> Result<JerkStats> {
    if trajs.is_empty() {
        return Err(Error::InvalidArgument(
            "jerk_stats of zero trajectories".into(),
        ));
    }
    let mut all = Vec::new();
    let mut violations = 0;
    for t in trajs {
        let prof = jerk_profile(t, delta)?;
        if prof.iter().copied().fold(0.0, f64::max) > threshold {
            violations += 1;
        }
        all.extend(prof);
    }
    // Sorted summation keeps the mean independent of trajectory order.
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(JerkStats {
        mean_abs_jerk: sorted.iter().sum::<f64>() / sorted.len() as f64,
        violation_rate: violations as f64 / trajs.len() as f64,
        threshold,
        histogram: Histogram::new(&sorted, bins),
    })
}

/// Forward accelerations: speed `|dp| / delta`, differenced once more and divided by `delta`.
pub fn forward_accelerations(traj: &[Point], delta: f64) -> Vec<f64> {
    let speeds: Vec<f64> = traj
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) / delta)
        .collect();
    speeds.windows(2).map(|w| (w[1] - w[0]) / delta).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelDistance {
    pub w1: f64,
}

fn sorted(sample: &[f64]) -> Vec<f64> {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Wasserstein-1 distance between two 1-D empirical distributions.
///
/// Equal sizes use the sorted coupling; otherwise the absolute difference of the
/// two quantile functions is integrated exactly over the merged breakpoints.
pub fn accel_wasserstein(a: &[f64], b: &[f64]) -> Result<AccelDistance> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "Wasserstein distance of an empty sample".into(),
        ));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    if sa.len() == sb.len() {
        let w1 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64;
        return Ok(AccelDistance { w1 });
    }
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0, 0);
    let mut q = 0.0;
    let mut w1 = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        w1 += (next - q) * (sa[i] - sb[j]).abs();
        q = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(AccelDistance { w1 })
}

/// Generalized Pareto distribution used as a parametric acceleration reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedPareto {
    pub shape: f64,
    pub scale: f64,
    pub location: f64,
}

impl GeneralizedPareto {
    pub fn quantile(&self, p: f64) -> f64 {
        if self.shape.abs() < 1e-12 {
            self.location - self.scale * (1.0 - p).ln()
        } else {
            self.location + self.scale * ((1.0 - p).powf(-self.shape) - 1.0) / self.shape
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidArgument(
                "Pareto scale must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| self.quantile(rng.random::<f64>())).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementError {
    pub ade: f64,
    pub fde: f64,
}

pub fn ade_fde(pred: &[Point], truth: &[Point]) -> Result<DisplacementError> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "predicted vs true waypoints",
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("ADE of an empty trajectory".into()));
    }
    let errs: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).hypot(p[1] - t[1]))
        .collect();
    Ok(DisplacementError {
        ade: errs.iter().sum::<f64>() / errs.len() as f64,
        fde: *errs.last().unwrap(),
    })
}

/// Mean ADE/FDE over paired trajectories.
pub fn mean_ade_fde(preds: &[Vec<Point>], truths: &[Vec<Point>]) -> Result<DisplacementError> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::LengthMismatch {
            what: "trajectory counts",
            expected: truths.len(),
            actual: preds.len(),
        });
    }
    let mut sum = DisplacementError { ade: 0.0, fde: 0.0 };
    for (p, t) in preds.iter().zip(truths) {
        let e = ade_fde(p, t)?;
        sum.ade += e.ade;
        sum.fde += e.fde;
    }
    let n = preds.len() as f64;
    Ok(DisplacementError {
        ade: sum.ade / n,
        fde: sum.fde / n,
    })
}

/// Constant-velocity extrapolation from the last two history points.
pub fn constant_velocity(history: &[Point], horizon: usize) -> Result<Vec<Point>> {
    let n = history.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty history".into()));
    }
    let last = history[n - 1];
    let vel = if n >= 2 {
        [last[0] - history[n - 2][0], last[1] - history[n - 2][1]]
    } else {
        [0.0, 0.0]
    };
    Ok((1..=horizon)
        .map(|i| [last[0] + vel[0] * i as f64, last[1] + vel[1] * i as f64])
        .collect())
}

/// Summary of normalized steering estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    /// Fraction of samples farther than one standard deviation from the mean.
    pub one_sigma_exceedance: f64,
    pub histogram: Histogram,
}

impl SteeringSummary {
    pub fn from_samples(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no steering samples".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            count: values.len(),
            mean,
            std,
            one_sigma_exceedance: exceedance(values, mean, std),
            histogram: Histogram::new(values, bins),
        })
    }
}

/// Fraction of `values` with `|v - mean| > std`.
pub fn exceedance(values: &[f64], mean: f64, std: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| (*v - mean).abs() > std).count() as f64 / values.len() as f64
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

pub fn path_length(traj: &[Point]) -> f64 {
    traj.windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}
