//! Small numeric helpers shared by the simulation engines.

use rand::Rng;

/// Neumaier-compensated running sum. Summation order is the caller's order,
/// so results are reproducible for a fixed input sequence.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut s = CompensatedSum::new();
    for x in xs {
        s.add(x);
    }
    s.value()
}

pub fn mean(xs: &[f64]) -> f64 {
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

/// Linear-interpolation quantile (Hyndman-Fan type 7) of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Sample mean and Monte Carlo standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    let ss = compensated_sum(xs.iter().map(|x| (x - m) * (x - m)));
    let var = if xs.len() > 1 { ss / (n - 1.0) } else { 0.0 };
    (m, (var / n).sqrt())
}

/// Percentile bootstrap interval for a statistic of a sample.
///
/// Draws `resamples` index vectors with replacement, evaluates `statistic`
/// on each, and returns the `alpha / 2` and `1 - alpha / 2` type-7
/// quantiles of the bootstrap distribution.
pub fn percentile_bootstrap<R, F>(
    data: &[f64],
    resamples: usize,
    alpha: f64,
    rng: &mut R,
    statistic: F,
) -> (f64, f64)
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> f64,
{
    assert!(!data.is_empty() && resamples > 0);
    let mut buf = vec![0.0; data.len()];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = data[rng.random_range(0..data.len())];
            }
            statistic(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    (
        quantile_sorted(&stats, alpha / 2.0),
        quantile_sorted(&stats, 1.0 - alpha / 2.0),
    )
}

/// Root-mean of a slice of squared errors.
pub fn rmse_of_squares(squares: &[f64]) -> f64 {
    mean(squares).sqrt()
}
