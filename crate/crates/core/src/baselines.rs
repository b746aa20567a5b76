//! Comparison combination rules: shrinkage (clipped and unclipped),
//! test-then-pool with a simulated significance-level table, anchored soft
//! thresholding, and the `n^-beta` damped plug-in weight.
//!
//! All rules consume the same [`EstimatorDraw`] as the plug-in combination
//! and return a [`CombinedEstimate`].

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::combiner::{self, combine, CombinedEstimate, EstimatorDraw, Rule, DEGENERATE_EPS};
use crate::error::{Error, Result};
use crate::simgauss::{self, GaussianScenario};

/// Sample sizes used to pool `theta_u` and `theta_b` when a test does not reject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolWeights {
    pub n_u: f64,
    pub n_b: f64,
}

impl PoolWeights {
    pub const EQUAL: PoolWeights = PoolWeights { n_u: 1.0, n_b: 1.0 };

    /// Weight placed on `theta_b` by the pooled average.
    pub fn lambda(&self) -> f64 {
        self.n_b / (self.n_u + self.n_b)
    }
}

impl Default for PoolWeights {
    fn default() -> Self {
        Self::EQUAL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub shrinkage_clip: bool,
    pub anchored_lambda1: f64,
    pub cheng_beta: f64,
    /// Candidate significance levels, sorted, within [0, 1].
    pub test_gamma_grid: Vec<f64>,
    /// Bias keys of the cutoff table; empty means "use the scenario's mu grid".
    pub test_mu_grid: Vec<f64>,
    pub test_pool_weights: PoolWeights,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            shrinkage_clip: true,
            anchored_lambda1: 0.5,
            cheng_beta: 0.5,
            test_gamma_grid: default_gamma_grid(),
            test_mu_grid: Vec::new(),
            test_pool_weights: PoolWeights::EQUAL,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_gamma_grid.is_empty() {
            return Err(Error::Config("test_gamma_grid is empty".into()));
        }
        if self.test_gamma_grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::Config("test_gamma_grid values must lie in [0, 1]".into()));
        }
        if self.test_gamma_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("test_gamma_grid must be strictly increasing".into()));
        }
        if self.test_mu_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("test_mu_grid must be strictly increasing".into()));
        }
        if !(self.anchored_lambda1 > 0.0) {
            return Err(Error::Config("anchored_lambda1 must be > 0".into()));
        }
        if !(self.cheng_beta > 0.0) {
            return Err(Error::Config("cheng_beta must be > 0".into()));
        }
        if !(self.test_pool_weights.n_u > 0.0 && self.test_pool_weights.n_b > 0.0) {
            return Err(Error::Config("pool weights must be positive".into()));
        }
        Ok(())
    }
}

/// `{0, 0.05, ..., 1}`.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Shrinkage weight `(var_u - cov_bu) / (theta_u - theta_b)^2`, optionally
/// clipped to [0, 1].
///
/// With a zero observed difference the unclipped rule fails with
/// [`Error::Degenerate`]; the clipped rule maps the infinite weight to 1
/// (positive numerator) or 0 (non-positive numerator).
pub fn shrinkage(d: &EstimatorDraw, clip: bool) -> Result<CombinedEstimate> {
    let num = d.moments.weight_numerator();
    let diff2 = d.difference() * d.difference();
    let rule = if clip { Rule::ShrinkageClipped } else { Rule::Shrinkage };
    let lambda = if diff2 <= DEGENERATE_EPS {
        if !clip {
            return Err(Error::Degenerate(
                "unclipped shrinkage with zero observed difference".into(),
            ));
        }
        if num > 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let raw = num / diff2;
        if clip {
            raw.clamp(0.0, 1.0)
        } else {
            raw
        }
    };
    Ok(combine(d, lambda, rule))
}

/// Upper-`gamma` quantile of the chi-square(1) distribution. `gamma = 0`
/// gives `+inf` (never reject), `gamma = 1` gives 0.
pub fn chi2_1_upper_quantile(gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("significance level {gamma} outside [0, 1]")));
    }
    if gamma == 0.0 {
        return Ok(f64::INFINITY);
    }
    if gamma == 1.0 {
        return Ok(0.0);
    }
    let chi2 = ChiSquared::new(1.0).expect("1 degree of freedom is valid");
    Ok(chi2.inverse_cdf(1.0 - gamma))
}

/// Wald-type statistic `(theta_u - theta_b)^2 / var(theta_u - theta_b)`.
pub fn test_statistic(d: &EstimatorDraw) -> Result<f64> {
    let v = d.moments.diff_variance();
    if !(v > DEGENERATE_EPS) {
        return Err(Error::Degenerate(format!("difference variance {v} is not positive")));
    }
    Ok(d.difference() * d.difference() / v)
}

/// Test-then-pool with a precomputed cutoff: `theta_u` when the statistic
/// reaches `cutoff`, otherwise the pooled average.
pub fn hypothesis_test_with_cutoff(
    d: &EstimatorDraw,
    cutoff: f64,
    pool: PoolWeights,
) -> Result<CombinedEstimate> {
    let t = test_statistic(d)?;
    let lambda = if t >= cutoff { 0.0 } else { pool.lambda() };
    Ok(combine(d, lambda, Rule::HypothesisTest))
}

/// Test-then-pool at significance level `gamma`.
pub fn hypothesis_test_combine(
    d: &EstimatorDraw,
    gamma: f64,
    pool: PoolWeights,
) -> Result<CombinedEstimate> {
    hypothesis_test_with_cutoff(d, chi2_1_upper_quantile(gamma)?, pool)
}

/// Bias key to MSE-minimizing significance level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffTable {
    /// `(mu, gamma)` sorted by `mu`.
    entries: Vec<(f64, f64)>,
    /// `(mu, gamma, cutoff)`; cutoff cached so lookups skip the quantile.
    #[serde(skip)]
    cutoffs: Vec<f64>,
}

impl CutoffTable {
    pub fn new(mut entries: Vec<(f64, f64)>, gamma_grid: &[f64]) -> Result<Self> {
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config("duplicate bias key in cutoff table".into()));
        }
        for &(mu, g) in &entries {
            if !gamma_grid.contains(&g) {
                return Err(Error::Config(format!(
                    "significance level {g} for bias {mu} is not on the grid"
                )));
            }
        }
        let cutoffs = entries
            .iter()
            .map(|&(_, g)| chi2_1_upper_quantile(g))
            .collect::<Result<Vec<_>>>()?;
        Ok(CutoffTable { entries, cutoffs })
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact-key lookup.
    pub fn get(&self, mu: f64) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == mu).map(|e| e.1)
    }

    /// Index of the key nearest to `bias`; ties go to the smaller key and
    /// biases outside the key range clamp to the end keys.
    fn nearest_index(&self, bias: f64) -> Option<usize> {
        if self.entries.is_empty() {
            return None;
        }
        let pos = self.entries.partition_point(|e| e.0 < bias);
        if pos == 0 {
            return Some(0);
        }
        if pos == self.entries.len() {
            return Some(pos - 1);
        }
        let below = bias - self.entries[pos - 1].0;
        let above = self.entries[pos].0 - bias;
        let tol = 1e-12 * (1.0 + bias.abs());
        Some(if below <= above + tol { pos - 1 } else { pos })
    }

    /// Significance level stored at the key nearest to `bias`.
    pub fn lookup(&self, bias: f64) -> Result<f64> {
        self.nearest_index(bias)
            .map(|i| self.entries[i].1)
            .ok_or_else(|| Error::Config("cutoff table is empty".into()))
    }

    fn lookup_cutoff(&self, bias: f64) -> Result<f64> {
        self.nearest_index(bias)
            .map(|i| self.cutoffs[i])
            .ok_or_else(|| Error::Config("cutoff table is empty".into()))
    }
}

/// Selects, for each bias key, the significance level minimizing the
/// simulated MSE of the test-then-pool rule. Ties go to the smaller level.
///
/// `mse` is indexed `[key][gamma]`.
pub fn select_cutoffs(
    mu_keys: &[f64],
    gamma_grid: &[f64],
    mse: &[Vec<f64>],
) -> Result<CutoffTable> {
    let entries = mu_keys
        .iter()
        .zip(mse)
        .map(|(&mu, row)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            (mu, gamma_grid[best])
        })
        .collect();
    CutoffTable::new(entries, gamma_grid)
}

/// Simulates the test-then-pool rule over the scenario at every bias key and
/// significance level and records the MSE-minimizing level per key.
///
/// Draws come from a generator stream disjoint from the evaluation stream of
/// [`simgauss::run_scenario`], so the table and the run that uses it are
/// independent.
pub fn build_cutoff_table(
    scenario: &GaussianScenario,
    cfg: &BaselineConfig,
    reps: usize,
    seed: u64,
) -> Result<CutoffTable> {
    if reps < 1000 {
        return Err(Error::InvalidArgument(format!(
            "cutoff table needs at least 1000 replications, got {reps}"
        )));
    }
    cfg.validate()?;
    let keys = if cfg.test_mu_grid.is_empty() {
        scenario.mu_grid.clone()
    } else {
        cfg.test_mu_grid.clone()
    };
    let mse = simgauss::simulate_test_mse(scenario, &keys, cfg, reps, seed)?;
    select_cutoffs(&keys, &cfg.test_gamma_grid, &mse)
}

/// Test-then-pool with the significance level looked up from the estimated
/// bias `|theta_u - theta_b|`.
pub fn adaptive_hypothesis_test(
    d: &EstimatorDraw,
    table: &CutoffTable,
    pool: PoolWeights,
) -> Result<CombinedEstimate> {
    let cutoff = table.lookup_cutoff(d.difference().abs())?;
    hypothesis_test_with_cutoff(d, cutoff, pool)
}

/// Soft-thresholding operator `sign(x) max(|x| - t, 0)`.
#[inline]
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x.abs() >= t {
        x.signum() * (x.abs() - t)
    } else {
        0.0
    }
}

/// Bias-corrected inverse-variance combination.
///
/// The bias is estimated by soft-thresholding `theta_b - theta_u` at
/// `lambda1 sqrt(log n)` standard deviations of the difference; `theta_b`
/// minus that estimate is then combined with `theta_u` as if both were
/// unbiased.
pub fn anchored_threshold(d: &EstimatorDraw, lambda1: f64, n: usize) -> Result<CombinedEstimate> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("anchored threshold needs n >= 2, got {n}")));
    }
    let dv = d.moments.diff_variance();
    if !(dv > DEGENERATE_EPS) {
        return Err(Error::Degenerate(format!("difference variance {dv} is not positive")));
    }
    let thr = lambda1 * (n as f64).ln().sqrt() * dv.sqrt();
    let mu_hat = soft_threshold(d.theta_b - d.theta_u, thr);
    let w = d.moments.weight_numerator() / dv;
    let corrected = d.theta_b - mu_hat;
    Ok(CombinedEstimate {
        lambda: w,
        theta: d.theta_u + w * (corrected - d.theta_u),
        rule: Rule::Anchored,
    })
}

/// Plug-in weight with the squared observed difference damped by `n^-beta`.
pub fn cheng_variant(d: &EstimatorDraw, beta: f64) -> Result<CombinedEstimate> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    Ok(combine(d, cheng_lambda(d, beta)?, Rule::Cheng))
}

fn cheng_lambda(d: &EstimatorDraw, beta: f64) -> Result<f64> {
    let damp = (d.n as f64).powf(-beta);
    let denom = damp * d.difference() * d.difference() + d.moments.diff_variance();
    if !(denom > DEGENERATE_EPS) {
        return Err(Error::Degenerate(format!("cheng denominator {denom} is not positive")));
    }
    Ok(d.moments.weight_numerator() / denom)
}

/// Everything a rule needs beyond the draw itself.
#[derive(Debug, Clone)]
pub struct RuleContext<'a> {
    pub cfg: &'a BaselineConfig,
    /// Required by [`Rule::HypothesisTest`].
    pub cutoffs: Option<&'a CutoffTable>,
}

/// Applies `rule` to a draw.
pub fn evaluate(rule: Rule, d: &EstimatorDraw, ctx: &RuleContext<'_>) -> Result<CombinedEstimate> {
    match rule {
        Rule::Combined => combiner::combined_estimate(d),
        Rule::Unbiased => Ok(combine(d, 0.0, Rule::Unbiased)),
        Rule::Biased => Ok(combine(d, 1.0, Rule::Biased)),
        Rule::ShrinkageClipped => shrinkage(d, true),
        Rule::Shrinkage => shrinkage(d, false),
        Rule::HypothesisTest => {
            let table = ctx
                .cutoffs
                .ok_or_else(|| Error::Config("hypothesis-test rule needs a cutoff table".into()))?;
            adaptive_hypothesis_test(d, table, ctx.cfg.test_pool_weights)
        }
        Rule::Anchored => anchored_threshold(d, ctx.cfg.anchored_lambda1, d.n),
        Rule::Cheng => cheng_variant(d, ctx.cfg.cheng_beta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::{lambda_hat, MomentEstimates};

    fn draw(tu: f64, tb: f64, u: f64, b: f64, c: f64) -> EstimatorDraw {
        EstimatorDraw::new(tu, tb, MomentEstimates::new(u, b, c).unwrap(), 10_000).unwrap()
    }

    #[test]
    fn shrinkage_examples() {
        let d = draw(10.0, 0.0, 1.0, 1.0, 0.0);
        let s = shrinkage(&d, false).unwrap();
        assert!((s.lambda - 0.01).abs() < 1e-15);
        assert!((s.theta - 9.9).abs() < 1e-12);

        let d = draw(3.0, -1.0, 1.0, 2.0, 1.0);
        assert_eq!(shrinkage(&d, false).unwrap().lambda, 0.0);
        assert_eq!(shrinkage(&d, true).unwrap().lambda, 0.0);

        // (theta_u - theta_b)^2 = 0.5 -> raw weight 2 clips to 1.
        let diff = 0.5f64.sqrt();
        let d = draw(1.0 + diff, 1.0, 1.0, 1.0, 0.0);
        let raw = shrinkage(&d, false).unwrap();
        assert!((raw.lambda - 2.0).abs() < 1e-12);
        let s = shrinkage(&d, true).unwrap();
        assert_eq!(s.lambda, 1.0);
        assert!((s.theta - d.theta_b).abs() < 1e-15);
    }

    #[test]
    fn shrinkage_with_zero_difference() {
        let d = draw(1.0, 1.0, 1.0, 1.0, 0.0);
        assert!(matches!(shrinkage(&d, false), Err(Error::Degenerate(_))));
        assert_eq!(shrinkage(&d, true).unwrap().lambda, 1.0);
        let d = draw(1.0, 1.0, 1.0, 4.0, 1.5);
        assert_eq!(shrinkage(&d, true).unwrap().lambda, 0.0);
    }

    #[test]
    fn chi2_quantile_boundaries() {
        assert_eq!(chi2_1_upper_quantile(0.0).unwrap(), f64::INFINITY);
        assert_eq!(chi2_1_upper_quantile(1.0).unwrap(), 0.0);
        assert!((chi2_1_upper_quantile(0.05).unwrap() - 3.841458820694124).abs() < 1e-9);
        assert!(chi2_1_upper_quantile(1.5).is_err());
    }

    #[test]
    fn hypothesis_test_examples() {
        let pool = PoolWeights::EQUAL;
        let d = draw(2.0, 2.0, 1.0, 1.0, 0.0);
        for g in [0.0, 0.05, 0.5, 0.95] {
            let r = hypothesis_test_combine(&d, g, pool).unwrap();
            assert_eq!(r.lambda, 0.5);
        }
        let d = draw(2.0, 2.5, 1.0, 1.0, 0.0);
        assert_eq!(hypothesis_test_combine(&d, 1.0, pool).unwrap().theta, 2.0);

        // diff 0.2, var(diff) 0.01 -> T = 4 > 3.841
        let d = draw(1.2, 1.0, 0.005, 0.005, 0.0);
        let t = test_statistic(&d).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        let r = hypothesis_test_combine(&d, 0.05, pool).unwrap();
        assert_eq!((r.lambda, r.theta), (0.0, 1.2));
        // T = 4 < chi2 upper 1% (6.63) -> pool
        let r = hypothesis_test_combine(&d, 0.01, pool).unwrap();
        assert!((r.theta - 1.1).abs() < 1e-15);
    }

    #[test]
    fn pooled_average_uses_sample_size_weights() {
        let d = draw(1.0, 2.0, 1.0, 1.0, 0.0);
        let r = hypothesis_test_combine(&d, 0.0, PoolWeights { n_u: 1.0, n_b: 3.0 }).unwrap();
        assert_eq!(r.lambda, 0.75);
        assert_eq!(r.theta, 1.75);
    }

    fn table() -> CutoffTable {
        CutoffTable::new(
            vec![(0.0, 0.0), (0.02, 0.05), (0.04, 0.1), (0.06, 0.15), (0.08, 0.2)],
            &default_gamma_grid(),
        )
        .unwrap()
    }

    #[test]
    fn cutoff_table_lookup() {
        let t = table();
        assert_eq!(t.get(0.06), Some(0.15));
        assert_eq!(t.get(0.05), None);
        assert_eq!(t.lookup(0.0).unwrap(), 0.0);
        assert_eq!(t.lookup(0.07).unwrap(), 0.15);
        assert_eq!(t.lookup(0.0700001).unwrap(), 0.2);
        assert_eq!(t.lookup(0.069).unwrap(), 0.15);
        assert_eq!(t.lookup(5.0).unwrap(), 0.2);
        assert_eq!(t.lookup(-1.0).unwrap(), 0.0);
        for &(mu, g) in t.entries() {
            assert_eq!(t.lookup(mu).unwrap(), g);
        }
    }

    #[test]
    fn cutoff_table_rejects_off_grid_levels_and_empty_lookups() {
        assert!(CutoffTable::new(vec![(0.0, 0.07)], &default_gamma_grid()).is_err());
        let empty = CutoffTable::new(vec![], &default_gamma_grid()).unwrap();
        assert!(matches!(empty.lookup(0.1), Err(Error::Config(_))));
        let d = draw(1.0, 1.0, 1.0, 1.0, 0.0);
        assert!(adaptive_hypothesis_test(&d, &empty, PoolWeights::EQUAL).is_err());
    }

    #[test]
    fn select_cutoffs_breaks_ties_toward_smaller_level() {
        let grid = [0.0, 0.5, 1.0];
        let t = select_cutoffs(&[0.0, 1.0], &grid, &[vec![2.0, 1.0, 1.0], vec![3.0, 3.0, 3.0]]).unwrap();
        assert_eq!(t.entries(), &[(0.0, 0.5), (1.0, 0.0)]);
    }

    #[test]
    fn adaptive_test_uses_nearest_key() {
        let t = table();
        let pool = PoolWeights::EQUAL;
        // Zero difference -> mu = 0 key -> gamma 0 -> always pool.
        let d = draw(1.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(adaptive_hypothesis_test(&d, &t, pool).unwrap().lambda, 0.5);
        // Large difference clamps to the last key (gamma 0.2, cutoff ~1.64).
        let d = draw(1.0, 6.0, 1.0, 1.0, 0.0);
        assert_eq!(adaptive_hypothesis_test(&d, &t, pool).unwrap().lambda, 0.0);
    }

    #[test]
    fn anchored_examples() {
        let n = 1000usize;
        let lambda1 = 0.5;
        let scale = lambda1 * (n as f64).ln().sqrt();
        // diff variance 2, threshold = scale * sqrt(2)
        let thr = scale * 2f64.sqrt();

        let d = draw(1.0, 1.0 + 0.5 * thr, 1.0, 1.0, 0.0);
        let r = anchored_threshold(&d, lambda1, n).unwrap();
        assert!((r.theta - (0.5 * d.theta_b + 0.5 * d.theta_u)).abs() < 1e-14);

        let d = draw(1.0, 1.0 + thr, 1.0, 1.0, 0.0);
        let r = anchored_threshold(&d, lambda1, n).unwrap();
        assert!((r.theta - (0.5 * d.theta_b + 0.5 * d.theta_u)).abs() < 1e-12);

        // theta_b - theta_u = 0.5 with threshold 0.2: pick lambda1 so that
        // lambda1 sqrt(log n) sqrt(2) = 0.2.
        let lambda1 = 0.2 / ((n as f64).ln().sqrt() * 2f64.sqrt());
        let d = draw(2.0, 2.5, 1.0, 1.0, 0.0);
        let r = anchored_threshold(&d, lambda1, n).unwrap();
        assert!((r.theta - (0.5 * (2.5 - 0.3) + 0.5 * 2.0)).abs() < 1e-12);
        assert_eq!(r.lambda, 0.5);
    }

    #[test]
    fn anchored_saturates_far_from_threshold() {
        let n = 500;
        let d0 = draw(0.0, 0.0, 1.0, 2.0, 0.3);
        let dv = d0.moments.diff_variance();
        let thr = 0.5 * (n as f64).ln().sqrt() * dv.sqrt();
        let w = d0.moments.weight_numerator() / dv;
        for &x in &[-50.0, -10.0, 10.0, 1e3] {
            let d = draw(0.3, 0.3 + x, 1.0, 2.0, 0.3);
            let r = anchored_threshold(&d, 0.5, n).unwrap();
            let expect = w * (d.theta_u + x.signum() * thr) + (1.0 - w) * d.theta_u;
            assert!((r.theta - expect).abs() < 1e-9 * (1.0 + x.abs()), "x={x}");
        }
        assert!(anchored_threshold(&d0, 0.5, 1).is_err());
    }

    #[test]
    fn cheng_examples() {
        let d = draw(1.0, 1.0, 1.0, 2.0, 0.5);
        assert_eq!(cheng_variant(&d, 0.7).unwrap().lambda, lambda_hat(&d).unwrap());

        let d = draw(1.0, 2.5, 1.0, 2.0, 0.5);
        let tiny = cheng_variant(&d, 1e-12).unwrap().lambda;
        assert!((tiny - lambda_hat(&d).unwrap()).abs() < 1e-9);

        // n = 1e4, beta = 1, diff^2 = 1, moments ~1e-4.
        let d = EstimatorDraw::new(
            0.0,
            1.0,
            MomentEstimates::new(1e-4, 1e-4, 0.0).unwrap(),
            10_000,
        )
        .unwrap();
        let ch = cheng_variant(&d, 1.0).unwrap().lambda;
        assert!((ch - 1e-4 / (1e-4 + 2e-4)).abs() < 1e-12);
        let core = lambda_hat(&d).unwrap();
        assert!((core - 1e-4 / (1.0 + 2e-4)).abs() < 1e-15);
        assert!(ch > 3000.0 * core);
        assert!(cheng_variant(&d, 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn draw_strategy() -> impl Strategy<Value = EstimatorDraw> {
            (-3.0..3.0f64, -3.0..3.0f64, 0.01..2.0f64, 0.0..2.0f64, -0.95..0.95f64, 2usize..5000)
                .prop_filter_map("valid moments", |(tu, tb, vu, vb, r, n)| {
                    let m = MomentEstimates::new(vu, vb, r * (vu * vb).sqrt()).ok()?;
                    EstimatorDraw::new(tu, tb, m, n).ok()
                })
        }

        proptest! {
            #[test]
            fn rules_are_translation_equivariant(d in draw_strategy(), k in -100.0..100.0f64) {
                let cfg = BaselineConfig::default();
                let tab = table();
                let ctx = RuleContext { cfg: &cfg, cutoffs: Some(&tab) };
                let shifted = EstimatorDraw { theta_u: d.theta_u + k, theta_b: d.theta_b + k, ..d };
                for rule in Rule::ALL {
                    let a = evaluate(rule, &d, &ctx);
                    let b = evaluate(rule, &shifted, &ctx);
                    if let (Ok(a), Ok(b)) = (a, b) {
                        // Shifting both estimates perturbs their difference by
                        // O(ulp(k)); weights that divide by the squared difference
                        // amplify that, so compare with a generous relative slack.
                        let tol = 1e-9 * (1.0 + k.abs()) * (1.0 + a.lambda.abs());
                        prop_assert!((b.theta - (a.theta + k)).abs() <= tol,
                            "{rule}: {} vs {}", b.theta, a.theta + k);
                    }
                }
            }

            #[test]
            fn clipped_shrinkage_weight_in_unit_interval(d in draw_strategy()) {
                let l = shrinkage(&d, true).unwrap().lambda;
                prop_assert!((0.0..=1.0).contains(&l));
            }

            #[test]
            fn test_rule_is_either_unbiased_or_pooled(d in draw_strategy(), g in 0.0..=1.0f64) {
                let r = hypothesis_test_combine(&d, g, PoolWeights::EQUAL).unwrap();
                let pooled = d.theta_u + 0.5 * (d.theta_b - d.theta_u);
                prop_assert!(r.theta == d.theta_u || r.theta == pooled);
            }
        }
    }
}
