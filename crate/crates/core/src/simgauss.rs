//! Monte Carlo engine for bivariate-normal influence panels.
//!
//! A replication draws `n` pairs `(psi_u, psi_b)` with means
//! `(theta_0, theta_0 + mu)`; the two estimators are the sample means and
//! their moments come from the centered panel. The bias `mu` only shifts
//! `psi_b`, so the centered panel and the noise of both sample means do not
//! depend on it. The engine therefore draws one noise panel per replication
//! and evaluates every `mu` of the grid against it (common random numbers):
//! curves are smooth in `mu`, and the unbiased-only MSE is the same at every
//! grid point.
//!
//! Replications run in fixed-size chunks on the rayon pool. Each chunk sums
//! its replications in index order and chunk results are merged in chunk
//! order, so every output is independent of the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineConfig, RuleContext};
use crate::combiner::{EstimatorDraw, MomentEstimates, Rule, ShapeParams, DEGENERATE_EPS};
use crate::error::{Error, Result};
use crate::moments::{estimate_moments, InfluencePanel};
use crate::rng::{self, domain, PolarNormal};
use crate::stats;

/// Replications per parallel task.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScenario {
    pub n: usize,
    pub var_psi_u: f64,
    pub var_psi_b: f64,
    pub corr: f64,
    pub theta_0: f64,
    pub mu_grid: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
}

impl GaussianScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!("n must be >= 2, got {}", self.n)));
        }
        if !(self.var_psi_u.is_finite() && self.var_psi_u >= 0.0)
            || !(self.var_psi_b.is_finite() && self.var_psi_b >= 0.0)
        {
            return Err(Error::InvalidArgument("variances must be finite and >= 0".into()));
        }
        if self.var_psi_u == 0.0 {
            // Zero variance of the unbiased estimator leaves nothing to improve
            // and makes every relative MSE 0/0.
            return Err(Error::InvalidMoments("var_psi_u must be > 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.corr) {
            return Err(Error::InvalidArgument(format!("corr {} outside [-1, 1]", self.corr)));
        }
        if self.var_psi_b == 0.0 && self.corr != 0.0 {
            return Err(Error::InvalidArgument(
                "corr must be 0 when var_psi_b = 0".into(),
            ));
        }
        if !self.theta_0.is_finite() {
            return Err(Error::InvalidArgument("theta_0 must be finite".into()));
        }
        let d = self.var_psi_u + self.var_psi_b
            - 2.0 * self.corr * (self.var_psi_u * self.var_psi_b).sqrt();
        if !(d > 1e-12 * (self.var_psi_u + self.var_psi_b)) {
            return Err(Error::Degenerate(format!(
                "population variance of psi_u - psi_b is {d}"
            )));
        }
        if self.mu_grid.is_empty() {
            return Err(Error::InvalidArgument("mu grid is empty".into()));
        }
        if self.mu_grid.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("mu grid has non-finite values".into()));
        }
        if self.mu_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("mu grid must be strictly increasing".into()));
        }
        if self.reps < 2 {
            return Err(Error::InvalidArgument(format!("reps must be >= 2, got {}", self.reps)));
        }
        Ok(())
    }

    /// Identifies the data-generating process; the mu grid, rep count and
    /// seed are not part of it.
    pub fn id_hash(&self) -> u64 {
        rng::hash_words(&[
            self.n as u64,
            self.var_psi_u.to_bits(),
            self.var_psi_b.to_bits(),
            self.corr.to_bits(),
            self.theta_0.to_bits(),
        ])
    }

    /// Population moments of the two sample means.
    pub fn population_moments(&self) -> Result<MomentEstimates> {
        let n = self.n as f64;
        MomentEstimates::new(
            self.var_psi_u / n,
            self.var_psi_b / n,
            self.corr * (self.var_psi_u * self.var_psi_b).sqrt() / n,
        )
    }

    pub fn shape(&self) -> Result<ShapeParams> {
        ShapeParams::new((self.var_psi_b / self.var_psi_u).sqrt(), self.corr)
    }

    /// The symmetric independent setting: unit variances, zero correlation.
    pub fn symmetric(n: usize, mu_grid: Vec<f64>, reps: usize, seed: u64) -> Self {
        GaussianScenario {
            n,
            var_psi_u: 1.0,
            var_psi_b: 1.0,
            corr: 0.0,
            theta_0: 1.0,
            mu_grid,
            reps,
            seed,
        }
    }

    fn sds(&self) -> (f64, f64, f64) {
        let su = self.var_psi_u.sqrt();
        let sb = self.var_psi_b.sqrt();
        (su, sb * self.corr, sb * (1.0 - self.corr * self.corr).sqrt())
    }
}

/// Evenly spaced grid `0, step, ..., max`. When `1 / step` is an integer
/// the points are computed as `i / (1 / step)`, which gives the nearest
/// doubles to the decimal values.
pub fn mu_grid(max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && max >= 0.0 && max.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad mu grid max={max} step={step}")));
    }
    let count = (max / step + 1e-9).floor() as usize;
    let inv = 1.0 / step;
    Ok(if (inv - inv.round()).abs() < 1e-9 {
        let k = inv.round();
        (0..=count).map(|i| i as f64 / k).collect()
    } else {
        (0..=count).map(|i| i as f64 * step).collect()
    })
}

/// Noise of one replication: deviations of the two sample means from their
/// expectations plus the moment estimates of the centered panel.
#[derive(Debug, Clone, Copy)]
struct RepNoise {
    eu: f64,
    eb: f64,
    /// `None` when the panel is degenerate.
    moments: Option<MomentEstimates>,
}

fn fill_noise(scn: &GaussianScenario, tag: u64, seed: u64, rep: usize, buf: &mut Vec<(f64, f64)>) {
    let (su, sb_rho, sb_perp) = scn.sds();
    let mut g = PolarNormal::new(rng::stream(seed, &[tag, scn.id_hash(), rep as u64]));
    buf.clear();
    buf.extend((0..scn.n).map(|_| {
        let z1 = g.next();
        let z2 = g.next();
        (su * z1, sb_rho * z1 + sb_perp * z2)
    }));
}

fn summarize_noise(buf: &[(f64, f64)]) -> RepNoise {
    let n = buf.len() as f64;
    let (mut su, mut sb) = (0.0, 0.0);
    for &(u, b) in buf {
        su += u;
        sb += b;
    }
    let (eu, eb) = (su / n, sb / n);
    let (mut uu, mut bb, mut ub) = (0.0, 0.0, 0.0);
    for &(u, b) in buf {
        let (du, db) = (u - eu, b - eb);
        uu += du * du;
        bb += db * db;
        ub += du * db;
    }
    let n2 = n * n;
    RepNoise {
        eu,
        eb,
        moments: MomentEstimates::new(uu / n2, bb / n2, ub / n2).ok(),
    }
}

/// One full replication at bias `mu`.
#[derive(Debug, Clone)]
pub struct GaussianPanel {
    pub draw: EstimatorDraw,
    /// Centered influence values.
    pub influence: InfluencePanel,
    /// Raw `(psi_u, psi_b)` pairs.
    pub psi: Vec<(f64, f64)>,
}

/// Draws replication `rep` of the scenario at bias `mu`.
///
/// `psi_u = theta_0 + sigma_u z1` and
/// `psi_b = theta_0 + mu + sigma_b (rho z1 + sqrt(1 - rho^2) z2)` with
/// independent standard normals `z1, z2`. The noise depends on
/// `(seed, scenario, rep)` only, so panels at different `mu` share it; the
/// sample means are computed as `theta_0 (+ mu) + mean(noise)`, the form the
/// sweep engine uses.
pub fn draw_panel(scn: &GaussianScenario, mu: f64, rep: usize) -> Result<GaussianPanel> {
    scn.validate()?;
    let mut buf = Vec::with_capacity(scn.n);
    fill_noise(scn, domain::GAUSS_PANEL, scn.seed, rep, &mut buf);
    let noise = summarize_noise(&buf);
    let influence = InfluencePanel::from_pairs(buf.iter().map(|&(u, b)| (u - noise.eu, b - noise.eb)))?;
    let moments = estimate_moments(&influence)?;
    let draw = EstimatorDraw::new(scn.theta_0 + noise.eu, scn.theta_0 + mu + noise.eb, moments, scn.n)?;
    let psi = buf
        .iter()
        .map(|&(u, b)| (scn.theta_0 + u, scn.theta_0 + mu + b))
        .collect();
    Ok(GaussianPanel { draw, influence, psi })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GaussianOptions {
    /// Use population moments instead of panel estimates.
    pub known_moments: bool,
    pub baselines: BaselineConfig,
    /// Replications for the significance-level table of the test rule;
    /// defaults to `max(reps, 1000)`.
    pub cutoff_reps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mu: f64,
    pub rule: Rule,
    pub mse: f64,
    pub relative_mse: f64,
    /// Monte Carlo standard error of `mse`.
    pub mc_se: f64,
    /// Replications where the rule itself failed (counted, not averaged).
    pub excluded: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule: Rule,
    /// Largest grid `mu` before the relative MSE first reaches 1.
    pub bias_threshold: f64,
    /// Largest grid `mu` with relative MSE below 1.
    pub bias_threshold_last: f64,
    pub worst_rel_mse: f64,
    pub best_rel_mse: f64,
    pub argmax_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub rules: Vec<RuleSummary>,
    pub reps: usize,
    /// Replications dropped because the moment panel was degenerate.
    pub excluded_reps: u64,
}

impl ScenarioSummary {
    pub fn rule(&self, rule: Rule) -> Option<&RuleSummary> {
        self.rules.iter().find(|r| r.rule == rule)
    }
}

/// Bias thresholds of a relative-MSE curve: `(first crossing, last below 1)`.
///
/// First crossing: the grid `mu` preceding the first point with relative MSE
/// `>= 1`; 0 if that is the first point; the last grid `mu` if the curve
/// never reaches 1. Last below: the largest `mu` with relative MSE `< 1`, or 0.
pub fn bias_thresholds(mu: &[f64], rel: &[f64]) -> (f64, f64) {
    let first = match rel.iter().position(|&r| !(r < 1.0)) {
        Some(0) => 0.0,
        Some(i) => mu[i - 1],
        None => *mu.last().unwrap_or(&0.0),
    };
    let last = rel
        .iter()
        .rposition(|&r| r < 1.0)
        .map_or(0.0, |i| mu[i]);
    (first, last)
}

/// Per-chunk sums indexed `[mu][rule]`.
#[derive(Clone)]
struct Acc {
    sum: Vec<f64>,
    sum2: Vec<f64>,
    cnt: Vec<u64>,
    excluded_reps: u64,
}

impl Acc {
    fn new(cells: usize) -> Self {
        Acc { sum: vec![0.0; cells], sum2: vec![0.0; cells], cnt: vec![0; cells], excluded_reps: 0 }
    }

    fn merge(&mut self, o: &Acc) {
        for i in 0..self.sum.len() {
            self.sum[i] += o.sum[i];
            self.sum2[i] += o.sum2[i];
            self.cnt[i] += o.cnt[i];
        }
        self.excluded_reps += o.excluded_reps;
    }
}

/// Runs `body(rep, noise, acc)` over all replications in deterministic chunks.
fn chunked<F>(scn: &GaussianScenario, reps: usize, tag: u64, seed: u64, cells: usize, body: F) -> Acc
where
    F: Fn(&RepNoise, &mut Acc) + Sync,
{
    let chunks = reps.div_ceil(CHUNK);
    let parts: Vec<Acc> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Acc::new(cells);
            let mut buf = Vec::with_capacity(scn.n);
            for rep in c * CHUNK..((c + 1) * CHUNK).min(reps) {
                fill_noise(scn, tag, seed, rep, &mut buf);
                let noise = summarize_noise(&buf);
                if noise.moments.is_none() {
                    acc.excluded_reps += 1;
                    continue;
                }
                body(&noise, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = Acc::new(cells);
    for p in &parts {
        total.merge(p);
    }
    total
}

/// MSE of every rule at every grid `mu`, plus summary metrics.
///
/// The unbiased-only rule is always evaluated and placed first; it is the
/// denominator of every relative MSE.
pub fn run_scenario(
    scn: &GaussianScenario,
    rules: &[Rule],
    opts: &GaussianOptions,
) -> Result<(Vec<CurvePoint>, ScenarioSummary)> {
    scn.validate()?;
    opts.baselines.validate()?;
    if rules.is_empty() {
        return Err(Error::InvalidArgument("rule set is empty".into()));
    }
    let mut rule_list = vec![Rule::Unbiased];
    for &r in rules {
        if !rule_list.contains(&r) {
            rule_list.push(r);
        }
    }
    let table = if rule_list.contains(&Rule::HypothesisTest) {
        let reps = opts.cutoff_reps.unwrap_or(scn.reps.max(1000));
        Some(baselines::build_cutoff_table(scn, &opts.baselines, reps, scn.seed)?)
    } else {
        None
    };
    let known = if opts.known_moments { Some(scn.population_moments()?) } else { None };
    let ctx = RuleContext { cfg: &opts.baselines, cutoffs: table.as_ref() };
    let nr = rule_list.len();
    let nm = scn.mu_grid.len();

    let acc = chunked(scn, scn.reps, domain::GAUSS_PANEL, scn.seed, nm * nr, |noise, acc| {
        let moments = known.unwrap_or_else(|| noise.moments.expect("checked"));
        let theta_u = scn.theta_0 + noise.eu;
        for (i, &mu) in scn.mu_grid.iter().enumerate() {
            let d = EstimatorDraw {
                theta_u,
                theta_b: scn.theta_0 + mu + noise.eb,
                moments,
                n: scn.n,
            };
            for (j, &rule) in rule_list.iter().enumerate() {
                if let Ok(est) = baselines::evaluate(rule, &d, &ctx) {
                    let e2 = (est.theta - scn.theta_0).powi(2);
                    let k = i * nr + j;
                    acc.sum[k] += e2;
                    acc.sum2[k] += e2 * e2;
                    acc.cnt[k] += 1;
                }
            }
        }
    });

    let used = scn.reps as u64 - acc.excluded_reps;
    if used < 2 {
        return Err(Error::Degenerate("fewer than two usable replications".into()));
    }
    let mut points = Vec::with_capacity(nm * nr);
    for (i, &mu) in scn.mu_grid.iter().enumerate() {
        let base = acc.sum[i * nr] / acc.cnt[i * nr] as f64;
        for (j, &rule) in rule_list.iter().enumerate() {
            let k = i * nr + j;
            let c = acc.cnt[k] as f64;
            let mse = acc.sum[k] / c;
            let var = ((acc.sum2[k] - c * mse * mse) / (c - 1.0)).max(0.0);
            points.push(CurvePoint {
                mu,
                rule,
                mse,
                relative_mse: if j == 0 { 1.0 } else { mse / base },
                mc_se: (var / c).sqrt(),
                excluded: used - acc.cnt[k],
            });
        }
    }
    let summary = ScenarioSummary {
        rules: rule_list.iter().enumerate().map(|(j, &rule)| summarize_rule(rule, &scn.mu_grid, &points, j, nr)).collect(),
        reps: scn.reps,
        excluded_reps: acc.excluded_reps,
    };
    Ok((points, summary))
}

fn summarize_rule(rule: Rule, mu: &[f64], points: &[CurvePoint], j: usize, nr: usize) -> RuleSummary {
    let rel: Vec<f64> = (0..mu.len()).map(|i| points[i * nr + j].relative_mse).collect();
    let (bias_threshold, bias_threshold_last) = bias_thresholds(mu, &rel);
    let mut imax = 0;
    let mut best = f64::INFINITY;
    for (i, &r) in rel.iter().enumerate() {
        if r > rel[imax] {
            imax = i;
        }
        best = best.min(r);
    }
    RuleSummary {
        rule,
        bias_threshold,
        bias_threshold_last,
        worst_rel_mse: rel[imax],
        best_rel_mse: best,
        argmax_mu: mu[imax],
    }
}

/// Simulated MSE of the test-then-pool rule, indexed `[key][gamma]`.
pub fn simulate_test_mse(
    scn: &GaussianScenario,
    mu_keys: &[f64],
    cfg: &BaselineConfig,
    reps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    scn.validate()?;
    if mu_keys.is_empty() {
        return Err(Error::InvalidArgument("no bias keys".into()));
    }
    let cutoffs = cfg
        .test_gamma_grid
        .iter()
        .map(|&g| baselines::chi2_1_upper_quantile(g))
        .collect::<Result<Vec<_>>>()?;
    let pool = cfg.test_pool_weights.lambda();
    let ng = cutoffs.len();
    let acc = chunked(scn, reps, domain::GAUSS_CUTOFF, seed, mu_keys.len() * ng, |noise, acc| {
        let m = noise.moments.expect("checked");
        let dv = m.diff_variance();
        if !(dv > DEGENERATE_EPS) {
            return;
        }
        let eu = noise.eu;
        for (i, &mu) in mu_keys.iter().enumerate() {
            // Errors relative to theta_0 of theta_u and of the pooled mean.
            let diff = eu - (mu + noise.eb);
            let e_pool = eu - pool * diff;
            let t = diff * diff / dv;
            let (r_u, r_p) = (eu * eu, e_pool * e_pool);
            for (j, &c) in cutoffs.iter().enumerate() {
                let k = i * ng + j;
                acc.sum[k] += if t >= c { r_u } else { r_p };
                acc.cnt[k] += 1;
            }
        }
    });
    Ok((0..mu_keys.len())
        .map(|i| {
            (0..ng)
                .map(|j| {
                    let k = i * ng + j;
                    acc.sum[k] / acc.cnt[k].max(1) as f64
                })
                .collect()
        })
        .collect())
}

/// Applies `f` to the draw of every usable replication at bias `mu`, in
/// replication order. Returns the values and the number of excluded
/// replications.
pub fn replicate_at<T, F>(scn: &GaussianScenario, mu: f64, known_moments: bool, f: F) -> Result<(Vec<T>, u64)>
where
    T: Send,
    F: Fn(&EstimatorDraw) -> Result<T> + Sync,
{
    scn.validate()?;
    let known = if known_moments { Some(scn.population_moments()?) } else { None };
    let chunks = scn.reps.div_ceil(CHUNK);
    let parts: Vec<(Vec<T>, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut out = Vec::with_capacity(CHUNK);
            let mut excluded = 0;
            let mut buf = Vec::with_capacity(scn.n);
            for rep in c * CHUNK..((c + 1) * CHUNK).min(scn.reps) {
                fill_noise(scn, domain::GAUSS_PANEL, scn.seed, rep, &mut buf);
                let noise = summarize_noise(&buf);
                let moments = match (known, noise.moments) {
                    (Some(m), _) | (None, Some(m)) => m,
                    (None, None) => {
                        excluded += 1;
                        continue;
                    }
                };
                let d = EstimatorDraw {
                    theta_u: scn.theta_0 + noise.eu,
                    theta_b: scn.theta_0 + mu + noise.eb,
                    moments,
                    n: scn.n,
                };
                match f(&d) {
                    Ok(v) => out.push(v),
                    Err(_) => excluded += 1,
                }
            }
            (out, excluded)
        })
        .collect();
    let mut values = Vec::with_capacity(scn.reps);
    let mut excluded = 0;
    for (v, e) in parts {
        values.extend(v);
        excluded += e;
    }
    Ok((values, excluded))
}

/// The Cartesian parameter grid of the Gaussian study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub ns: Vec<usize>,
    pub var_psi_u: Vec<f64>,
    pub var_psi_b: Vec<f64>,
    pub corr: Vec<f64>,
    pub theta_0: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            ns: vec![500, 1000, 2000, 4000],
            var_psi_u: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            var_psi_b: vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0],
            corr: vec![-0.5, -0.25, 0.0, 0.25, 0.5],
            theta_0: 1.0,
        }
    }
}

/// A grid combination that was not run.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedScenario {
    pub scenario: GaussianScenario,
    pub reason: String,
}

impl GridSpec {
    /// Valid scenarios in `n`-major order, and the invalid combinations.
    pub fn scenarios(&self, mu_grid: &[f64], reps: usize, seed: u64) -> (Vec<GaussianScenario>, Vec<SkippedScenario>) {
        let mut ok = Vec::new();
        let mut skipped = Vec::new();
        for &n in &self.ns {
            for &vu in &self.var_psi_u {
                for &vb in &self.var_psi_b {
                    for &corr in &self.corr {
                        let scenario = GaussianScenario {
                            n,
                            var_psi_u: vu,
                            var_psi_b: vb,
                            corr,
                            theta_0: self.theta_0,
                            mu_grid: mu_grid.to_vec(),
                            reps,
                            seed,
                        };
                        match scenario.validate() {
                            Ok(()) => ok.push(scenario),
                            Err(e) => skipped.push(SkippedScenario { scenario, reason: e.to_string() }),
                        }
                    }
                }
            }
        }
        (ok, skipped)
    }
}

/// Picks `per_group` scenarios for each sample size at evenly spaced
/// positions, offset by the group index so different sizes cover different
/// variance/correlation cells.
pub fn stratified_subsample(scenarios: &[GaussianScenario], per_group: usize) -> Vec<GaussianScenario> {
    let mut ns: Vec<usize> = scenarios.iter().map(|s| s.n).collect();
    ns.dedup();
    let mut out = Vec::new();
    for (g, &n) in ns.iter().enumerate() {
        let group: Vec<&GaussianScenario> = scenarios.iter().filter(|s| s.n == n).collect();
        let len = group.len();
        let take = per_group.min(len);
        let mut idx: Vec<usize> = (0..take).map(|k| (k * len / take + g) % len).collect();
        idx.sort_unstable();
        idx.dedup();
        out.extend(idx.into_iter().map(|i| group[i].clone()));
    }
    out
}

/// Outcome of one grid scenario; failures are isolated.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub scenario: GaussianScenario,
    pub result: Result<ScenarioSummary>,
}

/// Runs each scenario in order. A failing scenario is recorded and the run
/// continues.
pub fn run_grid(scenarios: &[GaussianScenario], rules: &[Rule], opts: &GaussianOptions) -> Vec<GridOutcome> {
    scenarios
        .iter()
        .map(|s| GridOutcome {
            scenario: s.clone(),
            result: run_scenario(s, rules, opts).map(|(_, summary)| summary),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPoint {
    pub n: usize,
    pub median_abs_lambda: f64,
    pub median_lambda: f64,
    /// Mean of `theta - theta_0` over replications.
    pub bias: f64,
    pub bias_se: f64,
    pub excluded: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub mu: f64,
    pub points: Vec<ConsistencyPoint>,
    /// Median `|lambda_hat|` strictly decreases along the sequence
    /// (vacuously true for a single point).
    pub lambda_decreasing: bool,
    /// `|bias|` at the largest `n` is below both `|bias|` at the smallest `n`
    /// and three standard errors.
    pub bias_vanishing: bool,
}

/// Tracks the plug-in weight and the combined estimator's bias at a fixed
/// `mu` as `n` grows. Uses estimated moments.
pub fn check_consistency(base: &GaussianScenario, mu: f64, n_sequence: &[usize]) -> Result<ConsistencyReport> {
    if n_sequence.is_empty() {
        return Err(Error::InvalidArgument("empty n sequence".into()));
    }
    let mut points = Vec::with_capacity(n_sequence.len());
    for &n in n_sequence {
        let scn = GaussianScenario { n, mu_grid: vec![mu], ..base.clone() };
        let (vals, excluded) = replicate_at(&scn, mu, false, |d| {
            let l = crate::combiner::lambda_hat(d)?;
            Ok((l, d.theta_u + l * (d.theta_b - d.theta_u) - scn.theta_0))
        })?;
        let lambdas: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let abs: Vec<f64> = lambdas.iter().map(|l| l.abs()).collect();
        let errs: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let (bias, bias_se) = stats::mean_and_se(&errs);
        points.push(ConsistencyPoint {
            n,
            median_abs_lambda: stats::median(&abs),
            median_lambda: stats::median(&lambdas),
            bias,
            bias_se,
            excluded,
        });
    }
    let lambda_decreasing = points.windows(2).all(|w| w[1].median_abs_lambda < w[0].median_abs_lambda);
    let (first, last) = (points[0], points[points.len() - 1]);
    let bias_vanishing = points.len() == 1
        || (last.bias.abs() < first.bias.abs() && last.bias.abs() < 3.0 * last.bias_se.max(f64::MIN_POSITIVE));
    Ok(ConsistencyReport { mu, points, lambda_decreasing, bias_vanishing })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnboundedBiasReport {
    /// `(mu, relative MSE of the combined rule, relative MSE of theta_b alone)`.
    pub points: Vec<(f64, f64, f64)>,
    pub tail_relative_mse: f64,
    /// `|tail relative MSE - 1| < 0.02`.
    pub tail_within: bool,
}

/// Relative MSE of the combined rule along an increasing bias sequence.
pub fn check_unbounded_bias(scn: &GaussianScenario, mu_sequence: &[f64]) -> Result<UnboundedBiasReport> {
    let last = *mu_sequence
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty mu sequence".into()))?;
    let reach = 20.0 * (scn.var_psi_u / scn.n as f64).sqrt();
    if last < reach {
        return Err(Error::InvalidArgument(format!(
            "last mu {last} is below 20 standard errors ({reach})"
        )));
    }
    let s = GaussianScenario { mu_grid: mu_sequence.to_vec(), ..scn.clone() };
    let (points, _) = run_scenario(&s, &[Rule::Combined, Rule::Biased], &GaussianOptions::default())?;
    let rows: Vec<(f64, f64, f64)> = points
        .chunks(3)
        .map(|c| (c[0].mu, c[1].relative_mse, c[2].relative_mse))
        .collect();
    let tail = rows.last().expect("nonempty").1;
    Ok(UnboundedBiasReport { points: rows, tail_relative_mse: tail, tail_within: (tail - 1.0).abs() < 0.02 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub mu: f64,
    pub mse: f64,
    pub mc_se: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub shape: ShapeParams,
    /// Variance of `theta_u` (population, finite sample).
    pub var_u: f64,
    pub bound: f64,
    pub points: Vec<BoundPoint>,
    pub sup_mse: f64,
    pub all_within: bool,
}

/// Compares the Monte Carlo MSE of the combined rule, built with known
/// moments, against the worst-case bound at every grid `mu`. A point passes
/// when `mse <= bound + 4 mc_se`.
pub fn check_bound(scn: &GaussianScenario, mu_grid: &[f64]) -> Result<BoundReport> {
    let s = GaussianScenario { mu_grid: mu_grid.to_vec(), ..scn.clone() };
    s.validate()?;
    let shape = s.shape()?;
    let var_u = s.var_psi_u / s.n as f64;
    let bound = crate::combiner::worst_case_bound(&shape, var_u)?;
    let opts = GaussianOptions { known_moments: true, ..GaussianOptions::default() };
    let (curve, _) = run_scenario(&s, &[Rule::Combined], &opts)?;
    let points: Vec<BoundPoint> = curve
        .chunks(2)
        .map(|c| BoundPoint {
            mu: c[1].mu,
            mse: c[1].mse,
            mc_se: c[1].mc_se,
            within: c[1].mse <= bound + 4.0 * c[1].mc_se,
        })
        .collect();
    let sup_mse = points.iter().map(|p| p.mse).fold(f64::NEG_INFINITY, f64::max);
    let all_within = points.iter().all(|p| p.within);
    Ok(BoundReport { shape, var_u, bound, points, sup_mse, all_within })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(reps: usize) -> GaussianScenario {
        GaussianScenario::symmetric(200, mu_grid(0.6, 0.05).unwrap(), reps, 42)
    }

    #[test]
    fn mu_grid_lengths() {
        let g = mu_grid(1.5, 0.002).unwrap();
        assert_eq!(g.len(), 751);
        assert_eq!(g[750], 1.5);
        assert_eq!(g[30], 0.06);
        let g = mu_grid(1.5, 0.01).unwrap();
        assert_eq!(g.len(), 151);
        assert_eq!(g[7], 0.07);
        assert_eq!(mu_grid(1.0, 0.3).unwrap().len(), 4);
        assert!(mu_grid(1.0, 0.0).is_err());
    }

    #[test]
    fn scenario_validation() {
        let mut s = small(10);
        assert!(s.validate().is_ok());
        s.corr = 1.0;
        assert!(matches!(s.validate(), Err(Error::Degenerate(_))));
        let mut s = small(10);
        s.var_psi_b = 0.0;
        s.corr = 0.25;
        assert!(s.validate().is_err());
        s.corr = 0.0;
        assert!(s.validate().is_ok());
        let mut s = small(10);
        s.n = 1;
        assert!(s.validate().is_err());
        let mut s = small(10);
        s.mu_grid = vec![0.1, 0.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_variance_biased_panel_is_constant() {
        let mut s = small(10);
        s.var_psi_b = 0.0;
        let p = draw_panel(&s, 0.3, 4).unwrap();
        assert!(p.psi.iter().all(|&(_, b)| b == s.theta_0 + 0.3));
        assert_eq!(p.draw.theta_b, s.theta_0 + 0.3);
        assert_eq!(p.draw.moments.var_b, 0.0);
    }

    #[test]
    fn panel_matches_its_raw_pairs() {
        let s = GaussianScenario { corr: 0.5, var_psi_b: 4.0, ..small(10) };
        let p = draw_panel(&s, 0.2, 3).unwrap();
        assert_eq!(p.psi.len(), s.n);
        let n = s.n as f64;
        let mu = p.psi.iter().map(|x| x.0).sum::<f64>() / n;
        let mb = p.psi.iter().map(|x| x.1).sum::<f64>() / n;
        assert!((p.draw.theta_u - mu).abs() < 1e-12);
        assert!((p.draw.theta_b - mb).abs() < 1e-12);
        let centered = InfluencePanel::from_pairs(p.psi.iter().map(|&(u, b)| (u - mu, b - mb))).unwrap();
        let m = estimate_moments(&centered).unwrap();
        assert!((m.var_u - p.draw.moments.var_u).abs() < 1e-12 * m.var_u);
        assert!((m.cov_bu - p.draw.moments.cov_bu).abs() < 1e-12 * m.var_b);
        // Same noise at a different bias.
        let q = draw_panel(&s, 0.7, 3).unwrap();
        assert_eq!(q.draw.theta_u, p.draw.theta_u);
        assert!((q.draw.theta_b - p.draw.theta_b - 0.5).abs() < 1e-12);
        assert_eq!(q.influence, p.influence);
    }

    #[test]
    fn panel_is_reproducible() {
        let s = small(10);
        let a = draw_panel(&s, 0.1, 7).unwrap();
        let b = draw_panel(&s, 0.1, 7).unwrap();
        assert_eq!(a.psi, b.psi);
        let c = draw_panel(&s, 0.1, 8).unwrap();
        assert_ne!(a.psi, c.psi);
    }

    #[test]
    fn engine_agrees_with_panel_route() {
        // The sweep computes moments in one buffer pass; the panel route goes
        // through estimate_moments. They must agree to rounding.
        let s = GaussianScenario { reps: 20, ..small(20) };
        let (vals, ex) = replicate_at(&s, 0.25, false, |d| Ok(*d)).unwrap();
        assert_eq!(ex, 0);
        for (rep, d) in vals.iter().enumerate() {
            let p = draw_panel(&s, 0.25, rep).unwrap();
            assert!((d.theta_u - p.draw.theta_u).abs() < 1e-14);
            assert!((d.theta_b - p.draw.theta_b).abs() < 1e-14);
            assert!((d.moments.var_u - p.draw.moments.var_u).abs() < 1e-12 * d.moments.var_u);
        }
    }

    #[test]
    fn bias_threshold_conventions() {
        let mu = [0.0, 0.1, 0.2, 0.3, 0.4];
        assert_eq!(bias_thresholds(&mu, &[0.5, 0.8, 1.1, 0.9, 0.95]), (0.1, 0.4));
        assert_eq!(bias_thresholds(&mu, &[1.0, 0.8, 0.9, 0.9, 0.95]), (0.0, 0.4));
        assert_eq!(bias_thresholds(&mu, &[0.5, 0.8, 0.9, 0.9, 0.95]), (0.4, 0.4));
        assert_eq!(bias_thresholds(&mu, &[1.5, 1.8, 1.9, 1.9, 1.95]), (0.0, 0.0));
    }

    #[test]
    fn unbiased_rule_has_unit_relative_mse() {
        let s = small(200);
        let (pts, sum) = run_scenario(&s, &[Rule::Combined], &GaussianOptions::default()).unwrap();
        assert_eq!(pts.len(), s.mu_grid.len() * 2);
        for p in pts.iter().filter(|p| p.rule == Rule::Unbiased) {
            assert_eq!(p.relative_mse, 1.0);
        }
        let u = sum.rule(Rule::Unbiased).unwrap();
        assert_eq!(u.bias_threshold, 0.0);
        assert_eq!((u.worst_rel_mse, u.best_rel_mse), (1.0, 1.0));
        let c = sum.rule(Rule::Combined).unwrap();
        assert!(c.best_rel_mse <= c.worst_rel_mse);
        assert!(s.mu_grid.contains(&c.bias_threshold) || c.bias_threshold == 0.0);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let s = small(300);
        let rules = [Rule::Combined, Rule::ShrinkageClipped, Rule::Anchored];
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_scenario(&s, &rules, &GaussianOptions::default()).unwrap())
        };
        let (a, sa) = run(1);
        let (b, sb) = run(4);
        assert_eq!(sa, sb);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mse.to_bits(), y.mse.to_bits());
            assert_eq!(x.mc_se.to_bits(), y.mc_se.to_bits());
        }
    }

    #[test]
    fn doubling_n_halves_unbiased_mse_with_known_moments() {
        let opts = GaussianOptions { known_moments: true, ..Default::default() };
        let s1 = GaussianScenario { mu_grid: vec![0.0], reps: 4000, ..small(0) };
        let s2 = GaussianScenario { n: 400, seed: 43, ..s1.clone() };
        let (a, _) = run_scenario(&s1, &[Rule::Unbiased], &opts).unwrap();
        let (b, _) = run_scenario(&s2, &[Rule::Unbiased], &opts).unwrap();
        let diff = a[0].mse / 2.0 - b[0].mse;
        let se = ((a[0].mc_se / 2.0).powi(2) + b[0].mc_se.powi(2)).sqrt();
        assert!(diff.abs() < 3.0 * se, "{} vs {}", a[0].mse, b[0].mse);
    }

    #[test]
    fn stratified_subsample_is_balanced() {
        let grid = GridSpec::default();
        let (ok, skipped) = grid.scenarios(&[0.0], 10, 1);
        assert_eq!(ok.len(), 520);
        assert_eq!(skipped.len(), 4 * 5 * 4);
        let sub = stratified_subsample(&ok, 15);
        assert_eq!(sub.len(), 60);
        for n in grid.ns {
            assert_eq!(sub.iter().filter(|s| s.n == n).count(), 15);
        }
    }

    #[test]
    fn consistency_single_point_has_no_trend() {
        let s = small(100);
        let r = check_consistency(&s, 0.5, &[300]).unwrap();
        assert_eq!(r.points.len(), 1);
        assert!(r.lambda_decreasing && r.bias_vanishing);
    }

    #[test]
    fn unbounded_bias_requires_far_tail() {
        let s = small(100);
        assert!(check_unbounded_bias(&s, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn grid_isolates_failures() {
        let good = small(50);
        let bad = GaussianScenario { corr: 1.0, ..good.clone() };
        let out = run_grid(&[good, bad], &[Rule::Combined], &GaussianOptions::default());
        assert!(out[0].result.is_ok());
        assert!(out[1].result.is_err());
    }
}
