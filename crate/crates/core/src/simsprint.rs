//! Trial-calibrated binary-outcome simulation with an unobserved binary
//! confounder `U`.
//!
//! The randomized trial assigns treatment independently of `U`. The
//! observational study assigns it with `P(T = 1 | U) = logistic(gamma (U - 1/2))`,
//! so the treatment odds ratio across `U` strata is `exp(gamma)`. Both
//! studies are analysed with an inverse-probability-weighted difference in
//! means using the empirical treated fraction.
//!
//! Two routes produce data. [`simulate_trial`] and [`simulate_observational`]
//! draw individuals. The sweep draws the sufficient counts directly
//! (treated/control sizes and outcome totals) from their exact binomial
//! laws, which is what makes `10^4` replications of `10^5`-unit studies
//! cheap. In the sweep, the confounder and the pair of potential outcomes of
//! every observational unit are drawn once per replication and shared
//! across the `gamma` grid; only the treatment assignment is redrawn per
//! `gamma`. The trial is drawn once per replication and shared across the
//! whole sweep.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combiner::{lambda_hat, EstimatorDraw, MomentEstimates};
use crate::error::{Error, Result};
use crate::moments::ipw_influence;
use crate::rng::{self, domain};
use crate::stats;

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SprintModel {
    pub p_u: f64,
    pub p_y1_u1: f64,
    pub p_y1_u0: f64,
    pub p_y0_u1: f64,
    pub p_y0_u0: f64,
    pub e_exp: f64,
    pub gamma: f64,
    pub n_exp: usize,
    pub n_obs: usize,
}

impl Default for SprintModel {
    fn default() -> Self {
        SprintModel {
            p_u: 0.28,
            p_y1_u1: 0.081,
            p_y1_u0: 0.040,
            p_y0_u1: 0.096,
            p_y0_u0: 0.057,
            e_exp: 0.5,
            gamma: 0.0,
            n_exp: 9361,
            n_obs: 100_000,
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SprintModel {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_u", self.p_u),
            ("p_y1_u1", self.p_y1_u1),
            ("p_y1_u0", self.p_y1_u0),
            ("p_y0_u1", self.p_y0_u1),
            ("p_y0_u0", self.p_y0_u0),
            ("e_exp", self.e_exp),
        ];
        for (name, p) in probs {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} = {p} outside (0, 1)")));
            }
        }
        if !self.gamma.is_finite() {
            return Err(Error::InvalidArgument("gamma must be finite".into()));
        }
        if self.n_exp < 2 || self.n_obs < 2 {
            return Err(Error::InvalidArgument("study sizes must be >= 2".into()));
        }
        Ok(())
    }

    /// Population average treatment effect.
    pub fn theta_0(&self) -> f64 {
        self.p_u * (self.p_y1_u1 - self.p_y0_u1) + (1.0 - self.p_u) * (self.p_y1_u0 - self.p_y0_u0)
    }

    /// `P(Y_a = 1)` marginalized over `U`.
    pub fn marginal_outcome(&self, treated: bool) -> f64 {
        let (a, b) = if treated { (self.p_y1_u1, self.p_y1_u0) } else { (self.p_y0_u1, self.p_y0_u0) };
        self.p_u * a + (1.0 - self.p_u) * b
    }

    /// Observational `P(T = 1 | U = u)`.
    pub fn assign_prob(&self, u: bool) -> f64 {
        logistic(self.gamma * (if u { 0.5 } else { -0.5 }))
    }

    /// Large-sample limit of the observational difference in means,
    /// `E[Y | T = 1] - E[Y | T = 0]`.
    pub fn observational_limit(&self) -> f64 {
        let (e1, e0) = (self.assign_prob(true), self.assign_prob(false));
        let pt = self.p_u * e1 + (1.0 - self.p_u) * e0;
        let w1_treated = self.p_u * e1 / pt;
        let w1_control = self.p_u * (1.0 - e1) / (1.0 - pt);
        let m1 = w1_treated * self.p_y1_u1 + (1.0 - w1_treated) * self.p_y1_u0;
        let m0 = w1_control * self.p_y0_u1 + (1.0 - w1_control) * self.p_y0_u0;
        m1 - m0
    }

    fn outcome_prob(&self, treated: bool, u: bool) -> f64 {
        match (treated, u) {
            (true, true) => self.p_y1_u1,
            (true, false) => self.p_y1_u0,
            (false, true) => self.p_y0_u1,
            (false, false) => self.p_y0_u0,
        }
    }
}

/// Individual-level study data. `u` is kept for diagnostics only; the
/// estimators never read it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub t: Vec<bool>,
    pub y: Vec<bool>,
    pub u: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.t.iter().filter(|&&t| t).count() as f64 / self.len() as f64
    }

    /// Treatment odds ratio between the `U = 1` and `U = 0` strata.
    pub fn stratum_odds_ratio(&self) -> f64 {
        let mut c = [[0u64; 2]; 2];
        for (&t, &u) in self.t.iter().zip(&self.u) {
            c[u as usize][t as usize] += 1;
        }
        let odds = |s: [u64; 2]| s[1] as f64 / s[0] as f64;
        odds(c[1]) / odds(c[0])
    }
}

fn simulate_units<R: Rng>(model: &SprintModel, n: usize, rng: &mut R, assign: impl Fn(bool) -> f64) -> Dataset {
    let mut d = Dataset { t: Vec::with_capacity(n), y: Vec::with_capacity(n), u: Vec::with_capacity(n) };
    for _ in 0..n {
        let u = rng::uniform01(rng) < model.p_u;
        let t = rng::uniform01(rng) < assign(u);
        let y = rng::uniform01(rng) < model.outcome_prob(t, u);
        d.u.push(u);
        d.t.push(t);
        d.y.push(y);
    }
    d
}

/// Randomized trial of `n_exp` units; assignment ignores `U` and `gamma`.
pub fn simulate_trial(model: &SprintModel, seed: u64, rep: usize) -> Result<Dataset> {
    model.validate()?;
    let mut r = rng::stream(seed, &[domain::SPRINT_TRIAL, 1, rep as u64]);
    Ok(simulate_units(model, model.n_exp, &mut r, |_| model.e_exp))
}

/// Confounded observational study of `n_obs` units.
pub fn simulate_observational(model: &SprintModel, seed: u64, rep: usize) -> Result<Dataset> {
    model.validate()?;
    let mut r = rng::stream(
        seed,
        &[domain::SPRINT_OBS, 1, model.gamma.to_bits(), model.n_obs as u64, rep as u64],
    );
    Ok(simulate_units(model, model.n_obs, &mut r, |u| model.assign_prob(u)))
}

/// How the treatment probability in the IPW weights is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityMode {
    /// Empirical treated fraction.
    Empirical,
    /// A known constant.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpwEstimate {
    pub theta: f64,
    /// `n^-2 sum phi^2` of the IPW influence values.
    pub var: f64,
}

/// Sufficient statistics of a binary-outcome study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmCounts {
    pub n_treated: u64,
    pub y_treated: u64,
    pub n_control: u64,
    pub y_control: u64,
}

impl ArmCounts {
    pub fn from_dataset(d: &Dataset) -> Self {
        let mut c = ArmCounts { n_treated: 0, y_treated: 0, n_control: 0, y_control: 0 };
        for (&t, &y) in d.t.iter().zip(&d.y) {
            if t {
                c.n_treated += 1;
                c.y_treated += y as u64;
            } else {
                c.n_control += 1;
                c.y_control += y as u64;
            }
        }
        c
    }

    pub fn n(&self) -> u64 {
        self.n_treated + self.n_control
    }

    /// IPW estimate and influence-function variance from counts. Agrees with
    /// [`ipw_ate`] on the dataset the counts came from.
    pub fn ipw(&self, mode: PropensityMode) -> Result<IpwEstimate> {
        if self.n_treated == 0 || self.n_control == 0 {
            return Err(Error::Positivity(format!(
                "empty arm: {} treated, {} control",
                self.n_treated, self.n_control
            )));
        }
        let n = self.n() as f64;
        let e = match mode {
            PropensityMode::Empirical => self.n_treated as f64 / n,
            PropensityMode::Fixed(e) => e,
        };
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::Positivity(format!("treatment probability {e} outside (0, 1)")));
        }
        let (y1, y0) = (self.y_treated as f64, self.y_control as f64);
        let theta = y1 / (n * e) - y0 / (n * (1.0 - e));
        let m1 = y1 / self.n_treated as f64;
        let m0 = y0 / self.n_control as f64;
        let shift = m1 - m0 - theta;
        // Four distinct influence values, one per (arm, outcome) cell.
        let cells = [
            (y1, (1.0 - m1) / e + shift),
            (self.n_treated as f64 - y1, -m1 / e + shift),
            (y0, -(1.0 - m0) / (1.0 - e) + shift),
            (self.n_control as f64 - y0, m0 / (1.0 - e) + shift),
        ];
        let ss = stats::compensated_sum(cells.iter().map(|&(k, phi)| k * phi * phi));
        Ok(IpwEstimate { theta, var: ss / (n * n) })
    }
}

/// IPW difference in means with influence-function variance, computed unit
/// by unit.
pub fn ipw_ate(d: &Dataset, mode: PropensityMode) -> Result<IpwEstimate> {
    let c = ArmCounts::from_dataset(d);
    if c.n_treated == 0 || c.n_control == 0 {
        return Err(Error::Positivity(format!(
            "empty arm: {} treated, {} control",
            c.n_treated, c.n_control
        )));
    }
    let n = d.len() as f64;
    let e = match mode {
        PropensityMode::Empirical => c.n_treated as f64 / n,
        PropensityMode::Fixed(e) => e,
    };
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::Positivity(format!("treatment probability {e} outside (0, 1)")));
    }
    let theta = stats::compensated_sum(d.t.iter().zip(&d.y).map(|(&t, &y)| {
        let y = y as u8 as f64;
        if t {
            y / e
        } else {
            -y / (1.0 - e)
        }
    })) / n;
    let m1 = c.y_treated as f64 / c.n_treated as f64;
    let m0 = c.y_control as f64 / c.n_control as f64;
    let mut ss = stats::CompensatedSum::new();
    for (&t, &y) in d.t.iter().zip(&d.y) {
        let phi = ipw_influence(y as u8 as f64, t, e, m1, m0, theta)?;
        ss.add(phi * phi);
    }
    Ok(IpwEstimate { theta, var: ss.value() / (n * n) })
}

fn binom<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Trial counts: arm sizes and outcome totals, exact in distribution.
pub fn sample_trial_counts<R: Rng>(model: &SprintModel, rng: &mut R) -> ArmCounts {
    let n = model.n_exp as u64;
    let n_treated = binom(rng, n, model.e_exp);
    let n_control = n - n_treated;
    ArmCounts {
        n_treated,
        y_treated: binom(rng, n_treated, model.marginal_outcome(true)),
        n_control,
        y_control: binom(rng, n_control, model.marginal_outcome(false)),
    }
}

/// Observational units grouped by `(U, Y_1, Y_0)`, indexed
/// `[u][2 * y1 + y0]`. Potential outcomes are independent given `U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TypeCounts(pub [[u64; 4]; 2]);

pub fn sample_type_counts<R: Rng>(model: &SprintModel, n: u64, rng: &mut R) -> TypeCounts {
    let n_u1 = binom(rng, n, model.p_u);
    let mut out = [[0u64; 4]; 2];
    for (u, m) in [(0usize, n - n_u1), (1, n_u1)] {
        let p1 = model.outcome_prob(true, u == 1);
        let p0 = model.outcome_prob(false, u == 1);
        let probs = [(1.0 - p1) * (1.0 - p0), (1.0 - p1) * p0, p1 * (1.0 - p0), p1 * p0];
        // Multinomial via sequential conditional binomials.
        let mut left = m;
        let mut mass = 1.0;
        for k in 0..3 {
            let c = binom(rng, left, (probs[k] / mass).min(1.0));
            out[u][k] = c;
            left -= c;
            mass -= probs[k];
        }
        out[u][3] = left;
    }
    TypeCounts(out)
}

/// Observed counts after confounded assignment of a typed population.
pub fn assign_counts<R: Rng>(model: &SprintModel, types: &TypeCounts, rng: &mut R) -> ArmCounts {
    let mut c = ArmCounts { n_treated: 0, y_treated: 0, n_control: 0, y_control: 0 };
    for u in 0..2 {
        let e = model.assign_prob(u == 1);
        for k in 0..4 {
            let m = types.0[u][k];
            let treated = binom(rng, m, e);
            let (y1, y0) = (k >> 1 == 1, k & 1 == 1);
            c.n_treated += treated;
            c.n_control += m - treated;
            if y1 {
                c.y_treated += treated;
            }
            if y0 {
                c.y_control += m - treated;
            }
        }
    }
    c
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn gamma_grid_even(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `0, step, ..., hi`, computed as `i / (1 / step)` when that is an integer.
pub fn gamma_grid_step(hi: f64, step: f64) -> Vec<f64> {
    let count = (hi / step + 1e-9).floor() as usize;
    let inv = 1.0 / step;
    if (inv - inv.round()).abs() < 1e-9 {
        (0..=count).map(|i| i as f64 / inv.round()).collect()
    } else {
        (0..=count).map(|i| i as f64 * step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub gamma_grid: Vec<f64>,
    pub n_obs: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub bootstrap_resamples: usize,
    /// Two-sided level of the bootstrap intervals.
    pub alpha: f64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_grid.is_empty() || self.n_obs.is_empty() {
            return Err(Error::InvalidArgument("gamma grid and n_obs set must be nonempty".into()));
        }
        if self.gamma_grid.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument("gamma grid has non-finite values".into()));
        }
        if self.n_obs.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument("n_obs values must be >= 2".into()));
        }
        if self.reps < 2 {
            return Err(Error::InvalidArgument("reps must be >= 2".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::InvalidArgument("bootstrap_resamples must be > 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument("alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSweepResult {
    pub gamma: f64,
    pub big_gamma: f64,
    pub n_obs: usize,
    pub rmse_unbiased: f64,
    pub unbiased_ci_low: f64,
    pub unbiased_ci_high: f64,
    pub rmse_combined: f64,
    pub combined_ci_low: f64,
    pub combined_ci_high: f64,
    pub rmse_biased: f64,
    /// Mean of `theta_b - theta_0`.
    pub bias_biased: f64,
    pub bias_biased_se: f64,
    pub mean_lambda: f64,
    pub reps_used: usize,
    pub excluded: u64,
}

/// Per-replication errors at one `(n_obs, gamma)` cell.
#[derive(Debug, Clone, Copy)]
struct CellDraw {
    err_u: f64,
    err_b: f64,
    err_c: f64,
    lambda: f64,
}

fn combine_counts(trial: &ArmCounts, obs: &ArmCounts, theta_0: f64) -> Result<CellDraw> {
    let u = trial.ipw(PropensityMode::Empirical)?;
    let b = obs.ipw(PropensityMode::Empirical)?;
    // Disjoint samples: the covariance term is exactly zero.
    let d = EstimatorDraw::new(u.theta, b.theta, MomentEstimates::new(u.var, b.var, 0.0)?, (trial.n() + obs.n()) as usize)?;
    let lambda = lambda_hat(&d)?;
    Ok(CellDraw {
        err_u: u.theta - theta_0,
        err_b: b.theta - theta_0,
        err_c: u.theta + lambda * (b.theta - u.theta) - theta_0,
        lambda,
    })
}

fn sweep_rep(model: &SprintModel, cfg: &SweepConfig, rep: usize) -> Vec<Result<CellDraw>> {
    let theta_0 = model.theta_0();
    let mut trial_rng = rng::stream(cfg.seed, &[domain::SPRINT_TRIAL, 0, rep as u64]);
    let trial = sample_trial_counts(model, &mut trial_rng);
    let mut out = Vec::with_capacity(cfg.n_obs.len() * cfg.gamma_grid.len());
    for &n_obs in &cfg.n_obs {
        let mut obs_rng = rng::stream(cfg.seed, &[domain::SPRINT_OBS, 0, n_obs as u64, rep as u64]);
        let types = sample_type_counts(model, n_obs as u64, &mut obs_rng);
        for &gamma in &cfg.gamma_grid {
            let m = SprintModel { gamma, n_obs, ..model.clone() };
            let mut a_rng = rng::stream(
                cfg.seed,
                &[domain::SPRINT_ASSIGN, n_obs as u64, gamma.to_bits(), rep as u64],
            );
            let obs = assign_counts(&m, &types, &mut a_rng);
            out.push(combine_counts(&trial, &obs, theta_0));
        }
    }
    out
}

/// RMSE of the trial-only and combined estimators for every
/// `(n_obs, gamma)` pair, in `n_obs`-major order, with percentile bootstrap
/// intervals over the replication-level squared errors.
pub fn run_gamma_sweep(model: &SprintModel, cfg: &SweepConfig) -> Result<Vec<GammaSweepResult>> {
    model.validate()?;
    cfg.validate()?;
    let chunks = cfg.reps.div_ceil(CHUNK);
    let per_rep: Vec<Vec<Result<CellDraw>>> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| (c * CHUNK..((c + 1) * CHUNK).min(cfg.reps)).map(|rep| sweep_rep(model, cfg, rep)).collect::<Vec<_>>())
        .collect();

    let ng = cfg.gamma_grid.len();
    let cells: Vec<(usize, usize)> = (0..cfg.n_obs.len())
        .flat_map(|i| (0..ng).map(move |j| (i, j)))
        .collect();
    cells
        .par_iter()
        .map(|&(i, j)| {
            let k = i * ng + j;
            let draws: Vec<CellDraw> = per_rep.iter().filter_map(|r| r[k].as_ref().ok().copied()).collect();
            let excluded = (cfg.reps - draws.len()) as u64;
            if draws.len() < 2 {
                return Err(Error::Degenerate(format!(
                    "fewer than two usable replications at n_obs={}, gamma={}",
                    cfg.n_obs[i], cfg.gamma_grid[j]
                )));
            }
            let sq_u: Vec<f64> = draws.iter().map(|d| d.err_u * d.err_u).collect();
            let sq_c: Vec<f64> = draws.iter().map(|d| d.err_c * d.err_c).collect();
            let sq_b: Vec<f64> = draws.iter().map(|d| d.err_b * d.err_b).collect();
            let errs_b: Vec<f64> = draws.iter().map(|d| d.err_b).collect();
            let lambdas: Vec<f64> = draws.iter().map(|d| d.lambda).collect();
            let gamma = cfg.gamma_grid[j];
            let n_obs = cfg.n_obs[i];
            let boot = |which: u64, sq: &[f64]| {
                let mut r = rng::stream(
                    cfg.seed,
                    &[domain::BOOTSTRAP, n_obs as u64, gamma.to_bits(), which],
                );
                stats::percentile_bootstrap(sq, cfg.bootstrap_resamples, cfg.alpha, &mut r, stats::rmse_of_squares)
            };
            let (ul, uh) = boot(0, &sq_u);
            let (cl, ch) = boot(1, &sq_c);
            let (bias, bias_se) = stats::mean_and_se(&errs_b);
            Ok(GammaSweepResult {
                gamma,
                big_gamma: gamma.exp(),
                n_obs,
                rmse_unbiased: stats::rmse_of_squares(&sq_u),
                unbiased_ci_low: ul,
                unbiased_ci_high: uh,
                rmse_combined: stats::rmse_of_squares(&sq_c),
                combined_ci_low: cl,
                combined_ci_high: ch,
                rmse_biased: stats::rmse_of_squares(&sq_b),
                bias_biased: bias,
                bias_biased_se: bias_se,
                mean_lambda: stats::mean(&lambdas),
                reps_used: draws.len(),
                excluded,
            })
        })
        .collect()
}

/// Largest grid `gamma` at which the combined RMSE is below the trial-only
/// RMSE for the given `n_obs`.
pub fn crossover_gamma(results: &[GammaSweepResult], n_obs: usize) -> Option<f64> {
    results
        .iter()
        .filter(|r| r.n_obs == n_obs && r.rmse_combined < r.rmse_unbiased)
        .map(|r| r.gamma)
        .fold(None, |acc: Option<f64>, g| Some(acc.map_or(g, |a| a.max(g))))
}
