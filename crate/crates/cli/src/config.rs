//! Run configuration: strict JSON parsing, fidelity-dependent defaults, and
//! the canonical hash recorded in every manifest.

use std::fs;
use std::path::{Path, PathBuf};

use estfuse::baselines::BaselineConfig;
use estfuse::simgauss::{self, GaussianScenario, GridSpec};
use estfuse::simsprint::{self, SprintModel, SweepConfig};
use estfuse::Rule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 20240611;
pub const MIN_REPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    GaussianCurve,
    GaussianGrid,
    Sprint,
    BoundCheck,
    Consistency,
    CutoffTable,
}

impl Experiment {
    pub fn id(self) -> &'static str {
        match self {
            Experiment::GaussianCurve => "gaussian-curve",
            Experiment::GaussianGrid => "gaussian-grid",
            Experiment::Sprint => "sprint",
            Experiment::BoundCheck => "bound-check",
            Experiment::Consistency => "consistency",
            Experiment::CutoffTable => "cutoff-table",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Fidelity {
    #[default]
    Desk,
    Full,
}

/// Scenario parameters without the grid, seed and replication count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub n: usize,
    pub var_psi_u: f64,
    pub var_psi_b: f64,
    pub corr: f64,
    pub theta_0: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams { n: 1000, var_psi_u: 1.0, var_psi_b: 1.0, corr: 0.0, theta_0: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeCase {
    pub rho: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSprint {
    model: Option<SprintModel>,
    n_obs: Option<Vec<usize>>,
    gamma_max: Option<f64>,
    gamma_even: Option<usize>,
    gamma_step: Option<f64>,
    gamma_values: Option<Vec<f64>>,
    bootstrap_resamples: Option<usize>,
    alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBound {
    n: Option<usize>,
    var_psi_u: Option<f64>,
    cases: Option<Vec<ShapeCase>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConsistency {
    mu: Option<f64>,
    n_sequence: Option<Vec<usize>>,
}

/// The file as written; every key optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    experiment: Option<Experiment>,
    seed: Option<u64>,
    reps: Option<usize>,
    workers: Option<usize>,
    out: Option<PathBuf>,
    fidelity: Option<Fidelity>,
    rules: Option<Vec<Rule>>,
    scenario: Option<ScenarioParams>,
    mu_max: Option<f64>,
    mu_step: Option<f64>,
    known_moments: Option<bool>,
    baselines: Option<BaselineConfig>,
    cutoff_reps: Option<usize>,
    grid: Option<GridSpec>,
    grid_sample_per_n: Option<usize>,
    sprint: Option<RawSprint>,
    bound: Option<RawBound>,
    consistency: Option<RawConsistency>,
    plots: Option<bool>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub fidelity: Option<Fidelity>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SprintSettings {
    pub model: SprintModel,
    pub n_obs: Vec<usize>,
    pub gamma_grid: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundSettings {
    pub n: usize,
    pub var_psi_u: f64,
    pub cases: Vec<ShapeCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencySettings {
    pub mu: f64,
    pub n_sequence: Vec<usize>,
}

/// Fully resolved configuration. Serialization order is fixed, which makes
/// [`RunConfig::hash`] canonical; worker count and output directory do not
/// affect results and are excluded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub fidelity: Fidelity,
    pub seed: u64,
    pub reps: usize,
    pub rules: Vec<Rule>,
    pub scenario: ScenarioParams,
    pub mu_max: f64,
    pub mu_step: f64,
    pub known_moments: bool,
    pub baselines: BaselineConfig,
    pub cutoff_reps: Option<usize>,
    pub grid: GridSpec,
    /// Scenarios kept per sample size; `None` runs the whole grid.
    pub grid_sample_per_n: Option<usize>,
    pub sprint: SprintSettings,
    pub bound: BoundSettings,
    pub consistency: ConsistencySettings,
    pub plots: bool,
    #[serde(skip)]
    pub workers: Option<usize>,
    #[serde(skip)]
    pub out: PathBuf,
}

fn default_cases() -> Vec<ShapeCase> {
    let mut v = Vec::new();
    for rho in [-0.5, 0.0, 0.5] {
        for c in [0.5, 1.0, 2.0] {
            v.push(ShapeCase { rho, c });
        }
    }
    v.extend([
        ShapeCase { rho: 0.0, c: 0.0 },
        ShapeCase { rho: 0.9, c: 1.0 },
        ShapeCase { rho: -0.9, c: 1.0 },
    ]);
    v
}

/// Reads a configuration file. Whitespace-only files count as `{}`.
pub fn load_raw(path: &Path) -> Result<RawConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_raw(&text)
}

pub fn parse_raw(text: &str) -> Result<RawConfig, CliError> {
    let text = if text.trim().is_empty() { "{}" } else { text };
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("config parse error: {e}")))
}

/// Loads and resolves a configuration file with no command-line overrides.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    resolve(load_raw(path)?, &Overrides::default())
}

fn semantic(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

pub fn resolve(raw: RawConfig, o: &Overrides) -> Result<RunConfig, CliError> {
    let experiment = o
        .experiment
        .or(raw.experiment)
        .ok_or_else(|| semantic("experiment", "missing required key `experiment`"))?;
    if let (Some(a), Some(b)) = (o.experiment, raw.experiment) {
        if a != b {
            return Err(semantic(
                "experiment",
                format!("config file says {} but the subcommand is {}", b.id(), a.id()),
            ));
        }
    }
    let fidelity = o.fidelity.or(raw.fidelity).unwrap_or_default();
    let full = fidelity == Fidelity::Full;

    let reps = o.reps.or(raw.reps).unwrap_or(if full { 10_000 } else { 2000 });
    if reps < MIN_REPS {
        return Err(semantic("reps", format!("must be >= {MIN_REPS}, got {reps}")));
    }
    let workers = o.workers.or(raw.workers);
    if workers == Some(0) {
        return Err(semantic("workers", "must be >= 1"));
    }

    let rules = raw.rules.unwrap_or_else(|| Rule::ALL.to_vec());
    if rules.is_empty() {
        return Err(semantic("rules", "must name at least one rule"));
    }

    let scenario = raw.scenario.unwrap_or_default();
    let mu_max = raw.mu_max.unwrap_or(1.5);
    let mu_step = raw.mu_step.unwrap_or(if full { 0.002 } else { 0.01 });
    simgauss::mu_grid(mu_max, mu_step).map_err(|e| semantic("mu_step", e))?;

    let baselines = raw.baselines.unwrap_or_default();
    baselines.validate().map_err(|e| semantic("baselines", e))?;
    if let Some(r) = raw.cutoff_reps {
        if r < 1000 {
            return Err(semantic("cutoff_reps", format!("must be >= 1000, got {r}")));
        }
    }

    let grid = raw.grid.unwrap_or_default();
    if grid.ns.is_empty() || grid.var_psi_u.is_empty() || grid.var_psi_b.is_empty() || grid.corr.is_empty() {
        return Err(semantic("grid", "every axis needs at least one value"));
    }
    let grid_sample_per_n = match raw.grid_sample_per_n {
        Some(0) => None,
        Some(k) => Some(k),
        None if full => None,
        None => Some(15),
    };

    let rs = raw.sprint.unwrap_or_default();
    let model = rs.model.unwrap_or_default();
    model.validate().map_err(|e| semantic("sprint.model", e))?;
    let n_obs = rs
        .n_obs
        .unwrap_or_else(|| if full { vec![10_000, 20_000, 50_000, 100_000] } else { vec![10_000, 100_000] });
    let gamma_grid = match rs.gamma_values {
        Some(v) => v,
        None => {
            let max = rs.gamma_max.unwrap_or(2.0);
            let mut g = simsprint::gamma_grid_even(0.0, max, rs.gamma_even.unwrap_or(20));
            let step = rs.gamma_step.unwrap_or(0.05);
            if step > 0.0 {
                g.extend(simsprint::gamma_grid_step(max, step));
            }
            g.sort_by(f64::total_cmp);
            g.dedup();
            g
        }
    };
    let sprint = SprintSettings {
        model,
        n_obs,
        gamma_grid,
        bootstrap_resamples: rs.bootstrap_resamples.unwrap_or(1000),
        alpha: rs.alpha.unwrap_or(0.05),
    };
    sprint_sweep(&sprint, reps, 0).validate().map_err(|e| semantic("sprint", e))?;

    let rb = raw.bound.unwrap_or_default();
    let bound = BoundSettings {
        n: rb.n.unwrap_or(200),
        var_psi_u: rb.var_psi_u.unwrap_or(1.0),
        cases: rb.cases.unwrap_or_else(default_cases),
    };
    if bound.cases.is_empty() {
        return Err(semantic("bound.cases", "must not be empty"));
    }

    let rc = raw.consistency.unwrap_or_default();
    let consistency = ConsistencySettings {
        mu: rc.mu.unwrap_or(0.5),
        n_sequence: rc.n_sequence.unwrap_or_else(|| vec![500, 2000, 8000]),
    };
    if consistency.mu == 0.0 || !consistency.mu.is_finite() {
        return Err(semantic("consistency.mu", "must be finite and nonzero"));
    }
    if consistency.n_sequence.is_empty() {
        return Err(semantic("consistency.n_sequence", "must not be empty"));
    }

    let cfg = RunConfig {
        experiment,
        fidelity,
        seed: o.seed.or(raw.seed).unwrap_or(DEFAULT_SEED),
        reps,
        rules,
        scenario,
        mu_max,
        mu_step,
        known_moments: raw.known_moments.unwrap_or(false),
        baselines,
        cutoff_reps: raw.cutoff_reps,
        grid,
        grid_sample_per_n,
        sprint,
        bound,
        consistency,
        plots: raw.plots.unwrap_or(true),
        workers,
        out: o.out.clone().or(raw.out).unwrap_or_else(|| PathBuf::from("estfuse-out")),
    };
    cfg.gaussian_scenario().validate().map_err(|e| semantic("scenario", e))?;
    Ok(cfg)
}

pub(crate) fn sprint_sweep(s: &SprintSettings, reps: usize, seed: u64) -> SweepConfig {
    SweepConfig {
        gamma_grid: s.gamma_grid.clone(),
        n_obs: s.n_obs.clone(),
        reps,
        seed,
        bootstrap_resamples: s.bootstrap_resamples,
        alpha: s.alpha,
    }
}

impl RunConfig {
    pub fn mu_grid(&self) -> Vec<f64> {
        simgauss::mu_grid(self.mu_max, self.mu_step).expect("validated at resolve time")
    }

    pub fn gaussian_scenario(&self) -> GaussianScenario {
        let s = self.scenario;
        GaussianScenario {
            n: s.n,
            var_psi_u: s.var_psi_u,
            var_psi_b: s.var_psi_b,
            corr: s.corr,
            theta_0: s.theta_0,
            mu_grid: self.mu_grid(),
            reps: self.reps,
            seed: self.seed,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        sprint_sweep(&self.sprint, self.reps, self.seed)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig, CliError> {
        resolve(parse_raw(s)?, &Overrides::default())
    }

    #[test]
    fn empty_file_names_experiment() {
        for text in ["", "  \n", "{}"] {
            let e = parse(text).unwrap_err();
            assert!(e.to_string().contains("experiment"), "{e}");
            assert_eq!(e.exit_code(), 2);
        }
    }

    #[test]
    fn mu_step_sets_grid_length() {
        let c = parse(r#"{"experiment": "gaussian-curve", "mu_step": 0.002}"#).unwrap();
        assert_eq!(c.mu_grid().len(), 751);
        let c = parse(r#"{"experiment": "gaussian-curve"}"#).unwrap();
        assert_eq!(c.mu_grid().len(), 151);
        let c = parse(r#"{"experiment": "gaussian-curve", "fidelity": "full"}"#).unwrap();
        assert_eq!(c.mu_grid().len(), 751);
        assert_eq!(c.reps, 10_000);
    }

    #[test]
    fn duplicate_and_unknown_keys_are_errors() {
        let e = parse(r#"{"experiment": "sprint", "seed": 1, "seed": 2}"#).unwrap_err();
        assert!(e.to_string().contains("duplicate field `seed`"), "{e}");
        let e = parse(r#"{"experiment": "sprint", "sede": 1}"#).unwrap_err();
        assert!(e.to_string().contains("sede"), "{e}");
        let e = parse(r#"{"experiment": "sprint", "scenario": {"nn": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("nn"), "{e}");
    }

    #[test]
    fn parse_errors_carry_position() {
        let e = parse("{\n  \"experiment\": \"sprint\",\n  oops\n}").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn semantic_errors_name_the_key() {
        let e = parse(r#"{"experiment": "sprint", "reps": 10}"#).unwrap_err();
        assert!(e.to_string().starts_with("reps:"), "{e}");
        let e = parse(r#"{"experiment": "sprint", "rules": ["combined", "bogus"]}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = parse(r#"{"experiment": "gaussian-curve", "scenario": {"corr": 1.0}}"#).unwrap_err();
        assert!(e.to_string().starts_with("scenario:"), "{e}");
        let e = parse(r#"{"experiment": "sprint", "sprint": {"model": {"p_u": 1.5}}}"#).unwrap_err();
        assert!(e.to_string().starts_with("sprint.model:"), "{e}");
    }

    #[test]
    fn overrides_win_and_conflicting_experiment_is_rejected() {
        let raw = parse_raw(r#"{"experiment": "sprint", "seed": 5, "reps": 200}"#).unwrap();
        let o = Overrides { seed: Some(9), reps: Some(300), ..Default::default() };
        let c = resolve(raw.clone(), &o).unwrap();
        assert_eq!((c.seed, c.reps), (9, 300));
        let o = Overrides { experiment: Some(Experiment::GaussianCurve), ..Default::default() };
        assert!(resolve(raw, &o).is_err());
    }

    #[test]
    fn defaults_follow_fidelity() {
        let d = parse(r#"{"experiment": "sprint"}"#).unwrap();
        assert_eq!(d.sprint.n_obs, vec![10_000, 100_000]);
        assert_eq!(d.grid_sample_per_n, Some(15));
        // 20 evenly spaced values plus the 0.05 table grid, shared endpoints once.
        assert_eq!(d.sprint.gamma_grid.len(), 20 + 41 - 2);
        let f = parse(r#"{"experiment": "sprint", "fidelity": "full"}"#).unwrap();
        assert_eq!(f.sprint.n_obs.len(), 4);
        assert_eq!(f.grid_sample_per_n, None);
        assert_eq!(f.rules.len(), Rule::ALL.len());
    }

    #[test]
    fn hash_ignores_workers_and_out() {
        let a = parse(r#"{"experiment": "sprint", "workers": 1, "out": "a"}"#).unwrap();
        let b = parse(r#"{"experiment": "sprint", "workers": 8, "out": "b"}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = parse(r#"{"experiment": "sprint", "seed": 3}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
