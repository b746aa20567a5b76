//! Experiment dispatch and table assembly.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use estfuse::baselines;
use estfuse::simgauss::{self, GaussianOptions, GaussianScenario};
use estfuse::simsprint;
use estfuse::Rule;

use crate::config::{Experiment, RunConfig};
use crate::plot::{self, Figure, Series};
use crate::report::{fmt_g17, write_atomic, FileEntry, Manifest, Table};
use crate::CliError;

/// Artifacts of one experiment before they hit the disk.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub tables: Vec<Table>,
    pub figures: Vec<(String, Figure)>,
}

fn g(x: f64) -> String {
    fmt_g17(x)
}

fn k1000(x: f64) -> String {
    fmt_g17(x * 1000.0)
}

fn gaussian_options(cfg: &RunConfig) -> GaussianOptions {
    GaussianOptions {
        known_moments: cfg.known_moments,
        baselines: cfg.baselines.clone(),
        cutoff_reps: cfg.cutoff_reps,
    }
}

/// Runs the configured experiment and returns its tables and figures.
pub fn compute(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    match cfg.experiment {
        Experiment::GaussianCurve => gaussian_curve(cfg),
        Experiment::GaussianGrid => gaussian_grid(cfg),
        Experiment::Sprint => sprint(cfg),
        Experiment::BoundCheck => bound_check(cfg),
        Experiment::Consistency => consistency(cfg),
        Experiment::CutoffTable => cutoff_table(cfg),
    }
}

/// Runs the experiment and writes every artifact plus `manifest.json` into
/// the output directory.
pub fn execute(cfg: &RunConfig) -> Result<Vec<FileEntry>, CliError> {
    prepare_out_dir(&cfg.out)?;
    let art = compute(cfg)?;
    let mut files = Vec::new();
    for t in &art.tables {
        write_atomic(&cfg.out, &t.file, &t.to_csv()?)?;
        files.push(FileEntry { name: t.file.clone(), schema: t.schema.to_string(), rows: t.rows.len() });
    }
    if cfg.plots {
        for (name, fig) in &art.figures {
            write_atomic(&cfg.out, name, plot::render(fig)?.as_bytes())?;
            files.push(FileEntry { name: name.clone(), schema: "svg".into(), rows: 0 });
        }
    }
    let manifest = Manifest {
        tool: "estfuse",
        version: env!("CARGO_PKG_VERSION"),
        experiment: cfg.experiment.id(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        files: files.clone(),
    };
    write_atomic(&cfg.out, "manifest.json", &manifest.to_json())?;
    Ok(files)
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    let cfg_err = |e: std::io::Error| CliError::Config(format!("out: {} is not writable: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(cfg_err)?;
    let probe = dir.join(".estfuse-probe");
    fs::write(&probe, b"").map_err(cfg_err)?;
    fs::remove_file(&probe).map_err(cfg_err)
}

fn curve_tables(prefix: &str, scn: &GaussianScenario, rules: &[Rule], opts: &GaussianOptions) -> Result<(Table, Table, Figure), CliError> {
    let (points, summary) = simgauss::run_scenario(scn, rules, opts)?;
    let mut curve = Table::new(
        format!("{prefix}curve.csv"),
        "curve/1",
        &["mu", "rule", "mse", "relative_mse", "mc_se", "excluded"],
    );
    for p in &points {
        curve.push(vec![g(p.mu), p.rule.id().into(), g(p.mse), g(p.relative_mse), g(p.mc_se), p.excluded.to_string()]);
    }
    let mut sum = Table::new(
        format!("{prefix}summary.csv"),
        "curve-summary/1",
        &["rule", "bias_threshold", "bias_threshold_last", "worst_rel_mse", "best_rel_mse", "argmax_mu", "reps", "excluded_reps"],
    );
    for r in &summary.rules {
        sum.push(vec![
            r.rule.id().into(),
            g(r.bias_threshold),
            g(r.bias_threshold_last),
            g(r.worst_rel_mse),
            g(r.best_rel_mse),
            g(r.argmax_mu),
            summary.reps.to_string(),
            summary.excluded_reps.to_string(),
        ]);
    }
    let series = summary
        .rules
        .iter()
        .filter(|r| r.rule != Rule::Unbiased)
        .map(|r| Series {
            name: r.rule.id().into(),
            points: points.iter().filter(|p| p.rule == r.rule).map(|p| (p.mu, p.relative_mse)).collect(),
        })
        .collect();
    let fig = Figure {
        title: format!("Relative MSE, n={}, var=({}, {}), corr={}", scn.n, scn.var_psi_u, scn.var_psi_b, scn.corr),
        x_label: "bias mu".into(),
        y_label: "MSE / MSE(unbiased)".into(),
        series,
        reference: Some(1.0),
        y_cap: Some(2.0),
    };
    Ok((curve, sum, fig))
}

fn gaussian_curve(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let (curve, sum, fig) = curve_tables("", &cfg.gaussian_scenario(), &cfg.rules, &gaussian_options(cfg))?;
    Ok(Artifacts { tables: vec![curve, sum], figures: vec![("curve.svg".into(), fig)] })
}

const SCN_COLS: [&str; 4] = ["n", "var_psi_u", "var_psi_b", "corr"];

fn scn_cols(s: &GaussianScenario) -> Vec<String> {
    vec![s.n.to_string(), g(s.var_psi_u), g(s.var_psi_b), g(s.corr)]
}

fn with_scn(extra: &[&'static str]) -> Vec<&'static str> {
    SCN_COLS.iter().chain(extra).copied().collect()
}

fn gaussian_grid(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let (valid, skipped) = cfg.grid.scenarios(&cfg.mu_grid(), cfg.reps, cfg.seed);
    let scenarios = match cfg.grid_sample_per_n {
        Some(k) => simgauss::stratified_subsample(&valid, k),
        None => valid,
    };
    if scenarios.is_empty() {
        return Err(CliError::Config("grid: no valid scenarios".into()));
    }
    let outcomes = simgauss::run_grid(&scenarios, &cfg.rules, &gaussian_options(cfg));

    let mut errors = Table::new("errors.csv", "errors/1", &with_scn(&["stage", "message"]));
    for s in &skipped {
        errors.push([scn_cols(&s.scenario), vec!["skipped".into(), s.reason.clone()]].concat());
    }
    let mut summary = Table::new(
        "summary.csv",
        "grid-summary/1",
        &with_scn(&["rule", "bias_threshold", "bias_threshold_last", "worst_rel_mse", "best_rel_mse", "argmax_mu", "excluded_reps"]),
    );
    let mut thresholds = Table::new(
        "thresholds.csv",
        "thresholds/1",
        &with_scn(&["rule", "threshold", "core_threshold", "threshold_diff", "best_diff", "worst_diff"]),
    );
    let mut ok = 0;
    for o in &outcomes {
        let s = match &o.result {
            Ok(s) => s,
            Err(e) => {
                errors.push([scn_cols(&o.scenario), vec!["failed".into(), e.to_string()]].concat());
                continue;
            }
        };
        ok += 1;
        for r in &s.rules {
            summary.push(
                [
                    scn_cols(&o.scenario),
                    vec![
                        r.rule.id().into(),
                        g(r.bias_threshold),
                        g(r.bias_threshold_last),
                        g(r.worst_rel_mse),
                        g(r.best_rel_mse),
                        g(r.argmax_mu),
                        s.excluded_reps.to_string(),
                    ],
                ]
                .concat(),
            );
        }
        if let Some(core) = s.rule(Rule::Combined) {
            for r in s.rules.iter().filter(|r| !matches!(r.rule, Rule::Combined | Rule::Unbiased)) {
                thresholds.push(
                    [
                        scn_cols(&o.scenario),
                        vec![
                            r.rule.id().into(),
                            g(r.bias_threshold),
                            g(core.bias_threshold),
                            g(r.bias_threshold - core.bias_threshold),
                            g(r.best_rel_mse - core.best_rel_mse),
                            g(r.worst_rel_mse - core.worst_rel_mse),
                        ],
                    ]
                    .concat(),
                );
            }
        }
    }
    if ok == 0 {
        // Keep the error log for diagnosis before reporting total failure.
        write_atomic(&cfg.out, &errors.file, &errors.to_csv()?)?;
        return Err(CliError::Runtime("every grid scenario failed; see errors.csv".into()));
    }
    Ok(Artifacts { tables: vec![summary, thresholds, errors], figures: vec![] })
}

fn sprint(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let sweep_cfg = cfg.sweep_config();
    let res = simsprint::run_gamma_sweep(&cfg.sprint.model, &sweep_cfg)?;
    let mut sweep = Table::new(
        "sweep.csv",
        "sweep/1",
        &[
            "gamma",
            "big_gamma",
            "n_obs",
            "rmse_unbiased_x1000",
            "unbiased_ci_low_x1000",
            "unbiased_ci_high_x1000",
            "rmse_combined_x1000",
            "combined_ci_low_x1000",
            "combined_ci_high_x1000",
            "rmse_biased_x1000",
            "bias_biased_x1000",
            "bias_biased_se_x1000",
            "mean_lambda",
            "reps_used",
            "excluded",
        ],
    );
    for r in &res {
        sweep.push(vec![
            g(r.gamma),
            g(r.big_gamma),
            r.n_obs.to_string(),
            k1000(r.rmse_unbiased),
            k1000(r.unbiased_ci_low),
            k1000(r.unbiased_ci_high),
            k1000(r.rmse_combined),
            k1000(r.combined_ci_low),
            k1000(r.combined_ci_high),
            k1000(r.rmse_biased),
            k1000(r.bias_biased),
            k1000(r.bias_biased_se),
            g(r.mean_lambda),
            r.reps_used.to_string(),
            r.excluded.to_string(),
        ]);
    }
    let mut cross = Table::new("crossover.csv", "crossover/1", &["n_obs", "crossover_gamma"]);
    for &n in &cfg.sprint.n_obs {
        cross.push(vec![n.to_string(), simsprint::crossover_gamma(&res, n).map_or(String::new(), g)]);
    }
    let series = cfg
        .sprint
        .n_obs
        .iter()
        .map(|&n| Series {
            name: format!("combined n_obs={n}"),
            points: res.iter().filter(|r| r.n_obs == n).map(|r| (r.gamma, r.rmse_combined * 1000.0)).collect(),
        })
        .collect();
    let fig = Figure {
        title: "RMSE x 1000 against confounding strength".into(),
        x_label: "gamma".into(),
        y_label: "RMSE x 1000".into(),
        series,
        reference: res.first().map(|r| r.rmse_unbiased * 1000.0),
        y_cap: None,
    };
    Ok(Artifacts { tables: vec![sweep, cross], figures: vec![("sweep.svg".into(), fig)] })
}

fn bound_check(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let mu = cfg.mu_grid();
    let mut bounds = Table::new("bounds.csv", "bounds/1", &["rho", "c", "mu", "mse", "mc_se", "bound", "within"]);
    let mut summary = Table::new(
        "bounds_summary.csv",
        "bounds-summary/1",
        &["rho", "c", "var_u", "bound", "sup_mse", "sup_ratio", "all_within"],
    );
    let mut series = Vec::new();
    for case in &cfg.bound.cases {
        let scn = GaussianScenario {
            n: cfg.bound.n,
            var_psi_u: cfg.bound.var_psi_u,
            var_psi_b: case.c * case.c * cfg.bound.var_psi_u,
            corr: case.rho,
            theta_0: 1.0,
            mu_grid: mu.clone(),
            reps: cfg.reps,
            seed: cfg.seed,
        };
        let r = simgauss::check_bound(&scn, &mu)?;
        for p in &r.points {
            bounds.push(vec![g(case.rho), g(case.c), g(p.mu), g(p.mse), g(p.mc_se), g(r.bound), p.within.to_string()]);
        }
        summary.push(vec![
            g(case.rho),
            g(case.c),
            g(r.var_u),
            g(r.bound),
            g(r.sup_mse),
            g(r.sup_mse / r.bound),
            r.all_within.to_string(),
        ]);
        series.push(Series {
            name: format!("rho={} c={}", case.rho, case.c),
            points: r.points.iter().map(|p| (p.mu, p.mse / r.bound)).collect(),
        });
    }
    let fig = Figure {
        title: "Known-moment MSE relative to the worst-case bound".into(),
        x_label: "bias mu".into(),
        y_label: "MSE / bound".into(),
        series,
        reference: Some(1.0),
        y_cap: None,
    };
    Ok(Artifacts { tables: vec![bounds, summary], figures: vec![("bounds.svg".into(), fig)] })
}

fn consistency(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let scn = cfg.gaussian_scenario();
    let rep = simgauss::check_consistency(&scn, cfg.consistency.mu, &cfg.consistency.n_sequence)?;
    let mut t = Table::new(
        "consistency.csv",
        "consistency/1",
        &["mu", "n", "median_abs_lambda", "median_lambda", "bias", "bias_se", "excluded"],
    );
    for p in &rep.points {
        t.push(vec![
            g(rep.mu),
            p.n.to_string(),
            g(p.median_abs_lambda),
            g(p.median_lambda),
            g(p.bias),
            g(p.bias_se),
            p.excluded.to_string(),
        ]);
    }
    let tail = simgauss::check_unbounded_bias(&scn, &scn.mu_grid)?;
    let mut u = Table::new("unbounded.csv", "unbounded/1", &["mu", "rel_mse_combined", "rel_mse_biased"]);
    for &(m, c, b) in &tail.points {
        u.push(vec![g(m), g(c), g(b)]);
    }
    let mut s = Table::new(
        "consistency_summary.csv",
        "consistency-summary/1",
        &["lambda_decreasing", "bias_vanishing", "tail_relative_mse", "tail_within"],
    );
    s.push(vec![
        rep.lambda_decreasing.to_string(),
        rep.bias_vanishing.to_string(),
        g(tail.tail_relative_mse),
        tail.tail_within.to_string(),
    ]);
    Ok(Artifacts { tables: vec![t, u, s], figures: vec![] })
}

fn cutoff_table(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let scn = cfg.gaussian_scenario();
    let reps = cfg.cutoff_reps.unwrap_or(cfg.reps.max(1000));
    let table = baselines::build_cutoff_table(&scn, &cfg.baselines, reps, cfg.seed)?;
    let mut t = Table::new("cutoffs.csv", "cutoffs/1", &["mu", "gamma", "cutoff"]);
    for &(mu, gamma) in table.entries() {
        t.push(vec![g(mu), g(gamma), g(baselines::chi2_1_upper_quantile(gamma)?)]);
    }
    Ok(Artifacts { tables: vec![t], figures: vec![] })
}
