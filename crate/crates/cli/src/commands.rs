use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use quasigee_core::diagnostics::{eta_slope, hypothesis_check, regularity_constants, BallSampling, HypothesisOptions};
use quasigee_core::simulation::{quasi_score_identity_check, run_monte_carlo, McRun};
use quasigee_core::{fit_method, read_dataset_file, write_dataset, FitResult, Simulator};
use serde_json::{json, Value};

use crate::config::{self, CompareConfig, DiagnoseConfig, FitConfig, SimulateConfig};
use crate::output::{mat, opt, strings, vec, write_csv, write_json};
use crate::CliError;

fn out_dir(flag: Option<&Path>, configured: Option<&Path>, base: &Path) -> Result<PathBuf, CliError> {
    let dir = match (flag, configured) {
        (Some(f), _) => f.to_path_buf(),
        (None, Some(c)) => config::resolve(base, c),
        (None, None) => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn fit_json(fit: &FitResult) -> Value {
    let cov = fit.covariance.as_ref();
    let pairs = |ci: &Vec<(f64, f64)>| Value::from(ci.iter().map(|&(a, b)| vec![a, b]).collect::<Vec<_>>());
    json!({
        "method": fit.method,
        "beta": vec(&fit.beta),
        "beta_init": vec(&fit.beta_init),
        "converged": fit.converged,
        "iterations": fit.iterations,
        "g_norm": fit.g_norm,
        "g_norm_init": fit.g_norm_init,
        "fallbacks": fit.fallbacks,
        "ridge_events": fit.ridge_events,
        "starts_converged": fit.starts_converged,
        "se_model": cov.map(|c| vec(&c.se_model)),
        "se_sandwich": cov.map(|c| vec(&c.se_sandwich)),
        "ci_level": cov.map(|c| c.ci_level),
        "ci_model": cov.map(|c| pairs(&c.ci_model)),
        "ci_sandwich": cov.map(|c| pairs(&c.ci_sandwich)),
        "cov_model": cov.map(|c| mat(&c.cov_model)),
        "cov_sandwich": cov.map(|c| mat(&c.cov_sandwich)),
    })
}

pub fn fit(path: &Path, out_flag: Option<&Path>) -> Result<Value, CliError> {
    let loaded = config::load::<FitConfig>(path)?;
    let cfg = &loaded.config;
    let out = out_dir(out_flag, cfg.out.as_deref(), &loaded.base)?;
    let ds = read_dataset_file(&config::resolve(&loaded.base, &cfg.data)).map_err(CliError::Load)?;
    let fit = fit_method(&ds, cfg.link, &cfg.method, None, cfg.solver)?;

    let mut doc = fit_json(&fit);
    doc["command"] = json!("fit");
    doc["config_hash"] = json!(loaded.hash);
    doc["config"] = serde_json::to_value(cfg).expect("config serializes");
    doc["link"] = json!(cfg.link.name());
    doc["n"] = json!(ds.n());
    doc["m"] = json!(ds.m());
    doc["p"] = json!(ds.p());
    write_json(&out.join("fit.json"), &doc)?;
    let rows: Vec<Vec<String>> = fit
        .trace
        .iter()
        .map(|t| {
            vec![
                t.iteration.to_string(),
                t.g_norm.to_string(),
                t.step_norm.to_string(),
                t.halvings.to_string(),
                t.fallback.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("fit_trace.csv"),
        &strings(["iteration", "g_norm", "step_norm", "halvings", "fallback"]),
        &rows,
    )?;
    if !fit.converged {
        return Err(CliError::NotConverged(format!(
            "{} fit stopped after {} iterations with |g| = {:.3e}",
            fit.method, fit.iterations, fit.g_norm
        )));
    }
    Ok(json!({
        "command": "fit",
        "config_hash": loaded.hash,
        "out": out.display().to_string(),
        "converged": true,
        "beta": vec(&fit.beta),
    }))
}

fn doubling_grid(n: usize, p: usize) -> Vec<usize> {
    let floor = (4 * p).max(8);
    let mut grid = vec![n];
    let mut k = n / 2;
    while k >= floor {
        grid.push(k);
        k /= 2;
    }
    grid.reverse();
    grid
}

pub fn diagnose(path: &Path, out_flag: Option<&Path>) -> Result<Value, CliError> {
    let loaded = config::load::<DiagnoseConfig>(path)?;
    let cfg = &loaded.config;
    cfg.validate()?;
    let out = out_dir(out_flag, cfg.out.as_deref(), &loaded.base)?;
    let ds = read_dataset_file(&config::resolve(&loaded.base, &cfg.data)).map_err(CliError::Load)?;
    let center = match &cfg.center {
        Some(c) => DVector::from_vec(c.clone()),
        None => {
            let fit = fit_method(&ds, cfg.link, &cfg.method, None, cfg.solver)?;
            if !fit.converged {
                return Err(CliError::NotConverged(format!("{} fit for the ball center did not converge", fit.method)));
            }
            fit.beta
        }
    };
    let n_grid = cfg.n_grid.clone().unwrap_or_else(|| doubling_grid(ds.n(), ds.p()));
    let sampling = BallSampling { r: cfg.r, delta: cfg.delta, ball_samples: cfg.ball_samples, seed: cfg.seed };
    let hyp = hypothesis_check(
        &ds,
        &center,
        cfg.link,
        &n_grid,
        HypothesisOptions { delta: cfg.delta, c0: cfg.c0, param_bound: cfg.param_bound },
    )?;
    let r_grid = cfg.r_grid.clone().unwrap_or_else(|| vec![cfg.r / 4.0, cfg.r / 2.0, cfg.r]);
    let slope = eta_slope(&ds, &center, cfg.link, &r_grid, cfg.ball_samples, cfg.seed)?;

    let header = strings([
        "n",
        "lambda_min",
        "lambda_max",
        "ratio",
        "meets_c0",
        "rank_deficient",
        "covariate_lower_sum",
        "covariate_upper_sum",
        "lower_bound_lambda_min",
        "gamma",
        "a_n",
        "k2",
        "k3",
        "eta",
        "pi",
        "rho",
        "q",
        "delta_n",
        "tau_star",
        "c_star",
    ]);
    let mut rows = Vec::new();
    let mut constants = Vec::new();
    for row in &hyp.rows {
        let prefix = ds.prefix(row.n)?;
        let model = cfg.method.build_model(&prefix, cfg.link, None, cfg.solver)?;
        let rc = regularity_constants(&prefix, &center, cfg.link, &model, sampling, cfg.solver)?;
        rows.push(vec![
            row.n.to_string(),
            row.lambda_min.to_string(),
            row.lambda_max.to_string(),
            row.ratio.to_string(),
            row.meets_c0.to_string(),
            row.rank_deficient.to_string(),
            opt(row.covariate_lower_sum),
            opt(row.covariate_upper_sum),
            opt(row.lower_bound_lambda_min),
            rc.gamma.to_string(),
            rc.a_n.to_string(),
            rc.k2.to_string(),
            rc.k3.to_string(),
            rc.eta.to_string(),
            rc.pi.to_string(),
            rc.rho.to_string(),
            rc.q.to_string(),
            rc.delta_n.to_string(),
            rc.tau_star.to_string(),
            rc.c_star.to_string(),
        ]);
        constants.push(json!({
            "n": rc.n, "lambda_min_h_indep": rc.lambda_min_h_indep, "lambda_max_h_indep": rc.lambda_max_h_indep,
            "gamma": rc.gamma, "a_n": rc.a_n, "k2": rc.k2, "k3": rc.k3, "eta": rc.eta, "pi": rc.pi, "rho": rc.rho,
            "q": rc.q, "delta_n": rc.delta_n, "tau_star": rc.tau_star, "c_star": rc.c_star,
        }));
    }
    write_csv(&out.join("diagnostics_grid.csv"), &header, &rows)?;
    let doc = json!({
        "command": "diagnose",
        "config_hash": loaded.hash,
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "link": cfg.link.name(),
        "method": cfg.method.name(),
        "center": vec(&center),
        "r": cfg.r,
        "delta": cfg.delta,
        "sampling": {
            "ball_samples": cfg.ball_samples,
            "seed": cfg.seed,
            "points_per_evaluation": 1 + 2 * ds.p() + cfg.ball_samples,
            "note": "suprema are maxima over the sampled points and are lower bounds",
        },
        "n_grid": n_grid,
        "regularity": constants,
        "hypothesis": {
            "c0": hyp.c0,
            "lambda_min_monotone": hyp.lambda_min_monotone,
            "ratio_increasing": hyp.ratio_increasing,
        },
        "eta_slope": { "r_grid": slope.r_grid, "eta": slope.eta, "a_n": slope.a_n, "slope": slope.slope },
    });
    write_json(&out.join("diagnostics.json"), &doc)?;
    Ok(json!({
        "command": "diagnose",
        "config_hash": loaded.hash,
        "out": out.display().to_string(),
        "lambda_min_monotone": hyp.lambda_min_monotone,
    }))
}

pub fn simulate(path: &Path, out_flag: Option<&Path>) -> Result<Value, CliError> {
    let loaded = config::load::<SimulateConfig>(path)?;
    let cfg = &loaded.config;
    let out = out_dir(out_flag, cfg.out.as_deref(), &loaded.base)?;
    let sim = Simulator::new(cfg.generator.clone())?;
    let ds = sim.replicate(cfg.replication)?;
    write_dataset(&ds, BufWriter::new(File::create(out.join("data.csv"))?))?;
    let doc = json!({
        "command": "simulate",
        "config_hash": loaded.hash,
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "seed": cfg.generator.seed,
        "replication": cfg.replication,
        "rows": ds.n() * ds.m(),
        "correlation": serde_json::to_value(&cfg.generator.correlation).expect("spec serializes"),
        "true_correlation": mat(sim.true_correlation()),
    });
    write_json(&out.join("manifest.json"), &doc)?;
    Ok(
        json!({ "command": "simulate", "config_hash": loaded.hash, "out": out.display().to_string(), "rows": ds.n() * ds.m() }),
    )
}

/// Method labels, suffixed with their position when a name repeats.
fn labels(run: &McRun) -> Vec<String> {
    let names: Vec<&str> = run.methods.iter().map(|m| m.name()).collect();
    names
        .iter()
        .enumerate()
        .map(|(k, n)| if names.iter().filter(|x| *x == n).count() > 1 { format!("{n}_{k}") } else { n.to_string() })
        .collect()
}

pub fn compare(path: &Path, out_flag: Option<&Path>) -> Result<Value, CliError> {
    let loaded = config::load::<CompareConfig>(path)?;
    let cfg = &loaded.config;
    cfg.validate()?;
    let out = out_dir(out_flag, cfg.out.as_deref(), &loaded.base)?;
    let sim = Simulator::new(cfg.generator.clone())?;
    let n_grid = cfg.n_grid.clone().unwrap_or_else(|| vec![cfg.generator.n]);
    let run = run_monte_carlo(&sim, &cfg.methods, &n_grid, cfg.reps, cfg.solver, cfg.delta)?;
    run.check_failures()?;
    let labels = labels(&run);
    let p = cfg.generator.p;
    let k_methods = cfg.methods.len();

    let mut header =
        strings(["method", "n", "reps", "converged", "failures", "mean_error", "median_error", "p90_error"]);
    for stat in ["bias", "variance", "variance_se", "coverage_model", "coverage_sandwich"] {
        header.extend((1..=p).map(|c| format!("{stat}_{c}")));
    }
    let mut summary_rows = Vec::new();
    let mut results = Vec::new();
    let mut plot = Vec::new();
    let mut ordering = Vec::new();
    for g in 0..n_grid.len() {
        let sums: Vec<_> = (0..k_methods).map(|k| run.summary(g, k)).collect();
        for (k, s) in sums.iter().enumerate() {
            let failures = run.failures(g, k);
            let mut row = vec![
                labels[k].clone(),
                s.n.to_string(),
                s.reps.to_string(),
                s.converged.to_string(),
                failures.to_string(),
                s.mean_error.to_string(),
                s.median_error.to_string(),
                s.p90_error.to_string(),
            ];
            let stats = [
                ("bias", &s.bias),
                ("variance", &s.variance),
                ("variance_se", &s.variance_se),
                ("coverage_model", &s.coverage_model),
                ("coverage_sandwich", &s.coverage_sandwich),
            ];
            for (name, v) in stats {
                row.extend(v.iter().map(|x| x.to_string()));
                for (c, x) in v.iter().enumerate() {
                    results.push(vec![
                        labels[k].clone(),
                        s.n.to_string(),
                        name.to_string(),
                        (c + 1).to_string(),
                        x.to_string(),
                    ]);
                }
            }
            for (name, x) in
                [("mean_error", s.mean_error), ("median_error", s.median_error), ("p90_error", s.p90_error)]
            {
                results.push(vec![labels[k].clone(), s.n.to_string(), name.to_string(), String::new(), x.to_string()]);
                if name != "mean_error" {
                    plot.push(vec![name.to_string(), labels[k].clone(), s.n.to_string(), x.to_string()]);
                }
            }
            summary_rows.push(row);
        }
        let plug: Vec<f64> = run.slln.iter().map(|r| r[g].plug_in).collect();
        let exact: Vec<f64> = run.slln.iter().map(|r| r[g].exact).collect();
        for (name, xs) in [("slln_median", plug), ("slln_exact_median", exact)] {
            plot.push(vec![
                name.to_string(),
                "indep_score".into(),
                n_grid[g].to_string(),
                quasigee_core::simulation::quantile(&xs, 0.5).to_string(),
            ]);
        }
        for c in 0..p {
            let mut order: Vec<usize> = (0..k_methods).collect();
            order.sort_by(|&a, &b| sums[a].variance[c].total_cmp(&sums[b].variance[c]));
            ordering.push(json!({
                "n": n_grid[g],
                "coordinate": c + 1,
                "increasing_variance": order.iter().map(|&k| labels[k].clone()).collect::<Vec<_>>(),
            }));
        }
    }

    let qs_reps = cfg.quasi_score_reps.unwrap_or(cfg.reps);
    let mut quasi = Vec::new();
    for family in &cfg.quasi_score {
        let check = quasi_score_identity_check(&sim, family, qs_reps)?;
        results.push(vec![
            family.name().to_string(),
            cfg.generator.n.to_string(),
            "quasi_score_max_z".into(),
            String::new(),
            check.max_z.to_string(),
        ]);
        quasi.push(json!({
            "family": check.family,
            "reps": check.reps,
            "max_z": check.max_z,
            "se_defined": check.se_defined,
            "pass": check.pass,
            "lhs": mat(&check.lhs.mean),
            "rhs": mat(&check.rhs.mean),
            "m_bar": mat(&check.m_bar),
            "optimal": check.optimal.map(|o| json!({ "max_z_cov": o.max_z_cov, "max_z_jacobian": o.max_z_jacobian, "pass": o.pass })),
        }));
    }

    write_csv(&out.join("summary.csv"), &header, &summary_rows)?;
    write_csv(&out.join("results.csv"), &strings(["method", "n", "statistic", "coordinate", "value"]), &results)?;
    write_csv(&out.join("plot_data.csv"), &strings(["series", "method", "n", "value"]), &plot)?;
    let doc = json!({
        "command": "compare",
        "config_hash": loaded.hash,
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "seed": cfg.generator.seed,
        "methods": labels,
        "n_grid": n_grid,
        "true_correlation": mat(sim.true_correlation()),
        "variance_ordering": ordering,
        "quasi_score": quasi,
    });
    write_json(&out.join("manifest.json"), &doc)?;
    Ok(
        json!({ "command": "compare", "config_hash": loaded.hash, "out": out.display().to_string(), "rows": summary_rows.len() }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_grid_ends_at_n() {
        assert_eq!(doubling_grid(100, 2), vec![12, 25, 50, 100]);
        assert_eq!(doubling_grid(10, 2), vec![10]);
    }
}
