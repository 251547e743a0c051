//! Browser demo bindings: parameter-explorable views of the toy
//! environment's policy values, the strict-improvement diagnostics, and a
//! live run of the discrete-design experiment. All functions return JSON
//! strings; the page in `www/` renders them without any framework.

use serde::Serialize;
use superpol_core::datamodel::{EstimatorConfig, PolicyClassKind};
use superpol_core::envs::{catt_catc, toy_values, DiscreteBanditSpec, EnvSpec, ToySpec};
use superpol_core::eval::{run_replications, BackendChoice, ExperimentConfig, OracleMode};
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct ToyCurvePoint {
    eps: f64,
    v_behavior: f64,
    v_standard: f64,
    v_super: f64,
}

/// Exact policy values of the toy environment on an ε grid.
#[wasm_bindgen]
pub fn toy_curves(points: usize) -> String {
    let points = points.clamp(2, 1001);
    let rows: Vec<ToyCurvePoint> = (0..points)
        .map(|i| {
            let eps = i as f64 / (points - 1) as f64;
            let (v_behavior, v_standard, v_super) = toy_values(eps);
            ToyCurvePoint { eps, v_behavior, v_standard, v_super }
        })
        .collect();
    serde_json::to_string(&rows).expect("serializable curve")
}

#[derive(Serialize)]
struct DiagnosticsOut {
    eps: f64,
    v_behavior: f64,
    v_standard: f64,
    v_super: f64,
    rows: Vec<CattOut>,
    over_standard: bool,
    over_behavior: bool,
    over_both: bool,
}

#[derive(Serialize)]
struct CattOut {
    s: f64,
    catt: f64,
    catc: f64,
    propensity: f64,
}

/// Strict-improvement diagnostics of the toy environment at one ε.
#[wasm_bindgen]
pub fn toy_diagnostics(eps: f64) -> String {
    let eps = eps.clamp(0.0, 1.0);
    let (v_behavior, v_standard, v_super) = toy_values(eps);
    let pop = ToySpec::new(eps).population();
    let (rows, cond) = catt_catc(&pop);
    let out = DiagnosticsOut {
        eps,
        v_behavior,
        v_standard,
        v_super,
        rows: rows
            .iter()
            .map(|r| CattOut { s: r.s, catt: r.catt, catc: r.catc, propensity: r.propensity })
            .collect(),
        over_standard: cond.over_standard,
        over_behavior: cond.over_behavior,
        over_both: cond.over_both,
    };
    serde_json::to_string(&out).expect("serializable diagnostics")
}

#[derive(Serialize)]
struct ExperimentOut {
    eps: f64,
    n: usize,
    replications: usize,
    seed: u64,
    reference_value: f64,
    rows: Vec<ExperimentRowOut>,
}

#[derive(Serialize)]
struct ExperimentRowOut {
    kind: String,
    mean_regret: f64,
    sd: f64,
}

/// Run the discrete-design experiment in the browser: sample, learn the
/// three policy classes with the tabular backend, and report exact-oracle
/// regrets over the requested replications.
#[wasm_bindgen]
pub fn run_discrete_experiment(eps: f64, n: usize, replications: usize, seed: u64) -> String {
    let eps = eps.clamp(0.0, 1.0);
    let n = n.clamp(100, 50_000);
    let replications = replications.clamp(1, 200);
    let cfg = ExperimentConfig {
        spec: EnvSpec::Discrete(DiscreteBanditSpec::new(eps)),
        setting: format!("eps={eps}"),
        n,
        replications,
        seed_base: seed,
        kinds: vec![PolicyClassKind::SOnly, PolicyClassKind::SZ, PolicyClassKind::Super],
        estimator: EstimatorConfig::default(),
        backend: BackendChoice::Tabular,
        oracle: OracleMode::Exact,
    };
    match run_replications(&cfg) {
        Ok(outcome) => {
            let out = ExperimentOut {
                eps,
                n,
                replications,
                seed,
                reference_value: outcome.reference_value,
                rows: outcome
                    .report
                    .rows
                    .iter()
                    .map(|r| ExperimentRowOut {
                        kind: r.kind.clone(),
                        mean_regret: r.mean,
                        sd: r.sd,
                    })
                    .collect(),
            };
            serde_json::to_string(&out).expect("serializable experiment")
        }
        Err(e) => serde_json::to_string(&serde_json::json!({ "error": e.to_string() }))
            .expect("serializable error"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_json_parses_and_matches_closed_forms() {
        let text = toy_curves(11);
        let rows: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
        assert_eq!(rows.len(), 11);
        let mid = &rows[5];
        assert!((mid["eps"].as_f64().unwrap() - 0.5).abs() < 1e-12);
        assert!((mid["v_super"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn diagnostics_flags_strict_improvement_at_eps_zero() {
        let text = toy_diagnostics(0.0);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["over_standard"], true);
        assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn browser_experiment_runs_small() {
        let text = run_discrete_experiment(0.9, 1000, 3, 7);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!((v["reference_value"].as_f64().unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    }
}
