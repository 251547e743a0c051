//! Frozen conclusions of the estimation-protocol pilots: cross-validation
//! selects interior penalties on the continuous design, and the identified
//! values rank the learned classes in the confounded discrete design.

use superpol_core::bandit::{
    estimate_value, fit_bridge_stage, learn_from_bridge, Backends, Conditioning,
};
use superpol_core::datamodel::{random_split, CvSpec, EstimatorConfig, PolicyClassKind};
use superpol_core::envs::{ContinuousBanditSpec, DiscreteBanditSpec};
use superpol_core::eval::{split_evaluate, BackendChoice, EvalKind};

/// The continuous-design penalty grid shipped with the benchmark config.
const LAMBDA_MU_GRID: [f64; 7] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[test]
fn cv_selects_interior_penalties_on_continuous_design() {
    let spec = ContinuousBanditSpec::new(0.9);
    let mut interior = 0usize;
    for rep in 0..50u64 {
        let d = spec.sample(1000, 20260811 + rep);
        let est = EstimatorConfig {
            cv: Some(CvSpec {
                folds: 5,
                lambda_mu_grid: LAMBDA_MU_GRID.to_vec(),
                mu_proj_grid: vec![],
            }),
            seed: 20260811 + rep,
            ..Default::default()
        };
        let stage = fit_bridge_stage(&d, &est, &Backends::rkhs_linear()).unwrap();
        let chosen = stage.diagnostics.lambda_mu;
        let lo = LAMBDA_MU_GRID[0];
        let hi = LAMBDA_MU_GRID[LAMBDA_MU_GRID.len() - 1];
        if chosen > lo * 1.0001 && chosen < hi * 0.9999 {
            interior += 1;
        }
    }
    // Pilot at this seed base observed 46/50 interior selections.
    assert!(interior >= 45, "interior selections {interior}/50");
}

#[test]
fn identified_values_rank_learned_classes() {
    // ε = 0.9, n = 5000, tabular backend: policies from the train split,
    // scoring bridge from the whole data, values on the held-out rows.
    // The pilot at this seed base observed 36/50 wins for the super class
    // (the per-replication noise of the near-singular discrete bridge
    // straddles the mean class gap, so per-replication dominance is
    // directional, not deterministic).
    let spec = DiscreteBanditSpec::new(0.9);
    let mut wins = 0usize;
    for rep in 0..50u64 {
        let d = spec.sample(5000, 1000 + rep);
        let (train, eval) = random_split(&d, 0.6, 1000 + rep).unwrap();
        let cfg = EstimatorConfig { seed: 1000 + rep, ..Default::default() };
        let backends = Backends::tabular();
        let train_stage = fit_bridge_stage(&train, &cfg, &backends).unwrap();
        let full_stage = fit_bridge_stage(&d, &cfg, &backends).unwrap();
        let sonly = learn_from_bridge(
            &train_stage,
            &train,
            PolicyClassKind::SOnly,
            Conditioning::for_kind(PolicyClassKind::SOnly).unwrap(),
            &backends,
        )
        .unwrap();
        let superp = learn_from_bridge(
            &train_stage,
            &train,
            PolicyClassKind::Super,
            Conditioning::for_kind(PolicyClassKind::Super).unwrap(),
            &backends,
        )
        .unwrap();
        let v_sonly = estimate_value(&sonly.policy, &full_stage.bridge, &eval).unwrap();
        let v_super = estimate_value(&superp.policy, &full_stage.bridge, &eval).unwrap();
        wins += usize::from(v_super >= v_sonly);
    }
    assert!(wins >= 31, "super ranked above sonly in only {wins}/50 replications");
}

#[test]
fn split_protocol_orders_class_means() {
    let data = DiscreteBanditSpec::new(0.9).sample(5000, 33);
    let report = split_evaluate(
        &data,
        0.6,
        &[
            EvalKind::Policy(PolicyClassKind::SOnly),
            EvalKind::Policy(PolicyClassKind::Super),
            EvalKind::BehaviorClone,
        ],
        20,
        33 ^ 0xabc,
        &EstimatorConfig::default(),
        BackendChoice::Tabular,
    )
    .unwrap();
    let mean_of = |kind: &str| {
        report.rows.iter().find(|r| r.kind == kind).map(|r| r.mean).expect("row present")
    };
    assert!(
        mean_of("super") >= mean_of("sonly"),
        "super {} < sonly {}",
        mean_of("super"),
        mean_of("sonly")
    );
}
