//! Acceptance suite: one test per release criterion, each printing a
//! `criterion N: PASS` line with its measurements (visible with
//! `cargo test --test acceptance -- --nocapture`).

use std::path::{Path, PathBuf};
use std::time::Instant;
use superpol_cli as cli;
use superpol_core::bandit::{self, Backends, Conditioning};
use superpol_core::datamodel::{EstimatorConfig, PolicyClassKind, SequentialDataset};
use superpol_core::envs::{
    catt_catc, class_optimal, random_finite_pop, ConditioningSet, SequentialSpec,
};
use superpol_core::eval::{parse_csv, Metric};
use superpol_core::kernels::KernelSpec;
use superpol_core::moments::{fit_minimax, fit_projection, fit_tabular, ProjectionBackend};
use superpol_core::sequential::{estimate_value_seq, learn_seq};

fn out_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("superpol-acceptance-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Mean regret ordering super ≤ sz ≤ sonly in the confounded settings,
/// each inequality up to one pooled standard error of the difference.
fn assert_monotone_classes(report: &superpol_core::eval::ExperimentReport, settings: &[&str]) {
    let find = |setting: &str, kind: &str| {
        report
            .rows
            .iter()
            .find(|r| r.setting == setting && r.kind == kind)
            .unwrap_or_else(|| panic!("missing row ({setting}, {kind})"))
    };
    for setting in settings {
        for (lo, hi) in [("super", "sz"), ("sz", "sonly")] {
            let a = find(setting, lo);
            let b = find(setting, hi);
            let n = a.n_reps.min(b.n_reps) as f64;
            let pooled_se = ((a.sd * a.sd + b.sd * b.sd) / n).sqrt();
            assert!(
                a.mean <= b.mean + pooled_se,
                "{setting}: {lo} regret {:.3} above {hi} {:.3} beyond one pooled SE {:.3}",
                a.mean,
                b.mean,
                pooled_se
            );
        }
    }
}

fn row_mean(report: &superpol_core::eval::ExperimentReport, setting: &str, kind: &str) -> f64 {
    report
        .rows
        .iter()
        .find(|r| r.setting == setting && r.kind == kind)
        .unwrap_or_else(|| panic!("missing row ({setting}, {kind})"))
        .mean
}

#[test]
fn criterion_1_table1_exactness() {
    let start = Instant::now();
    let dir = out_dir("t1");
    let report = cli::repro("table1", None, None, None, &dir).unwrap();
    let expected = [
        ("eps=0.5", 0.0, 0.4, 0.4),
        ("eps=0", 0.6, 0.4, 1.0),
        ("eps=1", -0.6, 0.4, 1.0),
    ];
    for (setting, b, std, sup) in expected {
        assert!((row_mean(&report, setting, "v_behavior") - b).abs() <= 1e-12);
        assert!((row_mean(&report, setting, "v_standard") - std).abs() <= 1e-12);
        assert!((row_mean(&report, setting, "v_super") - sup).abs() <= 1e-12);
    }
    // The written CSV carries the same exact values.
    let text = std::fs::read_to_string(dir.join("table1.csv")).unwrap();
    let parsed = parse_csv(&text, Metric::Value).unwrap();
    assert_eq!(parsed.rows.len(), 9);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "table1 took {elapsed:.2} s");
    println!("criterion 1: PASS — analytic toy table exact to 1e-12 in {elapsed:.2} s");
}

#[test]
fn criterion_2_table2_reproduction() {
    let start = Instant::now();
    let dir = out_dir("t2");
    let report = cli::repro("table2", None, None, None, &dir).unwrap();
    let expected = [
        ("eps=0.5", [0.25, 0.21, 0.21]),
        ("eps=0.7", [0.25, 0.22, 0.18]),
        ("eps=0.9", [0.25, 0.24, 0.17]),
    ];
    for (setting, [sonly, sz, superp]) in expected {
        for (kind, target) in [("sonly", sonly), ("sz", sz), ("super", superp)] {
            let got = row_mean(&report, setting, kind);
            assert!(
                (got - target).abs() <= 0.05,
                "{setting}/{kind}: {got:.3} vs published {target}"
            );
        }
    }
    assert_monotone_classes(&report, &["eps=0.7", "eps=0.9"]);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "table2 took {elapsed:.0} s");
    println!(
        "criterion 2: PASS — 9 discrete-design mean regrets within ±0.05, class ordering \
         monotone, in {elapsed:.1} s"
    );
}

#[test]
fn criterion_3_table3_reproduction() {
    let start = Instant::now();
    let dir = out_dir("t3");
    let report = cli::repro("table3", None, None, None, &dir).unwrap();
    let expected = [
        ("eps=0.5", [0.40, 0.11, 0.11]),
        ("eps=0.7", [0.40, 0.12, 0.10]),
        ("eps=0.9", [0.40, 0.12, 0.06]),
    ];
    for (setting, [sonly, sz, superp]) in expected {
        for (kind, target) in [("sonly", sonly), ("sz", sz), ("super", superp)] {
            let got = row_mean(&report, setting, kind);
            assert!(
                (got - target).abs() <= 0.05,
                "{setting}/{kind}: {got:.3} vs published {target}"
            );
        }
    }
    assert_monotone_classes(&report, &["eps=0.7", "eps=0.9"]);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 7200.0, "table3 took {elapsed:.0} s");
    println!(
        "criterion 3: PASS — 9 continuous-design mean regrets within ±0.05, class ordering \
         monotone, in {elapsed:.0} s"
    );
}

#[test]
fn criterion_4_table4_directional() {
    let start = Instant::now();
    let dir = out_dir("t4");
    let cfg = cli::parse_table_config(cli::TABLE4_CFG).unwrap();
    assert_eq!(cfg.n, Some(2000));
    assert_eq!(cfg.replications, Some(50));
    let (report, notes) = cli::repro_table("table4", cli::TABLE4_CFG, None, None, &dir).unwrap();
    let common = row_mean(&report, "eps=0.1", "common");
    let superseq = row_mean(&report, "eps=0.1", "superseq");
    assert!(superseq < common, "superseq {superseq:.4} !< common {common:.4}");
    let p_note = notes
        .iter()
        .find(|n| n.contains("paired one-sided"))
        .expect("paired test note present");
    let p: f64 = p_note.split("p = ").nth(1).unwrap().trim().parse().unwrap();
    assert!(p < 0.01, "paired one-sided p = {p:.3e}");
    assert!(
        notes.iter().any(|n| n.contains("artifact-defined")),
        "missing artifact-defined banner"
    );
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "criterion 4: PASS — superseq {superseq:.4} < common {common:.4}, p = {p:.1e}, banner \
         present, {elapsed:.0} s"
    );
}

#[test]
fn criterion_5_minimax_tabular_oracle_equivalence() {
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand::SeedableRng;
    let start = Instant::now();
    // 20 random discrete datasets with informative proxies (well-conditioned
    // level matrices, so the exact solve is a meaningful oracle).
    let datasets: Vec<u64> = (0..20).collect();
    let worst: Vec<(f64, bool)> = {
        use rayon::prelude::*;
        datasets
            .par_iter()
            .map(|&ds| {
                // Proxy-match probabilities bounded away from coin flips so
                // every draw satisfies the completeness condition with a
                // well-conditioned level matrix; the sup-norm tolerance is
                // only meaningful when the exact solve is itself stable.
                let n = 2000usize;
                let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0xacce5 + ds);
                let p_w1 = 0.75 + 0.15 * rng.random::<f64>();
                let p_w0 = 0.10 + 0.15 * rng.random::<f64>();
                let p_z1 = 0.75 + 0.15 * rng.random::<f64>();
                let p_z0 = 0.10 + 0.15 * rng.random::<f64>();
                let mut q = DMatrix::zeros(n, 3);
                let mut g = DMatrix::zeros(n, 3);
                let mut r = DVector::zeros(n);
                for i in 0..n {
                    let s = f64::from(rng.random::<bool>());
                    let a = f64::from(rng.random::<bool>());
                    let u = f64::from(rng.random::<bool>());
                    let w = f64::from(rng.random::<f64>() < if u > 0.5 { p_w1 } else { p_w0 });
                    let z = f64::from(rng.random::<f64>() < if u > 0.5 { p_z1 } else { p_z0 });
                    q[(i, 0)] = w;
                    q[(i, 1)] = s;
                    q[(i, 2)] = a;
                    g[(i, 0)] = z;
                    g[(i, 1)] = s;
                    g[(i, 2)] = a;
                    r[i] = (u - 0.5) * (a - 0.5) + 0.4 * s + 0.2 * rng.random::<f64>();
                }
                let problem =
                    superpol_core::moments::MomentProblem::new(q, g, r, 1, 1).unwrap();
                let tabular = fit_tabular(&problem).unwrap();
                let t_vals = tabular.eval_rows(&problem.q_inputs).unwrap();
                let mut last_gap = f64::INFINITY;
                let mut monotone = true;
                for lm in [1e-2, 1e-4, 1e-6] {
                    let cfg = EstimatorConfig::default().with_lambda_mu(lm, n);
                    let bridge =
                        fit_minimax(&problem, &KernelSpec::Delta, &KernelSpec::Delta, &cfg)
                            .unwrap();
                    let gap = (bridge.eval_rows(&problem.q_inputs).unwrap() - &t_vals).amax();
                    monotone &= gap <= last_gap + 1e-9;
                    last_gap = gap;
                }
                (last_gap, monotone)
            })
            .collect()
    };
    let max_gap = worst.iter().map(|w| w.0).fold(0.0f64, f64::max);
    assert!(worst.iter().all(|w| w.1), "gap not monotone along the penalty sweep");
    assert!(max_gap <= 1e-3, "worst sup-norm gap {max_gap:.2e}");
    println!(
        "criterion 5: PASS — delta-kernel min-max matches the tabular solve on 20 datasets \
         (worst gap {max_gap:.2e}) in {:.0} s",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_6_superoptimality_suite() {
    use rand::SeedableRng;
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0x1e44a);
    for trial in 0..200 {
        let pop = random_finite_pop(&mut rng, 2 + (trial % 2));
        let (_, v_std) = class_optimal(&pop, ConditioningSet::S_ONLY);
        let (_, v_sup) = class_optimal(&pop, ConditioningSet::SUPER_NO_Z);
        assert!(
            v_sup >= v_std.max(pop.behavior_value()) - 1e-12,
            "trial {trial}: super-optimality violated"
        );
    }
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0x1e44b);
    let mut strict = 0usize;
    for trial in 0..200 {
        let pop = random_finite_pop(&mut rng, 2);
        let (_, v_std) = class_optimal(&pop, ConditioningSet::S_ONLY);
        let (_, v_sup) = class_optimal(&pop, ConditioningSet::SUPER_NO_Z);
        let v_beh = pop.behavior_value();
        let (_, cond) = catt_catc(&pop);
        let tol = 1e-12;
        assert_eq!(v_sup > v_std + tol, cond.over_standard, "trial {trial}: condition (i)");
        assert_eq!(v_sup > v_beh + tol, cond.over_behavior, "trial {trial}: condition (ii)");
        assert_eq!(
            v_sup > v_std.max(v_beh) + tol,
            cond.over_both,
            "trial {trial}: condition (iii)"
        );
        if cond.single_state_witness {
            assert!(v_sup > v_std.max(v_beh) + tol, "trial {trial}: witness not sufficient");
        }
        strict += usize::from(cond.over_both);
    }
    assert!(strict > 20 && strict < 200, "degenerate strictness mix: {strict}");
    println!(
        "criterion 6: PASS — super-optimality exact on 200 specs; strict-improvement conditions \
         classify 200 specs ({strict} strict) in {:.1} s",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_7_projection_correctness() {
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand::SeedableRng;
    let start = Instant::now();
    // Delta-kernel ridge equals the group-mean oracle.
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(71);
    let n = 240;
    let x = DMatrix::from_fn(n, 1, |_, _| f64::from(rng.random_range(0u8..4)));
    let y = DVector::from_fn(n, |i, _| x[(i, 0)] * 1.5 - 2.0 + rng.random::<f64>());
    let model = fit_projection(
        &x,
        &y,
        &ProjectionBackend::KernelRidge { spec: KernelSpec::Delta, ridge: 1e-10 },
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for level in 0..4 {
        let lv = level as f64;
        let idx: Vec<usize> = (0..n).filter(|&i| x[(i, 0)] == lv).collect();
        let mean: f64 = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        worst = worst.max((model.predict_row(&[lv]).unwrap() - mean).abs());
    }
    assert!(worst < 1e-6, "group-mean gap {worst:.2e}");
    // OLS exact on noiseless linear targets.
    let xl = DMatrix::from_fn(80, 3, |i, j| ((i * (j + 2)) % 17) as f64 * 0.3 - 1.0);
    let yl = DVector::from_fn(80, |i, _| {
        1.5 - 2.0 * xl[(i, 0)] + 0.7 * xl[(i, 1)] + 3.1 * xl[(i, 2)]
    });
    let ols = fit_projection(&xl, &yl, &ProjectionBackend::Linear).unwrap();
    let resid = (ols.predict_rows(&xl).unwrap() - yl).amax();
    assert!(resid <= 1e-10, "OLS residual {resid:.2e}");
    println!(
        "criterion 7: PASS — group-mean gap {worst:.1e}, OLS residual {resid:.1e} in {:.1} s",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_8_horizon_reduction_bit_identical() {
    let start = Instant::now();
    let seq_full = SequentialSpec::new(0.2).sample(700, 4242);
    let seq = SequentialDataset {
        o0: seq_full.o0.clone(),
        steps: vec![seq_full.steps[0].clone()],
        n_actions: 2,
        r_max: seq_full.r_max,
    };
    let cfg = EstimatorConfig { seed: 4242, ..Default::default() };
    {
        let backends = Backends::rkhs_linear();
        let seq_fit = learn_seq(&seq, PolicyClassKind::SuperSeq, &cfg, &backends).unwrap();
        let view = superpol_core::datamodel::BanditDataset {
            s: seq.steps[0].o.clone(),
            z: seq.o0.clone(),
            w: seq.steps[0].w.clone(),
            a: seq.steps[0].a.clone(),
            r: seq.steps[0].r.clone(),
            n_actions: 2,
        };
        let bandit_fit = bandit::learn_with_conditioning(
            &view,
            PolicyClassKind::Super,
            Conditioning { use_z: false, use_a: true },
            &cfg,
            &backends,
        )
        .unwrap();
        for i in 0..seq.n() {
            let obs = vec![vec![seq.steps[0].o[(i, 0)]]];
            let a_seq = seq_fit.policy.act_seq(1, &obs, &[], &[seq.steps[0].a[i]]).unwrap();
            let a_bandit =
                bandit_fit.policy.act(&[seq.steps[0].o[(i, 0)]], &[], seq.steps[0].a[i]).unwrap();
            assert_eq!(a_seq, a_bandit, "row {i} diverged");
        }
        let v_seq = estimate_value_seq(&seq_fit.policy, &seq_fit.stage1, &seq).unwrap();
        let v_bandit =
            bandit::estimate_value(&bandit_fit.policy, &bandit_fit.bridge, &view).unwrap();
        assert_eq!(v_seq.to_bits(), v_bandit.to_bits(), "values not bit-identical");
    }
    println!(
        "criterion 8: PASS — horizon-1 recursion bit-identical to the single-stage engine in \
         {:.1} s",
        start.elapsed().as_secs_f64()
    );
}

fn hash_dir_reports(dir: &Path, names: &[&str]) -> Vec<(String, u64)> {
    use std::hash::{Hash, Hasher};
    names
        .iter()
        .map(|n| {
            let bytes = std::fs::read(dir.join(n)).unwrap_or_else(|_| panic!("missing {n}"));
            let mut h = std::collections::hash_map::DefaultHasher::new();
            bytes.hash(&mut h);
            (n.to_string(), h.finish())
        })
        .collect()
}

#[test]
fn criterion_9_repro_determinism() {
    let start = Instant::now();
    // Every repro command, run twice with the same seed, must produce
    // byte-identical report files. Replication counts are reduced where the
    // table would otherwise dominate the suite's runtime; determinism is a
    // property of the pipeline, not of the count.
    let cases: [(&str, Option<usize>); 4] =
        [("table1", None), ("table2", Some(5)), ("table3", Some(2)), ("table4", Some(2))];
    for (table, reps) in cases {
        let files = [
            format!("{table}.md"),
            format!("{table}.csv"),
            "provenance.json".to_string(),
        ];
        let names: Vec<&str> = files.iter().map(|s| s.as_str()).collect();
        let dir_a = out_dir(&format!("det-{table}-a"));
        let dir_b = out_dir(&format!("det-{table}-b"));
        cli::repro(table, None, reps, None, &dir_a).unwrap();
        cli::repro(table, None, reps, None, &dir_b).unwrap();
        assert_eq!(
            hash_dir_reports(&dir_a, &names),
            hash_dir_reports(&dir_b, &names),
            "{table} reports differ between identical runs"
        );
    }
    println!(
        "criterion 9: PASS — all four repro commands byte-identical across reruns in {:.0} s",
        start.elapsed().as_secs_f64()
    );
}
