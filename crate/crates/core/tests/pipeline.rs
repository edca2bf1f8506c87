//! End-to-end behaviour across modules: generated trials survive a CSV round
//! trip, execution mode never changes a result, and studies are reproducible.

use hetscore::datagen::{generate_trial, GeneratedTrial, ScenarioConfig};
use hetscore::dataset::{load_dataset, Schema};
use hetscore::fitters::{fit_model, prognostic_adjustment, AdjustOptions, AdjustedDesign, Strategy};
use hetscore::hypothesis::{bootstrap_lrt, independence_test, mob_root_test, BootstrapOptions, MobOptions, NullDistribution, Statistic};
use hetscore::importance::{forest_importance, ForestOptions};
use hetscore::par::Execution;
use hetscore::scores::score_residuals;
use hetscore::study::{load_results, run_study, MethodSpec, StudyConfig};
use hetscore::{Family, Method, Parameterization, TreatmentExpectation};

fn trial(family: Family, n: usize, seed: u64) -> GeneratedTrial {
    let mut cfg = ScenarioConfig::new(1, family);
    cfg.n = n;
    cfg.s = 0.6;
    cfg.gamma0 = 0.3;
    cfg.gamma1_star = 0.5;
    cfg.gamma_mult = 2.0;
    cfg.lambda0 = 2e-4;
    cfg.seed = seed;
    generate_trial(&cfg).unwrap()
}

#[test]
fn saved_trials_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    for fam in Family::ALL {
        let t = trial(fam, 80, 3);
        let (csv, schema, truth) = (dir.path().join("d.csv"), dir.path().join("s.toml"), dir.path().join("t.json"));
        t.save(&csv, &schema, &truth).unwrap();
        let back = load_dataset(&csv, &Schema::from_path(&schema).unwrap())
            .unwrap()
            .center_treatment(TreatmentExpectation::Known(0.5))
            .unwrap();
        assert_eq!(back.fingerprint(), t.dataset.fingerprint(), "{fam}");
        let a = fit_model(&t.dataset, &AdjustedDesign::empty(80), Parameterization::Centered).unwrap();
        let b = fit_model(&back, &AdjustedDesign::empty(80), Parameterization::Centered).unwrap();
        assert_eq!(a.coef, b.coef);
    }
}

#[test]
fn execution_mode_does_not_change_results() {
    let t = trial(Family::Binomial, 200, 8);
    let d = &t.dataset;
    let adj = prognostic_adjustment(d, Strategy::Lasso, None, &AdjustOptions::default()).unwrap();
    let m = fit_model(d, &adj, Parameterization::Centered).unwrap();
    let s = score_residuals(&m, d).unwrap();
    let x = d.expand_covariates();

    let both = |exec| {
        let perm = independence_test(&s.s, &x.matrix, Statistic::Quad, NullDistribution::MonteCarlo { b: 499 }, 5, exec).unwrap();
        let mob = mob_root_test(&m, d, &MobOptions { b: 99, seed: 5, execution: exec, ..Default::default() }).unwrap();
        let boot = bootstrap_lrt(d, &adj, Parameterization::Centered, &x, &BootstrapOptions { b: 99, seed: 5, execution: exec, ..Default::default() })
            .unwrap();
        let forest = forest_importance(&s, d, &ForestOptions { n_trees: 20, seed: 5, execution: exec, ..Default::default() }).unwrap();
        (perm.p_value, mob.p_value, boot.p_value, forest.per_variable)
    };
    assert_eq!(both(Execution::Parallel), both(Execution::Sequential));
}

#[test]
fn studies_are_reproducible_and_share_data_across_methods() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = ScenarioConfig::new(1, Family::Normal);
    sc.n = 120;
    sc.s = 0.6;
    sc.gamma0 = 0.3;
    sc.gamma1_star = 0.5;
    sc.gamma_mult = 1.0;
    let methods = vec![
        MethodSpec::new(Method::ResidualPermMax, Strategy::Risk).with_b(99),
        MethodSpec::new(Method::LrtAsymptotic, Strategy::Risk),
        MethodSpec::new(Method::Oracle, Strategy::Lasso),
    ];
    let cfg = StudyConfig {
        scenarios: vec![sc],
        methods,
        replicates: 4,
        master_seed: 17,
        workers: 2,
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    run_study(&cfg, &a).unwrap();
    run_study(&StudyConfig { workers: 1, ..cfg.clone() }, &b).unwrap();
    let strip = |p: &std::path::Path| {
        let mut rows = load_results(p).unwrap();
        rows.iter_mut().for_each(|r| r.seconds = 0.0);
        rows
    };
    let (ra, rb) = (strip(&a), strip(&b));
    assert_eq!(ra.len(), 12);
    assert_eq!(ra, rb);
    for rep in ra.chunks(3) {
        assert!(rep.iter().all(|r| r.dataset_hash == rep[0].dataset_hash && r.replicate == rep[0].replicate));
        assert!(rep.iter().all(|r| r.error.is_none()), "{rep:?}");
    }
    // replicates differ from each other
    assert_ne!(ra[0].dataset_hash, ra[3].dataset_hash);
}
