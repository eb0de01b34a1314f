use trans_gcr::io::{load_dataset_manifest, save_dataset};
use trans_gcr::sim::{
    build_truth, gen_domain, rate_check, run_detection_experiment, run_mse_experiment, GraphSpec, KappaChoice, LambdaRule,
    Method, RateConfig, ScenarioConfig, Sweep,
};

fn small_scenario() -> ScenarioConfig {
    ScenarioConfig {
        d: 12,
        s: 3,
        n0: 60,
        source_n: 80,
        num_sources: 3,
        num_transferable: 2,
        target_graph: GraphSpec::Er { p: 0.1 },
        source_graph: GraphSpec::Er { p: 0.1 },
        replicates: 3,
        seed: 9,
        ..Default::default()
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn experiment_tables_do_not_depend_on_thread_count() {
    let cfg = small_scenario();
    let run = || run_mse_experiment(&cfg, Sweep::H, &[0.5, 2.0], &Method::ALL).unwrap();
    let serial = in_pool(1, run);
    let parallel = in_pool(4, run);
    assert_eq!(serial, parallel);
    assert_eq!(serial.rows.len(), 2 * 3 * 3);

    let cv = ScenarioConfig {
        lambda: LambdaRule::Cv { kappas: vec![0.1, 0.3], folds: 3 },
        lambda_beta: LambdaRule::Cv { kappas: vec![0.1, 0.2], folds: 3 },
        ..cfg.clone()
    };
    let run = || run_mse_experiment(&cv, Sweep::SourceN, &[80.0], &Method::ALL).unwrap();
    assert_eq!(in_pool(1, run), in_pool(4, run));

    let run = || run_detection_experiment(&cfg, 3, &[3]).unwrap();
    assert_eq!(in_pool(1, run), in_pool(4, run));
}

#[test]
fn indistinguishable_sources_give_chance_auc() {
    let cfg = ScenarioConfig {
        h_far: 1.0,
        replicates: 12,
        ..small_scenario()
    };
    let table = run_detection_experiment(&cfg, 3, &[6]).unwrap();
    let aucs = table.values("6", "trans_gcr", "auc");
    assert!(aucs.len() + table.failures.len() == 12);
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((mean - 0.5).abs() < 0.2, "mean AUC {mean}");
}

#[test]
fn empty_support_is_recovered_exactly() {
    let cfg = RateConfig {
        d: 20,
        s: 0,
        n_grid: vec![300],
        replicates: 20,
        // max_j |Z_j^T (y - 1/2)| is about sqrt(2 n log 2d) / 2, so κ must
        // exceed sqrt(log 2d / (2 log d)) for the origin to satisfy KKT.
        kappa: KappaChoice::Fixed { kappa: 1.5 },
        ..Default::default()
    };
    let r = rate_check(&cfg).unwrap();
    let zeros = r.table.rows.iter().filter(|row| row.metric_value == 0.0).count();
    assert!(zeros * 100 >= 95 * r.table.rows.len(), "{zeros} exact zeros");
}

#[test]
fn error_shrinks_with_sample_size() {
    let cfg = RateConfig {
        d: 20,
        s: 3,
        n_grid: vec![500, 5000],
        replicates: 20,
        kappa: KappaChoice::Fixed { kappa: 0.3 },
        ..Default::default()
    };
    let r = rate_check(&cfg).unwrap();
    let small = r.table.values("500", "gcr_er_scaled", "sq_error");
    let large = r.table.values("5000", "gcr_er_scaled", "sq_error");
    let wins = small.iter().zip(&large).filter(|(a, b)| b < a).count();
    assert!(wins * 100 >= 95 * small.len(), "{wins} of {}", small.len());
}

#[test]
fn dataset_survives_a_file_round_trip() {
    let cfg = small_scenario();
    let truth = build_truth(&cfg).unwrap();
    let ds = gen_domain(&cfg.target_graph, &truth.target, 40, cfg.d, 1, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset_manifest(&manifest).unwrap();
    assert_eq!(back.graph.edges(), ds.graph.edges());
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.mask, ds.mask);
}
