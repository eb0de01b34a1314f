use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use trans_gcr::graph::{gen_er, normalize_adjacency, propagate};
use trans_gcr::io::{load_coefficients, save_coefficients, save_dataset};
use trans_gcr::sim::{build_truth, gen_domain, GraphSpec, ScenarioConfig};
use trans_gcr::{CoefficientMatrix, Dataset, Labels};

const BIN: &str = env!("CARGO_BIN_EXE_trans-gcr");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn report_value(path: &Path, key: &str) -> String {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} missing from {}", path.display()))
}

/// Saves a synthetic three-class domain and returns its manifest path.
fn domain(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let cfg = ScenarioConfig {
        d: 8,
        s: 3,
        num_sources: 1,
        num_transferable: 1,
        ..Default::default()
    };
    let truth = build_truth(&cfg).unwrap();
    let ds = gen_domain(&GraphSpec::Er { p: 0.1 }, &truth.target, n, cfg.d, 1, seed).unwrap();
    save_dataset(&ds, &dir.join(name)).unwrap()
}

#[test]
fn huge_penalty_gives_the_null_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = domain(dir.path(), "t", 50, 1);
    let out = dir.path().join("out");
    ok(&["fit", "--dataset", p(&data), "--lambda", "1e9", "--out", p(&out)]);
    let report = out.join("fit_report.txt");
    assert_eq!(report_value(&report, "sparsity"), "0");
    let objective: f64 = report_value(&report, "objective").parse().unwrap();
    let oracle = 50.0 * 3.0 * std::f64::consts::LN_2;
    assert!((objective - oracle).abs() < 1e-9 * oracle, "{objective} vs {oracle}");
    let b = load_coefficients(&out.join("coefficients.csv")).unwrap();
    assert_eq!(b.nnz(), 0);
}

#[test]
fn fit_is_deterministic_and_single_cell_cv_matches_fixed_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let data = domain(dir.path(), "t", 80, 2);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["fit", "--dataset", p(&data), "--lambda", "2.5", "--out", p(&a)]);
    ok(&["fit", "--dataset", p(&data), "--lambda", "2.5", "--out", p(&b)]);
    ok(&["fit", "--dataset", p(&data), "--cv-lambdas", "2.5", "--folds", "4", "--out", p(&c)]);
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "coefficients.csv"), read(&b, "coefficients.csv"));
    assert_eq!(read(&a, "fit_report.txt"), read(&b, "fit_report.txt"));
    assert_eq!(read(&a, "coefficients.csv"), read(&c, "coefficients.csv"));
}

#[test]
fn transfer_files_satisfy_the_sum_identity() {
    let dir = tempfile::tempdir().unwrap();
    let t = domain(dir.path(), "t", 60, 3);
    let s1 = domain(dir.path(), "s1", 90, 4);
    let s2 = domain(dir.path(), "s2", 90, 5);
    let out = dir.path().join("out");
    let sources = format!("{},{}", p(&s1), p(&s2));
    ok(&[
        "transfer", "--target", p(&t), "--sources", &sources, "--lambda-beta", "3", "--lambda-delta", "2", "--out",
        p(&out),
    ]);
    let bs = load_coefficients(&out.join("beta_source.csv")).unwrap();
    let delta = load_coefficients(&out.join("delta.csv")).unwrap();
    let bt = load_coefficients(&out.join("beta_target.csv")).unwrap();
    assert_eq!(bs.add(&delta).unwrap(), bt);
}

#[test]
fn target_only_pool_matches_a_plain_fit() {
    let dir = tempfile::tempdir().unwrap();
    let t = domain(dir.path(), "t", 70, 6);
    let (fit_out, tr_out) = (dir.path().join("fit"), dir.path().join("tr"));
    ok(&["fit", "--dataset", p(&t), "--lambda", "1.5", "--out", p(&fit_out)]);
    ok(&[
        "transfer", "--target", p(&t), "--include-target", "--lambda-beta", "1.5", "--lambda-delta", "1e9", "--out",
        p(&tr_out),
    ]);
    let fitted = load_coefficients(&fit_out.join("coefficients.csv")).unwrap();
    let source = load_coefficients(&tr_out.join("beta_source.csv")).unwrap();
    let diff = (fitted.values() - source.values()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-6, "max difference {diff}");
    let delta = fs::read_to_string(tr_out.join("delta.csv")).unwrap();
    assert_eq!(delta.lines().count(), 2, "{delta}");
}

#[test]
fn duplicate_sources_score_identically() {
    let dir = tempfile::tempdir().unwrap();
    let t = domain(dir.path(), "t", 60, 7);
    let s = domain(dir.path(), "s", 80, 8);
    let out = dir.path().join("out");
    let sources = format!("{},{}", p(&s), p(&s));
    ok(&[
        "detect", "--target", p(&t), "--sources", &sources, "--select", "2", "--lambda-beta", "2", "--lambda-delta",
        "2", "--out", p(&out),
    ]);
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    let vals: Vec<&str> = scores.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(vals.len(), 2);
    assert_eq!(vals[0], vals[1]);
    let selected = fs::read_to_string(out.join("selected.txt")).unwrap();
    let mut sel: Vec<usize> = selected.lines().map(|l| l.parse().unwrap()).collect();
    sel.sort_unstable();
    assert_eq!(sel, vec![0, 1]);
}

/// Dataset whose labels are the model's own argmax predictions.
fn separable(dir: &Path) -> (PathBuf, PathBuf) {
    let n = 60;
    let g = gen_er(n, 0.1, 11).unwrap();
    let x = trans_gcr::sim::gaussian_features(n, 4, 12);
    let z = propagate(&normalize_adjacency(&g), x.view(), 1).unwrap();
    let beta = CoefficientMatrix::new(Array2::from_shape_fn((4, 2), |(j, c)| [[3.0, -1.0], [0.0, 2.0], [-2.0, 0.5], [1.0, 1.0]][j][c]), 3).unwrap();
    let labels = trans_gcr::gcr::predict(z.values().view(), &beta).unwrap();
    let ds = Dataset::fully_visible(g, x, labels).unwrap();
    let manifest = save_dataset(&ds, &dir.join("sep")).unwrap();
    let coef = dir.join("beta.csv");
    save_coefficients(&beta, &coef).unwrap();
    (manifest, coef)
}

fn metrics(out: &Path) -> Vec<String> {
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("test_nodes,micro_f1,macro_f1,nl"));
    lines.next().unwrap().split(',').map(str::to_string).collect()
}

#[test]
fn evaluate_scores_perfect_and_null_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let (data, coef) = separable(dir.path());
    let out = dir.path().join("perfect");
    ok(&["evaluate", "--dataset", p(&data), "--coefficients", p(&coef), "--train-rate", "0.5", "--out", p(&out)]);
    let m = metrics(&out);
    assert_eq!(m[0], "30");
    assert_eq!(m[1].parse::<f64>().unwrap(), 1.0);
    assert_eq!(m[2].parse::<f64>().unwrap(), 1.0);

    let zero = dir.path().join("zero.csv");
    save_coefficients(&CoefficientMatrix::zeros(4, 3), &zero).unwrap();
    let nodes = dir.path().join("nodes.txt");
    let test: Vec<usize> = (0..60).step_by(3).collect();
    fs::write(&nodes, test.iter().map(|i| format!("{i}\n")).collect::<String>()).unwrap();
    let out = dir.path().join("null");
    ok(&["evaluate", "--dataset", p(&data), "--coefficients", p(&zero), "--test-nodes", p(&nodes), "--out", p(&out)]);
    let labels: Labels = trans_gcr::io::load_dataset_manifest(&data).unwrap().labels;
    // Equal probabilities predict the first class everywhere.
    let hits = test.iter().filter(|&&i| labels.get(i) == 0).count();
    let m = metrics(&out);
    assert_eq!(m[0], test.len().to_string());
    assert!((m[1].parse::<f64>().unwrap() - hits as f64 / test.len() as f64).abs() < 1e-12);
    let nl: f64 = m[3].parse().unwrap();
    let per_node = 3f64.ln() + 2.0 * 1.5f64.ln();
    assert!((nl - test.len() as f64 * per_node).abs() < 1e-9);
}

#[test]
fn evaluate_split_follows_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = domain(dir.path(), "t", 60, 13);
    let coef = dir.path().join("fit");
    ok(&["fit", "--dataset", p(&data), "--lambda", "1", "--out", p(&coef)]);
    let coef = coef.join("coefficients.csv");
    let go = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "evaluate", "--dataset", p(&data), "--coefficients", p(&coef), "--train-rate", "0.7", "--seed", seed, "--out",
            p(&out),
        ]);
        fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(go("5", "a"), go("5", "b"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = domain(dir.path(), "t", 50, 14);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "out = \"from-file\"\n\n[fit]\ndataset = \"t/bundle.toml\"\nlambda = 1e9\n").unwrap();
    ok(&["fit", "--config", p(&cfg)]);
    assert_eq!(report_value(&dir.path().join("from-file/fit_report.txt"), "sparsity"), "0");

    let out = dir.path().join("flag");
    ok(&["fit", "--config", p(&cfg), "--lambda", "0.5", "--out", p(&out)]);
    assert_ne!(report_value(&out.join("fit_report.txt"), "sparsity"), "0");
    assert!(data.exists());
}

#[test]
fn exit_codes_separate_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = domain(dir.path(), "t", 40, 15);

    let out = dir.path().join("missing-lambda");
    let r = run(&["fit", "--dataset", p(&data), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    let out = dir.path().join("negative");
    let r = run(&["fit", "--dataset", p(&data), "--lambda", "-1", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[fit]\nlamda = 1\n").unwrap();
    let r = run(&["fit", "--config", p(&cfg), "--dataset", p(&data), "--lambda", "1"]);
    assert_eq!(r.status.code(), Some(2));

    let out = dir.path().join("no-data");
    let r = run(&["fit", "--dataset", p(&dir.path().join("nope.toml")), "--lambda", "1", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());

    fs::write(dir.path().join("t/labels.csv"), "node,class\n0,9\n").unwrap();
    let r = run(&["fit", "--dataset", p(&data), "--lambda", "1", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());

    let r = run(&["detect", "--target", p(&data), "--sources", p(&data), "--select", "2", "--lambda-beta", "1", "--lambda-delta", "1"]);
    assert_eq!(r.status.code(), Some(2));
}
