use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn foliage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foliage")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = foliage(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small caricature dataset and a quick foliation fit in `dir`.
fn fitted(dir: &Path, seed: &str) -> (PathBuf, PathBuf) {
    let data = dir.join("data.csv");
    let model = dir.join("model.json");
    ok(&["generate", "caricature", "--trajectories", "60", "--length", "8", "--seed", "3", "--output", p(&data)]);
    ok(&[
        "--threads", "1", "fit", "foliation", "--input", p(&data), "--output", p(&model), "--order-encoder", "3",
        "--order-map", "3", "--ht-rank", "2", "--sweeps", "5", "--seed", seed,
    ]);
    (data, model)
}

#[test]
fn fit_is_bit_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    fitted(a.path(), "7");
    fitted(b.path(), "7");
    for name in ["data.csv", "model.json", "model.trace.csv", "model.erel.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn outputs_carry_the_config_hash() {
    let d = tempfile::tempdir().unwrap();
    let (_, model) = fitted(d.path(), "1");
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let hash = doc["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for name in ["model.trace.csv", "model.erel.csv"] {
        let text = std::fs::read_to_string(d.path().join(name)).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_hash={hash}"));
    }
    assert_eq!(doc["config"]["settings"]["order_encoder"], 3);
}

#[test]
fn check_names_broken_orthogonality() {
    let d = tempfile::tempdir().unwrap();
    let (data, model) = fitted(d.path(), "1");
    ok(&["check", "--model", p(&model), "--input", p(&data)]);
    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let v = doc["foliation"]["u1"]["data"][0][0].as_f64().unwrap();
    doc["foliation"]["u1"]["data"][0][0] = serde_json::json!(v + 0.25);
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = foliage(&["check", "--model", p(&bad)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("invariant violated") && err.contains("U1 orthonormal rows"), "{err}");
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "[generate]\ntrajectories = 12\nlength = 5\nseed = 9\n").unwrap();
    let a = d.path().join("a.csv");
    ok(&["--config", p(&cfg), "generate", "caricature", "--output", p(&a)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.split("\n\n").count(), 12);
    let b = d.path().join("b.csv");
    ok(&["--config", p(&cfg), "generate", "caricature", "--trajectories", "4", "--output", p(&b)]);
    assert_eq!(std::fs::read_to_string(&b).unwrap().split("\n\n").count(), 4);

    std::fs::write(&cfg, "[generate]\nbogus = 1\n").unwrap();
    assert!(!foliage(&["--config", p(&cfg), "generate", "caricature", "--output", p(&a)]).status.success());
    std::fs::write(&cfg, "[nonsense]\n").unwrap();
    assert!(!foliage(&["--config", p(&cfg), "generate", "caricature", "--output", p(&a)]).status.success());
}

#[test]
fn errors_exit_nonzero_with_a_cause() {
    let d = tempfile::tempdir().unwrap();
    let out = foliage(&["fit", "foliation", "--input", p(&d.path().join("missing.csv")), "--output", p(&d.path().join("m.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn caricature_pipeline_runs_through_manifold_and_check() {
    let d = tempfile::tempdir().unwrap();
    let (data, model) = fitted(d.path(), "1");
    let full = d.path().join("full.json");
    ok(&[
        "manifold", "--input", p(&data), "--model", p(&model), "--output", p(&full), "--kappa", "0.13", "--order", "3",
        "--rounds", "1", "--sweeps", "5",
    ]);
    let out = ok(&["check", "--model", p(&full), "--input", p(&data)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("decoder consistent with encoder"));
}

#[test]
fn tendim_pipeline_writes_finite_curves_and_plot_script() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data.csv");
    let model = d.path().join("m.json");
    let full = d.path().join("full.json");
    let curve = d.path().join("curve.csv");
    let plot = d.path().join("curve.gp");
    ok(&["generate", "tendim", "--trajectories", "60", "--length", "8", "--radius", "0.5", "--output", p(&data)]);
    ok(&[
        "fit", "foliation", "--input", p(&data), "--output", p(&model), "--order-encoder", "3", "--order-map", "3",
        "--ht-rank", "2", "--sweeps", "5",
    ]);
    ok(&[
        "manifold", "--input", p(&data), "--model", p(&model), "--output", p(&full), "--kappa", "0.3", "--order", "3",
        "--rounds", "1", "--sweeps", "5",
    ]);
    ok(&["freqdamp", "--input", p(&data), "--model", p(&full), "--output", p(&curve), "--dt", "0.1", "--plot", p(&plot)]);
    let text = std::fs::read_to_string(&curve).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert!(rows.len() > 10);
    assert!(rows.iter().flatten().all(|v: &f64| v.is_finite()));
    // ω near the linear frequency 1 rad/s at small amplitude.
    assert!((rows[0][2] - 1.0).abs() < 0.05, "{:?}", rows[0]);
    assert!(std::fs::read_to_string(&plot).unwrap().contains("plot '"));
}
