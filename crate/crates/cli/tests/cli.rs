//! Behavior of the `ksmfg` binary: exit codes, file outputs, determinism,
//! flag passthrough, and resume.

use std::path::Path;
use std::process::{Command, Output};

fn ksmfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksmfg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.cfg");
    let text = format!(
        "fine_nodes = 120\n\
         stretch = 6.0\n\
         baseline_transport_points = 5\n\
         clearing_tol = 0.02\n\
         vi_tol = 1e-7\n\
         stationary_tol = 1e-8\n\
         equal_mass_fine_cells = 600\n\
         k1 = 2\n\
         k2 = 2\n\
         d0 = 1\n\
         feature_embed_dim = 6\n\
         rate_embed_dim = 4\n\
         capital_embed_dim = 8\n\
         trunk_dims = 12,8\n\
         n_samples = 100\n\
         n_outer = 2\n\
         inner_steps = 30\n\
         batch_size = 32\n\
         pretrain_steps = 20\n\
         transport_points = 3\n\
         policy_tol = 0.0\n\
         seed = 5\n\
         {extra}"
    );
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn bad_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = ksmfg(&[
        "aiyagari",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn unknown_export_kind_exits_2() {
    let out = ksmfg(&["export", "--run", "/nonexistent", "--kind", "sparkline", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_run_dir_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ksmfg(&[
        "export",
        "--run",
        dir.path().join("nope").to_str().unwrap(),
        "--kind",
        "scatter",
        "--out",
        dir.path().join("x.csv").to_str().unwrap(),
    ]);
    // load_run reports a missing run.json as a run-directory error.
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn aiyagari_outputs_exist_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    for sub in ["a", "b"] {
        let out = ksmfg(&[
            "aiyagari",
            "--config",
            &cfg,
            "--out",
            dir.path().join(sub).to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.path().join(sub).join("aiyagari.json").exists());
        assert!(dir.path().join(sub).join("grid.json").exists());
    }
    for file in ["aiyagari.json", "grid.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} not byte-identical across reruns");
    }
}

#[test]
fn grid_cell_flags_pass_through() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out_dir = dir.path().join("g33");
    let out = ksmfg(&[
        "aiyagari",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--k1",
        "3",
        "--k2",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("grid.json")).unwrap()).unwrap();
    assert_eq!(grid["y1"].as_array().unwrap().len(), 4); // 3 cells
    assert_eq!(grid["y2"].as_array().unwrap().len(), 4);
}

#[test]
fn solve_export_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg1 = tiny_config(dir.path(), "");
    let run = dir.path().join("run");

    // First call: one outer iteration.
    let cfg_short = dir.path().join("short.cfg");
    let mut text = std::fs::read_to_string(&cfg1).unwrap();
    text = text.replace("n_outer = 2", "n_outer = 1");
    std::fs::write(&cfg_short, text).unwrap();
    let out = ksmfg(&[
        "solve",
        "--config",
        cfg_short.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("iter_0").join("net_1_1.ckpt").exists());
    assert!(run.join("config.snapshot").exists());
    assert!(!run.join("iter_1").exists());

    // Extending the same run continues from the checkpoint.
    let out = ksmfg(&[
        "solve",
        "--config",
        &cfg1,
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("iter_1").join("net_2_2.ckpt").exists());

    // A semantically different config is refused.
    let cfg_other = dir.path().join("other.cfg");
    let text = std::fs::read_to_string(&cfg1)
        .unwrap()
        .replace("seed = 5", "seed = 6");
    std::fs::write(&cfg_other, text).unwrap();
    let out = ksmfg(&[
        "solve",
        "--config",
        cfg_other.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    // Exports work on the finished run.
    for (kind, file) in [
        ("scatter", "scatter.csv"),
        ("policy-slice", "slice.csv"),
        ("contour", "contour.csv"),
        ("feature-surface", "surface.csv"),
    ] {
        let out_file = dir.path().join(file);
        let out = ksmfg(&[
            "export",
            "--run",
            run.to_str().unwrap(),
            "--kind",
            kind,
            "--out",
            out_file.to_str().unwrap(),
            "--resolution",
            "6",
        ]);
        assert!(
            out.status.success(),
            "{kind}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let text = std::fs::read_to_string(&out_file).unwrap();
        assert!(text.starts_with("# kind="), "{kind} metadata missing");
    }
    let scatter = std::fs::read_to_string(dir.path().join("scatter.csv")).unwrap();
    assert_eq!(scatter.matches("pearson_").count(), 4);
}

#[test]
fn sample_measures_writes_rates_and_measures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let base = dir.path().join("base");
    let out = ksmfg(&["aiyagari", "--config", &cfg, "--out", base.to_str().unwrap()]);
    assert!(out.status.success());
    let file = dir.path().join("measures.json");
    let out = ksmfg(&[
        "sample-measures",
        "--config",
        &cfg,
        "--baseline",
        base.to_str().unwrap(),
        "--out",
        file.to_str().unwrap(),
        "--count",
        "25",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(doc["measures"].as_array().unwrap().len(), 25);
    assert_eq!(doc["rates_slow"].as_array().unwrap().len(), 25);
    assert!(doc["rates_fast"][0].as_f64().unwrap().is_finite());
}
