//! End-to-end pipeline at miniature scale: baseline equilibrium, equal-mass
//! grid, fixed-point solve with a run directory, resume-from-checkpoint
//! equivalence, and the CSV exports.

use std::path::Path;
use std::sync::Arc;

use ksmfg::aiyagari::{equilibrium, AiyagariOptions};
use ksmfg::economy::{AggState, EconomyParams, ProdLevel};
use ksmfg::export;
use ksmfg::measures::equal_mass_grid;
use ksmfg::neuralnet::NetSpec;
use ksmfg::optim::AdamParams;
use ksmfg::samples::SamplerConfig;
use ksmfg::solver::{self, FixedPointConfig, SolveInputs};

fn micro_net_spec(d: usize) -> NetSpec {
    NetSpec {
        measure_dim: d,
        n_features: 1,
        feature_embed_dim: 6,
        rate_embed_dim: 4,
        capital_embed_dim: 8,
        trunk_dims: vec![12, 8],
    }
}

struct Pipeline {
    params: EconomyParams,
    eq: ksmfg::aiyagari::AiyagariEquilibrium,
    grid: Arc<ksmfg::measures::Grid>,
    base: ksmfg::measures::DiscreteMeasure,
}

fn pipeline() -> &'static Pipeline {
    use std::sync::OnceLock;
    static PIPE: OnceLock<Pipeline> = OnceLock::new();
    PIPE.get_or_init(|| {
        let params = EconomyParams::default();
        let eq = equilibrium(
            &params,
            &AiyagariOptions {
                fine_nodes: 150,
                stretch: 6.0,
                transport_points: 5,
                clearing_tol: 5e-3,
                vi_tol: 1e-7,
                stationary_tol: 1e-8,
                ..AiyagariOptions::default()
            },
        )
        .unwrap();
        let fine = eq.measure.resample_uniform(800).unwrap();
        let grid = Arc::new(equal_mass_grid(&fine, 2, 2).unwrap());
        let base = eq.measure.project_onto(&grid).unwrap();
        Pipeline {
            params,
            eq,
            grid,
            base,
        }
    })
}

fn micro_inputs(pipe: &Pipeline) -> SolveInputs<'_> {
    SolveInputs {
        params: &pipe.params,
        grid: pipe.grid.clone(),
        base_measure: pipe.base.clone(),
        baseline: &pipe.eq.solution,
        net_spec: micro_net_spec(pipe.grid.coeff_len()),
        sampler: SamplerConfig {
            n_samples: 120,
            ..SamplerConfig::default()
        },
        fixed_point: FixedPointConfig {
            n_outer: 2,
            inner_steps: 40,
            batch_size: 32,
            adam: AdamParams::default(),
            transport_points: 3,
            pretrain_steps: 30,
            policy_tol: 0.0, // never stop early in this test
            master_seed: 424_242,
            ..FixedPointConfig::default()
        },
    }
}

fn write_run_side_files(pipe: &Pipeline, dir: &Path) {
    pipe.grid.write_json_file(&dir.join("grid.json")).unwrap();
    pipe.eq.write_json_file(&dir.join("aiyagari.json")).unwrap();
}

fn read_ckpt_bytes(dir: &Path, iteration: usize) -> Vec<Vec<u8>> {
    let iter = solver::iter_dir(dir, iteration);
    let mut out = Vec::new();
    for i in AggState::ALL {
        for j in ProdLevel::ALL {
            out.push(std::fs::read(solver::net_ckpt_path(&iter, i, j)).unwrap());
        }
    }
    out
}

#[test]
fn solve_persists_layout_and_reports() {
    let pipe = pipeline();
    let dir = tempfile::tempdir().unwrap();
    write_run_side_files(pipe, dir.path());
    let inputs = micro_inputs(pipe);
    let (_, reports) = solver::solve(&inputs, Some(dir.path()), 0xabcd).unwrap();
    assert_eq!(reports.len(), 2);
    for n in 0..2 {
        let it = solver::iter_dir(dir.path(), n);
        assert!(it.join("report.json").exists());
        for i in AggState::ALL {
            for j in ProdLevel::ALL {
                assert!(solver::net_ckpt_path(&it, i, j).exists());
            }
        }
    }
    assert!(dir.path().join("samples.json").exists());
    assert!(dir.path().join("run.json").exists());
    // Reports parse back and carry finite numbers.
    let text = std::fs::read_to_string(solver::iter_dir(dir.path(), 1).join("report.json")).unwrap();
    let report: solver::StepReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.iteration, 1);
    for i in 0..2 {
        for j in 0..2 {
            assert!(report.train_msr[i][j].is_finite());
            assert!(report.holdout_msr[i][j].is_finite());
        }
    }
    assert!(report.policy_change_sup.is_finite());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let pipe = pipeline();
    // Run A: both iterations in one call.
    let dir_a = tempfile::tempdir().unwrap();
    write_run_side_files(pipe, dir_a.path());
    let inputs = micro_inputs(pipe);
    solver::solve(&inputs, Some(dir_a.path()), 0x11).unwrap();

    // Run B: first iteration, then resume for the second.
    let dir_b = tempfile::tempdir().unwrap();
    write_run_side_files(pipe, dir_b.path());
    let mut first = micro_inputs(pipe);
    first.fixed_point.n_outer = 1;
    solver::solve(&first, Some(dir_b.path()), 0x11).unwrap();
    let iter0_before = read_ckpt_bytes(dir_b.path(), 0);
    let resumed = micro_inputs(pipe);
    solver::solve(&resumed, Some(dir_b.path()), 0x11).unwrap();

    // Earlier checkpoints untouched by the resume, later ones identical to
    // the uninterrupted run.
    assert_eq!(iter0_before, read_ckpt_bytes(dir_b.path(), 0));
    assert_eq!(
        read_ckpt_bytes(dir_a.path(), 0),
        read_ckpt_bytes(dir_b.path(), 0)
    );
    assert_eq!(
        read_ckpt_bytes(dir_a.path(), 1),
        read_ckpt_bytes(dir_b.path(), 1)
    );
}

#[test]
fn identical_seeds_give_identical_runs() {
    let pipe = pipeline();
    let dirs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            write_run_side_files(pipe, dir.path());
            let inputs = micro_inputs(pipe);
            solver::solve(&inputs, Some(dir.path()), 0x77).unwrap();
            dir
        })
        .collect();
    for n in 0..2 {
        assert_eq!(
            read_ckpt_bytes(dirs[0].path(), n),
            read_ckpt_bytes(dirs[1].path(), n)
        );
    }
    let sa = std::fs::read(dirs[0].path().join("samples.json")).unwrap();
    let sb = std::fs::read(dirs[1].path().join("samples.json")).unwrap();
    assert_eq!(sa, sb);
}

#[test]
fn exports_from_a_run_directory() {
    let pipe = pipeline();
    let dir = tempfile::tempdir().unwrap();
    write_run_side_files(pipe, dir.path());
    let inputs = micro_inputs(pipe);
    solver::solve(&inputs, Some(dir.path()), 0x5eed).unwrap();
    let ctx = export::load_run(dir.path()).unwrap();
    assert_eq!(ctx.iteration, 1);

    let scatter = dir.path().join("scatter.csv");
    export::export_scatter(&ctx, &scatter).unwrap();
    let meta = export::read_csv_metadata(&scatter).unwrap();
    let mut pearson_count = 0;
    for (k, v) in &meta {
        if k.starts_with("pearson_") {
            pearson_count += 1;
            let val: f64 = v.parse().unwrap();
            assert!(val.is_finite(), "{k}={v}");
        }
    }
    assert_eq!(pearson_count, 4);

    let slice = dir.path().join("policy_slice.csv");
    export::export_policy_slice(&ctx, 41, &slice).unwrap();
    let text = std::fs::read_to_string(&slice).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "j,x,savings_slow,savings_fast,savings_baseline");
    // 41 positions x 2 levels of data rows.
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count() - 1, 82);

    let contour = dir.path().join("contour.csv");
    export::export_contour(&ctx, None, 7, 5, &contour).unwrap();
    let text = std::fs::read_to_string(&contour).unwrap();
    assert_eq!(
        text.lines().filter(|l| !l.starts_with('#')).count() - 1,
        4 * 7 * 5
    );

    let surface = dir.path().join("surface.csv");
    export::export_feature_surface(&ctx, &[0.5, 1.0, 3.0, 6.0], 5, 4, &surface).unwrap();
    let text = std::fs::read_to_string(&surface).unwrap();
    assert_eq!(
        text.lines().filter(|l| !l.starts_with('#')).count() - 1,
        4 * 4 * 5 * 4
    );

    // Exports are deterministic.
    let scatter2 = dir.path().join("scatter2.csv");
    export::export_scatter(&ctx, &scatter2).unwrap();
    assert_eq!(
        std::fs::read(&scatter).unwrap(),
        std::fs::read(&scatter2).unwrap()
    );
}
