//! Persisted desk run + per-iteration residual decomposition.

use std::path::Path;
use std::sync::Arc;

use ksmfg::aiyagari::{equilibrium, AiyagariOptions};
use ksmfg::checkpoint;
use ksmfg::economy::{AggState, EconomyParams, ProdLevel};
use ksmfg::measures::equal_mass_grid;
use ksmfg::neuralnet::NetSpec;
use ksmfg::optim::AdamParams;
use ksmfg::samples::{read_samples_file, SamplerConfig};
use ksmfg::solver::{self, FixedPointConfig, FourNets, SolveInputs};

fn main() {
    let run_dir = Path::new("/tmp/desk_run");
    std::fs::create_dir_all(run_dir).unwrap();
    let mut params = EconomyParams::default();
    params.consumption_floor = 0.02;
    let eq = if run_dir.join("aiyagari.json").exists() {
        ksmfg::aiyagari::AiyagariEquilibrium::read_json_file(&run_dir.join("aiyagari.json")).unwrap()
    } else {
        let eq = equilibrium(&params, &AiyagariOptions {
            fine_nodes: 400, stretch: 7.0, transport_points: 10,
            clearing_tol: 2e-4, vi_tol: 1e-8, stationary_tol: 1e-9,
            ..AiyagariOptions::default()
        }).unwrap();
        eq.write_json_file(&run_dir.join("aiyagari.json")).unwrap();
        eq
    };
    let grid = if run_dir.join("grid.json").exists() {
        ksmfg::measures::Grid::read_json_file(&run_dir.join("grid.json")).unwrap()
    } else {
        let fine = eq.measure.resample_uniform(3000).unwrap();
        let g = equal_mass_grid(&fine, 4, 4).unwrap();
        g.write_json_file(&run_dir.join("grid.json")).unwrap();
        g
    };
    let grid = Arc::new(grid);
    let base = eq.measure.project_onto(&grid).unwrap();
    let spec = NetSpec {
        measure_dim: grid.coeff_len(),
        n_features: 1,
        feature_embed_dim: 32,
        rate_embed_dim: 12,
        capital_embed_dim: 48,
        trunk_dims: vec![64, 32, 16],
    };
    let inputs = SolveInputs {
        params: &params,
        grid: grid.clone(),
        base_measure: base.clone(),
        baseline: &eq.solution,
        net_spec: spec.clone(),
        sampler: SamplerConfig { n_samples: 5000, ..SamplerConfig::default() },
        fixed_point: FixedPointConfig {
            n_outer: 10,
            inner_steps: 1500,
            batch_size: 512,
            adam: AdamParams { lr: 8e-4, ..AdamParams::default() },
            transport_points: 12,
            pretrain_steps: 800,
            policy_tol: 0.0,
            master_seed: 31337,
            ..FixedPointConfig::default()
        },
    };
    solver::solve(&inputs, Some(run_dir), 0).unwrap();
    eprintln!("== solve done; analyzing ==");

    let (set, _) = read_samples_file(&run_dir.join("samples.json"), &params).unwrap();
    let holdout = set.holdout_indices();
    for iter in [0usize, 4, 9] {
        let dir = solver::iter_dir(run_dir, iter);
        let nets = FourNets::from_fn(|i, j| {
            checkpoint::load_matching(&solver::net_ckpt_path(&dir, i, j), &spec).map(|(n, _)| n)
        }).unwrap();
        // residuals of iteration-(iter) nets against targets from themselves
        // (the quantity the NEXT report would chase) for (Fast, Low):
        let i = AggState::Fast;
        let j = ProdLevel::Low;
        let mut rows: Vec<(f64, f64, f64, f64, f64)> = Vec::new(); // |R|, x, r, target, v
        for &k in &holdout {
            let s = &set.samples[k];
            let t = solver::bellman_target(s.x, &s.measure, &nets, i, j, &params, 12).unwrap();
            let v = nets.get(i, j).value(s.x, s.measure.coeffs(), s.prices[i.idx()].r).unwrap();
            let r = solver::residual(v, t, &params);
            rows.push((r.abs(), s.x, s.prices[i.idx()].r, t, v));
        }
        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let n = rows.len();
        let q = |p: f64| rows[((n as f64 * p) as usize).min(n - 1)].0;
        eprintln!(
            "iter {iter}: |R| q50={:.2e} q90={:.2e} q99={:.2e} max={:.2e}",
            q(0.5), q(0.9), q(0.99), rows[n - 1].0
        );
        for row in rows.iter().rev().take(5) {
            eprintln!(
                "   worst: x={:7.3} r2={:7.4} v={:9.4} target={:9.4} |R|={:.3e}",
                row.1, row.2, row.4, row.3, row.0
            );
        }
    }
}
