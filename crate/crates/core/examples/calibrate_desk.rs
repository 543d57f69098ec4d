//! Desk-scale calibration: ordering fraction, residual ratio, runtime.

use std::sync::Arc;
use std::time::Instant;

use ksmfg::aiyagari::{equilibrium, AiyagariOptions};
use ksmfg::economy::{AggState, EconomyParams, ProdLevel};
use ksmfg::measures::equal_mass_grid;
use ksmfg::neuralnet::NetSpec;
use ksmfg::optim::AdamParams;
use ksmfg::samples::SamplerConfig;
use ksmfg::solver::{self, FixedPointConfig, SolveInputs};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let inner: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(500);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let pretrain: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(600);
    let npts: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(6);
    let decay: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let batch: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(256);

    let t0 = Instant::now();
    let mut params = EconomyParams::default();
    params.consumption_floor = 0.02;
    let eq = equilibrium(
        &params,
        &AiyagariOptions {
            fine_nodes: 400,
            stretch: 7.0,
            transport_points: 10,
            clearing_tol: 2e-4,
            vi_tol: 1e-8,
            stationary_tol: 1e-9,
            ..AiyagariOptions::default()
        },
    )
    .unwrap();
    eprintln!("[{:.1?}] baseline r*={:.6} lowDirac={:.3e}", t0.elapsed(), eq.r_star,
              eq.measure.dirac_lo(ProdLevel::Low));

    let fine = eq.measure.resample_uniform(3000).unwrap();
    let grid = Arc::new(equal_mass_grid(&fine, 4, 4).unwrap());
    let base = eq.measure.project_onto(&grid).unwrap();

    let inputs = SolveInputs {
        params: &params,
        grid: grid.clone(),
        base_measure: base.clone(),
        baseline: &eq.solution,
        net_spec: NetSpec {
            measure_dim: grid.coeff_len(),
            n_features: 1,
            feature_embed_dim: 32,
            rate_embed_dim: 12,
            capital_embed_dim: 48,
            trunk_dims: vec![64, 32, 16],
        },
        sampler: SamplerConfig {
            n_samples: 5000,
            ..SamplerConfig::default()
        },
        fixed_point: FixedPointConfig {
            n_outer: 10,
            inner_steps: inner,
            batch_size: batch,
            adam: AdamParams { lr, ..AdamParams::default() },
            transport_points: npts,
            lr_decay: decay,
            pretrain_steps: pretrain,
            policy_tol: 0.0,
            master_seed: 2024,
            ..FixedPointConfig::default()
        },
    };
    let (nets, reports) = solver::solve(&inputs, None, 0).unwrap();
    eprintln!("[{:.1?}] solve done", t0.elapsed());
    for r in &reports {
        eprintln!(
            "iter {:2}: holdout {:.3e} {:.3e} {:.3e} {:.3e} policy {:.2e} ({:.0}s)",
            r.iteration, r.holdout_msr[0][0], r.holdout_msr[0][1],
            r.holdout_msr[1][0], r.holdout_msr[1][1], r.policy_change_sup, r.wall_seconds
        );
    }
    let first: f64 = reports[0].holdout_msr.iter().flatten().sum::<f64>() / 4.0;
    let last: f64 = reports.last().unwrap().holdout_msr.iter().flatten().sum::<f64>() / 4.0;
    eprintln!("criterion-7 ratio: {:.4} (need <= 0.5)", last / first);

    // Criterion 6 ordering.
    let coeffs = base.coeffs();
    let mut ok = 0usize;
    let mut total = 0usize;
    let mut worst: Vec<(f64, f64, f64, f64, usize)> = Vec::new();
    for j in ProdLevel::ALL {
        for k in 0..200 {
            let x = 0.2 + (25.0 - 0.2) * k as f64 / 199.0;
            let s_aiy = eq.solution.savings_at(x, j);
            let pr_s = params.factor_prices(&base, AggState::Slow).unwrap();
            let pr_f = params.factor_prices(&base, AggState::Fast).unwrap();
            let s_slow = solver::policy_savings(nets.get(AggState::Slow, j), x, coeffs, &pr_s, j, &params).unwrap();
            let s_fast = solver::policy_savings(nets.get(AggState::Fast, j), x, coeffs, &pr_f, j, &params).unwrap();
            total += 1;
            if s_fast >= s_aiy && s_aiy >= s_slow {
                ok += 1;
            } else {
                worst.push((x, s_slow, s_aiy, s_fast, j.idx()));
            }
        }
    }
    eprintln!("criterion-6 ordering: {}/{} = {:.3}", ok, total, ok as f64 / total as f64);
    for w in worst.iter().take(8) {
        eprintln!("  violated: j={} x={:.2} slow={:.4} aiy={:.4} fast={:.4}", w.4, w.0, w.1, w.2, w.3);
    }
    eprintln!("[{:.1?}] total", t0.elapsed());
}
