//! Stationary equilibrium of the no-aggregate-shock baseline (unit technology
//! level, no aggregate switching).
//!
//! The baseline deliberately uses the same time step, consumption rule, and
//! transport operator as the full solver, so degenerate-mode comparisons test
//! like against like. The household problem is solved by value iteration on a
//! fine wealth grid with piecewise-linear value interpolation for the
//! semi-Lagrangian lookup; the stationary distribution is the fixed point of
//! the expected-split transport under the solved savings policy; the
//! equilibrium rate clears the capital market by bisection.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::economy::{EconomyParams, Prices, ProdLevel};
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::measures::{DiscreteMeasure, Grid, MassPolicy, MeasureJson};
use crate::transport::{bin, cell_points, Slot};

#[derive(Debug, Clone)]
pub struct AiyagariOptions {
    /// Nodes of the fine wealth grid.
    pub fine_nodes: usize,
    /// Geometric stretching factor; larger clusters nodes near the borrowing
    /// limit where the policy kinks.
    pub stretch: f64,
    /// Interior transport points per fine cell.
    pub transport_points: usize,
    /// Market-clearing tolerance on |implied r - candidate r|.
    pub clearing_tol: f64,
    pub vi_tol: f64,
    pub vi_max_iter: usize,
    pub stationary_tol: f64,
    pub stationary_max_iter: usize,
    pub max_bisections: usize,
}

impl Default for AiyagariOptions {
    fn default() -> Self {
        AiyagariOptions {
            fine_nodes: 600,
            stretch: 8.0,
            transport_points: 10,
            clearing_tol: 1e-4,
            vi_tol: 1e-9,
            vi_max_iter: 100_000,
            stationary_tol: 1e-10,
            stationary_max_iter: 200_000,
            max_bisections: 60,
        }
    }
}

/// Nodes geometrically clustered toward the lower bound:
/// `x_i = x_lo + span * (e^(stretch t) - 1)/(e^stretch - 1)`, `t = i/(n-1)`.
pub fn geometric_nodes(x_lo: f64, x_hi: f64, n: usize, stretch: f64) -> Vec<f64> {
    assert!(n >= 2);
    let span = x_hi - x_lo;
    let denom = stretch.exp() - 1.0;
    let mut nodes: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            x_lo + span * ((stretch * t).exp() - 1.0) / denom
        })
        .collect();
    nodes[0] = x_lo;
    nodes[n - 1] = x_hi;
    nodes
}

/// A grid whose cells are the intervals between fine nodes, shared by both
/// productivity levels.
pub fn grid_from_nodes(nodes: &[f64]) -> Result<Grid> {
    Grid::new(nodes.to_vec(), nodes.to_vec())
}

/// Household solution on the fine grid at fixed prices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndividualSolution {
    pub nodes: Vec<f64>,
    pub value: [Vec<f64>; 2],
    pub consumption: [Vec<f64>; 2],
    pub savings: [Vec<f64>; 2],
    pub iterations: usize,
}

impl IndividualSolution {
    pub fn value_at(&self, x: f64, j: ProdLevel) -> f64 {
        interp(&self.nodes, &self.value[j.idx()], x)
    }

    pub fn savings_at(&self, x: f64, j: ProdLevel) -> f64 {
        interp(&self.nodes, &self.savings[j.idx()], x)
    }

    pub fn consumption_at(&self, x: f64, j: ProdLevel) -> f64 {
        interp(&self.nodes, &self.consumption[j.idx()], x)
    }
}

/// Piecewise-linear interpolation with clamping to the node range.
pub fn interp(nodes: &[f64], values: &[f64], x: f64) -> f64 {
    let n = nodes.len();
    if x <= nodes[0] {
        return values[0];
    }
    if x >= nodes[n - 1] {
        return values[n - 1];
    }
    let hi = nodes.partition_point(|&v| v < x).min(n - 1);
    let lo = hi - 1;
    let t = (x - nodes[lo]) / (nodes[hi] - nodes[lo]);
    values[lo] + t * (values[hi] - values[lo])
}

/// Value iteration at fixed prices with the constrained consumption rule.
///
/// Each node update maximizes `dt*u(c) + v(x + dt*(income - c))` over
/// admissible consumption directly (bracketed scan plus golden section, with
/// the budget and zero-savings corners snapped exactly). This is the same
/// constrained rule in variational form: plugging a finite-difference slope
/// into the closed-form first-order condition is unstable on a grid (slope
/// overshoot produces a self-reinforcing sawtooth), while the direct
/// maximization is a monotone sup-norm contraction. At the fixed point the
/// interior policy satisfies the first-order condition `u'(c) = dv/dx`,
/// which the tests check. The continuation value is looked up by linear
/// interpolation, clamped to the grid.
pub fn solve_individual(
    prices: &Prices,
    nodes: &[f64],
    params: &EconomyParams,
    tol: f64,
    max_iter: usize,
) -> Result<IndividualSolution> {
    if prices.r <= -params.delta {
        return Err(Error::InvalidParameter(format!(
            "r={} must exceed -delta for a meaningful problem",
            prices.r
        )));
    }
    if prices.w <= 0.0 {
        return Err(Error::InvalidParameter(format!("w={} must be positive", prices.w)));
    }
    if prices.r >= params.rho {
        return Err(Error::InvalidParameter(format!(
            "r={} must be below rho={} for a bounded stationary problem",
            prices.r, params.rho
        )));
    }
    let n = nodes.len();
    let disc = 1.0 + params.rho * params.dt;
    let mut value = [vec![0.0; n], vec![0.0; n]];
    let mut next = value.clone();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut change: f64 = 0.0;
        for j in ProdLevel::ALL {
            let lam_dt = params.lambda[j.idx()] * params.dt;
            for g in 0..n {
                let cs = best_consumption(nodes, &value[j.idx()], nodes[g], prices, j, params)?;
                let x_next = (nodes[g] + params.dt * cs.savings).clamp(nodes[0], nodes[n - 1]);
                let cont = interp(nodes, &value[j.idx()], x_next);
                let switch = lam_dt * (value[j.idx()][g] - value[j.flip().idx()][g]);
                let u = params.utility(cs.consumption)?;
                let v_new = (cont - switch + params.dt * u) / disc;
                change = change.max((v_new - value[j.idx()][g]).abs());
                next[j.idx()][g] = v_new;
            }
        }
        std::mem::swap(&mut value, &mut next);
        if change < tol {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::NonConvergence {
                iterations,
                context: format!("household value iteration (last change {change:.3e})"),
            });
        }
    }
    // Final policy from the converged value.
    let mut consumption = [vec![0.0; n], vec![0.0; n]];
    let mut savings = [vec![0.0; n], vec![0.0; n]];
    for j in ProdLevel::ALL {
        for g in 0..n {
            let cs = best_consumption(nodes, &value[j.idx()], nodes[g], prices, j, params)?;
            consumption[j.idx()][g] = cs.consumption;
            savings[j.idx()][g] = cs.savings;
        }
    }
    Ok(IndividualSolution {
        nodes: nodes.to_vec(),
        value,
        consumption,
        savings,
        iterations,
    })
}

/// Maximizes `dt*u(c) + v(x + dt*(income - c))` over `c` in `(0, budget]`.
///
/// A log-spaced scan brackets the maximum, golden section refines it, and the
/// two corners are then snapped exactly when they win: consuming the whole
/// budget gives `savings = -(x - x_lo)/dt` (one step lands on the borrowing
/// limit bit for bit), and consuming the income flow gives `savings = 0`.
fn best_consumption(
    nodes: &[f64],
    v_j: &[f64],
    x: f64,
    prices: &Prices,
    j: ProdLevel,
    params: &EconomyParams,
) -> Result<crate::economy::ConsumptionSavings> {
    let income = prices.w * params.y[j.idx()] + prices.r * x;
    let headroom = (x - params.x_lo) / params.dt;
    let budget = headroom + income;
    if budget <= 0.0 {
        return Err(Error::InfeasibleState { x, budget });
    }
    let gamma = params.gamma;
    let lo = nodes[0];
    let hi = nodes[nodes.len() - 1];
    let phi = |c: f64| -> f64 {
        let u = c.powf(1.0 - gamma) / (1.0 - gamma);
        let x_next = (x + params.dt * (income - c)).clamp(lo, hi);
        params.dt * u + interp(nodes, v_j, x_next)
    };

    // Bracket with a log-spaced scan of (budget*1e-4, budget].
    const N_SCAN: usize = 16;
    let mut best_k = 0;
    let mut best_phi = f64::NEG_INFINITY;
    let mut scan = [0.0; N_SCAN];
    for (k, slot) in scan.iter_mut().enumerate() {
        let t = k as f64 / (N_SCAN - 1) as f64;
        let c = budget * 10f64.powf(-4.0 * (1.0 - t));
        *slot = c;
        let p = phi(c);
        if p > best_phi {
            best_phi = p;
            best_k = k;
        }
    }
    let mut a = scan[best_k.saturating_sub(1)];
    let mut b = scan[(best_k + 1).min(N_SCAN - 1)];
    // Golden-section refinement.
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c1 = b - (b - a) * INV_PHI;
    let mut c2 = a + (b - a) * INV_PHI;
    let mut f1 = phi(c1);
    let mut f2 = phi(c2);
    for _ in 0..64 {
        if f1 >= f2 {
            b = c2;
            c2 = c1;
            f2 = f1;
            c1 = b - (b - a) * INV_PHI;
            f1 = phi(c1);
        } else {
            a = c1;
            c1 = c2;
            f1 = f2;
            c2 = a + (b - a) * INV_PHI;
            f2 = phi(c2);
        }
    }
    let c_interior = 0.5 * (a + b);
    let mut best = crate::economy::ConsumptionSavings {
        consumption: c_interior,
        savings: income - c_interior,
        constrained: false,
    };
    let mut best_val = phi(c_interior);
    let snap_tol = 1e-11 * (1.0 + best_val.abs());
    if income > 0.0 && income <= budget && phi(income) >= best_val - snap_tol {
        best_val = phi(income);
        best = crate::economy::ConsumptionSavings {
            consumption: income,
            savings: 0.0,
            constrained: false,
        };
    }
    if phi(budget) >= best_val - snap_tol {
        best = crate::economy::ConsumptionSavings {
            consumption: budget,
            savings: -headroom,
            constrained: true,
        };
    }
    Ok(best)
}

/// Precomputed expected-split transport kernel for one fixed policy.
///
/// Each source slot carries a list of representative points; every point
/// deposits its stay fraction on its own level and the exact complement on
/// the other. Applying the kernel reproduces `push_forward_expected` bit for
/// bit (same points, same binning, same accumulation order), but the bins are
/// resolved once instead of once per iteration.
struct TransportKernel {
    entries: Vec<KernelEntry>,
}

struct KernelEntry {
    src: usize,
    stay_frac: f64,
    point_divisor: f64,
    /// Per representative point: (stay destination, switch destination).
    points: Vec<(usize, usize)>,
}

impl TransportKernel {
    fn build<F>(
        grid: &Grid,
        policy: &F,
        params: &EconomyParams,
        points_per_cell: usize,
    ) -> Result<Self>
    where
        F: Fn(f64, ProdLevel) -> f64,
    {
        let slot_of = |j: ProdLevel, s: Slot| -> usize {
            let off = grid.level_offset(j);
            match s {
                Slot::DiracLo => off,
                Slot::Cell(k) => off + 1 + k,
                Slot::DiracHi => off + 1 + grid.n_cells(j),
            }
        };
        let mut entries = Vec::new();
        for src in ProdLevel::ALL {
            let off = grid.level_offset(src);
            let stay_frac = 1.0 - params.lambda[src.idx()] * params.dt;
            let dests = |x: f64| -> Result<(usize, usize)> {
                let s = policy(x, src);
                if !s.is_finite() {
                    return Err(Error::NanSavings { x, level: src.one_based() });
                }
                let x_hat = x + params.dt * s;
                Ok((
                    slot_of(src, bin(grid, src, x_hat)),
                    slot_of(src.flip(), bin(grid, src.flip(), x_hat)),
                ))
            };
            entries.push(KernelEntry {
                src: off,
                stay_frac,
                point_divisor: 1.0,
                points: vec![dests(grid.x_lo())?],
            });
            for k in 0..grid.n_cells(src) {
                let mut points = Vec::with_capacity(points_per_cell);
                for x in cell_points(grid, src, k, points_per_cell) {
                    points.push(dests(x)?);
                }
                entries.push(KernelEntry {
                    src: off + 1 + k,
                    stay_frac,
                    point_divisor: points_per_cell as f64,
                    points,
                });
            }
            entries.push(KernelEntry {
                src: off + 1 + grid.n_cells(src),
                stay_frac,
                point_divisor: 1.0,
                points: vec![dests(grid.x_hi())?],
            });
        }
        Ok(TransportKernel { entries })
    }

    fn apply(&self, masses: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for e in &self.entries {
            let total = masses[e.src];
            if total == 0.0 {
                continue;
            }
            let pm = total / e.point_divisor;
            for &(stay_dst, switch_dst) in &e.points {
                let stay = pm * e.stay_frac;
                out[stay_dst] += stay;
                out[switch_dst] += pm - stay;
            }
        }
    }
}

/// Fixed point of the expected-split transport under a savings policy,
/// starting from the uniform measure, to total-variation tolerance `tol`.
pub fn stationary_measure<F>(
    policy: F,
    grid: &Arc<Grid>,
    params: &EconomyParams,
    points_per_cell: usize,
    tol: f64,
    max_iter: usize,
) -> Result<DiscreteMeasure>
where
    F: Fn(f64, ProdLevel) -> f64,
{
    let kernel = TransportKernel::build(grid, &policy, params, points_per_cell)?;
    let mut masses = DiscreteMeasure::uniform(grid.clone()).slot_masses();
    let mut next = vec![0.0; masses.len()];
    for it in 0..max_iter {
        kernel.apply(&masses, &mut next);
        // One application conserves mass to machine precision, but thousands
        // of iterations compound the rounding; renormalizing keeps the
        // iterate on the simplex.
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|m| *m /= total);
        let tv: f64 = 0.5
            * masses
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        std::mem::swap(&mut masses, &mut next);
        if tv < tol {
            return DiscreteMeasure::from_slot_masses(grid.clone(), &masses, MassPolicy::Strict);
        }
        if it + 1 == max_iter {
            return Err(Error::NonConvergence {
                iterations: max_iter,
                context: format!("stationary transport fixed point (last TV change {tv:.3e})"),
            });
        }
    }
    unreachable!("loop returns or errors")
}

/// Stationary equilibrium output.
#[derive(Debug, Clone)]
pub struct AiyagariEquilibrium {
    pub r_star: f64,
    pub w_star: f64,
    pub solution: IndividualSolution,
    pub measure: DiscreteMeasure,
    pub clearing_gap: f64,
    pub bisection_iterations: usize,
}

impl AiyagariEquilibrium {
    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        let doc = AiyagariJson {
            r_star: self.r_star,
            w_star: self.w_star,
            clearing_gap: self.clearing_gap,
            bisection_iterations: self.bisection_iterations,
            solution: self.solution.clone(),
            measure: self.measure.to_json(),
        };
        jsonfmt::write_json_file(path, &doc)
    }

    pub fn read_json_file(path: &Path) -> Result<AiyagariEquilibrium> {
        let doc: AiyagariJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(AiyagariEquilibrium {
            r_star: doc.r_star,
            w_star: doc.w_star,
            solution: doc.solution,
            measure: DiscreteMeasure::from_json(&doc.measure)?,
            clearing_gap: doc.clearing_gap,
            bisection_iterations: doc.bisection_iterations,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AiyagariJson {
    r_star: f64,
    w_star: f64,
    clearing_gap: f64,
    bisection_iterations: usize,
    solution: IndividualSolution,
    measure: MeasureJson,
}

/// One evaluation of the market map: household problem and stationary
/// distribution at candidate rate `r`, returning the implied rate.
fn implied_rate(
    r: f64,
    nodes: &[f64],
    grid: &Arc<Grid>,
    params: &EconomyParams,
    opts: &AiyagariOptions,
) -> Result<(f64, Prices, IndividualSolution, DiscreteMeasure)> {
    let w = params.wage_from_rate(r, 1.0)?;
    let prices = Prices { r, w };
    let sol = solve_individual(&prices, nodes, params, opts.vi_tol, opts.vi_max_iter)?;
    let measure = stationary_measure(
        |x, j| sol.savings_at(x, j),
        grid,
        params,
        opts.transport_points,
        opts.stationary_tol,
        opts.stationary_max_iter,
    )?;
    let (x_agg, y_agg) = measure.aggregates(params.y);
    // An empty capital supply means the implied rate is arbitrarily high;
    // return a large finite stand-in so bisection keeps a usable sign.
    let implied = if x_agg > 0.0 {
        params.prices_from_aggregates(x_agg, y_agg, 1.0)?.r
    } else {
        1e3
    };
    Ok((implied, prices, sol, measure))
}

/// Bisection on the interest rate over `(-delta, rho)` until the implied rate
/// matches the candidate within `clearing_tol`.
pub fn equilibrium(params: &EconomyParams, opts: &AiyagariOptions) -> Result<AiyagariEquilibrium> {
    params.validate()?;
    let nodes = geometric_nodes(params.x_lo, params.x_hi, opts.fine_nodes, opts.stretch);
    let grid = Arc::new(grid_from_nodes(&nodes)?);
    let mut lo = -params.delta + 1e-4;
    let mut hi = params.rho - 1e-4;
    let excess = |r: f64| -> Result<f64> {
        let (implied, ..) = implied_rate(r, &nodes, &grid, params, opts)?;
        Ok(implied - r)
    };
    let e_lo = excess(lo)?;
    let e_hi = excess(hi)?;
    if e_lo.signum() == e_hi.signum() {
        return Err(Error::BracketSignChange { lo, hi });
    }
    for it in 1..=opts.max_bisections {
        let mid = 0.5 * (lo + hi);
        let (implied, prices, sol, measure) = implied_rate(mid, &nodes, &grid, params, opts)?;
        let gap = implied - mid;
        if gap.abs() <= opts.clearing_tol {
            return Ok(AiyagariEquilibrium {
                r_star: mid,
                w_star: prices.w,
                solution: sol,
                measure,
                clearing_gap: gap.abs(),
                bisection_iterations: it,
            });
        }
        if gap.signum() == e_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_bisections,
        context: "equilibrium bisection".into(),
    })
}
