//! One-step semi-Lagrangian transport of a discrete measure.
//!
//! Mass is carried by representative points: each endpoint mass travels as a
//! single particle, and each interior cell is represented by `N` equally
//! spaced interior points, each carrying `density * width / N` so that the
//! total is conserved exactly. Every particle moves along the controlled
//! dynamics `x -> x + dt * s(x)` and is re-binned on the destination level's
//! subdivision; productivity switching either splits each particle into its
//! expected stay/switch fractions or draws the destination level at random.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::economy::{EconomyParams, ProdLevel};
use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, Grid, MassPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportMode {
    /// Deterministic: each particle contributes `1 - lambda*dt` to its own
    /// level and `lambda*dt` to the other. Equal to the expectation of
    /// `Sampled` and the default everywhere.
    ExpectedSplit,
    /// Each particle's destination level is drawn independently.
    Sampled,
}

#[derive(Debug, Clone)]
pub struct TransportConfig {
    /// Interior representative points per cell.
    pub points_per_cell: usize,
    pub mode: TransportMode,
    /// Seed for the level draws in `Sampled` mode; ignored otherwise.
    pub seed: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            points_per_cell: 10,
            mode: TransportMode::ExpectedSplit,
            seed: 0,
        }
    }
}

/// Destination slot of a transported particle on one level's subdivision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    DiracLo,
    Cell(usize),
    DiracHi,
}

/// Interior representative points of cell `k`: `x_k + n/(N+1) * h_k`.
pub fn cell_points(grid: &Grid, j: ProdLevel, k: usize, n: usize) -> Vec<f64> {
    let b = grid.breakpoints(j);
    let h = b[k + 1] - b[k];
    (1..=n)
        .map(|i| b[k] + h * i as f64 / (n as f64 + 1.0))
        .collect()
}

/// All interior representative points of one level, cell-major.
pub fn sample_points(grid: &Grid, j: ProdLevel, n: usize) -> Vec<f64> {
    (0..grid.n_cells(j))
        .flat_map(|k| cell_points(grid, j, k, n))
        .collect()
}

/// Bins a transported position on level `j`'s subdivision. Cells are
/// half-open on the left: a point exactly on an interior breakpoint belongs
/// to the cell below. Positions at or below the lower bound collapse into the
/// lower point mass (undershoot can only be floating-point dust because the
/// consumption rule enforces the constraint); positions at or above the upper
/// bound collapse into the upper point mass, so a stationary endpoint mass
/// stays an endpoint mass.
pub fn bin(grid: &Grid, j: ProdLevel, x_hat: f64) -> Slot {
    if x_hat <= grid.x_lo() {
        return Slot::DiracLo;
    }
    if x_hat >= grid.x_hi() {
        return Slot::DiracHi;
    }
    let b = grid.breakpoints(j);
    Slot::Cell(b.partition_point(|&v| v < x_hat) - 1)
}

fn slot_index(grid: &Grid, j: ProdLevel, slot: Slot) -> usize {
    let off = grid.level_offset(j);
    match slot {
        Slot::DiracLo => off,
        Slot::Cell(k) => off + 1 + k,
        Slot::DiracHi => off + 1 + grid.n_cells(j),
    }
}

/// Pushes `m` forward one step under the savings policy, using the mode and
/// point count in `config`. In `Sampled` mode the level draws come from a
/// ChaCha stream seeded with `config.seed`; callers that need fresh draws per
/// call should use [`push_forward_sampled`] with their own generator.
pub fn push_forward<F>(
    m: &DiscreteMeasure,
    policy: F,
    params: &EconomyParams,
    config: &TransportConfig,
) -> Result<DiscreteMeasure>
where
    F: Fn(f64, ProdLevel) -> f64,
{
    match config.mode {
        TransportMode::ExpectedSplit => {
            push_forward_expected(m, policy, params, config.points_per_cell)
        }
        TransportMode::Sampled => {
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
            push_forward_sampled(m, policy, params, config.points_per_cell, &mut rng)
        }
    }
}

/// Deterministic expected-split transport.
pub fn push_forward_expected<F>(
    m: &DiscreteMeasure,
    policy: F,
    params: &EconomyParams,
    points_per_cell: usize,
) -> Result<DiscreteMeasure>
where
    F: Fn(f64, ProdLevel) -> f64,
{
    run_push_forward(m, policy, params, points_per_cell, &mut |masses, grid, src, x_hat, mass| {
        let switch_prob = params.lambda[src.idx()] * params.dt;
        let stay = mass * (1.0 - switch_prob);
        let switched = mass - stay;
        masses[slot_index(grid, src, bin(grid, src, x_hat))] += stay;
        masses[slot_index(grid, src.flip(), bin(grid, src.flip(), x_hat))] += switched;
    })
}

/// Transport with independently drawn destination levels; conservation is
/// exact per realization.
pub fn push_forward_sampled<F, R>(
    m: &DiscreteMeasure,
    policy: F,
    params: &EconomyParams,
    points_per_cell: usize,
    rng: &mut R,
) -> Result<DiscreteMeasure>
where
    F: Fn(f64, ProdLevel) -> f64,
    R: Rng,
{
    run_push_forward(m, policy, params, points_per_cell, &mut |masses, grid, src, x_hat, mass| {
        let switch_prob = params.lambda[src.idx()] * params.dt;
        let dest = if rng.random::<f64>() < switch_prob {
            src.flip()
        } else {
            src
        };
        masses[slot_index(grid, dest, bin(grid, dest, x_hat))] += mass;
    })
}

fn run_push_forward<F>(
    m: &DiscreteMeasure,
    policy: F,
    params: &EconomyParams,
    points_per_cell: usize,
    deposit: &mut dyn FnMut(&mut [f64], &Grid, ProdLevel, f64, f64),
) -> Result<DiscreteMeasure>
where
    F: Fn(f64, ProdLevel) -> f64,
{
    if points_per_cell == 0 {
        return Err(Error::InvalidParameter(
            "transport needs at least one point per cell".into(),
        ));
    }
    let grid = m.grid().clone();
    let mut masses = vec![0.0_f64; grid.coeff_len()];
    let mut transport = |x: f64, src: ProdLevel, mass: f64, masses: &mut [f64]| -> Result<()> {
        let s = policy(x, src);
        if !s.is_finite() {
            return Err(Error::NanSavings { x, level: src.one_based() });
        }
        let x_hat = x + params.dt * s;
        deposit(masses, &grid, src, x_hat, mass);
        Ok(())
    };
    // Fixed traversal order (level, lower mass, cell-major points, upper
    // mass) keeps the accumulation bit-reproducible.
    for src in ProdLevel::ALL {
        let lo_mass = m.dirac_lo(src);
        if lo_mass > 0.0 {
            transport(grid.x_lo(), src, lo_mass, &mut masses)?;
        }
        for k in 0..grid.n_cells(src) {
            let cell_mass = m.cell_mass(src, k);
            if cell_mass == 0.0 {
                continue;
            }
            let point_mass = cell_mass / points_per_cell as f64;
            for x in cell_points(&grid, src, k, points_per_cell) {
                transport(x, src, point_mass, &mut masses)?;
            }
        }
        let hi_mass = m.dirac_hi(src);
        if hi_mass > 0.0 {
            transport(grid.x_hi(), src, hi_mass, &mut masses)?;
        }
    }
    DiscreteMeasure::from_slot_masses(grid, &masses, MassPolicy::Strict)
}
