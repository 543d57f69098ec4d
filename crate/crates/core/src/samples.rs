//! Training-sample generation for the fixed-point solver.
//!
//! A sample is a wealth position paired with a distribution. Measures are a
//! mixture of flat-Dirichlet draws over slot masses, convex perturbations of
//! the baseline equilibrium measure, and forward-transported versions of both
//! (so the training set stays close to dynamically reachable distributions).
//! Wealth positions are mostly uniform, with a log-spaced share packed near
//! the borrowing limit where the constrained region needs resolution.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::economy::{AggState, EconomyParams, Prices, ProdLevel};
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::measures::{DiscreteMeasure, Grid, MassPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_samples: usize,
    /// Fraction of flat-Dirichlet measures.
    pub dirichlet_fraction: f64,
    /// Fraction of perturbed-baseline measures; the remainder is
    /// forward-transported draws.
    pub perturb_fraction: f64,
    /// Maximal mixing weight pulled toward the random measure when
    /// perturbing the baseline.
    pub perturb_weight: f64,
    /// Share of wealth positions drawn log-spaced near the lower bound.
    pub low_x_fraction: f64,
    /// Decades spanned by the log-spaced positions.
    pub low_x_decades: f64,
    pub holdout_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_samples: 20_000,
            dirichlet_fraction: 0.4,
            perturb_fraction: 0.4,
            perturb_weight: 0.5,
            low_x_fraction: 0.2,
            low_x_decades: 3.0,
            holdout_fraction: 0.1,
        }
    }
}

/// One training point. Prices are cached per aggregate state; they depend
/// only on the measure, so they stay valid for the sample's lifetime.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: f64,
    pub measure: DiscreteMeasure,
    pub holdout: bool,
    pub prices: [Prices; 2],
}

impl Sample {
    pub fn new(
        x: f64,
        measure: DiscreteMeasure,
        holdout: bool,
        params: &EconomyParams,
    ) -> Result<Sample> {
        let prices = [
            params.factor_prices(&measure, AggState::Slow)?,
            params.factor_prices(&measure, AggState::Fast)?,
        ];
        Ok(Sample {
            x,
            measure,
            holdout,
            prices,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub grid: Arc<Grid>,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&k| !self.samples[k].holdout)
            .collect()
    }

    pub fn holdout_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&k| self.samples[k].holdout)
            .collect()
    }
}

/// Draws a wealth position: uniform with probability `1 - low_x_fraction`,
/// otherwise log-spaced toward the lower bound.
pub fn draw_position(cfg: &SamplerConfig, params: &EconomyParams, rng: &mut ChaCha12Rng) -> f64 {
    let span = params.x_hi - params.x_lo;
    if rng.random::<f64>() < cfg.low_x_fraction {
        let u: f64 = rng.random();
        params.x_lo + span * 10f64.powf(-cfg.low_x_decades * u)
    } else {
        params.x_lo + span * rng.random::<f64>()
    }
}

/// Flat Dirichlet over slot masses (normalized exponential draws).
pub fn dirichlet_measure(grid: &Arc<Grid>, rng: &mut ChaCha12Rng) -> Result<DiscreteMeasure> {
    let d = grid.coeff_len();
    let mut masses = Vec::with_capacity(d);
    let mut total = 0.0;
    for _ in 0..d {
        let u: f64 = rng.random();
        let g = -(1.0 - u).ln();
        masses.push(g);
        total += g;
    }
    masses.iter_mut().for_each(|m| *m /= total);
    DiscreteMeasure::from_slot_masses(grid.clone(), &masses, MassPolicy::Strict)
}

fn perturbed_measure(
    cfg: &SamplerConfig,
    grid: &Arc<Grid>,
    base: &DiscreteMeasure,
    rng: &mut ChaCha12Rng,
) -> Result<DiscreteMeasure> {
    let random = dirichlet_measure(grid, rng)?;
    let theta = cfg.perturb_weight * rng.random::<f64>();
    DiscreteMeasure::linear_combination(theta, &random, 1.0 - theta, base)
}

/// Generates the full sample set. `forward` pushes a measure one step under
/// the current policies of the given aggregate state; it is applied to the
/// on-dynamics share of the mixture. The holdout split is fixed here by
/// sample index and never reshuffled.
pub fn generate_samples<F>(
    cfg: &SamplerConfig,
    grid: &Arc<Grid>,
    base: &DiscreteMeasure,
    forward: F,
    params: &EconomyParams,
    seed: u64,
) -> Result<SampleSet>
where
    F: Fn(&DiscreteMeasure, AggState) -> Result<DiscreteMeasure>,
{
    if cfg.n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let holdout_every = if cfg.holdout_fraction > 0.0 {
        (1.0 / cfg.holdout_fraction).round().max(2.0) as usize
    } else {
        usize::MAX
    };
    let n_dirichlet = (cfg.n_samples as f64 * cfg.dirichlet_fraction).floor() as usize;
    let n_perturbed = (cfg.n_samples as f64 * cfg.perturb_fraction).floor() as usize;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for k in 0..cfg.n_samples {
        let measure = if k < n_dirichlet {
            dirichlet_measure(grid, &mut rng)?
        } else if k < n_dirichlet + n_perturbed {
            perturbed_measure(cfg, grid, base, &mut rng)?
        } else {
            // On-dynamics: transport a fresh draw one step forward. Early
            // policies can collapse all mass onto the borrowing limit, which
            // leaves no capital to price; keep the untransported draw then.
            let seed_measure = if k % 2 == 0 {
                dirichlet_measure(grid, &mut rng)?
            } else {
                perturbed_measure(cfg, grid, base, &mut rng)?
            };
            let i = if rng.random::<bool>() {
                AggState::Fast
            } else {
                AggState::Slow
            };
            let moved = forward(&seed_measure, i)?;
            if moved.aggregates(params.y).0 > 1e-6 {
                moved
            } else {
                seed_measure
            }
        };
        let x = draw_position(cfg, params, &mut rng);
        samples.push(Sample::new(x, measure, k % holdout_every == 0, params)?);
    }
    Ok(SampleSet {
        grid: grid.clone(),
        samples,
    })
}

/// Replaces `fraction` of the training samples (chosen at random) by their
/// forward-transported versions under the current policies, redrawing the
/// wealth position. Holdout samples are left untouched so the held-out
/// states stay comparable across iterations.
pub fn refresh_samples<F>(
    set: &mut SampleSet,
    fraction: f64,
    cfg: &SamplerConfig,
    forward: F,
    params: &EconomyParams,
    seed: u64,
) -> Result<()>
where
    F: Fn(&DiscreteMeasure, AggState) -> Result<DiscreteMeasure>,
{
    let train = set.train_indices();
    let k = (train.len() as f64 * fraction).floor() as usize;
    if k == 0 {
        return Ok(());
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut indices = train;
    indices.shuffle(&mut rng);
    indices.truncate(k);
    indices.sort_unstable(); // deterministic processing order
    for idx in indices {
        let i = if rng.random::<bool>() {
            AggState::Fast
        } else {
            AggState::Slow
        };
        let moved = forward(&set.samples[idx].measure, i)?;
        let x = draw_position(cfg, params, &mut rng);
        // Same collapse guard as at generation time.
        if moved.aggregates(params.y).0 > 1e-6 {
            set.samples[idx] = Sample::new(x, moved, false, params)?;
        } else {
            set.samples[idx].x = x;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SampleSetJson {
    completed_iterations: usize,
    grid_y1: Vec<f64>,
    grid_y2: Vec<f64>,
    xs: Vec<f64>,
    holdout: Vec<bool>,
    coeffs: Vec<Vec<f64>>,
}

/// Persists the sample set together with the number of completed outer
/// iterations, so an interrupted run can resume from its exact state.
pub fn write_samples_file(path: &Path, set: &SampleSet, completed_iterations: usize) -> Result<()> {
    let doc = SampleSetJson {
        completed_iterations,
        grid_y1: set.grid.breakpoints(ProdLevel::Low).to_vec(),
        grid_y2: set.grid.breakpoints(ProdLevel::High).to_vec(),
        xs: set.samples.iter().map(|s| s.x).collect(),
        holdout: set.samples.iter().map(|s| s.holdout).collect(),
        coeffs: set.samples.iter().map(|s| s.measure.pack()).collect(),
    };
    jsonfmt::write_json_file(path, &doc)
}

pub fn read_samples_file(path: &Path, params: &EconomyParams) -> Result<(SampleSet, usize)> {
    let doc: SampleSetJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let grid = Arc::new(Grid::new(doc.grid_y1, doc.grid_y2)?);
    if doc.xs.len() != doc.holdout.len() || doc.xs.len() != doc.coeffs.len() {
        return Err(Error::RunDir("inconsistent samples file".into()));
    }
    let mut samples = Vec::with_capacity(doc.xs.len());
    for ((x, holdout), coeffs) in doc.xs.iter().zip(doc.holdout).zip(doc.coeffs) {
        let measure = DiscreteMeasure::unpack(grid.clone(), &coeffs, MassPolicy::Strict)?;
        samples.push(Sample::new(*x, measure, holdout, params)?);
    }
    Ok((SampleSet { grid, samples }, doc.completed_iterations))
}
