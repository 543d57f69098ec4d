//! Finite-dimensional probability measures on `[x_lo, x_hi] x {low, high}`.
//!
//! A measure has, per productivity level, a point mass at each endpoint of the
//! wealth interval and a piecewise-constant density on the cells of a
//! level-specific subdivision. With `K_1` and `K_2` interior cells the
//! coefficient vector has dimension `d = K_1 + K_2 + 4`; the four endpoint
//! masses are counted in `d`. Coefficient ordering is level-major:
//! `(lo_1, cells_1.., hi_1, lo_2, cells_2.., hi_2)`. Interior coefficients are
//! densities (mass per unit wealth); endpoint coefficients are masses.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::economy::ProdLevel;
use crate::error::{Error, Result};
use crate::jsonfmt;

/// Tolerance on the normalization sum; transport is exactly conservative, so
/// larger drift indicates a bug rather than numerical noise.
pub const MASS_TOL: f64 = 1e-12;

/// Per-level subdivisions of the wealth interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    breakpoints: [Vec<f64>; 2],
}

impl Grid {
    /// Builds a grid from per-level breakpoint sequences. Both sequences must
    /// be strictly increasing and share their first and last entries.
    pub fn new(breakpoints_low: Vec<f64>, breakpoints_high: Vec<f64>) -> Result<Grid> {
        let grid = Grid {
            breakpoints: [breakpoints_low, breakpoints_high],
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Uniform subdivisions with `k_low` and `k_high` cells.
    pub fn uniform(x_lo: f64, x_hi: f64, k_low: usize, k_high: usize) -> Result<Grid> {
        let make = |k: usize| -> Vec<f64> {
            (0..=k)
                .map(|i| x_lo + (x_hi - x_lo) * i as f64 / k as f64)
                .collect()
        };
        Grid::new(make(k_low), make(k_high))
    }

    fn validate(&self) -> Result<()> {
        for (lvl, b) in self.breakpoints.iter().enumerate() {
            if b.len() < 2 {
                return Err(Error::InvalidGrid(format!(
                    "level {lvl}: need at least one cell"
                )));
            }
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidGrid(format!(
                    "level {lvl}: non-finite breakpoint"
                )));
            }
            if b.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidGrid(format!(
                    "level {lvl}: breakpoints not strictly increasing"
                )));
            }
        }
        let [lo, hi] = [&self.breakpoints[0], &self.breakpoints[1]];
        if lo[0] != hi[0] || lo[lo.len() - 1] != hi[hi.len() - 1] {
            return Err(Error::InvalidGrid(
                "levels must share the interval endpoints".into(),
            ));
        }
        Ok(())
    }

    pub fn breakpoints(&self, j: ProdLevel) -> &[f64] {
        &self.breakpoints[j.idx()]
    }

    pub fn n_cells(&self, j: ProdLevel) -> usize {
        self.breakpoints[j.idx()].len() - 1
    }

    pub fn width(&self, j: ProdLevel, k: usize) -> f64 {
        let b = &self.breakpoints[j.idx()];
        b[k + 1] - b[k]
    }

    pub fn x_lo(&self) -> f64 {
        self.breakpoints[0][0]
    }

    pub fn x_hi(&self) -> f64 {
        *self.breakpoints[0].last().unwrap()
    }

    /// Coefficient-vector dimension `d = K_1 + K_2 + 4`.
    pub fn coeff_len(&self) -> usize {
        self.n_cells(ProdLevel::Low) + self.n_cells(ProdLevel::High) + 4
    }

    /// Offset of a level's block in the coefficient vector.
    pub fn level_offset(&self, j: ProdLevel) -> usize {
        match j {
            ProdLevel::Low => 0,
            ProdLevel::High => self.n_cells(ProdLevel::Low) + 2,
        }
    }

    /// Per-slot cell widths in coefficient order; endpoint slots get 1 so the
    /// vector doubles as the coefficient-to-mass scaling.
    pub fn slot_widths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.coeff_len());
        for j in ProdLevel::ALL {
            out.push(1.0);
            for k in 0..self.n_cells(j) {
                out.push(self.width(j, k));
            }
            out.push(1.0);
        }
        out
    }

    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        let doc = GridJson {
            y1: self.breakpoints[0].clone(),
            y2: self.breakpoints[1].clone(),
        };
        jsonfmt::write_json_file(path, &doc)
    }

    pub fn read_json_file(path: &Path) -> Result<Grid> {
        let doc: GridJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Grid::new(doc.y1, doc.y2)
    }
}

#[derive(Serialize, Deserialize)]
struct GridJson {
    y1: Vec<f64>,
    y2: Vec<f64>,
}

/// Whether constructors reject or repair an off-by-more-than-tolerance mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MassPolicy {
    Strict,
    Renormalize,
}

/// A probability measure in the discrete class described at module level.
///
/// Immutable after construction; cheap to clone (the grid is shared).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    grid: Arc<Grid>,
    coeffs: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure from a coefficient vector in level-major order.
    pub fn unpack(grid: Arc<Grid>, coeffs: &[f64], policy: MassPolicy) -> Result<DiscreteMeasure> {
        if coeffs.len() != grid.coeff_len() {
            return Err(Error::DimensionMismatch {
                expected: grid.coeff_len(),
                got: coeffs.len(),
            });
        }
        for (slot, &c) in coeffs.iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite coefficient at slot {slot}"
                )));
            }
            if c < 0.0 {
                return Err(Error::NegativeCoefficient { slot, value: c });
            }
        }
        let mut m = DiscreteMeasure {
            grid,
            coeffs: coeffs.to_vec(),
        };
        let mass = m.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            match policy {
                MassPolicy::Strict => {
                    return Err(Error::MassNotNormalized {
                        mass,
                        tol: MASS_TOL,
                    })
                }
                MassPolicy::Renormalize => {
                    if mass <= 0.0 {
                        return Err(Error::MassNotNormalized {
                            mass,
                            tol: MASS_TOL,
                        });
                    }
                    for c in &mut m.coeffs {
                        *c /= mass;
                    }
                }
            }
        }
        Ok(m)
    }

    /// Builds a measure from per-slot masses (endpoint slots are masses
    /// already; interior masses are divided by their cell widths).
    pub fn from_slot_masses(
        grid: Arc<Grid>,
        masses: &[f64],
        policy: MassPolicy,
    ) -> Result<DiscreteMeasure> {
        if masses.len() != grid.coeff_len() {
            return Err(Error::DimensionMismatch {
                expected: grid.coeff_len(),
                got: masses.len(),
            });
        }
        let widths = grid.slot_widths();
        let coeffs: Vec<f64> = masses.iter().zip(&widths).map(|(m, w)| m / w).collect();
        DiscreteMeasure::unpack(grid, &coeffs, policy)
    }

    /// Mass 1 split evenly across levels, spread uniformly over the interior.
    pub fn uniform(grid: Arc<Grid>) -> DiscreteMeasure {
        let span = grid.x_hi() - grid.x_lo();
        let mut coeffs = vec![0.0; grid.coeff_len()];
        for j in ProdLevel::ALL {
            let off = grid.level_offset(j);
            for k in 0..grid.n_cells(j) {
                coeffs[off + 1 + k] = 0.5 / span;
            }
        }
        DiscreteMeasure::unpack(grid, &coeffs, MassPolicy::Strict)
            .expect("uniform measure is normalized by construction")
    }

    /// All mass as a point mass at one endpoint of one level (test fixture).
    pub fn endpoint_mass(grid: Arc<Grid>, j: ProdLevel, upper: bool) -> DiscreteMeasure {
        let mut coeffs = vec![0.0; grid.coeff_len()];
        let off = grid.level_offset(j);
        let slot = if upper { off + 1 + grid.n_cells(j) } else { off };
        coeffs[slot] = 1.0;
        DiscreteMeasure::unpack(grid, &coeffs, MassPolicy::Strict).expect("unit point mass")
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// The coefficient vector (level-major order).
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Owned copy of the coefficient vector.
    pub fn pack(&self) -> Vec<f64> {
        self.coeffs.clone()
    }

    pub fn dirac_lo(&self, j: ProdLevel) -> f64 {
        self.coeffs[self.grid.level_offset(j)]
    }

    pub fn dirac_hi(&self, j: ProdLevel) -> f64 {
        self.coeffs[self.grid.level_offset(j) + 1 + self.grid.n_cells(j)]
    }

    pub fn density(&self, j: ProdLevel, k: usize) -> f64 {
        self.coeffs[self.grid.level_offset(j) + 1 + k]
    }

    pub fn cell_mass(&self, j: ProdLevel, k: usize) -> f64 {
        self.density(j, k) * self.grid.width(j, k)
    }

    /// Normalization sum: endpoint masses plus density-times-width over all
    /// cells of both levels.
    pub fn mass(&self) -> f64 {
        ProdLevel::ALL.iter().map(|&j| self.level_mass(j)).sum()
    }

    pub fn level_mass(&self, j: ProdLevel) -> f64 {
        let mut total = self.dirac_lo(j) + self.dirac_hi(j);
        for k in 0..self.grid.n_cells(j) {
            total += self.cell_mass(j, k);
        }
        total
    }

    /// Per-slot masses in coefficient order.
    pub fn slot_masses(&self) -> Vec<f64> {
        self.coeffs
            .iter()
            .zip(self.grid.slot_widths())
            .map(|(c, w)| c * w)
            .collect()
    }

    /// Aggregate capital and labor `(X, Y)`. The midpoint rule is exact for
    /// piecewise-constant densities. Degenerate values are reported as-is;
    /// factor-price computation rejects them downstream.
    pub fn aggregates(&self, y: [f64; 2]) -> (f64, f64) {
        let mut x_agg = 0.0;
        let mut y_agg = 0.0;
        for j in ProdLevel::ALL {
            let b = self.grid.breakpoints(j);
            let mut level_x = self.dirac_lo(j) * self.grid.x_lo();
            for k in 0..self.grid.n_cells(j) {
                level_x += self.cell_mass(j, k) * 0.5 * (b[k] + b[k + 1]);
            }
            level_x += self.dirac_hi(j) * self.grid.x_hi();
            x_agg += level_x;
            y_agg += y[j.idx()] * self.level_mass(j);
        }
        (x_agg, y_agg)
    }

    /// Convex/affine combination `a*m1 + b*m2` on a shared grid.
    pub fn linear_combination(
        a: f64,
        m1: &DiscreteMeasure,
        b: f64,
        m2: &DiscreteMeasure,
    ) -> Result<DiscreteMeasure> {
        if m1.grid.as_ref() != m2.grid.as_ref() {
            return Err(Error::InvalidGrid(
                "linear combination requires a shared grid".into(),
            ));
        }
        let coeffs: Vec<f64> = m1
            .coeffs
            .iter()
            .zip(&m2.coeffs)
            .map(|(c1, c2)| a * c1 + b * c2)
            .collect();
        DiscreteMeasure::unpack(m1.grid.clone(), &coeffs, MassPolicy::Strict)
    }

    /// Total-variation distance between two measures on the same grid:
    /// half the sum of absolute per-slot mass differences.
    pub fn tv_distance(&self, other: &DiscreteMeasure) -> f64 {
        debug_assert_eq!(self.grid.as_ref(), other.grid.as_ref());
        0.5 * self
            .slot_masses()
            .iter()
            .zip(other.slot_masses())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Projects the measure onto uniform subdivisions with `n_cells` cells
    /// per level.
    pub fn resample_uniform(&self, n_cells: usize) -> Result<DiscreteMeasure> {
        if n_cells == 0 {
            return Err(Error::InvalidGrid("resample needs at least one cell".into()));
        }
        let target = Arc::new(Grid::uniform(self.grid.x_lo(), self.grid.x_hi(), n_cells, n_cells)?);
        self.project_onto(&target)
    }

    /// Re-expresses the measure on another grid over the same interval by
    /// exact overlap integration of the densities; endpoint masses are
    /// carried over unchanged.
    pub fn project_onto(&self, target: &Arc<Grid>) -> Result<DiscreteMeasure> {
        if target.x_lo() != self.grid.x_lo() || target.x_hi() != self.grid.x_hi() {
            return Err(Error::InvalidGrid(
                "projection requires matching interval endpoints".into(),
            ));
        }
        let mut coeffs = vec![0.0; target.coeff_len()];
        for j in ProdLevel::ALL {
            let off = target.level_offset(j);
            coeffs[off] = self.dirac_lo(j);
            coeffs[off + 1 + target.n_cells(j)] = self.dirac_hi(j);
            let src = self.grid.breakpoints(j);
            let dst = target.breakpoints(j);
            for t in 0..target.n_cells(j) {
                let (lo, hi) = (dst[t], dst[t + 1]);
                let mut mass = 0.0;
                for k in 0..self.grid.n_cells(j) {
                    let overlap = (hi.min(src[k + 1]) - lo.max(src[k])).max(0.0);
                    if overlap > 0.0 {
                        mass += overlap * self.density(j, k);
                    }
                }
                coeffs[off + 1 + t] = mass / (hi - lo);
            }
        }
        DiscreteMeasure::unpack(target.clone(), &coeffs, MassPolicy::Strict)
    }

    pub fn to_json(&self) -> MeasureJson {
        MeasureJson {
            grid: GridJson {
                y1: self.grid.breakpoints(ProdLevel::Low).to_vec(),
                y2: self.grid.breakpoints(ProdLevel::High).to_vec(),
            },
            dirac_lo: [self.dirac_lo(ProdLevel::Low), self.dirac_lo(ProdLevel::High)],
            cells_y1: self.level_densities(ProdLevel::Low),
            cells_y2: self.level_densities(ProdLevel::High),
            dirac_hi: [self.dirac_hi(ProdLevel::Low), self.dirac_hi(ProdLevel::High)],
            cell_masses_y1: Some(self.level_masses_vec(ProdLevel::Low)),
            cell_masses_y2: Some(self.level_masses_vec(ProdLevel::High)),
        }
    }

    pub fn from_json(doc: &MeasureJson) -> Result<DiscreteMeasure> {
        let grid = Arc::new(Grid::new(doc.grid.y1.clone(), doc.grid.y2.clone())?);
        let mut coeffs = Vec::with_capacity(grid.coeff_len());
        coeffs.push(doc.dirac_lo[0]);
        coeffs.extend_from_slice(&doc.cells_y1);
        coeffs.push(doc.dirac_hi[0]);
        coeffs.push(doc.dirac_lo[1]);
        coeffs.extend_from_slice(&doc.cells_y2);
        coeffs.push(doc.dirac_hi[1]);
        DiscreteMeasure::unpack(grid, &coeffs, MassPolicy::Strict)
    }

    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        jsonfmt::write_json_file(path, &self.to_json())
    }

    pub fn read_json_file(path: &Path) -> Result<DiscreteMeasure> {
        let doc: MeasureJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        DiscreteMeasure::from_json(&doc)
    }

    fn level_densities(&self, j: ProdLevel) -> Vec<f64> {
        (0..self.grid.n_cells(j)).map(|k| self.density(j, k)).collect()
    }

    fn level_masses_vec(&self, j: ProdLevel) -> Vec<f64> {
        (0..self.grid.n_cells(j)).map(|k| self.cell_mass(j, k)).collect()
    }
}

/// Serialized measure: raw coefficients plus per-cell masses for auditing.
#[derive(Serialize, Deserialize)]
pub struct MeasureJson {
    grid: GridJson,
    dirac_lo: [f64; 2],
    cells_y1: Vec<f64>,
    cells_y2: Vec<f64>,
    dirac_hi: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cell_masses_y1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cell_masses_y2: Option<Vec<f64>>,
}

/// Builds per-level subdivisions whose cells carry equal interior mass under
/// `fine`, pinning the interval endpoints. Quantiles of the piecewise-linear
/// interior CDF are inverted exactly within fine cells, so the resulting cell
/// masses agree to within one fine-cell mass.
pub fn equal_mass_grid(fine: &DiscreteMeasure, k_low: usize, k_high: usize) -> Result<Grid> {
    let split = |j: ProdLevel, k: usize| -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::InvalidGrid("need at least one cell".into()));
        }
        let grid = fine.grid();
        let b = grid.breakpoints(j);
        let n_fine = grid.n_cells(j);
        let positive = (0..n_fine).filter(|&t| fine.cell_mass(j, t) > 0.0).count();
        if k > positive {
            return Err(Error::TooFewMassCells {
                requested: k,
                available: positive,
            });
        }
        let total: f64 = (0..n_fine).map(|t| fine.cell_mass(j, t)).sum();
        if total <= 0.0 {
            return Err(Error::TooFewMassCells {
                requested: k,
                available: 0,
            });
        }
        let mut points = Vec::with_capacity(k + 1);
        points.push(grid.x_lo());
        let mut cum = 0.0;
        let mut cell = 0;
        for t in 1..k {
            let target = total * t as f64 / k as f64;
            while cell < n_fine && cum + fine.cell_mass(j, cell) < target {
                cum += fine.cell_mass(j, cell);
                cell += 1;
            }
            if cell >= n_fine {
                points.push(grid.x_hi());
                continue;
            }
            let mass = fine.cell_mass(j, cell);
            let frac = ((target - cum) / mass).clamp(0.0, 1.0);
            points.push(b[cell] + frac * (b[cell + 1] - b[cell]));
        }
        points.push(grid.x_hi());
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(
                "equal-mass quantiles collapsed; fine measure too coarse".into(),
            ));
        }
        Ok(points)
    };
    Grid::new(split(ProdLevel::Low, k_low)?, split(ProdLevel::High, k_high)?)
}
