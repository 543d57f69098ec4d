//! Closed-form model primitives: production, factor prices, CRRA utility, the
//! consumption Hamiltonian, and the borrowing-constrained optimal consumption
//! and savings rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;

/// Aggregate productivity state: `Slow` carries the lower technology level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggState {
    Slow,
    Fast,
}

impl AggState {
    pub const ALL: [AggState; 2] = [AggState::Slow, AggState::Fast];

    pub fn idx(self) -> usize {
        match self {
            AggState::Slow => 0,
            AggState::Fast => 1,
        }
    }

    pub fn one_based(self) -> usize {
        self.idx() + 1
    }

    /// The other aggregate state.
    pub fn flip(self) -> AggState {
        match self {
            AggState::Slow => AggState::Fast,
            AggState::Fast => AggState::Slow,
        }
    }
}

/// Individual productivity level: `Low` carries the smaller labor endowment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProdLevel {
    Low,
    High,
}

impl ProdLevel {
    pub const ALL: [ProdLevel; 2] = [ProdLevel::Low, ProdLevel::High];

    pub fn idx(self) -> usize {
        match self {
            ProdLevel::Low => 0,
            ProdLevel::High => 1,
        }
    }

    pub fn one_based(self) -> usize {
        self.idx() + 1
    }

    pub fn flip(self) -> ProdLevel {
        match self {
            ProdLevel::Low => ProdLevel::High,
            ProdLevel::High => ProdLevel::Low,
        }
    }

    pub fn from_one_based(j: usize) -> Result<ProdLevel> {
        match j {
            1 => Ok(ProdLevel::Low),
            2 => Ok(ProdLevel::High),
            _ => Err(Error::InvalidParameter(format!("productivity index {j}"))),
        }
    }
}

/// Factor prices implied by a distribution and an aggregate state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    pub r: f64,
    pub w: f64,
}

/// Consumption and savings chosen by the constrained optimal rule, together
/// with whether the borrowing constraint was binding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsumptionSavings {
    pub consumption: f64,
    pub savings: f64,
    pub constrained: bool,
}

/// All scalar model constants.
///
/// Rates are per year; `dt` is the time step in years. `grad_floor` is the
/// lower bound applied to the value gradient before inverting marginal
/// utility, so that a non-positive slope falls back to consuming the whole
/// budget instead of producing an infinite Hamiltonian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomyParams {
    /// Capital share in production.
    pub alpha: f64,
    /// Capital depreciation rate.
    pub delta: f64,
    /// Discount rate.
    pub rho: f64,
    /// Relative risk aversion (> 0, != 1).
    pub gamma: f64,
    /// Aggregate productivity levels, slow then fast.
    pub a: [f64; 2],
    /// Aggregate switching intensities out of slow/fast.
    pub mu: [f64; 2],
    /// Individual productivity levels, low then high.
    pub y: [f64; 2],
    /// Individual switching intensities out of low/high.
    pub lambda: [f64; 2],
    /// Wealth bounds.
    pub x_lo: f64,
    pub x_hi: f64,
    /// Time step in years.
    pub dt: f64,
    /// Floor on the value gradient used by the consumption rule.
    pub grad_floor: f64,
    /// Optional floor on unconstrained consumption (0 disables it). A tiny
    /// consumption has unboundedly negative utility, so a slope spike in an
    /// approximate value function would otherwise feed outlier targets back
    /// into training; the floor bounds that channel without touching the
    /// budget-constrained branch.
    #[serde(default)]
    pub consumption_floor: f64,
}

impl Default for EconomyParams {
    fn default() -> Self {
        EconomyParams {
            alpha: 0.5,
            delta: 0.05,
            rho: 0.15,
            gamma: 2.0,
            a: [0.9, 1.1],
            mu: [0.2, 0.2],
            y: [0.7, 1.4],
            lambda: [0.05, 0.1],
            x_lo: 0.0,
            x_hi: 30.0,
            dt: 0.25,
            grad_floor: 1e-10,
            consumption_floor: 0.0,
        }
    }
}

impl EconomyParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha={} not in (0,1)", self.alpha));
        }
        if self.gamma <= 0.0 || self.gamma == 1.0 {
            return bad(format!("gamma={} must be positive and != 1", self.gamma));
        }
        if self.a[0] >= self.a[1] {
            return bad(format!("need a1 < a2, got {:?}", self.a));
        }
        if self.y[0] >= self.y[1] {
            return bad(format!("need y1 < y2, got {:?}", self.y));
        }
        if self.lambda.iter().any(|&l| l < 0.0) || self.mu.iter().any(|&m| m < 0.0) {
            return bad("switching intensities must be nonnegative".into());
        }
        if self.lambda.iter().any(|&l| l * self.dt >= 1.0) {
            return bad(format!("lambda*dt must be < 1, got {:?}", self.lambda));
        }
        if self.mu.iter().any(|&m| m * self.dt >= 1.0) {
            return bad(format!("mu*dt must be < 1, got {:?}", self.mu));
        }
        if !(self.x_lo < self.x_hi) {
            return bad(format!("need x_lo < x_hi, got [{}, {}]", self.x_lo, self.x_hi));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt={} must be positive", self.dt));
        }
        if !(self.grad_floor > 0.0) {
            return bad(format!("grad_floor={} must be positive", self.grad_floor));
        }
        if self.consumption_floor < 0.0 {
            return bad(format!(
                "consumption_floor={} must be nonnegative",
                self.consumption_floor
            ));
        }
        if !(self.rho > 0.0) {
            return bad(format!("rho={} must be positive", self.rho));
        }
        if self.delta < 0.0 {
            return bad(format!("delta={} must be nonnegative", self.delta));
        }
        Ok(())
    }

    /// Cobb-Douglas output `A_i X^alpha Y^(1-alpha)`.
    pub fn production(&self, x_agg: f64, y_agg: f64, i: AggState) -> Result<f64> {
        if x_agg <= 0.0 || y_agg <= 0.0 {
            return Err(Error::NonpositiveProductionInput { x: x_agg, y: y_agg });
        }
        Ok(self.a[i.idx()] * x_agg.powf(self.alpha) * y_agg.powf(1.0 - self.alpha))
    }

    /// Marginal-product factor prices for technology level `a` and aggregates
    /// `(X, Y)`: `r = alpha a (Y/X)^(1-alpha) - delta`, `w = (1-alpha) a (X/Y)^alpha`.
    pub fn prices_from_aggregates(&self, x_agg: f64, y_agg: f64, a: f64) -> Result<Prices> {
        if x_agg <= 0.0 || y_agg <= 0.0 {
            return Err(Error::DegenerateAggregates { x: x_agg, y: y_agg });
        }
        let ratio = y_agg / x_agg;
        let r = self.alpha * a * ratio.powf(1.0 - self.alpha) - self.delta;
        let w = (1.0 - self.alpha) * a * ratio.powf(-self.alpha);
        Ok(Prices { r, w })
    }

    /// Factor prices implied by a distribution in aggregate state `i`.
    pub fn factor_prices(&self, m: &DiscreteMeasure, i: AggState) -> Result<Prices> {
        let (x_agg, y_agg) = m.aggregates(self.y);
        self.prices_from_aggregates(x_agg, y_agg, self.a[i.idx()])
    }

    /// Wage consistent with interest rate `r` under technology level `a`,
    /// obtained by inverting the marginal-product condition for the
    /// capital/labor ratio.
    pub fn wage_from_rate(&self, r: f64, a: f64) -> Result<f64> {
        let gross = r + self.delta;
        if gross <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "r + delta = {gross} must be positive to invert the firm condition"
            )));
        }
        // r + delta = alpha a (Y/X)^(1-alpha)  =>  X/Y = (alpha a / (r+delta))^(1/(1-alpha))
        let cap_ratio = (self.alpha * a / gross).powf(1.0 / (1.0 - self.alpha));
        Ok((1.0 - self.alpha) * a * cap_ratio.powf(self.alpha))
    }

    /// CRRA utility `c^(1-gamma)/(1-gamma)`.
    pub fn utility(&self, c: f64) -> Result<f64> {
        if c <= 0.0 {
            return Err(Error::NonpositiveConsumption(c));
        }
        Ok(c.powf(1.0 - self.gamma) / (1.0 - self.gamma))
    }

    /// Marginal utility `c^(-gamma)`.
    pub fn marginal_utility(&self, c: f64) -> Result<f64> {
        if c <= 0.0 {
            return Err(Error::NonpositiveConsumption(c));
        }
        Ok(c.powf(-self.gamma))
    }

    /// Convex conjugate of utility in the savings direction:
    /// `H(p) = max_{c>=0} (-p c + u(c)) = gamma/(1-gamma) p^(1-1/gamma)`.
    pub fn hamiltonian(&self, p: f64) -> Result<f64> {
        if p <= 0.0 {
            return Err(Error::InfiniteHamiltonian(p));
        }
        Ok(self.gamma / (1.0 - self.gamma) * p.powf(1.0 - 1.0 / self.gamma))
    }

    /// `H'(p) = -p^(-1/gamma)`; the maximizing consumption is `-H'(p)`.
    pub fn hamiltonian_prime(&self, p: f64) -> Result<f64> {
        if p <= 0.0 {
            return Err(Error::InfiniteHamiltonian(p));
        }
        Ok(-p.powf(-1.0 / self.gamma))
    }

    /// Constrained optimal consumption and the implied savings at wealth `x`
    /// for productivity level `j`, given the value slope `dvdx` and prices.
    ///
    /// `c* = min( max(dvdx, grad_floor)^(-1/gamma), (x - x_lo)/dt + w y_j + r x )`.
    /// When the budget branch binds, savings are computed as `-(x - x_lo)/dt`
    /// so that one transport step lands exactly on the borrowing limit.
    pub fn optimal_consumption(
        &self,
        x: f64,
        dvdx: f64,
        prices: &Prices,
        j: ProdLevel,
    ) -> Result<ConsumptionSavings> {
        let income = prices.w * self.y[j.idx()] + prices.r * x;
        let headroom = (x - self.x_lo) / self.dt;
        let budget = headroom + income;
        if budget <= 0.0 {
            return Err(Error::InfeasibleState { x, budget });
        }
        let p = dvdx.max(self.grad_floor);
        let unconstrained = p.powf(-1.0 / self.gamma).max(self.consumption_floor);
        if unconstrained < budget {
            Ok(ConsumptionSavings {
                consumption: unconstrained,
                savings: income - unconstrained,
                constrained: false,
            })
        } else {
            Ok(ConsumptionSavings {
                consumption: budget,
                savings: -headroom,
                constrained: true,
            })
        }
    }

    /// Convenience wrapper computing prices from a distribution first.
    pub fn consumption_savings(
        &self,
        x: f64,
        dvdx: f64,
        m: &DiscreteMeasure,
        i: AggState,
        j: ProdLevel,
    ) -> Result<ConsumptionSavings> {
        let prices = self.factor_prices(m, i)?;
        self.optimal_consumption(x, dvdx, &prices, j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn p() -> EconomyParams {
        EconomyParams::default()
    }

    #[test]
    fn defaults_validate() {
        p().validate().unwrap();
    }

    #[test]
    fn production_unit_inputs() {
        assert!((p().production(1.0, 1.0, AggState::Fast).unwrap() - 1.1).abs() < 1e-15);
    }

    #[test]
    fn production_hand_value() {
        // 1.1 * 4^0.5 * 1^0.5 = 2.2
        let out = p().production(4.0, 1.0, AggState::Fast).unwrap();
        assert!((out - 2.2).abs() < 1e-14);
    }

    #[test]
    fn production_rejects_nonpositive() {
        assert!(matches!(
            p().production(0.0, 1.0, AggState::Slow),
            Err(Error::NonpositiveProductionInput { .. })
        ));
    }

    #[test]
    fn prices_equal_aggregates() {
        // X = Y makes the ratio 1, so r = alpha*A - delta and w = (1-alpha)*A.
        let pr = p().prices_from_aggregates(3.7, 3.7, 0.9).unwrap();
        assert!((pr.r - 0.40).abs() < 1e-14);
        assert!((pr.w - 0.45).abs() < 1e-14);
    }

    #[test]
    fn prices_hand_value() {
        // X=15, Y=1.05, slow economy: r = 0.45*sqrt(0.07) - 0.05, w = 0.45*sqrt(15/1.05)
        let pr = p().prices_from_aggregates(15.0, 1.05, 0.9).unwrap();
        let r_expect = 0.45 * (1.05f64 / 15.0).sqrt() - 0.05;
        let w_expect = 0.45 * (15.0f64 / 1.05).sqrt();
        assert!((pr.r - r_expect).abs() < 1e-15);
        assert!((pr.w - w_expect).abs() < 1e-15);
        assert!((pr.r - 0.069059).abs() < 1e-6);
        assert!((pr.w - 1.700840).abs() < 1e-6);
    }

    #[test]
    fn rate_is_scale_invariant() {
        let pr = p().prices_from_aggregates(4.0, 2.0, 1.1).unwrap();
        for c in [0.5, 2.0, 17.0] {
            let scaled = p().prices_from_aggregates(c * 4.0, c * 2.0, 1.1).unwrap();
            assert!((pr.r - scaled.r).abs() < 1e-12);
        }
    }

    #[test]
    fn prices_monotone_in_capital() {
        let params = p();
        let mut last_r = f64::INFINITY;
        let mut last_w = 0.0;
        for x_agg in [1.0, 2.0, 5.0, 10.0, 20.0] {
            let pr = params.prices_from_aggregates(x_agg, 1.0, 0.9).unwrap();
            assert!(pr.r < last_r);
            assert!(pr.w > last_w);
            last_r = pr.r;
            last_w = pr.w;
        }
    }

    #[test]
    fn wage_from_rate_inverts_prices() {
        let params = p();
        for (x_agg, y_agg, a) in [(15.0, 1.05, 0.9), (4.0, 1.0, 1.1), (25.0, 0.93, 1.0)] {
            let pr = params.prices_from_aggregates(x_agg, y_agg, a).unwrap();
            let w = params.wage_from_rate(pr.r, a).unwrap();
            assert!((w - pr.w).abs() < 1e-10 * pr.w.abs().max(1.0));
        }
    }

    #[test]
    fn utility_hand_values() {
        let params = p(); // gamma = 2
        assert!((params.utility(1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!((params.marginal_utility(1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((params.utility(0.5).unwrap() + 2.0).abs() < 1e-14);
        assert!((params.marginal_utility(0.5).unwrap() - 4.0).abs() < 1e-14);
        assert!(matches!(
            params.utility(0.0),
            Err(Error::NonpositiveConsumption(_))
        ));
    }

    #[test]
    fn hamiltonian_hand_values() {
        let params = p(); // gamma = 2: H(p) = -2 sqrt(p), H'(p) = -1/sqrt(p)
        assert!((params.hamiltonian(1.0).unwrap() + 2.0).abs() < 1e-14);
        assert!((params.hamiltonian_prime(1.0).unwrap() + 1.0).abs() < 1e-14);
        assert!((params.hamiltonian(4.0).unwrap() + 4.0).abs() < 1e-14);
        assert!((params.hamiltonian_prime(4.0).unwrap() + 0.5).abs() < 1e-14);
        assert!(matches!(
            params.hamiltonian(0.0),
            Err(Error::InfiniteHamiltonian(_))
        ));
    }

    #[test]
    fn hamiltonian_is_the_maximum() {
        // -p c + u(c) <= H(p) with equality at c = p^(-1/gamma).
        let params = p();
        let h1 = params.hamiltonian(1.0).unwrap();
        for c in [0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
            let val = -c + params.utility(c).unwrap();
            assert!(val <= h1 + 1e-12);
        }
        assert!((h1 - (-1.0 + params.utility(1.0).unwrap())).abs() < 1e-14);
    }

    #[test]
    fn legendre_consistency_random() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for gamma in [0.5, 2.0, 3.0] {
            let params = EconomyParams {
                gamma,
                ..EconomyParams::default()
            };
            for _ in 0..1000 {
                let p_val = 10f64.powf(rng.random_range(-3.0..3.0));
                let h = params.hamiltonian(p_val).unwrap();
                let c_star = p_val.powf(-1.0 / gamma);
                let at_star = -p_val * c_star + params.utility(c_star).unwrap();
                assert!(
                    (h - at_star).abs() <= 1e-10 * h.abs().max(1.0),
                    "gamma={gamma} p={p_val}: H={h} vs {at_star}"
                );
                for _ in 0..100 {
                    let c = 10f64.powf(rng.random_range(-3.0..3.0));
                    let val = -p_val * c + params.utility(c).unwrap();
                    assert!(val <= h + 1e-10 * h.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn hamiltonian_prime_matches_finite_differences() {
        let params = p();
        let mut p_val = 0.01;
        while p_val <= 100.0 {
            let h = 1e-6 * p_val;
            let fd = (params.hamiltonian(p_val + h).unwrap()
                - params.hamiltonian(p_val - h).unwrap())
                / (2.0 * h);
            let an = params.hamiltonian_prime(p_val).unwrap();
            assert!(
                (fd - an).abs() <= 1e-6 * an.abs(),
                "p={p_val}: fd={fd} analytic={an}"
            );
            p_val *= 1.37;
        }
    }

    #[test]
    fn consumption_binding_constraint() {
        // At the borrowing limit with a moderate slope the budget binds.
        let params = p();
        let prices = Prices { r: 0.40, w: 0.45 };
        let cs = params
            .optimal_consumption(0.0, 4.0, &prices, ProdLevel::Low)
            .unwrap();
        assert!((cs.consumption - 0.315).abs() < 1e-15);
        assert_eq!(cs.savings, 0.0);
        assert!(cs.constrained);
    }

    #[test]
    fn consumption_interior() {
        let params = p();
        let prices = Prices { r: 0.40, w: 0.45 };
        let cs = params
            .optimal_consumption(0.0, 100.0, &prices, ProdLevel::Low)
            .unwrap();
        assert!((cs.consumption - 0.1).abs() < 1e-15);
        assert!((cs.savings - 0.215).abs() < 1e-15);
        assert!(!cs.constrained);
    }

    #[test]
    fn floor_clamps_to_budget_branch() {
        let params = p();
        let prices = Prices { r: 0.40, w: 0.45 };
        let x = 2.0;
        let cs = params
            .optimal_consumption(x, -3.0, &prices, ProdLevel::Low)
            .unwrap();
        assert!(cs.constrained);
        assert!((cs.savings + (x - params.x_lo) / params.dt).abs() < 1e-15);
        // One step lands on the borrowing limit exactly.
        assert_eq!(x + params.dt * cs.savings, params.x_lo);
    }

    #[test]
    fn state_constraint_never_violated() {
        let params = p();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20_000 {
            let x = rng.random_range(params.x_lo..params.x_hi);
            let dvdx = rng.random_range(-5.0..50.0);
            let prices = Prices {
                r: rng.random_range(0.01..0.6),
                w: rng.random_range(0.2..3.0),
            };
            let j = if rng.random::<bool>() {
                ProdLevel::High
            } else {
                ProdLevel::Low
            };
            let cs = params.optimal_consumption(x, dvdx, &prices, j).unwrap();
            assert!(x + params.dt * cs.savings >= params.x_lo - 1e-12);
            assert!(cs.consumption > 0.0);
        }
    }
}
