//! Run configuration: a flat key=value text format with `#` comments.
//!
//! Every key has a default, so an empty file (or no file) is a full-scale
//! run. The snapshot written into a run directory round-trips through the
//! parser; its semantic fields (everything except the outer-iteration target
//! and paths) form the resume key and the config fingerprint embedded in
//! checkpoints and CSV exports.

use ksmfg::aiyagari::AiyagariOptions;
use ksmfg::economy::EconomyParams;
use ksmfg::jsonfmt::{fmt_f64, fnv1a64};
use ksmfg::neuralnet::NetSpec;
use ksmfg::optim::AdamParams;
use ksmfg::samples::SamplerConfig;
use ksmfg::solver::FixedPointConfig;
use ksmfg::transport::{TransportConfig, TransportMode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // economy
    pub alpha: f64,
    pub delta: f64,
    pub rho: f64,
    pub gamma: f64,
    pub a1: f64,
    pub a2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub y1: f64,
    pub y2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub dt: f64,
    pub grad_floor: f64,
    pub consumption_floor: f64,
    // measure grid
    pub k1: usize,
    pub k2: usize,
    pub equal_mass_fine_cells: usize,
    // transport
    pub transport_points: usize,
    pub transport_mode: String,
    // network
    pub d0: usize,
    pub feature_embed_dim: usize,
    pub rate_embed_dim: usize,
    pub capital_embed_dim: usize,
    pub trunk_dims: Vec<usize>,
    // sampler
    pub n_samples: usize,
    pub dirichlet_fraction: f64,
    pub perturb_fraction: f64,
    pub perturb_weight: f64,
    pub low_x_fraction: f64,
    pub low_x_decades: f64,
    pub holdout_fraction: f64,
    // fixed point
    pub n_outer: usize,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub refresh_fraction: f64,
    pub lr_decay: f64,
    pub report_cadence: usize,
    pub policy_tol: f64,
    pub divergence_mse: f64,
    pub pretrain_steps: usize,
    // baseline equilibrium
    pub fine_nodes: usize,
    pub stretch: f64,
    pub baseline_transport_points: usize,
    pub clearing_tol: f64,
    pub vi_tol: f64,
    pub stationary_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            alpha: 0.5,
            delta: 0.05,
            rho: 0.15,
            gamma: 2.0,
            a1: 0.9,
            a2: 1.1,
            mu1: 0.2,
            mu2: 0.2,
            y1: 0.7,
            y2: 1.4,
            lambda1: 0.05,
            lambda2: 0.1,
            x_lo: 0.0,
            x_hi: 30.0,
            dt: 0.25,
            grad_floor: 1e-10,
            consumption_floor: 0.02,
            k1: 17,
            k2: 10,
            equal_mass_fine_cells: 3000,
            transport_points: 10,
            transport_mode: "expected".into(),
            d0: 1,
            feature_embed_dim: 80,
            rate_embed_dim: 20,
            capital_embed_dim: 150,
            trunk_dims: vec![300, 150, 50, 20],
            n_samples: 20_000,
            dirichlet_fraction: 0.4,
            perturb_fraction: 0.4,
            perturb_weight: 0.5,
            low_x_fraction: 0.2,
            low_x_decades: 3.0,
            holdout_fraction: 0.1,
            n_outer: 30,
            inner_steps: 2000,
            batch_size: 256,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            refresh_fraction: 0.25,
            lr_decay: 1.0,
            report_cadence: 100,
            policy_tol: 1e-4,
            divergence_mse: 1e6,
            pretrain_steps: 800,
            fine_nodes: 600,
            stretch: 8.0,
            baseline_transport_points: 10,
            clearing_tol: 1e-4,
            vi_tol: 1e-9,
            stationary_tol: 1e-10,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {}", lineno + 1, e.0)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn f(value: &str, key: &str) -> Result<f64, ConfigError> {
            value
                .parse()
                .map_err(|_| ConfigError(format!("{key}: expected a number, got {value:?}")))
        }
        fn n(value: &str, key: &str) -> Result<usize, ConfigError> {
            value
                .parse()
                .map_err(|_| ConfigError(format!("{key}: expected an integer, got {value:?}")))
        }
        match key {
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| ConfigError(format!("seed: expected u64, got {value:?}")))?
            }
            "alpha" => self.alpha = f(value, key)?,
            "delta" => self.delta = f(value, key)?,
            "rho" => self.rho = f(value, key)?,
            "gamma" => self.gamma = f(value, key)?,
            "a1" => self.a1 = f(value, key)?,
            "a2" => self.a2 = f(value, key)?,
            "mu1" => self.mu1 = f(value, key)?,
            "mu2" => self.mu2 = f(value, key)?,
            "y1" => self.y1 = f(value, key)?,
            "y2" => self.y2 = f(value, key)?,
            "lambda1" => self.lambda1 = f(value, key)?,
            "lambda2" => self.lambda2 = f(value, key)?,
            "x_lo" => self.x_lo = f(value, key)?,
            "x_hi" => self.x_hi = f(value, key)?,
            "dt" => self.dt = f(value, key)?,
            "grad_floor" => self.grad_floor = f(value, key)?,
            "consumption_floor" => self.consumption_floor = f(value, key)?,
            "k1" => self.k1 = n(value, key)?,
            "k2" => self.k2 = n(value, key)?,
            "equal_mass_fine_cells" => self.equal_mass_fine_cells = n(value, key)?,
            "transport_points" => self.transport_points = n(value, key)?,
            "transport_mode" => match value {
                "expected" | "sampled" => self.transport_mode = value.to_string(),
                _ => {
                    return Err(ConfigError(format!(
                        "transport_mode: expected 'expected' or 'sampled', got {value:?}"
                    )))
                }
            },
            "d0" => self.d0 = n(value, key)?,
            "feature_embed_dim" => self.feature_embed_dim = n(value, key)?,
            "rate_embed_dim" => self.rate_embed_dim = n(value, key)?,
            "capital_embed_dim" => self.capital_embed_dim = n(value, key)?,
            "trunk_dims" => {
                let dims: Result<Vec<usize>, _> =
                    value.split(',').map(|p| p.trim().parse()).collect();
                self.trunk_dims = dims.map_err(|_| {
                    ConfigError(format!("trunk_dims: expected a comma list, got {value:?}"))
                })?;
            }
            "n_samples" => self.n_samples = n(value, key)?,
            "dirichlet_fraction" => self.dirichlet_fraction = f(value, key)?,
            "perturb_fraction" => self.perturb_fraction = f(value, key)?,
            "perturb_weight" => self.perturb_weight = f(value, key)?,
            "low_x_fraction" => self.low_x_fraction = f(value, key)?,
            "low_x_decades" => self.low_x_decades = f(value, key)?,
            "holdout_fraction" => self.holdout_fraction = f(value, key)?,
            "n_outer" => self.n_outer = n(value, key)?,
            "inner_steps" => self.inner_steps = n(value, key)?,
            "batch_size" => self.batch_size = n(value, key)?,
            "lr" => self.lr = f(value, key)?,
            "beta1" => self.beta1 = f(value, key)?,
            "beta2" => self.beta2 = f(value, key)?,
            "adam_eps" => self.adam_eps = f(value, key)?,
            "refresh_fraction" => self.refresh_fraction = f(value, key)?,
            "lr_decay" => self.lr_decay = f(value, key)?,
            "report_cadence" => self.report_cadence = n(value, key)?,
            "policy_tol" => self.policy_tol = f(value, key)?,
            "divergence_mse" => self.divergence_mse = f(value, key)?,
            "pretrain_steps" => self.pretrain_steps = n(value, key)?,
            "fine_nodes" => self.fine_nodes = n(value, key)?,
            "stretch" => self.stretch = f(value, key)?,
            "baseline_transport_points" => self.baseline_transport_points = n(value, key)?,
            "clearing_tol" => self.clearing_tol = f(value, key)?,
            "vi_tol" => self.vi_tol = f(value, key)?,
            "stationary_tol" => self.stationary_tol = f(value, key)?,
            _ => return Err(ConfigError(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// The full snapshot written into a run directory; parses back to the
    /// same configuration.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut push = |line: &str| {
            s.push_str(line);
            s.push('\n');
        };
        push("# Resolved run configuration");
        push(&format!("seed = {}", self.seed));
        push("");
        push("# Economy");
        push(&format!("alpha = {}                # capital share (α)", fmt_f64(self.alpha)));
        push(&format!("delta = {}                # depreciation rate (δ)", fmt_f64(self.delta)));
        push(&format!("rho = {}                  # discount rate (ρ)", fmt_f64(self.rho)));
        push(&format!("gamma = {}                # relative risk aversion (γ)", fmt_f64(self.gamma)));
        push(&format!("a1 = {}                   # slow technology level (A₁)", fmt_f64(self.a1)));
        push(&format!("a2 = {}                   # fast technology level (A₂)", fmt_f64(self.a2)));
        push(&format!("mu1 = {}                  # switching intensity out of slow (μ₁)", fmt_f64(self.mu1)));
        push(&format!("mu2 = {}                  # switching intensity out of fast (μ₂)", fmt_f64(self.mu2)));
        push(&format!("y1 = {}                   # low productivity (y₁)", fmt_f64(self.y1)));
        push(&format!("y2 = {}                   # high productivity (y₂)", fmt_f64(self.y2)));
        push(&format!("lambda1 = {}              # switching intensity out of low (λ₁)", fmt_f64(self.lambda1)));
        push(&format!("lambda2 = {}              # switching intensity out of high (λ₂)", fmt_f64(self.lambda2)));
        push(&format!("x_lo = {}                 # borrowing limit (x̲)", fmt_f64(self.x_lo)));
        push(&format!("x_hi = {}                 # wealth truncation (x̄)", fmt_f64(self.x_hi)));
        push(&format!("dt = {}                   # time step in years (Δt)", fmt_f64(self.dt)));
        push(&format!("grad_floor = {}           # floor on ∂ₓv before inverting (ε_p)", fmt_f64(self.grad_floor)));
        push(&format!("consumption_floor = {}    # training stabilizer; 0 disables", fmt_f64(self.consumption_floor)));
        push("");
        push("# Measure grid (interior cells per productivity level; d = k1 + k2 + 4)");
        push(&format!("k1 = {}", self.k1));
        push(&format!("k2 = {}", self.k2));
        push(&format!("equal_mass_fine_cells = {}", self.equal_mass_fine_cells));
        push("");
        push("# Transport (N interior points per cell)");
        push(&format!("transport_points = {}", self.transport_points));
        push(&format!("transport_mode = {}", self.transport_mode));
        push("");
        push("# Value network (d₀ adaptive features; sublayer and trunk widths)");
        push(&format!("d0 = {}", self.d0));
        push(&format!("feature_embed_dim = {}", self.feature_embed_dim));
        push(&format!("rate_embed_dim = {}", self.rate_embed_dim));
        push(&format!("capital_embed_dim = {}", self.capital_embed_dim));
        push(&format!(
            "trunk_dims = {}",
            self.trunk_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        push("");
        push("# Sample set");
        push(&format!("n_samples = {}", self.n_samples));
        push(&format!("dirichlet_fraction = {}", fmt_f64(self.dirichlet_fraction)));
        push(&format!("perturb_fraction = {}", fmt_f64(self.perturb_fraction)));
        push(&format!("perturb_weight = {}", fmt_f64(self.perturb_weight)));
        push(&format!("low_x_fraction = {}", fmt_f64(self.low_x_fraction)));
        push(&format!("low_x_decades = {}", fmt_f64(self.low_x_decades)));
        push(&format!("holdout_fraction = {}", fmt_f64(self.holdout_fraction)));
        push("");
        push("# Fixed point");
        push(&format!("n_outer = {}", self.n_outer));
        push(&format!("inner_steps = {}", self.inner_steps));
        push(&format!("batch_size = {}", self.batch_size));
        push(&format!("lr = {}", fmt_f64(self.lr)));
        push(&format!("beta1 = {}", fmt_f64(self.beta1)));
        push(&format!("beta2 = {}", fmt_f64(self.beta2)));
        push(&format!("adam_eps = {}", fmt_f64(self.adam_eps)));
        push(&format!("refresh_fraction = {}", fmt_f64(self.refresh_fraction)));
        push(&format!("lr_decay = {}", fmt_f64(self.lr_decay)));
        push(&format!("report_cadence = {}", self.report_cadence));
        push(&format!("policy_tol = {}", fmt_f64(self.policy_tol)));
        push(&format!("divergence_mse = {}", fmt_f64(self.divergence_mse)));
        push(&format!("pretrain_steps = {}", self.pretrain_steps));
        push("");
        push("# Baseline stationary equilibrium");
        push(&format!("fine_nodes = {}", self.fine_nodes));
        push(&format!("stretch = {}", fmt_f64(self.stretch)));
        push(&format!("baseline_transport_points = {}", self.baseline_transport_points));
        push(&format!("clearing_tol = {}", fmt_f64(self.clearing_tol)));
        push(&format!("vi_tol = {}", fmt_f64(self.vi_tol)));
        push(&format!("stationary_tol = {}", fmt_f64(self.stationary_tol)));
        s
    }

    /// Canonical string of all semantic fields. Excludes the outer-iteration
    /// target so a finished run can be extended in place, and contains no
    /// paths, so runs in different directories compare equal.
    pub fn resume_key(&self) -> String {
        let mut cfg = self.clone();
        cfg.n_outer = 0;
        let mut s = String::new();
        for line in cfg.snapshot().lines() {
            let stripped = line.split('#').next().unwrap_or("").trim();
            if !stripped.is_empty() {
                s.push_str(stripped);
                s.push('\n');
            }
        }
        s
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.resume_key().as_bytes())
    }

    pub fn economy_params(&self) -> EconomyParams {
        EconomyParams {
            alpha: self.alpha,
            delta: self.delta,
            rho: self.rho,
            gamma: self.gamma,
            a: [self.a1, self.a2],
            mu: [self.mu1, self.mu2],
            y: [self.y1, self.y2],
            lambda: [self.lambda1, self.lambda2],
            x_lo: self.x_lo,
            x_hi: self.x_hi,
            dt: self.dt,
            grad_floor: self.grad_floor,
            consumption_floor: self.consumption_floor,
        }
    }

    pub fn net_spec(&self, measure_dim: usize) -> NetSpec {
        NetSpec {
            measure_dim,
            n_features: self.d0,
            feature_embed_dim: self.feature_embed_dim,
            rate_embed_dim: self.rate_embed_dim,
            capital_embed_dim: self.capital_embed_dim,
            trunk_dims: self.trunk_dims.clone(),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_samples: self.n_samples,
            dirichlet_fraction: self.dirichlet_fraction,
            perturb_fraction: self.perturb_fraction,
            perturb_weight: self.perturb_weight,
            low_x_fraction: self.low_x_fraction,
            low_x_decades: self.low_x_decades,
            holdout_fraction: self.holdout_fraction,
        }
    }

    pub fn fixed_point_config(&self) -> FixedPointConfig {
        FixedPointConfig {
            n_outer: self.n_outer,
            inner_steps: self.inner_steps,
            batch_size: self.batch_size,
            adam: AdamParams {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            refresh_fraction: self.refresh_fraction,
            lr_decay: self.lr_decay,
            report_cadence: self.report_cadence,
            policy_tol: self.policy_tol,
            divergence_mse: self.divergence_mse,
            transport_points: self.transport_points,
            pretrain_steps: self.pretrain_steps,
            master_seed: self.seed,
        }
    }

    pub fn aiyagari_options(&self) -> AiyagariOptions {
        AiyagariOptions {
            fine_nodes: self.fine_nodes,
            stretch: self.stretch,
            transport_points: self.baseline_transport_points,
            clearing_tol: self.clearing_tol,
            vi_tol: self.vi_tol,
            stationary_tol: self.stationary_tol,
            ..AiyagariOptions::default()
        }
    }

    pub fn transport_config(&self) -> TransportConfig {
        TransportConfig {
            points_per_cell: self.transport_points,
            mode: if self.transport_mode == "sampled" {
                TransportMode::Sampled
            } else {
                TransportMode::ExpectedSplit
            },
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.k1 = 4;
        cfg.trunk_dims = vec![64, 32, 16];
        cfg.lr = 2.5e-3;
        let back = RunConfig::parse(&cfg.snapshot()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::parse("frobnicate = 1").is_err());
    }

    #[test]
    fn bad_value_is_rejected() {
        assert!(RunConfig::parse("alpha = banana").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("\n# hello\nalpha = 0.4 # inline\n\n").unwrap();
        assert_eq!(cfg.alpha, 0.4);
    }

    #[test]
    fn resume_key_ignores_the_iteration_target() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.n_outer = 99;
        assert_eq!(a.resume_key(), b.resume_key());
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = RunConfig::default();
        c.seed = 1;
        assert_ne!(a.config_hash(), c.config_hash());
    }
}
