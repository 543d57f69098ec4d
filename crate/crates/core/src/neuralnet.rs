//! From-scratch structured feedforward network.
//!
//! One network maps `(x, M)` to a scalar value. The measure coefficients `M`
//! first pass through `n_features` scalar softplus units (the adaptive
//! features); the features, the interest rate, and the wealth `x` are then
//! embedded by separate softplus sublayers, concatenated, and processed by a
//! fully connected softplus trunk with a linear head. The interest rate is
//! not learned from `M`: callers pass the rate computed from the measure, so
//! it complements the adaptive features as a known statistic.
//!
//! Parameters live in one flat `f64` buffer in declaration order (feature
//! map, feature embed, rate embed, capital embed, trunk layers, head), which
//! keeps gradients, the optimizer, and checkpoint serialization trivial.
//! Backpropagation is exact both for parameters and for the wealth input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::Grid;

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Measure coefficient dimension `d`.
    pub measure_dim: usize,
    /// Number of adaptive features (may be 0, in which case the network sees
    /// the measure only through the interest rate).
    pub n_features: usize,
    pub feature_embed_dim: usize,
    pub rate_embed_dim: usize,
    pub capital_embed_dim: usize,
    pub trunk_dims: Vec<usize>,
}

impl NetSpec {
    /// Default sublayer and trunk sizes for a given measure dimension.
    pub fn with_defaults(measure_dim: usize, n_features: usize) -> NetSpec {
        NetSpec {
            measure_dim,
            n_features,
            feature_embed_dim: 80,
            rate_embed_dim: 20,
            capital_embed_dim: 150,
            trunk_dims: vec![300, 150, 50, 20],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.measure_dim == 0 {
            return bad("measure_dim must be >= 1".into());
        }
        if self.n_features > 0 && self.feature_embed_dim == 0 {
            return bad("feature_embed_dim must be >= 1 when features are present".into());
        }
        if self.rate_embed_dim == 0 || self.capital_embed_dim == 0 {
            return bad("embed dims must be >= 1".into());
        }
        if self.trunk_dims.is_empty() || self.trunk_dims.iter().any(|&d| d == 0) {
            return bad(format!("invalid trunk dims {:?}", self.trunk_dims));
        }
        Ok(())
    }

    /// Width of the concatenated first-layer output.
    pub fn concat_dim(&self) -> usize {
        let feat = if self.n_features > 0 {
            self.feature_embed_dim
        } else {
            0
        };
        feat + self.rate_embed_dim + self.capital_embed_dim
    }
}

/// Input normalization applied before the affine maps: `x` is multiplied by
/// `x_scale` and each measure coefficient by its slot's width, so interior
/// densities enter as cell masses. Stored in checkpoints so features are
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub x_scale: f64,
    pub m_scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(measure_dim: usize) -> InputScaling {
        InputScaling {
            x_scale: 1.0,
            m_scale: vec![1.0; measure_dim],
        }
    }

    pub fn for_grid(grid: &Grid) -> InputScaling {
        let hi = grid.x_hi().abs();
        InputScaling {
            x_scale: if hi > 0.0 { 1.0 / hi } else { 1.0 },
            m_scale: grid.slot_widths(),
        }
    }
}

/// Numerically safe `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Derivative of softplus.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    w_off: usize,
    b_off: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    feature: Option<Block>,
    feature_embed: Option<Block>,
    rate: Block,
    capital: Block,
    trunk: Vec<Block>,
    head: Block,
    total: usize,
}

impl Layout {
    fn new(spec: &NetSpec) -> Layout {
        let mut off = 0;
        let mut block = |rows: usize, cols: usize| {
            let b = Block {
                w_off: off,
                b_off: off + rows * cols,
                rows,
                cols,
            };
            off += rows * cols + rows;
            b
        };
        let (feature, feature_embed) = if spec.n_features > 0 {
            (
                Some(block(spec.n_features, spec.measure_dim)),
                Some(block(spec.feature_embed_dim, spec.n_features)),
            )
        } else {
            (None, None)
        };
        let rate = block(spec.rate_embed_dim, 1);
        let capital = block(spec.capital_embed_dim, 1);
        let mut trunk = Vec::with_capacity(spec.trunk_dims.len());
        let mut prev = spec.concat_dim();
        for &dim in &spec.trunk_dims {
            trunk.push(block(dim, prev));
            prev = dim;
        }
        let head = block(1, prev);
        Layout {
            feature,
            feature_embed,
            rate,
            capital,
            trunk,
            head,
            total: off,
        }
    }
}

/// Value of a forward pass together with the adaptive features.
#[derive(Debug, Clone)]
pub struct Forward {
    pub value: f64,
    pub features: Vec<f64>,
}

/// A training point; the measure slice is borrowed from the sample store.
#[derive(Debug, Clone, Copy)]
pub struct TrainPoint<'a> {
    pub x: f64,
    pub m: &'a [f64],
    pub r: f64,
    pub target: f64,
}

/// The structured value network.
#[derive(Debug, Clone)]
pub struct ValueNetwork {
    spec: NetSpec,
    scaling: InputScaling,
    layout: Layout,
    params: Vec<f64>,
}

struct Trace {
    m_scaled: Vec<f64>,
    x_scaled: f64,
    r: f64,
    feature_pre: Vec<f64>,
    feature_out: Vec<f64>,
    femb_pre: Vec<f64>,
    rate_pre: Vec<f64>,
    cap_pre: Vec<f64>,
    concat: Vec<f64>,
    trunk_pre: Vec<Vec<f64>>,
    trunk_out: Vec<Vec<f64>>,
    value: f64,
}

impl ValueNetwork {
    /// Random initialization: zero biases and Gaussian weights with standard
    /// deviation `1/sqrt(fan_in)` per affine map, drawn from a ChaCha stream.
    pub fn init(spec: NetSpec, scaling: InputScaling, seed: u64) -> Result<ValueNetwork> {
        let mut net = ValueNetwork::zeros(spec, scaling)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for b in net.blocks_in_order() {
            let std = 1.0 / (b.cols as f64).sqrt();
            for i in 0..b.rows * b.cols {
                net.params[b.w_off + i] = std * normal(&mut rng);
            }
        }
        Ok(net)
    }

    /// All-zero parameters (constant zero output).
    pub fn zeros(spec: NetSpec, scaling: InputScaling) -> Result<ValueNetwork> {
        spec.validate()?;
        if scaling.m_scale.len() != spec.measure_dim {
            return Err(Error::DimensionMismatch {
                expected: spec.measure_dim,
                got: scaling.m_scale.len(),
            });
        }
        let layout = Layout::new(&spec);
        let params = vec![0.0; layout.total];
        Ok(ValueNetwork {
            spec,
            scaling,
            layout,
            params,
        })
    }

    fn blocks_in_order(&self) -> Vec<Block> {
        let mut out = Vec::new();
        if let Some(b) = self.layout.feature {
            out.push(b);
        }
        if let Some(b) = self.layout.feature_embed {
            out.push(b);
        }
        out.push(self.layout.rate);
        out.push(self.layout.capital);
        out.extend(self.layout.trunk.iter().copied());
        out.push(self.layout.head);
        out
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn affine(&self, b: Block, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), b.cols);
        out.clear();
        for o in 0..b.rows {
            let row = &self.params[b.w_off + o * b.cols..b.w_off + (o + 1) * b.cols];
            let mut acc = self.params[b.b_off + o];
            for (w, v) in row.iter().zip(input) {
                acc += w * v;
            }
            out.push(acc);
        }
    }

    /// The adaptive features of a measure coefficient vector.
    pub fn features(&self, m: &[f64]) -> Result<Vec<f64>> {
        if m.len() != self.spec.measure_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.measure_dim,
                got: m.len(),
            });
        }
        let Some(fb) = self.layout.feature else {
            return Ok(Vec::new());
        };
        let m_scaled: Vec<f64> = m
            .iter()
            .zip(&self.scaling.m_scale)
            .map(|(v, s)| v * s)
            .collect();
        let mut pre = Vec::new();
        self.affine(fb, &m_scaled, &mut pre);
        Ok(pre.into_iter().map(softplus).collect())
    }

    fn trace(&self, x: f64, m: &[f64], r: f64) -> Result<Trace> {
        if m.len() != self.spec.measure_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.measure_dim,
                got: m.len(),
            });
        }
        let m_scaled: Vec<f64> = m
            .iter()
            .zip(&self.scaling.m_scale)
            .map(|(v, s)| v * s)
            .collect();
        let (feature_pre, feature_out) = match self.layout.feature {
            Some(fb) => {
                let mut pre = Vec::new();
                self.affine(fb, &m_scaled, &mut pre);
                let out: Vec<f64> = pre.iter().copied().map(softplus).collect();
                (pre, out)
            }
            None => (Vec::new(), Vec::new()),
        };
        self.trace_from_features(x, r, m_scaled, feature_pre, feature_out)
    }

    fn trace_channels(&self, x: f64, r: f64, features: &[f64]) -> Result<Trace> {
        if features.len() != self.spec.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.spec.n_features,
                got: features.len(),
            });
        }
        self.trace_from_features(x, r, Vec::new(), Vec::new(), features.to_vec())
    }

    fn trace_from_features(
        &self,
        x: f64,
        r: f64,
        m_scaled: Vec<f64>,
        feature_pre: Vec<f64>,
        feature_out: Vec<f64>,
    ) -> Result<Trace> {
        let x_scaled = x * self.scaling.x_scale;
        let mut femb_pre = Vec::new();
        if let Some(fe) = self.layout.feature_embed {
            self.affine(fe, &feature_out, &mut femb_pre);
        }
        let mut rate_pre = Vec::new();
        self.affine(self.layout.rate, &[r], &mut rate_pre);
        let mut cap_pre = Vec::new();
        self.affine(self.layout.capital, &[x_scaled], &mut cap_pre);
        let mut concat = Vec::with_capacity(self.spec.concat_dim());
        concat.extend(femb_pre.iter().copied().map(softplus));
        concat.extend(rate_pre.iter().copied().map(softplus));
        concat.extend(cap_pre.iter().copied().map(softplus));
        let mut trunk_pre = Vec::with_capacity(self.layout.trunk.len());
        let mut trunk_out = Vec::with_capacity(self.layout.trunk.len());
        let mut cur = concat.clone();
        for &tb in &self.layout.trunk {
            let mut pre = Vec::new();
            self.affine(tb, &cur, &mut pre);
            let out: Vec<f64> = pre.iter().copied().map(softplus).collect();
            trunk_pre.push(pre);
            cur = out.clone();
            trunk_out.push(out);
        }
        let mut head = Vec::new();
        self.affine(self.layout.head, &cur, &mut head);
        Ok(Trace {
            m_scaled,
            x_scaled,
            r,
            feature_pre,
            feature_out,
            femb_pre,
            rate_pre,
            cap_pre,
            concat,
            trunk_pre,
            trunk_out,
            value: head[0],
        })
    }

    /// Value and adaptive features at `(x, M)` with precomputed rate `r`.
    pub fn forward(&self, x: f64, m: &[f64], r: f64) -> Result<Forward> {
        let t = self.trace(x, m, r)?;
        Ok(Forward {
            value: t.value,
            features: t.feature_out,
        })
    }

    pub fn value(&self, x: f64, m: &[f64], r: f64) -> Result<f64> {
        Ok(self.trace(x, m, r)?.value)
    }

    /// Exact derivative of the value with respect to the wealth input.
    pub fn grad_x(&self, x: f64, m: &[f64], r: f64) -> Result<f64> {
        Ok(self.value_and_grad_x(x, m, r)?.1)
    }

    pub fn value_and_grad_x(&self, x: f64, m: &[f64], r: f64) -> Result<(f64, f64)> {
        let t = self.trace(x, m, r)?;
        let dx = self.backward(&t, 1.0, None);
        Ok((t.value, dx))
    }

    /// Evaluates the trunk directly from channel values `(x, r, features)`,
    /// bypassing the measure-to-feature map. Used for policy surfaces over
    /// explicit `(x, r, F)` lattices.
    pub fn value_channels(&self, x: f64, r: f64, features: &[f64]) -> Result<f64> {
        Ok(self.trace_channels(x, r, features)?.value)
    }

    pub fn value_and_grad_x_channels(
        &self,
        x: f64,
        r: f64,
        features: &[f64],
    ) -> Result<(f64, f64)> {
        let t = self.trace_channels(x, r, features)?;
        let dx = self.backward(&t, 1.0, None);
        Ok((t.value, dx))
    }

    /// Mean squared scaled residual over a batch together with its exact
    /// parameter gradient. The residual for a point is
    /// `residual_scale * (value - target)`.
    pub fn batch_loss_and_grads(
        &self,
        batch: &[TrainPoint<'_>],
        residual_scale: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let n = batch.len().max(1) as f64;
        for pt in batch {
            let t = self.trace(pt.x, pt.m, pt.r)?;
            let err = residual_scale * (t.value - pt.target);
            loss += err * err / n;
            let seed = 2.0 * residual_scale * err / n;
            self.backward(&t, seed, Some(&mut grads));
        }
        Ok((loss, grads))
    }

    /// Mean squared scaled residual without gradients.
    pub fn mean_squared_residual(
        &self,
        batch: &[TrainPoint<'_>],
        residual_scale: f64,
    ) -> Result<f64> {
        let mut loss = 0.0;
        let n = batch.len().max(1) as f64;
        for pt in batch {
            let v = self.value(pt.x, pt.m, pt.r)?;
            let err = residual_scale * (v - pt.target);
            loss += err * err / n;
        }
        Ok(loss)
    }

    /// Reverse pass from an output seed. Returns the derivative with respect
    /// to the wealth input; accumulates parameter gradients when requested.
    fn backward(&self, t: &Trace, seed: f64, mut grads: Option<&mut [f64]>) -> f64 {
        let head = self.layout.head;
        let last = t.trunk_out.last().unwrap_or(&t.concat);
        if let Some(g) = grads.as_deref_mut() {
            for (i, v) in last.iter().enumerate() {
                g[head.w_off + i] += seed * v;
            }
            g[head.b_off] += seed;
        }
        let mut d_out: Vec<f64> = self.params[head.w_off..head.w_off + head.cols]
            .iter()
            .map(|w| w * seed)
            .collect();
        for (li, &tb) in self.layout.trunk.iter().enumerate().rev() {
            let input = if li == 0 { &t.concat } else { &t.trunk_out[li - 1] };
            let pre = &t.trunk_pre[li];
            let mut d_in = vec![0.0; tb.cols];
            for o in 0..tb.rows {
                let d_pre = d_out[o] * sigmoid(pre[o]);
                if d_pre == 0.0 {
                    continue;
                }
                let row = &self.params[tb.w_off + o * tb.cols..tb.w_off + (o + 1) * tb.cols];
                if let Some(g) = grads.as_deref_mut() {
                    for (i, v) in input.iter().enumerate() {
                        g[tb.w_off + o * tb.cols + i] += d_pre * v;
                    }
                    g[tb.b_off + o] += d_pre;
                }
                for (i, w) in row.iter().enumerate() {
                    d_in[i] += d_pre * w;
                }
            }
            d_out = d_in;
        }
        // Split the concat gradient back into the embedding channels.
        let femb_width = if self.layout.feature_embed.is_some() {
            self.spec.feature_embed_dim
        } else {
            0
        };
        let (d_femb, rest) = d_out.split_at(femb_width);
        let (d_rate, d_cap) = rest.split_at(self.spec.rate_embed_dim);

        if let Some(g) = grads.as_deref_mut() {
            let rb = self.layout.rate;
            for o in 0..rb.rows {
                let d_pre = d_rate[o] * sigmoid(t.rate_pre[o]);
                g[rb.w_off + o] += d_pre * t.r;
                g[rb.b_off + o] += d_pre;
            }
        }

        let cb = self.layout.capital;
        let mut d_x_scaled = 0.0;
        for o in 0..cb.rows {
            let d_pre = d_cap[o] * sigmoid(t.cap_pre[o]);
            if let Some(g) = grads.as_deref_mut() {
                g[cb.w_off + o] += d_pre * t.x_scaled;
                g[cb.b_off + o] += d_pre;
            }
            d_x_scaled += d_pre * self.params[cb.w_off + o];
        }

        // Feature branch: only parameter gradients flow here, and only when
        // the trace came from an actual measure (not a channels evaluation).
        if let (Some(fe), Some(g)) = (self.layout.feature_embed, grads.as_deref_mut()) {
            let mut d_feature_out = vec![0.0; fe.cols];
            for o in 0..fe.rows {
                let d_pre = d_femb[o] * sigmoid(t.femb_pre[o]);
                if d_pre == 0.0 {
                    continue;
                }
                for (i, v) in t.feature_out.iter().enumerate() {
                    g[fe.w_off + o * fe.cols + i] += d_pre * v;
                }
                g[fe.b_off + o] += d_pre;
                for i in 0..fe.cols {
                    d_feature_out[i] += d_pre * self.params[fe.w_off + o * fe.cols + i];
                }
            }
            if let Some(fb) = self.layout.feature {
                if !t.m_scaled.is_empty() {
                    for o in 0..fb.rows {
                        let d_pre = d_feature_out[o] * sigmoid(t.feature_pre[o]);
                        if d_pre == 0.0 {
                            continue;
                        }
                        for (i, v) in t.m_scaled.iter().enumerate() {
                            g[fb.w_off + o * fb.cols + i] += d_pre * v;
                        }
                        g[fb.b_off + o] += d_pre;
                    }
                }
            }
        }

        d_x_scaled * self.scaling.x_scale
    }
}

/// One standard normal draw (Box-Muller; consumes two uniforms).
fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // in (0, 1]
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> NetSpec {
        NetSpec {
            measure_dim: 5,
            n_features: 2,
            feature_embed_dim: 4,
            rate_embed_dim: 3,
            capital_embed_dim: 4,
            trunk_dims: vec![6, 4],
        }
    }

    fn rand_vec(rng: &mut ChaCha12Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * (rng.random::<f64>() - 0.3)).collect()
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(0.0) - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!(softplus(800.0).is_finite());
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = ValueNetwork::zeros(small_spec(), InputScaling::identity(5)).unwrap();
        let m = vec![0.1, 0.2, 0.0, 0.3, 0.05];
        let out = net.forward(1.3, &m, 0.04).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(net.grad_x(1.3, &m, 0.04).unwrap(), 0.0);
    }

    #[test]
    fn constant_network_outputs_head_bias() {
        let mut net = ValueNetwork::zeros(small_spec(), InputScaling::identity(5)).unwrap();
        let n = net.param_count();
        net.params_mut()[n - 1] = -3.25; // head bias is the last parameter
        for x in [0.0, 1.0, 29.0] {
            let v = net.value(x, &[0.1, 0.2, 0.0, 0.3, 0.05], 0.1).unwrap();
            assert_eq!(v, -3.25);
        }
        assert_eq!(net.grad_x(2.0, &[0.1, 0.2, 0.0, 0.3, 0.05], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn single_unit_chain_matches_hand_derivative() {
        // d0 = 0, one rate unit, one capital unit, one trunk unit:
        // v = w_h * softplus(a*softplus(r_b) + b*softplus(x) + c) + e
        let spec = NetSpec {
            measure_dim: 2,
            n_features: 0,
            feature_embed_dim: 1,
            rate_embed_dim: 1,
            capital_embed_dim: 1,
            trunk_dims: vec![1],
        };
        let mut net = ValueNetwork::zeros(spec, InputScaling::identity(2)).unwrap();
        // layout: rate(w,b) capital(w,b) trunk(w0,w1,b) head(w,b)
        let p = net.params_mut();
        p[0] = 0.0; // rate w
        p[1] = 0.0; // rate b -> rate_out = ln 2
        p[2] = 1.0; // capital w
        p[3] = 0.0; // capital b -> cap_out = softplus(x)
        p[4] = 0.7; // trunk w on rate channel
        p[5] = -1.2; // trunk w on capital channel
        p[6] = 0.3; // trunk b
        p[7] = 2.0; // head w
        p[8] = 0.5; // head b
        let x = 0.8;
        let pre = 0.7 * softplus(0.0) - 1.2 * softplus(x) + 0.3;
        let v_hand = 2.0 * softplus(pre) + 0.5;
        let dv_hand = 2.0 * sigmoid(pre) * (-1.2) * sigmoid(x);
        let (v, dv) = net.value_and_grad_x(x, &[0.0, 0.0], 0.1).unwrap();
        assert!((v - v_hand).abs() < 1e-14);
        assert!((dv - dv_hand).abs() < 1e-14);
    }

    #[test]
    fn grad_x_matches_finite_differences() {
        let net = ValueNetwork::init(small_spec(), InputScaling::identity(5), 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..20 {
            let m = rand_vec(&mut rng, 5, 0.8);
            let x = rng.random_range(0.0..5.0);
            let r = rng.random_range(-0.02..0.4);
            let (_, an) = net.value_and_grad_x(x, &m, r).unwrap();
            let h = 1e-5;
            let fd = (net.value(x + h, &m, r).unwrap() - net.value(x - h, &m, r).unwrap())
                / (2.0 * h);
            let denom = an.abs().max(fd.abs()).max(1e-3);
            assert!((an - fd).abs() / denom <= 1e-6, "an={an} fd={fd}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut net = ValueNetwork::init(small_spec(), InputScaling::identity(5), 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let ms: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 5, 0.6)).collect();
        let batch: Vec<TrainPoint> = ms
            .iter()
            .enumerate()
            .map(|(k, m)| TrainPoint {
                x: 0.5 + k as f64,
                m,
                r: 0.03 * (k as f64 + 1.0),
                target: -1.0 + 0.2 * k as f64,
            })
            .collect();
        let (_, grads) = net.batch_loss_and_grads(&batch, 1.0).unwrap();
        let h = 1e-6;
        for pi in (0..net.param_count()).step_by(7) {
            let orig = net.params()[pi];
            net.params_mut()[pi] = orig + h;
            let up = net.mean_squared_residual(&batch, 1.0).unwrap();
            net.params_mut()[pi] = orig - h;
            let dn = net.mean_squared_residual(&batch, 1.0).unwrap();
            net.params_mut()[pi] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads[pi];
            let denom = an.abs().max(fd.abs()).max(1e-3);
            assert!((an - fd).abs() / denom <= 1e-6, "param {pi}: an={an} fd={fd}");
        }
    }

    #[test]
    fn zero_residual_batch_gives_zero_gradients() {
        let net = ValueNetwork::init(small_spec(), InputScaling::identity(5), 7).unwrap();
        let m = vec![0.2, 0.1, 0.05, 0.3, 0.15];
        let v = net.value(1.0, &m, 0.05).unwrap();
        let batch = [TrainPoint {
            x: 1.0,
            m: &m,
            r: 0.05,
            target: v,
        }];
        let (loss, grads) = net.batch_loss_and_grads(&batch, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn without_features_output_ignores_the_measure() {
        let spec = NetSpec {
            n_features: 0,
            ..small_spec()
        };
        let net = ValueNetwork::init(spec, InputScaling::identity(5), 11).unwrap();
        let a = net.value(2.0, &[0.1, 0.2, 0.3, 0.4, 0.5], 0.07).unwrap();
        let b = net.value(2.0, &[9.0, 0.0, 4.0, 1.0, 2.0], 0.07).unwrap();
        assert_eq!(a, b);
        assert!(net.features(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap().is_empty());
    }

    #[test]
    fn channels_evaluation_matches_forward() {
        let net = ValueNetwork::init(small_spec(), InputScaling::identity(5), 13).unwrap();
        let m = vec![0.3, 0.1, 0.2, 0.25, 0.15];
        let out = net.forward(1.7, &m, 0.08).unwrap();
        let via_channels = net.value_channels(1.7, 0.08, &out.features).unwrap();
        assert!((out.value - via_channels).abs() < 1e-15);
        let (_, g1) = net.value_and_grad_x(1.7, &m, 0.08).unwrap();
        let (_, g2) = net.value_and_grad_x_channels(1.7, 0.08, &out.features).unwrap();
        assert!((g1 - g2).abs() < 1e-15);
    }

    #[test]
    fn forward_and_grad_stay_finite_on_extreme_inputs() {
        let net = ValueNetwork::init(small_spec(), InputScaling::identity(5), 19).unwrap();
        for x in [-1e3, 0.0, 1e3] {
            for scale in [-1e3, 1e3] {
                let m = vec![scale; 5];
                let (v, g) = net.value_and_grad_x(x, &m, 0.1).unwrap();
                assert!(v.is_finite() && g.is_finite(), "x={x} scale={scale}");
            }
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ValueNetwork::init(small_spec(), InputScaling::identity(5), 99).unwrap();
        let b = ValueNetwork::init(small_spec(), InputScaling::identity(5), 99).unwrap();
        let c = ValueNetwork::init(small_spec(), InputScaling::identity(5), 100).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = ValueNetwork::zeros(small_spec(), InputScaling::identity(5)).unwrap();
        assert!(matches!(
            net.value(1.0, &[0.0; 4], 0.1),
            Err(Error::DimensionMismatch { expected: 5, got: 4 })
        ));
    }
}
