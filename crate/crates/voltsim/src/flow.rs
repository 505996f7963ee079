//! Conditional autoregressive linear-spline flow with exact inverse,
//! log-determinant and conditional density.
//!
//! Each layer maps a latent box onto an output box through per-dimension
//! monotone piecewise-linear splines on the unit square. Knot positions come
//! from dense networks fed with the condition vector and the latent prefix,
//! so sampling is a single pass and inversion is sequential but exact.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    cumsum_rows, softmax_rows, spline_eval_row, spline_invert_row, std_normal_ln_pdf, Tape,
    Tensor, Var,
};
use crate::error::{Result, VoltError};
use crate::nn::{standard_normal, train_loop, Activation, DenseNet, TrainConfig, TrainResult};

/// Minimum knot-bin width; keeps every spline slope finite and bounded.
pub const MIN_BIN_WIDTH: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Knots per spline.
    pub n_knots: usize,
    /// Stacked spline layers.
    pub layers: usize,
    /// Half-width of the latent box.
    pub latent_bound: f64,
    /// Output box half-width expansion over the training range.
    pub box_expand: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { n_knots: 32, layers: 1, latent_bound: 5.0, box_expand: 1.2 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_knots < 2 {
            return Err(VoltError::Config("need at least 2 knots".into()));
        }
        if (self.n_knots as f64) * MIN_BIN_WIDTH >= 1.0 {
            return Err(VoltError::Config("too many knots for the minimum bin width".into()));
        }
        if self.layers == 0 {
            return Err(VoltError::Config("need at least one layer".into()));
        }
        if !(self.latent_bound > 0.0) {
            return Err(VoltError::Config("latent_bound must be positive".into()));
        }
        if !(self.box_expand >= 1.0) {
            return Err(VoltError::Config("box_expand must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mix a softmax row with the uniform floor and accumulate into knots.
fn knots_from_raw(raw: &[f64]) -> Vec<f64> {
    let n = raw.len();
    let sm = softmax_rows(&Tensor::from_row(raw));
    let keep = 1.0 - n as f64 * MIN_BIN_WIDTH;
    let mixed: Vec<f64> = sm.data().iter().map(|w| keep * w + MIN_BIN_WIDTH).collect();
    cumsum_rows(&Tensor::from_row(&mixed)).data().to_vec()
}

/// The flow itself: `layers x dim` knot networks plus the output box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Flow {
    nets: Vec<Vec<DenseNet>>,
    dim: usize,
    cond_dim: usize,
    config: FlowConfig,
    out_lo: Vec<f64>,
    out_hi: Vec<f64>,
}

impl Flow {
    /// Fresh flow with the given output box. Hidden layers are 64-wide
    /// smooth-rectifier layers so knots vary smoothly with the condition.
    pub fn new(
        dim: usize,
        cond_dim: usize,
        config: FlowConfig,
        out_lo: Vec<f64>,
        out_hi: Vec<f64>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(VoltError::Config("flow dimension must be positive".into()));
        }
        if out_lo.len() != dim || out_hi.len() != dim {
            return Err(VoltError::Shape("output box dimension mismatch".into()));
        }
        for (lo, hi) in out_lo.iter().zip(&out_hi) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(VoltError::Invalid("degenerate output box".into()));
            }
        }
        let mut nets = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut layer = Vec::with_capacity(dim);
            for i in 0..dim {
                let sizes = [cond_dim + i, 64, 64, 2 * config.n_knots];
                layer.push(DenseNet::new(&sizes, Activation::Softplus, rng));
            }
            nets.push(layer);
        }
        Ok(Flow { nets, dim, cond_dim, config, out_lo, out_hi })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn output_box(&self) -> (&[f64], &[f64]) {
        (&self.out_lo, &self.out_hi)
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().flatten().map(|n| n.param_count()).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for net in self.nets.iter().flatten() {
            net.flatten_into(out);
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> usize {
        let mut off = 0;
        for net in self.nets.iter_mut().flatten() {
            off += net.set_flat(&flat[off..]);
        }
        off
    }

    /// Output interval of layer `k` in dimension `i`; all layers but the
    /// last map back into the latent box.
    fn layer_box(&self, layer: usize, i: usize) -> (f64, f64) {
        if layer + 1 == self.config.layers {
            (self.out_lo[i], self.out_hi[i])
        } else {
            (-self.config.latent_bound, self.config.latent_bound)
        }
    }

    fn check_cond(&self, cond: &[f64]) -> Result<()> {
        if cond.len() != self.cond_dim {
            return Err(VoltError::Shape(format!(
                "condition length {} does not match {}",
                cond.len(),
                self.cond_dim
            )));
        }
        Ok(())
    }

    /// Map a latent point to data space (sampling direction).
    pub fn forward(&self, z: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        self.check_cond(cond)?;
        if z.len() != self.dim {
            return Err(VoltError::Shape("latent dimension mismatch".into()));
        }
        let b = self.config.latent_bound;
        let n = self.config.n_knots;
        let mut cur = z.to_vec();
        for (k, layer) in self.nets.iter().enumerate() {
            let mut out = vec![0.0; self.dim];
            for (i, net) in layer.iter().enumerate() {
                let mut input = Vec::with_capacity(self.cond_dim + i);
                input.extend_from_slice(cond);
                input.extend_from_slice(&cur[..i]);
                let raw = net.forward(&input)?;
                let u = knots_from_raw(&raw[..n]);
                let v = knots_from_raw(&raw[n..]);
                let zeta = (cur[i] + b) / (2.0 * b);
                let (xn, _) = spline_eval_row(&u, &v, zeta);
                let (lo, hi) = self.layer_box(k, i);
                out[i] = lo + (hi - lo) * xn;
            }
            cur = out;
        }
        Ok(cur)
    }

    /// Map a data point to latent space; also returns
    /// `ln |det d z / d x|` of this inverse map.
    pub fn inverse(&self, x: &[f64], cond: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_cond(cond)?;
        if x.len() != self.dim {
            return Err(VoltError::Shape("data dimension mismatch".into()));
        }
        let b = self.config.latent_bound;
        let n = self.config.n_knots;
        let mut cur = x.to_vec();
        let mut log_det = 0.0;
        for k in (0..self.config.layers).rev() {
            let layer = &self.nets[k];
            let mut z = vec![0.0; self.dim];
            for (i, net) in layer.iter().enumerate() {
                let mut input = Vec::with_capacity(self.cond_dim + i);
                input.extend_from_slice(cond);
                input.extend_from_slice(&z[..i]);
                let raw = net.forward(&input)?;
                let u = knots_from_raw(&raw[..n]);
                let v = knots_from_raw(&raw[n..]);
                let (lo, hi) = self.layer_box(k, i);
                let xn = (cur[i] - lo) / (hi - lo);
                let (zeta, ln_s) = spline_invert_row(&u, &v, xn);
                z[i] = 2.0 * b * zeta - b;
                // d z_i / d x_i = 2b / ((hi - lo) * slope)
                log_det += (2.0 * b).ln() - (hi - lo).ln() - ln_s;
            }
            cur = z;
        }
        Ok((cur, log_det))
    }

    /// `ln p(x | cond)` under the flow with a standard normal base.
    pub fn cond_log_density(&self, x: &[f64], cond: &[f64]) -> Result<f64> {
        let (z, log_det) = self.inverse(x, cond)?;
        Ok(z.iter().map(|&zi| std_normal_ln_pdf(zi)).sum::<f64>() + log_det)
    }

    /// Draw one sample given the condition.
    pub fn sample(&self, cond: &[f64], rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
        let z: Vec<f64> = (0..self.dim).map(|_| standard_normal(rng)).collect();
        self.forward(&z, cond)
    }

    pub fn register(&self, tape: &Tape) -> Vec<Var> {
        let mut vars = Vec::new();
        for net in self.nets.iter().flatten() {
            vars.extend(net.register(tape));
        }
        vars
    }

    /// Build the negative log-likelihood graph for a batch. `data` is
    /// `batch x dim`, `cond` is `batch x cond_dim`; `leaves` must come from
    /// [`Flow::register`] on the same tape.
    pub fn nll_tape(
        &self,
        tape: &Tape,
        data: Var,
        cond: Option<Var>,
        leaves: &[Var],
        mut dropout: Option<(f64, &mut ChaCha12Rng)>,
    ) -> Var {
        let b = self.config.latent_bound;
        let n = self.config.n_knots;
        let batch = tape.value(data).rows();
        let mut cur = data;
        let mut terms: Option<Var> = None;
        let mut constant = 0.0;
        for k in (0..self.config.layers).rev() {
            // leaves are stored layer-major in forward order
            let layer_leaf_base: usize = self.nets[..k]
                .iter()
                .flatten()
                .map(|nt| 2 * (nt.sizes().len() - 1))
                .sum();
            let layer = &self.nets[k];
            let mut z_cols: Vec<Var> = Vec::with_capacity(self.dim);
            let mut next_base = layer_leaf_base;
            for (i, net) in layer.iter().enumerate() {
                let n_leaves = 2 * (net.sizes().len() - 1);
                let net_leaves = &leaves[next_base..next_base + n_leaves];
                next_base += n_leaves;
                let mut input = match cond {
                    Some(c) => Some(c),
                    None => None,
                };
                for &zc in &z_cols[..i] {
                    input = Some(match input {
                        Some(p) => tape.concat_cols(p, zc),
                        None => zc,
                    });
                }
                let raw = match input {
                    Some(inp) => net.forward_tape(
                        tape,
                        inp,
                        net_leaves,
                        dropout.as_mut().map(|(r, rng)| (*r, &mut **rng)),
                    ),
                    None => {
                        let empty = tape.leaf(Tensor::new(batch, 0, Vec::new()));
                        net.forward_tape(
                            tape,
                            empty,
                            net_leaves,
                            dropout.as_mut().map(|(r, rng)| (*r, &mut **rng)),
                        )
                    }
                };
                let u = knot_graph(tape, tape.slice_cols(raw, 0..n));
                let v = knot_graph(tape, tape.slice_cols(raw, n..2 * n));
                let (lo, hi) = self.layer_box(k, i);
                let xi = tape.slice_cols(cur, i..i + 1);
                let xn = tape.scale(tape.add_scalar(xi, -lo), 1.0 / (hi - lo));
                let out = tape.spline_inverse(u, v, xn);
                let zeta = tape.slice_cols(out, 0..1);
                let ln_s = tape.slice_cols(out, 1..2);
                let zi = tape.add_scalar(tape.scale(zeta, 2.0 * b), -b);
                z_cols.push(zi);
                // every spline contributes its slope; only the final latent
                // (layer 0 output) carries the Gaussian term
                let t = if k == 0 {
                    tape.add(tape.scale(tape.square(zi), 0.5), ln_s)
                } else {
                    ln_s
                };
                terms = Some(match terms {
                    Some(acc) => tape.add(acc, t),
                    None => t,
                });
                constant += (hi - lo).ln() - (2.0 * b).ln();
            }
            cur = match z_cols.len() {
                1 => z_cols[0],
                _ => {
                    let mut acc = z_cols[0];
                    for &zc in &z_cols[1..] {
                        acc = tape.concat_cols(acc, zc);
                    }
                    acc
                }
            };
        }
        let half_ln_2pi = 0.5 * 1.8378770664093453;
        let per_sample = terms.expect("dim > 0");
        // per_sample is batch x 1, already summed over dimensions and layers
        let batch_mean = tape.mean(per_sample);
        tape.add_scalar(batch_mean, self.dim as f64 * half_ln_2pi + constant)
    }
}

fn knot_graph(tape: &Tape, raw: Var) -> Var {
    let n = tape.value(raw).cols();
    let sm = tape.softmax_rows(raw);
    let keep = 1.0 - n as f64 * MIN_BIN_WIDTH;
    tape.cumsum_rows(tape.add_scalar(tape.scale(sm, keep), MIN_BIN_WIDTH))
}

/// Output box from the training range: the half-width around the midpoint is
/// widened by `box_expand`.
pub fn box_from_data(data: &Tensor, idx: &[usize], expand: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if idx.is_empty() {
        return Err(VoltError::Invalid("empty training set".into()));
    }
    let dim = data.cols();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for &r in idx {
        for c in 0..dim {
            let v = data.get(r, c);
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    for c in 0..dim {
        if !(hi[c] > lo[c]) {
            return Err(VoltError::Invalid(format!("column {c} has no spread")));
        }
        let mid = 0.5 * (lo[c] + hi[c]);
        let half = 0.5 * (hi[c] - lo[c]) * expand;
        lo[c] = mid - half;
        hi[c] = mid + half;
    }
    Ok((lo, hi))
}

/// Maximum-likelihood training of a conditional flow. `cond` must have the
/// same row count as `data`; pass `None` for an unconditional flow.
pub fn train_flow(
    data: &Tensor,
    cond: Option<&Tensor>,
    train_idx: &[usize],
    test_idx: &[usize],
    flow_config: &FlowConfig,
    train_config: &TrainConfig,
) -> Result<(Flow, TrainResult)> {
    if let Some(c) = cond {
        if c.rows() != data.rows() {
            return Err(VoltError::Shape("condition row count mismatch".into()));
        }
    }
    let (lo, hi) = box_from_data(data, train_idx, flow_config.box_expand)?;
    let cond_dim = cond.map_or(0, |c| c.cols());
    let mut rng = rand::SeedableRng::seed_from_u64(train_config.seed);
    let flow = Flow::new(data.cols(), cond_dim, flow_config.clone(), lo, hi, &mut rng)?;

    let mut params = Vec::new();
    flow.flatten_into(&mut params);
    let flow_ref = flow.clone();
    let data = data.clone();
    let cond = cond.cloned();
    let result = train_loop(&mut params, train_idx, test_idx, train_config, {
        move |tape, p, batch, dr, rng| {
            let mut f = flow_ref.clone();
            f.set_flat(p);
            let leaves = f.register(tape);
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| data.row(i).to_vec()).collect();
            let d = tape.leaf(Tensor::from_rows(&rows));
            let c = cond.as_ref().map(|ct| {
                let crows: Vec<Vec<f64>> = batch.iter().map(|&i| ct.row(i).to_vec()).collect();
                tape.leaf(Tensor::from_rows(&crows))
            });
            let dropout = dr.map(|r| (r, &mut *rng));
            let loss = f.nll_tape(tape, d, c, &leaves, dropout);
            (loss, leaves)
        }
    })?;
    let mut out = flow;
    out.set_flat(&params);
    Ok((out, result))
}
