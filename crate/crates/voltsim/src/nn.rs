//! Dense network substrate: exact reverse-mode gradients via [`crate::autodiff`],
//! bias-corrected adaptive-moment updates, inverted dropout and deterministic
//! train/test splitting.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, VoltError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// Standard rectifier, used for the autoencoder and vol networks.
    Relu,
    /// Smooth rectifier, used for spline-knot networks so that knot
    /// parameters vary smoothly with the condition.
    Softplus,
}

/// Fully connected network. Hidden layers carry the activation; the output
/// layer is linear (downstream heads apply their own transform).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

impl DenseNet {
    /// Scaled uniform fan-in initialization, biases at zero.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut ChaCha12Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = if fan_in > 0 { (1.0 / fan_in as f64).sqrt() } else { 0.0 };
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
            weights.push(Tensor::new(fan_in, fan_out, data));
            biases.push(Tensor::zeros(1, fan_out));
        }
        DenseNet { sizes: sizes.to_vec(), weights, biases, activation }
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn activate(&self, x: f64) -> f64 {
        match self.activation {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => crate::autodiff::softplus(x),
        }
    }

    /// Pre-activation output of the last layer for a single input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_with_dropout(input, None, &mut ChaCha12Rng::seed_from_u64(0))
    }

    /// Stochastic forward with inverted dropout on hidden units: survivors
    /// are scaled by `1/(1-rate)` so inference needs no rescaling.
    pub fn forward_with_dropout(
        &self,
        input: &[f64],
        dropout_rate: Option<f64>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<f64>> {
        if input.len() != self.sizes[0] {
            return Err(VoltError::Shape(format!(
                "input length {} does not match first layer size {}",
                input.len(),
                self.sizes[0]
            )));
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(VoltError::NonFinite("network input".into()));
        }
        let n_layers = self.weights.len();
        let mut cur = input.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = b.data().to_vec();
            for (i, &x) in cur.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let wr = w.row(i);
                for (n, &wv) in next.iter_mut().zip(wr) {
                    *n += x * wv;
                }
            }
            if l + 1 < n_layers {
                for v in next.iter_mut() {
                    *v = self.activate(*v);
                }
                if let Some(rate) = dropout_rate {
                    let keep = 1.0 - rate;
                    for v in next.iter_mut() {
                        if rng.random::<f64>() < rate {
                            *v = 0.0;
                        } else {
                            *v /= keep;
                        }
                    }
                }
            }
            cur = next;
        }
        if !cur.iter().all(|v| v.is_finite()) {
            return Err(VoltError::NonFinite("network output".into()));
        }
        Ok(cur)
    }

    pub fn forward_batch(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.sizes[0] {
            return Err(VoltError::Shape(format!(
                "batch width {} does not match first layer size {}",
                input.cols(),
                self.sizes[0]
            )));
        }
        let n_layers = self.weights.len();
        let mut cur = input.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = cur.matmul(w);
            for r in 0..next.rows() {
                for c in 0..next.cols() {
                    let mut v = next.get(r, c) + b.data()[c];
                    if l + 1 < n_layers {
                        v = self.activate(v);
                    }
                    next.set(r, c, v);
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Register this network's parameters as tape leaves (weight, bias per
    /// layer, in order). The returned handles pair with [`Self::set_flat`].
    pub fn register(&self, tape: &Tape) -> Vec<Var> {
        let mut vars = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            vars.push(tape.leaf(w.clone()));
            vars.push(tape.leaf(b.clone()));
        }
        vars
    }

    /// Build the forward graph for a batch input node using the given
    /// parameter leaves; `dropout` draws fresh inverted-dropout masks.
    pub fn forward_tape(
        &self,
        tape: &Tape,
        input: Var,
        params: &[Var],
        dropout: Option<(f64, &mut ChaCha12Rng)>,
    ) -> Var {
        assert_eq!(params.len(), 2 * self.weights.len(), "parameter leaf count mismatch");
        let n_layers = self.weights.len();
        let (rate, mut rng) = match dropout {
            Some((r, rng)) => (r, Some(rng)),
            None => (0.0, None),
        };
        let mut cur = input;
        let batch = tape.value(input).rows();
        for l in 0..n_layers {
            let h = tape.matmul(cur, params[2 * l]);
            let h = tape.add_row(h, params[2 * l + 1]);
            cur = if l + 1 < n_layers {
                let a = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Softplus => tape.softplus(h),
                };
                if rate > 0.0 {
                    let rng = rng.as_deref_mut().expect("dropout requires an rng");
                    let units = self.sizes[l + 1];
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = (0..batch * units)
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
                        .collect();
                    let m = tape.leaf(Tensor::new(batch, units, mask));
                    tape.mul(a, m)
                } else {
                    a
                }
            } else {
                h
            };
        }
        cur
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Append all parameters, in registration order, to `out`.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
    }

    /// Copy of the network with `extra` additional output units. Existing
    /// weights are preserved; the new units get small uniform weights in
    /// `(-scale, scale)` and zero bias so the old outputs are unchanged.
    pub fn widen_output(&self, extra: usize, scale: f64, rng: &mut ChaCha12Rng) -> DenseNet {
        let mut out = self.clone();
        let last = out.weights.len() - 1;
        let w = &out.weights[last];
        let (fan_in, old) = (w.rows(), w.cols());
        let mut data = Vec::with_capacity(fan_in * (old + extra));
        for r in 0..fan_in {
            data.extend_from_slice(w.row(r));
            data.extend((0..extra).map(|_| rng.random_range(-scale..=scale)));
        }
        out.weights[last] = Tensor::new(fan_in, old + extra, data);
        let mut bias = out.biases[last].data().to_vec();
        bias.extend(std::iter::repeat(0.0).take(extra));
        out.biases[last] = Tensor::new(1, old + extra, bias);
        *out.sizes.last_mut().unwrap() = old + extra;
        out
    }

    /// Copy of the network with `extra` additional input units, wired with
    /// small uniform weights in `(-scale, scale)`. Zero on the new inputs
    /// reproduces the original network exactly.
    pub fn widen_input(&self, extra: usize, scale: f64, rng: &mut ChaCha12Rng) -> DenseNet {
        let mut out = self.clone();
        let w = &out.weights[0];
        let (old, fan_out) = (w.rows(), w.cols());
        let mut data = w.data().to_vec();
        for _ in 0..extra {
            data.extend((0..fan_out).map(|_| rng.random_range(-scale..=scale)));
        }
        out.weights[0] = Tensor::new(old + extra, fan_out, data);
        out.sizes[0] = old + extra;
        out
    }

    /// Read parameters back from a flat slice; returns the number consumed.
    pub fn set_flat(&mut self, flat: &[f64]) -> usize {
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wl = w.len();
            w.data_mut().copy_from_slice(&flat[off..off + wl]);
            off += wl;
            let bl = b.len();
            b.data_mut().copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
        off
    }
}

/// Adaptive-moment optimizer state; accumulators mirror the flat parameter
/// layout. Decay rates 0.9/0.999, epsilon 1e-8.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    learning_rate: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        OptimizerState {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(VoltError::Shape("adam_step length mismatch".into()));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(VoltError::NonFinite("gradient".into()));
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..params.len() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grads[i];
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Disjoint train/test index sets from a seeded random permutation. The
/// train set takes `floor(n * train_fraction)` items.
pub fn split_shuffle(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(VoltError::Invalid("need at least 2 items to split".into()));
    }
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(VoltError::Invalid("train_fraction must lie in (0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let k = (n as f64 * train_fraction).floor() as usize;
    let test = idx.split_off(k);
    Ok((idx, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EarlyStop {
    /// Stop after exactly this many optimizer steps.
    AtIteration(usize),
    /// Stop when the test loss has not improved for this many iterations.
    Patience(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub max_iterations: usize,
    /// `None` means full-batch gradient descent.
    pub batch_size: Option<usize>,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub early_stop: EarlyStop,
}

impl TrainConfig {
    pub fn full_batch(learning_rate: f64, dropout_rate: f64, iterations: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            dropout_rate,
            max_iterations: iterations,
            batch_size: None,
            grad_clip: None,
            seed,
            early_stop: EarlyStop::AtIteration(iterations),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(VoltError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(VoltError::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(VoltError::Config("grad_clip must be positive".into()));
            }
        }
        if self.max_iterations == 0 {
            return Err(VoltError::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    pub train_curve: Vec<f64>,
    pub test_curve: Vec<f64>,
    pub iterations: usize,
}

/// Generic training loop. The builder constructs the loss graph for a batch
/// of indices and returns `(loss, parameter leaves)`; parameter leaves must
/// follow the same flat order as `params`. Dropout is enabled for training
/// batches and disabled for test evaluation. With [`EarlyStop::Patience`]
/// the parameters with the best test loss are restored on return; with
/// [`EarlyStop::AtIteration`] the final parameters are kept.
pub fn train_loop<F>(
    params: &mut [f64],
    train_idx: &[usize],
    test_idx: &[usize],
    config: &TrainConfig,
    mut build: F,
) -> Result<TrainResult>
where
    F: FnMut(&Tape, &[f64], &[usize], Option<f64>, &mut ChaCha12Rng) -> (Var, Vec<Var>),
{
    config.validate()?;
    if train_idx.is_empty() {
        return Err(VoltError::Invalid("empty train set".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(params.len(), config.learning_rate);
    let mut train_curve = Vec::new();
    let mut test_curve = Vec::new();
    let mut best_test = f64::INFINITY;
    let mut best_params: Option<Vec<f64>> = None;
    let mut since_best = 0usize;
    let dropout = if config.dropout_rate > 0.0 { Some(config.dropout_rate) } else { None };

    // seed the rollback with the starting point so warm starts never regress
    if matches!(config.early_stop, EarlyStop::Patience(_)) && !test_idx.is_empty() {
        let tape = Tape::new();
        let (tl, _) = build(&tape, params, test_idx, None, &mut rng);
        let init_loss = tape.scalar_value(tl);
        if init_loss.is_finite() {
            best_test = init_loss;
            best_params = Some(params.to_vec());
        }
    }

    let limit = match config.early_stop {
        EarlyStop::AtIteration(k) => k.min(config.max_iterations),
        EarlyStop::Patience(_) => config.max_iterations,
    };

    let mut iterations = 0;
    for it in 0..limit {
        let batch: Vec<usize> = match config.batch_size {
            None => train_idx.to_vec(),
            Some(bs) if bs >= train_idx.len() => train_idx.to_vec(),
            Some(bs) => {
                let mut pool = train_idx.to_vec();
                for i in 0..bs {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                }
                pool.truncate(bs);
                pool
            }
        };

        let tape = Tape::new();
        let (loss, leaves) = build(&tape, params, &batch, dropout, &mut rng);
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(VoltError::Diverged { iteration: it, loss: loss_val });
        }
        let grads = tape.backward(loss, &leaves)?;
        let mut flat = Vec::with_capacity(params.len());
        for g in &grads {
            flat.extend_from_slice(g.data());
        }
        if let Some(ceiling) = config.grad_clip {
            let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > ceiling {
                let scale = ceiling / norm;
                for g in flat.iter_mut() {
                    *g *= scale;
                }
            }
        }
        adam_step(params, &flat, &mut state)?;
        iterations += 1;
        train_curve.push(loss_val);

        let test_loss = if test_idx.is_empty() {
            f64::NAN
        } else {
            let tape = Tape::new();
            let (tl, _) = build(&tape, params, test_idx, None, &mut rng);
            tape.scalar_value(tl)
        };
        test_curve.push(test_loss);

        if let EarlyStop::Patience(p) = config.early_stop {
            if test_loss < best_test {
                best_test = test_loss;
                best_params = Some(params.to_vec());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= p {
                    break;
                }
            }
        }
    }

    if let Some(best) = best_params {
        params.copy_from_slice(&best);
    }

    Ok(TrainResult { train_curve, test_curve, iterations })
}

/// One standard normal draw via Box-Muller (deterministic per stream).
pub fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic per-path stream derived from a master seed and indices.
pub fn derive_stream(master: u64, a: u64, b: u64) -> ChaCha12Rng {
    let mut s = master;
    for x in [a.wrapping_add(0x9e3779b97f4a7c15), b.wrapping_add(0x517cc1b727220a95)] {
        s ^= x;
        s = s.wrapping_mul(0xbf58476d1ce4e5b9);
        s ^= s >> 27;
        s = s.wrapping_mul(0x94d049bb133111eb);
        s ^= s >> 31;
    }
    ChaCha12Rng::seed_from_u64(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_network_maps_to_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut net = DenseNet::new(&[3, 4, 2], Activation::Relu, &mut rng);
        let zeros = vec![0.0; net.param_count()];
        net.set_flat(&zeros);
        let out = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_layer_identity_plus_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut net = DenseNet::new(&[3, 3], Activation::Relu, &mut rng);
        let mut flat = Vec::new();
        net.flatten_into(&mut flat);
        // weight is 3x3 identity, bias = (0.1, 0.2, 0.3)
        let mut p = vec![0.0; flat.len()];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        p[9] = 0.1;
        p[10] = 0.2;
        p[11] = 0.3;
        net.set_flat(&p);
        let out = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(out[0], 1.1);
        assert_relative_eq!(out[1], 2.2);
        assert_relative_eq!(out[2], 3.3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let net = DenseNet::new(&[3, 2], Activation::Relu, &mut rng);
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn dropout_is_unbiased_in_expectation() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let net = DenseNet::new(&[2, 8, 1], Activation::Softplus, &mut rng);
        let input = [0.7, -0.3];
        let reference = net.forward(&input).unwrap()[0];
        let n = 100_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            samples.push(net.forward_with_dropout(&input, Some(0.5), &mut rng).unwrap()[0]);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - reference).abs() <= 3.0 * se,
            "dropout mean {mean} vs reference {reference}, se {se}"
        );
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let net = DenseNet::new(&[2, 5, 3, 1], Activation::Softplus, &mut rng);
        let input = Tensor::from_rows(&[vec![0.4, -0.9], vec![-0.2, 0.3], vec![1.1, 0.5]]);
        let mut p0 = Vec::new();
        net.flatten_into(&mut p0);

        let eval = |p: &[f64]| {
            let mut n = net.clone();
            n.set_flat(p);
            let tape = Tape::new();
            let leaves = n.register(&tape);
            let inp = tape.leaf(input.clone());
            let out = n.forward_tape(&tape, inp, &leaves, None);
            let loss = tape.mean(tape.square(out));
            (tape, loss, leaves)
        };

        let (tape, loss, leaves) = eval(&p0);
        let grads = tape.backward(loss, &leaves).unwrap();
        let mut flat_g = Vec::new();
        for g in &grads {
            flat_g.extend_from_slice(g.data());
        }

        let h = 1e-5;
        let mut p = p0.clone();
        for i in 0..p0.len() {
            p[i] = p0[i] + h;
            let (t1, l1, _) = eval(&p);
            let fp = t1.scalar_value(l1);
            p[i] = p0[i] - h;
            let (t2, l2, _) = eval(&p);
            let fm = t2.scalar_value(l2);
            p[i] = p0[i];
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(flat_g[i], fd, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![1.0, -2.0, 3.0];
        let before = params.clone();
        let mut st = OptimizerState::new(3, 0.01);
        adam_step(&mut params, &[0.0, 0.0, 0.0], &mut st).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut params = vec![0.0, 0.0];
        let mut st = OptimizerState::new(2, 0.01);
        adam_step(&mut params, &[3.0, -0.5], &mut st).unwrap();
        // bias correction makes m_hat / sqrt(v_hat) = sign(g) on step 1
        assert_relative_eq!(params[0], -0.01, max_relative = 1e-6);
        assert_relative_eq!(params[1], 0.01, max_relative = 1e-6);
    }

    #[test]
    fn split_shuffle_partitions_and_is_deterministic() {
        let (tr, te) = split_shuffle(10, 0.8, 7).unwrap();
        assert_eq!(tr.len(), 8);
        assert_eq!(te.len(), 2);
        let mut all: Vec<usize> = tr.iter().chain(te.iter()).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (tr2, te2) = split_shuffle(10, 0.8, 7).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
    }

    #[test]
    fn split_shuffle_paper_day_count() {
        let (tr, te) = split_shuffle(2711, 0.8, 1).unwrap();
        assert_eq!(tr.len(), 2168);
        assert_eq!(te.len(), 543);
    }

    #[test]
    fn train_loop_fits_linear_data() {
        // linear net on exactly linear data: MSE -> 0
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let net = DenseNet::new(&[2, 1], Activation::Relu, &mut rng);
        let xs: Vec<Vec<f64>> =
            (0..50).map(|i| vec![(i as f64) / 25.0 - 1.0, ((i * 7) % 13) as f64 / 13.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x[0] - 0.5 * x[1] + 0.25).collect();
        let x_all = Tensor::from_rows(&xs);

        let mut params = Vec::new();
        net.flatten_into(&mut params);
        let config = TrainConfig::full_batch(0.05, 0.0, 3000, 3);
        let idx: Vec<usize> = (0..xs.len()).collect();
        let net_ref = net.clone();
        let result = train_loop(&mut params, &idx, &[], &config, |tape, p, batch, _, _| {
            let mut n = net_ref.clone();
            n.set_flat(p);
            let leaves = n.register(tape);
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| x_all.row(i).to_vec()).collect();
            let targets: Vec<Vec<f64>> = batch.iter().map(|&i| vec![ys[i]]).collect();
            let inp = tape.leaf(Tensor::from_rows(&rows));
            let tgt = tape.leaf(Tensor::from_rows(&targets));
            let out = n.forward_tape(tape, inp, &leaves, None);
            let loss = tape.mean(tape.square(tape.sub(out, tgt)));
            (loss, leaves)
        })
        .unwrap();
        assert_eq!(result.iterations, 3000);
        assert!(
            *result.train_curve.last().unwrap() < 1e-6,
            "final loss {}",
            result.train_curve.last().unwrap()
        );
    }

    #[test]
    fn train_loop_is_deterministic() {
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(4);
            let net = DenseNet::new(&[2, 4, 1], Activation::Softplus, &mut rng);
            let xs = vec![vec![0.1, 0.9], vec![-0.4, 0.2], vec![0.8, -0.7], vec![0.0, 0.3]];
            let ys = [0.5, -0.1, 0.3, 0.0];
            let mut params = Vec::new();
            net.flatten_into(&mut params);
            let config = TrainConfig::full_batch(0.01, 0.1, 40, 11);
            let idx = vec![0, 1, 2, 3];
            train_loop(&mut params, &idx, &[], &config, |tape, p, batch, dr, rng| {
                let mut n = net.clone();
                n.set_flat(p);
                let leaves = n.register(tape);
                let rows: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
                let tg: Vec<Vec<f64>> = batch.iter().map(|&i| vec![ys[i]]).collect();
                let inp = tape.leaf(Tensor::from_rows(&rows));
                let tgt = tape.leaf(Tensor::from_rows(&tg));
                let dropout = match dr {
                    Some(r) => Some((r, &mut *rng)),
                    None => None,
                };
                let out = n.forward_tape(tape, inp, &leaves, dropout);
                let loss = tape.mean(tape.square(tape.sub(out, tgt)));
                (loss, leaves)
            })
            .unwrap();
            params
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical seed and data must give bitwise-identical parameters");
    }

    #[test]
    fn early_stop_at_iteration_takes_exact_step_count() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let net = DenseNet::new(&[1, 1], Activation::Relu, &mut rng);
        let mut params = Vec::new();
        net.flatten_into(&mut params);
        let mut config = TrainConfig::full_batch(0.01, 0.0, 100, 0);
        config.early_stop = EarlyStop::AtIteration(7);
        let res = train_loop(&mut params, &[0], &[], &config, |tape, p, _, _, _| {
            let mut n = net.clone();
            n.set_flat(p);
            let leaves = n.register(tape);
            let inp = tape.leaf(Tensor::from_row(&[1.0]));
            let out = n.forward_tape(tape, inp, &leaves, None);
            (tape.mean(tape.square(out)), leaves)
        })
        .unwrap();
        assert_eq!(res.iterations, 7);
    }

    #[test]
    fn patience_restores_best_test_parameters() {
        // scalar objective (p - 1)^2 with an oversized step so the loss
        // oscillates; the returned parameter must match the best test loss
        let build = |tape: &Tape, p: &[f64]| {
            let leaf = tape.leaf(Tensor::from_row(&[p[0]]));
            let loss = tape.mean(tape.square(tape.add_scalar(leaf, -1.0)));
            (loss, vec![leaf])
        };
        let mut params = vec![4.0];
        let mut config = TrainConfig::full_batch(1.5, 0.0, 60, 0);
        config.early_stop = EarlyStop::Patience(10);
        let res = train_loop(&mut params, &[0], &[0], &config, |tape, p, _, _, _| {
            build(tape, p)
        })
        .unwrap();
        let best = res.test_curve.iter().cloned().fold(f64::INFINITY, f64::min);
        let final_loss = (params[0] - 1.0) * (params[0] - 1.0);
        assert!(
            (final_loss - best).abs() < 1e-12,
            "returned loss {final_loss} vs best test {best}"
        );
    }
}
