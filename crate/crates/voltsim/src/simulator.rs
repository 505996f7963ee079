//! Per-asset market simulator: a martingale spot transform driven by one
//! latent, and a conditional flow over the compressed volatility state
//! driven by the rest. Code components are mapped onto standard normal
//! marginals before the dynamics stage, which tames the heavy-tailed
//! directions an autoencoder can produce and keeps every simulated code
//! inside the flow's output box. Both maps condition on the standardized
//! lagged market state, so simulation and latent extraction are exact
//! inverses.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::compression::{Autoencoder, Gaussianizer, Scaler};
use crate::dlv::DlvSurface;
use crate::error::{Result, VoltError};
use crate::flow::{train_flow, Flow, FlowConfig};
use crate::nn::{
    derive_stream, standard_normal, train_loop, Activation, DenseNet, TrainConfig, TrainResult,
};

const LN_2PI: f64 = 1.8378770664093453;

/// Standardized state components beyond this magnitude flag an explosion.
pub const EXPLOSION_THRESHOLD: f64 = 10.0;

/// One market day: the log return and the compressed volatility code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub log_return: f64,
    pub code: Vec<f64>,
}

impl MarketState {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.code.len());
        v.push(self.log_return);
        v.extend_from_slice(&self.code);
        v
    }

    pub fn dim(&self) -> usize {
        1 + self.code.len()
    }
}

/// Market states from a spot series and per-day volatility surfaces. The
/// first day has no return and is dropped, so the output has one state per
/// surface from day 1 on.
pub fn build_states(
    spots: &[f64],
    surfaces: &[DlvSurface],
    autoencoder: &Autoencoder,
) -> Result<Vec<MarketState>> {
    if spots.len() != surfaces.len() {
        return Err(VoltError::Shape(format!(
            "{} spots vs {} surfaces",
            spots.len(),
            surfaces.len()
        )));
    }
    if spots.len() < 2 {
        return Err(VoltError::Invalid("need at least two days".into()));
    }
    if !spots.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(VoltError::Invalid("spots must be positive".into()));
    }
    let mut states = Vec::with_capacity(spots.len() - 1);
    for t in 1..spots.len() {
        states.push(MarketState {
            log_return: (spots[t] / spots[t - 1]).ln(),
            code: autoencoder.encode(&surfaces[t])?,
        });
    }
    Ok(states)
}

/// One simulated path. `states` holds `horizon` steps unless the path
/// exploded, in which case it stops at the offending step.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub states: Vec<MarketState>,
    pub exploded: bool,
}

/// The calibrated per-asset simulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Simulator {
    autoencoder: Autoencoder,
    vol_net: DenseNet,
    code_flow: Flow,
    code_map: Gaussianizer,
    code_shift: CodeShift,
    state_scaler: Scaler,
    lag: usize,
}

impl Simulator {
    pub fn lag(&self) -> usize {
        self.lag
    }

    /// Market-state dimension (return plus code).
    pub fn state_dim(&self) -> usize {
        self.state_scaler.dim()
    }

    pub fn autoencoder(&self) -> &Autoencoder {
        &self.autoencoder
    }

    /// Assemble a simulator from separately trained pieces.
    pub fn assemble(
        autoencoder: Autoencoder,
        vol_net: DenseNet,
        code_flow: Flow,
        code_map: Gaussianizer,
        code_shift: CodeShift,
        state_scaler: Scaler,
        lag: usize,
    ) -> Result<Simulator> {
        let d = state_scaler.dim();
        if autoencoder.latent_dim() + 1 != d {
            return Err(VoltError::Shape("autoencoder latent width mismatch".into()));
        }
        if code_map.dim() + 1 != d {
            return Err(VoltError::Shape("code map width mismatch".into()));
        }
        if code_shift.dim() + 1 != d || code_shift.cond_dim() != lag * d {
            return Err(VoltError::Shape("code shift dimensions do not match the state".into()));
        }
        if code_flow.dim() + 1 != d || code_flow.cond_dim() != lag * d {
            return Err(VoltError::Shape("flow dimensions do not match the state".into()));
        }
        Ok(Simulator { autoencoder, vol_net, code_flow, code_map, code_shift, state_scaler, lag })
    }

    /// Train the spot volatility network and the code flow on a state
    /// history. `train_idx`/`test_idx` index the prediction samples, i.e.
    /// sample `i` targets state `i + lag`.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        states: &[MarketState],
        autoencoder: Autoencoder,
        lag: usize,
        train_idx: &[usize],
        test_idx: &[usize],
        vol_config: &TrainConfig,
        flow_config: &FlowConfig,
        flow_train: &TrainConfig,
    ) -> Result<(Simulator, TrainResult, TrainResult)> {
        let d = states.first().map(|s| s.dim()).unwrap_or(0);
        if autoencoder.latent_dim() + 1 != d {
            return Err(VoltError::Shape("autoencoder latent width mismatch".into()));
        }
        let inputs = TrainingInputs::prepare(states, lag, train_idx, test_idx)?;
        let (vol_net, vol_result) = train_vol_net(&inputs, train_idx, test_idx, vol_config)?;
        let (code_flow, flow_result) = train_flow(
            &inputs.codes,
            Some(&inputs.cond),
            train_idx,
            test_idx,
            flow_config,
            flow_train,
        )?;
        Ok((
            Simulator::assemble(
                autoencoder,
                vol_net,
                code_flow,
                inputs.code_map,
                inputs.code_shift,
                inputs.scaler,
                lag,
            )?,
            vol_result,
            flow_result,
        ))
    }

    /// Condition vector from the last `lag` states of a history.
    pub fn condition(&self, history: &[MarketState]) -> Result<Vec<f64>> {
        condition_vec(&self.code_map, &self.state_scaler, history, self.lag)
    }

    /// Instantaneous spot volatility implied by the condition.
    pub fn spot_vol(&self, cond: &[f64]) -> Result<f64> {
        Ok(self.vol_net.forward(cond)?[0].exp())
    }

    /// Advance one day from `history` with latent vector `z` (length
    /// `state_dim`). The first component drives the martingale spot map;
    /// the rest drive the code flow in normalized-marginal space.
    pub fn step(&self, history: &[MarketState], z: &[f64]) -> Result<MarketState> {
        if z.len() != self.state_dim() {
            return Err(VoltError::Shape("latent width mismatch".into()));
        }
        let cond = self.condition(history)?;
        let nu = self.spot_vol(&cond)?;
        let log_return = z[0] * nu - 0.5 * nu * nu;
        let resid = self.code_flow.forward(&z[1..], &cond)?;
        let pred = self.code_shift.predict(&cond)?;
        let g: Vec<f64> = resid.iter().zip(&pred).map(|(r, p)| r + p).collect();
        let code = self.code_map.inverse_row(&g)?;
        Ok(MarketState { log_return, code })
    }

    /// Latent vector that [`Self::step`] would need to produce `state` from
    /// `history`; exact inverse of the step map.
    pub fn invert_step(&self, history: &[MarketState], state: &MarketState) -> Result<Vec<f64>> {
        let cond = self.condition(history)?;
        let nu = self.spot_vol(&cond)?;
        let mut z = Vec::with_capacity(self.state_dim());
        z.push((state.log_return + 0.5 * nu * nu) / nu);
        let g = self.code_map.transform_row(&state.code)?;
        let pred = self.code_shift.predict(&cond)?;
        let resid: Vec<f64> = g.iter().zip(&pred).map(|(gi, p)| gi - p).collect();
        let (zc, _) = self.code_flow.inverse(&resid, &cond)?;
        z.extend(zc);
        Ok(z)
    }

    /// Latents for every prediction sample in a state history, one row per
    /// sample (`states.len() - lag` rows).
    pub fn invert_latents(&self, states: &[MarketState]) -> Result<Tensor> {
        if states.len() <= self.lag {
            return Err(VoltError::Invalid("state history shorter than the lag".into()));
        }
        let rows: Vec<Vec<f64>> = (self.lag..states.len())
            .map(|t| self.invert_step(&states[..t], &states[t]))
            .collect::<Result<_>>()?;
        Ok(Tensor::from_rows(&rows))
    }

    /// Whether a state falls outside the trusted region of the fit.
    pub fn is_explosive(&self, state: &MarketState) -> Result<bool> {
        let scaled =
            self.state_scaler.transform_row(&normalized_vec(&self.code_map, state)?)?;
        Ok(scaled.iter().any(|v| v.abs() > EXPLOSION_THRESHOLD))
    }

    /// Simulate `n_paths` paths of `horizon` days from the given history.
    /// Path `k` uses the stream `derive_stream(master_seed, 0, k)`, drawing
    /// `state_dim` normals per day.
    pub fn sample_paths(
        &self,
        history: &[MarketState],
        n_paths: usize,
        horizon: usize,
        master_seed: u64,
    ) -> Result<Vec<PathSample>> {
        if history.len() < self.lag {
            return Err(VoltError::Invalid("history shorter than the lag".into()));
        }
        let d = self.state_dim();
        let mut out = Vec::with_capacity(n_paths);
        for k in 0..n_paths {
            let mut rng = derive_stream(master_seed, 0, k as u64);
            let mut hist = history.to_vec();
            let mut states = Vec::with_capacity(horizon);
            let mut exploded = false;
            for _ in 0..horizon {
                let z: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
                let next = self.step(&hist, &z)?;
                let explosive = self.is_explosive(&next)?;
                states.push(next.clone());
                hist.push(next);
                if explosive {
                    exploded = true;
                    break;
                }
            }
            out.push(PathSample { states, exploded });
        }
        Ok(out)
    }

    /// Volatility surface for one state.
    pub fn decode_state(&self, state: &MarketState) -> Result<DlvSurface> {
        self.autoencoder.decode_to_dlvs(&state.code)
    }

    /// Spot levels along a path, starting from `spot0` before the first step.
    pub fn spot_path(&self, spot0: f64, states: &[MarketState]) -> Vec<f64> {
        let mut out = Vec::with_capacity(states.len() + 1);
        let mut s = spot0;
        out.push(s);
        for st in states {
            s *= st.log_return.exp();
            out.push(s);
        }
        out
    }
}

/// Precomputed supervised samples shared by the volatility and flow stages.
/// Sample `i` has the condition built from states `i..i+lag` and targets
/// state `i + lag`. The code map, the code shift, and the scaler are all
/// fit on training rows only; `codes` holds the shift residuals of the
/// normalized-marginal code targets, which the flow trains on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingInputs {
    pub code_map: Gaussianizer,
    pub code_shift: CodeShift,
    pub scaler: Scaler,
    pub cond: Tensor,
    pub returns: Tensor,
    pub codes: Tensor,
    pub lag: usize,
}

impl TrainingInputs {
    pub fn prepare(
        states: &[MarketState],
        lag: usize,
        train_idx: &[usize],
        test_idx: &[usize],
    ) -> Result<Self> {
        if lag == 0 {
            return Err(VoltError::Config("lag must be positive".into()));
        }
        if states.len() <= lag + 1 {
            return Err(VoltError::Invalid("state history shorter than the lag".into()));
        }
        let n_samples = states.len() - lag;
        for &i in train_idx.iter().chain(test_idx) {
            if i >= n_samples {
                return Err(VoltError::Invalid("sample index out of range".into()));
            }
        }
        let code_rows: Vec<Vec<f64>> = states.iter().map(|s| s.code.clone()).collect();
        let target_idx: Vec<usize> = train_idx.iter().map(|&i| i + lag).collect();
        let code_map = Gaussianizer::fit(&Tensor::from_rows(&code_rows), &target_idx)?;

        let train_rows: Vec<Vec<f64>> = train_idx
            .iter()
            .map(|&i| normalized_vec(&code_map, &states[i + lag]))
            .collect::<Result<_>>()?;
        let scaler = Scaler::fit(&Tensor::from_rows(&train_rows))?;

        let mut conds = Vec::with_capacity(n_samples);
        let mut returns = Vec::with_capacity(n_samples);
        let mut g_codes = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let t = i + lag;
            conds.push(condition_vec(&code_map, &scaler, &states[..t], lag)?);
            returns.push(vec![states[t].log_return]);
            g_codes.push(code_map.transform_row(&states[t].code)?);
        }
        let cond = Tensor::from_rows(&conds);
        let g_codes = Tensor::from_rows(&g_codes);
        let code_shift = CodeShift::fit(&cond, &g_codes, train_idx)?;
        let codes = Tensor::from_rows(
            &(0..n_samples)
                .map(|i| {
                    let pred = code_shift.predict(cond.row(i))?;
                    Ok(g_codes
                        .row(i)
                        .iter()
                        .zip(&pred)
                        .map(|(g, p)| g - p)
                        .collect::<Vec<f64>>())
                })
                .collect::<Result<Vec<_>>>()?,
        );
        Ok(TrainingInputs {
            code_map,
            code_shift,
            scaler,
            cond,
            returns: Tensor::from_rows(&returns),
            codes,
            lag,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.cond.rows()
    }
}

/// Train the spot volatility network on prepared inputs.
pub fn train_vol_net(
    inputs: &TrainingInputs,
    train_idx: &[usize],
    test_idx: &[usize],
    config: &TrainConfig,
) -> Result<(DenseNet, TrainResult)> {
    let mut rng = rand::SeedableRng::seed_from_u64(config.seed);
    let vol_net = DenseNet::new(&[inputs.cond.cols(), 64, 64, 1], Activation::Relu, &mut rng);
    let mut params = Vec::new();
    vol_net.flatten_into(&mut params);
    let net_ref = vol_net.clone();
    let cond_ref = inputs.cond.clone();
    let r_all = inputs.returns.clone();
    let result = train_loop(&mut params, train_idx, test_idx, config, {
        move |tape, p, batch, dr, rng| {
            let mut net = net_ref.clone();
            net.set_flat(p);
            let leaves = net.register(tape);
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| cond_ref.row(i).to_vec()).collect();
            let targets: Vec<Vec<f64>> = batch.iter().map(|&i| r_all.row(i).to_vec()).collect();
            let inp = tape.leaf(Tensor::from_rows(&rows));
            let r = tape.leaf(Tensor::from_rows(&targets));
            let out = net.forward_tape(tape, inp, &leaves, dr.map(|rate| (rate, &mut *rng)));
            let loss = vol_nll_graph(tape, out, r);
            (loss, leaves)
        }
    })?;
    let mut vol_net = vol_net;
    vol_net.set_flat(&params);
    Ok((vol_net, result))
}

/// Linear least-squares predictor of the next normalized code from the
/// condition vector. The flow then only has to model the prediction
/// residual, which is several times narrower than the code marginals, so
/// its spline knots resolve the conditional density.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeShift {
    /// One row of regression weights per code component.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl CodeShift {
    /// Fit by ordinary least squares on the training rows.
    pub fn fit(cond: &Tensor, targets: &Tensor, train_idx: &[usize]) -> Result<CodeShift> {
        if cond.rows() != targets.rows() {
            return Err(VoltError::Shape("condition and target row counts differ".into()));
        }
        let p = cond.cols();
        if train_idx.len() <= p + 1 {
            return Err(VoltError::Invalid("too few rows for the code shift fit".into()));
        }
        let mut x = DMatrix::<f64>::zeros(train_idx.len(), p + 1);
        let mut y = DMatrix::<f64>::zeros(train_idx.len(), targets.cols());
        for (r, &i) in train_idx.iter().enumerate() {
            x[(r, 0)] = 1.0;
            for c in 0..p {
                x[(r, c + 1)] = cond.get(i, c);
            }
            for c in 0..targets.cols() {
                y[(r, c)] = targets.get(i, c);
            }
        }
        let beta = x
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| VoltError::Invalid(format!("code shift fit failed: {e}")))?;
        let mut weights = Vec::with_capacity(targets.cols());
        let mut bias = Vec::with_capacity(targets.cols());
        for c in 0..targets.cols() {
            bias.push(beta[(0, c)]);
            weights.push((0..p).map(|j| beta[(j + 1, c)]).collect());
        }
        Ok(CodeShift { weights, bias })
    }

    pub fn cond_dim(&self) -> usize {
        self.weights.first().map(|w| w.len()).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn predict(&self, cond: &[f64]) -> Result<Vec<f64>> {
        if cond.len() != self.cond_dim() {
            return Err(VoltError::Shape("condition width mismatch".into()));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(cond).map(|(wi, ci)| wi * ci).sum::<f64>())
            .collect())
    }
}

/// State vector with the code mapped onto normalized marginals.
fn normalized_vec(code_map: &Gaussianizer, state: &MarketState) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(state.dim());
    v.push(state.log_return);
    v.extend(code_map.transform_row(&state.code)?);
    Ok(v)
}

fn condition_vec(
    code_map: &Gaussianizer,
    scaler: &Scaler,
    history: &[MarketState],
    lag: usize,
) -> Result<Vec<f64>> {
    if history.len() < lag {
        return Err(VoltError::Invalid(format!(
            "need {lag} past states, have {}",
            history.len()
        )));
    }
    let mut cond = Vec::with_capacity(lag * scaler.dim());
    // most recent first
    for k in 1..=lag {
        let st = &history[history.len() - k];
        cond.extend(scaler.transform_row(&normalized_vec(code_map, st)?)?);
    }
    Ok(cond)
}

/// Negative log-likelihood of observed returns under the martingale spot
/// map: `r = z nu - nu^2 / 2` with `nu = exp(net output)`.
/// Tape graph of the mean spot volatility negative log-likelihood.
pub fn vol_nll_graph(
    tape: &Tape,
    ln_nu: crate::autodiff::Var,
    r: crate::autodiff::Var,
) -> crate::autodiff::Var {
    let nu = tape.exp(ln_nu);
    let nu2 = tape.square(nu);
    let shifted = tape.add(r, tape.scale(nu2, 0.5));
    let quad = tape.div(tape.square(shifted), tape.scale(nu2, 2.0));
    let per_sample = tape.add(quad, ln_nu);
    tape.add_scalar(tape.mean(per_sample), 0.5 * LN_2PI)
}

/// Scalar-path version of the martingale return likelihood, for reporting.
pub fn vol_nll(nu: f64, r: f64) -> f64 {
    0.5 * (LN_2PI + 2.0 * nu.ln()) + {
        let e = r + 0.5 * nu * nu;
        e * e / (2.0 * nu * nu)
    }
}
