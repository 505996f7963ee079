//! Compression of local-volatility grids: standard scaling of log
//! volatilities, a dense autoencoder and a PCA baseline.
//!
//! Decoded codes always yield valid volatility surfaces: the decoder output
//! is exponentiated and clamped to the volatility bounds, so any code maps
//! to an arbitrage-free call grid.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dlv::{DlvSurface, StrikeGrid, VolBounds};
use crate::error::{Result, VoltError};
use crate::nn::{train_loop, Activation, DenseNet, TrainConfig, TrainResult};

/// Per-column standard scaler (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Scaler {
    /// Fit means and population standard deviations column-wise. A column
    /// with zero variance cannot be standardized and is an error.
    pub fn fit(data: &Tensor) -> Result<Self> {
        if data.rows() < 2 {
            return Err(VoltError::Invalid("scaler needs at least 2 rows".into()));
        }
        let (rows, cols) = (data.rows(), data.cols());
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += data.get(r, c);
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for (c, v) in var.iter_mut().enumerate() {
                let d = data.get(r, c) - mean[c];
                *v += d * d;
            }
        }
        let mut std = vec![0.0; cols];
        for (c, v) in var.iter().enumerate() {
            let s = (v / rows as f64).sqrt();
            if s < 1e-12 {
                return Err(VoltError::Invalid(format!("column {c} has zero variance")));
            }
            std[c] = s;
        }
        Ok(Scaler { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(VoltError::Shape("scaler row width mismatch".into()));
        }
        Ok(row.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect())
    }

    pub fn inverse_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(VoltError::Shape("scaler row width mismatch".into()));
        }
        Ok(row.iter().zip(&self.mean).zip(&self.std).map(|((z, m), s)| z * s + m).collect())
    }

    pub fn transform(&self, data: &Tensor) -> Result<Tensor> {
        let mut out = data.clone();
        for r in 0..out.rows() {
            let t = self.transform_row(data.row(r))?;
            out.data_mut()[r * data.cols()..(r + 1) * data.cols()].copy_from_slice(&t);
        }
        Ok(out)
    }

    pub fn inverse(&self, data: &Tensor) -> Result<Tensor> {
        let mut out = data.clone();
        for r in 0..out.rows() {
            let t = self.inverse_row(data.row(r))?;
            out.data_mut()[r * data.cols()..(r + 1) * data.cols()].copy_from_slice(&t);
        }
        Ok(out)
    }
}

/// Per-column monotone map onto standard normal marginals, fitted as the
/// empirical quantile transform with linear interpolation between training
/// points and linear extrapolation beyond them. Compresses heavy-tailed
/// code components into a well-conditioned space for the dynamics stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussianizer {
    /// Sorted training values per column.
    knots: Vec<Vec<f64>>,
    /// Normal quantiles shared by every column, same length as each knot row.
    z: Vec<f64>,
}

impl Gaussianizer {
    /// Fit on the rows of `data` selected by `idx`.
    pub fn fit(data: &Tensor, idx: &[usize]) -> Result<Self> {
        if idx.len() < 2 {
            return Err(VoltError::Invalid("gaussianizer needs at least 2 rows".into()));
        }
        let m = idx.len();
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let z: Vec<f64> =
            (0..m).map(|i| normal.inverse_cdf((i as f64 + 0.5) / m as f64)).collect();
        let mut knots = Vec::with_capacity(data.cols());
        for c in 0..data.cols() {
            let mut col: Vec<f64> = idx.iter().map(|&r| data.get(r, c)).collect();
            col.sort_by(f64::total_cmp);
            if !(col[m - 1] > col[0]) {
                return Err(VoltError::Invalid(format!("column {c} has no spread")));
            }
            knots.push(col);
        }
        Ok(Gaussianizer { knots, z })
    }

    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    /// Piecewise-linear interpolation through `(xs, ys)` knots with linear
    /// extrapolation from the outermost strictly increasing segment.
    fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
        let m = xs.len();
        // index of the first knot above x
        let hi = xs.partition_point(|v| *v < x);
        let (mut i, mut j) = if hi == 0 {
            (0, 1)
        } else if hi == m {
            (m - 2, m - 1)
        } else {
            (hi - 1, hi)
        };
        // widen past ties so the slope is finite
        while xs[j] <= xs[i] && j + 1 < m {
            j += 1;
        }
        while xs[j] <= xs[i] && i > 0 {
            i -= 1;
        }
        ys[i] + (x - xs[i]) * (ys[j] - ys[i]) / (xs[j] - xs[i])
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(VoltError::Shape("gaussianizer row width mismatch".into()));
        }
        Ok(row
            .iter()
            .zip(&self.knots)
            .map(|(&x, k)| Self::interp(k, &self.z, x))
            .collect())
    }

    pub fn inverse_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(VoltError::Shape("gaussianizer row width mismatch".into()));
        }
        Ok(row
            .iter()
            .zip(&self.knots)
            .map(|(&z, k)| Self::interp(&self.z, k, z))
            .collect())
    }

    pub fn transform(&self, data: &Tensor) -> Result<Tensor> {
        let mut out = data.clone();
        for r in 0..out.rows() {
            let t = self.transform_row(data.row(r))?;
            out.data_mut()[r * data.cols()..(r + 1) * data.cols()].copy_from_slice(&t);
        }
        Ok(out)
    }
}

/// Stack log volatilities into a day-by-node matrix.
pub fn log_nodes(surfaces: &[DlvSurface]) -> Result<Tensor> {
    if surfaces.is_empty() {
        return Err(VoltError::Invalid("no surfaces".into()));
    }
    let grid = surfaces[0].grid();
    let cols = grid.node_count();
    let mut data = Vec::with_capacity(surfaces.len() * cols);
    for s in surfaces {
        if s.grid() != grid {
            return Err(VoltError::Grid("surfaces use different grids".into()));
        }
        data.extend(s.values().iter().map(|v| v.ln()));
    }
    Ok(Tensor::new(surfaces.len(), cols, data))
}

/// Dense autoencoder over standard-scaled log volatility grids. The input
/// scaler is part of the model so that encode/decode are self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Autoencoder {
    encoder: DenseNet,
    decoder: DenseNet,
    scaler: Scaler,
    grid: StrikeGrid,
    bounds: VolBounds,
    latent_dim: usize,
}

impl Autoencoder {
    /// Train on log volatility grids with a mean-squared reconstruction loss
    /// in scaled space. Hidden layers are 64-wide rectifier layers; the code
    /// and output layers are linear.
    pub fn train(
        surfaces: &[DlvSurface],
        latent_dim: usize,
        train_idx: &[usize],
        test_idx: &[usize],
        config: &TrainConfig,
    ) -> Result<(Autoencoder, TrainResult)> {
        if latent_dim == 0 {
            return Err(VoltError::Config("latent_dim must be positive".into()));
        }
        let grid = surfaces
            .first()
            .ok_or_else(|| VoltError::Invalid("no surfaces".into()))?
            .grid()
            .clone();
        let bounds = surfaces[0].bounds();
        let mn = grid.node_count();
        if latent_dim >= mn {
            return Err(VoltError::Config("latent_dim must be smaller than the grid".into()));
        }
        let raw = log_nodes(surfaces)?;
        let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| raw.row(i).to_vec()).collect();
        let scaler = Scaler::fit(&Tensor::from_rows(&train_rows))?;

        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let encoder = DenseNet::new(&[mn, 64, 64, latent_dim], Activation::Relu, &mut rng);
        let decoder = DenseNet::new(&[latent_dim, 64, 64, mn], Activation::Relu, &mut rng);
        let init = Autoencoder { encoder, decoder, scaler, grid, bounds, latent_dim };
        Self::train_from(&init, surfaces, train_idx, test_idx, config)
    }

    /// Continue training from an already assembled model (for example one
    /// produced by [`Self::widen`]). The scaler is reused as-is.
    pub fn train_from(
        init: &Autoencoder,
        surfaces: &[DlvSurface],
        train_idx: &[usize],
        test_idx: &[usize],
        config: &TrainConfig,
    ) -> Result<(Autoencoder, TrainResult)> {
        let first = surfaces.first().ok_or_else(|| VoltError::Invalid("no surfaces".into()))?;
        if first.grid() != &init.grid {
            return Err(VoltError::Grid("surface grid does not match the model".into()));
        }
        let raw = log_nodes(surfaces)?;
        let scaler = init.scaler.clone();
        let scaled = scaler.transform(&raw)?;
        let encoder = init.encoder.clone();
        let decoder = init.decoder.clone();

        let mut params = Vec::new();
        encoder.flatten_into(&mut params);
        decoder.flatten_into(&mut params);
        let enc_count = encoder.param_count();

        let enc_ref = encoder.clone();
        let dec_ref = decoder.clone();
        let result = train_loop(&mut params, train_idx, test_idx, config, {
            let scaled = scaled.clone();
            move |tape, p, batch, dr, rng| {
                let mut enc = enc_ref.clone();
                let mut dec = dec_ref.clone();
                enc.set_flat(&p[..enc_count]);
                dec.set_flat(&p[enc_count..]);
                let mut leaves = enc.register(tape);
                leaves.extend(dec.register(tape));
                let rows: Vec<Vec<f64>> = batch.iter().map(|&i| scaled.row(i).to_vec()).collect();
                let inp = tape.leaf(Tensor::from_rows(&rows));
                let n_enc = leaves.len() - dec.param_count_leaves();
                let code = enc.forward_tape(
                    tape,
                    inp,
                    &leaves[..n_enc],
                    dr.map(|r| (r, &mut *rng)),
                );
                let out = dec.forward_tape(
                    tape,
                    code,
                    &leaves[n_enc..],
                    dr.map(|r| (r, &mut *rng)),
                );
                let loss = tape.mean(tape.square(tape.sub(out, inp)));
                (loss, leaves)
            }
        })?;

        let mut enc = encoder;
        let mut dec = decoder;
        enc.set_flat(&params[..enc_count]);
        dec.set_flat(&params[enc_count..]);
        Ok((
            Autoencoder {
                encoder: enc,
                decoder: dec,
                scaler,
                grid: init.grid.clone(),
                bounds: init.bounds,
                latent_dim: init.latent_dim,
            },
            result,
        ))
    }

    /// Model with one more latent dimension. The new code unit is wired
    /// with small weights, so the widened model starts from the current
    /// reconstruction quality and training can only refine it.
    pub fn widen(&self, rng: &mut ChaCha12Rng) -> Autoencoder {
        let scale = 1e-2;
        Autoencoder {
            encoder: self.encoder.widen_output(1, scale, rng),
            decoder: self.decoder.widen_input(1, scale, rng),
            scaler: self.scaler.clone(),
            grid: self.grid.clone(),
            bounds: self.bounds,
            latent_dim: self.latent_dim + 1,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn grid(&self) -> &StrikeGrid {
        &self.grid
    }

    pub fn bounds(&self) -> VolBounds {
        self.bounds
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    /// Code for one surface.
    pub fn encode(&self, surface: &DlvSurface) -> Result<Vec<f64>> {
        if surface.grid() != &self.grid {
            return Err(VoltError::Grid("surface grid does not match the model".into()));
        }
        let log: Vec<f64> = surface.values().iter().map(|v| v.ln()).collect();
        self.encoder.forward(&self.scaler.transform_row(&log)?)
    }

    pub fn encode_all(&self, surfaces: &[DlvSurface]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> =
            surfaces.iter().map(|s| self.encode(s)).collect::<Result<_>>()?;
        Ok(Tensor::from_rows(&rows))
    }

    /// Reconstructed scaled log grid for a code (no exponentiation).
    pub fn decode_scaled(&self, code: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(code)
    }

    /// Decode a code to a volatility surface. The output is clamped into
    /// the volatility bounds, so it is always valid.
    pub fn decode_to_dlvs(&self, code: &[f64]) -> Result<DlvSurface> {
        let scaled = self.decoder.forward(code)?;
        let log = self.scaler.inverse_row(&scaled)?;
        let vols: Vec<f64> = log.iter().map(|l| self.bounds.clamp(l.exp())).collect();
        DlvSurface::new(self.grid.clone(), vols, self.bounds)
    }

    /// Mean squared reconstruction error in scaled log space over the given
    /// surface indices.
    pub fn reconstruction_mse(&self, surfaces: &[DlvSurface], idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Err(VoltError::Invalid("empty index set".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in idx {
            let log: Vec<f64> = surfaces[i].values().iter().map(|v| v.ln()).collect();
            let scaled = self.scaler.transform_row(&log)?;
            let code = self.encoder.forward(&scaled)?;
            let rec = self.decoder.forward(&code)?;
            for (a, b) in scaled.iter().zip(&rec) {
                total += (a - b) * (a - b);
                count += 1;
            }
        }
        Ok(total / count as f64)
    }
}

trait ParamLeafCount {
    fn param_count_leaves(&self) -> usize;
}

impl ParamLeafCount for DenseNet {
    fn param_count_leaves(&self) -> usize {
        2 * (self.sizes().len() - 1)
    }
}

/// PCA baseline fitted on scaled data. Components are unit-norm rows sorted
/// by descending explained variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca {
    mean: Vec<f64>,
    /// `k x dim`
    components: Tensor,
}

impl Pca {
    pub fn fit(data: &Tensor, k: usize) -> Result<Self> {
        let (rows, cols) = (data.rows(), data.cols());
        if rows < 2 {
            return Err(VoltError::Invalid("pca needs at least 2 rows".into()));
        }
        if k == 0 || k > cols {
            return Err(VoltError::Config("pca rank out of range".into()));
        }
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += data.get(r, c);
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(cols, cols);
        for r in 0..rows {
            for a in 0..cols {
                let da = data.get(r, a) - mean[a];
                for b in a..cols {
                    let db = data.get(r, b) - mean[b];
                    cov[(a, b)] += da * db / rows as f64;
                }
            }
        }
        for a in 0..cols {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut comp = Vec::with_capacity(k * cols);
        for &c in order.iter().take(k) {
            comp.extend(eig.eigenvectors.column(c).iter().copied());
        }
        Ok(Pca { mean, components: Tensor::new(k, cols, comp) })
    }

    pub fn rank(&self) -> usize {
        self.components.rows()
    }

    pub fn project_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(VoltError::Shape("pca row width mismatch".into()));
        }
        let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((0..self.rank())
            .map(|k| {
                self.components.row(k).iter().zip(&centered).map(|(c, x)| c * x).sum()
            })
            .collect())
    }

    pub fn reconstruct_row(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.rank() {
            return Err(VoltError::Shape("pca coefficient count mismatch".into()));
        }
        let mut out = self.mean.clone();
        for (k, &a) in coeffs.iter().enumerate() {
            for (o, c) in out.iter_mut().zip(self.components.row(k)) {
                *o += a * c;
            }
        }
        Ok(out)
    }

    /// Mean squared reconstruction error over the given rows.
    pub fn mse(&self, data: &Tensor, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Err(VoltError::Invalid("empty index set".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in idx {
            let row = data.row(i);
            let rec = self.reconstruct_row(&self.project_row(row)?)?;
            for (a, b) in row.iter().zip(&rec) {
                total += (a - b) * (a - b);
                count += 1;
            }
        }
        Ok(total / count as f64)
    }
}
