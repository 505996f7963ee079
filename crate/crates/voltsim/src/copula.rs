//! Joint calibration of several single-asset simulators through a Gaussian
//! copula over the stacked latent process. The copula's diagonal blocks are
//! pinned to the identity so each marginal simulator is untouched; an
//! unconditional joint flow is available as a benchmark noise source.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, VoltError};
use crate::flow::{train_flow, Flow, FlowConfig};
use crate::nn::{derive_stream, standard_normal, TrainConfig, TrainResult};
use crate::simulator::{MarketState, PathSample, Simulator};

const LN_2PI: f64 = 1.8378770664093453;
const EIG_FLOOR: f64 = 1e-10;
const PROJ_TOL: f64 = 1e-8;
const PROJ_MAX_ITER: usize = 100;

/// Stacked per-asset latents, one row per common date.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointLatentSeries {
    data: Tensor,
    n_assets: usize,
    dim: usize,
    dates: Vec<String>,
    dropped: usize,
}

impl JointLatentSeries {
    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    /// Per-asset latent width.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    /// Dates discarded by the inner join.
    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

/// Inner-join per-asset latent series on their dates. Every asset must have
/// the same latent width and strictly increasing dates.
pub fn stack_latents(per_asset: &[(Vec<String>, Tensor)]) -> Result<JointLatentSeries> {
    if per_asset.is_empty() {
        return Err(VoltError::Invalid("no assets".into()));
    }
    let dim = per_asset[0].1.cols();
    let mut total_rows = 0usize;
    for (dates, lat) in per_asset {
        if lat.cols() != dim {
            return Err(VoltError::Shape("latent widths differ across assets".into()));
        }
        if dates.len() != lat.rows() {
            return Err(VoltError::Shape("date count does not match latent rows".into()));
        }
        if !dates.windows(2).all(|w| w[0] < w[1]) {
            return Err(VoltError::Data("dates must be strictly increasing".into()));
        }
        total_rows += dates.len();
    }
    let mut common: Vec<String> = per_asset[0].0.clone();
    for (dates, _) in &per_asset[1..] {
        common.retain(|d| dates.binary_search(d).is_ok());
    }
    if common.is_empty() {
        return Err(VoltError::Data("no overlapping dates across assets".into()));
    }
    let n_assets = per_asset.len();
    let mut data = Vec::with_capacity(common.len() * n_assets * dim);
    for date in &common {
        for (dates, lat) in per_asset {
            let row = dates.binary_search(date).unwrap();
            data.extend_from_slice(lat.row(row));
        }
    }
    let dropped = total_rows - common.len() * n_assets;
    Ok(JointLatentSeries {
        data: Tensor::new(common.len(), n_assets * dim, data),
        n_assets,
        dim,
        dates: common,
        dropped,
    })
}

/// Gaussian copula over the stacked latents: covariance with exact identity
/// diagonal blocks and its lower-triangular factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianCopula {
    sigma: Tensor,
    factor: Tensor,
    n_assets: usize,
    dim: usize,
    /// Estimated latent mean, reported as a diagnostic; sampling uses 0.
    mu_hat: Vec<f64>,
}

fn set_identity_blocks(m: &mut DMatrix<f64>, n_assets: usize, dim: usize) {
    for a in 0..n_assets {
        for i in 0..dim {
            for j in 0..dim {
                m[(a * dim + i, a * dim + j)] = if i == j { 1.0 } else { 0.0 };
            }
        }
    }
}

fn eigen_floor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for k in 0..m.ncols() {
        let lam = eig.eigenvalues[k].max(EIG_FLOOR);
        let v = eig.eigenvectors.column(k);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[(i, j)] += lam * v[i] * v[j];
            }
        }
    }
    // symmetrize against accumulation noise
    for i in 0..m.nrows() {
        for j in 0..i {
            let s = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    out
}

/// Project a symmetric matrix onto {PSD} ∩ {identity diagonal blocks} by
/// alternating projections; the returned matrix has exact identity blocks.
pub fn project_block_psd(
    sigma: &Tensor,
    n_assets: usize,
    dim: usize,
) -> Result<Tensor> {
    let n = n_assets * dim;
    if sigma.rows() != n || sigma.cols() != n {
        return Err(VoltError::Shape("covariance size mismatch".into()));
    }
    let mut cur = DMatrix::from_row_slice(n, n, sigma.data());
    set_identity_blocks(&mut cur, n_assets, dim);
    for _ in 0..PROJ_MAX_ITER {
        let prev = cur.clone();
        cur = eigen_floor(&cur);
        set_identity_blocks(&mut cur, n_assets, dim);
        let diff = (&cur - &prev).norm();
        if diff < PROJ_TOL {
            return Ok(Tensor::new(n, n, cur.as_slice().to_vec()));
        }
    }
    let residual = {
        let floored = eigen_floor(&cur);
        (&floored - &cur).norm()
    };
    Err(VoltError::Numerical(format!(
        "block projection did not converge; residual {residual:.3e}"
    )))
}

fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.l())
}

impl GaussianCopula {
    /// Estimate the block covariance from a joint latent series (unbiased
    /// divisor), pin the diagonal blocks to the identity, restore positive
    /// semidefiniteness and factorize.
    pub fn estimate(series: &JointLatentSeries) -> Result<Self> {
        let t = series.data.rows();
        let n = series.n_assets * series.dim;
        if t < n + 1 {
            return Err(VoltError::Invalid(format!(
                "need at least {} rows for a {n}x{n} covariance, have {t}",
                n + 1
            )));
        }
        let mut mu = vec![0.0; n];
        for r in 0..t {
            for (c, m) in mu.iter_mut().enumerate() {
                *m += series.data.get(r, c);
            }
        }
        for m in mu.iter_mut() {
            *m /= t as f64;
        }
        let mut cov = vec![0.0; n * n];
        for r in 0..t {
            for a in 0..n {
                let da = series.data.get(r, a) - mu[a];
                for b in a..n {
                    cov[a * n + b] += da * (series.data.get(r, b) - mu[b]);
                }
            }
        }
        let divisor = (t - 1) as f64;
        for a in 0..n {
            for b in a..n {
                let v = cov[a * n + b] / divisor;
                cov[a * n + b] = v;
                cov[b * n + a] = v;
            }
        }
        let sigma = project_block_psd(&Tensor::new(n, n, cov), series.n_assets, series.dim)?;

        // the factor must exist with the identity blocks intact; shrink the
        // cross blocks toward independence if flooring left a zero eigenvalue
        let mut m = DMatrix::from_row_slice(n, n, sigma.data());
        let mut shrink = 1.0;
        let factor = loop {
            if let Some(l) = cholesky_lower(&m) {
                break l;
            }
            shrink *= 0.999;
            if shrink < 0.9 {
                return Err(VoltError::Numerical("copula factorization failed".into()));
            }
            m = DMatrix::from_row_slice(n, n, sigma.data());
            for i in 0..n {
                for j in 0..n {
                    if i / series.dim != j / series.dim {
                        m[(i, j)] *= shrink;
                    }
                }
            }
        };
        let sigma_final = Tensor::new(n, n, m.as_slice().to_vec());
        let factor_t = Tensor::new(n, n, factor.transpose().as_slice().to_vec());
        Ok(GaussianCopula {
            sigma: sigma_final,
            factor: factor_t,
            n_assets: series.n_assets,
            dim: series.dim,
            mu_hat: mu,
        })
    }

    /// Identity copula for `n_assets` independent simulators.
    pub fn identity(n_assets: usize, dim: usize) -> Self {
        let n = n_assets * dim;
        let mut eye = Tensor::zeros(n, n);
        for i in 0..n {
            eye.set(i, i, 1.0);
        }
        GaussianCopula {
            sigma: eye.clone(),
            factor: eye,
            n_assets,
            dim,
            mu_hat: vec![0.0; n],
        }
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    pub fn factor(&self) -> &Tensor {
        &self.factor
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mu_hat(&self) -> &[f64] {
        &self.mu_hat
    }

    pub fn total_dim(&self) -> usize {
        self.n_assets * self.dim
    }

    /// Apply the lower-triangular factor to a standard-normal vector. Zero
    /// factor entries are skipped, so the identity copula returns the input
    /// bit for bit.
    pub fn correlate(&self, z: &[f64]) -> Result<Vec<f64>> {
        let n = self.total_dim();
        if z.len() != n {
            return Err(VoltError::Shape("noise width mismatch".into()));
        }
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            let mut first = true;
            for j in 0..=i {
                let l = self.factor.get(i, j);
                if l == 0.0 {
                    continue;
                }
                let term = l * z[j];
                if first {
                    acc = term;
                    first = false;
                } else {
                    acc += term;
                }
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// `count` rows of correlated noise.
    pub fn sample_joint_noise(&self, count: usize, seed: u64) -> Result<Tensor> {
        let n = self.total_dim();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(count * n);
        for _ in 0..count {
            let z: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
            data.extend(self.correlate(&z)?);
        }
        Ok(Tensor::new(count, n, data))
    }

    /// Average negative log-likelihood per row of the zero-mean Gaussian
    /// with this covariance.
    pub fn nll(&self, rows: &Tensor) -> Result<f64> {
        let n = self.total_dim();
        if rows.cols() != n {
            return Err(VoltError::Shape("row width mismatch".into()));
        }
        let l = DMatrix::from_row_slice(n, n, self.factor.data());
        let mut ln_det = 0.0;
        for i in 0..n {
            ln_det += 2.0 * l[(i, i)].ln();
        }
        let mut total = 0.0;
        for r in 0..rows.rows() {
            // solve L w = z, quadratic form = |w|^2
            let mut w = rows.row(r).to_vec();
            for i in 0..n {
                let mut acc = w[i];
                for j in 0..i {
                    acc -= l[(i, j)] * w[j];
                }
                w[i] = acc / l[(i, i)];
            }
            let quad: f64 = w.iter().map(|x| x * x).sum();
            total += 0.5 * (n as f64 * LN_2PI + ln_det + quad);
        }
        Ok(total / rows.rows() as f64)
    }
}

/// Several simulators coupled through one noise source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSimulator {
    simulators: Vec<Simulator>,
    copula: GaussianCopula,
}

impl JointSimulator {
    pub fn new(simulators: Vec<Simulator>, copula: GaussianCopula) -> Result<Self> {
        if simulators.is_empty() {
            return Err(VoltError::Invalid("no simulators".into()));
        }
        if copula.n_assets() != simulators.len() {
            return Err(VoltError::Shape("copula asset count mismatch".into()));
        }
        for sim in &simulators {
            if sim.state_dim() != copula.dim() {
                return Err(VoltError::Shape("latent width mismatch across assets".into()));
            }
        }
        Ok(JointSimulator { simulators, copula })
    }

    pub fn simulators(&self) -> &[Simulator] {
        &self.simulators
    }

    pub fn copula(&self) -> &GaussianCopula {
        &self.copula
    }

    /// Joint path sampling: one correlated noise vector per day, routed
    /// block-wise to each asset's step map. A path is rejected as soon as
    /// any asset explodes. With one asset and the identity copula this is
    /// bit-for-bit identical to [`Simulator::sample_paths`].
    pub fn sample_joint_paths(
        &self,
        histories: &[Vec<MarketState>],
        n_paths: usize,
        horizon: usize,
        master_seed: u64,
    ) -> Result<Vec<Vec<PathSample>>> {
        let n_assets = self.simulators.len();
        if histories.len() != n_assets {
            return Err(VoltError::Shape("one history per asset required".into()));
        }
        let d = self.copula.dim();
        let total = self.copula.total_dim();
        let mut out: Vec<Vec<PathSample>> = vec![Vec::with_capacity(n_paths); n_assets];
        for k in 0..n_paths {
            let mut rng = derive_stream(master_seed, 0, k as u64);
            let mut hists: Vec<Vec<MarketState>> = histories.to_vec();
            let mut paths: Vec<Vec<MarketState>> = vec![Vec::with_capacity(horizon); n_assets];
            let mut exploded = false;
            'days: for _ in 0..horizon {
                let z: Vec<f64> = (0..total).map(|_| standard_normal(&mut rng)).collect();
                let zc = self.correlated(&z)?;
                for (a, sim) in self.simulators.iter().enumerate() {
                    let next = sim.step(&hists[a], &zc[a * d..(a + 1) * d])?;
                    let explosive = sim.is_explosive(&next)?;
                    paths[a].push(next.clone());
                    hists[a].push(next);
                    if explosive {
                        exploded = true;
                    }
                }
                if exploded {
                    break 'days;
                }
            }
            for (a, p) in paths.into_iter().enumerate() {
                out[a].push(PathSample { states: p, exploded });
            }
        }
        Ok(out)
    }

    fn correlated(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.copula.correlate(z)
    }
}

/// Benchmark: unconditional flow over the stacked latents. Note that unlike
/// the copula this also reshapes each marginal density.
pub fn train_joint_flow(
    series: &JointLatentSeries,
    train_idx: &[usize],
    test_idx: &[usize],
    flow_config: &FlowConfig,
    train_config: &TrainConfig,
) -> Result<(Flow, TrainResult)> {
    train_flow(&series.data, None, train_idx, test_idx, flow_config, train_config)
}
