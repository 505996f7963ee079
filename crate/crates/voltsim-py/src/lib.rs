//! Python bindings for the voltsim market simulator: surface codecs, the
//! synthetic market, compression, simulation, copulas and statistics.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use voltsim::cli_io;
use voltsim::compression;
use voltsim::copula;
use voltsim::dlv;
use voltsim::evaluation;
use voltsim::flow::FlowConfig;
use voltsim::nn::{split_shuffle, TrainConfig};
use voltsim::simulator;
use voltsim::synth;

fn err(e: voltsim::VoltError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "StrikeGrid", from_py_object)]
#[derive(Clone)]
struct PyStrikeGrid {
    inner: dlv::StrikeGrid,
}

#[pymethods]
impl PyStrikeGrid {
    #[new]
    fn new(maturity_days: Vec<u32>, strikes: Vec<f64>) -> PyResult<Self> {
        Ok(PyStrikeGrid { inner: dlv::StrikeGrid::new(maturity_days, strikes).map_err(err)? })
    }

    /// The reference experiment grid: maturities {20,40,60,120} days,
    /// strikes 0.80..1.20.
    #[staticmethod]
    fn default_experiment() -> Self {
        PyStrikeGrid { inner: dlv::StrikeGrid::default_experiment() }
    }

    #[getter]
    fn maturity_days(&self) -> Vec<u32> {
        self.inner.maturity_days().to_vec()
    }

    #[getter]
    fn strikes(&self) -> Vec<f64> {
        self.inner.strikes().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "StrikeGrid({} maturities x {} interior strikes)",
            self.inner.n_maturities(),
            self.inner.n_interior()
        )
    }
}

#[pyclass(name = "DlvSurface", from_py_object)]
#[derive(Clone)]
struct PyDlvSurface {
    inner: dlv::DlvSurface,
}

#[pymethods]
impl PyDlvSurface {
    #[new]
    #[pyo3(signature = (grid, values, lower=0.01, upper=2.0))]
    fn new(grid: PyStrikeGrid, values: Vec<f64>, lower: f64, upper: f64) -> PyResult<Self> {
        let bounds = dlv::VolBounds::new(lower, upper).map_err(err)?;
        Ok(PyDlvSurface { inner: dlv::DlvSurface::new(grid.inner, values, bounds).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (grid, vol, lower=0.01, upper=2.0))]
    fn constant(grid: PyStrikeGrid, vol: f64, lower: f64, upper: f64) -> PyResult<Self> {
        let bounds = dlv::VolBounds::new(lower, upper).map_err(err)?;
        Ok(PyDlvSurface { inner: dlv::DlvSurface::constant(grid.inner, vol, bounds).map_err(err)? })
    }

    /// Row-major interior volatilities, maturities x strikes.
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    /// Call prices over the full grid including the pinned boundary
    /// columns, row-major.
    fn to_calls(&self) -> PyResult<Vec<f64>> {
        Ok(dlv::dlvs_to_calls(&self.inner).map_err(err)?.prices().to_vec())
    }

    /// Whether the implied call grid is free of static arbitrage.
    fn is_arbitrage_free(&self) -> PyResult<bool> {
        let calls = dlv::dlvs_to_calls(&self.inner).map_err(err)?;
        Ok(dlv::check_arbitrage(&calls, self.inner.bounds()).is_free())
    }

    fn __repr__(&self) -> String {
        format!("DlvSurface({} nodes)", self.inner.values().len())
    }
}

/// Recover discrete local volatilities from a full call-price grid
/// (row-major, including boundary columns).
#[pyfunction]
#[pyo3(signature = (grid, prices, lower=0.01, upper=2.0))]
fn calls_to_dlvs(
    grid: PyStrikeGrid,
    prices: Vec<f64>,
    lower: f64,
    upper: f64,
) -> PyResult<PyDlvSurface> {
    let bounds = dlv::VolBounds::new(lower, upper).map_err(err)?;
    let surface = dlv::CallSurface::new(grid.inner, prices).map_err(err)?;
    Ok(PyDlvSurface { inner: dlv::calls_to_dlvs(&surface, bounds).map_err(err)? })
}

/// Black-Scholes call on a unit forward: strike `x`, total variance `w`.
#[pyfunction]
fn bs_call(x: f64, w: f64) -> f64 {
    synth::bs_call(x, w)
}

/// Generate a synthetic market; returns (dates, spots, surfaces).
#[pyfunction]
#[pyo3(signature = (n_days, seed=0))]
fn synth_market(n_days: usize, seed: u64) -> PyResult<(Vec<String>, Vec<f64>, Vec<PyDlvSurface>)> {
    let market = synth::generate(&synth::SynthConfig {
        n_days,
        seed,
        ..synth::SynthConfig::default()
    })
    .map_err(err)?;
    let surfaces = market.surfaces.into_iter().map(|s| PyDlvSurface { inner: s }).collect();
    Ok((market.dates, market.spots, surfaces))
}

#[pyclass(name = "Autoencoder", from_py_object)]
#[derive(Clone)]
struct PyAutoencoder {
    inner: compression::Autoencoder,
}

#[pymethods]
impl PyAutoencoder {
    /// Train on volatility surfaces; returns the model and its held-out
    /// reconstruction MSE in scaled log space.
    #[staticmethod]
    #[pyo3(signature = (surfaces, latent_dim, iterations=500, learning_rate=0.003, seed=0))]
    fn train(
        surfaces: Vec<PyDlvSurface>,
        latent_dim: usize,
        iterations: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<(Self, f64)> {
        let surfaces: Vec<dlv::DlvSurface> = surfaces.into_iter().map(|s| s.inner).collect();
        let (tr, te) = split_shuffle(surfaces.len(), 0.8, seed).map_err(err)?;
        let config = TrainConfig::full_batch(learning_rate, 0.0, iterations, seed);
        let (ae, _) = compression::Autoencoder::train(&surfaces, latent_dim, &tr, &te, &config)
            .map_err(err)?;
        let mse = ae.reconstruction_mse(&surfaces, &te).map_err(err)?;
        Ok((PyAutoencoder { inner: ae }, mse))
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn encode(&self, surface: &PyDlvSurface) -> PyResult<Vec<f64>> {
        self.inner.encode(&surface.inner).map_err(err)
    }

    fn decode(&self, code: Vec<f64>) -> PyResult<PyDlvSurface> {
        Ok(PyDlvSurface { inner: self.inner.decode_to_dlvs(&code).map_err(err)? })
    }
}

#[pyclass(name = "Simulator")]
struct PySimulator {
    inner: simulator::Simulator,
    states: Vec<simulator::MarketState>,
}

#[pymethods]
impl PySimulator {
    /// Calibrate the full single-asset model on a spot series and daily
    /// surfaces.
    #[staticmethod]
    #[pyo3(signature = (spots, surfaces, latent_dim=3, lag=2, iterations=500, learning_rate=0.003, seed=0))]
    fn train(
        spots: Vec<f64>,
        surfaces: Vec<PyDlvSurface>,
        latent_dim: usize,
        lag: usize,
        iterations: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let surfaces: Vec<dlv::DlvSurface> = surfaces.into_iter().map(|s| s.inner).collect();
        let (day_tr, day_te) = split_shuffle(surfaces.len(), 0.8, seed).map_err(err)?;
        let ae_config = TrainConfig::full_batch(learning_rate, 0.0, iterations, seed);
        let (ae, _) =
            compression::Autoencoder::train(&surfaces, latent_dim, &day_tr, &day_te, &ae_config)
                .map_err(err)?;
        let states = simulator::build_states(&spots, &surfaces, &ae).map_err(err)?;
        let (tr, te) = split_shuffle(states.len() - lag, 0.8, seed).map_err(err)?;
        let config = TrainConfig::full_batch(learning_rate, 0.0, iterations, seed);
        let (sim, _, _) = simulator::Simulator::train(
            &states,
            ae,
            lag,
            &tr,
            &te,
            &config,
            &FlowConfig::default(),
            &config,
        )
        .map_err(err)?;
        Ok(PySimulator { inner: sim, states })
    }

    #[getter]
    fn lag(&self) -> usize {
        self.inner.lag()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    /// Simulate paths from the end of the training history. Returns a list
    /// of (log_returns, exploded) per path.
    #[pyo3(signature = (n_paths, horizon, seed=0))]
    fn sample_paths(
        &self,
        n_paths: usize,
        horizon: usize,
        seed: u64,
    ) -> PyResult<Vec<(Vec<f64>, bool)>> {
        let paths = self.inner.sample_paths(&self.states, n_paths, horizon, seed).map_err(err)?;
        Ok(paths
            .into_iter()
            .map(|p| (p.states.iter().map(|s| s.log_return).collect(), p.exploded))
            .collect())
    }

    /// Latents that reproduce the training history, one row per day.
    fn invert_latents(&self) -> PyResult<Vec<Vec<f64>>> {
        let t = self.inner.invert_latents(&self.states).map_err(err)?;
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }
}

/// Estimate a Gaussian copula over stacked per-asset latents. `per_asset`
/// is a list of latent matrices aligned on identical dates; returns the
/// full covariance as nested lists.
#[pyfunction]
fn estimate_copula(per_asset: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let stacked: Vec<(Vec<String>, voltsim::autodiff::Tensor)> = per_asset
        .into_iter()
        .map(|rows| {
            let dates = (0..rows.len()).map(|i| format!("{i:08}")).collect();
            (dates, voltsim::autodiff::Tensor::from_rows(&rows))
        })
        .collect();
    let series = copula::stack_latents(&stacked).map_err(err)?;
    let c = copula::GaussianCopula::estimate(&series).map_err(err)?;
    let n = c.total_dim();
    Ok((0..n).map(|i| c.sigma().row(i).to_vec()).collect())
}

/// Kolmogorov-Smirnov test against the standard normal; returns
/// (statistic, p_value).
#[pyfunction]
fn ks_test(sample: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = evaluation::ks_test(&sample).map_err(err)?;
    Ok((r.statistic, r.p_value))
}

/// Autocorrelation at lags 0..=max_lag.
#[pyfunction]
fn acf(series: Vec<f64>, max_lag: usize) -> PyResult<Vec<f64>> {
    evaluation::acf(&series, max_lag).map_err(err)
}

/// Run one pipeline stage against an output directory. `overrides` maps
/// config keys to values, mirroring the CLI `--set` flag.
#[pyfunction]
#[pyo3(signature = (command, out_dir, overrides=None, assets=None))]
fn run_pipeline(
    command: &str,
    out_dir: &str,
    overrides: Option<std::collections::BTreeMap<String, String>>,
    assets: Option<Vec<String>>,
) -> PyResult<()> {
    let mut config = cli_io::Config::default();
    for (key, value) in overrides.unwrap_or_default() {
        config.set(&key, &value).map_err(err)?;
    }
    config.validate().map_err(err)?;
    let ctx = cli_io::PipelineContext::new(
        config,
        Some(std::path::PathBuf::from(out_dir)),
        assets.unwrap_or_default(),
    )
    .map_err(err)?;
    cli_io::run_pipeline(command, &ctx).map_err(err)
}

#[pymodule]
fn voltsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStrikeGrid>()?;
    m.add_class::<PyDlvSurface>()?;
    m.add_class::<PyAutoencoder>()?;
    m.add_class::<PySimulator>()?;
    m.add_function(wrap_pyfunction!(calls_to_dlvs, m)?)?;
    m.add_function(wrap_pyfunction!(bs_call, m)?)?;
    m.add_function(wrap_pyfunction!(synth_market, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_copula, m)?)?;
    m.add_function(wrap_pyfunction!(ks_test, m)?)?;
    m.add_function(wrap_pyfunction!(acf, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
