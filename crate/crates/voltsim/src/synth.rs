//! Synthetic market generator: a three-factor stochastic-volatility model
//! (level, skew, curvature) drives a Black-Scholes smile each day, which is
//! priced on the strike grid and cleaned into an arbitrage-free volatility
//! surface. Used for tests and as a reproducible data source for the CLI.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dlv::{
    calls_to_dlvs, fit_arbitrage_free, CallSurface, DlvSurface, FitConfig, StrikeGrid, VolBounds,
    DAYS_PER_YEAR,
};
use crate::error::{Result, VoltError};
use crate::nn::standard_normal;

/// Black-Scholes call on a unit forward: strike `x`, total implied
/// variance `w`.
pub fn bs_call(x: f64, w: f64) -> f64 {
    if w <= 0.0 {
        return (1.0 - x).max(0.0);
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let sw = w.sqrt();
    let d1 = (-x.ln() + 0.5 * w) / sw;
    let d2 = d1 - sw;
    normal.cdf(d1) - x * normal.cdf(d2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_days: usize,
    pub seed: u64,
    /// Mean annualized volatility level.
    pub mean_vol: f64,
    /// AR(1) persistence of the log volatility level.
    pub vol_persistence: f64,
    /// Daily shock scale of the log volatility level.
    pub vol_of_vol: f64,
    /// Correlation between return shocks and level shocks.
    pub leverage: f64,
    /// Mean smile slope per unit log strike.
    pub mean_skew: f64,
    /// Mean smile curvature per unit squared log strike.
    pub mean_curvature: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_days: 500,
            seed: 0,
            mean_vol: 0.2,
            vol_persistence: 0.98,
            vol_of_vol: 0.1,
            leverage: -0.6,
            mean_skew: -0.4,
            mean_curvature: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_days < 2 {
            return Err(VoltError::Config("need at least two days".into()));
        }
        if !(self.mean_vol > 0.0) || !(0.0..1.0).contains(&self.vol_persistence) {
            return Err(VoltError::Config("bad volatility dynamics".into()));
        }
        if !(-1.0..=1.0).contains(&self.leverage) {
            return Err(VoltError::Config("leverage must be a correlation".into()));
        }
        Ok(())
    }
}

/// A generated market history: spot levels and one cleaned volatility
/// surface per day, with synthetic trading dates.
#[derive(Debug, Clone)]
pub struct SynthMarket {
    pub dates: Vec<String>,
    pub spots: Vec<f64>,
    pub surfaces: Vec<DlvSurface>,
}

fn smile_vol(level: f64, skew: f64, curv: f64, tau: f64, tau0: f64, x: f64) -> f64 {
    let lx = x.ln();
    let decay = (tau0 / tau).sqrt();
    let v = level * (1.0 + skew * lx * decay + curv * lx * lx * decay);
    v.clamp(0.05, 1.2)
}

fn smile_prices(
    grid: &StrikeGrid,
    level: f64,
    skew: f64,
    curv: f64,
) -> Vec<f64> {
    let taus = grid.taus();
    let tau0 = taus[0];
    let mut prices = Vec::with_capacity(grid.n_maturities() * grid.strikes().len());
    for &tau in &taus {
        for &x in grid.strikes() {
            let v = smile_vol(level, skew, curv, tau, tau0, x);
            prices.push(bs_call(x, v * v * tau));
        }
    }
    prices
}

/// Generate a synthetic market on the default experiment grid.
pub fn generate(config: &SynthConfig) -> Result<SynthMarket> {
    generate_on(config, StrikeGrid::default_experiment(), VolBounds::default())
}

/// Generate a synthetic market on an explicit grid.
pub fn generate_on(
    config: &SynthConfig,
    grid: StrikeGrid,
    bounds: VolBounds,
) -> Result<SynthMarket> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mu_l = config.mean_vol.ln();
    let phi = config.vol_persistence;
    let rho = config.leverage;
    let rho_c = (1.0 - rho * rho).sqrt();

    let mut log_level = mu_l;
    let mut skew = config.mean_skew;
    let mut curv = config.mean_curvature;

    let mut dates = Vec::with_capacity(config.n_days);
    let mut spots = Vec::with_capacity(config.n_days);
    let mut surfaces = Vec::with_capacity(config.n_days);
    let mut spot = 1.0;
    let fit_config = FitConfig { max_iterations: 800, ..FitConfig::default() };
    let mut prev_dlvs: Option<DlvSurface> = None;

    for t in 0..config.n_days {
        if t > 0 {
            let z = standard_normal(&mut rng);
            let w = standard_normal(&mut rng);
            let nu = log_level.exp() / DAYS_PER_YEAR.sqrt();
            spot *= (nu * z - 0.5 * nu * nu).exp();
            // leverage: vol shocks share the return shock with weight rho
            let eps = rho * z + rho_c * w;
            log_level = mu_l + phi * (log_level - mu_l) + config.vol_of_vol * eps;
            skew = config.mean_skew
                + 0.97 * (skew - config.mean_skew)
                + 0.02 * standard_normal(&mut rng);
            curv = config.mean_curvature
                + 0.97 * (curv - config.mean_curvature)
                + 0.05 * standard_normal(&mut rng);
        }
        let prices = smile_prices(&grid, log_level.exp(), skew, curv);
        let market = CallSurface::new(grid.clone(), prices)?;
        let dlvs = match calls_to_dlvs(&market, bounds) {
            Ok(s) => s,
            // discrete arbitrage in the raw smile: project onto the model
            Err(VoltError::Arbitrage(_)) => {
                fit_arbitrage_free(&market, bounds, &fit_config, prev_dlvs.as_ref())?.surface
            }
            Err(e) => return Err(e),
        };
        prev_dlvs = Some(dlvs.clone());
        dates.push(format!("day-{t:06}"));
        spots.push(spot);
        surfaces.push(dlvs);
    }
    Ok(SynthMarket { dates, spots, surfaces })
}
