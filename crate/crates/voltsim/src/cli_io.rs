//! Configuration, CSV ingestion, versioned model persistence, and the
//! staged command-line pipeline.
//!
//! Artifacts live under one output directory, one subdirectory per asset.
//! Each stage reads the previous stage's files and fails with a pointer to
//! the missing prerequisite when run out of order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compression::Autoencoder;
use crate::copula::{stack_latents, GaussianCopula, JointSimulator};
use crate::dlv::{
    calls_to_dlvs, dlvs_to_calls, fit_arbitrage_free, CallSurface, DlvSurface, FitConfig,
    StrikeGrid, VolBounds,
};
use crate::error::{Result, VoltError};
use crate::evaluation::{ks_test, long_horizon_eval, short_horizon_eval, stylized_facts, MetricReport};
use crate::flow::FlowConfig;
use crate::nn::{split_shuffle, EarlyStop, TrainConfig};
use crate::simulator::{build_states, train_vol_net, Simulator, TrainingInputs};
use crate::synth::{generate_on, SynthConfig};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable providing the default output directory.
pub const OUT_DIR_ENV: &str = "VOLTSIM_OUT";

/// Global gradient-norm ceiling for the pipeline training stages; keeps the
/// spline-flow loss from spiking into a saturated plateau.
const GRAD_CLIP: f64 = 5.0;

/// Flat pipeline configuration. Defaults reproduce the reference protocol:
/// maturities {20,40,60,120} days, strikes 0.80..1.20, latent dimension 3,
/// lag 2, 80/20 split, learning rate 0.001.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub maturities: Vec<u32>,
    pub strikes: Vec<f64>,
    pub latent_dim: usize,
    pub lag: usize,
    pub vol_lower: f64,
    pub vol_upper: f64,
    pub train_fraction: f64,
    pub learning_rate: f64,
    pub dropout: f64,
    pub seed: u64,
    pub synth_days: usize,
    pub fit_iterations: usize,
    pub ae_iterations: usize,
    pub vol_iterations: usize,
    pub flow_iterations: usize,
    pub flow_knots: usize,
    pub flow_layers: usize,
    /// Simulated paths per asset in `simulate` and the long-horizon report.
    pub n_paths: usize,
    /// Days per simulated path.
    pub horizon: usize,
    /// Trailing days kept for long-horizon statistics.
    pub retain: usize,
    /// Paths per conditioning day in the short-horizon report.
    pub short_paths: usize,
    /// Days per path in the short-horizon report.
    pub short_horizon: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            maturities: vec![20, 40, 60, 120],
            strikes: (0..9).map(|i| 0.80 + 0.05 * i as f64).collect(),
            latent_dim: 3,
            lag: 2,
            vol_lower: 0.01,
            vol_upper: 2.0,
            train_fraction: 0.8,
            learning_rate: 0.001,
            dropout: 0.0,
            seed: 0,
            synth_days: 2000,
            fit_iterations: 800,
            ae_iterations: 2000,
            vol_iterations: 1500,
            flow_iterations: 1500,
            flow_knots: 32,
            flow_layers: 1,
            n_paths: 256,
            horizon: 256,
            retain: 8,
            short_paths: 4,
            short_horizon: 3,
        }
    }
}

impl Config {
    /// Parse a flat `key = value` file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| VoltError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Config::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VoltError::Config(format!("{}:{}: expected key = value", path.display(), ln + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Set one field by its config-file key. Flags mirror these keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| VoltError::Config(format!("bad value for {key}: {value}")))
        }
        match key {
            "maturities" => {
                self.maturities =
                    value.split(',').map(|s| num("maturities", s.trim())).collect::<Result<_>>()?;
            }
            "strikes" => {
                self.strikes =
                    value.split(',').map(|s| num("strikes", s.trim())).collect::<Result<_>>()?;
            }
            "latent_dim" => self.latent_dim = num(key, value)?,
            "lag" => self.lag = num(key, value)?,
            "vol_lower" => self.vol_lower = num(key, value)?,
            "vol_upper" => self.vol_upper = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "synth_days" => self.synth_days = num(key, value)?,
            "fit_iterations" => self.fit_iterations = num(key, value)?,
            "ae_iterations" => self.ae_iterations = num(key, value)?,
            "vol_iterations" => self.vol_iterations = num(key, value)?,
            "flow_iterations" => self.flow_iterations = num(key, value)?,
            "flow_knots" => self.flow_knots = num(key, value)?,
            "flow_layers" => self.flow_layers = num(key, value)?,
            "n_paths" => self.n_paths = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "retain" => self.retain = num(key, value)?,
            "short_paths" => self.short_paths = num(key, value)?,
            "short_horizon" => self.short_horizon = num(key, value)?,
            _ => return Err(VoltError::Config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.bounds()?;
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(VoltError::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.retain == 0 || self.retain > self.horizon {
            return Err(VoltError::Config("retain must lie in 1..=horizon".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<StrikeGrid> {
        StrikeGrid::new(self.maturities.clone(), self.strikes.clone())
    }

    pub fn bounds(&self) -> Result<VolBounds> {
        VolBounds::new(self.vol_lower, self.vol_upper)
    }

    fn train_config(&self, iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            dropout_rate: self.dropout,
            max_iterations: iterations,
            batch_size: None,
            grad_clip: Some(GRAD_CLIP),
            seed,
            early_stop: EarlyStop::Patience(100),
        }
    }

    fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            n_knots: self.flow_knots,
            layers: self.flow_layers,
            ..FlowConfig::default()
        }
    }
}

/// One asset's dated market history: spots and complete call-price grids.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub dates: Vec<String>,
    pub spots: Vec<f64>,
    pub surfaces: Vec<CallSurface>,
}

impl DataBundle {
    pub fn log_returns(&self) -> Vec<f64> {
        self.spots.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
    }
}

fn strike_key(x: f64) -> i64 {
    (x * 1e6).round() as i64
}

fn parse_csv_line<'a>(line: &'a str, cols: usize, path: &Path, ln: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.trim_end_matches('\r').split(',').map(|s| s.trim()).collect();
    if fields.len() != cols {
        return Err(VoltError::Data(format!(
            "{}:{}: expected {cols} columns, found {}",
            path.display(),
            ln,
            fields.len()
        )));
    }
    Ok(fields)
}

/// Load one asset from a spot CSV (`date,spot`) and a long-format surface
/// CSV (`date,maturity_days,strike_rel,call_price`). Grids must be complete
/// against `grid`; unsorted dates are sorted with a warning.
pub fn load_market_csv(
    spot_path: &Path,
    surface_path: &Path,
    grid: &StrikeGrid,
) -> Result<DataBundle> {
    let spot_text = fs::read_to_string(spot_path).map_err(|e| {
        VoltError::Data(format!("cannot read {}: {e}", spot_path.display()))
    })?;
    let mut spots: Vec<(String, f64)> = Vec::new();
    for (ln, line) in spot_text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let f = parse_csv_line(line, 2, spot_path, ln + 1)?;
        let spot: f64 = f[1]
            .parse()
            .map_err(|_| VoltError::Data(format!("{}:{}: bad spot", spot_path.display(), ln + 1)))?;
        if !(spot.is_finite() && spot > 0.0) {
            return Err(VoltError::Data(format!(
                "non-positive spot {spot} on date {}",
                f[0]
            )));
        }
        spots.push((f[0].to_string(), spot));
    }
    if spots.len() < 2 {
        return Err(VoltError::Data("need at least two dated spots".into()));
    }
    if !spots.windows(2).all(|w| w[0].0 < w[1].0) {
        eprintln!("warning: {} has unsorted dates; sorting", spot_path.display());
        spots.sort_by(|a, b| a.0.cmp(&b.0));
    }
    if spots.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(VoltError::Data("duplicate dates in spot file".into()));
    }

    let surf_text = fs::read_to_string(surface_path).map_err(|e| {
        VoltError::Data(format!("cannot read {}: {e}", surface_path.display()))
    })?;
    let mut nodes: BTreeMap<String, BTreeMap<(u32, i64), f64>> = BTreeMap::new();
    for (ln, line) in surf_text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let f = parse_csv_line(line, 4, surface_path, ln + 1)?;
        let mat: u32 = f[1].parse().map_err(|_| {
            VoltError::Data(format!("{}:{}: bad maturity", surface_path.display(), ln + 1))
        })?;
        let strike: f64 = f[2].parse().map_err(|_| {
            VoltError::Data(format!("{}:{}: bad strike", surface_path.display(), ln + 1))
        })?;
        let price: f64 = f[3].parse().map_err(|_| {
            VoltError::Data(format!("{}:{}: bad price", surface_path.display(), ln + 1))
        })?;
        nodes
            .entry(f[0].to_string())
            .or_default()
            .insert((mat, strike_key(strike)), price);
    }

    let mut surfaces = Vec::with_capacity(spots.len());
    for (date, _) in &spots {
        let day = nodes.get(date).ok_or_else(|| {
            VoltError::Data(format!("no surface rows for date {date}"))
        })?;
        let mut prices = Vec::with_capacity(grid.n_maturities() * grid.strikes().len());
        for &mat in grid.maturity_days() {
            for &x in grid.strikes() {
                let p = day.get(&(mat, strike_key(x))).ok_or_else(|| {
                    VoltError::Data(format!(
                        "missing node on date {date}: maturity {mat}d, strike {x:.2}"
                    ))
                })?;
                prices.push(*p);
            }
        }
        surfaces.push(CallSurface::new(grid.clone(), prices)?);
    }
    let (dates, spot_vals) = spots.into_iter().unzip();
    Ok(DataBundle { dates, spots: spot_vals, surfaces })
}

/// Write an asset back to the two-file CSV format read by
/// [`load_market_csv`].
pub fn save_market_csv(
    bundle: &DataBundle,
    spot_path: &Path,
    surface_path: &Path,
) -> Result<()> {
    let mut spot = String::from("date,spot\n");
    for (date, s) in bundle.dates.iter().zip(&bundle.spots) {
        spot.push_str(&format!("{date},{s}\n"));
    }
    fs::write(spot_path, spot)?;

    let mut surf = String::from("date,maturity_days,strike_rel,call_price\n");
    for (date, surface) in bundle.dates.iter().zip(&bundle.surfaces) {
        let grid = surface.grid();
        for (j, &mat) in grid.maturity_days().iter().enumerate() {
            for (i, &x) in grid.strikes().iter().enumerate() {
                surf.push_str(&format!("{date},{mat},{x},{}\n", surface.price(j, i)));
            }
        }
    }
    fs::write(surface_path, surf)?;
    Ok(())
}

/// Versioned persistence envelope. Numeric payloads round trip bitwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    pub data_fingerprint: String,
    pub config_snapshot: String,
    pub payload: serde_json::Value,
}

pub fn fingerprint(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn save_model<T: Serialize>(
    kind: &str,
    payload: &T,
    seed: u64,
    data_fingerprint: &str,
    config: &Config,
    path: &Path,
) -> Result<()> {
    let artifact = ModelArtifact {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        seed,
        data_fingerprint: data_fingerprint.to_string(),
        config_snapshot: serde_json::to_string(config)?,
        payload: serde_json::to_value(payload)?,
    };
    fs::write(path, serde_json::to_string(&artifact)?)?;
    Ok(())
}

/// Load a model artifact, rejecting version or kind mismatches. Returns the
/// payload and the envelope (for fingerprint checks).
pub fn load_model<T: DeserializeOwned>(kind: &str, path: &Path) -> Result<(T, ModelArtifact)> {
    let text = fs::read_to_string(path)
        .map_err(|e| VoltError::Data(format!("cannot read {}: {e}", path.display())))?;
    let artifact: ModelArtifact = serde_json::from_str(&text)?;
    if artifact.schema_version != SCHEMA_VERSION {
        return Err(VoltError::Version {
            found: artifact.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if artifact.kind != kind {
        return Err(VoltError::Data(format!(
            "artifact {} holds a `{}` model, expected `{kind}`",
            path.display(),
            artifact.kind
        )));
    }
    let payload = serde_json::from_value(artifact.payload.clone())?;
    Ok((payload, artifact))
}

/// Everything a pipeline command needs: configuration, output directory and
/// asset names. The seed feeds every stage; per-asset streams are offset by
/// the asset index where independence matters.
#[derive(Debug, Clone)]
pub struct PipelineContext {
    pub config: Config,
    pub out_dir: PathBuf,
    pub assets: Vec<String>,
}

impl PipelineContext {
    pub fn new(config: Config, out_dir: Option<PathBuf>, assets: Vec<String>) -> Result<Self> {
        let out_dir = match out_dir {
            Some(d) => d,
            None => std::env::var(OUT_DIR_ENV)
                .map(PathBuf::from)
                .map_err(|_| {
                    VoltError::Config(format!("no --out directory and {OUT_DIR_ENV} is unset"))
                })?,
        };
        let assets = if assets.is_empty() { vec!["asset0".to_string()] } else { assets };
        Ok(PipelineContext { config, out_dir, assets })
    }

    fn asset_dir(&self, asset: &str) -> PathBuf {
        self.out_dir.join(asset)
    }

    fn asset_path(&self, asset: &str, name: &str) -> PathBuf {
        self.asset_dir(asset).join(name)
    }
}

pub const COMMANDS: &[&str] = &[
    "synth",
    "fit-surface",
    "train-ae",
    "train-vol",
    "train-flow",
    "extract-latents",
    "fit-copula",
    "simulate",
    "evaluate",
    "report",
];

/// Run one pipeline stage. Stages communicate only through files in the
/// output directory.
pub fn run_pipeline(command: &str, ctx: &PipelineContext) -> Result<()> {
    match command {
        "synth" => cmd_synth(ctx),
        "fit-surface" => cmd_fit_surface(ctx),
        "train-ae" => cmd_train_ae(ctx),
        "train-vol" => cmd_train_vol(ctx),
        "train-flow" => cmd_train_flow(ctx),
        "extract-latents" => cmd_extract_latents(ctx),
        "fit-copula" => cmd_fit_copula(ctx),
        "simulate" => cmd_simulate(ctx),
        "evaluate" => cmd_evaluate(ctx),
        "report" => cmd_report(ctx),
        other => Err(VoltError::Config(format!(
            "unknown command `{other}`; expected one of {}",
            COMMANDS.join(", ")
        ))),
    }
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(VoltError::MissingArtifact(format!(
            "{} not found; run `{produced_by}` first",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_synth(ctx: &PipelineContext) -> Result<()> {
    let grid = ctx.config.grid()?;
    let bounds = ctx.config.bounds()?;
    for (i, asset) in ctx.assets.iter().enumerate() {
        let dir = ctx.asset_dir(asset);
        fs::create_dir_all(&dir)?;
        let synth_config = SynthConfig {
            n_days: ctx.config.synth_days,
            seed: ctx.config.seed.wrapping_add(i as u64),
            ..SynthConfig::default()
        };
        let market = generate_on(&synth_config, grid.clone(), bounds)?;
        let surfaces: Vec<CallSurface> =
            market.surfaces.iter().map(dlvs_to_calls).collect::<Result<_>>()?;
        let bundle = DataBundle { dates: market.dates, spots: market.spots, surfaces };
        save_market_csv(&bundle, &dir.join("spots.csv"), &dir.join("surfaces.csv"))?;
        println!("synth: {asset}: {} days", bundle.dates.len());
    }
    Ok(())
}

fn load_bundle(ctx: &PipelineContext, asset: &str) -> Result<DataBundle> {
    let spot_path = ctx.asset_path(asset, "spots.csv");
    let surf_path = ctx.asset_path(asset, "surfaces.csv");
    require(&spot_path, "synth")?;
    require(&surf_path, "synth")?;
    load_market_csv(&spot_path, &surf_path, &ctx.config.grid()?)
}

fn cmd_fit_surface(ctx: &PipelineContext) -> Result<()> {
    let bounds = ctx.config.bounds()?;
    let fit_config =
        FitConfig { max_iterations: ctx.config.fit_iterations, ..FitConfig::default() };
    for asset in &ctx.assets {
        let bundle = load_bundle(ctx, asset)?;
        let mut out = String::from("date,maturity_days,strike_rel,dlv\n");
        let mut prev: Option<DlvSurface> = None;
        for (date, surface) in bundle.dates.iter().zip(&bundle.surfaces) {
            let dlvs = match calls_to_dlvs(surface, bounds) {
                Ok(s) => s,
                Err(VoltError::Arbitrage(_)) => {
                    fit_arbitrage_free(surface, bounds, &fit_config, prev.as_ref())?.surface
                }
                Err(e) => return Err(e),
            };
            let grid = dlvs.grid();
            for (j, &mat) in grid.maturity_days().iter().enumerate() {
                for (i, &x) in grid.interior_strikes().iter().enumerate() {
                    out.push_str(&format!("{date},{mat},{x},{}\n", dlvs.value(j, i)));
                }
            }
            prev = Some(dlvs);
        }
        fs::write(ctx.asset_path(asset, "dlv.csv"), out)?;
        println!("fit-surface: {asset}: {} surfaces", bundle.dates.len());
    }
    Ok(())
}

fn load_dlvs(ctx: &PipelineContext, asset: &str) -> Result<(Vec<String>, Vec<DlvSurface>, String)> {
    let path = ctx.asset_path(asset, "dlv.csv");
    require(&path, "fit-surface")?;
    let bytes = fs::read(&path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| VoltError::Data("dlv.csv is not UTF-8".into()))?;
    let grid = ctx.config.grid()?;
    let bounds = ctx.config.bounds()?;
    let mut nodes: BTreeMap<String, BTreeMap<(u32, i64), f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let f = parse_csv_line(line, 4, &path, ln + 1)?;
        let key = f[0].to_string();
        if !nodes.contains_key(&key) {
            order.push(key.clone());
        }
        nodes.entry(key).or_default().insert(
            (
                f[1].parse().map_err(|_| VoltError::Data("bad maturity in dlv.csv".into()))?,
                strike_key(
                    f[2].parse().map_err(|_| VoltError::Data("bad strike in dlv.csv".into()))?,
                ),
            ),
            f[3].parse().map_err(|_| VoltError::Data("bad value in dlv.csv".into()))?,
        );
    }
    let mut surfaces = Vec::with_capacity(order.len());
    for date in &order {
        let day = &nodes[date];
        let mut values = Vec::with_capacity(grid.node_count());
        for &mat in grid.maturity_days() {
            for &x in grid.interior_strikes() {
                let v = day.get(&(mat, strike_key(x))).ok_or_else(|| {
                    VoltError::Data(format!(
                        "missing node on date {date}: maturity {mat}d, strike {x:.2}"
                    ))
                })?;
                values.push(*v);
            }
        }
        surfaces.push(DlvSurface::new(grid.clone(), values, bounds)?);
    }
    Ok((order, surfaces, fingerprint(&bytes)))
}

fn cmd_train_ae(ctx: &PipelineContext) -> Result<()> {
    for asset in &ctx.assets {
        let (_, surfaces, data_hash) = load_dlvs(ctx, asset)?;
        let (train_idx, test_idx) =
            split_shuffle(surfaces.len(), ctx.config.train_fraction, ctx.config.seed)?;
        let config = ctx.config.train_config(ctx.config.ae_iterations, ctx.config.seed);
        let (ae, result) =
            Autoencoder::train(&surfaces, ctx.config.latent_dim, &train_idx, &test_idx, &config)?;
        save_model(
            "autoencoder",
            &ae,
            ctx.config.seed,
            &data_hash,
            &ctx.config,
            &ctx.asset_path(asset, "ae.json"),
        )?;
        println!(
            "train-ae: {asset}: test MSE {:.6} after {} iterations",
            result.test_curve.last().unwrap(),
            result.iterations
        );
    }
    Ok(())
}

fn load_ae(ctx: &PipelineContext, asset: &str) -> Result<(Autoencoder, ModelArtifact)> {
    let path = ctx.asset_path(asset, "ae.json");
    require(&path, "train-ae")?;
    load_model("autoencoder", &path)
}

/// States and the sample split, rebuilt identically by every stage that
/// trains on them.
fn prepared_inputs(
    ctx: &PipelineContext,
    asset: &str,
    ae: &Autoencoder,
) -> Result<(Vec<String>, Vec<crate::simulator::MarketState>, TrainingInputs, Vec<usize>, Vec<usize>)>
{
    let bundle = load_bundle(ctx, asset)?;
    let (_, surfaces, _) = load_dlvs(ctx, asset)?;
    if surfaces.len() != bundle.spots.len() {
        return Err(VoltError::Data("dlv.csv and spots.csv disagree on days".into()));
    }
    let states = build_states(&bundle.spots, &surfaces, ae)?;
    let n_samples = states.len() - ctx.config.lag;
    let (train_idx, test_idx) =
        split_shuffle(n_samples, ctx.config.train_fraction, ctx.config.seed)?;
    let inputs = TrainingInputs::prepare(&states, ctx.config.lag, &train_idx, &test_idx)?;
    Ok((bundle.dates, states, inputs, train_idx, test_idx))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolStage {
    net: crate::nn::DenseNet,
    scaler: crate::compression::Scaler,
}

fn cmd_train_vol(ctx: &PipelineContext) -> Result<()> {
    for asset in &ctx.assets {
        let (ae, ae_artifact) = load_ae(ctx, asset)?;
        let (_, _, inputs, train_idx, test_idx) = prepared_inputs(ctx, asset, &ae)?;
        let config = ctx.config.train_config(ctx.config.vol_iterations, ctx.config.seed);
        let (net, result) = train_vol_net(&inputs, &train_idx, &test_idx, &config)?;
        let stage = VolStage { net, scaler: inputs.scaler.clone() };
        save_model(
            "vol_net",
            &stage,
            ctx.config.seed,
            &ae_artifact.data_fingerprint,
            &ctx.config,
            &ctx.asset_path(asset, "vol.json"),
        )?;
        println!(
            "train-vol: {asset}: test NLL {:.4} after {} iterations",
            result.test_curve.last().unwrap(),
            result.iterations
        );
    }
    Ok(())
}

fn cmd_train_flow(ctx: &PipelineContext) -> Result<()> {
    for asset in &ctx.assets {
        let (ae, _) = load_ae(ctx, asset)?;
        let vol_path = ctx.asset_path(asset, "vol.json");
        require(&vol_path, "train-vol")?;
        let (vol, vol_artifact): (VolStage, _) = load_model("vol_net", &vol_path)?;
        let (_, _, inputs, train_idx, test_idx) = prepared_inputs(ctx, asset, &ae)?;
        let config = ctx.config.train_config(ctx.config.flow_iterations, ctx.config.seed);
        let (flow, result) = crate::flow::train_flow(
            &inputs.codes,
            Some(&inputs.cond),
            &train_idx,
            &test_idx,
            &ctx.config.flow_config(),
            &config,
        )?;
        let sim = Simulator::assemble(
            ae,
            vol.net,
            flow,
            inputs.code_map.clone(),
            vol.scaler,
            ctx.config.lag,
        )?;
        save_model(
            "simulator",
            &sim,
            ctx.config.seed,
            &vol_artifact.data_fingerprint,
            &ctx.config,
            &ctx.asset_path(asset, "simulator.json"),
        )?;
        println!(
            "train-flow: {asset}: test NLL {:.4} after {} iterations",
            result.test_curve.last().unwrap(),
            result.iterations
        );
    }
    Ok(())
}

fn load_simulator(ctx: &PipelineContext, asset: &str) -> Result<(Simulator, ModelArtifact)> {
    let path = ctx.asset_path(asset, "simulator.json");
    require(&path, "train-flow")?;
    load_model("simulator", &path)
}

fn cmd_extract_latents(ctx: &PipelineContext) -> Result<()> {
    for asset in &ctx.assets {
        let (sim, _) = load_simulator(ctx, asset)?;
        let (dates, states, _, _, _) = prepared_inputs(ctx, asset, sim.autoencoder())?;
        let latents = sim.invert_latents(&states)?;
        // states start on day 1; sample t targets state lag + t
        let first_date = 1 + ctx.config.lag;
        let mut out = String::from("date");
        for i in 0..latents.cols() {
            out.push_str(&format!(",z{i}"));
        }
        out.push('\n');
        for (r, date) in dates[first_date..].iter().enumerate() {
            out.push_str(date);
            for c in 0..latents.cols() {
                out.push_str(&format!(",{}", latents.get(r, c)));
            }
            out.push('\n');
        }
        fs::write(ctx.asset_path(asset, "latents.csv"), out)?;
        println!("extract-latents: {asset}: {} rows", latents.rows());
    }
    Ok(())
}

fn load_latents(ctx: &PipelineContext, asset: &str) -> Result<(Vec<String>, crate::autodiff::Tensor)> {
    let path = ctx.asset_path(asset, "latents.csv");
    require(&path, "extract-latents")?;
    let text = fs::read_to_string(&path)?;
    let mut dates = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        dates.push(fields[0].to_string());
        rows.push(
            fields[1..]
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|_| VoltError::Data(format!("{}:{}: bad latent", path.display(), ln + 1)))
                })
                .collect::<Result<_>>()?,
        );
    }
    if rows.is_empty() {
        return Err(VoltError::Data("latents.csv is empty".into()));
    }
    Ok((dates, crate::autodiff::Tensor::from_rows(&rows)))
}

fn cmd_fit_copula(ctx: &PipelineContext) -> Result<()> {
    let mut per_asset = Vec::new();
    for asset in &ctx.assets {
        per_asset.push(load_latents(ctx, asset)?);
    }
    let series = stack_latents(&per_asset)?;
    if series.dropped() > 0 {
        eprintln!("warning: dropped {} unaligned latent rows", series.dropped());
    }
    let copula = GaussianCopula::estimate(&series)?;
    save_model(
        "copula",
        &copula,
        ctx.config.seed,
        "",
        &ctx.config,
        &ctx.out_dir.join("copula.json"),
    )?;
    println!(
        "fit-copula: {} assets, {} common dates",
        copula.n_assets(),
        series.data().rows()
    );
    Ok(())
}

fn cmd_simulate(ctx: &PipelineContext) -> Result<()> {
    let copula_path = ctx.out_dir.join("copula.json");
    require(&copula_path, "fit-copula")?;
    let (copula, _): (GaussianCopula, _) = load_model("copula", &copula_path)?;
    let mut sims = Vec::new();
    let mut histories = Vec::new();
    for asset in &ctx.assets {
        let (sim, _) = load_simulator(ctx, asset)?;
        let (_, states, _, _, _) = prepared_inputs(ctx, asset, sim.autoencoder())?;
        sims.push(sim);
        histories.push(states);
    }
    let joint = JointSimulator::new(sims, copula)?;
    let paths = joint.sample_joint_paths(
        &histories,
        ctx.config.n_paths,
        ctx.config.horizon,
        ctx.config.seed,
    )?;
    for (a, asset) in ctx.assets.iter().enumerate() {
        let d = joint.copula().dim() - 1;
        let mut out = String::from("path,day,log_return");
        for i in 0..d {
            out.push_str(&format!(",code{i}"));
        }
        out.push_str(",exploded\n");
        for (k, path) in paths[a].iter().enumerate() {
            for (day, st) in path.states.iter().enumerate() {
                out.push_str(&format!("{k},{day},{}", st.log_return));
                for c in &st.code {
                    out.push_str(&format!(",{c}"));
                }
                out.push_str(&format!(",{}\n", path.exploded as u8));
            }
        }
        fs::write(ctx.out_dir.join(format!("paths_{asset}.csv")), out)?;
        let rejected = paths[a].iter().filter(|p| p.exploded).count();
        println!(
            "simulate: {asset}: {} paths, {} rejected",
            paths[a].len(),
            rejected
        );
    }
    Ok(())
}

fn cmd_evaluate(ctx: &PipelineContext) -> Result<()> {
    for asset in &ctx.assets {
        let (sim, _) = load_simulator(ctx, asset)?;
        let (_, states, _, _, test_idx) = prepared_inputs(ctx, asset, sim.autoencoder())?;
        let (_, surfaces, _) = load_dlvs(ctx, asset)?;

        let mut report = MetricReport::new("evaluation");
        let returns: Vec<f64> = states.iter().map(|s| s.log_return).collect();
        let facts = stylized_facts(&returns, &surfaces[1..])?;
        report.merge(&facts);

        // held-out latent recovery
        let latents = sim.invert_latents(&states)?;
        for c in 0..latents.cols() {
            let col: Vec<f64> = test_idx
                .iter()
                .filter(|&&i| i < latents.rows())
                .map(|&i| latents.get(i, c))
                .collect();
            let ks = ks_test(&col)?;
            report.put_scalar(&format!("latent_{c}_ks_p"), ks.p_value, ks.n);
            report.put_scalar(&format!("latent_{c}_ks_stat"), ks.statistic, ks.n);
            let full: Vec<f64> = (0..latents.rows()).map(|r| latents.get(r, c)).collect();
            let rho = crate::evaluation::acf(&full, 1)?[1];
            report.put_scalar(&format!("latent_{c}_acf1"), rho, full.len());
        }

        let short = short_horizon_eval(
            &sim,
            &states,
            ctx.config.short_paths,
            ctx.config.short_horizon,
            ctx.config.seed,
        )?;
        report.merge(&short);
        let long = long_horizon_eval(
            &sim,
            &states,
            ctx.config.n_paths,
            ctx.config.horizon,
            ctx.config.retain,
            ctx.config.seed,
        )?;
        report.merge(&long);

        fs::write(
            ctx.asset_path(asset, "report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        let mut arrays = String::from("name,index,value\n");
        for (name, values) in &report.arrays {
            for (i, v) in values.iter().enumerate() {
                arrays.push_str(&format!("{name},{i},{v}\n"));
            }
        }
        fs::write(ctx.asset_path(asset, "report_arrays.csv"), arrays)?;
        println!("evaluate: {asset}: {} scalars", report.scalars.len());
    }
    Ok(())
}

fn cmd_report(ctx: &PipelineContext) -> Result<()> {
    let mut summary = MetricReport::new("summary");
    for asset in &ctx.assets {
        let path = ctx.asset_path(asset, "report.json");
        require(&path, "evaluate")?;
        let text = fs::read_to_string(&path)?;
        let mut report: MetricReport = serde_json::from_str(&text)?;
        report.mode = asset.clone();
        summary.merge(&report);
    }
    fs::write(
        ctx.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    for (name, value) in &summary.scalars {
        if name.contains("ks_p") || name.contains("rejection_fraction") {
            println!("report: {name} = {value:.4}");
        }
    }
    println!("report: {} scalars aggregated", summary.scalars.len());
    Ok(())
}
