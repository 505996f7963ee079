//! Fidelity metrics: KS tests against the standard normal, autocorrelation,
//! cross-correlation, density estimates and the short/long-horizon
//! simulation evaluation protocols.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::Tensor;
use crate::dlv::DlvSurface;
use crate::error::{Result, VoltError};
use crate::nn::{derive_stream, standard_normal};
use crate::simulator::{MarketState, Simulator};

/// Result of a one-sample KS test against the standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Asymptotic Kolmogorov survival function `Q(lambda)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        let signed = if k % 2 == 1 { term } else { -term };
        sum += signed;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test against N(0,1). The statistic takes the supremum on
/// both sides of every empirical jump; the p-value uses the asymptotic
/// distribution with the small-sample size correction.
pub fn ks_test(sample: &[f64]) -> Result<KsResult> {
    let n = sample.len();
    if n < 2 {
        return Err(VoltError::Invalid("ks test needs at least 2 points".into()));
    }
    if !sample.iter().all(|v| v.is_finite()) {
        return Err(VoltError::NonFinite("ks sample".into()));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal.cdf(x);
        let lo = i as f64 / n as f64;
        let hi = (i + 1) as f64 / n as f64;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    let sqrt_n = (n as f64).sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    Ok(KsResult { statistic: d, p_value: kolmogorov_q(lambda), n })
}

/// Autocorrelation with biased normalization, lags `0..=max_lag`.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if n <= max_lag {
        return Err(VoltError::Invalid("series shorter than the maximum lag".into()));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let denom: f64 = series.iter().map(|x| (x - mean) * (x - mean)).sum();
    if denom < 1e-300 {
        return Err(VoltError::Invalid("zero-variance series".into()));
    }
    let mut out = Vec::with_capacity(max_lag + 1);
    for k in 0..=max_lag {
        let num: f64 =
            (k..n).map(|t| (series[t] - mean) * (series[t - k] - mean)).sum();
        out.push(num / denom);
    }
    Ok(out)
}

/// Pearson correlation matrix of the columns of `data`.
pub fn cross_corr(data: &Tensor) -> Result<Tensor> {
    let (n, m) = (data.rows(), data.cols());
    if n < 2 {
        return Err(VoltError::Invalid("need at least 2 rows".into()));
    }
    let mut mean = vec![0.0; m];
    for r in 0..n {
        for (c, mu) in mean.iter_mut().enumerate() {
            *mu += data.get(r, c);
        }
    }
    for mu in mean.iter_mut() {
        *mu /= n as f64;
    }
    let mut cov = vec![0.0; m * m];
    for r in 0..n {
        for a in 0..m {
            let da = data.get(r, a) - mean[a];
            for b in a..m {
                cov[a * m + b] += da * (data.get(r, b) - mean[b]);
            }
        }
    }
    for a in 0..m {
        if cov[a * m + a] < 1e-300 {
            return Err(VoltError::Invalid(format!("column {a} has zero variance")));
        }
    }
    let mut out = Tensor::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let c = cov[a * m + b] / (cov[a * m + a] * cov[b * m + b]).sqrt();
            out.set(a, b, c);
            out.set(b, a, c);
        }
    }
    Ok(out)
}

/// Density-normalized histogram over `[lo, hi]` with equal bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
    pub n: usize,
}

pub fn histogram(sample: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if sample.is_empty() {
        return Err(VoltError::Invalid("empty sample".into()));
    }
    if bins == 0 || !(hi > lo) {
        return Err(VoltError::Invalid("bad histogram layout".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut inside = 0usize;
    for &x in sample {
        if x < lo || x > hi {
            continue;
        }
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
        inside += 1;
    }
    if inside == 0 {
        return Err(VoltError::Invalid("no sample points inside the range".into()));
    }
    let densities =
        counts.iter().map(|&c| c as f64 / (inside as f64 * width)).collect();
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    Ok(Histogram { edges, densities, n: inside })
}

/// Silverman bandwidth for a univariate Gaussian KDE.
pub fn silverman_bandwidth(sample: &[f64]) -> f64 {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// Gaussian kernel density estimate on a grid.
pub fn kde_1d(sample: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(VoltError::Invalid("empty sample".into()));
    }
    let h = silverman_bandwidth(sample).max(1e-12);
    let norm = 1.0 / (sample.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&g| {
            sample
                .iter()
                .map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect())
}

/// Product-kernel bivariate KDE with per-dimension Silverman bandwidths;
/// returns densities with rows indexing `grid_x`.
pub fn kde_2d(
    xs: &[f64],
    ys: &[f64],
    grid_x: &[f64],
    grid_y: &[f64],
) -> Result<Tensor> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(VoltError::Invalid("empty or mismatched sample".into()));
    }
    let hx = silverman_bandwidth(xs).max(1e-12);
    let hy = silverman_bandwidth(ys).max(1e-12);
    let norm = 1.0 / (xs.len() as f64 * hx * hy * 2.0 * std::f64::consts::PI);
    let mut out = Tensor::zeros(grid_x.len(), grid_y.len());
    for (i, &gx) in grid_x.iter().enumerate() {
        for (j, &gy) in grid_y.iter().enumerate() {
            let mut acc = 0.0;
            for (&x, &y) in xs.iter().zip(ys) {
                let ex = (gx - x) / hx;
                let ey = (gy - y) / hy;
                acc += (-0.5 * (ex * ex + ey * ey)).exp();
            }
            out.set(i, j, acc * norm);
        }
    }
    Ok(out)
}

/// Supremum distance between two empirical distribution functions.
pub fn empirical_sup_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(VoltError::Invalid("empty sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < sa.len() && j < sb.len() {
        if sa[i] < sb[j] {
            i += 1;
        } else if sb[j] < sa[i] {
            j += 1;
        } else {
            let v = sa[i];
            while i < sa.len() && sa[i] == v {
                i += 1;
            }
            while j < sb.len() && sb[j] == v {
                j += 1;
            }
        }
        let fa = i as f64 / sa.len() as f64;
        let fb = j as f64 / sb.len() as f64;
        d = d.max((fa - fb).abs());
    }
    Ok(d)
}

/// 1-Wasserstein distance between two empirical distributions (quantile L1).
pub fn wasserstein_1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(VoltError::Invalid("empty sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    // integrate |F_a^{-1}(q) - F_b^{-1}(q)| on a common quantile grid
    let m = (sa.len().max(sb.len())) * 2;
    let q = |s: &[f64], u: f64| -> f64 {
        let idx = ((u * s.len() as f64) as usize).min(s.len() - 1);
        s[idx]
    };
    let mut total = 0.0;
    for k in 0..m {
        let u = (k as f64 + 0.5) / m as f64;
        total += (q(&sa, u) - q(&sb, u)).abs();
    }
    Ok(total / m as f64)
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_of(xs: &[f64]) -> f64 {
    let m = mean_of(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean_of(a), mean_of(b));
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    num / (va * vb).sqrt()
}

/// Excess kurtosis (normal = 0), biased moments.
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m = mean_of(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Flat report of named metrics and arrays, each tagged with the sample
/// size that produced it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: String,
    pub scalars: BTreeMap<String, f64>,
    pub arrays: BTreeMap<String, Vec<f64>>,
    pub sample_sizes: BTreeMap<String, usize>,
}

impl MetricReport {
    pub fn new(mode: &str) -> Self {
        MetricReport { mode: mode.into(), ..Default::default() }
    }

    pub fn put_scalar(&mut self, name: &str, value: f64, n: usize) {
        self.scalars.insert(name.into(), value);
        self.sample_sizes.insert(name.into(), n);
    }

    pub fn put_array(&mut self, name: &str, values: Vec<f64>, n: usize) {
        self.arrays.insert(name.into(), values);
        self.sample_sizes.insert(name.into(), n);
    }

    pub fn merge(&mut self, other: &MetricReport) {
        for (k, v) in &other.scalars {
            self.scalars.insert(format!("{}.{}", other.mode, k), *v);
        }
        for (k, v) in &other.arrays {
            self.arrays.insert(format!("{}.{}", other.mode, k), v.clone());
        }
        for (k, v) in &other.sample_sizes {
            self.sample_sizes.insert(format!("{}.{}", other.mode, k), *v);
        }
    }
}

/// Stylized-facts report over historical returns and volatility surfaces.
pub fn stylized_facts(returns: &[f64], surfaces: &[DlvSurface]) -> Result<MetricReport> {
    if returns.len() < 130 || surfaces.len() < 130 {
        return Err(VoltError::Invalid("need at least 130 observations".into()));
    }
    if returns.len() != surfaces.len() {
        return Err(VoltError::Shape("returns and surfaces must align".into()));
    }
    let n = returns.len();
    let mut report = MetricReport::new("stylized_facts");
    report.put_scalar("return_mean", mean_of(returns), n);
    report.put_scalar("return_std", std_of(returns), n);
    report.put_scalar("return_excess_kurtosis", excess_kurtosis(returns), n);

    let acf_r = acf(returns, 5)?;
    report.put_array("acf_returns_lags_1_5", acf_r[1..].to_vec(), n);
    let abs_r: Vec<f64> = returns.iter().map(|r| r.abs()).collect();
    let acf_abs = acf(&abs_r, 20)?;
    report.put_array("acf_abs_returns_lags_1_20", acf_abs[1..].to_vec(), n);
    report.put_scalar("bartlett_band", 2.0 / (n as f64).sqrt(), n);

    // leverage: corr(r_t, |r_{t+1}|) plus the lag-0 variant
    let lead_abs: Vec<f64> = abs_r[1..].to_vec();
    report.put_scalar("leverage_corr_lag1", pearson(&returns[..n - 1], &lead_abs), n - 1);
    report.put_scalar("leverage_corr_lag0", pearson(returns, &abs_r), n);

    // per-maturity mean smile curves and the ATM persistence
    let grid = surfaces[0].grid().clone();
    let n_int = grid.n_interior();
    for j in 0..grid.n_maturities() {
        let mut smile = vec![0.0; n_int];
        for s in surfaces {
            for (i, v) in smile.iter_mut().enumerate() {
                *v += s.value(j, i) / surfaces.len() as f64;
            }
        }
        report.put_array(
            &format!("mean_smile_maturity_{}", grid.maturity_days()[j]),
            smile,
            surfaces.len(),
        );
    }
    let atm_col = grid
        .interior_strikes()
        .iter()
        .position(|&x| (x - 1.0).abs() < 1e-9)
        .unwrap_or(n_int / 2);
    let atm: Vec<f64> = surfaces.iter().map(|s| s.value(0, atm_col)).collect();
    report.put_array("atm_dlv_acf_128", acf(&atm, 128)?, atm.len());

    // level cross-correlation of all nodes, flattened row-major
    let node_rows: Vec<Vec<f64>> = surfaces.iter().map(|s| s.values().to_vec()).collect();
    let level_corr = cross_corr(&Tensor::from_rows(&node_rows))?;
    report.put_array("dlv_level_cross_corr", level_corr.data().to_vec(), surfaces.len());
    let ret_rows: Vec<Vec<f64>> = (1..surfaces.len())
        .map(|t| {
            surfaces[t]
                .values()
                .iter()
                .zip(surfaces[t - 1].values())
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    let ret_corr = cross_corr(&Tensor::from_rows(&ret_rows))?;
    report.put_array("dlv_return_cross_corr", ret_corr.data().to_vec(), surfaces.len() - 1);
    Ok(report)
}

fn first_node_vol(sim: &Simulator, state: &MarketState) -> Result<f64> {
    Ok(sim.decode_state(state)?.values()[0])
}

fn distribution_distances(
    report: &mut MetricReport,
    name: &str,
    historical: &[f64],
    generated: &[f64],
) -> Result<()> {
    report.put_scalar(
        &format!("{name}_sup_distance"),
        empirical_sup_distance(historical, generated)?,
        generated.len(),
    );
    report.put_scalar(
        &format!("{name}_wasserstein"),
        wasserstein_1(historical, generated)?,
        generated.len(),
    );
    Ok(())
}

/// Short-horizon protocol: for every historical condition, `m` paths of
/// `tau` days; compares level and difference processes to history.
pub fn short_horizon_eval(
    sim: &Simulator,
    states: &[MarketState],
    m: usize,
    tau: usize,
    seed: u64,
) -> Result<MetricReport> {
    let lag = sim.lag();
    if states.len() <= lag + 1 {
        return Err(VoltError::Invalid("state history shorter than the lag".into()));
    }
    let d = sim.state_dim();
    let mut gen_r = Vec::new();
    let mut gen_vol = Vec::new();
    let mut gen_dvol = Vec::new();
    let mut rejected = 0usize;
    let mut total = 0usize;
    for t in lag..states.len() {
        for k in 0..m {
            let mut rng = derive_stream(seed, t as u64, k as u64);
            let mut hist = states[..t].to_vec();
            let mut prev_vol = first_node_vol(sim, &states[t - 1])?;
            total += 1;
            let mut ok = true;
            for _ in 0..tau {
                let z: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
                let next = sim.step(&hist, &z)?;
                let vol = first_node_vol(sim, &next)?;
                gen_r.push(next.log_return);
                gen_vol.push(vol);
                gen_dvol.push(vol - prev_vol);
                prev_vol = vol;
                hist.push(next);
                if !hist.last().unwrap().to_vec().iter().all(|v| v.is_finite()) {
                    ok = false;
                    break;
                }
            }
            if !ok {
                rejected += 1;
            }
        }
    }

    let hist_r: Vec<f64> = states[lag..].iter().map(|s| s.log_return).collect();
    let hist_vol: Vec<f64> = states[lag..]
        .iter()
        .map(|s| first_node_vol(sim, s))
        .collect::<Result<_>>()?;
    let hist_dvol: Vec<f64> =
        hist_vol.windows(2).map(|w| w[1] - w[0]).collect();

    let mut report = MetricReport::new("short_horizon");
    report.put_scalar("paths_total", total as f64, total);
    report.put_scalar("rejection_fraction", rejected as f64 / total as f64, total);
    report.put_scalar("samples_generated", gen_r.len() as f64, gen_r.len());
    distribution_distances(&mut report, "return", &hist_r, &gen_r)?;
    distribution_distances(&mut report, "vol_level", &hist_vol, &gen_vol)?;
    distribution_distances(&mut report, "vol_return", &hist_dvol, &gen_dvol)?;
    report.put_scalar("generated_return_std", std_of(&gen_r), gen_r.len());
    report.put_scalar("historical_return_std", std_of(&hist_r), hist_r.len());
    report.put_array("historical_acf_r_2", acf(&hist_r, 2)?, hist_r.len());
    report.put_array("historical_acf_vol_2", acf(&hist_vol, 2)?, hist_vol.len());
    let gen_pairs = Tensor::from_rows(
        &gen_r.iter().zip(&gen_vol).map(|(&r, &v)| vec![r, v]).collect::<Vec<_>>(),
    );
    let hist_pairs = Tensor::from_rows(
        &hist_r.iter().zip(&hist_vol).map(|(&r, &v)| vec![r, v]).collect::<Vec<_>>(),
    );
    report.put_array("generated_cross_corr", cross_corr(&gen_pairs)?.data().to_vec(), gen_r.len());
    report.put_array(
        "historical_cross_corr",
        cross_corr(&hist_pairs)?.data().to_vec(),
        hist_r.len(),
    );
    Ok(report)
}

/// Long-horizon protocol: `n_paths` paths of `tau` days; only the last
/// `retain` days enter the statistics; exploded paths are rejected and
/// the rejection fraction reported.
pub fn long_horizon_eval(
    sim: &Simulator,
    states: &[MarketState],
    n_paths: usize,
    tau: usize,
    retain: usize,
    seed: u64,
) -> Result<MetricReport> {
    if retain == 0 || retain > tau {
        return Err(VoltError::Invalid("retain must lie in 1..=tau".into()));
    }
    let paths = sim.sample_paths(states, n_paths, tau, seed)?;
    let mut gen_r = Vec::new();
    let mut gen_vol = Vec::new();
    let mut rejected = 0usize;
    for p in &paths {
        if p.exploded {
            rejected += 1;
            continue;
        }
        for st in &p.states[tau - retain..] {
            gen_r.push(st.log_return);
            gen_vol.push(first_node_vol(sim, st)?);
        }
    }
    if gen_r.is_empty() {
        return Err(VoltError::Invalid("every path was rejected".into()));
    }
    let hist_r: Vec<f64> = states[sim.lag()..].iter().map(|s| s.log_return).collect();
    let hist_vol: Vec<f64> = states[sim.lag()..]
        .iter()
        .map(|s| first_node_vol(sim, s))
        .collect::<Result<_>>()?;

    let mut report = MetricReport::new("long_horizon");
    report.put_scalar("paths_total", n_paths as f64, n_paths);
    report.put_scalar("rejection_fraction", rejected as f64 / n_paths as f64, n_paths);
    report.put_scalar("retained_days", retain as f64, gen_r.len());
    report.put_scalar("generated_return_std", std_of(&gen_r), gen_r.len());
    report.put_scalar("historical_return_std", std_of(&hist_r), hist_r.len());
    distribution_distances(&mut report, "return", &hist_r, &gen_r)?;
    distribution_distances(&mut report, "vol_level", &hist_vol, &gen_vol)?;
    Ok(report)
}
