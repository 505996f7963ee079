//! Discrete local volatilities: a bijective, arbitrage-preserving codec
//! between call-price grids and per-node volatilities, plus an
//! arbitrage-free fitter for noisy market quote grids.
//!
//! A call grid is arbitrage-free iff its discrete local volatilities are
//! positive; the forward map (volatilities to prices) is an implicit
//! finite-difference induction in maturity whose tridiagonal systems are
//! strictly diagonally dominant.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Result, VoltError};
use crate::nn::{adam_step, OptimizerState};

/// Business days per year used to convert grid maturities.
pub const DAYS_PER_YEAR: f64 = 256.0;

const ARB_TOL: f64 = 1e-10;
const DEGENERATE_TOL: f64 = 1e-12;

/// Maturity/strike lattice around the unit forward. The first and last
/// strikes are boundary columns; the `n` strikes between them are interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrikeGrid {
    maturity_days: Vec<u32>,
    strikes: Vec<f64>,
}

impl StrikeGrid {
    pub fn new(maturity_days: Vec<u32>, strikes: Vec<f64>) -> Result<Self> {
        if maturity_days.is_empty() {
            return Err(VoltError::Grid("need at least one maturity".into()));
        }
        if !maturity_days.windows(2).all(|w| w[0] < w[1]) {
            return Err(VoltError::Grid("maturities must be strictly increasing".into()));
        }
        if maturity_days[0] == 0 {
            return Err(VoltError::Grid("maturities must be positive".into()));
        }
        if strikes.len() < 4 {
            return Err(VoltError::Grid(
                "need at least two interior strikes plus boundaries".into(),
            ));
        }
        if !strikes.windows(2).all(|w| w[0] < w[1]) {
            return Err(VoltError::Grid("strikes must be strictly increasing".into()));
        }
        if strikes[0] <= 0.0 {
            return Err(VoltError::Grid("strikes must be positive".into()));
        }
        if !(strikes[0] < 1.0 && *strikes.last().unwrap() > 1.0) {
            return Err(VoltError::Grid("strikes must bracket the unit forward".into()));
        }
        Ok(StrikeGrid { maturity_days, strikes })
    }

    /// The default experiment lattice: maturities {20, 40, 60, 120} business
    /// days and relative strikes 0.80 to 1.20 in steps of 0.05.
    pub fn default_experiment() -> Self {
        let strikes = (0..9).map(|i| 0.80 + 0.05 * i as f64).collect();
        StrikeGrid::new(vec![20, 40, 60, 120], strikes).unwrap()
    }

    pub fn maturity_days(&self) -> &[u32] {
        &self.maturity_days
    }

    /// Year fractions at 256 business days per year.
    pub fn taus(&self) -> Vec<f64> {
        self.maturity_days.iter().map(|&d| d as f64 / DAYS_PER_YEAR).collect()
    }

    /// All strikes including the two boundary columns.
    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn interior_strikes(&self) -> &[f64] {
        &self.strikes[1..self.strikes.len() - 1]
    }

    /// Number of maturities.
    pub fn n_maturities(&self) -> usize {
        self.maturity_days.len()
    }

    /// Number of interior strikes.
    pub fn n_interior(&self) -> usize {
        self.strikes.len() - 2
    }

    /// Interior node count (volatility dimension).
    pub fn node_count(&self) -> usize {
        self.n_maturities() * self.n_interior()
    }

    fn lower_boundary_price(&self) -> f64 {
        1.0 - self.strikes[0]
    }
}

/// Lower/upper volatility bounds; defaults 0.01 and 2.0 annualized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolBounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for VolBounds {
    fn default() -> Self {
        VolBounds { lower: 0.01, upper: 2.0 }
    }
}

impl VolBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && lower < upper) {
            return Err(VoltError::Invalid("need 0 < lower < upper volatility bound".into()));
        }
        Ok(VolBounds { lower, upper })
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }
}

/// Grid of call prices including the pinned boundary columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSurface {
    grid: StrikeGrid,
    /// Row-major, `m x (n + 2)` with boundary columns first and last.
    prices: Vec<f64>,
}

impl CallSurface {
    pub fn new(grid: StrikeGrid, prices: Vec<f64>) -> Result<Self> {
        let width = grid.strikes.len();
        if prices.len() != grid.n_maturities() * width {
            return Err(VoltError::Shape(format!(
                "price grid has {} entries, expected {}",
                prices.len(),
                grid.n_maturities() * width
            )));
        }
        if !prices.iter().all(|p| p.is_finite()) {
            return Err(VoltError::NonFinite("call prices".into()));
        }
        Ok(CallSurface { grid, prices })
    }

    pub fn grid(&self) -> &StrikeGrid {
        &self.grid
    }

    pub fn price(&self, maturity: usize, strike_col: usize) -> f64 {
        self.prices[maturity * self.grid.strikes.len() + strike_col]
    }

    pub fn row(&self, maturity: usize) -> &[f64] {
        let w = self.grid.strikes.len();
        &self.prices[maturity * w..(maturity + 1) * w]
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    /// Interior prices only, row-major `m x n`.
    pub fn interior_prices(&self) -> Vec<f64> {
        let w = self.grid.strikes.len();
        let mut out = Vec::with_capacity(self.grid.node_count());
        for j in 0..self.grid.n_maturities() {
            out.extend_from_slice(&self.prices[j * w + 1..(j + 1) * w - 1]);
        }
        out
    }
}

/// Grid of discrete local volatilities over interior strikes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlvSurface {
    grid: StrikeGrid,
    /// Row-major, `m x n`.
    dlvs: Vec<f64>,
    bounds: VolBounds,
}

impl DlvSurface {
    pub fn new(grid: StrikeGrid, dlvs: Vec<f64>, bounds: VolBounds) -> Result<Self> {
        if dlvs.len() != grid.node_count() {
            return Err(VoltError::Shape(format!(
                "dlv grid has {} entries, expected {}",
                dlvs.len(),
                grid.node_count()
            )));
        }
        if !dlvs.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(VoltError::Invalid("volatilities must be positive and finite".into()));
        }
        Ok(DlvSurface { grid, dlvs, bounds })
    }

    pub fn constant(grid: StrikeGrid, vol: f64, bounds: VolBounds) -> Result<Self> {
        let n = grid.node_count();
        DlvSurface::new(grid, vec![vol; n], bounds)
    }

    pub fn grid(&self) -> &StrikeGrid {
        &self.grid
    }

    pub fn bounds(&self) -> VolBounds {
        self.bounds
    }

    pub fn values(&self) -> &[f64] {
        &self.dlvs
    }

    pub fn value(&self, maturity: usize, strike: usize) -> f64 {
        self.dlvs[maturity * self.grid.n_interior() + strike]
    }
}

/// Discrete sensitivities of a call grid.
///
/// `delta[j][i]` is the upward difference quotient between strike columns
/// `i` and `i+1`; `gamma` and `btheta` cover interior strikes, with the
/// maturity difference taken against the intrinsic slice for the first row.
#[derive(Debug, Clone)]
pub struct DiscreteGreeks {
    pub delta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub btheta: Vec<Vec<f64>>,
}

/// One arbitrage-constraint violation: constraint family 1-4, node indices
/// and how far past tolerance the constraint is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbViolation {
    pub constraint: u8,
    pub maturity: usize,
    pub strike: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArbReport {
    pub violations: Vec<ArbViolation>,
}

impl ArbReport {
    pub fn is_free(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Intrinsic-value surface: each maturity row is `max(1 - x, 0)`.
pub fn intrinsic_surface(grid: &StrikeGrid) -> CallSurface {
    let mut prices = Vec::with_capacity(grid.n_maturities() * grid.strikes.len());
    for _ in 0..grid.n_maturities() {
        for &x in grid.strikes() {
            prices.push((1.0 - x).max(0.0));
        }
    }
    CallSurface::new(grid.clone(), prices).unwrap()
}

fn intrinsic_row(grid: &StrikeGrid) -> Vec<f64> {
    grid.strikes().iter().map(|&x| (1.0 - x).max(0.0)).collect()
}

/// Second-difference stencil weights at interior strike `i` (full-grid
/// index `i + 1`): returns `(a, c)` such that
/// `gamma_i = a * C[i-1] - (a + c) * C[i] + c * C[i+1]`.
fn gamma_stencil(strikes: &[f64], i: usize) -> (f64, f64) {
    let k = i + 1; // full-grid index
    let h_left = strikes[k] - strikes[k - 1];
    let h_right = strikes[k + 1] - strikes[k];
    let h_bar = 0.5 * (strikes[k + 1] - strikes[k - 1]);
    (1.0 / (h_left * h_bar), 1.0 / (h_right * h_bar))
}

fn gamma_row(strikes: &[f64], row: &[f64]) -> Vec<f64> {
    let n = strikes.len() - 2;
    (0..n)
        .map(|i| {
            let (a, c) = gamma_stencil(strikes, i);
            a * row[i] - (a + c) * row[i + 1] + c * row[i + 2]
        })
        .collect()
}

/// Upward delta, convexity and calendar differences of a call surface.
pub fn discrete_greeks(surface: &CallSurface) -> DiscreteGreeks {
    let grid = surface.grid();
    let strikes = grid.strikes();
    let m = grid.n_maturities();
    let intrinsic = intrinsic_row(grid);

    let mut delta = Vec::with_capacity(m);
    let mut gamma = Vec::with_capacity(m);
    let mut btheta = Vec::with_capacity(m);
    for j in 0..m {
        let row = surface.row(j);
        let d: Vec<f64> = (0..strikes.len() - 1)
            .map(|k| (row[k + 1] - row[k]) / (strikes[k + 1] - strikes[k]))
            .collect();
        gamma.push(gamma_row(strikes, row));
        let prev: &[f64] = if j == 0 { &intrinsic } else { surface.row(j - 1) };
        btheta.push((0..grid.n_interior()).map(|i| row[i + 1] - prev[i + 1]).collect());
        delta.push(d);
    }
    DiscreteGreeks { delta, gamma, btheta }
}

/// Evaluate the four linear arbitrage constraint families; violations beyond
/// `1e-10` are collected (they are data, not errors).
pub fn check_arbitrage(surface: &CallSurface, bounds: VolBounds) -> ArbReport {
    let grid = surface.grid();
    let taus = grid.taus();
    let strikes = grid.strikes();
    let greeks = discrete_greeks(surface);
    let mut violations = Vec::new();

    for j in 0..grid.n_maturities() {
        let row = surface.row(j);
        let n = grid.n_interior();
        // 1: first interior price at or above its intrinsic value
        let intrinsic0 = 1.0 - strikes[1];
        if row[1] < intrinsic0 - ARB_TOL {
            violations.push(ArbViolation {
                constraint: 1,
                maturity: j,
                strike: 0,
                magnitude: intrinsic0 - row[1],
            });
        }
        // 2: last interior price non-negative
        if row[n] < -ARB_TOL {
            violations.push(ArbViolation {
                constraint: 2,
                maturity: j,
                strike: n - 1,
                magnitude: -row[n],
            });
        }
        let dtau = if j == 0 { taus[0] } else { taus[j] - taus[j - 1] };
        for i in 0..n {
            let g = greeks.gamma[j][i];
            if g < -ARB_TOL {
                violations.push(ArbViolation {
                    constraint: 3,
                    maturity: j,
                    strike: i,
                    magnitude: -g,
                });
            }
            let x = strikes[i + 1];
            let base = 0.5 * g.max(0.0) * x * x * dtau;
            let bt = greeks.btheta[j][i];
            let lo = bounds.lower * bounds.lower * base;
            let hi = bounds.upper * bounds.upper * base;
            if bt < lo - ARB_TOL || bt > hi + ARB_TOL {
                violations.push(ArbViolation {
                    constraint: 4,
                    maturity: j,
                    strike: i,
                    magnitude: if bt < lo { lo - bt } else { bt - hi },
                });
            }
        }
    }
    ArbReport { violations }
}

/// Recover discrete local volatilities from an arbitrage-free call surface.
///
/// Degenerate nodes where both convexity and calendar difference vanish are
/// pinned to the lower bound; a vanishing convexity with positive calendar
/// difference is an error (the volatility would be infinite).
pub fn calls_to_dlvs(surface: &CallSurface, bounds: VolBounds) -> Result<DlvSurface> {
    let grid = surface.grid();
    let taus = grid.taus();
    let strikes = grid.strikes();
    let greeks = discrete_greeks(surface);
    let n = grid.n_interior();
    let mut dlvs = Vec::with_capacity(grid.node_count());
    for j in 0..grid.n_maturities() {
        let dtau = if j == 0 { taus[0] } else { taus[j] - taus[j - 1] };
        for i in 0..n {
            let g = greeks.gamma[j][i];
            let bt = greeks.btheta[j][i];
            if g.abs() < DEGENERATE_TOL && bt.abs() < DEGENERATE_TOL {
                dlvs.push(bounds.lower);
                continue;
            }
            if g <= 0.0 || bt < 0.0 {
                return Err(VoltError::Arbitrage(format!(
                    "node (maturity {j}, strike {i}): gamma {g:.3e}, calendar {bt:.3e}"
                )));
            }
            let x = strikes[i + 1];
            let sigma = (2.0 * bt / (g * x * x * dtau)).sqrt();
            dlvs.push(bounds.clamp(sigma));
        }
    }
    DlvSurface::new(grid.clone(), dlvs, bounds)
}

/// Solve a tridiagonal system in place (Thomas algorithm). `lower[0]` and
/// `upper[n-1]` are unused.
fn thomas_solve(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    rhs[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        rhs[i] = d[i] - c[i] * rhs[i + 1];
    }
}

struct SliceSystem {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

/// Build the implicit-step system `C_i - k_i * gamma_i(C) = prev_i` for one
/// maturity slice. `k[i] = 0.5 * sigma_i^2 * x_i^2 * dtau`.
fn slice_system(strikes: &[f64], k: &[f64]) -> SliceSystem {
    let n = k.len();
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n {
        let (a, c) = gamma_stencil(strikes, i);
        lower[i] = -k[i] * a;
        diag[i] = 1.0 + k[i] * (a + c);
        upper[i] = -k[i] * c;
    }
    SliceSystem { lower, diag, upper }
}

/// Price a call surface from discrete local volatilities by forward
/// induction in maturity starting at the intrinsic slice. The output always
/// passes [`check_arbitrage`].
pub fn dlvs_to_calls(dlvs: &DlvSurface) -> Result<CallSurface> {
    let grid = dlvs.grid();
    let strikes = grid.strikes();
    let taus = grid.taus();
    let n = grid.n_interior();
    let m = grid.n_maturities();
    let c_left = grid.lower_boundary_price();
    let c_right = 0.0;

    let mut prices = Vec::with_capacity(m * strikes.len());
    let mut prev: Vec<f64> = intrinsic_row(grid)[1..=n].to_vec();
    for j in 0..m {
        let dtau = if j == 0 { taus[0] } else { taus[j] - taus[j - 1] };
        let k: Vec<f64> = (0..n)
            .map(|i| {
                let sigma = dlvs.value(j, i);
                let x = strikes[i + 1];
                0.5 * sigma * sigma * x * x * dtau
            })
            .collect();
        let sys = slice_system(strikes, k.as_slice());
        let mut rhs = prev.clone();
        rhs[0] -= sys.lower[0] * c_left;
        rhs[n - 1] -= sys.upper[n - 1] * c_right;
        thomas_solve(&sys.lower, &sys.diag, &sys.upper, &mut rhs);
        prices.push(c_left);
        prices.extend_from_slice(&rhs);
        prices.push(c_right);
        prev = rhs;
    }
    CallSurface::new(grid.clone(), prices)
}

/// Solve the transposed slice system (adjoint pass of the implicit step).
fn thomas_solve_transposed(sys: &SliceSystem, rhs: &mut [f64]) {
    // transpose swaps the off-diagonals (shifted by one index)
    let n = sys.diag.len();
    let lower_t: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { sys.upper[i - 1] }).collect();
    let upper_t: Vec<f64> = (0..n).map(|i| if i + 1 < n { sys.lower[i + 1] } else { 0.0 }).collect();
    thomas_solve(&lower_t, &sys.diag, &upper_t, rhs);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop when the objective improves by less than this amount.
    pub tolerance: f64,
    /// Initial volatility when no warm start is given.
    pub initial_vol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { learning_rate: 0.05, max_iterations: 4000, tolerance: 1e-10, initial_vol: 0.2 }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub surface: DlvSurface,
    pub objective: f64,
    pub iterations: usize,
}

fn squash(theta: f64, bounds: VolBounds) -> f64 {
    bounds.lower + (bounds.upper - bounds.lower) * sigmoid(theta)
}

fn unsquash(sigma: f64, bounds: VolBounds) -> f64 {
    let p = ((sigma - bounds.lower) / (bounds.upper - bounds.lower)).clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Objective and exact gradient of the surface fit at unconstrained
/// parameters `theta` (volatilities through a bounded squashing).
///
/// The objective is the mean squared interior price error; gradients run
/// through each maturity's implicit solve via the adjoint system.
pub fn fit_objective_grad(
    theta: &[f64],
    market: &CallSurface,
    bounds: VolBounds,
) -> Result<(f64, Vec<f64>)> {
    let grid = market.grid();
    let strikes = grid.strikes();
    let taus = grid.taus();
    let n = grid.n_interior();
    let m = grid.n_maturities();
    let node_count = (m * n) as f64;
    let c_left = grid.lower_boundary_price();

    // forward pass, retaining per-slice state
    let mut prev: Vec<f64> = intrinsic_row(grid)[1..=n].to_vec();
    let mut slices: Vec<(SliceSystem, Vec<f64>, Vec<f64>)> = Vec::with_capacity(m);
    let mut objective = 0.0;
    for j in 0..m {
        let dtau = if j == 0 { taus[0] } else { taus[j] - taus[j - 1] };
        let k: Vec<f64> = (0..n)
            .map(|i| {
                let sigma = squash(theta[j * n + i], bounds);
                let x = strikes[i + 1];
                0.5 * sigma * sigma * x * x * dtau
            })
            .collect();
        let sys = slice_system(strikes, &k);
        let mut sol = prev.clone();
        sol[0] -= sys.lower[0] * c_left;
        thomas_solve(&sys.lower, &sys.diag, &sys.upper, &mut sol);
        for i in 0..n {
            let diff = sol[i] - market.price(j, i + 1);
            objective += diff * diff / node_count;
        }
        prev = sol.clone();
        slices.push((sys, sol, k));
    }

    // adjoint pass, newest maturity first
    let mut grad = vec![0.0; m * n];
    let mut carry = vec![0.0; n];
    for j in (0..m).rev() {
        let (sys, sol, _k) = &slices[j];
        let mut g: Vec<f64> = (0..n)
            .map(|i| 2.0 * (sol[i] - market.price(j, i + 1)) / node_count + carry[i])
            .collect();
        thomas_solve_transposed(sys, &mut g);
        // gamma of the solved slice, with boundary columns
        let mut full = Vec::with_capacity(n + 2);
        full.push(c_left);
        full.extend_from_slice(sol);
        full.push(0.0);
        let gm = gamma_row(strikes, &full);
        let dtau = if j == 0 { taus[0] } else { taus[j] - taus[j - 1] };
        for i in 0..n {
            let sigma = squash(theta[j * n + i], bounds);
            let x = strikes[i + 1];
            let dk_dsigma = sigma * x * x * dtau;
            let s = sigmoid(theta[j * n + i]);
            let dsigma_dtheta = (bounds.upper - bounds.lower) * s * (1.0 - s);
            grad[j * n + i] = g[i] * gm[i] * dk_dsigma * dsigma_dtheta;
        }
        carry = g;
    }
    Ok((objective, grad))
}

/// Find the volatility surface whose implied call grid is closest (in mean
/// squared error) to the market quotes. Feasibility is automatic: every
/// in-bounds volatility surface prices to an arbitrage-free grid.
pub fn fit_arbitrage_free(
    market: &CallSurface,
    bounds: VolBounds,
    config: &FitConfig,
    warm_start: Option<&DlvSurface>,
) -> Result<FitOutcome> {
    let grid = market.grid();
    if !market.prices().iter().all(|p| p.is_finite()) {
        return Err(VoltError::NonFinite("market prices".into()));
    }
    let count = grid.node_count();
    let mut theta: Vec<f64> = match warm_start {
        Some(s) => s.values().iter().map(|&v| unsquash(v, bounds)).collect(),
        None => vec![unsquash(config.initial_vol, bounds); count],
    };
    let mut state = OptimizerState::new(count, config.learning_rate);
    let mut best = f64::INFINITY;
    let mut best_theta = theta.clone();
    let mut stale = 0usize;
    let mut iterations = 0;
    for _ in 0..config.max_iterations {
        let (obj, grad) = fit_objective_grad(&theta, market, bounds)?;
        if obj < best - config.tolerance {
            best = obj;
            best_theta.copy_from_slice(&theta);
            stale = 0;
        } else {
            stale += 1;
            if stale >= 50 {
                break;
            }
        }
        adam_step(&mut theta, &grad, &mut state)?;
        iterations += 1;
    }
    let dlvs: Vec<f64> = best_theta.iter().map(|&t| squash(t, bounds)).collect();
    let surface = DlvSurface::new(grid.clone(), dlvs, bounds)?;
    Ok(FitOutcome { surface, objective: best, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn grid() -> StrikeGrid {
        StrikeGrid::default_experiment()
    }

    #[test]
    fn intrinsic_values() {
        let s = intrinsic_surface(&grid());
        // x = 0.9 -> 0.1, x = 1.2 -> 0
        assert_relative_eq!(s.price(0, 2), 0.1, epsilon = 1e-14);
        assert_relative_eq!(s.price(0, 8), 0.0);
        // boundary columns at their pinned values
        for j in 0..4 {
            assert_relative_eq!(s.price(j, 0), 0.2, epsilon = 1e-14);
            assert_relative_eq!(s.price(j, 8), 0.0);
        }
    }

    #[test]
    fn gamma_of_quadratic_is_constant() {
        let g = grid();
        let a = 3.0;
        let prices: Vec<f64> = (0..4)
            .flat_map(|_| g.strikes().iter().map(|&x| a * x * x).collect::<Vec<_>>())
            .collect();
        let s = CallSurface::new(g.clone(), prices).unwrap();
        let greeks = discrete_greeks(&s);
        for j in 0..4 {
            for i in 0..g.n_interior() {
                assert_relative_eq!(greeks.gamma[j][i], 2.0 * a, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gamma_of_linear_row_is_zero_and_flat_maturity_gives_zero_btheta() {
        let g = grid();
        let row: Vec<f64> = g.strikes().iter().map(|&x| 1.5 - 0.9 * x).collect();
        let prices: Vec<f64> = (0..4).flat_map(|_| row.clone()).collect();
        let s = CallSurface::new(g.clone(), prices).unwrap();
        let greeks = discrete_greeks(&s);
        for j in 0..4 {
            for i in 0..g.n_interior() {
                assert_relative_eq!(greeks.gamma[j][i], 0.0, epsilon = 1e-10);
                if j > 0 {
                    assert_relative_eq!(greeks.btheta[j][i], 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn synthetic_surface_is_arbitrage_free() {
        let s = DlvSurface::constant(grid(), 0.2, VolBounds::default()).unwrap();
        let calls = dlvs_to_calls(&s).unwrap();
        let report = check_arbitrage(&calls, VolBounds::default());
        assert!(report.is_free(), "{:?}", report.violations);
    }

    #[test]
    fn bumped_surface_breaks_convexity() {
        let s = DlvSurface::constant(grid(), 0.2, VolBounds::default()).unwrap();
        let calls = dlvs_to_calls(&s).unwrap();
        let mut prices = calls.prices().to_vec();
        prices[2 * 9 + 4] += 0.1;
        let bumped = CallSurface::new(grid(), prices).unwrap();
        let report = check_arbitrage(&bumped, VolBounds::default());
        assert!(!report.is_free());
        assert!(report.violations.iter().any(|v| v.constraint == 3));
    }

    #[test]
    fn flat_zero_interior_violates_intrinsic_floor() {
        let g = StrikeGrid::new(vec![20], (0..9).map(|i| 0.80 + 0.05 * i as f64).collect())
            .unwrap();
        let mut prices = vec![0.0; 9];
        prices[0] = 0.2;
        let s = CallSurface::new(g, prices).unwrap();
        let report = check_arbitrage(&s, VolBounds::default());
        assert!(report
            .violations
            .iter()
            .any(|v| v.constraint == 1 && v.strike == 0));
    }

    #[test]
    fn round_trip_constant_vol() {
        let bounds = VolBounds::default();
        let s = DlvSurface::constant(grid(), 0.25, bounds).unwrap();
        let calls = dlvs_to_calls(&s).unwrap();
        let back = calls_to_dlvs(&calls, bounds).unwrap();
        for (a, b) in s.values().iter().zip(back.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn degenerate_zero_diffusion_limit_approaches_intrinsic() {
        let bounds = VolBounds::new(1e-6, 2.0).unwrap();
        let s = DlvSurface::constant(grid(), 1e-6, bounds).unwrap();
        let calls = dlvs_to_calls(&s).unwrap();
        let intrinsic = intrinsic_surface(&grid());
        for (a, b) in calls.prices().iter().zip(intrinsic.prices()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn repeated_slice_pins_degenerate_nodes_to_lower_bound() {
        // constant-in-maturity interior beyond the first slice: btheta = 0
        let bounds = VolBounds::default();
        let g = grid();
        let one = DlvSurface::constant(
            StrikeGrid::new(vec![20], g.strikes().to_vec()).unwrap(),
            0.3,
            bounds,
        )
        .unwrap();
        let first = dlvs_to_calls(&one).unwrap();
        let mut prices = Vec::new();
        for _ in 0..4 {
            prices.extend_from_slice(first.row(0));
        }
        let s = CallSurface::new(g, prices).unwrap();
        let back = calls_to_dlvs(&s, bounds).unwrap();
        // all rows after the first have vanishing calendar spread
        for j in 1..4 {
            for i in 0..back.grid().n_interior() {
                assert_relative_eq!(back.value(j, i), bounds.lower);
            }
        }
    }

    #[test]
    fn fit_gradient_matches_finite_differences() {
        let bounds = VolBounds::default();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let g = grid();
        let vols: Vec<f64> = (0..g.node_count()).map(|_| rng.random_range(0.1..0.6)).collect();
        let target = dlvs_to_calls(&DlvSurface::new(g.clone(), vols, bounds).unwrap()).unwrap();
        let theta: Vec<f64> =
            (0..g.node_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grad) = fit_objective_grad(&theta, &target, bounds).unwrap();
        let h = 1e-6;
        let mut t = theta.clone();
        for i in 0..theta.len() {
            t[i] = theta[i] + h;
            let (fp, _) = fit_objective_grad(&t, &target, bounds).unwrap();
            t[i] = theta[i] - h;
            let (fm, _) = fit_objective_grad(&t, &target, bounds).unwrap();
            t[i] = theta[i];
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(grad[i], fd, max_relative = 1e-4, epsilon = 1e-12);
        }
    }

    #[test]
    fn fit_recovers_arbitrage_free_market() {
        let bounds = VolBounds::default();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let g = grid();
        let vols: Vec<f64> = (0..g.node_count()).map(|_| rng.random_range(0.15..0.45)).collect();
        let truth = DlvSurface::new(g.clone(), vols, bounds).unwrap();
        let market = dlvs_to_calls(&truth).unwrap();
        let fit = fit_arbitrage_free(&market, bounds, &FitConfig::default(), None).unwrap();
        assert!(fit.objective < 1e-8, "objective {}", fit.objective);
        for (a, b) in fit.surface.values().iter().zip(truth.values()) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
        let repriced = dlvs_to_calls(&fit.surface).unwrap();
        for (a, b) in repriced.interior_prices().iter().zip(market.interior_prices()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn fit_projects_noisy_market_to_arbitrage_free() {
        let bounds = VolBounds::default();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let g = grid();
        let truth = DlvSurface::constant(g.clone(), 0.3, bounds).unwrap();
        let clean = dlvs_to_calls(&truth).unwrap();
        let noisy: Vec<f64> = clean
            .prices()
            .iter()
            .enumerate()
            .map(|(idx, &p)| {
                let col = idx % g.strikes().len();
                if col == 0 || col == g.strikes().len() - 1 {
                    p
                } else {
                    p + rng.random_range(-1e-4..1e-4)
                }
            })
            .collect();
        let market = CallSurface::new(g.clone(), noisy).unwrap();
        let fit = fit_arbitrage_free(&market, bounds, &FitConfig::default(), None).unwrap();
        let refit = dlvs_to_calls(&fit.surface).unwrap();
        assert!(check_arbitrage(&refit, bounds).is_free());
        assert!(fit.objective <= 1e-8 * (g.node_count() as f64).max(1.0) + 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_vol_surfaces_round_trip_and_stay_arbitrage_free(seed in 0u64..1_000_000) {
            let bounds = VolBounds::default();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let g = grid();
            let vols: Vec<f64> = (0..g.node_count())
                .map(|_| rng.random_range(0.05..1.5))
                .collect();
            let s = DlvSurface::new(g, vols, bounds).unwrap();
            let calls = dlvs_to_calls(&s).unwrap();
            prop_assert!(check_arbitrage(&calls, bounds).is_free());
            let back = calls_to_dlvs(&calls, bounds).unwrap();
            for (a, b) in s.values().iter().zip(back.values()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
