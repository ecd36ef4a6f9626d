//! Swing option pricing by least-squares Monte Carlo.
//!
//! The state is the cumulative consumption, restricted to the lattice
//! built by [`build_grid`]. Continuation values are regressed per lattice
//! node on a quadratic basis in the day-ahead fixing (and the strike, for
//! floating-strike contracts), and the resulting policy is replayed on an
//! independent set of paths.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lv_model::ModelParams;
use crate::market::{DeliveryPeriod, DiscountCurve, SharedCurve, DAY};
use crate::mc::{
    day_ahead_fixings, day_ahead_maps, floating_strikes, mean_se, simulate_spot, strike_maps, FixingSet,
    SimulationSchedule,
};
use crate::rng::SeedDomain;

const LEVEL_EPS: f64 = 1e-9;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrikeSpec {
    Fixed {
        strike: f64,
    },
    /// Mean of `F_t(T, δ)` over the strike days.
    Floating {
        strike_days: Vec<u32>,
        maturity_day: u32,
        delivery: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConsumptionMode {
    /// Any lattice level; gaps thinner than `delta`.
    Continuous { delta: f64 },
    /// Only the smallest or largest admissible consumption.
    BangBang,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwingContract {
    /// Fixing days counted from valuation.
    pub fixing_days: Vec<u32>,
    pub n_min: f64,
    pub n_max: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub strike: StrikeSpec,
    /// Days between a fixing and its payment.
    #[serde(default = "default_pay_lag")]
    pub pay_lag_days: u32,
    pub mode: ConsumptionMode,
}

fn default_pay_lag() -> u32 {
    1
}

impl SwingContract {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_fixings() as f64;
        if self.fixing_days.is_empty() || self.fixing_days.windows(2).any(|w| w[1] <= w[0]) || self.fixing_days[0] == 0
        {
            return invalid("fixing days must be positive and strictly increasing");
        }
        if !(0.0 <= self.n_min && self.n_min < self.n_max) {
            return invalid("daily bounds need 0 <= n_min < n_max");
        }
        if !(self.c_min <= self.c_max)
            || n * self.n_min > self.c_max + LEVEL_EPS
            || self.c_min > n * self.n_max + LEVEL_EPS
        {
            return invalid("global bounds are infeasible for the daily bounds");
        }
        if let ConsumptionMode::Continuous { delta } = self.mode {
            if !(delta > 0.0) {
                return invalid("grid spacing must be positive");
            }
        }
        if let StrikeSpec::Floating { strike_days, .. } = &self.strike {
            if strike_days.is_empty() {
                return invalid("floating strike needs strike days");
            }
        }
        Ok(())
    }

    pub fn n_fixings(&self) -> usize {
        self.fixing_days.len()
    }

    pub fn with_mode(&self, mode: ConsumptionMode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// `(D_i, U_i)`, the reachable cumulative consumption after fixing `i`
    /// (`i = 0` before any fixing).
    pub fn global_bounds(&self, i: usize) -> (f64, f64) {
        let n = self.n_fixings();
        let left = (n - i) as f64;
        let lower = (self.c_min - self.n_max * left).max(i as f64 * self.n_min);
        let upper = (self.c_max - self.n_min * left).min(i as f64 * self.n_max);
        (lower, upper)
    }

    pub fn schedule(&self, substeps_per_day: u32) -> Result<SimulationSchedule> {
        let strike_days = match &self.strike {
            StrikeSpec::Fixed { .. } => Vec::new(),
            StrikeSpec::Floating { strike_days, .. } => strike_days.clone(),
        };
        SimulationSchedule::new(self.fixing_days.clone(), strike_days, substeps_per_day)
    }

    /// Discount factor of the payment for fixing `i` (0-based).
    pub fn pay_discounts(&self, dcurve: &DiscountCurve) -> Vec<f64> {
        self.fixing_days
            .iter()
            .map(|&d| dcurve.df((d + self.pay_lag_days) as f64 * DAY))
            .collect()
    }
}

/// Cumulative consumption levels after each fixing; `levels[0] = [0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsumptionGrid {
    pub levels: Vec<Vec<f64>>,
    /// Whether a level is produced by an extreme decision (before thickening).
    pub bang_bang: Vec<Vec<bool>>,
}

fn dedup_sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs.dedup_by(|a, b| (*a - *b).abs() <= LEVEL_EPS);
    xs
}

pub fn build_grid(contract: &SwingContract) -> ConsumptionGrid {
    let n = contract.n_fixings();
    let mut levels = vec![vec![0.0]];
    let mut bang_bang = vec![vec![true]];
    for i in 1..=n {
        let (lo, hi) = contract.global_bounds(i);
        let prev = &levels[i - 1];
        let mut extremes = Vec::with_capacity(2 * prev.len());
        for &x in prev {
            extremes.push((x + contract.n_max).min(hi));
            extremes.push((x + contract.n_min).max(lo));
        }
        let extremes = dedup_sorted(extremes);
        let mut level = extremes.clone();
        if let ConsumptionMode::Continuous { delta } = contract.mode {
            for w in extremes.windows(2) {
                let gap = w[1] - w[0];
                let pieces = (gap / delta - 1e-9).ceil() as usize;
                for p in 1..pieces {
                    level.push(w[0] + gap * p as f64 / pieces as f64);
                }
            }
            level = dedup_sorted(level);
        }
        let marks = level
            .iter()
            .map(|y| extremes.iter().any(|e| (e - y).abs() <= LEVEL_EPS))
            .collect();
        levels.push(level);
        bang_bang.push(marks);
    }
    ConsumptionGrid { levels, bang_bang }
}

/// Decisions available at fixing `i` (1-based) from a level of date `i − 1`:
/// indices into `levels[i]`.
pub fn admissible_actions(
    contract: &SwingContract,
    grid: &ConsumptionGrid,
    i: usize,
    c_prev: f64,
) -> Result<Vec<usize>> {
    let (d, u) = contract.global_bounds(i);
    let lo = (c_prev + contract.n_min).max(d);
    let hi = (c_prev + contract.n_max).min(u);
    let level = &grid.levels[i];
    let start = level.partition_point(|&y| y < lo - LEVEL_EPS);
    let end = level.partition_point(|&y| y <= hi + LEVEL_EPS);
    if start >= end {
        return Err(Error::InfeasibleState(format!(
            "no admissible consumption at fixing {i} from level {c_prev}"
        )));
    }
    Ok(match contract.mode {
        ConsumptionMode::BangBang if end - start > 1 => vec![start, end - 1],
        _ => (start..end).collect(),
    })
}

/// Admissible moves of every level, date by date.
#[derive(Debug, Clone)]
struct Transitions {
    /// `moves[i][l]`: targets in `levels[i]` from `levels[i − 1][l]`.
    moves: Vec<Vec<Vec<usize>>>,
}

fn transitions(contract: &SwingContract, grid: &ConsumptionGrid) -> Result<Transitions> {
    let mut moves = vec![Vec::new()];
    for i in 1..grid.levels.len() {
        moves.push(
            grid.levels[i - 1]
                .iter()
                .map(|&x| admissible_actions(contract, grid, i, x))
                .collect::<Result<_>>()?,
        );
    }
    Ok(Transitions { moves })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BasisKind {
    Quadratic,
    Linear,
    Mean,
}

/// Standardized regression basis in `F` (and `K`).
#[derive(Debug, Clone, PartialEq)]
struct Basis {
    kind: BasisKind,
    with_strike: bool,
    f_mean: f64,
    f_scale: f64,
    k_mean: f64,
    k_scale: f64,
}

impl Basis {
    fn dim(&self) -> usize {
        match (self.kind, self.with_strike) {
            (BasisKind::Mean, _) => 1,
            (BasisKind::Linear, false) => 2,
            (BasisKind::Linear, true) => 3,
            (BasisKind::Quadratic, false) => 3,
            (BasisKind::Quadratic, true) => 6,
        }
    }

    fn features(&self, f: f64, k: f64, out: &mut [f64; 6]) {
        let x = (f - self.f_mean) / self.f_scale;
        let z = (k - self.k_mean) / self.k_scale;
        out[0] = 1.0;
        match (self.kind, self.with_strike) {
            (BasisKind::Mean, _) => {}
            (BasisKind::Linear, false) => out[1] = x,
            (BasisKind::Linear, true) => {
                out[1] = x;
                out[2] = z;
            }
            (BasisKind::Quadratic, false) => {
                out[1] = x;
                out[2] = x * x;
            }
            (BasisKind::Quadratic, true) => {
                out[1] = x;
                out[2] = x * x;
                out[3] = z;
                out[4] = z * z;
                out[5] = x * z;
            }
        }
    }
}

/// Fitted continuation values of one fixing date: one coefficient vector
/// per lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct DateFit {
    basis: Basis,
    coeffs: Vec<Vec<f64>>,
}

impl DateFit {
    pub fn degree_label(&self) -> &'static str {
        match self.basis.kind {
            BasisKind::Quadratic => "quadratic",
            BasisKind::Linear => "linear",
            BasisKind::Mean => "mean",
        }
    }

    fn continuation(&self, node: usize, phi: &[f64; 6]) -> f64 {
        self.coeffs[node].iter().zip(phi).map(|(c, p)| c * p).sum()
    }
}

/// Continuation fits for fixings `1..n_f − 1` (index `i − 1`); the last
/// date has none.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionCoeffs {
    pub fits: Vec<DateFit>,
}

fn moments(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Picks the richest basis whose normal matrix is well conditioned and
/// returns its Cholesky factor.
fn choose_basis(fixings: &FixingSet, date: usize) -> (Basis, Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>) {
    let n = fixings.n_paths;
    let (f_mean, f_sd) = moments((0..n).map(|k| fixings.fixing(k, date)));
    let (k_mean, k_sd, with_strike) = match &fixings.strikes {
        Some(ks) => {
            let (m, s) = moments(ks.iter().copied());
            (m, s, s > 1e-12 * m.abs().max(1.0))
        }
        None => (0.0, 1.0, false),
    };
    let spread = f_sd > 1e-12 * f_mean.abs().max(1.0);
    for kind in [BasisKind::Quadratic, BasisKind::Linear, BasisKind::Mean] {
        if kind != BasisKind::Mean && !spread {
            continue;
        }
        let basis = Basis {
            kind,
            with_strike: with_strike && kind != BasisKind::Mean,
            f_mean,
            f_scale: if spread { f_sd } else { 1.0 },
            k_mean,
            k_scale: if with_strike { k_sd } else { 1.0 },
        };
        let dim = basis.dim();
        if n < dim {
            continue;
        }
        let mut normal = DMatrix::<f64>::zeros(dim, dim);
        let mut phi = [0.0; 6];
        for k in 0..n {
            let strike = fixings.strikes.as_ref().map_or(0.0, |s| s[k]);
            basis.features(fixings.fixing(k, date), strike, &mut phi);
            for r in 0..dim {
                for c in 0..=r {
                    normal[(r, c)] += phi[r] * phi[c];
                }
            }
        }
        for r in 0..dim {
            for c in 0..r {
                normal[(c, r)] = normal[(r, c)];
            }
        }
        let eig = SymmetricEigen::new(normal.clone()).eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if min > 0.0 && max / min <= MAX_CONDITION {
            return (basis, normal.cholesky());
        }
    }
    unreachable!("the constant basis is always well conditioned")
}

pub(crate) fn strike_of(fixings: &FixingSet, k: usize, fixed: f64) -> f64 {
    fixings.strikes.as_ref().map_or(fixed, |s| s[k])
}

pub(crate) fn fixed_strike(contract: &SwingContract) -> f64 {
    match contract.strike {
        StrikeSpec::Fixed { strike } => strike,
        StrikeSpec::Floating { .. } => f64::NAN,
    }
}

/// Backward induction on the regression paths. Returns the fits and the
/// in-sample value at the root.
pub fn backward_regression(
    fixings: &FixingSet,
    grid: &ConsumptionGrid,
    contract: &SwingContract,
    discounts: &[f64],
) -> Result<(RegressionCoeffs, f64)> {
    contract.validate()?;
    let n_f = contract.n_fixings();
    if fixings.n_dates != n_f || discounts.len() != n_f {
        return invalid("fixings and discounts must cover every fixing date");
    }
    let strike = fixed_strike(contract);
    if strike.is_nan() && fixings.strikes.is_none() {
        return invalid("floating-strike contract needs per-path strikes");
    }
    let trans = transitions(contract, grid)?;
    let n = fixings.n_paths;
    let mut fits: Vec<Option<DateFit>> = vec![None; n_f];
    // value_next[k * nodes + j] = V_{i+1}(levels[i][j]) on path k
    let mut value_next: Vec<f64> = Vec::new();
    for i in (1..=n_f).rev() {
        let nodes = grid.levels[i].len();
        let prev_nodes = grid.levels[i - 1].len();
        let date = i - 1;
        let fit = if i < n_f {
            let (basis, chol) = choose_basis(fixings, date);
            let dim = basis.dim();
            let chol = chol.expect("basis chosen with a factorization");
            let mut rhs = vec![DVector::<f64>::zeros(dim); nodes];
            let mut phi = [0.0; 6];
            for k in 0..n {
                basis.features(fixings.fixing(k, date), strike_of(fixings, k, strike), &mut phi);
                let row = &value_next[k * nodes..(k + 1) * nodes];
                for (j, r) in rhs.iter_mut().enumerate() {
                    for d in 0..dim {
                        r[d] += phi[d] * row[j];
                    }
                }
            }
            let coeffs = rhs
                .into_iter()
                .map(|r| chol.solve(&r).iter().copied().collect())
                .collect();
            Some(DateFit { basis, coeffs })
        } else {
            None
        };
        let moves = &trans.moves[i];
        let levels = &grid.levels[i];
        let prev = &grid.levels[i - 1];
        let df = discounts[date];
        let mut value = vec![0.0; n * prev_nodes];
        value.par_chunks_mut(prev_nodes).enumerate().for_each(|(k, out)| {
            let f = fixings.fixing(k, date);
            let unit = (f - strike_of(fixings, k, strike)) * df;
            let mut phi = [0.0; 6];
            let cont: Vec<f64> = match &fit {
                Some(fit) => {
                    fit.basis.features(f, strike_of(fixings, k, strike), &mut phi);
                    (0..nodes).map(|j| fit.continuation(j, &phi)).collect()
                }
                None => vec![0.0; nodes],
            };
            for (l, o) in out.iter_mut().enumerate() {
                *o = moves[l]
                    .iter()
                    .map(|&j| (levels[j] - prev[l]) * unit + cont[j])
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        });
        fits[date] = fit;
        value_next = value;
    }
    let root = value_next.iter().sum::<f64>() / n as f64;
    let fits = fits
        .into_iter()
        .take(n_f.saturating_sub(1))
        .map(|f| f.expect("fit for every inner date"))
        .collect();
    Ok((RegressionCoeffs { fits }, root))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PricingResult {
    pub price: f64,
    pub std_error: f64,
    pub n_paths: usize,
    /// Mean daily consumption per fixing.
    pub mean_consumption: Vec<f64>,
    /// Share of decisions at an admissible extreme (within 1e-2).
    pub bang_bang_fraction: f64,
    pub seed: u64,
}

/// Per-path outcome of a replayed policy.
#[derive(Debug, Clone, Default)]
pub(crate) struct ReplayTotals {
    pub rewards: Vec<f64>,
    pub consumption: Vec<f64>,
    pub extreme_decisions: u64,
    pub decisions: u64,
}

impl ReplayTotals {
    pub(crate) fn merge(&mut self, other: ReplayTotals) {
        self.rewards.extend(other.rewards);
        if self.consumption.is_empty() {
            self.consumption = other.consumption;
        } else {
            for (a, b) in self.consumption.iter_mut().zip(other.consumption) {
                *a += b;
            }
        }
        self.extreme_decisions += other.extreme_decisions;
        self.decisions += other.decisions;
    }

    pub(crate) fn finish(self, seed: u64) -> PricingResult {
        let n = self.rewards.len();
        let (price, std_error) = mean_se(&self.rewards);
        PricingResult {
            price,
            std_error,
            n_paths: n,
            mean_consumption: self.consumption.iter().map(|c| c / n as f64).collect(),
            bang_bang_fraction: self.extreme_decisions as f64 / self.decisions.max(1) as f64,
            seed,
        }
    }
}

/// Checks a realized plan against every constraint.
pub(crate) fn assert_feasible(contract: &SwingContract, plan: &[f64]) {
    let total: f64 = plan.iter().sum();
    assert!(
        plan.iter()
            .all(|&n| n >= contract.n_min - 1e-9 && n <= contract.n_max + 1e-9)
            && total >= contract.c_min - 1e-7
            && total <= contract.c_max + 1e-7,
        "consumption plan violates the contract: {plan:?}"
    );
}

fn replay(
    fits: &RegressionCoeffs,
    fixings: &FixingSet,
    grid: &ConsumptionGrid,
    contract: &SwingContract,
    trans: &Transitions,
    discounts: &[f64],
) -> ReplayTotals {
    let n_f = contract.n_fixings();
    let strike = fixed_strike(contract);
    let plans: Vec<(f64, Vec<f64>, u64)> = (0..fixings.n_paths)
        .into_par_iter()
        .map(|k| {
            let mut l = 0;
            let mut reward = 0.0;
            let mut plan = Vec::with_capacity(n_f);
            let mut extremes = 0;
            let mut phi = [0.0; 6];
            let k_strike = strike_of(fixings, k, strike);
            for i in 1..=n_f {
                let date = i - 1;
                let f = fixings.fixing(k, date);
                let unit = (f - k_strike) * discounts[date];
                let fit = fits.fits.get(date);
                if let Some(fit) = fit {
                    fit.basis.features(f, k_strike, &mut phi);
                }
                let prev = grid.levels[i - 1][l];
                let moves = &trans.moves[i][l];
                let mut best = (f64::NEG_INFINITY, moves[0]);
                for &j in moves {
                    let v = (grid.levels[i][j] - prev) * unit + fit.map_or(0.0, |fit| fit.continuation(j, &phi));
                    if v >= best.0 {
                        best = (v, j);
                    }
                }
                let j = best.1;
                let n = grid.levels[i][j] - prev;
                let (lo, hi) = (
                    grid.levels[i][moves[0]] - prev,
                    grid.levels[i][*moves.last().unwrap()] - prev,
                );
                if (n - lo).abs() <= 1e-2 || (n - hi).abs() <= 1e-2 {
                    extremes += 1;
                }
                reward += n * unit;
                plan.push(n);
                l = j;
            }
            assert_feasible(contract, &plan);
            (reward, plan, extremes)
        })
        .collect();
    let mut totals = ReplayTotals {
        consumption: vec![0.0; n_f],
        ..Default::default()
    };
    for (reward, plan, extremes) in plans {
        totals.rewards.push(reward);
        for (c, n) in totals.consumption.iter_mut().zip(&plan) {
            *c += n;
        }
        totals.extreme_decisions += extremes;
        totals.decisions += n_f as u64;
    }
    totals
}

/// Replays the fitted policy on fresh fixings.
pub fn forward_price(
    fits: &RegressionCoeffs,
    fixings: &FixingSet,
    grid: &ConsumptionGrid,
    contract: &SwingContract,
    discounts: &[f64],
    seed: u64,
) -> Result<PricingResult> {
    let trans = transitions(contract, grid)?;
    Ok(replay(fits, fixings, grid, contract, &trans, discounts).finish(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsmcConfig {
    pub regression_paths: usize,
    pub pricing_paths: usize,
    pub seed: u64,
    #[serde(default = "default_chunk")]
    pub chunk_paths: usize,
    #[serde(default = "default_substeps")]
    pub substeps_per_day: u32,
}

fn default_chunk() -> usize {
    65_536
}

fn default_substeps() -> u32 {
    1
}

impl Default for LsmcConfig {
    fn default() -> Self {
        Self {
            regression_paths: 100_000,
            pricing_paths: 1_000_000,
            seed: 1,
            chunk_paths: default_chunk(),
            substeps_per_day: 1,
        }
    }
}

/// Simulated fixings (and strikes) of `n_paths` paths starting at `first`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_fixings(
    contract: &SwingContract,
    params: &ModelParams,
    curve: &SharedCurve,
    n_paths: usize,
    seed: u64,
    domain: SeedDomain,
    first: u64,
    substeps_per_day: u32,
) -> Result<FixingSet> {
    let schedule = contract.schedule(substeps_per_day)?;
    let paths = simulate_spot(params, &schedule, n_paths, seed, domain, first)?;
    let mut fixings = day_ahead_fixings(&paths, &day_ahead_maps(curve, params.a, &schedule)?)?;
    if let StrikeSpec::Floating {
        maturity_day, delivery, ..
    } = &contract.strike
    {
        let dp = DeliveryPeriod::from_label(delivery)?;
        let maps = strike_maps(curve, params.a, &schedule, *maturity_day as f64 * DAY, &dp)?;
        fixings.strikes = Some(floating_strikes(&paths, &maps)?);
    }
    Ok(fixings)
}

/// Regression on one seed domain, replay on the other.
pub fn price_swing(
    contract: &SwingContract,
    params: Arc<ModelParams>,
    curve: &SharedCurve,
    dcurve: &DiscountCurve,
    cfg: &LsmcConfig,
) -> Result<PricingResult> {
    contract.validate()?;
    let grid = build_grid(contract);
    let discounts = contract.pay_discounts(dcurve);
    let reg = simulate_fixings(
        contract,
        &params,
        curve,
        cfg.regression_paths,
        cfg.seed,
        SeedDomain::Regression,
        0,
        cfg.substeps_per_day,
    )?;
    let (fits, _) = backward_regression(&reg, &grid, contract, &discounts)?;
    drop(reg);
    let trans = transitions(contract, &grid)?;
    let mut totals = ReplayTotals::default();
    let mut done = 0;
    while done < cfg.pricing_paths {
        let n = cfg.chunk_paths.max(1).min(cfg.pricing_paths - done);
        let fx = simulate_fixings(
            contract,
            &params,
            curve,
            n,
            cfg.seed,
            SeedDomain::Pricing,
            done as u64,
            cfg.substeps_per_day,
        )?;
        totals.merge(replay(&fits, &fx, &grid, contract, &trans, &discounts));
        done += n;
    }
    Ok(totals.finish(cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contract(n: usize, c_min: f64, c_max: f64, mode: ConsumptionMode) -> SwingContract {
        SwingContract {
            fixing_days: (1..=n as u32).collect(),
            n_min: 0.0,
            n_max: 1.0,
            c_min,
            c_max,
            strike: StrikeSpec::Fixed { strike: 20.0 },
            pay_lag_days: 1,
            mode,
        }
    }

    #[test]
    fn bounds_examples() {
        let c = contract(31, 12.5, 20.0, ConsumptionMode::BangBang);
        assert_eq!(c.global_bounds(5), (0.0, 5.0));
        assert_eq!(c.global_bounds(25), (6.5, 20.0));
        assert_eq!(c.global_bounds(31), (12.5, 20.0));
        assert_eq!(c.global_bounds(0), (0.0, 0.0));
    }

    #[test]
    fn two_date_grid_by_hand() {
        let c = contract(2, 0.0, 2.0, ConsumptionMode::BangBang);
        let g = build_grid(&c);
        assert_eq!(g.levels[1], vec![0.0, 1.0]);
        assert_eq!(g.levels[2], vec![0.0, 1.0, 2.0]);
        let from_one: Vec<f64> = admissible_actions(&c, &g, 2, 1.0)
            .unwrap()
            .iter()
            .map(|&j| g.levels[2][j] - 1.0)
            .collect();
        assert_eq!(from_one, vec![0.0, 1.0]);
    }

    #[test]
    fn thickening_respects_delta() {
        let c = contract(31, 12.5, 20.0, ConsumptionMode::Continuous { delta: 1.0 / 6.0 });
        let g = build_grid(&c);
        for (i, level) in g.levels.iter().enumerate() {
            let (d, u) = c.global_bounds(i);
            assert!(level.iter().all(|&y| y >= d - 1e-9 && y <= u + 1e-9));
            assert!(level.windows(2).all(|w| w[1] - w[0] <= 1.0 / 6.0 + 1e-9));
        }
        let coarse = build_grid(&c.with_mode(ConsumptionMode::Continuous { delta: 100.0 }));
        assert_eq!(coarse, build_grid(&c.with_mode(ConsumptionMode::BangBang)));
    }

    #[test]
    fn toy_two_path_example() {
        let c = contract(2, 0.0, 1.0, ConsumptionMode::BangBang);
        let g = build_grid(&c);
        let fx = FixingSet::new(2, 2, vec![20.0, 22.0, 20.0, 18.0], None).unwrap();
        let (fits, root) = backward_regression(&fx, &g, &c, &[1.0, 1.0]).unwrap();
        assert_eq!(fits.fits[0].degree_label(), "mean");
        assert!((root - 1.0).abs() < 1e-12);
        let res = forward_price(&fits, &fx, &g, &c, &[1.0, 1.0], 0).unwrap();
        assert!((res.price - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forced_plan_prices_the_strip() {
        let c = contract(3, 3.0, 3.0, ConsumptionMode::Continuous { delta: 0.25 });
        let g = build_grid(&c);
        let fx = FixingSet::new(2, 3, vec![21.0, 19.0, 25.0, 18.0, 23.0, 20.5], None).unwrap();
        let dfs = [0.99, 0.98, 0.97];
        let (fits, _) = backward_regression(&fx, &g, &c, &dfs).unwrap();
        let res = forward_price(&fits, &fx, &g, &c, &dfs, 0).unwrap();
        let strip: f64 = (0..2)
            .map(|k| (0..3).map(|i| (fx.fixing(k, i) - 20.0) * dfs[i]).sum::<f64>())
            .sum::<f64>()
            / 2.0;
        assert!((res.price - strip).abs() < 1e-12);
    }

    #[test]
    fn contract_validation() {
        let mut c = contract(3, 0.0, 3.0, ConsumptionMode::BangBang);
        c.c_min = 3.5;
        assert!(c.validate().is_err());
        c.c_min = 0.0;
        c.n_max = 0.0;
        assert!(c.validate().is_err());
    }
}
