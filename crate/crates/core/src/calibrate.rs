//! Calibration of the local volatility to PVO quotes and of the mean
//! reversion to MCO or calendar-spread targets.
//!
//! The local vol is fitted exactly by a fixed point on its knot values:
//! each knot is multiplied by the ratio of market to model implied vol of
//! its quote, and the iteration is accelerated by Anderson mixing on the
//! log-knots. The mean reversion is then chosen by a grid scan plus a
//! golden-section refinement of the secondary fit.

use std::sync::Arc;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::lv_model::{remap_g, LocalVolSurface, ModelParams, PeriodModel, VOL_CAP, VOL_FLOOR};
use crate::market::{period_futures, DeliveryPeriod, DiscountCurve, QuoteKind, SharedCurve, VanillaQuote};
use crate::pde::{model_iv, solve_dupire, vol_drop, NormalizedCallSurface, PdeGrid};

const BP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointConfig {
    pub tol_bp: f64,
    pub max_iter: usize,
    /// Anderson memory; 0 gives the plain multiplicative iteration.
    pub memory: usize,
    pub ridge: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol_bp: 0.1,
            max_iter: 50,
            memory: 5,
            ridge: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub a: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_abs_iv_error_bp: f64,
    /// Final model minus market vol per quote, in bp, input order.
    pub quote_errors_bp: Vec<f64>,
    /// Max error after each iteration.
    pub error_history_bp: Vec<f64>,
    /// Secondary objective (vol RMSE) per evaluated mean reversion.
    pub a_path: Vec<(f64, f64)>,
}

/// One Anderson (type II) mixing step from the history of `(x_i, g(x_i))`,
/// oldest first. Uses at most the last `memory + 1` entries.
pub fn anderson_step(history: &[(Vec<f64>, Vec<f64>)], memory: usize, ridge: f64) -> Vec<f64> {
    let (_, g_last) = history.last().expect("anderson_step needs history");
    let used = history.len().min(memory + 1);
    if used < 2 {
        return g_last.clone();
    }
    let recent = &history[history.len() - used..];
    let dim = g_last.len();
    let cols = used - 1;
    let resid = |i: usize| -> DVector<f64> {
        let (x, g) = &recent[i];
        DVector::from_iterator(dim, g.iter().zip(x).map(|(g, x)| g - x))
    };
    let f_last = resid(cols);
    let mut d_f = DMatrix::zeros(dim, cols);
    let mut d_g = DMatrix::zeros(dim, cols);
    for c in 0..cols {
        d_f.set_column(c, &(resid(c + 1) - resid(c)));
        let g_next = DVector::from_column_slice(&recent[c + 1].1);
        let g_prev = DVector::from_column_slice(&recent[c].1);
        d_g.set_column(c, &(g_next - g_prev));
    }
    let mut normal = d_f.transpose() * &d_f;
    let scale = normal.diagonal().max().max(f64::MIN_POSITIVE);
    for i in 0..cols {
        normal[(i, i)] += ridge * scale;
    }
    let rhs = d_f.transpose() * &f_last;
    let gamma = match normal.cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => return g_last.clone(),
    };
    if gamma.iter().any(|v| !v.is_finite()) {
        return g_last.clone();
    }
    let g = DVector::from_column_slice(g_last) - d_g * gamma;
    g.iter().copied().collect()
}

/// Knot layout: one time slice per quoted expiry and, within it, one
/// strike knot per quote, placed at the quote's strike mapped into
/// instantaneous coordinates.
struct KnotMap {
    /// Per knot: contributing quote indices.
    members: Vec<Vec<usize>>,
    /// Per knot: total over slice variance weight, so that a vol ratio on
    /// the quote becomes a forward-variance ratio on the slice.
    leverage: Vec<f64>,
    surface: LocalVolSurface,
}

fn expiry_slices(quotes: &[VanillaQuote]) -> Vec<f64> {
    let mut ts: Vec<f64> = quotes.iter().map(|q| q.option_expiry).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    ts
}

fn build_knots(quotes: &[VanillaQuote], curve: &SharedCurve, a: f64, dp: &DeliveryPeriod) -> Result<KnotMap> {
    let remap = remap_g(curve.clone(), a, dp)?;
    let mut slices = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut leverage = Vec::new();
    let mut prev_t = 0.0;
    for t in expiry_slices(quotes) {
        let weight = |from: f64| {
            if a * (t - from) < 1e-10 {
                t - from
            } else {
                -(-2.0 * a * (t - from)).exp_m1() / (2.0 * a)
            }
        };
        let slice_leverage = weight(0.0) / weight(prev_t);
        prev_t = t;
        let g = remap.g(t)?;
        let mut pts: Vec<(f64, usize, f64)> = Vec::new();
        for (i, q) in quotes.iter().enumerate() {
            if (q.option_expiry - t).abs() >= 1e-9 {
                continue;
            }
            let f0 = period_futures(curve.as_ref(), q.futures_maturity, dp)?;
            let k_period = remap.k_f(t, q.futures_maturity, q.strike, f0)?;
            let k_inst = 1.0 - (1.0 - k_period) / g;
            if k_inst <= 0.0 {
                return Err(Error::MappedStrikeNonpositive { k: k_inst });
            }
            pts.push((k_inst, i, seed_vol(q, a, g)));
        }
        pts.sort_by(|x, y| x.0.total_cmp(&y.0));
        let (mut ks, mut vs) = (Vec::new(), Vec::new());
        for (k, i, v) in pts {
            match ks.last() {
                Some(&last) if k - last < 1e-9 => {
                    if let Some(m) = members.last_mut() {
                        m.push(i);
                    }
                }
                _ => {
                    ks.push(k);
                    vs.push(v);
                    members.push(vec![i]);
                    leverage.push(slice_leverage);
                }
            }
        }
        slices.push((t, ks, vs));
    }
    Ok(KnotMap {
        members,
        leverage,
        surface: LocalVolSurface::new(slices)?,
    })
}

/// Starting knot value: the flat instantaneous vol that reproduces the
/// quote's total variance with exponential damping of the period.
fn seed_vol(q: &VanillaQuote, a: f64, g: f64) -> f64 {
    let tau = q.futures_maturity - q.option_expiry;
    let t = q.option_expiry;
    let damp = if a * t < 1e-8 {
        1.0
    } else {
        (2.0 * a * t / -(-2.0 * a * t).exp_m1()).sqrt()
    };
    (q.implied_vol * damp * (a * tau).exp() / g).clamp(VOL_FLOOR, VOL_CAP)
}

fn check_quotes(quotes: &[VanillaQuote]) -> Result<DeliveryPeriod> {
    let Some(first) = quotes.first() else {
        return invalid("calibration needs at least one quote");
    };
    for q in quotes {
        q.validate()?;
        if (q.delivery.delta0 - first.delivery.delta0).abs() > 1e-12
            || (q.delivery.delta1 - first.delivery.delta1).abs() > 1e-12
        {
            return invalid("all calibration quotes must share one delivery period");
        }
    }
    Ok(first.delivery.clone())
}

fn solve_for(
    params: ModelParams,
    curve: &SharedCurve,
    dp: &DeliveryPeriod,
    horizon: f64,
    grid: &PdeGrid,
) -> Result<NormalizedCallSurface> {
    let model = PeriodModel::with_period(Arc::new(params), curve.clone(), dp)?;
    solve_dupire(&model, horizon, grid)
}

fn iv_errors(
    surface: &NormalizedCallSurface,
    quotes: &[VanillaQuote],
    curve: &SharedCurve,
    dcurve: &DiscountCurve,
) -> Result<Vec<(f64, f64)>> {
    quotes
        .iter()
        .map(|q| Ok((model_iv(surface, q, curve.as_ref(), dcurve)?, q.implied_vol)))
        .collect()
}

/// Fits the local vol exactly to `pvo` for a fixed mean reversion `a`.
/// Non-convergence is reported through `CalibrationReport::converged`.
pub fn calibrate_local_vol(
    pvo: &[VanillaQuote],
    curve: &SharedCurve,
    dcurve: &DiscountCurve,
    a: f64,
    grid: &PdeGrid,
    cfg: &FixedPointConfig,
) -> Result<(LocalVolSurface, CalibrationReport)> {
    let dp = check_quotes(pvo)?;
    let knots = build_knots(pvo, curve, a, &dp)?;
    let horizon = pvo.iter().map(|q| q.option_expiry).fold(0.0, f64::max);
    let mut surface = knots.surface.clone();
    let mut x: Vec<f64> = surface.knot_values().iter().map(|v| v.ln()).collect();
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut error_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_errors;
    loop {
        let pde = solve_for(ModelParams::new(a, surface.clone())?, curve, &dp, horizon, grid)?;
        let ivs = iv_errors(&pde, pvo, curve, dcurve)?;
        last_errors = ivs.iter().map(|(m, q)| (m - q) / BP).collect::<Vec<_>>();
        let max_err = last_errors.iter().fold(0.0f64, |acc, e| acc.max(e.abs()));
        error_history.push(max_err);
        debug!("a={a} iteration {iterations}: max error {max_err:.4}bp");
        if max_err <= cfg.tol_bp {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }
        iterations += 1;
        let g_x: Vec<f64> = x
            .iter()
            .zip(knots.members.iter().zip(&knots.leverage))
            .map(|(&xi, (members, &lev))| {
                let step = members
                    .iter()
                    .map(|&i| {
                        let (model, market) = ivs[i];
                        let ratio2 = (market / model.max(1e-8)).powi(2);
                        0.5 * (1.0 + (ratio2 - 1.0) * lev).clamp(0.25, 4.0).ln()
                    })
                    .sum::<f64>()
                    / members.len() as f64;
                (xi + step).clamp(VOL_FLOOR.ln(), VOL_CAP.ln())
            })
            .collect();
        history.push((x.clone(), g_x));
        if history.len() > cfg.memory + 1 {
            history.remove(0);
        }
        x = anderson_step(&history, cfg.memory, cfg.ridge)
            .into_iter()
            .map(|v| v.clamp(VOL_FLOOR.ln(), VOL_CAP.ln()))
            .collect();
        let values: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        surface = surface.with_knot_values(&values)?;
    }
    let report = CalibrationReport {
        a,
        iterations,
        converged,
        max_abs_iv_error_bp: *error_history.last().expect("at least one evaluation"),
        quote_errors_bp: last_errors,
        error_history_bp: error_history,
        a_path: Vec::new(),
    };
    if !converged {
        info!(
            "local vol calibration at a={a} stopped at {:.4}bp",
            report.max_abs_iv_error_bp
        );
    }
    Ok((surface, report))
}

/// Secondary instruments fitted by the mean reversion.
#[derive(Debug, Clone, PartialEq)]
pub enum SecondaryTarget {
    Mco(VanillaQuote),
    /// ATM PVO vol minus ATM MCO vol of the back contract, MCO expiring at
    /// the front contract's last trading date.
    VolDrop {
        front_ltd: f64,
        back_maturity: f64,
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTarget {
    pub pvo: Vec<VanillaQuote>,
    pub secondary: Vec<SecondaryTarget>,
    /// Weights of the secondary targets (uniform when empty).
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MeanReversionFit {
    pub a: f64,
    pub params: ModelParams,
    pub report: CalibrationReport,
}

pub fn default_a_grid() -> Vec<f64> {
    (0..=8).map(|i| 0.25 * i as f64).collect()
}

/// Weighted RMSE of the secondary targets in vol units for a calibrated model.
pub fn secondary_rmse(
    params: &ModelParams,
    target: &CalibrationTarget,
    curve: &SharedCurve,
    dcurve: &DiscountCurve,
    grid: &PdeGrid,
) -> Result<f64> {
    let dp = check_quotes(&target.pvo)?;
    let horizon = target
        .secondary
        .iter()
        .map(|s| match s {
            SecondaryTarget::Mco(q) => q.futures_maturity,
            SecondaryTarget::VolDrop { back_maturity, .. } => *back_maturity,
        })
        .fold(0.0, f64::max);
    let pde = solve_for(params.clone(), curve, &dp, horizon, grid)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, s) in target.secondary.iter().enumerate() {
        let w = target.weights.get(i).copied().unwrap_or(1.0);
        let diff = match s {
            SecondaryTarget::Mco(q) => model_iv(&pde, q, curve.as_ref(), dcurve)? - q.implied_vol,
            SecondaryTarget::VolDrop {
                front_ltd,
                back_maturity,
                value,
            } => vol_drop(&pde, *front_ltd, *back_maturity, curve.as_ref(), dcurve)? - value,
        };
        num += w * diff * diff;
        den += w;
    }
    Ok((num / den).sqrt())
}

/// Chooses `a` by scanning `a_grid` and refining the best bracket by golden
/// section. Objective ties within the calibration tolerance go to the
/// smallest `a`; candidates whose local-vol fit fails are skipped.
pub fn calibrate_mean_reversion(
    target: &CalibrationTarget,
    curve: &SharedCurve,
    dcurve: &DiscountCurve,
    grid: &PdeGrid,
    cfg: &FixedPointConfig,
    a_grid: &[f64],
) -> Result<MeanReversionFit> {
    if a_grid.is_empty() || a_grid.iter().any(|a| !(*a >= 0.0)) {
        return invalid("mean reversion grid must be non-empty and non-negative");
    }
    if target.secondary.is_empty() && a_grid.len() > 1 {
        return invalid("mean reversion search needs secondary targets");
    }
    let mut sorted = a_grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let evaluate = |a: f64| -> Result<Option<(f64, MeanReversionFit)>> {
        let (surface, report) = calibrate_local_vol(&target.pvo, curve, dcurve, a, grid, cfg)?;
        if !report.converged {
            return Ok(None);
        }
        let params = ModelParams::new(a, surface)?;
        let obj = if target.secondary.is_empty() {
            0.0
        } else {
            secondary_rmse(&params, target, curve, dcurve, grid)?
        };
        Ok(Some((obj, MeanReversionFit { a, params, report })))
    };

    let scanned: Vec<Option<(f64, MeanReversionFit)>> =
        sorted.par_iter().map(|&a| evaluate(a)).collect::<Result<_>>()?;
    let mut a_path: Vec<(f64, f64)> = Vec::new();
    for fit in scanned.iter().flatten() {
        a_path.push((fit.1.a, fit.0));
    }
    let tie = cfg.tol_bp * BP;
    let best_obj = scanned.iter().flatten().map(|(o, _)| *o).fold(f64::INFINITY, f64::min);
    let Some(best_idx) = scanned
        .iter()
        .position(|s| matches!(s, Some((o, _)) if *o <= best_obj + tie))
    else {
        return Err(Error::NoConvergence {
            iterations: cfg.max_iter,
            max_error_bp: f64::NAN,
        });
    };
    let (mut best_obj, mut best) = scanned[best_idx].clone().expect("position found a fit");

    if sorted.len() > 1 {
        let lo = sorted[best_idx.saturating_sub(1)];
        let hi = sorted[(best_idx + 1).min(sorted.len() - 1)];
        let mut phi = |a: f64| -> Result<f64> {
            Ok(match evaluate(a)? {
                Some((obj, fit)) => {
                    a_path.push((a, obj));
                    if obj < best_obj - tie {
                        best_obj = obj;
                        best = fit;
                    }
                    obj
                }
                None => f64::INFINITY,
            })
        };
        golden_section(&mut phi, lo, hi, 0.01)?;
    }
    a_path.sort_by(|x, y| x.0.total_cmp(&y.0));
    best.report.a_path = a_path;
    info!("mean reversion {:.4} with secondary rmse {:.6}", best.a, best_obj);
    Ok(best)
}

fn golden_section(f: &mut impl FnMut(f64) -> Result<f64>, mut lo: f64, mut hi: f64, tol: f64) -> Result<()> {
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2)?;
        }
    }
    Ok(())
}

/// Quotes priced by the model itself: every template keeps its contract
/// terms and receives the model implied vol.
pub fn model_quotes(
    params: &ModelParams,
    templates: &[VanillaQuote],
    curve: &SharedCurve,
    dcurve: &DiscountCurve,
    grid: &PdeGrid,
) -> Result<Vec<VanillaQuote>> {
    let dp = check_quotes(templates)?;
    let horizon = templates.iter().map(|q| q.option_expiry).fold(0.0, f64::max);
    let pde = solve_for(params.clone(), curve, &dp, horizon, grid)?;
    templates
        .iter()
        .map(|q| {
            let mut out = q.clone();
            out.kind = if q.option_expiry < q.futures_maturity {
                QuoteKind::Mco
            } else {
                QuoteKind::Pvo
            };
            out.implied_vol = model_iv(&pde, q, curve.as_ref(), dcurve)?;
            Ok(out)
        })
        .collect()
}
