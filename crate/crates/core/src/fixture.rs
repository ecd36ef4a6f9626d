//! Synthetic gas market used by the tests, the examples and the CLI
//! fixtures: a seasonal forward curve, a known smiley local volatility and
//! the one-month option quotes it generates.

use std::sync::Arc;

use chrono::NaiveDate;

use crate::calibrate::model_quotes;
use crate::error::Result;
use crate::lsmc::{ConsumptionMode, StrikeSpec, SwingContract};
use crate::lv_model::{LocalVolSurface, ModelParams};
use crate::market::{
    period_futures, DeliveryPeriod, DiscountCurve, InitialCurve, QuoteKind, SharedCurve, VanillaQuote, DAY,
};
use crate::pde::PdeGrid;

pub const REFERENCE_A: f64 = 1.0;

/// Delivery start (days from valuation) of the quoted monthly contracts:
/// May, July and October 2018, January and April 2019.
pub const PVO_DAYS: [u32; 5] = [33, 94, 186, 278, 368];

pub const MONEYNESS: [f64; 11] = [0.7, 0.76, 0.82, 0.88, 0.94, 1.0, 1.06, 1.12, 1.18, 1.24, 1.3];

pub fn valuation_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 3, 29).expect("valid date")
}

/// Daily curve with a winter premium, 800 days long.
pub fn reference_curve() -> InitialCurve {
    let levels = (0..800)
        .map(|d| {
            let t = d as f64 * DAY;
            let level = 20.0 + 2.0 * (2.0 * std::f64::consts::PI * (t - 0.8)).cos();
            (level * 1e4).round() / 1e4
        })
        .collect();
    InitialCurve::daily(valuation_date(), levels).expect("fixture curve is valid")
}

pub fn shared_curve() -> SharedCurve {
    Arc::new(reference_curve())
}

pub fn reference_vol(t: f64, k: f64) -> f64 {
    let x = k - 1.0;
    (0.45 + 0.15 * (-3.0 * t).exp()) * (1.0 + 0.8 * x * x - 0.15 * x)
}

/// The model that generated the fixture quotes.
pub fn reference_params() -> ModelParams {
    let times: Vec<f64> = PVO_DAYS.iter().map(|&d| d as f64 * DAY).collect();
    let ks = [0.3, 0.5, 0.7, 0.85, 1.0, 1.15, 1.3, 1.6, 2.0, 3.0];
    let surface = LocalVolSurface::from_fn(&times, &ks, reference_vol).expect("fixture surface is valid");
    ModelParams::new(REFERENCE_A, surface).expect("fixture params are valid")
}

fn template(kind: QuoteKind, expiry_day: u32, maturity_day: u32, strike: f64) -> VanillaQuote {
    VanillaQuote {
        kind,
        option_expiry: expiry_day as f64 * DAY,
        futures_maturity: maturity_day as f64 * DAY,
        delivery: DeliveryPeriod::months(1),
        strike,
        implied_vol: 1.0,
    }
}

/// 5 expiries × 11 strikes of one-month PVOs priced by the reference model.
pub fn reference_pvo() -> Result<Vec<VanillaQuote>> {
    let curve = shared_curve();
    let dp = DeliveryPeriod::months(1);
    let mut templates = Vec::new();
    for &d in &PVO_DAYS {
        let f0 = period_futures(curve.as_ref(), d as f64 * DAY, &dp)?;
        for &m in &MONEYNESS {
            templates.push(template(QuoteKind::Pvo, d, d, m * f0));
        }
    }
    model_quotes(
        &reference_params(),
        &templates,
        &curve,
        &DiscountCurve::zero(),
        &PdeGrid::default(),
    )
}

/// ATM one-month MCOs expiring 60 days before each quoted contract after
/// the first.
pub fn reference_mco() -> Result<Vec<VanillaQuote>> {
    let curve = shared_curve();
    let dp = DeliveryPeriod::months(1);
    let mut templates = Vec::new();
    for &d in &PVO_DAYS[1..] {
        let f0 = period_futures(curve.as_ref(), d as f64 * DAY, &dp)?;
        templates.push(template(QuoteKind::Mco, d - 60, d, f0));
    }
    model_quotes(
        &reference_params(),
        &templates,
        &curve,
        &DiscountCurve::zero(),
        &PdeGrid::default(),
    )
}

/// The May 2018 fixed-strike swing: 31 day-ahead fixings, at-the-money
/// strike on the May contract, `N ∈ [0, 1]`, `C ∈ [c_min, 20]`.
pub fn may_swing(c_min: f64, mode: ConsumptionMode) -> SwingContract {
    let strike = period_futures(&reference_curve(), 33.0 * DAY, &DeliveryPeriod::months(1)).expect("curve covers May");
    SwingContract {
        fixing_days: (32..63).collect(),
        n_min: 0.0,
        n_max: 1.0,
        c_min,
        c_max: 20.0,
        strike: StrikeSpec::Fixed { strike },
        pay_lag_days: 1,
        mode,
    }
}

/// One-week swing with `C ∈ [3, 5]` starting on May 1st.
pub fn week_swing(mode: ConsumptionMode) -> SwingContract {
    let strike = period_futures(&reference_curve(), 33.0 * DAY, &DeliveryPeriod::months(1)).expect("curve covers May");
    SwingContract {
        fixing_days: (32..39).collect(),
        n_min: 0.0,
        n_max: 1.0,
        c_min: 3.0,
        c_max: 5.0,
        strike: StrikeSpec::Fixed { strike },
        pay_lag_days: 1,
        mode,
    }
}
