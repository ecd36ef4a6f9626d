//! Term structures, discounting, Black-76 utilities and quote ingestion.
//!
//! All year fractions are ACT/365 from the valuation date. The instantaneous
//! futures curve `f_0(t)` is piecewise flat between pillars; period futures
//! are averages of `f_0` over the delivery window, integrated with a
//! composite midpoint rule on a daily subgrid (exact for flat-per-day curves
//! whose pillars fall on day boundaries, and for curves linear in `t`).

use std::f64::consts::SQRT_2;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::Deserialize;
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};

/// One day as a year fraction.
pub const DAY: f64 = 1.0 / 365.0;

const HORIZON_SLACK: f64 = 1e-9;

/// ACT/365 year fraction between two dates.
pub fn year_fraction(from: NaiveDate, to: NaiveDate) -> f64 {
    (to - from).num_days() as f64 / 365.0
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

/// Today's instantaneous futures curve `f_0(t)`.
pub trait ForwardCurve: Send + Sync {
    fn level(&self, t: f64) -> f64;
    /// Last time at which the curve is defined.
    fn horizon(&self) -> f64;

    fn check_support(&self, t: f64) -> Result<()> {
        let support = self.horizon();
        if t > support + HORIZON_SLACK {
            return Err(Error::HorizonExceeded { requested: t, support });
        }
        Ok(())
    }
}

/// Piecewise-flat instantaneous curve built from pillars.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCurve {
    pub valuation_date: Option<NaiveDate>,
    times: Vec<f64>,
    levels: Vec<f64>,
    horizon: f64,
}

impl InitialCurve {
    /// Level `levels[i]` applies on `[times[i], times[i+1])`; the last level
    /// extends to `horizon`.
    pub fn new(times: Vec<f64>, levels: Vec<f64>, horizon: f64) -> Result<Self> {
        if times.is_empty() || times.len() != levels.len() {
            return invalid("curve needs matching, non-empty pillar times and levels");
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("curve pillar times must be strictly increasing");
        }
        if levels.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return invalid("curve levels must be strictly positive");
        }
        if times[0] < 0.0 || horizon < *times.last().unwrap() {
            return invalid("curve horizon must cover every pillar");
        }
        Ok(Self {
            valuation_date: None,
            times,
            levels,
            horizon,
        })
    }

    pub fn flat(level: f64, horizon: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![level], horizon)
    }

    /// One level per calendar day starting at the valuation date.
    pub fn daily(valuation_date: NaiveDate, levels: Vec<f64>) -> Result<Self> {
        let times: Vec<f64> = (0..levels.len()).map(|d| d as f64 * DAY).collect();
        let horizon = levels.len() as f64 * DAY;
        let mut curve = Self::new(times, levels, horizon)?;
        curve.valuation_date = Some(valuation_date);
        Ok(curve)
    }

    /// Reads a `date,price` CSV. Each price applies from its date until the
    /// next pillar; the last one covers its own day.
    pub fn from_csv_reader<R: Read>(reader: R, valuation_date: NaiveDate) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            date: String,
            price: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut times = Vec::new();
        let mut levels = Vec::new();
        for (idx, row) in rdr.deserialize::<Row>().enumerate() {
            let line = idx + 2;
            let row = row.map_err(|e| Error::MalformedRow {
                line,
                reason: e.to_string(),
            })?;
            let date = parse_date(&row.date).ok_or_else(|| Error::MalformedRow {
                line,
                reason: format!("bad date '{}'", row.date),
            })?;
            if date < valuation_date {
                return Err(Error::MalformedRow {
                    line,
                    reason: "pillar before valuation date".into(),
                });
            }
            if !(row.price > 0.0) {
                return Err(Error::MalformedRow {
                    line,
                    reason: "price must be positive".into(),
                });
            }
            times.push(year_fraction(valuation_date, date));
            levels.push(row.price);
        }
        let horizon = times.last().copied().unwrap_or(0.0) + DAY;
        let mut curve = Self::new(times, levels, horizon)?;
        curve.valuation_date = Some(valuation_date);
        Ok(curve)
    }

    pub fn load_csv(path: impl AsRef<Path>, valuation_date: NaiveDate) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, valuation_date)
    }

    pub fn pillars(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.levels.iter().copied())
    }

    /// Same pillars with every level multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let mut out = Self::new(
            self.times.clone(),
            self.levels.iter().map(|l| l * factor).collect(),
            self.horizon,
        )?;
        out.valuation_date = self.valuation_date;
        Ok(out)
    }
}

impl ForwardCurve for InitialCurve {
    fn level(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&x| x <= t);
        self.levels[idx.saturating_sub(1)]
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }
}

/// Curve given by a closed-form function of time.
pub struct AnalyticCurve<F> {
    f: F,
    horizon: f64,
}

impl<F: Fn(f64) -> f64 + Send + Sync> AnalyticCurve<F> {
    pub fn new(f: F, horizon: f64) -> Self {
        Self { f, horizon }
    }
}

impl<F: Fn(f64) -> f64 + Send + Sync> ForwardCurve for AnalyticCurve<F> {
    fn level(&self, t: f64) -> f64 {
        (self.f)(t)
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }
}

pub type SharedCurve = Arc<dyn ForwardCurve>;

/// Weighted average `(1/(b-a)) ∫_a^b f_0(u) weight(u) du` by the composite
/// midpoint rule with cells no wider than one day.
pub fn curve_average<C, W>(curve: &C, start: f64, end: f64, weight: W) -> Result<f64>
where
    C: ForwardCurve + ?Sized,
    W: Fn(f64) -> f64,
{
    if !(end > start) {
        return invalid(format!("empty averaging window [{start}, {end}]"));
    }
    if start < -HORIZON_SLACK {
        return invalid("averaging window starts before today");
    }
    curve.check_support(end)?;
    let cells = (((end - start) / DAY) - 1e-9).ceil().max(1.0) as usize;
    let h = (end - start) / cells as f64;
    let sum: f64 = (0..cells)
        .map(|j| {
            let u = start + (j as f64 + 0.5) * h;
            curve.level(u) * weight(u)
        })
        .sum();
    Ok(sum / cells as f64)
}

/// Deterministic zero-coupon curve `P_0(T; e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountCurve {
    pub zero_rates: bool,
    /// (time, continuously compounded zero yield), linearly interpolated.
    yields: Vec<(f64, f64)>,
}

impl Default for DiscountCurve {
    fn default() -> Self {
        Self::zero()
    }
}

impl DiscountCurve {
    /// Futures-style margining: `P ≡ 1`.
    pub fn zero() -> Self {
        Self {
            zero_rates: true,
            yields: Vec::new(),
        }
    }

    pub fn flat(rate: f64) -> Result<Self> {
        Self::from_yields(vec![(0.0, rate)])
    }

    pub fn from_yields(yields: Vec<(f64, f64)>) -> Result<Self> {
        if yields.is_empty() {
            return invalid("discount curve needs at least one yield pillar");
        }
        if yields.windows(2).any(|w| w[1].0 <= w[0].0) {
            return invalid("discount pillars must be strictly increasing");
        }
        let curve = Self {
            zero_rates: false,
            yields,
        };
        // P nonincreasing <=> y(T)·T nondecreasing; check on a fine grid.
        let last = curve.yields.last().unwrap().0.max(1.0) * 1.5;
        let mut prev = 0.0;
        for i in 0..=2000 {
            let t = last * i as f64 / 2000.0;
            let ty = curve.zero_yield(t) * t;
            if ty < prev - 1e-14 {
                return invalid("discount factors must be nonincreasing in maturity");
            }
            prev = ty;
        }
        Ok(curve)
    }

    fn zero_yield(&self, t: f64) -> f64 {
        let ys = &self.yields;
        if t <= ys[0].0 {
            return ys[0].1;
        }
        if t >= ys[ys.len() - 1].0 {
            return ys[ys.len() - 1].1;
        }
        let idx = ys.partition_point(|p| p.0 <= t);
        let (t0, y0) = ys[idx - 1];
        let (t1, y1) = ys[idx];
        y0 + (y1 - y0) * (t - t0) / (t1 - t0)
    }

    pub fn df(&self, t: f64) -> f64 {
        if self.zero_rates || t <= 0.0 {
            return 1.0;
        }
        (-self.zero_yield(t) * t).exp()
    }
}

/// Delivery window `[T + delta0, T + delta1]` of a futures contract.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryPeriod {
    pub delta0: f64,
    pub delta1: f64,
    pub label: String,
}

impl DeliveryPeriod {
    pub fn new(delta0: f64, delta1: f64, label: impl Into<String>) -> Result<Self> {
        if !(delta0 >= 0.0 && delta1 > delta0) {
            return invalid(format!(
                "delivery period needs 0 <= delta0 < delta1, got [{delta0}, {delta1}]"
            ));
        }
        Ok(Self {
            delta0,
            delta1,
            label: label.into(),
        })
    }

    pub fn day_ahead() -> Self {
        Self {
            delta0: 0.0,
            delta1: DAY,
            label: "1d".into(),
        }
    }

    pub fn months(n: u32) -> Self {
        Self {
            delta0: 0.0,
            delta1: n as f64 / 12.0,
            label: format!("{n}m"),
        }
    }

    /// Parses labels like `1d`, `1w`, `1m`, `3m`, `1y`.
    pub fn from_label(label: &str) -> Result<Self> {
        let label = label.trim();
        let (num, unit) = label.split_at(label.len().saturating_sub(1));
        let n: u32 = num
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad delivery label '{label}'")))?;
        if n == 0 {
            return invalid(format!("bad delivery label '{label}'"));
        }
        let len = match unit {
            "d" => n as f64 * DAY,
            "w" => 7.0 * n as f64 * DAY,
            "m" => n as f64 / 12.0,
            "y" => n as f64,
            _ => return invalid(format!("bad delivery label '{label}'")),
        };
        Self::new(0.0, len, label)
    }

    pub fn length(&self) -> f64 {
        self.delta1 - self.delta0
    }
}

/// Period futures price `F_0(T, δ)`: uniform average of `f_0` over
/// `[T + δ0, T + δ1]`.
pub fn period_futures<C: ForwardCurve + ?Sized>(curve: &C, maturity: f64, dp: &DeliveryPeriod) -> Result<f64> {
    curve_average(curve, maturity + dp.delta0, maturity + dp.delta1, |_| 1.0)
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Black-76 call on a futures price, discounted with `df`.
pub fn black76_call(forward: f64, strike: f64, vol: f64, expiry: f64, df: f64) -> f64 {
    let intrinsic = (forward - strike).max(0.0);
    if strike <= 0.0 {
        return df * (forward - strike);
    }
    let stdev = vol * expiry.max(0.0).sqrt();
    if stdev <= 0.0 {
        return df * intrinsic;
    }
    let d1 = ((forward / strike).ln() + 0.5 * stdev * stdev) / stdev;
    let d2 = d1 - stdev;
    df * (forward * norm_cdf(d1) - strike * norm_cdf(d2))
}

fn black76_vega(forward: f64, strike: f64, vol: f64, expiry: f64, df: f64) -> f64 {
    let sqrt_t = expiry.sqrt();
    let stdev = vol * sqrt_t;
    if stdev <= 0.0 {
        return 0.0;
    }
    let d1 = ((forward / strike).ln() + 0.5 * stdev * stdev) / stdev;
    df * forward * norm_pdf(d1) * sqrt_t
}

/// Black-76 implied volatility: bracketing bisection followed by Newton
/// polishing.
pub fn implied_vol(price: f64, forward: f64, strike: f64, expiry: f64, df: f64) -> Result<f64> {
    let lower = df * (forward - strike).max(0.0);
    let upper = df * forward;
    if !(forward > 0.0 && strike > 0.0 && expiry > 0.0 && df > 0.0) {
        return invalid("implied_vol needs positive forward, strike, expiry and df");
    }
    if !price.is_finite() || price < lower || price >= upper {
        return Err(Error::OutOfBoundsPrice { price, lower, upper });
    }
    let target_tol = 1e-12 * forward;
    if price - lower <= target_tol * 1e-3 {
        return Ok(0.0);
    }
    let f = |v: f64| black76_call(forward, strike, v, expiry, df) - price;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::OutOfBoundsPrice { price, lower, upper });
        }
    }
    // Bisection down to a bracket Newton can safely polish.
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-4 {
            break;
        }
    }
    let mut vol = 0.5 * (lo + hi);
    for _ in 0..50 {
        let diff = f(vol);
        if diff.abs() <= target_tol {
            return Ok(vol);
        }
        let vega = black76_vega(forward, strike, vol, expiry, df);
        let mut next = if vega > 0.0 { vol - diff / vega } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if f(next) < 0.0 {
            lo = next;
        } else {
            hi = next;
        }
        vol = next;
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(vol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuoteKind {
    /// Option expiring at the futures' last trading date.
    Pvo,
    /// Mid-curve option: expiry strictly before the futures' maturity.
    Mco,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaQuote {
    pub kind: QuoteKind,
    pub option_expiry: f64,
    pub futures_maturity: f64,
    pub delivery: DeliveryPeriod,
    pub strike: f64,
    pub implied_vol: f64,
}

impl VanillaQuote {
    pub fn validate(&self) -> Result<()> {
        if !(self.implied_vol > 0.0) || !self.implied_vol.is_finite() {
            return invalid("implied vol must be positive");
        }
        if !(self.strike > 0.0) {
            return invalid("strike must be positive");
        }
        if !(self.option_expiry > 0.0) {
            return invalid("option expiry must be after valuation");
        }
        match self.kind {
            QuoteKind::Pvo if (self.option_expiry - self.futures_maturity).abs() > 1e-12 => {
                invalid("PVO must expire at the futures maturity")
            }
            QuoteKind::Mco if self.option_expiry >= self.futures_maturity => {
                invalid("MCO must expire strictly before the futures maturity")
            }
            _ => Ok(()),
        }
    }
}

/// Parses the quote CSV:
/// `kind,option_expiry,futures_maturity,delivery_start,delivery_end,strike,implied_vol`.
///
/// Dates are ISO; `delivery_end` is the last delivery day (inclusive).
pub fn parse_quotes<R: Read>(reader: R, valuation_date: NaiveDate) -> Result<Vec<VanillaQuote>> {
    #[derive(Deserialize)]
    struct Row {
        kind: String,
        option_expiry: String,
        futures_maturity: String,
        delivery_start: String,
        delivery_end: String,
        strike: f64,
        implied_vol: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out = Vec::new();
    for (idx, row) in rdr.deserialize::<Row>().enumerate() {
        let line = idx + 2;
        let bad = |reason: String| Error::MalformedRow { line, reason };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let date = |s: &str| {
            parse_date(s)
                .map(|d| year_fraction(valuation_date, d))
                .ok_or_else(|| bad(format!("bad date '{s}'")))
        };
        let kind = match row.kind.to_ascii_uppercase().as_str() {
            "PVO" => QuoteKind::Pvo,
            "MCO" => QuoteKind::Mco,
            other => return Err(bad(format!("unknown kind '{other}'"))),
        };
        let option_expiry = date(&row.option_expiry)?;
        let futures_maturity = date(&row.futures_maturity)?;
        let start = date(&row.delivery_start)?;
        let end = date(&row.delivery_end)? + DAY;
        let delivery = DeliveryPeriod::new(
            start - futures_maturity,
            end - futures_maturity,
            format!("{}..{}", row.delivery_start.trim(), row.delivery_end.trim()),
        )
        .map_err(|e| bad(e.to_string()))?;
        let quote = VanillaQuote {
            kind,
            option_expiry,
            futures_maturity,
            delivery,
            strike: row.strike,
            implied_vol: row.implied_vol,
        };
        quote.validate().map_err(|e| bad(e.to_string()))?;
        out.push(quote);
    }
    Ok(out)
}

pub fn load_quotes(path: impl AsRef<Path>, valuation_date: NaiveDate) -> Result<Vec<VanillaQuote>> {
    let file = std::fs::File::open(path)?;
    parse_quotes(file, valuation_date)
}

/// Writes quotes in the CSV schema read by [`parse_quotes`]. Times are turned
/// back into dates by rounding to whole days.
pub fn write_quotes<W: std::io::Write>(writer: W, valuation_date: NaiveDate, quotes: &[VanillaQuote]) -> Result<()> {
    let to_date = |t: f64| valuation_date + chrono::Days::new((t * 365.0).round() as u64);
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "kind",
        "option_expiry",
        "futures_maturity",
        "delivery_start",
        "delivery_end",
        "strike",
        "implied_vol",
    ])?;
    for q in quotes {
        let kind = match q.kind {
            QuoteKind::Pvo => "PVO",
            QuoteKind::Mco => "MCO",
        };
        let start = to_date(q.futures_maturity + q.delivery.delta0);
        let end = to_date(q.futures_maturity + q.delivery.delta1 - DAY);
        wtr.write_record([
            kind.to_string(),
            to_date(q.option_expiry).to_string(),
            to_date(q.futures_maturity).to_string(),
            start.to_string(),
            end.to_string(),
            format!("{:.10}", q.strike),
            format!("{:.12}", q.implied_vol),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Implied-vol shape used to manufacture PVO fixtures.
#[derive(Debug, Clone, PartialEq)]
pub enum SmileShape {
    Flat(f64),
    /// `σ(T, m) = atm·(1 + term_slope·T) + skew·ln m + curvature·ln² m`,
    /// with `m = K / F_0(T, δ)`.
    Parametric {
        atm: f64,
        skew: f64,
        curvature: f64,
        term_slope: f64,
    },
}

impl SmileShape {
    pub fn vol(&self, expiry: f64, moneyness: f64) -> f64 {
        match *self {
            SmileShape::Flat(v) => v,
            SmileShape::Parametric {
                atm,
                skew,
                curvature,
                term_slope,
            } => {
                let x = moneyness.ln();
                atm * (1.0 + term_slope * expiry) + skew * x + curvature * x * x
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuoteSynth {
    /// Option expiries, each equal to its futures maturity (PVO).
    pub expiries: Vec<f64>,
    /// Strikes as multiples of the period futures price.
    pub moneyness: Vec<f64>,
    pub delivery: DeliveryPeriod,
    pub shape: SmileShape,
}

/// Builds PVO quotes priced with Black-76 under the given smile shape.
pub fn synth_quotes<C: ForwardCurve + ?Sized>(spec: &QuoteSynth, curve: &C) -> Result<Vec<VanillaQuote>> {
    let mut out = Vec::with_capacity(spec.expiries.len() * spec.moneyness.len());
    for &t in &spec.expiries {
        let fwd = period_futures(curve, t, &spec.delivery)?;
        for &m in &spec.moneyness {
            let strike = m * fwd;
            let vol = spec.shape.vol(t, m);
            if !(vol > 0.0) {
                return invalid(format!("smile shape gives non-positive vol at T={t}, m={m}"));
            }
            // round trip through the pricer so the quote is a genuine price
            let price = black76_call(fwd, strike, vol, t, 1.0);
            let implied = implied_vol(price, fwd, strike, t, 1.0)?;
            out.push(VanillaQuote {
                kind: QuoteKind::Pvo,
                option_expiry: t,
                futures_maturity: t,
                delivery: spec.delivery.clone(),
                strike,
                implied_vol: implied,
            });
        }
    }
    Ok(out)
}
