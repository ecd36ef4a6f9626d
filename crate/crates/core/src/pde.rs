//! Forward PDE for normalized call prices and vanilla pricing from its
//! solution.
//!
//! For the period spot `s(δ)` the normalized call `c(t, k) = E[(s_t(δ) − k)^+]`
//! solves
//!
//! ```text
//! ∂_t c = −A c − A (1 − k) ∂_k c + ½ k² η²(t, δ, k) ∂²_k c
//! c(t, 0) = 1,   c(t, k_max) = 0,   c(0, k) = (1 − k)^+
//! ```
//!
//! discretized fully implicitly in time with central differences in `k`,
//! switching the convection term to upwind differences wherever the cell
//! Péclet number exceeds 2 so the step matrix stays an M-matrix.

use std::io::Write;

use crate::error::{invalid, Error, Result};
use crate::interp::uniform_pchip;
use crate::lv_model::PeriodModel;
use crate::market::{implied_vol, period_futures, DiscountCurve, ForwardCurve, VanillaQuote, DAY};

#[derive(Debug, Clone, PartialEq)]
pub struct PdeGrid {
    pub k_max: f64,
    pub nodes: usize,
    /// Implicit time steps per calendar day.
    pub steps_per_day: usize,
}

impl Default for PdeGrid {
    fn default() -> Self {
        Self {
            k_max: 4.0,
            nodes: 801,
            steps_per_day: 1,
        }
    }
}

impl PdeGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_max > 1.0) || self.nodes < 5 || self.steps_per_day == 0 {
            return invalid("PDE grid needs k_max > 1, at least 5 nodes and one step per day");
        }
        let one = (self.nodes - 1) as f64 / self.k_max;
        if (one - one.round()).abs() > 1e-9 {
            return invalid("PDE grid must contain k = 1 exactly");
        }
        Ok(())
    }

    pub fn dk(&self) -> f64 {
        self.k_max / (self.nodes - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        DAY / self.steps_per_day as f64
    }

    /// Doubles the nodes and the time steps.
    pub fn refined(&self) -> Self {
        Self {
            k_max: self.k_max,
            nodes: 2 * (self.nodes - 1) + 1,
            steps_per_day: 2 * self.steps_per_day,
        }
    }
}

/// `c(t, k)` on the solver grid, one row per time step.
#[derive(Debug, Clone)]
pub struct NormalizedCallSurface {
    model: PeriodModel,
    dt: f64,
    dk: f64,
    n_k: usize,
    n_rows: usize,
    values: Vec<f64>,
}

impl NormalizedCallSurface {
    pub fn model(&self) -> &PeriodModel {
        &self.model
    }

    pub fn k_max(&self) -> f64 {
        self.dk * (self.n_k - 1) as f64
    }

    pub fn horizon(&self) -> f64 {
        self.dt * (self.n_rows - 1) as f64
    }

    pub fn k_nodes(&self) -> Vec<f64> {
        (0..self.n_k).map(|j| j as f64 * self.dk).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| i as f64 * self.dt).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_k..(i + 1) * self.n_k]
    }

    /// `c(t, k)`: monotone cubic in `k`, linear in `t`. Below `k = 0` the
    /// call is the forward `1 − k`.
    pub fn value(&self, t: f64, k: f64) -> Result<f64> {
        if k <= 0.0 {
            return Ok(1.0 - k);
        }
        if k >= self.k_max() {
            return Err(Error::MappedStrikeOutOfGrid { k, k_max: self.k_max() });
        }
        if t < 0.0 || t > self.horizon() + 1e-12 {
            return invalid(format!("time {t} outside solved horizon {}", self.horizon()));
        }
        let pos = t / self.dt;
        let i = (pos.floor() as usize).min(self.n_rows - 1);
        let w = pos - i as f64;
        let lo = uniform_pchip(0.0, self.dk, self.row(i), k);
        if w < 1e-9 || i + 1 >= self.n_rows {
            return Ok(lo);
        }
        let hi = uniform_pchip(0.0, self.dk, self.row(i + 1), k);
        Ok(lo + w * (hi - lo))
    }

    /// Largest violation of `(1−k)^+ ≤ c ≤ 1`, monotonicity and convexity in
    /// `k` over every stored row.
    pub fn max_shape_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n_rows {
            let row = self.row(i);
            for j in 0..self.n_k {
                let k = j as f64 * self.dk;
                worst = worst.max((1.0 - k).max(0.0) - row[j]).max(row[j] - 1.0);
                if j + 1 < self.n_k {
                    worst = worst.max(row[j + 1] - row[j]);
                }
                if j > 0 && j + 1 < self.n_k {
                    worst = worst.max(-(row[j + 1] - 2.0 * row[j] + row[j - 1]));
                }
            }
        }
        worst
    }

    pub fn write_csv<W: Write>(&self, writer: W, every_n_rows: usize) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["t", "k", "c"])?;
        for i in (0..self.n_rows).step_by(every_n_rows.max(1)) {
            let t = i as f64 * self.dt;
            for (j, c) in self.row(i).iter().enumerate() {
                wtr.write_record([
                    format!("{t:.10}"),
                    format!("{:.6}", j as f64 * self.dk),
                    format!("{c:.12}"),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Solves the normalized-call PDE of `model` up to `horizon`, rounded up to
/// the time grid.
pub fn solve_dupire(model: &PeriodModel, horizon: f64, grid: &PdeGrid) -> Result<NormalizedCallSurface> {
    grid.validate()?;
    if !(horizon > 0.0) {
        return invalid("PDE horizon must be positive");
    }
    let dt = grid.dt();
    let dk = grid.dk();
    let n = grid.nodes;
    let n_steps = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    let ks: Vec<f64> = (0..n).map(|j| j as f64 * dk).collect();

    let mut values = Vec::with_capacity((n_steps + 1) * n);
    let mut c: Vec<f64> = ks.iter().map(|k| (1.0 - k).max(0.0)).collect();
    values.extend_from_slice(&c);

    let mut vol = vec![0.0; n];
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let inv_dk2 = 1.0 / (dk * dk);
    for step in 1..=n_steps {
        let t = step as f64 * dt;
        let speed = model.remap.speed(t)?;
        model.local_vol_slice(t, &ks, &mut vol)?;
        for j in 1..n - 1 {
            let k = ks[j];
            let d = 0.5 * k * k * vol[j] * vol[j];
            let b = -speed * (1.0 - k);
            let diff = d * inv_dk2;
            let (lo, up) = if b.abs() * dk <= 2.0 * d {
                (diff - 0.5 * b / dk, diff + 0.5 * b / dk)
            } else if b > 0.0 {
                (diff, diff + b / dk)
            } else {
                (diff - b / dk, diff)
            };
            lower[j] = -dt * lo;
            upper[j] = -dt * up;
            diag[j] = 1.0 + dt * (lo + up + speed);
        }
        // Dirichlet ends
        let mut rhs = c.clone();
        rhs[1] -= lower[1] * 1.0;
        rhs[n - 2] -= upper[n - 2] * 0.0;
        solve_tridiagonal(
            &lower[1..n - 1],
            &diag[1..n - 1],
            &upper[1..n - 1],
            &mut rhs[1..n - 1],
            &mut scratch[1..n - 1],
        )?;
        c.copy_from_slice(&rhs);
        c[0] = 1.0;
        c[n - 1] = 0.0;
        debug_assert!(c
            .iter()
            .zip(&ks)
            .all(|(&v, &k)| v >= (1.0 - k).max(0.0) - 1e-10 && v <= 1.0 + 1e-10));
        values.extend_from_slice(&c);
    }
    Ok(NormalizedCallSurface {
        model: model.clone(),
        dt,
        dk,
        n_k: n,
        n_rows: n_steps + 1,
        values,
    })
}

/// Thomas algorithm; `sub[0]` and `sup[last]` are ignored. Solution is
/// written into `rhs`.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64], scratch: &mut [f64]) -> Result<()> {
    let m = diag.len();
    let mut beta = diag[0];
    if beta.abs() < 1e-300 {
        return Err(Error::TridiagonalFailure { row: 0 });
    }
    rhs[0] /= beta;
    for i in 1..m {
        scratch[i] = sup[i - 1] / beta;
        beta = diag[i] - sub[i] * scratch[i];
        if beta.abs() < 1e-300 || !beta.is_finite() {
            return Err(Error::TridiagonalFailure { row: i });
        }
        rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / beta;
    }
    for i in (0..m - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
    Ok(())
}

/// Price of a call on `F(T, δ)` expiring at `t_expiry`, where the surface
/// was solved for the same delivery period:
/// `df · F_0(T, δ) · e^{−∫A} · c(t, k_F)`.
pub fn option_on_futures(
    surface: &NormalizedCallSurface,
    t_expiry: f64,
    t_futures: f64,
    strike: f64,
    f0: f64,
    df: f64,
) -> Result<f64> {
    if !(t_expiry <= t_futures) {
        return invalid("option expiry after futures maturity");
    }
    let decay = surface.model.remap.decay(t_expiry, t_futures)?;
    let k = 1.0 - (1.0 - strike / f0) / decay;
    let c = surface.value(t_expiry, k)?;
    Ok(df * f0 * decay * c)
}

fn same_period(surface: &NormalizedCallSurface, quote: &VanillaQuote) -> Result<()> {
    let ok = match surface.model.remap.period() {
        Some(dp) => {
            (dp.delta0 - quote.delivery.delta0).abs() < 1e-12 && (dp.delta1 - quote.delivery.delta1).abs() < 1e-12
        }
        None => false,
    };
    if !ok {
        return invalid("quote delivery period differs from the solved surface");
    }
    Ok(())
}

/// Model price of a quote's option (premium paid at expiry).
pub fn model_price<C: ForwardCurve + ?Sized>(
    surface: &NormalizedCallSurface,
    quote: &VanillaQuote,
    curve: &C,
    dcurve: &DiscountCurve,
) -> Result<f64> {
    same_period(surface, quote)?;
    let f0 = period_futures(curve, quote.futures_maturity, &quote.delivery)?;
    let df = dcurve.df(quote.option_expiry);
    option_on_futures(
        surface,
        quote.option_expiry,
        quote.futures_maturity,
        quote.strike,
        f0,
        df,
    )
}

/// Black-76 implied vol of the model price of `quote`.
pub fn model_iv<C: ForwardCurve + ?Sized>(
    surface: &NormalizedCallSurface,
    quote: &VanillaQuote,
    curve: &C,
    dcurve: &DiscountCurve,
) -> Result<f64> {
    let price = model_price(surface, quote, curve, dcurve)?;
    let f0 = period_futures(curve, quote.futures_maturity, &quote.delivery)?;
    let df = dcurve.df(quote.option_expiry);
    implied_vol(price, f0, quote.strike, quote.option_expiry, df)
}

/// ATM implied vol of the back contract's PVO minus that of its MCO expiring
/// at the front contract's last trading date.
pub fn vol_drop<C: ForwardCurve + ?Sized>(
    surface: &NormalizedCallSurface,
    front_ltd: f64,
    back_maturity: f64,
    curve: &C,
    dcurve: &DiscountCurve,
) -> Result<f64> {
    if !(front_ltd <= back_maturity) {
        return invalid("front last trading date must precede the back maturity");
    }
    let dp = surface
        .model
        .remap
        .period()
        .cloned()
        .ok_or_else(|| Error::InvalidInput("vol drop needs a period surface".into()))?;
    let strike = period_futures(curve, back_maturity, &dp)?;
    let quote = |expiry: f64| VanillaQuote {
        kind: if expiry < back_maturity {
            crate::market::QuoteKind::Mco
        } else {
            crate::market::QuoteKind::Pvo
        },
        option_expiry: expiry,
        futures_maturity: back_maturity,
        delivery: dp.clone(),
        strike,
        implied_vol: 1.0,
    };
    let pvo = model_iv(surface, &quote(back_maturity), curve, dcurve)?;
    if (back_maturity - front_ltd).abs() < 1e-12 {
        return Ok(0.0);
    }
    let mco = model_iv(surface, &quote(front_ltd), curve, dcurve)?;
    Ok(pvo - mco)
}
