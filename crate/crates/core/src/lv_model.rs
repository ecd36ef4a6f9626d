//! Local-volatility linear model: spot dynamics, closed-form futures and the
//! delivery-period remapping.
//!
//! The normalized spot follows `ds = a(1 − s)dt + η(t, s)s dW`, `s_0 = 1`,
//! with a constant mean-reversion speed `a`. Futures on a delivery period δ
//! behave like the instantaneous ones once `s` is replaced by
//! `s(δ) = 1 − (1 − s)G(t, δ)` and `a` by `A(t, δ) = a − ∂_t log G(t, δ)`.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::Deserialize;

use crate::error::{invalid, Error, Result};
use crate::interp::MonotoneCubic;
use crate::market::{curve_average, DeliveryPeriod, SharedCurve, DAY};

pub const VOL_FLOOR: f64 = 1e-4;
pub const VOL_CAP: f64 = 5.0;

const KNOT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct VolSlice {
    /// The slice applies to times in `(previous knot, t]`.
    pub t: f64,
    smile: MonotoneCubic,
}

impl VolSlice {
    pub fn k_knots(&self) -> &[f64] {
        self.smile.xs()
    }

    pub fn vols(&self) -> &[f64] {
        self.smile.ys()
    }
}

/// `η(t, k)`: piecewise constant in `t`, monotone cubic in `k`, flat
/// outside the knots. Each time slice carries its own strike knots.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalVolSurface {
    slices: Vec<VolSlice>,
}

impl LocalVolSurface {
    pub fn new(slices: Vec<(f64, Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if slices.is_empty() {
            return invalid("local vol surface needs at least one time slice");
        }
        if slices.windows(2).any(|w| w[1].0 <= w[0].0) {
            return invalid("local vol time knots must be strictly increasing");
        }
        let mut out = Vec::with_capacity(slices.len());
        for (t, ks, vs) in slices {
            if ks.is_empty() || ks.len() != vs.len() {
                return invalid(format!("slice at t={t} needs matching strike knots and vols"));
            }
            if ks.windows(2).any(|w| w[1] <= w[0]) {
                return invalid(format!("strike knots at t={t} must be strictly increasing"));
            }
            if vs.iter().any(|v| !v.is_finite()) {
                return invalid(format!("non-finite local vol at t={t}"));
            }
            let vs = vs.into_iter().map(clamp_vol).collect();
            out.push(VolSlice {
                t,
                smile: MonotoneCubic::new(ks, vs),
            });
        }
        Ok(Self { slices: out })
    }

    pub fn flat(vol: f64) -> Self {
        Self::new(vec![(0.0, vec![1.0], vec![vol])]).expect("flat surface is valid")
    }

    /// Samples `f` on the tensor grid of knots.
    pub fn from_fn(time_knots: &[f64], k_knots: &[f64], f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        Self::new(
            time_knots
                .iter()
                .map(|&t| (t, k_knots.to_vec(), k_knots.iter().map(|&k| f(t, k)).collect()))
                .collect(),
        )
    }

    pub fn slices(&self) -> &[VolSlice] {
        &self.slices
    }

    pub fn slice_index(&self, t: f64) -> usize {
        self.slices
            .partition_point(|s| s.t < t - KNOT_EPS)
            .min(self.slices.len() - 1)
    }

    pub fn eval(&self, t: f64, k: f64) -> f64 {
        self.slices[self.slice_index(t)].smile.eval(k)
    }

    pub fn eval_slice(&self, slice: usize, k: f64) -> f64 {
        self.slices[slice].smile.eval(k)
    }

    /// All knot values, slice by slice.
    pub fn knot_values(&self) -> Vec<f64> {
        self.slices.iter().flat_map(|s| s.vols().iter().copied()).collect()
    }

    /// `(t, k)` of every knot in the order of [`Self::knot_values`].
    pub fn knots(&self) -> Vec<(f64, f64)> {
        self.slices
            .iter()
            .flat_map(|s| s.k_knots().iter().map(move |&k| (s.t, k)))
            .collect()
    }

    /// Same knots, new values (clamped to the admissible band).
    pub fn with_knot_values(&self, values: &[f64]) -> Result<Self> {
        let total: usize = self.slices.iter().map(|s| s.k_knots().len()).sum();
        if values.len() != total {
            return invalid(format!("expected {total} knot values, got {}", values.len()));
        }
        let mut offset = 0;
        let mut slices = Vec::with_capacity(self.slices.len());
        for s in &self.slices {
            let n = s.k_knots().len();
            slices.push((s.t, s.k_knots().to_vec(), values[offset..offset + n].to_vec()));
            offset += n;
        }
        Self::new(slices)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["t", "k", "vol"])?;
        for s in &self.slices {
            for (k, v) in s.k_knots().iter().zip(s.vols()) {
                wtr.write_record([format!("{:.12}", s.t), format!("{k:.12}"), format!("{v:.15}")])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            t: f64,
            k: f64,
            vol: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut slices: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
        for (idx, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::MalformedRow {
                line: idx + 2,
                reason: e.to_string(),
            })?;
            match slices.last_mut() {
                Some(last) if (last.0 - row.t).abs() < KNOT_EPS => {
                    last.1.push(row.k);
                    last.2.push(row.vol);
                }
                _ => slices.push((row.t, vec![row.k], vec![row.vol])),
            }
        }
        Self::new(slices)
    }
}

fn clamp_vol(v: f64) -> f64 {
    v.clamp(VOL_FLOOR, VOL_CAP)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Constant mean-reversion speed (1/year).
    pub a: f64,
    /// Local volatility of the instantaneous normalized spot.
    pub localvol: LocalVolSurface,
}

impl ModelParams {
    pub fn new(a: f64, localvol: LocalVolSurface) -> Result<Self> {
        if !(a >= 0.0) || !a.is_finite() {
            return invalid(format!("mean reversion must be finite and >= 0, got {a}"));
        }
        Ok(Self { a, localvol })
    }
}

/// Drift and diffusion of the normalized spot at `(t, s)`.
pub fn sde_coefficients(params: &ModelParams, t: f64, s: f64) -> (f64, f64) {
    (params.a * (1.0 - s), params.localvol.eval(t, s) * s)
}

/// `F_t(T) = F_0(T)(1 − (1 − s_t)e^{−a(T−t)})`.
pub fn futures_closed_form(a: f64, s_t: f64, t: f64, maturity: f64, f0: f64) -> f64 {
    f0 * (1.0 - (1.0 - s_t) * (-a * (maturity - t)).exp())
}

/// Futures strike `K` expressed in normalized-spot units at time `t`.
pub fn k_f(a: f64, t: f64, maturity: f64, strike: f64, f0: f64) -> Result<f64> {
    let k = 1.0 - (1.0 - strike / f0) * (a * (maturity - t)).exp();
    if k <= 0.0 {
        return Err(Error::MappedStrikeNonpositive { k });
    }
    Ok(k)
}

/// Local volatility of the futures price (price units per sqrt-year).
pub fn eta_f(params: &ModelParams, t: f64, maturity: f64, strike: f64, f0: f64) -> Result<f64> {
    let k = k_f(params.a, t, maturity, strike, f0)?;
    let shift = f0 * (1.0 - (-params.a * (maturity - t)).exp());
    Ok((strike - shift) * params.localvol.eval(t, k))
}

/// Maps the instantaneous dynamics onto a delivery period through
/// `G(t, δ)` and `A(t, δ)`. With no period attached it is the identity map.
#[derive(Clone)]
pub struct DeliveryRemap {
    curve: SharedCurve,
    a: f64,
    dp: Option<DeliveryPeriod>,
}

impl std::fmt::Debug for DeliveryRemap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeliveryRemap")
            .field("a", &self.a)
            .field("dp", &self.dp)
            .finish()
    }
}

impl DeliveryRemap {
    pub fn instantaneous(curve: SharedCurve, a: f64) -> Self {
        Self { curve, a, dp: None }
    }

    pub fn period(&self) -> Option<&DeliveryPeriod> {
        self.dp.as_ref()
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn curve(&self) -> &SharedCurve {
        &self.curve
    }

    /// `G(t, δ) = (1/F_0(t,δ)) ∫ w(u − t, δ) f_0(u) e^{−a(u − t)} du`.
    pub fn g(&self, t: f64) -> Result<f64> {
        let Some(dp) = &self.dp else { return Ok(1.0) };
        if self.a == 0.0 {
            self.curve.check_support(t + dp.delta1)?;
            return Ok(1.0);
        }
        let (start, end) = (t + dp.delta0, t + dp.delta1);
        let plain = curve_average(self.curve.as_ref(), start, end, |_| 1.0)?;
        let a = self.a;
        let damped = curve_average(self.curve.as_ref(), start, end, |u| (-a * (u - t)).exp())?;
        Ok(damped / plain)
    }

    /// `A(t, δ) = a − ∂_t log G(t, δ)`, central difference with a one-day step.
    pub fn speed(&self, t: f64) -> Result<f64> {
        if self.dp.is_none() || self.a == 0.0 {
            return Ok(self.a);
        }
        let (lo, hi) = if t >= DAY { (t - DAY, t + DAY) } else { (t, t + DAY) };
        let dlog = (self.g(hi)?.ln() - self.g(lo)?.ln()) / (hi - lo);
        Ok(self.a - dlog)
    }

    /// `exp(−∫_t^T A(u, δ) du) = e^{−a(T−t)} G(T, δ) / G(t, δ)`.
    pub fn decay(&self, t: f64, maturity: f64) -> Result<f64> {
        let base = (-self.a * (maturity - t)).exp();
        if self.dp.is_none() || self.a == 0.0 {
            return Ok(base);
        }
        Ok(base * self.g(maturity)? / self.g(t)?)
    }

    /// Strike `K` on `F(T, δ)` in units of the period spot `s_t(δ)`.
    pub fn k_f(&self, t: f64, maturity: f64, strike: f64, f0: f64) -> Result<f64> {
        let k = 1.0 - (1.0 - strike / f0) / self.decay(t, maturity)?;
        if k <= 0.0 {
            return Err(Error::MappedStrikeNonpositive { k });
        }
        Ok(k)
    }
}

/// Builds the remap for delivery period `dp`, checking curve support at
/// `t = 0`.
pub fn remap_g(curve: SharedCurve, a: f64, dp: &DeliveryPeriod) -> Result<DeliveryRemap> {
    let remap = DeliveryRemap {
        curve,
        a,
        dp: Some(dp.clone()),
    };
    remap.g(0.0)?;
    Ok(remap)
}

/// `s_t(δ) = 1 − (1 − s_t)G(t, δ)`.
pub fn spot_delta(s_t: f64, g: f64) -> f64 {
    1.0 - (1.0 - s_t) * g
}

/// Local volatility of the period spot `s_t(δ)`.
pub fn eta_delta(params: &ModelParams, remap: &DeliveryRemap, t: f64, k: f64) -> Result<f64> {
    let g = remap.g(t)?;
    eta_delta_with(|kk| params.localvol.eval(t, kk), g, k)
}

pub(crate) fn eta_delta_with(eta: impl Fn(f64) -> f64, g: f64, k: f64) -> Result<f64> {
    let bound = 1.0 - g;
    if k <= bound {
        return Err(Error::BelowSupport { k, bound });
    }
    Ok((1.0 - bound / k) * eta(1.0 - (1.0 - k) / g))
}

/// Local volatility of period `dst` implied from the local volatility
/// `src_eta(t, k)` of a calibrated period `src`.
pub fn link_smiles(
    src_eta: impl Fn(f64, f64) -> f64,
    remap_src: &DeliveryRemap,
    remap_dst: &DeliveryRemap,
    t: f64,
    k: f64,
) -> Result<f64> {
    let g_src = remap_src.g(t)?;
    let g_dst = remap_dst.g(t)?;
    let bound = 1.0 - g_dst;
    if k <= bound {
        return Err(Error::BelowSupport { k, bound });
    }
    let ratio = g_dst / g_src;
    let k_src = 1.0 - (1.0 - k) / ratio;
    let src_bound = 1.0 - g_src;
    if k_src <= src_bound {
        return Err(Error::BelowSupport {
            k: k_src,
            bound: src_bound,
        });
    }
    Ok((1.0 - (1.0 - ratio) / k) * src_eta(t, k_src))
}

/// `F_t(T, δ) = F_0(T, δ)(1 − (1 − s_t(δ)) exp(−∫_t^T A(u, δ) du))`.
pub fn period_futures_closed_form(
    s_t: f64,
    t: f64,
    maturity: f64,
    remap: &DeliveryRemap,
    f0_period: f64,
) -> Result<f64> {
    if !(t <= maturity) {
        return invalid("futures observation after maturity");
    }
    let s_delta = spot_delta(s_t, remap.g(t)?);
    Ok(f0_period * (1.0 - (1.0 - s_delta) * remap.decay(t, maturity)?))
}

/// Dynamics of the normalized spot of one delivery period: speed `A(t, δ)`
/// and local volatility `η(t, δ, k)` (zero below the support bound).
#[derive(Debug, Clone)]
pub struct PeriodModel {
    pub params: Arc<ModelParams>,
    pub remap: DeliveryRemap,
}

impl PeriodModel {
    pub fn new(params: Arc<ModelParams>, remap: DeliveryRemap) -> Result<Self> {
        if (params.a - remap.a()).abs() > 0.0 {
            return invalid("remap and model disagree on the mean reversion");
        }
        Ok(Self { params, remap })
    }

    pub fn instantaneous(params: Arc<ModelParams>, curve: SharedCurve) -> Self {
        let remap = DeliveryRemap::instantaneous(curve, params.a);
        Self { params, remap }
    }

    pub fn with_period(params: Arc<ModelParams>, curve: SharedCurve, dp: &DeliveryPeriod) -> Result<Self> {
        let remap = remap_g(curve, params.a, dp)?;
        Ok(Self { params, remap })
    }

    /// Fills `out[j]` with the period local vol at `ks[j]` for time `t`.
    pub fn local_vol_slice(&self, t: f64, ks: &[f64], out: &mut [f64]) -> Result<()> {
        let g = self.remap.g(t)?;
        let slice = self.params.localvol.slice_index(t);
        let surf = &self.params.localvol;
        for (o, &k) in out.iter_mut().zip(ks) {
            *o = eta_delta_with(|kk| surf.eval_slice(slice, kk), g, k).unwrap_or(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::InitialCurve;
    use approx::assert_abs_diff_eq;

    fn flat_curve() -> SharedCurve {
        Arc::new(InitialCurve::flat(20.0, 5.0).unwrap())
    }

    #[test]
    fn sde_coefficient_examples() {
        let p = ModelParams::new(1.0, LocalVolSurface::flat(0.2)).unwrap();
        assert_eq!(sde_coefficients(&p, 0.3, 1.0).0, 0.0);
        let (mu, sig) = sde_coefficients(&p, 0.3, 0.8);
        assert_abs_diff_eq!(mu, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(sig, 0.16, epsilon = 1e-15);
        let p0 = ModelParams::new(0.0, LocalVolSurface::flat(0.2)).unwrap();
        assert_eq!(sde_coefficients(&p0, 0.3, 0.3).0, 0.0);
    }

    #[test]
    fn futures_closed_form_examples() {
        assert_eq!(futures_closed_form(1.3, 1.0, 0.2, 0.9, 20.0), 20.0);
        assert_abs_diff_eq!(futures_closed_form(1.3, 0.7, 0.9, 0.9, 20.0), 14.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            futures_closed_form(1.0, 0.9, 0.0, 1.0, 20.0),
            19.264_241_117_657_114,
            epsilon = 1e-12
        );
    }

    #[test]
    fn k_f_examples() {
        assert_abs_diff_eq!(k_f(0.0, 0.1, 0.7, 18.0, 20.0).unwrap(), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(k_f(2.0, 0.1, 0.7, 20.0, 20.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            k_f(1.0, 0.0, 0.5, 18.0, 20.0).unwrap(),
            0.835_127_872_929_987,
            epsilon = 1e-12
        );
        assert!(matches!(
            k_f(3.0, 0.0, 2.0, 1.0, 20.0),
            Err(Error::MappedStrikeNonpositive { .. })
        ));
    }

    #[test]
    fn remap_examples() {
        let curve = flat_curve();
        let r0 = remap_g(curve.clone(), 0.0, &DeliveryPeriod::months(1)).unwrap();
        assert_eq!(r0.g(0.4).unwrap(), 1.0);
        let dp = DeliveryPeriod::new(0.0, 1.0 / 12.0, "1m").unwrap();
        let r1 = remap_g(curve.clone(), 1.0, &dp).unwrap();
        let exact = (1.0 - (-1.0f64 / 12.0).exp()) * 12.0;
        assert_abs_diff_eq!(r1.g(0.3).unwrap(), exact, epsilon = 1e-6);
        // flat curve: G constant in t, so A = a
        assert_abs_diff_eq!(r1.speed(0.3).unwrap(), 1.0, epsilon = 1e-9);
        let shifted = DeliveryPeriod::new(10.0 * DAY, 11.0 * DAY, "d10").unwrap();
        let r2 = remap_g(curve, 1.0, &shifted).unwrap();
        let exact = (-10.0 * DAY).exp() * (1.0 - (-DAY).exp()) / DAY;
        assert_abs_diff_eq!(r2.g(0.0).unwrap(), exact, epsilon = 1e-6);
        // the single-day average tends to e^{-a δ0}
        assert_abs_diff_eq!(r2.g(0.0).unwrap(), (-10.0 * DAY).exp(), epsilon = 2e-3);
    }

    #[test]
    fn remap_support_is_checked() {
        let curve: SharedCurve = Arc::new(InitialCurve::flat(20.0, 0.05).unwrap());
        assert!(matches!(
            remap_g(curve, 1.0, &DeliveryPeriod::months(1)),
            Err(Error::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn spot_delta_examples() {
        assert_eq!(spot_delta(1.0, 0.7), 1.0);
        assert_eq!(spot_delta(0.6, 1.0), 0.6);
        assert_abs_diff_eq!(spot_delta(0.5, 0.9594), 0.5203, epsilon = 1e-12);
    }

    #[test]
    fn eta_delta_examples() {
        let surf =
            LocalVolSurface::from_fn(&[0.5, 1.0], &[0.6, 1.0, 1.4], |_, k| 0.2 + 0.1 * (k - 1.0).powi(2)).unwrap();
        let p = ModelParams::new(0.0, surf.clone()).unwrap();
        let r = DeliveryRemap::instantaneous(flat_curve(), 0.0);
        for k in [0.7, 1.0, 1.3] {
            assert_eq!(eta_delta(&p, &r, 0.4, k).unwrap(), surf.eval(0.4, k));
        }
        let p1 = ModelParams::new(1.0, surf.clone()).unwrap();
        let r1 = remap_g(flat_curve(), 1.0, &DeliveryPeriod::months(1)).unwrap();
        let g = r1.g(0.4).unwrap();
        assert_abs_diff_eq!(
            eta_delta(&p1, &r1, 0.4, 1.0).unwrap(),
            g * surf.eval(0.4, 1.0),
            epsilon = 1e-15
        );
        assert!(matches!(
            eta_delta(&p1, &r1, 0.4, 1.0 - g),
            Err(Error::BelowSupport { .. })
        ));
    }

    #[test]
    fn link_smiles_self_map_and_composition() {
        let surf = LocalVolSurface::from_fn(&[0.5, 1.0], &[0.6, 1.0, 1.4], |t, k| {
            0.25 - 0.05 * t + 0.1 * (k - 1.0).powi(2)
        })
        .unwrap();
        let p = ModelParams::new(1.0, surf).unwrap();
        let curve = flat_curve();
        let month = remap_g(curve.clone(), 1.0, &DeliveryPeriod::months(1)).unwrap();
        let day = remap_g(curve, 1.0, &DeliveryPeriod::day_ahead()).unwrap();
        let month_eta = |t: f64, k: f64| eta_delta(&p, &month, t, k).unwrap();
        for k in [0.5, 0.9, 1.0, 1.2, 2.0] {
            let same = link_smiles(month_eta, &month, &month, 0.3, k).unwrap();
            assert_abs_diff_eq!(same, month_eta(0.3, k), epsilon = 1e-14);
            let linked = link_smiles(month_eta, &month, &day, 0.3, k).unwrap();
            let direct = eta_delta(&p, &day, 0.3, k).unwrap();
            assert_abs_diff_eq!(linked, direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn period_closed_form_examples() {
        let curve = flat_curve();
        let dp = DeliveryPeriod::months(3);
        let r = remap_g(curve.clone(), 1.2, &dp).unwrap();
        assert_abs_diff_eq!(
            period_futures_closed_form(1.0, 0.2, 0.8, &r, 21.0).unwrap(),
            21.0,
            epsilon = 1e-12
        );
        let s = 0.8;
        let at_t = period_futures_closed_form(s, 0.5, 0.5, &r, 21.0).unwrap();
        assert_abs_diff_eq!(at_t, 21.0 * spot_delta(s, r.g(0.5).unwrap()), epsilon = 1e-12);
        let r0 = remap_g(curve, 0.0, &DeliveryPeriod::day_ahead()).unwrap();
        assert_abs_diff_eq!(
            period_futures_closed_form(0.9, 0.1, 0.6, &r0, 20.0).unwrap(),
            futures_closed_form(0.0, 0.9, 0.1, 0.6, 20.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn surface_csv_round_trip() {
        let surf = LocalVolSurface::from_fn(&[0.25, 0.5], &[0.8, 1.0, 1.2], |t, k| 0.2 + t * 0.01 + k * 0.03).unwrap();
        let mut buf = Vec::new();
        surf.write_csv(&mut buf).unwrap();
        let back = LocalVolSurface::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.knots(), surf.knots());
        for (a, b) in back.knot_values().iter().zip(surf.knot_values()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn surface_clamps_and_extrapolates() {
        let surf = LocalVolSurface::new(vec![(0.5, vec![0.9, 1.1], vec![0.0, 9.0])]).unwrap();
        assert_eq!(surf.eval(0.1, 0.1), VOL_FLOOR);
        assert_eq!(surf.eval(3.0, 5.0), VOL_CAP);
    }
}
