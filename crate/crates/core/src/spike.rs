//! Spike overlay on the normalized spot.
//!
//! `dy = −γ y dt + φ dN_t` with exponential amplitudes of mean ζ and Poisson
//! intensity λ, independent of `s`. The spike-adjusted spot
//! `s̄_t = f_0(t)/(1 + h(0,t)) · (s_t + y_t)` keeps today's curve unchanged.
//! Parameters are constant in time.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::market::{curve_average, DeliveryPeriod, ForwardCurve};
use crate::rng::{substream, SeedDomain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeParams {
    pub gamma: f64,
    pub intensity: f64,
    pub zeta: f64,
}

impl SpikeParams {
    pub fn new(gamma: f64, intensity: f64, zeta: f64) -> Result<Self> {
        let p = Self { gamma, intensity, zeta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.intensity >= 0.0) || !(self.zeta >= 0.0) {
            return invalid("spike parameters need gamma > 0, intensity >= 0, zeta >= 0");
        }
        Ok(())
    }

    /// `h(t,T) = ζλ(1 − e^{−γ(T−t)})/γ`, the expected spike level at `T`
    /// from jumps after `t`.
    pub fn h(&self, t: f64, maturity: f64) -> f64 {
        let tau = (maturity - t).max(0.0);
        self.zeta * self.intensity * (-(-self.gamma * tau).exp_m1()) / self.gamma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikePath {
    pub gamma: f64,
    pub jump_times: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

impl SpikePath {
    pub fn y(&self, t: f64) -> f64 {
        self.jump_times
            .iter()
            .zip(&self.amplitudes)
            .take_while(|(&tau, _)| tau <= t)
            .map(|(&tau, &phi)| phi * (-self.gamma * (t - tau)).exp())
            .sum()
    }

    /// `y` on an increasing time grid in a single sweep.
    pub fn sample(&self, times: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(times.len());
        let mut next = 0;
        let mut level = 0.0;
        let mut last_t = 0.0;
        for &t in times {
            level *= (-self.gamma * (t - last_t)).exp();
            while next < self.jump_times.len() && self.jump_times[next] <= t {
                level += self.amplitudes[next] * (-self.gamma * (t - self.jump_times[next])).exp();
                next += 1;
            }
            last_t = t;
            out.push(level);
        }
        out
    }
}

pub fn simulate_spike_path_with<R: Rng + ?Sized>(params: &SpikeParams, horizon: f64, rng: &mut R) -> SpikePath {
    let mut path = SpikePath {
        gamma: params.gamma,
        jump_times: Vec::new(),
        amplitudes: Vec::new(),
    };
    if params.intensity == 0.0 || horizon <= 0.0 {
        return path;
    }
    let waits = Exp::new(params.intensity).expect("positive intensity");
    let mut t = 0.0;
    loop {
        t += waits.sample(rng);
        if t > horizon {
            break;
        }
        let phi = if params.zeta > 0.0 {
            Exp::new(1.0 / params.zeta).expect("positive rate").sample(rng)
        } else {
            0.0
        };
        path.jump_times.push(t);
        path.amplitudes.push(phi);
    }
    path
}

/// Path number `index` of the spike stream for `seed`.
pub fn simulate_spike_path(params: &SpikeParams, horizon: f64, seed: u64, index: u64) -> SpikePath {
    simulate_spike_path_with(params, horizon, &mut substream(seed, SeedDomain::Spike, index))
}

pub fn spike_adjusted_spot<C: ForwardCurve + ?Sized>(
    s_t: f64,
    y_t: f64,
    t: f64,
    curve: &C,
    params: &SpikeParams,
) -> Result<f64> {
    curve.check_support(t)?;
    Ok(curve.level(t) / (1.0 + params.h(0.0, t)) * (s_t + y_t))
}

/// `E_t[s̄_T]` given `(s_t, y_t)`.
pub fn spike_instant_futures<C: ForwardCurve + ?Sized>(
    s_t: f64,
    y_t: f64,
    t: f64,
    maturity: f64,
    curve: &C,
    params: &SpikeParams,
    a: f64,
) -> Result<f64> {
    if !(t <= maturity) {
        return invalid("futures observation after maturity");
    }
    curve.check_support(maturity)?;
    Ok(curve.level(maturity) * instant_factor(s_t, y_t, t, maturity, params, a))
}

fn instant_factor(s_t: f64, y_t: f64, t: f64, u: f64, params: &SpikeParams, a: f64) -> f64 {
    let norm = 1.0 + params.h(0.0, u);
    1.0 - (1.0 - s_t) / norm * (-a * (u - t)).exp() - (params.h(0.0, t) - y_t) / norm * (-params.gamma * (u - t)).exp()
}

/// Spike-adjusted futures on delivery period `dp` starting at `T + δ0`: the
/// delivery average of the instantaneous spike-adjusted forwards.
#[allow(clippy::too_many_arguments)]
pub fn spike_period_futures<C: ForwardCurve + ?Sized>(
    s_t: f64,
    y_t: f64,
    t: f64,
    maturity: f64,
    dp: &DeliveryPeriod,
    curve: &C,
    params: &SpikeParams,
    a: f64,
) -> Result<f64> {
    if !(t <= maturity) {
        return invalid("futures observation after maturity");
    }
    let start = maturity + dp.delta0;
    let end = maturity + dp.delta1;
    // weights G^{a,h}, G^{γ,h} relative to F_0(T, δ)
    let plain = curve_average(curve, start, end, |_| 1.0)?;
    let g_a = curve_average(curve, start, end, |u| (-a * (u - t)).exp() / (1.0 + params.h(0.0, u)))?;
    let g_gamma = curve_average(curve, start, end, |u| {
        (-params.gamma * (u - t)).exp() / (1.0 + params.h(0.0, u))
    })?;
    Ok(plain - (1.0 - s_t) * g_a - (params.h(0.0, t) - y_t) * g_gamma)
}
