//! Monte Carlo simulation of the normalized spot and of the futures
//! fixings derived from it.
//!
//! Times are whole days from valuation. Each path owns substream `index`
//! of its seed domain, so a path is the same whether it is generated alone,
//! in a chunk, or on another thread.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::lv_model::{remap_g, ModelParams};
use crate::market::{period_futures, DeliveryPeriod, SharedCurve, DAY};
use crate::rng::{substream, SeedDomain};
use crate::spike::{simulate_spike_path_with, SpikeParams};

pub const SPOT_FLOOR: f64 = 1e-8;

/// Observation days of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSchedule {
    /// Fixing days `T_1 < … < T_{n_f}`.
    pub fixing_days: Vec<u32>,
    /// Strike-averaging days `t_1 < … < t_{n_s}`, all before the first fixing.
    pub strike_days: Vec<u32>,
    pub substeps_per_day: u32,
}

impl SimulationSchedule {
    pub fn new(fixing_days: Vec<u32>, strike_days: Vec<u32>, substeps_per_day: u32) -> Result<Self> {
        let increasing = |d: &[u32]| d.windows(2).all(|w| w[1] > w[0]);
        if fixing_days.is_empty() || !increasing(&fixing_days) || !increasing(&strike_days) {
            return invalid("schedule days must be non-empty and strictly increasing");
        }
        if fixing_days[0] == 0 {
            return invalid("first fixing must be after valuation");
        }
        if let Some(&last) = strike_days.last() {
            if last >= fixing_days[0] || strike_days[0] == 0 {
                return invalid("strike window must lie strictly between valuation and the first fixing");
            }
        }
        if substeps_per_day == 0 {
            return invalid("need at least one substep per day");
        }
        Ok(Self {
            fixing_days,
            strike_days,
            substeps_per_day,
        })
    }

    /// Sorted union of strike and fixing days.
    pub fn observation_days(&self) -> Vec<u32> {
        let mut days: Vec<u32> = self.strike_days.iter().chain(&self.fixing_days).copied().collect();
        days.sort_unstable();
        days.dedup();
        days
    }

    pub fn last_day(&self) -> u32 {
        *self.fixing_days.last().expect("non-empty schedule")
    }
}

/// `s` at the observation days, path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub seed: u64,
    pub domain: SeedDomain,
    pub first_path: u64,
    pub n_paths: usize,
    pub days: Vec<u32>,
    pub values: Vec<f64>,
    /// Euler steps that hit the positivity floor.
    pub floor_hits: u64,
}

impl PathSet {
    pub fn path(&self, k: usize) -> &[f64] {
        let n = self.days.len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn column(&self, day: u32) -> Option<usize> {
        self.days.binary_search(&day).ok()
    }
}

/// Simulates paths `first_path .. first_path + n_paths` of `domain`.
pub fn simulate_spot(
    params: &ModelParams,
    schedule: &SimulationSchedule,
    n_paths: usize,
    seed: u64,
    domain: SeedDomain,
    first_path: u64,
) -> Result<PathSet> {
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    let days = schedule.observation_days();
    let n_obs = days.len();
    let steps_per_day = schedule.substeps_per_day as usize;
    let n_steps = schedule.last_day() as usize * steps_per_day;
    let dt = DAY / steps_per_day as f64;
    let sqrt_dt = dt.sqrt();
    // slice of the local vol used on each step (left-point rule)
    let slice_of: Vec<usize> = (0..n_steps)
        .map(|j| params.localvol.slice_index(j as f64 * dt))
        .collect();
    let record_at: Vec<usize> = days.iter().map(|&d| d as usize * steps_per_day).collect();
    let floor_hits = AtomicU64::new(0);
    let mut values = vec![0.0; n_paths * n_obs];
    values.par_chunks_mut(n_obs).enumerate().for_each(|(k, out)| {
        let mut rng = substream(seed, domain, first_path + k as u64);
        let mut s = 1.0f64;
        let mut next_obs = 0;
        let mut hits = 0;
        for (step, &slice) in slice_of.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let eta = params.localvol.eval_slice(slice, s);
            s += params.a * (1.0 - s) * dt + eta * s * sqrt_dt * z;
            if s < SPOT_FLOOR {
                s = SPOT_FLOOR;
                hits += 1;
            }
            while next_obs < n_obs && record_at[next_obs] == step + 1 {
                out[next_obs] = s;
                next_obs += 1;
            }
        }
        if hits > 0 {
            floor_hits.fetch_add(hits, Ordering::Relaxed);
        }
    });
    let floor_hits = floor_hits.into_inner();
    let total = (n_paths * n_steps) as f64;
    if floor_hits as f64 > 1e-6 * total {
        warn!("spot floor hit on {floor_hits} of {total} Euler steps");
    }
    Ok(PathSet {
        seed,
        domain,
        first_path,
        n_paths,
        days,
        values,
        floor_hits,
    })
}

/// A futures price that is affine in the spot: `F = level·(1 − (1 − s)·slope)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFutures {
    pub day: u32,
    pub level: f64,
    pub slope: f64,
}

impl AffineFutures {
    pub fn eval(&self, s: f64) -> f64 {
        self.level * (1.0 - (1.0 - s) * self.slope)
    }

    /// `F_t(T, δ)` observed on `day` for the given model.
    pub fn period(curve: &SharedCurve, a: f64, day: u32, maturity: f64, dp: &DeliveryPeriod) -> Result<Self> {
        let t = day as f64 * DAY;
        let remap = remap_g(curve.clone(), a, dp)?;
        Ok(Self {
            day,
            level: period_futures(curve.as_ref(), maturity, dp)?,
            slope: remap.g(t)? * remap.decay(t, maturity)?,
        })
    }
}

/// Day-ahead fixing maps `F_{T_i}(T_i + 1d, 1d)` for every fixing day.
pub fn day_ahead_maps(curve: &SharedCurve, a: f64, schedule: &SimulationSchedule) -> Result<Vec<AffineFutures>> {
    let dp = DeliveryPeriod::day_ahead();
    schedule
        .fixing_days
        .iter()
        .map(|&d| AffineFutures::period(curve, a, d, (d + 1) as f64 * DAY, &dp))
        .collect()
}

/// Maps of the averaged contract `F_{t_j}(T, δ)` for every strike day.
pub fn strike_maps(
    curve: &SharedCurve,
    a: f64,
    schedule: &SimulationSchedule,
    maturity: f64,
    dp: &DeliveryPeriod,
) -> Result<Vec<AffineFutures>> {
    schedule
        .strike_days
        .iter()
        .map(|&d| AffineFutures::period(curve, a, d, maturity, dp))
        .collect()
}

/// Fixings and, for floating-strike contracts, per-path strikes.
#[derive(Debug, Clone, PartialEq)]
pub struct FixingSet {
    pub n_paths: usize,
    pub n_dates: usize,
    /// Path-major fixings.
    pub values: Vec<f64>,
    pub strikes: Option<Vec<f64>>,
}

impl FixingSet {
    pub fn new(n_paths: usize, n_dates: usize, values: Vec<f64>, strikes: Option<Vec<f64>>) -> Result<Self> {
        if values.len() != n_paths * n_dates || strikes.as_ref().is_some_and(|k| k.len() != n_paths) {
            return invalid("fixing set dimensions disagree");
        }
        Ok(Self {
            n_paths,
            n_dates,
            values,
            strikes,
        })
    }

    pub fn fixing(&self, path: usize, date: usize) -> f64 {
        self.values[path * self.n_dates + date]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        &self.values[path * self.n_dates..(path + 1) * self.n_dates]
    }

    pub fn write_csv<W: Write>(&self, writer: W, days: &[u32]) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["path", "date", "fixing"])?;
        for k in 0..self.n_paths {
            for (i, v) in self.path(k).iter().enumerate() {
                wtr.write_record([k.to_string(), days[i].to_string(), format!("{v:.12}")])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn day_ahead_fixings(paths: &PathSet, maps: &[AffineFutures]) -> Result<FixingSet> {
    let cols: Vec<usize> = maps
        .iter()
        .map(|m| paths.column(m.day))
        .collect::<Option<_>>()
        .ok_or_else(|| crate::Error::InvalidInput("fixing day not simulated".into()))?;
    let mut values = Vec::with_capacity(paths.n_paths * maps.len());
    for k in 0..paths.n_paths {
        let p = paths.path(k);
        values.extend(cols.iter().zip(maps).map(|(&c, m)| m.eval(p[c])));
    }
    FixingSet::new(paths.n_paths, maps.len(), values, None)
}

/// Per-path arithmetic mean of the averaged contract over the strike days.
pub fn floating_strikes(paths: &PathSet, maps: &[AffineFutures]) -> Result<Vec<f64>> {
    if maps.is_empty() {
        return invalid("floating strike needs a strike window");
    }
    let cols: Vec<usize> = maps
        .iter()
        .map(|m| paths.column(m.day))
        .collect::<Option<_>>()
        .ok_or_else(|| crate::Error::InvalidInput("strike day not simulated".into()))?;
    Ok((0..paths.n_paths)
        .map(|k| {
            let p = paths.path(k);
            cols.iter().zip(maps).map(|(&c, m)| m.eval(p[c])).sum::<f64>() / maps.len() as f64
        })
        .collect())
}

/// Spike levels `y` at the schedule's observation days for the given paths,
/// from the spike domain (independent of the diffusion streams).
pub fn spike_levels(params: &SpikeParams, paths: &PathSet, seed: u64) -> Vec<f64> {
    let times: Vec<f64> = paths.days.iter().map(|&d| d as f64 * DAY).collect();
    let horizon = times.last().copied().unwrap_or(0.0);
    let mut out = vec![0.0; paths.values.len()];
    out.par_chunks_mut(times.len()).enumerate().for_each(|(k, row)| {
        let mut rng = substream(seed, SeedDomain::Spike, paths.first_path + k as u64);
        let path = simulate_spike_path_with(params, horizon, &mut rng);
        row.copy_from_slice(&path.sample(&times));
    });
    out
}

/// Mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lv_model::{LocalVolSurface, VOL_FLOOR};
    use crate::market::InitialCurve;
    use std::sync::Arc;

    fn flat_params(a: f64, vol: f64) -> ModelParams {
        ModelParams::new(a, LocalVolSurface::flat(vol)).unwrap()
    }

    #[test]
    fn vanishing_vol_stays_at_one() {
        let sched = SimulationSchedule::new(vec![10, 20], vec![], 1).unwrap();
        let p = simulate_spot(&flat_params(1.0, VOL_FLOOR), &sched, 50, 3, SeedDomain::Pricing, 0).unwrap();
        assert!(p.values.iter().all(|s| (s - 1.0).abs() < 1e-3));
    }

    #[test]
    fn chunks_reproduce_the_whole() {
        let sched = SimulationSchedule::new(vec![5, 9, 12], vec![2], 2).unwrap();
        let params = flat_params(0.7, 0.5);
        let all = simulate_spot(&params, &sched, 40, 9, SeedDomain::Regression, 0).unwrap();
        let tail = simulate_spot(&params, &sched, 15, 9, SeedDomain::Regression, 25).unwrap();
        assert_eq!(&all.values[25 * 4..], &tail.values[..]);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let threaded = pool.install(|| simulate_spot(&params, &sched, 40, 9, SeedDomain::Regression, 0).unwrap());
        assert_eq!(all, threaded);
    }

    #[test]
    fn fixings_reduce_without_mean_reversion() {
        let curve: SharedCurve = Arc::new(InitialCurve::flat(20.0, 1.0).unwrap());
        let sched = SimulationSchedule::new(vec![3, 4, 5], vec![1, 2], 1).unwrap();
        let params = flat_params(0.0, 0.4);
        let paths = simulate_spot(&params, &sched, 20, 1, SeedDomain::Pricing, 0).unwrap();
        let maps = day_ahead_maps(&curve, 0.0, &sched).unwrap();
        let fx = day_ahead_fixings(&paths, &maps).unwrap();
        for k in 0..20 {
            for (i, &d) in sched.fixing_days.iter().enumerate() {
                let s = paths.path(k)[paths.column(d).unwrap()];
                assert!((fx.fixing(k, i) - 20.0 * s).abs() < 1e-12);
            }
        }
        let month = DeliveryPeriod::months(1);
        let smaps = strike_maps(&curve, 0.0, &sched, 3.0 * DAY, &month).unwrap();
        let ks = floating_strikes(&paths, &smaps).unwrap();
        let p0 = paths.path(0);
        assert!((ks[0] - 10.0 * (p0[0] + p0[1])).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(SimulationSchedule::new(vec![], vec![], 1).is_err());
        assert!(SimulationSchedule::new(vec![3, 2], vec![], 1).is_err());
        assert!(SimulationSchedule::new(vec![3, 4], vec![3], 1).is_err());
        assert_eq!(
            SimulationSchedule::new(vec![3, 4], vec![1, 2], 1)
                .unwrap()
                .observation_days(),
            vec![1, 2, 3, 4]
        );
    }
}
