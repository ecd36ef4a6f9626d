//! Swing contract seen as an episodic environment.

use crate::error::{Error, Result};
use crate::lsmc::SwingContract;
use crate::market::DAY;

/// Network input at one fixing date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub time: f64,
    /// Consumption so far, mapped from `[D, U]` of the date onto `[-0.5, 0.5]`.
    pub consumption_norm: f64,
    pub log_moneyness: f64,
    /// Strike over the reference level, floating strikes only.
    pub strike_norm: Option<f64>,
}

impl EnvState {
    pub fn features(&self, out: &mut Vec<f64>) {
        out.clear();
        out.extend([self.time, self.consumption_norm, self.log_moneyness]);
        if let Some(k) = self.strike_norm {
            out.push(k);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    /// Network output, clipped to `[0, 1]` and mapped onto the admissible range.
    Raw(f64),
    /// Smallest (`false`) or largest (`true`) admissible consumption.
    Extreme(bool),
}

/// Contract data shared by every episode.
#[derive(Debug, Clone)]
pub struct SwingEnv {
    contract: SwingContract,
    discounts: Vec<f64>,
    times: Vec<f64>,
    f_ref: f64,
    floating: bool,
}

impl SwingEnv {
    /// `discounts` are the payment discount factors per fixing and `f_ref`
    /// the initial day-ahead level at the first fixing.
    pub fn new(contract: SwingContract, discounts: Vec<f64>, f_ref: f64, floating: bool) -> Result<Self> {
        contract.validate()?;
        if discounts.len() != contract.n_fixings() || !(f_ref > 0.0) {
            return Err(Error::InvalidInput(
                "environment needs one discount per fixing and a positive reference".into(),
            ));
        }
        let times = contract.fixing_days.iter().map(|&d| d as f64 * DAY).collect();
        Ok(Self {
            contract,
            discounts,
            times,
            f_ref,
            floating,
        })
    }

    pub fn contract(&self) -> &SwingContract {
        &self.contract
    }

    pub fn n_dates(&self) -> usize {
        self.times.len()
    }

    pub fn f_ref(&self) -> f64 {
        self.f_ref
    }

    pub fn n_inputs(&self) -> usize {
        if self.floating {
            4
        } else {
            3
        }
    }

    pub fn floating(&self) -> bool {
        self.floating
    }

    /// Starts an episode on one path of day-ahead fixings.
    pub fn start<'e>(&'e self, fixings: &'e [f64], strike: f64) -> EnvRun<'e> {
        debug_assert_eq!(fixings.len(), self.n_dates());
        EnvRun {
            env: self,
            fixings,
            strike,
            date: 0,
            consumed: 0.0,
            plan: Vec::with_capacity(self.n_dates()),
        }
    }

    /// State at `date` with an arbitrary normalized consumption, used for
    /// policy surface dumps.
    pub fn synthetic_state(&self, date: usize, consumption_norm: f64, log_moneyness: f64) -> EnvState {
        EnvState {
            time: self.times[date],
            consumption_norm,
            log_moneyness,
            strike_norm: self.floating.then_some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvRun<'e> {
    env: &'e SwingEnv,
    fixings: &'e [f64],
    strike: f64,
    date: usize,
    consumed: f64,
    plan: Vec<f64>,
}

impl EnvRun<'_> {
    pub fn done(&self) -> bool {
        self.date == self.env.n_dates()
    }

    pub fn date(&self) -> usize {
        self.date
    }

    pub fn plan(&self) -> &[f64] {
        &self.plan
    }

    pub fn state(&self) -> EnvState {
        let date = self.date.min(self.env.n_dates() - 1);
        let (lo, hi) = self.env.contract.global_bounds(self.date);
        let consumption_norm = if hi - lo > 1e-12 {
            ((self.consumed - lo) / (hi - lo)).clamp(0.0, 1.0) - 0.5
        } else {
            0.0
        };
        EnvState {
            time: self.env.times[date],
            consumption_norm,
            log_moneyness: (self.fixings[date] / self.env.f_ref).ln(),
            strike_norm: self.env.floating.then(|| self.strike / self.env.f_ref),
        }
    }

    /// Smallest and largest consumption allowed today.
    pub fn admissible(&self) -> Result<(f64, f64)> {
        let c = &self.env.contract;
        let (d, u) = c.global_bounds(self.date + 1);
        let lo = c.n_min.max(d - self.consumed);
        let hi = c.n_max.min(u - self.consumed);
        if lo > hi + 1e-9 {
            return Err(Error::InfeasibleState(format!(
                "date {} with consumption {} has empty action set",
                self.date, self.consumed
            )));
        }
        Ok((lo, hi.max(lo)))
    }

    /// Applies the action; returns the consumption and its discounted reward.
    pub fn step(&mut self, action: Action) -> Result<(f64, f64)> {
        if self.done() {
            return Err(Error::StepAfterDone);
        }
        let (lo, hi) = self.admissible()?;
        let n = match action {
            Action::Raw(x) => lo + x.clamp(0.0, 1.0) * (hi - lo),
            Action::Extreme(max) => {
                if max {
                    hi
                } else {
                    lo
                }
            }
        };
        let reward = n * (self.fixings[self.date] - self.strike) * self.env.discounts[self.date];
        self.consumed += n;
        self.plan.push(n);
        self.date += 1;
        Ok((n, reward))
    }
}
