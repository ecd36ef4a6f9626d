//! Swing pricing by proximal policy optimization.
//!
//! An actor network proposes the daily consumption (a Gaussian mean on the
//! unit interval, or two logits for the bang-bang extremes) and a critic
//! network estimates the value of the state. Both are trained on clipped
//! surrogate and squared value losses from batches of simulated episodes;
//! the price is the mean discounted cash flow of the greedy policy on fresh
//! paths.

mod env;
mod net;

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use env::{Action, EnvRun, EnvState, SwingEnv};
pub use net::{Mlp, Tape};

use crate::error::{invalid, Error, Result};
use crate::lsmc::{
    assert_feasible, fixed_strike, simulate_fixings, strike_of, ConsumptionMode, PricingResult, ReplayTotals,
    StrikeSpec, SwingContract,
};
use crate::lv_model::ModelParams;
use crate::market::{DiscountCurve, SharedCurve};
use crate::mc::day_ahead_maps;
use crate::rng::{substream, SeedDomain};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Two-sided 98% normal quantile.
const Z98: f64 = 2.326_347_874_040_841;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Gaussian around the actor output; continuous consumption.
    Gaussian,
    /// Softmax over the two admissible extremes.
    Softmax,
}

impl PolicyKind {
    pub fn for_mode(mode: ConsumptionMode) -> Self {
        match mode {
            ConsumptionMode::Continuous { .. } => Self::Gaussian,
            ConsumptionMode::BangBang => Self::Softmax,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Softmax => "softmax",
        }
    }
}

/// Actor and critic networks plus the log standard deviations, all stored
/// in one flat parameter vector `[actor | critic | log_std]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    kind: PolicyKind,
    actor: Mlp,
    critic: Mlp,
    n_log_std: usize,
    params: Vec<f64>,
}

/// What the sampler drew: the raw Gaussian value or the class index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub action: Action,
    pub taken: f64,
    pub log_prob: f64,
}

impl Policy {
    /// Fresh policy; `n_log_std` is 1 for a shared deviation or the number
    /// of fixing dates (ignored by softmax policies).
    pub fn new<R: Rng>(
        kind: PolicyKind,
        n_inputs: usize,
        hidden: &[usize],
        n_log_std: usize,
        log_std0: f64,
        rng: &mut R,
    ) -> Self {
        let layers = |out: usize| {
            let mut s = vec![n_inputs];
            s.extend_from_slice(hidden);
            s.push(out);
            Mlp::new(s)
        };
        let actor = layers(if kind == PolicyKind::Gaussian { 1 } else { 2 });
        let critic = layers(1);
        let n_log_std = if kind == PolicyKind::Gaussian {
            n_log_std.max(1)
        } else {
            0
        };
        let mut params = vec![0.0; actor.n_params() + critic.n_params() + n_log_std];
        let (a, rest) = params.split_at_mut(actor.n_params());
        actor.init(a, rng);
        let (c, s) = rest.split_at_mut(critic.n_params());
        critic.init(c, rng);
        s.fill(log_std0);
        Self {
            kind,
            actor,
            critic,
            n_log_std,
            params,
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn n_inputs(&self) -> usize {
        self.actor.n_inputs()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() || params.iter().any(|p| !p.is_finite()) {
            return invalid("parameter vector has the wrong length or non-finite entries");
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn critic_offset(&self) -> usize {
        self.actor.n_params()
    }

    fn log_std_index(&self, date: usize) -> usize {
        self.actor.n_params() + self.critic.n_params() + date.min(self.n_log_std - 1)
    }

    pub fn log_std(&self, date: usize) -> f64 {
        self.params[self.log_std_index(date)]
    }

    pub fn value(&self, inputs: &[f64], tape: &mut Tape) -> f64 {
        let off = self.critic_offset();
        self.critic
            .forward(&self.params[off..off + self.critic.n_params()], inputs, tape)[0]
    }

    fn actor_out<'t>(&self, params: &[f64], inputs: &[f64], tape: &'t mut Tape) -> &'t [f64] {
        self.actor.forward(&params[..self.actor.n_params()], inputs, tape)
    }

    pub fn sample<R: Rng>(&self, inputs: &[f64], date: usize, rng: &mut R, tape: &mut Tape) -> Sample {
        let out = self.actor_out(&self.params, inputs, tape);
        match self.kind {
            PolicyKind::Gaussian => {
                let xi = self.log_std(date);
                let z: f64 = rng.sample(StandardNormal);
                let raw = out[0] + xi.exp() * z;
                Sample {
                    action: Action::Raw(raw),
                    taken: raw,
                    log_prob: -0.5 * z * z - xi - 0.5 * LN_2PI,
                }
            }
            PolicyKind::Softmax => {
                let (lp0, lp1) = log_softmax2(out[0], out[1]);
                let max = rng.random::<f64>() < lp1.exp();
                Sample {
                    action: Action::Extreme(max),
                    taken: if max { 1.0 } else { 0.0 },
                    log_prob: if max { lp1 } else { lp0 },
                }
            }
        }
    }

    /// Gaussian mean or most likely class (ties go to the larger consumption).
    pub fn greedy(&self, inputs: &[f64], tape: &mut Tape) -> Action {
        let out = self.actor_out(&self.params, inputs, tape);
        match self.kind {
            PolicyKind::Gaussian => Action::Raw(out[0]),
            PolicyKind::Softmax => Action::Extreme(out[1] >= out[0]),
        }
    }

    /// Log-density of a recorded action under the current parameters.
    pub fn log_prob(&self, inputs: &[f64], date: usize, taken: f64, tape: &mut Tape) -> f64 {
        let out = self.actor_out(&self.params, inputs, tape);
        match self.kind {
            PolicyKind::Gaussian => {
                let xi = self.log_std(date);
                let z = (taken - out[0]) / xi.exp();
                -0.5 * z * z - xi - 0.5 * LN_2PI
            }
            PolicyKind::Softmax => {
                let (lp0, lp1) = log_softmax2(out[0], out[1]);
                if taken > 0.5 {
                    lp1
                } else {
                    lp0
                }
            }
        }
    }
}

fn log_softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    (a - lse, b - lse)
}

/// One decision of a collected episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub inputs: [f64; 4],
    pub n_inputs: usize,
    pub date: usize,
    pub taken: f64,
    pub log_prob_old: f64,
    pub value_old: f64,
    pub advantage: f64,
    pub value_target: f64,
}

impl Transition {
    pub fn inputs(&self) -> &[f64] {
        &self.inputs[..self.n_inputs]
    }
}

/// Generalized advantage estimates and value targets of one episode.
/// `discounts[i]` is the factor from date `i + 1` back to date `i`; the
/// value after the last date is zero.
pub fn compute_gae(rewards: &[f64], values: &[f64], gae_lambda: f64, discounts: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(
        values.len() == n && discounts.len() == n,
        "episode arrays differ in length"
    );
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for i in (0..n).rev() {
        let next_v = if i + 1 < n { values[i + 1] } else { 0.0 };
        let delta = rewards[i] + discounts[i] * next_v - values[i];
        adv[i] = delta + gae_lambda * discounts[i] * next_adv;
        next_adv = adv[i];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Batch mean of `L^A − β·L^V` and its gradient with respect to `params`.
pub fn surrogate_objective(
    policy: &Policy,
    params: &[f64],
    batch: &[Transition],
    clip_eps: f64,
    value_coef: f64,
    grad: &mut [f64],
) -> f64 {
    grad.fill(0.0);
    if batch.is_empty() {
        return 0.0;
    }
    let w = 1.0 / batch.len() as f64;
    let (na, nc) = (policy.actor.n_params(), policy.critic.n_params());
    let mut tape = Tape::default();
    let mut total = 0.0;
    for tr in batch {
        let x = tr.inputs();
        let out = policy.actor.forward(&params[..na], x, &mut tape).to_vec();
        let (log_prob, d_out, d_xi) = match policy.kind {
            PolicyKind::Gaussian => {
                let xi = params[na + nc + tr.date.min(policy.n_log_std - 1)];
                let sigma = xi.exp();
                let z = (tr.taken - out[0]) / sigma;
                (-0.5 * z * z - xi - 0.5 * LN_2PI, vec![z / sigma], z * z - 1.0)
            }
            PolicyKind::Softmax => {
                let (lp0, lp1) = log_softmax2(out[0], out[1]);
                let (p0, p1) = (lp0.exp(), lp1.exp());
                if tr.taken > 0.5 {
                    (lp1, vec![-p0, 1.0 - p1], 0.0)
                } else {
                    (lp0, vec![1.0 - p0, -p1], 0.0)
                }
            }
        };
        let ratio = (log_prob - tr.log_prob_old).exp();
        let a = tr.advantage;
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
        let surrogate = (ratio * a).min(clipped * a);
        let unclipped_active = if a >= 0.0 {
            ratio <= 1.0 + clip_eps
        } else {
            ratio >= 1.0 - clip_eps
        };
        let d_logp = if unclipped_active { w * ratio * a } else { 0.0 };
        if d_logp != 0.0 {
            let d: Vec<f64> = d_out.iter().map(|g| g * d_logp).collect();
            policy.actor.backward(&params[..na], &tape, &d, &mut grad[..na]);
            if policy.kind == PolicyKind::Gaussian {
                grad[na + nc + tr.date.min(policy.n_log_std - 1)] += d_logp * d_xi;
            }
        }
        let v = policy.critic.forward(&params[na..na + nc], x, &mut tape)[0];
        let err = v - tr.value_target;
        policy.critic.backward(
            &params[na..na + nc],
            &tape,
            &[-2.0 * value_coef * err * w],
            &mut grad[na..na + nc],
        );
        total += w * (surrogate - value_coef * err * err);
    }
    total
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], rate: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p += rate * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub learn_rate: f64,
    /// Weight β of the value loss.
    pub value_coef: f64,
    pub batch_episodes: usize,
    pub sgd_epochs: usize,
    pub minibatch: usize,
    /// Gradient norm cap per minibatch; non-positive disables it.
    pub max_grad_norm: f64,
    pub restarts: usize,
    /// Training episodes per restart.
    pub episodes: usize,
    /// Episodes in the selection window; defaults to a tenth of `episodes`.
    pub trailing_window: Option<usize>,
    pub hidden: Vec<usize>,
    pub shared_log_std: bool,
    pub log_std_init: f64,
    pub substeps_per_day: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gae_lambda: 0.95,
            clip_eps: 0.2,
            learn_rate: 3e-4,
            value_coef: 0.01,
            batch_episodes: 2048,
            sgd_epochs: 10,
            minibatch: 64,
            max_grad_norm: 0.5,
            restarts: 4,
            episodes: 200_000,
            trailing_window: None,
            hidden: vec![4; 5],
            shared_log_std: false,
            log_std_init: 0.5f64.ln(),
            substeps_per_day: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return invalid("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return invalid("clip_eps must lie in (0, 1)");
        }
        if !(self.learn_rate > 0.0) || !(self.value_coef >= 0.0) {
            return invalid("learn_rate must be positive and value_coef non-negative");
        }
        if self.batch_episodes == 0
            || self.sgd_epochs == 0
            || self.minibatch == 0
            || self.restarts == 0
            || self.episodes == 0
        {
            return invalid("batch, epoch, minibatch, restart and episode counts must be positive");
        }
        if self.hidden.contains(&0) {
            return invalid("hidden layers need at least one unit");
        }
        Ok(())
    }

    fn window(&self) -> usize {
        self.trailing_window
            .unwrap_or(self.episodes / 10)
            .clamp(1, self.episodes)
    }
}

/// Moving average of episode rewards with a 98% band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub episode: usize,
    pub avg_reward: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub restart: usize,
    /// Mean reward over the trailing selection window.
    pub trailing_mean: f64,
    pub curve: Vec<CurvePoint>,
    pub discarded_batches: usize,
    pub policy: Policy,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: usize,
    pub restarts: Vec<RestartOutcome>,
}

impl TrainOutcome {
    pub fn policy(&self) -> &Policy {
        &self.restarts[self.best].policy
    }
}

/// Environment for `contract` on the given market.
pub fn build_env(
    contract: &SwingContract,
    params: &ModelParams,
    curve: &SharedCurve,
    dcurve: &DiscountCurve,
) -> Result<SwingEnv> {
    let schedule = contract.schedule(1)?;
    let f_ref = day_ahead_maps(curve, params.a, &schedule)?[0].level;
    let floating = matches!(contract.strike, StrikeSpec::Floating { .. });
    SwingEnv::new(contract.clone(), contract.pay_discounts(dcurve), f_ref, floating)
}

fn window_point(episode: usize, rewards: &[f64], window: usize) -> CurvePoint {
    let tail = &rewards[rewards.len().saturating_sub(window)..];
    let (mean, se) = crate::mc::mean_se(tail);
    CurvePoint {
        episode,
        avg_reward: mean,
        ci_low: mean - Z98 * se,
        ci_high: mean + Z98 * se,
    }
}

/// Collects one batch: transitions with advantages (in units of the
/// reference level) and the discounted episode rewards. Exploration noise
/// for path `k` comes from substream `first + k`.
pub fn collect_batch(
    policy: &Policy,
    env: &SwingEnv,
    fixings: &crate::mc::FixingSet,
    cfg: &TrainConfig,
    seed: u64,
    first: u64,
) -> Result<(Vec<Transition>, Vec<f64>)> {
    let strike = fixed_strike(env.contract());
    let scale = 1.0 / env.f_ref();
    let n_dates = env.n_dates();
    let episodes: Vec<Result<(Vec<Transition>, f64)>> = (0..fixings.n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, SeedDomain::Exploration, first + k as u64);
            let mut tape = Tape::default();
            let mut x = Vec::with_capacity(4);
            let mut run = env.start(fixings.path(k), strike_of(fixings, k, strike));
            let mut steps = Vec::with_capacity(n_dates);
            let mut rewards = Vec::with_capacity(n_dates);
            let mut values = Vec::with_capacity(n_dates);
            let mut total = 0.0;
            while !run.done() {
                let date = run.date();
                run.state().features(&mut x);
                let s = policy.sample(&x, date, &mut rng, &mut tape);
                let v = policy.value(&x, &mut tape);
                let (_, r) = run.step(s.action)?;
                total += r;
                let mut inputs = [0.0; 4];
                inputs[..x.len()].copy_from_slice(&x);
                steps.push(Transition {
                    inputs,
                    n_inputs: x.len(),
                    date,
                    taken: s.taken,
                    log_prob_old: s.log_prob,
                    value_old: v,
                    advantage: 0.0,
                    value_target: 0.0,
                });
                rewards.push(r * scale);
                values.push(v);
            }
            assert_feasible(env.contract(), run.plan());
            let (adv, targets) = compute_gae(&rewards, &values, cfg.gae_lambda, &vec![1.0; n_dates]);
            for ((t, a), y) in steps.iter_mut().zip(adv).zip(targets) {
                t.advantage = a;
                t.value_target = y;
            }
            Ok((steps, total))
        })
        .collect();
    let mut transitions = Vec::with_capacity(fixings.n_paths * n_dates);
    let mut totals = Vec::with_capacity(fixings.n_paths);
    for e in episodes {
        let (steps, total) = e?;
        transitions.extend(steps);
        totals.push(total);
    }
    Ok((transitions, totals))
}

fn normalize_advantages(batch: &mut [Transition]) {
    let n = batch.len() as f64;
    let mean = batch.iter().map(|t| t.advantage).sum::<f64>() / n;
    let var = batch.iter().map(|t| (t.advantage - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    for t in batch.iter_mut() {
        t.advantage = (t.advantage - mean) / sd;
    }
}

/// One clipped-surrogate update on a collected batch. Returns `false` and
/// leaves the policy untouched when a gradient is not finite.
fn update(
    policy: &mut Policy,
    adam: &mut Adam,
    batch: &mut [Transition],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> bool {
    normalize_advantages(batch);
    let saved = (policy.params.clone(), adam.clone());
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0; policy.params.len()];
    let mut mb = Vec::with_capacity(cfg.minibatch);
    for _ in 0..cfg.sgd_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            mb.clear();
            mb.extend(chunk.iter().map(|&i| batch[i]));
            surrogate_objective(policy, &policy.params, &mb, cfg.clip_eps, cfg.value_coef, &mut grad);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                log::warn!("non-finite policy gradient, batch discarded");
                policy.params = saved.0;
                *adam = saved.1;
                return false;
            }
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.step(&mut policy.params, &grad, cfg.learn_rate);
        }
    }
    true
}

/// Trains `cfg.restarts` independent agents and keeps the one with the
/// best trailing mean reward.
pub fn train(
    contract: &SwingContract,
    params: Arc<ModelParams>,
    curve: &SharedCurve,
    dcurve: &DiscountCurve,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let env = build_env(contract, &params, curve, dcurve)?;
    let kind = PolicyKind::for_mode(contract.mode);
    let n_log_std = if cfg.shared_log_std { 1 } else { env.n_dates() };
    let window = cfg.window();
    let n_updates = cfg.episodes.div_ceil(cfg.batch_episodes);
    let mut restarts = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let mut policy = Policy::new(
            kind,
            env.n_inputs(),
            &cfg.hidden,
            n_log_std,
            cfg.log_std_init,
            &mut substream(seed, SeedDomain::Policy, r as u64),
        );
        let mut adam = Adam::new(policy.params.len());
        let mut rewards = Vec::with_capacity(cfg.episodes);
        let mut curve_pts = Vec::with_capacity(n_updates);
        let mut discarded = 0;
        for u in 0..n_updates {
            let start = u * cfg.batch_episodes;
            let n = cfg.batch_episodes.min(cfg.episodes - start);
            let first = (r * cfg.episodes + start) as u64;
            let fixings = simulate_fixings(
                contract,
                &params,
                curve,
                n,
                seed,
                SeedDomain::Training,
                first,
                cfg.substeps_per_day,
            )?;
            let (mut batch, totals) = collect_batch(&policy, &env, &fixings, cfg, seed, first)?;
            rewards.extend(totals);
            curve_pts.push(window_point(rewards.len(), &rewards, window));
            let mut rng = substream(seed, SeedDomain::Minibatch, (r * n_updates + u) as u64);
            if !update(&mut policy, &mut adam, &mut batch, cfg, &mut rng) {
                discarded += 1;
            }
        }
        let trailing_mean = window_point(rewards.len(), &rewards, window).avg_reward;
        log::info!("restart {r}: trailing mean reward {trailing_mean:.6}");
        restarts.push(RestartOutcome {
            restart: r,
            trailing_mean,
            curve: curve_pts,
            discarded_batches: discarded,
            policy,
        });
    }
    let best = restarts.iter().enumerate().fold(0, |b, (i, o)| {
        if o.trailing_mean > restarts[b].trailing_mean {
            i
        } else {
            b
        }
    });
    Ok(TrainOutcome { best, restarts })
}

/// Prices the contract with the greedy policy on `n_paths` fresh paths.
#[allow(clippy::too_many_arguments)]
pub fn price_with_policy(
    policy: &Policy,
    contract: &SwingContract,
    params: Arc<ModelParams>,
    curve: &SharedCurve,
    dcurve: &DiscountCurve,
    n_paths: usize,
    seed: u64,
    chunk_paths: usize,
) -> Result<PricingResult> {
    let env = build_env(contract, &params, curve, dcurve)?;
    if policy.n_inputs() != env.n_inputs() || policy.kind != PolicyKind::for_mode(contract.mode) {
        return invalid("policy does not match the contract");
    }
    let strike = fixed_strike(contract);
    let n_dates = env.n_dates();
    let mut totals = ReplayTotals::default();
    let mut done = 0;
    while done < n_paths {
        let n = chunk_paths.max(1).min(n_paths - done);
        let fx = simulate_fixings(contract, &params, curve, n, seed, SeedDomain::Pricing, done as u64, 1)?;
        let runs: Vec<Result<(f64, Vec<f64>, u64)>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let mut tape = Tape::default();
                let mut x = Vec::with_capacity(4);
                let mut run = env.start(fx.path(k), strike_of(&fx, k, strike));
                let mut total = 0.0;
                let mut extremes = 0;
                while !run.done() {
                    run.state().features(&mut x);
                    let (lo, hi) = run.admissible()?;
                    let (n, r) = run.step(policy.greedy(&x, &mut tape))?;
                    if (n - lo).abs() <= 1e-2 || (n - hi).abs() <= 1e-2 {
                        extremes += 1;
                    }
                    total += r;
                }
                assert_feasible(contract, run.plan());
                Ok((total, run.plan().to_vec(), extremes))
            })
            .collect();
        let mut chunk = ReplayTotals {
            consumption: vec![0.0; n_dates],
            ..Default::default()
        };
        for run in runs {
            let (total, plan, extremes) = run?;
            chunk.rewards.push(total);
            for (c, x) in chunk.consumption.iter_mut().zip(&plan) {
                *c += x;
            }
            chunk.extreme_decisions += extremes;
            chunk.decisions += n_dates as u64;
        }
        totals.merge(chunk);
        done += n;
    }
    Ok(totals.finish(seed))
}

/// Greedy action on a `log_moneyness × consumption_norm` grid at one date,
/// as a fraction of the admissible range.
pub fn policy_surface(
    policy: &Policy,
    env: &SwingEnv,
    date: usize,
    log_moneyness: &[f64],
    consumption_norm: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    if date >= env.n_dates() {
        return invalid("surface date is past the last fixing");
    }
    let mut tape = Tape::default();
    let mut x = Vec::with_capacity(4);
    let mut out = Vec::with_capacity(log_moneyness.len() * consumption_norm.len());
    for &m in log_moneyness {
        for &c in consumption_norm {
            env.synthetic_state(date, c, m).features(&mut x);
            let a = match policy.greedy(&x, &mut tape) {
                Action::Raw(raw) => raw.clamp(0.0, 1.0),
                Action::Extreme(max) => f64::from(u8::from(max)),
            };
            out.push((m, c, a));
        }
    }
    Ok(out)
}

const MAGIC: &str = "swing-ppo-policy";
const FORMAT_VERSION: u32 = 1;

/// Text header followed by the parameters as little-endian `f64`.
pub fn write_policy<W: Write>(policy: &Policy, mut w: W) -> Result<()> {
    let sizes: Vec<String> = policy.actor.sizes().iter().map(|s| s.to_string()).collect();
    writeln!(w, "{MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "kind {}", policy.kind.label())?;
    writeln!(w, "actor {}", sizes.join(","))?;
    writeln!(w, "log_std {}", policy.n_log_std)?;
    writeln!(w, "params {}", policy.params.len())?;
    writeln!(w, "end")?;
    for p in &policy.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a file written by [`write_policy`]; leading `#` lines are skipped.
pub fn read_policy<R: BufRead>(mut r: R) -> Result<Policy> {
    let mut field = |name: &str| -> Result<String> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        while name == MAGIC && line.starts_with('#') {
            line.clear();
            r.read_line(&mut line)?;
        }
        let line = line.trim_end();
        match line.split_once(' ') {
            Some((k, v)) if k == name => Ok(v.to_string()),
            _ => Err(Error::InvalidInput(format!(
                "policy header: expected `{name}`, found `{line}`"
            ))),
        }
    };
    let version = field(MAGIC)?;
    if version != FORMAT_VERSION.to_string() {
        return invalid(format!("unsupported policy format version {version}"));
    }
    let kind = match field("kind")?.as_str() {
        "gaussian" => PolicyKind::Gaussian,
        "softmax" => PolicyKind::Softmax,
        other => return invalid(format!("unknown policy kind {other}")),
    };
    let sizes: Vec<usize> = field("actor")?
        .split(',')
        .map(|s| {
            s.parse()
                .map_err(|_| Error::InvalidInput(format!("bad layer size {s}")))
        })
        .collect::<Result<_>>()?;
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::InvalidInput(format!("bad count {s}")))
    };
    let n_log_std = parse(field("log_std")?)?;
    let n_params = parse(field("params")?)?;
    let mut end = String::new();
    r.read_line(&mut end)?;
    if end.trim_end() != "end" || sizes.len() < 2 {
        return invalid("malformed policy header");
    }
    let hidden = &sizes[1..sizes.len() - 1];
    let mut policy = Policy::new(
        kind,
        sizes[0],
        hidden,
        n_log_std.max(1),
        0.0,
        &mut substream(0, SeedDomain::Policy, 0),
    );
    if policy.actor.sizes() != sizes.as_slice() || policy.n_log_std != n_log_std || policy.params.len() != n_params {
        return invalid("policy header is inconsistent");
    }
    let mut bytes = vec![0u8; 8 * n_params];
    r.read_exact(&mut bytes)?;
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    policy.set_params(&params)?;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_policy(kind: PolicyKind) -> Policy {
        let mut p = Policy::new(
            kind,
            3,
            &[2, 2],
            4,
            0.5f64.ln(),
            &mut substream(3, SeedDomain::Policy, 0),
        );
        let shifted: Vec<f64> = p
            .params()
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.05 * (i as f64).sin())
            .collect();
        p.set_params(&shifted).unwrap();
        p
    }

    fn batch(policy: &Policy) -> Vec<Transition> {
        let mut rng = substream(5, SeedDomain::Exploration, 0);
        let mut tape = Tape::default();
        (0..4)
            .map(|i| {
                let x = [0.1 * i as f64, 0.3 - 0.2 * i as f64, -0.1 + 0.07 * i as f64];
                let s = policy.sample(&x, i, &mut rng, &mut tape);
                Transition {
                    inputs: [x[0], x[1], x[2], 0.0],
                    n_inputs: 3,
                    date: i,
                    taken: s.taken,
                    // an older policy, so that some ratios leave the clip band
                    log_prob_old: s.log_prob + [0.05, -0.4, 0.1, 0.5][i],
                    value_old: 0.0,
                    advantage: [1.2, -0.7, 0.4, -1.5][i],
                    value_target: [0.3, -0.2, 0.8, 0.1][i],
                }
            })
            .collect()
    }

    #[test]
    fn objective_gradient_matches_central_differences() {
        for kind in [PolicyKind::Gaussian, PolicyKind::Softmax] {
            let policy = small_policy(kind);
            let b = batch(&policy);
            let theta = policy.params().to_vec();
            let mut grad = vec![0.0; theta.len()];
            surrogate_objective(&policy, &theta, &b, 0.2, 0.5, &mut grad);
            let mut scratch = vec![0.0; theta.len()];
            for j in 0..theta.len() {
                let h = 1e-5;
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (surrogate_objective(&policy, &up, &b, 0.2, 0.5, &mut scratch)
                    - surrogate_objective(&policy, &dn, &b, 0.2, 0.5, &mut scratch))
                    / (2.0 * h);
                let err = (fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-6);
                assert!(err <= 1e-4, "{kind:?} param {j}: fd {fd} analytic {}", grad[j]);
            }
        }
    }

    #[test]
    fn on_policy_objective_is_mean_advantage() {
        let policy = small_policy(PolicyKind::Gaussian);
        let mut b = batch(&policy);
        let mut tape = Tape::default();
        for t in b.iter_mut() {
            t.log_prob_old = policy.log_prob(t.inputs(), t.date, t.taken, &mut tape);
        }
        let mut grad = vec![0.0; policy.params().len()];
        let obj = surrogate_objective(&policy, policy.params(), &b, 0.2, 0.0, &mut grad);
        let mean_adv = b.iter().map(|t| t.advantage).sum::<f64>() / b.len() as f64;
        assert!((obj - mean_adv).abs() < 1e-14);
    }

    #[test]
    fn saturated_clip_has_no_policy_gradient() {
        let policy = small_policy(PolicyKind::Gaussian);
        let mut tape = Tape::default();
        let x = [0.1, 0.2, 0.3];
        let lp = policy.log_prob(&x, 0, 0.4, &mut tape);
        let t = Transition {
            inputs: [0.1, 0.2, 0.3, 0.0],
            n_inputs: 3,
            date: 0,
            taken: 0.4,
            log_prob_old: lp - 1.4f64.ln(),
            value_old: 0.0,
            advantage: 1.0,
            value_target: 0.0,
        };
        let mut grad = vec![0.0; policy.params().len()];
        let obj = surrogate_objective(&policy, policy.params(), &[t], 0.2, 0.0, &mut grad);
        assert!((obj - 1.2).abs() < 1e-12);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gae_examples() {
        let (adv, tgt) = compute_gae(&[1.0, 0.0, 2.0], &[0.5, 0.2, 0.1], 1.0, &[1.0; 3]);
        assert!((adv[0] - 2.5).abs() < 1e-15);
        assert!((tgt[0] - 3.0).abs() < 1e-15);
        let (adv, _) = compute_gae(&[1.0, 0.0, 2.0], &[0.5, 0.2, 0.1], 0.0, &[1.0; 3]);
        assert!((adv[0] - 0.7).abs() < 1e-15 && (adv[1] + 0.1).abs() < 1e-15 && (adv[2] - 1.9).abs() < 1e-15);
        let (adv, _) = compute_gae(&[0.0; 3], &[0.0; 3], 0.95, &[1.0; 3]);
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn gaussian_density_at_the_mean() {
        let mut p = small_policy(PolicyKind::Gaussian);
        let mut params = p.params().to_vec();
        let idx = p.log_std_index(0);
        params[idx] = 0.0;
        p.set_params(&params).unwrap();
        let mut tape = Tape::default();
        let x = [0.2, 0.1, 0.0];
        let Action::Raw(mu) = p.greedy(&x, &mut tape) else {
            panic!()
        };
        assert!((p.log_prob(&x, 0, mu, &mut tape) + 0.5 * LN_2PI).abs() < 1e-15);
        let mut last = f64::NEG_INFINITY;
        for xi in [0.0, -1.0, -3.0, -6.0] {
            params[idx] = xi;
            p.set_params(&params).unwrap();
            let lp = p.log_prob(&x, 0, mu, &mut tape);
            assert!(lp > last);
            last = lp;
        }
    }

    #[test]
    fn even_logits_are_a_fair_coin() {
        let (a, b) = log_softmax2(0.0, 0.0);
        assert!((a.exp() - 0.5).abs() < 1e-15 && (b.exp() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn policy_file_round_trip() {
        for kind in [PolicyKind::Gaussian, PolicyKind::Softmax] {
            let p = small_policy(kind);
            let mut buf = Vec::new();
            write_policy(&p, &mut buf).unwrap();
            let q = read_policy(std::io::Cursor::new(&buf)).unwrap();
            assert_eq!(p, q);
            let mut tagged = b"# run metadata\n".to_vec();
            tagged.extend_from_slice(&buf);
            assert_eq!(read_policy(std::io::Cursor::new(&tagged)).unwrap(), p);
            buf[3] = b'X';
            assert!(read_policy(std::io::Cursor::new(&buf)).is_err());
        }
    }
}
