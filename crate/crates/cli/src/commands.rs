use std::io::Write;
use std::sync::Arc;

use swing_core::calibrate::{
    calibrate_local_vol, calibrate_mean_reversion, CalibrationReport, CalibrationTarget, SecondaryTarget,
};
use swing_core::lsmc::{build_grid, price_swing, ConsumptionMode, PricingResult, SwingContract};
use swing_core::lv_model::{LocalVolSurface, ModelParams, PeriodModel};
use swing_core::market::{
    load_quotes, parse_date, period_futures, DeliveryPeriod, DiscountCurve, InitialCurve, QuoteKind, SharedCurve,
    VanillaQuote, DAY,
};
use swing_core::mc::{day_ahead_fixings, day_ahead_maps, mean_se, simulate_spot, spike_levels, SimulationSchedule};
use swing_core::pde::{model_iv, solve_dupire};
use swing_core::ppo::{build_env, policy_surface, price_with_policy, train, write_policy};
use swing_core::rng::SeedDomain;
use swing_core::spike::spike_adjusted_spot;

use crate::artifacts::{f, OutDir};
use crate::config::RunConfig;
use crate::failure::Failure;

pub struct Market {
    pub curve: SharedCurve,
    pub dcurve: DiscountCurve,
    pub quotes: Vec<VanillaQuote>,
}

pub fn load_market(cfg: &RunConfig) -> Result<Market, Failure> {
    let valuation = parse_date(&cfg.valuation_date).ok_or_else(|| Failure::Config("bad valuation_date".into()))?;
    let (curve_path, quote_path) = (cfg.resolve(&cfg.market.curve), cfg.resolve(&cfg.market.quotes));
    let curve = InitialCurve::load_csv(&curve_path, valuation)
        .map_err(|e| Failure::Data(format!("{}: {e}", curve_path.display())))?;
    let quotes =
        load_quotes(&quote_path, valuation).map_err(|e| Failure::Data(format!("{}: {e}", quote_path.display())))?;
    let dcurve = DiscountCurve::flat(cfg.market.rate).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(Market {
        curve: Arc::new(curve),
        dcurve,
        quotes,
    })
}

pub struct Model {
    pub params: Arc<ModelParams>,
    pub report: Option<CalibrationReport>,
}

/// Loads the configured surface or calibrates one. Calibration reports are
/// returned even when the fit failed to converge so they can be written out.
pub fn model(cfg: &RunConfig, market: &Market) -> Result<Model, Failure> {
    if let Some(path) = cfg.model.surface.as_deref().map(|p| cfg.resolve(p)) {
        let a = cfg
            .model
            .a
            .ok_or_else(|| Failure::Config("model.surface needs an explicit model.a".into()))?;
        let file = std::fs::File::open(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        let surface = LocalVolSurface::read_csv(file).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        let params = ModelParams::new(a, surface)?;
        return Ok(Model {
            params: Arc::new(params),
            report: None,
        });
    }
    let pvo: Vec<VanillaQuote> = market
        .quotes
        .iter()
        .filter(|q| q.kind == QuoteKind::Pvo)
        .cloned()
        .collect();
    if pvo.is_empty() {
        return Err(Failure::Data("quote file has no PVO rows".into()));
    }
    let grid = cfg.model.pde.grid();
    let fp = cfg.model.calibration.fixed_point();
    let (params, report) = match &cfg.model.a_grid {
        Some(a_grid) => {
            let mut secondary: Vec<SecondaryTarget> = market
                .quotes
                .iter()
                .filter(|q| q.kind == QuoteKind::Mco)
                .cloned()
                .map(SecondaryTarget::Mco)
                .collect();
            secondary.extend(cfg.model.vol_drops.iter().map(|v| SecondaryTarget::VolDrop {
                front_ltd: v.front_ltd_day as f64 * DAY,
                back_maturity: v.back_maturity_day as f64 * DAY,
                value: v.value,
            }));
            if secondary.is_empty() {
                return Err(Failure::Config(
                    "model.a_grid needs MCO quotes or vol_drops to fit".into(),
                ));
            }
            let target = CalibrationTarget {
                pvo,
                secondary,
                weights: Vec::new(),
            };
            let fit = calibrate_mean_reversion(&target, &market.curve, &market.dcurve, &grid, &fp, a_grid)?;
            (fit.params, fit.report)
        }
        None => {
            let a = cfg.model.a.expect("validated");
            let (surface, report) = calibrate_local_vol(&pvo, &market.curve, &market.dcurve, a, &grid, &fp)?;
            (ModelParams::new(a, surface)?, report)
        }
    };
    Ok(Model {
        params: Arc::new(params),
        report: Some(report),
    })
}

fn require_converged(report: &Option<CalibrationReport>) -> Result<(), Failure> {
    match report {
        Some(r) if !r.converged => Err(Failure::Numerical(format!(
            "calibration stopped after {} iterations with max error {:.4}bp",
            r.iterations, r.max_abs_iv_error_bp
        ))),
        _ => Ok(()),
    }
}

fn calibrated(cfg: &RunConfig, market: &Market) -> Result<Model, Failure> {
    let m = model(cfg, market)?;
    require_converged(&m.report)?;
    Ok(m)
}

pub fn calibrate(cfg: &RunConfig, out: &mut OutDir) -> Result<(), Failure> {
    let market = load_market(cfg)?;
    let m = model(cfg, &market)?;
    let mut w = out.open("local_vol.csv")?;
    m.params.localvol.write_csv(&mut w)?;
    w.flush()?;
    if let Some(r) = &m.report {
        let mut w = out.csv("calibration_history.csv")?;
        w.write_record(["iteration", "max_error_bp"])?;
        for (i, e) in r.error_history_bp.iter().enumerate() {
            w.write_record([(i + 1).to_string(), f(*e)])?;
        }
        w.flush()?;
        let mut w = out.csv("quote_fit.csv")?;
        w.write_record([
            "kind",
            "option_expiry",
            "futures_maturity",
            "strike",
            "market_vol",
            "model_vol",
            "error_bp",
        ])?;
        let pvo = market.quotes.iter().filter(|q| q.kind == QuoteKind::Pvo);
        for (q, e) in pvo.zip(&r.quote_errors_bp) {
            w.write_record([
                "PVO".to_string(),
                f(q.option_expiry),
                f(q.futures_maturity),
                f(q.strike),
                f(q.implied_vol),
                f(q.implied_vol + e * 1e-4),
                f(*e),
            ])?;
        }
        w.flush()?;
        let mut w = out.csv("calibration_summary.csv")?;
        w.write_record(["a", "iterations", "converged", "max_error_bp"])?;
        w.write_record([
            f(r.a),
            r.iterations.to_string(),
            r.converged.to_string(),
            f(r.max_abs_iv_error_bp),
        ])?;
        w.flush()?;
        if !r.a_path.is_empty() {
            let mut w = out.csv("mean_reversion_scan.csv")?;
            w.write_record(["a", "secondary_rmse"])?;
            for (a, e) in &r.a_path {
                w.write_record([f(*a), f(*e)])?;
            }
            w.flush()?;
        }
    }
    require_converged(&m.report)
}

pub fn imply_smile(cfg: &RunConfig, deliveries: &[String], out: &mut OutDir) -> Result<(), Failure> {
    let market = load_market(cfg)?;
    let m = calibrated(cfg, &market)?;
    let grid = cfg.model.pde.grid();
    let horizon = cfg.smile.expiry_days.iter().copied().max().unwrap_or(0) as f64 * DAY;
    if horizon <= 0.0 {
        return Err(Failure::Config("smile.expiry_days must contain a positive day".into()));
    }
    let mut w = out.csv("smiles.csv")?;
    w.write_record(["delivery", "expiry_day", "moneyness", "strike", "implied_vol"])?;
    for label in deliveries {
        let dp = DeliveryPeriod::from_label(label).map_err(|e| Failure::Config(e.to_string()))?;
        let pm = PeriodModel::with_period(m.params.clone(), market.curve.clone(), &dp)?;
        let surface = solve_dupire(&pm, horizon, &grid)?;
        for &day in &cfg.smile.expiry_days {
            let t = day as f64 * DAY;
            let f0 = period_futures(market.curve.as_ref(), t, &dp)?;
            for &mny in &cfg.smile.moneyness {
                let q = VanillaQuote {
                    kind: QuoteKind::Pvo,
                    option_expiry: t,
                    futures_maturity: t,
                    delivery: dp.clone(),
                    strike: mny * f0,
                    implied_vol: 0.0,
                };
                let iv = model_iv(&surface, &q, market.curve.as_ref(), &market.dcurve)?;
                w.write_record([label.clone(), day.to_string(), f(mny), f(q.strike), f(iv)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_pricing(out: &mut OutDir, prefix: &str, contract: &SwingContract, r: &PricingResult) -> Result<(), Failure> {
    let mut w = out.csv(&format!("{prefix}_price.csv"))?;
    w.write_record(["price", "std_error", "n_paths", "bang_bang_fraction", "seed"])?;
    w.write_record([
        f(r.price),
        f(r.std_error),
        r.n_paths.to_string(),
        f(r.bang_bang_fraction),
        r.seed.to_string(),
    ])?;
    w.flush()?;
    let mut w = out.csv(&format!("{prefix}_consumption.csv"))?;
    w.write_record(["fixing_day", "mean_consumption"])?;
    for (d, c) in contract.fixing_days.iter().zip(&r.mean_consumption) {
        w.write_record([d.to_string(), f(*c)])?;
    }
    w.flush()?;
    Ok(())
}

/// Applies a `--mode` override to the contract.
pub fn with_mode(contract: &SwingContract, mode: Option<&str>) -> Result<SwingContract, Failure> {
    let mode = match mode {
        None => return Ok(contract.clone()),
        Some("bangbang") => ConsumptionMode::BangBang,
        Some("continuous") => match contract.mode {
            ConsumptionMode::Continuous { .. } => contract.mode,
            ConsumptionMode::BangBang => ConsumptionMode::Continuous { delta: 1.0 / 6.0 },
        },
        Some(other) => return Err(Failure::Config(format!("unknown mode `{other}`"))),
    };
    Ok(contract.with_mode(mode))
}

pub fn price_lsmc(cfg: &RunConfig, out: &mut OutDir) -> Result<(), Failure> {
    let contract = cfg.contract()?.clone();
    let market = load_market(cfg)?;
    let m = calibrated(cfg, &market)?;
    let r = price_swing(
        &contract,
        m.params,
        &market.curve,
        &market.dcurve,
        &cfg.lsmc.config(cfg.seed),
    )?;
    log::info!("LSMC price {:.6} ± {:.6}", r.price, r.std_error);
    write_pricing(out, "lsmc", &contract, &r)
}

pub fn price_ppo(cfg: &RunConfig, surface_day: Option<u32>, out: &mut OutDir) -> Result<(), Failure> {
    let contract = cfg.contract()?.clone();
    let market = load_market(cfg)?;
    let m = calibrated(cfg, &market)?;
    let outcome = train(
        &contract,
        m.params.clone(),
        &market.curve,
        &market.dcurve,
        &cfg.ppo.train,
        cfg.seed,
    )?;
    let best = &outcome.restarts[outcome.best];
    let mut w = out.csv("learning_curve.csv")?;
    w.write_record(["episode", "avg_reward", "ci_low", "ci_high"])?;
    for p in &best.curve {
        w.write_record([p.episode.to_string(), f(p.avg_reward), f(p.ci_low), f(p.ci_high)])?;
    }
    w.flush()?;
    let mut w = out.csv("restarts.csv")?;
    w.write_record(["restart", "trailing_mean", "discarded_batches", "selected"])?;
    for r in &outcome.restarts {
        w.write_record([
            r.restart.to_string(),
            f(r.trailing_mean),
            r.discarded_batches.to_string(),
            (r.restart == outcome.best).to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = out.open("policy.bin")?;
    write_policy(outcome.policy(), &mut w)?;
    w.flush()?;
    if let Some(day) = surface_day {
        let date = contract
            .fixing_days
            .iter()
            .position(|&d| d == day)
            .ok_or_else(|| Failure::Config(format!("--policy-surface day {day} is not a fixing day")))?;
        let env = build_env(&contract, &m.params, &market.curve, &market.dcurve)?;
        let lm: Vec<f64> = (0..=40).map(|i| -0.5 + 0.025 * i as f64).collect();
        let cn: Vec<f64> = (0..=20).map(|i| -0.5 + 0.05 * i as f64).collect();
        let mut w = out.csv("policy_surface.csv")?;
        w.write_record(["log_moneyness", "consumption_norm", "action"])?;
        for (x, c, a) in policy_surface(outcome.policy(), &env, date, &lm, &cn)? {
            w.write_record([f(x), f(c), f(a)])?;
        }
        w.flush()?;
    }
    let r = price_with_policy(
        outcome.policy(),
        &contract,
        m.params,
        &market.curve,
        &market.dcurve,
        cfg.ppo.pricing_paths,
        cfg.seed,
        cfg.ppo.chunk_paths,
    )?;
    log::info!(
        "PPO price {:.6} ± {:.6} (restart {})",
        r.price,
        r.std_error,
        outcome.best
    );
    write_pricing(out, "ppo", &contract, &r)
}

struct Check {
    name: String,
    day: u32,
    value: f64,
    reference: f64,
    std_error: f64,
}

impl Check {
    fn passed(&self) -> bool {
        (self.value - self.reference).abs() <= 3.0 * self.std_error + 1e-12
    }
}

/// Martingale checks of the simulated spot, day-ahead fixings and, when a
/// spike block is configured, the spike-adjusted spot; grid and PDE sanity.
pub fn diagnose(cfg: &RunConfig, out: &mut OutDir) -> Result<(), Failure> {
    let market = load_market(cfg)?;
    let m = calibrated(cfg, &market)?;
    let mut days = cfg.diagnose.days.clone();
    days.sort_unstable();
    days.dedup();
    if days.first() == Some(&0) || days.is_empty() {
        return Err(Failure::Config("diagnose.days must be positive".into()));
    }
    let schedule = SimulationSchedule::new(days.clone(), Vec::new(), 1)?;
    let paths = simulate_spot(
        &m.params,
        &schedule,
        cfg.diagnose.paths,
        cfg.seed,
        SeedDomain::Pricing,
        0,
    )?;
    let maps = day_ahead_maps(&market.curve, m.params.a, &schedule)?;
    let fixings = day_ahead_fixings(&paths, &maps)?;
    let spikes = cfg.spike.as_ref().map(|s| (s, spike_levels(s, &paths, cfg.seed)));
    let mut checks = Vec::new();
    for (j, &day) in days.iter().enumerate() {
        let col = |k: usize| paths.path(k)[j];
        let s: Vec<f64> = (0..paths.n_paths).map(col).collect();
        let (mean, se) = mean_se(&s);
        checks.push(Check {
            name: "spot_mean".into(),
            day,
            value: mean,
            reference: 1.0,
            std_error: se,
        });
        let fx: Vec<f64> = (0..paths.n_paths).map(|k| fixings.fixing(k, j)).collect();
        let (mean, se) = mean_se(&fx);
        checks.push(Check {
            name: "day_ahead_mean".into(),
            day,
            value: mean,
            reference: maps[j].level,
            std_error: se,
        });
        if let Some((sp, y)) = &spikes {
            let t = day as f64 * DAY;
            let bar: Vec<f64> = (0..paths.n_paths)
                .map(|k| spike_adjusted_spot(s[k], y[k * days.len() + j], t, market.curve.as_ref(), sp))
                .collect::<swing_core::Result<_>>()?;
            let (mean, se) = mean_se(&bar);
            checks.push(Check {
                name: "spike_spot_mean".into(),
                day,
                value: mean,
                reference: market.curve.level(t),
                std_error: se,
            });
        }
    }
    let mut w = out.csv("diagnostics.csv")?;
    w.write_record(["check", "day", "value", "reference", "std_error", "status"])?;
    for c in &checks {
        let status = if c.passed() { "pass" } else { "fail" };
        w.write_record([
            c.name.clone(),
            c.day.to_string(),
            f(c.value),
            f(c.reference),
            f(c.std_error),
            status.into(),
        ])?;
    }
    let last = *days.last().unwrap() as f64 * DAY;
    let pm = PeriodModel::instantaneous(m.params.clone(), market.curve.clone());
    let surface = solve_dupire(&pm, last, &cfg.model.pde.grid())?;
    let violation = surface.max_shape_violation();
    let status = if violation <= 1e-10 { "pass" } else { "fail" };
    w.write_record([
        "pde_shape_violation".to_string(),
        days.last().unwrap().to_string(),
        f(violation),
        f(0.0),
        f(0.0),
        status.into(),
    ])?;
    if let Some(contract) = &cfg.contract {
        let grid = build_grid(contract);
        let mut outside = 0usize;
        for (i, levels) in grid.levels.iter().enumerate() {
            let (lo, hi) = contract.global_bounds(i);
            outside += levels.iter().filter(|&&x| x < lo - 1e-9 || x > hi + 1e-9).count();
        }
        let status = if outside == 0 { "pass" } else { "fail" };
        let n_levels: usize = grid.levels.iter().map(Vec::len).sum();
        w.write_record([
            "grid_levels".to_string(),
            String::new(),
            n_levels.to_string(),
            String::new(),
            String::new(),
            "info".into(),
        ])?;
        w.write_record([
            "grid_levels_outside_bounds".to_string(),
            String::new(),
            outside.to_string(),
            f(0.0),
            f(0.0),
            status.into(),
        ])?;
    }
    w.flush()?;
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        log::warn!("{failed} martingale checks outside 3 standard errors");
    }
    Ok(())
}
