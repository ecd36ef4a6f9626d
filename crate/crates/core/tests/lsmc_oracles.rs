use std::sync::Arc;

use swing_core::fixture;
use swing_core::lsmc::{
    admissible_actions, build_grid, price_swing, simulate_fixings, ConsumptionGrid, ConsumptionMode, LsmcConfig,
    StrikeSpec, SwingContract,
};
use swing_core::lv_model::{LocalVolSurface, ModelParams, PeriodModel};
use swing_core::market::{
    norm_cdf, norm_pdf, period_futures, DeliveryPeriod, DiscountCurve, InitialCurve, SharedCurve, DAY,
};
use swing_core::mc::day_ahead_maps;
use swing_core::pde::{option_on_futures, solve_dupire, PdeGrid};
use swing_core::rng::SeedDomain;

fn contract(days: Vec<u32>, c_min: f64, c_max: f64, strike: f64, mode: ConsumptionMode) -> SwingContract {
    SwingContract {
        fixing_days: days,
        n_min: 0.0,
        n_max: 1.0,
        c_min,
        c_max,
        strike: StrikeSpec::Fixed { strike },
        pay_lag_days: 1,
        mode,
    }
}

fn lsmc(regression_paths: usize, pricing_paths: usize, seed: u64) -> LsmcConfig {
    LsmcConfig {
        regression_paths,
        pricing_paths,
        seed,
        ..Default::default()
    }
}

fn may_strike() -> f64 {
    period_futures(&fixture::reference_curve(), 33.0 * DAY, &DeliveryPeriod::months(1)).unwrap()
}

#[test]
fn free_consumption_is_a_strip_of_daily_calls() {
    let curve = fixture::shared_curve();
    let params = Arc::new(fixture::reference_params());
    let k = may_strike();
    let days: Vec<u32> = (32..42).collect();
    let c = contract(days.clone(), 0.0, 10.0, k, ConsumptionMode::BangBang);
    let res = price_swing(
        &c,
        params.clone(),
        &curve,
        &DiscountCurve::zero(),
        &lsmc(50_000, 200_000, 3),
    )
    .unwrap();

    let dp = DeliveryPeriod::day_ahead();
    let pm = PeriodModel::with_period(params, curve.clone(), &dp).unwrap();
    let pde = solve_dupire(&pm, 41.0 * DAY, &PdeGrid::default()).unwrap();
    let strip: f64 = days
        .iter()
        .map(|&d| {
            let (t, maturity) = (d as f64 * DAY, (d + 1) as f64 * DAY);
            let f0 = period_futures(curve.as_ref(), maturity, &dp).unwrap();
            option_on_futures(&pde, t, maturity, k, f0, 1.0).unwrap()
        })
        .sum();
    assert!(
        (res.price - strip).abs() <= 2.0 * res.std_error,
        "{} ± {} vs {strip}",
        res.price,
        res.std_error
    );
}

#[test]
fn forced_consumption_prices_the_forward_strip() {
    let curve = fixture::shared_curve();
    let params = Arc::new(fixture::reference_params());
    let k = may_strike();
    let days: Vec<u32> = (32..39).collect();
    let c = contract(days, 7.0, 7.0, k, ConsumptionMode::Continuous { delta: 0.25 });
    let cfg = lsmc(10_000, 40_000, 4);
    let res = price_swing(&c, params.clone(), &curve, &DiscountCurve::zero(), &cfg).unwrap();

    let fx = simulate_fixings(&c, &params, &curve, 40_000, 4, SeedDomain::Pricing, 0, 1).unwrap();
    let sample_strip = fx.values.iter().map(|f| f - k).sum::<f64>() / 40_000.0;
    assert!((res.price - sample_strip).abs() <= 1e-9);
    let maps = day_ahead_maps(&curve, params.a, &c.schedule(1).unwrap()).unwrap();
    let strip: f64 = maps.iter().map(|m| m.level - k).sum();
    assert!((res.price - strip).abs() <= 3.0 * res.std_error);
    assert_eq!(res.bang_bang_fraction, 1.0);
}

/// Exact value of the discrete control problem for consecutive fixing days
/// `1..=n` under flat vol and no mean reversion, where each fixing is one
/// Euler step of the spot away from the previous one. The last fixing is
/// integrated in closed form, earlier ones by a fine trapezoid rule in the
/// normal increment.
struct Tree<'a> {
    contract: &'a SwingContract,
    grid: ConsumptionGrid,
    levels: Vec<f64>,
    strike: f64,
    step: f64,
    nodes: Vec<(f64, f64)>,
}

impl Tree<'_> {
    fn new(contract: &SwingContract, levels: Vec<f64>, strike: f64, step: f64, n_nodes: usize) -> Tree<'_> {
        let h = 16.0 / (n_nodes - 1) as f64;
        let nodes = (0..n_nodes)
            .map(|j| {
                let z = -8.0 + j as f64 * h;
                let w = if j == 0 || j == n_nodes - 1 { 0.5 } else { 1.0 };
                (z, w * h * norm_pdf(z))
            })
            .collect();
        Tree {
            contract,
            grid: build_grid(contract),
            levels,
            strike,
            step,
            nodes,
        }
    }

    /// Value before fixing `i` (1-based) from cumulative level `c` and spot `s`.
    fn value(&self, i: usize, c: f64, s: f64) -> f64 {
        let actions = admissible_actions(self.contract, &self.grid, i, c).unwrap();
        let level = self.levels[i - 1];
        if i == self.contract.n_fixings() {
            // payoff is linear in the consumption: take the cheapest level and
            // the option on the rest; fixing = a + b z
            let lo = self.grid.levels[i][actions[0]] - c;
            let hi = self.grid.levels[i][*actions.last().unwrap()] - c;
            let (a, b) = (level * s - self.strike, level * s * self.step);
            let call = a * norm_cdf(a / b) + b * norm_pdf(a / b);
            return lo * a + (hi - lo) * call;
        }
        self.nodes
            .iter()
            .map(|&(z, w)| {
                let s_next = s * (1.0 + self.step * z);
                let fixing = level * s_next;
                let best = actions
                    .iter()
                    .map(|&j| {
                        let x = self.grid.levels[i][j];
                        (x - c) * (fixing - self.strike) + self.value(i + 1, x, s_next)
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                w * best
            })
            .sum()
    }
}

#[test]
fn small_contracts_match_the_exact_tree() {
    let vol = 0.8;
    let curve: SharedCurve = Arc::new(InitialCurve::new(vec![0.0, 0.1], vec![20.0, 21.0], 0.1).unwrap());
    let params = Arc::new(ModelParams::new(0.0, LocalVolSurface::flat(vol)).unwrap());
    let cases = [
        (2, 0.0, 2.0, ConsumptionMode::BangBang),
        (2, 0.0, 1.0, ConsumptionMode::BangBang),
        (3, 1.0, 2.0, ConsumptionMode::BangBang),
        (3, 0.5, 1.5, ConsumptionMode::Continuous { delta: 0.25 }),
    ];
    for (n, c_min, c_max, mode) in cases {
        let c = contract((1..=n).collect(), c_min, c_max, 20.2, mode);
        let maps = day_ahead_maps(&curve, 0.0, &c.schedule(1).unwrap()).unwrap();
        assert!(maps.iter().all(|m| (m.slope - 1.0).abs() < 1e-12));
        let levels = maps.iter().map(|m| m.level).collect();
        let exact = Tree::new(&c, levels, 20.2, vol * DAY.sqrt(), 2001).value(1, 0.0, 1.0);
        let res = price_swing(
            &c,
            params.clone(),
            &curve,
            &DiscountCurve::zero(),
            &lsmc(100_000, 200_000, 5),
        )
        .unwrap();
        assert!(
            (res.price - exact).abs() <= 2.0 * res.std_error,
            "n={n} {mode:?}: {} ± {} vs {exact}",
            res.price,
            res.std_error
        );
    }
}

#[test]
fn bang_bang_never_beats_continuous() {
    let curve = fixture::shared_curve();
    let params = Arc::new(fixture::reference_params());
    let cfg = lsmc(20_000, 50_000, 6);
    let contracts = [
        fixture::week_swing(ConsumptionMode::Continuous { delta: 1.0 / 6.0 }),
        fixture::may_swing(12.5, ConsumptionMode::Continuous { delta: 1.0 / 6.0 }),
        contract(
            (40..50).collect(),
            2.3,
            7.6,
            may_strike() * 1.05,
            ConsumptionMode::Continuous { delta: 0.1 },
        ),
    ];
    for c in contracts {
        let cont = price_swing(&c, params.clone(), &curve, &DiscountCurve::zero(), &cfg).unwrap();
        let bb = price_swing(
            &c.with_mode(ConsumptionMode::BangBang),
            params.clone(),
            &curve,
            &DiscountCurve::zero(),
            &cfg,
        )
        .unwrap();
        let se = cont.std_error.hypot(bb.std_error);
        assert!(bb.price <= cont.price + 2.0 * se, "{} vs {}", bb.price, cont.price);
    }
}

#[test]
fn prices_do_not_depend_on_the_chunk_size() {
    let curve = fixture::shared_curve();
    let params = Arc::new(fixture::reference_params());
    let c = fixture::week_swing(ConsumptionMode::Continuous { delta: 0.25 });
    let run = |chunk_paths| {
        let cfg = LsmcConfig {
            chunk_paths,
            ..lsmc(5_000, 30_000, 8)
        };
        price_swing(&c, params.clone(), &curve, &DiscountCurve::zero(), &cfg).unwrap()
    };
    assert_eq!(run(30_000), run(7_000));
}

#[test]
fn floating_strike_contract_is_priced() {
    let curve = fixture::shared_curve();
    let params = Arc::new(fixture::reference_params());
    let mut c = fixture::week_swing(ConsumptionMode::BangBang);
    c.strike = StrikeSpec::Floating {
        strike_days: (20..31).collect(),
        maturity_day: 33,
        delivery: "1m".into(),
    };
    let cfg = lsmc(10_000, 20_000, 9);
    let res = price_swing(&c, params.clone(), &curve, &DiscountCurve::zero(), &cfg).unwrap();
    assert!(res.price.is_finite() && res.std_error > 0.0);
    assert_eq!(
        res,
        price_swing(&c, params, &curve, &DiscountCurve::zero(), &cfg).unwrap()
    );
    let total: f64 = res.mean_consumption.iter().sum();
    assert!((3.0 - 1e-9..=5.0 + 1e-9).contains(&total));
}
