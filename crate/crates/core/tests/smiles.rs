//! Smiles of different delivery periods implied from one local vol.

use std::sync::Arc;

use swing_core::fixture;
use swing_core::lv_model::{ModelParams, PeriodModel};
use swing_core::market::{period_futures, DeliveryPeriod, DiscountCurve, QuoteKind, VanillaQuote, DAY};
use swing_core::pde::{model_iv, solve_dupire, PdeGrid};

const EXPIRIES: [u32; 3] = [33, 94, 186];
const MONEYNESS: [f64; 5] = [0.8, 0.9, 1.0, 1.1, 1.2];

/// `ivs[delivery][expiry][strike]`
fn smiles(a: f64, labels: &[&str]) -> Vec<Vec<Vec<f64>>> {
    let curve = fixture::shared_curve();
    let base = fixture::reference_params();
    let params = Arc::new(ModelParams::new(a, base.localvol).unwrap());
    labels
        .iter()
        .map(|label| {
            let dp = DeliveryPeriod::from_label(label).unwrap();
            let pm = PeriodModel::with_period(params.clone(), curve.clone(), &dp).unwrap();
            let pde = solve_dupire(&pm, 186.0 * DAY, &PdeGrid::default()).unwrap();
            EXPIRIES
                .iter()
                .map(|&d| {
                    let t = d as f64 * DAY;
                    let f0 = period_futures(curve.as_ref(), t, &dp).unwrap();
                    MONEYNESS
                        .iter()
                        .map(|m| {
                            let q = VanillaQuote {
                                kind: QuoteKind::Pvo,
                                option_expiry: t,
                                futures_maturity: t,
                                delivery: dp.clone(),
                                strike: m * f0,
                                implied_vol: 0.0,
                            };
                            model_iv(&pde, &q, curve.as_ref(), &DiscountCurve::zero()).unwrap()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[test]
fn delivery_does_not_matter_without_mean_reversion() {
    let s = smiles(0.0, &["1d", "1m", "3m", "6m"]);
    for other in &s[1..] {
        for (e, row) in other.iter().enumerate() {
            for (j, iv) in row.iter().enumerate() {
                assert!(
                    (iv - s[0][e][j]).abs() <= 1e-3,
                    "expiry {e} strike {j}: {iv} vs {}",
                    s[0][e][j]
                );
            }
        }
    }
}

#[test]
fn shorter_delivery_is_more_volatile_with_mean_reversion() {
    let s = smiles(1.0, &["1d", "1w", "1m", "3m"]);
    let atm = 2;
    for e in 0..EXPIRIES.len() {
        for w in s.windows(2) {
            assert!(
                w[0][e][atm] > w[1][e][atm],
                "expiry {}: {} vs {}",
                EXPIRIES[e],
                w[0][e][atm],
                w[1][e][atm]
            );
        }
    }
}

#[test]
fn one_month_atm_matches_the_generating_quotes() {
    let quotes = fixture::reference_pvo().unwrap();
    let s = smiles(fixture::REFERENCE_A, &["1m"]);
    let atm = fixture::MONEYNESS.iter().position(|&m| m == 1.0).unwrap();
    // 33, 94 and 186 are the first three quoted expiries
    for (e, row) in s[0].iter().enumerate() {
        let q = &quotes[e * fixture::MONEYNESS.len() + atm];
        assert!((row[2] - q.implied_vol).abs() < 1e-10);
    }
}
