mod common;

use common::{grid_argmax, oracle_cox, oracle_fit, random_dataset, random_weights, rng};
use ppsh_core::frailty_ps::PsWeightTable;
use ppsh_core::ppsh::{fit_cause_specific, fit_ppsh, information, weighted_log_pl, weighted_score};

#[test]
fn unit_weights_match_plain_breslow() {
    let mut r = rng(11);
    let mut checked = 0;
    for k in 0..60 {
        let ds = random_dataset(&mut r, 8 + k % 20, k % 2);
        let unit = |_: f64, _: usize| 1.0;
        let table = PsWeightTable::unit(&ds);
        let beta: Vec<f64> = (0..ds.design_dim()).map(|a| 0.3 - 0.4 * a as f64).collect();
        let (ll, g, h) = oracle_cox(&ds, &beta, &unit);
        let score = weighted_score(&ds, &table, &beta).unwrap();
        let info = information(&ds, &table, &beta).unwrap();
        assert!((weighted_log_pl(&ds, &table, &beta).unwrap() - ll).abs() < 1e-10);
        for a in 0..beta.len() {
            assert!((score[a] - g[a]).abs() < 1e-10);
            for b in 0..beta.len() {
                assert!((info[(a, b)] - h[a][b]).abs() < 1e-10);
            }
        }
        if let Some(oracle) = oracle_fit(&ds, &unit) {
            let fit = fit_cause_specific(&ds).unwrap();
            assert!(fit.converged);
            for a in 0..oracle.len() {
                assert!((fit.beta[a] - oracle[a]).abs() < 1e-8, "{:?} vs {oracle:?}", fit.beta);
            }
            checked += 1;
        }
    }
    assert!(checked >= 40, "only {checked} datasets had a finite estimate");
}

#[test]
fn random_weights_match_weighted_oracle() {
    let mut r = rng(5);
    for _ in 0..30 {
        let ds = random_dataset(&mut r, 10, 0);
        let (map, table) = random_weights(&mut r, &ds);
        let w = |t: f64, i: usize| map[&(t.to_bits(), i)];
        for beta in [-1.3, 0.0, 0.7] {
            let (ll, g, h) = oracle_cox(&ds, &[beta], &w);
            assert!((weighted_log_pl(&ds, &table, &[beta]).unwrap() - ll).abs() < 1e-10);
            assert!((weighted_score(&ds, &table, &[beta]).unwrap()[0] - g[0]).abs() < 1e-10);
            assert!((information(&ds, &table, &[beta]).unwrap()[(0, 0)] - h[0][0]).abs() < 1e-10);
        }
    }
}

#[test]
fn information_is_minus_score_derivative() {
    let mut r = rng(9);
    for k in 0..20 {
        let ds = random_dataset(&mut r, 15, k % 2);
        let (_, table) = random_weights(&mut r, &ds);
        let p = ds.design_dim();
        let beta: Vec<f64> = (0..p).map(|a| 0.2 * (a as f64 + 1.0)).collect();
        let info = information(&ds, &table, &beta).unwrap();
        let h = 1e-5;
        for b in 0..p {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[b] += h;
            dn[b] -= h;
            let su = weighted_score(&ds, &table, &up).unwrap();
            let sd = weighted_score(&ds, &table, &dn).unwrap();
            for a in 0..p {
                let fd = -(su[a] - sd[a]) / (2.0 * h);
                let scale = info[(a, b)].abs().max(1e-3);
                assert!((fd - info[(a, b)]).abs() / scale < 1e-5, "{fd} vs {}", info[(a, b)]);
            }
        }
    }
}

#[test]
fn fit_matches_grid_search() {
    let mut r = rng(21);
    let mut done = 0;
    while done < 10 {
        let ds = random_dataset(&mut r, 6 + done % 5, 0);
        let (map, table) = random_weights(&mut r, &ds);
        let w = |t: f64, i: usize| map[&(t.to_bits(), i)];
        let grid = grid_argmax(|b| oracle_cox(&ds, &[b], &w).0, -15.0, 15.0);
        if grid.abs() > 14.0 {
            continue;
        }
        let fit = fit_ppsh(&ds, &table, None).unwrap();
        assert!(fit.converged);
        assert!((fit.beta[0] - grid).abs() < 1e-6, "{} vs {grid}", fit.beta[0]);
        done += 1;
    }
}
