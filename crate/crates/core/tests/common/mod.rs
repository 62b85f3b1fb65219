#![allow(dead_code)]

use std::collections::HashMap;

use ppsh_core::frailty_ps::PsWeightTable;
use ppsh_core::survdata::{Arm, Dataset, SubjectRecord};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small random dataset: times on a coarse grid so ties occur, optional
/// covariates, both arms present and at least one event per arm.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, covariates: usize) -> Dataset {
    loop {
        let records: Vec<SubjectRecord> = (0..n)
            .map(|k| {
                let arm = if k % 2 == 0 { Arm::Control } else { Arm::Treated };
                let follow = (rng.random_range(1..=40) as f64) / 10.0;
                let event = if rng.random_bool(0.6) {
                    Some((rng.random_range(1..=40) as f64 / 10.0).min(follow))
                } else {
                    None
                };
                let died = rng.random_bool(0.4);
                let covs = (0..covariates).map(|_| rng.random_range(-1.0..1.0)).collect();
                SubjectRecord::new(format!("r{k}"), arm, follow, event, died).with_covariates(covs)
            })
            .collect();
        let ds = Dataset::new(records).unwrap();
        let events_in = |arm: Arm| {
            ds.records()
                .iter()
                .filter(|r| r.arm == arm && r.had_event())
                .count()
        };
        if events_in(Arm::Control) > 0 && events_in(Arm::Treated) > 0 {
            return ds;
        }
    }
}

/// Plain design row: arm indicator then covariates.
pub fn design(r: &SubjectRecord) -> Vec<f64> {
    let mut z = vec![r.arm.indicator() as f64];
    z.extend(&r.covariates);
    z
}

/// Membership in the risk set at `t`, written out from its definition.
pub fn in_risk_set(r: &SubjectRecord, t: f64) -> bool {
    match r.event_time {
        Some(e) => e == t || (e > t && r.followup_time > t),
        None => r.followup_time > t,
    }
}

/// Weighted Breslow log partial likelihood with its gradient and negative
/// Hessian, looping over every event subject. `w(t, i)` gives the weight of
/// record `i` at event time `t`.
pub fn oracle_cox(
    ds: &Dataset,
    beta: &[f64],
    w: &dyn Fn(f64, usize) -> f64,
) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let p = beta.len();
    let recs = ds.records();
    let mut ll = 0.0;
    let mut grad = vec![0.0; p];
    let mut info = vec![vec![0.0; p]; p];
    for (j, rj) in recs.iter().enumerate() {
        let Some(t) = rj.event_time else { continue };
        let zj = design(rj);
        let pj = w(t, j);
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![vec![0.0; p]; p];
        for (i, ri) in recs.iter().enumerate() {
            if !in_risk_set(ri, t) {
                continue;
            }
            let zi = design(ri);
            let e = w(t, i) * zi.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp();
            s0 += e;
            for a in 0..p {
                s1[a] += e * zi[a];
                for b in 0..p {
                    s2[a][b] += e * zi[a] * zi[b];
                }
            }
        }
        let lin: f64 = zj.iter().zip(beta).map(|(a, b)| a * b).sum();
        ll += pj * (lin - s0.ln());
        for a in 0..p {
            grad[a] += pj * (zj[a] - s1[a] / s0);
            for b in 0..p {
                info[a][b] += pj * (s2[a][b] / s0 - s1[a] * s1[b] / (s0 * s0));
            }
        }
    }
    (ll, grad, info)
}

/// Newton iterations of the oracle for one or two coefficients; `None` if
/// the iterates run away.
pub fn oracle_fit(ds: &Dataset, w: &dyn Fn(f64, usize) -> f64) -> Option<Vec<f64>> {
    let p = ds.design_dim();
    assert!(p <= 2, "oracle solver handles at most two coefficients");
    let mut beta = vec![0.0; p];
    for _ in 0..200 {
        let (_, g, h) = oracle_cox(ds, &beta, w);
        let step = if p == 1 {
            vec![g[0] / h[0][0]]
        } else {
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            vec![
                (h[1][1] * g[0] - h[0][1] * g[1]) / det,
                (h[0][0] * g[1] - h[1][0] * g[0]) / det,
            ]
        };
        for a in 0..p {
            beta[a] += step[a];
        }
        if beta.iter().any(|b| !b.is_finite() || b.abs() > 20.0) {
            return None;
        }
        if g.iter().all(|x| x.abs() < 1e-13) || step.iter().all(|s| s.abs() < 1e-15) {
            return Some(beta);
        }
    }
    None
}

/// Random weights in `(0, 1]` keyed by event time and record, with the
/// matching table.
pub fn random_weights(rng: &mut ChaCha8Rng, ds: &Dataset) -> (HashMap<(u64, usize), f64>, PsWeightTable) {
    let mut map = HashMap::new();
    let table = PsWeightTable::build(ds, |t, i, is_event| {
        let p: f64 = rng.random_range(0.05..=1.0);
        map.insert((t.to_bits(), i), p);
        Ok((p, if is_event { 1 } else { 2 }))
    })
    .unwrap();
    (map, table)
}

/// Maximizer of a concave function by successively finer grids.
pub fn grid_argmax(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    let mut best = lo;
    while hi - lo > 1e-10 {
        let step = (hi - lo) / 200.0;
        let (mut bx, mut bv) = (lo, f64::NEG_INFINITY);
        for k in 0..=200 {
            let x = lo + step * k as f64;
            let v = f(x);
            if v > bv {
                bx = x;
                bv = v;
            }
        }
        best = bx;
        lo = bx - step;
        hi = bx + step;
    }
    best
}
