use std::collections::HashMap;

use ppsh_core::copula::{
    clamped_survival, copula_ps_weights, fit_assessment, fit_mple_pairs, pseudo_log_likelihood, CopulaFamily,
    CopulaKind, NestedClayton, PairedTimes, PseudoObservation,
};
use ppsh_core::estimators::km_survival;
use ppsh_core::simgen::{simulate_replicate, SimConfig};
use ppsh_core::survdata::{Arm, Dataset, SubjectRecord};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn family() -> impl Strategy<Value = CopulaFamily> {
    prop_oneof![
        (0.05f64..15.0).prop_map(|s| CopulaFamily::new(CopulaKind::Clayton, s).unwrap()),
        (1.0f64..8.0).prop_map(|s| CopulaFamily::new(CopulaKind::Gumbel, s).unwrap()),
        (-20.0f64..20.0)
            .prop_filter("nonzero", |s| s.abs() > 0.05)
            .prop_map(|s| CopulaFamily::new(CopulaKind::Frank, s).unwrap()),
    ]
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn frechet_bounds(fam in family(), u1 in 0.001f64..=1.0, u2 in 0.001f64..=1.0) {
        let c = fam.value(u1, u2).unwrap();
        prop_assert!(c >= (u1 + u2 - 1.0).max(0.0) - 1e-12);
        prop_assert!(c <= u1.min(u2) + 1e-12);
    }

    #[test]
    fn uniform_margins(fam in family(), u in 0.001f64..=1.0) {
        prop_assert!((fam.value(u, 1.0).unwrap() - u).abs() < 1e-12);
        prop_assert!((fam.value(1.0, u).unwrap() - u).abs() < 1e-12);
    }

    #[test]
    fn two_increasing(
        fam in family(),
        a in (0.01f64..0.99, 0.01f64..0.99),
        d in (0.0f64..0.5, 0.0f64..0.5),
    ) {
        let (a1, a2) = a;
        let (b1, b2) = ((a1 + d.0).min(1.0), (a2 + d.1).min(1.0));
        let c = |x, y| fam.value(x, y).unwrap();
        prop_assert!(c(b1, b2) - c(a1, b2) - c(b1, a2) + c(a1, a2) >= -1e-12);
    }

    #[test]
    fn partials_match_finite_differences(
        fam in family(),
        u1 in 0.05f64..0.95,
        u2 in 0.05f64..0.95,
    ) {
        let v = fam.eval(u1, u2).unwrap();
        let c = |x, y| fam.value(x, y).unwrap();
        let h = 1e-6;
        let d1 = (c(u1 + h, u2) - c(u1 - h, u2)) / (2.0 * h);
        let d2 = (c(u1, u2 + h) - c(u1, u2 - h)) / (2.0 * h);
        prop_assert!(rel_close(v.d_u1, d1, 1e-6), "d_u1 {} vs {d1}", v.d_u1);
        prop_assert!(rel_close(v.d_u2, d2, 1e-6), "d_u2 {} vs {d2}", v.d_u2);
        // density against a difference of the analytic first partial
        let g = 1e-5;
        let dd = (fam.eval(u1, u2 + g).unwrap().d_u1 - fam.eval(u1, u2 - g).unwrap().d_u1) / (2.0 * g);
        prop_assert!(rel_close(v.density, dd, 1e-6), "density {} vs {dd}", v.density);
    }

    #[test]
    fn kendall_tau_round_trips(fam in family()) {
        let tau = fam.kendall_tau();
        let back = CopulaFamily::from_kendall_tau(fam.kind, tau).unwrap();
        prop_assert!((back.varsigma - fam.varsigma).abs() <= 1e-10 * fam.varsigma.abs().max(1.0),
            "{:?}: {} vs {}", fam.kind, back.varsigma, fam.varsigma);
    }

    #[test]
    fn nested_partials_match_finite_differences(
        s in (0.0f64..6.0, 0.0f64..6.0),
        u in (0.05f64..0.95, 0.05f64..0.95, 0.05f64..0.95),
    ) {
        let nc = NestedClayton::new(s.0.min(s.1), s.0.max(s.1).max(0.01)).unwrap();
        let (u1, u2, u3) = u;
        let v = nc.eval(u1, u2, u3).unwrap();
        let c = |x, y| nc.eval(x, y, u3).unwrap().value;
        let h = 1e-6;
        let d1 = (c(u1 + h, u2) - c(u1 - h, u2)) / (2.0 * h);
        let d2 = (c(u1, u2 + h) - c(u1, u2 - h)) / (2.0 * h);
        prop_assert!(rel_close(v.d_u1, d1, 1e-6), "d_u1 {} vs {d1}", v.d_u1);
        prop_assert!(rel_close(v.d_u2, d2, 1e-6), "d_u2 {} vs {d2}", v.d_u2);
        let g = 1e-5;
        let dd = (nc.eval(u1, u2 + g, u3).unwrap().d_u1 - nc.eval(u1, u2 - g, u3).unwrap().d_u1)
            / (2.0 * g);
        prop_assert!(rel_close(v.d_u1u2, dd, 1e-6), "cross {} vs {dd}", v.d_u1u2);
    }

    #[test]
    fn nested_monotone_in_each_argument(
        s in (0.0f64..6.0, 0.0f64..6.0),
        u in (0.01f64..0.9, 0.01f64..0.9, 0.01f64..0.9),
        bump in 0.0f64..0.1,
    ) {
        let nc = NestedClayton::new(s.0.min(s.1), s.0.max(s.1)).unwrap();
        let (u1, u2, u3) = u;
        let base = nc.eval(u1, u2, u3).unwrap().value;
        prop_assert!(nc.eval(u1 + bump, u2, u3).unwrap().value >= base - 1e-14);
        prop_assert!(nc.eval(u1, u2 + bump, u3).unwrap().value >= base - 1e-14);
        prop_assert!(nc.eval(u1, u2, u3 + bump).unwrap().value >= base - 1e-14);
    }

    #[test]
    fn nested_reduces_to_bivariate_and_exchangeable(
        s in (0.01f64..6.0, 0.0f64..6.0),
        u in (0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0),
    ) {
        let (s0, s1) = (s.0, s.0 + s.1);
        let (u1, u2, u3) = u;
        let nc = NestedClayton::new(s0, s1).unwrap();
        let biv = CopulaFamily::new(CopulaKind::Clayton, s0).unwrap().value(u1, u2).unwrap();
        prop_assert!((nc.eval(u1, u2, 1.0).unwrap().value - biv).abs() < 1e-12);

        let eq = NestedClayton::new(s0, s0).unwrap().eval(u1, u2, u3).unwrap().value;
        let closed = (u1.powf(-s0) + u2.powf(-s0) + u3.powf(-s0) - 2.0).powf(-1.0 / s0);
        prop_assert!((eq - closed).abs() < 1e-12 * closed.max(1e-3));
    }
}

#[test]
fn families_approach_independence() {
    for (kind, s) in [
        (CopulaKind::Clayton, 1e-6),
        (CopulaKind::Gumbel, 1.0 + 1e-6),
        (CopulaKind::Frank, 1e-6),
        (CopulaKind::Frank, -1e-6),
    ] {
        let fam = CopulaFamily::new(kind, s).unwrap();
        for u1 in [0.05, 0.3, 0.7, 0.99] {
            for u2 in [0.02, 0.5, 0.9] {
                let c = fam.value(u1, u2).unwrap();
                assert!((c - u1 * u2).abs() < 1e-4, "{kind:?} {s}: {c} vs {}", u1 * u2);
            }
        }
    }
}

#[test]
fn published_tau_values() {
    let tau = |k, s| CopulaFamily::new(k, s).unwrap().kendall_tau();
    assert!((tau(CopulaKind::Clayton, 2.0) - 0.5).abs() < 1e-14);
    assert!((tau(CopulaKind::Gumbel, 2.0) - 0.5).abs() < 1e-14);
    assert!((tau(CopulaKind::Clayton, 1.11) - 0.36).abs() < 0.005);
    assert!(tau(CopulaKind::Frank, 1e-4).abs() < 1e-4);
    assert!(tau(CopulaKind::Frank, 5.0) > 0.0 && tau(CopulaKind::Frank, -5.0) < 0.0);
}

#[test]
fn fully_censored_pair_contributes_copula_value() {
    let fam = CopulaFamily::new(CopulaKind::Gumbel, 1.7).unwrap();
    let obs = [PseudoObservation {
        u1: 0.4,
        u2: 0.8,
        delta1: false,
        delta2: false,
    }];
    let ll = pseudo_log_likelihood(&fam, &obs).unwrap();
    assert!((ll - fam.value(0.4, 0.8).unwrap().ln()).abs() < 1e-14);
}

fn small_trial() -> Dataset {
    simulate_replicate(&SimConfig { n: 120, ..SimConfig::default() }, 4).unwrap()
}

#[test]
fn independence_case_four_equals_counterfactual_survival() {
    let ds = small_trial();
    let death_curve = |arm: Arm| {
        let data: Vec<(f64, bool)> = ds
            .records()
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| (r.followup_time, r.died()))
            .collect();
        (km_survival(&data).unwrap(), data.len())
    };
    let curves = [death_curve(Arm::Control), death_curve(Arm::Treated)];
    let w0 = copula_ps_weights(&ds, &NestedClayton::new(0.0, 0.0).unwrap()).unwrap();
    let tiny = copula_ps_weights(&ds, &NestedClayton::new(1e-7, 1e-7).unwrap()).unwrap();
    let mut case4 = 0;
    for (a, b) in w0.sets.iter().zip(&tiny.sets) {
        for k in 0..a.members.len() {
            assert!((a.weights[k] - b.weights[k]).abs() < 1e-4);
            if a.cases[k] == 4 {
                let (curve, n) = &curves[ds.records()[a.members[k]].arm.other().index()];
                let u3 = clamped_survival(curve, a.time, *n);
                assert!((a.weights[k] - u3).abs() < 1e-12, "{} vs {u3}", a.weights[k]);
                case4 += 1;
            }
        }
    }
    assert!(case4 > 0);
}

#[test]
fn no_counterfactual_deaths_gives_unit_weights() {
    // treated arm never dies, so u3 = 1 for every control subject
    let ds = Dataset::new(vec![
        SubjectRecord::new("c1", Arm::Control, 3.0, Some(1.0), true),
        SubjectRecord::new("c2", Arm::Control, 2.0, Some(1.5), false),
        SubjectRecord::new("c3", Arm::Control, 2.5, None, true),
        SubjectRecord::new("c4", Arm::Control, 4.0, None, false),
        SubjectRecord::new("t1", Arm::Treated, 3.0, Some(2.0), false),
        SubjectRecord::new("t2", Arm::Treated, 4.0, None, false),
    ])
    .unwrap();
    let w = copula_ps_weights(&ds, &NestedClayton::new(1.5, 4.0).unwrap()).unwrap();
    let mut seen = 0;
    for set in &w.sets {
        for (k, &i) in set.members.iter().enumerate() {
            if ds.records()[i].arm == Arm::Control {
                assert!((set.weights[k] - 1.0).abs() < 1e-12, "case {}", set.cases[k]);
                seen += 1;
            }
        }
    }
    assert!(seen >= 4);
}

// With outer dependence the weight also moves with the subject's own-arm
// event survival, and rises when that drops; it is monotone wherever that
// curve is flat, and everywhere when the outer parameter is zero.
#[test]
fn copula_weights_non_increasing_per_subject() {
    for r in 0..5 {
        let ds = simulate_replicate(&SimConfig { n: 120, ..SimConfig::default() }, r).unwrap();
        let event_curve = |arm: Arm| {
            let data: Vec<(f64, bool)> = ds
                .records()
                .iter()
                .filter(|rec| rec.arm == arm)
                .map(|rec| rec.first_event())
                .collect();
            km_survival(&data).unwrap()
        };
        let curves = [event_curve(Arm::Control), event_curve(Arm::Treated)];
        for (s0, s1) in [(0.0, 0.0), (0.0, 3.0), (0.5, 2.0), (2.0, 8.0)] {
            let w = copula_ps_weights(&ds, &NestedClayton::new(s0, s1).unwrap()).unwrap();
            let mut last: HashMap<usize, (f64, f64)> = HashMap::new();
            for set in &w.sets {
                for (k, &i) in set.members.iter().enumerate() {
                    if set.event_positions.contains(&k) {
                        continue;
                    }
                    let p = set.weights[k];
                    let own = curves[ds.records()[i].arm.index()].midpoint(set.time);
                    if let Some((prev_own, prev)) = last.insert(i, (own, p)) {
                        if s0 == 0.0 || own == prev_own {
                            assert!(p <= prev + 1e-12, "({s0}, {s1}): {prev} -> {p} at {}", set.time);
                        }
                    }
                }
            }
        }
    }
}

fn pairs_from(e: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    e.iter().copied().zip(y.iter().copied()).collect()
}

fn both_observed(pairs: &[(f64, f64)]) -> Dataset {
    Dataset::new(
        pairs
            .iter()
            .enumerate()
            .map(|(k, &(e, y))| {
                let arm = if k % 2 == 0 { Arm::Control } else { Arm::Treated };
                SubjectRecord::new(format!("p{k}"), arm, y, Some(e), true)
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn comonotone_toy_matches_upper_limit() {
    let n = 50;
    let e: Vec<f64> = (1..=n).map(|k| k as f64).collect();
    let y: Vec<f64> = (1..=n).map(|k| k as f64 + 0.5).collect();
    let ds = both_observed(&pairs_from(&e, &y));
    let upper = CopulaFamily::new(CopulaKind::Clayton, 500.0).unwrap();
    let rows = fit_assessment(&ds, &upper).unwrap();
    assert_eq!(rows.len(), n);
    for row in rows {
        assert!(
            (row.copula_joint - row.empirical_joint).abs() <= 1.0 / n as f64,
            "{} vs {}",
            row.copula_joint,
            row.empirical_joint
        );
    }
}

#[test]
fn single_subject_subgroup_has_zero_joint() {
    let ds = Dataset::new(vec![
        SubjectRecord::new("a", Arm::Control, 5.0, Some(4.0), true),
        SubjectRecord::new("b", Arm::Treated, 2.0, Some(1.0), false),
        SubjectRecord::new("c", Arm::Control, 3.0, None, false),
    ])
    .unwrap();
    let rows = fit_assessment(&ds, &CopulaFamily::independence(CopulaKind::Clayton)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].subject_id, "a");
    assert_eq!(rows[0].empirical_joint, 0.0);

    let none = Dataset::new(vec![
        SubjectRecord::new("b", Arm::Treated, 2.0, Some(1.0), false),
        SubjectRecord::new("c", Arm::Control, 3.0, None, false),
    ])
    .unwrap();
    assert!(fit_assessment(&none, &CopulaFamily::independence(CopulaKind::Clayton)).is_err());
}

#[test]
fn independent_data_fits_near_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pairs: Vec<PairedTimes> = (0..2000)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            PairedTimes {
                e: -u.ln(),
                delta1: true,
                y: -v.ln(),
                delta2: true,
            }
        })
        .collect();
    let fit = fit_mple_pairs(&pairs, CopulaKind::Clayton).unwrap();
    assert!(fit.varsigma.abs() < 0.1, "{}", fit.varsigma);

    let rows_ds = both_observed(
        &pairs
            .iter()
            .filter(|p| p.e <= p.y)
            .take(300)
            .map(|p| (p.e, p.y))
            .collect::<Vec<_>>(),
    );
    let near = CopulaFamily::new(CopulaKind::Clayton, 1e-6).unwrap();
    for row in fit_assessment(&rows_ds, &near).unwrap() {
        let product = row.empirical_e * row.empirical_y;
        assert!((row.copula_joint - product).abs() < 1e-4);
    }
}
