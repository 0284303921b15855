mod common;

use std::time::Instant;

use cqkit::bilevel::{build_combined_program, cp_penalty_objective, phi_cp, ValueConfig};
use cqkit::config::Settings;
use cqkit::cq::{check_fullrank, check_nnamcq, Verdict};
use cqkit::stationarity::*;

#[test]
fn mstationary_at_both_points_5_1() {
    let cp = build_combined_program(&common::example_5_1(), &ValueConfig::default()).unwrap();
    let s = Settings::default();
    for p in [[-2.0, -2.0, 9.0, 0.0], [-1.0, 1.0, 0.0, 0.0]] {
        let r = check_mstationarity(&cp.system, &cp.objective, &p, &s).unwrap();
        assert_eq!(r.verdict, StationarityVerdict::Stationary, "{p:?}");
        assert!(r.residual.unwrap() <= 1e-8);
    }
}

#[test]
fn mstationary_multipliers_5_1() {
    let cp = build_combined_program(&common::example_5_1(), &ValueConfig::default()).unwrap();
    let r = check_mstationarity(&cp.system, &cp.objective, &[-2.0, -2.0, 9.0, 0.0], &Settings::default()).unwrap();
    let m = r.multipliers.unwrap();
    assert!(m.lambda_g.iter().all(|l| *l >= 0.0));
    assert!(m.lambda_g.iter().chain(&m.lambda_h).all(|l| l.is_finite() && l.abs() <= MULTIPLIER_BOX));
}

#[test]
fn infeasible_point_is_rejected() {
    let cp = build_combined_program(&common::example_5_1(), &ValueConfig::default()).unwrap();
    assert!(check_mstationarity(&cp.system, &cp.objective, &[0.5, 1.0, 0.0, 0.0], &Settings::default()).is_err());
}

#[test]
fn nnamcq_fails_but_fullrank_holds_5_1() {
    let cp = build_combined_program(&common::example_5_1(), &ValueConfig::default()).unwrap();
    let s = Settings::default();
    for p in [[-2.0, -2.0, 9.0, 0.0], [-1.0, 1.0, 0.0, 0.0]] {
        assert_eq!(check_nnamcq(&cp.system, &p, &s).unwrap().verdict, Verdict::Fails);
    }
    assert_eq!(check_fullrank(&cp.system, &[-2.0, -2.0, 9.0, 0.0], &s).unwrap().verdict, Verdict::Holds);
}

#[test]
fn exact_penalty_objective_agrees_with_phi_cp() {
    let cp = build_combined_program(&common::example_5_1(), &ValueConfig::default()).unwrap();
    let obj = cp_penalty_objective(&cp, 10.0);
    for p in [[-2.0, -2.0, 8.0, 0.0], [-2.0, -2.1, 9.0, 0.0], [0.3, 0.2, 1.0, 2.0]] {
        let want = p[0] + p[1] + 10.0 * phi_cp(&cp, &p).unwrap();
        assert!((obj.eval(&p).unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn penalty_stays_near_solution_5_1() {
    let cp = build_combined_program(&common::example_5_1(), &ValueConfig::default()).unwrap();
    let obj = cp_penalty_objective(&cp, 100.0);
    let target = [-2.0, -2.0, 9.0, 0.0];
    for x0 in [target, [-2.0004, -1.9997, 9.0003, 0.0002]] {
        let t = Instant::now();
        let r = solve_penalized(&cp.system, &obj, &x0, &PenaltyOptions::default(), &Settings::default()).unwrap();
        eprintln!("{:?} {:?}", r.point, t.elapsed());
        for st in &r.trace {
            eprintln!("k={} phi0={:e} evals={}", st.k, st.phi0, st.evaluations);
        }
        let dist = r.point.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist <= 1e-3, "{:?}", r.point);
        assert!(r.monotone);
    }
}
