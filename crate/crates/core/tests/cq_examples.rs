mod common;

use cqkit::config::Settings;
use cqkit::cq::{check_lcq, check_nnamcq, probe_rcpld, probe_rcrcq, SamplingPlan, Verdict};
use cqkit::linalg::family_rank;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn example_4_1_nnamcq_fails() {
    let sys = common::example_4_1();
    let r = check_nnamcq(&sys, &common::X_4_1, &Settings::default()).unwrap();
    assert_eq!(r.verdict, Verdict::Fails);
    let c = r.certificate.unwrap();
    assert!(norm(&c.combination) <= 1e-8);
    assert!(c.lambda_g[0] > 0.0);
    assert!(c.l1_norm() > 0.0);
    // scaled to λ = 1 this is μ = −1, η* = (1, 0, 1, 1)
    let lam = c.lambda_g[0];
    assert!((c.lambda_h[0] / lam + 1.0).abs() < 1e-9);
    for (e, want) in c.eta.iter().zip([1.0, 0.0, 1.0, 1.0]) {
        assert!((e / lam - want).abs() < 1e-9);
    }
}

#[test]
fn example_4_1_lcq_fails() {
    assert_eq!(check_lcq(&common::example_4_1()).verdict, Verdict::Fails);
}

#[test]
fn example_4_1_rcrcq_witness() {
    let sys = common::example_4_1();
    let r = probe_rcrcq(&sys, &common::X_4_1, &SamplingPlan::default(), &Settings::default()).unwrap();
    assert_eq!(r.verdict, Verdict::ViolatedWithWitness);
    let w = r.witness.unwrap();
    assert_eq!(w.limit_rank, 2);
    assert_eq!(family_rank(&w.limit_family, 4, 1e-8).rank, 2);
    for st in &w.sequence {
        assert_eq!(st.rank, 3);
        assert_eq!(family_rank(&st.family, 4, 1e-8).rank, 3);
    }
}

#[test]
fn example_4_1_rcpld_no_violation() {
    let sys = common::example_4_1();
    let r = probe_rcpld(&sys, &common::X_4_1, &SamplingPlan::default(), &Settings::default()).unwrap();
    assert_eq!(r.verdict, Verdict::NoViolationFound, "{:?}", r.witness);
}

use cqkit::bilevel::{build_combined_program, ValueConfig};
use cqkit::cq::{check_fullrank, CqReport};
use cqkit::system::is_feasible;

fn rcpld_default(sys: &cqkit::system::FeasibilitySystem, x: &[f64]) -> CqReport {
    probe_rcpld(sys, x, &SamplingPlan::default(), &Settings::default()).unwrap()
}

#[test]
fn rcpld_persists_near_example_4_1() {
    let sys = common::example_4_1();
    let s = Settings::default();
    let mut checked = 0;
    for k in 1..=10 {
        let t = if k % 2 == 0 { 1e-4 * k as f64 } else { -1e-4 * k as f64 };
        let p = [0.0, 0.0, 0.5 + t / 2f64.sqrt(), 0.5 - t / 2f64.sqrt()];
        assert!(is_feasible(&sys, &p, s.feas_tol).unwrap().feasible, "{p:?}");
        let r = rcpld_default(&sys, &p);
        assert!(!r.verdict.is_violation(), "{p:?}: {:?}", r.witness);
        checked += 1;
    }
    assert_eq!(checked, 10);
}

#[test]
fn implication_chain_on_examples() {
    let s = Settings::default();
    let cp1 = build_combined_program(&common::example_5_1(), &ValueConfig::default()).unwrap();
    let cp2 = build_combined_program(&common::example_5_2(), &ValueConfig::default()).unwrap();
    let mut cases = vec![(common::example_4_1(), common::X_4_1.to_vec())];
    cases.push((cp1.system.clone(), vec![-2.0, -2.0, 9.0, 0.0]));
    cases.push((cp2.system.clone(), common::reps_5_2(0.25)[0].to_vec()));
    for (sys, x) in cases {
        let lcq = check_lcq(&sys).verdict;
        let full = check_fullrank(&sys, &x, &s).unwrap().verdict;
        let rcrcq = probe_rcrcq(&sys, &x, &SamplingPlan::default(), &s).unwrap().verdict;
        let rcpld = rcpld_default(&sys, &x).verdict;
        if lcq == Verdict::Holds {
            assert!(!rcrcq.is_violation());
        }
        if rcrcq == Verdict::NoViolationFound {
            assert!(!rcpld.is_violation());
        }
        if full == Verdict::Holds {
            assert!(!rcpld.is_violation());
        }
    }
}

#[test]
fn combined_programs_fail_nnamcq() {
    let s = Settings::default();
    let cp = build_combined_program(&common::example_5_2(), &ValueConfig::default()).unwrap();
    for a in [-0.5, 0.25] {
        for p in common::reps_5_2(a) {
            let r = check_nnamcq(&cp.system, &p, &s).unwrap();
            assert_eq!(r.verdict, Verdict::Fails, "{p:?}");
            assert!(norm(&r.certificate.unwrap().combination) <= 1e-8);
        }
    }
}

#[test]
fn rcrcq_holds_on_example_5_2() {
    let s = Settings::default();
    let cp = build_combined_program(&common::example_5_2(), &ValueConfig::default()).unwrap();
    let plan = SamplingPlan {
        short_circuit: false,
        ..SamplingPlan::default()
    };
    for a in [-0.5, 0.25] {
        let r = probe_rcrcq(&cp.system, &common::reps_5_2(a)[0], &plan, &s).unwrap();
        assert_eq!(r.verdict, Verdict::NoViolationFound, "{:?}", r.witness);
    }
}

#[test]
fn fullrank_on_example_5_2_has_rank_four() {
    // rank 4 matches J′, but the CP has d = 5 variables
    let cp = build_combined_program(&common::example_5_2(), &ValueConfig::default()).unwrap();
    let r = check_fullrank(&cp.system, &common::reps_5_2(0.25)[0], &Settings::default()).unwrap();
    assert_eq!(r.rank.unwrap().rank, 4);
    assert_eq!(r.target_rank, Some(5));
    assert_ne!(r.verdict, Verdict::Holds);
}

#[test]
fn affine_corpus_chain() {
    let s = Settings::default();
    let plan = SamplingPlan {
        short_circuit: false,
        levels: 4,
        points_per_radius: 8,
        ..SamplingPlan::default()
    };
    let mut lcq_count = 0;
    for (sys, x) in common::affine_corpus(11, 20) {
        assert!(is_feasible(&sys, &x, 1e-12).unwrap().feasible);
        if check_lcq(&sys).verdict == Verdict::Holds {
            lcq_count += 1;
            let short = SamplingPlan::default();
            assert!(!probe_rcrcq(&sys, &x, &short, &s).unwrap().verdict.is_violation());
            assert!(!probe_rcpld(&sys, &x, &short, &s).unwrap().verdict.is_violation());
        }
        if check_fullrank(&sys, &x, &s).unwrap().verdict == Verdict::Holds {
            let r = probe_rcpld(&sys, &x, &plan, &s).unwrap();
            assert!(!r.verdict.is_violation(), "{x:?}: {:?}", r.witness);
        }
    }
    assert_eq!(lcq_count, 20);
}

#[test]
fn witness_is_a_payload() {
    let sys = common::example_4_1();
    let r = probe_rcrcq(&sys, &common::X_4_1, &SamplingPlan::default(), &Settings::default()).unwrap();
    let w = r.witness.as_ref().unwrap();
    assert!(!w.sequence.is_empty());
    let radii: Vec<f64> = w.sequence.iter().map(|st| st.radius).collect();
    assert!(radii.windows(2).all(|p| p[1] < p[0]));
}
