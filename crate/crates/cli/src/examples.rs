//! The shipped examples and their stored expectations.

use cqkit::bilevel::{
    danskin_generators, matrix_jprime, matrix_jstar, matrix_sj, value_function, CombinedProgram, JprimeChoice,
};
use cqkit::config::Settings;
use cqkit::cq::{check_fullrank, check_nnamcq, probe_rcrcq, CqReport, SamplingPlan};
use cqkit::stationarity::check_mstationarity;
use cqkit::system::{active_index_sets, is_feasible};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::commands::{cq_bundle, plan_for, settings_for, Output};
use crate::problem::{load, Anchor, Loaded, ProblemFile};
use crate::report::{label, AnalysisReport, AnchorResult, Comparison, Payload, Reproduction};
use crate::{CliError, Common, ExampleId};

pub fn problem_text(id: ExampleId) -> &'static str {
    match id {
        ExampleId::E41 => include_str!("../data/example-4.1.json"),
        ExampleId::E51 => include_str!("../data/example-5.1.json"),
        ExampleId::E52 => include_str!("../data/example-5.2.json"),
    }
}

fn expected_text(id: ExampleId) -> &'static str {
    match id {
        ExampleId::E41 => include_str!("../data/expected-4.1.json"),
        ExampleId::E51 => include_str!("../data/expected-5.1.json"),
        ExampleId::E52 => include_str!("../data/expected-5.2.json"),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Expectation {
    key: String,
    value: Value,
    tol: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpectedFile {
    example: String,
    expectations: Vec<Expectation>,
}

/// Numbers agree within `tol`; everything else must be equal.
pub fn matches(observed: &Value, expected: &Value, tol: f64) -> bool {
    match (observed, expected) {
        (Value::Number(a), Value::Number(b)) => match (a.as_f64(), b.as_f64()) {
            (Some(a), Some(b)) => (a - b).abs() <= tol,
            _ => false,
        },
        (Value::Array(a), Value::Array(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| matches(x, y, tol)),
        (Value::Object(a), Value::Object(b)) => {
            a.len() == b.len() && a.iter().all(|(k, x)| b.get(k).is_some_and(|y| matches(x, y, tol)))
        }
        _ => observed == expected,
    }
}

type Observations = Vec<(String, Value)>;

fn internal<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

fn find<'a>(anchors: &'a [Anchor], name: &str) -> Result<&'a Anchor, CliError> {
    anchors
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| CliError::Internal(format!("example has no anchor `{name}`")))
}

fn combined(loaded: &Loaded) -> Result<&CombinedProgram, CliError> {
    loaded
        .combined
        .as_ref()
        .ok_or_else(|| CliError::Internal("example is not a bilevel program".into()))
}

fn result(a: &Anchor, payload: Payload) -> AnchorResult {
    AnchorResult {
        anchor: a.name.clone(),
        point: a.point.clone(),
        skipped: None,
        payload: Some(payload),
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn observe_4_1(
    loaded: &Loaded,
    plan: &SamplingPlan,
    s: &Settings,
    obs: &mut Observations,
) -> Result<Vec<AnchorResult>, CliError> {
    let sys = &loaded.system;
    let a = find(&loaded.anchors, "x*")?;
    let x = &a.point;
    let feas = is_feasible(sys, x, s.feas_tol).map_err(internal)?;
    obs.push(("x*.feasible".into(), json!(feas.feasible)));
    let sets = active_index_sets(sys, x, s.feas_tol).map_err(internal)?;
    obs.push(("x*.active_g".into(), json!(sets.i_g)));
    let payload = cq_bundle(sys, x, plan, s)?;
    if let Payload::CheckCq { reports, .. } = &payload {
        for r in reports {
            let name = label(&r.check);
            obs.push((format!("x*.{name}.verdict"), json!(label(&r.verdict))));
            if let Some(c) = &r.certificate {
                let res = c.combination.iter().map(|v| v * v).sum::<f64>().sqrt();
                obs.push((format!("x*.{name}.certificate_residual"), json!(res)));
            }
            if let Some(w) = &r.witness {
                let mut ranks: Vec<usize> = w.sequence.iter().map(|st| st.rank).collect();
                ranks.dedup();
                obs.push((format!("x*.{name}.witness_sequence_ranks"), json!(ranks)));
                obs.push((format!("x*.{name}.witness_limit_rank"), json!(w.limit_rank)));
            }
        }
    }
    Ok(vec![result(a, payload)])
}

fn observe_5_1(loaded: &Loaded, s: &Settings, obs: &mut Observations) -> Result<Vec<AnchorResult>, CliError> {
    let cp = combined(loaded)?;
    let cfg = *cp.oracle.config();
    for (key, x) in [("-3", -3.0), ("-2", -2.0), ("0", 0.0), ("1", 1.0), ("1.5", 1.5), ("2", 2.0)] {
        let v = value_function(&cp.program, &[x], &cfg).map_err(internal)?;
        obs.push((format!("V({key})"), json!(v.value)));
    }
    let smp = value_function(&cp.program, &[-2.0], &cfg).map_err(internal)?;
    obs.push(("S(-2)".into(), json!(sorted(smp.minimizers.iter().map(|y| y[0]).collect()))));
    let p1 = find(&loaded.anchors, "p1")?;
    let p2 = find(&loaded.anchors, "p2")?;
    let sj = matrix_sj(cp, &p1.point, s.feas_tol, s.rank_tol).map_err(internal)?;
    let js1 = matrix_jstar(cp, &p1.point, s.feas_tol, s.rank_tol).map_err(internal)?;
    let js2 = matrix_jstar(cp, &p2.point, s.feas_tol, s.rank_tol).map_err(internal)?;
    for (a, m) in [(p1, &js1), (p2, &js2)] {
        let sets = &m.index_sets;
        obs.push((
            format!("{}.index_sets", a.name),
            json!({ "i_star": sets.i_star, "j_star": sets.j_star, "k_star": sets.k_star }),
        ));
    }
    obs.push(("p1.sj.rank".into(), json!(sj.rank.rank)));
    obs.push(("p1.jstar.rank".into(), json!(js1.rank.rank)));
    obs.push(("p2.jstar.rank".into(), json!(js2.rank.rank)));
    let mut results = Vec::new();
    for a in [p1, p2] {
        let r = check_mstationarity(&cp.system, &cp.objective, &a.point, s).map_err(internal)?;
        obs.push((format!("{}.stationarity", a.name), json!(label(&r.verdict))));
        obs.push((format!("{}.stationarity_residual", a.name), json!(r.residual)));
        results.push(result(a, Payload::Stationarity { report: r }));
    }
    for a in [p1, p2] {
        let r = check_nnamcq(&cp.system, &a.point, s).map_err(internal)?;
        obs.push((format!("{}.nnamcq.verdict", a.name), json!(label(&r.verdict))));
    }
    let full = check_fullrank(&cp.system, &p1.point, s).map_err(internal)?;
    obs.push(("p1.fullrank.verdict".into(), json!(label(&full.verdict))));
    Ok(results)
}

fn observe_5_2(
    loaded: &Loaded,
    plan: &SamplingPlan,
    s: &Settings,
    obs: &mut Observations,
) -> Result<Vec<AnchorResult>, CliError> {
    let cp = combined(loaded)?;
    let cfg = *cp.oracle.config();
    for (key, x) in [("0.3,0.3", [0.3, 0.3]), ("1,0", [1.0, 0.0]), ("0,1", [0.0, 1.0]), ("-0.5,0.7", [-0.5, 0.7])] {
        let v = value_function(&cp.program, &x, &cfg).map_err(internal)?;
        obs.push((format!("V({key})"), json!(v.value)));
    }
    let mut gens = danskin_generators(&cp.program, &[0.3, 0.3], &cfg).map_err(internal)?;
    gens.sort_by(|p, q| p[0].total_cmp(&q[0]));
    obs.push(("danskin(0.3,0.3)".into(), json!(gens)));

    let mut ranks = Vec::new();
    for a in &loaded.anchors {
        let w = cp.oracle.generators_x(&a.point[..2]).map_err(internal)?;
        for g in &w.0 {
            for alpha in [false, true] {
                let m = matrix_jprime(cp, &a.point, alpha, g, &JprimeChoice::default(), s.feas_tol, s.rank_tol)
                    .map_err(internal)?;
                ranks.push(m.rank.rank);
            }
        }
    }
    obs.push(("jprime.cases".into(), json!(ranks.len())));
    obs.push(("jprime.min_rank".into(), json!(ranks.iter().min())));
    obs.push(("jprime.max_rank".into(), json!(ranks.iter().max())));

    let mut results = Vec::new();
    for a in &loaded.anchors {
        let r = check_nnamcq(&cp.system, &a.point, s).map_err(internal)?;
        obs.push((format!("{}.nnamcq.verdict", a.name), json!(label(&r.verdict))));
        let mut reports: Vec<CqReport> = vec![r];
        if a.name == "diagonal" {
            // the short-circuit would answer from the full-rank check alone
            let probe_plan = SamplingPlan {
                short_circuit: false,
                ..plan.clone()
            };
            let rc = probe_rcrcq(&cp.system, &a.point, &probe_plan, s).map_err(internal)?;
            obs.push(("diagonal.rcrcq.verdict".into(), json!(label(&rc.verdict))));
            let full = check_fullrank(&cp.system, &a.point, s).map_err(internal)?;
            obs.push(("diagonal.fullrank.rank".into(), json!(full.rank.as_ref().map(|r| r.rank))));
            obs.push(("diagonal.fullrank.target".into(), json!(full.target_rank)));
            reports.push(full);
            reports.push(rc);
        }
        results.push(result(
            a,
            Payload::CheckCq {
                reports,
                implications: vec![],
            },
        ));
    }
    Ok(results)
}

/// Runs an example, compares against its stored expectations and reports
/// the number of mismatches.
pub fn reproduce(id: ExampleId, common: &Common, command: Vec<String>) -> Result<Output, CliError> {
    let source = format!("example-{}.json", id.label());
    let pf = ProblemFile::parse(problem_text(id), &source)?;
    let expected: ExpectedFile = serde_json::from_str(expected_text(id)).map_err(internal)?;
    if expected.example != id.label() {
        return Err(CliError::Internal(format!("expectations are for example {}", expected.example)));
    }
    let loaded = load(&pf)?;
    let s = settings_for(&pf, common)?;
    let plan = plan_for(common)?;
    let mut obs = Observations::new();
    let results = match id {
        ExampleId::E41 => observe_4_1(&loaded, &plan, &s, &mut obs)?,
        ExampleId::E51 => observe_5_1(&loaded, &s, &mut obs)?,
        ExampleId::E52 => observe_5_2(&loaded, &plan, &s, &mut obs)?,
    };
    let comparisons: Vec<Comparison> = expected
        .expectations
        .into_iter()
        .map(|e| {
            let observed = obs
                .iter()
                .find(|(k, _)| *k == e.key)
                .map_or(Value::Null, |(_, v)| v.clone());
            Comparison {
                matches: matches(&observed, &e.value, e.tol),
                key: e.key,
                observed,
                expected: e.value,
                tol: e.tol,
            }
        })
        .collect();
    let mismatches = comparisons.iter().filter(|c| !c.matches).count();
    let report = AnalysisReport {
        tool: "cqkit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command,
        problem: pf.name.clone(),
        settings: s,
        plan: matches!(id, ExampleId::E41 | ExampleId::E52).then_some(plan),
        results,
        reproduction: Some(Reproduction {
            example: id.label().into(),
            comparisons,
            mismatches,
        }),
        warnings: vec![],
    };
    Ok(Output {
        report: Some(report),
        raw: None,
        warnings: vec![],
        mismatches,
    })
}
