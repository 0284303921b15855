//! Subcommand implementations.

use std::path::Path;

use cqkit::config::Settings;
use cqkit::cq::{check_fullrank, check_lcq, check_nnamcq, probe_rcpld, probe_rcrcq, CqReport, SamplingPlan, Verdict};
use cqkit::errorbound::{estimate_error_bound_modulus, residual_expr, DistanceMethod, Residual};
use cqkit::stationarity::{check_mstationarity, solve_penalized, PenaltyOptions};
use cqkit::system::{is_feasible, FeasibilitySystem};
use cqkit::vcalc::Norm;

use crate::examples;
use crate::problem::{load, reformulate, Anchor, ProblemFile};
use crate::report::{AnalysisReport, AnchorResult, Implication, Payload};
use crate::{Cli, CliError, Command, Common};

/// What a command produced, before anything is written.
#[derive(Debug)]
pub struct Output {
    pub report: Option<AnalysisReport>,
    /// Verbatim output (the reformulated problem file).
    pub raw: Option<String>,
    pub warnings: Vec<String>,
    pub mismatches: usize,
}

impl Output {
    pub fn exit_code(&self) -> i32 {
        if self.mismatches > 0 {
            CliError::Mismatch(self.mismatches).exit_code()
        } else {
            0
        }
    }

    pub fn emit(&self, common: &Common) -> Result<(), CliError> {
        let write = |path: &Path, content: &str| {
            std::fs::write(path, content).map_err(|e| CliError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        };
        if let Some(raw) = &self.raw {
            match &common.out {
                Some(p) => write(p, raw)?,
                None => print!("{raw}"),
            }
        }
        if let Some(r) = &self.report {
            let text = r.to_text();
            if let Some(prefix) = &common.out {
                write(&prefix.with_extension("json"), &r.to_json())?;
                write(&prefix.with_extension("txt"), &text)?;
            }
            print!("{text}");
        }
        if self.mismatches > 0 {
            eprintln!("error: {}", CliError::Mismatch(self.mismatches));
        }
        Ok(())
    }
}

pub fn read_problem(path: &Path) -> Result<ProblemFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    ProblemFile::parse(&text, &path.display().to_string())
}

fn flag_err(flag: &str, message: impl Into<String>) -> CliError {
    CliError::Parse {
        location: format!("--{flag}"),
        message: message.into(),
    }
}

fn parse_list(flag: &str, s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| flag_err(flag, format!("`{p}` is not a finite number")))
        })
        .collect()
}

pub fn settings_for(file: &ProblemFile, common: &Common) -> Result<Settings, CliError> {
    let mut s = file.settings(Settings::default());
    if let Some(t) = common.tol {
        if !(t.is_finite() && t >= 0.0) {
            return Err(flag_err("tol", "must be a nonnegative number"));
        }
        s.feas_tol = t;
    }
    if let Some(c) = common.branch_cap {
        s.branch_cap = c;
    }
    Ok(s)
}

pub fn plan_for(common: &Common) -> Result<SamplingPlan, CliError> {
    let mut plan = SamplingPlan::default();
    if let Some(r) = &common.radii {
        let v = parse_list("radii", r)?;
        if v.len() != 3 || v[0] <= 0.0 || !(0.0 < v[1] && v[1] < 1.0) || v[2] < 0.0 || v[2].fract() != 0.0 {
            return Err(flag_err("radii", "expected r0,rho,levels with r0 > 0, 0 < rho < 1, integer levels"));
        }
        plan.r0 = v[0];
        plan.rho = v[1];
        plan.levels = v[2] as usize;
    }
    if let Some(n) = common.points_per_radius {
        plan.points_per_radius = n;
    }
    if let Some(seed) = common.seed {
        plan.seed = seed;
    }
    Ok(plan)
}

fn select_anchors(anchors: &[Anchor], common: &Common, dim: usize) -> Result<Vec<Anchor>, CliError> {
    if let Some(p) = &common.point {
        let point = parse_list("point", p)?;
        if point.len() != dim {
            return Err(flag_err("point", format!("expected {dim} coordinates, found {}", point.len())));
        }
        return Ok(vec![Anchor {
            name: "point".into(),
            point,
        }]);
    }
    let chosen: Vec<Anchor> = match &common.anchor {
        Some(name) => anchors.iter().filter(|a| &a.name == name).cloned().collect(),
        None => anchors.to_vec(),
    };
    if chosen.is_empty() {
        return Err(CliError::Parse {
            location: "anchors".into(),
            message: match &common.anchor {
                Some(n) => format!("no anchor named `{n}`"),
                None => "the file declares no anchors; pass --point".into(),
            },
        });
    }
    Ok(chosen)
}

fn internal<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

/// `None` when `x` is feasible, otherwise the reason it is skipped.
fn infeasible_reason(sys: &FeasibilitySystem, x: &[f64], s: &Settings) -> Result<Option<String>, CliError> {
    match is_feasible(sys, x, s.feas_tol) {
        Ok(r) if r.feasible => Ok(None),
        Ok(r) => Ok(Some(format!("infeasible (max residual {})", crate::report::num(r.max_residual)))),
        Err(e) => Ok(Some(format!("cannot be evaluated: {e}"))),
    }
}

pub fn implications(lcq: &CqReport, full: &CqReport, rcrcq: &CqReport, rcpld: &CqReport) -> Vec<Implication> {
    let rule = |rule: &str, applies: bool, consistent: bool| Implication {
        rule: rule.into(),
        applies,
        consistent: !applies || consistent,
    };
    vec![
        rule(
            "lcq holds => rcrcq not violated",
            lcq.verdict == Verdict::Holds,
            !rcrcq.verdict.is_violation(),
        ),
        rule(
            "rcrcq no-violation-found => rcpld not violated",
            rcrcq.verdict == Verdict::NoViolationFound,
            !rcpld.verdict.is_violation(),
        ),
        rule(
            "fullrank holds => rcpld not violated",
            full.verdict == Verdict::Holds,
            !rcpld.verdict.is_violation(),
        ),
    ]
}

pub fn cq_bundle(sys: &FeasibilitySystem, x: &[f64], plan: &SamplingPlan, s: &Settings) -> Result<Payload, CliError> {
    let nnamcq = check_nnamcq(sys, x, s).map_err(internal)?;
    let full = check_fullrank(sys, x, s).map_err(internal)?;
    let lcq = check_lcq(sys);
    let rcpld = probe_rcpld(sys, x, plan, s).map_err(internal)?;
    let rcrcq = probe_rcrcq(sys, x, plan, s).map_err(internal)?;
    let implications = implications(&lcq, &full, &rcrcq, &rcpld);
    Ok(Payload::CheckCq {
        reports: vec![nnamcq, full, lcq, rcpld, rcrcq],
        implications,
    })
}

fn command_echo(cli: &Cli) -> Vec<String> {
    let c = &cli.common;
    let mut v: Vec<String> = match &cli.command {
        Command::CheckCq { file } => vec!["check-cq".into(), file.display().to_string()],
        Command::CheckStationarity { file } => vec!["check-stationarity".into(), file.display().to_string()],
        Command::ErrorBound { file, strict } => {
            let mut v = vec!["error-bound".into(), file.display().to_string()];
            if *strict {
                v.push("--strict".into());
            }
            v
        }
        Command::ReformulateBilevel { file } => vec!["reformulate-bilevel".into(), file.display().to_string()],
        Command::PenaltySolve {
            file,
            mu,
            schedule,
            budget,
        } => {
            let mut v = vec!["penalty-solve".into(), file.display().to_string()];
            if let Some(m) = mu {
                v.push(format!("--mu={m}"));
            }
            if let Some(s) = schedule {
                v.push(format!("--schedule={s}"));
            }
            if let Some(b) = budget {
                v.push(format!("--budget={b}"));
            }
            v
        }
        Command::ReproduceExample { example } => vec!["reproduce-example".into(), example.label().into()],
    };
    let mut opt = |name: &str, val: Option<String>| {
        if let Some(val) = val {
            v.push(format!("--{name}={val}"));
        }
    };
    opt("tol", c.tol.map(|x| x.to_string()));
    opt("seed", c.seed.map(|x| x.to_string()));
    opt("radii", c.radii.clone());
    opt("points-per-radius", c.points_per_radius.map(|x| x.to_string()));
    opt("branch-cap", c.branch_cap.map(|x| x.to_string()));
    opt("grid", c.grid.map(|x| x.to_string()));
    opt("norm", c.norm.map(|n| crate::report::label(&Norm::from(n))));
    opt("anchor", c.anchor.clone());
    opt("point", c.point.clone());
    v
}

pub fn execute(cli: &Cli) -> Result<Output, CliError> {
    let common = &cli.common;
    let echo = command_echo(cli);
    let (file_path, needs_plan) = match &cli.command {
        Command::ReproduceExample { example } => {
            let out = examples::reproduce(*example, common, echo)?;
            return Ok(out);
        }
        Command::ReformulateBilevel { file } => {
            let pf = read_problem(file)?;
            let cp = reformulate(&pf)?;
            return Ok(Output {
                report: None,
                raw: Some(cp.to_canonical_json()),
                warnings: vec![],
                mismatches: 0,
            });
        }
        Command::CheckCq { file } => (file, true),
        Command::ErrorBound { file, .. } => (file, true),
        Command::CheckStationarity { file } | Command::PenaltySolve { file, .. } => (file, false),
    };
    let pf = read_problem(file_path)?;
    let loaded = load(&pf)?;
    let s = settings_for(&pf, common)?;
    let plan = plan_for(common)?;
    let sys = &loaded.system;
    let anchors = select_anchors(&loaded.anchors, common, sys.dim())?;
    let mut warnings = Vec::new();
    let mut results = Vec::new();
    for a in anchors {
        let mut result = AnchorResult {
            anchor: a.name.clone(),
            point: a.point.clone(),
            skipped: None,
            payload: None,
        };
        let needs_feasible = !matches!(cli.command, Command::PenaltySolve { .. });
        if needs_feasible {
            if let Some(why) = infeasible_reason(sys, &a.point, &s)? {
                warnings.push(format!("anchor `{}` skipped: {why}", a.name));
                result.skipped = Some(why);
                results.push(result);
                continue;
            }
        }
        let payload = match &cli.command {
            Command::CheckCq { .. } => cq_bundle(sys, &a.point, &plan, &s)?,
            Command::CheckStationarity { .. } => {
                let f = loaded.objective.as_ref().ok_or_else(|| CliError::Parse {
                    location: "objective".into(),
                    message: "check-stationarity needs an objective".into(),
                })?;
                Payload::Stationarity {
                    report: check_mstationarity(sys, f, &a.point, &s).map_err(internal)?,
                }
            }
            Command::ErrorBound { strict, .. } => {
                let residual = if *strict {
                    match Residual::strict_at(sys, &a.point, s.feas_tol) {
                        Ok(r) => r,
                        Err(e) => {
                            warnings.push(format!("anchor `{}` skipped: {e}", a.name));
                            result.skipped = Some(e.to_string());
                            results.push(result);
                            continue;
                        }
                    }
                } else {
                    Residual::Full {
                        norm: common.norm.map(Norm::from).unwrap_or_default(),
                    }
                };
                let method = common.grid.map(|n| DistanceMethod::Grid {
                    center: None,
                    half_width: plan.r0 * 2.0,
                    points_per_dim: n,
                });
                let report = estimate_error_bound_modulus(sys, &a.point, &plan, &residual, method.as_ref(), &s)
                    .map_err(internal)?;
                if report.unbounded {
                    warnings.push(format!("anchor `{}`: zero-residual samples off the feasible set", a.name));
                }
                Payload::ErrorBound { report }
            }
            Command::PenaltySolve {
                mu, schedule, budget, ..
            } => {
                let base = loaded.objective.clone().unwrap_or_else(cqkit::expr::Expr::zero);
                let f = match mu {
                    Some(m) => base + residual_expr(sys) * *m,
                    None => base,
                };
                let mut opts = PenaltyOptions::default();
                if let Some(sch) = schedule {
                    opts.schedule = parse_list("schedule", sch)?;
                }
                if let Some(b) = budget {
                    opts.budget = *b;
                }
                let start = sys.project_onto_c(&a.point);
                let r = solve_penalized(sys, &f, &start, &opts, &s).map_err(internal)?;
                if r.budget_exhausted {
                    warnings.push(format!("anchor `{}`: inner budget exhausted", a.name));
                }
                if r.infeasible {
                    warnings.push(format!("anchor `{}`: final iterate is infeasible", a.name));
                }
                Payload::PenaltySolve { mu: *mu, result: r }
            }
            Command::ReformulateBilevel { .. } | Command::ReproduceExample { .. } => unreachable!("handled above"),
        };
        if let Payload::CheckCq { implications, .. } = &payload {
            for i in implications.iter().filter(|i| !i.consistent) {
                warnings.push(format!("anchor `{}`: implication violated: {}", a.name, i.rule));
            }
        }
        result.payload = Some(payload);
        results.push(result);
    }
    let report = AnalysisReport {
        tool: "cqkit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: echo,
        problem: pf.name.clone(),
        settings: s,
        plan: needs_plan.then_some(plan),
        results,
        reproduction: None,
        warnings: warnings.clone(),
    };
    Ok(Output {
        report: Some(report),
        raw: None,
        warnings,
        mismatches: 0,
    })
}
