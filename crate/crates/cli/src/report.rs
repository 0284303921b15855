//! Report payloads and their JSON and text renderings.
//!
//! Numbers in the text rendering are printed with the JSON number
//! formatter, so each one appears verbatim in the JSON rendering.

use std::fmt::Write as _;

use cqkit::config::Settings;
use cqkit::cq::{CqReport, SamplingPlan};
use cqkit::errorbound::ErrorBoundReport;
use cqkit::stationarity::{MStationarityReport, PenaltyResult};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Implication {
    pub rule: String,
    /// The premise holds, so the conclusion is checked.
    pub applies: bool,
    pub consistent: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Payload {
    CheckCq {
        reports: Vec<CqReport>,
        implications: Vec<Implication>,
    },
    Stationarity {
        report: MStationarityReport,
    },
    ErrorBound {
        report: ErrorBoundReport,
    },
    PenaltySolve {
        mu: Option<f64>,
        result: PenaltyResult,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct AnchorResult {
    pub anchor: String,
    pub point: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub key: String,
    pub observed: serde_json::Value,
    pub expected: serde_json::Value,
    pub tol: f64,
    pub matches: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Reproduction {
    pub example: String,
    pub comparisons: Vec<Comparison>,
    pub mismatches: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub problem: String,
    pub settings: Settings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<SamplingPlan>,
    pub results: Vec<AnchorResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reproduction: Option<Reproduction>,
    pub warnings: Vec<String>,
}

pub fn num(x: f64) -> String {
    serde_json::to_string(&x).unwrap_or_else(|_| "null".into())
}

fn nums(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| num(*x)).collect();
    format!("[{}]", parts.join(", "))
}

/// Serde name of an enum value such as a verdict.
pub fn label<T: Serialize>(t: &T) -> String {
    match serde_json::to_value(t) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

fn json_compact(v: &serde_json::Value) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports always serialize");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(t, "{} {}", self.tool, self.command.join(" "));
        let _ = writeln!(t, "problem: {}", self.problem);
        if let Some(p) = &self.plan {
            let _ = writeln!(
                t,
                "sampling: r0 {} rho {} levels {} points per radius {} seed {}",
                num(p.r0),
                num(p.rho),
                p.levels,
                p.points_per_radius,
                p.seed
            );
        }
        for r in &self.results {
            let _ = writeln!(t, "anchor {} = {}", r.anchor, nums(&r.point));
            if let Some(why) = &r.skipped {
                let _ = writeln!(t, "  skipped: {why}");
            }
            if let Some(p) = &r.payload {
                render_payload(&mut t, p);
            }
        }
        if let Some(rep) = &self.reproduction {
            let _ = writeln!(t, "example {}", rep.example);
            for c in &rep.comparisons {
                let _ = writeln!(
                    t,
                    "  {:<40} {}  observed {} expected {}",
                    c.key,
                    if c.matches { "ok" } else { "MISMATCH" },
                    json_compact(&c.observed),
                    json_compact(&c.expected)
                );
            }
            let _ = writeln!(t, "  mismatches: {}", rep.mismatches);
        }
        for w in &self.warnings {
            let _ = writeln!(t, "warning: {w}");
        }
        t
    }
}

fn render_payload(t: &mut String, p: &Payload) {
    match p {
        Payload::CheckCq { reports, implications } => {
            for r in reports {
                let mut line = format!("  {:<9} {}", label(&r.check), r.verdict);
                if let (Some(rank), Some(target)) = (&r.rank, r.target_rank) {
                    let _ = write!(line, "  rank {} of {}", rank.rank, target);
                }
                if let Some(w) = &r.witness {
                    let seq: Vec<String> = w.sequence.iter().map(|s| s.rank.to_string()).collect();
                    let _ = write!(line, "  witness ranks [{}] vs limit {}", seq.join(", "), w.limit_rank);
                }
                if let Some(c) = &r.certificate {
                    let _ = write!(line, "  certificate lambda_g {} lambda_h {}", nums(&c.lambda_g), nums(&c.lambda_h));
                }
                if let Some(f) = r.explored_fraction {
                    let _ = write!(line, "  explored {}", num(f));
                }
                let _ = writeln!(t, "{line}");
            }
            for i in implications {
                let status = match (i.applies, i.consistent) {
                    (false, _) => "not applicable",
                    (true, true) => "consistent",
                    (true, false) => "VIOLATED",
                };
                let _ = writeln!(t, "  implication {}: {status}", i.rule);
            }
        }
        Payload::Stationarity { report } => {
            let _ = writeln!(t, "  m-stationarity {}", report.verdict);
            if let Some(m) = &report.multipliers {
                let _ = writeln!(
                    t,
                    "  multipliers lambda_g {} lambda_h {} lambda_G {} lambda_H {}",
                    nums(&m.lambda_g),
                    nums(&m.lambda_h),
                    nums(&m.lambda_gg),
                    nums(&m.lambda_hh)
                );
            }
            if let Some(r) = report.residual {
                let _ = writeln!(t, "  residual {}", num(r));
            }
        }
        Payload::ErrorBound { report } => {
            let alpha = report.alpha_hat.map_or("none".to_string(), num);
            let _ = writeln!(
                t,
                "  alpha_hat {alpha}  samples {}  distance oracle {}  full rank {}",
                report.samples, report.d_f_method, report.fullrank
            );
            for e in &report.per_radius {
                let a = e.alpha_hat.map_or("none".to_string(), num);
                let _ = writeln!(t, "    radius {}  counted {} of {}  alpha_hat {a}", num(e.radius), e.counted, e.samples);
            }
            if report.unbounded {
                let _ = writeln!(t, "  unbounded: a zero-residual sample lies off the feasible set");
            }
        }
        Payload::PenaltySolve { mu, result } => {
            if let Some(m) = mu {
                let _ = writeln!(t, "  exact-penalty weight {}", num(*m));
            }
            for s in &result.trace {
                let _ = writeln!(t, "    k {}  phi0 {}  point {}", num(s.k), num(s.phi0), nums(&s.point));
            }
            let _ = writeln!(
                t,
                "  final point {}  monotone {}  infeasible {}  budget exhausted {}",
                nums(&result.point),
                result.monotone,
                result.infeasible,
                result.budget_exhausted
            );
        }
    }
    for note in payload_notes(p) {
        let _ = writeln!(t, "  note: {note}");
    }
}

fn payload_notes(p: &Payload) -> Vec<String> {
    match p {
        Payload::CheckCq { reports, .. } => reports
            .iter()
            .flat_map(|r| r.notes.iter().map(move |n| format!("{}: {n}", label(&r.check))))
            .collect(),
        Payload::Stationarity { report } => report.notes.clone(),
        Payload::ErrorBound { report } => report.notes.clone(),
        Payload::PenaltySolve { .. } => vec![],
    }
}
