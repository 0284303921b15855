//! The JSON problem file and its conversion to and from core types.

use std::sync::Arc;

use cqkit::bilevel::{build_combined_program, BilevelProgram, CombinedProgram, ValueConfig, ValueOracle};
use cqkit::config::Settings;
use cqkit::expr::{Expr, Node, Variables};
use cqkit::system::{CatalogSet, FeasibilitySystem, Polyhedron};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Expression tree node; field order is the canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExprJson {
    Const { value: f64 },
    Var { name: String },
    Neg { args: Vec<ExprJson> },
    Add { args: Vec<ExprJson> },
    Sub { args: Vec<ExprJson> },
    Mul { args: Vec<ExprJson> },
    Div { args: Vec<ExprJson> },
    Pow { args: Vec<ExprJson>, exponent: i32 },
    Exp { args: Vec<ExprJson> },
    Ln { args: Vec<ExprJson> },
    Max { args: Vec<ExprJson> },
    Min { args: Vec<ExprJson> },
    Abs { args: Vec<ExprJson> },
    /// Value function of the file's bilevel section, read at the first `d` variables.
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfSpaces {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetJson {
    Full { dim: usize },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Polyhedron { dim: usize, a: Vec<Vec<f64>>, b: Vec<f64> },
    Union { dim: usize, pieces: Vec<HalfSpaces> },
    Segment { p0: Vec<f64>, p1: Vec<f64> },
    Sawtooth,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(default)]
    pub g: Vec<ExprJson>,
    #[serde(default)]
    pub h: Vec<ExprJson>,
    #[serde(default, rename = "G")]
    pub big_g: Vec<ExprJson>,
    #[serde(default, rename = "H")]
    pub big_h: Vec<ExprJson>,
    pub sets: Vec<SetJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSection {
    pub objective: ExprJson,
    #[serde(default)]
    pub ineq: Vec<ExprJson>,
    #[serde(default)]
    pub eq: Vec<ExprJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilevelSection {
    pub upper_variables: Vec<String>,
    pub lower_variables: Vec<String>,
    pub upper: LevelSection,
    pub lower: LevelSection,
    pub x_set: SetJson,
    pub y_lower: Vec<f64>,
    pub y_upper: Vec<f64>,
    /// Lower-level grid points per `y` dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub name: String,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feas_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kink_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variables: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ExprJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bilevel: Option<BilevelSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anchors: Vec<Anchor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<Tolerances>,
}

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Parse {
        location: location.into(),
        message: message.into(),
    }
}

impl ProblemFile {
    /// Parses and checks the schema version; serde errors carry line and column.
    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let file: ProblemFile = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let suffix = format!(" at line {} column {}", e.line(), e.column());
            let msg = msg.strip_suffix(&suffix).unwrap_or(&msg).to_string();
            parse_err(format!("{source}:{}:{}", e.line(), e.column()), msg)
        })?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(parse_err(
                format!("{source}: schema_version"),
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", file.schema_version),
            ));
        }
        Ok(file)
    }

    /// Canonical serialization: fixed field order, two-space indentation, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("problem files always serialize");
        s.push('\n');
        s
    }

    pub fn settings(&self, base: Settings) -> Settings {
        let t = self.tolerances.clone().unwrap_or_default();
        Settings {
            feas_tol: t.feas_tol.unwrap_or(base.feas_tol),
            kink_tol: t.kink_tol.unwrap_or(base.kink_tol),
            rank_tol: t.rank_tol.unwrap_or(base.rank_tol),
            ..base
        }
    }
}

struct Scope<'a> {
    names: &'a [String],
    oracle: Option<&'a Arc<ValueOracle>>,
}

fn arity(args: &[ExprJson], want: std::ops::RangeInclusive<usize>, op: &str, at: &str) -> Result<(), CliError> {
    if want.contains(&args.len()) {
        Ok(())
    } else {
        Err(parse_err(
            at,
            format!("`{op}` takes {} to {} arguments, found {}", want.start(), want.end(), args.len()),
        ))
    }
}

fn build_args(args: &[ExprJson], scope: &Scope, at: &str) -> Result<Vec<Expr>, CliError> {
    args.iter()
        .enumerate()
        .map(|(i, a)| build_expr(a, scope, &format!("{at}.args[{i}]")))
        .collect()
}

fn build_expr(e: &ExprJson, scope: &Scope, at: &str) -> Result<Expr, CliError> {
    use ExprJson as J;
    let unary = |args: &Vec<ExprJson>, op: &str| -> Result<Expr, CliError> {
        arity(args, 1..=1, op, at)?;
        build_expr(&args[0], scope, &format!("{at}.args[0]"))
    };
    let binary = |args: &Vec<ExprJson>, op: &str| -> Result<(Expr, Expr), CliError> {
        arity(args, 2..=2, op, at)?;
        let v = build_args(args, scope, at)?;
        Ok((v[0].clone(), v[1].clone()))
    };
    Ok(match e {
        J::Const { value } => {
            if !value.is_finite() {
                return Err(parse_err(at, "constants must be finite"));
            }
            Expr::constant(*value)
        }
        J::Var { name } => match scope.names.iter().position(|n| n == name) {
            Some(i) => Expr::var(i),
            None => return Err(parse_err(at, format!("unknown variable `{name}`"))),
        },
        J::Neg { args } => -unary(args, "neg")?,
        J::Add { args } => {
            arity(args, 1..=usize::MAX, "add", at)?;
            let v = build_args(args, scope, at)?;
            v.into_iter().reduce(|a, b| a + b).expect("nonempty")
        }
        J::Mul { args } => {
            arity(args, 1..=usize::MAX, "mul", at)?;
            let v = build_args(args, scope, at)?;
            v.into_iter().reduce(|a, b| a * b).expect("nonempty")
        }
        J::Sub { args } => {
            let (a, b) = binary(args, "sub")?;
            a - b
        }
        J::Div { args } => {
            let (a, b) = binary(args, "div")?;
            a / b
        }
        J::Pow { args, exponent } => Expr::powi(unary(args, "pow")?, *exponent),
        J::Exp { args } => Expr::exp(unary(args, "exp")?),
        J::Ln { args } => Expr::ln(unary(args, "ln")?),
        J::Abs { args } => Expr::abs(unary(args, "abs")?),
        J::Max { args } => {
            arity(args, 1..=usize::MAX, "max", at)?;
            Expr::max(build_args(args, scope, at)?)
        }
        J::Min { args } => {
            arity(args, 1..=usize::MAX, "min", at)?;
            Expr::min(build_args(args, scope, at)?)
        }
        J::Value => match scope.oracle {
            Some(o) => Expr::oracle(o.clone()),
            None => return Err(parse_err(at, "`value` needs a bilevel section")),
        },
    })
}

fn build_set(s: &SetJson, at: &str) -> Result<CatalogSet, CliError> {
    let wrap = |e: cqkit::system::SystemError| parse_err(at, e.to_string());
    Ok(match s {
        SetJson::Full { dim } => CatalogSet::full(*dim),
        SetJson::Box { lower, upper } => CatalogSet::boxed(lower.clone(), upper.clone()).map_err(wrap)?,
        SetJson::Polyhedron { dim, a, b } => CatalogSet::polyhedron(a.clone(), b.clone(), *dim).map_err(wrap)?,
        SetJson::Union { dim, pieces } => {
            CatalogSet::union(*dim, pieces.iter().map(|p| (p.a.clone(), p.b.clone())).collect()).map_err(wrap)?
        }
        SetJson::Segment { p0, p1 } => CatalogSet::segment(p0.clone(), p1.clone()).map_err(wrap)?,
        SetJson::Sawtooth => CatalogSet::Sawtooth,
    })
}

fn build_list(list: &[ExprJson], scope: &Scope, at: &str) -> Result<Vec<Expr>, CliError> {
    list.iter()
        .enumerate()
        .map(|(i, e)| build_expr(e, scope, &format!("{at}[{i}]")))
        .collect()
}

/// The system a command analyzes, with its objective when one is declared.
pub struct Loaded {
    pub system: FeasibilitySystem,
    pub objective: Option<Expr>,
    pub combined: Option<CombinedProgram>,
    pub anchors: Vec<Anchor>,
}

pub fn value_config(b: &BilevelSection) -> ValueConfig {
    ValueConfig {
        grid_points: b.grid_points.unwrap_or(ValueConfig::default().grid_points),
        ..ValueConfig::default()
    }
}

pub fn build_bilevel(b: &BilevelSection) -> Result<BilevelProgram, CliError> {
    let names: Vec<String> = b.upper_variables.iter().chain(&b.lower_variables).cloned().collect();
    let scope = Scope {
        names: &names,
        oracle: None,
    };
    let at = "bilevel";
    let blp = BilevelProgram {
        x_names: b.upper_variables.clone(),
        y_names: b.lower_variables.clone(),
        upper_objective: build_expr(&b.upper.objective, &scope, "bilevel.upper.objective")?,
        upper_ineq: build_list(&b.upper.ineq, &scope, "bilevel.upper.ineq")?,
        upper_eq: build_list(&b.upper.eq, &scope, "bilevel.upper.eq")?,
        lower_objective: build_expr(&b.lower.objective, &scope, "bilevel.lower.objective")?,
        lower_ineq: build_list(&b.lower.ineq, &scope, "bilevel.lower.ineq")?,
        lower_eq: build_list(&b.lower.eq, &scope, "bilevel.lower.eq")?,
        x_set: build_set(&b.x_set, "bilevel.x_set")?,
        y_lower: b.y_lower.clone(),
        y_upper: b.y_upper.clone(),
    };
    blp.validate().map_err(|e| parse_err(at, e.to_string()))?;
    Ok(blp)
}

/// Builds the analyzed system: the explicit `system` section when present,
/// otherwise the combined program of the bilevel section.
pub fn load(file: &ProblemFile) -> Result<Loaded, CliError> {
    let blp = file.bilevel.as_ref().map(build_bilevel).transpose()?;
    let (system, objective, combined) = match (&file.system, &blp) {
        (Some(sec), _) => {
            let oracle = match (&blp, &file.bilevel) {
                (Some(p), Some(b)) => {
                    let d = p.d();
                    if file.variables.len() < d || file.variables[..d] != b.upper_variables[..] {
                        return Err(parse_err(
                            "variables",
                            "the first variables must be the bilevel upper variables",
                        ));
                    }
                    Some(Arc::new(ValueOracle::new(p.clone(), value_config(b))))
                }
                _ => None,
            };
            let scope = Scope {
                names: &file.variables,
                oracle: oracle.as_ref(),
            };
            let sets = sec
                .sets
                .iter()
                .enumerate()
                .map(|(i, s)| build_set(s, &format!("system.sets[{i}]")))
                .collect::<Result<Vec<_>, _>>()?;
            let system = FeasibilitySystem::new(
                Variables::new(file.variables.iter().cloned()),
                build_list(&sec.g, &scope, "system.g")?,
                build_list(&sec.h, &scope, "system.h")?,
                build_list(&sec.big_g, &scope, "system.G")?,
                build_list(&sec.big_h, &scope, "system.H")?,
                sets,
            )
            .map_err(|e| parse_err("system", e.to_string()))?;
            let objective = file
                .objective
                .as_ref()
                .map(|o| build_expr(o, &scope, "objective"))
                .transpose()?;
            (system, objective, None)
        }
        (None, Some(p)) => {
            let cfg = value_config(file.bilevel.as_ref().expect("bilevel present"));
            let cp = build_combined_program(p, &cfg).map_err(|e| parse_err("bilevel", e.to_string()))?;
            (cp.system.clone(), Some(cp.objective.clone()), Some(cp))
        }
        (None, None) => return Err(parse_err("system", "a system or a bilevel section is required")),
    };
    for (i, a) in file.anchors.iter().enumerate() {
        if a.point.len() != system.dim() {
            return Err(parse_err(
                format!("anchors[{i}].point"),
                format!("expected {} coordinates, found {}", system.dim(), a.point.len()),
            ));
        }
        if a.point.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(format!("anchors[{i}].point"), "coordinates must be finite"));
        }
    }
    Ok(Loaded {
        system,
        objective,
        combined,
        anchors: file.anchors.clone(),
    })
}

/// Inverse of [`build_expr`]; oracle nodes other than `V` cannot be written.
pub fn expr_to_json(e: &Expr, names: &[String]) -> Result<ExprJson, CliError> {
    let rec = |x: &Expr| expr_to_json(x, names);
    let internal = |m: String| CliError::Internal(m);
    Ok(match e.node() {
        Node::Const(c) => ExprJson::Const { value: *c },
        Node::Var(i) => ExprJson::Var {
            name: names.get(*i).cloned().ok_or_else(|| internal(format!("variable {i} has no name")))?,
        },
        Node::Neg(a) => ExprJson::Neg { args: vec![rec(a)?] },
        Node::Add(a, b) => ExprJson::Add { args: vec![rec(a)?, rec(b)?] },
        Node::Sub(a, b) => ExprJson::Sub { args: vec![rec(a)?, rec(b)?] },
        Node::Mul(a, b) => ExprJson::Mul { args: vec![rec(a)?, rec(b)?] },
        Node::Div(a, b) => ExprJson::Div { args: vec![rec(a)?, rec(b)?] },
        Node::Pow(a, n) => ExprJson::Pow {
            args: vec![rec(a)?],
            exponent: *n,
        },
        Node::Exp(a) => ExprJson::Exp { args: vec![rec(a)?] },
        Node::Ln(a) => ExprJson::Ln { args: vec![rec(a)?] },
        Node::Abs(a) => ExprJson::Abs { args: vec![rec(a)?] },
        Node::Max(v) => ExprJson::Max {
            args: v.iter().map(rec).collect::<Result<_, _>>()?,
        },
        Node::Min(v) => ExprJson::Min {
            args: v.iter().map(rec).collect::<Result<_, _>>()?,
        },
        Node::Oracle(o) if o.name() == "V" => ExprJson::Value,
        Node::Oracle(o) => return Err(internal(format!("oracle `{}` cannot be serialized", o.name()))),
    })
}

pub fn set_to_json(s: &CatalogSet) -> SetJson {
    let half = |p: &Polyhedron| HalfSpaces {
        a: p.a.clone(),
        b: p.b.clone(),
    };
    match s {
        CatalogSet::FullSpace { dim } => SetJson::Full { dim: *dim },
        CatalogSet::Box { lower, upper } => SetJson::Box {
            lower: lower.clone(),
            upper: upper.clone(),
        },
        CatalogSet::Polyhedron(p) => SetJson::Polyhedron {
            dim: s.dim(),
            a: p.a.clone(),
            b: p.b.clone(),
        },
        CatalogSet::Union { dim, pieces } => SetJson::Union {
            dim: *dim,
            pieces: pieces.iter().map(half).collect(),
        },
        CatalogSet::Segment { p0, p1 } => SetJson::Segment {
            p0: p0.clone(),
            p1: p1.clone(),
        },
        CatalogSet::Sawtooth => SetJson::Sawtooth,
    }
}

/// The combined program as a standalone problem file; the bilevel section
/// is kept so the value function can be rebuilt.
pub fn reformulate(file: &ProblemFile) -> Result<ProblemFile, CliError> {
    let b = file
        .bilevel
        .as_ref()
        .ok_or_else(|| parse_err("bilevel", "reformulate-bilevel needs a bilevel section"))?;
    let blp = build_bilevel(b)?;
    let cp = build_combined_program(&blp, &value_config(b)).map_err(|e| CliError::Internal(e.to_string()))?;
    let names = cp.system.vars.0.clone();
    let list = |v: &[Expr]| v.iter().map(|e| expr_to_json(e, &names)).collect::<Result<Vec<_>, _>>();
    Ok(ProblemFile {
        schema_version: SCHEMA_VERSION,
        name: format!("{}-cp", file.name),
        variables: names.clone(),
        system: Some(SystemSection {
            g: list(&cp.system.g)?,
            h: list(&cp.system.h)?,
            big_g: list(&cp.system.big_g)?,
            big_h: list(&cp.system.big_h)?,
            sets: cp.system.blocks.iter().map(set_to_json).collect(),
        }),
        objective: Some(expr_to_json(&cp.objective, &names)?),
        bilevel: Some(b.clone()),
        anchors: file.anchors.clone(),
        tolerances: file.tolerances.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(g: &str) -> String {
        format!(
            r#"{{"schema_version":1,"name":"t","variables":["a","b"],
               "system":{{"g":[{g}],"sets":[{{"kind":"full","dim":2}}]}},
               "anchors":[{{"name":"o","point":[0,0]}}],
               "tolerances":{{"feas_tol":1e-6}}}}"#
        )
    }

    #[test]
    fn builds_and_evaluates() {
        let pf = ProblemFile::parse(
            &file(r#"{"op":"max","args":[{"op":"var","name":"a"},{"op":"pow","args":[{"op":"var","name":"b"}],"exponent":2}]}"#),
            "t",
        )
        .unwrap();
        let l = load(&pf).unwrap();
        assert_eq!(l.system.g[0].eval(&[1.0, 3.0]).unwrap(), 9.0);
        assert_eq!(pf.settings(Settings::default()).feas_tol, 1e-6);
    }

    #[test]
    fn arity_errors_name_the_node() {
        let pf = ProblemFile::parse(&file(r#"{"op":"div","args":[{"op":"const","value":1}]}"#), "t").unwrap();
        match load(&pf) {
            Err(CliError::Parse { location, .. }) => assert_eq!(location, "system.g[0]"),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("accepted a one-argument div"),
        }
    }

    #[test]
    fn value_needs_a_bilevel_section() {
        let pf = ProblemFile::parse(&file(r#"{"op":"value"}"#), "t").unwrap();
        assert!(matches!(load(&pf), Err(CliError::Parse { .. })));
    }

    #[test]
    fn expressions_round_trip_through_json() {
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let e = Expr::exp(Expr::var(0)) - Expr::abs(Expr::var(1)) * 2.0;
        let j = expr_to_json(&e, &names).unwrap();
        let scope = Scope {
            names: &names,
            oracle: None,
        };
        let back = build_expr(&j, &scope, "e").unwrap();
        for p in [[0.3, -1.0], [-2.0, 0.5]] {
            assert_eq!(e.eval(&p).unwrap(), back.eval(&p).unwrap());
        }
    }
}
