//! Piecewise-smooth scalar expressions over indexed variables.
//!
//! Expressions are immutable trees with shared children. Smooth subtrees
//! support symbolic differentiation; `max`, `min`, `abs` and oracle nodes
//! are handled by [`Expr::subdifferential_vertices`].

use std::collections::BTreeSet;
use std::fmt;
use std::ops;
use std::sync::Arc;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("variable index {index} out of range for a point of length {len}")]
    VarOutOfRange { index: usize, len: usize },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("cannot differentiate through nonsmooth node `{0}`")]
    Nonsmooth(&'static str),
    #[error("oracle `{name}` failed: {message}")]
    Oracle { name: String, message: String },
}

/// A scalar function supplied from outside the expression language, such as
/// a brute-forced value function.
pub trait ScalarOracle: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    /// Variable indices the oracle reads.
    fn support(&self) -> &[usize];
    fn eval(&self, point: &[f64]) -> Result<f64, ExprError>;
    /// Generators of the Clarke subdifferential as full-length vectors, and
    /// whether their convex hull is exactly the subdifferential.
    fn generators(&self, point: &[f64], tol: f64) -> Result<(Vec<Vec<f64>>, bool), ExprError>;
}

#[derive(Debug, Clone)]
pub enum Node {
    Const(f64),
    Var(usize),
    Neg(Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Pow(Expr, i32),
    Exp(Expr),
    Ln(Expr),
    Max(Vec<Expr>),
    Min(Vec<Expr>),
    Abs(Expr),
    Oracle(Arc<dyn ScalarOracle>),
}

#[derive(Debug, Clone)]
pub struct Expr(Arc<Node>);

/// Generators whose convex hull contains the Clarke subdifferential.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubdifferentialVertexSet {
    pub vertices: Vec<Vec<f64>>,
    /// `false` when the set is only an outer estimate.
    pub exact: bool,
}

impl SubdifferentialVertexSet {
    pub fn is_singleton(&self) -> bool {
        self.vertices.len() == 1
    }
}

/// Declared variable names; expressions refer to them by position.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Variables(pub Vec<String>);

impl Variables {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        Variables(names.into_iter().map(Into::into).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index(&self, name: &str) -> Result<usize, ExprError> {
        self.0
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ExprError::UnknownVariable(name.to_string()))
    }

    pub fn var(&self, name: &str) -> Result<Expr, ExprError> {
        self.index(name).map(Expr::var)
    }

    pub fn name(&self, i: usize) -> Option<&str> {
        self.0.get(i).map(String::as_str)
    }
}

impl Expr {
    fn from_node(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub fn constant(c: f64) -> Self {
        Expr::from_node(Node::Const(c))
    }

    pub fn zero() -> Self {
        Expr::constant(0.0)
    }

    pub fn one() -> Self {
        Expr::constant(1.0)
    }

    pub fn var(i: usize) -> Self {
        Expr::from_node(Node::Var(i))
    }

    pub fn oracle(o: Arc<dyn ScalarOracle>) -> Self {
        Expr::from_node(Node::Oracle(o))
    }

    pub fn as_const(&self) -> Option<f64> {
        match self.node() {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a.node() {
            Node::Const(c) => Expr::constant(-c),
            Node::Neg(inner) => inner.clone(),
            _ => Expr::from_node(Node::Neg(a)),
        }
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::constant(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::from_node(Node::Add(a, b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::constant(x - y),
            (Some(x), _) if x == 0.0 => Expr::neg(b),
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::from_node(Node::Sub(a, b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::constant(x * y),
            (Some(x), _) if x == 0.0 => Expr::zero(),
            (_, Some(y)) if y == 0.0 => Expr::zero(),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            (Some(x), _) if x == -1.0 => Expr::neg(b),
            (_, Some(y)) if y == -1.0 => Expr::neg(a),
            _ => Expr::from_node(Node::Mul(a, b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) if y != 0.0 => Expr::constant(x / y),
            (Some(x), _) if x == 0.0 => Expr::zero(),
            (_, Some(y)) if y == 1.0 => a,
            _ => Expr::from_node(Node::Div(a, b)),
        }
    }

    pub fn powi(a: Expr, n: i32) -> Expr {
        if n == 0 {
            return Expr::one();
        }
        if n == 1 {
            return a;
        }
        match a.as_const() {
            Some(x) if n > 0 || x != 0.0 => Expr::constant(x.powi(n)),
            _ => Expr::from_node(Node::Pow(a, n)),
        }
    }

    pub fn exp(a: Expr) -> Expr {
        match a.as_const() {
            Some(x) => Expr::constant(x.exp()),
            None => Expr::from_node(Node::Exp(a)),
        }
    }

    pub fn ln(a: Expr) -> Expr {
        match a.as_const() {
            Some(x) if x > 0.0 => Expr::constant(x.ln()),
            _ => Expr::from_node(Node::Ln(a)),
        }
    }

    pub fn abs(a: Expr) -> Expr {
        match a.as_const() {
            Some(x) => Expr::constant(x.abs()),
            None => Expr::from_node(Node::Abs(a)),
        }
    }

    pub fn max(args: Vec<Expr>) -> Expr {
        Expr::extremum(args, true)
    }

    pub fn min(args: Vec<Expr>) -> Expr {
        Expr::extremum(args, false)
    }

    pub fn max2(a: Expr, b: Expr) -> Expr {
        Expr::max(vec![a, b])
    }

    pub fn min2(a: Expr, b: Expr) -> Expr {
        Expr::min(vec![a, b])
    }

    fn extremum(args: Vec<Expr>, is_max: bool) -> Expr {
        assert!(!args.is_empty(), "max/min need at least one argument");
        if args.len() == 1 {
            return args.into_iter().next().unwrap();
        }
        let consts: Option<Vec<f64>> = args.iter().map(Expr::as_const).collect();
        if let Some(cs) = consts {
            let v = if is_max {
                cs.into_iter().fold(f64::NEG_INFINITY, f64::max)
            } else {
                cs.into_iter().fold(f64::INFINITY, f64::min)
            };
            return Expr::constant(v);
        }
        if is_max {
            Expr::from_node(Node::Max(args))
        } else {
            Expr::from_node(Node::Min(args))
        }
    }

    fn children(&self) -> Vec<&Expr> {
        match self.node() {
            Node::Const(_) | Node::Var(_) | Node::Oracle(_) => vec![],
            Node::Neg(a) | Node::Pow(a, _) | Node::Exp(a) | Node::Ln(a) | Node::Abs(a) => vec![a],
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => vec![a, b],
            Node::Max(xs) | Node::Min(xs) => xs.iter().collect(),
        }
    }

    /// Variable indices read by the expression, including oracle supports.
    pub fn variables(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<usize>) {
        match self.node() {
            Node::Var(i) => {
                out.insert(*i);
            }
            Node::Oracle(o) => out.extend(o.support().iter().copied()),
            _ => {
                for c in self.children() {
                    c.collect_vars(out);
                }
            }
        }
    }

    pub fn depends_on(&self, var: usize) -> bool {
        match self.node() {
            Node::Var(i) => *i == var,
            Node::Const(_) => false,
            Node::Oracle(o) => o.support().contains(&var),
            _ => self.children().into_iter().any(|c| c.depends_on(var)),
        }
    }

    /// No max/min/abs/oracle node anywhere in the tree.
    pub fn is_smooth(&self) -> bool {
        match self.node() {
            Node::Max(_) | Node::Min(_) | Node::Abs(_) | Node::Oracle(_) => false,
            _ => self.children().into_iter().all(Expr::is_smooth),
        }
    }

    pub fn contains_oracle(&self) -> bool {
        match self.node() {
            Node::Oracle(_) => true,
            _ => self.children().into_iter().any(Expr::contains_oracle),
        }
    }

    /// Syntactic affinity check.
    pub fn is_affine(&self) -> bool {
        match self.node() {
            Node::Const(_) | Node::Var(_) => true,
            Node::Neg(a) => a.is_affine(),
            Node::Add(a, b) | Node::Sub(a, b) => a.is_affine() && b.is_affine(),
            Node::Mul(a, b) => {
                (a.is_constant() && b.is_affine()) || (b.is_constant() && a.is_affine())
            }
            Node::Div(a, b) => a.is_affine() && b.is_constant(),
            Node::Pow(a, n) => a.is_constant() || (*n == 1 && a.is_affine()),
            Node::Exp(a) | Node::Ln(a) | Node::Abs(a) => a.is_constant(),
            Node::Max(xs) | Node::Min(xs) => xs.iter().all(Expr::is_constant),
            Node::Oracle(_) => false,
        }
    }

    /// Contains no variable or oracle.
    pub fn is_constant(&self) -> bool {
        match self.node() {
            Node::Const(_) => true,
            Node::Var(_) | Node::Oracle(_) => false,
            _ => self.children().into_iter().all(Expr::is_constant),
        }
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64, ExprError> {
        Ok(match self.node() {
            Node::Const(c) => *c,
            Node::Var(i) => *point.get(*i).ok_or(ExprError::VarOutOfRange {
                index: *i,
                len: point.len(),
            })?,
            Node::Neg(a) => -a.eval(point)?,
            Node::Add(a, b) => a.eval(point)? + b.eval(point)?,
            Node::Sub(a, b) => a.eval(point)? - b.eval(point)?,
            Node::Mul(a, b) => a.eval(point)? * b.eval(point)?,
            Node::Div(a, b) => {
                let den = b.eval(point)?;
                if den == 0.0 {
                    return Err(ExprError::Domain("division by zero".into()));
                }
                a.eval(point)? / den
            }
            Node::Pow(a, n) => {
                let base = a.eval(point)?;
                if base == 0.0 && *n < 0 {
                    return Err(ExprError::Domain("negative power of zero".into()));
                }
                base.powi(*n)
            }
            Node::Exp(a) => a.eval(point)?.exp(),
            Node::Ln(a) => {
                let v = a.eval(point)?;
                if v <= 0.0 {
                    return Err(ExprError::Domain(format!("ln of nonpositive value {v}")));
                }
                v.ln()
            }
            Node::Abs(a) => a.eval(point)?.abs(),
            Node::Max(xs) => {
                let mut best = f64::NEG_INFINITY;
                for x in xs {
                    best = best.max(x.eval(point)?);
                }
                best
            }
            Node::Min(xs) => {
                let mut best = f64::INFINITY;
                for x in xs {
                    best = best.min(x.eval(point)?);
                }
                best
            }
            Node::Oracle(o) => o.eval(point)?,
        })
    }

    /// Symbolic partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Result<Expr, ExprError> {
        if !self.depends_on(var) {
            return Ok(Expr::zero());
        }
        Ok(match self.node() {
            Node::Const(_) => Expr::zero(),
            Node::Var(_) => Expr::one(),
            Node::Neg(a) => Expr::neg(a.derivative(var)?),
            Node::Add(a, b) => Expr::add(a.derivative(var)?, b.derivative(var)?),
            Node::Sub(a, b) => Expr::sub(a.derivative(var)?, b.derivative(var)?),
            Node::Mul(a, b) => Expr::add(
                Expr::mul(a.derivative(var)?, b.clone()),
                Expr::mul(a.clone(), b.derivative(var)?),
            ),
            Node::Div(a, b) => {
                let da = a.derivative(var)?;
                let db = b.derivative(var)?;
                Expr::sub(
                    Expr::div(da, b.clone()),
                    Expr::div(Expr::mul(a.clone(), db), Expr::powi(b.clone(), 2)),
                )
            }
            Node::Pow(a, n) => Expr::mul(
                Expr::mul(Expr::constant(*n as f64), Expr::powi(a.clone(), n - 1)),
                a.derivative(var)?,
            ),
            Node::Exp(a) => Expr::mul(self.clone(), a.derivative(var)?),
            Node::Ln(a) => Expr::div(a.derivative(var)?, a.clone()),
            Node::Max(_) => return Err(ExprError::Nonsmooth("max")),
            Node::Min(_) => return Err(ExprError::Nonsmooth("min")),
            Node::Abs(_) => return Err(ExprError::Nonsmooth("abs")),
            Node::Oracle(_) => return Err(ExprError::Nonsmooth("oracle")),
        })
    }

    /// Symbolic gradient over variables `0..n`.
    pub fn gradient(&self, n: usize) -> Result<Vec<Expr>, ExprError> {
        (0..n).map(|i| self.derivative(i)).collect()
    }

    /// Numeric gradient of a smooth expression over variables `0..point.len()`.
    pub fn eval_gradient(&self, point: &[f64]) -> Result<Vec<f64>, ExprError> {
        if !self.is_smooth() {
            return Err(ExprError::Nonsmooth("gradient of nonsmooth expression"));
        }
        let set = self.subdifferential_vertices(point, 0.0)?;
        Ok(set.vertices.into_iter().next().expect("nonempty vertex set"))
    }

    /// Clarke subdifferential generators at `point`. Branches whose values
    /// lie within `tol` of the active extremum count as active.
    pub fn subdifferential_vertices(
        &self,
        point: &[f64],
        tol: f64,
    ) -> Result<SubdifferentialVertexSet, ExprError> {
        let s = self.sub_rec(point, tol)?;
        Ok(SubdifferentialVertexSet {
            vertices: s.verts,
            exact: s.exact,
        })
    }

    fn sub_rec(&self, point: &[f64], tol: f64) -> Result<Sub, ExprError> {
        let n = point.len();
        let value = |s: &Sub| s.value;
        Ok(match self.node() {
            Node::Const(c) => Sub::smooth(*c, vec![0.0; n]),
            Node::Var(i) => {
                if *i >= n {
                    return Err(ExprError::VarOutOfRange { index: *i, len: n });
                }
                let mut g = vec![0.0; n];
                g[*i] = 1.0;
                Sub::smooth(point[*i], g)
            }
            Node::Neg(a) => {
                let a = a.sub_rec(point, tol)?;
                Sub {
                    value: -a.value,
                    verts: a.verts.iter().map(|u| scale(u, -1.0)).collect(),
                    exact: a.exact,
                }
            }
            Node::Add(a, b) => {
                let (a, b) = (a.sub_rec(point, tol)?, b.sub_rec(point, tol)?);
                Sub::combine(a.value + b.value, &a, &b, |u, v| axpby(1.0, u, 1.0, v))
            }
            Node::Sub(a, b) => {
                let (a, b) = (a.sub_rec(point, tol)?, b.sub_rec(point, tol)?);
                Sub::combine(a.value - b.value, &a, &b, |u, v| axpby(1.0, u, -1.0, v))
            }
            Node::Mul(a, b) => {
                let (a, b) = (a.sub_rec(point, tol)?, b.sub_rec(point, tol)?);
                let (va, vb) = (value(&a), value(&b));
                Sub::combine(va * vb, &a, &b, |u, v| axpby(vb, u, va, v))
            }
            Node::Div(a, b) => {
                let (a, b) = (a.sub_rec(point, tol)?, b.sub_rec(point, tol)?);
                let (va, vb) = (value(&a), value(&b));
                if vb == 0.0 {
                    return Err(ExprError::Domain("division by zero".into()));
                }
                let den = vb * vb;
                Sub::combine(va / vb, &a, &b, |u, v| axpby(vb / den, u, -va / den, v))
            }
            Node::Pow(a, k) => {
                let a = a.sub_rec(point, tol)?;
                if a.value == 0.0 && *k < 0 {
                    return Err(ExprError::Domain("negative power of zero".into()));
                }
                let factor = *k as f64 * a.value.powi(k - 1);
                a.chain(a.value.powi(*k), factor)
            }
            Node::Exp(a) => {
                let a = a.sub_rec(point, tol)?;
                let e = a.value.exp();
                a.chain(e, e)
            }
            Node::Ln(a) => {
                let a = a.sub_rec(point, tol)?;
                if a.value <= 0.0 {
                    return Err(ExprError::Domain(format!("ln of nonpositive value {}", a.value)));
                }
                a.chain(a.value.ln(), 1.0 / a.value)
            }
            Node::Abs(inner) => {
                let a = inner.sub_rec(point, tol)?;
                if a.value > tol {
                    a.chain(a.value, 1.0)
                } else if a.value < -tol {
                    a.chain(-a.value, -1.0)
                } else {
                    let mut verts = a.verts.clone();
                    verts.extend(a.verts.iter().map(|u| scale(u, -1.0)));
                    Sub {
                        value: a.value.abs(),
                        verts: dedup(verts),
                        exact: inner.is_smooth(),
                    }
                }
            }
            Node::Max(xs) | Node::Min(xs) => {
                let is_max = matches!(self.node(), Node::Max(_));
                let subs = xs
                    .iter()
                    .map(|x| x.sub_rec(point, tol))
                    .collect::<Result<Vec<_>, _>>()?;
                let best = if is_max {
                    subs.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max)
                } else {
                    subs.iter().map(|s| s.value).fold(f64::INFINITY, f64::min)
                };
                let active: Vec<usize> = (0..subs.len())
                    .filter(|&i| (subs[i].value - best).abs() <= tol)
                    .collect();
                if active.len() == 1 {
                    let s = &subs[active[0]];
                    Sub {
                        value: best,
                        verts: s.verts.clone(),
                        exact: s.exact,
                    }
                } else {
                    let verts = active.iter().flat_map(|&i| subs[i].verts.clone()).collect();
                    Sub {
                        value: best,
                        verts: dedup(verts),
                        exact: active.iter().all(|&i| xs[i].is_smooth()),
                    }
                }
            }
            Node::Oracle(o) => {
                let value = o.eval(point)?;
                let (verts, exact) = o.generators(point, tol)?;
                if verts.is_empty() || verts.iter().any(|v| v.len() != n) {
                    return Err(ExprError::Oracle {
                        name: o.name().to_string(),
                        message: "generators have the wrong shape".into(),
                    });
                }
                Sub {
                    value,
                    verts: dedup(verts),
                    exact,
                }
            }
        })
    }
}

struct Sub {
    value: f64,
    verts: Vec<Vec<f64>>,
    exact: bool,
}

impl Sub {
    fn smooth(value: f64, grad: Vec<f64>) -> Self {
        Sub {
            value,
            verts: vec![grad],
            exact: true,
        }
    }

    fn chain(&self, value: f64, factor: f64) -> Self {
        Sub {
            value,
            verts: dedup(self.verts.iter().map(|u| scale(u, factor)).collect()),
            exact: self.exact,
        }
    }

    fn combine(value: f64, a: &Sub, b: &Sub, f: impl Fn(&[f64], &[f64]) -> Vec<f64>) -> Self {
        let mut verts = Vec::with_capacity(a.verts.len() * b.verts.len());
        for u in &a.verts {
            for v in &b.verts {
                verts.push(f(u, v));
            }
        }
        Sub {
            value,
            verts: dedup(verts),
            exact: a.exact && b.exact && (a.verts.len() == 1 || b.verts.len() == 1),
        }
    }
}

fn scale(u: &[f64], c: f64) -> Vec<f64> {
    u.iter().map(|x| c * x).collect()
}

fn axpby(a: f64, u: &[f64], b: f64, v: &[f64]) -> Vec<f64> {
    u.iter().zip(v).map(|(x, y)| a * x + b * y).collect()
}

/// Drops vectors within 1e-12 (relative) of an earlier one, keeping order.
pub fn dedup(vs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for v in vs {
        let scale = 1.0 + v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let dup = out.iter().any(|w| {
            w.iter()
                .zip(&v)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * scale)
        });
        if !dup {
            out.push(v);
        }
    }
    out
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Const(c) => write!(f, "{c}"),
            Node::Var(i) => write!(f, "v{i}"),
            Node::Neg(a) => write!(f, "-({a})"),
            Node::Add(a, b) => write!(f, "({a} + {b})"),
            Node::Sub(a, b) => write!(f, "({a} - {b})"),
            Node::Mul(a, b) => write!(f, "({a} * {b})"),
            Node::Div(a, b) => write!(f, "({a} / {b})"),
            Node::Pow(a, n) => write!(f, "({a})^{n}"),
            Node::Exp(a) => write!(f, "exp({a})"),
            Node::Ln(a) => write!(f, "ln({a})"),
            Node::Abs(a) => write!(f, "|{a}|"),
            Node::Max(xs) | Node::Min(xs) => {
                let name = if matches!(self.node(), Node::Max(_)) { "max" } else { "min" };
                write!(f, "{name}(")?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{x}")?;
                }
                write!(f, ")")
            }
            Node::Oracle(o) => write!(f, "{}", o.name()),
        }
    }
}

impl From<f64> for Expr {
    fn from(c: f64) -> Self {
        Expr::constant(c)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $ctor:path) => {
        impl ops::$trait<Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                $ctor(self, rhs)
            }
        }
        impl ops::$trait<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                $ctor(self.clone(), rhs.clone())
            }
        }
        impl ops::$trait<f64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                $ctor(self, Expr::constant(rhs))
            }
        }
        impl ops::$trait<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                $ctor(Expr::constant(self), rhs)
            }
        }
    };
}

binop!(Add, add, Expr::add);
binop!(Sub, sub, Expr::sub);
binop!(Mul, mul, Expr::mul);
binop!(Div, div, Expr::div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

impl ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(i: usize) -> Expr {
        Expr::var(i)
    }

    #[test]
    fn eval_examples() {
        let e = 2.0 * v(0) + v(1);
        assert_eq!(e.eval(&[1.0, 1.0]).unwrap(), 3.0);
        let m = Expr::max2(Expr::constant(0.5), v(0));
        assert_eq!(m.eval(&[0.7]).unwrap(), 0.7);
        let f = v(0) * Expr::exp(v(2)) - v(1) * Expr::exp(v(2));
        assert_eq!(f.eval(&[1.0, 2.0, 0.0]).unwrap(), -1.0);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(Expr::ln(v(0)).eval(&[0.0]), Err(ExprError::Domain(_))));
        assert!(matches!((v(0) / v(1)).eval(&[1.0, 0.0]), Err(ExprError::Domain(_))));
        assert!(matches!(v(3).eval(&[1.0]), Err(ExprError::VarOutOfRange { .. })));
    }

    #[test]
    fn derivative_examples() {
        let y = v(0);
        let f = Expr::powi(y.clone(), 3) - 3.0 * y;
        let d = f.derivative(0).unwrap();
        for t in [-2.0, 0.3, 1.7] {
            assert!((d.eval(&[t]).unwrap() - (3.0 * t * t - 3.0)).abs() < 1e-12);
        }
        let lin = 2.0 * v(0) + v(1);
        assert_eq!(lin.derivative(0).unwrap().as_const(), Some(2.0));
        let g = v(0) * Expr::exp(v(2)) - v(1) * Expr::exp(v(2));
        let dg = g.derivative(2).unwrap();
        for p in [[1.0, 2.0, 0.3], [-0.5, 0.1, -1.0]] {
            assert!((dg.eval(&p).unwrap() - g.eval(&p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_rejects_kinks() {
        let e = Expr::max2(v(0), v(1));
        assert_eq!(e.derivative(0).unwrap_err(), ExprError::Nonsmooth("max"));
        // Independent of the variable: derivative is zero.
        assert_eq!(e.derivative(2).unwrap().as_const(), Some(0.0));
    }

    #[test]
    fn example_4_1_subdifferential() {
        let g = v(0) + v(1) - Expr::max2(Expr::constant(0.5), v(2)) - v(3) + 1.0;
        let kink = g.subdifferential_vertices(&[0.0, 0.0, 0.5, 0.5], 1e-9).unwrap();
        assert_eq!(
            kink.vertices,
            vec![vec![1.0, 1.0, 0.0, -1.0], vec![1.0, 1.0, -1.0, -1.0]]
        );
        assert!(kink.exact);
        let smooth = g.subdifferential_vertices(&[0.0, 0.0, 0.9, 0.1], 1e-9).unwrap();
        assert_eq!(smooth.vertices, vec![vec![1.0, 1.0, -1.0, -1.0]]);
    }

    #[test]
    fn abs_vertices() {
        let a = Expr::abs(v(0));
        assert_eq!(a.subdifferential_vertices(&[2.0], 1e-9).unwrap().vertices, vec![vec![1.0]]);
        let k = a.subdifferential_vertices(&[0.0], 1e-9).unwrap();
        assert_eq!(k.vertices, vec![vec![1.0], vec![-1.0]]);
    }

    #[test]
    fn nested_kinks_are_outer_estimates() {
        let inner = Expr::max2(v(0), Expr::neg(v(0)));
        let outer = Expr::max2(inner, v(1));
        let s = outer.subdifferential_vertices(&[0.0, 0.0], 1e-9).unwrap();
        assert!(!s.exact);
        assert_eq!(s.vertices.len(), 3);
        let sum = Expr::abs(v(0)) + Expr::abs(v(1));
        let s = sum.subdifferential_vertices(&[0.0, 0.0], 1e-9).unwrap();
        assert!(!s.exact);
        assert_eq!(s.vertices.len(), 4);
    }

    #[test]
    fn affine_detection() {
        assert!((2.0 * v(0) - v(1) / 4.0 + 3.0).is_affine());
        assert!(!(v(0) * v(1)).is_affine());
        assert!(!Expr::max2(v(0), Expr::constant(1.0)).is_affine());
        assert!(!Expr::powi(v(0), 2).is_affine());
    }

    #[test]
    fn constant_folding() {
        let e = Expr::constant(2.0) * Expr::constant(3.0) + Expr::zero();
        assert_eq!(e.as_const(), Some(6.0));
        assert_eq!((v(0) * 0.0).as_const(), Some(0.0));
    }

    #[test]
    fn variables_by_name() {
        let vars = Variables::new(["x", "y"]);
        let e = vars.var("y").unwrap() * 2.0;
        assert_eq!(e.variables().into_iter().collect::<Vec<_>>(), vec![1]);
        assert!(vars.var("z").is_err());
    }
}
