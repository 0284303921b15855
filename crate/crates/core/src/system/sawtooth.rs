//! The sawtooth graph over [−1, 1]: on each interval [2^{-n-1}, 2^{-n}] an
//! isosceles triangle of height one with apex at 2^{-n-2} + 2^{-n-1}, mirrored
//! for negative abscissae, truncated below 2^{-DEPTH}.

use super::ConeChart;

pub const DEPTH: i32 = 24;

fn p2(k: i32) -> f64 {
    2f64.powi(k)
}

/// Edge segments of the truncated graph.
pub fn segments() -> Vec<([f64; 2], [f64; 2])> {
    let mut out = Vec::with_capacity(4 * DEPTH as usize + 1);
    for n in 0..DEPTH {
        let lo = p2(-n - 1);
        let hi = p2(-n);
        let apex = 3.0 * p2(-n - 2);
        for s in [1.0, -1.0] {
            out.push(([s * lo, 0.0], [s * apex, 1.0]));
            out.push(([s * apex, 1.0], [s * hi, 0.0]));
        }
    }
    out.push(([-p2(-DEPTH), 0.0], [p2(-DEPTH), 0.0]));
    out
}

fn nearest_on_segment(z: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = (((z[0] - a[0]) * d[0] + (z[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
    [a[0] + t * d[0], a[1] + t * d[1]]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Euclidean projection onto the graph (ties resolved toward the first
/// segment in [`segments`] order).
pub fn project(z: [f64; 2]) -> [f64; 2] {
    let mut best = [0.0, 0.0];
    let mut best_d = f64::INFINITY;
    for (a, b) in segments() {
        let p = nearest_on_segment(z, a, b);
        let d = dist(p, z);
        if d < best_d {
            best_d = d;
            best = p;
        }
    }
    best
}

pub fn distance(z: [f64; 2]) -> f64 {
    dist(project(z), z)
}

fn line(dir: [f64; 2]) -> ConeChart {
    ConeChart::line(dir.to_vec())
}

/// Local position on the graph for nonnegative abscissa.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Position {
    Origin,
    RightEnd,
    Valley(i32),
    Apex(i32),
    Rising(i32),
    Falling(i32),
}

pub fn classify(a: f64, y: f64, tol: f64) -> Position {
    if a <= p2(-DEPTH) + tol && y.abs() <= tol {
        return Position::Origin;
    }
    if dist([a, y], [1.0, 0.0]) <= tol {
        return Position::RightEnd;
    }
    for n in 0..DEPTH {
        if dist([a, y], [p2(-n - 1), 0.0]) <= tol {
            return Position::Valley(n);
        }
        if dist([a, y], [3.0 * p2(-n - 2), 1.0]) <= tol {
            return Position::Apex(n);
        }
    }
    let mut best = (f64::INFINITY, Position::Origin);
    for n in 0..DEPTH {
        let lo = [p2(-n - 1), 0.0];
        let apex = [3.0 * p2(-n - 2), 1.0];
        let hi = [p2(-n), 0.0];
        let d_up = dist(nearest_on_segment([a, y], lo, apex), [a, y]);
        let d_down = dist(nearest_on_segment([a, y], apex, hi), [a, y]);
        if d_up < best.0 {
            best = (d_up, Position::Rising(n));
        }
        if d_down < best.0 {
            best = (d_down, Position::Falling(n));
        }
    }
    best.1
}

/// Normal-cone charts following the case table of the set; points with
/// negative abscissa use the mirror image.
pub fn normal_charts(z: [f64; 2], tol: f64) -> Vec<ConeChart> {
    let mirror = z[0] < 0.0;
    let charts = match classify(z[0].abs(), z[1], tol) {
        Position::Origin => vec![line([1.0, 0.0]), line([0.0, 1.0])],
        Position::RightEnd => vec![ConeChart {
            rays: vec![vec![1.0, -4.0]],
            lineality: vec![vec![4.0, 1.0]],
            apex: false,
        }],
        Position::Valley(n) => vec![
            line([0.0, 1.0]),
            line([1.0, -p2(-n - 2)]),
            line([1.0, p2(-n - 3)]),
        ],
        Position::Apex(n) => vec![
            line([1.0, p2(-n - 2)]),
            line([1.0, -p2(-n - 2)]),
            ConeChart {
                rays: vec![vec![1.0, p2(-n - 2)], vec![-1.0, p2(-n - 2)]],
                lineality: vec![],
                apex: true,
            },
        ],
        Position::Rising(n) => vec![line([1.0, -p2(-n - 2)])],
        Position::Falling(n) => vec![line([1.0, p2(-n - 2)])],
    };
    if mirror {
        charts.into_iter().map(|c| c.map(|v| vec![-v[0], v[1]])).collect()
    } else {
        charts
    }
}
