//! Acceptance suite: one line per criterion, non-zero exit on any failure.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cqkit::bilevel::*;
use cqkit::config::Settings;
use cqkit::cq::{check_fullrank, check_lcq, check_nnamcq, probe_rcpld, probe_rcrcq, SamplingPlan, Verdict};
use cqkit::errorbound::{estimate_error_bound_modulus, Residual};
use cqkit::expr::{Expr, Variables};
use cqkit::linalg::{caratheodory_reduce, family_rank};
use cqkit::stationarity::{check_mstationarity, StationarityVerdict};
use cqkit::system::{CatalogSet, FeasibilitySystem};
use cqkit::vcalc::{dist_omega, normal_cone_omega, regular_normal_base, Norm, OmegaBranch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed < Duration::from_secs(limit_s), || {
        format!("runtime {:.2}s exceeds {limit_s}s", elapsed.as_secs_f64())
    })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let blp = common::example_5_1();
    let cfg = ValueConfig::default();
    let mut worst = 0.0f64;
    for k in 0..100 {
        let x = -3.0 + 5.0 * k as f64 / 99.0;
        let v = value_function(&blp, &[x], &cfg).map_err(err)?;
        worst = worst.max((v.value - common::v_5_1(x)).abs());
    }
    ensure(worst <= 1e-6, || format!("max |V − V_ref| = {worst:e}"))?;
    let s = value_function(&blp, &[-2.0], &cfg).map_err(err)?;
    let mut ys: Vec<f64> = s.minimizers.iter().map(|y| y[0]).collect();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ensure(
        ys.len() == 2 && (ys[0] + 2.0).abs() <= cfg.cluster_tol && (ys[1] - 1.0).abs() <= cfg.cluster_tol,
        || format!("S(−2) = {ys:?}"),
    )?;
    let cp = build_combined_program(&blp, &cfg).map_err(err)?;
    let p1 = [-2.0, -2.0, 9.0, 0.0];
    let p2 = [-1.0, 1.0, 0.0, 0.0];
    let sj = matrix_sj(&cp, &p1, 1e-8, 1e-8).map_err(err)?;
    ensure(sj.rank.rank == 2, || format!("rank SJ = {}", sj.rank.rank))?;
    let jt = matrix_jstar(&cp, &p2, 1e-8, 1e-8).map_err(err)?;
    ensure(jt.rank.rank == 2, || format!("rank J̃ = {}", jt.rank.rank))?;
    let s = Settings::default();
    for p in [p1, p2] {
        let r = check_mstationarity(&cp.system, &cp.objective, &p, &s).map_err(err)?;
        ensure(r.verdict == StationarityVerdict::Stationary, || format!("{p:?}: {}", r.verdict))?;
    }
    within(t.elapsed(), 10)?;
    Ok(format!(
        "max V error {worst:.1e}, S(−2) = {{{:.6}, {:.6}}}, rank SJ 2, rank J̃ 2, stationary at both points, {:.2}s",
        ys[0],
        ys[1],
        t.elapsed().as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let blp = common::example_5_2();
    let cfg = ValueConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let x1: f64 = rng.gen_range(-2.0..2.0);
        let x2 = if k % 10 == 0 { x1 } else { rng.gen_range(-2.0..2.0) };
        let v = value_function(&blp, &[x1, x2], &cfg).map_err(err)?;
        worst = worst.max((v.value - common::v_5_2(x1, x2)).abs());
    }
    ensure(worst <= 1e-6, || format!("max |V − V_ref| = {worst:e}"))?;
    for a in [-1.0, 0.5] {
        let mut g = danskin_generators(&blp, &[a, a], &cfg).map_err(err)?;
        g.sort_by(|p, q| p[0].partial_cmp(&q[0]).unwrap());
        let ok = g.len() == 2
            && g.iter()
                .zip([[0.5, -0.5], [2.0, -2.0]])
                .all(|(u, w)| (u[0] - w[0]).abs() <= 1e-6 && (u[1] - w[1]).abs() <= 1e-6);
        ensure(ok, || format!("Danskin generators at x1 = x2 = {a}: {g:?}"))?;
    }
    let cp = build_combined_program(&blp, &cfg).map_err(err)?;
    let mut checked = 0;
    for p in common::reps_5_2(0.3) {
        let gens = cp.oracle.generators_x(&p[..2]).map_err(err)?;
        for w in &gens.0 {
            for alpha in [false, true] {
                let r = matrix_jprime(&cp, &p, alpha, w, &JprimeChoice::default(), 1e-8, 1e-8).map_err(err)?;
                ensure(r.rank.rank == 4, || format!("rank J′ = {} at {p:?}, α = {alpha}", r.rank.rank))?;
                checked += 1;
            }
        }
    }
    within(t.elapsed(), 10)?;
    Ok(format!(
        "max V error {worst:.1e}, Danskin {{(1/2,−1/2),(2,−2)}}, rank J′ = 4 in {checked} cases, {:.2}s",
        t.elapsed().as_secs_f64()
    ))
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let sys = common::example_4_1();
    let x = common::X_4_1;
    let s = Settings::default();
    let r = check_nnamcq(&sys, &x, &s).map_err(err)?;
    ensure(r.verdict == Verdict::Fails, || format!("NNAMCQ verdict {}", r.verdict))?;
    let c = r.certificate.ok_or("missing certificate")?;
    let res = c.combination.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure(res <= 1e-8, || format!("certificate residual {res:e}"))?;
    let rc = probe_rcrcq(&sys, &x, &SamplingPlan::default(), &s).map_err(err)?;
    ensure(rc.verdict == Verdict::ViolatedWithWitness, || format!("RCRCQ verdict {}", rc.verdict))?;
    let w = rc.witness.ok_or("missing witness")?;
    let seq_ok = w.sequence.iter().all(|st| st.rank == 3 && family_rank(&st.family, 4, s.rank_tol).rank == 3);
    let lim_ok = w.limit_rank == 2 && family_rank(&w.limit_family, 4, s.rank_tol).rank == 2;
    ensure(seq_ok && lim_ok, || "witness ranks do not re-verify as 3 vs 2".into())?;
    let rp = probe_rcpld(&sys, &x, &SamplingPlan::default(), &s).map_err(err)?;
    ensure(rp.verdict == Verdict::NoViolationFound, || format!("RCPLD verdict {}", rp.verdict))?;
    within(t.elapsed(), 30)?;
    Ok(format!(
        "NNAMCQ fails (residual {res:.1e}), RCRCQ witness ranks 3 vs 2, RCPLD no violation, {:.2}s",
        t.elapsed().as_secs_f64()
    ))
}

/// Nearest point on each half-axis of `Ω`, minimized per norm.
fn omega_oracle(a: f64, b: f64, norm: Norm) -> f64 {
    let on_first = [(-a).max(0.0), b.abs()];
    let on_second = [a.abs(), (-b).max(0.0)];
    let n = |v: [f64; 2]| match norm {
        Norm::L1 => v[0] + v[1],
        Norm::Linf => v[0].max(v[1]),
    };
    n(on_first).min(n(on_second))
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..41 {
        for j in 0..41 {
            let a = -2.0 + 0.1 * i as f64;
            let b = -2.0 + 0.1 * j as f64;
            for norm in [Norm::L1, Norm::Linf] {
                worst = worst.max((dist_omega(a, b, norm) - omega_oracle(a, b, norm)).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max dist_omega deviation {worst:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tol = 1e-9;
    let delta = 1e-3;
    let mut total = 0;
    for branch in [OmegaBranch::FirstZero, OmegaBranch::SecondZero, OmegaBranch::Biactive] {
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(0.1..2.0);
            let (a, b) = match branch {
                OmegaBranch::FirstZero => (0.0, t),
                OmegaBranch::SecondZero => (t, 0.0),
                OmegaBranch::Biactive => (0.0, 0.0),
            };
            let cone = normal_cone_omega(a, b, tol).map_err(err)?;
            ensure(cone.branch == branch, || format!("branch {:?} at ({a}, {b})", cone.branch))?;
            let chart = &cone.charts[rng.gen_range(0..cone.charts.len())];
            let mut v = [0.0; 2];
            for r in &chart.rays {
                let c: f64 = rng.gen_range(0.0..3.0);
                v[0] += c * r[0];
                v[1] += c * r[1];
            }
            for l in &chart.lineality {
                let c: f64 = rng.gen_range(-3.0..3.0);
                v[0] += c * l[0];
                v[1] += c * l[1];
            }
            let base = regular_normal_base(a, b, v, delta, tol)
                .ok_or_else(|| format!("no base point for v = {v:?} at ({a}, {b})"))?;
            ensure((base[0] - a).hypot(base[1] - b) <= delta + tol, || format!("base {base:?} too far"))?;
            // points of Ω near the base, closer than the base is to any kink
            let radius = if base == [0.0, 0.0] { delta } else { 0.5 * base[0].max(base[1]) };
            for _ in 0..4 {
                let s: f64 = rng.gen_range(0.0..radius);
                let z = if base == [0.0, 0.0] {
                    if rng.gen_bool(0.5) { [s, 0.0] } else { [0.0, s] }
                } else if base[0] == 0.0 {
                    [0.0, base[1] + if rng.gen_bool(0.5) { s } else { -s }]
                } else {
                    [base[0] + if rng.gen_bool(0.5) { s } else { -s }, 0.0]
                };
                let dz = [z[0] - base[0], z[1] - base[1]];
                let inner = v[0] * dz[0] + v[1] * dz[1];
                let scale = tol * dz[0].hypot(dz[1]) * (1.0 + v[0].hypot(v[1]));
                ensure(inner <= scale, || format!("⟨v, z − p⟩ = {inner:e} for v = {v:?}, p = {base:?}"))?;
            }
            total += 1;
        }
    }
    Ok(format!("41×41 grid max deviation {worst:.1e} (l1, l∞); {total} limiting-normal samples pass"))
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut run = 0;
    let mut inst = 0;
    while run < 1000 {
        inst += 1;
        let d = rng.gen_range(1..=8);
        let nb = rng.gen_range(0..=d.min(5));
        let base: Vec<Vec<f64>> = (0..nb).map(|_| gaussian(&mut rng, d)).collect();
        let ne = rng.gen_range(0..=6);
        let mut extras: Vec<Vec<f64>> = Vec::new();
        for _ in 0..ne {
            // some extras are combinations of earlier vectors
            if !extras.is_empty() && rng.gen_bool(0.3) {
                let k = rng.gen_range(0..extras.len());
                let c: f64 = rng.gen_range(-2.0..2.0);
                let e: Vec<f64> = extras[k].iter().map(|v| c * v).collect();
                extras.push(e);
            } else {
                extras.push(gaussian(&mut rng, d));
            }
        }
        let alphas: Vec<f64> = (0..ne)
            .map(|_| {
                let m: f64 = rng.gen_range(0.1..2.0);
                if rng.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        let beta: Vec<f64> = (0..nb).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut v = vec![0.0; d];
        for (b, c) in base.iter().zip(&beta) {
            v.iter_mut().zip(b).for_each(|(vi, bi)| *vi += c * bi);
        }
        for (e, a) in extras.iter().zip(&alphas) {
            v.iter_mut().zip(e).for_each(|(vi, ei)| *vi += a * ei);
        }
        let base_rank = family_rank(&base, d, 1e-8).rank;
        if base_rank < nb {
            continue;
        }
        run += 1;
        let r = caratheodory_reduce(&v, &base, &extras, &alphas, 1e-10).map_err(|e| format!("instance {inst}: {e}"))?;
        let mut recon = vec![0.0; d];
        for (b, c) in base.iter().zip(&r.base_coefficients) {
            recon.iter_mut().zip(b).for_each(|(ri, bi)| *ri += c * bi);
        }
        for (&i, c) in r.kept.iter().zip(&r.extra_coefficients) {
            ensure(c * alphas[i] > 0.0, || format!("instance {inst}: sign flip at extra {i}"))?;
            recon.iter_mut().zip(&extras[i]).for_each(|(ri, ei)| *ri += c * ei);
        }
        let err = recon.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("instance {inst}: reconstruction error {err:e}"))?;
        let mut family = base.clone();
        family.extend(r.kept.iter().map(|&i| extras[i].clone()));
        ensure(family_rank(&family, d, 1e-8).rank == family.len(), || {
            format!("instance {inst}: reduced family is dependent")
        })?;
    }
    Ok(format!("{run} instances, max reconstruction error {worst:.1e}, signs and independence verified"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    let mut worst_fd = 0.0f64;
    let mut worst_sym = 0.0f64;
    for n in 0..10_000 {
        let nvars = rng.gen_range(1..=3);
        let e: Expr = common::random_smooth_expr(&mut rng, 6, nvars);
        let x: Vec<f64> = (0..nvars).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut firsts = Vec::new();
        for i in 0..nvars {
            let d = e.derivative(i).map_err(err)?;
            let sym = d.eval(&x).map_err(err)?;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (e.eval(&xp).map_err(err)? - e.eval(&xm).map_err(err)?) / (2.0 * h);
            let rel = (sym - fd).abs() / sym.abs().max(1.0);
            worst_fd = worst_fd.max(rel);
            ensure(rel <= 1e-6, || format!("expression {n}: symbolic {sym} vs FD {fd}"))?;
            firsts.push(d);
        }
        for i in 0..nvars {
            for j in i + 1..nvars {
                let dij = firsts[i].derivative(j).map_err(err)?.eval(&x).map_err(err)?;
                let dji = firsts[j].derivative(i).map_err(err)?.eval(&x).map_err(err)?;
                let gap = (dij - dji).abs() / dij.abs().max(1.0);
                worst_sym = worst_sym.max(gap);
                ensure(gap <= 1e-12, || format!("expression {n}: ∂²/∂{i}∂{j} = {dij} vs {dji}"))?;
            }
        }
    }
    Ok(format!(
        "10000 expressions, max FD relative error {worst_fd:.1e}, max Hessian asymmetry {worst_sym:.1e}"
    ))
}

fn criterion_7() -> Outcome {
    let s = Settings::default();
    let corpus = common::affine_corpus(7, 20);
    let mut lcq = 0;
    let mut full = 0;
    let plan = SamplingPlan {
        short_circuit: false,
        ..SamplingPlan::default()
    };
    for (k, (sys, x)) in corpus.iter().enumerate() {
        if check_lcq(sys).verdict == Verdict::Holds {
            lcq += 1;
            let a = probe_rcrcq(sys, x, &SamplingPlan::default(), &s).map_err(err)?.verdict;
            let b = probe_rcpld(sys, x, &SamplingPlan::default(), &s).map_err(err)?.verdict;
            ensure(!a.is_violation() && !b.is_violation(), || format!("system {k}: LCQ holds but RCRCQ {a}, RCPLD {b}"))?;
        }
        if check_fullrank(sys, x, &s).map_err(err)?.verdict == Verdict::Holds {
            full += 1;
            let r = probe_rcpld(sys, x, &plan, &s).map_err(err)?;
            ensure(!r.verdict.is_violation(), || format!("system {k}: full rank holds but RCPLD {}", r.verdict))?;
        }
    }
    Ok(format!("20 systems, LCQ holds on {lcq}, full rank on {full} (probed without short-circuit), no counterexamples"))
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let cp = build_combined_program(&common::example_5_1(), &ValueConfig::default()).map_err(err)?;
    let plan = SamplingPlan {
        r0: 1e-2,
        levels: 0,
        points_per_radius: 1000,
        ..SamplingPlan::default()
    };
    let s = Settings::default();
    let r = estimate_error_bound_modulus(&cp.system, &[-2.0, -2.0, 9.0, 0.0], &plan, &Residual::full(), None, &s)
        .map_err(err)?;
    let alpha = r.alpha_hat.filter(|a| a.is_finite()).ok_or("alpha_hat is not finite")?;
    ensure(r.samples == 1000, || format!("{} samples", r.samples))?;
    let control = FeasibilitySystem::new(
        Variables::new(["x1"]),
        vec![],
        vec![Expr::powi(Expr::var(0), 2)],
        vec![],
        vec![],
        vec![CatalogSet::full(1)],
    )
    .map_err(err)?;
    let plan = SamplingPlan {
        r0: 1e-1,
        rho: 0.1,
        levels: 3,
        points_per_radius: 100,
        ..SamplingPlan::default()
    };
    let rc = estimate_error_bound_modulus(&control, &[0.0], &plan, &Residual::full(), None, &s).map_err(err)?;
    let alphas: Vec<f64> = rc.per_radius.iter().map(|e| e.alpha_hat.unwrap_or(f64::NAN)).collect();
    // ratios are exactly 10 up to one rounding of 1/r
    let grows = alphas.windows(2).all(|w| w[1] / w[0] >= 10.0 * (1.0 - 1e-9));
    ensure(grows, || format!("control alpha_hat per radius {alphas:?}"))?;
    Ok(format!(
        "CP alpha_hat = {alpha:.4} over 1000 samples at r = 1e-2; control alpha_hat {} over radii 1e-1..1e-4, {:.2}s",
        alphas.iter().map(|a| format!("{a:.4e}")).collect::<Vec<_>>().join(", "),
        t.elapsed().as_secs_f64()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("Example 5.1 reproduction", criterion_1),
        ("Example 5.2 reproduction", criterion_2),
        ("Example 4.1 reproduction", criterion_3),
        ("Omega calculus oracle equivalence", criterion_4),
        ("Caratheodory reduction suite", criterion_5),
        ("Gradient correctness", criterion_6),
        ("Implication chain on affine corpus", criterion_7),
        ("Error-bound probes", criterion_8),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("acceptance {}: PASS  {name}: {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {}: FAIL  {name}: {detail}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
