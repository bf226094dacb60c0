//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use coag_core::dual::{adjoint_consistency, q_tail_bound, solve_dual, subsolution_bound};
use coag_core::measure::Grid;
use coag_core::stablecdf::StableProfile;
use coag_core::suite::{invariance_suite, SuiteOptions, SuiteReport};
use coag_core::{
    flux_balance_residual, find_stationary, lambda_continuation, power_law_init, xrho_dist, xrho_norm, CutoffParams,
    Dynamics, GridMeasure, KernelSpec, Params, StationaryOptions, StationaryResult, StepControl,
};
use rayon::prelude::*;
use statrs::function::erf::erfc;

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Model with the standard grid, `delta = 0.2` and `R0 = 1`.
fn model(kernel: KernelSpec, rho: f64, lambda: f64) -> (Dynamics, GridMeasure) {
    let params = Params::new(kernel.gamma, rho, lambda, 0.2, 1.0, 1.0).unwrap();
    let grid = Grid::standard();
    let d = Dynamics::new(params, kernel, CutoffParams::new(lambda).unwrap(), grid.clone()).unwrap();
    (d, power_law_init(&params, &grid))
}

fn constant_model() -> (Dynamics, GridMeasure) {
    model(KernelSpec::constant(1.0).unwrap(), 0.5, 1e-3)
}

fn product_model() -> (Dynamics, GridMeasure) {
    model(KernelSpec::product(0.5).unwrap(), 0.75, 1e-3)
}

fn zero_model() -> (Dynamics, GridMeasure) {
    model(KernelSpec::zero(0.0).unwrap(), 0.5, 1e-3)
}

/// `e^(rho beta t) h0(x e^(beta t))` integrated over each cell.
fn transported(h0: &GridMeasure, params: &Params, t: f64) -> GridMeasure {
    let grow = (params.beta * t).exp();
    let fac = (-params.beta * (1.0 - params.rho) * t).exp();
    let f = |x: f64| fac * h0.cumulative_mass(x * grow).unwrap();
    let e = h0.grid.edges();
    let mut out = h0.clone();
    out.cell_mass = e.windows(2).map(|w| f(w[1]) - f(w[0])).collect();
    out.origin_mass = f(e[0]);
    out
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn zero_kernel_stationary() -> Outcome {
    let start = Instant::now();
    let (d, h0) = zero_model();
    let res = find_stationary(&d, &h0, &StationaryOptions::default()).map_err(err)?;
    let exact = GridMeasure::power_law(d.grid.clone(), 1.0 - d.params.rho, d.params.rho);
    let worst = res.profile.cell_mass.iter().zip(&exact.cell_mass).map(|(a, b)| (a / b - 1.0).abs()).fold(0.0, f64::max);
    let took = start.elapsed();
    Ok((
        res.report.converged && worst <= 1e-3 && took < Duration::from_secs(60),
        format!("N = {}, sup relative cell error {worst:.2e} (<= 1e-3), converged at t = {:.1}, {}", d.grid.cells(), res.report.final_time, secs(took)),
    ))
}

fn transport_exactness() -> Outcome {
    let (d, h0) = zero_model();
    let exact = transported(&h0, &d.params, 1.0);
    let got = d.evolve(&h0, 1.0).map_err(err)?;
    let rel = xrho_dist(&got, &exact, &d.params).map_err(err)? / xrho_norm(&exact, &d.params);
    Ok((rel <= 1e-3, format!("relative X_rho error at t = 1: {rel:.2e} (<= 1e-3)")))
}

fn fat_tail(res: &StationaryResult, rho: f64, took: Duration) -> Outcome {
    let fit = res.report.tail_fit.ok_or("tail fit failed")?;
    let amp_err = fit.amplitude / (1.0 - rho) - 1.0;
    let ok = res.report.converged
        && (fit.exponent - rho).abs() <= 0.02
        && amp_err.abs() <= 0.05
        && took <= Duration::from_secs(600);
    Ok((
        ok,
        format!(
            "exponent {:.4} (rho = {rho} +- 0.02), amplitude {:.4} ({:+.2}% of 1-rho, within 5%), converged at t = {:.1}, {}",
            fit.exponent,
            fit.amplitude,
            100.0 * amp_err,
            res.report.final_time,
            secs(took)
        ),
    ))
}

fn suite_line(reports: &[(&str, &SuiteReport)], names: &[&str]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, rep) in reports {
        for c in rep.checks.iter().filter(|c| names.contains(&c.name.as_str())) {
            ok &= c.passed;
            parts.push(format!("{label} {}: {} ({})", c.name, if c.passed { "ok" } else { "violated" }, c.detail));
        }
    }
    Ok((ok, parts.join("; ")))
}

fn adjoint() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, (d, h0), tol) in [("constant", constant_model(), 1e-3), ("zero", zero_model(), 1e-12)] {
        let traj = d.evolve_trajectory(&h0, 0.5).map_err(err)?;
        for r in [10.0, 100.0] {
            let dual = solve_dual(&d, &traj, r, 0.5).map_err(err)?;
            let rep = adjoint_consistency(&d, &traj, &dual).map_err(err)?;
            ok &= rep.relative_residual <= tol;
            parts.push(format!("{label} R = {r}: {:.1e} (<= {tol:e})", rep.relative_residual));
        }
    }
    Ok((ok, parts.join(", ")))
}

fn subsolution() -> Outcome {
    let (d, h0) = constant_model();
    let t = 0.5;
    let traj = d.evolve_trajectory(&h0, t).map_err(err)?;
    let profile = StableProfile::new(d.params.a).map_err(err)?;
    let mut ok = true;
    let mut parts = Vec::new();
    let mut global = 0.0f64;
    for r in [10.0, 100.0] {
        let dual = solve_dual(&d, &traj, r, t).map_err(err)?;
        let rep = subsolution_bound(&d, &dual, &profile, 1e-3).map_err(err)?;
        let k = q_tail_bound(&d, &traj, r, 1.0).map_err(err)?;
        match rep.m_star {
            Some(m) if m <= 1e4 => {
                global = global.max(m);
                parts.push(format!("R = {r}: M* = {m:.4} over {} fields, K* = {:.3}", rep.fields_checked, k.k_star));
            }
            _ => {
                ok = false;
                parts.push(format!("R = {r}: no M <= 1e4 (worst margin {:.2e})", rep.worst_margin));
            }
        }
    }
    Ok((ok, format!("{}; single M = {global:.4} serves both", parts.join(", "))))
}

fn stable_profile() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    // (i) closed form at a = 1/2
    let half = StableProfile::new(0.5).map_err(err)?;
    let mut worst = 0.0f64;
    for k in 0..20 {
        let y = 0.05 * 10f64.powf(k as f64 * 5.0 / 19.0);
        worst = worst.max((half.eval(y).map_err(err)? - erfc((PI / y).sqrt())).abs());
    }
    ok &= worst <= 1e-6;
    parts.push(format!("(i) max |W - erfc(sqrt(pi/Y))| = {worst:.1e} at 20 points"));
    // (ii) integral identity at 10 points per index
    for a in [0.3, 0.5, 0.7] {
        let prof = StableProfile::new(a).map_err(err)?;
        let res: Vec<f64> = prof
            .identity_points()
            .par_iter()
            .map(|&y| prof.identity_residual(y).map(|r| r.relative))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let w = res.iter().fold(0.0f64, |m, v| m.max(*v));
        ok &= w <= 1e-4 && res.len() >= 10;
        parts.push(format!("(ii) a = {a}: worst identity residual {w:.1e} at {} points", res.len()));
    }
    // (iii) tail law at a = 1/2
    let spread = |prof: &StableProfile| -> Result<f64, String> {
        let v: Vec<f64> = (0..=20)
            .map(|k| {
                let y = 1e2 * 10f64.powf(k as f64 / 10.0);
                prof.deriv(y).map(|d| d * y.powf(1.0 + prof.a))
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let (lo, hi) = v.iter().fold((f64::INFINITY, 0.0f64), |(l, h), x| (l.min(*x), h.max(*x)));
        Ok(hi / lo - 1.0)
    };
    let s = spread(&half)?;
    ok &= s <= 0.05;
    parts.push(format!("(iii) a = 0.5: Y^(1+a) W' varies by {:.2}% on [1e2, 1e4]", 100.0 * s));
    // (iv) Laplace round trip
    let mut lap = 0.0f64;
    for a in [0.3, 0.5, 0.7] {
        let prof = StableProfile::new(a).map_err(err)?;
        for p in [0.5, 1.0, 2.0] {
            let exact = prof.laplace(p).map_err(err)?;
            lap = lap.max((prof.numerical_laplace(p).map_err(err)? / exact - 1.0).abs());
        }
    }
    ok &= lap <= 1e-5;
    parts.push(format!("(iv) worst Laplace round-trip error {lap:.1e}"));
    Ok((ok, parts.join("; ")))
}

/// Spread of `Y^(1+a) W'` on `[1e2, 1e4]` at other indices, reported only.
fn tail_spread_report() -> String {
    [0.3, 0.4, 0.7]
        .iter()
        .map(|&a| {
            let prof = StableProfile::new(a).unwrap();
            let v: Vec<f64> = [1e2, 1e3, 1e4].iter().map(|&y| prof.deriv(y).unwrap() * y.powf(1.0 + a)).collect();
            format!("a = {a}: {:.3} / {:.3} / {:.3}", v[0], v[1], v[2])
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn restrict(fine: &GridMeasure, coarse: &Grid) -> GridMeasure {
    let mut out = GridMeasure::zeros(coarse.clone(), fine.tail_exponent);
    let k = fine.cells() / coarse.cells();
    out.cell_mass = fine.cell_mass.chunks(k).map(|c| c.iter().sum()).collect();
    out.origin_mass = fine.origin_mass;
    out.tail_amplitude = fine.tail_amplitude;
    out
}

fn structure(reports: &[(&str, &SuiteReport)]) -> Outcome {
    let (ok_suite, detail) = suite_line(reports, &["rearrangement_identity", "gain_positivity"])?;
    let (base, _) = constant_model();
    let p = base.params;
    let runs: Vec<GridMeasure> = (0..3u32)
        .into_par_iter()
        .map(|level| {
            let ratio = 2f64.powf(0.25 * 0.5f64.powi(level as i32));
            let grid = Grid::geometric(1e-4, ratio, 160 << level).unwrap();
            let d = Dynamics::with_control(p, base.kernel, base.cutoff, grid.clone(), StepControl::default()).unwrap();
            d.evolve(&power_law_init(&p, &grid), 0.5)
        })
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let coarse = &runs[0].grid;
    let d1 = xrho_dist(&runs[0], &restrict(&runs[1], coarse), &p).map_err(err)?;
    let d2 = xrho_dist(&restrict(&runs[1], coarse), &restrict(&runs[2], coarse), &p).map_err(err)?;
    let order = (d1 / d2).log2();
    Ok((ok_suite && order >= 1.0, format!("{detail}; refinement order {order:.2} (>= 1) from distances {d1:.2e}, {d2:.2e}")))
}

fn flux_balance(profiles: &[(&str, &Dynamics, &StationaryResult)]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, d, res) in profiles {
        if !res.report.converged {
            parts.push(format!("{label}: not converged, skipped"));
            continue;
        }
        let mut vals = Vec::new();
        for r in [10.0, 100.0, 1000.0] {
            let v = flux_balance_residual(d, &res.profile, r).map_err(err)?;
            ok &= v.value.abs() <= 1e-2 && !v.degenerate;
            vals.push(format!("{:.1e}", v.value.abs()));
        }
        parts.push(format!("{label}: {}", vals.join("/")));
    }
    Ok((ok, format!("|residual| at R = 10/100/1000 (<= 1e-2): {}", parts.join(", "))))
}

fn main() {
    let total = Instant::now();
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !ok {
            failed += 1;
        }
        println!("acceptance {id:02} {name:<28} {}  {detail}", if ok { "PASS" } else { "FAIL" });
    };

    report(1, "zero_kernel_stationary", zero_kernel_stationary());
    report(2, "transport_exactness", transport_exactness());

    let (cd, ch0) = constant_model();
    let (pd, ph0) = product_model();
    let start = Instant::now();
    let cres = find_stationary(&cd, &ch0, &StationaryOptions::default());
    let ctime = start.elapsed();
    let start = Instant::now();
    let pres = find_stationary(&pd, &ph0, &StationaryOptions::default());
    let ptime = start.elapsed();
    report(3, "fat_tail_constant_kernel", cres.as_ref().map_err(err).and_then(|r| fat_tail(r, 0.5, ctime)));
    report(4, "fat_tail_product_kernel", pres.as_ref().map_err(err).and_then(|r| fat_tail(r, 0.75, ptime)));

    let opts = SuiteOptions::default();
    let csuite = invariance_suite(&cd, &ch0, &opts);
    let psuite = invariance_suite(&pd, &ph0, &opts);
    let suites = match (&csuite, &psuite) {
        (Ok(c), Ok(p)) => Ok(vec![("constant", c), ("product", p)]),
        (Err(e), _) | (_, Err(e)) => Err(err(e)),
    };
    report(5, "envelope_invariance", suites.clone().and_then(|s| suite_line(&s, &["upper_envelope", "lower_envelope"])));
    report(6, "growth_bound", suites.clone().and_then(|s| suite_line(&s, &["growth_bound"])));
    report(7, "adjoint_consistency", adjoint());
    report(8, "dual_subsolution_bound", subsolution());
    report(9, "stable_profile", stable_profile());
    println!("           tail spread at other indices (reported only): {}", tail_spread_report());
    report(10, "discrete_structure", suites.and_then(|s| structure(&s)));

    let lambdas = [1e-1, 1e-2, 1e-3];
    let cont = lambda_continuation(&cd.params, &cd.kernel, &cd.cutoff, &cd.grid, cd.control, &lambdas, &StationaryOptions::default());
    let leg_dynamics: Vec<Dynamics> = lambdas
        .iter()
        .map(|&l| {
            let p = Params::new(0.0, 0.5, l, 0.2, 1.0, 1.0).unwrap();
            Dynamics::new(p, cd.kernel, CutoffParams::new(l).unwrap(), cd.grid.clone()).unwrap()
        })
        .collect();
    let decay_outcome = (|| -> Outcome {
        let zero = {
            let (zd, zh0) = zero_model();
            let r = find_stationary(&zd, &zh0, &StationaryOptions::default()).map_err(err)?;
            (zd, r)
        };
        let (c, p) = (cres.as_ref().map_err(err)?, pres.as_ref().map_err(err)?);
        let (rep, profiles) = cont.as_ref().map_err(err)?;
        let legs: Vec<StationaryResult> = rep
            .reports
            .iter()
            .zip(profiles)
            .map(|(r, prof)| StationaryResult { profile: prof.clone(), report: r.clone() })
            .collect();
        let mut all: Vec<(&str, &Dynamics, &StationaryResult)> =
            vec![("zero", &zero.0, &zero.1), ("constant", &cd, c), ("product", &pd, p)];
        let names = ["lambda 1e-1", "lambda 1e-2", "lambda 1e-3"];
        for ((name, d), leg) in names.iter().zip(&leg_dynamics).zip(&legs) {
            all.push((name, d, leg));
        }
        flux_balance(&all)
    })();
    report(11, "stationarity_residual", decay_outcome);
    report(
        12,
        "lambda_continuation",
        cont.as_ref().map_err(err).map(|(rep, _)| {
            let conv = rep.reports.iter().all(|r| r.converged);
            (
                rep.strictly_decreasing && conv,
                format!(
                    "distances d(1e-1,1e-2) = {:.4e} > d(1e-2,1e-3) = {:.4e}; all legs converged: {conv}",
                    rep.distances[0], rep.distances[1]
                ),
            )
        }),
    );
    println!("acceptance summary: {} of 12 criteria passed in {}", 12 - failed, secs(total.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}
