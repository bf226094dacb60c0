//! Stationary profiles: long-time search, tail fits, the flux balance
//! residual, and continuation in the cutoff parameter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Dynamics, EvolutionState, StepControl};
use crate::kernel::{CutoffParams, KernelSpec};
use crate::measure::{
    envelope_check_lower, envelope_check_upper, power_law_init, xrho_dist, EnvelopeReport, Grid, GridMeasure, Params,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    /// Fitted `rho` in `h ~ A x^(-rho)`.
    pub exponent: f64,
    pub amplitude: f64,
    pub cells: usize,
}

/// Least-squares fit of `log m_i` against `log p_i` over the cells whose
/// pivots lie in `[lo, hi]`. The amplitude follows from the exact cell
/// integral of `A x^(-rho)`, so exact power-law data is recovered to roundoff.
pub fn tail_fit(profile: &GridMeasure, lo: f64, hi: f64) -> Result<TailFit> {
    let pivots = profile.grid.pivots();
    let pts: Vec<(f64, f64)> = pivots
        .iter()
        .zip(&profile.cell_mass)
        .filter(|(p, m)| **p >= lo && **p <= hi && **m > 0.0)
        .map(|(p, m)| (p.ln(), m.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Domain(format!("tail window [{lo}, {hi}] holds fewer than three cells")));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let exponent = 1.0 - slope;
    let intercept = my - slope * mx;
    // cell mass of A x^(-rho) on [p/sqrt(r), p sqrt(r)] is A p^(1-rho) k / (1-rho)
    let e = 1.0 - exponent;
    let k = profile.grid.ratio().powf(0.5 * e) - profile.grid.ratio().powf(-0.5 * e);
    let amplitude = intercept.exp() * e / k;
    Ok(TailFit { exponent, amplitude, cells: pts.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluxBalanceResidual {
    pub r: f64,
    /// `(I(R) - beta R h(R) + beta (1-rho) F(R)) / (beta (1-rho) F(R))`.
    pub value: f64,
    pub flux: f64,
    /// Set when `F(R) = 0` and the ratio is undefined (reported as 0).
    pub degenerate: bool,
}

/// Relative residual of the stationary flux balance at `R`.
pub fn flux_balance_residual(dynamics: &Dynamics, profile: &GridMeasure, r: f64) -> Result<FluxBalanceResidual> {
    let p = &dynamics.params;
    let flux = dynamics.gain_flux(profile, r)?;
    let f = profile.cumulative_mass(r)?;
    let h = profile.density(r)?;
    let scale = p.beta * (1.0 - p.rho) * f;
    if scale == 0.0 {
        return Ok(FluxBalanceResidual { r, value: 0.0, flux, degenerate: true });
    }
    let value = (flux - p.beta * r * h + p.beta * (1.0 - p.rho) * f) / scale;
    Ok(FluxBalanceResidual { r, value, flux, degenerate: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryOptions {
    /// Converged once `dist(h(t), h(t - dt)) / dt` falls below this.
    pub tol: f64,
    pub t_max: f64,
    /// Interval between comparisons; rounded up to whole chunks.
    pub snapshot_dt: f64,
    /// Locations for the flux-balance residual.
    pub probes: Vec<f64>,
    /// Window for the tail fit.
    pub fit_window: (f64, f64),
}

impl Default for StationaryOptions {
    fn default() -> Self {
        StationaryOptions { tol: 1e-4, t_max: 200.0, snapshot_dt: 0.5, probes: vec![10.0, 100.0, 1000.0, 10000.0], fit_window: (1e2, 1e4) }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationaryReport {
    pub converged: bool,
    pub lambda: f64,
    pub final_time: f64,
    /// Last value of `dist / dt`.
    pub stationarity_residual: f64,
    pub history: Vec<(f64, f64)>,
    pub tail_fit: Option<TailFit>,
    pub flux_balance: Vec<FluxBalanceResidual>,
    /// Envelope checks on the final profile, with slack 1e-2.
    pub upper_envelope: EnvelopeReport,
    pub lower_envelope: EnvelopeReport,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct StationaryResult {
    pub profile: GridMeasure,
    pub report: StationaryReport,
}

/// Evolves `h0` until the weighted distance between successive snapshots,
/// per unit time, drops below `opts.tol`.
pub fn find_stationary(dynamics: &Dynamics, h0: &GridMeasure, opts: &StationaryOptions) -> Result<StationaryResult> {
    if !(opts.tol > 0.0 && opts.t_max > 0.0 && opts.snapshot_dt > 0.0) {
        return Err(Error::config("stationary", "tol, t_max and snapshot_dt must be positive"));
    }
    dynamics.check_measure(h0)?;
    let chunk = dynamics.chunk_length();
    let chunks = (opts.snapshot_dt / chunk).ceil().max(1.0);
    let interval = chunks * chunk;
    let mut state = EvolutionState::new(h0.clone());
    let mut prev = h0.clone();
    let mut history = Vec::new();
    let mut converged = false;
    let mut rate = f64::INFINITY;
    let mut steps = 0;
    let mut k = 0.0;
    while state.t < opts.t_max {
        k += 1.0;
        let target = (k * interval).min(opts.t_max);
        steps += dynamics.advance(&mut state, target, None)?.steps;
        let (now, _) = dynamics.to_physical(&state);
        rate = xrho_dist(&now, &prev, &dynamics.params)? / (target - prev_time(&history));
        history.push((target, rate));
        prev = now;
        if rate < opts.tol {
            converged = true;
            break;
        }
    }
    let profile = prev;
    let tail = tail_fit(&profile, opts.fit_window.0, opts.fit_window.1).ok();
    let mut flux_balance = Vec::new();
    for &r in &opts.probes {
        if r > profile.grid.x_min() && r < profile.grid.x_max() {
            flux_balance.push(flux_balance_residual(dynamics, &profile, r)?);
        }
    }
    let upper_envelope = envelope_check_upper(&profile, &dynamics.params, 1e-2);
    let lower_envelope = envelope_check_lower(&profile, &dynamics.params, 1e-2);
    Ok(StationaryResult {
        profile,
        report: StationaryReport {
            converged,
            lambda: dynamics.cutoff.lambda,
            final_time: state.t,
            stationarity_residual: rate,
            history,
            tail_fit: tail,
            flux_balance,
            upper_envelope,
            lower_envelope,
            steps,
        },
    })
}

fn prev_time(history: &[(f64, f64)]) -> f64 {
    history.last().map(|h| h.0).unwrap_or(0.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuationReport {
    pub lambdas: Vec<f64>,
    pub reports: Vec<StationaryReport>,
    /// Distance between the profiles at successive `lambdas`.
    pub distances: Vec<f64>,
    pub strictly_decreasing: bool,
}

/// Stationary profiles for a sequence of cutoff parameters, each started
/// from the power-law datum. Legs run concurrently.
pub fn lambda_continuation(
    params: &Params,
    kernel: &KernelSpec,
    cutoff: &CutoffParams,
    grid: &Grid,
    control: StepControl,
    lambdas: &[f64],
    opts: &StationaryOptions,
) -> Result<(ContinuationReport, Vec<GridMeasure>)> {
    let legs: Vec<Result<StationaryResult>> = lambdas
        .par_iter()
        .map(|&lam| {
            let p = Params::new(params.gamma, params.rho, lam, params.delta, params.r0, params.m)?;
            let c = CutoffParams::with_smoothness(lam, cutoff.smoothness)?;
            let d = Dynamics::with_control(p, *kernel, c, grid.clone(), control)?;
            find_stationary(&d, &power_law_init(&p, grid), opts)
        })
        .collect();
    let legs: Vec<StationaryResult> = legs.into_iter().collect::<Result<_>>()?;
    let distances = legs
        .windows(2)
        .map(|w| xrho_dist(&w[0].profile, &w[1].profile, params))
        .collect::<Result<Vec<_>>>()?;
    let strictly_decreasing = distances.windows(2).all(|w| w[1] < w[0]);
    let profiles = legs.iter().map(|l| l.profile.clone()).collect();
    Ok((
        ContinuationReport {
            lambdas: lambdas.to_vec(),
            reports: legs.into_iter().map(|l| l.report).collect(),
            distances,
            strictly_decreasing,
        },
        profiles,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::eval_regularized;
    use rand::{Rng, SeedableRng};

    fn dynamics(kernel: KernelSpec, rho: f64, lambda: f64, grid: Grid) -> Dynamics {
        let params = Params::new(kernel.gamma, rho, lambda, 0.2, 1.0, 1.0).unwrap();
        Dynamics::new(params, kernel, CutoffParams::new(lambda).unwrap(), grid).unwrap()
    }

    #[test]
    fn tail_fit_recovers_exact_power_law() {
        let h = GridMeasure::power_law(Grid::standard(), 0.3, 0.6);
        let fit = tail_fit(&h, 1e2, 1e4).unwrap();
        assert!((fit.exponent - 0.6).abs() < 1e-10, "{fit:?}");
        assert!((fit.amplitude - 0.3).abs() < 1e-10, "{fit:?}");
        assert!(fit.cells > 100);
        assert!(tail_fit(&h, 10.0, 10.5).is_err());
    }

    #[test]
    fn tail_fit_tolerates_small_noise() {
        let mut h = GridMeasure::power_law(Grid::standard(), 0.5, 0.5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        h.cell_mass.iter_mut().for_each(|m| *m *= 1.0 + rng.gen_range(-0.01..0.01));
        let fit = tail_fit(&h, 1e2, 1e4).unwrap();
        assert!((fit.exponent - 0.5).abs() < 0.01, "{fit:?}");
        assert!((fit.amplitude / 0.5 - 1.0).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn transport_balance_vanishes_on_the_exact_profile() {
        let d = dynamics(KernelSpec::zero(0.0).unwrap(), 0.5, 1e-3, Grid::standard());
        let h = GridMeasure::power_law(Grid::standard(), 0.5, 0.5);
        for r in [10.0, 100.0, 1000.0] {
            let res = flux_balance_residual(&d, &h, r).unwrap();
            assert!(res.value.abs() < 1e-12 && !res.degenerate, "{res:?}");
        }
        let empty = GridMeasure::zeros(Grid::standard(), 0.5);
        assert!(flux_balance_residual(&d, &empty, 10.0).unwrap().degenerate);
    }

    #[test]
    fn flux_of_two_atoms_by_hand() {
        let grid = Grid::geometric(5e-3, 2f64.powf(0.25), 97).unwrap();
        let d = dynamics(KernelSpec::constant(1.0).unwrap(), 0.5, 1e-2, grid.clone());
        let p = grid.pivots();
        let (i, j) = (60, 62);
        let mut h = GridMeasure::zeros(grid.clone(), 0.5);
        h.cell_mass[i] = 1.0;
        h.cell_mass[j] = 0.5;
        // an edge above both atoms and below every deposit bracket
        let k = (0..p.len()).find(|&k| p[k + 1] > 2.0 * p[i]).unwrap();
        let r = grid.edges()[k];
        assert!(r >= grid.edges()[j + 1]);
        let (c, k0) = (&d.cutoff, &d.kernel);
        let pair = |y: f64, z: f64, my: f64, mz: f64| eval_regularized(k0, c, y, z).unwrap() / z * my * mz;
        let expected = pair(p[i], p[i], 1.0, 1.0) + pair(p[i], p[j], 1.0, 0.5) + pair(p[j], p[i], 0.5, 1.0) + pair(p[j], p[j], 0.5, 0.5);
        let got = d.gain_flux(&h, r).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected, "{got} vs {expected}");
        // below both atoms nothing crosses
        assert_eq!(d.gain_flux(&h, grid.edges()[i - 1]).unwrap(), 0.0);
    }

    #[test]
    fn flux_of_power_law_matches_quadrature() {
        let grid = Grid::standard();
        let d = dynamics(KernelSpec::constant(1.0).unwrap(), 0.5, 1e-2, grid.clone());
        let h = GridMeasure::power_law(grid, 0.5, 0.5);
        let (k, c) = (d.kernel, d.cutoff);
        let r: f64 = 100.0;
        // integral_0^R h(y) integral_(R-y)^inf K_l(y,z)/z h(z) dz dy in log variables
        let inner = |y: f64| {
            let lo = (r - y).max(1e-300).ln();
            let hi = (2.0 * y / c.lambda).ln().max(lo);
            let f = |u: f64| {
                let z = u.exp();
                eval_regularized(&k, &c, y, z).unwrap() * 0.5 * z.powf(-0.5)
            };
            quadrature::integrate(f, lo, hi, 1e-10).integral
        };
        let outer = |v: f64| {
            let y = v.exp();
            y * 0.5 * y.powf(-0.5) * inner(y)
        };
        let mut exact = 0.0;
        let knots = [c.lambda / 2.0, c.lambda, 1.0, 10.0, 50.0, 90.0, 99.0, r];
        for w in knots.windows(2) {
            exact += quadrature::integrate(outer, w[0].ln(), w[1].ln(), 1e-10).integral;
        }
        let got = d.gain_flux(&h, r).unwrap();
        assert!((got / exact - 1.0).abs() < 0.03, "{got} vs {exact}");
    }

    #[test]
    fn zero_kernel_converges_to_the_power_law() {
        let grid = Grid::geometric(5e-3, 2f64.powf(0.25), 97).unwrap();
        let d = dynamics(KernelSpec::zero(0.0).unwrap(), 0.5, 1e-2, grid.clone());
        let h0 = power_law_init(&d.params, &grid);
        let res = find_stationary(&d, &h0, &StationaryOptions { tol: 1e-6, ..Default::default() }).unwrap();
        assert!(res.report.converged);
        let exact = GridMeasure::power_law(grid, 0.5, 0.5);
        let worst = res.profile.cell_mass.iter().zip(&exact.cell_mass).map(|(a, b)| (a / b - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-3, "{worst}");
        assert!(res.report.upper_envelope.passed && res.report.lower_envelope.passed);
    }

    #[test]
    fn short_horizon_reports_no_convergence() {
        let grid = Grid::geometric(5e-3, 2f64.powf(0.25), 97).unwrap();
        let d = dynamics(KernelSpec::constant(1.0).unwrap(), 0.5, 1e-2, grid.clone());
        let h0 = power_law_init(&d.params, &grid);
        let opts = StationaryOptions { t_max: 0.1, snapshot_dt: 0.05, ..Default::default() };
        let res = find_stationary(&d, &h0, &opts).unwrap();
        assert!(!res.report.converged);
        assert!(!res.report.history.is_empty());
        assert!(find_stationary(&d, &h0, &StationaryOptions { tol: 0.0, ..Default::default() }).is_err());
    }
}
