//! Invariance checks along a forward run: both envelopes at sampled times,
//! the growth bound on cumulative mass, and the discrete rearrangement
//! identity and gain positivity at every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::forward::{Dynamics, EvolutionState};
use crate::measure::{envelope_check_lower, envelope_check_upper, GridMeasure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub times: Vec<f64>,
    /// Slack of the envelope and growth checks.
    pub slack: f64,
    /// Relative tolerance of the rearrangement identity with `psi = 1`.
    pub identity_tol: f64,
    /// Extra log-uniform probe radii for the growth bound, drawn from `seed`.
    pub random_probes: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            times: (1..=10).map(|k| k as f64 / 10.0).collect(),
            slack: 1e-2,
            identity_tol: 1e-12,
            random_probes: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst value of the checked quantity, in the check's own units.
    pub worst: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub steps: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs the suite from `h0`, which should lie in the envelope set.
pub fn invariance_suite(dynamics: &Dynamics, h0: &GridMeasure, opts: &SuiteOptions) -> Result<SuiteReport> {
    let p = dynamics.params;
    let grid = &dynamics.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (lo, hi) = (grid.x_min().ln(), grid.x_max().ln());
    let mut probes: Vec<f64> = grid.edges().iter().copied().step_by(16).collect();
    probes.extend((0..opts.random_probes).map(|_| rng.gen_range(lo..hi).exp()));

    let mut upper = (f64::NEG_INFINITY, String::new(), true);
    let mut lower = (f64::INFINITY, String::new(), true);
    let mut growth = (f64::NEG_INFINITY, String::new());
    let mut check_sample = |m: &GridMeasure, t: f64| -> Result<()> {
        let u = envelope_check_upper(m, &p, opts.slack);
        if u.worst > upper.0 {
            upper = (u.worst, format!("F(R)/R^(1-rho) = {:.6} at {}, t = {t}", u.worst, location(u.at)), upper.2);
        }
        upper.2 &= u.passed;
        let l = envelope_check_lower(m, &p, opts.slack);
        if l.worst < lower.0 {
            lower = (l.worst, format!("margin {:.3e} at {}, t = {t}", l.worst, location(l.at)), lower.2);
        }
        lower.2 &= l.passed;
        for &r in &probes {
            let ratio = m.cumulative_mass(r)? / (r.powf(1.0 - p.rho) * (p.beta * p.rho * t).exp());
            if ratio > growth.0 {
                growth = (ratio, format!("F(R,t) e^(-beta rho t)/R^(1-rho) = {ratio:.6} at R = {r:e}, t = {t}"));
            }
        }
        Ok(())
    };
    check_sample(h0, 0.0)?;

    let mut identity = (0.0f64, String::from("no steps"));
    let mut min_gain = f64::INFINITY;
    let psi = vec![1.0; grid.cells()];
    let mut state = EvolutionState::new(h0.clone());
    let mut steps = 0;
    let mut times = opts.times.clone();
    times.sort_by(f64::total_cmp);
    for &t in &times {
        let mut observe = |s: &EvolutionState| -> Result<()> {
            steps += 1;
            let rep = dynamics.rearrangement_residual(s, &psi)?;
            if rep.residual > identity.0 {
                identity = (rep.residual, format!("relative residual {:.3e} at t = {}", rep.residual, s.t));
            }
            min_gain = min_gain.min(rep.min_gain);
            Ok(())
        };
        dynamics.advance_observed(&mut state, t, None, &mut observe)?;
        check_sample(&dynamics.to_physical(&state).0, t)?;
    }
    if steps > 0 && identity.1 == "no steps" {
        identity.1 = "relative residual 0".into();
    }
    let checks = vec![
        CheckResult { name: "upper_envelope".into(), passed: upper.2, worst: upper.0, detail: upper.1 },
        CheckResult { name: "lower_envelope".into(), passed: lower.2, worst: lower.0, detail: lower.1 },
        CheckResult {
            name: "growth_bound".into(),
            passed: growth.0 <= 1.0 + opts.slack,
            worst: growth.0,
            detail: growth.1,
        },
        CheckResult {
            name: "rearrangement_identity".into(),
            passed: identity.0 <= opts.identity_tol,
            worst: identity.0,
            detail: format!("{} over {steps} steps", identity.1),
        },
        CheckResult {
            name: "gain_positivity".into(),
            passed: min_gain >= 0.0,
            worst: if steps == 0 { 0.0 } else { min_gain },
            detail: format!("smallest cell gain {min_gain:e}"),
        },
    ];
    Ok(SuiteReport { checks, steps })
}

fn location(at: Option<f64>) -> String {
    at.map_or_else(|| "the tail limit".to_string(), |r| format!("R = {r:e}"))
}
