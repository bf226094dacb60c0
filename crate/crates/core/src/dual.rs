//! Backward dual problem along a recorded forward run.
//!
//! For a recorded trajectory the forward map is linear in the propagated
//! masses once the coagulation partners are frozen, so its transpose gives
//! the dual solution exactly. With the normalization
//! `Psi = psi e^(beta (1-rho) (t-s))` every step becomes
//!
//! ```text
//! Psi_i <- Psi_i e^(-a_i dt) + (1 - e^(-a_i dt))/a_i * sum_j r_ij m_j Psi(p_i + p_j)
//! ```
//!
//! and every return to physical coordinates becomes a convex combination of
//! neighbouring values, so `0 <= Psi <= 1` holds exactly. The pairing
//! `<h(s), psi(s)>` is then constant up to tail inflow at the top boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{indicator_fractions, jump_integral, Dynamics, Event, Trajectory};
use crate::stablecdf::{StableProfile, StableTable};

/// Dual solution at one physical time `s`, on the pivots of the grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualField {
    pub s: f64,
    /// Physical pivots `x_i` at time `s`.
    pub x: Vec<f64>,
    /// Dual-frame positions `X_i = x_i e^(-beta (t-s))`.
    pub dual_x: Vec<f64>,
    pub psi: Vec<f64>,
    /// Value on the origin block `[0, x_0]`.
    pub origin: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualSolution {
    pub r: f64,
    pub t: f64,
    /// Fields at every return to physical coordinates, latest first; the
    /// last entry is `s = 0`.
    pub fields: Vec<DualField>,
    /// `sum_s inflow(s) e^(-beta (1-rho)(t-s)) Psi_top(s)`.
    pub boundary: f64,
}

impl DualSolution {
    pub fn at_start(&self) -> &DualField {
        self.fields.last().expect("dual solution has an initial field")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjointReport {
    pub r: f64,
    pub t: f64,
    /// `F(R, t) = <h(t), psi(t)>`.
    pub lhs: f64,
    /// `e^(-beta (1-rho) t) <h0, Psi(., 0)>`.
    pub rhs: f64,
    pub boundary: f64,
    /// `|lhs - rhs - boundary| / lhs`.
    pub relative_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualShape {
    pub min: f64,
    pub max: f64,
    /// Largest increase of `Psi` between neighbouring pivots.
    pub max_increase: f64,
    /// Largest `Psi` at pivots above `R` in the dual frame.
    pub above_r: f64,
}

/// Solves the dual problem with datum `1_[0,R]` at the trajectory's final time `t`.
pub fn solve_dual(dynamics: &Dynamics, traj: &Trajectory, r: f64, t: f64) -> Result<DualSolution> {
    let tol = 1e-12 * traj.t_final.abs().max(1.0);
    if (t - traj.t_final).abs() > tol {
        return Err(Error::Structure(format!("trajectory covers [0, {}], dual datum requested at t = {t}", traj.t_final)));
    }
    let grid = &dynamics.grid;
    if traj.initial.grid != *grid {
        return Err(Error::Structure("trajectory grid differs from the solver grid".into()));
    }
    if !(r >= grid.x_min() && r.is_finite()) {
        return Err(Error::Domain(format!("R = {r} must lie at or above x_min = {}", grid.x_min())));
    }
    let p = dynamics.params;
    let n = grid.cells();
    let pivots = grid.pivots();
    let origin = 1.0;
    let field = |s: f64, psi: &[f64]| {
        let shrink = (-p.beta * (t - s)).exp();
        DualField { s, x: pivots.clone(), dual_x: pivots.iter().map(|x| x * shrink).collect(), psi: psi.to_vec(), origin }
    };
    let mut psi = indicator_fractions(grid, r, p.rho);
    let mut fields = Vec::new();
    let mut boundary = 0.0;
    for ev in traj.events.iter().rev() {
        match ev {
            Event::Frame { tau, t: at, inflow } => {
                fields.push(field(*at, &psi));
                boundary += inflow * (-p.beta * (1.0 - p.rho) * (t - at)).exp() * psi[n - 1];
                let (f, _) = dynamics.frame_shares(*tau);
                let prev: Vec<f64> =
                    (0..n).map(|j| (1.0 - f) * psi[j] + f * if j == 0 { origin } else { psi[j - 1] }).collect();
                psi = prev;
            }
            Event::Step { partner, tau, dt, tail_amplitude } => {
                if !dynamics.kernel.is_zero() {
                    psi = dual_step(dynamics, &psi, partner, *tau, *dt, *tail_amplitude);
                }
            }
        }
    }
    fields.push(field(0.0, &psi));
    Ok(DualSolution { r, t, fields, boundary })
}

/// Transpose of one forward step: `Psi` at the step's start from `Psi` at its end.
fn dual_step(dynamics: &Dynamics, psi: &[f64], partner: &[f64], tau: f64, dt: f64, tail: f64) -> Vec<f64> {
    use rayon::prelude::*;
    let n = psi.len();
    let rates = dynamics.rates(partner, tau + 0.5 * dt, tail);
    let pivots = dynamics.pivots();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let a = rates.a[i];
            if rates.w[i] == 0.0 || a == 0.0 {
                return psi[i];
            }
            let row = &dynamics.table_row(i)[..n];
            let mut acc = 0.0;
            for j in 0..n {
                let t = row[j];
                if t == 0.0 || rates.w[j] == 0.0 || partner[j] == 0.0 {
                    continue;
                }
                acc += t * rates.w[j] * partner[j] / pivots[j] * dynamics.deposit(i, j).interpolate(psi);
            }
            psi[i] * (-a * dt).exp() + Dynamics::phi(a, dt) * rates.scale * rates.w[i] * acc
        })
        .collect()
}

/// Checks `<h(t), psi(t)> = <h0, psi(0)>`, with the tail inflow at the top
/// of the grid accounted for separately.
pub fn adjoint_consistency(dynamics: &Dynamics, traj: &Trajectory, dual: &DualSolution) -> Result<AdjointReport> {
    let p = dynamics.params;
    let lhs = traj.final_measure().cumulative_mass(dual.r)?;
    let start = dual.at_start();
    let h0 = &traj.initial;
    if h0.cells() != start.psi.len() {
        return Err(Error::Structure("dual field and initial datum differ in size".into()));
    }
    let pairing: f64 =
        h0.cell_mass.iter().zip(&start.psi).map(|(m, p)| m * p).sum::<f64>() + h0.origin_mass * start.origin;
    let rhs = (-p.beta * (1.0 - p.rho) * dual.t).exp() * pairing;
    let relative_residual = (lhs - rhs - dual.boundary).abs() / lhs.abs().max(f64::MIN_POSITIVE);
    Ok(AdjointReport { r: dual.r, t: dual.t, lhs, rhs, boundary: dual.boundary, relative_residual })
}

/// Range, monotonicity and support of a dual field. Cells are tested for
/// support from one cell above `R`, since a partial return to physical
/// coordinates spreads the datum by one cell.
pub fn dual_shape(dynamics: &Dynamics, dual: &DualSolution, field: &DualField) -> DualShape {
    let edges = dynamics.grid.edges();
    let shrink = (-dynamics.params.beta * (dual.t - field.s)).exp();
    let ratio = dynamics.grid.ratio();
    let mut shape = DualShape { min: field.origin, max: field.origin, max_increase: 0.0, above_r: 0.0 };
    let mut prev = field.origin;
    for (i, &v) in field.psi.iter().enumerate() {
        shape.min = shape.min.min(v);
        shape.max = shape.max.max(v);
        shape.max_increase = shape.max_increase.max(v - prev);
        if edges[i] * shrink >= dual.r * ratio {
            shape.above_r = shape.above_r.max(v);
        }
        prev = v;
    }
    shape
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubsolutionReport {
    pub r: f64,
    pub t: f64,
    pub a: f64,
    pub tolerance: f64,
    /// Smallest `M` in the bracket for which the bound holds everywhere, if any.
    pub m_star: Option<f64>,
    /// Most negative `Psi - W(...) + tolerance` at `m_star` (or at the top of
    /// the bracket when no `M` works).
    pub worst_margin: f64,
    /// Where the worst margin occurs; absent when every comparison is trivial.
    pub worst_x: Option<f64>,
    pub worst_s: Option<f64>,
    pub fields_checked: usize,
}

/// Bracket searched for `M`.
pub const M_BRACKET: (f64, f64) = (1e-2, 1e4);
const M_ITERATIONS: usize = 40;

/// Cells where the barrier comparison is not trivially true: `(X, Psi, s)`
/// with `X` below `R` and `Psi` below `1 - tol`. A cell's value is an average
/// over the cell and a partial return to physical coordinates spreads the
/// datum by one more cell, so each value is compared with the barrier one
/// cell beyond its upper edge.
fn barrier_cells(dynamics: &Dynamics, dual: &DualSolution, tol: f64) -> Vec<(f64, f64, f64)> {
    let edges = dynamics.grid.edges();
    let beta = dynamics.params.beta;
    let mut out = Vec::new();
    for field in dual.fields.iter().filter(|f| f.s < dual.t) {
        let shrink = (-beta * (dual.t - field.s)).exp();
        for (i, &v) in field.psi.iter().enumerate() {
            let x = edges[(i + 2).min(edges.len() - 1)] * shrink;
            if x < dual.r && v < 1.0 - tol {
                out.push((x, v, field.s));
            }
        }
    }
    out
}

fn barrier_margin(profile: &StableTable, dual: &DualSolution, m: f64, tol: f64, cell: (f64, f64, f64)) -> Result<f64> {
    let (x, v, s) = cell;
    let scale = (m * (dual.t - s)).powf(1.0 / profile.profile().a);
    Ok(v - profile.eval((dual.r - x) / scale)? + tol)
}

/// Worst margin of `Psi(X,s) >= W((R-X)/(M(t-s))^(1/a)) - tol` over all
/// fields with `s < t`, with the position and time where it occurs.
pub fn subsolution_margin(
    dynamics: &Dynamics,
    dual: &DualSolution,
    profile: &StableProfile,
    m: f64,
    tol: f64,
) -> Result<(f64, f64, f64)> {
    use rayon::prelude::*;
    let table = StableTable::for_profile(*profile)?;
    let cells = barrier_cells(dynamics, dual, tol);
    let margins: Vec<f64> = cells.par_iter().map(|&c| barrier_margin(&table, dual, m, tol, c)).collect::<Result<_>>()?;
    Ok(margins.iter().zip(&cells).fold((f64::INFINITY, f64::NAN, f64::NAN), |w, (&g, c)| if g < w.0 { (g, c.0, c.2) } else { w }))
}

/// Smallest `M` in [`M_BRACKET`] for which the stable-law barrier lies below
/// the dual solution, found by bisection in `ln M`.
pub fn subsolution_bound(
    dynamics: &Dynamics,
    dual: &DualSolution,
    profile: &StableProfile,
    tol: f64,
) -> Result<SubsolutionReport> {
    use rayon::prelude::*;
    let a = dynamics.params.a;
    if (profile.a - a).abs() > 1e-12 {
        return Err(Error::config("a", format!("profile index {} differs from rho - gamma = {a}", profile.a)));
    }
    let table = StableTable::for_profile(*profile)?;
    let cells = barrier_cells(dynamics, dual, tol);
    // the barrier is largest closest to R, so those cells fail first
    let mut order = cells.clone();
    order.sort_by(|p, q| (dual.r - p.0).total_cmp(&(dual.r - q.0)));
    let holds = |m: f64| -> Result<bool> {
        let bad = order.par_iter().find_map_first(|&c| match barrier_margin(&table, dual, m, tol, c) {
            Ok(g) if g >= 0.0 => None,
            other => Some(other),
        });
        match bad {
            None => Ok(true),
            Some(Ok(_)) => Ok(false),
            Some(Err(e)) => Err(e),
        }
    };
    let (lo, hi) = M_BRACKET;
    let m_star = if !holds(hi)? {
        None
    } else if holds(lo)? {
        Some(lo)
    } else {
        let (mut l, mut h) = (lo.ln(), hi.ln());
        for _ in 0..M_ITERATIONS {
            let mid = 0.5 * (l + h);
            if holds(mid.exp())? {
                h = mid;
            } else {
                l = mid;
            }
        }
        Some(h.exp())
    };
    let (worst_margin, worst_x, worst_s) = subsolution_margin(dynamics, dual, profile, m_star.unwrap_or(hi), tol)?;
    Ok(SubsolutionReport {
        r: dual.r,
        t: dual.t,
        a,
        tolerance: tol,
        m_star,
        worst_margin,
        worst_x: worst_x.is_finite().then_some(worst_x),
        worst_s: worst_s.is_finite().then_some(worst_s),
        fields_checked: dual.fields.iter().filter(|f| f.s < dual.t).count(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QTailReport {
    pub r: f64,
    /// Smallest `K` with `int_R^inf Q(X,Z,tau) dZ <= K R^(gamma-rho)` over the samples.
    pub k_star: f64,
    pub worst_x: Option<f64>,
    pub worst_tau: Option<f64>,
    pub samples: usize,
}

/// Empirical constant in the bound on the rate of dual jumps longer than `R`.
/// In dual variables a jump of length `Z` from `X` at `tau = t - s` is a
/// physical jump `z = Z e^(beta tau)` from `x = X e^(beta tau)`, so the rate is
/// `int_(R e^(beta tau))^inf K_l(x, z)/z h(z, s) dz`. Sampled at every pivot
/// `X <= R`, at `X = R`, and at every recorded snapshot with `tau <= tau_max`.
pub fn q_tail_bound(dynamics: &Dynamics, traj: &Trajectory, r: f64, tau_max: f64) -> Result<QTailReport> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("R = {r} must be positive")));
    }
    let p = dynamics.params;
    let t = traj.t_final;
    let mut xs: Vec<f64> = dynamics.pivots().iter().copied().filter(|&x| x < r).collect();
    xs.push(r);
    let mut out = QTailReport { r, k_star: 0.0, worst_x: None, worst_tau: None, samples: 0 };
    for snap in traj.snapshots.iter().filter(|s| t - s.t <= tau_max + 1e-12) {
        let tau = t - snap.t;
        let grow = (p.beta * tau).exp();
        for &x in &xs {
            let v = jump_integral(&snap.measure, &dynamics.kernel, &dynamics.cutoff, x * grow, r * grow);
            let k = v * r.powf(p.rho - p.gamma);
            out.samples += 1;
            if k > out.k_star {
                out.k_star = k;
                out.worst_x = Some(x);
                out.worst_tau = Some(tau);
            }
        }
    }
    Ok(out)
}

impl DualField {
    /// CSV rows `x,X,psi` with a schema header.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# schema_version=1,s={:?},origin={:?}", self.s, self.origin)?;
        writeln!(w, "x,dual_x,psi")?;
        for ((x, y), p) in self.x.iter().zip(&self.dual_x).zip(&self.psi) {
            writeln!(w, "{x:?},{y:?},{p:?}")?;
        }
        Ok(())
    }
}
