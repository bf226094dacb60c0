//! Nonnegative measures on a geometric grid with a power-law tail, and the
//! weighted norm `sup_R |F(R)| / R^(1-rho)` on their cumulative mass `F`.
//!
//! Cells carry total mass. Inside a cell mass is assumed distributed like
//! `x^(-rho)`, which makes the weighted norm exactly computable from cell
//! edges. Mass in `[0, x_0]` is kept as a single `origin_mass` with the same
//! shape; beyond the last edge the density is `tail_amplitude * x^(-rho)`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model parameters. `beta` and `a` are derived.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub gamma: f64,
    pub rho: f64,
    pub lambda: f64,
    pub delta: f64,
    pub r0: f64,
    pub m: f64,
    pub beta: f64,
    pub a: f64,
}

impl Params {
    pub fn new(gamma: f64, rho: f64, lambda: f64, delta: f64, r0: f64, m: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::config("gamma", format!("{gamma} not in [0,1)")));
        }
        if !(rho > gamma && rho < 1.0) {
            return Err(Error::config("rho", format!("{rho} not in (gamma, 1)")));
        }
        if !(lambda > 0.0 && lambda < 0.5) {
            return Err(Error::config("lambda", format!("{lambda} not in (0, 1/2)")));
        }
        let a = rho - gamma;
        if !(delta > 0.0 && delta < a) {
            return Err(Error::config("delta", format!("{delta} not in (0, rho - gamma)")));
        }
        if !(r0.is_finite() && r0 > 0.0) {
            return Err(Error::config("r0", format!("{r0} must be positive")));
        }
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::config("m", format!("{m} must be positive")));
        }
        Ok(Params { gamma, rho, lambda, delta, r0, m, beta: 1.0 / a, a })
    }
}

/// Geometric cell edges `x_0 < x_1 < ... < x_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    edges: Vec<f64>,
    ratio: f64,
}

pub const DEFAULT_RATIO: f64 = 1.044_273_782_427_413_8; // 2^(1/16)

impl Grid {
    pub fn geometric(x_min: f64, ratio: f64, cells: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_min > 0.0) {
            return Err(Error::config("grid.x_min", format!("{x_min} must be positive")));
        }
        if !(ratio.is_finite() && ratio > 1.0) {
            return Err(Error::config("grid.ratio", format!("{ratio} must exceed 1")));
        }
        if cells < 2 {
            return Err(Error::config("grid", "need at least two cells"));
        }
        let lr = ratio.ln();
        let edges = (0..=cells).map(|i| x_min * (i as f64 * lr).exp()).collect();
        Ok(Grid { edges, ratio })
    }

    /// Grid from `x_min` with the given ratio whose top edge is the closest to `x_max`.
    pub fn spanning(x_min: f64, x_max: f64, ratio: f64) -> Result<Self> {
        if !(x_max > x_min) {
            return Err(Error::config("grid.x_max", "must exceed x_min"));
        }
        if !(ratio > 1.0) {
            return Err(Error::config("grid.ratio", format!("{ratio} must exceed 1")));
        }
        let n = ((x_max / x_min).ln() / ratio.ln()).round() as usize;
        Self::geometric(x_min, ratio, n)
    }

    /// `[1e-4, 1e8]` at ratio `2^(1/16)`.
    pub fn standard() -> Self {
        Self::spanning(1e-4, 1e8, DEFAULT_RATIO).expect("valid default grid")
    }

    /// Reconstructs a grid from stored edges, checking they are geometric.
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 || !(edges[0] > 0.0) {
            return Err(Error::Structure("grid needs at least two positive cells".into()));
        }
        let n = edges.len() - 1;
        let ratio = (edges[n] / edges[0]).powf(1.0 / n as f64);
        for w in edges.windows(2) {
            if !((w[1] / w[0] - ratio).abs() <= 1e-9 * ratio) {
                return Err(Error::Structure("edges are not geometric".into()));
            }
        }
        Ok(Grid { edges, ratio })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn cells(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn x_min(&self) -> f64 {
        self.edges[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    /// Geometric cell centres.
    pub fn pivots(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect()
    }

    /// Index of the cell containing `x`, if `x` lies in `[x_0, x_N)`.
    pub fn locate(&self, x: f64) -> Option<usize> {
        if !(x >= self.edges[0] && x < self.x_max()) {
            return None;
        }
        let guess = ((x / self.edges[0]).ln() / self.ratio.ln()).floor() as isize;
        let mut i = guess.clamp(0, self.cells() as isize - 1) as usize;
        while i > 0 && x < self.edges[i] {
            i -= 1;
        }
        while i + 1 < self.cells() && x >= self.edges[i + 1] {
            i += 1;
        }
        Some(i)
    }
}

/// Integral of `x^(-rho)` over `[lo, hi]`.
#[inline]
pub(crate) fn shape_integral(lo: f64, hi: f64, rho: f64) -> f64 {
    let e = 1.0 - rho;
    (hi.powf(e) - lo.powf(e)) / e
}

/// Fraction of a power-law-shaped cell `[lo, hi]` lying below `r`.
#[inline]
pub(crate) fn fraction_below(lo: f64, hi: f64, r: f64, rho: f64) -> f64 {
    if r <= lo {
        0.0
    } else if r >= hi {
        1.0
    } else {
        let e = 1.0 - rho;
        (r.powf(e) - lo.powf(e)) / (hi.powf(e) - lo.powf(e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridMeasure {
    pub grid: Grid,
    pub cell_mass: Vec<f64>,
    /// Density beyond the last edge is `tail_amplitude * x^(-tail_exponent)`.
    pub tail_amplitude: f64,
    pub tail_exponent: f64,
    /// Mass in `[0, x_0]`.
    pub origin_mass: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub passed: bool,
    /// Upper check: largest `F(R)/R^(1-rho)`. Lower check: smallest margin
    /// `F(R)/R^(1-rho) - (1-slack)(1-(R0/R)^delta)_+`.
    pub worst: f64,
    /// Location of the worst value; `None` for the tail limit.
    pub at: Option<f64>,
}

/// Allowance for roundoff in the envelope comparisons.
const ENVELOPE_ROUNDOFF: f64 = 1e-12;

impl GridMeasure {
    pub fn zeros(grid: Grid, rho: f64) -> Self {
        let n = grid.cells();
        GridMeasure { grid, cell_mass: vec![0.0; n], tail_amplitude: 0.0, tail_exponent: rho, origin_mass: 0.0 }
    }

    /// Exact cell masses of `amplitude * x^(-rho)`, including origin and tail.
    pub fn power_law(grid: Grid, amplitude: f64, rho: f64) -> Self {
        let cell_mass = grid.edges().windows(2).map(|w| amplitude * shape_integral(w[0], w[1], rho)).collect();
        let origin_mass = amplitude * grid.x_min().powf(1.0 - rho) / (1.0 - rho);
        GridMeasure { grid, cell_mass, tail_amplitude: amplitude, tail_exponent: rho, origin_mass }
    }

    pub fn cells(&self) -> usize {
        self.cell_mass.len()
    }

    pub fn grid_mass(&self) -> f64 {
        self.cell_mass.iter().sum()
    }

    /// Cumulative mass at every edge, `F(x_0) .. F(x_N)`.
    pub fn cumulative_at_edges(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cells() + 1);
        let mut acc = self.origin_mass;
        out.push(acc);
        for &m in &self.cell_mass {
            acc += m;
            out.push(acc);
        }
        out
    }

    /// `F(R) = integral of h over [0, R]`.
    pub fn cumulative_mass(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) || r.is_nan() {
            return Err(Error::Domain(format!("cumulative mass at {r}")));
        }
        let rho = self.tail_exponent;
        let edges = self.grid.edges();
        let x0 = edges[0];
        if r < x0 {
            return Ok(self.origin_mass * (r / x0).powf(1.0 - rho));
        }
        let xn = self.grid.x_max();
        if r >= xn {
            if r.is_infinite() {
                return Ok(if self.tail_amplitude > 0.0 { f64::INFINITY } else { self.origin_mass + self.grid_mass() });
            }
            return Ok(self.origin_mass + self.grid_mass() + self.tail_amplitude * shape_integral(xn, r, rho));
        }
        let i = self.grid.locate(r).unwrap();
        let below: f64 = self.origin_mass + self.cell_mass[..i].iter().sum::<f64>();
        Ok(below + self.cell_mass[i] * fraction_below(edges[i], edges[i + 1], r, rho))
    }

    /// Density at `R` inside the grid, from the cell's power-law shape.
    pub fn density(&self, r: f64) -> Result<f64> {
        let i = self
            .grid
            .locate(r)
            .ok_or_else(|| Error::Domain(format!("density at {r} outside the grid")))?;
        let e = self.grid.edges();
        Ok(self.cell_mass[i] * r.powf(-self.tail_exponent) / shape_integral(e[i], e[i + 1], self.tail_exponent))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# schema_version=1,tail_amplitude={:?},rho={:?},origin_mass={:?}",
            self.tail_amplitude, self.tail_exponent, self.origin_mass
        )?;
        writeln!(w, "x_left,x_right,cell_mass")?;
        let e = self.grid.edges();
        for (i, m) in self.cell_mass.iter().enumerate() {
            writeln!(w, "{:?},{:?},{:?}", e[i], e[i + 1], m)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty measure file".into()))??;
        let meta = header
            .strip_prefix("# ")
            .ok_or_else(|| Error::Parse("missing metadata line".into()))?;
        let mut tail_amplitude = None;
        let mut rho = None;
        let mut origin_mass = 0.0;
        for kv in meta.split(',') {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse(format!("bad metadata {kv}")))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Parse(format!("bad value for {k}")))?;
            match k.trim() {
                "tail_amplitude" => tail_amplitude = Some(v),
                "rho" => rho = Some(v),
                "origin_mass" => origin_mass = v,
                _ => {}
            }
        }
        let column_header = lines.next().ok_or_else(|| Error::Parse("missing column header".into()))??;
        if column_header.trim() != "x_left,x_right,cell_mass" {
            return Err(Error::Parse(format!("unexpected columns {column_header}")));
        }
        let mut edges = Vec::new();
        let mut cell_mass = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad row {line}"))))
                .collect::<Result<_>>()?;
            if f.len() != 3 {
                return Err(Error::Parse(format!("bad row {line}")));
            }
            if edges.is_empty() {
                edges.push(f[0]);
            } else if *edges.last().unwrap() != f[0] {
                return Err(Error::Structure("cells are not contiguous".into()));
            }
            edges.push(f[1]);
            cell_mass.push(f[2]);
        }
        let grid = Grid::from_edges(edges)?;
        Ok(GridMeasure {
            grid,
            cell_mass,
            tail_amplitude: tail_amplitude.ok_or_else(|| Error::Parse("missing tail_amplitude".into()))?,
            tail_exponent: rho.ok_or_else(|| Error::Parse("missing rho".into()))?,
            origin_mass,
        })
    }
}

/// Supremum of `|G(R)|/R^(1-rho)` for a signed cumulative `G` given at the
/// edges, together with its tail limit. The ratio is monotone between edges
/// and on `[0, x_0]`, so edges and the limit suffice.
fn weighted_sup(grid: &Grid, cumulative: &[f64], tail_limit: f64, rho: f64) -> f64 {
    let e = 1.0 - rho;
    let mut best = tail_limit.abs();
    for (x, g) in grid.edges().iter().zip(cumulative) {
        best = best.max(g.abs() / x.powf(e));
    }
    best
}

/// Tail limit of `F(R)/R^(1-rho)`.
fn tail_limit(m: &GridMeasure, rho: f64) -> f64 {
    if m.tail_amplitude == 0.0 {
        0.0
    } else if (m.tail_exponent - rho).abs() < 1e-15 {
        m.tail_amplitude / (1.0 - rho)
    } else if m.tail_exponent < rho {
        f64::INFINITY
    } else {
        0.0
    }
}

pub fn xrho_norm(m: &GridMeasure, params: &Params) -> f64 {
    weighted_sup(&m.grid, &m.cumulative_at_edges(), tail_limit(m, params.rho), params.rho)
}

pub fn xrho_dist(m1: &GridMeasure, m2: &GridMeasure, params: &Params) -> Result<f64> {
    if m1.grid != m2.grid {
        return Err(Error::Structure("measures live on different grids".into()));
    }
    if m1.tail_exponent != m2.tail_exponent {
        return Err(Error::Structure("measures have different tail exponents".into()));
    }
    let c1 = m1.cumulative_at_edges();
    let c2 = m2.cumulative_at_edges();
    let diff: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a - b).collect();
    let lim = tail_limit(m1, params.rho) - tail_limit(m2, params.rho);
    Ok(weighted_sup(&m1.grid, &diff, lim, params.rho))
}

/// `F(R) <= (1+slack) R^(1-rho)` at every edge and in the tail limit.
pub fn envelope_check_upper(m: &GridMeasure, params: &Params, slack: f64) -> EnvelopeReport {
    let e = 1.0 - params.rho;
    let mut worst = tail_limit(m, params.rho);
    let mut at = None;
    for (x, f) in m.grid.edges().iter().zip(m.cumulative_at_edges()) {
        let ratio = f / x.powf(e);
        if ratio > worst {
            worst = ratio;
            at = Some(*x);
        }
    }
    EnvelopeReport { passed: worst <= 1.0 + slack + ENVELOPE_ROUNDOFF, worst, at }
}

/// `F(R) >= (1-slack) R^(1-rho) (1 - (R0/R)^delta)_+` at every edge and in the tail limit.
pub fn envelope_check_lower(m: &GridMeasure, params: &Params, slack: f64) -> EnvelopeReport {
    let e = 1.0 - params.rho;
    let mut worst = tail_limit(m, params.rho) - (1.0 - slack);
    let mut at = None;
    for (x, f) in m.grid.edges().iter().zip(m.cumulative_at_edges()) {
        let bound = (1.0 - slack) * (1.0 - (params.r0 / x).powf(params.delta)).max(0.0);
        let margin = f / x.powf(e) - bound;
        if margin < worst {
            worst = margin;
            at = Some(*x);
        }
    }
    EnvelopeReport { passed: worst >= -ENVELOPE_ROUNDOFF, worst, at }
}

/// `integral_x^inf h(z) z^(-alpha) dz`, exact for the piecewise power-law representation.
pub fn dyadic_tail_integral(m: &GridMeasure, x: f64, alpha: f64) -> Result<f64> {
    let rho = m.tail_exponent;
    if !(alpha > 1.0 - rho) {
        return Err(Error::Domain(format!("alpha = {alpha} must exceed 1 - rho = {}", 1.0 - rho)));
    }
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("lower limit {x} must be positive")));
    }
    // integral of z^(-rho-alpha) over [lo, hi]
    let p = 1.0 - rho - alpha;
    let seg = |lo: f64, hi: f64| (lo.powf(p) - hi.powf(p)) / -p;
    let edges = m.grid.edges();
    let mut total = 0.0;
    let x0 = edges[0];
    if x < x0 && m.origin_mass > 0.0 {
        let c = m.origin_mass / shape_integral(0.0, x0, rho);
        total += c * seg(x, x0);
    }
    for (i, &mass) in m.cell_mass.iter().enumerate() {
        let (lo, hi) = (edges[i], edges[i + 1]);
        if hi <= x || mass == 0.0 {
            continue;
        }
        let c = mass / shape_integral(lo, hi, rho);
        total += c * seg(lo.max(x), hi);
    }
    let xn = m.grid.x_max();
    total += m.tail_amplitude * x.max(xn).powf(p) / -p;
    Ok(total)
}

/// Bound on [`dyadic_tail_integral`] from the weighted norm `c0`:
/// `2^(1-rho) c0 x^(1-rho-alpha) / (1 - 2^(1-rho-alpha))`.
pub fn dyadic_bound(c0: f64, x: f64, alpha: f64, rho: f64) -> f64 {
    let p = 1.0 - rho - alpha;
    2f64.powf(1.0 - rho) * c0 * x.powf(p) / (1.0 - 2f64.powf(p))
}

/// Initial datum with `F(R) = R^(1-rho) (1 - (R0/R)^delta)_+`.
pub fn power_law_init(params: &Params, grid: &Grid) -> GridMeasure {
    let e = 1.0 - params.rho;
    let f = |r: f64| r.powf(e) * (1.0 - (params.r0 / r).powf(params.delta)).max(0.0);
    let edges = grid.edges();
    let cell_mass = edges.windows(2).map(|w| (f(w[1]) - f(w[0])).max(0.0)).collect();
    GridMeasure {
        grid: grid.clone(),
        cell_mass,
        tail_amplitude: 1.0 - params.rho,
        tail_exponent: params.rho,
        origin_mass: f(edges[0]),
    }
}
