//! Distribution function `W` of the one-sided stable law of index `a`,
//! characterized by its Laplace transform `W^(p) = e^(-c p^a) / p` with
//! `c = Gamma(1-a)/a`, so that `W'(Y) ~ Y^(-1-a)` for large `Y`.
//!
//! `W` is evaluated by deforming the inversion contour onto the rays
//! `p = r e^(+-i phi)`:
//!
//! ```text
//! W(Y) = phi/pi + (1/pi) int_0^inf Im exp(Y r e^(i phi) - c r^a e^(i a phi)) dr/r
//! ```
//!
//! With `phi = pi` this is the classical real-line formula, used for
//! `a < 1/2`. For `a > 1/2` that formula integrates a function of size
//! `e^(c |cos(pi a)| r^a)` against a small result, and at `a = 1/2` the
//! `r^a` term stops decaying, so a ray with `cos(a phi) > 0` is used instead. The
//! integral is taken in `u = r^a`, where the phase is linear for `phi = pi`,
//! over segments no longer than half an oscillation.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};

/// Largest admissible index; the profile degenerates as `a -> 1`.
pub const MAX_INDEX: f64 = 0.98;

/// Below this value of `W` both sides of the integral identity are smaller
/// than the quadrature noise and the identity is not checked.
pub const RESOLVABLE_W: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableProfile {
    pub a: f64,
    pub c: f64,
    /// Relative accuracy requested from each quadrature segment.
    pub rel_tol: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityResidual {
    pub y: f64,
    /// `(1/a) Y W'(Y)`.
    pub lhs: f64,
    /// `int_0^inf eta^(-1-a) (W(Y) - W(Y - eta)) d eta`.
    pub rhs: f64,
    pub relative: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub y: f64,
    pub w: f64,
    pub dw: f64,
    /// Identity residual, absent where `W` is below [`RESOLVABLE_W`].
    pub residual: Option<f64>,
}

/// `e^z - 1` without cancellation for small `|z|`.
fn expm1(z: Complex64) -> Complex64 {
    let (s, c) = z.im.sin_cos();
    let half = (0.5 * z.im).sin();
    Complex64::new(z.re.exp_m1() * c - 2.0 * half * half, z.re.exp() * s)
}

/// Adaptive tanh-sinh quadrature: bisects until each piece meets
/// `rel * |piece| + abs`.
fn integrate<F: Fn(f64) -> f64 + Copy>(f: F, lo: f64, hi: f64, rel: f64, abs: f64, depth: u32) -> (f64, f64) {
    let whole = quadrature::integrate(f, lo, hi, abs.max(1e-300));
    if whole.error_estimate <= rel * whole.integral.abs() + abs || depth == 0 {
        return (whole.integral, whole.error_estimate);
    }
    let mid = 0.5 * (lo + hi);
    let (a, ea) = integrate(f, lo, mid, rel, 0.5 * abs, depth - 1);
    let (b, eb) = integrate(f, mid, hi, rel, 0.5 * abs, depth - 1);
    (a + b, ea + eb)
}

impl StableProfile {
    pub fn new(a: f64) -> Result<Self> {
        if !(a > 0.0 && a <= MAX_INDEX) {
            return Err(Error::config("a", format!("{a} not in (0, {MAX_INDEX}]")));
        }
        Ok(StableProfile { a, c: gamma(1.0 - a) / a, rel_tol: 1e-12 })
    }

    fn check_p(p: f64) -> Result<()> {
        if p.is_finite() && p > 0.0 {
            Ok(())
        } else {
            Err(Error::Domain(format!("Laplace variable {p} must be positive")))
        }
    }

    pub fn laplace(&self, p: f64) -> Result<f64> {
        Self::check_p(p)?;
        Ok((-self.c * p.powf(self.a)).exp() / p)
    }

    /// Relative residual of `W^' = -W^ (1 + Gamma(1-a) p^a) / p`, with the
    /// derivative taken by a centred difference.
    pub fn laplace_ode_residual(&self, p: f64) -> Result<f64> {
        Self::check_p(p)?;
        let h = 1e-4 * p;
        let d = (self.laplace(p + h)? - self.laplace(p - h)?) / (2.0 * h);
        let rhs = -self.laplace(p)? * (1.0 + gamma(1.0 - self.a) * p.powf(self.a)) / p;
        Ok((d - rhs).abs() / rhs.abs())
    }

    /// Ray angle.
    fn angle(&self) -> f64 {
        if self.a < 0.5 {
            std::f64::consts::PI
        } else {
            0.25 * std::f64::consts::PI * (1.0 + 1.0 / self.a)
        }
    }

    /// `(1/pi) int_0^inf Im[g(p) exp(Y p - c p^a)] dr/r` along `p = r e^(i phi)`,
    /// integrated in `u = r^a`. `weight` maps `p` to `g(p)`.
    fn ray<G: Fn(Complex64) -> Complex64 + Copy>(&self, y: f64, weight: G) -> Result<f64> {
        self.ray_with(y, y, weight, self.rel_tol)
    }

    /// `y_decay` is the slowest exponential rate in the integrand, used to
    /// size segments and to decide when the remainder is negligible.
    fn ray_with<G: Fn(Complex64) -> Complex64 + Copy>(&self, y: f64, y_decay: f64, weight: G, rel: f64) -> Result<f64> {
        let a = self.a;
        let phi = self.angle();
        let dir = Complex64::from_polar(1.0, phi);
        let dir_a = Complex64::from_polar(1.0, a * phi);
        let c = self.c;
        let integrand = move |u: f64| -> f64 {
            if u <= 0.0 {
                return 0.0;
            }
            let r = u.powf(1.0 / a);
            let p = r * dir;
            let z = y * p - c * u * dir_a;
            (weight(p) * z.exp()).im / (a * u)
        };
        // decay envelope of the exponential factor
        let decay_y = -y_decay * phi.cos();
        let decay_c = c * (a * phi).cos();
        let envelope = |u: f64| (-decay_y * u.powf(1.0 / a) - decay_c * u).exp();
        let half_period = std::f64::consts::PI / (c * (a * phi).sin());
        let y_scale = if decay_y > 0.0 { (1.0 / decay_y).powf(a) } else { f64::INFINITY };
        let first = half_period.min(y_scale);
        let mut lo = 0.0;
        let mut total = 0.0;
        let mut err = 0.0;
        let mut quiet = 0;
        for _ in 0..100_000 {
            let len = half_period.min(first.max(lo));
            let hi = lo + len;
            let (v, e) = integrate(integrand, lo, hi, rel, 1e-300, 6);
            total += v;
            err += e;
            let env = envelope(hi);
            if env < 1e-300 || (env * (1.0 + hi) < 1e-18 && v.abs() <= 1e-16 * total.abs()) {
                quiet += 1;
                if quiet >= 2 {
                    if err > 1e-6 * total.abs() + 1e-12 {
                        return Err(Error::Quadrature(format!("ray integral at Y = {y}: error {err:e}")));
                    }
                    return Ok(total / std::f64::consts::PI);
                }
            } else {
                quiet = 0;
            }
            lo = hi;
        }
        Err(Error::Quadrature(format!("ray integral at Y = {y} did not terminate")))
    }

    fn check_y(y: f64) -> Result<()> {
        if y.is_nan() {
            Err(Error::Domain("Y is NaN".into()))
        } else {
            Ok(())
        }
    }

    /// `W(Y)`; zero for `Y <= 0`.
    pub fn eval(&self, y: f64) -> Result<f64> {
        Self::check_y(y)?;
        if y <= 0.0 {
            return Ok(0.0);
        }
        if y.is_infinite() {
            return Ok(1.0);
        }
        let v = self.angle() / std::f64::consts::PI + self.ray(y, |_| Complex64::new(1.0, 0.0))?;
        if !(-1e-8..=1.0 + 1e-8).contains(&v) {
            return Err(Error::Quadrature(format!("W({y}) = {v} lies outside [0, 1]")));
        }
        Ok(v.clamp(0.0, 1.0))
    }

    /// `W'(Y)`; zero for `Y <= 0`.
    pub fn deriv(&self, y: f64) -> Result<f64> {
        Self::check_y(y)?;
        if y <= 0.0 || y.is_infinite() {
            return Ok(0.0);
        }
        Ok(self.ray(y, |p| p)?.max(0.0))
    }

    /// `W(Y) - W(Y - eta)` for `eta >= 0`, accurate for small `eta`.
    pub fn increment(&self, y: f64, eta: f64) -> Result<f64> {
        Self::check_y(y)?;
        if !(eta >= 0.0) {
            return Err(Error::Domain(format!("increment {eta} must be nonnegative")));
        }
        if y <= 0.0 || eta == 0.0 {
            return Ok(0.0);
        }
        if eta >= y {
            return self.eval(y);
        }
        if eta >= 0.5 * y {
            return Ok((self.eval(y)? - self.eval(y - eta)?).max(0.0));
        }
        Ok(self.ray_with(y, y - eta, |p| -expm1(-eta * p), self.rel_tol)?.max(0.0))
    }

    /// Residual of `(1/a) Y W'(Y) = int_0^inf eta^(-1-a) (W(Y) - W(Y-eta)) d eta`.
    /// The part `eta > Y` is `W(Y) Y^(-a) / a`; on `(0, Y)` the substitution
    /// `eta = Y v^(1/(1-a))` removes the endpoint singularity.
    pub fn identity_residual(&self, y: f64) -> Result<IdentityResidual> {
        if !(y > 0.0 && y.is_finite()) {
            return Err(Error::Domain(format!("identity check needs Y > 0, got {y}")));
        }
        let a = self.a;
        let w = self.eval(y)?;
        if w < RESOLVABLE_W {
            return Err(Error::Domain(format!("W({y}) = {w:e} is too small for the identity check")));
        }
        let lhs = y * self.deriv(y)? / a;
        let far = w * y.powf(-a) / a;
        let failure = std::cell::Cell::new(None);
        let f = |v: f64| -> f64 {
            if v <= 0.0 {
                return 0.0;
            }
            let eta = y * v.powf(1.0 / (1.0 - a));
            let d = if eta >= 0.5 * y { self.increment(y, eta) } else { self.ray_with(y, y - eta, |p| -expm1(-eta * p), 1e-10) };
            match d {
                Ok(d) => y.powf(-a) * v.powf(-1.0 / (1.0 - a)) / (1.0 - a) * d,
                Err(e) => {
                    failure.set(Some(e.to_string()));
                    0.0
                }
            }
        };
        let (near, _) = integrate(&f, 0.0, 1.0, 1e-10, 1e-14 * lhs.abs(), 6);
        if let Some(msg) = failure.take() {
            return Err(Error::Quadrature(msg));
        }
        let rhs = near + far;
        let relative = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
        Ok(IdentityResidual { y, lhs, rhs, relative })
    }

    /// `int_0^inf e^(-pY) W(Y) dY` by quadrature of `W`, for comparison with
    /// [`StableProfile::laplace`].
    pub fn numerical_laplace(&self, p: f64) -> Result<f64> {
        Self::check_p(p)?;
        let failure = std::cell::Cell::new(None);
        let f = |y: f64| match self.eval(y) {
            Ok(w) => (-p * y).exp() * w,
            Err(e) => {
                failure.set(Some(e.to_string()));
                0.0
            }
        };
        // doubling segments up to where e^(-pY) is below roundoff
        let mut total = 0.0;
        let (mut lo, mut hi) = (0.0, 1.0 / p);
        while lo * p < 45.0 {
            total += integrate(&f, lo, hi, 1e-11, 1e-16, 8).0;
            lo = hi;
            hi *= 2.0;
        }
        if let Some(msg) = failure.take() {
            return Err(Error::Quadrature(msg));
        }
        Ok(total)
    }

    /// Lower barrier `W((R - X) / (M tau)^(1/a))` for the dual solution.
    pub fn subsolution(&self, x: f64, r: f64, m: f64, tau: f64) -> Result<f64> {
        if !(m > 0.0 && tau > 0.0) {
            return Err(Error::Domain("M and tau must be positive".into()));
        }
        self.eval((r - x) / (m * tau).powf(1.0 / self.a))
    }

    /// Rows `(Y, W, W', identity residual)`.
    pub fn table(&self, ys: &[f64]) -> Result<Vec<ProfileRow>> {
        use rayon::prelude::*;
        ys.par_iter()
            .map(|&y| {
                let (w, dw) = (self.eval(y)?, self.deriv(y)?);
                let residual = if y > 0.0 && y.is_finite() && w >= RESOLVABLE_W {
                    Some(self.identity_residual(y)?.relative)
                } else {
                    None
                };
                Ok(ProfileRow { y, w, dw, residual })
            })
            .collect()
    }

    /// Ten points spread over the bulk of the distribution, from about the
    /// 1e-6 quantile to far into the tail, where the identity is well posed.
    pub fn identity_points(&self) -> Vec<f64> {
        let scale = self.c.powf(1.0 / self.a);
        let mut lo = 0.05 * scale;
        while self.eval(lo).map_or(false, |w| w < 1e-6) {
            lo *= 1.5;
        }
        let hi = 1e3 * scale;
        (0..10).map(|k| lo * (hi / lo).powf(k as f64 / 9.0)).collect()
    }
}

/// Cubic Hermite interpolant of `W` in `ln Y` on a logarithmic grid, using
/// the exact slope `Y W'(Y)`. Arguments outside the table are evaluated directly.
#[derive(Clone, Debug)]
pub struct StableTable {
    profile: StableProfile,
    ln_lo: f64,
    step: f64,
    w: Vec<f64>,
    slope: Vec<f64>,
}

impl StableTable {
    /// Table over `[y_lo, y_hi]` with `per_decade` nodes per decade.
    pub fn new(profile: StableProfile, y_lo: f64, y_hi: f64, per_decade: usize) -> Result<Self> {
        use rayon::prelude::*;
        if !(y_lo > 0.0 && y_hi > y_lo && per_decade >= 4) {
            return Err(Error::Domain("table needs 0 < y_lo < y_hi and at least 4 nodes per decade".into()));
        }
        let step = std::f64::consts::LN_10 / per_decade as f64;
        let n = ((y_hi / y_lo).ln() / step).ceil() as usize + 1;
        let ln_lo = y_lo.ln();
        let nodes: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|k| {
                let y = (ln_lo + k as f64 * step).exp();
                Ok((profile.eval(y)?, y * profile.deriv(y)?))
            })
            .collect::<Result<_>>()?;
        let (w, slope) = nodes.into_iter().unzip();
        Ok(StableTable { profile, ln_lo, step, w, slope })
    }

    /// Default table for the profile: ten decades around its scale `c^(1/a)`.
    pub fn for_profile(profile: StableProfile) -> Result<Self> {
        let scale = profile.c.powf(1.0 / profile.a);
        Self::new(profile, 1e-2 * scale, 1e8 * scale, 128)
    }

    pub fn profile(&self) -> &StableProfile {
        &self.profile
    }

    pub fn eval(&self, y: f64) -> Result<f64> {
        if y.is_nan() {
            return Err(Error::Domain("Y is NaN".into()));
        }
        if y <= 0.0 {
            return Ok(0.0);
        }
        let s = (y.ln() - self.ln_lo) / self.step;
        let last = self.w.len() - 1;
        if !(s >= 0.0 && s <= last as f64) {
            return self.profile.eval(y);
        }
        let k = (s.floor() as usize).min(last - 1);
        let u = s - k as f64;
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u),
            u * (1.0 - u) * (1.0 - u),
            u * u * (3.0 - 2.0 * u),
            u * u * (u - 1.0),
        );
        let v = h00 * self.w[k] + h10 * self.step * self.slope[k] + h01 * self.w[k + 1] + h11 * self.step * self.slope[k + 1];
        Ok(v.clamp(0.0, 1.0))
    }
}
