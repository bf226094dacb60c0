//! Coagulation kernels and the cutoff that regularizes them near the origin
//! and for very unequal pairs.
//!
//! The regularized kernel is
//!
//! ```text
//! K_l(y, z) = K(y, z) * c(y/l) * c(z/l) * c(y/(l (y+z))) * c(z/(l (y+z)))
//! ```
//!
//! where `c` vanishes on `[0, 1/2]`, equals one on `[1, inf)` and is
//! nondecreasing in between.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelFamily {
    /// `K = value`, homogeneity zero.
    Constant { value: f64 },
    /// `K = (xy)^(gamma/2)`.
    ProductPower,
    /// `K = x^alpha y^(gamma-alpha) + y^alpha x^(gamma-alpha)`.
    GeneralizedSum { alpha: f64 },
    /// `K = 0`: pure transport.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub gamma: f64,
    /// Constant `C` with `K(x,y) <= C (x^gamma + y^gamma)`.
    pub growth_constant: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::config("kernel.gamma", format!("{gamma} not in [0,1)")));
        }
        let growth_constant = match family {
            KernelFamily::Constant { value } => {
                if !(value.is_finite() && value > 0.0) {
                    return Err(Error::config("kernel.value", format!("{value} must be positive")));
                }
                if gamma != 0.0 {
                    return Err(Error::config("kernel.gamma", "constant kernel has gamma = 0"));
                }
                value / 2.0
            }
            KernelFamily::ProductPower => 1.0,
            KernelFamily::GeneralizedSum { alpha } => {
                if !(alpha >= 0.0 && alpha <= gamma) {
                    return Err(Error::config("kernel.alpha", format!("{alpha} not in [0, gamma]")));
                }
                1.0
            }
            KernelFamily::Zero => 1.0,
        };
        Ok(KernelSpec { family, gamma, growth_constant })
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(KernelFamily::Constant { value }, 0.0)
    }

    pub fn product(gamma: f64) -> Result<Self> {
        Self::new(KernelFamily::ProductPower, gamma)
    }

    pub fn sum(alpha: f64, gamma: f64) -> Result<Self> {
        Self::new(KernelFamily::GeneralizedSum { alpha }, gamma)
    }

    pub fn zero(gamma: f64) -> Result<Self> {
        Self::new(KernelFamily::Zero, gamma)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.family, KernelFamily::Zero)
    }

    /// Unchecked evaluation for positive finite arguments.
    #[inline]
    pub(crate) fn value(&self, x: f64, y: f64) -> f64 {
        match self.family {
            KernelFamily::Constant { value } => value,
            KernelFamily::ProductPower => (x * y).powf(0.5 * self.gamma),
            KernelFamily::GeneralizedSum { alpha } => {
                let g = self.gamma - alpha;
                x.powf(alpha) * y.powf(g) + y.powf(alpha) * x.powf(g)
            }
            KernelFamily::Zero => 0.0,
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<f64> {
        check_positive(x)?;
        check_positive(y)?;
        Ok(self.value(x, y))
    }
}

fn check_positive(x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("kernel argument {x} must be positive and finite")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothness {
    /// `3u^2 - 2u^3`, continuously differentiable.
    #[default]
    PiecewiseCubic,
    /// `10u^3 - 15u^4 + 6u^5`, twice continuously differentiable.
    SmoothPolynomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffParams {
    pub lambda: f64,
    #[serde(default)]
    pub smoothness: Smoothness,
}

impl CutoffParams {
    pub fn new(lambda: f64) -> Result<Self> {
        Self::with_smoothness(lambda, Smoothness::default())
    }

    pub fn with_smoothness(lambda: f64, smoothness: Smoothness) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 0.5) {
            return Err(Error::config("cutoff.lambda", format!("{lambda} not in (0, 1/2)")));
        }
        Ok(CutoffParams { lambda, smoothness })
    }

    /// Cutoff profile at `s >= 0`.
    #[inline]
    pub(crate) fn zeta(&self, s: f64) -> f64 {
        let u = (2.0 * s - 1.0).clamp(0.0, 1.0);
        match self.smoothness {
            Smoothness::PiecewiseCubic => u * u * (3.0 - 2.0 * u),
            Smoothness::SmoothPolynomial => u * u * u * (10.0 + u * (6.0 * u - 15.0)),
        }
    }

    pub fn eval_cutoff(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("cutoff argument {s} must be nonnegative")));
        }
        Ok(self.zeta(s))
    }

    /// Product of the two ratio factors `c(y/(l(y+z))) c(z/(l(y+z)))`.
    #[inline]
    pub(crate) fn ratio_factor(&self, y: f64, z: f64) -> f64 {
        let ls = self.lambda * (y + z);
        self.zeta(y / ls) * self.zeta(z / ls)
    }

    #[inline]
    pub(crate) fn regularized(&self, kernel: &KernelSpec, y: f64, z: f64) -> f64 {
        let l = self.lambda;
        let w = self.zeta(y / l) * self.zeta(z / l) * self.ratio_factor(y, z);
        if w == 0.0 {
            0.0
        } else {
            w * kernel.value(y, z)
        }
    }
}

/// `K_l(y, z)`; zero wherever the cutoff vanishes.
pub fn eval_regularized(kernel: &KernelSpec, cutoff: &CutoffParams, y: f64, z: f64) -> Result<f64> {
    check_positive(y)?;
    check_positive(z)?;
    Ok(cutoff.regularized(kernel, y, z))
}
