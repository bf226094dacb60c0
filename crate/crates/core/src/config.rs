//! Run configuration. The file is TOML restricted to `key = value` lines
//! with dotted keys (`kernel.family = "constant"`); every section and key is
//! optional except `kernel.family`, `cutoff.lambda` and `params.rho`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Dynamics, StepControl};
use crate::kernel::{CutoffParams, KernelFamily, KernelSpec, Smoothness};
use crate::measure::{Grid, Params, DEFAULT_RATIO};
use crate::stationary::StationaryOptions;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Seeds the randomly drawn probes of the invariance suite.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    pub kernel: KernelSection,
    pub cutoff: CutoffSection,
    pub params: ParamsSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub dual: DualSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    /// One of `constant`, `product`, `sum`, `zero`.
    pub family: String,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffSection {
    pub lambda: f64,
    #[serde(default)]
    pub smoothness: Smoothness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub rho: f64,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_r0")]
    pub r0: f64,
    #[serde(default = "one")]
    pub m: f64,
}

fn default_r0() -> f64 {
    1.0
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub x_min: f64,
    pub x_max: f64,
    pub ratio: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { x_min: 1e-4, x_max: 1e8, ratio: DEFAULT_RATIO }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub t_final: f64,
    pub snapshot_dt: f64,
    pub tol: f64,
    pub t_max: f64,
    pub max_rate_dt: f64,
    /// Sample times for the invariance suite are spread over `[0, t_final]`.
    pub samples: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let s = StationaryOptions::default();
        RunSection {
            t_final: 1.0,
            snapshot_dt: 0.1,
            tol: s.tol,
            t_max: s.t_max,
            max_rate_dt: StepControl::default().max_rate_dt,
            samples: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualSection {
    pub r: Vec<f64>,
    pub t: f64,
    /// Largest admissible adjoint residual.
    pub tolerance: f64,
    /// Slack in the subsolution comparison.
    pub subsolution_slack: f64,
}

impl Default for DualSection {
    fn default() -> Self {
        DualSection { r: vec![10.0, 100.0], t: 0.5, tolerance: 1e-3, subsolution_slack: 1e-3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: "file".into(),
            message: e.message().to_string() + &e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Checks every derived object so that errors surface at load time.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config("schema_version", format!("unsupported version {}", self.schema_version)));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1"));
        }
        let params = self.params()?;
        self.kernel()?;
        self.cutoff()?;
        let grid = self.grid()?;
        if grid.x_min() > 0.5 * params.lambda {
            return Err(Error::config("grid.x_min", "must not exceed cutoff.lambda / 2"));
        }
        let r = &self.run;
        let positive = [("run.snapshot_dt", r.snapshot_dt), ("run.tol", r.tol), ("run.t_max", r.t_max), ("run.max_rate_dt", r.max_rate_dt)];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("{v} must be positive")));
            }
        }
        if !(r.t_final.is_finite() && r.t_final >= 0.0) {
            return Err(Error::config("run.t_final", format!("{} must be nonnegative", r.t_final)));
        }
        if r.samples == 0 {
            return Err(Error::config("run.samples", "must be at least 1"));
        }
        let d = &self.dual;
        if d.r.is_empty() || d.r.iter().any(|v| !(v.is_finite() && *v >= grid.x_min())) {
            return Err(Error::config("dual.r", "needs values at or above grid.x_min"));
        }
        if !(d.t.is_finite() && d.t >= 0.0) {
            return Err(Error::config("dual.t", format!("{} must be nonnegative", d.t)));
        }
        if !(d.tolerance > 0.0 && d.subsolution_slack >= 0.0) {
            return Err(Error::config("dual.tolerance", "must be positive"));
        }
        Ok(())
    }

    /// Model parameters; `delta` defaults to half of `rho - gamma`.
    pub fn params(&self) -> Result<Params> {
        let gamma = self.kernel.gamma;
        let delta = self.params.delta.unwrap_or(0.5 * (self.params.rho - gamma));
        Params::new(gamma, self.params.rho, self.cutoff.lambda, delta, self.params.r0, self.params.m)
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        let k = &self.kernel;
        let family = match k.family.as_str() {
            "constant" => KernelFamily::Constant { value: k.value.unwrap_or(1.0) },
            "product" => KernelFamily::ProductPower,
            "sum" => KernelFamily::GeneralizedSum {
                alpha: k.alpha.ok_or_else(|| Error::config("kernel.alpha", "required for the sum family"))?,
            },
            "zero" => KernelFamily::Zero,
            other => {
                return Err(Error::config("kernel.family", format!("unknown family {other:?}; expected constant, product, sum or zero")))
            }
        };
        if k.value.is_some() && k.family != "constant" {
            return Err(Error::config("kernel.value", "only used by the constant family"));
        }
        if k.alpha.is_some() && k.family != "sum" {
            return Err(Error::config("kernel.alpha", "only used by the sum family"));
        }
        KernelSpec::new(family, k.gamma)
    }

    pub fn cutoff(&self) -> Result<CutoffParams> {
        CutoffParams::with_smoothness(self.cutoff.lambda, self.cutoff.smoothness)
    }

    pub fn grid(&self) -> Result<Grid> {
        let g = &self.grid;
        Grid::spanning(g.x_min, g.x_max, g.ratio)
    }

    pub fn control(&self) -> StepControl {
        StepControl { max_rate_dt: self.run.max_rate_dt, ..StepControl::default() }
    }

    pub fn dynamics(&self) -> Result<Dynamics> {
        Dynamics::with_control(self.params()?, self.kernel()?, self.cutoff()?, self.grid()?, self.control())
    }

    pub fn stationary_options(&self) -> StationaryOptions {
        let base = StationaryOptions::default();
        let grid_top = self.grid.x_max;
        StationaryOptions {
            tol: self.run.tol,
            t_max: self.run.t_max,
            snapshot_dt: self.run.snapshot_dt,
            probes: base.probes.into_iter().filter(|&r| r < grid_top).collect(),
            ..base
        }
    }

    /// Sample times `k t_final / samples`, `k = 1..samples`.
    pub fn sample_times(&self) -> Vec<f64> {
        let n = self.run.samples;
        (1..=n).map(|k| self.run.t_final * k as f64 / n as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONSTANT: &str = r#"
kernel.family = "constant"
cutoff.lambda = 1e-3
params.rho = 0.5
params.delta = 0.2
"#;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = RunConfig::parse(CONSTANT).unwrap();
        assert_eq!(cfg.grid, GridSection::default());
        assert_eq!(cfg.params.r0, 1.0);
        assert_eq!(cfg.kernel().unwrap(), KernelSpec::constant(1.0).unwrap());
        assert_eq!(cfg.params().unwrap().beta, 2.0);
        assert_eq!(cfg.grid().unwrap().cells(), 638);
    }

    #[test]
    fn round_trips_through_its_own_writer() {
        let cfg = RunConfig::parse(CONSTANT).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn field_level_errors() {
        let bad = CONSTANT.replace("params.rho = 0.5", "params.rho = -0.1");
        match RunConfig::parse(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "rho"),
            other => panic!("{other:?}"),
        }
        let unknown = format!("{CONSTANT}\nrun.speed = 3\n");
        match RunConfig::parse(&unknown) {
            Err(Error::Config { message, .. }) => assert!(message.contains("speed"), "{message}"),
            other => panic!("{other:?}"),
        }
        let fam = CONSTANT.replace("\"constant\"", "\"brownian\"");
        assert!(matches!(RunConfig::parse(&fam), Err(Error::Config { field, .. }) if field == "kernel.family"));
        let sum = CONSTANT.replace("\"constant\"", "\"sum\"");
        assert!(matches!(RunConfig::parse(&sum), Err(Error::Config { field, .. }) if field == "kernel.alpha"));
        let coarse = format!("{CONSTANT}\ngrid.x_min = 1e-2\ngrid.x_max = 1e4\ngrid.ratio = 2.0\n");
        assert!(matches!(RunConfig::parse(&coarse), Err(Error::Config { field, .. }) if field == "grid.x_min"));
    }

    #[test]
    fn sample_times_end_at_t_final() {
        let cfg = RunConfig::parse(CONSTANT).unwrap();
        let ts = cfg.sample_times();
        assert_eq!(ts.len(), 10);
        assert_eq!(*ts.last().unwrap(), 1.0);
    }
}
