use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const N_PARAMS: usize = 18;

/// Column semantics for `p01..p18`, in manifest order.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "c0",
    "mobility",
    "kappa",
    "well_height",
    "noise_amplitude",
    "total_time",
    "dt",
    "quench_ramp_linear",
    "quench_ramp_quadratic",
    "anisotropy_x",
    "anisotropy_y",
    "texture_phase",
    "nuisance_1",
    "nuisance_2",
    "nuisance_3",
    "nuisance_4",
    "nuisance_5",
    "nuisance_6",
];

/// Declared range of every parameter, the union over both regimes.
pub const PARAM_RANGES: [(f64, f64); N_PARAMS] = [
    (-0.4, 0.4),
    (0.5, 2.0),
    (0.5, 3.0),
    (0.5, 2.0),
    (0.005, 0.05),
    (20.0, 80.0),
    (0.05, 0.1),
    (-0.3, 0.3),
    (-0.2, 0.2),
    (0.8, 1.2),
    (0.8, 1.2),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
];

/// Number of parameters that actually drive the simulation; the rest are
/// recorded but never read by the solver.
pub const N_ACTIVE_PARAMS: usize = 12;

const MOBILITY: usize = 1;
const KAPPA: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Regime the regressors are trained and evaluated on.
    Target,
    /// Disjoint regime (upper thirds of mobility and κ) used to pretrain the
    /// image backbone.
    Source,
}

impl Regime {
    /// Sampling interval for each parameter under this regime. The target
    /// regime's mobility and κ intervals are half-open at the source boundary.
    pub fn ranges(self) -> [(f64, f64); N_PARAMS] {
        let mut r = PARAM_RANGES;
        for idx in [MOBILITY, KAPPA] {
            let (lo, hi) = PARAM_RANGES[idx];
            let cut = hi - (hi - lo) / 3.0;
            r[idx] = match self {
                Regime::Target => (lo, cut),
                Regime::Source => (cut, hi),
            };
        }
        r
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Target => "target",
            Regime::Source => "source",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Regime::Target),
            "source" => Ok(Regime::Source),
            other => Err(Error::InvalidConfig(format!(
                "unknown regime `{other}` (expected target or source)"
            ))),
        }
    }
}

/// The 18 processing parameters of one simulation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub c0: f64,
    pub mobility: f64,
    pub kappa: f64,
    pub well_height: f64,
    pub noise_amplitude: f64,
    pub total_time: f64,
    pub dt: f64,
    /// Coefficients of the mobility ramp `M(t) = M (1 + q1 s + q2 s²)`, `s = t/T`.
    pub quench_ramp: [f64; 2],
    /// Per-axis multipliers on κ.
    pub anisotropy: [f64; 2],
    /// Phase of the long-wavelength component of the initial condition.
    pub texture_phase: f64,
    pub nuisance: [f64; 6],
}

impl SimParams {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let mut a = [0.0; N_PARAMS];
        a[0] = self.c0;
        a[1] = self.mobility;
        a[2] = self.kappa;
        a[3] = self.well_height;
        a[4] = self.noise_amplitude;
        a[5] = self.total_time;
        a[6] = self.dt;
        a[7..9].copy_from_slice(&self.quench_ramp);
        a[9..11].copy_from_slice(&self.anisotropy);
        a[11] = self.texture_phase;
        a[12..].copy_from_slice(&self.nuisance);
        a
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != N_PARAMS {
            return Err(Error::InvalidConfig(format!(
                "expected {N_PARAMS} parameters, got {}",
                values.len()
            )));
        }
        let p = Self {
            c0: values[0],
            mobility: values[1],
            kappa: values[2],
            well_height: values[3],
            noise_amplitude: values[4],
            total_time: values[5],
            dt: values[6],
            quench_ramp: [values[7], values[8]],
            anisotropy: [values[9], values[10]],
            texture_phase: values[11],
            nuisance: values[12..].try_into().expect("six nuisance values"),
        };
        p.validate()?;
        Ok(p)
    }

    /// Midpoint of every declared range.
    pub fn mid_range() -> Self {
        let mid: Vec<f64> = PARAM_RANGES.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        Self::from_slice(&mid).expect("midpoints are in range")
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (v, (lo, hi))) in self.to_array().iter().zip(PARAM_RANGES).enumerate() {
            if !(lo..=hi).contains(v) {
                return Err(Error::InvalidConfig(format!(
                    "parameter {} = {v} outside [{lo}, {hi}]",
                    PARAM_NAMES[i]
                )));
            }
        }
        Ok(())
    }

    /// Checks only what the solver needs to be well posed; unlike
    /// [`SimParams::validate`] this admits values outside the sampling ranges
    /// (e.g. zero noise).
    pub fn check_physical(&self) -> Result<()> {
        let ok = self.to_array().iter().all(|v| v.is_finite())
            && self.mobility > 0.0
            && self.kappa > 0.0
            && self.anisotropy.iter().all(|&a| a > 0.0)
            && self.dt > 0.0
            && self.total_time > 0.0
            && self.noise_amplitude >= 0.0
            && self.mobility_at(0.0) > 0.0
            && self.mobility_at(self.total_time) > 0.0
            && self.mobility_at(0.5 * self.total_time) > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("ill-posed simulation parameters {self:?}")))
        }
    }

    /// Mobility at simulation time `t`.
    pub fn mobility_at(&self, t: f64) -> f64 {
        let s = (t / self.total_time).clamp(0.0, 1.0);
        self.mobility * (1.0 + self.quench_ramp[0] * s + self.quench_ramp[1] * s * s)
    }

    /// Gradient coefficients along x and y.
    pub fn kappa_xy(&self) -> (f64, f64) {
        (self.kappa * self.anisotropy[0], self.kappa * self.anisotropy[1])
    }

    pub fn steps(&self) -> usize {
        (self.total_time / self.dt).ceil() as usize
    }
}

/// Draws every parameter uniformly from its interval under `regime`.
pub fn sample_params(rng: &mut Rng, regime: Regime) -> SimParams {
    let values: Vec<f64> = regime
        .ranges()
        .iter()
        .map(|&(lo, hi)| rng.random_range(lo..hi))
        .collect();
    SimParams::from_slice(&values).expect("sampled within declared ranges")
}
