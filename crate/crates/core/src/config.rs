//! Experiment configuration: the JSON document the CLI consumes, named
//! boundary functions with modulus metadata, and the domain specs
//! {"ball": r} | {"annulus": [r1, r2]} | {"sdf": name, "r0": value}.

use serde::{Deserialize, Serialize};

use crate::environment::{EnvironmentParams, Region};
use crate::error::{Error, Result};
use crate::geometry::{DomainGeometry, Point};
use crate::scales::{RationalExp, Regime, ScheduleParams};

/// Boundary data choices. Each carries enough metadata to evaluate the
/// modulus of continuity sigma_f and the rescaled Hoelder norms.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryFunction {
    /// f(x) = x_1; harmonic, Lipschitz constant one.
    X1,
    Constant { value: f64 },
    /// f(x) = cos(x_1 / wavelength).
    CosX1 { wavelength: f64 },
    /// f(x) = tanh(2 x_1 + 0.7) + 0.3 (x_2 - 0.2)^2, a non-symmetric smooth
    /// function for oracle cross-checks (bounded data only makes sense on
    /// domains inside the unit scale).
    Bumpy,
}

impl BoundaryFunction {
    pub fn eval(&self, p: Point) -> f64 {
        match self {
            BoundaryFunction::X1 => p[0],
            BoundaryFunction::Constant { value } => *value,
            BoundaryFunction::CosX1 { wavelength } => (p[0] / wavelength).cos(),
            BoundaryFunction::Bumpy => (2.0 * p[0] + 0.7).tanh() + 0.3 * (p[1] - 0.2).powi(2),
        }
    }

    /// Lipschitz constant on the unit-scale region the experiments use.
    pub fn lipschitz(&self) -> f64 {
        match self {
            BoundaryFunction::X1 => 1.0,
            BoundaryFunction::Constant { .. } => 0.0,
            BoundaryFunction::CosX1 { wavelength } => 1.0 / wavelength,
            BoundaryFunction::Bumpy => 2.0 + 0.3 * 2.0 * 1.5,
        }
    }

    /// Sup bound on the region of interest (|p| <= ~1.5).
    pub fn sup(&self) -> f64 {
        match self {
            BoundaryFunction::X1 => 1.5,
            BoundaryFunction::Constant { value } => value.abs(),
            BoundaryFunction::CosX1 { .. } => 1.0,
            BoundaryFunction::Bumpy => 1.0 + 0.3 * 1.7f64.powi(2),
        }
    }

    /// Modulus of continuity sigma_f(s) = min(K s, 2 sup).
    pub fn modulus(&self, s: f64) -> f64 {
        (self.lipschitz() * s).min(2.0 * self.sup())
    }

    /// Rescaled Hoelder norm |f|_n = sup + sup_pairs L^beta |df| / |dx|^beta,
    /// the pair supremum evaluated in closed form from the Lipschitz and sup
    /// data (attained where K s = 2 sup).
    pub fn holder_norm(&self, level_l: f64, beta: f64) -> f64 {
        let k = self.lipschitz();
        let m = self.sup();
        let semi = if k == 0.0 {
            0.0
        } else {
            level_l.powf(beta) * k.powf(beta) * (2.0 * m).powf(1.0 - beta)
        };
        m + semi
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainSpec {
    Ball { ball: f64 },
    Annulus { annulus: [f64; 2] },
    Sdf { sdf: String, r0: f64 },
}

impl DomainSpec {
    pub fn build(&self) -> Result<DomainGeometry> {
        match self {
            DomainSpec::Ball { ball } => Ok(DomainGeometry::ball(*ball)),
            DomainSpec::Annulus { annulus } => Ok(DomainGeometry::annulus(annulus[0], annulus[1])),
            DomainSpec::Sdf { sdf, r0 } => match sdf.as_str() {
                "rounded_box" => {
                    let mut d = DomainGeometry::rounded_box([0.6, 0.5, 0.4], 0.3);
                    d.r0 = *r0;
                    Ok(d)
                }
                other => Err(Error::Config(format!("unknown builtin sdf '{other}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub eta0: f64,
    #[serde(default = "default_dep_range")]
    pub dep_range: f64,
    #[serde(default = "default_h_env")]
    pub h_env: f64,
    #[serde(default = "default_gain")]
    pub gain: f64,
    /// Optional override of the coverage half-width; otherwise derived from
    /// the experiment geometry.
    #[serde(default)]
    pub half_width: Option<f64>,
}

fn default_dep_range() -> f64 {
    16.0
}
fn default_h_env() -> f64 {
    2.0
}
fn default_gain() -> f64 {
    4.0
}

impl EnvConfig {
    pub fn params(&self, seed: u64, needed_half_width: f64) -> EnvironmentParams {
        let hw = self.half_width.unwrap_or(needed_half_width);
        EnvironmentParams::new(self.eta0, self.dep_range, self.h_env, seed, Region::cube(hw))
            .with_gain(self.gain)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub l0: u64,
    pub a_num: u32,
    pub a_den: u32,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_dim")]
    pub d: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_regime")]
    pub regime: Regime,
}

fn default_beta() -> f64 {
    0.5
}
fn default_c0() -> f64 {
    1.0
}
fn default_dim() -> usize {
    3
}
fn default_n_max() -> usize {
    6
}
fn default_regime() -> Regime {
    Regime::Desk
}

impl ScheduleConfig {
    pub fn params(&self) -> ScheduleParams {
        let mut p = ScheduleParams::desk(
            self.l0,
            RationalExp::new(self.a_num, self.a_den),
            self.beta,
            self.c0,
            self.d,
            self.n_max,
        );
        p.regime = self.regime;
        p
    }
}

/// The top-level experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub schedule: ScheduleConfig,
    pub domain: DomainSpec,
    pub boundary_function: BoundaryFunction,
    pub epsilons: Vec<f64>,
    /// Probes in the closure of U; when empty a default probe set is placed
    /// along the first axis including near-boundary points.
    #[serde(default)]
    pub probes: Vec<Point>,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Integrator step override (microscopic units).
    #[serde(default)]
    pub dt: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| *e <= 0.0 || *e >= 1.0) {
            return Err(Error::Config(
                "epsilons must be a nonempty list inside (0, 1)".into(),
            ));
        }
        let domain = self.domain.build()?;
        for p in &self.probes {
            if !domain.contains(*p) && domain.distance_to_set(*p) > 1e-9 {
                return Err(Error::Config(format!(
                    "probe {p:?} lies outside the closure of the domain"
                )));
            }
        }
        self.schedule.params().validate()?;
        Ok(())
    }

    /// Default probe set: interior points along the first axis plus
    /// near-boundary points at distances {2 delta_probe, r0/2} from the
    /// boundary, with delta_probe tied to the smallest epsilon.
    pub fn probe_set(&self) -> Result<Vec<Point>> {
        if !self.probes.is_empty() {
            return Ok(self.probes.clone());
        }
        let domain = self.domain.build()?;
        let r = domain.bounding_half_width();
        let eps_min = self.epsilons.iter().cloned().fold(f64::INFINITY, f64::min);
        let delta_probe = (2.0 * eps_min * 2.0 * domain.r0).min(0.05 * r);
        let half_r0 = (domain.r0 / 2.0).min(0.999 * r);
        let fracs = [0.0, 0.3, 0.5, 0.65, 0.8, 0.9];
        let mut probes: Vec<Point> = fracs.iter().map(|f| [f * r, 0.0, 0.0]).collect();
        probes.push([r - half_r0, 0.0, 0.0]);
        probes.push([r - delta_probe, 0.0, 0.0]);
        Ok(probes)
    }

    /// Bracketing schedule level for each epsilon: the n with
    /// L_n <= 1/eps < L_{n+1}, when the desk schedule reaches that range.
    pub fn bracket_levels(&self) -> Result<Vec<Option<usize>>> {
        let schedule = crate::scales::build_schedule(&self.schedule.params())?;
        Ok(self
            .epsilons
            .iter()
            .map(|eps| {
                let inv = 1.0 / eps;
                schedule
                    .levels
                    .windows(2)
                    .find(|w| w[0].l_f64() <= inv && inv < w[1].l_f64())
                    .map(|w| w[0].n)
            })
            .collect())
    }
}
