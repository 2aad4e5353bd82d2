//! Experiment files (TOML) and their validation into an executable plan.
//!
//! Every table rejects unknown keys. Optional keys are kept as `Option` so
//! that serializing a parsed file gives back the same key set; defaults are
//! applied while building the plan.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use fwlab_core::dynamics::{
    builtin_system, halton, stability_certificate, AttractorSpec, Diffusion, Geometry,
    LyapunovConstants, Polynomial, PolynomialSystem, Structure, SystemSpec,
};
use fwlab_core::grid::GridSpec;
use fwlab_core::hierarchy::{default_tie_tolerance, CostMatrix, CostSource};
use fwlab_core::mam::{MamConfig, DEFAULT_MARGIN};
use fwlab_core::measure::{CycleConfig, DEFAULT_RHO1};
use fwlab_core::simulate::{SimConfig, Target};
use serde::{Deserialize, Serialize};

use crate::reproduce::Example;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    Quasipotential,
    Wgraph,
    Measure,
    Reproduce,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Quasipotential => "quasipotential",
            Stage::Wgraph => "wgraph",
            Stage::Measure => "measure",
            Stage::Reproduce => "reproduce",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When present, must match the subcommand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quasipotential: Option<QuasiPotentialConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wgraph: Option<WGraphConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<MeasureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproduce: Option<ReproduceConfig>,
}

/// Either a built-in system or an inline polynomial one; `sets` and
/// `constants` override the built-in values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polynomial: Option<PolynomialConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sets: Option<Vec<AttractorSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<LyapunovConstants>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dim: usize,
    /// Checked numerically against the drift and potential; default `general`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<Structure>,
    /// Constant row-major diffusion matrix; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<Vec<f64>>,
    pub drift: Vec<Polynomial>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<Polynomial>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub eps: f64,
    pub h: f64,
    /// May be `inf` when `stop` is given.
    pub horizon: f64,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thinning: Option<usize>,
    /// More than one replica writes terminal states only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopConfig>,
}

/// Stop on entering the `radius`-neighborhood of the set labelled `set`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopConfig {
    pub set: usize,
    pub radius: f64,
}

/// Endpoints are points (`from`, `to`) or set labels (`from_set`, `to_set`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuasiPotentialConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_set: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_set: Option<usize>,
    /// Avoid every other equivalent set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mam: Option<MamConfig>,
}

/// Costs come from a `CostMatrix` JSON file or from mam (`compute = true`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WGraphConfig {
    /// Relative paths are resolved against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mam: Option<MamConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_tolerance: Option<f64>,
    /// Stability flags in label order; taken from the sets when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stable: Option<Vec<bool>>,
    /// Points at which the rate function is evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_points: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub eps: f64,
    pub h: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    /// Concentration neighborhoods have radius `delta + rho1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho1: Option<f64>,
    /// Compare with the Gibbs density; default on for gradient systems.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gibbs: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles: Option<CycleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ldp: Option<LdpConfig>,
}

/// Exponent fit of the mass of the ball `B(center, radius)` across noise levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdpConfig {
    pub eps: Vec<f64>,
    /// One horizon per level, or a single horizon for all.
    pub horizons: Vec<f64>,
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproduceConfig {
    pub example: Example,
}

pub const DEFAULT_OUT: &str = "fwlab-out";
pub const DEFAULT_DELTA: f64 = 0.3;
pub const DEFAULT_BINS: usize = 100;

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("invalid config: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> Result<String, String> {
        toml::to_string(self).map_err(|e| format!("cannot serialize config: {e}"))
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

/// A resolved system with its equivalent sets.
#[derive(Clone, Debug)]
pub struct System {
    pub spec: SystemSpec,
    pub sets: Vec<AttractorSpec>,
    pub builtin: Option<String>,
}

impl System {
    pub fn set(&self, label: usize) -> Result<&AttractorSpec, String> {
        self.sets
            .iter()
            .find(|k| k.label == label)
            .ok_or_else(|| format!("no equivalent set with label {label}"))
    }

    /// Stability flags in label order, certifying unflagged sets from the potential.
    pub fn stable_flags(&self) -> Result<Vec<bool>, String> {
        self.sets
            .iter()
            .map(|k| match k.stable {
                Some(s) => Ok(s),
                None if self.spec.has_potential() => stability_certificate(&self.spec, k, 0.05, 64)
                    .map_err(|e| format!("stability of set {}: {e}", k.label)),
                None => Err(format!("set {} has no stability flag and the system has no potential", k.label)),
            })
            .collect()
    }

    fn check_point(&self, what: &str, x: &[f64]) -> Result<(), String> {
        if x.len() != self.spec.dim() {
            return Err(format!("{what} has dimension {}, system has {}", x.len(), self.spec.dim()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(format!("{what} must be finite"));
        }
        Ok(())
    }
}

const CHECK_PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
const STRUCTURE_SAMPLES: u64 = 256;
const STRUCTURE_TOL: f64 = 1e-8;

/// Samples `[-2, 2]^d` and checks the claimed drift/potential relation.
fn check_structure(sys: &SystemSpec, structure: Structure) -> Result<(), String> {
    if structure == Structure::General {
        return Ok(());
    }
    let d = sys.dim();
    if !sys.has_potential() {
        return Err(format!("structure {structure:?} needs a potential"));
    }
    if d > CHECK_PRIMES.len() {
        return Err(format!("structure checks support dimension <= {}", CHECK_PRIMES.len()));
    }
    let mut b = vec![0.0; d];
    for k in 1..=STRUCTURE_SAMPLES {
        let x: Vec<f64> = CHECK_PRIMES[..d].iter().map(|&p| 4.0 * halton(k, p) - 2.0).collect();
        sys.drift_into(&x, &mut b);
        let g = sys.potential_gradient(&x).expect("potential present");
        let g2: f64 = g.iter().map(|v| v * v).sum();
        let resid: Vec<f64> = b.iter().zip(&g).map(|(b, g)| b + g).collect();
        let bad = match structure {
            Structure::Gradient => resid.iter().map(|v| v * v).sum::<f64>().sqrt() > STRUCTURE_TOL * (1.0 + g2.sqrt()),
            Structure::QuasiGradient => {
                resid.iter().zip(&g).map(|(r, g)| r * g).sum::<f64>().abs() > STRUCTURE_TOL * (1.0 + g2)
            }
            Structure::General => false,
        };
        if bad {
            return Err(format!("drift is not {structure:?} with respect to the potential at x = {x:?}"));
        }
    }
    Ok(())
}

impl SystemConfig {
    pub fn resolve(&self) -> Result<System, String> {
        let (spec, sets, builtin) = match (&self.builtin, &self.polynomial) {
            (Some(name), None) => {
                let (spec, sets) = builtin_system(name).map_err(|e| e.to_string())?;
                (spec, sets, Some(name.clone()))
            }
            (None, Some(p)) => {
                let model = PolynomialSystem::new(p.dim, p.drift.clone(), p.potential.clone())
                    .map_err(|e| format!("polynomial system: {e}"))?;
                let structure = p.structure.unwrap_or(Structure::General);
                let mut spec = SystemSpec::new(p.name.clone().unwrap_or_else(|| "polynomial".into()), Arc::new(model))
                    .with_structure(structure);
                if let Some(m) = &p.diffusion {
                    if m.len() != p.dim * p.dim || m.iter().any(|v| !v.is_finite()) {
                        return Err(format!("diffusion must be {0}x{0} finite entries", p.dim));
                    }
                    spec = spec.with_diffusion(Diffusion::Constant(m.clone()));
                }
                check_structure(&spec, structure)?;
                (spec, Vec::new(), None)
            }
            _ => return Err("system needs exactly one of `builtin` or `polynomial`".into()),
        };
        let mut spec = spec;
        if let Some(c) = self.constants {
            let ok = [c.zeta, c.kappa, c.radius, c.lambda_bar, c.lambda_under].iter().all(|v| *v > 0.0 && v.is_finite());
            if !ok {
                return Err("Lyapunov constants must be positive and finite".into());
            }
            spec = spec.with_constants(c);
        }
        let sets = self.sets.clone().unwrap_or(sets);
        for (i, k) in sets.iter().enumerate() {
            if k.label != i + 1 {
                return Err(format!("set labels must be 1, 2, ... in order; found {} at position {}", k.label, i + 1));
            }
            if k.geometry.dim() != spec.dim() {
                return Err(format!("set {} has dimension {}, system has {}", k.label, k.geometry.dim(), spec.dim()));
            }
            if let Geometry::Circle { radius, .. } = k.geometry {
                Geometry::circle([0.0, 0.0], radius).map_err(|e| format!("set {}: {e}", k.label))?;
            }
        }
        Ok(System { spec, sets, builtin })
    }
}

/// Validated, defaults-applied form of a stage.
#[derive(Debug)]
pub enum Plan {
    Simulate(SimulatePlan),
    QuasiPotential(QuasiPotentialPlan),
    WGraph(WGraphPlan),
    Measure(MeasurePlan),
    Reproduce(Example),
}

#[derive(Debug)]
pub struct SimulatePlan {
    pub system: System,
    pub sim: SimConfig,
    pub x0: Vec<f64>,
    pub replicas: u64,
    pub stop: Option<Target>,
}

#[derive(Debug)]
pub enum Endpoint {
    Point(Vec<f64>),
    Set(usize),
}

#[derive(Debug)]
pub struct QuasiPotentialPlan {
    pub system: System,
    pub from: Endpoint,
    pub to: Endpoint,
    pub exclude: bool,
    pub margin: f64,
    pub mam: MamConfig,
}

#[derive(Debug)]
pub enum CostInput {
    File(CostMatrix),
    Compute { exclude: bool, margin: f64, mam: MamConfig },
}

#[derive(Debug)]
pub struct WGraphPlan {
    pub system: Option<System>,
    pub costs: CostInput,
    pub stable: Vec<bool>,
    pub tie_tolerance: f64,
    pub rate_points: Vec<Vec<f64>>,
    pub margin: f64,
    pub mam: MamConfig,
}

#[derive(Debug)]
pub struct LdpPlan {
    pub levels: Vec<(f64, f64)>,
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug)]
pub struct MeasurePlan {
    pub system: System,
    pub sim: SimConfig,
    pub x0: Vec<f64>,
    pub burn_in: f64,
    pub replicas: u64,
    pub grid: GridSpec,
    pub delta: f64,
    pub rho1: f64,
    pub gibbs: bool,
    pub cycles: Option<CycleConfig>,
    pub ldp: Option<LdpPlan>,
}

fn require<T: Clone>(v: &Option<T>, what: &str) -> Result<T, String> {
    v.clone().ok_or_else(|| format!("missing [{what}] table"))
}

fn positive(v: f64, what: &str) -> Result<f64, String> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{what} must be positive and finite, got {v}"))
    }
}

fn mam_config(cfg: &Option<MamConfig>, seed: u64) -> Result<MamConfig, String> {
    let mam = MamConfig { seed, ..cfg.clone().unwrap_or_default() };
    mam.validate().map_err(|e| e.to_string())?;
    Ok(mam)
}

fn margin(m: Option<f64>) -> Result<f64, String> {
    positive(m.unwrap_or(DEFAULT_MARGIN), "margin")
}

impl ExperimentConfig {
    fn system(&self) -> Result<System, String> {
        self.system.as_ref().ok_or("missing [system] table")?.resolve()
    }

    /// Checks everything that can be checked before computing. `base` is
    /// the directory relative paths are resolved against.
    pub fn plan(&self, stage: Stage, base: &Path, example: Option<Example>) -> Result<Plan, String> {
        if let Some(s) = self.stage {
            if s != stage {
                return Err(format!("config is for stage `{}`, not `{}`", s.name(), stage.name()));
            }
        }
        let seed = self.effective_seed();
        match stage {
            Stage::Simulate => self.plan_simulate(seed).map(Plan::Simulate),
            Stage::Quasipotential => self.plan_quasipotential(seed).map(Plan::QuasiPotential),
            Stage::Wgraph => self.plan_wgraph(seed, base).map(Plan::WGraph),
            Stage::Measure => self.plan_measure(seed).map(Plan::Measure),
            Stage::Reproduce => {
                let from_config = self.reproduce.as_ref().map(|r| r.example);
                match (example, from_config) {
                    (Some(a), Some(b)) if a != b => {
                        Err(format!("example `{}` conflicts with config example `{}`", a.name(), b.name()))
                    }
                    (Some(e), _) | (None, Some(e)) => Ok(Plan::Reproduce(e)),
                    (None, None) => Err("reproduce needs an example name".into()),
                }
            }
        }
    }

    fn plan_simulate(&self, seed: u64) -> Result<SimulatePlan, String> {
        let c = require(&self.simulate, "simulate")?;
        let system = self.system()?;
        system.check_point("x0", &c.x0)?;
        let sim = SimConfig::new(c.eps, c.h, c.horizon, seed).with_thinning(c.thinning.unwrap_or(1));
        sim.validate().map_err(|e| e.to_string())?;
        let replicas = c.replicas.unwrap_or(1);
        if replicas == 0 {
            return Err("replicas must be >= 1".into());
        }
        let stop = match &c.stop {
            Some(s) => {
                positive(s.radius, "stop radius")?;
                Some(Target::within(system.set(s.set)?.geometry.clone(), s.radius))
            }
            None => None,
        };
        if replicas > 1 && stop.is_some() {
            return Err("stop targets apply to single-replica runs only".into());
        }
        if !sim.horizon.is_finite() && stop.is_none() {
            return Err("an infinite horizon needs a stop target".into());
        }
        Ok(SimulatePlan { system, sim, x0: c.x0, replicas, stop })
    }

    fn plan_quasipotential(&self, seed: u64) -> Result<QuasiPotentialPlan, String> {
        let c = require(&self.quasipotential, "quasipotential")?;
        let system = self.system()?;
        let endpoint = |point: &Option<Vec<f64>>, label: Option<usize>, what: &str| -> Result<Endpoint, String> {
            match (point, label) {
                (Some(x), None) => {
                    system.check_point(what, x)?;
                    Ok(Endpoint::Point(x.clone()))
                }
                (None, Some(l)) => system.set(l).map(|_| Endpoint::Set(l)),
                _ => Err(format!("give exactly one of `{what}` or `{what}_set`")),
            }
        };
        let from = endpoint(&c.from, c.from_set, "from")?;
        let to = endpoint(&c.to, c.to_set, "to")?;
        Ok(QuasiPotentialPlan {
            from,
            to,
            exclude: c.exclude.unwrap_or(false),
            margin: margin(c.margin)?,
            mam: mam_config(&c.mam, seed)?,
            system,
        })
    }

    fn plan_wgraph(&self, seed: u64, base: &Path) -> Result<WGraphPlan, String> {
        let c = self.wgraph.clone().unwrap_or_default();
        let system = self.system.as_ref().map(SystemConfig::resolve).transpose()?;
        let mam = mam_config(&c.mam, seed)?;
        let margin = margin(c.margin)?;
        let costs = match (&c.matrix, c.compute.unwrap_or(false)) {
            (Some(path), false) => {
                let path = if path.is_absolute() { path.clone() } else { base.join(path) };
                let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                let cm: CostMatrix =
                    serde_json::from_str(&text).map_err(|e| format!("invalid cost matrix {}: {e}", path.display()))?;
                cm.validate().map_err(|e| e.to_string())?;
                CostInput::File(cm)
            }
            (None, true) => {
                let sys = system.as_ref().ok_or("compute = true needs a [system] table")?;
                if sys.sets.len() < 2 {
                    return Err("at least two equivalent sets are needed".into());
                }
                CostInput::Compute { exclude: c.exclude.unwrap_or(true), margin, mam: mam.clone() }
            }
            _ => return Err("[wgraph] needs exactly one of `matrix` or `compute = true`".into()),
        };
        let l = match &costs {
            CostInput::File(cm) => cm.len(),
            CostInput::Compute { .. } => system.as_ref().map_or(0, |s| s.sets.len()),
        };
        let stable = match (&c.stable, &system) {
            (Some(s), _) => s.clone(),
            (None, Some(sys)) => sys.stable_flags()?,
            (None, None) => return Err("`stable` is required without a [system] table".into()),
        };
        if stable.len() != l {
            return Err(format!("{} stability flags for {l} sets", stable.len()));
        }
        if !stable.iter().any(|&s| s) {
            return Err("at least one equivalent set must be stable".into());
        }
        let source = match &costs {
            CostInput::File(cm) => cm.source,
            CostInput::Compute { .. } => CostSource::Mam,
        };
        let tie_tolerance = c.tie_tolerance.unwrap_or_else(|| default_tie_tolerance(source));
        if !(tie_tolerance >= 0.0 && tie_tolerance.is_finite()) {
            return Err("tie_tolerance must be >= 0".into());
        }
        let rate_points = c.rate_points.clone().unwrap_or_default();
        if !rate_points.is_empty() {
            let sys = system.as_ref().ok_or("rate_points need a [system] table")?;
            if sys.sets.len() != l {
                return Err(format!("matrix has {l} sets, system has {}", sys.sets.len()));
            }
            for x in &rate_points {
                sys.check_point("rate point", x)?;
            }
        }
        Ok(WGraphPlan { system, costs, stable, tie_tolerance, rate_points, margin, mam })
    }

    fn plan_measure(&self, seed: u64) -> Result<MeasurePlan, String> {
        let c = require(&self.measure, "measure")?;
        let system = self.system()?;
        system.check_point("x0", &c.x0)?;
        if system.spec.dim() != 2 {
            return Err("measures are estimated on planar grids; the system must be 2-dimensional".into());
        }
        let sim = SimConfig::new(c.eps, c.h, c.horizon, seed);
        sim.validate().map_err(|e| e.to_string())?;
        if !sim.horizon.is_finite() {
            return Err("measure horizon must be finite".into());
        }
        let burn_in = c.burn_in.unwrap_or(0.0);
        if !(burn_in >= 0.0 && burn_in < sim.horizon) {
            return Err(format!("burn_in must lie in [0, horizon), got {burn_in}"));
        }
        let replicas = c.replicas.unwrap_or(1);
        if replicas == 0 {
            return Err("replicas must be >= 1".into());
        }
        let grid = c.grid.unwrap_or_else(|| default_grid(system.builtin.as_deref()));
        grid.validate().map_err(|e| e.to_string())?;
        let delta = c.delta.unwrap_or(DEFAULT_DELTA);
        let rho1 = c.rho1.unwrap_or(DEFAULT_RHO1);
        if !(delta >= 0.0 && rho1 >= 0.0 && (delta + rho1).is_finite()) {
            return Err("delta and rho1 must be >= 0".into());
        }
        let gibbs_capable =
            system.spec.structure() == Structure::Gradient && matches!(system.spec.diffusion(), Diffusion::Identity);
        let gibbs = match c.gibbs {
            Some(true) if !gibbs_capable => {
                return Err("the Gibbs density needs a gradient system with identity diffusion".into())
            }
            Some(g) => g,
            None => gibbs_capable,
        };
        if let Some(cc) = &c.cycles {
            cc.validate(&system.sets).map_err(|e| e.to_string())?;
        }
        let ldp = match &c.ldp {
            Some(l) => {
                if l.eps.len() < 3 {
                    return Err("the exponent fit needs at least 3 noise levels".into());
                }
                let horizons = match l.horizons.len() {
                    1 => vec![l.horizons[0]; l.eps.len()],
                    n if n == l.eps.len() => l.horizons.clone(),
                    n => return Err(format!("{n} horizons for {} noise levels", l.eps.len())),
                };
                for (&e, &t) in l.eps.iter().zip(&horizons) {
                    positive(e, "ldp eps")?;
                    positive(t, "ldp horizon")?;
                    if burn_in >= t {
                        return Err(format!("burn_in {burn_in} is not below ldp horizon {t}"));
                    }
                }
                positive(l.radius, "ldp radius")?;
                if grid.cells_within(l.center, l.radius).is_empty() {
                    return Err("the ldp region contains no grid cell centers".into());
                }
                Some(LdpPlan { levels: l.eps.iter().copied().zip(horizons).collect(), center: l.center, radius: l.radius })
            }
            None => None,
        };
        Ok(MeasurePlan { system, sim, x0: c.x0, burn_in, replicas, grid, delta, rho1, gibbs, cycles: c.cycles, ldp })
    }
}

/// `[-2.5, 2.5]²` for the lemniscate system, `[-2, 2]²` otherwise.
pub fn default_grid(builtin: Option<&str>) -> GridSpec {
    let half = if builtin == Some("bernoulli") { 2.5 } else { 2.0 };
    GridSpec::square(half, DEFAULT_BINS).expect("static grid is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
stage = "measure"
seed = 7
out = "runs/a"

[system]
builtin = "gradient"

[system.constants]
zeta = 1.0
kappa = 1.0
radius = 2.0
lambda_bar = 1.0
lambda_under = 1.0

[[system.sets]]
label = 1
stable = false

[system.sets.geometry]
point = [0.0, 0.0]

[[system.sets]]
label = 2
stable = true

[system.sets.geometry]
point = [-1.0, 0.0]

[[system.sets]]
label = 3
stable = true

[system.sets.geometry.circle]
center = [1.0, 0.0]
radius = 0.01

[measure]
eps = 0.3
h = 0.005
horizon = 100.0
x0 = [-1.0, 0.0]
burn_in = 1.0
replicas = 2
delta = 0.2
rho1 = 0.1
gibbs = true

[measure.grid]
x_range = [-2.0, 2.0]
y_range = [-2.0, 2.0]
bins = [40, 40]

[measure.cycles]
rho1 = 0.2
rho2 = 0.1
cycles = 10
chains = 2
max_cycle_time = 1000.0

[measure.ldp]
eps = [0.35, 0.3, 0.25]
horizons = [100.0]
center = [0.0, 0.0]
radius = 0.1
"#;

    const POLY: &str = r#"
seed = 1

[system.polynomial]
name = "double-well"
dim = 2
structure = "gradient"
drift = [
  [{ coef = -1.0, powers = [3, 0] }, { coef = 1.0, powers = [1, 0] }],
  [{ coef = -1.0, powers = [0, 1] }],
]
potential = [
  { coef = 0.25, powers = [4, 0] },
  { coef = 0.5, powers = [0, 2] },
  { coef = -0.5, powers = [2, 0] },
  { coef = 1.0, powers = [0, 0] },
]

[quasipotential]
from = [-1.0, 0.0]
to = [0.0, 0.0]
exclude = false
margin = 0.05

[quasipotential.mam]
segments = 100
durations = [2.0, 5.0]
max_iters = 1000
grad_tol = 1e-6
penalty_weight = 1000.0
max_doublings = 2
restarts = 1
seed = 0
"#;

    fn round_trip(text: &str) {
        let parsed = ExperimentConfig::parse(text).unwrap();
        let written = parsed.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&written).unwrap(), parsed);
        let original: toml::Value = toml::from_str(text).unwrap();
        let echoed: toml::Value = toml::from_str(&written).unwrap();
        assert_eq!(original, echoed);
    }

    #[test]
    fn schema_round_trips() {
        round_trip(FULL);
        round_trip(POLY);
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in [
            "sed = 1",
            "[system]\nbuiltin = \"gradient\"\ncolour = 1",
            "[simulate]\neps = 0.1\nh = 0.01\nhorizon = 1.0\nx0 = [0.0, 0.0]\nsteps = 3",
            "[quasipotential.mam]\nsegmnts = 3",
            "[[system.sets]]\nlabel = 1\ngeometry = { point = [0.0, 0.0] }\nstabel = true",
            "[system.constants]\nzeta = 1.0\nkappa = 1.0\nradius = 2.0\nlambda_bar = 1.0\nlambda_under = 1.0\nmu = 3.0",
        ] {
            assert!(ExperimentConfig::parse(bad).is_err(), "accepted: {bad}");
        }
    }

    #[test]
    fn full_config_plans() {
        let cfg = ExperimentConfig::parse(FULL).unwrap();
        let Plan::Measure(p) = cfg.plan(Stage::Measure, Path::new("."), None).unwrap() else { panic!() };
        assert_eq!(p.sim.seed, 7);
        assert_eq!(p.grid.bins, [40, 40]);
        assert_eq!(p.ldp.unwrap().levels, vec![(0.35, 100.0), (0.3, 100.0), (0.25, 100.0)]);
        assert!(p.gibbs);
        let err = cfg.plan(Stage::Simulate, Path::new("."), None).unwrap_err();
        assert!(err.contains("stage"), "{err}");
    }

    #[test]
    fn polynomial_structure_checked() {
        let cfg = ExperimentConfig::parse(POLY).unwrap();
        let Plan::QuasiPotential(p) = cfg.plan(Stage::Quasipotential, Path::new("."), None).unwrap() else {
            panic!()
        };
        assert_eq!(p.system.spec.structure(), Structure::Gradient);
        let wrong = POLY.replace("coef = -1.0, powers = [0, 1]", "coef = -2.0, powers = [0, 1]");
        let err = ExperimentConfig::parse(&wrong).unwrap().plan(Stage::Quasipotential, Path::new("."), None).unwrap_err();
        assert!(err.contains("not Gradient"), "{err}");
    }

    #[test]
    fn invalid_parameters_fail_validation() {
        let base = "[system]\nbuiltin = \"gradient\"\n[simulate]\nx0 = [0.0, 0.0]\nh = 0.01\n";
        for (extra, needle) in [
            ("eps = -1.0\nhorizon = 1.0", "eps"),
            ("eps = 0.1\nhorizon = inf", "stop"),
            ("eps = 0.1\nhorizon = 1.0\nstop = { set = 9, radius = 0.1 }", "label 9"),
            ("eps = 0.1\nhorizon = 1.0\nreplicas = 0", "replicas"),
        ] {
            let cfg = ExperimentConfig::parse(&format!("{base}{extra}")).unwrap();
            let err = cfg.plan(Stage::Simulate, Path::new("."), None).unwrap_err();
            assert!(err.contains(needle), "{extra}: {err}");
        }
        let unknown = ExperimentConfig::parse("[system]\nbuiltin = \"lorenz\"\n[simulate]\neps = 0.1\nh = 0.01\nhorizon = 1.0\nx0 = [0.0, 0.0]").unwrap();
        assert!(unknown.plan(Stage::Simulate, Path::new("."), None).is_err());
    }

    #[test]
    fn wgraph_needs_stability_without_system() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.json"), r#"{"values":[[0.0,1.0],[2.0,0.0]],"source":"user"}"#).unwrap();
        let cfg = ExperimentConfig::parse("[wgraph]\nmatrix = \"m.json\"").unwrap();
        assert!(cfg.plan(Stage::Wgraph, dir.path(), None).unwrap_err().contains("stable"));
        let cfg = ExperimentConfig::parse("[wgraph]\nmatrix = \"m.json\"\nstable = [true, true]").unwrap();
        let Plan::WGraph(p) = cfg.plan(Stage::Wgraph, dir.path(), None).unwrap() else { panic!() };
        assert_eq!(p.tie_tolerance, 0.0);
    }
}
