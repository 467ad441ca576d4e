//! Benchmark scenarios, their configuration files, orchestration across formulations
//! and meshes, and CSV/JSON output.
//!
//! Every (formulation, mesh) run is independent: a failure is recorded in its stats
//! row and the remaining runs proceed.

use crate::assembly::{
    block, set_block, AssemblyError, Formulation, Loading, PointLoad, Regime, RodIterate, RodModel, Support, Supports,
};
use crate::diagnostics::{
    condition_estimate, energies, error_norms, momenta, stress_resultants, Energies, ErrorNorms, RunStats,
};
use crate::rodcore::{DistributedLoad, EndMoment, FlowProfile, RodProperties, SeabedBarrier, V3};
use crate::solvers::{dynamic_step, newton_solve, static_step, DynamicState, NewtonConfig, SolverError, StaticTarget, StepReport};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Standard gravity.
pub const GRAVITY: f64 = 9.81;

/// Build identifier stamped on every table: `RODLAB_BUILD_ID` at compile time, else the crate version.
pub fn build_id() -> String {
    option_env!("RODLAB_BUILD_ID").map(str::to_string).unwrap_or_else(|| format!("rodlab-{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize configuration: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] AssemblyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Rollup,
    Catenary,
    Mooring2d,
    Mooring3d,
    ConditionSweep,
    FreeRod,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Rollup,
        ScenarioKind::Catenary,
        ScenarioKind::Mooring2d,
        ScenarioKind::Mooring3d,
        ScenarioKind::ConditionSweep,
        ScenarioKind::FreeRod,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            ScenarioKind::Rollup => "rollup",
            ScenarioKind::Catenary => "catenary",
            ScenarioKind::Mooring2d => "mooring2d",
            ScenarioKind::Mooring3d => "mooring3d",
            ScenarioKind::ConditionSweep => "condition_sweep",
            ScenarioKind::FreeRod => "free_rod",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        let id = id.replace('-', "_");
        Self::ALL.into_iter().find(|k| k.id() == id)
    }
}

/// Load and time stepping. Static scenarios use the step counts, dynamic ones `dt`,
/// `horizon` and `ramp_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stepping {
    /// Roll-up: number of equal moment increments.
    #[serde(default)]
    pub load_steps: usize,
    /// Catenary: right-end stretch applied in one step before any load.
    #[serde(default)]
    pub prestress: f64,
    #[serde(default)]
    pub weight_steps: usize,
    #[serde(default)]
    pub fairlead_steps: usize,
    #[serde(default)]
    pub dt: f64,
    #[serde(default)]
    pub horizon: f64,
    /// Loads grow linearly to full value over this time.
    #[serde(default)]
    pub ramp_time: f64,
    /// Snapshot interval: load steps for statics, seconds for dynamics.
    #[serde(default)]
    pub snapshot_every: f64,
}

/// Condition sweep parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub penalty_factors: Vec<f64>,
    pub director_scales: Vec<f64>,
    /// Time step of the dynamic system matrix.
    pub dt: f64,
    /// Load factor of the first load step.
    pub load_factor: f64,
}

/// Rigid initial motion plus a bending perturbation, for the free rod.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialMotion {
    pub translation_velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
    /// Amplitude of a half-sine transverse offset in the initial shape.
    pub bend_amplitude: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub rod: RodProperties,
    pub formulations: Vec<Formulation>,
    pub meshes: Vec<usize>,
    pub supports: Supports,
    pub loading: Loading,
    pub stepping: Stepping,
    /// Catenary: final prescribed position of the right end.
    #[serde(default)]
    pub fairlead: Option<[f64; 3]>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub initial_motion: Option<InitialMotion>,
    #[serde(default)]
    pub newton: NewtonConfig,
    /// Centerline samples per snapshot.
    pub samples: usize,
    /// Randomized checks only; physics is deterministic.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Kevlar-type cable used by the catenary and the condition sweep.
fn kevlar_cable() -> RodProperties {
    RodProperties::circular(81.8e9, 1429.0, 0.007, 300.0)
}

/// Mooring chain: equivalent line density from the submerged weight `w_s = (rho_s - rho_w) g A_eff`
/// with steel and sea water densities, and a circular-equivalent bending inertia `A^2 / 4 pi`.
fn mooring_line() -> RodProperties {
    let (young, area, submerged) = (5.6e10, 0.0159, 2460.0);
    let (steel, water) = (7850.0, 1025.0);
    let line_density = submerged / (GRAVITY * (1.0 - water / steel));
    let inertia = area * area / (4.0 * PI);
    RodProperties {
        length: 627.0,
        axial_stiffness: young * area,
        bending_stiffness: young * inertia,
        line_density,
        rotary_inertia: line_density * inertia / area,
    }
}

fn nodal_set(beta: f64) -> Vec<Formulation> {
    vec![
        Formulation::NodalR3 { director_scale: 1.0 },
        Formulation::NodalSpp { director_scale: 1.0 },
        Formulation::NodalSppReduced { director_scale: 1.0 },
        Formulation::NodalPenalty { beta, director_scale: 1.0 },
    ]
}

impl ScenarioConfig {
    /// Reference setup of each benchmark.
    pub fn preset(kind: ScenarioKind) -> Self {
        let base = Stepping {
            load_steps: 0,
            prestress: 0.0,
            weight_steps: 0,
            fairlead_steps: 0,
            dt: 0.0,
            horizon: 0.0,
            ramp_time: 0.0,
            snapshot_every: 0.0,
        };
        match kind {
            ScenarioKind::Rollup => {
                let rod = RodProperties { length: 40.0, axial_stiffness: 100.0, bending_stiffness: 200.0, line_density: 1.0, rotary_inertia: 0.0 };
                let mut formulations = vec![Formulation::iga_cubic(1)];
                formulations.extend(nodal_set(1e5));
                Self {
                    scenario: kind,
                    loading: Loading {
                        end_moment: Some(EndMoment { magnitude: 2.0 * PI * rod.bending_stiffness / rod.length, axis: [0.0, -1.0, 0.0] }),
                        ..Default::default()
                    },
                    rod,
                    formulations,
                    meshes: vec![40],
                    supports: Supports { left: Support::Clamped, right: Support::Free },
                    stepping: Stepping { load_steps: 55, snapshot_every: 11.0, ..base },
                    fairlead: None,
                    sweep: None,
                    initial_motion: None,
                    newton: NewtonConfig { max_halvings: 0, ..Default::default() },
                    samples: 201,
                    seed: 0,
                    output: None,
                }
            }
            ScenarioKind::Catenary => {
                let rod = kevlar_cable();
                let air = 1.225;
                let drag = 0.5 * air * 1.2 * 0.007;
                let mut formulations = vec![Formulation::iga_cubic(1), Formulation::Iga { degree: 3, continuity: 1, outlier_removal: true }];
                formulations.extend(nodal_set(1e8));
                // Cross-formulation agreement uses the weaker penalty; the iteration table uses 1e8.
                formulations.push(Formulation::NodalPenalty { beta: 1e5, director_scale: 1.0 });
                Self {
                    scenario: kind,
                    loading: Loading {
                        distributed: DistributedLoad {
                            weight: [0.0, 0.0, -rod.line_density * GRAVITY],
                            flow: FlowProfile::Linear { speed_ref: 15.0, z_ref: 100.0, z_min: 0.0, z_max: 1.0e4 },
                            drag_coefficient: drag,
                            flow_direction: [1.0, 0.0, 0.0],
                        },
                        ..Default::default()
                    },
                    rod,
                    formulations,
                    meshes: vec![8, 16, 32, 64, 128, 256],
                    supports: Supports { left: Support::Pinned, right: Support::Pinned },
                    stepping: Stepping { prestress: 0.01, weight_steps: 50, fairlead_steps: 400, snapshot_every: 50.0, ..base },
                    fairlead: Some([50.0, 0.0, 280.0]),
                    sweep: None,
                    initial_motion: None,
                    newton: NewtonConfig::default(),
                    samples: 201,
                    seed: 0,
                    output: None,
                }
            }
            ScenarioKind::Mooring2d | ScenarioKind::Mooring3d => {
                let rod = mooring_line();
                // Catenary with horizontal tension H = w a: parameter a = 400 m and 300 m of
                // suspended line reach 100 m of height, so F = (w a, w 300).
                let w = 2460.0;
                let (fx, fz) = (w * 400.0, w * 300.0);
                let force = if kind == ScenarioKind::Mooring3d { [fx / 2f64.sqrt(), fx / 2f64.sqrt(), fz] } else { [fx, 0.0, fz] };
                let mut formulations = vec![Formulation::Iga { degree: 3, continuity: 1, outlier_removal: true }];
                formulations.extend(nodal_set(1e5));
                Self {
                    scenario: kind,
                    loading: Loading {
                        distributed: DistributedLoad {
                            weight: [0.0, 0.0, -w],
                            flow: FlowProfile::Logarithmic { amplitude: 2.0, shape: 9.0, z_ref: 100.0, z_min: 0.0, z_max: 100.0 },
                            drag_coefficient: 5.0,
                            flow_direction: [1.0, 0.0, 0.0],
                        },
                        point_loads: vec![PointLoad { s: rod.length, force }],
                        end_moment: None,
                        barrier: Some(SeabedBarrier { z_barrier: -0.5, strength: 25.0 }),
                    },
                    rod,
                    formulations,
                    meshes: vec![40],
                    supports: Supports { left: Support::Pinned, right: Support::Free },
                    stepping: Stepping { dt: 0.01, horizon: 30.0, ramp_time: 10.0, snapshot_every: 5.0, ..base },
                    fairlead: None,
                    sweep: None,
                    initial_motion: None,
                    newton: NewtonConfig::default(),
                    samples: 201,
                    seed: 0,
                    output: None,
                }
            }
            ScenarioKind::ConditionSweep => {
                let rod = kevlar_cable();
                let mut formulations = vec![Formulation::iga_cubic(1), Formulation::Iga { degree: 3, continuity: 1, outlier_removal: true }];
                formulations.extend(nodal_set(1.0));
                Self {
                    scenario: kind,
                    loading: Loading {
                        distributed: DistributedLoad { weight: [0.0, 0.0, -rod.line_density * GRAVITY], ..Default::default() },
                        ..Default::default()
                    },
                    rod,
                    formulations,
                    meshes: vec![40],
                    supports: Supports { left: Support::Pinned, right: Support::Pinned },
                    stepping: base,
                    fairlead: None,
                    sweep: Some(SweepSpec {
                        penalty_factors: (0..=10).map(|k| 10f64.powi(k)).collect(),
                        director_scales: (-2..=3).map(|k| 10f64.powi(k)).collect(),
                        dt: 0.01,
                        load_factor: 1.0 / 50.0,
                    }),
                    initial_motion: None,
                    newton: NewtonConfig::default(),
                    samples: 0,
                    seed: 0,
                    output: None,
                }
            }
            ScenarioKind::FreeRod => {
                let rod = RodProperties { length: 1.0, axial_stiffness: 100.0, bending_stiffness: 0.01, line_density: 1.0, rotary_inertia: 1e-4 };
                let mut formulations = vec![Formulation::iga_cubic(1)];
                formulations.extend(nodal_set(1e5));
                Self {
                    scenario: kind,
                    rod,
                    formulations,
                    meshes: vec![8],
                    supports: Supports { left: Support::Free, right: Support::Free },
                    loading: Loading::default(),
                    stepping: Stepping { dt: 0.02, ..base },
                    fairlead: None,
                    sweep: None,
                    initial_motion: Some(InitialMotion {
                        translation_velocity: [0.3, -0.1, 0.2],
                        angular_velocity: [0.2, 0.5, 1.0],
                        bend_amplitude: 0.05,
                        steps: 100,
                    }),
                    newton: NewtonConfig::default(),
                    samples: 51,
                    seed: 0,
                    output: None,
                }
            }
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    /// Checks every field a run depends on.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        self.rod.validate().map_err(|e| ScenarioError::Config(e.to_string()))?;
        if self.formulations.is_empty() {
            return bad("no formulations".into());
        }
        if self.meshes.is_empty() || self.meshes.contains(&0) {
            return bad("meshes must be a non-empty list of positive element counts".into());
        }
        for f in &self.formulations {
            match *f {
                Formulation::Iga { degree, continuity, .. } if degree < 2 || continuity < 1 || continuity >= degree => {
                    return bad(format!("{}: need degree >= 2 and 1 <= continuity < degree", f.label()));
                }
                Formulation::NodalPenalty { beta, .. } if !(beta > 0.0 && beta.is_finite()) => {
                    return bad(format!("penalty factor {beta} must be positive"));
                }
                _ => {}
            }
            if !(f.director_scale() > 0.0 && f.director_scale().is_finite()) {
                return bad(format!("{}: director scale must be positive", f.label()));
            }
        }
        if !(self.newton.tolerance > 0.0) || self.newton.max_iterations == 0 {
            return bad("newton tolerance and iteration limit must be positive".into());
        }
        let st = &self.stepping;
        match self.scenario {
            ScenarioKind::Rollup => {
                if st.load_steps == 0 {
                    return bad("rollup needs stepping.load_steps > 0".into());
                }
                if self.loading.end_moment.is_none() {
                    return bad("rollup needs loading.end_moment".into());
                }
                if self.supports != (Supports { left: Support::Clamped, right: Support::Free }) {
                    return bad("rollup needs a clamped-free rod".into());
                }
            }
            ScenarioKind::Catenary => {
                if self.fairlead.is_none() || st.weight_steps == 0 || st.fairlead_steps == 0 {
                    return bad("catenary needs fairlead, stepping.weight_steps and stepping.fairlead_steps".into());
                }
                if self.supports.right == Support::Free || self.supports.left == Support::Free {
                    return bad("catenary needs both ends supported".into());
                }
            }
            ScenarioKind::Mooring2d | ScenarioKind::Mooring3d | ScenarioKind::FreeRod => {
                if !(st.dt > 0.0) {
                    return bad("dynamic scenarios need stepping.dt > 0".into());
                }
                if self.scenario != ScenarioKind::FreeRod && !(st.horizon > 0.0) {
                    return bad("mooring needs stepping.horizon > 0".into());
                }
                if self.scenario == ScenarioKind::FreeRod && self.initial_motion.is_none() {
                    return bad("free_rod needs initial_motion".into());
                }
            }
            ScenarioKind::ConditionSweep => match &self.sweep {
                Some(s) if s.dt > 0.0 => {}
                _ => return bad("condition_sweep needs a sweep block with dt > 0".into()),
            },
        }
        if let Some(b) = &self.loading.barrier {
            if !(b.strength > 0.0) {
                return bad("barrier strength must be positive".into());
            }
        }
        for pl in &self.loading.point_loads {
            if !(0.0..=self.rod.length).contains(&pl.s) {
                return bad(format!("point load at s = {} outside the rod", pl.s));
            }
        }
        Ok(())
    }
}

/// Iterations of one load or time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub load_factor: f64,
    /// Largest Newton count among the solves of this step.
    pub max_iterations: usize,
    pub solves: usize,
    pub halvings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StressSample {
    pub s: f64,
    pub axial: f64,
    pub bending: f64,
    pub nodal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairleadSample {
    pub t: f64,
    pub displacement: [f64; 3],
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub t: f64,
    pub parts: Energies,
    pub linear_momentum: [f64; 3],
    pub angular_momentum: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub step: usize,
    pub message: String,
    pub ill_conditioned: bool,
}

/// Everything one (formulation, mesh) run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub formulation: Formulation,
    pub label: String,
    pub n_e: usize,
    pub stats: RunStats,
    pub steps: Vec<StepRecord>,
    pub failure: Option<Failure>,
    pub final_q: Option<Vec<f64>>,
    /// Centerline at `samples` equally spaced arc-length points of the final state.
    pub centerline: Vec<[f64; 3]>,
    pub snapshots: Vec<Snapshot>,
    pub stresses: Vec<StressSample>,
    pub norms: Option<ErrorNorms>,
    /// Tip distance to the clamp relative to the length (roll-up).
    pub closure: Option<f64>,
    pub fairlead: Vec<FairleadSample>,
    pub energy: Vec<EnergySample>,
}

impl RunRecord {
    fn new(f: Formulation, n_e: usize) -> Self {
        Self {
            formulation: f,
            label: f.label(),
            n_e,
            stats: RunStats::new(&f.label(), n_e),
            steps: vec![],
            failure: None,
            final_q: None,
            centerline: vec![],
            snapshots: vec![],
            stresses: vec![],
            norms: None,
            closure: None,
            fairlead: vec![],
            energy: vec![],
        }
    }

    pub fn converged(&self) -> bool {
        self.failure.is_none()
    }

    fn push_step(&mut self, step: usize, t: f64, load_factor: f64, report: &StepReport) {
        self.stats.record(&report.newton, report.halvings);
        self.steps.push(StepRecord {
            step,
            t,
            load_factor,
            max_iterations: report.max_iterations(),
            solves: report.newton.len(),
            halvings: report.halvings,
        });
    }

    fn fail(&mut self, step: usize, e: &SolverError) {
        let message = e.to_string();
        log::warn!("{} n_e={} failed at step {step}: {message}", self.label, self.n_e);
        self.stats.fail(format!("step {step}: {message}"));
        self.failure = Some(Failure { step, message, ill_conditioned: e.is_ill_conditioned() });
    }
}

/// One row of the condition-number sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub formulation: String,
    pub n_e: usize,
    pub regime: String,
    /// `none`, `beta` or `director_scale`.
    pub parameter: String,
    pub value: f64,
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub scenario: ScenarioKind,
    pub config: ScenarioConfig,
    pub runs: Vec<RunRecord>,
    pub conditions: Vec<ConditionRow>,
    /// Modelling choices a reader of the tables needs.
    pub notes: Vec<String>,
}

impl RunOutput {
    fn new(cfg: &ScenarioConfig) -> Self {
        Self { scenario: cfg.scenario, config: cfg.clone(), runs: vec![], conditions: vec![], notes: vec![] }
    }

    pub fn run(&self, label: &str, n_e: usize) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.label == label && r.n_e == n_e)
    }

    /// True when every run converged.
    pub fn all_converged(&self) -> bool {
        self.runs.iter().all(RunRecord::converged)
    }
}

/// Runs the configured scenario.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    cfg.validate()?;
    Ok(match cfg.scenario {
        ScenarioKind::Rollup => run_rollup(cfg),
        ScenarioKind::Catenary => run_catenary(cfg),
        ScenarioKind::Mooring2d | ScenarioKind::Mooring3d => run_mooring(cfg),
        ScenarioKind::ConditionSweep => run_condition_sweep(cfg),
        ScenarioKind::FreeRod => run_free_rod(cfg),
    })
}

fn build(cfg: &ScenarioConfig, f: Formulation, n_e: usize) -> Result<RodModel, AssemblyError> {
    RodModel::new(cfg.rod, f, n_e, cfg.supports, cfg.loading.clone())
}

fn sample_centerline(model: &RodModel, q: &[f64], samples: usize) -> Vec<[f64; 3]> {
    let n = samples.max(2);
    (0..n)
        .map(|i| {
            let s = model.props.length * i as f64 / (n - 1) as f64;
            let (x, _, _) = model.mesh.evaluate(q, s).expect("inside domain");
            [x.x, x.y, x.z]
        })
        .collect()
}

/// Nodes plus four interior points per element.
fn sample_stresses(model: &RodModel, q: &[f64]) -> Vec<StressSample> {
    let h = model.props.length / model.mesh.n_elements as f64;
    let mut out = Vec::new();
    for e in 0..=model.mesh.n_elements {
        let fracs: &[f64] = if e == model.mesh.n_elements { &[0.0] } else { &[0.0, 0.125, 0.375, 0.625, 0.875] };
        for &fr in fracs {
            let s = h * (e as f64 + fr);
            if let Some((axial, bending)) = stress_resultants(model, q, s) {
                out.push(StressSample { s, axial, bending, nodal: fr == 0.0 });
            }
        }
    }
    out
}

fn finish_static(rec: &mut RunRecord, model: &RodModel, it: &RodIterate, samples: usize) {
    rec.centerline = sample_centerline(model, &it.q, samples);
    rec.stresses = sample_stresses(model, &it.q);
    rec.final_q = Some(it.q.clone());
}

/// Exact roll-up: circle of radius `L / 2 pi` tangent to the clamp, bending toward +z.
pub fn rollup_circle(length: f64) -> impl Fn(f64) -> (V3, V3, V3) {
    let r = length / (2.0 * PI);
    move |s: f64| {
        let a = s / r;
        (
            V3::new(r * a.sin(), 0.0, r * (1.0 - a.cos())),
            V3::new(a.cos(), 0.0, a.sin()),
            V3::new(-a.sin(), 0.0, a.cos()) / r,
        )
    }
}

pub fn run_rollup(cfg: &ScenarioConfig) -> RunOutput {
    let mut out = RunOutput::new(cfg);
    out.notes.push(
        "end moment: conservative load on the end tangent with potential -M theta, theta the tangent angle about the moment axis"
            .into(),
    );
    let n_steps = cfg.stepping.load_steps;
    let every = cfg.stepping.snapshot_every.max(1.0) as usize;
    for &n_e in &cfg.meshes {
        for &f in &cfg.formulations {
            let mut rec = RunRecord::new(f, n_e);
            let model = match build(cfg, f, n_e) {
                Ok(m) => m,
                Err(e) => {
                    rec.fail(0, &e.into());
                    out.runs.push(rec);
                    continue;
                }
            };
            let mut it = model.new_iterate(model.initial_configuration(V3::zeros(), V3::x()));
            for k in 1..=n_steps {
                let from = StaticTarget { load_factor: (k - 1) as f64 / n_steps as f64, prescribed: vec![] };
                let to = StaticTarget { load_factor: k as f64 / n_steps as f64, prescribed: vec![] };
                match static_step(&model, &mut it, &from, &to, &cfg.newton) {
                    Ok(r) => rec.push_step(k, 0.0, to.load_factor, &r),
                    Err(e) => {
                        rec.fail(k, &e);
                        break;
                    }
                }
                if k % every == 0 || k == n_steps {
                    rec.snapshots.push(Snapshot { step: k, t: 0.0, points: sample_centerline(&model, &it.q, cfg.samples) });
                }
            }
            if rec.converged() {
                finish_static(&mut rec, &model, &it, cfg.samples);
                let (tip, _, _) = model.mesh.evaluate(&it.q, model.props.length).expect("inside domain");
                rec.closure = Some(tip.norm() / model.props.length);
                rec.norms = Some(error_norms(&model, &it.q, &rollup_circle(model.props.length)));
            }
            out.runs.push(rec);
        }
    }
    out
}

/// Dof indices of the right-end position.
fn right_end_dofs(model: &RodModel) -> [usize; 3] {
    let (b, _) = model.mesh.end_blocks(true);
    [3 * b, 3 * b + 1, 3 * b + 2]
}

pub fn run_catenary(cfg: &ScenarioConfig) -> RunOutput {
    let mut out = RunOutput::new(cfg);
    out.notes.push("wind drag: c_d v(z)^2 along +x with v clamped to zero below z = 0".into());
    out.notes.push("step 1 prestresses, steps 2..=1+weight_steps apply self-weight, the rest move the right end".into());
    let st = &cfg.stepping;
    let target = V3::from(cfg.fairlead.expect("validated"));
    let every = st.snapshot_every.max(1.0) as usize;
    for &n_e in &cfg.meshes {
        for &f in &cfg.formulations {
            let mut rec = RunRecord::new(f, n_e);
            let model = match build(cfg, f, n_e) {
                Ok(m) => m,
                Err(e) => {
                    rec.fail(0, &e.into());
                    out.runs.push(rec);
                    continue;
                }
            };
            let dofs = right_end_dofs(&model);
            let mut it = model.new_iterate(model.initial_configuration(V3::zeros(), V3::x()));
            let start = V3::new(model.props.length, 0.0, 0.0);
            let stretched = start + V3::new(st.prestress, 0.0, 0.0);
            let at = |p: V3, lf: f64| StaticTarget { load_factor: lf, prescribed: (0..3).map(|c| (dofs[c], p[c])).collect() };
            let mut schedule = vec![(at(start, 0.0), at(stretched, 0.0))];
            for k in 1..=st.weight_steps {
                let lf = |k: usize| k as f64 / st.weight_steps as f64;
                schedule.push((at(stretched, lf(k - 1)), at(stretched, lf(k))));
            }
            for k in 1..=st.fairlead_steps {
                let p = |k: usize| stretched + (target - stretched) * (k as f64 / st.fairlead_steps as f64);
                schedule.push((at(p(k - 1), 1.0), at(p(k), 1.0)));
            }
            let total = schedule.len();
            for (i, (from, to)) in schedule.iter().enumerate() {
                let step = i + 1;
                match static_step(&model, &mut it, from, to, &cfg.newton) {
                    Ok(r) => rec.push_step(step, 0.0, to.load_factor, &r),
                    Err(e) => {
                        rec.fail(step, &e);
                        break;
                    }
                }
                if step % every == 0 || step == total {
                    rec.snapshots.push(Snapshot { step, t: 0.0, points: sample_centerline(&model, &it.q, cfg.samples) });
                }
            }
            if rec.converged() {
                finish_static(&mut rec, &model, &it, cfg.samples);
            }
            out.runs.push(rec);
        }
    }
    out
}

fn energy_sample(model: &RodModel, t: f64, q: &[f64], v: &[f64], load_factor: f64) -> EnergySample {
    let (lin, ang) = momenta(model, q, v);
    EnergySample {
        t,
        parts: energies(model, q, Some(v), load_factor),
        linear_momentum: [lin.x, lin.y, lin.z],
        angular_momentum: [ang.x, ang.y, ang.z],
    }
}

pub fn run_mooring(cfg: &ScenarioConfig) -> RunOutput {
    let mut out = RunOutput::new(cfg);
    out.notes.push("current drag: c_d v(z)^2 along +x, height measured from the seabed plane z = 0".into());
    out.notes.push("weight, drag and fairlead load ramp linearly over ramp_time; the barrier is never scaled".into());
    let st = &cfg.stepping;
    let n_steps = (st.horizon / st.dt).round() as usize;
    let snap_every = ((st.snapshot_every / st.dt).round() as usize).max(1);
    let ramp = st.ramp_time;
    let load_factor = move |t: f64| if ramp > 0.0 { (t / ramp).min(1.0) } else { 1.0 };
    for &n_e in &cfg.meshes {
        for &f in &cfg.formulations {
            let mut rec = RunRecord::new(f, n_e);
            let model = match build(cfg, f, n_e) {
                Ok(m) => m,
                Err(e) => {
                    rec.fail(0, &e.into());
                    out.runs.push(rec);
                    continue;
                }
            };
            let q0 = model.initial_configuration(V3::zeros(), V3::x());
            let n = q0.len();
            let mut state = DynamicState { t: 0.0, q: q0.clone(), v: vec![0.0; n], lambda: vec![0.0; model.mesh.num_nodes()] };
            let length = model.props.length;
            let record_fairlead = |rec: &mut RunRecord, s: &DynamicState| {
                let (x, _, _) = model.mesh.evaluate(&s.q, length).expect("inside domain");
                let (v, _, _) = model.mesh.evaluate(&s.v, length).expect("inside domain");
                rec.fairlead.push(FairleadSample { t: s.t, displacement: [x.x - length, x.y, x.z], velocity: [v.x, v.y, v.z] });
            };
            record_fairlead(&mut rec, &state);
            rec.energy.push(energy_sample(&model, 0.0, &state.q, &state.v, 0.0));
            rec.snapshots.push(Snapshot { step: 0, t: 0.0, points: sample_centerline(&model, &state.q, cfg.samples) });
            for k in 1..=n_steps {
                match dynamic_step(&model, &state, st.dt, &load_factor, &|_| vec![], &cfg.newton) {
                    Ok((next, r)) => {
                        state = next;
                        state.t = k as f64 * st.dt;
                        rec.push_step(k, state.t, load_factor(state.t), &r);
                    }
                    Err(e) => {
                        rec.fail(k, &e);
                        break;
                    }
                }
                record_fairlead(&mut rec, &state);
                rec.energy.push(energy_sample(&model, state.t, &state.q, &state.v, load_factor(state.t)));
                if k % snap_every == 0 {
                    rec.snapshots.push(Snapshot { step: k, t: state.t, points: sample_centerline(&model, &state.q, cfg.samples) });
                }
            }
            if rec.converged() {
                let it = RodIterate { q: state.q.clone(), lambda: state.lambda.clone() };
                finish_static(&mut rec, &model, &it, cfg.samples);
            }
            out.runs.push(rec);
        }
    }
    out
}

/// Condition number of the first-iteration system matrix at the straight state.
pub fn initial_condition(model: &RodModel, load_factor: f64, dt: Option<f64>) -> Result<f64, AssemblyError> {
    let q0 = model.initial_configuration(V3::zeros(), V3::x());
    let v0 = vec![0.0; q0.len()];
    let it = model.new_iterate(q0.clone());
    let regime = match dt {
        Some(dt) => Regime::Dynamic { dt, q_prev: &q0, v_prev: &v0, load_factor },
        None => Regime::Static { load_factor },
    };
    Ok(condition_estimate(&model.assemble_system(&it, &regime)?.matrix))
}

fn with_director_scale(f: Formulation, alpha: f64) -> Formulation {
    match f {
        Formulation::NodalR3 { .. } => Formulation::NodalR3 { director_scale: alpha },
        Formulation::NodalSpp { .. } => Formulation::NodalSpp { director_scale: alpha },
        Formulation::NodalSppReduced { .. } => Formulation::NodalSppReduced { director_scale: alpha },
        Formulation::NodalPenalty { beta, .. } => Formulation::NodalPenalty { beta, director_scale: alpha },
        iga => iga,
    }
}

pub fn run_condition_sweep(cfg: &ScenarioConfig) -> RunOutput {
    let mut out = RunOutput::new(cfg);
    let sw = cfg.sweep.as_ref().expect("validated");
    let unit_penalty = cfg.rod.length / (2.0 * cfg.rod.bending_stiffness);
    out.notes.push(format!("director-scale sweep uses beta = {unit_penalty:e} so that beta 2EI/L = 1"));
    for &n_e in &cfg.meshes {
        let push = |out: &mut RunOutput, f: Formulation, parameter: &str, value: f64| {
            for (regime, dt) in [("static", None), ("dynamic", Some(sw.dt))] {
                let condition = build(cfg, f, n_e)
                    .and_then(|m| initial_condition(&m, sw.load_factor, dt))
                    .unwrap_or(f64::INFINITY);
                out.conditions.push(ConditionRow {
                    formulation: f.label(),
                    n_e,
                    regime: regime.into(),
                    parameter: parameter.into(),
                    value,
                    condition,
                });
            }
        };
        for &f in &cfg.formulations {
            match f {
                Formulation::Iga { .. } | Formulation::NodalR3 { .. } => push(&mut out, f, "none", 0.0),
                Formulation::NodalPenalty { director_scale, .. } => {
                    for &beta in &sw.penalty_factors {
                        push(&mut out, Formulation::NodalPenalty { beta, director_scale }, "beta", beta);
                    }
                    for &a in &sw.director_scales {
                        push(&mut out, Formulation::NodalPenalty { beta: unit_penalty, director_scale: a }, "director_scale", a);
                    }
                }
                _ => {
                    for &a in &sw.director_scales {
                        push(&mut out, with_director_scale(f, a), "director_scale", a);
                    }
                }
            }
        }
    }
    out
}

/// Initial free-rod state: half-sine bend in z on a straight rod along x, plus a rigid
/// velocity `u + w x phi`. Nodal directors are unit tangents of the bent shape and move as `w x d`.
pub fn free_rod_initial(model: &RodModel, motion: &InitialMotion) -> (Vec<f64>, Vec<f64>) {
    let length = model.props.length;
    let a = motion.bend_amplitude;
    let mut q = model.initial_configuration(V3::zeros(), V3::x());
    let nb = model.mesh.n_blocks;
    let slope = |b: usize| model.mesh.is_nodal() && b % 2 == 1;
    for b in 0..nb {
        let mut y = block(&q, b);
        if slope(b) {
            // Unit tangent of the bent shape, so nodal directors start on the constraint.
            let node = length * (b / 2) as f64 / model.mesh.n_elements as f64;
            let tangent = V3::new(1.0, 0.0, a * PI / length * (PI * node / length).cos());
            y = model.mesh.director_scale() * tangent.normalize();
        } else {
            // Position-type coefficients of the straight state sit at their parameter value.
            y.z += a * (PI * y.x / length).sin();
        }
        set_block(&mut q, b, &y);
    }
    let u = V3::from(motion.translation_velocity);
    let w = V3::from(motion.angular_velocity);
    let mut v = vec![0.0; q.len()];
    for b in 0..nb {
        let c = block(&q, b);
        let vb = if slope(b) { w.cross(&c) } else { u + w.cross(&c) };
        set_block(&mut v, b, &vb);
    }
    (q, v)
}

/// Free rod with rigid and elastic motion and no loads.
pub fn run_free_rod(cfg: &ScenarioConfig) -> RunOutput {
    let mut out = RunOutput::new(cfg);
    let motion = cfg.initial_motion.clone().expect("validated");
    let dt = cfg.stepping.dt;
    for &n_e in &cfg.meshes {
        for &f in &cfg.formulations {
            let mut rec = RunRecord::new(f, n_e);
            let model = match build(cfg, f, n_e) {
                Ok(m) => m,
                Err(e) => {
                    rec.fail(0, &e.into());
                    out.runs.push(rec);
                    continue;
                }
            };
            let (q, v) = free_rod_initial(&model, &motion);
            let mut state = DynamicState { t: 0.0, q, v, lambda: vec![0.0; model.mesh.num_nodes()] };
            rec.energy.push(energy_sample(&model, 0.0, &state.q, &state.v, 0.0));
            for k in 1..=motion.steps {
                match dynamic_step(&model, &state, dt, &|_| 0.0, &|_| vec![], &cfg.newton) {
                    Ok((next, r)) => {
                        state = next;
                        state.t = k as f64 * dt;
                        rec.push_step(k, state.t, 0.0, &r);
                    }
                    Err(e) => {
                        rec.fail(k, &e);
                        break;
                    }
                }
                rec.energy.push(energy_sample(&model, state.t, &state.q, &state.v, 0.0));
            }
            if rec.converged() {
                rec.centerline = sample_centerline(&model, &state.q, cfg.samples);
                rec.final_q = Some(state.q);
            }
            out.runs.push(rec);
        }
    }
    out
}

/// Straight state after one Newton update, where the second-iteration matrix is assembled.
pub fn first_iterate(model: &RodModel, regime: &Regime) -> Result<RodIterate, SolverError> {
    let mut it = model.new_iterate(model.initial_configuration(V3::zeros(), V3::x()));
    let one = NewtonConfig { max_iterations: 1, ..Default::default() };
    match newton_solve(model, regime, &mut it, &one) {
        Ok(_) | Err(SolverError::NotConverged { .. }) => Ok(it),
        Err(e) => Err(e),
    }
}

/// A CSV table with a fixed column order; `None` cells are written empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Option<String>>>,
}

fn num(x: f64) -> Option<String> {
    Some(format!("{x:e}"))
}

fn int(x: usize) -> Option<String> {
    Some(x.to_string())
}

fn text(s: &str) -> Option<String> {
    Some(s.to_string())
}

/// Column schemas. Every table starts with `formulation, n_e` and ends with `scenario, build`.
pub const SNAPSHOT_COLUMNS: [&str; 10] = ["formulation", "n_e", "step", "t", "s", "x", "y", "z", "scenario", "build"];
pub const STRESS_COLUMNS: [&str; 8] = ["formulation", "n_e", "s", "axial", "bending", "nodal", "scenario", "build"];
pub const FAIRLEAD_COLUMNS: [&str; 11] = ["formulation", "n_e", "t", "ux", "uy", "uz", "vx", "vy", "vz", "scenario", "build"];
pub const ENERGY_COLUMNS: [&str; 18] = [
    "formulation", "n_e", "t", "kinetic", "strain", "gravity", "barrier", "point_loads", "penalty", "total", "px", "py", "pz", "lx",
    "ly", "lz", "scenario", "build",
];
pub const STATS_COLUMNS: [&str; 11] = [
    "formulation", "n_e", "max_iters", "mean_time_per_iter_s", "total_iterations", "steps", "halvings", "converged", "failure",
    "scenario", "build",
];
pub const ITERATION_COLUMNS: [&str; 10] =
    ["formulation", "n_e", "step", "t", "load_factor", "max_iters", "solves", "halvings", "scenario", "build"];
pub const NORM_COLUMNS: [&str; 8] = ["formulation", "n_e", "l2", "h1", "h2", "closure", "scenario", "build"];
pub const CONDITION_COLUMNS: [&str; 8] = ["formulation", "n_e", "regime", "parameter", "value", "condition", "scenario", "build"];

impl RunOutput {
    /// All non-empty tables of this run.
    pub fn tables(&self) -> Vec<Table> {
        let sid = self.scenario.id();
        let bid = build_id();
        let tail = |mut row: Vec<Option<String>>| {
            row.push(text(sid));
            row.push(text(&bid));
            row
        };
        let mut snapshots = Table { name: "snapshots", columns: SNAPSHOT_COLUMNS.to_vec(), rows: vec![] };
        let mut stresses = Table { name: "stresses", columns: STRESS_COLUMNS.to_vec(), rows: vec![] };
        let mut fairlead = Table { name: "fairlead", columns: FAIRLEAD_COLUMNS.to_vec(), rows: vec![] };
        let mut energy = Table { name: "energy", columns: ENERGY_COLUMNS.to_vec(), rows: vec![] };
        let mut stats = Table { name: "stats", columns: STATS_COLUMNS.to_vec(), rows: vec![] };
        let mut iterations = Table { name: "iterations", columns: ITERATION_COLUMNS.to_vec(), rows: vec![] };
        let mut norms = Table { name: "norms", columns: NORM_COLUMNS.to_vec(), rows: vec![] };
        let mut conditions = Table { name: "conditions", columns: CONDITION_COLUMNS.to_vec(), rows: vec![] };
        for r in &self.runs {
            let head = || vec![text(&r.label), int(r.n_e)];
            let length = self.config.rod.length;
            for snap in &r.snapshots {
                let n = snap.points.len();
                for (i, p) in snap.points.iter().enumerate() {
                    let s = length * i as f64 / (n.max(2) - 1) as f64;
                    let mut row = head();
                    row.extend([int(snap.step), num(snap.t), num(s), num(p[0]), num(p[1]), num(p[2])]);
                    snapshots.rows.push(tail(row));
                }
            }
            for st in &r.stresses {
                let mut row = head();
                row.extend([num(st.s), num(st.axial), num(st.bending), text(if st.nodal { "true" } else { "false" })]);
                stresses.rows.push(tail(row));
            }
            for fl in &r.fairlead {
                let mut row = head();
                row.push(num(fl.t));
                row.extend(fl.displacement.iter().chain(&fl.velocity).map(|&x| num(x)));
                fairlead.rows.push(tail(row));
            }
            for e in &r.energy {
                let p = &e.parts;
                let mut row = head();
                row.push(num(e.t));
                row.extend([p.kinetic, p.strain, p.weight, p.barrier, p.point_loads, p.penalty, p.total()].map(num));
                row.extend(e.linear_momentum.iter().chain(&e.angular_momentum).map(|&x| num(x)));
                energy.rows.push(tail(row));
            }
            let s = &r.stats;
            let mut row = head();
            row.extend([
                int(s.max_iters),
                num(s.mean_time_per_iter_s),
                int(s.total_iterations),
                int(s.steps),
                int(s.halvings),
                text(if s.converged { "true" } else { "false" }),
                if s.failure.is_empty() { None } else { text(&s.failure) },
            ]);
            stats.rows.push(tail(row));
            for st in &r.steps {
                let mut row = head();
                row.extend([int(st.step), num(st.t), num(st.load_factor), int(st.max_iterations), int(st.solves), int(st.halvings)]);
                iterations.rows.push(tail(row));
            }
            if r.norms.is_some() || r.closure.is_some() {
                let mut row = head();
                match r.norms {
                    Some(n) => row.extend([num(n.l2), num(n.h1), num(n.h2)]),
                    None => row.extend([None, None, None]),
                }
                row.push(r.closure.and_then(num));
                norms.rows.push(tail(row));
            }
        }
        for c in &self.conditions {
            let row = vec![
                text(&c.formulation),
                int(c.n_e),
                text(&c.regime),
                text(&c.parameter),
                num(c.value),
                num(c.condition),
            ];
            conditions.rows.push(tail(row));
        }
        [snapshots, stresses, fairlead, energy, stats, iterations, norms, conditions]
            .into_iter()
            .filter(|t| !t.rows.is_empty())
            .collect()
    }
}

/// Machine-readable description of one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub build: String,
    pub config: ScenarioConfig,
    pub files: Vec<String>,
    pub runs: Vec<ManifestRun>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub formulation: String,
    pub n_e: usize,
    pub converged: bool,
    pub failure: Option<Failure>,
}

/// Writes one CSV per non-empty table and `manifest.json` into `dir`.
pub fn emit_output(out: &RunOutput, dir: &Path) -> Result<Manifest, ScenarioError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ScenarioError::Io { path: path.clone(), source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = Vec::new();
    for t in out.tables() {
        let path = dir.join(format!("{}.csv", t.name));
        let csv_err = |source| ScenarioError::Csv { path: path.clone(), source };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(&t.columns).map_err(csv_err)?;
        for row in &t.rows {
            w.write_record(row.iter().map(|c| c.as_deref().unwrap_or(""))).map_err(csv_err)?;
        }
        w.flush().map_err(io(&path))?;
        files.push(format!("{}.csv", t.name));
    }
    let manifest = Manifest {
        scenario: out.scenario.id().into(),
        build: build_id(),
        config: out.config.clone(),
        files,
        runs: out
            .runs
            .iter()
            .map(|r| ManifestRun { formulation: r.label.clone(), n_e: r.n_e, converged: r.converged(), failure: r.failure.clone() })
            .collect(),
        notes: out.notes.clone(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io(&path))?;
    Ok(manifest)
}

/// Largest pairwise distance between two sampled centerlines.
pub fn centerline_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (V3::from(*p) - V3::from(*q)).norm()).fold(0.0, f64::max)
}

/// Iteration counts at one step for each run, keyed by label and mesh.
pub fn iterations_at_step(out: &RunOutput, step: usize) -> Vec<(String, usize, Option<usize>)> {
    out.runs
        .iter()
        .map(|r| (r.label.clone(), r.n_e, r.steps.iter().find(|s| s.step == step).map(|s| s.max_iterations)))
        .collect()
}
