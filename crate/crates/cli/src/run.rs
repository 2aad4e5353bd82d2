//! Stage execution, artifact output and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fwlab_core::cost::Cost;
use fwlab_core::dynamics::{AttractorSpec, Geometry};
use fwlab_core::hierarchy::{classify, cost_matrix_from_mam, rate_function, CostMatrix};
use fwlab_core::mam::{lower_bound_check, quasipotential, quasipotential_sets, QuasiPotentialResult};
use fwlab_core::measure::{
    concentration_report, estimate_transition_matrix, gibbs_density, invariant_measure_from_cycles, ldp_points,
    ldp_slope, occupation_histogram_replicas, regenerative_cycles, stationary_distribution, tv_distance,
    EmpiricalMeasure, LdpFit,
};
use fwlab_core::simulate::{run_ensemble, simulate, write_terminal_csv, SimConfig, TerminalStates};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{
    CostInput, Endpoint, MeasurePlan, QuasiPotentialPlan, SimulatePlan, System, WGraphPlan,
};

/// Raised before any computation, so no manifest is written.
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_ACCEPTANCE: i32 = 4;

#[derive(Debug, Error)]
pub enum Failure {
    #[error("run failed: {0}")]
    Numerical(String),
    #[error("acceptance checks failed: {}", .0.join(", "))]
    Acceptance(Vec<String>),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Numerical(_) => EXIT_NUMERICAL,
            Failure::Acceptance(_) => EXIT_ACCEPTANCE,
        }
    }

    fn status(&self) -> &'static str {
        match self {
            Failure::Numerical(_) => "numerical_failure",
            Failure::Acceptance(_) => "acceptance_failure",
        }
    }
}

impl From<fwlab_core::Error> for Failure {
    fn from(e: fwlab_core::Error) -> Self {
        Failure::Numerical(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numerical(e.to_string())
    }
}

pub type RunResult<T> = std::result::Result<T, Failure>;

/// Output directory that records every artifact it writes.
pub struct Outputs {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> RunResult<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Numerical(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), artifacts: Vec::new() })
    }

    /// Writes `name` inside the directory; `name` is a plain file name.
    pub fn write(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> fwlab_core::Result<()>,
    ) -> RunResult<()> {
        debug_assert!(!name.contains('/') && !name.contains(".."));
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        body(&mut w)?;
        w.flush()?;
        self.artifacts.push(name.to_string());
        info!("wrote {}", self.dir.join(name).display());
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> RunResult<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    pub fn measure(&mut self, name: &str, m: &EmpiricalMeasure) -> RunResult<()> {
        self.write(name, |w| m.write_csv(w))
    }

    pub fn artifacts(&self) -> &[String] {
        &self.artifacts
    }
}

/// Gnuplot script drawing each measure CSV as a heat map.
pub fn write_plot_layout(out: &mut Outputs, measures: &[(String, String)]) -> RunResult<()> {
    out.write("plot.gp", |w| {
        writeln!(w, "set datafile separator ','")?;
        writeln!(w, "set view map")?;
        writeln!(w, "set size ratio -1")?;
        writeln!(w, "set multiplot layout {},1", measures.len().max(1))?;
        for (file, title) in measures {
            writeln!(w, "set title '{title}'")?;
            writeln!(w, "plot '{file}' every ::1 using 1:2:3 with image notitle")?;
        }
        writeln!(w, "unset multiplot")?;
        Ok(())
    })
}

#[derive(Serialize)]
struct Versions {
    fwlab_cli: &'static str,
    fwlab_core: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failed_checks: Vec<String>,
    seed: u64,
    threads: usize,
    versions: Versions,
    wall_time_seconds: f64,
    config: &'a Value,
    artifacts: &'a [String],
}

pub struct RunContext<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub config: Value,
    pub started: Instant,
}

/// Writes `manifest.json` describing the run, whatever its outcome.
pub fn write_manifest(out: &mut Outputs, ctx: &RunContext, outcome: &RunResult<()>) -> RunResult<()> {
    let (status, error, failed_checks) = match outcome {
        Ok(()) => ("ok", None, Vec::new()),
        Err(f) => {
            let checks = match f {
                Failure::Acceptance(c) => c.clone(),
                _ => Vec::new(),
            };
            (f.status(), Some(f.to_string()), checks)
        }
    };
    let artifacts: Vec<String> = out.artifacts().to_vec();
    let manifest = Manifest {
        command: ctx.command,
        status,
        error,
        failed_checks,
        seed: ctx.seed,
        threads: rayon::current_num_threads(),
        versions: Versions { fwlab_cli: env!("CARGO_PKG_VERSION"), fwlab_core: fwlab_core::VERSION },
        wall_time_seconds: ctx.started.elapsed().as_secs_f64(),
        config: &ctx.config,
        artifacts: &artifacts,
    };
    out.json("manifest.json", &manifest)
}

pub fn run_simulate(plan: &SimulatePlan, out: &mut Outputs) -> RunResult<()> {
    let sys = &plan.system.spec;
    if plan.replicas == 1 {
        let traj = simulate(sys, &plan.x0, &plan.sim, plan.stop.as_ref())?;
        out.write("trajectory.csv", |w| traj.write_csv(w))?;
        out.json(
            "summary.json",
            &json!({
                "system": sys.name(),
                "samples": traj.len(),
                "final_time": traj.final_time(),
                "terminal_state": traj.terminal(),
                "terminal_reason": traj.terminal_reason,
            }),
        )?;
    } else {
        let summary = run_ensemble(sys, &plan.x0, &plan.sim, plan.replicas, &TerminalStates)?;
        out.write("terminal.csv", |w| write_terminal_csv(w, &summary.value))?;
        out.json(
            "summary.json",
            &json!({ "system": sys.name(), "replicas": summary.replicas, "blow_ups": summary.blow_ups }),
        )?;
    }
    Ok(())
}

fn endpoint_set(system: &System, e: &Endpoint, tag: usize) -> AttractorSpec {
    match e {
        Endpoint::Set(l) => system.set(*l).expect("label checked in validation").clone(),
        // labels above every real set keep the mam exclusion filter from matching
        Endpoint::Point(x) => AttractorSpec::new(usize::MAX - tag, Geometry::Point(x.clone()), None),
    }
}

pub fn run_quasipotential(plan: &QuasiPotentialPlan, out: &mut Outputs) -> RunResult<()> {
    let sys = &plan.system.spec;
    let result = match (&plan.from, &plan.to, plan.exclude) {
        (Endpoint::Point(x), Endpoint::Point(y), false) => quasipotential(sys, x, y, &plan.mam)?,
        _ => {
            let from = endpoint_set(&plan.system, &plan.from, 0);
            let to = endpoint_set(&plan.system, &plan.to, 1);
            // a point endpoint lying on a set must not be excluded by it
            let exclusions: Vec<AttractorSpec> = if plan.exclude {
                let touches = |k: &AttractorSpec, e: &Endpoint| match e {
                    Endpoint::Point(x) => k.distance(x) < plan.margin,
                    Endpoint::Set(l) => k.label == *l,
                };
                plan.system.sets.iter().filter(|k| !touches(k, &plan.from) && !touches(k, &plan.to)).cloned().collect()
            } else {
                Vec::new()
            };
            quasipotential_sets(sys, &from, &to, &exclusions, plan.margin, &plan.mam)?
        }
    };
    let lower_bound = lower_bound(&plan.system, &result)?;
    out.write("path.csv", |w| result.write_path_csv(w))?;
    out.json(
        "quasipotential.json",
        &json!({
            "system": sys.name(),
            "result": result.record(),
            "start": result.path.start(),
            "end": result.path.end(),
            "lower_bound_ok": lower_bound,
        }),
    )?;
    Ok(())
}

/// Potential lower bound for the realized endpoints, when the system supplies one.
fn lower_bound(system: &System, r: &QuasiPotentialResult) -> RunResult<Option<bool>> {
    let sys = &system.spec;
    if !sys.has_potential() || sys.constants().is_none() || !r.value.is_finite() {
        return Ok(None);
    }
    Ok(Some(lower_bound_check(sys, r, r.path.start(), r.path.end())?))
}

#[derive(Serialize)]
struct QuasiPotentialEntry {
    from: usize,
    to: usize,
    #[serde(flatten)]
    record: fwlab_core::mam::QuasiPotentialRecord,
}

fn mam_records(results: &[Vec<Option<QuasiPotentialResult>>]) -> Vec<QuasiPotentialEntry> {
    let mut v = Vec::new();
    for (i, row) in results.iter().enumerate() {
        for (j, r) in row.iter().enumerate() {
            if let Some(r) = r {
                v.push(QuasiPotentialEntry { from: i + 1, to: j + 1, record: r.record() });
            }
        }
    }
    v
}

/// Computes the restricted cost matrix of `system` and writes it with the per-entry mam records.
pub fn mam_cost_matrix(
    system: &System,
    exclude: bool,
    margin: f64,
    mam: &fwlab_core::mam::MamConfig,
    out: &mut Outputs,
) -> RunResult<(CostMatrix, Vec<Vec<Option<QuasiPotentialResult>>>)> {
    info!("computing {0}x{0} cost matrix for {1}", system.sets.len(), system.spec.name());
    let (cm, results) = cost_matrix_from_mam(&system.spec, &system.sets, mam, margin, exclude)?;
    out.json("cost_matrix.json", &cm)?;
    out.json("quasipotentials.json", &mam_records(&results))?;
    Ok((cm, results))
}

pub fn run_wgraph(plan: &WGraphPlan, out: &mut Outputs) -> RunResult<()> {
    let cm = match &plan.costs {
        CostInput::File(cm) => {
            out.json("cost_matrix.json", cm)?;
            cm.clone()
        }
        CostInput::Compute { exclude, margin, mam } => {
            let system = plan.system.as_ref().expect("checked in validation");
            mam_cost_matrix(system, *exclude, *margin, mam, out)?.0
        }
    };
    let h = classify(&cm, &plan.stable, plan.tie_tolerance)?;
    out.json("hierarchy.json", &h)?;
    if let Some(system) = &plan.system {
        if !plan.rate_points.is_empty() {
            let rows = plan
                .rate_points
                .par_iter()
                .map(|x| -> RunResult<(Vec<f64>, Cost)> {
                    let target = AttractorSpec::new(usize::MAX, Geometry::Point(x.clone()), None);
                    let to_x = system
                        .sets
                        .iter()
                        .map(|k| Ok(quasipotential_sets(&system.spec, k, &target, &[], plan.margin, &plan.mam)?.value))
                        .collect::<RunResult<Vec<Cost>>>()?;
                    Ok((x.clone(), rate_function(&h, &to_x)?))
                })
                .collect::<RunResult<Vec<_>>>()?;
            out.write("rate_function.csv", |w| {
                let d = rows.first().map_or(0, |(x, _)| x.len());
                let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
                writeln!(w, "{},rate", header.join(","))?;
                for (x, s) in &rows {
                    let coords: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
                    writeln!(w, "{},{}", coords.join(","), fmt_cost(*s))?;
                }
                Ok(())
            })?;
        }
    }
    Ok(())
}

fn fmt_cost(c: Cost) -> String {
    if c.is_finite() {
        format!("{:e}", c.value())
    } else {
        "inf".into()
    }
}

#[derive(Serialize)]
struct LdpReport {
    center: [f64; 2],
    radius: f64,
    simulated: LdpFit,
    #[serde(skip_serializing_if = "Option::is_none")]
    gibbs: Option<LdpFit>,
}

pub fn run_measure(plan: &MeasurePlan, out: &mut Outputs) -> RunResult<()> {
    let sys = &plan.system.spec;
    let grid = &plan.grid;
    let occ = occupation_histogram_replicas(sys, &plan.x0, &plan.sim, grid, plan.burn_in, plan.replicas)?;
    out.measure("measure.csv", &occ)?;
    let mut summary = serde_json::Map::new();
    summary.insert("system".into(), json!(sys.name()));
    summary.insert("valid".into(), json!(occ.valid));
    summary.insert("total_time".into(), json!(occ.total_time));
    summary.insert("overflow_fraction".into(), json!(occ.overflow_fraction()));
    summary.insert("argmax_center".into(), json!(grid.center(occ.argmax_cell())));
    if !plan.system.sets.is_empty() {
        let rep = concentration_report(&occ, &plan.system.sets, plan.delta, plan.rho1)?;
        out.json("concentration.json", &rep)?;
    }
    if plan.gibbs {
        let g = gibbs_density(sys, plan.sim.eps, grid)?;
        out.measure("gibbs.csv", &g)?;
        summary.insert("tv_to_gibbs".into(), json!(tv_distance(&occ, &g)?));
    }
    if let Some(cc) = &plan.cycles {
        // chains run until the cycle budget; max_cycle_time bounds each cycle
        let cfg = SimConfig { horizon: f64::INFINITY, ..plan.sim };
        let run = regenerative_cycles(sys, &plan.system.sets, &plan.x0, &cfg, cc, grid)?;
        out.write("cycles.csv", |w| run.write_csv(w))?;
        let te = estimate_transition_matrix(run.complete(), run.labels)?;
        let sd = stationary_distribution(&te.p, Some(&te.visited))?;
        let cm = invariant_measure_from_cycles(run.complete(), &sd.nu, grid)?;
        out.measure("cycle_measure.csv", &cm)?;
        out.json(
            "transitions.json",
            &json!({ "transitions": te, "stationary": sd, "warnings": run.warnings }),
        )?;
        summary.insert("cycles_complete".into(), json!(run.complete().count()));
        summary.insert("tv_cycles_to_occupation".into(), json!(tv_distance(&cm, &occ)?));
    }
    if let Some(ldp) = &plan.ldp {
        let region = grid.cells_within(ldp.center, ldp.radius);
        let measures = ldp
            .levels
            .par_iter()
            .map(|&(eps, horizon)| {
                let cfg = SimConfig { eps, horizon, ..plan.sim };
                occupation_histogram_replicas(sys, &plan.x0, &cfg, grid, plan.burn_in, plan.replicas)
            })
            .collect::<fwlab_core::Result<Vec<_>>>()?;
        let pairs: Vec<(f64, &EmpiricalMeasure)> = ldp.levels.iter().map(|l| l.0).zip(&measures).collect();
        let simulated = ldp_slope(&ldp_points(&pairs, &region))?;
        let gibbs = if plan.gibbs {
            let gm = ldp.levels.iter().map(|l| gibbs_density(sys, l.0, grid)).collect::<fwlab_core::Result<Vec<_>>>()?;
            let pairs: Vec<(f64, &EmpiricalMeasure)> = ldp.levels.iter().map(|l| l.0).zip(&gm).collect();
            Some(ldp_slope(&ldp_points(&pairs, &region))?)
        } else {
            None
        };
        out.json("ldp.json", &LdpReport { center: ldp.center, radius: ldp.radius, simulated, gibbs })?;
    }
    out.json("summary.json", &Value::Object(summary))?;
    let plots: Vec<(String, String)> = ["measure.csv", "gibbs.csv", "cycle_measure.csv"]
        .iter()
        .filter(|f| out.artifacts().iter().any(|a| a == *f))
        .map(|f| (f.to_string(), f.trim_end_matches(".csv").replace('_', " ")))
        .collect();
    write_plot_layout(out, &plots)
}
