//! Empirical invariant measures: direct occupation histograms, the
//! regenerative-cycle representation over the embedded chain `Z_n`, and
//! concentration and exponent diagnostics.

use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{delta_one, AttractorSpec, Diffusion, Structure, SystemSpec};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::simulate::{lerp, SimConfig, Stepper, Target};

/// Normalized cell masses over a grid, plus the time spent outside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub grid: GridSpec,
    /// Sums to 1 over the grid whenever any in-grid weight was observed.
    pub mass: Vec<f64>,
    /// Unnormalized weight before normalization, including `overflow`;
    /// 0 for analytic densities.
    pub total_time: f64,
    /// Weight that fell outside the grid, in the units of `total_time`.
    pub overflow: f64,
    /// `false` when the underlying run ended in a blow-up.
    pub valid: bool,
}

impl EmpiricalMeasure {
    /// Normalizes nonnegative per-cell weights.
    pub fn from_weights(grid: GridSpec, weights: Vec<f64>, overflow: f64, valid: bool) -> Result<Self> {
        if weights.len() != grid.n_cells() {
            return Err(Error::Dimension { expected: grid.n_cells(), got: weights.len() });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || !(overflow >= 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        let inside: f64 = weights.iter().sum();
        let mass = if inside > 0.0 { weights.iter().map(|w| w / inside).collect() } else { weights };
        Ok(Self { grid, mass, total_time: inside + overflow, overflow, valid })
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Share of the observed weight that fell outside the grid.
    pub fn overflow_fraction(&self) -> f64 {
        if self.total_time > 0.0 {
            self.overflow / self.total_time
        } else {
            0.0
        }
    }

    pub fn mass_of(&self, cells: &[usize]) -> f64 {
        cells.iter().map(|&c| self.mass[c]).sum()
    }

    /// Mass of cells whose centers lie within `radius` of `point`.
    pub fn mass_within(&self, point: [f64; 2], radius: f64) -> f64 {
        self.mass_of(&self.grid.cells_within(point, radius))
    }

    pub fn argmax_cell(&self) -> usize {
        let mut best = 0;
        for (c, &m) in self.mass.iter().enumerate() {
            if m > self.mass[best] {
                best = c;
            }
        }
        best
    }

    /// CSV `x_center,y_center,mass`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x_center,y_center,mass")?;
        for (c, m) in self.mass.iter().enumerate() {
            let p = self.grid.center(c);
            writeln!(w, "{:e},{:e},{:e}", p[0], p[1], m)?;
        }
        Ok(())
    }
}

/// `½ Σ |a − b|` over a shared grid.
pub fn tv_distance(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::InvalidArgument("measures live on different grids".into()));
    }
    Ok(0.5 * a.mass.iter().zip(&b.mass).map(|(u, v)| (u - v).abs()).sum::<f64>())
}

fn check_planar(sys: &SystemSpec) -> Result<()> {
    if sys.dim() != 2 {
        return Err(Error::Dimension { expected: 2, got: sys.dim() });
    }
    Ok(())
}

/// Time-weighted occupancy after `burn_in`; each step's time goes to the
/// cell of its left endpoint.
pub fn occupation_histogram(
    sys: &SystemSpec,
    x0: &[f64],
    cfg: &SimConfig,
    grid: &GridSpec,
    burn_in: f64,
) -> Result<EmpiricalMeasure> {
    occupation_histogram_replica(sys, x0, cfg, grid, burn_in, 0)
}

pub fn occupation_histogram_replica(
    sys: &SystemSpec,
    x0: &[f64],
    cfg: &SimConfig,
    grid: &GridSpec,
    burn_in: f64,
    replica: u64,
) -> Result<EmpiricalMeasure> {
    check_planar(sys)?;
    grid.validate()?;
    if !cfg.horizon.is_finite() || !(cfg.horizon > burn_in) || !(burn_in >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= burn_in < horizon < inf, got burn_in {burn_in}, horizon {}",
            cfg.horizon
        )));
    }
    let mut st = Stepper::new(sys, x0, cfg, replica)?;
    let mut weights = vec![0.0; grid.n_cells()];
    let mut overflow = 0.0;
    let mut valid = true;
    let n = cfg.step_count();
    for k in 0..n {
        let t = st.time();
        let dt = if k + 1 == n { cfg.horizon - t } else { cfg.h };
        if t >= burn_in {
            match grid.cell_of(st.state()) {
                Some(c) => weights[c] += dt,
                None => overflow += dt,
            }
        } else if t + dt > burn_in {
            let part = t + dt - burn_in;
            match grid.cell_of(st.state()) {
                Some(c) => weights[c] += part,
                None => overflow += part,
            }
        }
        if !st.advance_by(dt) {
            valid = false;
            warn!("blow-up at t = {}; occupation measure is partial", st.time());
            break;
        }
    }
    EmpiricalMeasure::from_weights(*grid, weights, overflow, valid)
}

/// Independent replicas `0..n` pooled by summing occupation times.
pub fn occupation_histogram_replicas(
    sys: &SystemSpec,
    x0: &[f64],
    cfg: &SimConfig,
    grid: &GridSpec,
    burn_in: f64,
    replicas: u64,
) -> Result<EmpiricalMeasure> {
    if replicas == 0 {
        return Err(Error::InvalidArgument("at least one replica is required".into()));
    }
    let parts: Vec<EmpiricalMeasure> = (0..replicas)
        .into_par_iter()
        .map(|r| occupation_histogram_replica(sys, x0, cfg, grid, burn_in, r))
        .collect::<Result<_>>()?;
    let mut weights = vec![0.0; grid.n_cells()];
    let mut overflow = 0.0;
    let mut valid = true;
    for p in &parts {
        let inside = p.total_time - p.overflow;
        weights.iter_mut().zip(&p.mass).for_each(|(w, m)| *w += m * inside);
        overflow += p.overflow;
        valid &= p.valid;
    }
    EmpiricalMeasure::from_weights(*grid, weights, overflow, valid)
}

/// Cell-center evaluation of `exp(−2J/ε²)`, normalized over the grid.
pub fn gibbs_density(sys: &SystemSpec, eps: f64, grid: &GridSpec) -> Result<EmpiricalMeasure> {
    check_planar(sys)?;
    grid.validate()?;
    if sys.structure() != Structure::Gradient || !matches!(sys.diffusion(), Diffusion::Identity) {
        return Err(Error::Contract(format!(
            "Gibbs density needs a pure gradient system with identity noise; '{}' is not",
            sys.name()
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let potential: Vec<f64> = grid
        .centers()
        .map(|c| sys.potential(&c).ok_or_else(|| Error::MissingPotential(sys.name().to_string())))
        .collect::<Result<_>>()?;
    let floor = potential.iter().copied().fold(f64::INFINITY, f64::min);
    let weights = potential.iter().map(|j| (-2.0 * (j - floor) / (eps * eps)).exp()).collect();
    let mut m = EmpiricalMeasure::from_weights(*grid, weights, 0.0, true)?;
    m.total_time = 0.0;
    Ok(m)
}

/// Neighborhood radii `ρ₂ < ρ₁` of the cycle construction and its budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleConfig {
    /// Outer radius: `G_i = {dist(K_i, ·) < ρ₁}`.
    pub rho1: f64,
    /// Inner radius: `g_i = {dist(K_i, ·) < ρ₂}`.
    pub rho2: f64,
    /// Completed cycles requested over all chains.
    pub cycles: usize,
    /// Independent chains, each with its own burn-in and noise stream.
    #[serde(default = "one_chain")]
    pub chains: u64,
    /// A cycle running longer than this is truncated and flagged.
    #[serde(default = "default_cycle_time")]
    pub max_cycle_time: f64,
}

fn one_chain() -> u64 {
    1
}

fn default_cycle_time() -> f64 {
    1e6
}

pub const DEFAULT_RHO1: f64 = 0.2;
pub const DEFAULT_RHO2: f64 = 0.1;

impl CycleConfig {
    pub fn new(rho1: f64, rho2: f64, cycles: usize) -> Self {
        Self { rho1, rho2, cycles, chains: 1, max_cycle_time: default_cycle_time() }
    }

    /// Requires `0 < ρ₂ < ρ₁` and pairwise disjoint `G_i`; returns a warning
    /// when `ρ₁` reaches `δ₁`.
    pub fn validate(&self, sets: &[AttractorSpec]) -> Result<Vec<String>> {
        if !(self.rho2 > 0.0 && self.rho2 < self.rho1 && self.rho1.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < rho2 < rho1, got rho1 {}, rho2 {}",
                self.rho1, self.rho2
            )));
        }
        if self.cycles == 0 || self.chains == 0 || !(self.max_cycle_time > 0.0) {
            return Err(Error::InvalidArgument("cycles, chains and max_cycle_time must be positive".into()));
        }
        if sets.is_empty() {
            return Err(Error::InvalidArgument("at least one equivalent set is required".into()));
        }
        let delta1 = delta_one(sets);
        if sets.len() > 1 && 2.0 * self.rho1 >= 8.0 * delta1 {
            return Err(Error::OverlappingNeighborhoods { radius: self.rho1, delta1 });
        }
        let mut warnings = Vec::new();
        if self.rho1 >= delta1 {
            warnings.push(format!("rho1 = {} is not below delta_1 = {delta1}", self.rho1));
        }
        Ok(warnings)
    }
}

/// One excursion `τ_{n−1} → σ_n → τ_n` of the chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub chain: u64,
    /// 1-based label `i` with `Z_{n−1} ∈ ∂g_i`.
    pub start_label: usize,
    /// 1-based label `j` with `Z_n ∈ ∂g_j`.
    pub end_label: usize,
    /// Absolute time `τ_{n−1}`.
    pub start_time: f64,
    /// `σ_n − τ_{n−1}`.
    pub sigma_time: f64,
    /// `τ_n − τ_{n−1}`.
    pub duration: f64,
    /// Sparse per-cell time, sorted by cell.
    pub occupation: Vec<(usize, f64)>,
    /// Time spent outside the grid.
    pub outside: f64,
    /// Cut at the cycle time budget; `end_label` is then meaningless.
    pub truncated: bool,
}

impl CycleRecord {
    pub fn occupied_time(&self) -> f64 {
        self.occupation.iter().map(|(_, t)| t).sum::<f64>() + self.outside
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRun {
    pub grid: GridSpec,
    pub config: CycleConfig,
    pub labels: usize,
    pub records: Vec<CycleRecord>,
    pub warnings: Vec<String>,
}

impl CycleRun {
    /// Records usable for estimation.
    pub fn complete(&self) -> impl Iterator<Item = &CycleRecord> {
        self.records.iter().filter(|r| !r.truncated)
    }

    /// Labels of `Z_0, Z_1, …` per chain.
    pub fn label_sequence(&self, chain: u64) -> Vec<usize> {
        let mut seq = Vec::new();
        for r in self.records.iter().filter(|r| r.chain == chain) {
            if seq.is_empty() {
                seq.push(r.start_label);
            }
            if !r.truncated {
                seq.push(r.end_label);
            }
        }
        seq
    }

    /// CSV of record summaries without occupation.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "chain,start_label,end_label,start_time,sigma_time,duration,truncated")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{:e},{:e},{:e},{}",
                r.chain, r.start_label, r.end_label, r.start_time, r.sigma_time, r.duration, r.truncated
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Before `τ₀`: waiting for the first `∂g` hit.
    BurnIn,
    /// Between `τ_{n−1}` and `σ_n`: waiting to leave `G_i`.
    Leaving(usize),
    /// Between `σ_n` and `τ_n`: waiting to reach some `g_j`.
    Returning(usize),
}

struct Occupation {
    dense: Vec<f64>,
    touched: Vec<usize>,
    outside: f64,
}

impl Occupation {
    fn new(cells: usize) -> Self {
        Self { dense: vec![0.0; cells], touched: Vec::new(), outside: 0.0 }
    }

    #[inline]
    fn add(&mut self, cell: Option<usize>, dt: f64) {
        match cell {
            Some(c) => {
                if self.dense[c] == 0.0 {
                    self.touched.push(c);
                }
                self.dense[c] += dt;
            }
            None => self.outside += dt,
        }
    }

    fn take(&mut self) -> (Vec<(usize, f64)>, f64) {
        self.touched.sort_unstable();
        let sparse = self.touched.iter().map(|&c| (c, std::mem::take(&mut self.dense[c]))).collect();
        self.touched.clear();
        (sparse, std::mem::take(&mut self.outside))
    }
}

fn nearest_label(sets: &[AttractorSpec], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, k) in sets.iter().enumerate() {
        let d = k.distance(x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn run_chain(
    sys: &SystemSpec,
    sets: &[AttractorSpec],
    x0: &[f64],
    cfg: &SimConfig,
    cc: &CycleConfig,
    grid: &GridSpec,
    chain: u64,
    cycles: usize,
) -> Result<(Vec<CycleRecord>, Vec<String>)> {
    let mut st = Stepper::new(sys, x0, cfg, chain)?;
    let hit_g = Target::Any(sets.iter().map(|k| Target::within(k.geometry.clone(), cc.rho2)).collect());
    let leave_g: Vec<Target> = sets.iter().map(|k| Target::beyond(k.geometry.clone(), cc.rho2)).collect();
    let leave_big: Vec<Target> = sets.iter().map(|k| Target::beyond(k.geometry.clone(), cc.rho1)).collect();
    let mut warnings = Vec::new();
    let mut records = Vec::with_capacity(cycles);
    let mut occ = Occupation::new(grid.n_cells());

    // a start inside some g_i waits for its exit through ∂g_i
    let start_inside = hit_g.contains(x0).then(|| nearest_label(sets, x0));
    let mut phase = Phase::BurnIn;
    let (mut cycle_start, mut sigma) = (0.0, 0.0);
    let mut prev = x0.to_vec();
    let n = if cfg.horizon.is_finite() { cfg.step_count() } else { u64::MAX };

    for k in 0..n {
        if records.len() >= cycles {
            break;
        }
        let t = st.time();
        let dt = if k + 1 == n { cfg.horizon - t } else { cfg.h };
        prev.copy_from_slice(st.state());
        if !st.advance_by(dt) {
            warnings.push(format!("chain {chain}: blow-up at t = {}", st.time()));
            break;
        }
        let next = st.state();
        // walk the segment prev → next through every boundary crossing on it
        let mut a = prev.clone();
        let mut t_a = t;
        let mut remaining = dt;
        loop {
            let target = match phase {
                Phase::BurnIn => match start_inside {
                    Some(i) => &leave_g[i],
                    None => &hit_g,
                },
                Phase::Leaving(i) => &leave_big[i],
                Phase::Returning(_) => &hit_g,
            };
            let counting = phase != Phase::BurnIn;
            if !target.contains(next) {
                if counting {
                    occ.add(grid.cell_of(&a), remaining);
                }
                break;
            }
            let theta = if target.contains(&a) { 0.0 } else { target.crossing(&a, next) };
            if counting {
                occ.add(grid.cell_of(&a), theta * remaining);
            }
            let cross = lerp(&a, next, theta);
            let t_cross = t_a + theta * remaining;
            remaining *= 1.0 - theta;
            phase = match phase {
                Phase::BurnIn => {
                    cycle_start = t_cross;
                    Phase::Leaving(nearest_label(sets, &cross))
                }
                Phase::Leaving(i) => {
                    sigma = t_cross - cycle_start;
                    Phase::Returning(i)
                }
                Phase::Returning(i) => {
                    let j = nearest_label(sets, &cross);
                    let (occupation, outside) = occ.take();
                    records.push(CycleRecord {
                        chain,
                        start_label: i + 1,
                        end_label: j + 1,
                        start_time: cycle_start,
                        sigma_time: sigma,
                        duration: t_cross - cycle_start,
                        occupation,
                        outside,
                        truncated: false,
                    });
                    cycle_start = t_cross;
                    Phase::Leaving(j)
                }
            };
            a = cross;
            t_a = t_cross;
            if records.len() >= cycles {
                break;
            }
        }
        let elapsed = st.time() - cycle_start;
        if let (Phase::Leaving(i) | Phase::Returning(i), true) = (phase, elapsed > cc.max_cycle_time) {
            let (occupation, outside) = occ.take();
            records.push(CycleRecord {
                chain,
                start_label: i + 1,
                end_label: i + 1,
                start_time: cycle_start,
                sigma_time: if matches!(phase, Phase::Returning(_)) { sigma } else { elapsed },
                duration: elapsed,
                occupation,
                outside,
                truncated: true,
            });
            warnings.push(format!("chain {chain}: cycle from t = {cycle_start} exceeded the time budget"));
            break;
        }
    }
    let done = records.iter().filter(|r| !r.truncated).count();
    if done < cycles && !records.last().is_some_and(|r| r.truncated) {
        warnings.push(format!("chain {chain}: {done} of {cycles} cycles completed within the horizon"));
    }
    Ok((records, warnings))
}

/// Simulates `cc.cycles` regenerative cycles split across `cc.chains`
/// independent chains started at `x0`. `cfg.horizon` caps each chain and
/// may be infinite.
pub fn regenerative_cycles(
    sys: &SystemSpec,
    sets: &[AttractorSpec],
    x0: &[f64],
    cfg: &SimConfig,
    cc: &CycleConfig,
    grid: &GridSpec,
) -> Result<CycleRun> {
    check_planar(sys)?;
    grid.validate()?;
    cfg.validate()?;
    let mut warnings = cc.validate(sets)?;
    let per = cc.cycles / cc.chains as usize;
    let extra = cc.cycles % cc.chains as usize;
    let parts: Vec<(Vec<CycleRecord>, Vec<String>)> = (0..cc.chains)
        .into_par_iter()
        .map(|c| {
            let n = per + usize::from((c as usize) < extra);
            if n == 0 {
                return Ok((Vec::new(), Vec::new()));
            }
            run_chain(sys, sets, x0, cfg, cc, grid, c, n)
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(cc.cycles);
    for (r, w) in parts {
        records.extend(r);
        warnings.extend(w);
    }
    warnings.iter().for_each(|w| warn!("{w}"));
    Ok(CycleRun { grid: *grid, config: *cc, labels: sets.len(), records, warnings })
}

/// Row-normalized transition counts of `Z_n` with binomial standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionEstimate {
    pub counts: Vec<Vec<u64>>,
    /// Unvisited rows are set to the identity row.
    pub p: Vec<Vec<f64>>,
    pub std_err: Vec<Vec<f64>>,
    pub visited: Vec<bool>,
}

impl TransitionEstimate {
    pub fn row_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }
}

pub fn estimate_transition_matrix<'a>(
    records: impl IntoIterator<Item = &'a CycleRecord>,
    labels: usize,
) -> Result<TransitionEstimate> {
    let mut counts = vec![vec![0u64; labels]; labels];
    for r in records.into_iter().filter(|r| !r.truncated) {
        if r.start_label == 0 || r.start_label > labels || r.end_label == 0 || r.end_label > labels {
            return Err(Error::InvalidArgument(format!("record label out of range 1..={labels}")));
        }
        counts[r.start_label - 1][r.end_label - 1] += 1;
    }
    let mut p = vec![vec![0.0; labels]; labels];
    let mut std_err = vec![vec![0.0; labels]; labels];
    let mut visited = vec![false; labels];
    for i in 0..labels {
        let n: u64 = counts[i].iter().sum();
        if n == 0 {
            p[i][i] = 1.0;
            warn!("label {} was never a cycle start", i + 1);
            continue;
        }
        visited[i] = true;
        for j in 0..labels {
            let q = counts[i][j] as f64 / n as f64;
            p[i][j] = q;
            std_err[i][j] = (q * (1.0 - q) / n as f64).sqrt();
        }
    }
    Ok(TransitionEstimate { counts, p, std_err, visited })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pub nu: Vec<f64>,
    /// Closed communicating classes, as 1-based labels.
    pub closed_classes: Vec<Vec<usize>>,
    /// Stationary vector of each closed class started uniformly on it.
    pub per_class: Vec<Vec<f64>>,
    /// `max |νP − ν|`.
    pub residual: f64,
    pub warnings: Vec<String>,
}

fn closed_classes(p: &[Vec<f64>], support: &[bool]) -> Vec<Vec<usize>> {
    let l = p.len();
    // reach[i][j]: j reachable from i in ≥ 0 steps within the support
    let mut reach: Vec<Vec<bool>> = (0..l).map(|i| (0..l).map(|j| i == j || p[i][j] > 0.0).collect()).collect();
    for k in 0..l {
        for i in 0..l {
            if reach[i][k] {
                for j in 0..l {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut classes = Vec::new();
    let mut seen = vec![false; l];
    for i in 0..l {
        if seen[i] || !support[i] {
            continue;
        }
        let class: Vec<usize> = (0..l).filter(|&j| reach[i][j] && reach[j][i]).collect();
        class.iter().for_each(|&j| seen[j] = true);
        let closed = class.iter().all(|&a| (0..l).all(|b| !reach[a][b] || class.contains(&b)));
        if closed {
            classes.push(class);
        }
    }
    classes
}

/// `u (½(I + P))^(2^k)` by repeated squaring until successive iterates
/// agree to 1e-12.
fn power_limit(p: &DMatrix<f64>, start: &[f64]) -> Vec<f64> {
    let l = p.nrows();
    let mut m = (DMatrix::identity(l, l) + p) * 0.5;
    let u = DMatrix::from_row_slice(1, l, start);
    let mut v = &u * &m;
    for _ in 0..200 {
        m = &m * &m;
        for mut row in m.row_iter_mut() {
            let s: f64 = row.sum();
            row /= s;
        }
        let next = &u * &m;
        let change = (&next - &v).abs().max();
        v = next;
        if change < 1e-12 {
            break;
        }
    }
    let s: f64 = v.sum();
    v.iter().map(|x| x / s).collect()
}

/// Left fixed vector of `P` from the uniform start over visited labels.
pub fn stationary_distribution(p: &[Vec<f64>], visited: Option<&[bool]>) -> Result<StationaryDistribution> {
    let l = p.len();
    if l == 0 || p.iter().any(|r| r.len() != l) {
        return Err(Error::InvalidArgument("transition matrix must be square and nonempty".into()));
    }
    for (i, r) in p.iter().enumerate() {
        let s: f64 = r.iter().sum();
        if r.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("row {} is not stochastic", i + 1)));
        }
    }
    let support: Vec<bool> = visited.map_or_else(|| vec![true; l], <[bool]>::to_vec);
    let k = support.iter().filter(|&&s| s).count();
    if k == 0 {
        return Err(Error::Estimation("no visited labels".into()));
    }
    let dense = DMatrix::from_fn(l, l, |i, j| p[i][j]);
    let start: Vec<f64> = support.iter().map(|&s| if s { 1.0 / k as f64 } else { 0.0 }).collect();
    let nu = power_limit(&dense, &start);
    let classes = closed_classes(p, &support);
    let mut warnings = Vec::new();
    if classes.len() > 1 {
        let msg = format!("chain is reducible with {} closed classes", classes.len());
        warn!("{msg}");
        warnings.push(msg);
    }
    let per_class = classes
        .iter()
        .map(|c| {
            let mut s = vec![0.0; l];
            c.iter().for_each(|&i| s[i] = 1.0 / c.len() as f64);
            power_limit(&dense, &s)
        })
        .collect();
    let residual = (0..l)
        .map(|j| ((0..l).map(|i| nu[i] * p[i][j]).sum::<f64>() - nu[j]).abs())
        .fold(0.0, f64::max);
    Ok(StationaryDistribution {
        nu,
        closed_classes: classes.into_iter().map(|c| c.into_iter().map(|i| i + 1).collect()).collect(),
        per_class,
        residual,
        warnings,
    })
}

/// `μ̂(cell) ∝ Σ_i ν_i · mean over cycles starting at i of the cell time`.
pub fn invariant_measure_from_cycles<'a>(
    records: impl IntoIterator<Item = &'a CycleRecord>,
    nu: &[f64],
    grid: &GridSpec,
) -> Result<EmpiricalMeasure> {
    let l = nu.len();
    let mut sums = vec![vec![0.0; grid.n_cells()]; l];
    let mut outside = vec![0.0; l];
    let mut counts = vec![0usize; l];
    for r in records.into_iter().filter(|r| !r.truncated) {
        let i = r.start_label.checked_sub(1).filter(|&i| i < l).ok_or_else(|| {
            Error::InvalidArgument(format!("record label {} outside 1..={l}", r.start_label))
        })?;
        counts[i] += 1;
        outside[i] += r.outside;
        for &(c, t) in &r.occupation {
            if c >= grid.n_cells() {
                return Err(Error::InvalidArgument(format!("cell {c} is outside the grid")));
            }
            sums[i][c] += t;
        }
    }
    let mut weights = vec![0.0; grid.n_cells()];
    let mut overflow = 0.0;
    for i in 0..l {
        if nu[i] <= 0.0 {
            continue;
        }
        if counts[i] == 0 {
            return Err(Error::Estimation(format!("label {} carries stationary mass but no cycles", i + 1)));
        }
        let f = nu[i] / counts[i] as f64;
        weights.iter_mut().zip(&sums[i]).for_each(|(w, s)| *w += f * s);
        overflow += f * outside[i];
    }
    EmpiricalMeasure::from_weights(*grid, weights, overflow, true)
}

/// Longest complete cycle, which bounds the total mass of the cycle measure.
pub fn max_cycle_duration<'a>(records: impl IntoIterator<Item = &'a CycleRecord>) -> f64 {
    records.into_iter().filter(|r| !r.truncated).map(|r| r.duration).fold(0.0, f64::max)
}

/// Ratio estimate `Σ region time / Σ duration` over complete cycles, with the
/// delta-method standard error treating cycles as independent.
pub fn cycle_region_mass<'a>(
    records: impl IntoIterator<Item = &'a CycleRecord>,
    grid: &GridSpec,
    region: &[usize],
) -> (f64, f64) {
    let mut inside = vec![false; grid.n_cells()];
    region.iter().for_each(|&c| inside[c] = true);
    let pairs: Vec<(f64, f64)> = records
        .into_iter()
        .filter(|r| !r.truncated)
        .map(|r| (r.occupation.iter().filter(|(c, _)| inside[*c]).map(|(_, t)| t).sum(), r.duration))
        .collect();
    let n = pairs.len() as f64;
    let (a, d): (f64, f64) = pairs.iter().fold((0.0, 0.0), |(sa, sd), (a, d)| (sa + a, sd + d));
    if n < 2.0 || d <= 0.0 {
        return (if d > 0.0 { a / d } else { 0.0 }, f64::INFINITY);
    }
    let r = a / d;
    let dbar = d / n;
    let var = pairs.iter().map(|(a, d)| (a - r * d).powi(2)).sum::<f64>() / (n - 1.0);
    (r, (var / n).sqrt() / dbar)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMass {
    pub label: usize,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    /// Neighborhood radius `δ + ρ₁`.
    pub radius: f64,
    pub sets: Vec<SetMass>,
    /// Grid mass outside every neighborhood.
    pub remainder: f64,
    /// Share of the observed weight that fell outside the grid.
    pub overflow_fraction: f64,
}

impl ConcentrationReport {
    pub fn mass(&self, label: usize) -> f64 {
        self.sets.iter().find(|s| s.label == label).map_or(0.0, |s| s.mass)
    }
}

/// Mass of each neighborhood `{dist(K_i, center) ≤ δ + ρ₁}` and of the rest.
pub fn concentration_report(
    m: &EmpiricalMeasure,
    sets: &[AttractorSpec],
    delta: f64,
    rho1: f64,
) -> Result<ConcentrationReport> {
    let radius = delta + rho1;
    if !(delta >= 0.0 && rho1 >= 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid neighborhood radius {radius}")));
    }
    for (a, ka) in sets.iter().enumerate() {
        for kb in &sets[a + 1..] {
            if 2.0 * radius > ka.geometry.set_distance(&kb.geometry) {
                return Err(Error::OverlappingNeighborhoods { radius, delta1: delta_one(sets) });
            }
        }
    }
    let mut masses = vec![0.0; sets.len()];
    let mut remainder = 0.0;
    for (c, &w) in m.mass.iter().enumerate() {
        let p = m.grid.center(c);
        match sets.iter().position(|k| k.distance(&p) <= radius) {
            Some(i) => masses[i] += w,
            None => remainder += w,
        }
    }
    Ok(ConcentrationReport {
        radius,
        sets: sets.iter().zip(masses).map(|(k, mass)| SetMass { label: k.label, mass }).collect(),
        remainder,
        overflow_fraction: m.overflow_fraction(),
    })
}

/// Region mass at one noise level, optionally with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdpPoint {
    pub eps: f64,
    pub mass: f64,
    pub std_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdpFit {
    /// Fitted exponent: slope of `−ln μ̂_ε(region)` against `ε⁻²`.
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_err: f64,
    pub points: Vec<LdpPoint>,
    pub weighted: bool,
    pub warnings: Vec<String>,
}

pub fn ldp_points(measures: &[(f64, &EmpiricalMeasure)], region: &[usize]) -> Vec<LdpPoint> {
    measures.iter().map(|(eps, m)| LdpPoint { eps: *eps, mass: m.mass_of(region), std_err: None }).collect()
}

/// Least squares of `−ln mass` on `ε⁻²`, weighted by `(mass/std_err)²` when
/// every surviving point has a finite positive standard error.
pub fn ldp_slope(points: &[LdpPoint]) -> Result<LdpFit> {
    let mut warnings = Vec::new();
    let kept: Vec<LdpPoint> = points
        .iter()
        .filter(|p| {
            let ok = p.mass > 0.0 && p.eps > 0.0;
            if !ok {
                let msg = format!("dropped eps = {} with region mass {}", p.eps, p.mass);
                warn!("{msg}");
                warnings.push(msg);
            }
            ok
        })
        .copied()
        .collect();
    if kept.len() < 3 {
        return Err(Error::Estimation(format!("{} usable noise levels; at least 3 are needed", kept.len())));
    }
    let weighted = kept.iter().all(|p| p.std_err.is_some_and(|s| s > 0.0 && s.is_finite()));
    let xs: Vec<f64> = kept.iter().map(|p| 1.0 / (p.eps * p.eps)).collect();
    let ys: Vec<f64> = kept.iter().map(|p| -p.mass.ln()).collect();
    let ws: Vec<f64> = kept
        .iter()
        .map(|p| if weighted { (p.mass / p.std_err.expect("weighted")).powi(2) } else { 1.0 })
        .collect();
    let sw: f64 = ws.iter().sum();
    let xm = xs.iter().zip(&ws).map(|(x, w)| x * w).sum::<f64>() / sw;
    let ym = ys.iter().zip(&ws).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(&ws).map(|(x, w)| w * (x - xm).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Estimation("noise levels must be distinct".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).zip(&ws).map(|((x, y), w)| w * (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let slope_std_err = if weighted {
        (1.0 / sxx).sqrt()
    } else {
        let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        (rss / (kept.len() as f64 - 2.0) / sxx).sqrt()
    };
    Ok(LdpFit { slope, intercept, slope_std_err, points: kept, weighted, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::builtin_system;

    fn gradient() -> (SystemSpec, Vec<AttractorSpec>) {
        builtin_system("gradient").unwrap()
    }

    #[test]
    fn equilibrium_occupies_one_cell() {
        let (sys, _) = gradient();
        let grid = GridSpec::square(2.0, 40).unwrap();
        let m = occupation_histogram(&sys, &[1.0, 0.0], &SimConfig::new(0.0, 0.01, 10.0, 1), &grid, 1.0).unwrap();
        let cell = grid.cell_of(&[1.0, 0.0]).unwrap();
        assert_eq!(m.mass[cell], 1.0);
        assert!((m.total_time - 9.0).abs() < 1e-9);
        assert_eq!(m.overflow, 0.0);
        assert!(m.valid);
    }

    #[test]
    fn overflow_is_reported_not_folded() {
        let (sys, _) = gradient();
        let grid = GridSpec::new([0.5, 2.0], [-1.0, 1.0], [10, 10]).unwrap();
        // the flow from (-1.5, 0) stays left of x = 0.5
        let m = occupation_histogram(&sys, &[-1.5, 0.0], &SimConfig::new(0.0, 0.01, 5.0, 1), &grid, 0.0).unwrap();
        assert_eq!(m.total_mass(), 0.0);
        assert!((m.overflow_fraction() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn burn_in_must_precede_horizon() {
        let (sys, _) = gradient();
        let grid = GridSpec::square(2.0, 10).unwrap();
        assert!(occupation_histogram(&sys, &[1.0, 0.0], &SimConfig::new(0.1, 0.01, 1.0, 1), &grid, 1.0).is_err());
    }

    #[test]
    fn gibbs_density_properties() {
        let (sys, _) = gradient();
        let grid = GridSpec::square(2.0, 40).unwrap();
        let m = gibbs_density(&sys, 0.7, &grid).unwrap();
        assert!((m.total_mass() - 1.0).abs() < 1e-12);
        for c in 0..grid.n_cells() {
            let p = grid.center(c);
            let mirror = grid.cell_of(&[-p[0], p[1]]).unwrap();
            assert!((m.mass[c] - m.mass[mirror]).abs() < 1e-12);
        }
        // at ε = 0.1 the wells dominate; compare with direct summation
        let fine = gibbs_density(&sys, 0.1, &grid).unwrap();
        let wells = fine.mass_within([1.0, 0.0], 0.3) + fine.mass_within([-1.0, 0.0], 0.3);
        assert!(wells >= 0.99, "{wells}");
        let direct: Vec<f64> = grid.centers().map(|c| (-2.0 * sys.potential(&c).unwrap() / 0.01).exp()).collect();
        let z: f64 = direct.iter().sum();
        assert!(fine.mass.iter().zip(&direct).all(|(a, b)| (a - b / z).abs() < 1e-12));
        let (duffing, _) = builtin_system("duffing").unwrap();
        assert!(matches!(gibbs_density(&duffing, 0.5, &grid), Err(Error::Contract(_))));
    }

    #[test]
    fn tv_distance_basics() {
        let grid = GridSpec::square(1.0, 2).unwrap();
        let a = EmpiricalMeasure::from_weights(grid, vec![1.0, 0.0, 0.0, 0.0], 0.0, true).unwrap();
        let b = EmpiricalMeasure::from_weights(grid, vec![0.0, 0.0, 0.0, 3.0], 0.0, true).unwrap();
        assert_eq!(tv_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        let other = EmpiricalMeasure::from_weights(GridSpec::square(2.0, 2).unwrap(), vec![1.0; 4], 0.0, true).unwrap();
        assert!(tv_distance(&a, &other).is_err());
    }

    #[test]
    fn two_state_stationary_closed_form() {
        for (a, b) in [(0.3, 0.1), (0.01, 0.5), (1e-6, 2e-6)] {
            let p = vec![vec![1.0 - a, a], vec![b, 1.0 - b]];
            let s = stationary_distribution(&p, None).unwrap();
            assert!((s.nu[0] - b / (a + b)).abs() < 1e-10, "{s:?}");
            assert!((s.nu[1] - a / (a + b)).abs() < 1e-10);
            assert!(s.residual < 1e-10);
            assert_eq!(s.closed_classes, vec![vec![1, 2]]);
        }
    }

    #[test]
    fn symmetric_chain_is_uniform() {
        let p = vec![vec![0.5, 0.25, 0.25], vec![0.25, 0.5, 0.25], vec![0.25, 0.25, 0.5]];
        let s = stationary_distribution(&p, None).unwrap();
        assert!(s.nu.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn reducible_chain_reports_classes() {
        let p = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.5, 0.5, 0.0]];
        let s = stationary_distribution(&p, None).unwrap();
        assert_eq!(s.closed_classes, vec![vec![1], vec![2]]);
        assert_eq!(s.per_class, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert!(!s.warnings.is_empty());
        assert!(s.residual < 1e-10);
        assert!(stationary_distribution(&[vec![0.5, 0.4], vec![0.0, 1.0]], None).is_err());
    }

    fn record(start: usize, end: usize, occupation: Vec<(usize, f64)>) -> CycleRecord {
        let duration = occupation.iter().map(|(_, t)| t).sum();
        CycleRecord {
            chain: 0,
            start_label: start,
            end_label: end,
            start_time: 0.0,
            sigma_time: 0.5 * duration,
            duration,
            occupation,
            outside: 0.0,
            truncated: false,
        }
    }

    #[test]
    fn single_cycle_measure_is_its_occupation() {
        let grid = GridSpec::square(1.0, 2).unwrap();
        let r = record(1, 1, vec![(0, 1.0), (3, 3.0)]);
        let m = invariant_measure_from_cycles([&r], &[1.0], &grid).unwrap();
        assert_eq!(m.mass, vec![0.25, 0.0, 0.0, 0.75]);
        assert!(matches!(invariant_measure_from_cycles([&r], &[0.5, 0.5], &grid), Err(Error::Estimation(_))));
    }

    #[test]
    fn transition_rows_are_stochastic() {
        let recs = [record(1, 2, vec![(0, 1.0)]), record(2, 2, vec![(0, 1.0)]), record(2, 1, vec![(0, 1.0)])];
        let t = estimate_transition_matrix(&recs, 3).unwrap();
        for row in &t.p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(t.visited, vec![true, true, false]);
        assert_eq!(t.p[1], vec![0.5, 0.5, 0.0]);
        assert!((t.std_err[1][0] - 0.5f64.sqrt() * 0.5).abs() < 1e-12);
    }

    #[test]
    fn concentration_of_a_point_mass() {
        let (_, sets) = gradient();
        let grid = GridSpec::square(2.0, 100).unwrap();
        let mut w = vec![0.0; grid.n_cells()];
        w[grid.cell_of(&[-1.0, 0.0]).unwrap()] = 1.0;
        let m = EmpiricalMeasure::from_weights(grid, w, 0.0, true).unwrap();
        let rep = concentration_report(&m, &sets, 0.3, 0.0).unwrap();
        assert_eq!((rep.mass(1), rep.mass(2), rep.mass(3), rep.remainder), (0.0, 1.0, 0.0, 0.0));
        assert!(matches!(
            concentration_report(&m, &sets, 0.3, 0.3),
            Err(Error::OverlappingNeighborhoods { .. })
        ));
    }

    #[test]
    fn ldp_slope_of_gibbs_and_constant_measures() {
        let (sys, _) = gradient();
        let grid = GridSpec::square(2.0, 40).unwrap();
        let region = grid.cells_within([0.0, 0.0], 0.1);
        let ms: Vec<EmpiricalMeasure> = [0.35, 0.3, 0.25, 0.2].iter().map(|&e| gibbs_density(&sys, e, &grid).unwrap()).collect();
        let pts: Vec<(f64, &EmpiricalMeasure)> = [0.35, 0.3, 0.25, 0.2].into_iter().zip(&ms).collect();
        let fit = ldp_slope(&ldp_points(&pts, &region)).unwrap();
        // −ln μ = 0.5/ε² + ln ε² + c up to cell-centering error: the local
        // slope is 0.5 − ε² ∈ [0.38, 0.46] over this range
        assert!(fit.slope > 0.38 && fit.slope < 0.5, "{fit:?}");
        let tiny: Vec<EmpiricalMeasure> = [0.1, 0.08, 0.06].iter().map(|&e| gibbs_density(&sys, e, &grid).unwrap()).collect();
        let pts: Vec<(f64, &EmpiricalMeasure)> = [0.1, 0.08, 0.06].into_iter().zip(&tiny).collect();
        let fit = ldp_slope(&ldp_points(&pts, &region)).unwrap();
        assert!((fit.slope - 0.5).abs() < 0.05, "{fit:?}");

        let flat = EmpiricalMeasure::from_weights(grid, vec![1.0; grid.n_cells()], 0.0, true).unwrap();
        let pts = ldp_points(&[(0.3, &flat), (0.2, &flat), (0.1, &flat)], &region);
        assert!(ldp_slope(&pts).unwrap().slope.abs() < 1e-12);
        let mut dropped = pts.clone();
        dropped[0].mass = 0.0;
        assert!(matches!(ldp_slope(&dropped), Err(Error::Estimation(_))));
    }

    #[test]
    fn cycles_are_consistent_and_deterministic() {
        let (sys, sets) = gradient();
        let grid = GridSpec::square(2.0, 40).unwrap();
        let cfg = SimConfig::new(0.3, 0.005, f64::INFINITY, 11);
        let cc = CycleConfig { chains: 2, ..CycleConfig::new(0.2, 0.1, 200) };
        let run = regenerative_cycles(&sys, &sets, &[-1.0, 0.0], &cfg, &cc, &grid).unwrap();
        assert_eq!(run.complete().count(), 200);
        for r in &run.records {
            assert!(r.duration >= r.sigma_time && r.sigma_time >= 0.0);
            assert!((r.occupied_time() - r.duration).abs() < 1e-9 * r.duration.max(1.0), "{r:?}");
        }
        for c in 0..2 {
            let recs: Vec<&CycleRecord> = run.records.iter().filter(|r| r.chain == c).collect();
            for w in recs.windows(2) {
                assert_eq!(w[0].end_label, w[1].start_label);
                assert!((w[0].start_time + w[0].duration - w[1].start_time).abs() < 1e-9);
            }
        }
        let again = regenerative_cycles(&sys, &sets, &[-1.0, 0.0], &cfg, &cc, &grid).unwrap();
        assert_eq!(run, again);
        assert_ne!(run.label_sequence(0), Vec::<usize>::new());
    }

    #[test]
    fn cycle_budget_truncates() {
        let (sys, sets) = gradient();
        let grid = GridSpec::square(2.0, 10).unwrap();
        // without noise the chain never leaves G_2
        let cfg = SimConfig::new(0.0, 0.01, 100.0, 1);
        let cc = CycleConfig { max_cycle_time: 5.0, ..CycleConfig::new(0.2, 0.1, 3) };
        let run = regenerative_cycles(&sys, &sets, &[-1.5, 0.0], &cfg, &cc, &grid).unwrap();
        assert_eq!(run.records.len(), 1);
        assert!(run.records[0].truncated && run.records[0].start_label == 2);
        assert!(!run.warnings.is_empty());
    }

    #[test]
    fn cycle_config_checks_radii() {
        let (_, sets) = gradient();
        assert!(CycleConfig::new(0.1, 0.2, 5).validate(&sets).is_err());
        assert!(matches!(CycleConfig::new(0.6, 0.1, 5).validate(&sets), Err(Error::OverlappingNeighborhoods { .. })));
        assert_eq!(CycleConfig::new(0.2, 0.1, 5).validate(&sets).unwrap().len(), 1);
        assert!(CycleConfig::new(0.1, 0.05, 5).validate(&sets).unwrap().is_empty());
    }
}
