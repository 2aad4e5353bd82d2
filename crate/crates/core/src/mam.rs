//! Minimum action method: quasi-potentials between points and between sets,
//! optionally restricted to paths avoiding a list of excluded sets.
//!
//! For a fixed duration the interior nodes (and, for set endpoints, the
//! position along each set) are optimized by L-BFGS. The infimum over
//! durations is approximated by a sweep over an increasing grid, each
//! duration warm-started from the previous optimum.

use std::io::Write;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{action_with_gradient, discrete_action, DiscretePath};
use crate::cost::Cost;
use crate::dynamics::{AttractorSpec, Geometry, SystemSpec};
use crate::error::{Error, Result};
use crate::optim::{lbfgs, LbfgsOptions};

/// Default distance kept from excluded sets.
pub const DEFAULT_MARGIN: f64 = 0.05;
/// Slack allowed below the potential lower bound.
pub const LOWER_BOUND_SLACK: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MamConfig {
    pub segments: usize,
    /// Increasing list of durations swept for the infimum over `T`.
    pub durations: Vec<f64>,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub penalty_weight: f64,
    /// Total number of penalty doublings allowed across the sweep.
    pub max_doublings: u32,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for MamConfig {
    fn default() -> Self {
        Self {
            segments: 200,
            durations: vec![2.0, 5.0, 10.0, 20.0, 50.0],
            max_iters: 20_000,
            grad_tol: 1e-6,
            penalty_weight: 1e3,
            max_doublings: 10,
            restarts: 3,
            seed: 0,
        }
    }
}

impl MamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.segments < 2 {
            return bad("mam needs at least 2 segments");
        }
        if self.durations.is_empty()
            || self.durations.iter().any(|t| !(*t > 0.0 && t.is_finite()))
            || self.durations.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("durations must be a nonempty increasing list of positive values");
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return bad("max_iters and restarts must be positive");
        }
        if !(self.grad_tol > 0.0) || !(self.penalty_weight > 0.0) {
            return bad("grad_tol and penalty_weight must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiPotentialResult {
    /// Action of `path`, or infinite when no feasible path was found.
    pub value: Cost,
    pub path: DiscretePath,
    pub t_star: f64,
    pub converged: bool,
    /// Values at the two largest durations agree within 1%.
    pub sweep_stable: bool,
    pub grad_norm: f64,
    pub feasible: bool,
    pub penalty_weight: f64,
}

/// Scalar part of a result, for JSON export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiPotentialRecord {
    pub value: Cost,
    pub t_star: f64,
    pub converged: bool,
    pub sweep_stable: bool,
    pub feasible: bool,
    pub grad_norm: f64,
}

impl QuasiPotentialResult {
    pub fn record(&self) -> QuasiPotentialRecord {
        QuasiPotentialRecord {
            value: self.value,
            t_star: self.t_star,
            converged: self.converged,
            sweep_stable: self.sweep_stable,
            feasible: self.feasible,
            grad_norm: self.grad_norm,
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.record())?;
        Ok(())
    }

    pub fn write_path_csv<W: Write>(&self, w: W) -> Result<()> {
        self.path.write_csv(w)
    }
}

/// Uniform linear interpolation from `x` to `y`; constant when `x = y`.
pub fn straight_line_path(x: &[f64], y: &[f64], segments: usize, duration: f64) -> Result<DiscretePath> {
    DiscretePath::straight(x, y, duration, segments)
}

#[derive(Clone, Copy, Debug)]
enum End<'a> {
    Fixed(&'a [f64]),
    OnSet(&'a Geometry),
}

impl End<'_> {
    fn free(&self) -> usize {
        match self {
            End::Fixed(_) => 0,
            End::OnSet(g) => g.param_dim(),
        }
    }

    fn point(&self, vars: &[f64]) -> Vec<f64> {
        match self {
            End::Fixed(x) => x.to_vec(),
            End::OnSet(g) => g.point_at(vars.first().copied().unwrap_or(0.0)),
        }
    }
}

/// Objective over the free variables `[start param] ++ interior nodes ++ [end param]`.
struct PathProblem<'a> {
    sys: &'a SystemSpec,
    start: End<'a>,
    end: End<'a>,
    exclusions: &'a [Geometry],
    margin: f64,
    weight: f64,
    segments: usize,
    duration: f64,
}

impl PathProblem<'_> {
    fn dim(&self) -> usize {
        self.sys.dim()
    }

    fn encode(&self, path: &DiscretePath) -> Vec<f64> {
        let d = self.dim();
        let n = self.segments;
        let mut v = Vec::with_capacity(self.start.free() + (n - 1) * d + self.end.free());
        if let End::OnSet(g) = self.start {
            v.extend(g.param_of(path.start()));
        }
        v.extend_from_slice(&path.nodes()[d..n * d]);
        if let End::OnSet(g) = self.end {
            v.extend(g.param_of(path.end()));
        }
        v
    }

    fn decode(&self, vars: &[f64]) -> DiscretePath {
        let d = self.dim();
        let n = self.segments;
        let a = self.start.free();
        let interior = &vars[a..a + (n - 1) * d];
        let mut nodes = Vec::with_capacity((n + 1) * d);
        nodes.extend(self.start.point(&vars[..a]));
        nodes.extend_from_slice(interior);
        nodes.extend(self.end.point(&vars[a + (n - 1) * d..]));
        DiscretePath::new(self.duration, d, nodes).expect("decoded nodes are finite")
    }

    /// Hinge penalty on interior nodes and all segment midpoints; adds its
    /// gradient with respect to the nodes into `grad`.
    fn penalty(&self, path: &DiscretePath, mut grad: Option<&mut [f64]>) -> f64 {
        if self.exclusions.is_empty() {
            return 0.0;
        }
        let d = self.dim();
        let n = path.segments();
        let mut total = 0.0;
        let mut m = vec![0.0; d];
        let mut dg = vec![0.0; d];
        for k in 0..n {
            let (p, q) = (path.node(k), path.node(k + 1));
            m.iter_mut().enumerate().for_each(|(i, v)| *v = 0.5 * (p[i] + q[i]));
            for g in self.exclusions {
                for (x, weights) in [(p, &[1.0, 0.0][..]), (&m[..], &[0.5, 0.5][..])] {
                    if k == 0 && weights[0] == 1.0 {
                        continue;
                    }
                    let gap = self.margin - g.distance(x);
                    if gap <= 0.0 {
                        continue;
                    }
                    total += self.weight * gap * gap;
                    if let Some(grad) = grad.as_deref_mut() {
                        g.distance_gradient(x, &mut dg);
                        for (node, w) in [k, k + 1].into_iter().zip(weights) {
                            for i in 0..d {
                                grad[node * d + i] -= w * 2.0 * self.weight * gap * dg[i];
                            }
                        }
                    }
                }
            }
        }
        total
    }

    fn objective(&self, vars: &[f64], grad: &mut [f64]) -> Option<f64> {
        if vars.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let d = self.dim();
        let n = self.segments;
        let path = self.decode(vars);
        let (s, mut g) = action_with_gradient(self.sys, &path).ok()?;
        let pen = self.penalty(&path, Some(&mut g));
        let a = self.start.free();
        if let End::OnSet(geo) = self.start {
            let t = geo.tangent_at(vars[0]);
            grad[0] = (0..d).map(|i| g[i] * t[i]).sum();
        }
        grad[a..a + (n - 1) * d].copy_from_slice(&g[d..n * d]);
        if let End::OnSet(geo) = self.end {
            let t = geo.tangent_at(vars[vars.len() - 1]);
            grad[vars.len() - 1] = (0..d).map(|i| g[n * d + i] * t[i]).sum();
        }
        Some(s + pen)
    }

    /// Nodes keep half the margin and no segment comes closer than a quarter.
    fn feasible(&self, path: &DiscretePath) -> bool {
        let n = path.segments();
        for g in self.exclusions {
            for k in 0..=n {
                if (k > 0 && k < n) && g.distance(path.node(k)) < 0.5 * self.margin {
                    return false;
                }
            }
            for k in 0..n {
                let (p, q) = (path.node(k), path.node(k + 1));
                let len = p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let pieces = (len / (0.25 * self.margin)).ceil().max(1.0) as usize;
                for j in 1..pieces {
                    let t = j as f64 / pieces as f64;
                    let x: Vec<f64> = p.iter().zip(q).map(|(a, b)| a + t * (b - a)).collect();
                    if g.distance(&x) < 0.25 * self.margin {
                        return false;
                    }
                }
            }
        }
        true
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    path: DiscretePath,
    action: f64,
    converged: bool,
    grad_norm: f64,
    feasible: bool,
    weight: f64,
    resolved: bool,
}

impl Candidate {
    /// Feasible and resolved first, then smaller action.
    fn better_than(&self, other: &Candidate) -> bool {
        let rank = |c: &Candidate| (c.feasible, c.resolved);
        match rank(self).cmp(&rank(other)) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            _ => self.action < other.action - 1e-9 * other.action.abs().max(1.0),
        }
    }
}

/// Largest factor by which the node count is refined for one duration.
const MAX_REFINEMENT: usize = 4;
/// Relative change tolerated when the optimum is re-evaluated on a grid twice as fine.
const RESOLUTION_TOL: f64 = 0.05;

/// A path whose action jumps on the doubled grid is exploiting the coarse
/// quadrature rather than approximating the continuous action.
fn is_resolved(sys: &SystemSpec, path: &DiscretePath, action: f64) -> Result<bool> {
    let fine = discrete_action(sys, &path.resampled(2 * path.segments()))?;
    Ok((fine - action).abs() <= RESOLUTION_TOL * action.abs() + 1e-4)
}

fn optimize(problem: &PathProblem<'_>, init: &DiscretePath, cfg: &MamConfig) -> Result<Candidate> {
    let x0 = problem.encode(init);
    let mut probe = vec![0.0; x0.len()];
    if problem.objective(&x0, &mut probe).is_none() {
        return Err(Error::Evaluation { x: init.start().to_vec() });
    }
    let opts = LbfgsOptions { max_iters: cfg.max_iters, grad_tol: cfg.grad_tol, ..Default::default() };
    let out = lbfgs(|x, g| problem.objective(x, g), &x0, &opts);
    let path = problem.decode(&out.x);
    let action = discrete_action(problem.sys, &path)?;
    Ok(Candidate {
        feasible: problem.feasible(&path),
        resolved: is_resolved(problem.sys, &path, action)?,
        path,
        action,
        converged: out.converged,
        grad_norm: out.grad_norm,
        weight: problem.weight,
    })
}

/// Smooth random bump added to the interior nodes.
fn perturbed(init: &DiscretePath, seed: u64, restart: u64) -> DiscretePath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ restart.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut u = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
    let d = init.dim();
    let n = init.segments();
    let span = init
        .start()
        .iter()
        .zip(init.end())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let amp = 0.25 * span.max(0.2);
    let coef: Vec<f64> = (0..3 * d).map(|_| amp * u()).collect();
    let mut out = init.clone();
    for k in 1..n {
        let s = k as f64 / n as f64;
        for i in 0..d {
            let bump: f64 = (0..3)
                .map(|j| coef[j * d + i] * ((j + 1) as f64 * std::f64::consts::PI * s).sin())
                .sum();
            out.node_mut(k)[i] += bump;
        }
    }
    out
}

/// Best of `restarts` optimizations at fixed duration and weight, with
/// penalty doublings until feasible while `budget` lasts.
fn optimize_with_restarts(
    problem: &PathProblem<'_>,
    inits: &[DiscretePath],
    cfg: &MamConfig,
    budget: &mut u32,
) -> Result<Candidate> {
    let runs: Vec<Result<Candidate>> = inits.par_iter().map(|p| optimize(problem, p, cfg)).collect();
    let mut best: Option<Candidate> = None;
    for r in runs {
        let c = r?;
        if best.as_ref().is_none_or(|b| c.better_than(b)) {
            best = Some(c);
        }
    }
    let mut best = best.expect("at least one restart");
    let mut weight = problem.weight;
    while !best.feasible && *budget > 0 {
        *budget -= 1;
        weight *= 2.0;
        let heavier = PathProblem { weight, ..*problem };
        let c = optimize(&heavier, &best.path, cfg)?;
        best = c;
    }
    Ok(best)
}

fn restart_inits(base: &DiscretePath, cfg: &MamConfig, salt: u64) -> Vec<DiscretePath> {
    (0..cfg.restarts as u64)
        .map(|r| if r == 0 { base.clone() } else { perturbed(base, cfg.seed ^ salt, r) })
        .collect()
}

/// Shared sweep over durations.
///
/// A duration whose optimum fails the resolution check is re-optimized on a
/// grid twice as fine, up to [`MAX_REFINEMENT`] times the configured count;
/// later durations keep the finer grid.
fn sweep(
    sys: &SystemSpec,
    start: End<'_>,
    end: End<'_>,
    exclusions: &[Geometry],
    margin: f64,
    cfg: &MamConfig,
    first: Vec<DiscretePath>,
) -> Result<QuasiPotentialResult> {
    cfg.validate()?;
    let mut weight = cfg.penalty_weight;
    let mut budget = cfg.max_doublings;
    let mut segments = cfg.segments;
    let mut best: Option<(Candidate, f64)> = None;
    let mut per_t: Vec<Option<f64>> = Vec::new();
    let mut warm: Option<DiscretePath> = None;
    for (i, &t) in cfg.durations.iter().enumerate() {
        let c = loop {
            let problem = PathProblem {
                sys,
                start,
                end,
                exclusions,
                margin,
                weight,
                segments,
                duration: t,
            };
            let inits: Vec<DiscretePath> = match &warm {
                None => first
                    .iter()
                    .enumerate()
                    .flat_map(|(j, p)| {
                        let p = p.resampled(segments).with_duration(t).expect("positive duration");
                        restart_inits(&p, cfg, j as u64)
                    })
                    .collect(),
                Some(p) => restart_inits(&p.resampled(segments).with_duration(t)?, cfg, i as u64 * 7919),
            };
            let c = optimize_with_restarts(&problem, &inits, cfg, &mut budget)?;
            weight = weight.max(c.weight);
            if c.resolved || 2 * segments > MAX_REFINEMENT * cfg.segments {
                break c;
            }
            segments *= 2;
            warm = Some(c.path);
        };
        per_t.push((c.feasible && c.resolved).then_some(c.action));
        warm = Some(c.path.clone());
        let exhausted = !c.feasible && budget == 0;
        let replace = match &best {
            None => true,
            Some((b, _)) => c.better_than(b),
        };
        if replace {
            best = Some((c, t));
        }
        if exhausted {
            // the heaviest penalty did not separate the path from the excluded sets
            break;
        }
    }
    let (c, t_star) = best.expect("nonempty duration grid");
    let sweep_stable = match per_t.as_slice() {
        [.., Some(a), Some(b)] => (a - b).abs() <= 0.01 * a.abs().max(b.abs()) + 1e-4,
        [Some(_)] => true,
        _ => false,
    };
    let value = if c.feasible { Cost::finite(c.action) } else { Cost::INFINITE };
    Ok(QuasiPotentialResult {
        value,
        t_star,
        converged: c.converged && c.resolved,
        sweep_stable: sweep_stable && c.feasible,
        grad_norm: c.grad_norm,
        feasible: c.feasible,
        penalty_weight: c.weight,
        path: c.path,
    })
}

fn check_point(sys: &SystemSpec, x: &[f64]) -> Result<()> {
    if x.len() != sys.dim() {
        return Err(Error::Dimension { expected: sys.dim(), got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation { x: x.to_vec() });
    }
    Ok(())
}

/// Minimum of the action over paths from `x` to `y` of duration `duration`,
/// best of `cfg.restarts` runs from `init` and perturbations of it.
pub fn minimize_action_fixed_t(
    sys: &SystemSpec,
    x: &[f64],
    y: &[f64],
    duration: f64,
    cfg: &MamConfig,
    init: &DiscretePath,
) -> Result<QuasiPotentialResult> {
    check_point(sys, x)?;
    check_point(sys, y)?;
    if init.start() != x || init.end() != y {
        return Err(Error::InvalidArgument("initial path endpoints must equal the query".into()));
    }
    let cfg = MamConfig { durations: vec![duration], segments: init.segments(), ..cfg.clone() };
    let init = init.clone().with_duration(duration)?;
    sweep(sys, End::Fixed(x), End::Fixed(y), &[], 0.0, &cfg, vec![init])
}

/// `V(x, y)`: minimum over the duration grid, starting from the straight line.
pub fn quasipotential(sys: &SystemSpec, x: &[f64], y: &[f64], cfg: &MamConfig) -> Result<QuasiPotentialResult> {
    check_point(sys, x)?;
    check_point(sys, y)?;
    cfg.validate()?;
    let init = straight_line_path(x, y, cfg.segments, cfg.durations[0])?;
    sweep(sys, End::Fixed(x), End::Fixed(y), &[], 0.0, cfg, vec![init])
}

fn end_of(g: &Geometry) -> End<'_> {
    match g {
        Geometry::Point(p) => End::Fixed(p),
        other => End::OnSet(other),
    }
}

/// `Ṽ(K_i, K_j)` over paths from `K_i` to `K_j` keeping `margin` away from
/// every set in `exclusions`; infinite when no feasible path is found.
pub fn quasipotential_sets(
    sys: &SystemSpec,
    from: &AttractorSpec,
    to: &AttractorSpec,
    exclusions: &[AttractorSpec],
    margin: f64,
    cfg: &MamConfig,
) -> Result<QuasiPotentialResult> {
    cfg.validate()?;
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument("exclusion margin must be positive".into()));
    }
    if from.label == to.label || from.geometry == to.geometry {
        let x = from.geometry.samples(1).remove(0);
        let path = straight_line_path(&x, &x, cfg.segments, cfg.durations[0])?;
        let value = discrete_action(sys, &path)?;
        return Ok(QuasiPotentialResult {
            value: Cost::finite(value),
            path,
            t_star: cfg.durations[0],
            converged: true,
            sweep_stable: true,
            grad_norm: 0.0,
            feasible: true,
            penalty_weight: cfg.penalty_weight,
        });
    }
    let excluded: Vec<Geometry> = exclusions
        .iter()
        .filter(|k| k.label != from.label && k.label != to.label)
        .map(|k| k.geometry.clone())
        .collect();
    let (start, end) = (end_of(&from.geometry), end_of(&to.geometry));
    let first = endpoint_candidates(sys, from, to, &excluded, margin, cfg)?;
    sweep(sys, start, end, &excluded, margin, cfg, first)
}

/// Straight paths between the best-scoring pairs of sample points of the two sets.
fn endpoint_candidates(
    sys: &SystemSpec,
    from: &AttractorSpec,
    to: &AttractorSpec,
    excluded: &[Geometry],
    margin: f64,
    cfg: &MamConfig,
) -> Result<Vec<DiscretePath>> {
    let thin = |g: &Geometry| -> Vec<Vec<f64>> {
        let all = g.samples(24);
        let step = (all.len() / 24).max(1);
        all.into_iter().step_by(step).collect()
    };
    let t0 = cfg.durations[0];
    let scorer = PathProblem {
        sys,
        start: End::Fixed(&[]),
        end: End::Fixed(&[]),
        exclusions: excluded,
        margin,
        weight: cfg.penalty_weight,
        segments: cfg.segments,
        duration: t0,
    };
    let mut scored = Vec::new();
    for a in thin(&from.geometry) {
        for b in thin(&to.geometry) {
            let p = straight_line_path(&a, &b, cfg.segments, t0)?;
            let s = discrete_action(sys, &p)? + scorer.penalty(&p, None);
            scored.push((s, p));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let keep = if scored.len() > 1 { 2 } else { 1 };
    Ok(scored.into_iter().take(keep).map(|(_, p)| p).collect())
}

/// `value ≥ (2ζ/λ̄²)(J(y) − J(x)) − 1e-3`; infinite values pass.
pub fn lower_bound_check(sys: &SystemSpec, result: &QuasiPotentialResult, x: &[f64], y: &[f64]) -> Result<bool> {
    let name = || Error::MissingPotential(sys.name().to_string());
    let jx = sys.potential(x).ok_or_else(name)?;
    let jy = sys.potential(y).ok_or_else(name)?;
    let factor = sys
        .constants()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no Lyapunov constants", sys.name())))?
        .bound_factor();
    Ok(!result.value.is_finite() || result.value.value() >= factor * (jy - jx) - LOWER_BOUND_SLACK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{skeleton_solve, NoControl};
    use crate::dynamics::builtin_system;

    fn quick() -> MamConfig {
        MamConfig { restarts: 2, ..Default::default() }
    }

    #[test]
    fn straight_line_nodes() {
        let p = straight_line_path(&[0.0, 0.0], &[1.0, 0.0], 4, 1.0).unwrap();
        let xs: Vec<f64> = p.iter_nodes().map(|n| n[0]).collect();
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(p.iter_nodes().all(|n| n[1] == 0.0));
        let c = straight_line_path(&[0.3, 0.3], &[0.3, 0.3], 4, 1.0).unwrap();
        assert!(c.iter_nodes().all(|n| n == [0.3, 0.3]));
    }

    #[test]
    fn straight_line_action_is_bounded_by_lipschitz_estimate() {
        let sys = builtin_system("gradient").unwrap().0;
        for (x, y) in [([0.0f64, 0.0], [1.0f64, 0.0]), ([-0.5, 0.7], [0.9, -0.2]), ([1.2, 1.0], [1.0, 1.3])] {
            let len = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
            let path = straight_line_path(&x, &y, 200, len).unwrap();
            let lip = path
                .iter_nodes()
                .map(|n| 0.5 * (1.0 + crate::dynamics::eval_drift(&sys, n).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt()).powi(2))
                .fold(0.0, f64::max);
            let s = discrete_action(&sys, &path).unwrap();
            assert!(s.is_finite() && s <= lip * len, "{s} > {}", lip * len);
        }
    }

    #[test]
    fn trivial_queries_cost_nothing() {
        let sys = builtin_system("gradient").unwrap().0;
        let x = [-1.0, 0.0];
        let init = straight_line_path(&x, &x, 50, 7.0).unwrap();
        let r = minimize_action_fixed_t(&sys, &x, &x, 7.0, &quick(), &init).unwrap();
        assert!(r.value.value() <= 1e-6);
        assert!(r.path.iter_nodes().all(|n| (n[0] + 1.0).abs() < 1e-6 && n[1].abs() < 1e-6));
        let r = quasipotential(&sys, &x, &x, &quick()).unwrap();
        assert!(r.value.value() <= 1e-6);
    }

    #[test]
    fn uphill_to_saddle_costs_twice_the_barrier() {
        let sys = builtin_system("gradient").unwrap().0;
        let cfg = MamConfig { segments: 400, ..quick() };
        let init = straight_line_path(&[-1.0, 0.0], &[0.0, 0.0], 400, 50.0).unwrap();
        let r = minimize_action_fixed_t(&sys, &[-1.0, 0.0], &[0.0, 0.0], 50.0, &cfg, &init).unwrap();
        assert!((0.48..=0.52).contains(&r.value.value()), "{r:?}");
        assert_eq!(r.value.value(), discrete_action(&sys, &r.path).unwrap());
        assert!(lower_bound_check(&sys, &r, &[-1.0, 0.0], &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn downhill_is_free() {
        let sys = builtin_system("gradient").unwrap().0;
        // the noiseless flow from just left of the saddle reaches (−1, 0)
        let flow = skeleton_solve(&sys, &[-0.01, 0.0], &NoControl, 50.0, 5000).unwrap();
        assert!((flow.end()[0] + 1.0).abs() < 1e-6);
        let init = straight_line_path(&[0.0, 0.0], &[-1.0, 0.0], 200, 50.0).unwrap();
        let r = minimize_action_fixed_t(&sys, &[0.0, 0.0], &[-1.0, 0.0], 50.0, &quick(), &init).unwrap();
        assert!(r.value.value() <= 0.01, "{r:?}");
    }

    #[test]
    fn sweep_matches_potential_barriers() {
        for name in ["gradient", "duffing"] {
            let sys = builtin_system(name).unwrap().0;
            let r = quasipotential(&sys, &[-1.0, 0.0], &[0.0, 0.0], &quick()).unwrap();
            assert!((r.value.value() - 0.5).abs() <= 0.03, "{name}: {r:?}");
            assert!(lower_bound_check(&sys, &r, &[-1.0, 0.0], &[0.0, 0.0]).unwrap());
        }
        let sys = builtin_system("gradient").unwrap().0;
        let r = quasipotential(&sys, &[-1.0, 0.0], &[1.0, 0.0], &quick()).unwrap();
        assert!((r.value.value() - 0.5).abs() <= 0.03, "{r:?}");
    }

    #[test]
    fn exclusion_forces_a_detour() {
        let (sys, sets) = builtin_system("gradient").unwrap();
        let cfg = quick();
        let free = quasipotential_sets(&sys, &sets[1], &sets[2], &[], DEFAULT_MARGIN, &cfg).unwrap();
        let constrained = quasipotential_sets(&sys, &sets[1], &sets[2], &sets, DEFAULT_MARGIN, &cfg).unwrap();
        assert!(constrained.feasible && constrained.value.is_finite(), "{constrained:?}");
        assert!(constrained.value.value() >= free.value.value() - 1e-3);
        assert!(constrained.path.iter_nodes().skip(1).all(|n| sets[0].distance(n) >= 0.5 * DEFAULT_MARGIN));
        assert!((constrained.value.value() - 0.5).abs() < 0.03, "{constrained:?}");
    }

    #[test]
    fn same_set_is_free() {
        let (sys, sets) = builtin_system("nonsymmetric").unwrap();
        let r = quasipotential_sets(&sys, &sets[2], &sets[2], &sets, DEFAULT_MARGIN, &quick()).unwrap();
        assert!(r.value.value() <= 1e-20);
    }

    #[test]
    fn enclosed_target_is_unreachable() {
        // (0,0) lies inside the circle of radius 0.1, so reaching the unit
        // circle from it must cross the excluded circle
        let (sys, sets) = builtin_system("nonsymmetric").unwrap();
        let cfg = MamConfig { durations: vec![2.0, 5.0], max_doublings: 4, ..quick() };
        let r = quasipotential_sets(&sys, &sets[0], &sets[2], &sets, DEFAULT_MARGIN, &cfg).unwrap();
        assert_eq!(r.value, Cost::INFINITE);
        assert!(!r.feasible);
        let json = serde_json::to_string(&r.record()).unwrap();
        assert!(json.contains(r#""value":"inf""#));
    }

    #[test]
    fn config_validation() {
        assert!(MamConfig::default().validate().is_ok());
        assert!(MamConfig { durations: vec![5.0, 2.0], ..Default::default() }.validate().is_err());
        assert!(MamConfig { segments: 1, ..Default::default() }.validate().is_err());
        assert!(MamConfig { grad_tol: 0.0, ..Default::default() }.validate().is_err());
        let cfg: MamConfig = serde_json::from_str(r#"{"segments": 100}"#).unwrap();
        assert_eq!(cfg.durations, MamConfig::default().durations);
        assert!(serde_json::from_str::<MamConfig>(r#"{"segmentz": 100}"#).is_err());
    }

    #[test]
    fn bound_is_trivial_for_downhill_and_equal_points() {
        let sys = builtin_system("gradient").unwrap().0;
        let path = straight_line_path(&[0.0, 0.0], &[-1.0, 0.0], 10, 1.0).unwrap();
        let r = QuasiPotentialResult {
            value: Cost::ZERO,
            path,
            t_star: 1.0,
            converged: true,
            sweep_stable: true,
            grad_norm: 0.0,
            feasible: true,
            penalty_weight: 1e3,
        };
        assert!(lower_bound_check(&sys, &r, &[0.0, 0.0], &[-1.0, 0.0]).unwrap());
        assert!(lower_bound_check(&sys, &r, &[0.3, 0.2], &[0.3, 0.2]).unwrap());
        assert!(!lower_bound_check(&sys, &r, &[-1.0, 0.0], &[0.0, 0.0]).unwrap());
    }
}
