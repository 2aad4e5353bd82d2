//! Tamed Euler integration of `dX = b(X) dt + ε σ(X) dW`.
//!
//! Gaussian increments come from a ChaCha8 stream keyed by `(seed, replica)`
//! whose word position is a fixed function of the step index, so step `n` of
//! replica `r` sees the same increment regardless of thread scheduling.

use std::f64::consts::TAU;
use std::io::Write;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Diffusion, Geometry, SystemSpec};
use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// States with norm above this terminate a run as a blow-up.
pub const BLOW_UP_NORM: f64 = 1e6;
/// Largest admissible step size.
pub const MAX_STEP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub eps: f64,
    pub h: f64,
    /// May be infinite when a stop target is supplied.
    pub horizon: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub thinning: usize,
}

fn one() -> usize {
    1
}

impl SimConfig {
    pub fn new(eps: f64, h: f64, horizon: f64, seed: u64) -> Self {
        Self { eps, h, horizon, seed, thinning: 1 }
    }

    pub fn with_thinning(mut self, thinning: usize) -> Self {
        self.thinning = thinning;
        self
    }

    /// `ε = 0` is accepted for deterministic runs of the flow.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be >= 0, got {}", self.eps)));
        }
        if !(self.h > 0.0 && self.h <= MAX_STEP) {
            return Err(Error::InvalidArgument(format!(
                "step size must lie in (0, {MAX_STEP}], got {}",
                self.h
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if self.thinning == 0 {
            return Err(Error::InvalidArgument("thinning must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of steps covering the horizon; the last one may be shorter than `h`.
    pub fn step_count(&self) -> u64 {
        let n = self.horizon / self.h;
        let r = n.round();
        if (n - r).abs() < 1e-9 * r.max(1.0) {
            r as u64
        } else {
            n.ceil() as u64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Horizon,
    HitSet,
    BlowUp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub terminal_reason: TerminalReason,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("a trajectory holds at least its initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("a trajectory holds at least its initial time")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV rows `t,x1,..,xd` with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.states.first().map_or(0, Vec::len);
        write!(w, "t")?;
        for i in 1..=d {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            write_row(&mut w, *t, x)?;
        }
        Ok(())
    }
}

pub(crate) fn write_row<W: Write>(w: &mut W, lead: f64, x: &[f64]) -> Result<()> {
    write!(w, "{lead:e}")?;
    for v in x {
        write!(w, ",{v:e}")?;
    }
    writeln!(w)?;
    Ok(())
}

/// Standard normal increments, Box–Muller on pairs of 64-bit words.
///
/// Each step consumes exactly `2·⌈d/2⌉` words, so the stream can be
/// positioned at any step without replaying earlier ones.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    dim: usize,
}

impl NoiseStream {
    pub fn new(seed: u64, replica: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replica);
        Self { rng, dim }
    }

    fn words_per_step(&self) -> u128 {
        // 32-bit words: two per u64, two u64 per normal pair
        4 * self.dim.div_ceil(2) as u128
    }

    /// Positions the stream so the next draw is the one for `step`.
    pub fn seek(&mut self, step: u64) {
        self.rng.set_word_pos(step as u128 * self.words_per_step());
    }

    /// Fills `out` (length `dim`) with independent `N(0, 1)` draws.
    #[inline]
    pub fn standard_normals(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut i = 0;
        while i < self.dim {
            // u1 in (0, 1], u2 in [0, 1)
            let u1 = ((self.rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
            let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (TAU * u2).sin_cos();
            out[i] = r * c;
            if i + 1 < self.dim {
                out[i + 1] = r * s;
            }
            i += 2;
        }
    }
}

/// One tamed Euler step in place: `x ← x + h b/(1 + h|b|) + ε σ(x) ΔW`.
///
/// `drift` and `noise` are scratch buffers of length `d`; `dw` holds the
/// Brownian increment with covariance `h I`. Returns `false` when the new
/// state is non-finite or beyond [`BLOW_UP_NORM`].
#[inline]
pub fn tamed_euler_in_place(
    sys: &SystemSpec,
    x: &mut [f64],
    eps: f64,
    h: f64,
    dw: &[f64],
    drift: &mut [f64],
    noise: &mut [f64],
) -> bool {
    let d = x.len();
    sys.drift_into(x, drift);
    let norm = drift.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = h / (1.0 + h * norm);
    match sys.diffusion() {
        Diffusion::Identity => noise.copy_from_slice(dw),
        _ => {
            let s = sys.diffusion_matrix(x);
            for (i, n) in noise.iter_mut().enumerate() {
                *n = (0..d).map(|j| s[i * d + j] * dw[j]).sum();
            }
        }
    }
    let mut norm2 = 0.0;
    for i in 0..d {
        x[i] += scale * drift[i] + eps * noise[i];
        norm2 += x[i] * x[i];
    }
    norm2.is_finite() && norm2 <= BLOW_UP_NORM * BLOW_UP_NORM
}

/// Allocating form of [`tamed_euler_in_place`]; `None` signals a blow-up.
pub fn tamed_euler_step(
    sys: &SystemSpec,
    x: &[f64],
    eps: f64,
    h: f64,
    dw: &[f64],
) -> Result<Option<Vec<f64>>> {
    let d = sys.dim();
    if x.len() != d || dw.len() != d {
        return Err(Error::Dimension { expected: d, got: x.len().min(dw.len()) });
    }
    let mut y = x.to_vec();
    let (mut b, mut n) = (vec![0.0; d], vec![0.0; d]);
    Ok(tamed_euler_in_place(sys, &mut y, eps, h, dw, &mut b, &mut n).then_some(y))
}

/// Streaming integrator holding the current state and noise position.
#[derive(Debug)]
pub struct Stepper<'a> {
    sys: &'a SystemSpec,
    eps: f64,
    h: f64,
    noise: NoiseStream,
    state: Vec<f64>,
    steps: u64,
    time: f64,
    dw: Vec<f64>,
    drift: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a SystemSpec, x0: &[f64], cfg: &SimConfig, replica: u64) -> Result<Self> {
        cfg.validate()?;
        let d = sys.dim();
        if x0.len() != d {
            return Err(Error::Dimension { expected: d, got: x0.len() });
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation { x: x0.to_vec() });
        }
        Ok(Self {
            sys,
            eps: cfg.eps,
            h: cfg.h,
            noise: NoiseStream::new(cfg.seed, replica, d),
            state: x0.to_vec(),
            steps: 0,
            time: 0.0,
            dw: vec![0.0; d],
            drift: vec![0.0; d],
            scratch: vec![0.0; d],
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// Full step of size `h`; `false` on blow-up.
    #[inline]
    pub fn advance(&mut self) -> bool {
        self.advance_by(self.h)
    }

    /// Step of size `dt ≤ h`, still consuming the noise words of one step.
    #[inline]
    pub fn advance_by(&mut self, dt: f64) -> bool {
        self.noise.standard_normals(&mut self.dw);
        let root = dt.sqrt();
        self.dw.iter_mut().for_each(|v| *v *= root);
        let ok = tamed_euler_in_place(
            self.sys,
            &mut self.state,
            self.eps,
            dt,
            &self.dw,
            &mut self.drift,
            &mut self.scratch,
        );
        self.steps += 1;
        self.time = if dt == self.h { self.steps as f64 * self.h } else { self.time + dt };
        ok
    }
}

/// Set predicate built from distance thresholds, with a signed level
/// function that is `≤ 0` exactly on the set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// `dist(x, geometry) ≤ radius`.
    Within { geometry: Geometry, radius: f64 },
    /// `dist(x, geometry) ≥ radius`.
    Beyond { geometry: Geometry, radius: f64 },
    Any(Vec<Target>),
}

impl Target {
    pub fn within(geometry: Geometry, radius: f64) -> Self {
        Target::Within { geometry, radius }
    }

    pub fn beyond(geometry: Geometry, radius: f64) -> Self {
        Target::Beyond { geometry, radius }
    }

    /// `|x| ≥ radius`.
    pub fn norm_at_least(dim: usize, radius: f64) -> Self {
        Target::Beyond { geometry: Geometry::Point(vec![0.0; dim]), radius }
    }

    pub fn level(&self, x: &[f64]) -> f64 {
        match self {
            Target::Within { geometry, radius } => geometry.distance(x) - radius,
            Target::Beyond { geometry, radius } => radius - geometry.distance(x),
            Target::Any(parts) => parts.iter().map(|p| p.level(x)).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.level(x) <= 0.0
    }

    /// Fraction `θ ∈ [0, 1]` along `a → b` where the level first reaches zero,
    /// assuming `level(a) > 0 ≥ level(b)`.
    pub fn crossing(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut p = vec![0.0; a.len()];
        let mut at = |t: f64| {
            for i in 0..a.len() {
                p[i] = a[i] + t * (b[i] - a[i]);
            }
            self.level(&p)
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if at(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        hi
    }
}

pub(crate) fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(u, v)| u + t * (v - u)).collect()
}

/// Runs replica 0 of `cfg`.
pub fn simulate(
    sys: &SystemSpec,
    x0: &[f64],
    cfg: &SimConfig,
    stop: Option<&Target>,
) -> Result<Trajectory> {
    simulate_replica(sys, x0, cfg, stop, 0)
}

/// Integrates until the horizon, the stop target or a blow-up.
pub fn simulate_replica(
    sys: &SystemSpec,
    x0: &[f64],
    cfg: &SimConfig,
    stop: Option<&Target>,
    replica: u64,
) -> Result<Trajectory> {
    if cfg.horizon.is_infinite() && stop.is_none() {
        return Err(Error::InvalidArgument("an unbounded horizon needs a stop target".into()));
    }
    let mut st = Stepper::new(sys, x0, cfg, replica)?;
    let mut times = vec![0.0];
    let mut states = vec![x0.to_vec()];
    if stop.is_some_and(|s| s.contains(x0)) {
        return Ok(Trajectory { times, states, terminal_reason: TerminalReason::HitSet });
    }
    let total = if cfg.horizon.is_finite() { cfg.step_count() } else { u64::MAX };
    let reason = loop {
        if st.steps() == total {
            break TerminalReason::Horizon;
        }
        let ok = if st.steps() + 1 == total && cfg.horizon.is_finite() {
            let dt = cfg.horizon - st.steps() as f64 * cfg.h;
            st.advance_by(dt.min(cfg.h))
        } else {
            st.advance()
        };
        if !ok {
            break TerminalReason::BlowUp;
        }
        if stop.is_some_and(|s| s.contains(st.state())) {
            break TerminalReason::HitSet;
        }
        if st.steps() % cfg.thinning as u64 == 0 && st.steps() != total {
            times.push(st.time());
            states.push(st.state().to_vec());
        }
    };
    if times.last() != Some(&st.time()) {
        times.push(st.time());
        states.push(st.state().to_vec());
    }
    Ok(Trajectory { times, states, terminal_reason: reason })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Hit {
    Hit { time: f64, point: Vec<f64>, step: u64 },
    NoHit { time: f64, blow_up: bool },
}

impl Hit {
    pub fn point(&self) -> Option<&[f64]> {
        match self {
            Hit::Hit { point, .. } => Some(point),
            Hit::NoHit { .. } => None,
        }
    }

    pub fn time(&self) -> f64 {
        match self {
            Hit::Hit { time, .. } | Hit::NoHit { time, .. } => *time,
        }
    }
}

/// First entry of replica 0 into `target`, interpolated linearly inside the
/// crossing step.
pub fn first_hitting(sys: &SystemSpec, x0: &[f64], cfg: &SimConfig, target: &Target) -> Result<Hit> {
    first_hitting_replica(sys, x0, cfg, target, 0)
}

pub fn first_hitting_replica(
    sys: &SystemSpec,
    x0: &[f64],
    cfg: &SimConfig,
    target: &Target,
    replica: u64,
) -> Result<Hit> {
    let mut st = Stepper::new(sys, x0, cfg, replica)?;
    if target.contains(x0) {
        return Ok(Hit::Hit { time: 0.0, point: x0.to_vec(), step: 0 });
    }
    let total = if cfg.horizon.is_finite() { cfg.step_count() } else { u64::MAX };
    let mut prev = x0.to_vec();
    while st.steps() < total {
        let t0 = st.time();
        let ok = if st.steps() + 1 == total && cfg.horizon.is_finite() {
            st.advance_by((cfg.horizon - t0).min(cfg.h))
        } else {
            st.advance()
        };
        if !ok {
            return Ok(Hit::NoHit { time: st.time(), blow_up: true });
        }
        if target.contains(st.state()) {
            let theta = target.crossing(&prev, st.state());
            return Ok(Hit::Hit {
                time: t0 + theta * (st.time() - t0),
                point: lerp(&prev, st.state(), theta),
                step: st.steps(),
            });
        }
        prev.copy_from_slice(st.state());
    }
    Ok(Hit::NoHit { time: st.time(), blow_up: false })
}

/// Associative, commutative summary of an ensemble.
pub trait Reducer: Sync {
    type Acc: Send;
    fn empty(&self) -> Self::Acc;
    fn observe(&self, acc: &mut Self::Acc, replica: u64, traj: &Trajectory);
    fn merge(&self, a: Self::Acc, b: Self::Acc) -> Self::Acc;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary<A> {
    pub replicas: u64,
    pub blow_ups: u64,
    pub value: A,
}

/// Runs replicas `0..n` in parallel and folds their summaries in replica order.
pub fn run_ensemble<R: Reducer>(
    sys: &SystemSpec,
    x0: &[f64],
    cfg: &SimConfig,
    n: u64,
    reducer: &R,
) -> Result<EnsembleSummary<R::Acc>> {
    cfg.validate()?;
    let parts: Vec<Result<(bool, R::Acc)>> = (0..n)
        .into_par_iter()
        .map(|r| {
            let traj = simulate_replica(sys, x0, cfg, None, r)?;
            let mut acc = reducer.empty();
            reducer.observe(&mut acc, r, &traj);
            Ok((traj.terminal_reason == TerminalReason::BlowUp, acc))
        })
        .collect();
    let mut blow_ups = 0;
    let mut value = reducer.empty();
    for p in parts {
        let (blown, acc) = p?;
        blow_ups += blown as u64;
        value = reducer.merge(value, acc);
    }
    Ok(EnsembleSummary { replicas: n, blow_ups, value })
}

/// Terminal states indexed by replica.
#[derive(Clone, Copy, Debug, Default)]
pub struct TerminalStates;

impl Reducer for TerminalStates {
    type Acc = Vec<(u64, Vec<f64>)>;

    fn empty(&self) -> Self::Acc {
        Vec::new()
    }

    fn observe(&self, acc: &mut Self::Acc, replica: u64, traj: &Trajectory) {
        acc.push((replica, traj.terminal().to_vec()));
    }

    fn merge(&self, mut a: Self::Acc, b: Self::Acc) -> Self::Acc {
        a.extend(b);
        a.sort_by_key(|(r, _)| *r);
        a
    }
}

/// Counts of terminal states per grid cell, plus the count outside the grid.
#[derive(Clone, Copy, Debug)]
pub struct TerminalHistogram(pub GridSpec);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCounts {
    pub counts: Vec<u64>,
    pub outside: u64,
}

impl Reducer for TerminalHistogram {
    type Acc = CellCounts;

    fn empty(&self) -> CellCounts {
        CellCounts { counts: vec![0; self.0.n_cells()], outside: 0 }
    }

    fn observe(&self, acc: &mut CellCounts, _replica: u64, traj: &Trajectory) {
        match self.0.cell_of(traj.terminal()) {
            Some(c) => acc.counts[c] += 1,
            None => acc.outside += 1,
        }
    }

    fn merge(&self, mut a: CellCounts, b: CellCounts) -> CellCounts {
        a.counts.iter_mut().zip(&b.counts).for_each(|(x, y)| *x += y);
        a.outside += b.outside;
        a
    }
}

/// CSV of terminal states `replica,x1,..,xd`.
pub fn write_terminal_csv<W: Write>(mut w: W, states: &[(u64, Vec<f64>)]) -> Result<()> {
    let d = states.first().map_or(0, |(_, x)| x.len());
    write!(w, "replica")?;
    for i in 1..=d {
        write!(w, ",x{i}")?;
    }
    writeln!(w)?;
    for (r, x) in states {
        write!(w, "{r}")?;
        for v in x {
            write!(w, ",{v:e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{builtin_system, BUILTIN_NAMES};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gradient() -> SystemSpec {
        builtin_system("gradient").unwrap().0
    }

    /// Classical RK4 on `ẋ = b(x)`, the reference flow for `ε = 0` runs.
    fn rk4(sys: &SystemSpec, x0: &[f64], t: f64, n: usize) -> Vec<f64> {
        let h = t / n as f64;
        let d = x0.len();
        let f = |x: &[f64]| {
            let mut o = vec![0.0; d];
            sys.drift_into(x, &mut o);
            o
        };
        let mut x = x0.to_vec();
        for _ in 0..n {
            let k1 = f(&x);
            let k2 = f(&lerp(&x, &x.iter().zip(&k1).map(|(a, b)| a + h * b).collect::<Vec<_>>(), 0.5));
            let k3 = f(&x.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect::<Vec<_>>());
            let k4 = f(&x.iter().zip(&k3).map(|(a, b)| a + h * b).collect::<Vec<_>>());
            for i in 0..d {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        x
    }

    #[test]
    fn tamed_step_examples() {
        let sys = gradient();
        let x = tamed_euler_step(&sys, &[1.0, 0.0], 0.5, 0.01, &[0.0, 0.0]).unwrap().unwrap();
        assert_eq!(x, vec![1.0, 0.0]);
        let x = tamed_euler_step(&sys, &[2.0, 0.0], 0.5, 0.01, &[0.0, 0.0]).unwrap().unwrap();
        assert_abs_diff_eq!(x[0], 2.0 - 0.06 / 1.06, epsilon = 1e-14);
        assert_abs_diff_eq!(x[0], 2.0 - 0.0566038, epsilon = 1e-7);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn deterministic_run_reaches_attractor() {
        let sys = gradient();
        let cfg = SimConfig::new(0.0, 0.01, 100.0, 1);
        let traj = simulate(&sys, &[0.5, 0.5], &cfg, None).unwrap();
        assert_eq!(traj.len(), 10_001);
        let reference = rk4(&sys, &[0.5, 0.5], 100.0, 20_000);
        assert!((reference[0] - 1.0).abs() < 1e-9 && reference[1].abs() < 1e-9);
        let end = traj.terminal();
        assert!(((end[0] - 1.0).powi(2) + end[1].powi(2)).sqrt() < 1e-3);
    }

    #[test]
    fn equilibrium_is_constant() {
        let sys = gradient();
        let cfg = SimConfig::new(0.0, 0.01, 5.0, 1).with_thinning(7);
        let traj = simulate(&sys, &[-1.0, 0.0], &cfg, None).unwrap();
        assert!(traj.states.iter().all(|s| s == &[-1.0, 0.0]));
        assert_eq!(traj.terminal_reason, TerminalReason::Horizon);
        assert_abs_diff_eq!(traj.final_time(), 5.0, epsilon = 1e-12);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn partial_final_step_lands_on_horizon() {
        let sys = gradient();
        let cfg = SimConfig::new(0.1, 0.01, 0.255, 3);
        assert_eq!(cfg.step_count(), 26);
        let traj = simulate(&sys, &[0.0, 0.0], &cfg, None).unwrap();
        assert_abs_diff_eq!(traj.final_time(), 0.255, epsilon = 1e-14);
        assert_eq!(traj.len(), 27);
    }

    #[test]
    fn thinning_keeps_terminal() {
        let sys = gradient();
        let cfg = SimConfig::new(0.1, 0.01, 1.0, 3).with_thinning(30);
        let traj = simulate(&sys, &[0.0, 0.0], &cfg, None).unwrap();
        assert_eq!(traj.len(), 5);
        let full = simulate(&sys, &[0.0, 0.0], &cfg.with_thinning(1), None).unwrap();
        assert_eq!(traj.terminal(), full.terminal());
        assert_eq!(traj.states[1], full.states[30]);
    }

    #[test]
    fn long_run_settles_in_a_well() {
        let sys = gradient();
        let cfg = SimConfig::new(0.01, 0.01, 10_000.0, 5).with_thinning(1_000_000);
        let end = simulate(&sys, &[0.0, 0.0], &cfg, None).unwrap().terminal().to_vec();
        let near = |c: f64| ((end[0] - c).powi(2) + end[1].powi(2)).sqrt() < 0.2;
        assert!(near(-1.0) || near(1.0), "{end:?}");
    }

    #[test]
    fn deterministic_flows_stay_bounded() {
        for name in BUILTIN_NAMES {
            let sys = builtin_system(name).unwrap().0;
            let stop = Target::norm_at_least(2, 10.0);
            let cfg = SimConfig::new(0.0, 0.01, 50.0, 0).with_thinning(100);
            for k in 0..16 {
                let a = k as f64 * TAU / 16.0;
                let x0 = [2.0 * a.cos(), 2.0 * a.sin()];
                let traj = simulate(&sys, &x0, &cfg, Some(&stop)).unwrap();
                assert_eq!(traj.terminal_reason, TerminalReason::Horizon, "{name} {x0:?}");
                // monotonicity is a property of the exact flow; check it on RK4
                let mut x = x0.to_vec();
                let mut j = sys.potential(&x).unwrap();
                for _ in 0..500 {
                    x = rk4(&sys, &x, 0.1, 100);
                    let next = sys.potential(&x).unwrap();
                    assert!(next <= j + 1e-9, "{name} {x0:?} {x:?} {j} {next}");
                    j = next;
                }
            }
        }
    }

    #[test]
    fn hitting_examples() {
        let (sys, sets) = builtin_system("gradient").unwrap();
        let k3 = Target::within(sets[2].geometry.clone(), 0.1);
        let cfg = SimConfig::new(0.0, 0.01, 100.0, 0);
        assert_eq!(
            first_hitting(&sys, &[1.05, 0.0], &cfg, &k3).unwrap(),
            Hit::Hit { time: 0.0, point: vec![1.05, 0.0], step: 0 }
        );
        let hit = first_hitting(&sys, &[0.5, 0.0], &cfg, &k3).unwrap();
        let p = hit.point().unwrap();
        assert!((p[0] - 0.9).abs() < 1e-3 && p[1].abs() < 1e-12, "{hit:?}");
        // ẋ = x − x³ from 0.5 reaches 0.9 at t = ½ ln(x²/(1−x²)) difference
        let t_exact = 0.5 * ((0.81f64 / 0.19).ln() - (0.25f64 / 0.75).ln());
        assert!((hit.time() - t_exact).abs() < 0.02, "{} vs {t_exact}", hit.time());
        let cfg = SimConfig::new(0.0, 0.01, 1000.0, 0);
        let miss = first_hitting(&sys, &[-0.5, 0.0], &cfg, &k3).unwrap();
        assert_eq!(miss, Hit::NoHit { time: 1000.0, blow_up: false });
    }

    #[test]
    fn blow_up_is_recorded() {
        use crate::dynamics::{Model, SystemSpec};
        use std::sync::Arc;
        #[derive(Debug)]
        struct Explosive;
        impl Model for Explosive {
            fn dim(&self) -> usize {
                1
            }
            fn drift(&self, x: &[f64], out: &mut [f64]) {
                out[0] = 1e8 * (1.0 + x[0].abs());
            }
        }
        let sys = SystemSpec::new("explosive", Arc::new(Explosive));
        let cfg = SimConfig::new(0.0, 0.1, 1e9, 0).with_thinning(1000);
        let traj = simulate(&sys, &[0.0], &cfg, None).unwrap();
        assert_eq!(traj.terminal_reason, TerminalReason::BlowUp);
        assert!(traj.terminal()[0] > BLOW_UP_NORM);
    }

    #[test]
    fn rejects_bad_config() {
        let sys = gradient();
        for cfg in [
            SimConfig::new(-0.1, 0.01, 1.0, 0),
            SimConfig::new(0.1, 0.2, 1.0, 0),
            SimConfig::new(0.1, 0.01, 0.0, 0),
            SimConfig::new(0.1, 0.01, 1.0, 0).with_thinning(0),
            SimConfig::new(0.1, 0.01, f64::INFINITY, 0),
        ] {
            assert!(simulate(&sys, &[0.0, 0.0], &cfg, None).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn noise_is_position_addressable() {
        let mut a = NoiseStream::new(9, 4, 3);
        let mut buf = [0.0; 3];
        let draws: Vec<[f64; 3]> = (0..10)
            .map(|_| {
                a.standard_normals(&mut buf);
                buf
            })
            .collect();
        let mut b = NoiseStream::new(9, 4, 3);
        b.seek(7);
        b.standard_normals(&mut buf);
        assert_eq!(buf, draws[7]);
        let mut c = NoiseStream::new(9, 5, 3);
        c.standard_normals(&mut buf);
        assert_ne!(buf, draws[0]);
    }

    #[test]
    fn normals_have_unit_moments() {
        let mut s = NoiseStream::new(1, 0, 2);
        let mut buf = [0.0; 2];
        let n = 200_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n / 2 {
            s.standard_normals(&mut buf);
            for v in buf {
                m1 += v;
                m2 += v * v;
            }
        }
        assert!((m1 / n as f64).abs() < 0.01);
        assert!((m2 / n as f64 - 1.0).abs() < 0.015);
    }

    #[test]
    fn ensemble_is_reproducible_and_matches_simulate() {
        let sys = gradient();
        let cfg = SimConfig::new(0.3, 0.01, 5.0, 42).with_thinning(100);
        let one = run_ensemble(&sys, &[0.0, 0.0], &cfg, 1, &TerminalStates).unwrap();
        let direct = simulate(&sys, &[0.0, 0.0], &cfg, None).unwrap();
        assert_eq!(one.value[0].1, direct.terminal());
        let a = run_ensemble(&sys, &[0.0, 0.0], &cfg, 20, &TerminalStates).unwrap();
        let b = run_ensemble(&sys, &[0.0, 0.0], &cfg, 20, &TerminalStates).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.blow_ups, 0);
        let r7 = simulate_replica(&sys, &[0.0, 0.0], &cfg, None, 7).unwrap();
        assert_eq!(a.value[7].1, r7.terminal());
    }

    #[test]
    fn ensemble_histogram_is_bimodal() {
        let sys = gradient();
        let grid = GridSpec::square(2.0, 40).unwrap();
        let cfg = SimConfig::new(0.01, 0.01, 100.0, 11).with_thinning(usize::MAX);
        let s = run_ensemble(&sys, &[0.0, 0.0], &cfg, 100, &TerminalHistogram(grid)).unwrap();
        let mass_near = |c: f64| -> u64 {
            grid.cells_within([c, 0.0], 0.2).iter().map(|&i| s.value.counts[i]).sum()
        };
        let (left, right) = (mass_near(-1.0), mass_near(1.0));
        assert_eq!(left + right, 100);
        assert!(left >= 25 && right >= 25, "{left} {right}");
    }

    /// The `y` coordinate of the double well is an exact OU process with
    /// stationary variance `ε²/2`.
    #[test]
    fn stationary_variance_matches_linearization() {
        let sys = gradient();
        let eps: f64 = 0.3;
        let cfg = SimConfig::new(eps, 0.005, 500.0, 2024);
        let (mut n, mut m1, mut m2) = (0u64, 0.0, 0.0);
        for replica in 0..8 {
            let mut st = Stepper::new(&sys, &[1.0, 0.0], &cfg, replica).unwrap();
            while st.time() < 500.0 - 1e-9 {
                assert!(st.advance());
                if st.time() > 10.0 {
                    let y = st.state()[1];
                    n += 1;
                    m1 += y;
                    m2 += y * y;
                }
            }
        }
        let mean = m1 / n as f64;
        let var = m2 / n as f64 - mean * mean;
        let expected = eps * eps / 2.0;
        assert!((var / expected - 1.0).abs() < 0.15, "{var} vs {expected}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn taming_bounds_displacement(x in -50.0..50.0f64, y in -50.0..50.0f64, h in 1e-4..0.1f64) {
            for name in BUILTIN_NAMES {
                let sys = builtin_system(name).unwrap().0;
                let b = crate::dynamics::eval_drift(&sys, &[x, y]).unwrap();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let next = tamed_euler_step(&sys, &[x, y], 0.0, h, &[0.0, 0.0]).unwrap().unwrap();
                let step = ((next[0] - x).powi(2) + (next[1] - y).powi(2)).sqrt();
                prop_assert!(step <= h * nb * (1.0 + 1e-12));
                prop_assert!(step < 1.0);
            }
        }

        #[test]
        fn identical_inputs_are_bit_identical(seed in any::<u64>(), eps in 0.0..1.0f64) {
            let sys = builtin_system("bernoulli").unwrap().0;
            let cfg = SimConfig::new(eps, 0.01, 2.0, seed);
            let a = simulate(&sys, &[0.3, -0.2], &cfg, None).unwrap();
            let b = simulate(&sys, &[0.3, -0.2], &cfg, None).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn interpolated_hit_lies_on_threshold(seed in any::<u64>()) {
            let (sys, sets) = builtin_system("gradient").unwrap();
            let target = Target::within(sets[2].geometry.clone(), 0.3);
            let cfg = SimConfig::new(0.5, 0.05, 200.0, seed);
            if let Hit::Hit { point, step, .. } = first_hitting(&sys, &[-1.0, 0.0], &cfg, &target).unwrap() {
                prop_assert!(step > 0);
                prop_assert!(target.level(&point).abs() < 1e-9);
            }
        }
    }
}
