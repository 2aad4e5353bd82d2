//! Discrete Freidlin–Wentzell action `½∫|σ⁻¹(φ̇ − b(φ))|² dt` on uniform
//! time grids, its gradient, and the controlled skeleton equation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Diffusion, SystemSpec, FD_STEP};
use crate::error::{Error, Result};
use crate::simulate::{write_row, BLOW_UP_NORM};

/// Nodes `φ_0..φ_N` at times `kT/N`, stored contiguously.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretePath {
    duration: f64,
    dim: usize,
    nodes: Vec<f64>,
}

impl DiscretePath {
    pub fn new(duration: f64, dim: usize, nodes: Vec<f64>) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::InvalidArgument(format!("path duration must be > 0, got {duration}")));
        }
        if dim == 0 || nodes.len() % dim != 0 || nodes.len() / dim < 3 {
            return Err(Error::InvalidArgument(format!(
                "a path needs at least 3 nodes of dimension {dim}, got {} values",
                nodes.len()
            )));
        }
        if nodes.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("path nodes must be finite".into()));
        }
        Ok(Self { duration, dim, nodes })
    }

    pub fn from_nodes(duration: f64, nodes: &[Vec<f64>]) -> Result<Self> {
        let dim = nodes.first().map_or(0, Vec::len);
        if nodes.iter().any(|n| n.len() != dim) {
            return Err(Error::InvalidArgument("nodes of unequal dimension".into()));
        }
        Self::new(duration, dim, nodes.concat())
    }

    /// `N` equal segments on the straight line from `a` to `b`.
    pub fn straight(a: &[f64], b: &[f64], duration: f64, segments: usize) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Dimension { expected: a.len(), got: b.len() });
        }
        let nodes = (0..=segments)
            .flat_map(|k| {
                let t = k as f64 / segments as f64;
                a.iter().zip(b).map(move |(u, v)| u + t * (v - u))
            })
            .collect();
        Self::new(duration, a.len(), nodes)
    }

    pub fn segments(&self) -> usize {
        self.nodes.len() / self.dim - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn dt(&self) -> f64 {
        self.duration / self.segments() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.duration * k as f64 / self.segments() as f64
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn start(&self) -> &[f64] {
        self.node(0)
    }

    pub fn end(&self) -> &[f64] {
        self.node(self.segments())
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [f64] {
        &mut self.nodes
    }

    pub fn iter_nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.nodes.chunks_exact(self.dim)
    }

    pub fn with_duration(mut self, duration: f64) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::InvalidArgument(format!("path duration must be > 0, got {duration}")));
        }
        self.duration = duration;
        Ok(self)
    }

    pub fn reversed(&self) -> Self {
        let nodes = self.nodes.chunks_exact(self.dim).rev().flatten().copied().collect();
        Self { duration: self.duration, dim: self.dim, nodes }
    }

    /// Applies `f` to every node.
    pub fn map_nodes(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let nodes = self.iter_nodes().flat_map(f).collect();
        Self { duration: self.duration, dim: self.dim, nodes }
    }

    /// Piecewise-linear resampling onto `segments` equal segments.
    pub fn resampled(&self, segments: usize) -> Self {
        let n = self.segments();
        let d = self.dim;
        let mut nodes = Vec::with_capacity((segments + 1) * d);
        for k in 0..=segments {
            let s = k as f64 * n as f64 / segments as f64;
            let i = (s.floor() as usize).min(n - 1);
            let f = s - i as f64;
            let (a, b) = (self.node(i), self.node(i + 1));
            nodes.extend(a.iter().zip(b).map(|(u, v)| u + f * (v - u)));
        }
        Self { duration: self.duration, dim: d, nodes }
    }

    /// Euclidean length of the polygon through the nodes.
    pub fn length(&self) -> f64 {
        (0..self.segments())
            .map(|k| dist(self.node(k), self.node(k + 1)))
            .sum()
    }

    /// CSV rows `t,x1,..,xd` with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for i in 1..=self.dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for k in 0..=self.segments() {
            write_row(&mut w, self.time(k), self.node(k))?;
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
}

/// Quadratic form `½ rᵀ A r`, with `A = I` when `precision` is `None`.
fn half_quad(r: &[f64], precision: Option<&[f64]>) -> f64 {
    match precision {
        None => 0.5 * r.iter().map(|v| v * v).sum::<f64>(),
        Some(a) => {
            let d = r.len();
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += r[i] * a[i * d + j] * r[j];
                }
            }
            0.5 * s
        }
    }
}

fn precision_at(sys: &SystemSpec, m: &[f64], node: usize) -> Result<Option<Vec<f64>>> {
    match sys.precision(m) {
        None => Ok(None),
        Some(Ok(a)) => Ok(Some(a)),
        Some(Err(_)) => Err(Error::SingularDiffusion { node, x: m.to_vec() }),
    }
}

/// Midpoint-rule action `Σ_k Δt · ½ (v_k − b(m_k))ᵀ (σσᵀ(m_k))⁻¹ (v_k − b(m_k))`.
pub fn discrete_action(sys: &SystemSpec, path: &DiscretePath) -> Result<f64> {
    check_dim(sys, path)?;
    let d = path.dim();
    let dt = path.dt();
    let (mut m, mut r, mut b) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut total = 0.0;
    for k in 0..path.segments() {
        let (p, q) = (path.node(k), path.node(k + 1));
        for i in 0..d {
            m[i] = 0.5 * (p[i] + q[i]);
        }
        sys.drift_into(&m, &mut b);
        for i in 0..d {
            r[i] = (q[i] - p[i]) / dt - b[i];
        }
        let a = precision_at(sys, &m, k)?;
        total += dt * half_quad(&r, a.as_deref());
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::Evaluation { x: path.start().to_vec() })
    }
}

/// Action and its gradient with respect to every node (endpoints included),
/// laid out like [`DiscretePath::nodes`].
pub fn action_with_gradient(sys: &SystemSpec, path: &DiscretePath) -> Result<(f64, Vec<f64>)> {
    check_dim(sys, path)?;
    let d = path.dim();
    let dt = path.dt();
    let field = matches!(sys.diffusion(), Diffusion::Field(_));
    let mut grad = vec![0.0; path.nodes().len()];
    let (mut m, mut r, mut b) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut ar = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut total = 0.0;
    for k in 0..path.segments() {
        let (p, q) = (path.node(k), path.node(k + 1));
        for i in 0..d {
            m[i] = 0.5 * (p[i] + q[i]);
        }
        sys.drift_into(&m, &mut b);
        sys.drift_jacobian_into(&m, &mut jac);
        for i in 0..d {
            r[i] = (q[i] - p[i]) / dt - b[i];
        }
        let a = precision_at(sys, &m, k)?;
        match &a {
            None => ar.copy_from_slice(&r),
            Some(a) => {
                for i in 0..d {
                    ar[i] = (0..d).map(|j| a[i * d + j] * r[j]).sum();
                }
            }
        }
        total += dt * half_quad(&r, a.as_deref());
        // L = ½ rᵀAr: ∂L/∂v = Ar, ∂L/∂m = −J_bᵀ Ar (+ ∂A term)
        for j in 0..d {
            let mut dm = -(0..d).map(|i| jac[i * d + j] * ar[i]).sum::<f64>();
            if field {
                dm += precision_derivative(sys, &m, &r, j, k)?;
            }
            let dv = ar[j];
            grad[k * d + j] += -dv + 0.5 * dt * dm;
            grad[(k + 1) * d + j] += dv + 0.5 * dt * dm;
        }
    }
    if total.is_finite() && grad.iter().all(|g| g.is_finite()) {
        Ok((total, grad))
    } else {
        Err(Error::Evaluation { x: path.start().to_vec() })
    }
}

/// `∂/∂m_j` of `½ rᵀ A(m) r` at fixed `r`, by central differences.
fn precision_derivative(sys: &SystemSpec, m: &[f64], r: &[f64], j: usize, node: usize) -> Result<f64> {
    let mut x = m.to_vec();
    x[j] = m[j] + FD_STEP;
    let hi = half_quad(r, precision_at(sys, &x, node)?.as_deref());
    x[j] = m[j] - FD_STEP;
    let lo = half_quad(r, precision_at(sys, &x, node)?.as_deref());
    Ok((hi - lo) / (2.0 * FD_STEP))
}

/// Gradient of [`discrete_action`] with respect to the interior nodes `φ_1..φ_{N−1}`.
pub fn action_gradient(sys: &SystemSpec, path: &DiscretePath) -> Result<Vec<f64>> {
    let (_, g) = action_with_gradient(sys, path)?;
    let d = path.dim();
    Ok(g[d..g.len() - d].to_vec())
}

fn check_dim(sys: &SystemSpec, path: &DiscretePath) -> Result<()> {
    if path.dim() != sys.dim() {
        return Err(Error::Dimension { expected: sys.dim(), got: path.dim() });
    }
    Ok(())
}

/// A control `ḣ` driving the skeleton equation `φ̇ = b(φ) + σ(φ) ḣ`.
pub trait Control {
    /// Control value at time `t` inside segment `segment`, at state `x`.
    fn value(&self, segment: usize, t: f64, x: &[f64], out: &mut [f64]);
}

/// `ḣ ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoControl;

impl Control for NoControl {
    fn value(&self, _: usize, _: f64, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// One constant value per path segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseConstant(pub Vec<Vec<f64>>);

impl Control for PiecewiseConstant {
    fn value(&self, segment: usize, _: f64, _: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0[segment.min(self.0.len() - 1)]);
    }
}

/// State feedback `ḣ = f(t, x)`.
pub struct Feedback<F>(pub F);

impl<F: Fn(f64, &[f64], &mut [f64])> Control for Feedback<F> {
    fn value(&self, _: usize, t: f64, x: &[f64], out: &mut [f64]) {
        (self.0)(t, x, out)
    }
}

/// RK4 integration of `φ̇ = b(φ) + σ(φ) ḣ` on a grid of `segments` steps.
pub fn skeleton_solve(
    sys: &SystemSpec,
    x0: &[f64],
    control: &dyn Control,
    duration: f64,
    segments: usize,
) -> Result<DiscretePath> {
    let d = sys.dim();
    if x0.len() != d {
        return Err(Error::Dimension { expected: d, got: x0.len() });
    }
    if !(duration > 0.0) || segments < 2 {
        return Err(Error::InvalidArgument("skeleton needs duration > 0 and at least 2 segments".into()));
    }
    let h = duration / segments as f64;
    let rhs = |k: usize, t: f64, x: &[f64], out: &mut [f64]| {
        let mut u = vec![0.0; d];
        control.value(k, t, x, &mut u);
        sys.drift_into(x, out);
        match sys.diffusion() {
            Diffusion::Identity => out.iter_mut().zip(&u).for_each(|(o, v)| *o += v),
            _ => {
                let s = sys.diffusion_matrix(x);
                for i in 0..d {
                    out[i] += (0..d).map(|j| s[i * d + j] * u[j]).sum::<f64>();
                }
            }
        }
    };
    let mut nodes = Vec::with_capacity((segments + 1) * d);
    nodes.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut y = vec![0.0; d];
    for k in 0..segments {
        let t = k as f64 * h;
        rhs(k, t, &x, &mut k1);
        y.iter_mut().enumerate().for_each(|(i, v)| *v = x[i] + 0.5 * h * k1[i]);
        rhs(k, t + 0.5 * h, &y, &mut k2);
        y.iter_mut().enumerate().for_each(|(i, v)| *v = x[i] + 0.5 * h * k2[i]);
        rhs(k, t + 0.5 * h, &y, &mut k3);
        y.iter_mut().enumerate().for_each(|(i, v)| *v = x[i] + h * k3[i]);
        rhs(k, t + h, &y, &mut k4);
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= BLOW_UP_NORM) {
            return Err(Error::Evaluation { x });
        }
        nodes.extend_from_slice(&x);
    }
    DiscretePath::new(duration, d, nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{builtin_system, Diffusion, BUILTIN_NAMES};
    use proptest::prelude::*;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn system(name: &str) -> SystemSpec {
        builtin_system(name).unwrap().0
    }

    fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn random_path(rng: &mut ChaCha8Rng, segments: usize, half: f64) -> DiscretePath {
        let duration = uniform(rng, 0.2, 3.0);
        let nodes = (0..2 * (segments + 1)).map(|_| uniform(rng, -half, half)).collect();
        DiscretePath::new(duration, 2, nodes).unwrap()
    }

    /// Central differences of the action, node coordinate by coordinate.
    fn fd_gradient(sys: &SystemSpec, path: &DiscretePath) -> Vec<f64> {
        let mut g = Vec::new();
        for idx in path.dim()..path.nodes().len() - path.dim() {
            let step = 1e-6 * path.nodes()[idx].abs().max(1.0);
            let mut p = path.clone();
            p.nodes_mut()[idx] += step;
            let hi = discrete_action(sys, &p).unwrap();
            p.nodes_mut()[idx] -= 2.0 * step;
            let lo = discrete_action(sys, &p).unwrap();
            g.push((hi - lo) / (2.0 * step));
        }
        g
    }

    fn assert_gradients_agree(sys: &SystemSpec, path: &DiscretePath) {
        let g = action_gradient(sys, path).unwrap();
        let fd = fd_gradient(sys, path);
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
            let tol = 1e-5 * b.abs().max(1e-2 * scale).max(1e-8);
            assert!((a - b).abs() <= tol, "{} component {i}: {a} vs {b}", sys.name());
        }
    }

    #[test]
    fn flow_paths_have_zero_action() {
        for name in BUILTIN_NAMES {
            let sys = system(name);
            let path = skeleton_solve(&sys, &[0.3, 0.7], &NoControl, 2.0, 20_000).unwrap();
            let s = discrete_action(&sys, &path).unwrap();
            assert!(s <= 1e-4, "{name}: {s}");
            let g = action_gradient(&sys, &path).unwrap();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1e-3, "{name}: {norm}");
        }
    }

    #[test]
    fn straight_path_near_origin_of_nonsymmetric_system() {
        let sys = system("nonsymmetric");
        let path = DiscretePath::straight(&[0.0, 0.0], &[0.01, 0.0], 0.01, 1000).unwrap();
        let s = discrete_action(&sys, &path).unwrap();
        // on y = 0: J_x = 2x f'(x²), b = (−J_x, J_x), φ̇ = (1, 0)
        let integrand = |t: f64| {
            let u = t * t;
            let jx = 2.0 * t * (3.0 * u * u - 3.03 * u + 0.03);
            0.5 * ((1.0 + jx).powi(2) + jx * jx)
        };
        let n = 10_000;
        let h = 0.01 / n as f64;
        let simpson: f64 = (0..n)
            .map(|i| {
                let a = i as f64 * h;
                h / 6.0 * (integrand(a) + 4.0 * integrand(a + 0.5 * h) + integrand(a + h))
            })
            .sum();
        assert!((s - simpson).abs() < 1e-12, "{s} vs {simpson}");
        assert!((s - 5.03e-3).abs() <= 0.02 * 5.03e-3, "{s}");
    }

    #[test]
    fn constant_path_pays_drift_squared() {
        let sys = system("gradient");
        let x = [0.5, 0.4];
        let path = DiscretePath::from_nodes(3.0, &vec![x.to_vec(); 11]).unwrap();
        // b(0.5, 0.4) = (0.375, −0.4)
        let expected = 3.0 * 0.5 * (0.375f64.powi(2) + 0.4f64.powi(2));
        assert!((discrete_action(&sys, &path).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for name in BUILTIN_NAMES {
            let sys = system(name);
            for _ in 0..100 {
                let path = random_path(&mut rng, 12, 2.0);
                assert_gradients_agree(&sys, &path);
            }
        }
    }

    #[test]
    fn gradient_with_state_dependent_diffusion() {
        let sys = system("gradient").with_diffusion(Diffusion::Field(Arc::new(|x: &[f64], s: &mut [f64]| {
            s.copy_from_slice(&[1.0 + 0.3 * x[0].sin(), 0.1 * x[1], 0.0, 1.2 + 0.2 * x[0] * x[1]]);
        })));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_gradients_agree(&sys, &random_path(&mut rng, 8, 1.0));
        }
    }

    #[test]
    fn constant_diffusion_scales_action() {
        let sys = system("gradient");
        let scaled = sys.clone().with_diffusion(Diffusion::Constant(vec![2.0, 0.0, 0.0, 2.0]));
        let path = DiscretePath::straight(&[-1.0, 0.0], &[0.3, 0.8], 1.5, 30).unwrap();
        let a = discrete_action(&sys, &path).unwrap();
        let b = discrete_action(&scaled, &path).unwrap();
        assert!((a - 4.0 * b).abs() < 1e-12);
    }

    #[test]
    fn singular_diffusion_names_the_segment() {
        let sys = system("gradient").with_diffusion(Diffusion::Field(Arc::new(|x: &[f64], s: &mut [f64]| {
            s.copy_from_slice(&[x[0], 0.0, 0.0, 1.0]);
        })));
        // midpoint of segment 1 sits on x = 0
        let path = DiscretePath::straight(&[0.75, 0.0], &[-0.75, 0.0], 1.0, 3).unwrap();
        match discrete_action(&sys, &path) {
            Err(Error::SingularDiffusion { node, .. }) => assert_eq!(node, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gradient_is_equivariant_under_reflection() {
        let sys = system("gradient");
        let reflect = |x: &[f64]| vec![-x[0], x[1]];
        let straight = DiscretePath::straight(&[-1.0, 0.0], &[1.0, 0.0], 4.0, 40).unwrap();
        let g = action_gradient(&sys, &straight).unwrap();
        assert!(g.chunks(2).all(|c| c[1] == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut path = straight.clone();
        for k in 1..40 {
            path.node_mut(k)[1] += uniform(&mut rng, -0.2, 0.2);
            path.node_mut(k)[0] += uniform(&mut rng, -0.1, 0.1);
        }
        let g = action_gradient(&sys, &path).unwrap();
        let gm = action_gradient(&sys, &path.map_nodes(reflect)).unwrap();
        for (a, b) in g.chunks(2).zip(gm.chunks(2)) {
            assert!((a[0] + b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn refinement_is_second_order() {
        let cases = [
            (system("nonsymmetric"), [0.0, 0.0], [0.01, 0.0], 0.01),
            (system("gradient"), [-1.0, 0.0], [1.0, 0.0], 2.0),
            (system("bernoulli"), [0.2, 0.1], [1.5, -0.3], 1.0),
        ];
        for (sys, a, b, t) in cases {
            let s: Vec<f64> = [8, 16, 32]
                .iter()
                .map(|&n| discrete_action(&sys, &DiscretePath::straight(&a, &b, t, n).unwrap()).unwrap())
                .collect();
            let order = ((s[0] - s[1]) / (s[1] - s[2])).abs().log2();
            assert!(order >= 1.8, "{}: order {order}", sys.name());
        }
    }

    #[test]
    fn reversal_adds_twice_the_potential_drop() {
        let sys = system("gradient");
        let path = skeleton_solve(
            &sys,
            &[-0.9, 0.3],
            &Feedback(|t: f64, _: &[f64], u: &mut [f64]| u.copy_from_slice(&[1.5 + t.sin(), -0.4 * t])),
            2.0,
            200,
        )
        .unwrap();
        let j0 = sys.potential(path.start()).unwrap();
        let j1 = sys.potential(path.end()).unwrap();
        let gap = discrete_action(&sys, &path.reversed()).unwrap() - discrete_action(&sys, &path).unwrap();
        assert!((gap - 2.0 * (j0 - j1)).abs() < 1e-3, "{gap} vs {}", 2.0 * (j0 - j1));
    }

    #[test]
    fn skeleton_without_control_is_the_flow() {
        let sys = system("gradient");
        // ẋ = x − x³, ẏ = −y in closed form
        let (x0, y0, t): (f64, f64, f64) = (0.2, 0.8, 1.5);
        let x = x0 * t.exp() / (1.0 + x0 * x0 * ((2.0 * t).exp() - 1.0)).sqrt();
        let y = y0 * (-t).exp();
        let path = skeleton_solve(&sys, &[x0, y0], &NoControl, t, 300).unwrap();
        assert!((path.end()[0] - x).abs() < 1e-6 && (path.end()[1] - y).abs() < 1e-6);
        let eq = skeleton_solve(&sys, &[1.0, 0.0], &NoControl, 1.0, 10).unwrap();
        assert!(eq.iter_nodes().all(|n| n == [1.0, 0.0]));
    }

    #[test]
    fn reversed_flow_ascends_at_cost_of_potential_gain() {
        let sys = system("gradient");
        let control = Feedback(|_: f64, x: &[f64], u: &mut [f64]| {
            u.copy_from_slice(&[2.0 * (x[0].powi(3) - x[0]), 2.0 * x[1]]);
        });
        let path = skeleton_solve(&sys, &[-0.95, 0.05], &control, 3.0, 3000).unwrap();
        let j: Vec<f64> = path.iter_nodes().map(|n| sys.potential(n).unwrap()).collect();
        assert!(j.windows(2).all(|w| w[1] > w[0]));
        let s = discrete_action(&sys, &path).unwrap();
        let expected = 2.0 * (j[j.len() - 1] - j[0]);
        assert!((s / expected - 1.0).abs() < 0.02, "{s} vs {expected}");
    }

    #[test]
    fn duffing_action_is_point_symmetric() {
        let sys = system("duffing");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let path = random_path(&mut rng, 20, 1.5);
            let a = discrete_action(&sys, &path).unwrap();
            let b = discrete_action(&sys, &path.map_nodes(|x| x.iter().map(|v| -v).collect())).unwrap();
            assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        }
    }

    #[test]
    fn path_shape_helpers() {
        let p = DiscretePath::straight(&[0.0, 0.0], &[3.0, 4.0], 2.0, 5).unwrap();
        assert_eq!(p.segments(), 5);
        assert_eq!(p.end(), &[3.0, 4.0]);
        assert!((p.length() - 5.0).abs() < 1e-12);
        assert_eq!(p.reversed().start(), &[3.0, 4.0]);
        let r = p.resampled(10);
        assert!((r.node(3)[0] - 0.9).abs() < 1e-12);
        assert!(DiscretePath::new(1.0, 2, vec![0.0; 4]).is_err());
        assert!(DiscretePath::new(0.0, 2, vec![0.0; 6]).is_err());
        let mut out = Vec::new();
        p.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("t,x1,x2\n"));
    }

    proptest! {
        #[test]
        fn action_is_nonnegative(seed in any::<u64>(), which in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = system(BUILTIN_NAMES[which]);
            let path = random_path(&mut rng, 6, 3.0);
            prop_assert!(discrete_action(&sys, &path).unwrap() >= 0.0);
        }
    }
}
