//! Limited-memory BFGS with an Armijo backtracking line search.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once the Euclidean gradient norm falls to this value.
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 12, max_iters: 10_000, grad_tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f`, which writes its gradient into the second argument and
/// returns the value; `None` or a non-finite value rejects the point.
///
/// Panics if `f` rejects the starting point.
pub fn lbfgs<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> Option<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g)
        .filter(|v| v.is_finite())
        .expect("objective must be finite at the starting point");
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut dir = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha = vec![0.0; opts.memory];
    let mut failures = 0;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let gn = norm(&g);
        if gn <= opts.grad_tol {
            return LbfgsOutcome { x, value: fx, grad_norm: gn, iterations, converged: true };
        }
        iterations += 1;

        // two-loop recursion
        dir.iter_mut().zip(&g).for_each(|(d, v)| *d = -v);
        for (i, (s, y, rho)) in history.iter().enumerate().rev() {
            alpha[i] = rho * dot(s, &dir);
            dir.iter_mut().zip(y).for_each(|(d, v)| *d -= alpha[i] * v);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / gn.max(1.0),
        };
        dir.iter_mut().for_each(|d| *d *= gamma);
        for (i, (s, y, rho)) in history.iter().enumerate() {
            let beta = rho * dot(y, &dir);
            dir.iter_mut().zip(s).for_each(|(d, v)| *d += (alpha[i] - beta) * v);
        }
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir.iter_mut().zip(&g).for_each(|(d, v)| *d = -v / gn.max(1.0));
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            x_new.iter_mut().zip(&x).zip(&dir).for_each(|((xn, xo), d)| *xn = xo + step * d);
            if let Some(v) = f(&x_new, &mut g_new).filter(|v| v.is_finite()) {
                if v <= fx + 1e-4 * step * slope {
                    accepted = Some(v);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            failures += 1;
            history.clear();
            if failures >= 2 {
                break;
            }
            continue;
        };
        failures = 0;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        let decrease = fx - f_new;
        fx = f_new;
        if decrease == 0.0 && norm(&g) > opts.grad_tol {
            // no representable progress left
            failures += 1;
            if failures >= 2 {
                break;
            }
        }
    }
    let gn = norm(&g);
    LbfgsOutcome { x, value: fx, grad_norm: gn, iterations, converged: gn <= opts.grad_tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
            g[1] = 200.0 * (x[1] - x[0] * x[0]);
            Some((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        };
        let out = lbfgs(f, &[-1.2, 1.0], &LbfgsOptions::default());
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let n = 200;
        let scale: Vec<f64> = (0..n).map(|i| 10f64.powf(4.0 * i as f64 / n as f64)).collect();
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..x.len() {
                g[i] = scale[i] * (x[i] - 1.0);
                v += 0.5 * scale[i] * (x[i] - 1.0).powi(2);
            }
            Some(v)
        };
        let out = lbfgs(f, &vec![0.0; n], &LbfgsOptions { max_iters: 5000, ..Default::default() });
        assert!(out.converged);
        assert!(out.x.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rejected_region_is_avoided() {
        // minimum of (x-2)² restricted to x < 1.5 by rejection approaches the wall
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 2.0);
            (x[0] < 1.5).then(|| (x[0] - 2.0).powi(2))
        };
        let out = lbfgs(f, &[0.0], &LbfgsOptions { max_iters: 200, ..Default::default() });
        assert!(!out.converged);
        assert!(out.x[0] < 1.5 && out.x[0] > 1.4);
    }
}
