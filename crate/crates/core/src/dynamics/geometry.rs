//! Equivalent sets `K_i` and the distance/projection machinery used for their
//! neighborhoods.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed polyline in the plane with cached cumulative arclength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Polyline {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
    index: SegmentGrid,
}

/// Uniform bucket grid over the bounding box; each cell lists the segments
/// whose bounding boxes overlap it.
#[derive(Clone, Debug, PartialEq)]
struct SegmentGrid {
    origin: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<u32>>,
}

impl SegmentGrid {
    fn build(points: &[[f64; 2]]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let segments = points.len() - 1;
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(f64::MIN_POSITIVE);
        // about one segment per occupied cell for curves of roughly uniform sampling
        let cell = (span / (segments as f64).sqrt().max(1.0)).max(span * 1e-6);
        let dims = [
            ((hi[0] - lo[0]) / cell).floor() as usize + 1,
            ((hi[1] - lo[1]) / cell).floor() as usize + 1,
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        let clamp = |v: f64, i: usize| (((v - lo[i]) / cell).floor().max(0.0) as usize).min(dims[i] - 1);
        for (k, w) in points.windows(2).enumerate() {
            let (x0, x1) = (clamp(w[0][0].min(w[1][0]), 0), clamp(w[0][0].max(w[1][0]), 0));
            let (y0, y1) = (clamp(w[0][1].min(w[1][1]), 1), clamp(w[0][1].max(w[1][1]), 1));
            for i in x0..=x1 {
                for j in y0..=y1 {
                    buckets[i * dims[1] + j].push(k as u32);
                }
            }
        }
        Self { origin: lo, cell, dims, buckets }
    }
}

impl Polyline {
    /// Builds a closed polyline. The first point must equal the last one.
    pub fn closed(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "sampled curve needs at least 4 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("sampled curve has non-finite points".into()));
        }
        let first = points[0];
        let last = points[points.len() - 1];
        if first != last {
            return Err(Error::InvalidArgument(
                "sampled curve must be closed (first point equal to last)".into(),
            ));
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for w in points.windows(2) {
            let len = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cumulative.push(cumulative.last().unwrap() + len);
        }
        let index = SegmentGrid::build(&points);
        Ok(Self { points, cumulative, index })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn segment_count(&self) -> usize {
        self.points.len() - 1
    }

    /// Longest segment; bounds the distance error against the underlying curve.
    pub fn max_segment(&self) -> f64 {
        self.cumulative
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    fn segment_nearest(&self, k: usize, x: [f64; 2]) -> ([f64; 2], f64, f64) {
        let a = self.points[k];
        let b = self.points[k + 1];
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2 > 0.0 {
            (((x[0] - a[0]) * ab[0] + (x[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let p = [a[0] + t * ab[0], a[1] + t * ab[1]];
        let d = ((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)).sqrt();
        let s = self.cumulative[k] + t * (self.cumulative[k + 1] - self.cumulative[k]);
        (p, s, d)
    }

    /// Nearest point on the polyline: (point, arclength parameter, distance).
    ///
    /// Searches square rings of grid cells outward from the query; ties go to
    /// the lowest segment index.
    pub fn nearest(&self, x: [f64; 2]) -> ([f64; 2], f64, f64) {
        let g = &self.index;
        let idx = |v: f64, i: usize| -> isize {
            (((v - g.origin[i]) / g.cell).floor() as isize).clamp(0, g.dims[i] as isize - 1)
        };
        let (ci, cj) = (idx(x[0], 0), idx(x[1], 1));
        let max_ring = g.dims[0].max(g.dims[1]) as isize;
        let mut best: Option<(usize, ([f64; 2], f64, f64))> = None;
        for r in 0..=max_ring {
            for i in (ci - r).max(0)..=(ci + r).min(g.dims[0] as isize - 1) {
                for j in (cj - r).max(0)..=(cj + r).min(g.dims[1] as isize - 1) {
                    if (i - ci).abs() != r && (j - cj).abs() != r {
                        continue;
                    }
                    for &k in &g.buckets[i as usize * g.dims[1] + j as usize] {
                        let k = k as usize;
                        let cand = self.segment_nearest(k, x);
                        let better = match &best {
                            None => true,
                            Some((bk, b)) => cand.2 < b.2 || (cand.2 == b.2 && k < *bk),
                        };
                        if better {
                            best = Some((k, cand));
                        }
                    }
                }
            }
            if let Some((_, b)) = &best {
                // every unvisited cell lies at least this far from x
                let mut bound = f64::INFINITY;
                if ci - r > 0 {
                    bound = bound.min(x[0] - (g.origin[0] + (ci - r) as f64 * g.cell));
                }
                if ci + r < g.dims[0] as isize - 1 {
                    bound = bound.min(g.origin[0] + (ci + r + 1) as f64 * g.cell - x[0]);
                }
                if cj - r > 0 {
                    bound = bound.min(x[1] - (g.origin[1] + (cj - r) as f64 * g.cell));
                }
                if cj + r < g.dims[1] as isize - 1 {
                    bound = bound.min(g.origin[1] + (cj + r + 1) as f64 * g.cell - x[1]);
                }
                if b.2 < bound {
                    break;
                }
            }
        }
        best.expect("a polyline has at least one segment").1
    }

    /// Exhaustive form of [`Polyline::nearest`].
    #[cfg(test)]
    fn nearest_exhaustive(&self, x: [f64; 2]) -> ([f64; 2], f64, f64) {
        let mut best = self.segment_nearest(0, x);
        for k in 1..self.segment_count() {
            let c = self.segment_nearest(k, x);
            if c.2 < best.2 {
                best = c;
            }
        }
        best
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let len = self.length();
        let s = s.rem_euclid(len);
        let k = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(k) => k.min(self.segment_count() - 1),
            Err(k) => (k - 1).min(self.segment_count() - 1),
        };
        let seg = self.cumulative[k + 1] - self.cumulative[k];
        let t = if seg > 0.0 { (s - self.cumulative[k]) / seg } else { 0.0 };
        (k, t)
    }

    /// Point at arclength `s` (taken modulo the total length).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let (k, t) = self.locate(s);
        let a = self.points[k];
        let b = self.points[k + 1];
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Unit tangent of the segment containing arclength `s`.
    pub fn tangent_at(&self, s: f64) -> [f64; 2] {
        let (k, _) = self.locate(s);
        let a = self.points[k];
        let b = self.points[k + 1];
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        if len > 0.0 {
            [(b[0] - a[0]) / len, (b[1] - a[1]) / len]
        } else {
            [0.0, 0.0]
        }
    }
}

impl TryFrom<Vec<[f64; 2]>> for Polyline {
    type Error = Error;
    fn try_from(points: Vec<[f64; 2]>) -> Result<Self> {
        Polyline::closed(points)
    }
}

impl From<Polyline> for Vec<[f64; 2]> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

/// Shape of an equivalent set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    Point(Vec<f64>),
    Circle { center: [f64; 2], radius: f64 },
    SampledCurve(Polyline),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl Geometry {
    pub fn circle(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("circle radius must be positive, got {radius}")));
        }
        Ok(Geometry::Circle { center, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            Geometry::Point(c) => c.len(),
            _ => 2,
        }
    }

    fn as_plane(x: &[f64]) -> [f64; 2] {
        [x[0], x[1]]
    }

    /// Euclidean distance from `x` to the set.
    pub fn distance(&self, x: &[f64]) -> f64 {
        match self {
            Geometry::Point(c) => c
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            Geometry::Circle { center, radius } => {
                let r = ((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2)).sqrt();
                (r - radius).abs()
            }
            Geometry::SampledCurve(curve) => curve.nearest(Self::as_plane(x)).2,
        }
    }

    /// Nearest point of the set to `x`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Geometry::Point(c) => c.clone(),
            Geometry::Circle { center, radius } => {
                let d = [x[0] - center[0], x[1] - center[1]];
                let r = norm(&d);
                if r == 0.0 {
                    vec![center[0] + radius, center[1]]
                } else {
                    vec![center[0] + radius * d[0] / r, center[1] + radius * d[1] / r]
                }
            }
            Geometry::SampledCurve(curve) => curve.nearest(Self::as_plane(x)).0.to_vec(),
        }
    }

    /// Number of free parameters of a point constrained to the set.
    pub fn param_dim(&self) -> usize {
        match self {
            Geometry::Point(_) => 0,
            _ => 1,
        }
    }

    /// Parameter of the projection of `x` (angle for circles, arclength for curves).
    pub fn param_of(&self, x: &[f64]) -> Option<f64> {
        match self {
            Geometry::Point(_) => None,
            Geometry::Circle { center, .. } => {
                let dx = x[0] - center[0];
                let dy = x[1] - center[1];
                Some(if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) })
            }
            Geometry::SampledCurve(curve) => Some(curve.nearest(Self::as_plane(x)).1),
        }
    }

    /// Point of the set at parameter `p`; points ignore the parameter.
    pub fn point_at(&self, p: f64) -> Vec<f64> {
        match self {
            Geometry::Point(c) => c.clone(),
            Geometry::Circle { center, radius } => {
                vec![center[0] + radius * p.cos(), center[1] + radius * p.sin()]
            }
            Geometry::SampledCurve(curve) => curve.point_at(p).to_vec(),
        }
    }

    /// Derivative of `point_at` with respect to the parameter.
    pub fn tangent_at(&self, p: f64) -> Vec<f64> {
        match self {
            Geometry::Point(c) => vec![0.0; c.len()],
            Geometry::Circle { radius, .. } => vec![-radius * p.sin(), radius * p.cos()],
            Geometry::SampledCurve(curve) => curve.tangent_at(p).to_vec(),
        }
    }

    /// Gradient of the distance function at `x` (unit vector away from the
    /// nearest point); zero on the set itself.
    pub fn distance_gradient(&self, x: &[f64], out: &mut [f64]) {
        let p = self.project(x);
        let mut d: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a - b).collect();
        let n = norm(&d);
        if n > 0.0 {
            d.iter_mut().for_each(|v| *v /= n);
        } else {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        out.copy_from_slice(&d);
    }

    /// Minimum distance between two sets, computed on dense samples of both.
    pub fn set_distance(&self, other: &Geometry) -> f64 {
        self.samples(720)
            .iter()
            .map(|p| other.distance(p))
            .fold(f64::INFINITY, f64::min)
            .min(
                other
                    .samples(720)
                    .iter()
                    .map(|p| self.distance(p))
                    .fold(f64::INFINITY, f64::min),
            )
    }

    /// Points lying on the set (`n` of them for one-dimensional sets).
    pub fn samples(&self, n: usize) -> Vec<Vec<f64>> {
        match self {
            Geometry::Point(c) => vec![c.clone()],
            Geometry::Circle { .. } => (0..n)
                .map(|k| self.point_at(std::f64::consts::TAU * k as f64 / n as f64))
                .collect(),
            Geometry::SampledCurve(curve) => curve.points()[..curve.segment_count()]
                .iter()
                .map(|p| p.to_vec())
                .collect(),
        }
    }

    /// Deterministic samples of the punctured neighborhood `(K)_δ ∖ K`.
    ///
    /// Offsets are kept at least `0.02 δ` away from the set so that strict
    /// comparisons of smooth functions are not swamped by rounding.
    pub fn ring_samples(&self, delta: f64, n: usize) -> Vec<Vec<f64>> {
        const INNER: f64 = 0.02;
        let offset = |u: f64| {
            // maps u ∈ [0,1) to a signed offset with |offset| ∈ [INNER δ, δ]
            let s = 2.0 * u - 1.0;
            s.signum() * delta * (INNER + (1.0 - INNER) * s.abs())
        };
        let candidate = |k: u64| -> Vec<f64> {
            match self {
                Geometry::Point(c) => c
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v + delta * (2.0 * halton(k, PRIMES[j % PRIMES.len()]) - 1.0))
                    .collect(),
                Geometry::Circle { center, radius } => {
                    let theta = std::f64::consts::TAU * halton(k, 2);
                    let r = (radius + offset(halton(k, 3))).max(0.0);
                    vec![center[0] + r * theta.cos(), center[1] + r * theta.sin()]
                }
                Geometry::SampledCurve(curve) => {
                    let s = curve.length() * halton(k, 2);
                    let p = curve.point_at(s);
                    let t = curve.tangent_at(s);
                    let o = offset(halton(k, 3));
                    vec![p[0] - o * t[1], p[1] + o * t[0]]
                }
            }
        };
        // offsets along a normal can land back on the set near corners or
        // self-intersections, so candidates are filtered by their true distance
        let mut out = Vec::with_capacity(n);
        let mut k = 1u64;
        while out.len() < n && k < 1000 * n as u64 + 1000 {
            let y = candidate(k);
            let d = self.distance(&y);
            if d >= 0.5 * INNER * delta && d <= delta {
                out.push(y);
            }
            k += 1;
        }
        out
    }
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Radical inverse of `k` in `base` (van der Corput / Halton coordinate).
pub fn halton(mut k: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while k > 0 {
        f /= base as f64;
        r += f * (k % base) as f64;
        k /= base;
    }
    r
}

/// An equivalent set `K_i` with its stability classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttractorSpec {
    /// 1-based index `i`.
    pub label: usize,
    pub geometry: Geometry,
    #[serde(default)]
    pub stable: Option<bool>,
}

impl AttractorSpec {
    pub fn new(label: usize, geometry: Geometry, stable: Option<bool>) -> Self {
        Self { label, geometry, stable }
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        self.geometry.distance(x)
    }
}

/// Distance from `x` to the set `K`.
pub fn distance_to_set(k: &AttractorSpec, x: &[f64]) -> f64 {
    k.geometry.distance(x)
}

/// `δ₁ = ⅛ min_{i≠j} dist(K_i, K_j)`.
pub fn delta_one(sets: &[AttractorSpec]) -> f64 {
    let mut min = f64::INFINITY;
    for (a, ka) in sets.iter().enumerate() {
        for kb in &sets[a + 1..] {
            min = min.min(ka.geometry.set_distance(&kb.geometry));
        }
    }
    min / 8.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn square() -> Polyline {
        Polyline::closed(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]).unwrap()
    }

    #[test]
    fn point_and_circle_distances() {
        let p = Geometry::Point(vec![0.0, 0.0]);
        assert_eq!(p.distance(&[3.0, 4.0]), 5.0);
        let c = Geometry::circle([0.0, 0.0], 1.0).unwrap();
        assert_eq!(c.distance(&[2.0, 0.0]), 1.0);
        let small = Geometry::circle([0.0, 0.0], 0.1).unwrap();
        assert_abs_diff_eq!(small.distance(&[0.01, 0.0]), 0.09, epsilon = 1e-15);
    }

    #[test]
    fn zero_distance_on_the_set() {
        let c = Geometry::circle([0.5, -0.25], 0.7).unwrap();
        for p in c.samples(64) {
            assert!(c.distance(&p) < 1e-12);
        }
        let p = Geometry::Point(vec![1.0, 2.0, 3.0]);
        assert_eq!(p.distance(&[1.0, 2.0, 3.0]), 0.0);
        assert!(p.distance(&[1.0, 2.0, 3.0 + 1e-9]) > 0.0);
    }

    #[test]
    fn polyline_must_be_closed() {
        assert!(Polyline::closed(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).is_err());
        assert!(Geometry::circle([0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn polyline_arclength_and_projection() {
        let sq = square();
        assert_eq!(sq.length(), 4.0);
        assert_eq!(sq.point_at(1.5), [1.0, 0.5]);
        assert_eq!(sq.point_at(5.5), [1.0, 0.5]);
        let (p, s, d) = sq.nearest([2.0, 0.5]);
        assert_eq!(p, [1.0, 0.5]);
        assert_eq!(s, 1.5);
        assert_eq!(d, 1.0);
        assert_eq!(sq.tangent_at(2.5), [-1.0, 0.0]);
    }

    #[test]
    fn parameterization_matches_projection() {
        let c = Geometry::circle([1.0, 1.0], 2.0).unwrap();
        let x = [4.0, 5.0];
        let p = c.param_of(&x).unwrap();
        let on = c.point_at(p);
        let proj = c.project(&x);
        assert_abs_diff_eq!(on[0], proj[0], epsilon = 1e-12);
        assert_abs_diff_eq!(on[1], proj[1], epsilon = 1e-12);
    }

    #[test]
    fn ring_samples_avoid_the_set_and_stay_inside_delta() {
        let sets = [
            Geometry::Point(vec![0.0, 0.0]),
            Geometry::circle([0.0, 0.0], 1.0).unwrap(),
            Geometry::SampledCurve(square()),
        ];
        for g in &sets {
            let ring = g.ring_samples(0.1, 300);
            assert_eq!(ring.len(), 300);
            for y in &ring {
                let d = g.distance(y);
                assert!(d > 0.0 && d <= 0.1 + 1e-12, "{g:?}: d = {d}");
            }
        }
    }

    #[test]
    fn delta_one_of_three_points() {
        let sets: Vec<_> = [-1.0, 0.0, 1.0]
            .iter()
            .enumerate()
            .map(|(i, &x)| AttractorSpec::new(i + 1, Geometry::Point(vec![x, 0.0]), None))
            .collect();
        assert_eq!(delta_one(&sets), 0.125);
    }

    #[test]
    fn halton_first_terms() {
        assert_eq!(halton(1, 2), 0.5);
        assert_eq!(halton(2, 2), 0.25);
        assert_eq!(halton(3, 2), 0.75);
        assert_abs_diff_eq!(halton(1, 3), 1.0 / 3.0);
    }

    #[test]
    fn geometry_serde_round_trip() {
        let g = Geometry::SampledCurve(square());
        let text = serde_json::to_string(&g).unwrap();
        let back: Geometry = serde_json::from_str(&text).unwrap();
        assert_eq!(g, back);
        let open = r#"{"sampled_curve":[[0,0],[1,0],[1,1],[0,1]]}"#;
        assert!(serde_json::from_str::<Geometry>(open).is_err());
    }

    proptest! {
        #[test]
        fn distance_is_one_lipschitz(
            ax in -3.0f64..3.0, ay in -3.0f64..3.0,
            bx in -3.0f64..3.0, by in -3.0f64..3.0,
            which in 0usize..3,
        ) {
            let g = match which {
                0 => Geometry::Point(vec![0.3, -0.2]),
                1 => Geometry::circle([0.0, 0.0], 1.0).unwrap(),
                _ => Geometry::SampledCurve(square()),
            };
            let a = [ax, ay];
            let b = [bx, by];
            let gap = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
            prop_assert!((g.distance(&a) - g.distance(&b)).abs() <= gap + 1e-12);
        }

        #[test]
        fn indexed_nearest_matches_exhaustive(x in -4.0f64..4.0, y in -4.0f64..4.0) {
            for curve in [square(), crate::dynamics::lemniscate()] {
                let fast = curve.nearest([x, y]);
                let slow = curve.nearest_exhaustive([x, y]);
                prop_assert_eq!(fast.2, slow.2);
                prop_assert_eq!(fast.0, slow.0);
            }
        }
    }
}
