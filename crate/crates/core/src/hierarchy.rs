//! {i}-graphs over the equivalent sets, the costs `W(K_i)`, the stable
//! minimizers `I₀` and the rate function of the invariant measures.
//!
//! Indices are 0-based internally; every serialized label is 1-based.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cost::Cost;
use crate::dynamics::{AttractorSpec, LyapunovConstants, SystemSpec};
use crate::error::{Error, Result};
use crate::mam::{quasipotential_sets, MamConfig, QuasiPotentialResult};

/// Largest set count accepted by exhaustive enumeration.
pub const MAX_ENUMERATION: usize = 9;
/// Tie tolerance for `I₀` when the costs come from the minimum action method.
pub const MAM_TIE_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSource {
    Mam,
    User,
}

/// Transition costs `Ṽ(K_m, K_n)`; `values[m][n]` is the cost of `m → n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostMatrix {
    pub values: Vec<Vec<Cost>>,
    pub source: CostSource,
}

impl CostMatrix {
    pub fn new(values: Vec<Vec<Cost>>, source: CostSource) -> Result<Self> {
        let m = Self { values, source };
        m.validate()?;
        Ok(m)
    }

    pub fn from_f64(values: &[Vec<f64>], source: CostSource) -> Result<Self> {
        let rows = values
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&v| Cost::new(v).ok_or_else(|| Error::InvalidArgument(format!("invalid cost {v}"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        Self::new(rows, source)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.values.len();
        if l < 2 {
            return Err(Error::InvalidArgument(format!("cost matrix needs at least 2 sets, got {l}")));
        }
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != l {
                return Err(Error::InvalidArgument(format!("cost matrix row {} has {} entries", i + 1, row.len())));
            }
            if row[i] != Cost::ZERO {
                return Err(Error::InvalidArgument(format!("diagonal entry {} must be 0", i + 1)));
            }
            if let Some(j) = row.iter().position(|c| c.value() < 0.0) {
                return Err(Error::InvalidArgument(format!("entry ({}, {}) is negative", i + 1, j + 1)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, from: usize, to: usize) -> Cost {
        self.values[from][to]
    }

    /// Matrix with indices relabeled by `perm`: new index `perm[i]` holds old `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let l = self.len();
        let mut values = vec![vec![Cost::ZERO; l]; l];
        for i in 0..l {
            for j in 0..l {
                values[perm[i]][perm[j]] = self.values[i][j];
            }
        }
        Self { values, source: self.source }
    }
}

/// `successor[m]` is the arc `m → successor[m]`; the root has none.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IGraph {
    pub root: usize,
    pub successor: Vec<Option<usize>>,
}

impl IGraph {
    /// Arcs in ascending order of their source.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.successor.iter().enumerate().filter_map(|(m, s)| s.map(|n| (m, n)))
    }

    /// Every `m ≠ root` has exactly one arc, no self-loops, and reaches the root.
    pub fn is_valid(&self) -> bool {
        let l = self.successor.len();
        if self.root >= l || self.successor[self.root].is_some() {
            return false;
        }
        for m in 0..l {
            if m == self.root {
                continue;
            }
            let mut cur = m;
            for _ in 0..l {
                match self.successor[cur] {
                    Some(n) if n == cur || n >= l => return false,
                    Some(n) => cur = n,
                    None => break,
                }
            }
            if cur != self.root {
                return false;
            }
        }
        true
    }

    /// Arc-sum in ascending source order; `+∞` is absorbing.
    pub fn cost(&self, cm: &CostMatrix) -> Cost {
        self.arcs().map(|(m, n)| cm.get(m, n)).sum()
    }

    pub fn labeled_arcs(&self) -> Vec<(usize, usize)> {
        self.arcs().map(|(m, n)| (m + 1, n + 1)).collect()
    }
}

fn check_enumeration(l: usize, root: usize) -> Result<()> {
    if !(2..=MAX_ENUMERATION).contains(&l) {
        return Err(Error::InvalidArgument(format!(
            "enumeration supports 2 to {MAX_ENUMERATION} sets, got {l}"
        )));
    }
    if root >= l {
        return Err(Error::InvalidArgument(format!("root {} out of range", root + 1)));
    }
    Ok(())
}

/// Calls `f` on every {root}-graph over `l` nodes, in lexicographic order of
/// the successor assignment.
pub fn for_each_i_graph(l: usize, root: usize, mut f: impl FnMut(&IGraph)) -> Result<()> {
    check_enumeration(l, root)?;
    let others: Vec<usize> = (0..l).filter(|&m| m != root).collect();
    let mut g = IGraph { root, successor: vec![None; l] };
    // choice[k] indexes the targets of others[k], which are all nodes except itself
    let mut choice = vec![0usize; others.len()];
    let targets = |m: usize| (0..l).filter(move |&n| n != m);
    loop {
        for (k, &m) in others.iter().enumerate() {
            g.successor[m] = targets(m).nth(choice[k]);
        }
        if g.is_valid() {
            f(&g);
        }
        let mut k = others.len();
        loop {
            if k == 0 {
                return Ok(());
            }
            k -= 1;
            choice[k] += 1;
            if choice[k] < l - 1 {
                break;
            }
            choice[k] = 0;
        }
    }
}

pub fn enumerate_i_graphs(l: usize, root: usize) -> Result<Vec<IGraph>> {
    let mut all = Vec::new();
    for_each_i_graph(l, root, |g| all.push(g.clone()))?;
    Ok(all)
}

/// `W(K_root)` by exhaustive enumeration, with one minimizing graph
/// (the first in enumeration order).
pub fn w_cost_with_graph(cm: &CostMatrix, root: usize) -> Result<(Cost, Option<IGraph>)> {
    let mut best = (Cost::INFINITE, None);
    for_each_i_graph(cm.len(), root, |g| {
        let c = g.cost(cm);
        if c < best.0 {
            best = (c, Some(g.clone()));
        }
    })?;
    Ok(best)
}

pub fn w_cost(cm: &CostMatrix, root: usize) -> Result<Cost> {
    Ok(w_cost_with_graph(cm, root)?.0)
}

#[derive(Clone, Copy, Debug)]
struct Edge {
    from: usize,
    to: usize,
    weight: f64,
    id: usize,
}

/// Chu–Liu/Edmonds minimum spanning out-arborescence; returns edge ids.
fn edmonds(n: usize, root: usize, edges: &[Edge]) -> Option<Vec<usize>> {
    let mut best_in: Vec<Option<Edge>> = vec![None; n];
    for e in edges {
        if e.to == root || e.from == e.to {
            continue;
        }
        let replace = match best_in[e.to] {
            None => true,
            Some(b) => e.weight < b.weight || (e.weight == b.weight && e.id < b.id),
        };
        if replace {
            best_in[e.to] = Some(*e);
        }
    }
    if (0..n).any(|v| v != root && best_in[v].is_none()) {
        return None;
    }
    // find a cycle among the chosen edges
    let mut state = vec![0u8; n]; // 0 unvisited, 1 on current walk, 2 done
    let mut cycle: Option<Vec<usize>> = None;
    for start in 0..n {
        if state[start] != 0 {
            continue;
        }
        let mut walk = Vec::new();
        let mut v = start;
        while v != root && state[v] == 0 {
            state[v] = 1;
            walk.push(v);
            v = best_in[v].expect("non-root has an in-edge").from;
        }
        if v != root && state[v] == 1 {
            let pos = walk.iter().position(|&w| w == v).expect("node is on the walk");
            cycle = Some(walk[pos..].to_vec());
        }
        walk.iter().for_each(|&w| state[w] = 2);
        if cycle.is_some() {
            break;
        }
    }
    let Some(cycle) = cycle else {
        return Some(best_in.iter().flatten().map(|e| e.id).collect());
    };

    let mut in_cycle = vec![false; n];
    cycle.iter().for_each(|&v| in_cycle[v] = true);
    // contracted labels: the cycle becomes one node `c`
    let mut label = vec![0usize; n];
    let mut next = 0;
    for v in 0..n {
        if !in_cycle[v] {
            label[v] = next;
            next += 1;
        }
    }
    let c = next;
    cycle.iter().for_each(|&v| label[v] = c);
    let mut entering: HashMap<usize, usize> = HashMap::new();
    let mut reduced = Vec::with_capacity(edges.len());
    for e in edges {
        let (fi, ti) = (in_cycle[e.from], in_cycle[e.to]);
        if fi && ti {
            continue;
        }
        let weight = if ti {
            entering.insert(e.id, e.to);
            e.weight - best_in[e.to].expect("cycle node has an in-edge").weight
        } else {
            e.weight
        };
        reduced.push(Edge { from: label[e.from], to: label[e.to], weight, id: e.id });
    }
    let chosen = edmonds(c + 1, label[root], &reduced)?;
    let mut result = Vec::with_capacity(n - 1);
    let mut broken = None;
    for id in chosen {
        if let Some(&v) = entering.get(&id) {
            broken = Some(v);
        }
        result.push(id);
    }
    let broken = broken.expect("the contracted node has an in-edge");
    for &v in &cycle {
        if v != broken {
            result.push(best_in[v].expect("cycle node has an in-edge").id);
        }
    }
    Some(result)
}

/// Minimum {root}-graph via a minimum spanning arborescence on the reversed
/// arcs; infinite arcs are absent. Agrees exactly with [`w_cost`].
pub fn w_cost_arborescence_with_graph(cm: &CostMatrix, root: usize) -> Result<(Cost, Option<IGraph>)> {
    let l = cm.len();
    if root >= l {
        return Err(Error::InvalidArgument(format!("root {} out of range", root + 1)));
    }
    // arc m → n of the {root}-graph is edge n → m of an out-arborescence
    let mut edges = Vec::new();
    let mut arc_of = Vec::new();
    for m in 0..l {
        for n in 0..l {
            if m != n && m != root && cm.get(m, n).is_finite() {
                edges.push(Edge { from: n, to: m, weight: cm.get(m, n).value(), id: arc_of.len() });
                arc_of.push((m, n));
            }
        }
    }
    let Some(ids) = edmonds(l, root, &edges) else {
        return Ok((Cost::INFINITE, None));
    };
    let mut g = IGraph { root, successor: vec![None; l] };
    for id in ids {
        let (m, n) = arc_of[id];
        g.successor[m] = Some(n);
    }
    debug_assert!(g.is_valid());
    Ok((g.cost(cm), Some(g)))
}

pub fn w_cost_arborescence(cm: &CostMatrix, root: usize) -> Result<Cost> {
    Ok(w_cost_arborescence_with_graph(cm, root)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    /// `W(K_i)` in index order.
    pub w: Vec<Cost>,
    /// 1-based labels of the stable sets.
    pub stable: Vec<usize>,
    /// 1-based labels of `I₀`.
    pub minimizers: Vec<usize>,
    /// One minimizing {i}-graph per index as 1-based arcs; `None` when `W(K_i)` is infinite.
    pub argmin_graphs: Vec<Option<Vec<(usize, usize)>>>,
    pub tie_tolerance: f64,
    pub warnings: Vec<String>,
}

impl Hierarchy {
    pub fn min_w(&self) -> Cost {
        self.w.iter().copied().min().unwrap_or(Cost::INFINITE)
    }
}

/// Tie tolerance matching the provenance of the costs.
pub fn default_tie_tolerance(source: CostSource) -> f64 {
    match source {
        CostSource::Mam => MAM_TIE_TOLERANCE,
        CostSource::User => 0.0,
    }
}

/// Computes `W`, the stable set `I` and `I₀ = {i ∈ I : W(K_i) ≤ min_j W(K_j) + tol}`.
pub fn classify(cm: &CostMatrix, stable: &[bool], tie_tolerance: f64) -> Result<Hierarchy> {
    cm.validate()?;
    if stable.len() != cm.len() {
        return Err(Error::Dimension { expected: cm.len(), got: stable.len() });
    }
    if !stable.iter().any(|&s| s) {
        return Err(Error::Contract("at least one equivalent set must be stable".into()));
    }
    let mut w = Vec::with_capacity(cm.len());
    let mut graphs = Vec::with_capacity(cm.len());
    for i in 0..cm.len() {
        let (c, g) = w_cost_arborescence_with_graph(cm, i)?;
        w.push(c);
        graphs.push(g.map(|g| g.labeled_arcs()));
    }
    let min_all = w.iter().copied().min().expect("nonempty");
    let mut warnings = Vec::new();
    let mut minimizers: Vec<usize> = (0..cm.len())
        .filter(|&i| stable[i] && min_all.is_finite() && w[i].value() <= min_all.value() + tie_tolerance)
        .map(|i| i + 1)
        .collect();
    let unstable_min: Vec<usize> = (0..cm.len())
        .filter(|&i| !stable[i] && w[i].value() <= min_all.value() + tie_tolerance)
        .map(|i| i + 1)
        .collect();
    if !unstable_min.is_empty() {
        let msg = format!("minimum of W attained at unstable sets {unstable_min:?}");
        if cm.source == CostSource::Mam {
            warn!("{msg}");
        }
        warnings.push(msg);
    }
    if minimizers.is_empty() {
        let min_stable = (0..cm.len()).filter(|&i| stable[i]).map(|i| w[i]).min().expect("a stable set exists");
        minimizers = (0..cm.len())
            .filter(|&i| stable[i] && w[i].value() <= min_stable.value() + tie_tolerance)
            .map(|i| i + 1)
            .collect();
        warnings.push("I0 taken as the minimizers among stable sets".into());
    }
    let stable_labels = (0..cm.len()).filter(|&i| stable[i]).map(|i| i + 1).collect();
    Ok(Hierarchy { w, stable: stable_labels, minimizers, argmin_graphs: graphs, tie_tolerance, warnings })
}

/// `𝒮(x) = min_i (W(K_i) + V(K_i, x)) − min_i W(K_i)`.
pub fn rate_function(h: &Hierarchy, to_x: &[Cost]) -> Result<Cost> {
    if to_x.len() != h.w.len() {
        return Err(Error::Dimension { expected: h.w.len(), got: to_x.len() });
    }
    let min_w = h.min_w();
    if !min_w.is_finite() {
        return Err(Error::Contract("every W(K_i) is infinite".into()));
    }
    let best = h.w.iter().zip(to_x).map(|(&w, &v)| w + v).min().expect("nonempty");
    Ok(if best.is_finite() { Cost::finite((best.value() - min_w.value()).max(0.0)) } else { Cost::INFINITE })
}

/// Lower bound of `𝒮(x)` for `|x| > M`:
/// `min_{i, |y| = M} V(K_i, y) + (2ζκ/λ̄²)(|x| − M)`.
pub fn far_field_floor(boundary_min: f64, constants: &LyapunovConstants, norm: f64) -> f64 {
    boundary_min + constants.bound_factor() * constants.kappa * (norm - constants.radius).max(0.0)
}

/// Restricted costs between all ordered pairs of `sets`, avoiding the
/// remaining sets when `exclude` holds.
pub fn cost_matrix_from_mam(
    sys: &SystemSpec,
    sets: &[AttractorSpec],
    cfg: &MamConfig,
    margin: f64,
    exclude: bool,
) -> Result<(CostMatrix, Vec<Vec<Option<QuasiPotentialResult>>>)> {
    let l = sets.len();
    let mut values = vec![vec![Cost::ZERO; l]; l];
    let mut results = vec![vec![None; l]; l];
    let none: [AttractorSpec; 0] = [];
    for i in 0..l {
        for j in 0..l {
            if i == j {
                continue;
            }
            let exclusions = if exclude { sets } else { &none[..] };
            let r = quasipotential_sets(sys, &sets[i], &sets[j], exclusions, margin, cfg)?;
            values[i][j] = r.value;
            results[i][j] = Some(r);
        }
    }
    Ok((CostMatrix::new(values, CostSource::Mam)?, results))
}
