//! Discretized circle, chart atlas with a GL(d) cocycle, fiber metric and sections.
//!
//! Fiber coordinates of a global section are stored in the *node-reference*
//! chart of every node: the chart in which the node sits deepest inside its
//! arc. Neighbouring nodes with different reference charts are related by the
//! transition matrices of the overlap they share.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::scalar::{c, f, Real};

/// Tolerance for the cocycle identities, relative to the matrix scale.
pub const COCYCLE_TOL: f64 = 1e-12;

/// Uniform grid on the circle `[0, 2π)` with positive measure weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GridManifold<T: Real> {
    positions: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> GridManifold<T> {
    /// `n` uniformly spaced nodes with uniform weights `2π / n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 8 {
            return Err(Error::InvalidBundle(format!(
                "need at least 8 nodes, got {n}"
            )));
        }
        let dx = 2.0 * PI / n as f64;
        Ok(Self {
            positions: (0..n).map(|i| c(i as f64 * dx)).collect(),
            weights: vec![c(dx); n],
        })
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    /// Base dimension, fixed to 1.
    pub fn dimension(&self) -> usize {
        1
    }

    pub fn positions(&self) -> &[T] {
        &self.positions
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn spacing(&self) -> T {
        c(2.0 * PI / self.node_count() as f64)
    }

    pub fn total_measure(&self) -> T {
        self.weights.iter().fold(T::zero(), |a, &w| a + w)
    }

    /// Index of the node `offset` steps from `i`, with wrap-around.
    pub fn wrap(&self, i: usize, offset: isize) -> usize {
        let n = self.node_count() as isize;
        (((i as isize + offset) % n + n) % n) as usize
    }

    /// Nodes at flat angular distance at most `radius` grid steps from `center`.
    pub fn ball(&self, center: usize, radius: usize) -> Vec<usize> {
        let n = self.node_count();
        let r = radius.min((n - 1) / 2) as isize;
        (-r..=r).map(|o| self.wrap(center, o)).collect()
    }

    pub fn volume(&self, nodes: &[usize]) -> T {
        nodes.iter().fold(T::zero(), |a, &i| a + self.weights[i])
    }

    pub fn cast<S: Real>(&self) -> GridManifold<S> {
        GridManifold {
            positions: self.positions.iter().map(|&x| c(f(x))).collect(),
            weights: self.weights.iter().map(|&x| c(f(x))).collect(),
        }
    }
}

/// Circular arc of consecutive node indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arc {
    pub start: usize,
    pub len: usize,
}

impl Arc {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    /// Position of node `i` inside the arc, if covered.
    pub fn offset(&self, i: usize, n: usize) -> Option<usize> {
        if self.len >= n {
            return Some((i + n - self.start % n) % n);
        }
        let off = (i + n - self.start % n) % n;
        (off < self.len).then_some(off)
    }

    pub fn contains(&self, i: usize, n: usize) -> bool {
        self.offset(i, n).is_some()
    }

    pub fn covers_circle(&self, n: usize) -> bool {
        self.len >= n
    }

    /// Distance of node `i` to the nearest arc end (full arcs are all interior).
    pub fn depth(&self, i: usize, n: usize) -> Option<usize> {
        if self.covers_circle(n) {
            return self.contains(i, n).then_some(n);
        }
        self.offset(i, n).map(|o| o.min(self.len - 1 - o))
    }

    pub fn nodes(&self, n: usize) -> Vec<usize> {
        (0..self.len.min(n)).map(|k| (self.start + k) % n).collect()
    }
}

/// Transition matrices keyed by ordered chart pair, then node index.
pub type TransitionTable<T> = BTreeMap<(usize, usize), BTreeMap<usize, DMatrix<T>>>;

/// Cover of the circle by arcs plus the transition cocycle on overlaps.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartAtlas<T: Real> {
    charts: Vec<Arc>,
    transitions: TransitionTable<T>,
    reference: Vec<usize>,
    rank: usize,
    nodes: usize,
}

impl<T: Real> ChartAtlas<T> {
    /// Validates coverage, neighbour resolvability and the cocycle identities.
    pub fn new(
        nodes: usize,
        rank: usize,
        charts: Vec<Arc>,
        transitions: TransitionTable<T>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidBundle("fiber rank must be at least 1".into()));
        }
        if charts.is_empty() {
            return Err(Error::InvalidBundle("atlas has no charts".into()));
        }
        let mut reference = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let best = charts
                .iter()
                .enumerate()
                .filter_map(|(a, arc)| arc.depth(i, nodes).map(|d| (a, d)))
                .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)));
            match best {
                Some((a, _)) => reference.push(a),
                None => {
                    return Err(Error::InvalidBundle(format!(
                        "node {i} not covered by any chart"
                    )))
                }
            }
        }
        let atlas = Self {
            charts,
            transitions,
            reference,
            rank,
            nodes,
        };
        atlas.validate()?;
        Ok(atlas)
    }

    /// Single chart covering the whole circle.
    pub fn trivial(nodes: usize, rank: usize) -> Self {
        Self::new(nodes, rank, vec![Arc::new(0, nodes)], BTreeMap::new()).expect("trivial atlas")
    }

    /// Two charts overlapping on two nodes at each end; `t_a(node)` is
    /// `t_{01}` on the overlap around `n/2`, `t_b(node)` on the overlap at `0`.
    pub fn two_chart(
        nodes: usize,
        rank: usize,
        t_a: impl Fn(usize) -> DMatrix<T>,
        t_b: impl Fn(usize) -> DMatrix<T>,
    ) -> Result<Self> {
        let half = nodes / 2;
        let charts = vec![Arc::new(0, half + 2), Arc::new(half, nodes - half + 2)];
        let mut fwd = BTreeMap::new();
        let mut back = BTreeMap::new();
        for node in [half, half + 1] {
            let t = t_a(node);
            let inv = t.clone().try_inverse().ok_or_else(|| singular(node))?;
            fwd.insert(node, t);
            back.insert(node, inv);
        }
        for node in [0, 1] {
            let t = t_b(node);
            let inv = t.clone().try_inverse().ok_or_else(|| singular(node))?;
            fwd.insert(node, t);
            back.insert(node, inv);
        }
        let mut table = BTreeMap::new();
        table.insert((0, 1), fwd);
        table.insert((1, 0), back);
        Self::new(nodes, rank, charts, table)
    }

    /// Evenly spaced arcs, each extended by `overlap` nodes past the next start.
    pub fn even_arcs(nodes: usize, count: usize, overlap: usize) -> Vec<Arc> {
        if count <= 1 {
            return vec![Arc::new(0, nodes)];
        }
        (0..count)
            .map(|k| {
                let start = k * nodes / count;
                let end = (k + 1) * nodes / count;
                Arc::new(start, end - start + overlap)
            })
            .collect()
    }

    pub fn charts(&self) -> &[Arc] {
        &self.charts
    }

    pub fn transitions(&self) -> &TransitionTable<T> {
        &self.transitions
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    /// Reference chart of every node.
    pub fn reference_charts(&self) -> &[usize] {
        &self.reference
    }

    /// `t_{αβ}(x_node)`, mapping β-coordinates to α-coordinates.
    pub fn transition(&self, alpha: usize, beta: usize, node: usize) -> Option<DMatrix<T>> {
        if alpha == beta {
            return self.charts[alpha]
                .contains(node, self.nodes)
                .then(|| DMatrix::identity(self.rank, self.rank));
        }
        self.transitions
            .get(&(alpha, beta))
            .and_then(|m| m.get(&node))
            .cloned()
    }

    /// Matrix taking the fiber coordinates of node `from` (in its reference
    /// chart) into the reference chart of the adjacent node `to`.
    ///
    /// The transition is evaluated at the base node `e` of the edge `(e, e+1)`,
    /// so `transport(j, i)` is exactly the inverse of `transport(i, j)`.
    pub fn transport(&self, to: usize, from: usize) -> DMatrix<T> {
        let base = if from == (to + 1) % self.nodes {
            to
        } else {
            from
        };
        self.transition(self.reference[to], self.reference[from], base)
            .expect("validated atlas resolves neighbour transport")
    }

    /// Sign of the product of transition determinants around the loop.
    pub fn loop_determinant_sign(&self) -> i32 {
        let mut sign = 1i32;
        for i in 0..self.nodes {
            let j = (i + 1) % self.nodes;
            if self.reference[i] != self.reference[j] {
                let det = f(self.transport(i, j).determinant());
                if det < 0.0 {
                    sign = -sign;
                }
            }
        }
        sign
    }

    fn validate(&self) -> Result<()> {
        let n = self.nodes;
        let d = self.rank;
        let id = DMatrix::<T>::identity(d, d);
        let tol = |m: &DMatrix<T>| COCYCLE_TOL * (1.0 + f(m.norm()));
        for (&(a, b), table) in &self.transitions {
            if a >= self.charts.len() || b >= self.charts.len() {
                return Err(Error::InvalidBundle(format!(
                    "transition ({a},{b}) names an unknown chart"
                )));
            }
            for (&node, t) in table {
                if t.shape() != (d, d) {
                    return Err(Error::Dimension(format!(
                        "transition ({a},{b}) at node {node} is not {d}x{d}"
                    )));
                }
                if !(self.charts[a].contains(node, n) && self.charts[b].contains(node, n)) {
                    return Err(Error::InvalidBundle(format!(
                        "transition ({a},{b}) given at node {node} outside the overlap"
                    )));
                }
                if a == b {
                    let defect = f((t - &id).norm());
                    if defect > tol(t) {
                        return Err(Error::CocycleViolation {
                            identity: "t_aa = Id",
                            node,
                            defect,
                        });
                    }
                }
            }
        }
        for a in 0..self.charts.len() {
            for b in 0..self.charts.len() {
                if a == b {
                    continue;
                }
                for node in 0..n {
                    if !(self.charts[a].contains(node, n) && self.charts[b].contains(node, n)) {
                        continue;
                    }
                    let tab = self.transition(a, b, node).ok_or_else(|| {
                        Error::InvalidBundle(format!("missing transition ({a},{b}) at node {node}"))
                    })?;
                    let tba = self.transition(b, a, node).ok_or_else(|| {
                        Error::InvalidBundle(format!("missing transition ({b},{a}) at node {node}"))
                    })?;
                    let prod = &tab * &tba;
                    let defect = f((&prod - &id).norm());
                    if defect > tol(&prod) {
                        return Err(Error::CocycleViolation {
                            identity: "t_ab t_ba = Id",
                            node,
                            defect,
                        });
                    }
                    for g in 0..self.charts.len() {
                        if g == a || g == b || !self.charts[g].contains(node, n) {
                            continue;
                        }
                        let tag = self.transition(a, g, node).ok_or_else(|| {
                            Error::InvalidBundle(format!(
                                "missing transition ({a},{g}) at node {node}"
                            ))
                        })?;
                        let tgb = self.transition(g, b, node).ok_or_else(|| {
                            Error::InvalidBundle(format!(
                                "missing transition ({g},{b}) at node {node}"
                            ))
                        })?;
                        let triple = &tag * &tgb * &tba;
                        let defect = f((&triple - &id).norm());
                        if defect > tol(&triple) {
                            return Err(Error::CocycleViolation {
                                identity: "t_ag t_gb t_ba = Id",
                                node,
                                defect,
                            });
                        }
                    }
                }
            }
        }
        for i in 0..n {
            for j in [(i + 1) % n, (i + n - 1) % n] {
                let (ri, rj) = (self.reference[i], self.reference[j]);
                if ri != rj && !(self.charts[ri].contains(j, n) && self.charts[rj].contains(i, n)) {
                    return Err(Error::InvalidBundle(format!(
                        "adjacent nodes {i} and {j} share no chart overlap"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Conjugates every transition by the pointwise gauge `g(x)`.
    pub fn gauge_transform(&self, g: &[DMatrix<T>]) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (&key, per_node) in &self.transitions {
            let mut out = BTreeMap::new();
            for (&node, t) in per_node {
                let gi = g[node]
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| singular(node))?;
                out.insert(node, gi * t * &g[node]);
            }
            table.insert(key, out);
        }
        Self::new(self.nodes, self.rank, self.charts.clone(), table)
    }
}

fn singular(node: usize) -> Error {
    Error::InvalidBundle(format!("singular matrix at node {node}"))
}

/// Per-node SPD fiber metric in the node-reference chart.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberMetric<T: Real> {
    values: Vec<DMatrix<T>>,
}

impl<T: Real> FiberMetric<T> {
    pub fn new(values: Vec<DMatrix<T>>) -> Result<Self> {
        for (node, h) in values.iter().enumerate() {
            let asym = f((h - h.transpose()).norm());
            if asym > 1e-12 * (1.0 + f(h.norm())) {
                return Err(Error::NonPositiveMetric {
                    node,
                    min_eig: f64::NAN,
                });
            }
            let (vals, _) = sym_eigen(h);
            let min_eig = f(vals[0]);
            if min_eig <= 0.0 {
                return Err(Error::NonPositiveMetric { node, min_eig });
            }
        }
        Ok(Self { values })
    }

    pub fn constant(nodes: usize, h: DMatrix<T>) -> Result<Self> {
        Self::new(vec![h; nodes])
    }

    pub fn at(&self, node: usize) -> &DMatrix<T> {
        &self.values[node]
    }

    pub fn values(&self) -> &[DMatrix<T>] {
        &self.values
    }

    /// Largest absolute discrete second difference of the metric entries.
    pub fn second_difference_bound(&self) -> T {
        let n = self.values.len();
        let mut best = T::zero();
        for i in 0..n {
            let dd = &self.values[(i + 1) % n] - &self.values[i] * c::<T>(2.0)
                + &self.values[(i + n - 1) % n];
            let m = dd.amax();
            if m > best {
                best = m;
            }
        }
        best
    }
}

/// Coordinates a section is stored in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Every node in its reference chart.
    NodeReference,
    /// All stored nodes in one chart.
    Chart(usize),
}

/// Section values on a set of nodes: column `k` is the fiber vector at `nodes[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Section<T: Real> {
    pub frame: Frame,
    pub nodes: Vec<usize>,
    pub values: DMatrix<T>,
}

impl<T: Real> Section<T> {
    /// Global section in node-reference coordinates from a `d × N` matrix.
    pub fn global(values: DMatrix<T>) -> Self {
        let nodes = (0..values.ncols()).collect();
        Self {
            frame: Frame::NodeReference,
            nodes,
            values,
        }
    }

    pub fn zero(rank: usize, nodes: usize) -> Self {
        Self::global(DMatrix::zeros(rank, nodes))
    }

    /// Same fiber vector (in node-reference coordinates) at every node.
    pub fn constant(nodes: usize, v: &DVector<T>) -> Self {
        let mut m = DMatrix::zeros(v.len(), nodes);
        for j in 0..nodes {
            m.set_column(j, v);
        }
        Self::global(m)
    }

    /// Node-major flattening (`N·d` entries) of a global section.
    pub fn to_flat(&self) -> DVector<T> {
        DVector::from_iterator(self.values.len(), self.values.iter().copied())
    }

    pub fn from_flat(flat: &DVector<T>, rank: usize) -> Self {
        let nodes = flat.len() / rank;
        Self::global(DMatrix::from_column_slice(rank, nodes, flat.as_slice()))
    }
}

/// Manifold, atlas and fiber metric together.
#[derive(Debug, Clone, PartialEq)]
pub struct GridBundle<T: Real> {
    pub manifold: GridManifold<T>,
    pub atlas: ChartAtlas<T>,
    pub metric: FiberMetric<T>,
}

impl<T: Real> GridBundle<T> {
    pub fn new(
        manifold: GridManifold<T>,
        atlas: ChartAtlas<T>,
        metric: FiberMetric<T>,
    ) -> Result<Self> {
        if atlas.node_count() != manifold.node_count()
            || metric.values().len() != manifold.node_count()
        {
            return Err(Error::Dimension(
                "manifold, atlas and metric disagree on node count".into(),
            ));
        }
        if metric.values().iter().any(|h| h.nrows() != atlas.rank()) {
            return Err(Error::Dimension(
                "metric blocks do not match the fiber rank".into(),
            ));
        }
        Ok(Self {
            manifold,
            atlas,
            metric,
        })
    }

    pub fn rank(&self) -> usize {
        self.atlas.rank()
    }

    pub fn node_count(&self) -> usize {
        self.manifold.node_count()
    }

    pub fn dim(&self) -> usize {
        self.rank() * self.node_count()
    }

    /// Block-diagonal `w_i h(x_i)` realizing the L² inner product on flat sections.
    pub fn mass_matrix(&self) -> DMatrix<T> {
        let d = self.rank();
        let n = self.node_count();
        let mut m = DMatrix::zeros(n * d, n * d);
        for i in 0..n {
            let block = self.metric.at(i) * self.manifold.weights()[i];
            m.view_mut((i * d, i * d), (d, d)).copy_from(&block);
        }
        m
    }

    /// Metric at `node` expressed in `chart`: `t^T h t` with `t = t_{ref,chart}`.
    pub fn metric_in_chart(&self, node: usize, chart: usize) -> Option<DMatrix<T>> {
        let r = self.atlas.reference_charts()[node];
        let t = self.atlas.transition(r, chart, node)?;
        Some(t.transpose() * self.metric.at(node) * t)
    }

    /// Re-expresses a section in `frame`; fails if a node is not covered.
    pub fn convert(&self, s: &Section<T>, frame: Frame) -> Result<Section<T>> {
        let refs = self.atlas.reference_charts();
        let mut out = s.values.clone();
        for (k, &node) in s.nodes.iter().enumerate() {
            let from = match s.frame {
                Frame::NodeReference => refs[node],
                Frame::Chart(a) => a,
            };
            let to = match frame {
                Frame::NodeReference => refs[node],
                Frame::Chart(a) => a,
            };
            let t = self.atlas.transition(to, from, node).ok_or_else(|| {
                Error::ChartMismatch(format!("node {node} not in charts {from} and {to}"))
            })?;
            out.set_column(k, &(t * s.values.column(k)));
        }
        Ok(Section {
            frame,
            nodes: s.nodes.clone(),
            values: out,
        })
    }

    /// `⟨φ, ψ⟩ = Σ_i w_i φ(x_i)^T h(x_i) ψ(x_i)` over the nodes both sections carry.
    pub fn inner_product(&self, phi: &Section<T>, psi: &Section<T>) -> Result<T> {
        if phi.values.nrows() != self.rank() || psi.values.nrows() != self.rank() {
            return Err(Error::ChartMismatch(
                "fiber rank differs from the bundle".into(),
            ));
        }
        let a = self.convert(phi, Frame::NodeReference)?;
        let b = self.convert(psi, Frame::NodeReference)?;
        let mut lookup = vec![None; self.node_count()];
        for (k, &node) in b.nodes.iter().enumerate() {
            lookup[node] = Some(k);
        }
        let w = self.manifold.weights();
        let mut acc = T::zero();
        for (k, &node) in a.nodes.iter().enumerate() {
            if let Some(kb) = lookup[node] {
                let hv = self.metric.at(node) * b.values.column(kb);
                acc += a.values.column(k).dot(&hv) * w[node];
            }
        }
        Ok(acc)
    }

    /// Same inner product evaluated with chart-`chart` coordinates and metric.
    pub fn inner_product_in_chart(
        &self,
        phi: &Section<T>,
        psi: &Section<T>,
        chart: usize,
    ) -> Result<T> {
        let a = self.convert(phi, Frame::Chart(chart))?;
        let b = self.convert(psi, Frame::Chart(chart))?;
        if a.nodes != b.nodes {
            return Err(Error::ChartMismatch(
                "sections carry different node sets".into(),
            ));
        }
        let w = self.manifold.weights();
        let mut acc = T::zero();
        for (k, &node) in a.nodes.iter().enumerate() {
            let h = self
                .metric_in_chart(node, chart)
                .ok_or_else(|| Error::ChartMismatch(format!("node {node}")))?;
            acc += a.values.column(k).dot(&(h * b.values.column(k))) * w[node];
        }
        Ok(acc)
    }

    /// Discrete bundle-class invariant over the circle.
    pub fn class_invariant(&self) -> i32 {
        self.atlas.loop_determinant_sign()
    }

    /// Bundle seen through the fiberwise change of frame `u = g(x) ũ`.
    pub fn gauge_transform(&self, g: &[DMatrix<T>]) -> Result<Self> {
        let atlas = self.atlas.gauge_transform(g)?;
        let metric = FiberMetric::new(
            self.metric
                .values()
                .iter()
                .zip(g)
                .map(|(h, gi)| {
                    let m = gi.transpose() * h * gi;
                    (&m + m.transpose()) * c::<T>(0.5)
                })
                .collect(),
        )?;
        Self::new(self.manifold.clone(), atlas, metric)
    }

    /// Applies `ũ_i = g_i^{-1} u_i` to a global node-reference section.
    pub fn gauge_section(g: &[DMatrix<T>], s: &Section<T>) -> Result<Section<T>> {
        let mut out = s.values.clone();
        for (k, &node) in s.nodes.iter().enumerate() {
            let gi = g[node]
                .clone()
                .try_inverse()
                .ok_or_else(|| singular(node))?;
            out.set_column(k, &(gi * s.values.column(k)));
        }
        Ok(Section {
            frame: s.frame,
            nodes: s.nodes.clone(),
            values: out,
        })
    }
}

/// Rotation by `theta` (rank 2) or `±1`-scaled identity otherwise.
pub fn rotation<T: Real>(theta: T) -> DMatrix<T> {
    DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
}
