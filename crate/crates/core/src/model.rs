//! Graph layout, hypotheses, detectability patterns and the linear
//! configuration score.
//!
//! A configuration is scored as
//!
//! ```text
//! F(z) = sum_i w_i * sigma(raw_i)  +  sum_{i<j} w_ij . [psi_sp, psi_sc]  +  b(pattern)
//! ```
//!
//! where only switched-on nodes contribute unary terms and only edges with
//! both endpoints on contribute pairwise terms. The parameter vector is laid
//! out as `[unary (K) | pairwise (10 per edge, lexicographic i<j) | bias (2^K - 1)]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Length of the per-edge pairwise feature: 4 spatial + 6 scale entries.
pub const PAIRWISE_DIM: usize = 10;
pub const DEFAULT_SIGMOID_SLOPE: f64 = 1.5;
/// Masks are `u32` and the bias table has `2^K - 1` entries, so keep K small.
pub const MAX_NODES: usize = 16;

/// Ordered node names of the fully connected graph. Node 0 is the holistic
/// object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct GraphSpec {
    node_names: Vec<String>,
}

impl GraphSpec {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let node_names: Vec<String> = names.into_iter().map(Into::into).collect();
        if node_names.is_empty() {
            return Err(Error::InvalidGraph("graph needs at least one node".into()));
        }
        if node_names.len() > MAX_NODES {
            return Err(Error::InvalidGraph(format!(
                "{} nodes exceeds the limit of {MAX_NODES}",
                node_names.len()
            )));
        }
        for (i, n) in node_names.iter().enumerate() {
            if node_names[..i].contains(n) {
                return Err(Error::InvalidGraph(format!("duplicate node name {n:?}")));
            }
        }
        Ok(GraphSpec { node_names })
    }

    /// Holistic object plus head, torso and legs.
    pub fn animal() -> Self {
        GraphSpec::new(["holistic", "head", "torso", "legs"]).expect("static graph")
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.node_names.len()
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn node_name(&self, node: usize) -> &str {
        &self.node_names[node]
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.node_names.iter().position(|n| n == name)
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        let k = self.num_nodes();
        k * (k - 1) / 2
    }

    /// Edges `(i, j)` with `i < j` in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> {
        let k = self.num_nodes();
        (0..k).flat_map(move |i| (i + 1..k).map(move |j| (i, j)))
    }

    /// Position of edge `(i, j)`, `i < j`, in lexicographic order.
    pub fn edge_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.num_nodes());
        let k = self.num_nodes();
        i * (2 * k - i - 1) / 2 + (j - i - 1)
    }

    #[inline]
    pub fn num_patterns(&self) -> usize {
        (1usize << self.num_nodes()) - 1
    }

    /// Total parameter dimension `K + 10 K(K-1)/2 + 2^K - 1`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.num_nodes() + PAIRWISE_DIM * self.num_edges() + self.num_patterns()
    }

    #[inline]
    pub fn pairwise_offset(&self, edge: usize) -> usize {
        self.num_nodes() + PAIRWISE_DIM * edge
    }

    #[inline]
    pub fn bias_offset(&self) -> usize {
        self.num_nodes() + PAIRWISE_DIM * self.num_edges()
    }

    /// Every non-empty pattern, in ascending mask order.
    pub fn patterns(&self) -> impl Iterator<Item = DetectabilityPattern> {
        (1..=self.num_patterns() as u32).map(DetectabilityPattern)
    }
}

impl TryFrom<Vec<String>> for GraphSpec {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        GraphSpec::new(v)
    }
}

impl From<GraphSpec> for Vec<String> {
    fn from(g: GraphSpec) -> Self {
        g.node_names
    }
}

/// A scored candidate box for one node, produced by an external detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: u64,
    pub node: usize,
    pub bbox: BBox,
    pub raw_score: f64,
}

/// Per-node hypothesis lists for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HypothesisStore {
    per_node: Vec<Vec<Hypothesis>>,
}

impl HypothesisStore {
    pub fn empty(num_nodes: usize) -> Self {
        HypothesisStore {
            per_node: vec![Vec::new(); num_nodes],
        }
    }

    /// Groups hypotheses by node, keeping their input order. Rejects node
    /// indices out of range, invalid boxes, non-finite scores and ids
    /// repeated within one node.
    pub fn from_hypotheses(num_nodes: usize, hyps: impl IntoIterator<Item = Hypothesis>) -> Result<Self> {
        let mut store = HypothesisStore::empty(num_nodes);
        for h in hyps {
            store.push(h)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, h: Hypothesis) -> Result<()> {
        let k = self.per_node.len();
        if h.node >= k {
            return Err(Error::InvalidConfiguration(format!(
                "hypothesis {} has node {} but the graph has {k} nodes",
                h.id, h.node
            )));
        }
        if !h.bbox.is_valid() {
            let BBox { x1, y1, x2, y2 } = h.bbox;
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        if !h.raw_score.is_finite() {
            return Err(Error::InvalidConfiguration(format!(
                "hypothesis {} has a non-finite score",
                h.id
            )));
        }
        if self.get(h.node, h.id).is_some() {
            return Err(Error::InvalidConfiguration(format!(
                "duplicate hypothesis id {} for node {}",
                h.id, h.node
            )));
        }
        self.per_node[h.node].push(h);
        Ok(())
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.per_node.len()
    }

    pub fn node(&self, node: usize) -> &[Hypothesis] {
        &self.per_node[node]
    }

    pub fn get(&self, node: usize, id: u64) -> Option<&Hypothesis> {
        self.per_node.get(node)?.iter().find(|h| h.id == id)
    }

    pub fn resolve(&self, node: usize, id: u64) -> Result<&Hypothesis> {
        self.get(node, id).ok_or(Error::DanglingHypothesis { node, id })
    }

    pub fn len(&self) -> usize {
        self.per_node.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Hypothesis> {
        self.per_node.iter().flatten()
    }

    /// Number of configurations over all non-empty patterns:
    /// `prod_i (n_i + 1) - 1`.
    pub fn configuration_count(&self) -> f64 {
        self.per_node.iter().map(|l| l.len() as f64 + 1.0).product::<f64>() - 1.0
    }

    pub(crate) fn node_mut(&mut self, node: usize) -> &mut Vec<Hypothesis> {
        &mut self.per_node[node]
    }
}

/// Bitmask of switched-on nodes; bit `i` is the switch of node `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetectabilityPattern(u32);

impl DetectabilityPattern {
    pub fn new(mask: u32, num_nodes: usize) -> Result<Self> {
        if mask == 0 || (num_nodes < 32 && mask >> num_nodes != 0) {
            return Err(Error::InvalidPattern { mask, nodes: num_nodes });
        }
        Ok(DetectabilityPattern(mask))
    }

    pub fn all_on(num_nodes: usize) -> Self {
        DetectabilityPattern(((1u64 << num_nodes) - 1) as u32)
    }

    pub fn holistic_only() -> Self {
        DetectabilityPattern(1)
    }

    #[inline]
    pub fn mask(self) -> u32 {
        self.0
    }

    /// Row of this pattern in the bias table.
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    #[inline]
    pub fn is_on(self, node: usize) -> bool {
        node < 32 && self.0 >> node & 1 == 1
    }

    pub fn is_holistic_on(self) -> bool {
        self.is_on(0)
    }

    pub fn count_on(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn on_nodes(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&i| self.0 >> i & 1 == 1)
    }
}

/// Bias-table index of a raw mask.
pub fn pattern_index(mask: u32) -> Result<usize> {
    if mask == 0 {
        return Err(Error::InvalidPattern { mask, nodes: 0 });
    }
    Ok(mask as usize - 1)
}

/// A detectability pattern plus one hypothesis id for each switched-on node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    pattern: DetectabilityPattern,
    assignment: Vec<Option<u64>>,
}

impl Configuration {
    /// `assignment[i]` must be `Some` exactly when node `i` is on.
    pub fn new(pattern: DetectabilityPattern, assignment: Vec<Option<u64>>) -> Result<Self> {
        if assignment.len() > MAX_NODES || pattern.mask() >> assignment.len() != 0 {
            return Err(Error::InvalidConfiguration(format!(
                "pattern {:#b} does not fit {} nodes",
                pattern.mask(),
                assignment.len()
            )));
        }
        for (i, a) in assignment.iter().enumerate() {
            if a.is_some() != pattern.is_on(i) {
                return Err(Error::InvalidConfiguration(format!(
                    "node {i} assignment disagrees with pattern {:#b}",
                    pattern.mask()
                )));
            }
        }
        Ok(Configuration { pattern, assignment })
    }

    /// Builds a configuration from `(node, id)` pairs; the pattern is the set
    /// of nodes named.
    pub fn from_pairs(num_nodes: usize, pairs: &[(usize, u64)]) -> Result<Self> {
        let mut assignment = vec![None; num_nodes];
        let mut mask = 0u32;
        for &(node, id) in pairs {
            if node >= num_nodes || assignment[node].is_some() {
                return Err(Error::InvalidConfiguration(format!("bad or repeated node {node}")));
            }
            assignment[node] = Some(id);
            mask |= 1 << node;
        }
        let pattern = DetectabilityPattern::new(mask, num_nodes)?;
        Configuration::new(pattern, assignment)
    }

    #[inline]
    pub fn pattern(&self) -> DetectabilityPattern {
        self.pattern
    }

    pub fn num_nodes(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[Option<u64>] {
        &self.assignment
    }

    pub fn hypothesis_id(&self, node: usize) -> Option<u64> {
        self.assignment.get(node).copied().flatten()
    }

    /// `(node, id)` pairs in ascending node order.
    pub fn assigned(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(n, a)| a.map(|id| (n, id)))
    }

    /// Hypothesis ids of on-nodes in node order; the tie-break key.
    pub fn ids(&self) -> Vec<u64> {
        self.assignment.iter().flatten().copied().collect()
    }

    /// Checks the configuration fits `spec` and that every id resolves.
    pub fn validate(&self, spec: &GraphSpec, hyps: &HypothesisStore) -> Result<()> {
        if self.num_nodes() != spec.num_nodes() {
            return Err(Error::InvalidConfiguration(format!(
                "configuration has {} nodes, graph has {}",
                self.num_nodes(),
                spec.num_nodes()
            )));
        }
        for (node, id) in self.assigned() {
            hyps.resolve(node, id)?;
        }
        Ok(())
    }
}

/// Model parameters `beta = [w, b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelParamsRepr", into = "ModelParamsRepr")]
pub struct ModelParams {
    pub graph: GraphSpec,
    pub sigmoid_slope: f64,
    pub unary_w: Vec<f64>,
    pub pairwise_w: Vec<[f64; PAIRWISE_DIM]>,
    pub pattern_b: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: &GraphSpec) -> Self {
        ModelParams {
            graph: spec.clone(),
            sigmoid_slope: DEFAULT_SIGMOID_SLOPE,
            unary_w: vec![0.0; spec.num_nodes()],
            pairwise_w: vec![[0.0; PAIRWISE_DIM]; spec.num_edges()],
            pattern_b: vec![0.0; spec.num_patterns()],
        }
    }

    /// Unary weights set to `w`, pairwise weights and biases zero.
    pub fn unary_only(spec: &GraphSpec, w: f64) -> Self {
        let mut p = ModelParams::zeros(spec);
        p.unary_w.fill(w);
        p
    }

    pub fn from_flat(spec: &GraphSpec, flat: &[f64], sigmoid_slope: f64) -> Result<Self> {
        if flat.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                actual: flat.len(),
            });
        }
        let k = spec.num_nodes();
        let bias = spec.bias_offset();
        let pairwise_w = flat[k..bias]
            .chunks_exact(PAIRWISE_DIM)
            .map(|c| c.try_into().expect("chunk of PAIRWISE_DIM"))
            .collect();
        Ok(ModelParams {
            graph: spec.clone(),
            sigmoid_slope,
            unary_w: flat[..k].to_vec(),
            pairwise_w,
            pattern_b: flat[bias..].to_vec(),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.unary_w);
        for w in &self.pairwise_w {
            v.extend_from_slice(w);
        }
        v.extend_from_slice(&self.pattern_b);
        v
    }

    pub fn dim(&self) -> usize {
        self.unary_w.len() + PAIRWISE_DIM * self.pairwise_w.len() + self.pattern_b.len()
    }

    pub fn bias(&self, pattern: DetectabilityPattern) -> f64 {
        self.pattern_b[pattern.index()]
    }

    /// Checks the parameter blocks have the sizes `spec` requires.
    pub fn check(&self, spec: &GraphSpec) -> Result<()> {
        let ok = self.unary_w.len() == spec.num_nodes()
            && self.pairwise_w.len() == spec.num_edges()
            && self.pattern_b.len() == spec.num_patterns();
        if !ok {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                actual: self.dim(),
            });
        }
        if self.sigmoid_slope.is_nan() || self.sigmoid_slope <= 0.0 {
            return Err(Error::InvalidConfig("sigmoid slope must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelParamsRepr {
    node_names: GraphSpec,
    sigmoid_slope: f64,
    unary_w: Vec<f64>,
    pairwise_w: BTreeMap<String, Vec<f64>>,
    pattern_b: Vec<f64>,
}

impl From<ModelParams> for ModelParamsRepr {
    fn from(p: ModelParams) -> Self {
        let pairwise_w = p
            .graph
            .edges()
            .zip(&p.pairwise_w)
            .map(|((i, j), w)| (format!("{i}-{j}"), w.to_vec()))
            .collect();
        ModelParamsRepr {
            node_names: p.graph,
            sigmoid_slope: p.sigmoid_slope,
            unary_w: p.unary_w,
            pairwise_w,
            pattern_b: p.pattern_b,
        }
    }
}

impl TryFrom<ModelParamsRepr> for ModelParams {
    type Error = Error;

    fn try_from(r: ModelParamsRepr) -> Result<Self> {
        let spec = r.node_names;
        if r.pairwise_w.len() != spec.num_edges() {
            return Err(Error::DimensionMismatch {
                expected: spec.num_edges(),
                actual: r.pairwise_w.len(),
            });
        }
        let mut pairwise_w = Vec::with_capacity(spec.num_edges());
        for (i, j) in spec.edges() {
            let key = format!("{i}-{j}");
            let w = r
                .pairwise_w
                .get(&key)
                .ok_or_else(|| Error::InvalidConfig(format!("missing pairwise weights {key}")))?;
            let w: [f64; PAIRWISE_DIM] = w.as_slice().try_into().map_err(|_| Error::DimensionMismatch {
                expected: PAIRWISE_DIM,
                actual: w.len(),
            })?;
            pairwise_w.push(w);
        }
        let params = ModelParams {
            graph: spec.clone(),
            sigmoid_slope: r.sigmoid_slope,
            unary_w: r.unary_w,
            pairwise_w,
            pattern_b: r.pattern_b,
        };
        params.check(&spec)?;
        Ok(params)
    }
}

/// Logistic renormalization `1 / (1 + exp(-slope * raw))` of a detector score.
#[inline]
pub fn normalize_unary(raw: f64, slope: f64) -> f64 {
    1.0 / (1.0 + (-slope * raw).exp())
}

/// `[dx, dy, dx^2, dy^2]`: center displacement from `a` to `b`, with each
/// axis divided by the summed box extents on that axis.
pub fn spatial_features(a: &BBox, b: &BBox) -> Result<[f64; 4]> {
    let sx = a.width() + b.width();
    let sy = a.height() + b.height();
    if sx <= 0.0 || sy <= 0.0 {
        return Err(Error::DegenerateGeometry("zero summed extent"));
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let dx = (bx - ax) / sx;
    let dy = (by - ay) / sy;
    Ok([dx, dy, dx * dx, dy * dy])
}

/// `[ds, ds_x, ds_y, ds^2, ds_x^2, ds_y^2]` with `ds` the area ratio of `a`
/// to `b` and `ds_x`, `ds_y` the per-axis extent ratios.
pub fn scale_features(a: &BBox, b: &BBox) -> Result<[f64; 6]> {
    let (bw, bh) = (b.width(), b.height());
    if bw <= 0.0 || bh <= 0.0 {
        return Err(Error::DegenerateGeometry("zero-size reference box"));
    }
    let ds = (a.width() * a.height()) / (bw * bh);
    let dsx = a.width() / bw;
    let dsy = a.height() / bh;
    Ok([ds, dsx, dsy, ds * ds, dsx * dsx, dsy * dsy])
}

/// Spatial features followed by scale features.
pub fn pairwise_features(a: &BBox, b: &BBox) -> Result<[f64; PAIRWISE_DIM]> {
    let sp = spatial_features(a, b)?;
    let sc = scale_features(a, b)?;
    let mut out = [0.0; PAIRWISE_DIM];
    out[..4].copy_from_slice(&sp);
    out[4..].copy_from_slice(&sc);
    Ok(out)
}

/// Weighted unary term of one switched-on node.
#[inline]
pub(crate) fn unary_term(w: f64, raw: f64, slope: f64) -> f64 {
    w * normalize_unary(raw, slope)
}

/// Dot product of one edge's weights with its features, summed in slot
/// order. Shared by direct scoring and the inference caches so both agree
/// bit for bit.
#[inline]
pub(crate) fn edge_term(w: &[f64; PAIRWISE_DIM], psi: &[f64; PAIRWISE_DIM]) -> f64 {
    w.iter().zip(psi).fold(0.0, |acc, (a, b)| acc + a * b)
}

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn new(dim: usize, mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) || entries.last().is_some_and(|e| e.0 >= dim) {
            return Err(Error::InvalidConfig(
                "sparse vector index out of range or repeated".into(),
            ));
        }
        Ok(SparseVector { dim, entries })
    }

    pub fn from_dense(v: &[f64]) -> Self {
        SparseVector {
            dim: v.len(),
            entries: v
                .iter()
                .enumerate()
                .filter(|(_, x)| **x != 0.0)
                .map(|(i, x)| (i, *x))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .map(|p| self.entries[p].1)
            .unwrap_or(0.0)
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| dense[i] * v).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, v)| v.is_finite())
    }
}

/// Joint feature vector of a configuration in the parameter layout.
pub fn feature_vector(
    spec: &GraphSpec,
    cfg: &Configuration,
    hyps: &HypothesisStore,
    sigmoid_slope: f64,
) -> Result<SparseVector> {
    cfg.validate(spec, hyps)?;
    let pattern = cfg.pattern();
    let mut entries = Vec::new();
    for (node, id) in cfg.assigned() {
        let h = hyps.resolve(node, id)?;
        entries.push((node, normalize_unary(h.raw_score, sigmoid_slope)));
    }
    for (e, (i, j)) in spec.edges().enumerate() {
        if !(pattern.is_on(i) && pattern.is_on(j)) {
            continue;
        }
        let bi = hyps.resolve(i, cfg.hypothesis_id(i).expect("on node"))?.bbox;
        let bj = hyps.resolve(j, cfg.hypothesis_id(j).expect("on node"))?.bbox;
        let psi = pairwise_features(&bi, &bj)?;
        let off = spec.pairwise_offset(e);
        entries.extend(psi.iter().enumerate().map(|(s, v)| (off + s, *v)));
    }
    entries.push((spec.bias_offset() + pattern.index(), 1.0));
    Ok(SparseVector {
        dim: spec.dim(),
        entries,
    })
}

/// Linear score `F(z)` of a configuration.
///
/// Terms are accumulated as unaries in node order, then edge terms in
/// lexicographic edge order, then the pattern bias.
pub fn score_configuration(
    params: &ModelParams,
    spec: &GraphSpec,
    cfg: &Configuration,
    hyps: &HypothesisStore,
) -> Result<f64> {
    params.check(spec)?;
    cfg.validate(spec, hyps)?;
    let pattern = cfg.pattern();
    let slope = params.sigmoid_slope;
    let mut total = 0.0;
    for (node, id) in cfg.assigned() {
        let h = hyps.resolve(node, id)?;
        total += unary_term(params.unary_w[node], h.raw_score, slope);
    }
    for (e, (i, j)) in spec.edges().enumerate() {
        if !(pattern.is_on(i) && pattern.is_on(j)) {
            continue;
        }
        let bi = hyps.resolve(i, cfg.hypothesis_id(i).expect("on node"))?.bbox;
        let bj = hyps.resolve(j, cfg.hypothesis_id(j).expect("on node"))?.bbox;
        total += edge_term(&params.pairwise_w[e], &pairwise_features(&bi, &bj)?);
    }
    total += params.bias(pattern);
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::from_center(cx, cy, w, h)
    }

    #[test]
    fn graph_layout_for_four_nodes() {
        let g = GraphSpec::animal();
        assert_eq!(g.num_edges(), 6);
        assert_eq!(g.num_patterns(), 15);
        assert_eq!(g.dim(), 79);
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        for (e, (i, j)) in edges.into_iter().enumerate() {
            assert_eq!(g.edge_index(i, j), e);
        }
    }

    #[test]
    fn graph_rejects_bad_names() {
        assert!(GraphSpec::new(Vec::<String>::new()).is_err());
        assert!(GraphSpec::new(["a", "b", "a"]).is_err());
        assert_eq!(GraphSpec::new(["only"]).unwrap().dim(), 2);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(normalize_unary(0.0, 1.5), 0.5);
        // 1 / (1 + e^-1.5)
        assert!((normalize_unary(1.0, 1.5) - 0.817_574_476_193_643_7).abs() < 1e-12);
        for x in [-3.0, -0.2, 0.7, 4.0] {
            assert!((normalize_unary(-x, 1.5) - (1.0 - normalize_unary(x, 1.5))).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_feature_examples() {
        let a = centered(0.0, 0.0, 2.0, 2.0);
        assert_eq!(spatial_features(&a, &a).unwrap(), [0.0; 4]);
        let b = centered(4.0, 0.0, 2.0, 2.0);
        assert_eq!(spatial_features(&a, &b).unwrap(), [1.0, 0.0, 1.0, 0.0]);
        let p = BBox::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(spatial_features(&p, &p), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn scale_feature_examples() {
        let a = centered(0.0, 0.0, 3.0, 5.0);
        assert_eq!(scale_features(&a, &a.translate(7.0, 1.0)).unwrap(), [1.0; 6]);
        let i = centered(0.0, 0.0, 4.0, 2.0);
        let j = centered(9.0, 9.0, 2.0, 2.0);
        assert_eq!(scale_features(&i, &j).unwrap(), [2.0, 2.0, 1.0, 4.0, 4.0, 1.0]);
        let flat = BBox::new(0.0, 0.0, 2.0, 0.0).unwrap();
        assert!(scale_features(&i, &flat).is_err());
    }

    #[test]
    fn pattern_indexing() {
        assert_eq!(pattern_index(0b0001).unwrap(), 0);
        assert_eq!(pattern_index(0b1111).unwrap(), 14);
        assert!(pattern_index(0).is_err());
        assert!(DetectabilityPattern::new(0, 4).is_err());
        assert!(DetectabilityPattern::new(16, 4).is_err());
        let p = DetectabilityPattern::new(0b1010, 4).unwrap();
        assert_eq!(p.on_nodes().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(DetectabilityPattern::all_on(4).mask(), 15);
    }

    #[test]
    fn configuration_invariants() {
        let p = DetectabilityPattern::new(0b0101, 4).unwrap();
        assert!(Configuration::new(p, vec![Some(1), None, Some(2), None]).is_ok());
        assert!(Configuration::new(p, vec![Some(1), Some(3), Some(2), None]).is_err());
        assert!(Configuration::new(p, vec![Some(1), None, None, None]).is_err());
        assert!(Configuration::from_pairs(4, &[]).is_err());
        let c = Configuration::from_pairs(4, &[(2, 9), (0, 4)]).unwrap();
        assert_eq!(c.pattern().mask(), 0b0101);
        assert_eq!(c.ids(), vec![4, 9]);
    }

    fn store_with(hyps: Vec<Hypothesis>, k: usize) -> HypothesisStore {
        HypothesisStore::from_hypotheses(k, hyps).unwrap()
    }

    fn hyp(id: u64, node: usize, bbox: BBox, raw: f64) -> Hypothesis {
        Hypothesis {
            id,
            node,
            bbox,
            raw_score: raw,
        }
    }

    #[test]
    fn single_node_score() {
        let spec = GraphSpec::animal();
        let store = store_with(vec![hyp(1, 0, centered(5.0, 5.0, 4.0, 4.0), 0.0)], 4);
        let mut params = ModelParams::zeros(&spec);
        params.unary_w[0] = 1.0;
        params.pattern_b[0] = -0.2;
        let cfg = Configuration::from_pairs(4, &[(0, 1)]).unwrap();
        let f = score_configuration(&params, &spec, &cfg, &store).unwrap();
        assert!((f - 0.3).abs() < 1e-15);
    }

    #[test]
    fn coincident_pair_score() {
        let spec = GraphSpec::new(["a", "b"]).unwrap();
        let bx = centered(10.0, 10.0, 6.0, 3.0);
        let store = store_with(vec![hyp(1, 0, bx, 2.0), hyp(2, 1, bx, -1.0)], 2);
        let mut params = ModelParams::zeros(&spec);
        params.pairwise_w[0] = [0.1; PAIRWISE_DIM];
        let cfg = Configuration::from_pairs(2, &[(0, 1), (1, 2)]).unwrap();
        let f = score_configuration(&params, &spec, &cfg, &store).unwrap();
        assert!((f - 0.6).abs() < 1e-12);
    }

    #[test]
    fn feature_vector_layout() {
        let spec = GraphSpec::animal();
        let store = store_with(
            vec![
                hyp(1, 0, centered(5.0, 5.0, 4.0, 4.0), 0.3),
                hyp(2, 1, centered(4.0, 3.0, 2.0, 2.0), 0.1),
            ],
            4,
        );
        let only_root = Configuration::from_pairs(4, &[(0, 1)]).unwrap();
        let phi = feature_vector(&spec, &only_root, &store, 1.5).unwrap().to_dense();
        assert_eq!(phi.len(), 79);
        assert!(phi[1..4].iter().all(|v| *v == 0.0));
        assert!(phi[4..64].iter().all(|v| *v == 0.0));
        assert_eq!(phi[64], 1.0);
        assert_eq!(phi[64..].iter().filter(|v| **v != 0.0).count(), 1);

        let pair = Configuration::from_pairs(4, &[(0, 1), (1, 2)]).unwrap();
        let phi = feature_vector(&spec, &pair, &store, 1.5).unwrap();
        assert_eq!(phi.get(64 + 2), 1.0);
        assert!(phi.get(4 + 4) > 0.0); // ds of edge (0,1)

        let dangling = Configuration::from_pairs(4, &[(0, 7)]).unwrap();
        assert_eq!(
            feature_vector(&spec, &dangling, &store, 1.5),
            Err(Error::DanglingHypothesis { node: 0, id: 7 })
        );
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let spec = GraphSpec::animal();
        let small = ModelParams::zeros(&GraphSpec::new(["a", "b"]).unwrap());
        let store = store_with(vec![hyp(1, 0, centered(5.0, 5.0, 4.0, 4.0), 0.3)], 4);
        let cfg = Configuration::from_pairs(4, &[(0, 1)]).unwrap();
        assert!(matches!(
            score_configuration(&small, &spec, &cfg, &store),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn params_flat_round_trip_and_json() {
        let spec = GraphSpec::animal();
        let flat: Vec<f64> = (0..79).map(|i| i as f64 * 0.37 - 5.0).collect();
        let p = ModelParams::from_flat(&spec, &flat, 1.5).unwrap();
        assert_eq!(p.flatten(), flat);
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["pairwise_w"]["0-1"].as_array().unwrap().len(), 10);
        assert_eq!(json["pattern_b"].as_array().unwrap().len(), 15);
        assert_eq!(json["node_names"][0], "holistic");
        let back: ModelParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, p);
        assert!(ModelParams::from_flat(&spec, &flat[1..], 1.5).is_err());
    }

    #[test]
    fn store_rejects_bad_records() {
        let b = centered(0.0, 0.0, 1.0, 1.0);
        assert!(HypothesisStore::from_hypotheses(2, vec![hyp(1, 2, b, 0.0)]).is_err());
        assert!(HypothesisStore::from_hypotheses(2, vec![hyp(1, 0, b, 0.0), hyp(1, 0, b, 1.0)]).is_err());
        assert!(HypothesisStore::from_hypotheses(2, vec![hyp(1, 0, b, f64::NAN)]).is_err());
        // same id on different nodes is fine
        assert!(HypothesisStore::from_hypotheses(2, vec![hyp(1, 0, b, 0.0), hyp(1, 1, b, 1.0)]).is_ok());
    }
}
