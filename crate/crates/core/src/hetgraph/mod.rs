//! Heterogeneous tissue-graph assembly.
//!
//! Nodes are glomeruli (`g`), macrophages (`m`) and T-cells (`t`). The nine
//! directed edge types fall into three groups with their own construction
//! rules:
//!
//! - immune ↔ immune: 5-nearest-neighbour selection capped at 100 µm,
//!   symmetrised by union;
//! - immune ↔ glomerulus: all pairs within 277 µm, both directions;
//! - glomerulus ↔ glomerulus: all pairs within a configurable radius
//!   (default 138.6 µm), both directions.
//!
//! Every stored edge `(src, dst)` carries the raw centroid distance in
//! micrometres plus a min-max-normalised distance feature; the reverse edge
//! always exists with the same distance. Edge lists are sorted so identical
//! inputs produce identical graphs regardless of thread count.

pub mod oracle;
mod serialize;

pub use serialize::{read_nodes_csv, write_nodes_csv, NodeRow};

use crate::morphology::ScaleParams;
use crate::spatial::{Point2, SpatialIndex};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_K_IMMUNE: usize = 5;
pub const DEFAULT_EPS_IMMUNE_UM: f64 = 100.0;
pub const DEFAULT_EPS_IG_UM: f64 = 277.0;
pub const DEFAULT_EPS_GG_UM: f64 = 138.6;
pub const DEFAULT_SQUARE_SIDE_UM: f64 = 554.4;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node detection requires at least one glomerulus")]
    NoGlomeruli,
    #[error("edge {edge_type} ({src} -> {dst}) references a missing node")]
    DanglingEdge {
        edge_type: &'static str,
        src: u32,
        dst: u32,
    },
    #[error("self-loop {src} stored for edge type {edge_type}")]
    SelfLoop { edge_type: &'static str, src: u32 },
    #[error("duplicate edge {src} -> {dst} of type {edge_type}")]
    DuplicateEdge {
        edge_type: &'static str,
        src: u32,
        dst: u32,
    },
    #[error("edge {src} -> {dst} of type {edge_type} has no mirror")]
    MissingMirror {
        edge_type: &'static str,
        src: u32,
        dst: u32,
    },
    #[error("feature matrix for {node_type} has {rows} rows but {nodes} nodes exist")]
    FeatureShape {
        node_type: &'static str,
        rows: usize,
        nodes: usize,
    },
    #[error("graph file parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("node csv row {row}: {reason}")]
    BadCsvRow { row: usize, reason: String },
}

// ---------------------------------------------------------------------------
// Node and edge typing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeType {
    #[serde(rename = "g")]
    Glomerulus,
    #[serde(rename = "m")]
    Macrophage,
    #[serde(rename = "t")]
    TCell,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::Glomerulus, NodeType::Macrophage, NodeType::TCell];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            NodeType::Glomerulus => 0,
            NodeType::Macrophage => 1,
            NodeType::TCell => 2,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            NodeType::Glomerulus => "g",
            NodeType::Macrophage => "m",
            NodeType::TCell => "t",
        }
    }

    pub fn from_code(code: &str) -> Option<NodeType> {
        match code {
            "g" => Some(NodeType::Glomerulus),
            "m" => Some(NodeType::Macrophage),
            "t" => Some(NodeType::TCell),
            _ => None,
        }
    }

    pub fn is_immune(self) -> bool {
        self != NodeType::Glomerulus
    }
}

/// Glomerulus health label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GlomClass {
    #[serde(rename = "healthy")]
    Healthy,
    #[serde(rename = "sclerotic")]
    Sclerotic,
    #[serde(rename = "dead")]
    Dead,
}

pub const NUM_CLASSES: usize = 3;

impl GlomClass {
    pub const ALL: [GlomClass; 3] = [GlomClass::Healthy, GlomClass::Sclerotic, GlomClass::Dead];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            GlomClass::Healthy => 0,
            GlomClass::Sclerotic => 1,
            GlomClass::Dead => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<GlomClass> {
        GlomClass::ALL.get(i).copied()
    }
}

/// Directed edge type: messages flow from `src` nodes to `dst` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeType {
    pub src: NodeType,
    pub dst: NodeType,
}

/// The three construction groups of edge types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeGroup {
    #[serde(rename = "r_gg")]
    GlomGlom,
    #[serde(rename = "immune_glom")]
    ImmuneGlom,
    #[serde(rename = "immune_immune")]
    ImmuneImmune,
}

impl EdgeGroup {
    pub const ALL: [EdgeGroup; 3] = [
        EdgeGroup::GlomGlom,
        EdgeGroup::ImmuneGlom,
        EdgeGroup::ImmuneImmune,
    ];
}

impl EdgeType {
    /// All nine types, ordered by (src, dst) with g < m < t.
    pub const ALL: [EdgeType; 9] = {
        let mut out = [EdgeType {
            src: NodeType::Glomerulus,
            dst: NodeType::Glomerulus,
        }; 9];
        let types = NodeType::ALL;
        let mut s = 0;
        while s < 3 {
            let mut d = 0;
            while d < 3 {
                out[s * 3 + d] = EdgeType {
                    src: types[s],
                    dst: types[d],
                };
                d += 1;
            }
            s += 1;
        }
        out
    };

    #[inline]
    pub fn index(self) -> usize {
        self.src.index() * 3 + self.dst.index()
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 9] = [
            "r_gg", "r_gm", "r_gt", "r_mg", "r_mm", "r_mt", "r_tg", "r_tm", "r_tt",
        ];
        NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<EdgeType> {
        EdgeType::ALL.iter().copied().find(|e| e.name() == name)
    }

    /// The mirrored type with source and destination swapped.
    pub fn reverse(self) -> EdgeType {
        EdgeType {
            src: self.dst,
            dst: self.src,
        }
    }

    pub fn group(self) -> EdgeGroup {
        match (self.src.is_immune(), self.dst.is_immune()) {
            (false, false) => EdgeGroup::GlomGlom,
            (true, true) => EdgeGroup::ImmuneImmune,
            _ => EdgeGroup::ImmuneGlom,
        }
    }
}

// ---------------------------------------------------------------------------
// Nodes
// ---------------------------------------------------------------------------

/// Per-type node store: centroids in micrometres, stable external ids, and
/// class labels for glomeruli.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeSet {
    pub centroids: [Vec<Point2>; 3],
    pub ext_ids: [Vec<u64>; 3],
    /// Parallel to `centroids[0]`; None marks an unlabeled glomerulus.
    pub labels: Vec<Option<GlomClass>>,
}

impl NodeSet {
    pub fn count(&self, t: NodeType) -> usize {
        self.centroids[t.index()].len()
    }

    pub fn total(&self) -> usize {
        self.centroids.iter().map(Vec::len).sum()
    }

    pub fn push(&mut self, t: NodeType, ext_id: u64, centroid: Point2, label: Option<GlomClass>) {
        self.centroids[t.index()].push(centroid);
        self.ext_ids[t.index()].push(ext_id);
        if t == NodeType::Glomerulus {
            self.labels.push(label);
        }
    }
}

/// One candidate node before square-patch filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCandidate {
    pub ext_id: u64,
    pub node_type: NodeType,
    pub centroid: Point2,
    pub label: Option<GlomClass>,
}

/// Selects graph nodes: every glomerulus becomes a node, while an immune cell
/// is kept iff its centroid lies inside at least one axis-aligned square of
/// side `square_side_um` centred on a glomerulus centroid (closed boundary).
/// Returns the node set plus, per type, the index of each kept candidate in
/// the input list so callers can align per-node data.
pub fn detect_nodes(
    candidates: &[NodeCandidate],
    square_side_um: f64,
) -> Result<(NodeSet, [Vec<usize>; 3]), GraphError> {
    let glom_centroids: Vec<Point2> = candidates
        .iter()
        .filter(|c| c.node_type == NodeType::Glomerulus)
        .map(|c| c.centroid)
        .collect();
    if glom_centroids.is_empty() {
        return Err(GraphError::NoGlomeruli);
    }
    let index = SpatialIndex::build(&glom_centroids).expect("finite centroids");
    let half = square_side_um / 2.0;
    // The square's circumscribed circle bounds the Euclidean search.
    let radius = half * std::f64::consts::SQRT_2;

    let mut nodes = NodeSet::default();
    let mut kept: [Vec<usize>; 3] = Default::default();
    for (i, cand) in candidates.iter().enumerate() {
        let keep = if cand.node_type == NodeType::Glomerulus {
            true
        } else {
            index.within_radius(cand.centroid, radius).iter().any(|n| {
                let g = glom_centroids[n.id as usize];
                (cand.centroid.x - g.x).abs() <= half && (cand.centroid.y - g.y).abs() <= half
            })
        };
        if keep {
            kept[cand.node_type.index()].push(i);
            nodes.push(cand.node_type, cand.ext_id, cand.centroid, cand.label);
        }
    }
    Ok((nodes, kept))
}

// ---------------------------------------------------------------------------
// Edge construction
// ---------------------------------------------------------------------------

/// Construction parameters; defaults hold the pipeline's standard values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    pub k_immune: usize,
    pub eps_immune_um: f64,
    pub eps_ig_um: f64,
    pub eps_gg_um: f64,
    pub square_side_um: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            k_immune: DEFAULT_K_IMMUNE,
            eps_immune_um: DEFAULT_EPS_IMMUNE_UM,
            eps_ig_um: DEFAULT_EPS_IG_UM,
            eps_gg_um: DEFAULT_EPS_GG_UM,
            square_side_um: DEFAULT_SQUARE_SIDE_UM,
        }
    }
}

/// Raw directed edge: per-type node indices plus centroid distance.
pub type RawEdge = (u32, u32, f64);

/// Nine per-type edge lists, indexed by [`EdgeType::index`].
pub type EdgeLists = [Vec<RawEdge>; 9];

fn immune_pool(nodes: &NodeSet) -> (Vec<Point2>, Vec<(NodeType, u32)>) {
    let mut points = Vec::new();
    let mut map = Vec::new();
    for t in [NodeType::Macrophage, NodeType::TCell] {
        for (i, &p) in nodes.centroids[t.index()].iter().enumerate() {
            points.push(p);
            map.push((t, i as u32));
        }
    }
    (points, map)
}

fn insert_sorted_edges(lists: &mut EdgeLists, edges: impl IntoIterator<Item = (EdgeType, RawEdge)>) {
    for (et, e) in edges {
        lists[et.index()].push(e);
    }
    for list in lists.iter_mut() {
        list.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        list.dedup_by_key(|e| (e.0, e.1));
    }
}

/// Immune ↔ immune edges: each immune node links to its `k` nearest immune
/// neighbours of any immune type, capped at `eps_um`, then the union of both
/// directions is kept so the graph stays undirected.
pub fn build_edges_immune(nodes: &NodeSet, k: usize, eps_um: f64) -> EdgeLists {
    let (points, map) = immune_pool(nodes);
    let mut lists: EdgeLists = Default::default();
    if points.len() < 2 {
        return lists;
    }
    let index = SpatialIndex::build(&points).expect("finite centroids");
    let mut edges = Vec::new();
    for (vi, &(vt, v_idx)) in map.iter().enumerate() {
        for n in index.knn(points[vi], k, Some(vi as u32)) {
            if n.dist > eps_um {
                break; // results are ascending by distance
            }
            let (ut, u_idx) = map[n.id as usize];
            // v receives from u, and the mirror keeps the union symmetric.
            edges.push((EdgeType { src: ut, dst: vt }, (u_idx, v_idx, n.dist)));
            edges.push((EdgeType { src: vt, dst: ut }, (v_idx, u_idx, n.dist)));
        }
    }
    insert_sorted_edges(&mut lists, edges);
    lists
}

/// Immune ↔ glomerulus edges: every (glomerulus, immune cell) pair with
/// centroid distance ≤ `eps_um` is connected in both directions.
pub fn build_edges_immune_glom(nodes: &NodeSet, eps_um: f64) -> EdgeLists {
    let (points, map) = immune_pool(nodes);
    let mut lists: EdgeLists = Default::default();
    if points.is_empty() {
        return lists;
    }
    let index = SpatialIndex::build(&points).expect("finite centroids");
    let mut edges = Vec::new();
    for (gi, &g) in nodes.centroids[NodeType::Glomerulus.index()].iter().enumerate() {
        for n in index.within_radius(g, eps_um) {
            let (ut, u_idx) = map[n.id as usize];
            let g_idx = gi as u32;
            edges.push((
                EdgeType {
                    src: NodeType::Glomerulus,
                    dst: ut,
                },
                (g_idx, u_idx, n.dist),
            ));
            edges.push((
                EdgeType {
                    src: ut,
                    dst: NodeType::Glomerulus,
                },
                (u_idx, g_idx, n.dist),
            ));
        }
    }
    insert_sorted_edges(&mut lists, edges);
    lists
}

/// Glomerulus ↔ glomerulus edges: all pairs within `eps_um`, both ways.
pub fn build_edges_glom(nodes: &NodeSet, eps_um: f64) -> EdgeLists {
    let gloms = &nodes.centroids[NodeType::Glomerulus.index()];
    let mut lists: EdgeLists = Default::default();
    if gloms.len() < 2 {
        return lists;
    }
    let index = SpatialIndex::build(gloms).expect("finite centroids");
    let mut edges = Vec::new();
    let gg = EdgeType {
        src: NodeType::Glomerulus,
        dst: NodeType::Glomerulus,
    };
    for (gi, &g) in gloms.iter().enumerate() {
        for n in index.within_radius(g, eps_um) {
            if n.id as usize > gi {
                edges.push((gg, (gi as u32, n.id, n.dist)));
                edges.push((gg, (n.id, gi as u32, n.dist)));
            }
        }
    }
    insert_sorted_edges(&mut lists, edges);
    lists
}

/// Runs all three construction rules and merges the results.
pub fn build_all_edges(nodes: &NodeSet, params: &GraphParams) -> EdgeLists {
    let mut lists = build_edges_immune(nodes, params.k_immune, params.eps_immune_um);
    for (i, list) in build_edges_immune_glom(nodes, params.eps_ig_um).into_iter().enumerate() {
        if !list.is_empty() {
            lists[i] = list;
        }
    }
    for (i, list) in build_edges_glom(nodes, params.eps_gg_um).into_iter().enumerate() {
        if !list.is_empty() {
            lists[i] = list;
        }
    }
    lists
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Pre-assembly bundle: nodes, raw features and raw edges. Scaling is fitted
/// across the training bundles before graphs are assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphParts {
    pub nodes: NodeSet,
    pub features: [Array2<f64>; 3],
    pub edges: EdgeLists,
    pub params: GraphParams,
}

impl GraphParts {
    /// Builds all edges for the given nodes and features.
    pub fn build(nodes: NodeSet, features: [Array2<f64>; 3], params: GraphParams) -> GraphParts {
        let edges = build_all_edges(&nodes, &params);
        GraphParts {
            nodes,
            features,
            edges,
            params,
        }
    }
}

/// Min-max parameters for node features (per type) and edge distances (per
/// edge type), fitted on training graphs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphScaler {
    pub features: [ScaleParams; 3],
    pub edge_dist: [ScaleParams; 9],
}

fn sanitize(params: &mut ScaleParams) {
    for v in params.mins.iter_mut().chain(params.maxs.iter_mut()) {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
}

/// Fits feature and edge-distance scaling over the given (training) bundles.
pub fn fit_scaler(train: &[&GraphParts]) -> GraphScaler {
    let feature_dims = [
        crate::morphology::GLOM_FEATURES,
        crate::morphology::CELL_FEATURES,
        crate::morphology::CELL_FEATURES,
    ];
    let features: [ScaleParams; 3] = std::array::from_fn(|ti| {
        let dim = train
            .iter()
            .map(|p| p.features[ti].ncols())
            .find(|&c| c > 0)
            .unwrap_or(feature_dims[ti]);
        let mut mins = vec![f64::INFINITY; dim];
        let mut maxs = vec![f64::NEG_INFINITY; dim];
        for parts in train {
            let m = &parts.features[ti];
            for r in 0..m.nrows() {
                for c in 0..dim.min(m.ncols()) {
                    mins[c] = mins[c].min(m[[r, c]]);
                    maxs[c] = maxs[c].max(m[[r, c]]);
                }
            }
        }
        let mut p = ScaleParams { mins, maxs };
        sanitize(&mut p);
        p
    });
    let edge_dist: [ScaleParams; 9] = std::array::from_fn(|ei| {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for parts in train {
            for &(_, _, d) in &parts.edges[ei] {
                min = min.min(d);
                max = max.max(d);
            }
        }
        let mut p = ScaleParams {
            mins: vec![min],
            maxs: vec![max],
        };
        sanitize(&mut p);
        p
    });
    GraphScaler { features, edge_dist }
}

/// One edge type's storage: parallel arrays of endpoints, raw micrometre
/// distances and the normalised distance feature.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeStore {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub dist_um: Vec<f64>,
    pub dist_feature: Vec<f64>,
}

impl EdgeStore {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// The assembled heterogeneous graph.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub nodes: NodeSet,
    /// Min-max-scaled feature matrices per node type (g: 64, m/t: 6 columns).
    pub features: [Array2<f64>; 3],
    pub edges: [EdgeStore; 9],
    pub params: GraphParams,
}

impl HeteroGraph {
    pub fn edge_type_store(&self, et: EdgeType) -> &EdgeStore {
        &self.edges[et.index()]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.total()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(EdgeStore::len).sum()
    }

    /// Returns a copy with every edge of the given group removed; nodes and
    /// features are untouched.
    pub fn remove_edge_type_group(&self, group: EdgeGroup) -> HeteroGraph {
        let mut out = self.clone();
        for et in EdgeType::ALL {
            if et.group() == group {
                out.edges[et.index()] = EdgeStore::default();
            }
        }
        out
    }

    /// Rebuilds glomerulus-glomerulus edges with a different radius. The
    /// distance feature is renormalised per graph; sweep drivers refit a
    /// shared scale across training graphs afterwards when needed.
    pub fn rebuild_gg_edges(&mut self, eps_um: f64) {
        let lists = build_edges_glom(&self.nodes, eps_um);
        let gg = EdgeType {
            src: NodeType::Glomerulus,
            dst: NodeType::Glomerulus,
        }
        .index();
        let raw = &lists[gg];
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &(_, _, d) in raw {
            min = min.min(d);
            max = max.max(d);
        }
        let span = max - min;
        let mut store = EdgeStore::default();
        for &(s, d, dist) in raw {
            store.src.push(s);
            store.dst.push(d);
            store.dist_um.push(dist);
            store
                .dist_feature
                .push(if span > 0.0 { (dist - min) / span } else { 0.0 });
        }
        self.edges[gg] = store;
        self.params.eps_gg_um = eps_um;
    }
}

/// Shared structural validation: in-range endpoints, no self-loops, no
/// duplicates (edge lists must be sorted), mirror completeness and feature
/// shape agreement.
pub(crate) fn validate_parts(
    nodes: &NodeSet,
    edges: &EdgeLists,
    features: &[Array2<f64>; 3],
) -> Result<(), GraphError> {
    for (ei, list) in edges.iter().enumerate() {
        let et = EdgeType::ALL[ei];
        let n_src = nodes.count(et.src);
        let n_dst = nodes.count(et.dst);
        let mut prev: Option<(u32, u32)> = None;
        for &(s, d, _) in list {
            if (s as usize) >= n_src || (d as usize) >= n_dst {
                return Err(GraphError::DanglingEdge {
                    edge_type: et.name(),
                    src: s,
                    dst: d,
                });
            }
            if et.src == et.dst && s == d {
                return Err(GraphError::SelfLoop {
                    edge_type: et.name(),
                    src: s,
                });
            }
            if prev == Some((s, d)) {
                return Err(GraphError::DuplicateEdge {
                    edge_type: et.name(),
                    src: s,
                    dst: d,
                });
            }
            prev = Some((s, d));
        }
    }
    // Mirror completeness across reversed types.
    for et in EdgeType::ALL {
        let rev = et.reverse();
        let reversed = &edges[rev.index()];
        let mut mirror: Vec<(u32, u32)> = reversed.iter().map(|&(s, d, _)| (d, s)).collect();
        mirror.sort_unstable();
        for &(s, d, _) in &edges[et.index()] {
            if mirror.binary_search(&(s, d)).is_err() {
                return Err(GraphError::MissingMirror {
                    edge_type: et.name(),
                    src: s,
                    dst: d,
                });
            }
        }
    }
    for t in NodeType::ALL {
        let rows = features[t.index()].nrows();
        let n = nodes.count(t);
        if rows != n {
            return Err(GraphError::FeatureShape {
                node_type: t.code(),
                rows,
                nodes: n,
            });
        }
    }
    Ok(())
}

/// Validates invariants and produces the final graph with scaled features
/// and normalised edge distances.
///
/// Hard errors: dangling endpoints, self-loops, duplicate edges and missing
/// mirrors.
pub fn assemble_graph(parts: GraphParts, scaler: &GraphScaler) -> Result<HeteroGraph, GraphError> {
    validate_parts(&parts.nodes, &parts.edges, &parts.features)?;

    let features: [Array2<f64>; 3] = std::array::from_fn(|ti| {
        if parts.features[ti].nrows() == 0 {
            parts.features[ti].clone()
        } else {
            scaler.features[ti].transform(&parts.features[ti])
        }
    });
    let edges: [EdgeStore; 9] = std::array::from_fn(|ei| {
        let mut store = EdgeStore::default();
        for &(s, d, dist) in &parts.edges[ei] {
            store.src.push(s);
            store.dst.push(d);
            store.dist_um.push(dist);
            store.dist_feature.push(scaler.edge_dist[ei].transform_scalar(0, dist));
        }
        store
    });
    Ok(HeteroGraph {
        nodes: parts.nodes,
        features,
        edges,
        params: parts.params,
    })
}

/// Assembles a single graph with scaling fitted on itself.
pub fn assemble_self_scaled(parts: GraphParts) -> Result<HeteroGraph, GraphError> {
    let scaler = fit_scaler(&[&parts]);
    assemble_graph(parts, &scaler)
}

// ---------------------------------------------------------------------------
// Stats
// ---------------------------------------------------------------------------

/// Construction statistics in the spirit of per-slide cost reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes_per_type: [usize; 3],
    pub edges_per_type: [usize; 9],
    pub total_nodes: usize,
    pub total_edges: usize,
    pub construction_secs: f64,
    /// Deterministic estimate of the graph's resident bytes.
    pub peak_mem_estimate_bytes: u64,
}

pub fn graph_stats(graph: &HeteroGraph, construction_secs: f64) -> GraphStats {
    let nodes_per_type = std::array::from_fn(|i| graph.nodes.centroids[i].len());
    let edges_per_type = std::array::from_fn(|i| graph.edges[i].len());
    let node_bytes: u64 = graph
        .nodes
        .centroids
        .iter()
        .map(|v| v.len() as u64 * (16 + 8 + 2))
        .sum();
    let feat_bytes: u64 = graph.features.iter().map(|f| f.len() as u64 * 8).sum();
    let edge_bytes: u64 = graph.edges.iter().map(|e| e.len() as u64 * 24).sum();
    GraphStats {
        nodes_per_type,
        edges_per_type,
        total_nodes: graph.num_nodes(),
        total_edges: graph.num_edges(),
        construction_secs,
        peak_mem_estimate_bytes: node_bytes + feat_bytes + edge_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cand(ext_id: u64, t: NodeType, x: f64, y: f64, label: Option<GlomClass>) -> NodeCandidate {
        NodeCandidate {
            ext_id,
            node_type: t,
            centroid: Point2::new(x, y),
            label,
        }
    }

    fn zero_features(nodes: &NodeSet) -> [Array2<f64>; 3] {
        [
            Array2::zeros((nodes.count(NodeType::Glomerulus), crate::morphology::GLOM_FEATURES)),
            Array2::zeros((nodes.count(NodeType::Macrophage), crate::morphology::CELL_FEATURES)),
            Array2::zeros((nodes.count(NodeType::TCell), crate::morphology::CELL_FEATURES)),
        ]
    }

    fn random_nodes(n_g: usize, n_m: usize, n_t: usize, side: f64, seed: u64) -> NodeSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = NodeSet::default();
        let mut id = 0u64;
        let mut push = |nodes: &mut NodeSet, t: NodeType, n: usize, rng: &mut ChaCha8Rng, id: &mut u64| {
            for _ in 0..n {
                let label = if t == NodeType::Glomerulus {
                    Some(GlomClass::ALL[rng.random_range(0..3)])
                } else {
                    None
                };
                nodes.push(
                    t,
                    *id,
                    Point2::new(rng.random_range(0.0..side), rng.random_range(0.0..side)),
                    label,
                );
                *id += 1;
            }
        };
        push(&mut nodes, NodeType::Glomerulus, n_g, &mut rng, &mut id);
        push(&mut nodes, NodeType::Macrophage, n_m, &mut rng, &mut id);
        push(&mut nodes, NodeType::TCell, n_t, &mut rng, &mut id);
        nodes
    }

    #[test]
    fn edge_type_table_is_complete() {
        assert_eq!(EdgeType::ALL.len(), 9);
        let immune: Vec<&str> = EdgeType::ALL
            .iter()
            .filter(|e| e.group() == EdgeGroup::ImmuneImmune)
            .map(|e| e.name())
            .collect();
        assert_eq!(immune, vec!["r_mm", "r_mt", "r_tm", "r_tt"]);
        let ig: Vec<&str> = EdgeType::ALL
            .iter()
            .filter(|e| e.group() == EdgeGroup::ImmuneGlom)
            .map(|e| e.name())
            .collect();
        assert_eq!(ig, vec!["r_gm", "r_gt", "r_mg", "r_tg"]);
        for et in EdgeType::ALL {
            assert_eq!(et.reverse().reverse(), et);
            assert_eq!(EdgeType::from_name(et.name()), Some(et));
        }
    }

    #[test]
    fn detect_nodes_square_rule() {
        let cands = vec![
            cand(0, NodeType::Glomerulus, 1000.0, 1000.0, Some(GlomClass::Healthy)),
            // 200 µm due east: inside the 554.4 µm square (half-side 277.2).
            cand(1, NodeType::TCell, 1200.0, 1000.0, None),
            // (300, 300) offset: outside.
            cand(2, NodeType::Macrophage, 1300.0, 1300.0, None),
        ];
        let (nodes, kept) = detect_nodes(&cands, DEFAULT_SQUARE_SIDE_UM).unwrap();
        assert_eq!(nodes.count(NodeType::TCell), 1);
        assert_eq!(nodes.count(NodeType::Macrophage), 0);
        assert_eq!(kept[NodeType::TCell.index()], vec![1]);
    }

    #[test]
    fn detect_nodes_requires_glomerulus() {
        let cands = vec![cand(0, NodeType::TCell, 0.0, 0.0, None)];
        assert!(matches!(
            detect_nodes(&cands, 554.4),
            Err(GraphError::NoGlomeruli)
        ));
    }

    #[test]
    fn detect_nodes_matches_brute_force_square_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cands = Vec::new();
        for i in 0..3u64 {
            cands.push(cand(
                i,
                NodeType::Glomerulus,
                rng.random_range(500.0..1500.0),
                rng.random_range(500.0..1500.0),
                Some(GlomClass::Healthy),
            ));
        }
        for i in 0..50u64 {
            let t = if i % 2 == 0 { NodeType::TCell } else { NodeType::Macrophage };
            cands.push(cand(
                100 + i,
                t,
                rng.random_range(0.0..2000.0),
                rng.random_range(0.0..2000.0),
                None,
            ));
        }
        let side = 554.4;
        let (nodes, _) = detect_nodes(&cands, side).unwrap();
        let mut expected = 0;
        for c in &cands {
            if c.node_type == NodeType::Glomerulus {
                continue;
            }
            let inside = cands
                .iter()
                .filter(|g| g.node_type == NodeType::Glomerulus)
                .any(|g| {
                    (c.centroid.x - g.centroid.x).abs() <= side / 2.0
                        && (c.centroid.y - g.centroid.y).abs() <= side / 2.0
                });
            if inside {
                expected += 1;
            }
        }
        assert_eq!(nodes.count(NodeType::Macrophage) + nodes.count(NodeType::TCell), expected);
    }

    #[test]
    fn immune_edges_isolated_cell_has_none() {
        let mut nodes = NodeSet::default();
        nodes.push(NodeType::Glomerulus, 0, Point2::new(0.0, 0.0), None);
        nodes.push(NodeType::Macrophage, 1, Point2::new(0.0, 0.0), None);
        nodes.push(NodeType::Macrophage, 2, Point2::new(150.0, 0.0), None);
        let lists = build_edges_immune(&nodes, 5, 100.0);
        assert!(lists.iter().all(Vec::is_empty));
    }

    #[test]
    fn immune_edges_mirror_pair_across_types() {
        let mut nodes = NodeSet::default();
        nodes.push(NodeType::Glomerulus, 0, Point2::new(0.0, 0.0), None);
        nodes.push(NodeType::Macrophage, 1, Point2::new(10.0, 10.0), None);
        nodes.push(NodeType::TCell, 2, Point2::new(10.0, 60.0), None);
        let lists = build_edges_immune(&nodes, 5, 100.0);
        let mt = EdgeType { src: NodeType::Macrophage, dst: NodeType::TCell };
        let tm = EdgeType { src: NodeType::TCell, dst: NodeType::Macrophage };
        assert_eq!(lists[mt.index()], vec![(0, 0, 50.0)]);
        assert_eq!(lists[tm.index()], vec![(0, 0, 50.0)]);
    }

    #[test]
    fn immune_edges_line_matches_oracle() {
        let mut nodes = NodeSet::default();
        nodes.push(NodeType::Glomerulus, 0, Point2::new(0.0, 0.0), None);
        for i in 0..6u64 {
            nodes.push(NodeType::TCell, i + 1, Point2::new(i as f64 * 10.0, 0.0), None);
        }
        let built = build_edges_immune(&nodes, 5, 100.0);
        let expected = oracle::edges_immune(&nodes, 5, 100.0);
        assert_eq!(built, expected);
    }

    #[test]
    fn immune_glom_boundary_is_closed() {
        let mut nodes = NodeSet::default();
        nodes.push(NodeType::Glomerulus, 0, Point2::new(0.0, 0.0), None);
        nodes.push(NodeType::TCell, 1, Point2::new(277.0, 0.0), None);
        nodes.push(NodeType::TCell, 2, Point2::new(280.0, 0.0), None);
        let lists = build_edges_immune_glom(&nodes, 277.0);
        let tg = EdgeType { src: NodeType::TCell, dst: NodeType::Glomerulus };
        let gt = EdgeType { src: NodeType::Glomerulus, dst: NodeType::TCell };
        assert_eq!(lists[tg.index()], vec![(0, 0, 277.0)]);
        assert_eq!(lists[gt.index()], vec![(0, 0, 277.0)]);
    }

    #[test]
    fn glom_edges_far_apart_none_and_conversion() {
        let mut nodes = NodeSet::default();
        nodes.push(NodeType::Glomerulus, 0, Point2::new(0.0, 0.0), None);
        nodes.push(NodeType::Glomerulus, 1, Point2::new(500.0, 0.0), None);
        let lists = build_edges_glom(&nodes, DEFAULT_EPS_GG_UM);
        assert!(lists.iter().all(Vec::is_empty));
        // 550 px at 0.252 µm/px is the default radius.
        assert!((550.0 * 0.252 - DEFAULT_EPS_GG_UM).abs() < 1e-9);
    }

    #[test]
    fn random_fixtures_match_pair_scan_oracles() {
        for seed in 0..5 {
            let nodes = random_nodes(12, 40, 40, 700.0, 100 + seed);
            let params = GraphParams {
                eps_gg_um: 220.0,
                ..GraphParams::default()
            };
            assert_eq!(
                build_edges_immune(&nodes, params.k_immune, params.eps_immune_um),
                oracle::edges_immune(&nodes, params.k_immune, params.eps_immune_um)
            );
            assert_eq!(
                build_edges_immune_glom(&nodes, params.eps_ig_um),
                oracle::edges_immune_glom(&nodes, params.eps_ig_um)
            );
            assert_eq!(
                build_edges_glom(&nodes, params.eps_gg_um),
                oracle::edges_glom(&nodes, params.eps_gg_um)
            );
        }
    }

    #[test]
    fn edge_lengths_respect_group_radii() {
        let nodes = random_nodes(15, 60, 60, 600.0, 9);
        let params = GraphParams::default();
        let lists = build_all_edges(&nodes, &params);
        for et in EdgeType::ALL {
            let cap = match et.group() {
                EdgeGroup::GlomGlom => params.eps_gg_um,
                EdgeGroup::ImmuneGlom => params.eps_ig_um,
                EdgeGroup::ImmuneImmune => params.eps_immune_um,
            };
            for &(_, _, d) in &lists[et.index()] {
                assert!(d <= cap, "{} edge of length {d} exceeds {cap}", et.name());
            }
        }
    }

    #[test]
    fn construction_is_rigid_motion_invariant() {
        let nodes = random_nodes(10, 50, 50, 600.0, 33);
        let params = GraphParams::default();
        let base = build_all_edges(&nodes, &params);
        let theta: f64 = 1.234;
        let (s, c) = theta.sin_cos();
        let mut moved = nodes.clone();
        for list in &mut moved.centroids {
            for p in list.iter_mut() {
                *p = Point2::new(c * p.x - s * p.y + 4321.0, s * p.x + c * p.y + 987.0);
            }
        }
        let rotated = build_all_edges(&moved, &params);
        for ei in 0..9 {
            let a: Vec<(u32, u32)> = base[ei].iter().map(|&(s, d, _)| (s, d)).collect();
            let b: Vec<(u32, u32)> = rotated[ei].iter().map(|&(s, d, _)| (s, d)).collect();
            assert_eq!(a, b, "edge type {}", EdgeType::ALL[ei].name());
        }
    }

    #[test]
    fn assemble_validates_and_scales() {
        let nodes = random_nodes(8, 30, 30, 500.0, 77);
        let features = zero_features(&nodes);
        let parts = GraphParts::build(nodes, features, GraphParams::default());
        let graph = assemble_self_scaled(parts).unwrap();
        for store in &graph.edges {
            for &f in &store.dist_feature {
                assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn assemble_rejects_dangling_edge() {
        let mut nodes = NodeSet::default();
        nodes.push(NodeType::Glomerulus, 0, Point2::new(0.0, 0.0), None);
        nodes.push(NodeType::Glomerulus, 1, Point2::new(50.0, 0.0), None);
        let features = zero_features(&nodes);
        let mut parts = GraphParts::build(nodes, features, GraphParams::default());
        parts.edges[0].push((0, 9, 50.0));
        assert!(matches!(
            assemble_self_scaled(parts),
            Err(GraphError::DanglingEdge { .. })
        ));
    }

    #[test]
    fn assemble_rejects_missing_mirror() {
        let mut nodes = NodeSet::default();
        nodes.push(NodeType::Glomerulus, 0, Point2::new(0.0, 0.0), None);
        nodes.push(NodeType::Glomerulus, 1, Point2::new(50.0, 0.0), None);
        let features = zero_features(&nodes);
        let mut parts = GraphParts::build(nodes, features, GraphParams::default());
        parts.edges[0] = vec![(0, 1, 50.0)]; // drop the reverse
        assert!(matches!(
            assemble_self_scaled(parts),
            Err(GraphError::MissingMirror { .. })
        ));
    }

    #[test]
    fn graph_with_only_glomeruli_is_valid() {
        let mut nodes = NodeSet::default();
        nodes.push(NodeType::Glomerulus, 0, Point2::new(0.0, 0.0), Some(GlomClass::Healthy));
        nodes.push(NodeType::Glomerulus, 1, Point2::new(100.0, 0.0), Some(GlomClass::Dead));
        let features = zero_features(&nodes);
        let parts = GraphParts::build(nodes, features, GraphParams::default());
        let graph = assemble_self_scaled(parts).unwrap();
        assert_eq!(graph.edges[0].len(), 2); // one mirrored gg pair
        assert_eq!(graph.num_nodes(), 2);
    }

    #[test]
    fn remove_group_is_idempotent_and_counts_match() {
        let nodes = random_nodes(10, 40, 40, 500.0, 55);
        let features = zero_features(&nodes);
        let parts = GraphParts::build(nodes, features, GraphParams::default());
        let graph = assemble_self_scaled(parts).unwrap();
        let stats = graph_stats(&graph, 0.0);

        let without = graph.remove_edge_type_group(EdgeGroup::ImmuneImmune);
        let twice = without.remove_edge_type_group(EdgeGroup::ImmuneImmune);
        assert_eq!(without, twice);

        let group_edges: usize = EdgeType::ALL
            .iter()
            .filter(|e| e.group() == EdgeGroup::ImmuneImmune)
            .map(|e| stats.edges_per_type[e.index()])
            .sum();
        assert_eq!(without.num_edges(), stats.total_edges - group_edges);

        let empty = graph
            .remove_edge_type_group(EdgeGroup::GlomGlom)
            .remove_edge_type_group(EdgeGroup::ImmuneGlom)
            .remove_edge_type_group(EdgeGroup::ImmuneImmune);
        assert_eq!(empty.num_edges(), 0);
        assert_eq!(empty.num_nodes(), graph.num_nodes());
    }

    #[test]
    fn stats_match_hand_count() {
        let mut nodes = NodeSet::default();
        nodes.push(NodeType::Glomerulus, 0, Point2::new(0.0, 0.0), None);
        nodes.push(NodeType::Glomerulus, 1, Point2::new(100.0, 0.0), None);
        nodes.push(NodeType::TCell, 2, Point2::new(50.0, 10.0), None);
        nodes.push(NodeType::TCell, 3, Point2::new(50.0, 30.0), None);
        let features = zero_features(&nodes);
        let parts = GraphParts::build(nodes, features, GraphParams::default());
        let graph = assemble_self_scaled(parts).unwrap();
        let stats = graph_stats(&graph, 0.1);
        // gg pair at 100 µm: 2 directed edges; tt pair at 20 µm: 2; each
        // t-cell is within 277 µm of both glomeruli: 4 tg + 4 gt.
        assert_eq!(stats.nodes_per_type, [2, 0, 2]);
        assert_eq!(stats.total_edges, 2 + 2 + 8);
        assert_eq!(stats.total_nodes, 4);
    }
}
