//! Brute-force reference implementations of the edge-construction rules.
//!
//! These scan all pairs directly, without the spatial index, and exist so
//! tests can assert set equality against the fast path. Keep them naive.

use super::{EdgeLists, EdgeType, NodeSet, NodeType};
use crate::spatial::Point2;

fn immune_flat(nodes: &NodeSet) -> Vec<(NodeType, u32, Point2)> {
    let mut out = Vec::new();
    for t in [NodeType::Macrophage, NodeType::TCell] {
        for (i, &p) in nodes.centroids[t.index()].iter().enumerate() {
            out.push((t, i as u32, p));
        }
    }
    out
}

fn finalize(lists: &mut EdgeLists) {
    for list in lists.iter_mut() {
        list.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        list.dedup_by_key(|e| (e.0, e.1));
    }
}

/// Pair-scan version of [`super::build_edges_immune`].
pub fn edges_immune(nodes: &NodeSet, k: usize, eps_um: f64) -> EdgeLists {
    let pool = immune_flat(nodes);
    let mut lists: EdgeLists = Default::default();
    for (vi, &(vt, v_idx, vp)) in pool.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = pool
            .iter()
            .enumerate()
            .filter(|(ui, _)| *ui != vi)
            .map(|(ui, &(_, _, up))| (vp.dist(&up), ui))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(d, ui) in dists.iter().take(k) {
            if d > eps_um {
                continue;
            }
            let (ut, u_idx, _) = pool[ui];
            lists[EdgeType { src: ut, dst: vt }.index()].push((u_idx, v_idx, d));
            lists[EdgeType { src: vt, dst: ut }.index()].push((v_idx, u_idx, d));
        }
    }
    finalize(&mut lists);
    lists
}

/// Pair-scan version of [`super::build_edges_immune_glom`].
pub fn edges_immune_glom(nodes: &NodeSet, eps_um: f64) -> EdgeLists {
    let pool = immune_flat(nodes);
    let mut lists: EdgeLists = Default::default();
    for (gi, &g) in nodes.centroids[NodeType::Glomerulus.index()].iter().enumerate() {
        for &(ut, u_idx, up) in &pool {
            let d = g.dist(&up);
            if d <= eps_um {
                let g_idx = gi as u32;
                lists[EdgeType { src: NodeType::Glomerulus, dst: ut }.index()]
                    .push((g_idx, u_idx, d));
                lists[EdgeType { src: ut, dst: NodeType::Glomerulus }.index()]
                    .push((u_idx, g_idx, d));
            }
        }
    }
    finalize(&mut lists);
    lists
}

/// Pair-scan version of [`super::build_edges_glom`].
pub fn edges_glom(nodes: &NodeSet, eps_um: f64) -> EdgeLists {
    let gloms = &nodes.centroids[NodeType::Glomerulus.index()];
    let mut lists: EdgeLists = Default::default();
    let gg = EdgeType {
        src: NodeType::Glomerulus,
        dst: NodeType::Glomerulus,
    };
    for a in 0..gloms.len() {
        for b in a + 1..gloms.len() {
            let d = gloms[a].dist(&gloms[b]);
            if d <= eps_um {
                lists[gg.index()].push((a as u32, b as u32, d));
                lists[gg.index()].push((b as u32, a as u32, d));
            }
        }
    }
    finalize(&mut lists);
    lists
}
