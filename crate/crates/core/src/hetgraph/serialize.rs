//! Graph persistence: versioned JSON with an optional binary feature
//! companion, plus the node-input CSV format.
//!
//! The JSON layout is documented in `docs/graph_format.md`. Feature matrices
//! can be written inline or into `<graph>.feat.bin` (little-endian float64,
//! row-major, with a shape header) for large graphs.

use super::{
    EdgeStore, GlomClass, GraphError, GraphParams, HeteroGraph, NodeSet, NodeType, RawEdge,
};
use crate::spatial::Point2;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const GRAPH_FORMAT: &str = "hieg-graph";
pub const GRAPH_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 4] = b"HGFB";

#[derive(Serialize, Deserialize)]
struct NodeBlock {
    ext_ids: Vec<u64>,
    x_um: Vec<f64>,
    y_um: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<Option<GlomClass>>>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format: String,
    version: u32,
    params: GraphParams,
    nodes: BTreeMap<String, NodeBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<BTreeMap<String, Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features_binary: Option<String>,
    edges: BTreeMap<String, EdgeStore>,
}

fn io_err(path: &Path, source: std::io::Error) -> GraphError {
    GraphError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn feature_companion(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".feat.bin");
    PathBuf::from(s)
}

fn write_features_binary(path: &Path, features: &[Array2<f64>; 3]) -> Result<(), GraphError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&GRAPH_VERSION.to_le_bytes());
    for m in features {
        buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                buf.extend_from_slice(&m[[r, c]].to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn read_features_binary(path: &Path) -> Result<[Array2<f64>; 3], GraphError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let parse_err = |offset: usize, message: &str| GraphError::Parse {
        offset,
        message: format!("{}: {message}", path.display()),
    };
    if bytes.len() < 8 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(parse_err(0, "bad feature-file magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GRAPH_VERSION {
        return Err(parse_err(4, "unsupported feature-file version"));
    }
    let mut pos = 8usize;
    let mut take = |n: usize| -> Result<&[u8], GraphError> {
        if pos + n > bytes.len() {
            return Err(parse_err(pos, "truncated feature file"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    for _ in 0..3 {
        let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let data = take(rows * cols * 8)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Array2::from_shape_vec((rows, cols), values).expect("shape matches data"));
    }
    Ok(out.try_into().expect("three matrices"))
}

/// Writes the graph to `path`. With `inline_features` the matrices embed in
/// the JSON; otherwise they go to a `<path>.feat.bin` companion referenced
/// by relative file name.
pub fn serialize_graph(
    graph: &HeteroGraph,
    path: &Path,
    inline_features: bool,
) -> Result<(), GraphError> {
    let mut nodes = BTreeMap::new();
    for t in NodeType::ALL {
        let centroids = &graph.nodes.centroids[t.index()];
        nodes.insert(
            t.code().to_string(),
            NodeBlock {
                ext_ids: graph.nodes.ext_ids[t.index()].clone(),
                x_um: centroids.iter().map(|p| p.x).collect(),
                y_um: centroids.iter().map(|p| p.y).collect(),
                labels: (t == NodeType::Glomerulus).then(|| graph.nodes.labels.clone()),
            },
        );
    }
    let mut edges = BTreeMap::new();
    for et in super::EdgeType::ALL {
        edges.insert(et.name().to_string(), graph.edges[et.index()].clone());
    }
    let (features, features_binary) = if inline_features {
        let mut map = BTreeMap::new();
        for t in NodeType::ALL {
            let m = &graph.features[t.index()];
            map.insert(
                t.code().to_string(),
                (0..m.nrows()).map(|r| m.row(r).to_vec()).collect(),
            );
        }
        (Some(map), None)
    } else {
        let companion = feature_companion(path);
        write_features_binary(&companion, &graph.features)?;
        let name = companion
            .file_name()
            .expect("companion has a file name")
            .to_string_lossy()
            .into_owned();
        (None, Some(name))
    };
    let file = GraphFile {
        format: GRAPH_FORMAT.to_string(),
        version: GRAPH_VERSION,
        params: graph.params,
        nodes,
        features,
        features_binary,
        edges,
    };
    let mut out = serde_json::to_vec(&file).expect("graph serializes");
    out.push(b'\n');
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| io_err(path, e))
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    // serde_json reports 1-based line/column.
    let mut offset = 0;
    for (i, l) in text.lines().enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

/// Reads a graph file, restoring the binary feature companion when present,
/// and re-validates the structural invariants.
pub fn deserialize_graph(path: &Path) -> Result<HeteroGraph, GraphError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;

    // Probe format and version before the strict full parse so corrupt
    // headers get a targeted message.
    #[derive(Deserialize, Default)]
    #[serde(default)]
    struct Probe {
        format: Option<String>,
        version: Option<u32>,
    }
    let probe: Probe = serde_json::from_str(&text).map_err(|e| GraphError::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    match probe.format.as_deref() {
        Some(GRAPH_FORMAT) => {}
        other => {
            return Err(GraphError::Parse {
                offset: 0,
                message: format!("unknown format {other:?}, expected {GRAPH_FORMAT:?}"),
            })
        }
    }
    if probe.version != Some(GRAPH_VERSION) {
        return Err(GraphError::Parse {
            offset: 0,
            message: format!("unsupported version {:?}", probe.version),
        });
    }

    let file: GraphFile = serde_json::from_str(&text).map_err(|e| GraphError::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;

    let mut nodes = NodeSet::default();
    for t in NodeType::ALL {
        let block = file.nodes.get(t.code()).ok_or_else(|| GraphError::Parse {
            offset: 0,
            message: format!("missing node block {:?}", t.code()),
        })?;
        nodes.centroids[t.index()] = block
            .x_um
            .iter()
            .zip(block.y_um.iter())
            .map(|(&x, &y)| Point2::new(x, y))
            .collect();
        nodes.ext_ids[t.index()] = block.ext_ids.clone();
        if t == NodeType::Glomerulus {
            nodes.labels = block.labels.clone().unwrap_or_default();
        }
    }

    let features: [Array2<f64>; 3] = if let Some(inline) = &file.features {
        let mut out = Vec::new();
        for t in NodeType::ALL {
            let rows = inline.get(t.code()).ok_or_else(|| GraphError::Parse {
                offset: 0,
                message: format!("missing feature block {:?}", t.code()),
            })?;
            let ncols = rows.first().map_or(0, Vec::len);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            out.push(
                Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|e| GraphError::Parse {
                    offset: 0,
                    message: format!("ragged feature rows for {:?}: {e}", t.code()),
                })?,
            );
        }
        out.try_into().expect("three matrices")
    } else if let Some(name) = &file.features_binary {
        let companion = path.parent().unwrap_or_else(|| Path::new(".")).join(name);
        read_features_binary(&companion)?
    } else {
        return Err(GraphError::Parse {
            offset: 0,
            message: "graph file has neither inline nor binary features".into(),
        });
    };

    let mut edges: [EdgeStore; 9] = Default::default();
    for et in super::EdgeType::ALL {
        if let Some(store) = file.edges.get(et.name()) {
            edges[et.index()] = store.clone();
        }
    }

    let lists: super::EdgeLists = std::array::from_fn(|ei| {
        let store = &edges[ei];
        (0..store.len())
            .map(|i| (store.src[i], store.dst[i], store.dist_um[i]) as RawEdge)
            .collect()
    });
    super::validate_parts(&nodes, &lists, &features)?;

    Ok(HeteroGraph {
        nodes,
        features,
        edges,
        params: file.params,
    })
}

// ---------------------------------------------------------------------------
// Node input CSV
// ---------------------------------------------------------------------------

/// One row of the node-input table: `id,type,x_um,y_um,mask_path,label`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRow {
    pub id: u64,
    pub node_type: NodeType,
    pub x_um: f64,
    pub y_um: f64,
    /// Relative path to the instance mask PGM; empty when absent.
    pub mask_path: String,
    pub label: Option<GlomClass>,
}

fn parse_label(s: &str) -> Result<Option<GlomClass>, String> {
    match s.trim() {
        "" => Ok(None),
        "0" | "healthy" => Ok(Some(GlomClass::Healthy)),
        "1" | "sclerotic" => Ok(Some(GlomClass::Sclerotic)),
        "2" | "dead" => Ok(Some(GlomClass::Dead)),
        other => Err(format!("unknown label {other:?}")),
    }
}

pub fn read_nodes_csv(path: &Path) -> Result<Vec<NodeRow>, GraphError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| GraphError::BadCsvRow {
            row: 0,
            reason: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 2; // 1-based, after the header
        let bad = |reason: String| GraphError::BadCsvRow {
            row: row_no,
            reason,
        };
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() < 6 {
            return Err(bad(format!("expected 6 fields, found {}", record.len())));
        }
        let id: u64 = record[0].trim().parse().map_err(|e| bad(format!("id: {e}")))?;
        let node_type = NodeType::from_code(record[1].trim())
            .ok_or_else(|| bad(format!("unknown node type {:?}", &record[1])))?;
        let x_um: f64 = record[2].trim().parse().map_err(|e| bad(format!("x_um: {e}")))?;
        let y_um: f64 = record[3].trim().parse().map_err(|e| bad(format!("y_um: {e}")))?;
        let label = parse_label(&record[5]).map_err(bad)?;
        rows.push(NodeRow {
            id,
            node_type,
            x_um,
            y_um,
            mask_path: record[4].trim().to_string(),
            label,
        });
    }
    Ok(rows)
}

pub fn write_nodes_csv(path: &Path, rows: &[NodeRow]) -> Result<(), GraphError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| GraphError::BadCsvRow {
        row: 0,
        reason: e.to_string(),
    })?;
    writer
        .write_record(["id", "type", "x_um", "y_um", "mask_path", "label"])
        .and_then(|()| {
            for r in rows {
                writer.write_record([
                    r.id.to_string(),
                    r.node_type.code().to_string(),
                    format!("{}", r.x_um),
                    format!("{}", r.y_um),
                    r.mask_path.clone(),
                    r.label.map_or(String::new(), |l| l.index().to_string()),
                ])?;
            }
            writer.flush()?;
            Ok(())
        })
        .map_err(|e| GraphError::BadCsvRow {
            row: 0,
            reason: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::{assemble_self_scaled, GraphParts, NodeSet};
    use crate::morphology::{CELL_FEATURES, GLOM_FEATURES};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_graph(seed: u64) -> HeteroGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = NodeSet::default();
        for i in 0..6u64 {
            nodes.push(
                NodeType::Glomerulus,
                i,
                Point2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)),
                Some(GlomClass::ALL[(i % 3) as usize]),
            );
        }
        for i in 0..20u64 {
            let t = if i % 3 == 0 { NodeType::Macrophage } else { NodeType::TCell };
            nodes.push(
                t,
                100 + i,
                Point2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)),
                None,
            );
        }
        let features = [
            Array2::from_shape_fn((6, GLOM_FEATURES), |_| rng.random_range(0.0..5.0)),
            Array2::from_shape_fn((nodes.count(NodeType::Macrophage), CELL_FEATURES), |_| {
                rng.random_range(0.0..5.0)
            }),
            Array2::from_shape_fn((nodes.count(NodeType::TCell), CELL_FEATURES), |_| {
                rng.random_range(0.0..5.0)
            }),
        ];
        let parts = GraphParts::build(nodes, features, Default::default());
        assemble_self_scaled(parts).unwrap()
    }

    #[test]
    fn json_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let graph = sample_graph(3);
        let p1 = dir.path().join("g1.json");
        let p2 = dir.path().join("g2.json");
        serialize_graph(&graph, &p1, true).unwrap();
        let back = deserialize_graph(&p1).unwrap();
        assert_eq!(back, graph);
        serialize_graph(&back, &p2, true).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn binary_companion_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let graph = sample_graph(4);
        let p = dir.path().join("g.json");
        serialize_graph(&graph, &p, false).unwrap();
        assert!(dir.path().join("g.json.feat.bin").exists());
        let back = deserialize_graph(&p).unwrap();
        assert_eq!(back, graph);
    }

    #[test]
    fn corrupt_magic_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        fs::write(&p, br#"{"format":"something-else","version":1}"#).unwrap();
        match deserialize_graph(&p) {
            Err(GraphError::Parse { message, .. }) => assert!(message.contains("something-else")),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&p, b"not json at all").unwrap();
        assert!(matches!(deserialize_graph(&p), Err(GraphError::Parse { .. })));
    }

    #[test]
    fn nodes_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nodes.csv");
        let rows = vec![
            NodeRow {
                id: 1,
                node_type: NodeType::Glomerulus,
                x_um: 10.5,
                y_um: 20.25,
                mask_path: "masks/g1.pgm".into(),
                label: Some(GlomClass::Sclerotic),
            },
            NodeRow {
                id: 2,
                node_type: NodeType::TCell,
                x_um: 1.0,
                y_um: 2.0,
                mask_path: String::new(),
                label: None,
            },
        ];
        write_nodes_csv(&p, &rows).unwrap();
        assert_eq!(read_nodes_csv(&p).unwrap(), rows);

        fs::write(&p, "id,type,x_um,y_um,mask_path,label\n7,x,1,2,,\n").unwrap();
        match read_nodes_csv(&p) {
            Err(GraphError::BadCsvRow { row: 2, reason }) => {
                assert!(reason.contains("node type"))
            }
            other => panic!("expected bad row, got {other:?}"),
        }
    }
}
