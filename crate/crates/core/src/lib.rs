//! Tissue-graph construction and heterogeneous GNN training for glomeruli
//! health classification.
//!
//! The pipeline turns segmented whole-slide imagery into a heterogeneous
//! graph of glomeruli and immune cells, extracts texture and shape features
//! per node, and trains the HIEGNet relation-sum message-passing model to
//! classify each glomerulus as healthy, sclerotic or dead.
//!
//! Module map:
//! - [`spatial`]: exact 2-D kNN / radius queries in micrometre coordinates,
//!   plus the brute-force oracle the fast index is verified against.
//! - [`pgm`]: binary PGM (P5) raster I/O with micrometre sidecar metadata.
//! - [`morphology`]: mask ingestion, shape and local-binary-pattern features,
//!   threshold contour segmentation, min-max scaling.
//! - [`hetgraph`]: typed node/edge assembly, distance-rule edge construction,
//!   serialization, stats and edge-group ablation.
//! - [`diffmath`]: dense float64 tensors with reverse-mode gradients, ADAM,
//!   the One-Cycle schedule and a finite-difference gradient checker.
//! - [`hiegnet`]: per-edge-type message/update functions and the relation-sum
//!   layer, jumping-knowledge variant and classification head.
//! - [`training`]: losses, stratified splits, the fit loop with early
//!   stopping, grid search, multi-seed evaluation and all metrics.
//! - [`baseline`]: random-forest classifier over glomerulus features.
//! - [`synthdata`]: synthetic slide generator with configurable relational
//!   signal for end-to-end verification without patient data.

pub mod baseline;
pub mod diffmath;
pub mod hetgraph;
pub mod hiegnet;
pub mod morphology;
pub mod pgm;
pub mod spatial;
pub mod synthdata;
pub mod training;

pub use morphology::InstanceMask;
pub use spatial::Point2;
