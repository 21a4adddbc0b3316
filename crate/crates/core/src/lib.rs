//! Region-graph knowledge distillation for volumetric tumor classification.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! * [`volio`] — volume/mask I/O in the RVOL format, intensity preprocessing,
//!   trilinear resampling, and morphological mask refinement.
//! * [`regiongraph`] — anatomically grounded region graphs: masked global
//!   average pooling over liver/tumor regions and cosine-similarity edges.
//! * [`otgw`] — entropic Gromov-Wasserstein discrepancy between two region
//!   graphs with possibly different node counts, plus the Sinkhorn projection.
//! * [`losses`] — the training objectives (temperature-softened KL, node,
//!   edge, transport, focal, weighted total), each with analytic gradients.
//! * [`nets`] — forward-only reference blocks: windowed multi-head attention
//!   with relative position bias, residual conv units, channel/spatial
//!   gating, and the small trainable classification head.
//! * [`distill`] — desk-scale two-stage training harness on synthetic cases,
//!   with modality dropout and count-dependent CT degradation.
//! * [`metrics`] — confusion-matrix metrics, one-vs-rest AUC, and decision
//!   curve analysis.
//!
//! All computations are deterministic given their seeds; stochastic
//! operations take explicitly seeded generators.

pub mod error;
pub mod otgw;
pub mod regiongraph;
pub mod volio;

pub use error::{Error, Result};
