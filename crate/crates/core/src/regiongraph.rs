//! Region graphs from feature volumes and refined label masks.
//!
//! Each anatomically meaningful region (the liver parenchyma, each individual
//! tumor component) becomes one node; the node feature is the per-channel mean
//! of a feature volume over the region's voxels, and edges carry the cosine
//! similarity between node features.
//!
//! Node ordering is canonical: liver first, then tumors by descending voxel
//! count (ties by label, then by first voxel index). Node/edge alignment
//! losses rely on this ordering when student and teacher share a mask.
//!
//! The liver node covers exactly the voxels labeled 1; voxels relabeled as
//! tumor are excluded from the liver region by construction.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{connected_components_6, MaskVolume, Volume};

/// Dense feature grid of shape `[channels, depth, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    data: Array4<f64>,
}

impl FeatureVolume {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateInput("feature volume contains non-finite values".into()));
        }
        Ok(FeatureVolume { data })
    }

    /// Stacks scalar volumes as channels. All volumes must share dims.
    pub fn from_volumes(volumes: &[&Volume]) -> Result<Self> {
        let first = volumes
            .first()
            .ok_or_else(|| Error::InvalidArgument("at least one channel volume required".into()))?;
        let dims = first.dims();
        let mut data = Array4::zeros((volumes.len(), dims.0, dims.1, dims.2));
        for (c, v) in volumes.iter().enumerate() {
            if v.dims() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "channel {c} dims {:?} differ from channel 0 dims {:?}",
                    v.dims(),
                    dims
                )));
            }
            for z in 0..dims.0 {
                for y in 0..dims.1 {
                    for x in 0..dims.2 {
                        data[[c, z, y, x]] = v.voxel(z, y, x) as f64;
                    }
                }
            }
        }
        FeatureVolume::new(data)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }
}

/// One region: its mask label and the flat voxel indices it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub label: u16,
    pub voxels: Vec<usize>,
}

/// One graph node: region identity plus pooled feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionNode {
    pub label: u16,
    pub voxel_count: usize,
    pub feature: Vec<f64>,
}

/// Region graph: ordered nodes plus the symmetric cosine-similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGraph {
    nodes: Vec<RegionNode>,
    edges: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<RegionNode>,
    edges: Vec<Vec<f64>>,
}

impl RegionGraph {
    /// Builds the graph from ordered nodes, computing cosine edges.
    pub fn new(nodes: Vec<RegionNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidArgument("a region graph needs at least one node".into()));
        }
        let dim = nodes[0].feature.len();
        for (k, n) in nodes.iter().enumerate() {
            if n.feature.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "node {k} feature length {} differs from node 0 length {dim}",
                    n.feature.len()
                )));
            }
            if n.feature.iter().any(|x| !x.is_finite()) {
                return Err(Error::DegenerateInput(format!("node {k} feature is non-finite")));
            }
        }
        let features: Vec<&[f64]> = nodes.iter().map(|n| n.feature.as_slice()).collect();
        let edges = cosine_similarity_matrix(&features)?;
        Ok(RegionGraph { nodes, edges })
    }

    pub fn nodes(&self) -> &[RegionNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &Array2<f64> {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes[0].feature.len()
    }

    pub fn to_json_string(&self) -> String {
        let mirror = GraphJson {
            nodes: self.nodes.clone(),
            edges: self.edges.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_string(&mirror).expect("graph serialization cannot fail")
    }

    /// Parses a graph file; edges are recomputed from the node features and
    /// checked against the stored matrix so stale files are rejected.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mirror: GraphJson = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("bad region graph JSON: {e}")))?;
        let graph = RegionGraph::new(mirror.nodes)?;
        let n = graph.node_count();
        if mirror.edges.len() != n || mirror.edges.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch(format!("edge matrix must be {n}x{n}")));
        }
        for (i, row) in mirror.edges.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                if (e - graph.edges[[i, j]]).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "stored edge [{i}][{j}] = {e} disagrees with cosine of stored features ({})",
                        graph.edges[[i, j]]
                    )));
                }
            }
        }
        Ok(graph)
    }
}

/// Cosine-similarity matrix between feature vectors. Zero-norm features are
/// an error: silently mapping them to 0 similarity would hide upstream bugs.
pub fn cosine_similarity_matrix(features: &[&[f64]]) -> Result<Array2<f64>> {
    let n = features.len();
    if n == 0 {
        return Err(Error::InvalidArgument("at least one feature required".into()));
    }
    let dim = features[0].len();
    let mut norms = Vec::with_capacity(n);
    for (k, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "feature {k} has length {}, expected {dim}",
                f.len()
            )));
        }
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormFeature(k));
        }
        norms.push(norm);
    }
    let mut s = Array2::zeros((n, n));
    for p in 0..n {
        s[[p, p]] = 1.0;
        for q in (p + 1)..n {
            let dot: f64 = features[p].iter().zip(features[q]).map(|(a, b)| a * b).sum();
            let v = (dot / (norms[p] * norms[q])).clamp(-1.0, 1.0);
            s[[p, q]] = v;
            s[[q, p]] = v;
        }
    }
    Ok(s)
}

/// Splits a refined mask into ordered regions: the liver (all label-1 voxels)
/// first, then one region per 6-connected tumor component, by descending size.
pub fn extract_regions(m: &MaskVolume) -> Result<Vec<Region>> {
    let dims = m.dims();
    let liver_voxels: Vec<usize> = m
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == 1)
        .map(|(i, _)| i)
        .collect();
    if liver_voxels.is_empty() {
        return Err(Error::EmptyLiver);
    }
    let mut regions = vec![Region { label: 1, voxels: liver_voxels }];

    let mut tumor_labels: Vec<u16> = m.labels().iter().copied().filter(|&l| l >= 2).collect();
    tumor_labels.sort_unstable();
    tumor_labels.dedup();

    let mut tumors = Vec::new();
    for label in tumor_labels {
        let set: Vec<bool> = m.labels().iter().map(|&l| l == label).collect();
        for comp in connected_components_6(&set, dims) {
            tumors.push(Region { label, voxels: comp });
        }
    }
    tumors.sort_by(|a, b| {
        b.voxels
            .len()
            .cmp(&a.voxels.len())
            .then(a.label.cmp(&b.label))
            .then(a.voxels[0].cmp(&b.voxels[0]))
    });
    regions.extend(tumors);
    Ok(regions)
}

/// Per-channel mean of the feature volume over the region's voxels.
pub fn masked_gap(f: &FeatureVolume, region: &Region) -> Result<Vec<f64>> {
    if region.voxels.is_empty() {
        return Err(Error::DegenerateInput(format!("region with label {} is empty", region.label)));
    }
    let (d, h, w) = f.dims();
    let spatial = d * h * w;
    let c = f.channels();
    let mut sums = vec![0.0f64; c];
    for &flat in &region.voxels {
        if flat >= spatial {
            return Err(Error::ShapeMismatch(format!(
                "region voxel index {flat} outside feature volume of {spatial} voxels"
            )));
        }
        let z = flat / (h * w);
        let y = (flat / w) % h;
        let x = flat % w;
        for (ch, sum) in sums.iter_mut().enumerate() {
            *sum += f.data()[[ch, z, y, x]];
        }
    }
    let count = region.voxels.len() as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}

/// Builds the region graph of a feature volume under a refined mask.
pub fn graph_from_volume(f: &FeatureVolume, m: &MaskVolume) -> Result<RegionGraph> {
    if f.dims() != m.dims() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {:?} differ from mask dims {:?}",
            f.dims(),
            m.dims()
        )));
    }
    let regions = extract_regions(m)?;
    let mut nodes = Vec::with_capacity(regions.len());
    for r in &regions {
        let feature = masked_gap(f, r)?;
        nodes.push(RegionNode {
            label: r.label,
            voxel_count: r.voxels.len(),
            feature,
        });
    }
    RegionGraph::new(nodes)
}

/// Writes each region's score into its voxels; background stays 0. The
/// result can be rendered as an interpretability overlay.
pub fn project_node_scores(m: &MaskVolume, regions: &[Region], scores: &[f64]) -> Result<Volume> {
    if regions.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} regions but {} scores",
            regions.len(),
            scores.len()
        )));
    }
    let mut data = vec![0.0f32; m.len()];
    for (r, &s) in regions.iter().zip(scores) {
        for &v in &r.voxels {
            data[v] = s as f32;
        }
    }
    Volume::new(m.dims(), m.spacing(), data)
}

/// Nearest-neighbor downsampling of a mask onto feature-grid dims, using the
/// same center-aligned coordinate convention as volume resampling (the mask
/// follows the features).
pub fn downsample_mask(m: &MaskVolume, target: (usize, usize, usize)) -> Result<MaskVolume> {
    if target.0 == 0 || target.1 == 0 || target.2 == 0 {
        return Err(Error::InvalidArgument(format!("target dims must be positive, got {target:?}")));
    }
    let (sd, sh, sw) = m.dims();
    let coord = |i: usize, src: usize, dst: usize| -> usize {
        let c = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).round();
        (c.max(0.0) as usize).min(src - 1)
    };
    let mut labels = Vec::with_capacity(target.0 * target.1 * target.2);
    for z in 0..target.0 {
        let sz = coord(z, sd, target.0);
        for y in 0..target.1 {
            let sy = coord(y, sh, target.1);
            for x in 0..target.2 {
                let sx = coord(x, sw, target.2);
                labels.push(m.label(sz, sy, sx));
            }
        }
    }
    let spacing = (
        m.spacing().0 * sd as f64 / target.0 as f64,
        m.spacing().1 * sh as f64 / target.1 as f64,
        m.spacing().2 * sw as f64 / target.2 as f64,
    );
    MaskVolume::new(target, spacing, labels)
}
