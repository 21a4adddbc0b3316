//! Volume and mask I/O, intensity preprocessing, resampling, mask refinement.
//!
//! # The RVOL format
//!
//! A volume on disk is a pair of files sharing a stem:
//!
//! * `<stem>.json` — sidecar: `{"dims":[d,h,w],"spacing":[sz,sy,sx],"dtype":"f32"|"u16"}`
//! * `<stem>.raw` — little-endian row-major payload, x fastest, then y, then z.
//!
//! Scalar volumes use dtype `f32`, label masks use `u16`. Read/write round
//! trips are byte-exact on the payload.
//!
//! # Conventions
//!
//! * Percentiles use linear interpolation between closest ranks (the
//!   inclusive convention): rank = p/100 * (n-1) over the sorted values.
//! * Resampling aligns voxel centers on the unit cube (half-pixel offset):
//!   source coordinate = (i + 0.5) * src/dst - 0.5, clamped to the grid.
//! * Connected components use 6-connectivity; morphological closing uses the
//!   full 3x3x3 structuring element (26-neighborhood plus center) and is
//!   computed on a background-padded embedding of the volume — i.e. the true
//!   closing on the infinite grid, cropped back — so it is extensive and does
//!   not erode structures that touch the volume boundary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 3D scalar grid with spacing metadata. Dims are (depth, height,
/// width); data is row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64), data: Vec<f32>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::InvalidArgument(format!("volume dims must be positive, got {dims:?}")));
        }
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                n
            )));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume { dims, spacing, data })
    }

    /// Constant-valued volume with unit spacing.
    pub fn filled(dims: (usize, usize, usize), value: f32) -> Self {
        Volume {
            dims,
            spacing: (1.0, 1.0, 1.0),
            data: vec![value; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxel(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Replaces the payload with a same-length buffer.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume::new(self.dims, self.spacing, data)
    }
}

/// Integer label grid: 0 background, 1 liver, >= 2 tumor instances.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    labels: Vec<u16>,
}

impl MaskVolume {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64), labels: Vec<u16>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::InvalidArgument(format!("mask dims must be positive, got {dims:?}")));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "label length {} does not match dims {:?} (expected {})",
                labels.len(),
                dims,
                n
            )));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(MaskVolume { dims, spacing, labels })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    pub fn label(&self, z: usize, y: usize, x: usize) -> u16 {
        self.labels[self.index(z, y, x)]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Intensity preprocessing parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// CT clip range in HU.
    pub hu_clip: (f64, f64),
    /// PET clip percentiles in [0, 100].
    pub pet_percentiles: (f64, f64),
    /// Resample target (depth, height, width).
    pub target_dims: (usize, usize, usize),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            hu_clip: (-160.0, 240.0),
            pet_percentiles: (1.0, 99.0),
            target_dims: (64, 224, 224),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hu_clip.0 >= self.hu_clip.1 {
            return Err(Error::InvalidArgument(format!(
                "hu_clip low must be below high, got {:?}",
                self.hu_clip
            )));
        }
        if !(0.0..=100.0).contains(&self.pet_percentiles.0)
            || !(0.0..=100.0).contains(&self.pet_percentiles.1)
            || self.pet_percentiles.0 >= self.pet_percentiles.1
        {
            return Err(Error::InvalidArgument(format!(
                "pet_percentiles must satisfy 0 <= low < high <= 100, got {:?}",
                self.pet_percentiles
            )));
        }
        if self.target_dims.0 == 0 || self.target_dims.1 == 0 || self.target_dims.2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "target_dims must be positive, got {:?}",
                self.target_dims
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RvolHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

/// Strips a trailing `.json`/`.raw` so callers may pass either file or the stem.
fn rvol_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn read_header(stem: &Path) -> Result<RvolHeader> {
    let header_path = stem.with_extension("json");
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: RvolHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&header_path, format!("bad sidecar: {e}")))?;
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::format(&header_path, format!("non-positive dims {:?}", header.dims)));
    }
    if header.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::format(&header_path, format!("non-positive spacing {:?}", header.spacing)));
    }
    Ok(header)
}

/// Reads an `f32` RVOL pair. `path` may be the stem, the `.json`, or the `.raw`.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let stem = rvol_stem(path);
    let header = read_header(&stem)?;
    if header.dtype != "f32" {
        return Err(Error::format(
            stem.with_extension("json"),
            format!("expected dtype f32, got {:?}", header.dtype),
        ));
    }
    let raw_path = stem.with_extension("raw");
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    if bytes.len() != n * 4 {
        return Err(Error::format(
            &raw_path,
            format!("payload is {} bytes, header dims {:?} require {}", bytes.len(), header.dims, n * 4),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::format(&raw_path, format!("non-finite value at voxel {}", data.len())));
        }
        data.push(v);
    }
    Volume::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        (header.spacing[0], header.spacing[1], header.spacing[2]),
        data,
    )
}

/// Writes an `f32` RVOL pair next to `path`'s stem.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let stem = rvol_stem(path);
    let header = RvolHeader {
        dims: [v.dims.0, v.dims.1, v.dims.2],
        spacing: [v.spacing.0, v.spacing.1, v.spacing.2],
        dtype: "f32".to_string(),
    };
    let header_path = stem.with_extension("json");
    let text = serde_json::to_string(&header).expect("header serialization cannot fail");
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
    let raw_path = stem.with_extension("raw");
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for &x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Reads a `u16` RVOL mask pair.
pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    let stem = rvol_stem(path);
    let header = read_header(&stem)?;
    if header.dtype != "u16" {
        return Err(Error::format(
            stem.with_extension("json"),
            format!("expected dtype u16, got {:?}", header.dtype),
        ));
    }
    let raw_path = stem.with_extension("raw");
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    if bytes.len() != n * 2 {
        return Err(Error::format(
            &raw_path,
            format!("payload is {} bytes, header dims {:?} require {}", bytes.len(), header.dims, n * 2),
        ));
    }
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    MaskVolume::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        (header.spacing[0], header.spacing[1], header.spacing[2]),
        labels,
    )
}

/// Writes a `u16` RVOL mask pair.
pub fn write_mask(path: &Path, m: &MaskVolume) -> Result<()> {
    let stem = rvol_stem(path);
    let header = RvolHeader {
        dims: [m.dims.0, m.dims.1, m.dims.2],
        spacing: [m.spacing.0, m.spacing.1, m.spacing.2],
        dtype: "u16".to_string(),
    };
    let header_path = stem.with_extension("json");
    let text = serde_json::to_string(&header).expect("header serialization cannot fail");
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
    let raw_path = stem.with_extension("raw");
    let mut bytes = Vec::with_capacity(m.labels.len() * 2);
    for &x in &m.labels {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Clamps every voxel into `[low, high]`.
pub fn clip(v: &Volume, low: f64, high: f64) -> Volume {
    let data = v.data.iter().map(|&x| (x as f64).clamp(low, high) as f32).collect();
    Volume { dims: v.dims, spacing: v.spacing, data }
}

/// Per-volume z-score: subtracts the mean and divides by the population
/// standard deviation, both accumulated in f64.
///
/// A constant volume (min == max) is a degenerate-input error: silently
/// emitting zeros would poison downstream cosine similarities.
pub fn zscore(v: &Volume) -> Result<Volume> {
    let (min, max) = min_max(v);
    if min == max {
        return Err(Error::DegenerateInput(format!("constant volume (all voxels = {min})")));
    }
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let data = v.data.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect();
    v.with_data(data)
}

/// Maps the volume affinely onto [0, 1]; the minimum maps to exactly 0 and
/// the maximum to exactly 1.
pub fn minmax_normalize(v: &Volume) -> Result<Volume> {
    let (min, max) = min_max(v);
    if min == max {
        return Err(Error::DegenerateInput(format!("constant volume (all voxels = {min})")));
    }
    let range = max - min;
    let data = v.data.iter().map(|&x| ((x as f64 - min) / range) as f32).collect();
    v.with_data(data)
}

fn min_max(v: &Volume) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &x in &v.data {
        let x = x as f64;
        if x < min {
            min = x;
        }
        if x > max {
            max = x;
        }
    }
    (min, max)
}

/// Percentile by linear interpolation between closest ranks over the sorted
/// values: rank = p/100 * (n-1).
pub fn percentile(sorted: &[f32], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let rank = (p / 100.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi.min(n - 1)] as f64 * frac
}

/// Clips the volume to its `[lo_pct, hi_pct]` percentile range.
pub fn percentile_clip(v: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::InvalidArgument(format!(
            "percentiles must satisfy 0 <= low < high <= 100, got ({lo_pct}, {hi_pct})"
        )));
    }
    let mut sorted = v.data.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let low = percentile(&sorted, lo_pct);
    let high = percentile(&sorted, hi_pct);
    Ok(clip(v, low, high))
}

/// CT preprocessing: HU clip then global z-score.
pub fn preprocess_ct(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    zscore(&clip(v, cfg.hu_clip.0, cfg.hu_clip.1))
}

/// PET preprocessing: percentile clip, min-max to [0, 1], then per-volume
/// z-score. The standardization follows the min-max step; see the module
/// docs for the convention note.
pub fn preprocess_pet(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let clipped = percentile_clip(v, cfg.pet_percentiles.0, cfg.pet_percentiles.1)?;
    zscore(&minmax_normalize(&clipped)?)
}

/// Trilinear resampling onto `target` dims with voxel centers aligned on the
/// unit cube: source coordinate = (i + 0.5) * src/dst - 0.5, clamped.
pub fn resample(v: &Volume, target: (usize, usize, usize)) -> Result<Volume> {
    if target.0 == 0 || target.1 == 0 || target.2 == 0 {
        return Err(Error::InvalidArgument(format!("target dims must be positive, got {target:?}")));
    }
    let (sd, sh, sw) = v.dims;
    let (td, th, tw) = target;
    let coord = |i: usize, src: usize, dst: usize| -> f64 {
        (((i as f64 + 0.5) * src as f64 / dst as f64) - 0.5).clamp(0.0, (src - 1) as f64)
    };
    let mut data = Vec::with_capacity(td * th * tw);
    for z in 0..td {
        let fz = coord(z, sd, td);
        let z0 = fz.floor() as usize;
        let z1 = (z0 + 1).min(sd - 1);
        let dz = fz - z0 as f64;
        for y in 0..th {
            let fy = coord(y, sh, th);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let dy = fy - y0 as f64;
            for x in 0..tw {
                let fx = coord(x, sw, tw);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(sw - 1);
                let dx = fx - x0 as f64;
                let at = |zz: usize, yy: usize, xx: usize| v.voxel(zz, yy, xx) as f64;
                let c00 = at(z0, y0, x0) * (1.0 - dx) + at(z0, y0, x1) * dx;
                let c01 = at(z0, y1, x0) * (1.0 - dx) + at(z0, y1, x1) * dx;
                let c10 = at(z1, y0, x0) * (1.0 - dx) + at(z1, y0, x1) * dx;
                let c11 = at(z1, y1, x0) * (1.0 - dx) + at(z1, y1, x1) * dx;
                let c0 = c00 * (1.0 - dy) + c01 * dy;
                let c1 = c10 * (1.0 - dy) + c11 * dy;
                data.push((c0 * (1.0 - dz) + c1 * dz) as f32);
            }
        }
    }
    // Output spacing scales with the dimension ratio so physical extent holds.
    let spacing = (
        v.spacing.0 * sd as f64 / td as f64,
        v.spacing.1 * sh as f64 / th as f64,
        v.spacing.2 * sw as f64 / tw as f64,
    );
    Volume::new(target, spacing, data)
}

/// 6-connected components of `set`; each component is a sorted list of flat
/// voxel indices, returned in first-voxel order.
pub(crate) fn connected_components_6(set: &[bool], dims: (usize, usize, usize)) -> Vec<Vec<usize>> {
    let (d, h, w) = dims;
    let mut seen = vec![false; set.len()];
    let mut comps = Vec::new();
    for start in 0..set.len() {
        if !set[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let z = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            let mut push = |zz: isize, yy: isize, xx: isize| {
                if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                    return;
                }
                let j = (zz as usize * h + yy as usize) * w + xx as usize;
                if set[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            let (zi, yi, xi) = (z as isize, y as isize, x as isize);
            push(zi - 1, yi, xi);
            push(zi + 1, yi, xi);
            push(zi, yi - 1, xi);
            push(zi, yi + 1, xi);
            push(zi, yi, xi - 1);
            push(zi, yi, xi + 1);
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

fn dilate_26(set: &[bool], dims: (usize, usize, usize)) -> Vec<bool> {
    let (d, h, w) = dims;
    let mut out = vec![false; set.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                'probe: for dz in -1isize..=1 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                            if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            if set[(zz as usize * h + yy as usize) * w + xx as usize] {
                                out[i] = true;
                                break 'probe;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn erode_26(set: &[bool], dims: (usize, usize, usize)) -> Vec<bool> {
    let (d, h, w) = dims;
    let mut out = vec![false; set.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !set[i] {
                    continue;
                }
                let mut keep = true;
                'probe: for dz in -1isize..=1 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                            let inside = zz >= 0
                                && yy >= 0
                                && xx >= 0
                                && zz < d as isize
                                && yy < h as isize
                                && xx < w as isize;
                            // Out-of-bounds reads background; callers pad so
                            // this only triggers where the set cannot reach.
                            if !inside || !set[(zz as usize * h + yy as usize) * w + xx as usize] {
                                keep = false;
                                break 'probe;
                            }
                        }
                    }
                }
                out[i] = keep;
            }
        }
    }
    out
}

/// Applies `iterations` of binary closing on a background-padded embedding,
/// then crops back to the original dims.
fn close_26(set: &[bool], dims: (usize, usize, usize), iterations: usize) -> Vec<bool> {
    let (d, h, w) = dims;
    let pad = iterations + 1;
    let pdims = (d + 2 * pad, h + 2 * pad, w + 2 * pad);
    let mut padded = vec![false; pdims.0 * pdims.1 * pdims.2];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                padded[((z + pad) * pdims.1 + (y + pad)) * pdims.2 + (x + pad)] = set[(z * h + y) * w + x];
            }
        }
    }
    for _ in 0..iterations {
        padded = erode_26(&dilate_26(&padded, pdims), pdims);
    }
    let mut out = vec![false; set.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out[(z * h + y) * w + x] = padded[((z + pad) * pdims.1 + (y + pad)) * pdims.2 + (x + pad)];
            }
        }
    }
    out
}

/// Refines a label mask: per foreground class, keep the largest 6-connected
/// component, then apply two iterations of binary closing with the 3x3x3
/// structuring element. Tumor labels are reassigned by descending refined
/// voxel count starting at 2 (ties broken by original label).
///
/// On overlap after closing, tumors overwrite liver voxels; earlier (larger)
/// tumors keep contested voxels.
pub fn refine_mask(m: &MaskVolume) -> Result<MaskVolume> {
    let dims = m.dims;
    let labels_present: BTreeSet<u16> = m.labels.iter().copied().filter(|&l| l > 0).collect();
    if !labels_present.contains(&1) {
        return Err(Error::EmptyLiver);
    }

    let refine_one = |label: u16| -> Vec<bool> {
        let set: Vec<bool> = m.labels.iter().map(|&l| l == label).collect();
        let comps = connected_components_6(&set, dims);
        // Largest component; ties broken by earliest first voxel.
        let largest = comps
            .iter()
            .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
            .expect("label present implies at least one component");
        let mut kept = vec![false; set.len()];
        for &i in largest {
            kept[i] = true;
        }
        close_26(&kept, dims, 2)
    };

    let liver = refine_one(1);
    let mut tumors: Vec<(u16, Vec<bool>, usize)> = labels_present
        .iter()
        .filter(|&&l| l >= 2)
        .map(|&l| {
            let set = refine_one(l);
            let count = set.iter().filter(|&&b| b).count();
            (l, set, count)
        })
        .collect();
    tumors.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));

    let mut out = vec![0u16; m.labels.len()];
    for (i, &keep) in liver.iter().enumerate() {
        if keep {
            out[i] = 1;
        }
    }
    let mut next = 2u16;
    for (_, set, _) in &tumors {
        for (i, &keep) in set.iter().enumerate() {
            if keep && out[i] <= 1 {
                out[i] = next;
            }
        }
        next += 1;
    }
    MaskVolume::new(dims, m.spacing, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rvol_round_trip_zero_volume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros");
        let v = Volume::filled((2, 2, 2), 0.0);
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data(), &[0.0f32; 8]);
        assert_eq!(back.dims(), (2, 2, 2));
    }

    #[test]
    fn rvol_round_trip_payload_byte_exact_random() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let dims = (
                rng.gen_range(1..5usize),
                rng.gen_range(1..6usize),
                rng.gen_range(1..6usize),
            );
            let n = dims.0 * dims.1 * dims.2;
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-500.0..500.0)).collect();
            let v = Volume::new(dims, (1.5, 0.8, 0.8), data).unwrap();
            let path = dir.path().join(format!("t{trial}"));
            write_volume(&path, &v).unwrap();
            let bytes_a = std::fs::read(path.with_extension("raw")).unwrap();
            let back = read_volume(&path).unwrap();
            write_volume(&dir.path().join(format!("t{trial}_b")), &back).unwrap();
            let bytes_b = std::fs::read(dir.path().join(format!("t{trial}_b.raw"))).unwrap();
            assert_eq!(bytes_a, bytes_b, "payload bytes must round-trip");
            assert_eq!(back, v);
        }
    }

    #[test]
    fn rvol_length_mismatch_rejected() {
        // Header says 2x2x2 but the payload carries seven floats.
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        std::fs::write(
            stem.with_extension("json"),
            r#"{"dims":[2,2,2],"spacing":[1.0,1.0,1.0],"dtype":"f32"}"#,
        )
        .unwrap();
        let payload: Vec<u8> = (0..7).flat_map(|i| (i as f32).to_le_bytes()).collect();
        std::fs::write(stem.with_extension("raw"), payload).unwrap();
        match read_volume(&stem) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("28"), "{reason}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn rvol_missing_file_rejected() {
        assert!(matches!(read_volume(Path::new("/nonexistent/vol")), Err(Error::Io { .. })));
    }

    #[test]
    fn rvol_non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("nan");
        std::fs::write(
            stem.with_extension("json"),
            r#"{"dims":[1,1,2],"spacing":[1.0,1.0,1.0],"dtype":"f32"}"#,
        )
        .unwrap();
        let mut payload = 1.0f32.to_le_bytes().to_vec();
        payload.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(stem.with_extension("raw"), payload).unwrap();
        assert!(matches!(read_volume(&stem), Err(Error::Format { .. })));
    }

    #[test]
    fn clip_bound_participates() {
        let v = Volume::new((1, 1, 3), (1.0, 1.0, 1.0), vec![500.0, 0.0, -300.0]).unwrap();
        let c = clip(&v, -160.0, 240.0);
        assert_eq!(c.data(), &[240.0, 0.0, -160.0]);
    }

    #[test]
    fn preprocess_ct_hand_arithmetic() {
        // {-200, 0, 300} clips to {-160, 0, 240}; mean 80/3, population
        // variance 729600/27. The oracle recomputes both from first
        // principles.
        let v = Volume::new((1, 1, 3), (1.0, 1.0, 1.0), vec![-200.0, 0.0, 300.0]).unwrap();
        let out = preprocess_ct(&v, &PreprocessConfig::default()).unwrap();
        let clipped = [-160.0f64, 0.0, 240.0];
        let mean = clipped.iter().sum::<f64>() / 3.0;
        let std = (clipped.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(close(mean, 80.0 / 3.0, 1e-12));
        assert!(close(std * std, 729600.0 / 27.0, 1e-9));
        for (got, want) in out.data().iter().zip(clipped.iter().map(|x| (x - mean) / std)) {
            assert!(close(*got as f64, want, 1e-6), "{got} vs {want}");
        }
    }

    #[test]
    fn preprocess_ct_normalizes_mean_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(8..200usize);
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-400.0..400.0)).collect();
            let v = Volume::new((1, 1, n), (1.0, 1.0, 1.0), data).unwrap();
            let out = preprocess_ct(&v, &PreprocessConfig::default()).unwrap();
            let m = out.data().iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            let s = (out.data().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((s - 1.0).abs() < 1e-5, "std {s}");
        }
    }

    #[test]
    fn preprocess_ct_fixed_point() {
        // Already zero-mean unit-std within the clip range stays unchanged.
        let data = vec![-1.0f32, 1.0, -1.0, 1.0];
        let v = Volume::new((1, 1, 4), (1.0, 1.0, 1.0), data.clone()).unwrap();
        let out = preprocess_ct(&v, &PreprocessConfig::default()).unwrap();
        for (a, b) in out.data().iter().zip(&data) {
            assert!(close(*a as f64, *b as f64, 1e-5));
        }
    }

    #[test]
    fn zscore_constant_volume_fails() {
        let v = Volume::filled((2, 2, 2), 7.0);
        assert!(matches!(zscore(&v), Err(Error::DegenerateInput(_))));
        assert!(matches!(
            preprocess_ct(&v, &PreprocessConfig::default()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn minmax_endpoints() {
        let v = Volume::new((1, 1, 2), (1.0, 1.0, 1.0), vec![0.0, 10.0]).unwrap();
        let out = minmax_normalize(&v).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
        assert!(matches!(
            minmax_normalize(&Volume::filled((1, 1, 2), 3.0)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn percentile_matches_sort_oracle() {
        // 1..100 evenly spaced: the inclusive convention puts p1 at 1.99 and
        // p99 at 99.01.
        let data: Vec<f32> = (1..=100).map(|i| i as f32).collect();
        let mut sorted = data.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(close(percentile(&sorted, 1.0), 1.99, 1e-9));
        assert!(close(percentile(&sorted, 99.0), 99.01, 1e-9));

        // Random volumes against an independently coded rank interpolation.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..64usize);
            let mut vals: Vec<f32> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let p = rng.gen_range(0.0..100.0);
            let rank = p / 100.0 * (n - 1) as f64;
            let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
            let expect = vals[lo] as f64 + (rank - lo as f64) * (vals[hi] as f64 - vals[lo] as f64);
            assert!(close(percentile(&vals, p), expect, 1e-9));
        }
    }

    #[test]
    fn preprocess_pet_minmax_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.gen_range(4..128usize);
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..25.0)).collect();
            let v = Volume::new((1, 1, n), (1.0, 1.0, 1.0), data).unwrap();
            let cfg = PreprocessConfig::default();
            let clipped = percentile_clip(&v, cfg.pet_percentiles.0, cfg.pet_percentiles.1).unwrap();
            if let Ok(mm) = minmax_normalize(&clipped) {
                let lo = mm.data().iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = mm.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                assert_eq!(lo, 0.0);
                assert_eq!(hi, 1.0);
            }
        }
    }

    #[test]
    fn preprocess_pet_constant_fails() {
        let v = Volume::filled((1, 2, 2), 4.0);
        assert!(matches!(
            preprocess_pet(&v, &PreprocessConfig::default()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn resample_identity_when_target_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data: Vec<f32> = (0..60).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let v = Volume::new((3, 4, 5), (1.0, 1.0, 1.0), data.clone()).unwrap();
        let out = resample(&v, (3, 4, 5)).unwrap();
        for (a, b) in out.data().iter().zip(&data) {
            assert!(close(*a as f64, *b as f64, 1e-6));
        }
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Volume::filled((2, 3, 4), 2.5);
        let out = resample(&v, (5, 7, 3)).unwrap();
        assert!(out.data().iter().all(|&x| (x - 2.5).abs() < 1e-6));
        assert_eq!(out.dims(), (5, 7, 3));
    }

    #[test]
    fn resample_ramp_matches_analytic_line() {
        // Ramp f(x) = 2x + 1 along the x axis; 4 -> 7 samples. The oracle is
        // the line evaluated at the documented clamped center positions.
        let data: Vec<f32> = (0..4).map(|x| 2.0 * x as f32 + 1.0).collect();
        let v = Volume::new((1, 1, 4), (1.0, 1.0, 1.0), data).unwrap();
        let out = resample(&v, (1, 1, 7)).unwrap();
        for j in 0..7 {
            let src = (((j as f64 + 0.5) * 4.0 / 7.0) - 0.5).clamp(0.0, 3.0);
            let want = 2.0 * src + 1.0;
            assert!(close(out.data()[j] as f64, want, 1e-6), "sample {j}");
        }
    }

    #[test]
    fn resample_axis_order_preserved() {
        // A field varying only along z must still vary only along z.
        let mut data = vec![0.0f32; 4 * 2 * 2];
        for z in 0..4 {
            for i in 0..4 {
                data[z * 4 + i] = z as f32;
            }
        }
        let v = Volume::new((4, 2, 2), (1.0, 1.0, 1.0), data).unwrap();
        let out = resample(&v, (8, 2, 2)).unwrap();
        for z in 0..8 {
            let base = out.voxel(z, 0, 0);
            for y in 0..2 {
                for x in 0..2 {
                    assert!(close(out.voxel(z, y, x) as f64, base as f64, 1e-6));
                }
            }
        }
    }

    fn cube_mask(dims: (usize, usize, usize)) -> Vec<u16> {
        vec![0; dims.0 * dims.1 * dims.2]
    }

    #[test]
    fn refine_mask_removes_small_component() {
        // Liver split into a 100-voxel slab and a 3-voxel fragment.
        let dims = (5, 6, 8);
        let mut labels = cube_mask(dims);
        let idx = |z: usize, y: usize, x: usize| (z * dims.1 + y) * dims.2 + x;
        let mut big = 0;
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..4 {
                    labels[idx(z, y, x)] = 1;
                    big += 1;
                }
            }
        }
        assert_eq!(big, 100);
        labels[idx(0, 0, 7)] = 1;
        labels[idx(1, 0, 7)] = 1;
        labels[idx(2, 0, 7)] = 1;
        let m = MaskVolume::new(dims, (1.0, 1.0, 1.0), labels).unwrap();
        let out = refine_mask(&m).unwrap();
        assert_eq!(out.label(0, 0, 7), 0);
        assert_eq!(out.label(1, 0, 7), 0);
        // Independent flood-fill oracle: exactly one liver component remains.
        let set: Vec<bool> = out.labels().iter().map(|&l| l == 1).collect();
        assert_eq!(connected_components_6(&set, dims).len(), 1);
    }

    #[test]
    fn refine_mask_fills_hole_by_closing() {
        // A 5x5x5 solid liver with a single interior voxel removed; the
        // closing fills it. Verified against a brute-force dilate/erode
        // oracle built from the same documented conventions.
        let dims = (7, 7, 7);
        let mut labels = cube_mask(dims);
        let idx = |z: usize, y: usize, x: usize| (z * dims.1 + y) * dims.2 + x;
        for z in 1..6 {
            for y in 1..6 {
                for x in 1..6 {
                    labels[idx(z, y, x)] = 1;
                }
            }
        }
        labels[idx(3, 3, 3)] = 0;
        let m = MaskVolume::new(dims, (1.0, 1.0, 1.0), labels.clone()).unwrap();
        let out = refine_mask(&m).unwrap();
        assert_eq!(out.label(3, 3, 3), 1, "interior hole must be filled");

        // Oracle: set-based dilation/erosion on the unbounded grid, cropped.
        use std::collections::HashSet;
        type P = (isize, isize, isize);
        let dilate = |s: &HashSet<P>| -> HashSet<P> {
            let mut out = HashSet::new();
            for &(z, y, x) in s {
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            out.insert((z + dz, y + dy, x + dx));
                        }
                    }
                }
            }
            out
        };
        let erode = |s: &HashSet<P>| -> HashSet<P> {
            s.iter()
                .filter(|&&(z, y, x)| {
                    (-1..=1).all(|dz| {
                        (-1..=1).all(|dy| (-1..=1).all(|dx| s.contains(&(z + dz, y + dy, x + dx))))
                    })
                })
                .copied()
                .collect()
        };
        let mut s: HashSet<P> = HashSet::new();
        for z in 0..dims.0 {
            for y in 0..dims.1 {
                for x in 0..dims.2 {
                    if labels[idx(z, y, x)] == 1 {
                        s.insert((z as isize, y as isize, x as isize));
                    }
                }
            }
        }
        for _ in 0..2 {
            s = erode(&dilate(&s));
        }
        for z in 0..dims.0 {
            for y in 0..dims.1 {
                for x in 0..dims.2 {
                    let want = s.contains(&(z as isize, y as isize, x as isize));
                    assert_eq!(out.label(z, y, x) == 1, want, "voxel ({z},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn refine_mask_solid_blob_unchanged() {
        let dims = (6, 6, 6);
        let mut labels = cube_mask(dims);
        let idx = |z: usize, y: usize, x: usize| (z * dims.1 + y) * dims.2 + x;
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    labels[idx(z, y, x)] = 1;
                }
            }
        }
        let m = MaskVolume::new(dims, (1.0, 1.0, 1.0), labels).unwrap();
        let out = refine_mask(&m).unwrap();
        assert_eq!(out.labels(), m.labels());
        // Idempotence.
        let again = refine_mask(&out).unwrap();
        assert_eq!(again.labels(), out.labels());
    }

    #[test]
    fn refine_mask_relabels_tumors_by_size() {
        let dims = (4, 6, 12);
        let mut labels = cube_mask(dims);
        let idx = |z: usize, y: usize, x: usize| (z * dims.1 + y) * dims.2 + x;
        for z in 0..4 {
            for y in 0..6 {
                for x in 0..12 {
                    labels[idx(z, y, x)] = 1;
                }
            }
        }
        // Tumor label 5: 2 voxels; tumor label 2: 4 voxels. After refinement
        // the larger one must carry label 2.
        labels[idx(1, 1, 1)] = 5;
        labels[idx(1, 1, 2)] = 5;
        for x in 6..10 {
            labels[idx(2, 3, x)] = 2;
        }
        let m = MaskVolume::new(dims, (1.0, 1.0, 1.0), labels).unwrap();
        let out = refine_mask(&m).unwrap();
        let count = |l: u16| out.labels().iter().filter(|&&v| v == l).count();
        assert_eq!(count(2), 4);
        assert_eq!(count(3), 2);
        assert_eq!(out.label(2, 3, 6), 2);
        assert_eq!(out.label(1, 1, 1), 3);
    }

    #[test]
    fn refine_mask_empty_liver_rejected() {
        let m = MaskVolume::new((2, 2, 2), (1.0, 1.0, 1.0), vec![0; 8]).unwrap();
        assert!(matches!(refine_mask(&m), Err(Error::EmptyLiver)));
        let m2 = MaskVolume::new((2, 2, 2), (1.0, 1.0, 1.0), vec![2; 8]).unwrap();
        assert!(matches!(refine_mask(&m2), Err(Error::EmptyLiver)));
    }

    #[test]
    fn refine_mask_component_count_never_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..40 {
            let dims = (
                rng.gen_range(3..7usize),
                rng.gen_range(3..8usize),
                rng.gen_range(3..8usize),
            );
            let n = dims.0 * dims.1 * dims.2;
            let mut labels: Vec<u16> = (0..n)
                .map(|_| {
                    let r: f64 = rng.gen();
                    if r < 0.55 {
                        0
                    } else if r < 0.85 {
                        1
                    } else if r < 0.95 {
                        2
                    } else {
                        3
                    }
                })
                .collect();
            if !labels.contains(&1) {
                labels[0] = 1;
            }
            let m = MaskVolume::new(dims, (1.0, 1.0, 1.0), labels).unwrap();
            let out = refine_mask(&m).unwrap();
            let in_labels: BTreeSet<u16> = m.labels().iter().copied().filter(|&l| l > 0).collect();
            let out_labels: BTreeSet<u16> = out.labels().iter().copied().filter(|&l| l > 0).collect();
            // No fabricated classes: at most as many tumor labels as before,
            // and each output label count per class is a single component.
            assert!(out_labels.len() <= in_labels.len());
            for &l in &out_labels {
                let set: Vec<bool> = out.labels().iter().map(|&v| v == l).collect();
                let comps = connected_components_6(&set, dims);
                assert!(comps.len() <= 1 || l == 1, "label {l} has {} components", comps.len());
            }
        }
    }
}
