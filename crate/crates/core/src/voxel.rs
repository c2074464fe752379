//! Sparse voxel grids on the normalized object cube `[-0.5, 0.5]³`,
//! depth-guided feature back-projection, multi-view fusion and 3D sinusoidal
//! positional encodings.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{unproject_pixel, GeometryError, Vec3, Viewpoint};
use crate::render::{DepthImage, FeatureImage};

/// Integer lattice coordinate `(x, y, z)`, each in `[0, r)`.
pub type VoxelIndex = [usize; 3];

/// Half-extent of the normalized object cube.
pub const CUBE_HALF: f64 = 0.5;

/// Distance (world units) an unprojected surface point is advanced along its
/// viewing ray before quantization, so hits on a voxel's entry face land in
/// that voxel rather than the empty one in front of it.
pub const SURFACE_BIAS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("empty condition: the fused grid has no voxels")]
    EmptyCondition,
    #[error("positional encoding needs dim >= 6, got {0}")]
    EncodingDim(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Lattice index of a world coordinate, or `None` outside the cube.
pub fn quantize_coord(c: f64, r: usize) -> Option<usize> {
    if !(-CUBE_HALF..=CUBE_HALF).contains(&c) {
        return None;
    }
    let i = ((c + CUBE_HALF) * r as f64).floor() as usize;
    Some(i.min(r - 1))
}

pub fn quantize_point(p: &Vec3, r: usize) -> Option<VoxelIndex> {
    Some([
        quantize_coord(p.x, r)?,
        quantize_coord(p.y, r)?,
        quantize_coord(p.z, r)?,
    ])
}

/// World-space centre of a voxel.
pub fn voxel_center(index: &VoxelIndex, r: usize) -> Vec3 {
    let s = 1.0 / r as f64;
    Vec3::new(
        (index[0] as f64 + 0.5) * s - CUBE_HALF,
        (index[1] as f64 + 0.5) * s - CUBE_HALF,
        (index[2] as f64 + 0.5) * s - CUBE_HALF,
    )
}

/// Offset of `index` in an x-fastest dense layout.
pub fn linear_index(index: &VoxelIndex, r: usize) -> usize {
    (index[2] * r + index[1]) * r + index[0]
}

pub fn index_from_linear(i: usize, r: usize) -> VoxelIndex {
    [i % r, (i / r) % r, i / (r * r)]
}

fn cmp_features(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelEntry {
    pub index: VoxelIndex,
    pub feature: Vec<f64>,
    /// Number of views contributing to this voxel.
    pub weight: u32,
}

/// Sparse `(index, feature, weight)` set on an `r³` lattice, sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    resolution: usize,
    channels: usize,
    entries: Vec<VoxelEntry>,
    /// Pixels discarded because they unprojected outside the cube.
    out_of_cube: usize,
}

impl SparseVoxelGrid {
    pub fn empty(resolution: usize, channels: usize) -> Self {
        Self {
            resolution,
            channels,
            entries: Vec::new(),
            out_of_cube: 0,
        }
    }

    /// Build from entries in any order; indices must be unique.
    pub fn from_entries(
        resolution: usize,
        channels: usize,
        mut entries: Vec<VoxelEntry>,
    ) -> Result<Self, VoxelError> {
        if resolution == 0 {
            return Err(VoxelError::Invalid("resolution must be positive".into()));
        }
        for e in &entries {
            if e.index.iter().any(|&i| i >= resolution) {
                return Err(VoxelError::Invalid(format!(
                    "index {:?} outside r={resolution}",
                    e.index
                )));
            }
            if e.feature.len() != channels {
                return Err(VoxelError::Shape(format!(
                    "feature length {} != channels {channels}",
                    e.feature.len()
                )));
            }
            if !e.feature.iter().all(|v| v.is_finite()) {
                return Err(VoxelError::Invalid(format!(
                    "non-finite feature at {:?}",
                    e.index
                )));
            }
            if e.weight == 0 {
                return Err(VoxelError::Invalid(format!("zero weight at {:?}", e.index)));
            }
        }
        entries.sort_by_key(|e| e.index);
        if entries.windows(2).any(|w| w[0].index == w[1].index) {
            return Err(VoxelError::Invalid("duplicate voxel index".into()));
        }
        Ok(Self {
            resolution,
            channels,
            entries,
            out_of_cube: 0,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn entries(&self) -> &[VoxelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn out_of_cube(&self) -> usize {
        self.out_of_cube
    }

    pub fn get(&self, index: &VoxelIndex) -> Option<&VoxelEntry> {
        self.entries
            .binary_search_by(|e| e.index.cmp(index))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn occupancy(&self) -> Occupancy {
        Occupancy {
            resolution: self.resolution,
            indices: self.entries.iter().map(|e| e.index).collect(),
        }
    }
}

/// Back-project every valid pixel of one RGBD observation into the lattice.
/// Features falling into the same voxel are averaged.
pub fn backproject_view(
    depth: &DepthImage,
    features: &FeatureImage,
    view: &Viewpoint,
    r: usize,
) -> Result<SparseVoxelGrid, VoxelError> {
    let k = &view.intrinsics;
    if depth.width != k.width || depth.height != k.height {
        return Err(VoxelError::Shape(format!(
            "depth {}x{} vs camera {}x{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    if features.width != k.width || features.height != k.height {
        return Err(VoxelError::Shape(format!(
            "features {}x{} vs camera {}x{}",
            features.width, features.height, k.width, k.height
        )));
    }
    if r == 0 {
        return Err(VoxelError::Invalid("resolution must be positive".into()));
    }
    let channels = features.channels;
    let origin = view.pose.origin();
    // (index, pixel feature) pairs, reduced after a sort.
    let mut hits: Vec<(VoxelIndex, usize)> = Vec::new();
    let mut out_of_cube = 0;
    for j in 0..k.height {
        for i in 0..k.width {
            let d = depth.get(i, j);
            if d <= 0.0 {
                continue;
            }
            let p = unproject_pixel(i as f64 + 0.5, j as f64 + 0.5, d, view)?;
            let ray = p - origin;
            let p = p + ray * (SURFACE_BIAS / ray.norm());
            match quantize_point(&p, r) {
                Some(idx) => hits.push((idx, (j * k.width + i) as usize)),
                None => out_of_cube += 1,
            }
        }
    }
    hits.sort();
    let mut entries: Vec<VoxelEntry> = Vec::new();
    let mut start = 0;
    while start < hits.len() {
        let idx = hits[start].0;
        let end = start + hits[start..].iter().take_while(|h| h.0 == idx).count();
        let mut mean = vec![0.0; channels];
        for &(_, pixel) in &hits[start..end] {
            for (m, f) in mean.iter_mut().zip(features.pixel(pixel)) {
                *m += f;
            }
        }
        let n = (end - start) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        entries.push(VoxelEntry {
            index: idx,
            feature: mean,
            weight: 1,
        });
        start = end;
    }
    Ok(SparseVoxelGrid {
        resolution: r,
        channels,
        entries,
        out_of_cube,
    })
}

/// Union of positions; overlapping voxels get the weight-weighted mean of
/// their features and the sum of their weights.
///
/// Contributions to each voxel are accumulated in a canonical order (by
/// weight, then feature values), so the result is bit-identical under any
/// permutation of `grids`.
pub fn fuse(grids: &[SparseVoxelGrid]) -> Result<SparseVoxelGrid, VoxelError> {
    let first = grids
        .first()
        .ok_or_else(|| VoxelError::Shape("nothing to fuse".into()))?;
    let (r, c) = (first.resolution, first.channels);
    if let Some(g) = grids.iter().find(|g| g.resolution != r || g.channels != c) {
        return Err(VoxelError::Shape(format!(
            "cannot fuse r={}, C={} with r={r}, C={c}",
            g.resolution, g.channels
        )));
    }
    let mut all: Vec<&VoxelEntry> = grids.iter().flat_map(|g| g.entries.iter()).collect();
    all.sort_by(|a, b| {
        a.index
            .cmp(&b.index)
            .then(a.weight.cmp(&b.weight))
            .then_with(|| cmp_features(&a.feature, &b.feature))
    });
    let mut entries = Vec::new();
    let mut start = 0;
    while start < all.len() {
        let idx = all[start].index;
        let end = start + all[start..].iter().take_while(|e| e.index == idx).count();
        let group = &all[start..end];
        let weight: u32 = group.iter().map(|e| e.weight).sum();
        let feature = if group.len() == 1 {
            group[0].feature.clone()
        } else {
            let mut acc = vec![0.0; c];
            for e in group {
                let w = e.weight as f64;
                for (a, f) in acc.iter_mut().zip(&e.feature) {
                    *a += w * f;
                }
            }
            acc.iter().map(|a| a / weight as f64).collect()
        };
        entries.push(VoxelEntry {
            index: idx,
            feature,
            weight,
        });
        start = end;
    }
    let out_of_cube = grids.iter().map(|g| g.out_of_cube).sum();
    Ok(SparseVoxelGrid {
        resolution: r,
        channels: c,
        entries,
        out_of_cube,
    })
}

/// Concatenated per-axis sinusoidal encodings of an integer lattice index.
///
/// Each axis gets a block of `dim / 3` slots holding `[sin(x ω_i), cos(x ω_i)]`
/// pairs with `ω_i = 10000^(-2i / (dim/3))`; unused slots are zero.
pub fn positional_encoding_3d(
    index: &VoxelIndex,
    r: usize,
    dim: usize,
) -> Result<Vec<f64>, VoxelError> {
    if dim < 6 {
        return Err(VoxelError::EncodingDim(dim));
    }
    if index.iter().any(|&i| i >= r) {
        return Err(VoxelError::Invalid(format!(
            "index {index:?} outside r={r}"
        )));
    }
    let block = dim / 3;
    let mut out = vec![0.0; dim];
    for (axis, &x) in index.iter().enumerate() {
        let base = axis * block;
        for i in 0..block / 2 {
            let freq = 10000f64.powf(-2.0 * i as f64 / block as f64);
            let (s, c) = (x as f64 * freq).sin_cos();
            out[base + 2 * i] = s;
            out[base + 2 * i + 1] = c;
        }
    }
    Ok(out)
}

/// Dense `r³ × C` tensor, x-fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseGrid {
    resolution: usize,
    channels: usize,
    values: Vec<f64>,
}

impl DenseGrid {
    pub fn new(resolution: usize, channels: usize, values: Vec<f64>) -> Result<Self, VoxelError> {
        let expected = resolution.pow(3) * channels;
        if values.len() != expected {
            return Err(VoxelError::Shape(format!(
                "dense grid needs {expected} values, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(VoxelError::Invalid("non-finite dense value".into()));
        }
        Ok(Self {
            resolution,
            channels,
            values,
        })
    }

    pub fn filled(resolution: usize, channels: usize, value: f64) -> Self {
        Self {
            resolution,
            channels,
            values: vec![value; resolution.pow(3) * channels],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, index: &VoxelIndex, channel: usize) -> f64 {
        self.values[linear_index(index, self.resolution) * self.channels + channel]
    }
}

/// Occupied indices of a single-channel latent whose value exceeds `threshold`.
pub fn dense_threshold(latent: &DenseGrid, threshold: f64) -> Result<Occupancy, VoxelError> {
    if latent.channels != 1 {
        return Err(VoxelError::Shape(format!(
            "threshold needs C=1, got C={}",
            latent.channels
        )));
    }
    let r = latent.resolution;
    let mut indices: Vec<VoxelIndex> = latent
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, _)| index_from_linear(i, r))
        .collect();
    indices.sort();
    Ok(Occupancy {
        resolution: r,
        indices,
    })
}

/// Sorted, unique set of occupied voxels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occupancy {
    resolution: usize,
    indices: Vec<VoxelIndex>,
}

impl Occupancy {
    pub fn new(resolution: usize, mut indices: Vec<VoxelIndex>) -> Result<Self, VoxelError> {
        if resolution == 0 {
            return Err(VoxelError::Invalid("resolution must be positive".into()));
        }
        if let Some(bad) = indices.iter().find(|i| i.iter().any(|&c| c >= resolution)) {
            return Err(VoxelError::Invalid(format!(
                "index {bad:?} outside r={resolution}"
            )));
        }
        indices.sort();
        indices.dedup();
        Ok(Self {
            resolution,
            indices,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn indices(&self) -> &[VoxelIndex] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: &VoxelIndex) -> bool {
        self.indices.binary_search(index).is_ok()
    }

    /// Dense x-fastest occupancy mask.
    pub fn to_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.resolution.pow(3)];
        for idx in &self.indices {
            mask[linear_index(idx, self.resolution)] = true;
        }
        mask
    }

    /// ±1 single-channel dense grid.
    pub fn to_dense(&self) -> DenseGrid {
        let values = self
            .to_mask()
            .into_iter()
            .map(|b| if b { 1.0 } else { -1.0 })
            .collect();
        DenseGrid {
            resolution: self.resolution,
            channels: 1,
            values,
        }
    }
}

/// Condition tokens `feature + PE(position)`, sorted by position.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    pub resolution: usize,
    pub channels: usize,
    pub tokens: Vec<(VoxelIndex, Vec<f64>)>,
}

impl ConditionTokens {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Mean over tokens.
    pub fn pooled(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.channels];
        for (_, t) in &self.tokens {
            for (m, v) in mean.iter_mut().zip(t) {
                *m += v;
            }
        }
        let n = self.tokens.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

pub fn to_condition(grid: &SparseVoxelGrid) -> Result<ConditionTokens, VoxelError> {
    if grid.is_empty() {
        return Err(VoxelError::EmptyCondition);
    }
    let tokens = grid
        .entries
        .iter()
        .map(|e| {
            let pe = positional_encoding_3d(&e.index, grid.resolution, grid.channels)?;
            Ok((
                e.index,
                e.feature.iter().zip(&pe).map(|(f, p)| f + p).collect(),
            ))
        })
        .collect::<Result<_, VoxelError>>()?;
    Ok(ConditionTokens {
        resolution: grid.resolution,
        channels: grid.channels,
        tokens,
    })
}

/// `.svox.json` form of a [`SparseVoxelGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvoxFile {
    pub resolution: usize,
    pub channels: usize,
    pub indices: Vec<VoxelIndex>,
    pub features: Vec<Vec<f64>>,
    pub weights: Vec<u32>,
}

impl From<&SparseVoxelGrid> for SvoxFile {
    fn from(g: &SparseVoxelGrid) -> Self {
        Self {
            resolution: g.resolution,
            channels: g.channels,
            indices: g.entries.iter().map(|e| e.index).collect(),
            features: g.entries.iter().map(|e| e.feature.clone()).collect(),
            weights: g.entries.iter().map(|e| e.weight).collect(),
        }
    }
}

impl TryFrom<SvoxFile> for SparseVoxelGrid {
    type Error = VoxelError;

    fn try_from(f: SvoxFile) -> Result<Self, VoxelError> {
        if f.indices.len() != f.features.len() || f.indices.len() != f.weights.len() {
            return Err(VoxelError::Shape(
                "indices, features and weights differ in length".into(),
            ));
        }
        if f.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(VoxelError::Invalid(
                "indices must be strictly sorted".into(),
            ));
        }
        let entries = f
            .indices
            .into_iter()
            .zip(f.features)
            .zip(f.weights)
            .map(|((index, feature), weight)| VoxelEntry {
                index,
                feature,
                weight,
            })
            .collect();
        SparseVoxelGrid::from_entries(f.resolution, f.channels, entries)
    }
}
