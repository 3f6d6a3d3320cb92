//! Sparse voxel layers, index arithmetic across downsampling levels, and
//! radius queries over voxel centroids.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::centroid;
use crate::error::{Error, Result};
use crate::geometry::{norm_sq, sub, Vec3};
use crate::pcio::{PointCloud, RangeSpec};

/// Integer voxel index `(x, y, z)`. Ordering is lexicographic.
pub type VoxelCoord = [i32; 3];

/// Regular grid: `origin` is the range minimum, `cell` the per-axis voxel size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub origin: Vec3,
    pub cell: Vec3,
    pub dims: [i32; 3],
}

impl VoxelSpec {
    pub fn new(origin: Vec3, cell: Vec3, dims: [i32; 3]) -> Result<Self> {
        let spec = Self { origin, cell, dims };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.cell.iter().all(|c| c.is_finite() && *c > 0.0) {
            return Err(Error::Config(format!("voxel cell must be positive, got {:?}", self.cell)));
        }
        if !self.dims.iter().all(|d| *d >= 1) {
            return Err(Error::Config(format!("voxel dims must be >= 1, got {:?}", self.dims)));
        }
        if self.dims.iter().any(|d| *d >= 1 << 21) {
            return Err(Error::Config(format!("voxel dims exceed 2^21, got {:?}", self.dims)));
        }
        Ok(())
    }

    /// Grid covering `range` with the given cell size; partial cells at the
    /// upper edge are kept.
    pub fn from_range(range: &RangeSpec, cell: Vec3) -> Result<Self> {
        range.validate()?;
        let mut dims = [0i32; 3];
        for a in 0..3 {
            let n = (range.max[a] - range.min[a]) / cell[a];
            // 70.4 / 0.05 lands a hair above 1408
            dims[a] = (n - 1e-9).ceil().max(1.0) as i32;
        }
        Self::new(range.min, cell, dims)
    }

    pub fn kitti() -> Self {
        Self::from_range(&RangeSpec::kitti(), [0.05, 0.05, 0.1]).expect("kitti spec")
    }

    pub fn waymo() -> Self {
        Self::from_range(&RangeSpec::waymo(), [0.1, 0.1, 0.15]).expect("waymo spec")
    }

    #[inline]
    pub fn contains_coord(&self, h: VoxelCoord) -> bool {
        (0..3).all(|a| h[a] >= 0 && h[a] < self.dims[a])
    }

    /// Spatial extent `[min, max)` of voxel `h`.
    pub fn cell_bounds(&self, h: VoxelCoord) -> (Vec3, Vec3) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.origin[a] + h[a] as f64 * self.cell[a];
            hi[a] = self.origin[a] + (h[a] + 1) as f64 * self.cell[a];
        }
        (lo, hi)
    }

    /// Grid seen by the output of a convolution with `conv`'s stride.
    pub fn downsampled(&self, conv: &ConvMapSpec) -> Self {
        let mut cell = self.cell;
        let mut dims = self.dims;
        for a in 0..3 {
            cell[a] *= conv.stride[a] as f64;
            dims[a] = (self.dims[a] + conv.stride[a] - 1) / conv.stride[a];
        }
        Self { origin: self.origin, cell, dims }
    }

    /// Packs an in-grid coordinate into a key that sorts lexicographically.
    #[inline]
    pub(crate) fn pack(h: VoxelCoord) -> u64 {
        ((h[0] as u64) << 42) | ((h[1] as u64) << 21) | h[2] as u64
    }

    #[inline]
    pub(crate) fn unpack(key: u64) -> VoxelCoord {
        let mask = (1u64 << 21) - 1;
        [(key >> 42) as i32, ((key >> 21) & mask) as i32, (key & mask) as i32]
    }
}

/// `floor((coord - origin) / cell)` per axis; `None` when outside `[0, dims)`.
#[inline]
pub fn voxel_index_of(p: Vec3, spec: &VoxelSpec) -> Option<VoxelCoord> {
    let mut h = [0i32; 3];
    for a in 0..3 {
        let f = ((p[a] - spec.origin[a]) / spec.cell[a]).floor();
        if !(f >= 0.0 && f < spec.dims[a] as f64) {
            return None;
        }
        h[a] = f as i32;
    }
    Some(h)
}

/// Index mapping of one sparse convolution block.
///
/// The mapping is `floor(h / stride)`; kernel and padding do not enter the
/// arithmetic (padding is folded into the shared grid origin), so a chain of
/// strides composes into a single coarse voxelization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvMapSpec {
    pub kernel: [i32; 3],
    pub stride: [i32; 3],
    pub padding: [i32; 3],
}

impl ConvMapSpec {
    pub fn new(kernel: [i32; 3], stride: [i32; 3], padding: [i32; 3]) -> Result<Self> {
        let c = Self { kernel, stride, padding };
        c.validate()?;
        Ok(c)
    }

    /// 3×3×3 kernel, padding 1, uniform stride.
    pub fn with_stride(stride: i32) -> Self {
        Self { kernel: [3; 3], stride: [stride; 3], padding: [1; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride.iter().any(|s| *s < 1) || self.kernel.iter().any(|k| *k < 1) {
            return Err(Error::Config(format!("conv map needs stride >= 1 and kernel >= 1, got {self:?}")));
        }
        if self.padding.iter().any(|p| *p < 0) {
            return Err(Error::Config(format!("negative padding in {self:?}")));
        }
        Ok(())
    }
}

/// Output coordinate covering `h`; `None` if any component would be negative.
#[inline]
pub fn downsample_index(h: VoxelCoord, conv: &ConvMapSpec) -> Option<VoxelCoord> {
    let mut out = [0i32; 3];
    for a in 0..3 {
        let v = h[a].div_euclid(conv.stride[a]);
        if v < 0 {
            return None;
        }
        out[a] = v;
    }
    Some(out)
}

/// Non-empty voxels of one backbone level.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelLayer {
    level: usize,
    spec: VoxelSpec,
    coords: Vec<VoxelCoord>,
    counts: Vec<u64>,
    centroids: Vec<Vec3>,
    feat_dim: usize,
    feats: Vec<f64>,
    index: HashMap<VoxelCoord, usize>,
}

impl SparseVoxelLayer {
    /// Assembles a layer and checks its invariants: unique in-grid coords,
    /// positive counts, finite centroids and consistent buffer lengths.
    pub fn new(
        level: usize,
        spec: VoxelSpec,
        coords: Vec<VoxelCoord>,
        counts: Vec<u64>,
        centroids: Vec<Vec3>,
        feat_dim: usize,
        feats: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        let n = coords.len();
        if counts.len() != n {
            return Err(Error::dim("layer counts", n, counts.len()));
        }
        if centroids.len() != n {
            return Err(Error::dim("layer centroids", n, centroids.len()));
        }
        if feats.len() != n * feat_dim {
            return Err(Error::dim("layer features", n * feat_dim, feats.len()));
        }
        let mut index = HashMap::with_capacity(n);
        for (slot, &h) in coords.iter().enumerate() {
            if !spec.contains_coord(h) {
                return Err(Error::Contract(format!("voxel {h:?} outside grid {:?}", spec.dims)));
            }
            if counts[slot] == 0 {
                return Err(Error::Contract(format!("voxel {h:?} has zero count")));
            }
            if !centroids[slot].iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite { index: slot });
            }
            if index.insert(h, slot).is_some() {
                return Err(Error::Contract(format!("duplicate voxel coord {h:?}")));
            }
        }
        if let Some(slot) = feats.iter().position(|f| !f.is_finite()) {
            return Err(Error::NonFinite { index: slot / feat_dim.max(1) });
        }
        Ok(Self { level, spec, coords, counts, centroids, feat_dim, feats, index })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn spec(&self) -> &VoxelSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn centroids(&self) -> &[Vec3] {
        &self.centroids
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn feature(&self, slot: usize) -> &[f64] {
        &self.feats[slot * self.feat_dim..(slot + 1) * self.feat_dim]
    }

    pub fn slot_of(&self, h: VoxelCoord) -> Option<usize> {
        self.index.get(&h).copied()
    }

    /// Replaces the feature buffer.
    pub fn with_features(mut self, feat_dim: usize, feats: Vec<f64>) -> Result<Self> {
        if feats.len() != self.len() * feat_dim {
            return Err(Error::dim("layer features", self.len() * feat_dim, feats.len()));
        }
        if let Some(i) = feats.iter().position(|f| !f.is_finite()) {
            return Err(Error::NonFinite { index: i / feat_dim.max(1) });
        }
        self.feat_dim = feat_dim;
        self.feats = feats;
        Ok(self)
    }

    /// Same voxels and features with centroids rigidly moved (rotation about z, then translation).
    pub fn transformed(&self, yaw: f64, translation: Vec3) -> Self {
        let mut out = self.clone();
        for c in &mut out.centroids {
            *c = crate::geometry::add(crate::geometry::rotate_z(*c, yaw), translation);
        }
        out
    }

    pub fn to_dump(&self) -> LayerDump {
        LayerDump {
            level: self.level,
            spec: self.spec,
            feat_dim: self.feat_dim,
            coords: self.coords.clone(),
            counts: self.counts.clone(),
            centroids: self.centroids.clone(),
            feats: self.feats.chunks(self.feat_dim.max(1)).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn from_dump(dump: LayerDump) -> Result<Self> {
        let LayerDump { level, spec, feat_dim, coords, counts, centroids, feats } = dump;
        if feat_dim > 0 && feats.len() != coords.len() {
            return Err(Error::dim("layer dump feature rows", coords.len(), feats.len()));
        }
        let mut flat = Vec::with_capacity(coords.len() * feat_dim);
        for (slot, row) in feats.iter().enumerate() {
            if row.len() != feat_dim {
                return Err(Error::dim(format!("layer dump feature row {slot}"), feat_dim, row.len()));
            }
            flat.extend_from_slice(row);
        }
        Self::new(level, spec, coords, counts, centroids, feat_dim, flat)
    }
}

/// Self-describing serialized layer, used to inject external backbone features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDump {
    pub level: usize,
    pub spec: VoxelSpec,
    pub feat_dim: usize,
    pub coords: Vec<VoxelCoord>,
    pub counts: Vec<u64>,
    pub centroids: Vec<Vec3>,
    pub feats: Vec<Vec<f64>>,
}

/// A set of layers as written by `--dump-stage layers` and read by `--layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub layers: Vec<LayerDump>,
}

impl LayerStack {
    pub fn from_layers(layers: &[SparseVoxelLayer]) -> Self {
        Self { layers: layers.iter().map(SparseVoxelLayer::to_dump).collect() }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<SparseVoxelLayer>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stack: LayerStack =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        stack.layers.into_iter().map(SparseVoxelLayer::from_dump).collect()
    }
}

/// Result of grouping a cloud into voxels: a featureless layer plus, per
/// slot, the indices of its member points (ascending).
#[derive(Debug, Clone)]
pub struct Voxelization {
    pub layer: SparseVoxelLayer,
    pub groups: Vec<Vec<u32>>,
}

impl Voxelization {
    pub fn group(&self, h: VoxelCoord) -> Option<&[u32]> {
        self.layer.slot_of(h).map(|s| self.groups[s].as_slice())
    }
}

/// Groups in-grid points by voxel. Slots are ordered lexicographically by
/// coordinate; out-of-grid points are dropped.
pub fn voxelize(cloud: &PointCloud, spec: &VoxelSpec, level: usize) -> Result<Voxelization> {
    spec.validate()?;
    let mut keyed: Vec<(u64, u32)> = cloud
        .positions()
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| voxel_index_of(p, spec).map(|h| (VoxelSpec::pack(h), i as u32)))
        .collect();
    keyed.sort_unstable();
    let mut coords = Vec::new();
    let mut groups: Vec<Vec<u32>> = Vec::new();
    let mut last = None;
    for (key, idx) in keyed {
        if last != Some(key) {
            coords.push(VoxelSpec::unpack(key));
            groups.push(Vec::new());
            last = Some(key);
        }
        groups.last_mut().expect("group").push(idx);
    }
    let stats = centroid::centroids_direct(&groups, cloud)?;
    let (centroids, counts) = stats.into_iter().unzip();
    let layer = SparseVoxelLayer::new(level, *spec, coords, counts, centroids, 0, Vec::new())?;
    Ok(Voxelization { layer, groups })
}

/// Uniform-grid accelerator for closed-ball queries over a fixed center set.
#[derive(Debug, Clone)]
pub struct BallQueryIndex {
    bin: f64,
    centers: Vec<Vec3>,
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl BallQueryIndex {
    /// Bins `centers` into cubes of side `bin` (normally the query radius).
    pub fn new(centers: &[Vec3], bin: f64) -> Result<Self> {
        if !(bin > 0.0) || !bin.is_finite() {
            return Err(Error::Contract(format!("ball query bin must be positive, got {bin}")));
        }
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (slot, &c) in centers.iter().enumerate() {
            cells.entry(Self::cell_of(c, bin)).or_default().push(slot as u32);
        }
        Ok(Self { bin, centers: centers.to_vec(), cells })
    }

    #[inline]
    fn cell_of(p: Vec3, bin: f64) -> [i64; 3] {
        [(p[0] / bin).floor() as i64, (p[1] / bin).floor() as i64, (p[2] / bin).floor() as i64]
    }

    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }

    /// Every slot with `‖c − query‖ ≤ radius`, paired with its squared
    /// distance and sorted by `(distance, slot)`.
    pub fn query_all(&self, query: Vec3, radius: f64) -> Vec<(f64, usize)> {
        let r2 = radius * radius;
        let pad = radius * (1.0 + 1e-9);
        let lo = Self::cell_of([query[0] - pad, query[1] - pad, query[2] - pad], self.bin);
        let hi = Self::cell_of([query[0] + pad, query[1] + pad, query[2] + pad], self.bin);
        let mut found = Vec::new();
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let Some(slots) = self.cells.get(&[x, y, z]) else {
                        continue;
                    };
                    for &slot in slots {
                        let d2 = norm_sq(sub(self.centers[slot as usize], query));
                        if d2 <= r2 {
                            found.push((d2, slot as usize));
                        }
                    }
                }
            }
        }
        found.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found
    }

    /// Nearest-first slots within `radius`, truncated to `max_n`.
    pub fn query(&self, query: Vec3, radius: f64, max_n: usize) -> Vec<usize> {
        let mut all = self.query_all(query, radius);
        all.truncate(max_n);
        all.into_iter().map(|(_, s)| s).collect()
    }
}

/// One-shot closed-ball query; builds a grid with bin size `radius`.
pub fn ball_query(centers: &[Vec3], query: Vec3, radius: f64, max_n: usize) -> Result<Vec<usize>> {
    if max_n == 0 {
        return Err(Error::Contract("ball query max_n must be >= 1".into()));
    }
    Ok(BallQueryIndex::new(centers, radius)?.query(query, radius, max_n))
}
