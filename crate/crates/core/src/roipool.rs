//! Density-aware RoI grid pooling.
//!
//! Each proposal is divided into `U³` sub-cells whose centers are the grid
//! points. Around every grid point, each configured layer answers one ball
//! query per radius; neighbor rows are `[voxel feature ∥ offset ∥ KDE
//! likelihood]`, passed through a per-radius FFN and max-pooled. Radius
//! blocks are concatenated per layer, then layers are concatenated.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate_z, sub, Box3d, Vec3};
use crate::kde::{kde_self_likelihood, KdeConfig};
use crate::nn::{maxpool_set, Activation, Ffn, FfnSpec, Matrix, ParamStore};
use crate::voxel::{BallQueryIndex, SparseVoxelLayer};

/// A proposal box with its first-stage score.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxProposal {
    pub bbox: Box3d,
    pub score: f64,
    pub label: Option<String>,
}

/// Frame in which neighbor offsets `c − g` are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OffsetFrame {
    /// Offsets as-is in world coordinates.
    #[default]
    World,
    /// Offsets rotated into the proposal's canonical frame.
    Box,
}

/// Pooling settings for one voxel layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPoolConfig {
    pub level: usize,
    pub radii: Vec<f64>,
    /// Hidden and output widths of each radius' FFN; the input width is the
    /// layer feature width plus 4 (offset and likelihood).
    pub mlps: Vec<Vec<usize>>,
    pub max_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub grid_size: usize,
    pub layers: Vec<LayerPoolConfig>,
    pub kde: KdeConfig,
    pub offset_frame: OffsetFrame,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            grid_size: 6,
            layers: vec![
                LayerPoolConfig { level: 3, radii: vec![0.8, 1.2], mlps: vec![vec![32, 32], vec![32, 32]], max_n: 32 },
                LayerPoolConfig { level: 4, radii: vec![1.2, 2.4], mlps: vec![vec![64, 64], vec![64, 64]], max_n: 32 },
            ],
            kde: KdeConfig::default(),
            offset_frame: OffsetFrame::World,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::Config("grid size must be >= 1".into()));
        }
        self.kde.validate()?;
        for l in &self.layers {
            if l.radii.is_empty() || l.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::Config(format!("layer {}: radii must be positive", l.level)));
            }
            if l.mlps.len() != l.radii.len() {
                return Err(Error::dim(format!("layer {} mlps per radius", l.level), l.radii.len(), l.mlps.len()));
            }
            if l.mlps.iter().any(|m| m.is_empty() || m.contains(&0)) {
                return Err(Error::Config(format!("layer {}: mlp widths must be >= 1", l.level)));
            }
            if l.max_n == 0 {
                return Err(Error::Config(format!("layer {}: max_n must be >= 1", l.level)));
            }
        }
        Ok(())
    }

    pub fn num_grid_points(&self) -> usize {
        self.grid_size.pow(3)
    }

    /// Width of a pooled grid-point feature: the sum of every radius FFN's output width.
    pub fn feature_width(&self) -> usize {
        self.layers.iter().flat_map(|l| l.mlps.iter().map(|m| *m.last().expect("validated"))).sum()
    }

    /// Per-radius FFNs of layer `l`, given that layer's voxel feature width.
    pub fn layer_ffns(&self, l: &LayerPoolConfig, feat_dim: usize) -> Result<Vec<Ffn>> {
        l.mlps
            .iter()
            .enumerate()
            .map(|(k, mlp)| {
                let mut widths = vec![feat_dim + 4];
                widths.extend_from_slice(mlp);
                Ffn::new(FfnSpec::new(widths, Activation::Relu)?, format!("pool.l{}.r{k}", l.level))
            })
            .collect()
    }
}

/// Cell centers of a `U³` partition of the box, x-major (z varies fastest).
pub fn sample_grid_points(bbox: &Box3d, grid_size: usize) -> Vec<Vec3> {
    let u = grid_size as f64;
    let mut out = Vec::with_capacity(grid_size.pow(3));
    for i in 0..grid_size {
        for j in 0..grid_size {
            for k in 0..grid_size {
                let local = [
                    ((i as f64 + 0.5) / u - 0.5) * bbox.extents[0],
                    ((j as f64 + 0.5) / u - 0.5) * bbox.extents[1],
                    ((k as f64 + 0.5) / u - 0.5) * bbox.extents[2],
                ];
                out.push(bbox.to_world(local));
            }
        }
    }
    out
}

/// Flat index of sub-cell `(i, j, k)` in the x-major ordering.
#[inline]
pub fn grid_cell_index(cell: [usize; 3], grid_size: usize) -> usize {
    (cell[0] * grid_size + cell[1]) * grid_size + cell[2]
}

/// Raw points in each of the box's `U³` sub-cells (half-open in the
/// canonical frame); points outside the box are not counted.
pub fn grid_voxel_point_counts(bbox: &Box3d, grid_size: usize, points: &[Vec3]) -> Vec<u32> {
    let mut counts = vec![0u32; grid_size.pow(3)];
    let reach_sq = 0.25 * crate::geometry::norm_sq(bbox.extents) * (1.0 + 1e-9);
    let u = grid_size as f64;
    for &p in points {
        if crate::geometry::norm_sq(sub(p, bbox.center)) > reach_sq {
            continue;
        }
        let s = bbox.normalized(p);
        if !s.iter().all(|&v| (0.0..1.0).contains(&v)) {
            continue;
        }
        let cell = s.map(|v| ((v * u).floor() as usize).min(grid_size - 1));
        counts[grid_cell_index(cell, grid_size)] += 1;
    }
    counts
}

/// Neighbor rows of one ball query.
#[derive(Debug, Clone, PartialEq)]
pub struct BallFeatures {
    /// `[feature ∥ offset(3) ∥ likelihood]` per neighbor.
    pub rows: Matrix,
    pub neighbors: Vec<usize>,
    pub empty: bool,
}

/// Builds the augmented rows for grid point `g` from one layer and radius.
/// The KDE runs over exactly the returned (post-truncation) neighbor set.
#[allow(clippy::too_many_arguments)]
pub fn gather_ball_features(
    g: Vec3,
    layer: &SparseVoxelLayer,
    index: &BallQueryIndex,
    radius: f64,
    max_n: usize,
    kde: &KdeConfig,
    frame: OffsetFrame,
    yaw: f64,
) -> Result<BallFeatures> {
    let d = layer.feat_dim();
    let neighbors = index.query(g, radius, max_n);
    if neighbors.is_empty() {
        return Ok(BallFeatures { rows: Array2::zeros((0, d + 4)), neighbors, empty: true });
    }
    let centers: Vec<Vec3> = neighbors.iter().map(|&k| layer.centroids()[k]).collect();
    let likelihood = kde_self_likelihood(&centers, kde)?;
    let mut rows = Array2::zeros((neighbors.len(), d + 4));
    for (r, (&slot, &c)) in neighbors.iter().zip(&centers).enumerate() {
        let mut row = rows.row_mut(r);
        for (dst, &f) in row.iter_mut().zip(layer.feature(slot)) {
            *dst = f;
        }
        let offset = match frame {
            OffsetFrame::World => sub(c, g),
            OffsetFrame::Box => rotate_z(sub(c, g), -yaw),
        };
        row[d] = offset[0];
        row[d + 1] = offset[1];
        row[d + 2] = offset[2];
        row[d + 3] = likelihood[r];
    }
    Ok(BallFeatures { rows, neighbors, empty: false })
}

/// Per radius: max-pool of the FFN over that radius' rows (zeros when the
/// radius is empty); the radius blocks are concatenated.
pub fn msg_aggregate(psis: &[Matrix], ffns: &[Ffn], params: &ParamStore) -> Result<Vec<f64>> {
    if psis.len() != ffns.len() {
        return Err(Error::dim("msg radii", ffns.len(), psis.len()));
    }
    let mut out = Vec::new();
    for (psi, ffn) in psis.iter().zip(ffns) {
        if psi.ncols() != ffn.spec.d_in() {
            return Err(Error::dim(format!("{} input width", ffn.prefix), ffn.spec.d_in(), psi.ncols()));
        }
        if psi.nrows() == 0 {
            out.extend(std::iter::repeat_n(0.0, ffn.spec.d_out()));
        } else {
            out.extend(maxpool_set(&ffn.apply(psi, params)?).values);
        }
    }
    Ok(out)
}

/// Pooled grid of one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPointSet {
    pub grid_size: usize,
    /// World-frame grid point positions, x-major.
    pub positions: Vec<Vec3>,
    /// `U³ × F` grid features.
    pub features: Matrix,
    /// Raw points per grid sub-cell.
    pub counts: Vec<u32>,
    /// True where every ball query of every layer came back empty.
    pub empty: Vec<bool>,
}

impl GridPointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn non_empty_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| !self.empty[j]).collect()
    }

    pub fn to_dump(&self) -> GridDump {
        GridDump {
            grid_size: self.grid_size,
            positions: self.positions.clone(),
            features: self.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            counts: self.counts.clone(),
            empty: self.empty.clone(),
        }
    }
}

/// Serialized form of a [`GridPointSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDump {
    pub grid_size: usize,
    pub positions: Vec<Vec3>,
    pub features: Vec<Vec<f64>>,
    pub counts: Vec<u32>,
    pub empty: Vec<bool>,
}

struct PooledLayer<'a> {
    layer: &'a SparseVoxelLayer,
    cfg: &'a LayerPoolConfig,
    indices: Vec<BallQueryIndex>,
    ffns: Vec<Ffn>,
}

/// Read-only pooling state shared by all proposals of a scene: the selected
/// layers, one ball-query grid per (layer, radius), and the radius FFNs.
pub struct PoolingContext<'a> {
    cfg: &'a PoolConfig,
    layers: Vec<PooledLayer<'a>>,
}

impl<'a> PoolingContext<'a> {
    /// Selects the configured levels from `layers` and builds their ball-query grids.
    pub fn new(cfg: &'a PoolConfig, layers: &'a [SparseVoxelLayer]) -> Result<Self> {
        cfg.validate()?;
        let mut pooled = Vec::with_capacity(cfg.layers.len());
        for lc in &cfg.layers {
            let layer = layers
                .iter()
                .find(|l| l.level() == lc.level)
                .ok_or_else(|| Error::Config(format!("no voxel layer at level {}", lc.level)))?;
            let indices =
                lc.radii.iter().map(|&r| BallQueryIndex::new(layer.centroids(), r)).collect::<Result<Vec<_>>>()?;
            let ffns = cfg.layer_ffns(lc, layer.feat_dim())?;
            pooled.push(PooledLayer { layer, cfg: lc, indices, ffns });
        }
        Ok(Self { cfg, layers: pooled })
    }

    pub fn config(&self) -> &PoolConfig {
        self.cfg
    }

    /// Seeds every radius FFN that is not already present in `params`.
    pub fn init_params(&self, params: &mut ParamStore) {
        for l in &self.layers {
            for f in &l.ffns {
                f.init(params);
            }
        }
    }

    /// Raw neighbor rows for every (layer, radius) at grid point `g`.
    pub fn gather(&self, g: Vec3, yaw: f64) -> Result<Vec<Vec<BallFeatures>>> {
        self.layers
            .iter()
            .map(|l| {
                l.cfg
                    .radii
                    .iter()
                    .zip(&l.indices)
                    .map(|(&r, idx)| {
                        gather_ball_features(g, l.layer, idx, r, l.cfg.max_n, &self.cfg.kde, self.cfg.offset_frame, yaw)
                    })
                    .collect()
            })
            .collect()
    }

    /// Pools one proposal. `points` are the raw cloud positions used for
    /// the per-sub-cell counts.
    pub fn pool_box(&self, bbox: &Box3d, params: &ParamStore, points: &[Vec3]) -> Result<GridPointSet> {
        let u = self.cfg.grid_size;
        let positions = sample_grid_points(bbox, u);
        let n = positions.len();
        let mut features = Array2::zeros((n, self.cfg.feature_width()));
        let mut empty = vec![true; n];
        let mut col = 0;
        for l in &self.layers {
            for (k, (&radius, idx)) in l.cfg.radii.iter().zip(&l.indices).enumerate() {
                let ffn = &l.ffns[k];
                // Stack every grid point's rows and run the FFN once per radius.
                let mut blocks = Vec::with_capacity(n);
                let mut total = 0;
                for &g in &positions {
                    let b = gather_ball_features(
                        g,
                        l.layer,
                        idx,
                        radius,
                        l.cfg.max_n,
                        &self.cfg.kde,
                        self.cfg.offset_frame,
                        bbox.yaw,
                    )?;
                    total += b.rows.nrows();
                    blocks.push(b.rows);
                }
                let width = ffn.spec.d_out();
                if total > 0 {
                    let mut stacked = Array2::zeros((total, ffn.spec.d_in()));
                    let mut at = 0;
                    for b in &blocks {
                        stacked.slice_mut(s![at..at + b.nrows(), ..]).assign(b);
                        at += b.nrows();
                    }
                    let out = ffn.apply(&stacked, params)?;
                    let mut at = 0;
                    for (j, b) in blocks.iter().enumerate() {
                        let m = b.nrows();
                        if m > 0 {
                            let pooled = maxpool_set(&out.slice(s![at..at + m, ..]));
                            for (c, v) in pooled.values.into_iter().enumerate() {
                                features[[j, col + c]] = v;
                            }
                            empty[j] = false;
                            at += m;
                        }
                    }
                }
                col += width;
            }
        }
        let counts = grid_voxel_point_counts(bbox, u, points);
        Ok(GridPointSet { grid_size: u, positions, features, counts, empty })
    }
}
