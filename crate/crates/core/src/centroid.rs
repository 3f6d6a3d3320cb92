//! Voxel point centroids: direct means over raw points, count-weighted
//! propagation from a finer layer, and the coordinate → centroid/feature lookup.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::pcio::PointCloud;
use crate::voxel::{downsample_index, ConvMapSpec, SparseVoxelLayer, VoxelCoord, VoxelSpec};

/// Neumaier-compensated accumulator; carries roughly twice the working
/// precision of a plain f64 sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum3([CompensatedSum; 3]);

impl Accum3 {
    #[inline]
    fn add_scaled(&mut self, p: Vec3, w: f64) {
        for (acc, v) in self.0.iter_mut().zip(p) {
            acc.add(w * v);
        }
    }

    #[inline]
    fn mean(&self, n: f64) -> Vec3 {
        [self.0[0].value() / n, self.0[1].value() / n, self.0[2].value() / n]
    }
}

/// Arithmetic mean and size of each point group.
pub fn centroids_direct(groups: &[Vec<u32>], cloud: &PointCloud) -> Result<Vec<(Vec3, u64)>> {
    let pos = cloud.positions();
    groups
        .iter()
        .enumerate()
        .map(|(slot, g)| {
            if g.is_empty() {
                return Err(Error::Contract(format!("empty point group at slot {slot}")));
            }
            let mut acc = Accum3::default();
            for &i in g {
                acc.add_scaled(pos[i as usize], 1.0);
            }
            Ok((acc.mean(g.len() as f64), g.len() as u64))
        })
        .collect()
}

/// Upper-layer voxels produced from a lower layer.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub spec: VoxelSpec,
    pub coords: Vec<VoxelCoord>,
    pub centroids: Vec<Vec3>,
    pub counts: Vec<u64>,
    /// Lower-layer slots merged into each upper slot, ascending.
    pub children: Vec<Vec<usize>>,
}

impl Propagated {
    /// Featureless layer at `level`.
    pub fn into_layer(self, level: usize) -> Result<SparseVoxelLayer> {
        SparseVoxelLayer::new(level, self.spec, self.coords, self.counts, self.centroids, 0, Vec::new())
    }
}

/// Count-weighted centroid mean over the lower voxels sharing an upper
/// coordinate; upper counts are the sums of lower counts.
pub fn centroids_propagate(lower: &SparseVoxelLayer, conv: &ConvMapSpec) -> Result<Propagated> {
    conv.validate()?;
    let spec = lower.spec().downsampled(conv);
    let mut keyed: Vec<(u64, usize)> = Vec::with_capacity(lower.len());
    for (slot, &h) in lower.coords().iter().enumerate() {
        let up = downsample_index(h, conv)
            .filter(|u| spec.contains_coord(*u))
            .ok_or_else(|| Error::Contract(format!("voxel {h:?} maps outside the downsampled grid")))?;
        keyed.push((VoxelSpec::pack(up), slot));
    }
    keyed.sort_unstable();

    let mut out =
        Propagated { spec, coords: Vec::new(), centroids: Vec::new(), counts: Vec::new(), children: Vec::new() };
    let centroids = lower.centroids();
    let counts = lower.counts();
    let mut start = 0;
    while start < keyed.len() {
        let key = keyed[start].0;
        let mut end = start;
        let mut acc = Accum3::default();
        let mut total = 0u64;
        while end < keyed.len() && keyed[end].0 == key {
            let slot = keyed[end].1;
            acc.add_scaled(centroids[slot], counts[slot] as f64);
            total += counts[slot];
            end += 1;
        }
        out.coords.push(VoxelSpec::unpack(key));
        out.centroids.push(acc.mean(total as f64));
        out.counts.push(total);
        out.children.push(keyed[start..end].iter().map(|&(_, s)| s).collect());
        start = end;
    }
    Ok(out)
}

/// Entry returned by [`CentroidIndex::get`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidEntry {
    pub centroid: Vec3,
    pub slot: usize,
}

/// Hash table from voxel coordinate to its centroid and feature slot.
#[derive(Debug, Clone)]
pub struct CentroidIndex {
    map: HashMap<VoxelCoord, CentroidEntry>,
}

impl CentroidIndex {
    pub fn get(&self, h: VoxelCoord) -> Option<CentroidEntry> {
        self.map.get(&h).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn build_centroid_index(layer: &SparseVoxelLayer) -> CentroidIndex {
    let map = layer
        .coords()
        .iter()
        .zip(layer.centroids())
        .enumerate()
        .map(|(slot, (&h, &centroid))| (h, CentroidEntry { centroid, slot }))
        .collect();
    CentroidIndex { map }
}

/// Layers `1..=n`, the level-1 point groups and each propagation step.
pub type Hierarchy = (Vec<SparseVoxelLayer>, Vec<Vec<u32>>, Vec<Propagated>);

/// Voxelizes at `base` (level 1) and propagates through `convs`, giving
/// levels `1..=convs.len() + 1`. Also returns the level-1 point groups.
pub fn build_hierarchy(cloud: &PointCloud, base: &VoxelSpec, convs: &[ConvMapSpec]) -> Result<Hierarchy> {
    let vox = crate::voxel::voxelize(cloud, base, 1)?;
    let mut layers = vec![vox.layer];
    let mut steps = Vec::with_capacity(convs.len());
    for (k, conv) in convs.iter().enumerate() {
        let up = centroids_propagate(layers.last().expect("layer"), conv)?;
        layers.push(up.clone().into_layer(k + 2)?);
        steps.push(up);
    }
    Ok((layers, vox.groups, steps))
}

/// Composite stride of a conv chain, per axis.
pub fn chain_stride(convs: &[ConvMapSpec]) -> [i32; 3] {
    convs.iter().fold([1; 3], |acc, c| [acc[0] * c.stride[0], acc[1] * c.stride[1], acc[2] * c.stride[2]])
}
