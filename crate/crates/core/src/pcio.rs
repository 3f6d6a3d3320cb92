//! Point cloud containers, KITTI/CSV ingestion, range cropping and a
//! deterministic ray-cast scanner for synthetic scenes.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3d, Vec3};

/// Bytes per KITTI velodyne record: four little-endian f32.
pub const KITTI_RECORD_BYTES: usize = 16;

/// A single point with its auxiliary channels (intensity, elongation, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub aux: Vec<f64>,
}

/// Structure-of-arrays point cloud. Every point carries `aux_dim` auxiliary values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    aux: Vec<f64>,
    aux_dim: usize,
}

impl PointCloud {
    pub fn new(aux_dim: usize) -> Self {
        Self { positions: Vec::new(), aux: Vec::new(), aux_dim }
    }

    /// Builds a cloud from positions and a flat row-major aux buffer.
    pub fn from_parts(positions: Vec<Vec3>, aux: Vec<f64>, aux_dim: usize) -> Result<Self> {
        if aux.len() != positions.len() * aux_dim {
            return Err(Error::dim("point cloud aux buffer", positions.len() * aux_dim, aux.len()));
        }
        if let Some(index) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { positions, aux, aux_dim })
    }

    pub fn from_points(points: &[Point], aux_dim: usize) -> Result<Self> {
        let mut cloud = Self::new(aux_dim);
        for p in points {
            cloud.push([p.x, p.y, p.z], &p.aux)?;
        }
        Ok(cloud)
    }

    pub fn push(&mut self, xyz: Vec3, aux: &[f64]) -> Result<()> {
        if aux.len() != self.aux_dim {
            return Err(Error::dim("point aux", self.aux_dim, aux.len()));
        }
        if !xyz.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite { index: self.positions.len() });
        }
        self.positions.push(xyz);
        self.aux.extend_from_slice(aux);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_dim
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn aux_of(&self, i: usize) -> &[f64] {
        &self.aux[i * self.aux_dim..(i + 1) * self.aux_dim]
    }

    pub fn point(&self, i: usize) -> Point {
        let [x, y, z] = self.positions[i];
        Point { x, y, z, aux: self.aux_of(i).to_vec() }
    }

    /// Keeps the points whose index satisfies `keep`, preserving order.
    fn filter_indices(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let mut out = Self::new(self.aux_dim);
        for i in 0..self.len() {
            if keep(i) {
                out.positions.push(self.positions[i]);
                out.aux.extend_from_slice(self.aux_of(i));
            }
        }
        out
    }

    /// Applies a rigid transform (rotation about z, then translation) to every point.
    pub fn transformed(&self, yaw: f64, translation: Vec3) -> Self {
        let positions = self
            .positions
            .iter()
            .map(|&p| crate::geometry::add(crate::geometry::rotate_z(p, yaw), translation))
            .collect();
        Self { positions, aux: self.aux.clone(), aux_dim: self.aux_dim }
    }
}

/// Axis-aligned detection range, half-open per axis: `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSpec {
    pub min: Vec3,
    pub max: Vec3,
}

impl RangeSpec {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let r = Self { min, max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if !(self.min[axis] < self.max[axis]) {
                return Err(Error::Config(format!(
                    "range axis {axis}: min {} must be below max {}",
                    self.min[axis], self.max[axis]
                )));
            }
        }
        Ok(())
    }

    /// KITTI front-camera range.
    pub fn kitti() -> Self {
        Self { min: [0.0, -40.0, -3.0], max: [70.4, 40.0, 1.0] }
    }

    pub fn waymo() -> Self {
        Self { min: [-75.2, -75.2, -2.0], max: [75.2, 75.2, 4.0] }
    }

    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] < self.max[a])
    }
}

pub fn crop_to_range(cloud: &PointCloud, range: &RangeSpec) -> PointCloud {
    cloud.filter_indices(|i| range.contains(cloud.positions[i]))
}

/// Decodes packed `(x, y, z, intensity)` little-endian f32 records.
pub fn decode_kitti(bytes: &[u8]) -> Result<PointCloud> {
    let whole = bytes.len() - bytes.len() % KITTI_RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {KITTI_RECORD_BYTES} bytes",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / KITTI_RECORD_BYTES;
    let mut positions = Vec::with_capacity(n);
    let mut aux = Vec::with_capacity(n);
    for (index, rec) in bytes.chunks_exact(KITTI_RECORD_BYTES).enumerate() {
        let mut v = [0.0f32; 4];
        for (k, chunk) in rec.chunks_exact(4).enumerate() {
            v[k] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        positions.push([v[0] as f64, v[1] as f64, v[2] as f64]);
        aux.push(v[3] as f64);
    }
    Ok(PointCloud { positions, aux, aux_dim: 1 })
}

/// Encodes xyz and the first aux channel as KITTI records (values narrowed to f32).
/// A cloud without aux channels is written with zero intensity.
pub fn encode_kitti(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * KITTI_RECORD_BYTES);
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let intensity = cloud.aux_of(i).first().copied().unwrap_or(0.0);
        for v in [p[0], p[1], p[2], intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_kitti(&bytes)
}

pub fn write_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_kitti(cloud)).map_err(|e| Error::io(path, e))
}

/// Reads a CSV cloud with header `x,y,z,<aux...>`.
pub fn read_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if headers.len() < 3 || &headers[0] != "x" || &headers[1] != "y" || &headers[2] != "z" {
        return Err(Error::Parse(format!("{}: header must start with x,y,z", path.display())));
    }
    let aux_dim = headers.len() - 3;
    let mut cloud = PointCloud::new(aux_dim);
    let mut values = Vec::with_capacity(headers.len());
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("row {index}: {e}")))?;
        values.clear();
        for field in record.iter() {
            let v: f64 =
                field.trim().parse().map_err(|_| Error::Parse(format!("row {index}: bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            values.push(v);
        }
        if values.len() != headers.len() {
            return Err(Error::dim(format!("csv row {index}"), headers.len(), values.len()));
        }
        cloud.push([values[0], values[1], values[2]], &values[3..])?;
    }
    Ok(cloud)
}

pub fn write_csv(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    let mut header = vec!["x".to_string(), "y".to_string(), "z".to_string()];
    header.extend((0..cloud.aux_dim).map(|k| format!("aux{k}")));
    writer.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let row: Vec<String> = p.iter().chain(cloud.aux_of(i)).map(|v| v.to_string()).collect();
        writer.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Loads a cloud, choosing the decoder by file extension (`.csv`, otherwise KITTI binary).
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_csv(path),
        _ => read_kitti_bin(path),
    }
}

/// Beam layout of the synthetic scanner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPattern {
    pub beams: usize,
    pub az_step: f64,
    /// Lowest and highest beam elevation, radians.
    pub elevation: (f64, f64),
}

/// Returns are placed this far past the hit surface so they fall inside the
/// target under half-open containment.
pub const SURFACE_INSET: f64 = 1e-3;

impl ScanPattern {
    /// HDL-64-like vertical field of view.
    pub fn new(beams: usize, az_step: f64) -> Self {
        Self { beams, az_step, elevation: (-24.8_f64.to_radians(), 2.0_f64.to_radians()) }
    }

    pub fn elevations(&self) -> Vec<f64> {
        let (lo, hi) = self.elevation;
        if self.beams == 1 {
            return vec![0.5 * (lo + hi)];
        }
        let step = (hi - lo) / (self.beams - 1) as f64;
        (0..self.beams).map(|b| lo + step * b as f64).collect()
    }

    pub fn azimuths(&self) -> Vec<f64> {
        let n = (2.0 * PI / self.az_step).ceil() as usize;
        (0..n).map(|k| -PI + self.az_step * k as f64).collect()
    }

    /// Unit ray directions, beam-major.
    pub fn directions(&self) -> Vec<Vec3> {
        let azimuths = self.azimuths();
        let mut dirs = Vec::with_capacity(self.beams * azimuths.len());
        for elev in self.elevations() {
            let (se, ce) = elev.sin_cos();
            for &az in &azimuths {
                let (sa, ca) = az.sin_cos();
                dirs.push([ce * ca, ce * sa, se]);
            }
        }
        dirs
    }
}

/// Casts rays from the origin over a fixed elevation/azimuth grid and keeps the
/// first box-surface hit per ray. Intensity is drawn from a seeded generator.
pub fn synth_lidar_scan(beams: usize, az_step: f64, targets: &[Box3d], seed: u64) -> Result<PointCloud> {
    if beams == 0 || !(az_step > 0.0) || !az_step.is_finite() {
        return Err(Error::Contract(format!("scanner needs beams >= 1 and az_step > 0, got {beams} and {az_step}")));
    }
    Ok(scan_with_pattern(&ScanPattern::new(beams, az_step), targets, seed))
}

pub fn scan_with_pattern(pattern: &ScanPattern, targets: &[Box3d], seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = PointCloud::new(1);
    if targets.is_empty() {
        return cloud;
    }
    for dir in pattern.directions() {
        let hit = targets
            .iter()
            .filter_map(|b| b.ray_interval([0.0; 3], dir))
            .filter(|&(t0, _)| t0 > 0.0)
            .map(|(t0, _)| t0)
            .min_by(f64::total_cmp);
        if let Some(t) = hit {
            let t = t + SURFACE_INSET;
            let intensity: f64 = rng.gen();
            cloud.positions.push([t * dir[0], t * dir[1], t * dir[2]]);
            cloud.aux.push(intensity);
        }
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_decode() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let cloud = decode_kitti(&bytes).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.positions()[0], [1.0, 2.0, 3.0]);
        assert_eq!(cloud.aux_of(0), &[0.5]);
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let cloud = decode_kitti(&[]).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(cloud.aux_dim(), 1);
    }

    #[test]
    fn truncated_file_reports_offset() {
        match decode_kitti(&[0u8; 33]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 32),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_record_is_rejected() {
        let mut bytes = vec![0u8; 16];
        for v in [0.0f32, f32::NAN, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_kitti(&bytes), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn crop_excludes_max_boundary() {
        let range = RangeSpec::new([0.0; 3], [1.0; 3]).unwrap();
        let mut cloud = PointCloud::new(0);
        cloud.push([1.0, 0.5, 0.5], &[]).unwrap();
        cloud.push([0.0, 0.0, 0.0], &[]).unwrap();
        let out = crop_to_range(&cloud, &range);
        assert_eq!(out.positions(), &[[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn crop_identity_when_inside() {
        let range = RangeSpec::kitti();
        let mut cloud = PointCloud::new(1);
        cloud.push([1.0, 0.0, 0.0], &[0.1]).unwrap();
        cloud.push([10.0, -5.0, -1.0], &[0.2]).unwrap();
        assert_eq!(crop_to_range(&cloud, &range), cloud);
    }

    #[test]
    fn invalid_range_rejected() {
        assert!(RangeSpec::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn empty_scene_scans_nothing() {
        assert!(synth_lidar_scan(8, 0.01, &[], 3).unwrap().is_empty());
        assert!(synth_lidar_scan(0, 0.01, &[], 3).is_err());
    }

    #[test]
    fn occluded_box_gets_no_points() {
        let front = Box3d::new([10.0, 0.0, -1.0], [2.0, 4.0, 6.0], 0.0).unwrap();
        let back = Box3d::new([20.0, 0.0, -1.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let cloud = synth_lidar_scan(32, 0.002, &[front, back], 1).unwrap();
        assert!(front.count_points(cloud.positions()) > 0);
        assert_eq!(back.count_points(cloud.positions()), 0);
    }
}
