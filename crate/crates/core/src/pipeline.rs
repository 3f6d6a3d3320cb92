//! End-to-end second stage: scene layers, pooling, attention, heads and
//! NMS, plus box-file I/O and points-in-box statistics.

use std::path::Path;

use ndarray::{s, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attn::grid_self_attention;
use crate::centroid::{build_hierarchy, CompensatedSum};
use crate::config::PdvConfig;
use crate::error::{Error, Result};
use crate::geometry::{norm, Box3d, Vec3};
use crate::heads::{decode, flatten_grid, nms, sigmoid, stack_rows, Heads, RefinedBox, CODE_SIZE};
use crate::nn::{Matrix, ParamStore};
use crate::pcio::PointCloud;
use crate::roipool::{BoxProposal, GridDump, GridPointSet, PoolingContext};
use crate::voxel::{LayerStack, SparseVoxelLayer};

/// Box record of the JSON-lines proposal and ground-truth files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub yaw: f64,
    #[serde(default)]
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl BoxRecord {
    pub fn from_proposal(p: &BoxProposal) -> Self {
        let b = &p.bbox;
        Self {
            cx: b.center[0],
            cy: b.center[1],
            cz: b.center[2],
            dx: b.extents[0],
            dy: b.extents[1],
            dz: b.extents[2],
            yaw: b.yaw,
            score: p.score,
            label: p.label.clone(),
        }
    }

    pub fn to_proposal(&self) -> Result<BoxProposal> {
        Ok(BoxProposal {
            bbox: Box3d::new([self.cx, self.cy, self.cz], [self.dx, self.dy, self.dz], self.yaw)?,
            score: self.score,
            label: self.label.clone(),
        })
    }
}

/// Parses JSON lines of [`BoxRecord`]; blank lines are skipped.
pub fn parse_boxes(text: &str) -> Result<Vec<BoxProposal>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(line).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        let p = rec.to_proposal().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        if !p.score.is_finite() {
            return Err(Error::Parse(format!("line {}: score must be finite", n + 1)));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<BoxProposal>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text)
}

pub fn boxes_to_jsonl(proposals: &[BoxProposal]) -> String {
    proposals
        .iter()
        .map(|p| serde_json::to_string(&BoxRecord::from_proposal(p)).expect("record serializes") + "\n")
        .collect()
}

/// Output record of one refined box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedRecord {
    pub proposal: usize,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub yaw: f64,
    pub confidence: f64,
    pub num_points: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl From<&RefinedBox> for RefinedRecord {
    fn from(r: &RefinedBox) -> Self {
        let b = &r.bbox;
        Self {
            proposal: r.proposal,
            cx: b.center[0],
            cy: b.center[1],
            cz: b.center[2],
            dx: b.extents[0],
            dy: b.extents[1],
            dz: b.extents[2],
            yaw: b.yaw,
            confidence: r.confidence,
            num_points: r.num_points,
            label: r.label.clone(),
        }
    }
}

pub fn refined_to_jsonl(boxes: &[RefinedBox]) -> String {
    boxes.iter().map(|b| serde_json::to_string(&RefinedRecord::from(b)).expect("record serializes") + "\n").collect()
}

/// Raw cloud plus the voxel layers the second stage pools from.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cloud: PointCloud,
    pub layers: Vec<SparseVoxelLayer>,
}

/// Builds levels `1..=convs+1` from the cloud and attaches synthesized
/// features: per-voxel mean auxiliary channels followed by `ln(1 + count)`.
/// Coarse means are count-weighted means of the child means.
pub fn synthesize_layers(cloud: &PointCloud, cfg: &PdvConfig) -> Result<Vec<SparseVoxelLayer>> {
    let (layers, groups, steps) = build_hierarchy(cloud, &cfg.base_spec()?, &cfg.convs)?;
    let a = cloud.aux_dim();
    let mut means: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut acc = vec![CompensatedSum::default(); a];
            for &i in g {
                for (s, &v) in acc.iter_mut().zip(cloud.aux_of(i as usize)) {
                    s.add(v);
                }
            }
            acc.iter().map(|s| s.value() / g.len() as f64).collect()
        })
        .collect();
    let mut out: Vec<SparseVoxelLayer> = Vec::with_capacity(layers.len());
    for (k, layer) in layers.into_iter().enumerate() {
        if k > 0 {
            let lower = &out[k - 1];
            let lower_counts = lower.counts();
            means = steps[k - 1]
                .children
                .iter()
                .zip(&steps[k - 1].counts)
                .map(|(ch, &total)| {
                    let mut acc = vec![CompensatedSum::default(); a];
                    for &c in ch {
                        let w = lower_counts[c] as f64;
                        for (s, &m) in acc.iter_mut().zip(&means[c]) {
                            s.add(w * m);
                        }
                    }
                    acc.iter().map(|s| s.value() / total as f64).collect()
                })
                .collect();
        }
        let mut feats = Vec::with_capacity(layer.len() * (a + 1));
        for (m, &c) in means.iter().zip(layer.counts()) {
            feats.extend_from_slice(m);
            feats.push((c as f64).ln_1p());
        }
        out.push(layer.with_features(a + 1, feats)?);
    }
    Ok(out)
}

impl Scene {
    /// Uses `external` layers when given, otherwise synthesizes them.
    pub fn build(cloud: PointCloud, cfg: &PdvConfig, external: Option<Vec<SparseVoxelLayer>>) -> Result<Self> {
        let layers = match external {
            Some(l) => l,
            None => synthesize_layers(&cloud, cfg)?,
        };
        Ok(Self { cloud, layers })
    }
}

/// Parameters and head layout of one run.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ParamStore,
    pub heads: Heads,
}

impl Model {
    /// Seeds every parameter not already present in `params`.
    pub fn new(cfg: &PdvConfig, ctx: &PoolingContext<'_>, mut params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        ctx.init_params(&mut params);
        cfg.attn.init(&mut params)?;
        let heads = Heads::new(&cfg.head, cfg.pool.num_grid_points() * cfg.pool.feature_width())?;
        heads.init(&mut params);
        Ok(Self { params, heads })
    }
}

/// Intermediate state of one proposal.
#[derive(Debug, Clone)]
pub struct ProposalTrace {
    pub pooled: GridPointSet,
    pub attended: GridPointSet,
    pub residuals: [f64; CODE_SIZE],
    pub logit: f64,
}

/// Pooled and attended grids of one proposal.
pub fn pool_and_attend(
    ctx: &PoolingContext<'_>,
    model: &Model,
    cfg: &PdvConfig,
    proposal: &BoxProposal,
    points: &[Vec3],
) -> Result<(GridPointSet, GridPointSet)> {
    let pooled = ctx.pool_box(&proposal.bbox, &model.params, points)?;
    let attended = grid_self_attention(&pooled, &proposal.bbox, &cfg.attn, &model.params)?;
    Ok((pooled, attended))
}

/// Decodes the residuals, counts raw points in the refined box and scores it.
fn score_refined(
    model: &Model,
    proposal: &BoxProposal,
    index: usize,
    fs: &Matrix,
    r: ArrayView1<'_, f64>,
    points: &[Vec3],
) -> Result<(RefinedBox, [f64; CODE_SIZE], f64)> {
    let mut residuals = [0.0; CODE_SIZE];
    for (d, &v) in residuals.iter_mut().zip(r) {
        *d = v;
    }
    let bbox = decode(&proposal.bbox, &residuals)?;
    let num_points = bbox.count_points(points) as u64;
    let logit = model.heads.density_confidence_forward(fs, &[bbox.center], &[num_points], &model.params)?[0];
    let refined =
        RefinedBox { bbox, confidence: sigmoid(logit), num_points, label: proposal.label.clone(), proposal: index };
    Ok((refined, residuals, logit))
}

/// Refines one proposal: pool, attend, regress, then score the refined box
/// from its center and raw-point count.
pub fn refine_proposal(
    ctx: &PoolingContext<'_>,
    model: &Model,
    cfg: &PdvConfig,
    proposal: &BoxProposal,
    index: usize,
    points: &[Vec3],
) -> Result<(RefinedBox, ProposalTrace)> {
    let (pooled, attended) = pool_and_attend(ctx, model, cfg, proposal, points)?;
    let (fs, r) = model.heads.shared_and_branch_forward(&flatten_grid(&attended.features), &model.params)?;
    let (refined, residuals, logit) = score_refined(model, proposal, index, &fs, r.row(0), points)?;
    Ok((refined, ProposalTrace { pooled, attended, residuals, logit }))
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    /// One refined box per proposal, in input order.
    pub refined: Vec<RefinedBox>,
    /// Proposal indices surviving NMS, ascending.
    pub kept: Vec<usize>,
    pub traces: Option<Vec<ProposalTrace>>,
}

impl RefineOutput {
    pub fn kept_boxes(&self) -> Vec<RefinedBox> {
        self.kept.iter().map(|&i| self.refined[i].clone()).collect()
    }
}

/// Runs the second stage over all proposals on a pool of `workers` threads.
/// Results do not depend on the worker count.
pub fn refine(
    scene: &Scene,
    proposals: &[BoxProposal],
    cfg: &PdvConfig,
    params: ParamStore,
    workers: usize,
    keep_traces: bool,
) -> Result<RefineOutput> {
    let ctx = PoolingContext::new(&cfg.pool, &scene.layers)?;
    let model = Model::new(cfg, &ctx, params)?;
    let points = scene.cloud.positions();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let grids: Vec<(GridPointSet, GridPointSet)> = pool.install(|| {
        proposals.par_iter().map(|p| pool_and_attend(&ctx, &model, cfg, p, points)).collect::<Result<_>>()
    })?;
    // The shared head dominates the cost; batching proposals turns it into
    // a matrix product that streams the weights once per chunk.
    let heads_out: Vec<(Matrix, Matrix)> = pool.install(|| {
        grids
            .par_chunks(HEAD_BATCH)
            .map(|chunk| {
                let rows: Vec<Matrix> = chunk.iter().map(|(_, a)| flatten_grid(&a.features)).collect();
                model.heads.shared_and_branch_forward(&stack_rows(&rows)?, &model.params)
            })
            .collect::<Result<_>>()
    })?;
    let scored: Vec<(RefinedBox, [f64; CODE_SIZE], f64)> = pool.install(|| {
        proposals
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let (fs, r) = &heads_out[i / HEAD_BATCH];
                let row = i % HEAD_BATCH;
                let fs = fs.slice(s![row..row + 1, ..]).to_owned();
                score_refined(&model, p, i, &fs, r.row(row), points)
            })
            .collect::<Result<_>>()
    })?;
    let mut refined = Vec::with_capacity(scored.len());
    let mut traces = Vec::with_capacity(if keep_traces { scored.len() } else { 0 });
    for ((r, residuals, logit), (pooled, attended)) in scored.into_iter().zip(grids) {
        refined.push(r);
        if keep_traces {
            traces.push(ProposalTrace { pooled, attended, residuals, logit });
        }
    }
    let boxes: Vec<Box3d> = refined.iter().map(|r| r.bbox).collect();
    let scores: Vec<f64> = refined.iter().map(|r| r.confidence).collect();
    let mut kept = nms(&boxes, &scores, cfg.nms_threshold);
    kept.sort_unstable();
    Ok(RefineOutput { refined, kept, traces: keep_traces.then_some(traces) })
}

/// Proposals per shared-head matrix product.
const HEAD_BATCH: usize = 64;

/// Names accepted by [`stage_json`].
pub const STAGES: [&str; 5] = ["layers", "centroids", "grids", "attended", "heads"];

#[derive(Serialize)]
struct CentroidDump<'a> {
    level: usize,
    coords: &'a [[i32; 3]],
    counts: &'a [u64],
    centroids: &'a [Vec3],
}

#[derive(Serialize)]
struct HeadDump {
    proposal: usize,
    residuals: [f64; CODE_SIZE],
    logit: f64,
    refined: RefinedRecord,
}

/// JSON serialization of one intermediate stage.
pub fn stage_json(stage: &str, scene: &Scene, out: &RefineOutput) -> Result<String> {
    let traces = || out.traces.as_ref().ok_or_else(|| Error::Contract("stage dump needs proposal traces".into()));
    let text = match stage {
        "layers" => serde_json::to_string(&LayerStack::from_layers(&scene.layers)),
        "centroids" => serde_json::to_string(
            &scene
                .layers
                .iter()
                .map(|l| CentroidDump {
                    level: l.level(),
                    coords: l.coords(),
                    counts: l.counts(),
                    centroids: l.centroids(),
                })
                .collect::<Vec<_>>(),
        ),
        "grids" => serde_json::to_string(&traces()?.iter().map(|t| t.pooled.to_dump()).collect::<Vec<GridDump>>()),
        "attended" => serde_json::to_string(&traces()?.iter().map(|t| t.attended.to_dump()).collect::<Vec<GridDump>>()),
        "heads" => serde_json::to_string(
            &traces()?
                .iter()
                .zip(&out.refined)
                .map(|(t, r)| HeadDump {
                    proposal: r.proposal,
                    residuals: t.residuals,
                    logit: t.logit,
                    refined: RefinedRecord::from(r),
                })
                .collect::<Vec<_>>(),
        ),
        other => return Err(Error::Config(format!("unknown stage {other:?}, expected one of {}", STAGES.join(", ")))),
    };
    text.map_err(|e| Error::Contract(e.to_string()))
}

/// One row of the points-in-box statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    /// Distance of the box center from the sensor origin, meters.
    pub distance: f64,
    pub num_points: u64,
    pub label: String,
}

pub fn box_point_stats(points: &[Vec3], boxes: &[BoxProposal]) -> Vec<StatsRow> {
    boxes
        .iter()
        .map(|b| StatsRow {
            distance: norm(b.bbox.center),
            num_points: b.bbox.count_points(points) as u64,
            label: b.label.clone().unwrap_or_default(),
        })
        .collect()
}

/// Summary of the rows whose distance falls in `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsBin {
    pub lo: f64,
    pub hi: f64,
    pub boxes: usize,
    pub mean_points: f64,
    pub min_points: u64,
    pub max_points: u64,
}

/// Bins rows by distance; empty bins are omitted.
pub fn bin_stats(rows: &[StatsRow], bin_size: f64) -> Result<Vec<StatsBin>> {
    if !(bin_size > 0.0) || !bin_size.is_finite() {
        return Err(Error::Config(format!("bin size must be positive, got {bin_size}")));
    }
    let mut bins: std::collections::BTreeMap<i64, Vec<u64>> = Default::default();
    for r in rows {
        bins.entry((r.distance / bin_size).floor() as i64).or_default().push(r.num_points);
    }
    Ok(bins
        .into_iter()
        .map(|(k, v)| StatsBin {
            lo: k as f64 * bin_size,
            hi: (k + 1) as f64 * bin_size,
            boxes: v.len(),
            mean_points: v.iter().sum::<u64>() as f64 / v.len() as f64,
            min_points: *v.iter().min().expect("non-empty bin"),
            max_points: *v.iter().max().expect("non-empty bin"),
        })
        .collect())
}

/// Writes `distance,num_points,label` rows to `path`.
pub fn write_stats_rows(path: impl AsRef<Path>, rows: &[StatsRow]) -> Result<()> {
    write_csv_records(path.as_ref(), rows)
}

pub fn write_stats_bins(path: impl AsRef<Path>, bins: &[StatsBin]) -> Result<()> {
    write_csv_records(path.as_ref(), bins)
}

fn write_csv_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Contract(format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_lines_roundtrip() {
        let text = "{\"cx\":1,\"cy\":2,\"cz\":0.5,\"dx\":4,\"dy\":2,\"dz\":1.5,\"yaw\":0.3,\"score\":0.9,\"label\":\"Car\"}\n\n";
        let boxes = parse_boxes(text).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(parse_boxes(&boxes_to_jsonl(&boxes)).unwrap(), boxes);
    }

    #[test]
    fn bad_line_reports_line_number() {
        match parse_boxes("{\"cx\":1}\n") {
            Err(Error::Parse(m)) => assert!(m.starts_with("line 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_box_row() {
        let b = BoxProposal {
            bbox: Box3d::new([10.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap(),
            score: 0.0,
            label: Some("Car".into()),
        };
        let rows = box_point_stats(&[], &[b]);
        assert_eq!(rows, vec![StatsRow { distance: 10.0, num_points: 0, label: "Car".into() }]);
    }

    #[test]
    fn synthesized_features_are_mean_aux_and_log_count() {
        let cloud = PointCloud::from_parts(
            vec![[1.01, 1.01, 0.01], [1.02, 1.03, 0.02], [1.04, 1.01, 0.05]],
            vec![0.2, 0.4, 0.9],
            1,
        )
        .unwrap();
        let layers = synthesize_layers(&cloud, &PdvConfig::default()).unwrap();
        let top = layers.last().unwrap();
        assert_eq!(layers.len(), 4);
        assert_eq!(top.len(), 1);
        assert!((top.feature(0)[0] - 0.5).abs() < 1e-15);
        assert_eq!(top.feature(0)[1], 4f64.ln());
    }
}
