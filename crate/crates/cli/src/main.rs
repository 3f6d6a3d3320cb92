//! `pdv`: run the density-aware second stage on a scan, gather points-in-box
//! statistics, check gradients, or synthesize LiDAR scenes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pdv_core::config::PdvConfig;
use pdv_core::geometry::Box3d;
use pdv_core::nn::ParamStore;
use pdv_core::pcio::{load_cloud, synth_lidar_scan, write_csv, write_kitti_bin};
use pdv_core::pipeline::{
    bin_stats, box_point_stats, read_boxes, refine, refined_to_jsonl, stage_json, write_stats_bins, write_stats_rows,
    Scene, STAGES,
};
use pdv_core::voxel::LayerStack;
use pdv_core::{gradsuite, Error, Result};

#[derive(Parser)]
#[command(name = "pdv", version, about = "Point-density-aware box refinement for LiDAR detections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine proposals and write the surviving boxes as JSON lines.
    Refine {
        /// Point cloud: KITTI `.bin` or `.csv` with an `x,y,z,...` header.
        #[arg(long)]
        scan: PathBuf,
        /// Proposal boxes, one JSON object per line.
        #[arg(long)]
        proposals: PathBuf,
        /// JSON configuration; defaults apply when neither this nor PDV_CONFIG is set.
        #[arg(long, env = "PDV_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Voxel layer dump replacing the synthesized features.
        #[arg(long)]
        layers: Option<PathBuf>,
        /// Parameter archive; tensors it lacks are seeded.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Also write `<out>.<stage>.json`; repeatable.
        #[arg(long = "dump-stage", value_parser = clap::builder::PossibleValuesParser::new(STAGES))]
        dump_stage: Vec<String>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Points per box against distance from the sensor.
    Stats {
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long = "bin-size")]
        bin_size: f64,
        /// Per-box CSV; the binned summary goes next to it as `<stem>.bins.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Ray-cast a synthetic scan of the given boxes.
    Synth {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, default_value_t = 64)]
        beams: usize,
        /// Azimuth step in radians.
        #[arg(long = "az-step", default_value_t = 0.0035)]
        az_step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `.csv` or KITTI binary.
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[allow(clippy::too_many_arguments)]
fn cmd_refine(
    scan: &Path,
    proposals: &Path,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
    layers: Option<&Path>,
    params: Option<&Path>,
    dump_stage: &[String],
    workers: Option<usize>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => PdvConfig::load(p)?,
        None => PdvConfig::default(),
    };
    let cloud = load_cloud(scan)?;
    let proposals = read_boxes(proposals)?;
    let external = layers.map(LayerStack::read).transpose()?;
    let store = match params {
        Some(p) => {
            let s = ParamStore::load(p)?;
            if s.seed() != seed {
                return Err(Error::Config(format!("parameter archive seed {} differs from --seed {seed}", s.seed())));
            }
            s
        }
        None => ParamStore::new(seed),
    };
    let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let scene = Scene::build(cloud, &cfg, external)?;
    let result = refine(&scene, &proposals, &cfg, store, workers, !dump_stage.is_empty())?;
    write_file(out, refined_to_jsonl(&result.kept_boxes()).as_bytes())?;
    for stage in dump_stage {
        write_file(&suffixed(out, &format!(".{stage}.json")), stage_json(stage, &scene, &result)?.as_bytes())?;
    }
    Ok(())
}

fn cmd_stats(scan: &Path, boxes: &Path, bin_size: f64, out: &Path) -> Result<()> {
    let cloud = load_cloud(scan)?;
    let boxes = read_boxes(boxes)?;
    let rows = box_point_stats(cloud.positions(), &boxes);
    let bins = bin_stats(&rows, bin_size)?;
    write_stats_rows(out, &rows)?;
    write_stats_bins(out.with_extension("bins.csv"), &bins)
}

fn cmd_gradcheck(seed: u64, seeds: u64) -> Result<()> {
    let mut failed = Vec::new();
    for s in seed..seed + seeds {
        for (name, r) in gradsuite::run_all(s) {
            let status = if r.passed { "ok" } else { "FAIL" };
            println!("{name:<16} seed {s:<4} max_rel_error {:.3e}  {status}", r.max_rel_error);
            if !r.passed {
                failed.push(format!("{name}@{s}"));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_synth(boxes: &Path, beams: usize, az_step: f64, seed: u64, out: &Path) -> Result<()> {
    let targets: Vec<Box3d> = read_boxes(boxes)?.into_iter().map(|p| p.bbox).collect();
    let cloud = synth_lidar_scan(beams, az_step, &targets, seed)?;
    match out.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => write_csv(out, &cloud),
        _ => write_kitti_bin(out, &cloud),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Refine { scan, proposals, config, seed, out, layers, params, dump_stage, workers } => cmd_refine(
            &scan,
            &proposals,
            config.as_deref(),
            seed,
            &out,
            layers.as_deref(),
            params.as_deref(),
            &dump_stage,
            workers,
        ),
        Command::Stats { scan, boxes, bin_size, out } => cmd_stats(&scan, &boxes, bin_size, &out),
        Command::Gradcheck { seed, seeds } => cmd_gradcheck(seed, seeds),
        Command::Synth { boxes, beams, az_step, seed, out } => cmd_synth(&boxes, beams, az_step, seed, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.to_string(), "kind": e.kind() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
