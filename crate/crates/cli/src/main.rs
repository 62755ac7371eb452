//! `sfm`: synthetic scenes, reconstruction, evaluation and export from the command line.
//!
//! Exit codes: 0 on success, 1 when reconstruction (or a derivative check) fails, 2 on usage,
//! parse or I/O errors. `SFM_THREADS` caps the worker threads.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use sfm_core::align::align_cameras;
use sfm_core::filtering::FilterMask;
use sfm_core::gradcheck::{check_implicit_gradient, check_projection_jacobian};
use sfm_core::io::cameras::{load_cameras, save_cameras};
use sfm_core::io::colmap::export_colmap;
use sfm_core::io::ply::{read_ply, write_ply};
use sfm_core::io::tracks::{load_scene_file, save_scene_file};
use sfm_core::io::{to_json_string, write_json};
use sfm_core::metrics::{cloud_accuracy_completeness, curve_csv, pairwise_errors, MetricReport};
use sfm_core::pipeline::{reconstruct, ReconstructionConfig};
use sfm_core::synthetic::{generate_synthetic, SyntheticConfig};
use sfm_core::Error;

#[derive(Parser)]
#[command(name = "sfm", version, about = "Track-driven structure from motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic track file with its ground truth.
    Synth {
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 300)]
        tracks: usize,
        /// Observation noise std in pixels.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Fraction of observations replaced by uniform in-image points.
        #[arg(long, default_value_t = 0.0)]
        outliers: f64,
        /// Fraction of observations marked invisible.
        #[arg(long, default_value_t = 0.0)]
        occlusion: f64,
        #[arg(long, default_value_t = 1024)]
        width: u32,
        #[arg(long, default_value_t = 768)]
        height: u32,
        #[arg(long, default_value_t = 1228.8)]
        focal: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the ideal observations and outlier flags.
        #[arg(long)]
        sidecar: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Reconstruct cameras and points from a track file.
    Reconstruct {
        scene: PathBuf,
        /// Output directory for cameras.json, points.ply, report.json and mask.json.
        #[arg(short, long)]
        output: PathBuf,
        /// JSON reconstruction config; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the query frame.
        #[arg(long)]
        query: Option<usize>,
    },
    /// Score reconstructed cameras (and optionally points) against a scene's ground truth.
    Evaluate {
        cameras: PathBuf,
        /// Track file carrying ground truth.
        scene: PathBuf,
        /// AUC threshold in degrees.
        #[arg(long, default_value_t = 30.0)]
        auc: f64,
        /// Reconstructed cloud to score after aligning cameras to ground truth.
        #[arg(long)]
        points: Option<PathBuf>,
        /// Cloud thresholds in scene units.
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.05")]
        cloud_thresholds: Vec<f64>,
        /// Full metric report.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Accuracy-threshold curve as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Write a reconstruction as COLMAP text files.
    ExportColmap {
        scene: PathBuf,
        /// Directory written by `reconstruct`.
        reconstruction: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Check the projection Jacobian and the implicit gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

enum Failure {
    /// Exit code 1.
    Failed(String),
    /// Exit code 2.
    Usage(String),
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        match err {
            Error::Reconstruction(_)
            | Error::Solver(_)
            | Error::Contract(_)
            | Error::Degenerate(_) => Failure::Failed(err.to_string()),
            _ => Failure::Usage(err.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

/// Runs a loader, naming the file in I/O and JSON errors, which do not carry it.
fn read<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T, Error>) -> Result<T, Failure> {
    load(path).map_err(|e| match e {
        Error::Io(_) | Error::Json(_) => Failure::Usage(format!("{}: {e}", path.display())),
        e => e.into(),
    })
}

fn configure_threads() -> CliResult {
    let Ok(value) = std::env::var("SFM_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        Failure::Usage(format!(
            "SFM_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<ReconstructionConfig, Failure> {
    let Some(path) = path else {
        return Ok(ReconstructionConfig::default());
    };
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn synth(
    frames: usize,
    tracks: usize,
    noise: f64,
    outliers: f64,
    occlusion: f64,
    image_size: (u32, u32),
    focal: f64,
    seed: u64,
    sidecar: bool,
    output: &Path,
) -> CliResult {
    let synth = generate_synthetic(&SyntheticConfig {
        n_frames: frames,
        n_tracks: tracks,
        noise_px: noise,
        outlier_frac: outliers,
        occlusion_frac: occlusion,
        seed,
        image_size,
        focal_px: focal,
    })
    .map_err(|e| Failure::Usage(e.to_string()))?;
    save_scene_file(output, &synth.scene, Some(&synth.truth), sidecar)?;
    Ok(())
}

fn run_reconstruct(
    scene: &Path,
    output: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    query: Option<usize>,
) -> CliResult {
    let mut config = load_config(config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if query.is_some() {
        config.query = query;
    }
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let scene = read(scene, load_scene_file)?.scene;
    let result = match reconstruct(&scene, &config) {
        Ok(r) => r,
        Err(Error::Referential(msg)) => return Err(Failure::Usage(msg)),
        Err(e) => return Err(Failure::Failed(e.to_string())),
    };
    create_dir(output)?;
    save_cameras(&output.join("cameras.json"), &result.cameras)?;
    write_ply(&output.join("points.ply"), &result.points)?;
    write_json(&output.join("report.json"), &result.report)?;
    write_json(&output.join("mask.json"), &result.mask)?;
    let report = &result.report;
    println!(
        "rounds {} best {} mean {:.6} px rms {:.6} px registered {}/{} points {}/{}",
        report.rounds.len(),
        report.best_round,
        report.mean_reprojection_px,
        report.rms_reprojection_px,
        scene.frames.len() - report.unregistered_frames.len(),
        scene.frames.len(),
        scene.tracks.len() - report.discarded_tracks.len(),
        scene.tracks.len()
    );
    Ok(())
}

fn evaluate(
    cameras: &Path,
    scene: &Path,
    auc: f64,
    points: Option<&Path>,
    cloud_thresholds: &[f64],
    json: Option<&Path>,
    curve: Option<&Path>,
) -> CliResult {
    if !(auc > 0.0 && auc.is_finite()) {
        return Err(Failure::Usage(format!("--auc must be positive, got {auc}")));
    }
    let predicted = read(cameras, load_cameras)?;
    let file = read(scene, load_scene_file)?;
    let truth = file
        .truth
        .ok_or_else(|| Failure::Usage(format!("{} carries no ground truth", scene.display())))?;
    let pairs =
        pairwise_errors(&predicted, &truth.cameras).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut report = MetricReport::new(pairs, auc);
    if let Some(points) = points {
        let cloud = read(points, read_ply)?;
        let similarity = align_cameras(&predicted, &truth.cameras)?;
        let aligned: Vec<Vector3<f64>> = cloud.iter().map(|(_, x)| similarity.apply(x)).collect();
        report.cloud = cloud_accuracy_completeness(&aligned, &truth.points, cloud_thresholds)?;
    }
    let mut header = report.summary.csv_header();
    let mut row = report.summary.csv_row();
    for c in &report.cloud {
        header.push_str(&format!(",acc@{0},comp@{0}", c.threshold));
        row.push_str(&format!(",{:.4},{:.4}", c.accuracy, c.completeness));
    }
    println!("{header}\n{row}");
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    if let Some(path) = curve {
        fs::write(path, curve_csv(&report.curve)).map_err(Error::from)?;
    }
    Ok(())
}

fn run_export(scene: &Path, reconstruction: &Path, output: &Path) -> CliResult {
    let mut scene = read(scene, load_scene_file)?.scene;
    let cameras = read(&reconstruction.join("cameras.json"), load_cameras)?;
    if cameras.len() != scene.frames.len() {
        return Err(Failure::Usage(format!(
            "cameras.json has {} frames, the scene {}",
            cameras.len(),
            scene.frames.len()
        )));
    }
    let mut points = vec![None; scene.tracks.len()];
    for (track, x) in read(&reconstruction.join("points.ply"), read_ply)? {
        let slot = points
            .get_mut(track)
            .ok_or_else(|| Failure::Usage(format!("points.ply references track {track}")))?;
        *slot = Some(x);
    }
    let mask_path = reconstruction.join("mask.json");
    let mask: Option<FilterMask> = if mask_path.exists() {
        Some(read(&mask_path, |p| {
            Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
        })?)
    } else {
        None
    };
    scene.cameras = Some(cameras);
    scene.points = Some(points);
    create_dir(output)?;
    let export = export_colmap(&scene, mask.as_ref(), output)?;
    if !export.skipped_frames.is_empty() {
        eprintln!(
            "warning: unregistered frames omitted: {:?}",
            export.skipped_frames
        );
    }
    println!("images {} points {}", export.images, export.points);
    Ok(())
}

fn gradcheck(samples: usize, seed: u64, json: Option<&Path>) -> CliResult {
    let jacobian = check_projection_jacobian(samples, seed)?;
    let implicit = check_implicit_gradient(seed)?;
    println!(
        "projection jacobian: {} samples, max relative error {:e}",
        jacobian.samples, jacobian.max_relative_error
    );
    println!(
        "implicit gradient: {} cameras, {} points, {} observations, max relative error {:e}",
        implicit.cameras, implicit.points, implicit.observations, implicit.max_relative_error
    );
    if let Some(path) = json {
        let value = serde_json::json!({
            "format_version": sfm_core::io::FORMAT_VERSION,
            "projection_jacobian": jacobian,
            "implicit_gradient": implicit,
        });
        fs::write(path, to_json_string(&value)?).map_err(Error::from)?;
    }
    if jacobian.passed() && implicit.passed() {
        Ok(())
    } else {
        Err(Failure::Failed(
            "a derivative check exceeded its tolerance".into(),
        ))
    }
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Synth {
            frames,
            tracks,
            noise,
            outliers,
            occlusion,
            width,
            height,
            focal,
            seed,
            sidecar,
            output,
        } => synth(
            frames,
            tracks,
            noise,
            outliers,
            occlusion,
            (width, height),
            focal,
            seed,
            sidecar,
            &output,
        ),
        Command::Reconstruct {
            scene,
            output,
            config,
            seed,
            query,
        } => run_reconstruct(&scene, &output, config.as_deref(), seed, query),
        Command::Evaluate {
            cameras,
            scene,
            auc,
            points,
            cloud_thresholds,
            json,
            curve,
        } => evaluate(
            &cameras,
            &scene,
            auc,
            points.as_deref(),
            &cloud_thresholds,
            json.as_deref(),
            curve.as_deref(),
        ),
        Command::ExportColmap {
            scene,
            reconstruction,
            output,
        } => run_export(&scene, &reconstruction, &output),
        Command::Gradcheck {
            samples,
            seed,
            json,
        } => gradcheck(samples, seed, json.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
