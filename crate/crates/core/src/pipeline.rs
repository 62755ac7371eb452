//! The reconstruction loop: initialize, filter, triangulate, bundle adjust, and repeat with a
//! different query frame while the mean reprojection error stays at or above a pixel.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::ba::{
    lm_solve, reprojection_stats, BaProblem, LmOptions, LmState, Observation, StopReason,
};
use crate::camera::Camera;
use crate::epipolar::{initialize_cameras, InitOptions, BATCH_MINIMAL_SETS, BATCH_REFINE_ROUNDS};
use crate::error::{Error, Result};
use crate::filtering::{
    filter_observations, filter_reprojection, filter_triangulated, reprojection_error,
    FilterConfig, FilterMask, MaskSummary,
};
use crate::io::FORMAT_VERSION;
use crate::scene::Scene;
use crate::triangulation::triangulate_dlt;

/// A round ending below this mean reprojection error (pixels) stops the loop.
pub const SUBPIXEL_PX: f64 = 1.0;
/// Frames with fewer surviving observations than this are reported unregistered.
pub const MIN_FRAME_OBSERVATIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    pub filter: FilterConfig,
    pub lm: LmOptions,
    pub max_rounds: usize,
    pub seed: u64,
    /// Query frame of the first round; chosen by covisibility when absent.
    pub query: Option<usize>,
    /// Extra minimal 8-pair subsets scored during initialization.
    pub init_minimal_sets: usize,
    /// Local refinement rounds for the best initialization candidates.
    pub init_refine_rounds: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            lm: LmOptions::default(),
            max_rounds: 3,
            seed: 0,
            query: None,
            init_minimal_sets: BATCH_MINIMAL_SETS,
            init_refine_rounds: BATCH_REFINE_ROUNDS,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        if self.lm.max_steps == 0 {
            return Err(Error::Config("lm.max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

fn tracks_seen(scene: &Scene, frame: usize) -> usize {
    scene
        .tracks
        .iter()
        .filter(|t| t.observation_in(frame).is_some())
        .count()
}

/// Frame seeing the most tracks; ties go to the lowest index.
pub fn select_query_frame(scene: &Scene) -> Result<usize> {
    if scene.frames.len() < 2 {
        return Err(Error::Arity {
            what: "frames",
            needed: 2,
            got: scene.frames.len(),
        });
    }
    let counts: Vec<usize> = (0..scene.frames.len())
        .map(|f| tracks_seen(scene, f))
        .collect();
    let best = *counts.iter().max().unwrap();
    Ok(counts.iter().position(|c| *c == best).unwrap())
}

/// Frame sharing the fewest tracks with `previous` among frames not used as a query yet; ties go
/// to the lowest index.
pub fn least_covisible_frame(scene: &Scene, previous: usize, used: &[usize]) -> Option<usize> {
    (0..scene.frames.len())
        .filter(|f| !used.contains(f))
        .min_by_key(|&f| {
            let shared = scene
                .tracks
                .iter()
                .filter(|t| t.observation_in(previous).is_some() && t.observation_in(f).is_some())
                .count();
            (shared, f)
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmSummary {
    pub steps: usize,
    pub initial_cost: f64,
    pub cost: f64,
    pub converged: bool,
    pub reason: StopReason,
}

impl From<&LmState> for LmSummary {
    fn from(s: &LmState) -> Self {
        Self {
            steps: s.step,
            initial_cost: s.initial_cost,
            cost: s.cost,
            converged: s.converged,
            reason: s.reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub query: usize,
    pub registered: usize,
    pub unregistered_frames: Vec<usize>,
    pub after_observation_filter: Option<MaskSummary>,
    pub after_triangulation_filter: Option<MaskSummary>,
    pub after_reprojection_filter: Option<MaskSummary>,
    /// Mean reprojection of the DLT points under the initial cameras, over the first BA's set.
    pub dlt_mean_px: Option<f64>,
    /// Mean reprojection after the first BA, same set.
    pub ba_mean_px: Option<f64>,
    pub first_lm: Option<LmSummary>,
    pub second_lm: Option<LmSummary>,
    pub mean_px: Option<f64>,
    pub rms_px: Option<f64>,
    /// Set when the round failed.
    pub error: Option<String>,
}

impl RoundReport {
    fn new(round: usize, query: usize) -> Self {
        Self {
            round,
            query,
            registered: 0,
            unregistered_frames: Vec::new(),
            after_observation_filter: None,
            after_triangulation_filter: None,
            after_reprojection_filter: None,
            dlt_mean_px: None,
            ba_mean_px: None,
            first_lm: None,
            second_lm: None,
            mean_px: None,
            rms_px: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub format_version: String,
    pub config: ReconstructionConfig,
    pub rounds: Vec<RoundReport>,
    /// Index into `rounds` of the returned reconstruction.
    pub best_round: usize,
    pub mean_reprojection_px: f64,
    pub rms_reprojection_px: f64,
    pub unregistered_frames: Vec<usize>,
    pub discarded_tracks: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub cameras: Vec<Option<Camera>>,
    pub points: Vec<Option<Vector3<f64>>>,
    pub mask: FilterMask,
    pub report: ReconstructionReport,
}

impl Reconstruction {
    /// Copy of `scene` carrying the reconstructed cameras and points.
    pub fn apply_to(&self, scene: &Scene) -> Scene {
        let mut out = scene.clone();
        out.cameras = Some(self.cameras.clone());
        out.points = Some(self.points.clone());
        out
    }
}

struct RoundResult {
    cameras: Vec<Option<Camera>>,
    points: Vec<Option<Vector3<f64>>>,
    mask: FilterMask,
    mean: f64,
    rms: f64,
}

/// Bundle adjustment over the surviving observations. Returns the problem, the frame of each
/// problem camera and the track of each problem point.
fn build_problem(
    scene: &Scene,
    cameras: &[Option<Camera>],
    points: &[Option<Vector3<f64>>],
    mask: &FilterMask,
    query: usize,
) -> Result<(BaProblem, Vec<usize>, Vec<usize>)> {
    let frames: Vec<usize> = (0..cameras.len())
        .filter(|&i| cameras[i].is_some())
        .collect();
    let mut frame_index = vec![usize::MAX; cameras.len()];
    for (k, &f) in frames.iter().enumerate() {
        frame_index[f] = k;
    }
    let mut tracks = Vec::new();
    let mut observations = Vec::new();
    for (j, track) in scene.tracks.iter().enumerate() {
        if points[j].is_none() {
            continue;
        }
        let kept: Vec<usize> = mask
            .kept_indices(j)
            .into_iter()
            .filter(|&k| cameras[track.observations[k].frame].is_some())
            .collect();
        // A single view leaves the point's depth free.
        if kept.len() < 2 {
            continue;
        }
        for k in kept {
            let o = &track.observations[k];
            observations.push(Observation {
                camera: frame_index[o.frame],
                point: tracks.len(),
                xy: o.xy,
                weight: 1.0,
            });
        }
        tracks.push(j);
    }
    if tracks.is_empty() {
        return Err(Error::Reconstruction(format!(
            "no track survived filtering ({:?})",
            mask.summary()
        )));
    }
    let mut problem = BaProblem::new(
        frames.iter().map(|&f| cameras[f].unwrap()).collect(),
        tracks.iter().map(|&j| points[j].unwrap()).collect(),
        observations,
    );
    let anchor = frame_index[query];
    if anchor == usize::MAX {
        return Err(Error::Reconstruction(format!(
            "query frame {query} is not registered"
        )));
    }
    problem.fix_gauge(anchor)?;
    Ok((problem, frames, tracks))
}

fn scatter(
    problem: &BaProblem,
    frames: &[usize],
    tracks: &[usize],
    n_frames: usize,
    n_tracks: usize,
) -> (Vec<Option<Camera>>, Vec<Option<Vector3<f64>>>) {
    let mut cameras = vec![None; n_frames];
    for (k, &f) in frames.iter().enumerate() {
        cameras[f] = Some(problem.cameras[k]);
    }
    let mut points = vec![None; n_tracks];
    for (k, &j) in tracks.iter().enumerate() {
        points[j] = Some(problem.points[k]);
    }
    (cameras, points)
}

/// Unregisters frames left with fewer than [`MIN_FRAME_OBSERVATIONS`] surviving observations;
/// bundle adjustment cannot correct their initial pose.
fn drop_sparse_frames(
    scene: &Scene,
    mut cameras: Vec<Option<Camera>>,
    points: &[Option<Vector3<f64>>],
    mask: &FilterMask,
    query: usize,
) -> Vec<Option<Camera>> {
    let mut counts = vec![0usize; cameras.len()];
    for (j, track) in scene.tracks.iter().enumerate() {
        if points[j].is_none() {
            continue;
        }
        for k in mask.kept_indices(j) {
            counts[track.observations[k].frame] += 1;
        }
    }
    for (f, camera) in cameras.iter_mut().enumerate() {
        if f != query && counts[f] < MIN_FRAME_OBSERVATIONS {
            *camera = None;
        }
    }
    cameras
}

fn round(
    scene: &Scene,
    query: usize,
    config: &ReconstructionConfig,
    report: &mut RoundReport,
) -> Result<RoundResult> {
    let init = initialize_cameras(
        scene,
        query,
        &InitOptions {
            seed: config.seed,
            minimal_sets: config.init_minimal_sets,
            refine_rounds: config.init_refine_rounds,
            ..InitOptions::default()
        },
    )?;
    report.registered = init.registered();
    report.unregistered_frames = (0..init.cameras.len())
        .filter(|&i| init.cameras[i].is_none())
        .collect();
    if init.registered() < 2 {
        return Err(Error::Reconstruction(format!(
            "only {} frame(s) could be registered",
            init.registered()
        )));
    }
    let cameras = init.cameras;
    let filter = &config.filter;

    let mask = filter_observations(scene, query, &[&cameras], filter);
    report.after_observation_filter = Some(mask.summary());
    let points: Vec<Option<Vector3<f64>>> = (0..scene.tracks.len())
        .map(|j| {
            let track = mask.surviving_track(scene, j)?;
            triangulate_dlt(&track, &cameras, false)
                .ok()
                .map(|t| t.point)
        })
        .collect();
    let mask = filter_triangulated(scene, &cameras, &points, filter, &mask);
    let mask = filter_reprojection(scene, &cameras, &points, filter, &mask);
    report.after_triangulation_filter = Some(mask.summary());

    let cameras = drop_sparse_frames(scene, cameras, &points, &mask, query);
    report.unregistered_frames = (0..cameras.len())
        .filter(|&i| cameras[i].is_none())
        .collect();
    report.registered = cameras.len() - report.unregistered_frames.len();
    if report.registered < 2 {
        return Err(Error::Reconstruction(format!(
            "only {} frame(s) kept enough observations",
            report.registered
        )));
    }

    let (problem, frames, tracks) = build_problem(scene, &cameras, &points, &mask, query)?;
    report.dlt_mean_px = Some(reprojection_stats(&problem).mean);
    let (solved, state) = lm_solve(&problem, &config.lm)?;
    report.ba_mean_px = Some(reprojection_stats(&solved).mean);
    report.first_lm = Some(LmSummary::from(&state));
    let (cameras, points) = scatter(
        &solved,
        &frames,
        &tracks,
        scene.frames.len(),
        scene.tracks.len(),
    );

    let mask = filter_reprojection(scene, &cameras, &points, filter, &mask);
    report.after_reprojection_filter = Some(mask.summary());
    let (problem, frames, tracks) = build_problem(scene, &cameras, &points, &mask, query)?;
    let (solved, state) = lm_solve(&problem, &config.lm)?;
    report.second_lm = Some(LmSummary::from(&state));
    let stats = reprojection_stats(&solved);
    report.mean_px = Some(stats.mean);
    report.rms_px = Some(stats.rms);
    let (cameras, points) = scatter(
        &solved,
        &frames,
        &tracks,
        scene.frames.len(),
        scene.tracks.len(),
    );
    // Tracks that lost their point in the final problem count as discarded.
    let mut mask = mask;
    for j in 0..scene.tracks.len() {
        if points[j].is_none() && mask.tracks[j].is_none() {
            mask.tracks[j] = Some(crate::filtering::TrackDrop::Triangulation);
        }
    }
    Ok(RoundResult {
        cameras,
        points,
        mask,
        mean: stats.mean,
        rms: stats.rms,
    })
}

/// Runs the reconstruction loop. Rounds continue while the best mean reprojection error is at
/// least [`SUBPIXEL_PX`]; each new round uses the unused frame least covisible with the previous
/// query. The round with the lowest mean reprojection error is returned.
pub fn reconstruct(scene: &Scene, config: &ReconstructionConfig) -> Result<Reconstruction> {
    config.validate()?;
    scene.validate()?;
    if scene.tracks.is_empty() {
        return Err(Error::Reconstruction("scene has no tracks".into()));
    }
    let mut query = match config.query {
        Some(q) if q >= scene.frames.len() => {
            return Err(Error::Referential(format!("query frame {q} out of range")));
        }
        Some(q) => q,
        None => select_query_frame(scene)?,
    };
    let mut used = Vec::new();
    let mut reports = Vec::new();
    let mut best: Option<(usize, RoundResult)> = None;
    for r in 0..config.max_rounds {
        used.push(query);
        let mut report = RoundReport::new(r, query);
        match round(scene, query, config, &mut report) {
            Ok(result) => {
                if best.as_ref().is_none_or(|(_, b)| result.mean < b.mean) {
                    best = Some((r, result));
                }
            }
            Err(err) => report.error = Some(err.to_string()),
        }
        reports.push(report);
        if best.as_ref().is_some_and(|(_, b)| b.mean < SUBPIXEL_PX) {
            break;
        }
        match least_covisible_frame(scene, query, &used) {
            Some(next) => query = next,
            None => break,
        }
    }
    let Some((best_round, result)) = best else {
        let reasons: Vec<String> = reports.iter().filter_map(|r| r.error.clone()).collect();
        return Err(Error::Reconstruction(reasons.join("; ")));
    };
    let unregistered_frames = (0..result.cameras.len())
        .filter(|&i| result.cameras[i].is_none())
        .collect();
    let discarded_tracks = (0..scene.tracks.len())
        .filter(|&j| result.points[j].is_none())
        .collect();
    Ok(Reconstruction {
        report: ReconstructionReport {
            format_version: FORMAT_VERSION.to_string(),
            config: *config,
            rounds: reports,
            best_round,
            mean_reprojection_px: result.mean,
            rms_reprojection_px: result.rms,
            unregistered_frames,
            discarded_tracks,
        },
        cameras: result.cameras,
        points: result.points,
        mask: result.mask,
    })
}

/// Mean reprojection error of every kept observation of a reconstruction.
pub fn mean_reprojection(
    scene: &Scene,
    cameras: &[Option<Camera>],
    points: &[Option<Vector3<f64>>],
    mask: &FilterMask,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (j, track) in scene.tracks.iter().enumerate() {
        let Some(x) = points[j] else { continue };
        for k in mask.kept_indices(j) {
            let o = &track.observations[k];
            if let Some(cam) = &cameras[o.frame] {
                total += reprojection_error(cam, &x, &o.xy);
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}
