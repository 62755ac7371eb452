//! The JSON track file.
//!
//! ```json
//! { "format_version": "1.0",
//!   "frames": [ { "id": 0, "width": 1024, "height": 768 } ],
//!   "tracks": [ { "query": [x, y],
//!                 "obs": [ { "frame": 0, "x": 10.5, "y": 20.0, "v": 1.0, "sx": 0.5, "sy": 0.5 } ] } ],
//!   "ground_truth": { ... } }
//! ```
//!
//! Coordinates are pixels. `v` defaults to 1.0 and `sx`/`sy` (per-axis standard deviation) to
//! 0.5 px when absent. Frame ids must cover `0..n`. The optional `ground_truth` block carries
//! synthetic cameras and points, and with the sidecar enabled the ideal observations and
//! outlier flags; the reconstruction pipeline never reads it.

use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::cameras::{CameraRecord, CONVENTION};
use super::{check_version, default_version, json_error, to_json_string};
use crate::error::{Error, Result};
use crate::scene::{Frame, Scene, Track, TrackObservation, DEFAULT_SIGMA};
use crate::synthetic::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameRecord {
    id: usize,
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObsRecord {
    frame: usize,
    x: f64,
    y: f64,
    #[serde(default)]
    v: Option<f64>,
    #[serde(default)]
    sx: Option<f64>,
    #[serde(default)]
    sy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrackRecord {
    #[serde(default)]
    query: Option<[f64; 2]>,
    obs: Vec<ObsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TruthRecord {
    convention: String,
    cameras: Vec<CameraRecord>,
    points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ideal: Option<Vec<Vec<[f64; 2]>>>,
    /// `[track, observation]` index pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outliers: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrackFile {
    #[serde(default = "default_version")]
    format_version: String,
    frames: Vec<FrameRecord>,
    tracks: Vec<TrackRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<TruthRecord>,
}

/// A parsed track file. `truth.ideal` and `truth.outlier` are empty when the file carries no
/// sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub scene: Scene,
    pub truth: Option<GroundTruth>,
}

fn parse_error(location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        location,
        message: message.into(),
    }
}

pub fn parse_scene_file(text: &str) -> Result<SceneFile> {
    let file: TrackFile = serde_json::from_str(text).map_err(json_error)?;
    check_version(&file.format_version)?;

    let mut frame_records = file.frames.clone();
    frame_records.sort_by_key(|f| f.id);
    for (i, f) in frame_records.iter().enumerate() {
        if f.id != i {
            return Err(Error::Referential(format!(
                "frame ids must cover 0..{} exactly (found id {} at sorted position {i})",
                frame_records.len(),
                f.id
            )));
        }
    }
    let frames: Vec<Frame> = frame_records
        .iter()
        .map(|f| Frame {
            id: f.id,
            width: f.width,
            height: f.height,
        })
        .collect();

    let mut tracks = Vec::with_capacity(file.tracks.len());
    for (j, rec) in file.tracks.iter().enumerate() {
        if rec.obs.is_empty() {
            return Err(parse_error(
                format!("track {j}"),
                "track has no observations",
            ));
        }
        let mut observations = Vec::with_capacity(rec.obs.len());
        for (k, o) in rec.obs.iter().enumerate() {
            let location = || format!("track {j} observation {k}");
            if o.frame >= frames.len() {
                return Err(Error::Referential(format!(
                    "track {j} observation {k} references frame {} not in the {}-frame inventory",
                    o.frame,
                    frames.len()
                )));
            }
            let visibility = o.v.unwrap_or(1.0);
            if !(0.0..=1.0).contains(&visibility) {
                return Err(parse_error(
                    location(),
                    format!("visibility {visibility} outside [0, 1]"),
                ));
            }
            let sigma = Vector2::new(o.sx.unwrap_or(DEFAULT_SIGMA), o.sy.unwrap_or(DEFAULT_SIGMA));
            if !(sigma.x > 0.0 && sigma.y > 0.0) {
                return Err(parse_error(location(), "sigma must be positive"));
            }
            if !(o.x.is_finite() && o.y.is_finite()) {
                return Err(parse_error(location(), "non-finite coordinate"));
            }
            observations.push(TrackObservation {
                frame: o.frame,
                xy: Vector2::new(o.x, o.y),
                visibility,
                sigma,
            });
        }
        observations.sort_by_key(|o| o.frame);
        if observations.windows(2).any(|w| w[0].frame == w[1].frame) {
            return Err(parse_error(
                format!("track {j}"),
                "two observations in the same frame",
            ));
        }
        let query_point = rec.query.map(Vector2::from).unwrap_or(observations[0].xy);
        tracks.push(Track {
            observations,
            query_point,
        });
    }
    let scene = Scene::new(frames, tracks)?;

    let truth = match file.ground_truth {
        None => None,
        Some(gt) => Some(parse_truth(gt, &scene)?),
    };
    Ok(SceneFile { scene, truth })
}

fn parse_truth(gt: TruthRecord, scene: &Scene) -> Result<GroundTruth> {
    if gt.convention != CONVENTION {
        return Err(parse_error(
            "ground_truth.convention".into(),
            "unsupported convention",
        ));
    }
    if gt.cameras.len() != scene.frames.len() {
        return Err(Error::Referential(
            "ground truth must carry one camera per frame".into(),
        ));
    }
    if gt.points.len() != scene.tracks.len() {
        return Err(Error::Referential(
            "ground truth must carry one point per track".into(),
        ));
    }
    let mut cameras = Vec::with_capacity(gt.cameras.len());
    for (i, rec) in gt.cameras.iter().enumerate() {
        if rec.frame != i {
            return Err(Error::Referential(format!(
                "ground-truth camera {i} has frame {}",
                rec.frame
            )));
        }
        cameras.push(rec.to_camera()?);
    }
    let points = gt.points.iter().map(|p| Vector3::from(*p)).collect();
    let ideal = gt
        .ideal
        .map(|all| {
            all.into_iter()
                .map(|t| t.into_iter().map(Vector2::from).collect())
                .collect()
        })
        .unwrap_or_default();
    let outlier = match gt.outliers {
        None => Vec::new(),
        Some(pairs) => {
            let mut flags: Vec<Vec<bool>> = scene
                .tracks
                .iter()
                .map(|t| vec![false; t.observations.len()])
                .collect();
            for [j, k] in pairs {
                let slot = flags.get_mut(j).and_then(|t| t.get_mut(k)).ok_or_else(|| {
                    Error::Referential(format!("outlier flag [{j}, {k}] out of range"))
                })?;
                *slot = true;
            }
            flags
        }
    };
    Ok(GroundTruth {
        cameras,
        points,
        ideal,
        outlier,
    })
}

pub fn load_scene_file(path: &Path) -> Result<SceneFile> {
    parse_scene_file(&fs::read_to_string(path)?)
}

/// Reads the tracks and frame inventory; any ground-truth block is ignored.
pub fn load_tracks(path: &Path) -> Result<Scene> {
    Ok(load_scene_file(path)?.scene)
}

/// Serializes a scene's frames and tracks. With `truth`, the ground-truth cameras and points
/// are written too, and with `sidecar` also the ideal observations and outlier flags.
pub fn scene_to_string(
    scene: &Scene,
    truth: Option<&GroundTruth>,
    sidecar: bool,
) -> Result<String> {
    let file = TrackFile {
        format_version: default_version(),
        frames: scene
            .frames
            .iter()
            .map(|f| FrameRecord {
                id: f.id,
                width: f.width,
                height: f.height,
            })
            .collect(),
        tracks: scene
            .tracks
            .iter()
            .map(|t| TrackRecord {
                query: Some([t.query_point.x, t.query_point.y]),
                obs: t
                    .observations
                    .iter()
                    .map(|o| ObsRecord {
                        frame: o.frame,
                        x: o.xy.x,
                        y: o.xy.y,
                        v: Some(o.visibility),
                        sx: Some(o.sigma.x),
                        sy: Some(o.sigma.y),
                    })
                    .collect(),
            })
            .collect(),
        ground_truth: truth.map(|gt| TruthRecord {
            convention: CONVENTION.to_string(),
            cameras: gt
                .cameras
                .iter()
                .enumerate()
                .map(|(i, c)| CameraRecord::from_camera(i, c))
                .collect(),
            points: gt.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            ideal: sidecar.then(|| {
                gt.ideal
                    .iter()
                    .map(|t| t.iter().map(|y| [y.x, y.y]).collect())
                    .collect()
            }),
            outliers: sidecar.then(|| {
                gt.outlier
                    .iter()
                    .enumerate()
                    .flat_map(|(j, flags)| {
                        flags
                            .iter()
                            .enumerate()
                            .filter(|(_, f)| **f)
                            .map(move |(k, _)| [j, k])
                    })
                    .collect()
            }),
        }),
    };
    to_json_string(&file)
}

pub fn save_tracks(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, scene_to_string(scene, None, false)?)?;
    Ok(())
}

pub fn save_scene_file(
    path: &Path,
    scene: &Scene,
    truth: Option<&GroundTruth>,
    sidecar: bool,
) -> Result<()> {
    fs::write(path, scene_to_string(scene, truth, sidecar)?)?;
    Ok(())
}
