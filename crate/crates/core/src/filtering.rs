//! Observation and track filtering.
//!
//! Every filter returns a [`FilterMask`] recording, per observation and per track, whether it
//! survives and why not. All comparisons are strict: an observation is dropped when `v < v_min`,
//! when either sigma is `> sigma_max`, when its Sampson error is `> sampson_factor / width`, or
//! when its reprojection error is `> max_reproj_px`. A track needs a pair of surviving
//! observations whose triangulation angle is `> min_tri_angle` and at least `min_track_len`
//! surviving observations.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::epipolar::{essential_from_cameras, sampson_error, sampson_threshold, Correspondence};
use crate::error::{Error, Result};
use crate::scene::{Scene, Track};
use crate::triangulation::{ray_angle, triangulation_angle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub v_min: f64,
    /// Pixels, per axis.
    pub sigma_max: f64,
    /// Divided by the image width to give a normalized-coordinate Sampson threshold.
    pub sampson_factor: f64,
    /// Degrees. Zero disables the angle test.
    pub min_tri_angle: f64,
    pub max_reproj_px: f64,
    pub min_track_len: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            v_min: 0.6,
            sigma_max: 1.0,
            sampson_factor: 0.8,
            min_tri_angle: 3.0,
            max_reproj_px: 3.0,
            min_track_len: 3,
        }
    }
}

impl FilterConfig {
    /// Thresholds under which no observation or track is ever dropped.
    pub fn disabled() -> Self {
        Self {
            v_min: 0.0,
            sigma_max: f64::INFINITY,
            sampson_factor: f64::INFINITY,
            min_tri_angle: 0.0,
            max_reproj_px: f64::INFINITY,
            min_track_len: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("v_min", self.v_min >= 0.0),
            ("sigma_max", self.sigma_max > 0.0),
            ("sampson_factor", self.sampson_factor > 0.0),
            ("min_tri_angle", (0.0..180.0).contains(&self.min_tri_angle)),
            ("max_reproj_px", self.max_reproj_px > 0.0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::Config(format!(
                "filter threshold {name} out of range"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationDrop {
    Visibility,
    Sigma,
    Unregistered,
    Sampson,
    Reprojection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackDrop {
    TriangulationAngle,
    TrackLength,
    /// No 3D point could be computed.
    Triangulation,
}

/// Survival status of every observation and track of a scene, indexed like `scene.tracks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMask {
    pub observations: Vec<Vec<Option<ObservationDrop>>>,
    pub tracks: Vec<Option<TrackDrop>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskSummary {
    pub observations_kept: usize,
    pub observations_dropped: usize,
    pub tracks_kept: usize,
    pub tracks_dropped: usize,
}

impl FilterMask {
    pub fn all_kept(scene: &Scene) -> Self {
        Self {
            observations: scene
                .tracks
                .iter()
                .map(|t| vec![None; t.observations.len()])
                .collect(),
            tracks: vec![None; scene.tracks.len()],
        }
    }

    pub fn track_kept(&self, track: usize) -> bool {
        self.tracks[track].is_none()
    }

    /// An observation survives when neither it nor its track was dropped.
    pub fn is_kept(&self, track: usize, obs: usize) -> bool {
        self.track_kept(track) && self.observations[track][obs].is_none()
    }

    pub fn kept_indices(&self, track: usize) -> Vec<usize> {
        if !self.track_kept(track) {
            return Vec::new();
        }
        (0..self.observations[track].len())
            .filter(|&k| self.observations[track][k].is_none())
            .collect()
    }

    /// The track restricted to its surviving observations, `None` when the track is dropped.
    pub fn surviving_track(&self, scene: &Scene, track: usize) -> Option<Track> {
        if !self.track_kept(track) {
            return None;
        }
        let t = &scene.tracks[track];
        Some(Track {
            observations: self
                .kept_indices(track)
                .into_iter()
                .map(|k| t.observations[k])
                .collect(),
            query_point: t.query_point,
        })
    }

    pub fn summary(&self) -> MaskSummary {
        let mut s = MaskSummary::default();
        for (j, obs) in self.observations.iter().enumerate() {
            if self.track_kept(j) {
                s.tracks_kept += 1;
            } else {
                s.tracks_dropped += 1;
            }
            for k in 0..obs.len() {
                if self.is_kept(j, k) {
                    s.observations_kept += 1;
                } else {
                    s.observations_dropped += 1;
                }
            }
        }
        s
    }
}

/// Per-track filter outcome, assembled into a mask in track order.
type TrackOutcome = (Vec<Option<ObservationDrop>>, Option<TrackDrop>);

fn assemble(outcomes: Vec<TrackOutcome>) -> FilterMask {
    let (observations, tracks) = outcomes.into_iter().unzip();
    FilterMask {
        observations,
        tracks,
    }
}

fn camera_for(set: &[Option<Camera>], frame: usize) -> Option<&Camera> {
    set.get(frame).and_then(Option::as_ref)
}

/// Track-level checks shared by every filter: the angle test on `kept` and the length test.
fn track_verdict(
    kept: &[usize],
    config: &FilterConfig,
    mut angle: impl FnMut(usize, usize) -> Option<f64>,
) -> Option<TrackDrop> {
    if config.min_tri_angle > 0.0 {
        let attained = kept.iter().enumerate().any(|(i, &a)| {
            kept[i + 1..]
                .iter()
                .any(|&b| angle(a, b).is_some_and(|deg| deg > config.min_tri_angle))
        });
        if !attained {
            return Some(TrackDrop::TriangulationAngle);
        }
    }
    if kept.len() < config.min_track_len {
        return Some(TrackDrop::TrackLength);
    }
    None
}

/// Pre-triangulation filtering against the query frame.
///
/// Each camera set in `camera_sets` (e.g. preliminary and initial cameras) must register a
/// frame for its observations to survive, and the Sampson test is applied under every set. The
/// Sampson anchor is the track's observation in `query`; tracks never seen in the query frame
/// skip that test. The angle test uses the back-projected observation rays under the first set.
pub fn filter_observations(
    scene: &Scene,
    query: usize,
    camera_sets: &[&[Option<Camera>]],
    config: &FilterConfig,
) -> FilterMask {
    let outcomes: Vec<TrackOutcome> = scene
        .tracks
        .par_iter()
        .map(|track| {
            let anchor = track.observation_in(query).map(|(_, o)| o.xy);
            let status: Vec<Option<ObservationDrop>> = track
                .observations
                .iter()
                .map(|o| {
                    if o.visibility < config.v_min {
                        return Some(ObservationDrop::Visibility);
                    }
                    if o.sigma.x > config.sigma_max || o.sigma.y > config.sigma_max {
                        return Some(ObservationDrop::Sigma);
                    }
                    if camera_sets
                        .iter()
                        .any(|set| camera_for(set, o.frame).is_none())
                    {
                        return Some(ObservationDrop::Unregistered);
                    }
                    let anchor = anchor?;
                    if o.frame == query {
                        return None;
                    }
                    let threshold =
                        sampson_threshold(config.sampson_factor, scene.frames[o.frame].width);
                    let inconsistent = camera_sets.iter().any(|set| {
                        let (Some(cq), Some(cb)) =
                            (camera_for(set, query), camera_for(set, o.frame))
                        else {
                            return false;
                        };
                        let pair = Correspondence::new(
                            cq.normalize_pixel(&anchor).xy(),
                            cb.normalize_pixel(&o.xy).xy(),
                        );
                        sampson_error(&essential_from_cameras(cq, cb), &pair) > threshold
                    });
                    inconsistent.then_some(ObservationDrop::Sampson)
                })
                .collect();
            let kept: Vec<usize> = (0..status.len()).filter(|&k| status[k].is_none()).collect();
            let verdict = track_verdict(&kept, config, |a, b| {
                let set = camera_sets.first()?;
                let (oa, ob) = (&track.observations[a], &track.observations[b]);
                Some(ray_angle(
                    camera_for(set, oa.frame)?,
                    &oa.xy,
                    camera_for(set, ob.frame)?,
                    &ob.xy,
                ))
            });
            (status, verdict)
        })
        .collect();
    assemble(outcomes)
}

fn point_angle<'a>(
    track: &'a Track,
    cameras: &'a [Option<Camera>],
    x: &'a Vector3<f64>,
) -> impl Fn(usize, usize) -> Option<f64> + 'a {
    move |a, b| {
        let ca = camera_for(cameras, track.observations[a].frame)?;
        let cb = camera_for(cameras, track.observations[b].frame)?;
        triangulation_angle(x, ca, cb).ok()
    }
}

/// Angle and length tests on triangulated points; tracks without a point are dropped.
pub fn filter_triangulated(
    scene: &Scene,
    cameras: &[Option<Camera>],
    points: &[Option<Vector3<f64>>],
    config: &FilterConfig,
    mask: &FilterMask,
) -> FilterMask {
    let outcomes: Vec<TrackOutcome> = (0..scene.tracks.len())
        .into_par_iter()
        .map(|j| {
            let status = mask.observations[j].clone();
            if let Some(reason) = mask.tracks[j] {
                return (status, Some(reason));
            }
            let Some(x) = points[j] else {
                return (status, Some(TrackDrop::Triangulation));
            };
            let kept = mask.kept_indices(j);
            let verdict = track_verdict(&kept, config, point_angle(&scene.tracks[j], cameras, &x));
            (status, verdict)
        })
        .collect();
    assemble(outcomes)
}

/// Reprojection error in pixels; infinite when the point does not project.
pub fn reprojection_error(camera: &Camera, x: &Vector3<f64>, y: &Vector2<f64>) -> f64 {
    match camera.project(x) {
        Ok(p) if p.pixel.iter().all(|v| v.is_finite()) => (p.pixel - y).norm(),
        _ => f64::INFINITY,
    }
}

/// Drops surviving observations reprojecting more than `max_reproj_px` away, then re-applies
/// the angle and length tests to what is left.
pub fn filter_reprojection(
    scene: &Scene,
    cameras: &[Option<Camera>],
    points: &[Option<Vector3<f64>>],
    config: &FilterConfig,
    mask: &FilterMask,
) -> FilterMask {
    let outcomes: Vec<TrackOutcome> = (0..scene.tracks.len())
        .into_par_iter()
        .map(|j| {
            let mut status = mask.observations[j].clone();
            if let Some(reason) = mask.tracks[j] {
                return (status, Some(reason));
            }
            let Some(x) = points[j] else {
                return (status, Some(TrackDrop::Triangulation));
            };
            let track = &scene.tracks[j];
            for (k, o) in track.observations.iter().enumerate() {
                if status[k].is_some() {
                    continue;
                }
                let err = camera_for(cameras, o.frame)
                    .map_or(f64::INFINITY, |c| reprojection_error(c, &x, &o.xy));
                if !(err <= config.max_reproj_px) {
                    status[k] = Some(ObservationDrop::Reprojection);
                }
            }
            let kept: Vec<usize> = (0..status.len()).filter(|&k| status[k].is_none()).collect();
            let verdict = track_verdict(&kept, config, point_angle(track, cameras, &x));
            (status, verdict)
        })
        .collect();
    assemble(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Frame, TrackObservation};
    use crate::synthetic::look_at;

    fn camera_at(center: Vector3<f64>) -> Camera {
        let r = look_at(&center, &Vector3::zeros(), 0.0);
        Camera::from_rotation(&r, -(r * center), 1000.0, Vector2::new(500.0, 400.0))
    }

    /// Three cameras 20 degrees apart around the origin, one point, exact observations.
    fn fixture() -> (Scene, Vec<Option<Camera>>, Vector3<f64>) {
        let cams: Vec<Option<Camera>> = [-20.0f64, 0.0, 20.0]
            .iter()
            .map(|deg| {
                let a = deg.to_radians();
                Some(camera_at(Vector3::new(4.0 * a.sin(), 0.0, -4.0 * a.cos())))
            })
            .collect();
        let x = Vector3::new(0.1, -0.05, 0.2);
        let observations = cams
            .iter()
            .enumerate()
            .map(|(i, c)| TrackObservation::new(i, c.as_ref().unwrap().project(&x).unwrap().pixel))
            .collect::<Vec<_>>();
        let query_point = observations[0].xy;
        let frames = (0..3)
            .map(|id| Frame {
                id,
                width: 1000,
                height: 800,
            })
            .collect();
        let scene =
            Scene::new(frames, vec![Track::new(observations, query_point).unwrap()]).unwrap();
        (scene, cams, x)
    }

    fn run(scene: &Scene, cams: &[Option<Camera>], config: &FilterConfig) -> FilterMask {
        filter_observations(scene, 0, &[cams], config)
    }

    #[test]
    fn defaults_are_the_reference_values() {
        let c = FilterConfig::default();
        assert_eq!(
            (
                c.v_min,
                c.sigma_max,
                c.sampson_factor,
                c.min_tri_angle,
                c.max_reproj_px,
                c.min_track_len
            ),
            (0.6, 1.0, 0.8, 3.0, 3.0, 3)
        );
        assert!(c.validate().is_ok());
        assert!(FilterConfig {
            sigma_max: -1.0,
            ..c
        }
        .validate()
        .is_err());
        assert!(FilterConfig {
            v_min: f64::NAN,
            ..c
        }
        .validate()
        .is_err());
    }

    #[test]
    fn clean_fixture_survives() {
        let (scene, cams, _) = fixture();
        let mask = run(&scene, &cams, &FilterConfig::default());
        assert_eq!(mask, FilterMask::all_kept(&scene));
    }

    #[test]
    fn visibility_boundary() {
        let (mut scene, cams, _) = fixture();
        scene.tracks[0].observations[1].visibility = 0.59;
        let mut config = FilterConfig {
            min_track_len: 2,
            ..Default::default()
        };
        let mask = run(&scene, &cams, &config);
        assert_eq!(mask.observations[0][1], Some(ObservationDrop::Visibility));
        assert!(mask.track_kept(0));
        scene.tracks[0].observations[1].visibility = 0.6;
        assert!(run(&scene, &cams, &config).is_kept(0, 1));
        config.min_track_len = 3;
        scene.tracks[0].observations[1].visibility = 0.59;
        assert_eq!(
            run(&scene, &cams, &config).tracks[0],
            Some(TrackDrop::TrackLength)
        );
    }

    #[test]
    fn sigma_boundary_on_either_axis() {
        let (mut scene, cams, _) = fixture();
        let config = FilterConfig {
            min_track_len: 2,
            ..Default::default()
        };
        scene.tracks[0].observations[2].sigma = Vector2::new(1.0, 1.0);
        assert!(run(&scene, &cams, &config).is_kept(0, 2));
        scene.tracks[0].observations[2].sigma = Vector2::new(0.5, 1.01);
        assert_eq!(
            run(&scene, &cams, &config).observations[0][2],
            Some(ObservationDrop::Sigma)
        );
        scene.tracks[0].observations[2].sigma = Vector2::new(1.01, 0.5);
        assert_eq!(
            run(&scene, &cams, &config).observations[0][2],
            Some(ObservationDrop::Sigma)
        );
    }

    /// Moves observation 1 along the epipolar-line normal so that its Sampson error is `target`.
    fn set_sampson(scene: &mut Scene, cams: &[Option<Camera>], target: f64) -> f64 {
        let (cq, cb) = (cams[0].as_ref().unwrap(), cams[1].as_ref().unwrap());
        let e = essential_from_cameras(cq, cb);
        let a = cq.normalize_pixel(&scene.tracks[0].observations[0].xy);
        let line = e * a;
        let normal = Vector2::new(line.x, line.y).normalize();
        let start = scene.tracks[0].observations[1].xy;
        // Sampson error is linear in the offset along the normal for an exact start point;
        // measure the slope and solve.
        let probe = |offset: f64| {
            let y = start + offset * normal;
            sampson_error(
                &e,
                &Correspondence::new(a.xy(), cb.normalize_pixel(&y).xy()),
            )
        };
        let slope = probe(1.0);
        let mut offset = target / slope;
        // One secant correction for the small nonlinearity of the denominator.
        offset *= target / probe(offset);
        scene.tracks[0].observations[1].xy = start + offset * normal;
        probe(offset)
    }

    #[test]
    fn sampson_boundary_is_strict() {
        let (scene0, cams, _) = fixture();
        let config = FilterConfig {
            min_track_len: 2,
            ..Default::default()
        };
        let threshold = 0.8 / 1000.0;
        let mut scene = scene0.clone();
        let at = set_sampson(&mut scene, &cams, threshold * 0.999);
        assert!(at < threshold);
        assert!(run(&scene, &cams, &config).is_kept(0, 1));
        let mut scene = scene0.clone();
        let above = set_sampson(&mut scene, &cams, threshold * 1.001);
        assert!(above > threshold);
        assert_eq!(
            run(&scene, &cams, &config).observations[0][1],
            Some(ObservationDrop::Sampson)
        );
    }

    #[test]
    fn sampson_is_tested_under_every_camera_set() {
        let (scene, cams, _) = fixture();
        let mut skewed = cams.clone();
        let c = skewed[2].unwrap();
        skewed[2] = Some(c.with_translation(c.translation() + Vector3::new(0.0, 0.3, 0.0)));
        let both = filter_observations(&scene, 0, &[&cams, &skewed], &FilterConfig::default());
        assert_eq!(both.observations[0][2], Some(ObservationDrop::Sampson));
        let first = filter_observations(&scene, 0, &[&cams], &FilterConfig::default());
        assert!(first.is_kept(0, 2));
    }

    #[test]
    fn unregistered_frames_are_dropped() {
        let (scene, mut cams, _) = fixture();
        cams[1] = None;
        let mask = run(
            &scene,
            &cams,
            &FilterConfig {
                min_track_len: 2,
                ..Default::default()
            },
        );
        assert_eq!(mask.observations[0][1], Some(ObservationDrop::Unregistered));
    }

    #[test]
    fn angle_threshold_is_strict() {
        let (scene, cams, x) = fixture();
        let widest =
            triangulation_angle(&x, cams[0].as_ref().unwrap(), cams[2].as_ref().unwrap()).unwrap();
        let config = |deg: f64| FilterConfig {
            min_tri_angle: deg,
            ..Default::default()
        };
        assert!(run(&scene, &cams, &config(widest - 1e-6)).track_kept(0));
        assert_eq!(
            run(&scene, &cams, &config(widest + 1e-6)).tracks[0],
            Some(TrackDrop::TriangulationAngle)
        );
        let points = [Some(x)];
        let all = FilterMask::all_kept(&scene);
        assert!(
            filter_triangulated(&scene, &cams, &points, &config(widest - 1e-6), &all).track_kept(0)
        );
        assert_eq!(
            filter_triangulated(&scene, &cams, &points, &config(widest + 1e-6), &all).tracks[0],
            Some(TrackDrop::TriangulationAngle)
        );
    }

    #[test]
    fn reprojection_boundary() {
        let (mut scene, cams, x) = fixture();
        let config = FilterConfig::default();
        let points = [Some(x)];
        let exact = scene.tracks[0].observations[1].xy;
        scene.tracks[0].observations[1].xy = exact + Vector2::new(3.0, 0.0);
        let mask = filter_reprojection(
            &scene,
            &cams,
            &points,
            &config,
            &FilterMask::all_kept(&scene),
        );
        assert!(mask.is_kept(0, 1));
        scene.tracks[0].observations[1].xy = exact + Vector2::new(0.0, 3.1);
        let mask = filter_reprojection(
            &scene,
            &cams,
            &points,
            &config,
            &FilterMask::all_kept(&scene),
        );
        assert_eq!(mask.observations[0][1], Some(ObservationDrop::Reprojection));
        // Two survivors are below the minimum track length.
        assert_eq!(mask.tracks[0], Some(TrackDrop::TrackLength));
    }

    #[test]
    fn missing_point_drops_the_track() {
        let (scene, cams, _) = fixture();
        let mask = filter_reprojection(
            &scene,
            &cams,
            &[None],
            &FilterConfig::default(),
            &FilterMask::all_kept(&scene),
        );
        assert_eq!(mask.tracks[0], Some(TrackDrop::Triangulation));
    }

    #[test]
    fn disabled_config_keeps_everything() {
        let (mut scene, cams, x) = fixture();
        scene.tracks[0].observations[1].visibility = 0.0;
        scene.tracks[0].observations[2].xy += Vector2::new(200.0, -150.0);
        scene.tracks[0].observations[2].sigma = Vector2::new(9.0, 9.0);
        let config = FilterConfig::disabled();
        let all = FilterMask::all_kept(&scene);
        assert_eq!(run(&scene, &cams, &config), all);
        assert_eq!(
            filter_reprojection(&scene, &cams, &[Some(x)], &config, &all),
            all
        );
    }

    #[test]
    fn mask_serializes() {
        let (mut scene, cams, _) = fixture();
        scene.tracks[0].observations[1].visibility = 0.1;
        let mask = run(&scene, &cams, &FilterConfig::default());
        let text = serde_json::to_string(&mask).unwrap();
        assert!(text.contains("\"visibility\""));
        assert!(text.contains("\"track_length\""));
        let back: FilterMask = serde_json::from_str(&text).unwrap();
        assert_eq!(back, mask);
        assert_eq!(
            mask.summary(),
            MaskSummary {
                observations_kept: 0,
                observations_dropped: 3,
                tracks_kept: 0,
                tracks_dropped: 1
            }
        );
    }
}
