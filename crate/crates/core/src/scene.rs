//! Frames, tracks and the scene container the pipeline transforms.

use nalgebra::{Vector2, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame {
    pub id: usize,
    pub width: u32,
    pub height: u32,
}

/// One 2D observation of a track. `sigma` is the per-axis standard deviation in pixels; its
/// inverse is the observation's confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObservation {
    pub frame: usize,
    pub xy: Vector2<f64>,
    pub visibility: f64,
    pub sigma: Vector2<f64>,
}

impl TrackObservation {
    pub fn new(frame: usize, xy: Vector2<f64>) -> Self {
        Self {
            frame,
            xy,
            visibility: 1.0,
            sigma: Vector2::new(DEFAULT_SIGMA, DEFAULT_SIGMA),
        }
    }
}

pub const DEFAULT_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub observations: Vec<TrackObservation>,
    pub query_point: Vector2<f64>,
}

impl Track {
    /// Builds a track, checking that frames are strictly increasing and the list is non-empty.
    pub fn new(observations: Vec<TrackObservation>, query_point: Vector2<f64>) -> Result<Self> {
        let track = Self {
            observations,
            query_point,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Err(Error::Referential("track has no observations".into()));
        }
        for pair in self.observations.windows(2) {
            if pair[1].frame <= pair[0].frame {
                return Err(Error::Referential(format!(
                    "track frames not strictly increasing ({} then {})",
                    pair[0].frame, pair[1].frame
                )));
            }
        }
        for obs in &self.observations {
            if !(obs.sigma.x > 0.0 && obs.sigma.y > 0.0) {
                return Err(Error::Referential(format!(
                    "non-positive sigma in frame {}",
                    obs.frame
                )));
            }
        }
        Ok(())
    }

    pub fn observation_in(&self, frame: usize) -> Option<(usize, &TrackObservation)> {
        self.observations
            .binary_search_by_key(&frame, |o| o.frame)
            .ok()
            .map(|i| (i, &self.observations[i]))
    }
}

/// Frame inventory, tracks and (optionally) a reconstruction.
///
/// Cameras are indexed by frame and points by track; `None` marks an unregistered frame or a
/// discarded track.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub frames: Vec<Frame>,
    pub tracks: Vec<Track>,
    pub cameras: Option<Vec<Option<Camera>>>,
    pub points: Option<Vec<Option<Vector3<f64>>>>,
}

impl Scene {
    pub fn new(frames: Vec<Frame>, tracks: Vec<Track>) -> Result<Self> {
        let scene = Self {
            frames,
            tracks,
            cameras: None,
            points: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Checks every structural invariant: frame ids are `0..n` in order, observations reference
    /// known frames, and optional cameras/points line up with frames/tracks.
    pub fn validate(&self) -> Result<()> {
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.id != i {
                return Err(Error::Referential(format!(
                    "frame at position {i} has id {}",
                    frame.id
                )));
            }
            if frame.width == 0 || frame.height == 0 {
                return Err(Error::Referential(format!(
                    "frame {i} has an empty image size"
                )));
            }
        }
        for (j, track) in self.tracks.iter().enumerate() {
            track
                .validate()
                .map_err(|e| Error::Referential(format!("track {j}: {e}")))?;
            if let Some(bad) = track
                .observations
                .iter()
                .find(|o| o.frame >= self.frames.len())
            {
                return Err(Error::Referential(format!(
                    "track {j} references frame {} but the scene has {} frames",
                    bad.frame,
                    self.frames.len()
                )));
            }
        }
        if let Some(cameras) = &self.cameras {
            if cameras.len() != self.frames.len() {
                return Err(Error::Referential(format!(
                    "{} cameras for {} frames",
                    cameras.len(),
                    self.frames.len()
                )));
            }
        }
        if let Some(points) = &self.points {
            if points.len() != self.tracks.len() {
                return Err(Error::Referential(format!(
                    "{} points for {} tracks",
                    points.len(),
                    self.tracks.len()
                )));
            }
        }
        Ok(())
    }

    /// Number of observations per frame with visibility at least `min_visibility`.
    pub fn visible_counts(&self, min_visibility: f64) -> Vec<usize> {
        let mut counts = vec![0; self.frames.len()];
        for track in &self.tracks {
            for obs in &track.observations {
                if obs.visibility >= min_visibility {
                    counts[obs.frame] += 1;
                }
            }
        }
        counts
    }

    pub fn observation_count(&self) -> usize {
        self.tracks.iter().map(|t| t.observations.len()).sum()
    }
}
