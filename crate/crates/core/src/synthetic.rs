//! Seeded synthetic scenes with exact ground truth, used as the verification oracle.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::scene::{Frame, Scene, Track, TrackObservation};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_frames: usize,
    pub n_tracks: usize,
    /// Per-axis Gaussian observation noise, pixels.
    pub noise_px: f64,
    pub outlier_frac: f64,
    pub occlusion_frac: f64,
    pub seed: u64,
    pub image_size: (u32, u32),
    pub focal_px: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_frames: 10,
            n_tracks: 300,
            noise_px: 0.0,
            outlier_frac: 0.0,
            occlusion_frac: 0.0,
            seed: 0,
            image_size: (1024, 768),
            focal_px: 1228.8,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::Config("n_frames must be at least 2".into()));
        }
        if self.n_tracks < 8 {
            return Err(Error::Config("n_tracks must be at least 8".into()));
        }
        for (name, frac) in [
            ("outlier_frac", self.outlier_frac),
            ("occlusion_frac", self.occlusion_frac),
        ] {
            if !(0.0..1.0).contains(&frac) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1), got {frac}"
                )));
            }
        }
        if self.outlier_frac + self.occlusion_frac >= 1.0 {
            return Err(Error::Config(
                "outlier_frac + occlusion_frac must be below 1".into(),
            ));
        }
        if !(self.noise_px >= 0.0 && self.noise_px.is_finite()) {
            return Err(Error::Config(
                "noise_px must be finite and non-negative".into(),
            ));
        }
        if !(self.focal_px > 0.0 && self.focal_px.is_finite()) {
            return Err(Error::Config("focal_px must be positive".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth carried next to a generated scene. `ideal` and `outlier` are indexed like
/// `scene.tracks[j].observations[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub cameras: Vec<Camera>,
    pub points: Vec<Vector3<f64>>,
    pub ideal: Vec<Vec<Vector2<f64>>>,
    pub outlier: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn outlier_count(&self) -> usize {
        self.outlier.iter().flatten().filter(|f| **f).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub truth: GroundTruth,
}

const ORBIT_RADIUS: f64 = 2.0;
const ORBIT_ARC_DEG: f64 = 90.0;
const MAX_POINT_DRAWS: usize = 1000;

/// World-to-camera rotation looking from `center` toward `target`, camera y pointing down.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, roll: f64) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Rotation3::from_axis_angle(&Vector3::z_axis(), roll).matrix() * r
}

fn orbit_cameras(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Camera> {
    let (w, h) = config.image_size;
    let pp = Vector2::new(f64::from(w) / 2.0, f64::from(h) / 2.0);
    let n = config.n_frames;
    let arc = ORBIT_ARC_DEG.to_radians();
    let spacing = arc / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let azimuth = -arc / 2.0 + spacing * i as f64 + rng.random_range(-0.25..0.25) * spacing;
            let elevation = rng.random_range(-10.0f64..20.0).to_radians();
            let radius = ORBIT_RADIUS * rng.random_range(0.9..1.1);
            let center = radius
                * Vector3::new(
                    azimuth.sin() * elevation.cos(),
                    -elevation.sin(),
                    -azimuth.cos() * elevation.cos(),
                );
            let target = Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            );
            let roll = rng.random_range(-5.0f64..5.0).to_radians();
            let r = look_at(&center, &target, roll);
            Camera::from_rotation(&r, -(r * center), config.focal_px, pp)
        })
        .collect()
}

fn in_image(y: &Vector2<f64>, size: (u32, u32)) -> bool {
    y.x >= 0.0 && y.y >= 0.0 && y.x < f64::from(size.0) && y.y < f64::from(size.1)
}

/// Generates a scene: cameras on a randomized orbit around points drawn in the unit box.
///
/// Ideal observations satisfy `project` exactly. Corruption then adds per-axis Gaussian noise,
/// replaces exactly `round(outlier_frac * N)` observations with uniform in-image points (keeping
/// `v = 1`), and marks `round(occlusion_frac * N)` of the remaining observations with `v = 0`.
/// Each track's anchor observation (frame 0 when seen there) gives its query point and is never
/// corrupted.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cameras = orbit_cameras(config, &mut rng);
    let size = config.image_size;

    let mut points = Vec::with_capacity(config.n_tracks);
    let mut ideal = Vec::with_capacity(config.n_tracks);
    let mut frames_of = Vec::with_capacity(config.n_tracks);
    for _ in 0..config.n_tracks {
        let mut accepted = None;
        for _ in 0..MAX_POINT_DRAWS {
            let x = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let mut seen = Vec::new();
            for (i, cam) in cameras.iter().enumerate() {
                if let Ok(p) = cam.project(&x) {
                    if p.depth > 0.0 && in_image(&p.pixel, size) {
                        seen.push((i, p.pixel));
                    }
                }
            }
            if seen.len() >= 2 {
                accepted = Some((x, seen));
                break;
            }
        }
        let (x, seen) = accepted.ok_or_else(|| {
            Error::Generation("could not place a point seen by two cameras".into())
        })?;
        points.push(x);
        frames_of.push(seen.iter().map(|(i, _)| *i).collect::<Vec<_>>());
        ideal.push(seen.into_iter().map(|(_, y)| y).collect::<Vec<_>>());
    }

    // The anchor (query) observation of each track is what a tracker is seeded with, so it is
    // never corrupted. Flat index over the other observations -> (track, observation).
    let anchor: Vec<usize> = frames_of
        .iter()
        .map(|frames| frames.iter().position(|&f| f == 0).unwrap_or(0))
        .collect();
    let total: usize = ideal.iter().map(Vec::len).sum();
    let flat: Vec<(usize, usize)> = ideal
        .iter()
        .enumerate()
        .flat_map(|(j, obs)| (0..obs.len()).map(move |k| (j, k)))
        .filter(|&(j, k)| k != anchor[j])
        .collect();
    let n_outliers = (config.outlier_frac * total as f64).round() as usize;
    let n_occluded = (config.occlusion_frac * total as f64).round() as usize;
    if n_outliers > flat.len() {
        return Err(Error::Generation(format!(
            "{n_outliers} outliers requested but only {} non-anchor observations exist",
            flat.len()
        )));
    }

    let mut outlier: Vec<Vec<bool>> = ideal.iter().map(|o| vec![false; o.len()]).collect();
    let mut occluded: Vec<Vec<bool>> = outlier.clone();
    for idx in index::sample(&mut rng, flat.len(), n_outliers).into_vec() {
        let (j, k) = flat[idx];
        outlier[j][k] = true;
    }
    let clean: Vec<(usize, usize)> = flat
        .iter()
        .copied()
        .filter(|&(j, k)| !outlier[j][k])
        .collect();
    let n_occluded = n_occluded.min(clean.len());
    for idx in index::sample(&mut rng, clean.len(), n_occluded).into_vec() {
        let (j, k) = clean[idx];
        occluded[j][k] = true;
    }

    let sigma = config.noise_px.max(0.25);
    let mut tracks = Vec::with_capacity(config.n_tracks);
    for j in 0..config.n_tracks {
        let mut observations = Vec::with_capacity(ideal[j].len());
        for (k, &frame) in frames_of[j].iter().enumerate() {
            let xy = if outlier[j][k] {
                Vector2::new(
                    rng.random_range(0.0..f64::from(size.0)),
                    rng.random_range(0.0..f64::from(size.1)),
                )
            } else {
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                ideal[j][k] + config.noise_px * Vector2::new(nx, ny)
            };
            observations.push(TrackObservation {
                frame,
                xy,
                visibility: if occluded[j][k] { 0.0 } else { 1.0 },
                sigma: Vector2::new(sigma, sigma),
            });
        }
        let query_point = observations[anchor[j]].xy;
        tracks.push(Track {
            observations,
            query_point,
        });
    }

    let frames = (0..config.n_frames)
        .map(|id| Frame {
            id,
            width: size.0,
            height: size.1,
        })
        .collect();
    let scene = Scene::new(frames, tracks)?;
    let visible = scene.visible_counts(1.0);
    if let Some((frame, count)) = visible.iter().enumerate().find(|(_, c)| **c < 8) {
        return Err(Error::Generation(format!(
            "frame {frame} has only {count} visible tracks (8 required)"
        )));
    }
    Ok(SyntheticScene {
        scene,
        truth: GroundTruth {
            cameras,
            points,
            ideal,
            outlier,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_observations_are_exact_projections() {
        let synth = generate_synthetic(&SyntheticConfig::default()).unwrap();
        for (j, track) in synth.scene.tracks.iter().enumerate() {
            for obs in &track.observations {
                let p = synth.truth.cameras[obs.frame]
                    .project(&synth.truth.points[j])
                    .unwrap();
                assert!((p.pixel - obs.xy).norm() < 1e-9);
                assert!(p.depth > 0.0);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = SyntheticConfig {
            noise_px: 1.0,
            outlier_frac: 0.2,
            occlusion_frac: 0.1,
            seed: 42,
            ..Default::default()
        };
        let a = generate_synthetic(&config).unwrap();
        let b = generate_synthetic(&config).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 43, ..config }).unwrap();
        assert_ne!(a.scene, c.scene);
    }

    #[test]
    fn corruption_counts_are_exact() {
        let config = SyntheticConfig {
            noise_px: 0.5,
            outlier_frac: 0.2,
            occlusion_frac: 0.15,
            seed: 3,
            ..Default::default()
        };
        let synth = generate_synthetic(&config).unwrap();
        let n = synth.scene.observation_count();
        assert_eq!(
            synth.truth.outlier_count(),
            (0.2 * n as f64).round() as usize
        );
        let occluded = synth
            .scene
            .tracks
            .iter()
            .flat_map(|t| &t.observations)
            .filter(|o| o.visibility == 0.0)
            .count();
        assert_eq!(occluded, (0.15 * n as f64).round() as usize);
        for (j, track) in synth.scene.tracks.iter().enumerate() {
            let (k0, anchor) = track
                .observation_in(0)
                .unwrap_or((0, &track.observations[0]));
            assert_eq!(anchor.xy, track.query_point);
            assert!(!synth.truth.outlier[j][k0]);
            assert_eq!(anchor.visibility, 1.0);
            for (k, obs) in track.observations.iter().enumerate() {
                assert_eq!(obs.sigma, Vector2::new(0.5, 0.5));
                if synth.truth.outlier[j][k] {
                    assert_eq!(obs.visibility, 1.0);
                }
            }
        }
    }

    #[test]
    fn noise_has_requested_std() {
        let config = SyntheticConfig {
            n_tracks: 1000,
            noise_px: 1.0,
            seed: 11,
            ..Default::default()
        };
        let synth = generate_synthetic(&config).unwrap();
        let mut residuals = Vec::new();
        for (j, track) in synth.scene.tracks.iter().enumerate() {
            for (k, obs) in track.observations.iter().enumerate() {
                let d = obs.xy - synth.truth.ideal[j][k];
                residuals.push(d.x);
                residuals.push(d.y);
            }
        }
        assert!(residuals.len() >= 10_000);
        let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
        let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
            / (residuals.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.95..=1.05).contains(&std), "std {std}");
    }

    #[test]
    fn too_few_visible_tracks_fails() {
        let config = SyntheticConfig {
            n_tracks: 9,
            occlusion_frac: 0.5,
            seed: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&config),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = SyntheticConfig {
            n_frames: 1,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticConfig {
            outlier_frac: 1.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }
}
