//! Bundle adjustment: Levenberg-Marquardt over cameras and points with a Schur complement on
//! the points, and the implicit-function gradient of the optimum with respect to observations.
//!
//! Inside the solver each camera has seven local parameters: a rotation increment `d` applied
//! on the right (`q <- q * exp(d)`), the translation and `ln f`. Frozen parameters never move.

mod implicit;
mod solver;

pub use implicit::{lm_gradient_wrt_observations, SolutionGradient};
pub use solver::{
    apply_step, lm_solve, newton_polish, write_steps_csv, LmOptions, LmState, LmStep, SchurSystem,
    Step, StopReason,
};

use nalgebra::{SMatrix, Vector2, Vector3};

use crate::camera::{quaternion_exp, quaternion_mul, Camera};
use crate::error::{Error, Result};

/// Local parameters per camera: rotation increment (3), translation (3), log focal (1).
pub const CAMERA_DOF: usize = 7;

pub type CameraBlock = SMatrix<f64, 2, CAMERA_DOF>;
pub type PointBlock = SMatrix<f64, 2, 3>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub point: usize,
    pub xy: Vector2<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub cameras: Vec<Camera>,
    pub points: Vec<Vector3<f64>>,
    pub observations: Vec<Observation>,
    /// Per camera, which of the seven local parameters are held fixed.
    pub frozen: Vec<[bool; CAMERA_DOF]>,
}

/// Lift from the local rotation increment to the quaternion: `d q / d d` at `d = 0`.
pub fn rotation_lift(q: [f64; 4]) -> SMatrix<f64, 4, 3> {
    let [w, x, y, z] = q;
    // q * (0, d) / 2, written as a matrix acting on d.
    0.5 * SMatrix::<f64, 4, 3>::new(-x, -y, -z, w, -z, y, z, w, -x, -y, x, w)
}

/// `d q_new / d local` and identity blocks: maps local camera parameters to the
/// `[q, t, ln f]` layout of [`Camera::params`].
pub fn camera_lift(camera: &Camera) -> SMatrix<f64, 8, CAMERA_DOF> {
    let mut lift = SMatrix::<f64, 8, CAMERA_DOF>::zeros();
    lift.fixed_view_mut::<4, 3>(0, 0)
        .copy_from(&rotation_lift(camera.quaternion()));
    for k in 0..4 {
        lift[(4 + k, 3 + k)] = 1.0;
    }
    lift
}

/// Applies a local increment to a camera, leaving every frozen parameter bit-identical.
pub fn apply_camera_step(
    camera: &Camera,
    delta: &[f64; CAMERA_DOF],
    frozen: &[bool; CAMERA_DOF],
) -> Result<Camera> {
    let d = |k: usize| if frozen[k] { 0.0 } else { delta[k] };
    let mut out = *camera;
    if (0..3).any(|k| !frozen[k]) {
        let rot = Vector3::new(d(0), d(1), d(2));
        out = out.with_quaternion(quaternion_mul(camera.quaternion(), quaternion_exp(&rot)))?;
    }
    let mut t = camera.translation();
    for k in 0..3 {
        if !frozen[3 + k] {
            t[k] += delta[3 + k];
        }
    }
    out = out.with_translation(t);
    if !frozen[6] {
        out = out.with_log_focal(camera.log_focal() + delta[6]);
    }
    Ok(out)
}

/// Residual and Jacobian blocks of one observation, scaled by `sqrt(weight)`.
#[derive(Debug, Clone, Copy)]
pub struct Linearized {
    pub residual: Vector2<f64>,
    pub camera: CameraBlock,
    pub point: PointBlock,
}

impl BaProblem {
    /// Problem with nothing frozen. Use [`BaProblem::fix_gauge`] before solving.
    pub fn new(
        cameras: Vec<Camera>,
        points: Vec<Vector3<f64>>,
        observations: Vec<Observation>,
    ) -> Self {
        let frozen = vec![[false; CAMERA_DOF]; cameras.len()];
        Self {
            cameras,
            points,
            observations,
            frozen,
        }
    }

    /// Freezes the pose of `anchor` and the largest-magnitude translation coordinate of the
    /// camera farthest from it, which removes rotation, translation and scale freedom.
    pub fn fix_gauge(&mut self, anchor: usize) -> Result<()> {
        if anchor >= self.cameras.len() {
            return Err(Error::Referential(format!(
                "gauge camera {anchor} out of range"
            )));
        }
        for k in 0..6 {
            self.frozen[anchor][k] = true;
        }
        let c0 = self.cameras[anchor].center();
        let second = (0..self.cameras.len())
            .filter(|&i| i != anchor)
            .map(|i| (i, (self.cameras[i].center() - c0).norm()))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = second {
            let t = self.cameras[i].translation();
            let k = (0..3).fold(
                0,
                |best, k| if t[k].abs() > t[best].abs() { k } else { best },
            );
            self.frozen[i][3 + k] = true;
        }
        Ok(())
    }

    /// Checks indices, uniqueness of (camera, point) pairs, weights and track lengths.
    pub fn validate(&self, min_observations: usize) -> Result<()> {
        if self.frozen.len() != self.cameras.len() {
            return Err(Error::Contract(
                "one frozen mask per camera is required".into(),
            ));
        }
        let mut per_point = vec![0usize; self.points.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(self.observations.len());
        for (n, o) in self.observations.iter().enumerate() {
            if o.camera >= self.cameras.len() || o.point >= self.points.len() {
                return Err(Error::Referential(format!(
                    "observation {n} references a missing camera or point"
                )));
            }
            if !(o.weight >= 0.0 && o.weight.is_finite()) {
                return Err(Error::Contract(format!(
                    "observation {n} has weight {}",
                    o.weight
                )));
            }
            per_point[o.point] += 1;
            pairs.push((o.camera, o.point));
        }
        pairs.sort_unstable();
        if pairs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract(
                "duplicate (camera, point) observation".into(),
            ));
        }
        if let Some(j) = per_point.iter().position(|&c| c < min_observations) {
            return Err(Error::Contract(format!(
                "point {j} has {} observations, {min_observations} required",
                per_point[j]
            )));
        }
        Ok(())
    }

    /// Number of free parameters.
    pub fn free_parameter_count(&self) -> usize {
        self.frozen.iter().flatten().filter(|f| !**f).count() + 3 * self.points.len()
    }

    /// Residual `sqrt(w) (project - y)` and its Jacobian blocks; `None` when the point does
    /// not project.
    pub fn linearize(&self, index: usize) -> Option<Linearized> {
        let o = &self.observations[index];
        let cam = &self.cameras[o.camera];
        let x = &self.points[o.point];
        let p = cam.project(x).ok()?;
        let j = cam.project_jacobian(x).ok()?;
        let s = o.weight.sqrt();
        let residual = s * (p.pixel - o.xy);
        if !residual.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut camera = CameraBlock::zeros();
        camera
            .fixed_view_mut::<2, 3>(0, 0)
            .copy_from(&(j.fixed_view::<2, 4>(0, 0) * rotation_lift(cam.quaternion())));
        camera
            .fixed_view_mut::<2, 4>(0, 3)
            .copy_from(&j.fixed_view::<2, 4>(0, 4));
        for (k, frozen) in self.frozen[o.camera].iter().enumerate() {
            if *frozen {
                camera.set_column(k, &Vector2::zeros());
            }
        }
        Some(Linearized {
            residual,
            camera: s * camera,
            point: s * j.fixed_view::<2, 3>(0, 8).into_owned(),
        })
    }

    /// Indices of observations whose point does not project finitely.
    pub fn non_finite_observations(&self) -> Vec<usize> {
        (0..self.observations.len())
            .filter(|&n| {
                let o = &self.observations[n];
                !matches!(self.cameras[o.camera].project(&self.points[o.point]),
                    Ok(p) if p.pixel.iter().all(|v| v.is_finite()))
            })
            .collect()
    }

    /// Pixel error vector of one observation (unweighted), `None` when it does not project.
    pub fn reprojection(&self, index: usize) -> Option<Vector2<f64>> {
        let o = &self.observations[index];
        let p = self.cameras[o.camera].project(&self.points[o.point]).ok()?;
        let r = p.pixel - o.xy;
        r.iter().all(|v| v.is_finite()).then_some(r)
    }
}

/// `sum w |project - y|^2` over observations that project finitely.
pub fn ba_cost(problem: &BaProblem) -> f64 {
    (0..problem.observations.len())
        .filter_map(|n| {
            problem
                .reprojection(n)
                .map(|r| problem.observations[n].weight * r.norm_squared())
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReprojectionStats {
    /// Mean of the unsquared pixel error.
    pub mean: f64,
    /// Per-axis RMS: `sqrt(sum |r|^2 / (2 N))`.
    pub rms: f64,
    pub max: f64,
    pub count: usize,
}

/// Unweighted reprojection statistics over observations with nonzero weight.
pub fn reprojection_stats(problem: &BaProblem) -> ReprojectionStats {
    let mut stats = ReprojectionStats::default();
    let mut sq = 0.0;
    for n in 0..problem.observations.len() {
        if problem.observations[n].weight == 0.0 {
            continue;
        }
        let Some(r) = problem.reprojection(n) else {
            continue;
        };
        let e = r.norm();
        stats.mean += e;
        sq += e * e;
        stats.max = stats.max.max(e);
        stats.count += 1;
    }
    if stats.count > 0 {
        stats.mean /= stats.count as f64;
        stats.rms = (sq / (2.0 * stats.count as f64)).sqrt();
    }
    stats
}
