//! Finite-difference checks of the analytic derivatives, as run by `sfm gradcheck`.

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ba::{
    lm_gradient_wrt_observations, lm_solve, newton_polish, BaProblem, LmOptions, Observation,
    SolutionGradient,
};
use crate::camera::{Camera, PARAM_COUNT};
use crate::error::Result;
use crate::synthetic::{generate_synthetic, SyntheticConfig};

pub const JACOBIAN_TOLERANCE: f64 = 1e-5;
pub const IMPLICIT_TOLERANCE: f64 = 1e-3;

const JACOBIAN_STEP: f64 = 1e-6;
const OBSERVATION_STEP: f64 = 1e-4;
const POLISH_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianCheck {
    pub samples: usize,
    pub max_relative_error: f64,
}

impl JacobianCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < JACOBIAN_TOLERANCE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitCheck {
    pub cameras: usize,
    pub points: usize,
    pub observations: usize,
    /// Gradient infinity norm of the solution the check differentiates through.
    pub solution_gradient_norm: f64,
    pub max_relative_error: f64,
}

impl ImplicitCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < IMPLICIT_TOLERANCE
    }
}

fn random_camera(rng: &mut ChaCha8Rng) -> Result<Camera> {
    // w stays away from zero so that a perturbed quaternion keeps its sign.
    let q = [
        rng.random_range(0.3..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let t = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(3.0..6.0),
    );
    let log_f = rng.random_range(300.0f64..2000.0).ln();
    let pp = Vector2::new(
        rng.random_range(200.0..600.0),
        rng.random_range(150.0..450.0),
    );
    Camera::new(q, t, log_f, pp)
}

fn project_params(params: &[f64; PARAM_COUNT + 3], pp: &Vector2<f64>) -> Result<Vector2<f64>> {
    let camera = Camera::new(
        [params[0], params[1], params[2], params[3]],
        Vector3::new(params[4], params[5], params[6]),
        params[7],
        *pp,
    )?;
    Ok(camera
        .project(&Vector3::new(params[8], params[9], params[10]))?
        .pixel)
}

/// Analytic projection Jacobian against central differences over `samples` random
/// camera/point pairs. The error of a sample is the largest entry difference over the largest
/// finite-difference entry.
pub fn check_projection_jacobian(samples: usize, seed: u64) -> Result<JacobianCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let camera = random_camera(&mut rng)?;
        let rotation = camera.rotation();
        // A point in front of the camera, given in camera coordinates.
        let local = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(2.0..6.0),
        );
        let x = rotation.transpose() * (local - camera.translation());
        let analytic = camera.project_jacobian(&x)?;
        let mut params = [0.0; PARAM_COUNT + 3];
        params[..PARAM_COUNT].copy_from_slice(&camera.params());
        params[PARAM_COUNT..].copy_from_slice(x.as_slice());
        let pp = camera.principal_point();
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..PARAM_COUNT + 3 {
            let mut plus = params;
            plus[k] += JACOBIAN_STEP;
            let mut minus = params;
            minus[k] -= JACOBIAN_STEP;
            let fd = (project_params(&plus, &pp)? - project_params(&minus, &pp)?)
                / (2.0 * JACOBIAN_STEP);
            for row in 0..2 {
                diff = diff.max((analytic[(row, k)] - fd[row]).abs());
                scale = scale.max(fd[row].abs());
            }
        }
        worst = worst.max(diff / scale);
    }
    Ok(JacobianCheck {
        samples,
        max_relative_error: worst,
    })
}

fn tight_options() -> LmOptions {
    LmOptions {
        max_steps: 200,
        relative_tolerance: 0.0,
        gradient_tolerance: 1e-11,
        ..Default::default()
    }
}

fn solve(problem: &BaProblem) -> Result<BaProblem> {
    newton_polish(&lm_solve(problem, &tight_options())?.0, POLISH_STEPS)
}

fn linear_loss(problem: &BaProblem, g: &SolutionGradient) -> f64 {
    let cameras: f64 = problem
        .cameras
        .iter()
        .zip(&g.cameras)
        .map(|(c, gc)| c.params().iter().zip(gc).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let points: f64 = problem
        .points
        .iter()
        .zip(&g.points)
        .map(|(x, gx)| x.dot(gx))
        .sum();
    cameras + points
}

/// A converged 3-camera/10-point problem: ground truth with 0.1 px noise, cameras perturbed
/// by 0.5 degrees and 1 % of their translation, solved and polished.
pub fn small_solved_problem(seed: u64) -> Result<BaProblem> {
    let synth = generate_synthetic(&SyntheticConfig {
        n_frames: 3,
        n_tracks: 10,
        noise_px: 0.1,
        seed,
        ..Default::default()
    })?;
    let observations = synth
        .scene
        .tracks
        .iter()
        .enumerate()
        .flat_map(|(j, t)| {
            t.observations.iter().map(move |o| Observation {
                camera: o.frame,
                point: j,
                xy: o.xy,
                weight: 1.0,
            })
        })
        .collect();
    let mut problem = BaProblem::new(
        synth.truth.cameras.clone(),
        synth.truth.points.clone(),
        observations,
    );
    problem.fix_gauge(0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 1..problem.cameras.len() {
        let cam = problem.cameras[i];
        let axis = Vector3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let r =
            Rotation3::new(axis.normalize() * 0.5f64.to_radians()).into_inner() * cam.rotation();
        let mut t = cam.translation();
        for k in 0..3 {
            if !problem.frozen[i][3 + k] {
                t[k] *= if rng.random::<bool>() { 1.01 } else { 0.99 };
            }
        }
        problem.cameras[i] = Camera::from_rotation(&r, t, cam.focal(), cam.principal_point());
    }
    solve(&problem)
}

/// Implicit-function gradient of a random linear loss of the solution against central
/// differences of re-solved problems, one observation coordinate at a time.
pub fn check_implicit_gradient(seed: u64) -> Result<ImplicitCheck> {
    let problem = small_solved_problem(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let downstream = SolutionGradient {
        cameras: problem
            .cameras
            .iter()
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect(),
        points: problem
            .points
            .iter()
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect(),
    };
    let analytic = lm_gradient_wrt_observations(&problem, &downstream, 1e-10)?;
    let coordinates: Vec<(usize, usize)> = (0..problem.observations.len())
        .flat_map(|n| [(n, 0), (n, 1)])
        .collect();
    let fd: Vec<f64> = coordinates
        .par_iter()
        .map(|&(n, axis)| {
            let mut plus = problem.clone();
            plus.observations[n].xy[axis] += OBSERVATION_STEP;
            let mut minus = problem.clone();
            minus.observations[n].xy[axis] -= OBSERVATION_STEP;
            Ok((linear_loss(&solve(&plus)?, &downstream)
                - linear_loss(&solve(&minus)?, &downstream))
                / (2.0 * OBSERVATION_STEP))
        })
        .collect::<Result<_>>()?;
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (&(n, axis), d) in coordinates.iter().zip(&fd) {
        diff = diff.max((d - analytic[n][axis]).abs());
        scale = scale.max(d.abs());
    }
    Ok(ImplicitCheck {
        cameras: problem.cameras.len(),
        points: problem.points.len(),
        observations: problem.observations.len(),
        solution_gradient_norm: crate::ba::SchurSystem::build(&problem).gradient_inf_norm(),
        max_relative_error: diff / scale,
    })
}
