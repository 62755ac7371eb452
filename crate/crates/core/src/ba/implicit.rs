use nalgebra::{SMatrix, SVector, Vector2, Vector3};
use rayon::prelude::*;

use super::solver::SchurSystem;
use super::{apply_camera_step, camera_lift, BaProblem, Linearized, Observation, CAMERA_DOF};
use crate::camera::PARAM_COUNT;
use crate::error::{Error, Result};

/// Largest gradient infinity norm at which a problem counts as converged for differentiation.
pub const CONVERGED_GRADIENT: f64 = 1e-8;

const CURVATURE_STEP: f64 = 1e-6;
const OBS_DOF: usize = CAMERA_DOF + 3;

/// Gradient of a downstream loss with respect to the solution, in the `[q, t, ln f]` layout of
/// [`crate::Camera::params`] for cameras and world coordinates for points.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionGradient {
    pub cameras: Vec<[f64; PARAM_COUNT]>,
    pub points: Vec<Vector3<f64>>,
}

impl SolutionGradient {
    pub fn zeros(problem: &BaProblem) -> Self {
        Self {
            cameras: vec![[0.0; PARAM_COUNT]; problem.cameras.len()],
            points: vec![Vector3::zeros(); problem.points.len()],
        }
    }
}

/// Back-propagates `downstream` through the optimum of `problem` to every observation.
///
/// At the optimum `J^T W r = 0`; differentiating with respect to `y_k` gives
/// `d theta / d y_k = H^-1 J_k^T w_k` with `H = J^T W J + sum w r . d2r + lambda I` over the
/// free parameters. The residual curvature term is kept: dropping it biases the gradient in
/// proportion to the residuals left at the optimum.
/// One adjoint solve `H z = L^T g` (with `L` the local-to-layout lift) then yields
/// `dL / d y_k = w_k J_k z` for all observations at once. Frozen parameters carry no gradient.
pub fn lm_gradient_wrt_observations(
    problem: &BaProblem,
    downstream: &SolutionGradient,
    lambda: f64,
) -> Result<Vec<Vector2<f64>>> {
    if downstream.cameras.len() != problem.cameras.len()
        || downstream.points.len() != problem.points.len()
    {
        return Err(Error::Contract(
            "downstream gradient does not match the problem".into(),
        ));
    }
    let mut system = SchurSystem::build(problem);
    let norm = system.gradient_inf_norm();
    if !(norm < CONVERGED_GRADIENT) {
        return Err(Error::Contract(format!(
            "problem is not at an optimum (gradient norm {norm:e})"
        )));
    }
    let curvature: Vec<_> = (0..problem.observations.len())
        .into_par_iter()
        .map(|n| residual_curvature(problem, n))
        .collect::<Result<_>>()?;
    for (n, c) in curvature.into_iter().enumerate() {
        if let Some(c) = c {
            system.add_observation_curvature(n, &c);
        }
    }
    let rhs_cam: Vec<[f64; CAMERA_DOF]> = problem
        .cameras
        .iter()
        .zip(&downstream.cameras)
        .zip(&problem.frozen)
        .map(|((cam, g), frozen)| {
            let local = camera_lift(cam).transpose() * SVector::<f64, PARAM_COUNT>::from(*g);
            std::array::from_fn(|k| if frozen[k] { 0.0 } else { local[k] })
        })
        .collect();
    let z = system.solve(lambda, &rhs_cam, &downstream.points)?;
    Ok((0..problem.observations.len())
        .map(|n| {
            let o = &problem.observations[n];
            match problem.linearize(n) {
                Some(lin) => {
                    let zc = SVector::<f64, CAMERA_DOF>::from(z.cameras[o.camera]);
                    o.weight.sqrt() * (lin.camera * zc + lin.point * z.points[o.point])
                }
                None => Vector2::zeros(),
            }
        })
        .collect())
}

fn observation_jacobian(lin: &Linearized) -> SMatrix<f64, 2, OBS_DOF> {
    let mut j = SMatrix::<f64, 2, OBS_DOF>::zeros();
    j.fixed_view_mut::<2, CAMERA_DOF>(0, 0)
        .copy_from(&lin.camera);
    j.fixed_view_mut::<2, 3>(0, CAMERA_DOF)
        .copy_from(&lin.point);
    j
}

/// `sum_a r_a d2 r_a` over the local parameters of one observation's camera and point, by
/// central differences of the analytic Jacobian. At an optimum the result does not depend on
/// the rotation chart used for the perturbation.
fn residual_curvature(
    problem: &BaProblem,
    n: usize,
) -> Result<Option<SMatrix<f64, OBS_DOF, OBS_DOF>>> {
    let Some(lin) = problem.linearize(n) else {
        return Ok(None);
    };
    let o = problem.observations[n];
    let frozen = problem.frozen[o.camera];
    let jacobian_at = |k: usize, h: f64| -> Result<Option<SMatrix<f64, 2, OBS_DOF>>> {
        let mut cam = problem.cameras[o.camera];
        let mut x = problem.points[o.point];
        if k < CAMERA_DOF {
            let mut delta = [0.0; CAMERA_DOF];
            delta[k] = h;
            cam = apply_camera_step(&cam, &delta, &frozen)?;
        } else {
            x[k - CAMERA_DOF] += h;
        }
        let mut single = BaProblem::new(
            vec![cam],
            vec![x],
            vec![Observation {
                camera: 0,
                point: 0,
                ..o
            }],
        );
        single.frozen[0] = frozen;
        Ok(single.linearize(0).as_ref().map(observation_jacobian))
    };
    let mut s = SMatrix::<f64, OBS_DOF, OBS_DOF>::zeros();
    for k in 0..OBS_DOF {
        if k < CAMERA_DOF && frozen[k] {
            continue;
        }
        let (Some(plus), Some(minus)) = (
            jacobian_at(k, CURVATURE_STEP)?,
            jacobian_at(k, -CURVATURE_STEP)?,
        ) else {
            return Err(Error::Solver(format!(
                "observation {n} leaves the image near the optimum"
            )));
        };
        let d = (plus - minus) / (2.0 * CURVATURE_STEP);
        s.set_column(k, &(d.transpose() * lin.residual));
    }
    Ok(Some((s + s.transpose()) * 0.5))
}
