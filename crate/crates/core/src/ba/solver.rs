use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_camera_step, ba_cost, BaProblem, Linearized, CAMERA_DOF};
use crate::error::{Error, Result};

const POLISH_LAMBDA: f64 = 1e-12;

type CamVec = SVector<f64, CAMERA_DOF>;
type CamMat = SMatrix<f64, CAMERA_DOF, CAMERA_DOF>;
type CrossBlock = SMatrix<f64, CAMERA_DOF, 3>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    pub max_steps: usize,
    /// Stop after two consecutive accepted steps with relative cost decrease below this.
    pub relative_tolerance: f64,
    /// Stop when the gradient infinity norm falls below this.
    pub gradient_tolerance: f64,
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_steps: 30,
            relative_tolerance: 1e-10,
            gradient_tolerance: 1e-12,
            lambda_init: 1e-3,
            lambda_min: 1e-10,
            lambda_max: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientNorm,
    RelativeDecrease,
    /// No step decreased the cost even at maximum damping.
    DampingLimit,
    MaxSteps,
}

/// One step trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmStep {
    pub step: usize,
    pub lambda: f64,
    /// Cost after the trial (the rejected candidate's cost for rejected trials).
    pub cost: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    pub lambda: f64,
    pub initial_cost: f64,
    pub cost: f64,
    /// Outer iterations performed.
    pub step: usize,
    pub converged: bool,
    pub reason: StopReason,
    pub history: Vec<LmStep>,
    /// Gradient infinity norm at the returned solution.
    pub gradient_norm: f64,
}

/// Local-parameter increment for every camera and point.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub cameras: Vec<[f64; CAMERA_DOF]>,
    pub points: Vec<Vector3<f64>>,
}

/// Normal equations of a linearized problem in block form, ready for Schur-complement solves.
pub struct SchurSystem {
    linearized: Vec<Option<Linearized>>,
    cameras_of: Vec<usize>,
    point_of: Vec<usize>,
    by_point: Vec<Vec<usize>>,
    frozen: Vec<[bool; CAMERA_DOF]>,
    u: Vec<CamMat>,
    v: Vec<Matrix3<f64>>,
    w: Vec<CrossBlock>,
    g_cam: Vec<CamVec>,
    g_point: Vec<Vector3<f64>>,
}

impl SchurSystem {
    pub fn build(problem: &BaProblem) -> Self {
        let linearized: Vec<Option<Linearized>> = (0..problem.observations.len())
            .into_par_iter()
            .map(|n| problem.linearize(n))
            .collect();
        let nc = problem.cameras.len();
        let np = problem.points.len();
        let mut u = vec![CamMat::zeros(); nc];
        let mut v = vec![Matrix3::zeros(); np];
        let mut g_cam = vec![CamVec::zeros(); nc];
        let mut g_point = vec![Vector3::zeros(); np];
        let mut w = vec![CrossBlock::zeros(); linearized.len()];
        let mut by_point = vec![Vec::new(); np];
        for (n, lin) in linearized.iter().enumerate() {
            let Some(lin) = lin else { continue };
            let o = &problem.observations[n];
            u[o.camera] += lin.camera.transpose() * lin.camera;
            v[o.point] += lin.point.transpose() * lin.point;
            g_cam[o.camera] += lin.camera.transpose() * lin.residual;
            g_point[o.point] += lin.point.transpose() * lin.residual;
            w[n] = lin.camera.transpose() * lin.point;
            by_point[o.point].push(n);
        }
        Self {
            linearized,
            cameras_of: problem.observations.iter().map(|o| o.camera).collect(),
            point_of: problem.observations.iter().map(|o| o.point).collect(),
            by_point,
            frozen: problem.frozen.clone(),
            u,
            v,
            w,
            g_cam,
            g_point,
        }
    }

    /// `J^T r` over cameras (local parameters, frozen entries zero) and points.
    pub fn gradient(&self) -> (Vec<[f64; CAMERA_DOF]>, Vec<Vector3<f64>>) {
        (
            self.g_cam
                .iter()
                .map(|g| std::array::from_fn(|k| g[k]))
                .collect(),
            self.g_point.clone(),
        )
    }

    pub fn gradient_inf_norm(&self) -> f64 {
        let cams = self.g_cam.iter().flat_map(|g| g.iter().copied());
        let points = self.g_point.iter().flat_map(|g| g.iter().copied());
        cams.chain(points).fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Adds a symmetric second-order block over `[camera (7), point (3)]` of observation `n` to
    /// the normal matrix.
    pub(crate) fn add_observation_curvature(
        &mut self,
        n: usize,
        block: &SMatrix<f64, { CAMERA_DOF + 3 }, { CAMERA_DOF + 3 }>,
    ) {
        let camera = self.cameras_of[n];
        let point = self.point_of[n];
        self.u[camera] += block.fixed_view::<CAMERA_DOF, CAMERA_DOF>(0, 0);
        self.v[point] += block.fixed_view::<3, 3>(CAMERA_DOF, CAMERA_DOF);
        self.w[n] += block.fixed_view::<CAMERA_DOF, 3>(0, CAMERA_DOF);
    }

    /// Observations left out because they did not project.
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.linearized.len())
            .filter(|&n| self.linearized[n].is_none())
            .collect()
    }

    /// Solves `(J^T J + lambda I) x = rhs` over the free parameters by eliminating points.
    /// Frozen entries of the result are zero.
    pub fn solve(
        &self,
        lambda: f64,
        rhs_cam: &[[f64; CAMERA_DOF]],
        rhs_point: &[Vector3<f64>],
    ) -> Result<Step> {
        let nc = self.u.len();
        let dim = CAMERA_DOF * nc;
        let v_inv: Vec<Matrix3<f64>> = self
            .v
            .iter()
            .enumerate()
            .map(|(j, v)| {
                (v + Matrix3::identity() * lambda)
                    .cholesky()
                    .map(|c| c.inverse())
                    .ok_or_else(|| {
                        Error::Solver(format!("point block {j} is not positive definite"))
                    })
            })
            .collect::<Result<_>>()?;

        let mut s = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for i in 0..nc {
            let base = CAMERA_DOF * i;
            s.view_mut((base, base), (CAMERA_DOF, CAMERA_DOF))
                .copy_from(&self.u[i]);
            for k in 0..CAMERA_DOF {
                s[(base + k, base + k)] += lambda;
                b[base + k] = rhs_cam[i][k];
            }
        }
        for (j, obs) in self.by_point.iter().enumerate() {
            let vi = &v_inv[j];
            for &n in obs {
                let wv = self.w[n] * vi;
                let ci = CAMERA_DOF * self.cameras_of[n];
                let contribution = wv * rhs_point[j];
                for k in 0..CAMERA_DOF {
                    b[ci + k] -= contribution[k];
                }
                for &m in obs {
                    let cm = CAMERA_DOF * self.cameras_of[m];
                    let block = wv * self.w[m].transpose();
                    let mut view = s.view_mut((ci, cm), (CAMERA_DOF, CAMERA_DOF));
                    view -= block;
                }
            }
        }
        for (i, frozen) in self.frozen.iter().enumerate() {
            for (k, f) in frozen.iter().enumerate() {
                if *f {
                    let idx = CAMERA_DOF * i + k;
                    s.row_mut(idx).fill(0.0);
                    s.column_mut(idx).fill(0.0);
                    s[(idx, idx)] = 1.0;
                    b[idx] = 0.0;
                }
            }
        }
        let chol = s.cholesky().ok_or_else(|| {
            Error::Solver(format!(
                "reduced camera system is singular at lambda {lambda:e}"
            ))
        })?;
        let dc = chol.solve(&b);
        let cameras: Vec<[f64; CAMERA_DOF]> = (0..nc)
            .map(|i| std::array::from_fn(|k| dc[CAMERA_DOF * i + k]))
            .collect();
        let points = self
            .by_point
            .iter()
            .enumerate()
            .map(|(j, obs)| {
                let mut r = rhs_point[j];
                for &n in obs {
                    r -= self.w[n].transpose() * CamVec::from(cameras[self.cameras_of[n]]);
                }
                v_inv[j] * r
            })
            .collect();
        Ok(Step { cameras, points })
    }

    /// The damped Gauss-Newton step `-(J^T J + lambda I)^-1 J^T r`.
    pub fn step(&self, lambda: f64) -> Result<Step> {
        let rhs_cam: Vec<[f64; CAMERA_DOF]> = self
            .g_cam
            .iter()
            .map(|g| std::array::from_fn(|k| -g[k]))
            .collect();
        let rhs_point: Vec<Vector3<f64>> = self.g_point.iter().map(|g| -g).collect();
        self.solve(lambda, &rhs_cam, &rhs_point)
    }
}

/// Returns a copy of `problem` moved by `step`.
pub fn apply_step(problem: &BaProblem, step: &Step) -> Result<BaProblem> {
    let mut out = problem.clone();
    for (i, cam) in out.cameras.iter_mut().enumerate() {
        *cam = apply_camera_step(&problem.cameras[i], &step.cameras[i], &problem.frozen[i])?;
    }
    for (x, d) in out.points.iter_mut().zip(&step.points) {
        *x += d;
    }
    Ok(out)
}

/// Levenberg-Marquardt on `ba_cost`. Only steps that do not increase the cost are accepted;
/// damping is divided by ten after an accepted step and multiplied by ten after a rejected one.
pub fn lm_solve(problem: &BaProblem, options: &LmOptions) -> Result<(BaProblem, LmState)> {
    problem.validate(1)?;
    let mut current = problem.clone();
    let mut cost = ba_cost(&current);
    let mut state = LmState {
        lambda: options
            .lambda_init
            .clamp(options.lambda_min, options.lambda_max),
        initial_cost: cost,
        cost,
        step: 0,
        converged: false,
        reason: StopReason::MaxSteps,
        history: Vec::new(),
        gradient_norm: f64::INFINITY,
    };
    let mut small = 0;
    let mut system = SchurSystem::build(&current);
    state.gradient_norm = system.gradient_inf_norm();
    while state.step < options.max_steps {
        if state.gradient_norm < options.gradient_tolerance {
            state.converged = true;
            state.reason = StopReason::GradientNorm;
            break;
        }
        state.step += 1;
        let mut accepted = false;
        loop {
            match system.step(state.lambda) {
                Ok(step) => {
                    let candidate = apply_step(&current, &step)?;
                    let new_cost = ba_cost(&candidate);
                    // Equal cost is accepted: near an optimum the change falls below rounding
                    // of the total while the step still reduces the gradient.
                    let ok = new_cost <= cost;
                    state.history.push(LmStep {
                        step: state.step,
                        lambda: state.lambda,
                        cost: new_cost,
                        accepted: ok,
                    });
                    if ok {
                        let relative = (cost - new_cost) / cost;
                        small = if relative < options.relative_tolerance {
                            small + 1
                        } else {
                            0
                        };
                        current = candidate;
                        cost = new_cost;
                        state.lambda = (state.lambda / 10.0).max(options.lambda_min);
                        accepted = true;
                        break;
                    }
                }
                Err(err) => {
                    if state.lambda >= options.lambda_max {
                        return Err(Error::Solver(format!("{err} (even at maximum damping)")));
                    }
                }
            }
            if state.lambda >= options.lambda_max {
                break;
            }
            state.lambda = (state.lambda * 10.0).min(options.lambda_max);
        }
        if !accepted {
            state.converged = true;
            state.reason = StopReason::DampingLimit;
            break;
        }
        system = SchurSystem::build(&current);
        state.gradient_norm = system.gradient_inf_norm();
        if small >= 2 {
            state.converged = true;
            state.reason = StopReason::RelativeDecrease;
            break;
        }
    }
    if !state.converged && state.gradient_norm < options.gradient_tolerance {
        state.converged = true;
        state.reason = StopReason::GradientNorm;
    }
    state.cost = cost;
    Ok((current, state))
}

/// Takes up to `steps` nearly undamped Newton steps and returns the iterate with the smallest
/// gradient infinity norm (the input included).
///
/// Near an optimum LM can no longer tell cost changes from rounding, while the gradient is still
/// well above its own floor. Meant to run after [`lm_solve`] when stationarity matters, e.g.
/// before differentiating through the solution.
pub fn newton_polish(problem: &BaProblem, steps: usize) -> Result<BaProblem> {
    let mut current = problem.clone();
    let mut best = (
        SchurSystem::build(&current).gradient_inf_norm(),
        current.clone(),
    );
    for _ in 0..steps {
        let system = SchurSystem::build(&current);
        let Ok(step) = system.step(POLISH_LAMBDA) else {
            break;
        };
        current = apply_step(&current, &step)?;
        let norm = SchurSystem::build(&current).gradient_inf_norm();
        if norm < best.0 {
            best = (norm, current.clone());
        }
    }
    Ok(best.1)
}

/// CSV with header `step,lambda,cost,accepted`, one row per step trial.
pub fn write_steps_csv(history: &[LmStep]) -> String {
    let mut out = String::from("step,lambda,cost,accepted\n");
    for s in history {
        let _ = writeln!(out, "{},{:e},{:e},{}", s.step, s.lambda, s.cost, s.accepted);
    }
    out
}
