//! Local joint-angle IK: damped least squares with limit clamping and random
//! restarts. Used as the comparison baseline for the certified pipeline.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chain::{forward_kinematics, sample_angles, ChainSpec, Goal};
use crate::error::{CoreError, Result};
use crate::extract::goal_error;
use crate::geom::{norm, sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalOptions {
    pub max_iter: usize,
    /// Attempts in total; the first starts from the given seed angles.
    pub restarts: usize,
    /// Initial Levenberg damping `mu`.
    pub damping: f64,
    /// Endpoint error that counts as success.
    pub success_tol: f64,
    /// Seed for the restart angles.
    pub seed: u64,
}

impl Default for LocalOptions {
    fn default() -> Self {
        LocalOptions {
            max_iter: 500,
            restarts: 1,
            damping: 1e-3,
            success_tol: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalResult {
    pub converged: bool,
    pub angles: Vec<f64>,
    pub position_error: f64,
    pub iterations: usize,
    pub restarts_used: usize,
    pub wall_time: f64,
}

/// `(lo, hi)` per angle: relative limits for inter-link joints, the mount
/// limit for the first link when imposed.
fn angle_box(spec: &ChainSpec) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(spec.angle_count());
    for i in 1..=spec.dof() {
        let limit = if i == 1 {
            spec.mount_limit()
        } else {
            spec.limited_joint(i - 1)
        };
        let a = limit.unwrap_or(f64::INFINITY);
        if spec.dimension == 2 {
            out.push((-a, a));
        } else {
            out.push((f64::NEG_INFINITY, f64::INFINITY));
            out.push((-a.min(PI), a.min(PI)));
        }
    }
    out
}

fn clamp(theta: &mut [f64], bx: &[(f64, f64)]) {
    for (t, &(lo, hi)) in theta.iter_mut().zip(bx) {
        *t = t.clamp(lo, hi);
    }
}

/// Stacked endpoint residual: position, plus the second-to-last point for
/// pose goals; the radial excess for ball goals.
fn residual(spec: &ChainSpec, goal: &Goal, theta: &[f64]) -> Result<Vec<f64>> {
    let cfg = forward_kinematics(spec, theta)?;
    let end = cfg.end_point();
    Ok(match goal {
        Goal::Position { x_n } => sub(end, x_n),
        Goal::Pose { x_nm1, x_n } => {
            let mut r = sub(end, x_n);
            r.extend(sub(&cfg.points[cfg.points.len() - 2], x_nm1));
            r
        }
        Goal::Ball { center, radius } => {
            let e = sub(end, center);
            let d = norm(&e);
            if d <= *radius {
                vec![0.0; e.len()]
            } else {
                e.iter().map(|v| v * (1.0 - radius / d)).collect()
            }
        }
    })
}

fn cost(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

struct Attempt {
    angles: Vec<f64>,
    error: f64,
    iterations: usize,
}

fn run_attempt(
    spec: &ChainSpec,
    goal: &Goal,
    seed: &[f64],
    bx: &[(f64, f64)],
    opts: &LocalOptions,
) -> Result<Attempt> {
    let mut theta = seed.to_vec();
    clamp(&mut theta, bx);
    let mut r = residual(spec, goal, &theta)?;
    let mut c = cost(&r);
    let mut mu = opts.damping;
    let mut iterations = 0;
    let h = 1e-7;
    while iterations < opts.max_iter && c.sqrt() > 1e-12 && mu < 1e12 {
        iterations += 1;
        let n = theta.len();
        let mut jac = DMatrix::<f64>::zeros(r.len(), n);
        for k in 0..n {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let rp = residual(spec, goal, &tp)?;
            let rm = residual(spec, goal, &tm)?;
            for (row, (a, b)) in rp.iter().zip(&rm).enumerate() {
                jac[(row, k)] = (a - b) / (2.0 * h);
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;
        loop {
            let a = &jtj + DMatrix::<f64>::identity(n, n) * mu;
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-&jtr))) else {
                mu *= 10.0;
                if mu >= 1e12 {
                    break;
                }
                continue;
            };
            let mut cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            clamp(&mut cand, bx);
            let rc = residual(spec, goal, &cand)?;
            let cc = cost(&rc);
            if cc < c {
                theta = cand;
                r = rc;
                c = cc;
                mu = (mu / 10.0).max(1e-12);
                break;
            }
            mu *= 10.0;
            if mu >= 1e12 {
                break;
            }
        }
    }
    let cfg = forward_kinematics(spec, &theta)?;
    Ok(Attempt {
        error: goal_error(goal, &cfg),
        angles: theta,
        iterations,
    })
}

/// Best of `opts.restarts` damped least-squares runs.
pub fn solve_local(
    spec: &ChainSpec,
    goal: &Goal,
    seed_angles: &[f64],
    opts: &LocalOptions,
) -> Result<LocalResult> {
    if seed_angles.len() != spec.angle_count() {
        return Err(CoreError::DimensionMismatch {
            expected: spec.angle_count(),
            got: seed_angles.len(),
        });
    }
    let start = Instant::now();
    let bx = angle_box(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Attempt, usize)> = None;
    for k in 0..opts.restarts.max(1) {
        let seed = if k == 0 {
            seed_angles.to_vec()
        } else {
            sample_angles(spec, &mut rng)
        };
        let at = run_attempt(spec, goal, &seed, &bx, opts)?;
        let better = best.as_ref().is_none_or(|(b, _)| at.error < b.error);
        let done = at.error <= opts.success_tol;
        if better {
            best = Some((at, k + 1));
        }
        if done {
            break;
        }
    }
    let (at, used) = best.expect("at least one attempt");
    Ok(LocalResult {
        converged: at.error <= opts.success_tol,
        angles: at.angles,
        position_error: at.error,
        iterations: at.iterations,
        restarts_used: used,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
