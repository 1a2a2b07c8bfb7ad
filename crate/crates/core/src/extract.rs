//! Turns an SDP solution into an IK verdict.
//!
//! The moment matrix of block `l` is the dual slack of its Gram block: with
//! the relaxation's row convention `S_l[a, b] = [a = b = 0] - y_{m(a,b)}`, so
//! `S_l[0, 0] = 1` and the first row holds the first-order moments of the
//! block's variables. Rank-one blocks certify a global optimum; the point is
//! read from their first rows and stitched across overlaps.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use sosik_sdp::{InfeasibilityCertificate, SdpSolution, SdpStatus};

use crate::bsos::{BsosProgram, VariableScaling};
use crate::chain::{
    angles_from_positions, check_feasible, forward_kinematics, Configuration, Goal,
};
use crate::error::{CoreError, Result};
use crate::geom::dist;
use crate::qcqp::VarietyProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Certificate {
    GlobalOptimum,
    Infeasible,
    Indeterminate,
}

/// Why an instance was declared infeasible.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    /// The SOS side is unbounded: a cone ray `X` with `A(X) = 0` and
    /// `<C, X> < 0`, so no moment vector (and no configuration) exists.
    SdpRay { residual: f64, improvement: f64 },
    /// The goal lies farther from the base than the chain can reach.
    ReachBound { distance: f64, reach: f64 },
}

/// Seconds spent per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub assemble: f64,
    pub solve: f64,
    pub extract: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IkOutcome {
    pub certificate: Certificate,
    pub configuration: Option<Configuration>,
    pub angles: Option<Vec<f64>>,
    /// Relaxation value `t*`; absent when no optimum was reached.
    pub objective: Option<f64>,
    /// `(block, numeric rank)` per partition block.
    pub rank_profile: Vec<(usize, usize)>,
    pub stitching_discrepancy: f64,
    /// Distance from the forward-kinematics end point of `angles` to the goal.
    pub endpoint_error: Option<f64>,
    pub evidence: Option<Evidence>,
    /// Whether the extracted point was projected onto the variety.
    pub polished: bool,
    pub sdp_status: Option<String>,
    pub sdp_iterations: usize,
    /// References tried before this verdict.
    pub references_tried: usize,
    pub times: StageTimes,
    pub wall_time: f64,
}

impl IkOutcome {
    pub(crate) fn empty(certificate: Certificate) -> Self {
        IkOutcome {
            certificate,
            configuration: None,
            angles: None,
            objective: None,
            rank_profile: Vec::new(),
            stitching_discrepancy: 0.0,
            endpoint_error: None,
            evidence: None,
            polished: false,
            sdp_status: None,
            sdp_iterations: 0,
            references_tried: 0,
            times: StageTimes::default(),
            wall_time: 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("outcome serializes")
    }

    pub fn is_rank_one(&self) -> bool {
        !self.rank_profile.is_empty() && self.rank_profile.iter().all(|&(_, r)| r == 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    /// Relative eigenvalue threshold for the numeric rank.
    pub rank_tol: f64,
    /// Largest accepted disagreement between overlapping blocks.
    pub stitch_tol: f64,
    pub feasibility_tol: f64,
    /// Relative tolerance on `|f(y) - t*|`.
    pub objective_tol: f64,
    /// Project the extracted point onto the variety before checking it.
    pub polish: bool,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            rank_tol: 1e-5,
            stitch_tol: 1e-4,
            feasibility_tol: 1e-6,
            objective_tol: 1e-5,
            polish: false,
        }
    }
}

/// Moment matrices of the blocks, in the variables the relaxation was solved
/// in; `scaling` maps those back to the original coordinates.
#[derive(Debug, Clone)]
pub struct MomentBlocks {
    /// Variables of each block, basis `[1, z_vars]`.
    pub vars: Vec<Vec<usize>>,
    /// Moment matrices scaled so that `M[0, 0] = 1`.
    pub matrices: Vec<DMatrix<f64>>,
    /// Ascending eigenvalues of each matrix.
    pub eigenvalues: Vec<Vec<f64>>,
    /// `None` for the identity map.
    pub scaling: Option<VariableScaling>,
}

impl MomentBlocks {
    pub fn new(vars: Vec<Vec<usize>>, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if vars.len() != matrices.len() {
            return Err(CoreError::DimensionMismatch {
                expected: vars.len(),
                got: matrices.len(),
            });
        }
        let mut scaled = Vec::with_capacity(matrices.len());
        let mut eigenvalues = Vec::with_capacity(matrices.len());
        for (v, m) in vars.iter().zip(matrices) {
            if m.nrows() != v.len() + 1 || m.ncols() != v.len() + 1 {
                return Err(CoreError::DimensionMismatch {
                    expected: v.len() + 1,
                    got: m.nrows(),
                });
            }
            let m00 = m[(0, 0)];
            let m = if m00 > 0.0 { m / m00 } else { m };
            let sym = (&m + m.transpose()) * 0.5;
            let mut ev: Vec<f64> = SymmetricEigen::new(sym)
                .eigenvalues
                .iter()
                .copied()
                .collect();
            ev.sort_by(f64::total_cmp);
            eigenvalues.push(ev);
            scaled.push(m);
        }
        Ok(MomentBlocks {
            vars,
            matrices: scaled,
            eigenvalues,
            scaling: None,
        })
    }

    /// Moment blocks of an optimal relaxation.
    pub fn from_solution(sol: &SdpSolution, prog: &BsosProgram) -> Result<Self> {
        if sol.status != SdpStatus::Optimal {
            return Err(CoreError::Precondition(format!(
                "moment blocks need an optimal solve, got {:?}",
                sol.status
            )));
        }
        let mats = (0..prog.bases.len())
            .map(|l| {
                sol.dual_slack[l]
                    .as_matrix()
                    .cloned()
                    .ok_or_else(|| CoreError::Internal(format!("block {l} is not PSD")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mb = Self::new(prog.bases.clone(), mats)?;
        mb.scaling = Some(prog.scaling.clone());
        Ok(mb)
    }

    /// Rank-one blocks `[1, y_I][1, y_I]'` of a known point.
    pub fn from_point(vars: Vec<Vec<usize>>, y: &[f64]) -> Self {
        let mats = vars
            .iter()
            .map(|v| {
                let mut b = vec![1.0];
                b.extend(v.iter().map(|&i| y[i]));
                let b = DVector::from_vec(b);
                &b * b.transpose()
            })
            .collect();
        Self::new(vars, mats).expect("shapes match")
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues
            .iter()
            .filter_map(|e| e.first().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Numeric rank of each block: eigenvalues above `ratio_tol * lambda_max`.
pub fn rank_profile(mb: &MomentBlocks, ratio_tol: f64) -> Vec<usize> {
    mb.eigenvalues
        .iter()
        .map(|ev| {
            let max = ev.last().copied().unwrap_or(0.0);
            if max <= 0.0 {
                0
            } else {
                ev.iter().filter(|&&l| l / max > ratio_tol).count()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub y: Vec<f64>,
    /// Largest disagreement between blocks sharing a variable.
    pub discrepancy: f64,
}

/// Point read from the first rows of the blocks, overlaps averaged, in the
/// original coordinates; the discrepancy is measured in those units too.
pub fn extract_solution(mb: &MomentBlocks, n: usize) -> Result<Extraction> {
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (vars, m) in mb.vars.iter().zip(&mb.matrices) {
        for (k, &v) in vars.iter().enumerate() {
            if v >= n {
                return Err(CoreError::Internal(format!("variable {v} out of range")));
            }
            values[v].push(m[(0, k + 1)]);
        }
    }
    let mut z = Vec::with_capacity(n);
    let mut discrepancy: f64 = 0.0;
    for (i, vals) in values.iter().enumerate() {
        if vals.is_empty() {
            return Err(CoreError::Internal(format!("variable {i} is in no block")));
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unit = mb.scaling.as_ref().map_or(1.0, |s| s.scale[i].abs());
        discrepancy = discrepancy.max(unit * (hi - lo));
        z.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    let y = match &mb.scaling {
        Some(s) => s.to_original(&z),
        None => z,
    };
    Ok(Extraction { y, discrepancy })
}

/// Gauss-Newton projection onto the equalities and violated inequalities:
/// minimum-norm steps, at most `iters` of them.
pub fn polish(vp: &VarietyProblem, y: &[f64], iters: usize) -> Vec<f64> {
    let mut y = y.to_vec();
    for _ in 0..iters {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut res: Vec<f64> = Vec::new();
        for c in &vp.equalities {
            rows.push(c.form.gradient(&y));
            res.push(c.form.evaluate(&y));
        }
        for c in &vp.inequalities {
            let v = c.form.evaluate(&y);
            if v > 0.0 {
                rows.push(c.form.gradient(&y));
                res.push(v);
            }
        }
        let worst = res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if rows.is_empty() || worst < 1e-14 {
            break;
        }
        let j = DMatrix::from_fn(rows.len(), vp.n, |r, c| rows[r][c]);
        let r = DVector::from_vec(res);
        let Ok(step) = j.svd(true, true).solve(&r, 1e-12) else {
            break;
        };
        for (yi, si) in y.iter_mut().zip(step.iter()) {
            *yi -= si;
        }
    }
    y
}

/// Distance from the end of `cfg` to the goal region.
pub fn goal_error(goal: &Goal, cfg: &Configuration) -> f64 {
    let end = cfg.end_point();
    match goal {
        Goal::Position { x_n } => dist(end, x_n),
        Goal::Pose { x_nm1, x_n } => {
            let n = cfg.points.len() - 1;
            dist(end, x_n).max(dist(&cfg.points[n - 1], x_nm1))
        }
        Goal::Ball { center, radius } => (dist(end, center) - radius).max(0.0),
    }
}

/// Classifies a solved relaxation.
pub fn certify(
    sol: &SdpSolution,
    prog: &BsosProgram,
    vp: &VarietyProblem,
    opts: &CertifyOptions,
) -> IkOutcome {
    let mut out = IkOutcome::empty(Certificate::Indeterminate);
    out.sdp_status = Some(format!("{:?}", sol.status));
    out.sdp_iterations = sol.iterations;
    match sol.status {
        SdpStatus::DualInfeasible => {
            out.certificate = Certificate::Infeasible;
            if let Some(cert @ InfeasibilityCertificate::DualRay { .. }) = &sol.certificate {
                out.evidence = Some(Evidence::SdpRay {
                    residual: cert.residual(),
                    improvement: cert.improvement(&prog.sdp),
                });
            }
            return out;
        }
        SdpStatus::Optimal => {}
        _ => return out,
    }
    let t_star = prog.lower_bound(sol);
    out.objective = Some(t_star);
    let Ok(mb) = MomentBlocks::from_solution(sol, prog) else {
        return out;
    };
    let ranks = rank_profile(&mb, opts.rank_tol);
    out.rank_profile = ranks.iter().copied().enumerate().collect();
    if ranks.iter().any(|&r| r != 1) {
        return out;
    }
    let Ok(ex) = extract_solution(&mb, vp.n) else {
        return out;
    };
    out.stitching_discrepancy = ex.discrepancy;
    if ex.discrepancy > opts.stitch_tol {
        return out;
    }
    let y = if opts.polish {
        out.polished = true;
        polish(vp, &ex.y, 5)
    } else {
        ex.y
    };
    let cfg = vp.configuration(&y);
    let Ok(report) = check_feasible(&vp.spec, &cfg, opts.feasibility_tol, opts.feasibility_tol)
    else {
        return out;
    };
    let Ok(angles) = angles_from_positions(&vp.spec, &cfg) else {
        return out;
    };
    out.endpoint_error = forward_kinematics(&vp.spec, &angles)
        .ok()
        .map(|fk| goal_error(&vp.spec.goal, &fk));
    let objective_ok =
        (vp.objective_value(&y) - t_star).abs() <= opts.objective_tol * (1.0 + t_star.abs());
    out.configuration = Some(cfg);
    out.angles = Some(angles);
    if report.feasible && objective_ok {
        out.certificate = Certificate::GlobalOptimum;
    }
    out
}
