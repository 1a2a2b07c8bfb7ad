//! End-to-end solve: variety, reference, partition, relaxation, certificate.

use std::time::Instant;

use sosik_sdp::{solve, SdpSolution, SolverOptions};

use crate::bsos::{assemble, normalize, BsosProgram};
use crate::chain::{sample_feasible, ChainSpec, Goal};
use crate::error::Result;
use crate::extract::{certify, Certificate, CertifyOptions, Evidence, IkOutcome};
use crate::geom::dist;
use crate::partition::build_partition;
use crate::qcqp::{build_variety, Reference, VarietyProblem};

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Multiplier degree of the relaxation.
    pub d: usize,
    /// References tried before giving up with `Indeterminate`.
    pub max_references: usize,
    /// Seed of the first random reference; reference `k` uses `seed + k`.
    pub seed: u64,
    /// Declare goals beyond the reach infeasible without solving.
    pub reach_check: bool,
    pub certify: CertifyOptions,
    pub solver: SolverOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            d: 1,
            max_references: 5,
            seed: 0,
            reach_check: true,
            certify: CertifyOptions::default(),
            solver: SolverOptions::default(),
        }
    }
}

/// Everything built for one reference, kept for inspection.
#[derive(Debug, Clone)]
pub struct SolvedRelaxation {
    pub variety: VarietyProblem,
    pub program: BsosProgram,
    pub solution: SdpSolution,
}

/// Random reference `k`: a configuration sampled within the joint limits.
pub fn random_reference(spec: &ChainSpec, seed: u64) -> Reference {
    Reference::Configuration(sample_feasible(spec, seed))
}

/// Evidence that the goal is out of reach, when it is.
pub fn reach_violation(spec: &ChainSpec) -> Option<Evidence> {
    let r = spec.reach();
    let n = spec.dof();
    let (distance, limit) = match &spec.goal {
        Goal::Position { x_n } => (dist(x_n, &spec.base), r),
        Goal::Pose { x_nm1, x_n } => {
            let a = dist(x_nm1, &spec.base) - (r - spec.links[n - 1]);
            let b = dist(x_n, &spec.base) - r;
            if a > b {
                (dist(x_nm1, &spec.base), r - spec.links[n - 1])
            } else {
                (dist(x_n, &spec.base), r)
            }
        }
        Goal::Ball { center, radius } => (dist(center, &spec.base) - radius, r),
    };
    (distance > limit).then_some(Evidence::ReachBound {
        distance,
        reach: limit,
    })
}

/// One relaxation with a given reference.
pub fn solve_with_reference(
    spec: &ChainSpec,
    reference: &Reference,
    opts: &PipelineOptions,
) -> Result<(IkOutcome, SolvedRelaxation)> {
    let start = Instant::now();
    let vp = build_variety(spec)?.set_reference(reference)?;
    let part = build_partition(&vp)?;
    let ncs = normalize(&vp)?;
    let prog = assemble(&vp, &part, &ncs, opts.d)?;
    let t_assemble = start.elapsed().as_secs_f64();
    let sol = solve(&prog.sdp, &opts.solver)?;
    let t_solve = start.elapsed().as_secs_f64() - t_assemble;
    let mut outcome = certify(&sol, &prog, &vp, &opts.certify);
    let total = start.elapsed().as_secs_f64();
    outcome.times.assemble = t_assemble;
    outcome.times.solve = t_solve;
    outcome.times.extract = total - t_assemble - t_solve;
    outcome.wall_time = total;
    outcome.references_tried = 1;
    Ok((
        outcome,
        SolvedRelaxation {
            variety: vp,
            program: prog,
            solution: sol,
        },
    ))
}

/// Tries random references until one yields a certificate; `visit` sees
/// every solved relaxation.
pub fn solve_ik_traced<F>(
    spec: &ChainSpec,
    opts: &PipelineOptions,
    mut visit: F,
) -> Result<IkOutcome>
where
    F: FnMut(&IkOutcome, &SolvedRelaxation),
{
    spec.validate()?;
    let start = Instant::now();
    if opts.reach_check {
        if let Some(ev) = reach_violation(spec) {
            let mut out = IkOutcome::empty(Certificate::Infeasible);
            out.evidence = Some(ev);
            out.wall_time = start.elapsed().as_secs_f64();
            return Ok(out);
        }
    }
    let mut last = None;
    let mut times = crate::extract::StageTimes::default();
    for k in 0..opts.max_references.max(1) {
        let reference = random_reference(spec, opts.seed.wrapping_add(k as u64));
        let (mut out, solved) = solve_with_reference(spec, &reference, opts)?;
        visit(&out, &solved);
        times.assemble += out.times.assemble;
        times.solve += out.times.solve;
        times.extract += out.times.extract;
        out.references_tried = k + 1;
        out.times = times;
        out.wall_time = start.elapsed().as_secs_f64();
        let done = out.certificate != Certificate::Indeterminate;
        last = Some(out);
        if done {
            break;
        }
    }
    Ok(last.expect("at least one reference"))
}

pub fn solve_ik(spec: &ChainSpec, opts: &PipelineOptions) -> Result<IkOutcome> {
    solve_ik_traced(spec, opts, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::check_feasible;
    use std::f64::consts::PI;

    fn fixture6() -> ChainSpec {
        ChainSpec::bundled_planar_10dof().truncated(6).unwrap()
    }

    #[test]
    fn own_endpoint_is_certified() {
        let spec = fixture6();
        let cfg = sample_feasible(&spec, 11);
        let spec = spec.retarget(&cfg);
        let opts = PipelineOptions::default();
        let (out, _) = solve_with_reference(&spec, &Reference::Configuration(cfg), &opts).unwrap();
        assert_eq!(out.certificate, Certificate::GlobalOptimum);
        assert!(out.objective.unwrap().abs() <= 1e-6);
        assert!(out.endpoint_error.unwrap() < 1e-6);
    }

    #[test]
    fn random_feasible_goal_is_solved() {
        let spec = fixture6();
        let cfg = sample_feasible(&spec, 12);
        let spec = spec.retarget(&cfg);
        let out = solve_ik(&spec, &PipelineOptions::default()).unwrap();
        assert_eq!(out.certificate, Certificate::GlobalOptimum, "{out:?}");
        let c = out.configuration.as_ref().unwrap();
        assert!(check_feasible(&spec, c, 1e-6, 1e-6).unwrap().feasible);
        assert!(out.endpoint_error.unwrap() < 1e-3);
    }

    #[test]
    fn beyond_reach_is_infeasible_with_and_without_precheck() {
        let spec = fixture6();
        let r = spec.reach();
        let spec = spec
            .with_goal(Goal::Position {
                x_n: vec![1.1 * r * 0.6, 1.1 * r * 0.8],
            })
            .unwrap();
        let out = solve_ik(&spec, &PipelineOptions::default()).unwrap();
        assert_eq!(out.certificate, Certificate::Infeasible);
        assert!(matches!(out.evidence, Some(Evidence::ReachBound { .. })));
        let opts = PipelineOptions {
            reach_check: false,
            ..Default::default()
        };
        let out = solve_ik(&spec, &opts).unwrap();
        assert_eq!(out.certificate, Certificate::Infeasible);
        assert!(matches!(out.evidence, Some(Evidence::SdpRay { .. })));
    }

    #[test]
    fn two_link_goal_prefers_nearer_branch() {
        let spec = ChainSpec::new(
            2,
            vec![1.0, 1.0],
            vec![PI],
            vec![0.0, 0.0],
            Goal::Position {
                x_n: vec![1.0, 1.0],
            },
        )
        .unwrap();
        let opts = PipelineOptions::default();
        let (out, _) =
            solve_with_reference(&spec, &Reference::Vector(vec![0.9, 0.1]), &opts).unwrap();
        assert_eq!(out.certificate, Certificate::GlobalOptimum);
        assert!(out.is_rank_one());
        let c = out.configuration.unwrap();
        assert!(dist(&c.points[1], &[1.0, 0.0]) < 1e-5);
    }

    #[test]
    fn outcome_serializes() {
        let spec = fixture6();
        let cfg = sample_feasible(&spec, 2);
        let spec = spec.retarget(&cfg);
        let out = solve_ik(&spec, &PipelineOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out.to_json()).unwrap();
        assert_eq!(v["certificate"], "GlobalOptimum");
        assert!(v["rank_profile"].as_array().unwrap().len() >= 2);
    }
}
