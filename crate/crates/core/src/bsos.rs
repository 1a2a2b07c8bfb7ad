//! Sparse bounded-degree SOS relaxation at `k = 1`, assembled as a block SDP.
//!
//! Every constraint is scaled by a bound `B_j` valid on the reach box
//! (`|x_i - x_0| <= R`, `|s| <= 2`) so that the semialgebraic set
//! `K = {0 <= g <= 1}` describes the variety: an equality contributes the
//! opposed pair `g/B, -g/B`, an inequality `g <= 0` contributes `-g/B`.
//!
//! The SDP finds the largest `t` with
//!
//! ```text
//!   f - t - sum_k lambda_k h_k = sum_l [1, y_{I_l}] G_l [1, y_{I_l}]'
//! ```
//!
//! where `h_k` ranges over the products `prod g^a (1 - g)^b` of degree at most
//! `d` built from each block's constraints, `lambda >= 0` and `G_l` PSD.
//! Coefficients are matched once per monomial of the union of the blocks. The
//! constant monomial fixes `t = f(0) - sum_l G_l[0,0] - sum_k lambda_k h_k(0)`,
//! so `t` is eliminated and the SDP minimizes that sum.

use serde::Serialize;
use sosik_sdp::{BlockKind, BlockSparse, SdpProblem, SdpSolution};

use crate::error::{CoreError, Result};
use crate::geom::dist;
use crate::partition::{verify_rip, Partition};
use crate::poly::{Monomial, Poly};
use crate::qcqp::{ConstraintKind, QuadraticForm, VarietyProblem};

/// Largest total multiplier count accepted.
pub const MAX_MULTIPLIERS: usize = 200_000;

/// Slack magnitude bound from `s^2 <= 2(1 - cos alpha) <= 4`.
const SLACK_BOX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedConstraint {
    /// Index of the source constraint (equalities first).
    pub source: usize,
    /// `+1` or `-1`: the item is `sign * g / B`.
    pub sign: f64,
    pub form: QuadraticForm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedConstraintSet {
    /// `B_j` per source constraint.
    pub bounds: Vec<f64>,
    pub items: Vec<NormalizedConstraint>,
}

impl NormalizedConstraintSet {
    /// Items whose source constraint is in `sources`.
    pub fn items_for(&self, sources: &[usize]) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| sources.contains(&it.source))
            .map(|(k, _)| k)
            .collect()
    }

    /// Whether every item lies in `[0, 1]` at `y` (up to `tol`).
    pub fn contains(&self, y: &[f64], tol: f64) -> bool {
        self.items.iter().all(|it| {
            let v = it.form.evaluate(y);
            v >= -tol && v <= 1.0 + tol
        })
    }
}

/// Distance of each point from the base over the reach box: the reach `R`
/// for free points, the actual distance for pinned ones.
fn point_radii(vp: &VarietyProblem) -> Vec<f64> {
    let r = vp.spec.reach();
    vp.point_slots
        .iter()
        .enumerate()
        .map(|(i, slot)| match slot {
            Some(_) => r,
            None => dist(vp.spec.fixed_point(i).unwrap(), &vp.spec.base),
        })
        .collect()
}

/// Termwise bound on `|form|` with every coordinate in `|base_r| + R` and
/// every slack in `[-2, 2]`.
fn interval_bound(vp: &VarietyProblem, form: &QuadraticForm) -> f64 {
    let d = vp.spec.dimension;
    let r = vp.spec.reach();
    let mut m = vec![SLACK_BOX; vp.n];
    for slot in vp.point_slots.iter().flatten() {
        for k in 0..d {
            m[slot + k] = vp.spec.base[k].abs() + r;
        }
    }
    let q: f64 = form
        .quadratic_terms()
        .map(|((i, j), v)| v.abs() * m[i] * m[j])
        .sum();
    let l: f64 = form.linear_terms().map(|(i, v)| v.abs() * m[i]).sum();
    q + l + form.constant.abs()
}

/// `B_j` for constraint `j` of `vp`.
pub fn constraint_bound(vp: &VarietyProblem, j: usize) -> f64 {
    let radii = point_radii(vp);
    let links = &vp.spec.links;
    let link_span = |i: usize| radii[i - 1] + radii[i];
    let (c, _) = vp.constraint(j);
    match &c.kind {
        ConstraintKind::Link(i) => link_span(*i).powi(2) + links[i - 1].powi(2),
        ConstraintKind::Angle(0) => {
            let slack = &vp.slacks[0];
            (link_span(1) / links[0] + 1.0).powi(2) + SLACK_BOX.powi(2) + slack.bound
        }
        ConstraintKind::Angle(i) => {
            let bound = vp
                .slacks
                .iter()
                .find(|s| s.joint == *i)
                .map(|s| s.bound)
                .unwrap_or(4.0);
            let dz = link_span(*i) / links[i - 1] + link_span(i + 1) / links[*i];
            dz.powi(2) + SLACK_BOX.powi(2) + bound
        }
        _ => interval_bound(vp, &c.form),
    }
}

pub fn normalize(vp: &VarietyProblem) -> Result<NormalizedConstraintSet> {
    let mut bounds = Vec::with_capacity(vp.num_constraints());
    let mut items = Vec::new();
    for j in 0..vp.num_constraints() {
        let b = constraint_bound(vp, j);
        if !b.is_finite() || b <= 0.0 {
            return Err(CoreError::Internal(format!(
                "constraint {j} has unusable bound {b}"
            )));
        }
        bounds.push(b);
        let (c, is_eq) = vp.constraint(j);
        if is_eq {
            items.push(NormalizedConstraint {
                source: j,
                sign: 1.0,
                form: c.form.scaled(1.0 / b),
            });
            items.push(NormalizedConstraint {
                source: j,
                sign: -1.0,
                form: c.form.scaled(-1.0 / b),
            });
        } else {
            items.push(NormalizedConstraint {
                source: j,
                sign: -1.0,
                form: c.form.scaled(-1.0 / b),
            });
        }
    }
    Ok(NormalizedConstraintSet { bounds, items })
}

/// One product `prod_j g_j^{a_j} (1 - g_j)^{b_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Multiplier {
    pub block: usize,
    /// Normalized item indices with multiplicity whose factor is `g`.
    pub alpha: Vec<usize>,
    /// Normalized item indices with multiplicity whose factor is `1 - g`.
    pub beta: Vec<usize>,
    pub poly: Poly,
}

fn binomial(n: usize, k: usize) -> u128 {
    let mut r: u128 = 1;
    for i in 0..k as u128 {
        r = r * (n as u128 - i) / (i + 1);
    }
    r
}

/// Number of `(alpha, beta)` pairs with `|alpha| + |beta| <= d` over `m` items.
pub fn multiplier_count(m: usize, d: usize) -> u128 {
    binomial(2 * m + d, d)
}

/// Multisets of size `<= d` over `0..n`, in lexicographic order.
fn multisets(n: usize, d: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..d {
        let mut next = Vec::new();
        for m in &frontier {
            let start = m.last().copied().unwrap_or(0);
            for f in start..n {
                let mut e: Vec<usize> = m.clone();
                e.push(f);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Affine change of variables `y = shift + scale * z` used inside the SDP,
/// with the objective divided by `objective`. Coordinates are centred on the
/// base and divided by the reach so that every moment is of order one.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub objective: f64,
}

impl VariableScaling {
    pub fn identity(n: usize) -> Self {
        VariableScaling {
            shift: vec![0.0; n],
            scale: vec![1.0; n],
            objective: 1.0,
        }
    }

    pub fn for_problem(vp: &VarietyProblem) -> Self {
        let mut sc = Self::identity(vp.n);
        let r = vp.spec.reach();
        for slot in vp.point_slots.iter().flatten() {
            for k in 0..vp.spec.dimension {
                sc.shift[slot + k] = vp.spec.base[k];
                sc.scale[slot + k] = r;
            }
        }
        sc.objective = r * r;
        sc
    }

    pub fn to_scaled(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, c))| (v - s) / c)
            .collect()
    }

    pub fn to_original(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, c))| s + c * v)
            .collect()
    }

    fn apply(&self, p: &Poly) -> Poly {
        p.substitute(&self.shift, &self.scale)
    }
}

/// The products `h_{d, alpha beta}` for every block, the empty product first.
pub fn build_multipliers(
    ncs: &NormalizedConstraintSet,
    part: &Partition,
    d: usize,
) -> Result<Vec<Vec<Multiplier>>> {
    let n = ncs.items.first().map_or(0, |it| it.form.n);
    build_scaled_multipliers(ncs, part, d, &VariableScaling::identity(n))
}

/// As [`build_multipliers`], with polynomials in the scaled variables.
fn build_scaled_multipliers(
    ncs: &NormalizedConstraintSet,
    part: &Partition,
    d: usize,
    scaling: &VariableScaling,
) -> Result<Vec<Vec<Multiplier>>> {
    if d == 0 {
        return Err(CoreError::Precondition(
            "multiplier degree d must be >= 1".into(),
        ));
    }
    let total: u128 = part
        .blocks
        .iter()
        .map(|b| multiplier_count(ncs.items_for(&b.constraints).len(), d))
        .sum();
    if total > MAX_MULTIPLIERS as u128 {
        return Err(CoreError::Capacity {
            count: usize::try_from(total).unwrap_or(usize::MAX),
        });
    }
    let mut out = Vec::with_capacity(part.p());
    for (l, block) in part.blocks.iter().enumerate() {
        let items = ncs.items_for(&block.constraints);
        let count = multiplier_count(items.len(), d);
        let g: Vec<Poly> = items
            .iter()
            .map(|&k| scaling.apply(&Poly::from_form(&ncs.items[k].form)))
            .collect();
        let one_minus: Vec<Poly> = g
            .iter()
            .map(|p| {
                let mut q = Poly::constant(1.0);
                q.add_scaled(p, -1.0);
                q
            })
            .collect();
        // Factor 2a is g_a, factor 2a + 1 is 1 - g_a.
        let mut list = Vec::with_capacity(count as usize);
        for ms in multisets(2 * items.len(), d) {
            let mut poly = Poly::constant(1.0);
            let mut alpha = Vec::new();
            let mut beta = Vec::new();
            for f in ms {
                let a = f / 2;
                if f % 2 == 0 {
                    poly = poly.mul(&g[a]);
                    alpha.push(items[a]);
                } else {
                    poly = poly.mul(&one_minus[a]);
                    beta.push(items[a]);
                }
            }
            list.push(Multiplier {
                block: l,
                alpha,
                beta,
                poly,
            });
        }
        out.push(list);
    }
    Ok(out)
}

/// The assembled relaxation and the bookkeeping needed to read it back.
#[derive(Debug, Clone)]
pub struct BsosProgram {
    pub d: usize,
    pub sdp: SdpProblem,
    /// Monomial of each equality row, in row order (graded lex).
    pub monomials: Vec<Monomial>,
    /// Variables of each Gram block; basis is `[1, y_{vars}]`.
    pub bases: Vec<Vec<usize>>,
    /// Products in the scaled variables.
    pub multipliers: Vec<Multiplier>,
    /// Index of the nonnegative block holding `lambda`.
    pub lp_block: usize,
    /// The scaled objective `f / scaling.objective` in the scaled variables
    /// and its constant term.
    pub objective: Poly,
    pub f0: f64,
    pub scaling: VariableScaling,
}

impl BsosProgram {
    /// `t` implied by the SOS-side solution, in the units of `f`.
    pub fn lower_bound(&self, sol: &SdpSolution) -> f64 {
        self.scaling.objective * (self.f0 - sol.primal_objective)
    }

    /// `f - t - sum lambda h - sum sigma_l` at `y` for an SDP solution, in the
    /// scaled units; zero when the coefficient identity holds.
    pub fn identity_residual(&self, sol: &SdpSolution, y: &[f64]) -> f64 {
        let y = &self.scaling.to_scaled(y)[..];
        let mut v = self.objective.evaluate(y) - (self.f0 - sol.primal_objective);
        let lam = sol.primal[self.lp_block].as_vector().expect("LP block");
        for (k, m) in self.multipliers.iter().enumerate() {
            v -= lam[k] * m.poly.evaluate(y);
        }
        for (l, vars) in self.bases.iter().enumerate() {
            let g = sol.primal[l].as_matrix().expect("PSD block");
            let mut basis = vec![1.0];
            basis.extend(vars.iter().map(|&i| y[i]));
            for a in 0..basis.len() {
                for b in 0..basis.len() {
                    v -= basis[a] * g[(a, b)] * basis[b];
                }
            }
        }
        v
    }
}

/// Builds the SDP. Requires a reference (objective) and a partition passing
/// every RIP bullet.
pub fn assemble(
    vp: &VarietyProblem,
    part: &Partition,
    ncs: &NormalizedConstraintSet,
    d: usize,
) -> Result<BsosProgram> {
    if vp.reference.is_none() {
        return Err(CoreError::Precondition("reference point not set".into()));
    }
    let rip = verify_rip(part, vp);
    if !rip.passed() {
        return Err(CoreError::Precondition(format!(
            "partition fails the running intersection property: {rip:?}"
        )));
    }
    let scaling = VariableScaling::for_problem(vp);
    let mults: Vec<Multiplier> = build_scaled_multipliers(ncs, part, d, &scaling)?
        .into_iter()
        .flatten()
        .collect();
    let mut objective = Poly::zero();
    objective.add_scaled(
        &scaling.apply(&Poly::from_form(&vp.objective)),
        1.0 / scaling.objective,
    );
    let p = part.p();
    let lp_block = p;
    let mut kinds: Vec<BlockKind> = part
        .blocks
        .iter()
        .map(|b| BlockKind::Psd(b.vars.len() + 1))
        .collect();
    kinds.push(BlockKind::Lp(mults.len()));

    let mut rows: std::collections::BTreeMap<Monomial, BlockSparse> = Default::default();
    let mut cost = BlockSparse::new();
    for (l, b) in part.blocks.iter().enumerate() {
        let basis: Vec<Monomial> = std::iter::once(Monomial::one())
            .chain(b.vars.iter().map(|&v| Monomial::var(v)))
            .collect();
        for a in 0..basis.len() {
            for c in a..basis.len() {
                let m = basis[a].mul(&basis[c]);
                if m.is_one() {
                    cost.push(l, 0, 0, 1.0);
                } else {
                    rows.entry(m).or_default().push(l, a, c, 1.0);
                }
            }
        }
    }
    for (k, m) in mults.iter().enumerate() {
        for (mono, &c) in &m.poly.terms {
            if mono.is_one() {
                cost.push(lp_block, k, k, c);
            } else {
                rows.entry(mono.clone())
                    .or_default()
                    .push(lp_block, k, k, c);
            }
        }
    }
    for mono in objective.terms.keys() {
        if !mono.is_one() && !rows.contains_key(mono) {
            return Err(CoreError::Internal(format!(
                "objective monomial {mono:?} is not covered by any block"
            )));
        }
    }
    let mut sdp = SdpProblem::new(kinds);
    cost.compress();
    sdp.objective = cost;
    let mut monomials = Vec::with_capacity(rows.len());
    for (mono, mut a) in rows {
        a.compress();
        let rhs = objective.coeff(&mono);
        if a.is_empty() {
            if rhs != 0.0 {
                return Err(CoreError::Internal(format!(
                    "monomial {mono:?} has no unknowns"
                )));
            }
            continue;
        }
        sdp.add_constraint(a, rhs);
        monomials.push(mono);
    }
    sdp.validate()?;
    Ok(BsosProgram {
        d,
        sdp,
        monomials,
        bases: part.blocks.iter().map(|b| b.vars.clone()).collect(),
        multipliers: mults,
        lp_block,
        f0: objective.coeff(&Monomial::one()),
        objective,
        scaling,
    })
}

/// Sizes of an assembled program, for logs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProgramSize {
    pub rows: usize,
    pub psd_blocks: usize,
    pub max_block: usize,
    pub multipliers: usize,
}

impl BsosProgram {
    pub fn size(&self) -> ProgramSize {
        ProgramSize {
            rows: self.monomials.len(),
            psd_blocks: self.bases.len(),
            max_block: self.bases.iter().map(|b| b.len() + 1).max().unwrap_or(0),
            multipliers: self.multipliers.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{sample_feasible, ChainSpec, Goal};
    use crate::partition::build_partition;
    use crate::qcqp::{build_variety, Reference};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sosik_sdp::{solve, SdpStatus, SolverOptions};
    use std::f64::consts::PI;

    fn two_link(limit: f64) -> ChainSpec {
        ChainSpec::new(
            2,
            vec![1.0, 1.0],
            vec![limit],
            vec![0.0, 0.0],
            Goal::Position {
                x_n: vec![1.0, 1.0],
            },
        )
        .unwrap()
    }

    fn program(vp: &VarietyProblem, d: usize) -> BsosProgram {
        let part = build_partition(vp).unwrap();
        let ncs = normalize(vp).unwrap();
        assemble(vp, &part, &ncs, d).unwrap()
    }

    fn solve_t(vp: &VarietyProblem, d: usize) -> (f64, SdpSolution, BsosProgram) {
        let prog = program(vp, d);
        let sol = solve(&prog.sdp, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal, "d = {d}");
        (prog.lower_bound(&sol), sol, prog)
    }

    #[test]
    fn interior_link_bound_is_seventeen() {
        // R = 2 and the interior link of length 1 joins two free points.
        let spec = ChainSpec::new(
            2,
            vec![0.5, 1.0, 0.5],
            vec![PI, PI],
            vec![0.0, 0.0],
            Goal::Position {
                x_n: vec![1.5, 0.5],
            },
        )
        .unwrap();
        let vp = build_variety(&spec).unwrap();
        let j = vp
            .equalities
            .iter()
            .position(|c| c.kind == ConstraintKind::Link(2))
            .unwrap();
        let ncs = normalize(&vp).unwrap();
        assert_eq!(ncs.bounds[j], 17.0);
        // Link 1 starts at the base, so only one endpoint ranges over R.
        let j = vp
            .equalities
            .iter()
            .position(|c| c.kind == ConstraintKind::Link(1))
            .unwrap();
        assert_eq!(ncs.bounds[j], 4.0 + 0.25);
    }

    #[test]
    fn violated_link_leaves_k() {
        let spec = ChainSpec::bundled_planar_10dof();
        let cfg = sample_feasible(&spec, 4);
        let spec = spec.retarget(&cfg);
        let vp = build_variety(&spec).unwrap();
        let ncs = normalize(&vp).unwrap();
        let mut y = vp.augment(&cfg).unwrap();
        for it in &ncs.items {
            assert!(it.form.evaluate(&y).abs() <= 1e-9 / ncs.bounds[it.source]);
        }
        assert!(ncs.contains(&y, 1e-12));
        // Stretch link 2 (x1 fixed, move x2 radially) by 0.5 in squared length.
        let s2 = vp.point_slots[2].unwrap();
        let s1 = vp.point_slots[1].unwrap();
        let dir = [y[s2] - y[s1], y[s2 + 1] - y[s1 + 1]];
        let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        let new_len = (len * len + 0.5).sqrt();
        y[s2] = y[s1] + dir[0] * new_len / len;
        y[s2 + 1] = y[s1 + 1] + dir[1] * new_len / len;
        let j = vp
            .equalities
            .iter()
            .position(|c| c.kind == ConstraintKind::Link(2))
            .unwrap();
        let pair: Vec<f64> = ncs
            .items
            .iter()
            .filter(|it| it.source == j)
            .map(|it| it.form.evaluate(&y))
            .collect();
        assert!((pair[0] - 0.5 / ncs.bounds[j]).abs() < 1e-12);
        assert!((pair[1] + 0.5 / ncs.bounds[j]).abs() < 1e-12);
        assert!(!ncs.contains(&y, 0.0));
    }

    #[test]
    fn normalized_values_bounded_on_reach_box() {
        let mut spec = ChainSpec::bundled_planar_10dof();
        spec.base_axis = Some(vec![1.0, 0.0]);
        let spec = spec.truncated(6).unwrap();
        let vp = build_variety(&spec).unwrap();
        let ncs = normalize(&vp).unwrap();
        let r = spec.reach();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let mut y = vec![0.0; vp.n];
            for slot in vp.point_slots.iter().flatten() {
                // Uniform in the disc of radius R around the base.
                let rad = r * rng.gen::<f64>().sqrt();
                let th = rng.gen_range(0.0..2.0 * PI);
                y[*slot] = spec.base[0] + rad * th.cos();
                y[slot + 1] = spec.base[1] + rad * th.sin();
            }
            for s in &vp.slacks {
                y[s.slot] = rng.gen_range(-2.0..2.0);
            }
            for it in &ncs.items {
                assert!(it.form.evaluate(&y).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn multiplier_counts() {
        assert_eq!(multiplier_count(3, 1), 7);
        assert_eq!(multiplier_count(2, 2), 15);
        // Enumerate directly: all (alpha, beta) in N^4 with |.| <= 2.
        let mut direct = 0;
        for a in 0..=2usize {
            for b in 0..=2usize {
                for c in 0..=2usize {
                    for e in 0..=2usize {
                        if a + b + c + e <= 2 {
                            direct += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(direct, 15);
        assert_eq!(multisets(4, 2).len(), 15);
    }

    #[test]
    fn first_order_products_per_block() {
        let vp = build_variety(&two_link(PI)).unwrap();
        let part = build_partition(&vp).unwrap();
        let ncs = normalize(&vp).unwrap();
        let mults = build_multipliers(&ncs, &part, 1).unwrap();
        let total: usize = mults.iter().map(Vec::len).sum();
        let items: usize = part
            .blocks
            .iter()
            .map(|b| ncs.items_for(&b.constraints).len())
            .sum();
        assert_eq!(total, part.p() + 2 * items);
        for list in &mults {
            assert_eq!(list[0].poly, Poly::constant(1.0));
        }
    }

    #[test]
    fn product_with_complement_vanishes_on_boundary() {
        let vp = build_variety(&two_link(PI)).unwrap();
        let part = build_partition(&vp).unwrap();
        let ncs = normalize(&vp).unwrap();
        let mults = build_multipliers(&ncs, &part, 2).unwrap();
        let item = 0;
        let m = mults
            .iter()
            .flatten()
            .find(|m| m.alpha == vec![item] && m.beta == vec![item])
            .unwrap();
        // Points where g_item is 0: any point of the first circle.
        let y = [0.6, 0.8];
        assert!(ncs.items[item].form.evaluate(&y).abs() < 1e-15);
        assert!(m.poly.evaluate(&y).abs() < 1e-15);
    }

    #[test]
    fn capacity_is_enforced() {
        let vp = build_variety(&ChainSpec::bundled_planar_10dof()).unwrap();
        let part = build_partition(&vp).unwrap();
        let ncs = normalize(&vp).unwrap();
        assert!(matches!(
            build_multipliers(&ncs, &part, 8),
            Err(CoreError::Capacity { .. })
        ));
    }

    #[test]
    fn box_constrained_scalar() {
        // min (y - 1)^2 over 0 <= y <= 1, as a one-variable chain-free check
        // of the assembly: reuse a two-link problem's machinery by hand.
        let spec = two_link(PI);
        let vp = build_variety(&spec).unwrap();
        let mut vp = vp
            .set_reference(&Reference::Vector(vec![1.0, 0.0]))
            .unwrap();
        // Replace the constraints with y0 (1 - y0) >= 0, i.e. y0^2 - y0 <= 0.
        let mut g = QuadraticForm::zeros(2);
        g.add_quad(0, 0, 1.0);
        g.add_linear(0, -1.0);
        vp.equalities.clear();
        vp.inequalities = vec![crate::qcqp::Constraint {
            kind: ConstraintKind::GoalBall,
            form: g,
            points: vec![1],
        }];
        // Objective (y0 - 1)^2 + y1^2 with y1 unconstrained: optimum 0.
        let (t, _, _) = solve_t(&vp, 1);
        assert!(t.abs() < 1e-7, "t = {t}");
    }

    #[test]
    fn feasible_reference_gives_zero() {
        let spec = two_link(PI);
        let vp = build_variety(&spec).unwrap();
        let vp = vp
            .set_reference(&Reference::Vector(vec![1.0, 0.0]))
            .unwrap();
        let (t, _, _) = solve_t(&vp, 1);
        assert!(t.abs() < 1e-7, "t = {t}");
    }

    #[test]
    fn two_point_variety_distance() {
        // Feasible set {(1,0), (0,1)}; the relaxation value must equal the
        // squared distance to the nearer point.
        let spec = two_link(PI);
        let vp = build_variety(&spec).unwrap();
        let xi = [0.9, 0.1];
        let vp = vp.set_reference(&Reference::Vector(xi.to_vec())).unwrap();
        let (t, sol, prog) = solve_t(&vp, 1);
        let d1 = (xi[0] - 1.0).powi(2) + xi[1].powi(2);
        let d2 = xi[0].powi(2) + (xi[1] - 1.0).powi(2);
        assert!((t - d1.min(d2)).abs() < 1e-7, "t = {t}");
        // Coefficient identity at random points.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let y = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            assert!(prog.identity_residual(&sol, &y).abs() < 1e-7);
        }
    }

    #[test]
    fn requires_reference_and_rip() {
        let vp = build_variety(&two_link(PI / 2.0)).unwrap();
        let part = build_partition(&vp).unwrap();
        let ncs = normalize(&vp).unwrap();
        assert!(assemble(&vp, &part, &ncs, 1).is_err());
        let vp = vp.set_reference(&Reference::Vector(vec![0.0; 3])).unwrap();
        let mut broken = part.clone();
        broken.blocks.clear();
        assert!(assemble(&vp, &broken, &ncs, 1).is_err());
    }

    #[test]
    fn lower_bound_and_higher_degree() {
        let spec = ChainSpec::new(
            2,
            vec![1.0, 0.8, 0.6],
            vec![PI / 2.0, PI / 2.0],
            vec![0.0, 0.0],
            Goal::Position { x_n: vec![0.0; 2] },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..4 {
            let cfg = sample_feasible(&spec, 100 + trial);
            let s = spec.retarget(&cfg);
            let vp = build_variety(&s).unwrap();
            let xi: Vec<f64> = (0..vp.n).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let vp = vp.set_reference(&Reference::Vector(xi)).unwrap();
            let (t1, sol1, prog1) = solve_t(&vp, 1);
            let (t2, _, _) = solve_t(&vp, 2);
            let y = vp.augment(&cfg).unwrap();
            assert!(t1 <= vp.objective_value(&y) + 1e-6);
            assert!(t2 >= t1 - 1e-8, "t2 = {t2}, t1 = {t1}");
            assert!(prog1.identity_residual(&sol1, &y).abs() < 1e-6);
        }
    }

    #[test]
    fn rows_follow_graded_lex_order() {
        let vp = build_variety(&ChainSpec::bundled_planar_10dof()).unwrap();
        let vp = vp.set_reference(&Reference::Vector(vec![0.5; 27])).unwrap();
        let prog = program(&vp, 1);
        assert!(prog.monomials.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(prog.size().max_block, 8);
        for (row, mono) in prog.sdp.constraints.iter().zip(&prog.monomials) {
            // Each row lives in blocks whose variables contain the monomial.
            for e in &row.entries {
                if e.block < prog.bases.len() {
                    let vars = &prog.bases[e.block];
                    assert!(mono.factors().all(|v| vars.contains(&v)));
                }
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]

        #[test]
        fn relaxation_bounds_every_feasible_cost(seed in 0u64..100_000, d in 2usize..=3) {
            let spec = ChainSpec::new(
                d,
                vec![1.0, 0.7, 0.5],
                vec![PI / 2.0, PI / 2.0],
                vec![0.0; d],
                Goal::Position { x_n: vec![0.0; d] },
            )
            .unwrap();
            let cfg = sample_feasible(&spec, seed);
            let vp = build_variety(&spec.retarget(&cfg)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let xi: Vec<f64> = (0..vp.n).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let vp = vp.set_reference(&Reference::Vector(xi)).unwrap();
            let (t, sol, prog) = solve_t(&vp, 1);
            let y = vp.augment(&cfg).unwrap();
            proptest::prop_assert!(t <= vp.objective_value(&y) + 1e-6);
            proptest::prop_assert!(prog.identity_residual(&sol, &y).abs() < 1e-6);
        }
    }
}
