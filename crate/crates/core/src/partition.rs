//! Variable and constraint blocks over overlapping joints, and a checker for
//! the running intersection property.
//!
//! With any angle constraint, block `l` (1 <= l < N) holds the free
//! coordinates of `x_{l-1}, x_l, x_{l+1}` and the slack of joint `l` (block 1
//! also takes the mount slack). Without angle constraints, block `l`
//! (1 <= l <= N) holds the free coordinates of `x_{l-1}, x_l`. Empty blocks and
//! blocks contained in another are dropped.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::qcqp::{QuadraticForm, VarietyProblem};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Block {
    /// Sorted variable indices `I_l`.
    pub vars: Vec<usize>,
    /// Constraint indices `J_l` in the combined order (equalities first).
    pub constraints: Vec<usize>,
    /// Chain points whose coordinates the block was built from.
    pub points: Vec<usize>,
    /// Joints whose slacks the block holds.
    pub slacks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Partition {
    pub blocks: Vec<Block>,
    /// Block that owns each variable's objective term.
    pub objective_owner: Vec<usize>,
    pub n_star: usize,
}

impl Partition {
    pub fn p(&self) -> usize {
        self.blocks.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.vars.len()).collect()
    }

    /// The share `f^l` of the objective owned by block `l`: squares and linear
    /// terms follow their variable's owner, a cross term `y_i y_j` the owner of
    /// `i`, and the constant goes to the first block.
    pub fn block_objective(&self, vp: &VarietyProblem, l: usize) -> QuadraticForm {
        let owner = |i: usize| self.objective_owner.get(i).copied();
        let mut f = QuadraticForm::zeros(vp.n);
        for ((i, j), v) in vp.objective.quadratic_terms() {
            if owner(i) == Some(l) {
                f.add_quad(i, j, v);
            }
        }
        for (i, v) in vp.objective.linear_terms() {
            if owner(i) == Some(l) {
                f.add_linear(i, v);
            }
        }
        if l == 0 {
            f.constant = vp.objective.constant;
        }
        f.finalize();
        f
    }

    /// One line per block: point and slack names, then constraint indices.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (l, b) in self.blocks.iter().enumerate() {
            let pts: Vec<String> = b.points.iter().map(|p| format!("x{p}")).collect();
            let sl: Vec<String> = b.slacks.iter().map(|j| format!("s{j}")).collect();
            let _ = writeln!(
                s,
                "block {}: {} {} | n_l={} J={:?}",
                l + 1,
                pts.join(" "),
                sl.join(" "),
                b.vars.len(),
                b.constraints
            );
        }
        s
    }
}

pub fn build_partition(vp: &VarietyProblem) -> Result<Partition> {
    let d = vp.spec.dimension;
    let n_links = vp.spec.dof();
    let coords = |i: usize| -> Vec<usize> {
        match vp.point_slots[i] {
            Some(s) => (s..s + d).collect(),
            None => Vec::new(),
        }
    };
    let mut raw: Vec<Block> = Vec::new();
    if vp.slacks.is_empty() {
        for l in 1..=n_links {
            let points = vec![l - 1, l];
            let vars: Vec<usize> = points.iter().flat_map(|&p| coords(p)).collect();
            raw.push(Block {
                vars,
                constraints: Vec::new(),
                points,
                slacks: Vec::new(),
            });
        }
    } else {
        for l in 1..n_links {
            let points = vec![l - 1, l, l + 1];
            let mut vars: Vec<usize> = points.iter().flat_map(|&p| coords(p)).collect();
            let mut slacks = Vec::new();
            if l == 1 {
                if let Some(s) = vp.slack_slot(0) {
                    vars.push(s);
                    slacks.push(0);
                }
            }
            if let Some(s) = vp.slack_slot(l) {
                vars.push(s);
                slacks.push(l);
            }
            raw.push(Block {
                vars,
                constraints: Vec::new(),
                points,
                slacks,
            });
        }
    }
    for b in &mut raw {
        b.vars.sort_unstable();
        b.vars.dedup();
    }

    // Drop empty blocks and blocks contained in another one (keeping the
    // first of identical blocks).
    let sets: Vec<BTreeSet<usize>> = raw
        .iter()
        .map(|b| b.vars.iter().copied().collect())
        .collect();
    let mut keep = vec![true; raw.len()];
    for a in 0..raw.len() {
        if sets[a].is_empty() {
            keep[a] = false;
            continue;
        }
        for b in 0..raw.len() {
            if a == b || !keep[b] {
                continue;
            }
            let contained = sets[a].is_subset(&sets[b]);
            let strictly = contained && sets[a].len() < sets[b].len();
            if strictly || (contained && b < a) {
                keep[a] = false;
                break;
            }
        }
    }
    let mut blocks: Vec<Block> = raw
        .into_iter()
        .zip(keep)
        .filter_map(|(b, k)| k.then_some(b))
        .collect();

    for j in 0..vp.num_constraints() {
        let vars = vp.constraint(j).0.form.variables();
        let home = blocks
            .iter()
            .position(|b| vars.iter().all(|v| b.vars.binary_search(v).is_ok()))
            .ok_or_else(|| {
                CoreError::Internal(format!("constraint {j} fits no block of the partition"))
            })?;
        blocks[home].constraints.push(j);
    }
    let mut objective_owner = vec![usize::MAX; vp.n];
    for (v, owner) in objective_owner.iter_mut().enumerate() {
        if let Some(l) = blocks.iter().position(|b| b.vars.binary_search(&v).is_ok()) {
            *owner = l;
        }
    }
    let n_star = blocks.iter().map(|b| b.vars.len()).max().unwrap_or(0);
    Ok(Partition {
        blocks,
        objective_owner,
        n_star,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BulletCheck {
    pub holds: bool,
    /// First block (0-based) or index at which the bullet fails.
    pub first_offending: Option<usize>,
}

impl BulletCheck {
    fn from_first(first: Option<usize>) -> Self {
        Self {
            holds: first.is_none(),
            first_offending: first,
        }
    }
}

/// The five running-intersection bullets, checked independently.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RipReport {
    /// `f = sum f^l` with each `f^l` using only `I_l`.
    pub objective_split: BulletCheck,
    /// Every constraint in `J_l` uses only `I_l`.
    pub constraints_local: BulletCheck,
    /// The `I_l` cover all variables.
    pub variables_covered: BulletCheck,
    /// The `J_l` cover all constraints.
    pub constraints_covered: BulletCheck,
    /// For each `l`, `I_{l+1}` meets earlier blocks inside a single `I_s`, `s <= l`.
    pub running_intersection: BulletCheck,
}

impl RipReport {
    pub fn passed(&self) -> bool {
        self.bullets().iter().all(|b| b.holds)
    }

    pub fn bullets(&self) -> [&BulletCheck; 5] {
        [
            &self.objective_split,
            &self.constraints_local,
            &self.variables_covered,
            &self.constraints_covered,
            &self.running_intersection,
        ]
    }
}

pub fn verify_rip(part: &Partition, vp: &VarietyProblem) -> RipReport {
    let sets: Vec<BTreeSet<usize>> = part
        .blocks
        .iter()
        .map(|b| b.vars.iter().copied().collect())
        .collect();
    let in_block = |l: usize, v: usize| sets.get(l).is_some_and(|s| s.contains(&v));

    // Objective terms: squares and linear terms go to the owner of their
    // variable; a cross term y_i y_j to the owner of i.
    let mut split_fail = None;
    for ((i, j), _) in vp.objective.quadratic_terms() {
        let l = part.objective_owner.get(i).copied().unwrap_or(usize::MAX);
        if !(in_block(l, i) && in_block(l, j)) {
            split_fail = Some(i);
            break;
        }
    }
    if split_fail.is_none() {
        for (i, _) in vp.objective.linear_terms() {
            let l = part.objective_owner.get(i).copied().unwrap_or(usize::MAX);
            if !in_block(l, i) {
                split_fail = Some(i);
                break;
            }
        }
    }

    let local_fail = part.blocks.iter().position(|b| {
        b.constraints.iter().any(|&j| {
            j >= vp.num_constraints()
                || !vp
                    .constraint(j)
                    .0
                    .form
                    .variables()
                    .iter()
                    .all(|v| b.vars.binary_search(v).is_ok())
        })
    });

    let covered: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    let var_fail = (0..vp.n).find(|v| !covered.contains(v));
    let jcov: BTreeSet<usize> = part
        .blocks
        .iter()
        .flat_map(|b| b.constraints.iter().copied())
        .collect();
    let con_fail = (0..vp.num_constraints()).find(|j| !jcov.contains(j));

    let mut rip_fail = None;
    let mut union: BTreeSet<usize> = BTreeSet::new();
    for l in 0..sets.len() {
        if l > 0 {
            let inter: BTreeSet<usize> = sets[l].intersection(&union).copied().collect();
            if !(0..l).any(|s| inter.is_subset(&sets[s])) {
                rip_fail = Some(l);
                break;
            }
        }
        union.extend(sets[l].iter().copied());
    }

    RipReport {
        objective_split: BulletCheck::from_first(split_fail),
        constraints_local: BulletCheck::from_first(local_fail),
        variables_covered: BulletCheck::from_first(var_fail),
        constraints_covered: BulletCheck::from_first(con_fail),
        running_intersection: BulletCheck::from_first(rip_fail),
    }
}
