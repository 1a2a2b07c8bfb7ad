//! The IK variety as a sparse QCQP: link equalities, slack-augmented angle
//! equalities, optional distance bounds, and the nearest-point objective.
//!
//! Pinned points (the base and goal anchors) are substituted as constants, so
//! only free joint coordinates and slacks are variables. Variables are laid out
//! along the chain: the mount slack (if any), then for each point `x_i` its
//! coordinates followed by the slack of joint `i`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::chain::{angle_bound, ChainSpec, Configuration, Goal};
use crate::error::{CoreError, Result};
use crate::geom::{norm2, scale, sub};

/// `y'Qy + b'y + c` over `n` variables.
///
/// Quadratic terms are stored as polynomial coefficients of `y_i y_j` with
/// `i <= j`, so `Q_ii` equals the stored value and `Q_ij = Q_ji` is half of it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub n: usize,
    quad: BTreeMap<(usize, usize), f64>,
    lin: BTreeMap<usize, f64>,
    pub constant: f64,
}

impl QuadraticForm {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            quad: BTreeMap::new(),
            lin: BTreeMap::new(),
            constant: 0.0,
        }
    }

    /// Adds `v * y_i * y_j`.
    pub fn add_quad(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.n && j < self.n, "variable index out of range");
        let key = if i <= j { (i, j) } else { (j, i) };
        *self.quad.entry(key).or_insert(0.0) += v;
    }

    pub fn add_linear(&mut self, i: usize, v: f64) {
        assert!(i < self.n, "variable index out of range");
        *self.lin.entry(i).or_insert(0.0) += v;
    }

    /// Drops coefficients that cancelled to exactly zero.
    pub fn finalize(&mut self) {
        self.quad.retain(|_, v| *v != 0.0);
        self.lin.retain(|_, v| *v != 0.0);
    }

    /// Entry `Q_ij` of the symmetric matrix.
    pub fn q(&self, i: usize, j: usize) -> f64 {
        let key = if i <= j { (i, j) } else { (j, i) };
        let v = self.quad.get(&key).copied().unwrap_or(0.0);
        if i == j {
            v
        } else {
            0.5 * v
        }
    }

    pub fn b(&self, i: usize) -> f64 {
        self.lin.get(&i).copied().unwrap_or(0.0)
    }

    /// Polynomial coefficients of `y_i y_j`, `i <= j`.
    pub fn quadratic_terms(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.quad.iter().map(|(&k, &v)| (k, v))
    }

    pub fn linear_terms(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.lin.iter().map(|(&k, &v)| (k, v))
    }

    pub fn evaluate(&self, y: &[f64]) -> f64 {
        assert_eq!(y.len(), self.n, "point has wrong length");
        let q: f64 = self.quad.iter().map(|(&(i, j), v)| v * y[i] * y[j]).sum();
        let l: f64 = self.lin.iter().map(|(&i, v)| v * y[i]).sum();
        q + l + self.constant
    }

    /// `2Qy + b`.
    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for (&(i, j), &v) in &self.quad {
            if i == j {
                g[i] += 2.0 * v * y[i];
            } else {
                g[i] += v * y[j];
                g[j] += v * y[i];
            }
        }
        for (&i, &v) in &self.lin {
            g[i] += v;
        }
        g
    }

    pub fn variables(&self) -> BTreeSet<usize> {
        let mut s: BTreeSet<usize> = self.lin.keys().copied().collect();
        for &(i, j) in self.quad.keys() {
            s.insert(i);
            s.insert(j);
        }
        s
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            n: self.n,
            quad: self.quad.iter().map(|(&k, &v)| (k, s * v)).collect(),
            lin: self.lin.iter().map(|(&k, &v)| (k, s * v)).collect(),
            constant: s * self.constant,
        }
    }

    /// Adds `weight * (sum_k c_k y_k + c0)^2`.
    fn add_square(&mut self, terms: &[(usize, f64)], c0: f64, weight: f64) {
        for (a, &(i, ci)) in terms.iter().enumerate() {
            self.add_quad(i, i, weight * ci * ci);
            for &(j, cj) in &terms[a + 1..] {
                self.add_quad(i, j, 2.0 * weight * ci * cj);
            }
            self.add_linear(i, 2.0 * weight * ci * c0);
        }
        self.constant += weight * c0 * c0;
    }

    /// One line: `q i,j=v ...; b i=v ...; c=v` with values in `{:e}`.
    pub fn dump(&self) -> String {
        let mut s = String::from("q");
        for (&(i, j), v) in &self.quad {
            let _ = write!(s, " {i},{j}={v:e}");
        }
        s.push_str("; b");
        for (&i, v) in &self.lin {
            let _ = write!(s, " {i}={v:e}");
        }
        let _ = write!(s, "; c={:e}", self.constant);
        s
    }
}

/// Other end of a distance bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DistanceTarget {
    Point(usize),
    Anchor(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ConstraintKind {
    /// `|x_i - x_{i-1}|^2 - l_i^2 = 0`.
    Link(usize),
    /// Slack-augmented limit at joint `i`; 0 is the mount limit.
    Angle(usize),
    /// `|x_N - c|^2 - r^2 <= 0`.
    GoalBall,
    /// `|x_i - t|^2 - D^2 <= 0`.
    DistanceUpper {
        point: usize,
        target: DistanceTarget,
    },
    /// `D^2 - |x_i - t|^2 <= 0`.
    DistanceLower {
        point: usize,
        target: DistanceTarget,
    },
    /// `|x_i - t|^2 - D^2 = 0`.
    DistanceEqual {
        point: usize,
        target: DistanceTarget,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub form: QuadraticForm,
    /// Chain points the form couples (fixed ones included).
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Slack {
    /// Joint index; 0 is the mount limit.
    pub joint: usize,
    pub slot: usize,
    /// `2(1 - cos alpha)`.
    pub bound: f64,
}

/// The QCQP `min |y - xi|^2` over the variety.
#[derive(Debug, Clone, PartialEq)]
pub struct VarietyProblem {
    pub spec: ChainSpec,
    pub n: usize,
    /// First coordinate slot of each point `x_0..x_N`, `None` when pinned.
    pub point_slots: Vec<Option<usize>>,
    pub slacks: Vec<Slack>,
    /// Forms that must vanish.
    pub equalities: Vec<Constraint>,
    /// Forms that must be `<= 0`.
    pub inequalities: Vec<Constraint>,
    pub objective: QuadraticForm,
    pub reference: Option<Vec<f64>>,
}

/// Source of the reference point `xi`.
#[derive(Debug, Clone)]
pub enum Reference {
    Vector(Vec<f64>),
    /// Free-point positions with consistent slacks.
    Configuration(Configuration),
}

/// A point in a constraint: either a variable block or a constant.
enum PointRef<'a> {
    Free(usize),
    Fixed(&'a [f64]),
}

impl VarietyProblem {
    fn point_ref(&self, i: usize) -> PointRef<'_> {
        match self.point_slots[i] {
            Some(s) => PointRef::Free(s),
            None => PointRef::Fixed(self.fixed(i)),
        }
    }

    fn fixed(&self, i: usize) -> &[f64] {
        self.spec
            .fixed_point(i)
            .expect("pinned point has a position")
    }

    /// `weight * |sum_k c_k p_k + shift|^2` as a form.
    fn norm_sq_form(&self, terms: &[(f64, usize)], shift: &[f64]) -> QuadraticForm {
        let d = self.spec.dimension;
        let mut f = QuadraticForm::zeros(self.n);
        for r in 0..d {
            let mut lin = Vec::new();
            let mut c0 = shift.get(r).copied().unwrap_or(0.0);
            for &(c, p) in terms {
                match self.point_ref(p) {
                    PointRef::Free(s) => lin.push((s + r, c)),
                    PointRef::Fixed(x) => c0 += c * x[r],
                }
            }
            f.add_square(&lin, c0, 1.0);
        }
        f
    }

    pub fn slack_slot(&self, joint: usize) -> Option<usize> {
        self.slacks
            .iter()
            .find(|s| s.joint == joint)
            .map(|s| s.slot)
    }

    pub fn num_constraints(&self) -> usize {
        self.equalities.len() + self.inequalities.len()
    }

    /// Constraint `j` in the combined order (equalities first) and whether
    /// it is an equality.
    pub fn constraint(&self, j: usize) -> (&Constraint, bool) {
        if j < self.equalities.len() {
            (&self.equalities[j], true)
        } else {
            (&self.inequalities[j - self.equalities.len()], false)
        }
    }

    /// Human-readable variable names (`x3[1]`, `s2`).
    pub fn variable_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.n];
        for (i, slot) in self.point_slots.iter().enumerate() {
            if let Some(s) = slot {
                for r in 0..self.spec.dimension {
                    names[s + r] = format!("x{i}[{r}]");
                }
            }
        }
        for s in &self.slacks {
            names[s.slot] = format!("s{}", s.joint);
        }
        names
    }

    /// Point of `R^n` for a configuration, with slacks
    /// `sqrt(max(0, 2(1 - cos alpha) - |dz|^2))`.
    pub fn augment(&self, cfg: &Configuration) -> Result<Vec<f64>> {
        let d = self.spec.dimension;
        if cfg.points.len() != self.spec.dof() + 1 {
            return Err(CoreError::DimensionMismatch {
                expected: self.spec.dof() + 1,
                got: cfg.points.len(),
            });
        }
        let mut y = vec![0.0; self.n];
        for (i, slot) in self.point_slots.iter().enumerate() {
            if let Some(s) = slot {
                if cfg.points[i].len() != d {
                    return Err(CoreError::DimensionMismatch {
                        expected: d,
                        got: cfg.points[i].len(),
                    });
                }
                y[*s..*s + d].copy_from_slice(&cfg.points[i]);
            }
        }
        let links = &self.spec.links;
        let z = |i: usize| scale(&sub(&cfg.points[i], &cfg.points[i - 1]), 1.0 / links[i - 1]);
        for s in &self.slacks {
            let dz = if s.joint == 0 {
                sub(&z(1), &self.spec.mount_axis())
            } else {
                sub(&z(s.joint + 1), &z(s.joint))
            };
            y[s.slot] = (s.bound - norm2(&dz)).max(0.0).sqrt();
        }
        Ok(y)
    }

    /// Configuration for a point of `R^n`; pinned points come from the spec.
    pub fn configuration(&self, y: &[f64]) -> Configuration {
        let d = self.spec.dimension;
        let points = self
            .point_slots
            .iter()
            .enumerate()
            .map(|(i, slot)| match slot {
                Some(s) => y[*s..*s + d].to_vec(),
                None => self.fixed(i).to_vec(),
            })
            .collect();
        Configuration { points }
    }

    /// Copy with reference `xi` and objective `|y - xi|^2`.
    pub fn set_reference(&self, reference: &Reference) -> Result<Self> {
        let xi = match reference {
            Reference::Vector(v) => {
                if v.len() != self.n {
                    return Err(CoreError::DimensionMismatch {
                        expected: self.n,
                        got: v.len(),
                    });
                }
                v.clone()
            }
            Reference::Configuration(cfg) => self.augment(cfg)?,
        };
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite);
        }
        let mut objective = QuadraticForm::zeros(self.n);
        for (i, &x) in xi.iter().enumerate() {
            objective.add_square(&[(i, 1.0)], -x, 1.0);
        }
        let mut out = self.clone();
        out.objective = objective;
        out.reference = Some(xi);
        Ok(out)
    }

    /// Copy with `D_min <= |x_i - target| <= D_max` appended. Equal bounds give
    /// one equality; `D_min = 0` omits the vacuous lower bound.
    pub fn add_distance_bound(
        &self,
        point: usize,
        target: DistanceTarget,
        d_min: f64,
        d_max: f64,
    ) -> Result<Self> {
        if d_min.is_nan() || d_min < 0.0 || !d_max.is_finite() || d_min > d_max {
            return Err(CoreError::InvalidBound {
                min: d_min,
                max: d_max,
            });
        }
        let np = self.spec.dof() + 1;
        if point >= np {
            return Err(CoreError::Precondition(format!(
                "point {point} out of range"
            )));
        }
        let (sq, points) = match &target {
            DistanceTarget::Point(j) => {
                if *j >= np || *j == point {
                    return Err(CoreError::Precondition(format!("invalid target point {j}")));
                }
                (
                    self.norm_sq_form(&[(1.0, point), (-1.0, *j)], &[]),
                    vec![point, *j],
                )
            }
            DistanceTarget::Anchor(a) => {
                if a.len() != self.spec.dimension {
                    return Err(CoreError::DimensionMismatch {
                        expected: self.spec.dimension,
                        got: a.len(),
                    });
                }
                (
                    self.norm_sq_form(&[(1.0, point)], &scale(a, -1.0)),
                    vec![point],
                )
            }
        };
        let mut out = self.clone();
        let with_const = |c: f64, s: f64| {
            let mut f = sq.scaled(s);
            f.constant += c;
            f.finalize();
            f
        };
        if d_min == d_max {
            out.equalities.push(Constraint {
                kind: ConstraintKind::DistanceEqual { point, target },
                form: with_const(-d_max * d_max, 1.0),
                points,
            });
            return Ok(out);
        }
        out.inequalities.push(Constraint {
            kind: ConstraintKind::DistanceUpper {
                point,
                target: target.clone(),
            },
            form: with_const(-d_max * d_max, 1.0),
            points: points.clone(),
        });
        if d_min > 0.0 {
            out.inequalities.push(Constraint {
                kind: ConstraintKind::DistanceLower { point, target },
                form: with_const(d_min * d_min, -1.0),
                points,
            });
        }
        Ok(out)
    }

    pub fn objective_value(&self, y: &[f64]) -> f64 {
        self.objective.evaluate(y)
    }

    /// Largest `|equality|` and positive part of any inequality at `y`.
    pub fn max_violation(&self, y: &[f64]) -> f64 {
        let eq = self
            .equalities
            .iter()
            .map(|c| c.form.evaluate(y).abs())
            .fold(0.0, f64::max);
        self.inequalities
            .iter()
            .map(|c| c.form.evaluate(y).max(0.0))
            .fold(eq, f64::max)
    }

    /// One form per line, for golden tests and debugging.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n={}", self.n);
        for c in &self.equalities {
            let _ = writeln!(s, "eq {:?}: {}", c.kind, c.form.dump());
        }
        for c in &self.inequalities {
            let _ = writeln!(s, "le {:?}: {}", c.kind, c.form.dump());
        }
        let _ = writeln!(s, "obj: {}", self.objective.dump());
        s
    }
}

/// Builds the variety of `spec` (no reference yet; objective is zero).
pub fn build_variety(spec: &ChainSpec) -> Result<VarietyProblem> {
    spec.validate()?;
    let n_links = spec.dof();
    let d = spec.dimension;
    let free = |i: usize| -> bool { i > 0 && spec.fixed_point(i).is_none() };
    let mut point_slots = vec![None; n_links + 1];
    let mut slacks = Vec::new();
    let mut n = 0;
    if let Some(a) = spec.mount_limit() {
        slacks.push(Slack {
            joint: 0,
            slot: n,
            bound: angle_bound(a),
        });
        n += 1;
    }
    for (i, slot) in point_slots.iter_mut().enumerate().skip(1) {
        if free(i) {
            *slot = Some(n);
            n += d;
        }
        if i < n_links {
            if let Some(a) = spec.limited_joint(i) {
                slacks.push(Slack {
                    joint: i,
                    slot: n,
                    bound: angle_bound(a),
                });
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(CoreError::InvalidSpec(
            "problem has no free variables".into(),
        ));
    }
    let mut vp = VarietyProblem {
        spec: spec.clone(),
        n,
        point_slots,
        slacks,
        equalities: Vec::new(),
        inequalities: Vec::new(),
        objective: QuadraticForm::zeros(n),
        reference: None,
    };

    let mut eqs = Vec::new();
    for i in 1..=n_links {
        let mut f = vp.norm_sq_form(&[(1.0, i), (-1.0, i - 1)], &[]);
        f.constant -= spec.links[i - 1].powi(2);
        f.finalize();
        if f.variables().is_empty() {
            continue;
        }
        eqs.push(Constraint {
            kind: ConstraintKind::Link(i),
            form: f,
            points: vec![i - 1, i],
        });
    }
    let axis = spec.mount_axis();
    for s in &vp.slacks {
        let (mut f, points) = if s.joint == 0 {
            let a = 1.0 / spec.links[0];
            (
                vp.norm_sq_form(&[(a, 1), (-a, 0)], &scale(&axis, -1.0)),
                vec![0, 1],
            )
        } else {
            let i = s.joint;
            let a = 1.0 / spec.links[i - 1];
            let b = 1.0 / spec.links[i];
            (
                vp.norm_sq_form(&[(b, i + 1), (-(a + b), i), (a, i - 1)], &[]),
                vec![i - 1, i, i + 1],
            )
        };
        f.add_quad(s.slot, s.slot, 1.0);
        f.constant -= s.bound;
        f.finalize();
        eqs.push(Constraint {
            kind: ConstraintKind::Angle(s.joint),
            form: f,
            points,
        });
    }
    vp.equalities = eqs;
    if let Goal::Ball { center, radius } = &spec.goal {
        let mut f = vp.norm_sq_form(&[(1.0, n_links)], &scale(center, -1.0));
        f.constant -= radius * radius;
        f.finalize();
        vp.inequalities.push(Constraint {
            kind: ConstraintKind::GoalBall,
            form: f,
            points: vec![n_links],
        });
    }
    Ok(vp)
}
