//! Serial chains of spherical joints: specs, forward kinematics, angle
//! recovery, feasibility reports and sampling.
//!
//! A chain has points `x_0..x_N` joined by rigid links of length `l_i`. The
//! angle at joint `i` (1 <= i < N) is the angle between link `i` and link
//! `i+1`. Planar chains are parameterized by `N` angles: the first is the
//! heading of link 1 relative to the mount axis, the rest are relative bends.
//! Spatial chains use `N` pairs `(azimuth, polar)` measured in a frame that is
//! parallel-transported along the chain.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{add_scaled, cross3, dist, dot, norm, norm2, scale, sub, wrap_angle};

/// Tolerance on `| |x_N - x_{N-1}| - l_N |` for pose goals.
const POSE_LINK_TOL: f64 = 1e-9;
/// Relative singular-value threshold for the collinearity test.
const COLLINEAR_RATIO: f64 = 1e-8;

/// What the end of the chain must reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Goal {
    /// End point `x_N` fixed.
    Position {
        #[serde(rename = "xN")]
        x_n: Vec<f64>,
    },
    /// Both `x_{N-1}` and `x_N` fixed, pinning the last link's orientation.
    Pose {
        #[serde(rename = "xNm1")]
        x_nm1: Vec<f64>,
        #[serde(rename = "xN")]
        x_n: Vec<f64>,
    },
    /// `x_N` free within a ball around a point.
    Ball {
        #[serde(rename = "xN")]
        center: Vec<f64>,
        radius: f64,
    },
}

impl Goal {
    pub fn end_point(&self) -> &[f64] {
        match self {
            Goal::Position { x_n } | Goal::Pose { x_n, .. } => x_n,
            Goal::Ball { center, .. } => center,
        }
    }
}

/// Geometry of one IK instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    /// 2 (planar) or 3 (spatial).
    pub dimension: usize,
    /// Link lengths `l_1..l_N`.
    pub links: Vec<f64>,
    /// Symmetric joint limits in radians; `pi` leaves a joint unconstrained.
    /// Length `N-1` lists the inter-link joints 1..N-1. Length `N` prepends a
    /// mount limit on link 1 against `base_axis`, enforced only when
    /// `base_axis` is given.
    pub angle_limits: Vec<f64>,
    pub base: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_axis: Option<Vec<f64>>,
    pub goal: Goal,
}

impl ChainSpec {
    pub fn new(
        dimension: usize,
        links: Vec<f64>,
        angle_limits: Vec<f64>,
        base: Vec<f64>,
        goal: Goal,
    ) -> Result<Self> {
        let spec = ChainSpec {
            dimension,
            links,
            angle_limits,
            base,
            base_axis: None,
            goal,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ChainSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// The 10-DoF planar chain shipped in `fixtures/supp_table1.json`.
    pub fn bundled_planar_10dof() -> Self {
        Self::from_json(include_str!("../../../fixtures/supp_table1.json"))
            .expect("bundled fixture is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidSpec(m));
        let d = self.dimension;
        if d != 2 && d != 3 {
            return bad(format!("dimension must be 2 or 3, got {d}"));
        }
        let n = self.links.len();
        if n < 2 {
            return bad(format!("need at least 2 links, got {n}"));
        }
        if self.links.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return bad("link lengths must be positive and finite".into());
        }
        if self.angle_limits.len() != n - 1 && self.angle_limits.len() != n {
            return bad(format!(
                "expected {} or {} angle limits, got {}",
                n - 1,
                n,
                self.angle_limits.len()
            ));
        }
        if self
            .angle_limits
            .iter()
            .any(|a| !a.is_finite() || *a <= 0.0 || *a > PI)
        {
            return bad("angle limits must lie in (0, pi]".into());
        }
        let check_point = |p: &[f64], what: &str| -> Result<()> {
            if p.len() != d {
                return Err(CoreError::InvalidSpec(format!(
                    "{what} has {} coordinates, expected {d}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::InvalidSpec(format!("{what} is not finite")));
            }
            Ok(())
        };
        check_point(&self.base, "base")?;
        if let Some(axis) = &self.base_axis {
            check_point(axis, "base_axis")?;
            if norm(axis) < 1e-12 {
                return bad("base_axis must be nonzero".into());
            }
        }
        match &self.goal {
            Goal::Position { x_n } => check_point(x_n, "goal xN")?,
            Goal::Pose { x_nm1, x_n } => {
                check_point(x_n, "goal xN")?;
                check_point(x_nm1, "goal xNm1")?;
                if n < 3 {
                    return bad("pose goals need at least 3 links".into());
                }
                let gap = (dist(x_n, x_nm1) - self.links[n - 1]).abs();
                if gap > POSE_LINK_TOL {
                    return bad(format!(
                        "pose goal points are {} apart, last link is {}",
                        dist(x_n, x_nm1),
                        self.links[n - 1]
                    ));
                }
            }
            Goal::Ball { center, radius } => {
                check_point(center, "goal xN")?;
                if !radius.is_finite() || *radius < 0.0 {
                    return bad("ball radius must be nonnegative".into());
                }
            }
        }
        Ok(())
    }

    /// Number of links `N`.
    pub fn dof(&self) -> usize {
        self.links.len()
    }

    /// Total length `R = sum l_i`.
    pub fn reach(&self) -> f64 {
        self.links.iter().sum()
    }

    /// Limit at inter-link joint `i` (1 <= i < N); `pi` when unconstrained.
    pub fn joint_limit(&self, i: usize) -> f64 {
        assert!(i >= 1 && i < self.dof(), "joint index {i} out of range");
        if self.angle_limits.len() == self.dof() {
            self.angle_limits[i]
        } else {
            self.angle_limits[i - 1]
        }
    }

    /// Limit at joint `i` when it is a real constraint (`alpha < pi`).
    pub fn limited_joint(&self, i: usize) -> Option<f64> {
        let a = self.joint_limit(i);
        (a < PI).then_some(a)
    }

    /// Mount limit on link 1 against the base axis, if imposed.
    pub fn mount_limit(&self) -> Option<f64> {
        if self.base_axis.is_none() || self.angle_limits.len() != self.dof() {
            return None;
        }
        let a = self.angle_limits[0];
        (a < PI).then_some(a)
    }

    /// Unit reference direction for link 1 (`e_1` by default).
    pub fn mount_axis(&self) -> Vec<f64> {
        match &self.base_axis {
            Some(a) => scale(a, 1.0 / norm(a)),
            None => {
                let mut e = vec![0.0; self.dimension];
                e[0] = 1.0;
                e
            }
        }
    }

    /// Position of point `i` when the spec pins it.
    pub fn fixed_point(&self, i: usize) -> Option<&[f64]> {
        let n = self.dof();
        if i == 0 {
            return Some(&self.base);
        }
        match &self.goal {
            Goal::Position { x_n } if i == n => Some(x_n),
            Goal::Pose { x_n, .. } if i == n => Some(x_n),
            Goal::Pose { x_nm1, .. } if i == n - 1 => Some(x_nm1),
            _ => None,
        }
    }

    /// Copy with a different goal.
    pub fn with_goal(&self, goal: Goal) -> Result<Self> {
        let mut s = self.clone();
        s.goal = goal;
        s.validate()?;
        Ok(s)
    }

    /// Copy whose goal of the same kind is satisfied by `cfg`.
    pub fn retarget(&self, cfg: &Configuration) -> Self {
        let n = self.dof();
        let goal = match &self.goal {
            Goal::Position { .. } => Goal::Position {
                x_n: cfg.points[n].clone(),
            },
            Goal::Pose { .. } => Goal::Pose {
                x_nm1: cfg.points[n - 1].clone(),
                x_n: cfg.points[n].clone(),
            },
            Goal::Ball { radius, .. } => Goal::Ball {
                center: cfg.points[n].clone(),
                radius: *radius,
            },
        };
        let mut s = self.clone();
        s.goal = goal;
        s
    }

    /// The first `k` links with their limits; the goal is kept as given and
    /// should normally be replaced afterwards.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k < 2 || k > self.dof() {
            return Err(CoreError::InvalidSpec(format!(
                "cannot truncate {} links to {k}",
                self.dof()
            )));
        }
        let mut s = self.clone();
        s.links.truncate(k);
        let keep = if self.angle_limits.len() == self.dof() {
            k
        } else {
            k - 1
        };
        s.angle_limits.truncate(keep);
        if let Goal::Pose { x_n, .. } = &self.goal {
            s.goal = Goal::Position { x_n: x_n.clone() };
        }
        Ok(s)
    }

    /// Number of angle parameters expected by [`forward_kinematics`].
    pub fn angle_count(&self) -> usize {
        if self.dimension == 2 {
            self.dof()
        } else {
            2 * self.dof()
        }
    }
}

/// Joint positions `x_0..x_N` (base first, end point last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub points: Vec<Vec<f64>>,
}

impl Configuration {
    pub fn end_point(&self) -> &[f64] {
        self.points.last().expect("configuration has points")
    }

    /// Largest pointwise distance to another configuration.
    pub fn max_distance(&self, other: &Configuration) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| dist(a, b))
            .fold(0.0, f64::max)
    }
}

/// Orthonormal frame carried along a spatial chain; `t` is the current link
/// direction.
#[derive(Debug, Clone)]
struct Frame {
    t: [f64; 3],
    n: [f64; 3],
    b: [f64; 3],
}

impl Frame {
    fn initial(axis: &[f64]) -> Frame {
        let t = [axis[0], axis[1], axis[2]];
        // Gram-Schmidt on the coordinate axis least aligned with t.
        let k = (0..3)
            .min_by(|&i, &j| t[i].abs().partial_cmp(&t[j].abs()).unwrap())
            .unwrap();
        let mut e = [0.0; 3];
        e[k] = 1.0;
        let proj = dot(&e, &t);
        let raw = add_scaled(&e, -proj, &t);
        let nn = norm(&raw);
        let n = [raw[0] / nn, raw[1] / nn, raw[2] / nn];
        let b = cross3(&t, &n);
        Frame { t, n, b }
    }

    /// Bends by `polar` towards azimuth `az` and transports the normals.
    fn advance(&self, az: f64, polar: f64) -> Frame {
        let (sa, ca) = az.sin_cos();
        let (sp, cp) = polar.sin_cos();
        let mut t = [0.0; 3];
        let mut n = [0.0; 3];
        let mut b = [0.0; 3];
        for k in 0..3 {
            let m = ca * self.n[k] + sa * self.b[k];
            let p = -sa * self.n[k] + ca * self.b[k];
            t[k] = cp * self.t[k] + sp * m;
            let m2 = -sp * self.t[k] + cp * m;
            n[k] = ca * m2 - sa * p;
            b[k] = sa * m2 + ca * p;
        }
        Frame { t, n, b }
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::NonFinite)
    }
}

/// Positions produced by joint angles; see the module docs for the layout of
/// `angles`.
pub fn forward_kinematics(spec: &ChainSpec, angles: &[f64]) -> Result<Configuration> {
    if angles.len() != spec.angle_count() {
        return Err(CoreError::DimensionMismatch {
            expected: spec.angle_count(),
            got: angles.len(),
        });
    }
    check_finite(angles)?;
    let axis = spec.mount_axis();
    let mut points = Vec::with_capacity(spec.dof() + 1);
    points.push(spec.base.clone());
    if spec.dimension == 2 {
        let mut heading = axis[1].atan2(axis[0]);
        for (i, &l) in spec.links.iter().enumerate() {
            heading += angles[i];
            let dir = [heading.cos(), heading.sin()];
            let next = add_scaled(&points[i], l, &dir);
            points.push(next);
        }
    } else {
        let mut frame = Frame::initial(&axis);
        for (i, &l) in spec.links.iter().enumerate() {
            frame = frame.advance(angles[2 * i], angles[2 * i + 1]);
            let next = add_scaled(&points[i], l, &frame.t);
            points.push(next);
        }
    }
    Ok(Configuration { points })
}

fn check_shape(spec: &ChainSpec, cfg: &Configuration) -> Result<()> {
    if cfg.points.len() != spec.dof() + 1 {
        return Err(CoreError::DimensionMismatch {
            expected: spec.dof() + 1,
            got: cfg.points.len(),
        });
    }
    for p in &cfg.points {
        if p.len() != spec.dimension {
            return Err(CoreError::DimensionMismatch {
                expected: spec.dimension,
                got: p.len(),
            });
        }
    }
    Ok(())
}

/// Joint angles reproducing `cfg` under [`forward_kinematics`].
pub fn angles_from_positions(spec: &ChainSpec, cfg: &Configuration) -> Result<Vec<f64>> {
    check_shape(spec, cfg)?;
    let mut dirs = Vec::with_capacity(spec.dof());
    for i in 1..=spec.dof() {
        let v = sub(&cfg.points[i], &cfg.points[i - 1]);
        let len = norm(&v);
        if len <= 1e-12 || !len.is_finite() {
            return Err(CoreError::DegenerateDirection(i - 1, i));
        }
        dirs.push(scale(&v, 1.0 / len));
    }
    let axis = spec.mount_axis();
    if spec.dimension == 2 {
        let mut angles = Vec::with_capacity(spec.dof());
        let mut prev_heading = axis[1].atan2(axis[0]);
        for d in &dirs {
            let heading = d[1].atan2(d[0]);
            angles.push(wrap_angle(heading - prev_heading));
            prev_heading = heading;
        }
        Ok(angles)
    } else {
        let mut angles = Vec::with_capacity(2 * spec.dof());
        let mut frame = Frame::initial(&axis);
        for d in &dirs {
            let c = cross3(&frame.t, d);
            let polar = norm(&c).atan2(dot(&frame.t, d));
            let az = if polar.sin().abs() < 1e-14 {
                0.0
            } else {
                dot(d, &frame.b).atan2(dot(d, &frame.n))
            };
            angles.push(az);
            angles.push(polar);
            frame = frame.advance(az, polar);
        }
        Ok(angles)
    }
}

/// Constraint residuals of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    /// `|x_i - x_{i-1}|^2 - l_i^2` for i = 1..N.
    pub link_residuals: Vec<f64>,
    /// `|z_{i+1} - z_i|^2 - 2(1 - cos alpha_i)` for joints i = 1..N-1.
    pub angle_residuals: Vec<f64>,
    /// Same form for link 1 against the mount axis, when limited.
    pub mount_residual: Option<f64>,
    /// Squared distances to pinned anchors (base first, then goal points);
    /// for ball goals the excess `max(0, |x_N - c|^2 - r^2)`.
    pub anchor_residuals: Vec<f64>,
    pub max_violation: f64,
    pub feasible: bool,
}

/// `2(1 - cos alpha)`, the bound on `|z_{i+1} - z_i|^2`.
pub fn angle_bound(alpha: f64) -> f64 {
    2.0 * (1.0 - alpha.cos())
}

fn unit_link(spec: &ChainSpec, cfg: &Configuration, i: usize) -> Vec<f64> {
    scale(
        &sub(&cfg.points[i], &cfg.points[i - 1]),
        1.0 / spec.links[i - 1],
    )
}

pub fn check_feasible(
    spec: &ChainSpec,
    cfg: &Configuration,
    tol_eq: f64,
    tol_ineq: f64,
) -> Result<FeasibilityReport> {
    check_shape(spec, cfg)?;
    let n = spec.dof();
    let link_residuals: Vec<f64> = (1..=n)
        .map(|i| norm2(&sub(&cfg.points[i], &cfg.points[i - 1])) - spec.links[i - 1].powi(2))
        .collect();
    let angle_residuals: Vec<f64> = (1..n)
        .map(|i| {
            let dz = sub(&unit_link(spec, cfg, i + 1), &unit_link(spec, cfg, i));
            norm2(&dz) - angle_bound(spec.joint_limit(i))
        })
        .collect();
    let mount_residual = spec.mount_limit().map(|a| {
        let dz = sub(&unit_link(spec, cfg, 1), &spec.mount_axis());
        norm2(&dz) - angle_bound(a)
    });
    let mut anchor_residuals = vec![norm2(&sub(&cfg.points[0], &spec.base))];
    match &spec.goal {
        Goal::Position { x_n } => anchor_residuals.push(norm2(&sub(&cfg.points[n], x_n))),
        Goal::Pose { x_nm1, x_n } => {
            anchor_residuals.push(norm2(&sub(&cfg.points[n - 1], x_nm1)));
            anchor_residuals.push(norm2(&sub(&cfg.points[n], x_n)));
        }
        Goal::Ball { center, radius } => {
            anchor_residuals.push((norm2(&sub(&cfg.points[n], center)) - radius * radius).max(0.0))
        }
    }
    let eq_viol = link_residuals
        .iter()
        .chain(&anchor_residuals)
        .map(|r| r.abs())
        .fold(0.0, f64::max);
    let ineq_viol = angle_residuals
        .iter()
        .chain(mount_residual.iter())
        .map(|r| r.max(0.0))
        .fold(0.0, f64::max);
    let bad = [eq_viol, ineq_viol].iter().any(|v| !v.is_finite());
    Ok(FeasibilityReport {
        max_violation: if bad {
            f64::INFINITY
        } else {
            eq_viol.max(ineq_viol)
        },
        feasible: !bad && eq_viol <= tol_eq && ineq_viol <= tol_ineq,
        link_residuals,
        angle_residuals,
        mount_residual,
        anchor_residuals,
    })
}

/// Random joint angles within the limits of `spec`.
pub fn sample_angles<R: Rng>(spec: &ChainSpec, rng: &mut R) -> Vec<f64> {
    let n = spec.dof();
    let mut out = Vec::with_capacity(spec.angle_count());
    for i in 1..=n {
        let limit = if i == 1 {
            spec.mount_limit()
        } else {
            spec.limited_joint(i - 1)
        };
        if spec.dimension == 2 {
            let a = limit.unwrap_or(PI);
            out.push(rng.gen_range(-a..=a));
        } else {
            out.push(rng.gen_range(-PI..PI));
            let polar = match limit {
                Some(a) => rng.gen_range(-a..=a).abs(),
                // Uniform on the sphere for the unconstrained first link.
                None if i == 1 => rng.gen_range(-1.0f64..=1.0).acos(),
                None => rng.gen_range(-PI..=PI).abs(),
            };
            out.push(polar);
        }
    }
    out
}

/// Seeded random configuration within all joint limits; its end point
/// generally differs from the spec's goal.
pub fn sample_feasible(spec: &ChainSpec, seed: u64) -> Configuration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles = sample_angles(spec, &mut rng);
    forward_kinematics(spec, &angles).expect("sampled angles have the right shape")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PremiseReport {
    pub collinear: bool,
    /// Joints whose angle residual is within `tol_active` of the limit
    /// (0 denotes the mount limit).
    pub active_limits: Vec<usize>,
    pub premise_holds: bool,
    /// Numeric rank of the equality-constraint Jacobian at the point with
    /// consistent slacks.
    pub jacobian_rank: Option<usize>,
}

fn numeric_rank(m: &DMatrix<f64>, rel: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel * max).count()
}

/// Whether the points all lie on one line.
pub fn is_collinear(cfg: &Configuration) -> bool {
    let k = cfg.points.len();
    let d = cfg.points[0].len();
    let mut mean = vec![0.0; d];
    for p in &cfg.points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / k as f64;
        }
    }
    let m = DMatrix::from_fn(k, d, |i, j| cfg.points[i][j] - mean[j]);
    let mut sv: Vec<f64> = m
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv[0] == 0.0 || sv.get(1).copied().unwrap_or(0.0) <= COLLINEAR_RATIO * sv[0]
}

/// Checks the stability premise: not fully extended and no joint at its limit.
pub fn exactness_premise(
    spec: &ChainSpec,
    cfg: &Configuration,
    tol_active: f64,
) -> Result<PremiseReport> {
    let report = check_feasible(spec, cfg, 1e-6, 1e-6)?;
    if !report.feasible {
        return Err(CoreError::Precondition(format!(
            "configuration violates constraints by {:.3e}",
            report.max_violation
        )));
    }
    let collinear = is_collinear(cfg);
    let mut active_limits = Vec::new();
    if let Some(r) = report.mount_residual {
        if r >= -tol_active {
            active_limits.push(0);
        }
    }
    for i in 1..spec.dof() {
        if spec.limited_joint(i).is_some() && report.angle_residuals[i - 1] >= -tol_active {
            active_limits.push(i);
        }
    }
    let vp = crate::qcqp::build_variety(spec)?;
    let y = vp.augment(cfg)?;
    let rows: Vec<Vec<f64>> = vp.equalities.iter().map(|c| c.form.gradient(&y)).collect();
    let jac = DMatrix::from_fn(rows.len(), vp.n, |i, j| rows[i][j]);
    Ok(PremiseReport {
        premise_holds: !collinear && active_limits.is_empty(),
        collinear,
        active_limits,
        jacobian_rank: Some(numeric_rank(&jac, 1e-8)),
    })
}
