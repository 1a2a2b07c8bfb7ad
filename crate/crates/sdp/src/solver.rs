//! Homogeneous self-dual interior-point method with Nesterov-Todd scaling and
//! Mehrotra predictor-corrector steps.
//!
//! Pairs of LP columns that are exact negatives of each other (same column up
//! to sign, opposite cost) are merged into one free variable before solving.
//! Such pairs arise when an equality is written as two opposed inequalities;
//! left alone they make the dual strictly infeasible in the interior sense and
//! the primal optimal set unbounded.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::blocks::{add_sparse, sparse_dot, BlockValue};
use crate::error::SdpError;
use crate::problem::{BlockKind, SdpProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    /// No `X` in the cone satisfies the equalities; a dual ray is attached.
    PrimalInfeasible,
    /// The dual is infeasible (primal unbounded below); a primal ray is attached.
    DualInfeasible,
    IterationLimit,
    NumericalError,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Bound on absolute primal/dual residuals, the relative gap and
    /// `<X, S> / (1 + |pobj|)` at `Optimal`.
    pub tol: f64,
    /// Tighter target pursued after `tol` is met; if progress then stalls the
    /// best iterate within `tol` is returned.
    pub refine_tol: f64,
    /// Bound on the normalized residual of an infeasibility ray.
    pub infeasibility_tol: f64,
    pub max_iter: usize,
    /// Fraction-to-boundary factor for step lengths.
    pub step_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            refine_tol: 1e-11,
            infeasibility_tol: 1e-8,
            max_iter: 200,
            step_fraction: 0.98,
        }
    }
}

#[derive(Debug, Clone)]
pub enum InfeasibilityCertificate {
    /// `y` with `b'y = 1` and `S = -sum_i y_i A_i` in the cone.
    PrimalRay {
        y: Vec<f64>,
        slack: Vec<BlockValue>,
        /// `max |sum_i y_i A_i + S|`
        residual: f64,
    },
    /// `X` in the cone with `<C, X> = -1` and `A(X) = 0`.
    DualRay {
        x: Vec<BlockValue>,
        /// `max |A(X)|`
        residual: f64,
    },
}

impl InfeasibilityCertificate {
    /// Objective improvement along the ray; positive for a valid certificate.
    pub fn improvement(&self, problem: &SdpProblem) -> f64 {
        match self {
            InfeasibilityCertificate::PrimalRay { y, .. } => {
                y.iter().zip(&problem.rhs).map(|(a, b)| a * b).sum()
            }
            InfeasibilityCertificate::DualRay { x, .. } => -sparse_dot(&problem.objective, x),
        }
    }

    pub fn residual(&self) -> f64 {
        match self {
            InfeasibilityCertificate::PrimalRay { residual, .. }
            | InfeasibilityCertificate::DualRay { residual, .. } => *residual,
        }
    }
}

/// Objectives and residuals of the normalized iterate `(x, y, s) / tau`.
#[derive(Debug, Clone, Copy)]
pub struct IterateLog {
    pub iteration: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub mu: f64,
    pub tau: f64,
    pub kappa: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// Primal blocks `X`.
    pub primal: Vec<BlockValue>,
    /// Dual multipliers `y`.
    pub dual: Vec<f64>,
    /// Dual slack blocks `S = C - sum_i y_i A_i`.
    pub dual_slack: Vec<BlockValue>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// `|pobj - dobj| / (1 + |pobj| + |dobj|)`
    pub gap: f64,
    /// `max |A(X) - b|`
    pub primal_residual: f64,
    /// `max |C - sum y_i A_i - S|`
    pub dual_residual: f64,
    pub iterations: usize,
    pub certificate: Option<InfeasibilityCertificate>,
    pub history: Vec<IterateLog>,
}

impl SdpSolution {
    /// `<X, S>` summed over blocks.
    pub fn complementarity(&self) -> f64 {
        self.primal
            .iter()
            .zip(&self.dual_slack)
            .map(|(x, s)| x.dot(s))
            .sum()
    }

    pub fn min_primal_eigenvalue(&self) -> f64 {
        self.primal
            .iter()
            .map(BlockValue::min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_dual_eigenvalue(&self) -> f64 {
        self.dual_slack
            .iter()
            .map(BlockValue::min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }
}

type SparseCol = Vec<(usize, f64)>;

struct PsdBlock {
    n: usize,
    global: usize,
    c: DMatrix<f64>,
    /// Constraint rows with a nonzero in this block, as dense symmetric matrices.
    rows: Vec<(usize, DMatrix<f64>)>,
}

struct Model {
    m: usize,
    b: DVector<f64>,
    psd: Vec<PsdBlock>,
    lp_cols: Vec<SparseCol>,
    lp_c: DVector<f64>,
    free_cols: Vec<SparseCol>,
    free_c: DVector<f64>,
    /// (global block, index) of each kept LP variable.
    lp_origin: Vec<(usize, usize)>,
    /// Positive and negative halves of each merged free variable.
    free_origin: Vec<((usize, usize), (usize, usize))>,
    /// Full column data of every original LP variable, for recovering slacks.
    all_lp: HashMap<(usize, usize), (SparseCol, f64)>,
    /// Orthogonal split of the row space by the free columns.
    free_basis: Option<FreeBasis>,
}

/// `A_f = Q1 diag(sigma) V'` (rank-revealing) with `Q2` spanning the rest of
/// the row space, so the KKT system reduces to an SPD system on `range(Q2)`.
/// Dependent free columns only enter through their least-norm combination.
struct FreeBasis {
    q1: DMatrix<f64>,
    q2: DMatrix<f64>,
    v: DMatrix<f64>,
    sigma: DVector<f64>,
}

impl FreeBasis {
    fn new(m: usize, cols: &[SparseCol]) -> Option<Self> {
        let nf = cols.len();
        if nf == 0 || nf > m {
            return None;
        }
        // Padding with zero columns makes the SVD return a square U.
        let mut a = DMatrix::<f64>::zeros(m, m);
        for (j, col) in cols.iter().enumerate() {
            for &(r, v) in col {
                a[(r, j)] += v;
            }
        }
        let svd = a.svd(true, true);
        let u = svd.u?;
        let vt = svd.v_t?;
        let smax = svd.singular_values.amax();
        let (range, rest): (Vec<usize>, Vec<usize>) =
            (0..m).partition(|&k| svd.singular_values[k] > 1e-10 * smax);
        if range.is_empty() || rest.is_empty() {
            return None;
        }
        let q1 = u.select_columns(range.iter());
        let q2 = u.select_columns(rest.iter());
        let v = vt
            .select_rows(range.iter())
            .transpose()
            .rows(0, nf)
            .into_owned();
        let sigma =
            DVector::from_iterator(range.len(), range.iter().map(|&k| svd.singular_values[k]));
        Some(FreeBasis { q1, q2, v, sigma })
    }
}

/// Cholesky factor, shifting the diagonal by `1e-14 * scale` only when the
/// plain factorization breaks down.
fn spd_factor(mut a: DMatrix<f64>, scale: f64) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Some(c);
    }
    for i in 0..a.nrows() {
        a[(i, i)] += 1e-14 * scale;
    }
    Cholesky::new(a)
}

fn canonical_bits(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

fn column_key(col: &SparseCol, c: f64, sign: f64) -> Vec<(usize, u64)> {
    let mut key: Vec<(usize, u64)> = col
        .iter()
        .map(|&(r, v)| (r, canonical_bits(sign * v)))
        .collect();
    key.push((usize::MAX, canonical_bits(sign * c)));
    key
}

impl Model {
    fn build(problem: &SdpProblem) -> Self {
        let m = problem.constraints.len();
        let mut psd_index = vec![usize::MAX; problem.blocks.len()];
        let mut psd = Vec::new();
        let mut lp_vars: Vec<(usize, usize)> = Vec::new();
        let mut lp_index: HashMap<(usize, usize), usize> = HashMap::new();
        for (k, kind) in problem.blocks.iter().enumerate() {
            match *kind {
                BlockKind::Psd(n) => {
                    psd_index[k] = psd.len();
                    psd.push(PsdBlock {
                        n,
                        global: k,
                        c: DMatrix::zeros(n, n),
                        rows: Vec::new(),
                    });
                }
                BlockKind::Lp(n) => {
                    for i in 0..n {
                        lp_index.insert((k, i), lp_vars.len());
                        lp_vars.push((k, i));
                    }
                }
            }
        }
        let mut cols: Vec<SparseCol> = vec![Vec::new(); lp_vars.len()];
        let mut costs = vec![0.0; lp_vars.len()];
        for e in &problem.objective.entries {
            match problem.blocks[e.block] {
                BlockKind::Psd(_) => {
                    let c = &mut psd[psd_index[e.block]].c;
                    c[(e.row, e.col)] += e.value;
                    if e.row != e.col {
                        c[(e.col, e.row)] += e.value;
                    }
                }
                BlockKind::Lp(_) => costs[lp_index[&(e.block, e.row)]] += e.value,
            }
        }
        for (r, a) in problem.constraints.iter().enumerate() {
            let mut dense: HashMap<usize, DMatrix<f64>> = HashMap::new();
            for e in &a.entries {
                match problem.blocks[e.block] {
                    BlockKind::Psd(n) => {
                        let d = dense
                            .entry(psd_index[e.block])
                            .or_insert_with(|| DMatrix::zeros(n, n));
                        d[(e.row, e.col)] += e.value;
                        if e.row != e.col {
                            d[(e.col, e.row)] += e.value;
                        }
                    }
                    BlockKind::Lp(_) => {
                        let j = lp_index[&(e.block, e.row)];
                        match cols[j].last_mut() {
                            Some(last) if last.0 == r => last.1 += e.value,
                            _ => cols[j].push((r, e.value)),
                        }
                    }
                }
            }
            let mut keys: Vec<usize> = dense.keys().copied().collect();
            keys.sort_unstable();
            for k in keys {
                let d = dense.remove(&k).unwrap();
                psd[k].rows.push((r, d));
            }
        }
        for col in &mut cols {
            col.retain(|&(_, v)| v != 0.0);
        }

        // Merge exactly opposed LP columns into free variables.
        let mut by_key: HashMap<Vec<(usize, u64)>, Vec<usize>> = HashMap::new();
        for (j, col) in cols.iter().enumerate() {
            if !col.is_empty() {
                by_key
                    .entry(column_key(col, costs[j], 1.0))
                    .or_default()
                    .push(j);
            }
        }
        let mut paired = vec![false; cols.len()];
        let mut pairs = Vec::new();
        for j in 0..cols.len() {
            if paired[j] || cols[j].is_empty() {
                continue;
            }
            let neg = column_key(&cols[j], costs[j], -1.0);
            if let Some(cands) = by_key.get_mut(&neg) {
                if let Some(pos) = cands.iter().position(|&k| !paired[k] && k != j) {
                    let k = cands.remove(pos);
                    paired[j] = true;
                    paired[k] = true;
                    pairs.push((j, k));
                }
            }
        }

        let mut all_lp = HashMap::new();
        for (j, &orig) in lp_vars.iter().enumerate() {
            all_lp.insert(orig, (cols[j].clone(), costs[j]));
        }
        let mut lp_cols = Vec::new();
        let mut lp_c = Vec::new();
        let mut lp_origin = Vec::new();
        for j in 0..cols.len() {
            if !paired[j] {
                lp_cols.push(cols[j].clone());
                lp_c.push(costs[j]);
                lp_origin.push(lp_vars[j]);
            }
        }
        let mut free_cols = Vec::new();
        let mut free_c = Vec::new();
        let mut free_origin = Vec::new();
        for &(j, k) in &pairs {
            free_cols.push(cols[j].clone());
            free_c.push(costs[j]);
            free_origin.push((lp_vars[j], lp_vars[k]));
        }

        let free_basis = FreeBasis::new(m, &free_cols);
        Model {
            m,
            b: DVector::from_vec(problem.rhs.clone()),
            psd,
            lp_cols,
            lp_c: DVector::from_vec(lp_c),
            free_cols,
            free_c: DVector::from_vec(free_c),
            lp_origin,
            free_basis,
            free_origin,
            all_lp,
        }
    }

    fn degree(&self) -> usize {
        self.psd.iter().map(|p| p.n).sum::<usize>() + self.lp_cols.len()
    }

    fn apply_a(&self, xs: &[DMatrix<f64>], xl: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for (blk, x) in self.psd.iter().zip(xs) {
            for (r, a) in &blk.rows {
                out[*r] += a.dot(x);
            }
        }
        for (col, v) in self.lp_cols.iter().zip(xl.iter()) {
            for &(r, a) in col {
                out[r] += a * v;
            }
        }
        out
    }

    fn apply_free(&self, xf: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for (col, v) in self.free_cols.iter().zip(xf.iter()) {
            for &(r, a) in col {
                out[r] += a * v;
            }
        }
        out
    }

    fn adjoint_psd(&self, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.psd
            .iter()
            .map(|blk| {
                let mut out = DMatrix::zeros(blk.n, blk.n);
                for (r, a) in &blk.rows {
                    out += a * y[*r];
                }
                out
            })
            .collect()
    }

    fn adjoint_cols(cols: &[SparseCol], y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            cols.len(),
            cols.iter()
                .map(|col| col.iter().map(|&(r, a)| a * y[r]).sum::<f64>()),
        )
    }

    fn cone_cost(&self, xs: &[DMatrix<f64>], xl: &DVector<f64>) -> f64 {
        self.psd
            .iter()
            .zip(xs)
            .map(|(b, x)| b.c.dot(x))
            .sum::<f64>()
            + self.lp_c.dot(xl)
    }
}

#[derive(Clone)]
struct State {
    xs: Vec<DMatrix<f64>>,
    ss: Vec<DMatrix<f64>>,
    xl: DVector<f64>,
    sl: DVector<f64>,
    xf: DVector<f64>,
    y: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct PsdScaling {
    g: DMatrix<f64>,
    w: DMatrix<f64>,
    lambda: DVector<f64>,
}

struct Scaling {
    psd: Vec<PsdScaling>,
    lp_w: DVector<f64>,
    lp_lambda: DVector<f64>,
}

struct Residuals {
    rp: DVector<f64>,
    rd_psd: Vec<DMatrix<f64>>,
    rd_lp: DVector<f64>,
    rd_free: DVector<f64>,
    rg: f64,
}

struct Direction {
    dxs: Vec<DMatrix<f64>>,
    dss: Vec<DMatrix<f64>>,
    dxl: DVector<f64>,
    dsl: DVector<f64>,
    dxf: DVector<f64>,
    dy: DVector<f64>,
    dtau: f64,
    dkappa: f64,
    /// Scaled directions, used for step lengths and the corrector term.
    sx_psd: Vec<DMatrix<f64>>,
    ss_psd: Vec<DMatrix<f64>>,
}

fn nt_scaling(x: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<PsdScaling> {
    let lx = Cholesky::new(x.clone())?.l();
    let ls = Cholesky::new(s.clone())?.l();
    let p = ls.transpose() * &lx;
    let svd = p.svd(false, true);
    let vt = svd.v_t?;
    let sv = svd.singular_values;
    if sv.iter().any(|&v| !v.is_finite() || v <= 0.0) {
        return None;
    }
    let mut g = lx * vt.transpose();
    for (j, &sigma) in sv.iter().enumerate() {
        let f = 1.0 / sigma.sqrt();
        g.column_mut(j).scale_mut(f);
    }
    let w = &g * g.transpose();
    Some(PsdScaling { g, w, lambda: sv })
}

/// Solves `lambda o Z = R` for diagonal `lambda` (Jordan product).
fn lyapunov(lambda: &DVector<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = lambda.len();
    DMatrix::from_fn(n, n, |i, j| 2.0 * r[(i, j)] / (lambda[i] + lambda[j]))
}

fn jordan(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ab = a * b;
    (&ab + ab.transpose()) * 0.5
}

/// Largest `alpha` with `diag(lambda) + alpha * d` PSD.
fn psd_step(lambda: &DVector<f64>, d: &DMatrix<f64>) -> f64 {
    let n = lambda.len();
    let inv = lambda.map(|l| 1.0 / l.sqrt());
    let m = DMatrix::from_fn(n, n, |i, j| inv[i] * d[(i, j)] * inv[j]);
    let m = (&m + m.transpose()) * 0.5;
    let rho = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if rho < 0.0 {
        -1.0 / rho
    } else {
        f64::INFINITY
    }
}

fn ratio_step(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

enum KktFactor<'a> {
    /// Cholesky of `Q2' M Q2`, or of `M` when there are no free columns.
    Reduced {
        chol: Cholesky<f64, nalgebra::Dyn>,
        basis: Option<&'a FreeBasis>,
    },
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

struct Kkt<'a> {
    m: usize,
    k: DMatrix<f64>,
    factor: KktFactor<'a>,
}

impl Kkt<'_> {
    fn solve_once(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        match &self.factor {
            KktFactor::Lu(lu) => lu.solve(rhs),
            KktFactor::Reduced { chol, basis: None } => Some(chol.solve(rhs)),
            KktFactor::Reduced {
                chol,
                basis: Some(fb),
            } => {
                let m = self.m;
                let nf = fb.v.nrows();
                let r1 = rhs.rows(0, m).into_owned();
                let rf = rhs.rows(m, nf).into_owned();
                let mm = self.k.view((0, 0), (m, m));
                let z1 = (fb.v.transpose() * rf).component_div(&fb.sigma);
                let dy1 = &fb.q1 * z1;
                let w = &r1 - mm * &dy1;
                let z2 = chol.solve(&(fb.q2.transpose() * w));
                let dy = dy1 + &fb.q2 * z2;
                let t = (fb.q1.transpose() * (&r1 - mm * &dy)).component_div(&fb.sigma);
                let dxf = &fb.v * t;
                let mut out = DVector::zeros(m + nf);
                out.rows_mut(0, m).copy_from(&dy);
                out.rows_mut(m, nf).copy_from(&dxf);
                Some(out)
            }
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let mut sol = self.solve_once(rhs)?;
        for _ in 0..3 {
            let r = rhs - &self.k * &sol;
            let corr = self.solve_once(&r)?;
            sol += corr;
        }
        if sol.iter().all(|v| v.is_finite()) {
            Some(sol)
        } else {
            None
        }
    }
}

struct Ipm<'a> {
    model: &'a Model,
    opts: &'a SolverOptions,
}

impl<'a> Ipm<'a> {
    fn initial(&self) -> State {
        let md = self.model;
        State {
            xs: md.psd.iter().map(|b| DMatrix::identity(b.n, b.n)).collect(),
            ss: md.psd.iter().map(|b| DMatrix::identity(b.n, b.n)).collect(),
            xl: DVector::from_element(md.lp_cols.len(), 1.0),
            sl: DVector::from_element(md.lp_cols.len(), 1.0),
            xf: DVector::zeros(md.free_cols.len()),
            y: DVector::zeros(md.m),
            tau: 1.0,
            kappa: 1.0,
        }
    }

    fn residuals(&self, st: &State) -> Residuals {
        let md = self.model;
        let ax = md.apply_a(&st.xs, &st.xl) + md.apply_free(&st.xf);
        let rp = &md.b * st.tau - ax;
        let aty = md.adjoint_psd(&st.y);
        let rd_psd = md
            .psd
            .iter()
            .zip(aty.iter().zip(&st.ss))
            .map(|(b, (a, s))| &b.c * st.tau - a - s)
            .collect();
        let rd_lp = &md.lp_c * st.tau - Model::adjoint_cols(&md.lp_cols, &st.y) - &st.sl;
        let rd_free = &md.free_c * st.tau - Model::adjoint_cols(&md.free_cols, &st.y);
        let cx = md.cone_cost(&st.xs, &st.xl) + md.free_c.dot(&st.xf);
        let rg = st.kappa + cx - md.b.dot(&st.y);
        Residuals {
            rp,
            rd_psd,
            rd_lp,
            rd_free,
            rg,
        }
    }

    fn scaling(&self, st: &State) -> Option<Scaling> {
        let psd = st
            .xs
            .iter()
            .zip(&st.ss)
            .map(|(x, s)| nt_scaling(x, s))
            .collect::<Option<Vec<_>>>()?;
        let lp_w = st.xl.zip_map(&st.sl, |x, s| (x / s).sqrt());
        let lp_lambda = st.xl.zip_map(&st.sl, |x, s| (x * s).sqrt());
        Some(Scaling {
            psd,
            lp_w,
            lp_lambda,
        })
    }

    fn h_psd(sc: &PsdScaling, u: &DMatrix<f64>) -> DMatrix<f64> {
        &sc.w * u * &sc.w
    }

    fn factor(&self, sc: &Scaling) -> Option<Kkt<'a>> {
        let md = self.model;
        let m = md.m;
        let nf = md.free_cols.len();
        let mut k = DMatrix::<f64>::zeros(m + nf, m + nf);
        for (blk, s) in md.psd.iter().zip(&sc.psd) {
            let hs: Vec<DMatrix<f64>> = blk.rows.iter().map(|(_, a)| Self::h_psd(s, a)).collect();
            for (i, (ri, _)) in blk.rows.iter().enumerate() {
                for (j, (rj, aj)) in blk.rows.iter().enumerate().skip(i) {
                    let v = aj.dot(&hs[i]);
                    k[(*ri, *rj)] += v;
                    if i != j {
                        k[(*rj, *ri)] += v;
                    }
                }
            }
        }
        for (col, w) in md.lp_cols.iter().zip(sc.lp_w.iter()) {
            let d = w * w;
            for &(r1, a1) in col {
                for &(r2, a2) in col {
                    k[(r1, r2)] += d * a1 * a2;
                }
            }
        }
        for (j, col) in md.free_cols.iter().enumerate() {
            for &(r, a) in col {
                k[(r, m + j)] += a;
                k[(m + j, r)] += a;
            }
        }
        let scale = (0..m).map(|i| k[(i, i)].abs()).fold(1.0, f64::max);
        let reduced = if nf == 0 {
            spd_factor(k.clone(), scale).map(|chol| KktFactor::Reduced { chol, basis: None })
        } else {
            md.free_basis.as_ref().and_then(|fb| {
                let mm = k.view((0, 0), (m, m));
                let mut red = fb.q2.transpose() * mm * &fb.q2;
                symmetrize(&mut red);
                spd_factor(red, scale).map(|chol| KktFactor::Reduced {
                    chol,
                    basis: Some(fb),
                })
            })
        };
        let factor = match reduced {
            Some(f) => f,
            None => {
                let mut kreg = k.clone();
                for i in 0..m {
                    kreg[(i, i)] += 1e-13 * scale;
                }
                for j in 0..nf {
                    kreg[(m + j, m + j)] -= 1e-13 * scale;
                }
                let lu = kreg.lu();
                if !lu.is_invertible() {
                    return None;
                }
                KktFactor::Lu(lu)
            }
        };
        Some(Kkt { m, k, factor })
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        st: &State,
        res: &Residuals,
        sc: &Scaling,
        kkt: &Kkt,
        q: &(DVector<f64>, Vec<DMatrix<f64>>, DVector<f64>),
        eta: f64,
        rc_psd: &[DMatrix<f64>],
        rc_lp: &DVector<f64>,
        r_tk: f64,
    ) -> Option<Direction> {
        let md = self.model;
        let m = md.m;
        // r_xs: the complementarity part of the primal direction.
        let zs: Vec<DMatrix<f64>> = sc
            .psd
            .iter()
            .zip(rc_psd)
            .map(|(s, rc)| lyapunov(&s.lambda, rc))
            .collect();
        let rxs_psd: Vec<DMatrix<f64>> = sc
            .psd
            .iter()
            .zip(&zs)
            .map(|(s, z)| &s.g * z * s.g.transpose())
            .collect();
        let rxs_lp = sc
            .lp_w
            .zip_zip_map(rc_lp, &sc.lp_lambda, |w, rc, l| w * rc / l);
        let hrd_psd: Vec<DMatrix<f64>> = sc
            .psd
            .iter()
            .zip(&res.rd_psd)
            .map(|(s, r)| Self::h_psd(s, r))
            .collect();
        let hrd_lp = sc.lp_w.zip_map(&res.rd_lp, |w, r| w * w * r);

        let rhs1 =
            &res.rp * eta - md.apply_a(&rxs_psd, &rxs_lp) + md.apply_a(&hrd_psd, &hrd_lp) * eta;
        let mut rhs = DVector::zeros(m + md.free_cols.len());
        rhs.rows_mut(0, m).copy_from(&rhs1);
        rhs.rows_mut(m, md.free_cols.len())
            .copy_from(&(&res.rd_free * eta));
        let p = kkt.solve(&rhs)?;
        let (qv, hv_psd, hv_lp) = q;
        let py = p.rows(0, m).into_owned();
        let pf = p.rows(m, md.free_cols.len()).into_owned();
        let qy = qv.rows(0, m).into_owned();
        let qf = qv.rows(m, md.free_cols.len()).into_owned();

        // u = r_xs - eta H r_d + H A' p_y
        let atp = md.adjoint_psd(&py);
        let atp_lp = Model::adjoint_cols(&md.lp_cols, &py);
        let u_psd: Vec<DMatrix<f64>> = (0..md.psd.len())
            .map(|k| &rxs_psd[k] - &hrd_psd[k] * eta + Self::h_psd(&sc.psd[k], &atp[k]))
            .collect();
        let u_lp = &rxs_lp - &hrd_lp * eta + sc.lp_w.zip_map(&atp_lp, |w, a| w * w * a);
        let cu = md.cone_cost(&u_psd, &u_lp);
        let cv = md.cone_cost(hv_psd, hv_lp);

        let num = eta * res.rg - md.b.dot(&py) + cu + md.free_c.dot(&pf) + r_tk / st.tau;
        let den = md.b.dot(&qy) - cv - md.free_c.dot(&qf) + st.kappa / st.tau;
        if den == 0.0 || den.is_nan() {
            return None;
        }
        let dtau = num / den;
        let mut dy = &py + &qy * dtau;
        let mut dxf = &pf + &qf * dtau;
        let mut parts = self.recover(res, sc, eta, &rxs_psd, &rxs_lp, &zs, &dy, dtau);
        // Correct dy and dxf against the residual of the assembled direction.
        for _ in 0..2 {
            let (dxs, _, dxl, _, _, _) = &parts;
            let ep = &res.rp * eta - (md.apply_a(dxs, dxl) + md.apply_free(&dxf) - &md.b * dtau);
            let ef =
                &res.rd_free * eta - (Model::adjoint_cols(&md.free_cols, &dy) - &md.free_c * dtau);
            let mut e = DVector::zeros(m + md.free_cols.len());
            e.rows_mut(0, m).copy_from(&ep);
            e.rows_mut(m, md.free_cols.len()).copy_from(&ef);
            if e.amax() <= 1e-14 * (1.0 + res.rp.amax()) {
                break;
            }
            let Some(c) = kkt.solve(&e) else { break };
            dy += c.rows(0, m);
            dxf += c.rows(m, md.free_cols.len());
            parts = self.recover(res, sc, eta, &rxs_psd, &rxs_lp, &zs, &dy, dtau);
        }
        let (dxs, dss, dxl, dsl, sx_psd, ss_psd) = parts;
        let dkappa = (r_tk - st.kappa * dtau) / st.tau;
        Some(Direction {
            dxs,
            dss,
            dxl,
            dsl,
            dxf,
            dy,
            dtau,
            dkappa,
            sx_psd,
            ss_psd,
        })
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn recover(
        &self,
        res: &Residuals,
        sc: &Scaling,
        eta: f64,
        rxs_psd: &[DMatrix<f64>],
        rxs_lp: &DVector<f64>,
        zs: &[DMatrix<f64>],
        dy: &DVector<f64>,
        dtau: f64,
    ) -> (
        Vec<DMatrix<f64>>,
        Vec<DMatrix<f64>>,
        DVector<f64>,
        DVector<f64>,
        Vec<DMatrix<f64>>,
        Vec<DMatrix<f64>>,
    ) {
        let md = self.model;
        let aty = md.adjoint_psd(dy);
        let aty_lp = Model::adjoint_cols(&md.lp_cols, dy);
        let mut dss = Vec::with_capacity(md.psd.len());
        let mut dxs = Vec::with_capacity(md.psd.len());
        let mut sx_psd = Vec::with_capacity(md.psd.len());
        let mut ss_psd = Vec::with_capacity(md.psd.len());
        for k in 0..md.psd.len() {
            let mut ds = &res.rd_psd[k] * eta - &aty[k] + &md.psd[k].c * dtau;
            symmetrize(&mut ds);
            let mut dx = &rxs_psd[k] - Self::h_psd(&sc.psd[k], &ds);
            symmetrize(&mut dx);
            let g = &sc.psd[k].g;
            let st_ds = g.transpose() * &ds * g;
            let st_dx = &zs[k] - &st_ds;
            dss.push(ds);
            dxs.push(dx);
            ss_psd.push(st_ds);
            sx_psd.push(st_dx);
        }
        let dsl = &res.rd_lp * eta - aty_lp + &md.lp_c * dtau;
        let dxl = rxs_lp - sc.lp_w.zip_map(&dsl, |w, d| w * w * d);
        (dxs, dss, dxl, dsl, sx_psd, ss_psd)
    }

    fn max_step(&self, st: &State, sc: &Scaling, d: &Direction) -> f64 {
        let mut a = f64::INFINITY;
        for k in 0..sc.psd.len() {
            a = a.min(psd_step(&sc.psd[k].lambda, &d.sx_psd[k]));
            a = a.min(psd_step(&sc.psd[k].lambda, &d.ss_psd[k]));
        }
        a = a.min(ratio_step(&st.xl, &d.dxl));
        a = a.min(ratio_step(&st.sl, &d.dsl));
        if d.dtau < 0.0 {
            a = a.min(-st.tau / d.dtau);
        }
        if d.dkappa < 0.0 {
            a = a.min(-st.kappa / d.dkappa);
        }
        a
    }

    fn run(&self) -> RunResult {
        let md = self.model;
        let opts = self.opts;
        let nu = md.degree() as f64;
        let mut st = self.initial();
        let mut history = Vec::new();
        let mut last_step = 0.0;
        let mut small_steps = 0;
        // Best iterate meeting `tol`, with its merit.
        let mut best: Option<(f64, State)> = None;
        let stop =
            |status: SdpStatus, st: State, history: Vec<IterateLog>, best: Option<(f64, State)>| {
                match best {
                    Some((_, b)) => RunResult {
                        status: SdpStatus::Optimal,
                        state: b,
                        history,
                    },
                    None => RunResult {
                        status,
                        state: st,
                        history,
                    },
                }
            };

        for iter in 0..=opts.max_iter {
            let res = self.residuals(&st);
            let mu = (st.xs.iter().zip(&st.ss).map(|(x, s)| x.dot(s)).sum::<f64>()
                + st.xl.dot(&st.sl)
                + st.tau * st.kappa)
                / (nu + 1.0);

            // Normalized iterate quantities.
            let pres = res.rp.amax() / st.tau;
            let dres = res
                .rd_psd
                .iter()
                .map(|r| r.amax())
                .chain(std::iter::once(if res.rd_lp.is_empty() {
                    0.0
                } else {
                    res.rd_lp.amax()
                }))
                .chain(std::iter::once(if res.rd_free.is_empty() {
                    0.0
                } else {
                    res.rd_free.amax()
                }))
                .fold(0.0, f64::max)
                / st.tau;
            let cx = md.cone_cost(&st.xs, &st.xl) + md.free_c.dot(&st.xf);
            let by = md.b.dot(&st.y);
            let pobj = cx / st.tau;
            let dobj = by / st.tau;
            let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
            history.push(IterateLog {
                iteration: iter,
                primal_objective: pobj,
                dual_objective: dobj,
                primal_residual: pres,
                dual_residual: dres,
                mu,
                tau: st.tau,
                kappa: st.kappa,
                step: last_step,
            });

            let comp = (st.xs.iter().zip(&st.ss).map(|(x, s)| x.dot(s)).sum::<f64>()
                + st.xl.dot(&st.sl))
                / (st.tau * st.tau)
                / (1.0 + pobj.abs());
            let merit = pres.max(dres).max(gap).max(comp.abs());
            if merit <= opts.refine_tol.min(opts.tol) {
                return RunResult {
                    status: SdpStatus::Optimal,
                    state: st,
                    history,
                };
            }
            if let Some((bm, _)) = &best {
                if merit > 1e2 * bm {
                    return stop(SdpStatus::NumericalError, st, history, best);
                }
            }
            if merit <= opts.tol && best.as_ref().is_none_or(|(bm, _)| merit < *bm) {
                best = Some((merit, st.clone()));
            }
            // Infeasibility: rays of the homogeneous problem.
            if by > 0.0 {
                let aty = md.adjoint_psd(&st.y);
                let mut r: f64 = 0.0;
                for (a, s) in aty.iter().zip(&st.ss) {
                    r = r.max((a + s).amax());
                }
                let al = Model::adjoint_cols(&md.lp_cols, &st.y) + &st.sl;
                if !al.is_empty() {
                    r = r.max(al.amax());
                }
                let af = Model::adjoint_cols(&md.free_cols, &st.y);
                if !af.is_empty() {
                    r = r.max(af.amax());
                }
                if r / by <= opts.infeasibility_tol && st.tau < st.kappa {
                    return RunResult {
                        status: SdpStatus::PrimalInfeasible,
                        state: st,
                        history,
                    };
                }
            }
            if cx < 0.0 {
                let ax = md.apply_a(&st.xs, &st.xl) + md.apply_free(&st.xf);
                if ax.amax() / (-cx) <= opts.infeasibility_tol && st.tau < st.kappa {
                    return RunResult {
                        status: SdpStatus::DualInfeasible,
                        state: st,
                        history,
                    };
                }
            }
            if iter == opts.max_iter {
                break;
            }

            let Some(sc) = self.scaling(&st) else {
                return stop(SdpStatus::NumericalError, st, history, best);
            };
            let Some(kkt) = self.factor(&sc) else {
                return stop(SdpStatus::NumericalError, st, history, best);
            };
            // q system: depends only on the scaling.
            let hc_psd: Vec<DMatrix<f64>> = md
                .psd
                .iter()
                .zip(&sc.psd)
                .map(|(b, s)| Self::h_psd(s, &b.c))
                .collect();
            let hc_lp = sc.lp_w.zip_map(&md.lp_c, |w, c| w * w * c);
            let mut qrhs = DVector::zeros(md.m + md.free_cols.len());
            qrhs.rows_mut(0, md.m)
                .copy_from(&(md.apply_a(&hc_psd, &hc_lp) + &md.b));
            qrhs.rows_mut(md.m, md.free_cols.len())
                .copy_from(&md.free_c);
            let Some(qv) = kkt.solve(&qrhs) else {
                return stop(SdpStatus::NumericalError, st, history, best);
            };
            let qy = qv.rows(0, md.m).into_owned();
            let atq = md.adjoint_psd(&qy);
            let atq_lp = Model::adjoint_cols(&md.lp_cols, &qy);
            let hv_psd: Vec<DMatrix<f64>> = (0..md.psd.len())
                .map(|k| Self::h_psd(&sc.psd[k], &atq[k]) - &hc_psd[k])
                .collect();
            let hv_lp = sc.lp_w.zip_map(&atq_lp, |w, a| w * w * a) - &hc_lp;
            let q = (qv, hv_psd, hv_lp);

            // Predictor.
            let rc_aff: Vec<DMatrix<f64>> = sc
                .psd
                .iter()
                .map(|s| DMatrix::from_diagonal(&s.lambda.map(|l| -l * l)))
                .collect();
            let rc_aff_lp = sc.lp_lambda.map(|l| -l * l);
            let Some(aff) = self.direction(
                &st,
                &res,
                &sc,
                &kkt,
                &q,
                1.0,
                &rc_aff,
                &rc_aff_lp,
                -st.tau * st.kappa,
            ) else {
                return stop(SdpStatus::NumericalError, st, history, best);
            };
            let alpha_aff = self.max_step(&st, &sc, &aff).min(1.0);
            let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

            // Corrector.
            let rc: Vec<DMatrix<f64>> = (0..md.psd.len())
                .map(|k| {
                    let lam = &sc.psd[k].lambda;
                    let n = lam.len();
                    let mut r = DMatrix::from_diagonal(&lam.map(|l| sigma * mu - l * l));
                    r -= jordan(&aff.sx_psd[k], &aff.ss_psd[k]);
                    debug_assert_eq!(r.nrows(), n);
                    r
                })
                .collect();
            let dxl_s = aff.dxl.zip_map(&sc.lp_w, |d, w| d / w);
            let dsl_s = aff.dsl.zip_map(&sc.lp_w, |d, w| d * w);
            let rc_lp = sc
                .lp_lambda
                .zip_zip_map(&dxl_s, &dsl_s, |l, a, b| sigma * mu - l * l - a * b);
            let r_tk = sigma * mu - st.tau * st.kappa - aff.dtau * aff.dkappa;
            let Some(dir) =
                self.direction(&st, &res, &sc, &kkt, &q, 1.0 - sigma, &rc, &rc_lp, r_tk)
            else {
                return stop(SdpStatus::NumericalError, st, history, best);
            };
            let alpha = (opts.step_fraction * self.max_step(&st, &sc, &dir)).min(1.0);
            if !alpha.is_finite() || alpha <= 0.0 {
                return stop(SdpStatus::NumericalError, st, history, best);
            }
            last_step = alpha;
            if alpha < 1e-8 {
                small_steps += 1;
                if small_steps >= 5 {
                    return stop(SdpStatus::NumericalError, st, history, best);
                }
            } else {
                small_steps = 0;
            }

            for k in 0..md.psd.len() {
                st.xs[k] += &dir.dxs[k] * alpha;
                st.ss[k] += &dir.dss[k] * alpha;
                symmetrize(&mut st.xs[k]);
                symmetrize(&mut st.ss[k]);
            }
            st.xl.axpy(alpha, &dir.dxl, 1.0);
            st.sl.axpy(alpha, &dir.dsl, 1.0);
            st.xf.axpy(alpha, &dir.dxf, 1.0);
            st.y.axpy(alpha, &dir.dy, 1.0);
            st.tau += alpha * dir.dtau;
            st.kappa += alpha * dir.dkappa;

            // Keep the homogeneous iterate bounded.
            let scale = st.tau.max(st.kappa);
            if !(1e-6..=1e6).contains(&scale) {
                let f = 1.0 / scale;
                for k in 0..md.psd.len() {
                    st.xs[k] *= f;
                    st.ss[k] *= f;
                }
                st.xl *= f;
                st.sl *= f;
                st.xf *= f;
                st.y *= f;
                st.tau *= f;
                st.kappa *= f;
            }
        }
        stop(SdpStatus::IterationLimit, st, history, best)
    }
}

struct RunResult {
    status: SdpStatus,
    state: State,
    history: Vec<IterateLog>,
}

/// Solves `problem` with the homogeneous self-dual interior-point method.
///
/// Deterministic for identical inputs. Numerical breakdown is reported through
/// [`SdpStatus::NumericalError`]; only malformed input is an `Err`.
pub fn solve(problem: &SdpProblem, opts: &SolverOptions) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    let model = Model::build(problem);
    let ipm = Ipm {
        model: &model,
        opts,
    };
    let RunResult {
        status,
        state,
        history,
    } = ipm.run();
    Ok(assemble_solution(problem, &model, status, &state, history))
}

fn assemble_solution(
    problem: &SdpProblem,
    md: &Model,
    status: SdpStatus,
    st: &State,
    history: Vec<IterateLog>,
) -> SdpSolution {
    // Unnormalized blocks in problem layout.
    let mut xb: Vec<BlockValue> = problem
        .blocks
        .iter()
        .map(|&k| BlockValue::zeros(k))
        .collect();
    let mut sb = xb.clone();
    for (k, blk) in md.psd.iter().enumerate() {
        xb[blk.global] = BlockValue::Psd(st.xs[k].clone());
        sb[blk.global] = BlockValue::Psd(st.ss[k].clone());
    }
    let set_lp = |v: &mut Vec<BlockValue>, (b, i): (usize, usize), val: f64| {
        if let BlockValue::Lp(vec) = &mut v[b] {
            vec[i] = val;
        }
    };
    for (j, &orig) in md.lp_origin.iter().enumerate() {
        set_lp(&mut xb, orig, st.xl[j]);
        set_lp(&mut sb, orig, st.sl[j]);
    }
    for (j, &(pos, neg)) in md.free_origin.iter().enumerate() {
        let w = st.xf[j];
        set_lp(&mut xb, pos, w.max(0.0));
        set_lp(&mut xb, neg, (-w).max(0.0));
        let (col, c) = &md.all_lp[&pos];
        let s = c * st.tau - col.iter().map(|&(r, a)| a * st.y[r]).sum::<f64>();
        set_lp(&mut sb, pos, s);
        set_lp(&mut sb, neg, -s);
    }
    let scale_blocks = |v: &mut Vec<BlockValue>, f: f64| {
        for b in v.iter_mut() {
            match b {
                BlockValue::Psd(m) => *m *= f,
                BlockValue::Lp(x) => *x *= f,
            }
        }
    };

    let mut certificate = None;
    let (x_out, y_out, s_out) = match status {
        SdpStatus::PrimalInfeasible => {
            let by = md.b.dot(&st.y);
            let y: Vec<f64> = st.y.iter().map(|v| v / by).collect();
            let mut s = sb.clone();
            scale_blocks(&mut s, 1.0 / by);
            let mut r = s.clone();
            for (a, &yi) in problem.constraints.iter().zip(&y) {
                add_sparse(&mut r, a, yi);
            }
            let residual = r.iter().map(block_amax).fold(0.0, f64::max);
            certificate = Some(InfeasibilityCertificate::PrimalRay {
                y: y.clone(),
                slack: s.clone(),
                residual,
            });
            (xb.clone(), y, s)
        }
        SdpStatus::DualInfeasible => {
            let cx = sparse_dot(&problem.objective, &xb);
            let mut x = xb.clone();
            scale_blocks(&mut x, -1.0 / cx);
            let residual = problem
                .constraints
                .iter()
                .map(|a| sparse_dot(a, &x).abs())
                .fold(0.0, f64::max);
            certificate = Some(InfeasibilityCertificate::DualRay {
                x: x.clone(),
                residual,
            });
            (x, st.y.iter().copied().collect(), sb.clone())
        }
        _ => {
            let mut x = xb.clone();
            let mut s = sb.clone();
            scale_blocks(&mut x, 1.0 / st.tau);
            scale_blocks(&mut s, 1.0 / st.tau);
            (x, st.y.iter().map(|v| v / st.tau).collect(), s)
        }
    };

    let primal_objective = sparse_dot(&problem.objective, &x_out);
    let dual_objective: f64 = y_out.iter().zip(&problem.rhs).map(|(a, b)| a * b).sum();
    let primal_residual = problem
        .constraints
        .iter()
        .zip(&problem.rhs)
        .map(|(a, b)| (sparse_dot(a, &x_out) - b).abs())
        .fold(0.0, f64::max);
    let mut dr: Vec<BlockValue> = problem
        .blocks
        .iter()
        .map(|&k| BlockValue::zeros(k))
        .collect();
    add_sparse(&mut dr, &problem.objective, 1.0);
    for (a, &yi) in problem.constraints.iter().zip(&y_out) {
        add_sparse(&mut dr, a, -yi);
    }
    for (d, s) in dr.iter_mut().zip(&s_out) {
        match (d, s) {
            (BlockValue::Psd(a), BlockValue::Psd(b)) => *a -= b,
            (BlockValue::Lp(a), BlockValue::Lp(b)) => *a -= b,
            _ => unreachable!(),
        }
    }
    let dual_residual = dr.iter().map(block_amax).fold(0.0, f64::max);
    let gap = (primal_objective - dual_objective).abs()
        / (1.0 + primal_objective.abs() + dual_objective.abs());

    SdpSolution {
        status,
        primal: x_out,
        dual: y_out,
        dual_slack: s_out,
        primal_objective,
        dual_objective,
        gap,
        primal_residual,
        dual_residual,
        iterations: history.len().saturating_sub(1),
        certificate,
        history,
    }
}

fn block_amax(b: &BlockValue) -> f64 {
    match b {
        BlockValue::Psd(m) => {
            if m.is_empty() {
                0.0
            } else {
                m.amax()
            }
        }
        BlockValue::Lp(v) => {
            if v.is_empty() {
                0.0
            } else {
                v.amax()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::BlockSparse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one(block: usize, r: usize, c: usize, v: f64) -> BlockSparse {
        let mut a = BlockSparse::new();
        a.push(block, r, c, v);
        a
    }

    #[test]
    fn diagonal_trace_problem() {
        // min X11 + 2 X22  s.t.  X11 + X22 = 1
        let mut p = SdpProblem::new(vec![BlockKind::Psd(2)]);
        p.objective.push(0, 0, 0, 1.0);
        p.objective.push(0, 1, 1, 2.0);
        let mut a = one(0, 0, 0, 1.0);
        a.push(0, 1, 1, 1.0);
        p.add_constraint(a, 1.0);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.primal_objective - 1.0).abs() < 1e-8);
        assert!((sol.dual[0] - 1.0).abs() < 1e-8);
        let x = sol.primal[0].as_matrix().unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-7 && x[(1, 1)].abs() < 1e-7);
    }

    #[test]
    fn largest_shift_keeping_psd() {
        // max t with diag(1 - t, 1 + t) PSD, written as the dual of
        // min tr X  s.t.  X11 - X22 = 1.
        let mut p = SdpProblem::new(vec![BlockKind::Psd(2)]);
        p.objective.push(0, 0, 0, 1.0);
        p.objective.push(0, 1, 1, 1.0);
        let mut a = one(0, 0, 0, 1.0);
        a.push(0, 1, 1, -1.0);
        p.add_constraint(a, 1.0);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.dual_objective - 1.0).abs() < 1e-8);
        assert!(sol.min_dual_eigenvalue() > -1e-8);
    }

    #[test]
    fn contradictory_equalities_are_primal_infeasible() {
        let mut p = SdpProblem::new(vec![BlockKind::Psd(2)]);
        p.objective.push(0, 1, 1, 1.0);
        p.add_constraint(one(0, 0, 0, 1.0), 1.0);
        p.add_constraint(one(0, 0, 0, 1.0), 2.0);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::PrimalInfeasible);
        let cert = sol.certificate.as_ref().unwrap();
        assert!((cert.improvement(&p) - 1.0).abs() < 1e-9);
        assert!(cert.residual() < 1e-7);
        if let InfeasibilityCertificate::PrimalRay { slack, .. } = cert {
            for s in slack {
                assert!(s.min_eigenvalue() > -1e-7);
            }
        }
    }

    #[test]
    fn unbounded_objective_is_dual_infeasible() {
        // min X11 - X22  s.t.  X11 = 1: X22 can grow without bound.
        let mut p = SdpProblem::new(vec![BlockKind::Psd(2)]);
        p.objective.push(0, 0, 0, 1.0);
        p.objective.push(0, 1, 1, -1.0);
        p.add_constraint(one(0, 0, 0, 1.0), 1.0);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::DualInfeasible);
        let cert = sol.certificate.as_ref().unwrap();
        assert!((cert.improvement(&p) - 1.0).abs() < 1e-9);
        assert!(cert.residual() < 1e-7);
    }

    #[test]
    fn opposed_lp_columns_become_free() {
        // LP block (p, n, z): min z  s.t.  p - n - z = -2,  p - n = 1.
        let mut p = SdpProblem::new(vec![BlockKind::Lp(3)]);
        p.objective.push(0, 2, 2, 1.0);
        let mut a = one(0, 0, 0, 1.0);
        a.push(0, 1, 1, -1.0);
        a.push(0, 2, 2, -1.0);
        p.add_constraint(a, -2.0);
        let mut a = one(0, 0, 0, 1.0);
        a.push(0, 1, 1, -1.0);
        p.add_constraint(a, 1.0);
        let model = Model::build(&p);
        assert_eq!(model.free_cols.len(), 1);
        assert_eq!(model.lp_cols.len(), 1);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.primal_objective - 3.0).abs() < 1e-8);
        assert!(sol.primal_residual < 1e-8 && sol.dual_residual < 1e-8);
        assert!(sol.min_primal_eigenvalue() >= 0.0);
    }

    #[test]
    fn parallel_free_columns_are_handled() {
        // Two free variables f1, f2 enter only as g = f1 + 2 f2:
        // min z + 2w  s.t.  g + z = 3,  g - w = 1,  optimum 2 at g = 1.
        let mut p = SdpProblem::new(vec![BlockKind::Lp(6)]);
        p.objective.push(0, 4, 4, 1.0);
        p.objective.push(0, 5, 5, 2.0);
        for (tail, b) in [((4, 1.0), 3.0), ((5, -1.0), 1.0)] {
            let mut a = one(0, 0, 0, 1.0);
            a.push(0, 1, 1, -1.0);
            a.push(0, 2, 2, 2.0);
            a.push(0, 3, 3, -2.0);
            a.push(0, tail.0, tail.0, tail.1);
            p.add_constraint(a, b);
        }
        let model = Model::build(&p);
        assert_eq!(model.free_cols.len(), 2);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.primal_objective - 2.0).abs() < 1e-7);
        assert!(sol.primal_residual < 1e-8 && sol.dual_residual < 1e-8);
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    /// Builds a problem with a known strictly feasible primal-dual pair.
    fn random_problem(seed: u64) -> SdpProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [3usize, 2];
        let nlp = 3;
        let mut blocks: Vec<BlockKind> = sizes.iter().map(|&n| BlockKind::Psd(n)).collect();
        blocks.push(BlockKind::Lp(nlp));
        let x0: Vec<DMatrix<f64>> = sizes.iter().map(|&n| random_spd(&mut rng, n)).collect();
        let s0: Vec<DMatrix<f64>> = sizes.iter().map(|&n| random_spd(&mut rng, n)).collect();
        let xl: Vec<f64> = (0..nlp).map(|_| rng.gen_range(0.5..2.0)).collect();
        let sl: Vec<f64> = (0..nlp).map(|_| rng.gen_range(0.5..2.0)).collect();
        let m = 6;
        let mut p = SdpProblem::new(blocks);
        let mut c: Vec<BlockValue> = p.blocks.iter().map(|&k| BlockValue::zeros(k)).collect();
        for k in 0..sizes.len() {
            c[k] = BlockValue::Psd(s0[k].clone());
        }
        c[2] = BlockValue::Lp(DVector::from_vec(sl.clone()));
        let mut x: Vec<BlockValue> = x0.iter().cloned().map(BlockValue::Psd).collect();
        x.push(BlockValue::Lp(DVector::from_vec(xl)));
        for _ in 0..m {
            let mut a = BlockSparse::new();
            for (k, &n) in sizes.iter().enumerate() {
                for i in 0..n {
                    for j in i..n {
                        if rng.gen_bool(0.6) {
                            a.push(k, i, j, rng.gen_range(-1.0..1.0));
                        }
                    }
                }
            }
            for i in 0..nlp {
                if rng.gen_bool(0.5) {
                    a.push(2, i, i, rng.gen_range(-1.0..1.0));
                }
            }
            let y: f64 = rng.gen_range(-1.0..1.0);
            add_sparse(&mut c, &a, y);
            let b = sparse_dot(&a, &x);
            p.add_constraint(a, b);
        }
        for (k, v) in c.iter().enumerate() {
            match v {
                BlockValue::Psd(mat) => {
                    for i in 0..mat.nrows() {
                        for j in i..mat.ncols() {
                            p.objective.push(k, i, j, mat[(i, j)]);
                        }
                    }
                }
                BlockValue::Lp(vec) => {
                    for (i, &val) in vec.iter().enumerate() {
                        p.objective.push(k, i, i, val);
                    }
                }
            }
        }
        p
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]

        #[test]
        fn random_feasible_problems_satisfy_kkt(seed in 0u64..1_000_000) {
            let p = random_problem(seed);
            let sol = solve(&p, &SolverOptions::default()).unwrap();
            proptest::prop_assert_eq!(sol.status, SdpStatus::Optimal);
            proptest::prop_assert!(sol.primal_residual < 1e-8, "{}", sol.primal_residual);
            proptest::prop_assert!(sol.dual_residual < 1e-8, "{}", sol.dual_residual);
            proptest::prop_assert!(sol.gap < 1e-8, "{}", sol.gap);
            proptest::prop_assert!(sol.min_primal_eigenvalue() > -1e-8);
            proptest::prop_assert!(sol.min_dual_eigenvalue() > -1e-8);
            // Weak duality at the returned point.
            proptest::prop_assert!(sol.dual_objective <= sol.primal_objective + 1e-8 * (1.0 + sol.primal_objective.abs()));
            let comp = sol.complementarity();
            proptest::prop_assert!(comp.abs() <= 1e-8 * (1.0 + sol.primal_objective.abs()), "{comp}");
        }
    }

    #[test]
    fn solve_is_deterministic() {
        let p = random_problem(7);
        let a = solve(&p, &SolverOptions::default()).unwrap();
        let b = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(a.dual, b.dual);
        assert_eq!(a.primal, b.primal);
    }

    #[test]
    fn rejects_problem_without_constraints() {
        let p = SdpProblem::new(vec![BlockKind::Psd(1)]);
        assert!(matches!(
            solve(&p, &SolverOptions::default()),
            Err(SdpError::NoConstraints)
        ));
    }
}
