//! Seeded campaigns over many goals: solver benchmarks against the local
//! baseline and rank-one region scans over a planar workspace grid.
//!
//! Instances run on the rayon pool and are gathered in instance order, so
//! every output is a function of the spec, the options and the seed.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baseline::{solve_local, LocalOptions};
use crate::chain::{
    check_feasible, forward_kinematics, sample_angles, sample_feasible, ChainSpec, Configuration,
    Goal,
};
use crate::error::{CoreError, Result};
use crate::extract::{goal_error, Certificate};
use crate::geom::dist;
use crate::pipeline::{random_reference, solve_ik, solve_with_reference, PipelineOptions};
use crate::qcqp::Reference;

/// Endpoint error below which an instance counts as solved.
pub const SOLVED_ERROR: f64 = 1e-3;
/// Constraint tolerance for a solved instance.
pub const SOLVED_FEASIBILITY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalKind {
    Position,
    /// End point and final-link direction.
    Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Sos,
    Local,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Sos => "sos",
            SolverKind::Local => "local",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sos" => Ok(SolverKind::Sos),
            "local" => Ok(SolverKind::Local),
            other => Err(CoreError::UnknownSolver(other.to_string())),
        }
    }
}

/// Parses a comma-separated solver list such as `sos,local`.
pub fn parse_solvers(list: &str) -> Result<Vec<SolverKind>> {
    let mut out = Vec::new();
    for name in list.split(',').filter(|s| !s.trim().is_empty()) {
        let k: SolverKind = name.parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(CoreError::UnknownSolver(list.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub instances: usize,
    pub solvers: Vec<SolverKind>,
    pub seed: u64,
    pub goal: GoalKind,
    pub pipeline: PipelineOptions,
    pub local: LocalOptions,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            instances: 100,
            solvers: vec![SolverKind::Sos, SolverKind::Local],
            seed: 0,
            goal: GoalKind::Pose,
            pipeline: PipelineOptions::default(),
            local: LocalOptions::default(),
        }
    }
}

/// One generated goal with the seeds every solver uses on it.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchInstance {
    pub index: usize,
    pub goal: Goal,
    /// Configuration the goal was taken from.
    pub target: Configuration,
    pub pipeline_seed: u64,
    /// Starting angles of the local solver.
    pub local_start: Vec<f64>,
    pub local_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub instance: usize,
    pub solver: SolverKind,
    pub solved: bool,
    /// Certificate of the SOS pipeline; absent for the local solver.
    pub certificate: Option<Certificate>,
    pub position_error: Option<f64>,
    pub max_violation: Option<f64>,
    /// References for SOS, iterations for the local solver.
    pub effort: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverStats {
    pub solver: SolverKind,
    pub instances: usize,
    pub solved: usize,
    pub solved_percent: f64,
    /// Over solved instances.
    pub mean_error: Option<f64>,
    pub median_error: Option<f64>,
    pub total_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchStats {
    pub seed: u64,
    pub instances: usize,
    pub goal: GoalKind,
    pub solvers: Vec<SolverStats>,
    pub records: Vec<BenchRecord>,
}

impl BenchStats {
    pub fn solver(&self, kind: SolverKind) -> Option<&SolverStats> {
        self.solvers.iter().find(|s| s.solver == kind)
    }

    /// Per-instance CSV without timings, so equal seeds give equal bytes.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "instance",
            "solver",
            "solved",
            "certificate",
            "position_error",
            "max_violation",
            "effort",
        ])
        .map_err(csv_error)?;
        for r in &self.records {
            w.write_record([
                r.instance.to_string(),
                r.solver.to_string(),
                r.solved.to_string(),
                r.certificate.map(|c| format!("{c:?}")).unwrap_or_default(),
                opt_num(r.position_error),
                opt_num(r.max_violation),
                r.effort.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows: position error, solved percentage, total time; one column per
    /// solver.
    pub fn summary_table(&self) -> String {
        let mut s = format!("{:<22}", format!("{} instances", self.instances));
        for st in &self.solvers {
            s += &format!("{:>14}", st.solver.name());
        }
        s.push('\n');
        s += &format!("{:<22}", "Position Error [m]");
        for st in &self.solvers {
            s += &format!(
                "{:>14}",
                st.mean_error
                    .map(|e| format!("{e:.3e}"))
                    .unwrap_or("-".into())
            );
        }
        s.push('\n');
        s += &format!("{:<22}", "Solved [%]");
        for st in &self.solvers {
            s += &format!("{:>14.2}", st.solved_percent);
        }
        s.push('\n');
        s += &format!("{:<22}", "Total Time [s]");
        for st in &self.solvers {
            s += &format!("{:>14.3}", st.total_time);
        }
        s.push('\n');
        s
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

fn csv_error(e: csv::Error) -> CoreError {
    CoreError::Io(std::io::Error::other(e))
}

/// Goal pinned by `cfg`.
fn goal_from(kind: GoalKind, cfg: &Configuration) -> Goal {
    let n = cfg.points.len() - 1;
    match kind {
        GoalKind::Position => Goal::Position {
            x_n: cfg.points[n].clone(),
        },
        GoalKind::Pose => Goal::Pose {
            x_nm1: cfg.points[n - 1].clone(),
            x_n: cfg.points[n].clone(),
        },
    }
}

/// Reproducible instances: all seeds are drawn from one stream up front.
pub fn bench_instances(spec: &ChainSpec, opts: &BenchOptions) -> Vec<BenchInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.instances)
        .map(|index| {
            let target = sample_feasible(spec, rng.gen());
            let pipeline_seed = rng.gen();
            let mut start_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let local_start = sample_angles(spec, &mut start_rng);
            BenchInstance {
                index,
                goal: goal_from(opts.goal, &target),
                target,
                pipeline_seed,
                local_start,
                local_seed: rng.gen(),
            }
        })
        .collect()
}

/// Feasibility of `cfg` with respect to the chain alone, ignoring the goal.
fn chain_violation(spec: &ChainSpec, cfg: &Configuration) -> Result<f64> {
    let free = spec.retarget(cfg);
    Ok(check_feasible(&free, cfg, SOLVED_FEASIBILITY, SOLVED_FEASIBILITY)?.max_violation)
}

fn run_one(
    spec: &ChainSpec,
    inst: &BenchInstance,
    solver: SolverKind,
    opts: &BenchOptions,
) -> Result<BenchRecord> {
    let spec = spec.with_goal(inst.goal.clone())?;
    let start = Instant::now();
    let (certificate, cfg, effort) = match solver {
        SolverKind::Sos => {
            let po = PipelineOptions {
                seed: inst.pipeline_seed,
                ..opts.pipeline.clone()
            };
            let out = solve_ik(&spec, &po)?;
            let cfg = match (&out.certificate, &out.angles) {
                (Certificate::GlobalOptimum, Some(a)) => Some(forward_kinematics(&spec, a)?),
                _ => None,
            };
            (Some(out.certificate), cfg, out.references_tried)
        }
        SolverKind::Local => {
            let lo = LocalOptions {
                seed: inst.local_seed,
                ..opts.local
            };
            let res = solve_local(&spec, &inst.goal, &inst.local_start, &lo)?;
            (
                None,
                Some(forward_kinematics(&spec, &res.angles)?),
                res.iterations,
            )
        }
    };
    let wall_time = start.elapsed().as_secs_f64();
    let (position_error, max_violation) = match &cfg {
        Some(c) => (
            Some(goal_error(&inst.goal, c)),
            Some(chain_violation(&spec, c)?),
        ),
        None => (None, None),
    };
    let solved = matches!((position_error, max_violation), (Some(e), Some(v))
        if e < SOLVED_ERROR && v <= SOLVED_FEASIBILITY);
    Ok(BenchRecord {
        instance: inst.index,
        solver,
        solved,
        certificate,
        position_error,
        max_violation,
        effort,
        wall_time,
    })
}

fn summarize(kind: SolverKind, records: &[BenchRecord]) -> SolverStats {
    let mine: Vec<&BenchRecord> = records.iter().filter(|r| r.solver == kind).collect();
    let mut errors: Vec<f64> = mine
        .iter()
        .filter(|r| r.solved)
        .filter_map(|r| r.position_error)
        .collect();
    errors.sort_by(f64::total_cmp);
    let solved = errors.len();
    let instances = mine.len();
    SolverStats {
        solver: kind,
        instances,
        solved,
        solved_percent: if instances == 0 {
            0.0
        } else {
            100.0 * solved as f64 / instances as f64
        },
        mean_error: (solved > 0).then(|| errors.iter().sum::<f64>() / solved as f64),
        median_error: median(&errors),
        total_time: mine.iter().map(|r| r.wall_time).sum(),
    }
}

/// Median of sorted values.
pub fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    }
}

pub fn run_bench(spec: &ChainSpec, opts: &BenchOptions) -> Result<BenchStats> {
    if opts.instances == 0 {
        return Err(CoreError::Precondition("at least one instance".into()));
    }
    spec.validate()?;
    let instances = bench_instances(spec, opts);
    let jobs: Vec<(&BenchInstance, SolverKind)> = instances
        .iter()
        .flat_map(|i| opts.solvers.iter().map(move |&s| (i, s)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|(inst, s)| run_one(spec, inst, *s, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchStats {
        seed: opts.seed,
        instances: opts.instances,
        goal: opts.goal,
        solvers: opts
            .solvers
            .iter()
            .map(|&k| summarize(k, &records))
            .collect(),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CellStatus {
    Rank1,
    HigherRank,
    Infeasible,
}

impl CellStatus {
    /// Blue, red and grey.
    pub fn color(self) -> [u8; 3] {
        match self {
            CellStatus::Rank1 => [40, 80, 220],
            CellStatus::HigherRank => [220, 40, 40],
            CellStatus::Infeasible => [170, 170, 170],
        }
    }
}

/// Axis-aligned box `[x_min, x_max] x [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// The reach square `[-R, R]^2` around the base.
    pub fn reach_square(spec: &ChainSpec) -> Self {
        let r = spec.reach();
        BoundingBox {
            x_min: spec.base[0] - r,
            x_max: spec.base[0] + r,
            y_min: spec.base[1] - r,
            y_max: spec.base[1] + r,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeatmapOptions {
    pub nx: usize,
    pub ny: usize,
    pub references: usize,
    pub seed: u64,
    /// Defaults to the reach square.
    pub bbox: Option<BoundingBox>,
    pub pipeline: PipelineOptions,
}

impl Default for HeatmapOptions {
    fn default() -> Self {
        HeatmapOptions {
            nx: 40,
            ny: 40,
            references: 5,
            seed: 0,
            bbox: None,
            pipeline: PipelineOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapGrid {
    pub bbox: BoundingBox,
    pub nx: usize,
    pub ny: usize,
    /// Row-major, `cells[iy * nx + ix]`, `iy = 0` at `y_min`.
    pub cells: Vec<CellStatus>,
    /// The reference; absent for a union grid.
    pub reference: Option<Configuration>,
}

impl HeatmapGrid {
    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let b = &self.bbox;
        [
            b.x_min + (ix as f64 + 0.5) * (b.x_max - b.x_min) / self.nx as f64,
            b.y_min + (iy as f64 + 0.5) * (b.y_max - b.y_min) / self.ny as f64,
        ]
    }

    pub fn status(&self, ix: usize, iy: usize) -> CellStatus {
        self.cells[iy * self.nx + ix]
    }

    /// Cell containing `p`, if inside the box.
    pub fn cell_of(&self, p: &[f64]) -> Option<(usize, usize)> {
        let b = &self.bbox;
        let fx = (p[0] - b.x_min) / (b.x_max - b.x_min) * self.nx as f64;
        let fy = (p[1] - b.y_min) / (b.y_max - b.y_min) * self.ny as f64;
        let inside = |f: f64, n: usize| f >= 0.0 && f < n as f64;
        (inside(fx, self.nx) && inside(fy, self.ny)).then_some((fx as usize, fy as usize))
    }

    pub fn count(&self, status: CellStatus) -> usize {
        self.cells.iter().filter(|&&c| c == status).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "status"]).map_err(csv_error)?;
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let [x, y] = self.center(ix, iy);
                w.write_record([
                    format!("{x:.6}"),
                    format!("{y:.6}"),
                    format!("{:?}", self.status(ix, iy)),
                ])
                .map_err(csv_error)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binary PPM, one pixel per cell, `y` increasing upwards.
    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.nx, self.ny)?;
        for iy in (0..self.ny).rev() {
            for ix in 0..self.nx {
                out.write_all(&self.status(ix, iy).color())?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn cell_status(
    spec: &ChainSpec,
    reference: &Reference,
    goal: [f64; 2],
    opts: &PipelineOptions,
) -> Result<CellStatus> {
    if dist(&goal, &spec.base) > spec.reach() {
        return Ok(CellStatus::Infeasible);
    }
    let spec = spec.with_goal(Goal::Position { x_n: goal.to_vec() })?;
    let (out, _) = solve_with_reference(&spec, reference, opts)?;
    Ok(match out.certificate {
        Certificate::GlobalOptimum if out.is_rank_one() => CellStatus::Rank1,
        Certificate::Infeasible => CellStatus::Infeasible,
        _ => CellStatus::HigherRank,
    })
}

/// Rank status of every cell for one fixed reference configuration.
pub fn heatmap_for_reference(
    spec: &ChainSpec,
    reference: &Configuration,
    opts: &HeatmapOptions,
) -> Result<HeatmapGrid> {
    if spec.dimension != 2 {
        return Err(CoreError::Precondition(
            "heatmaps need a planar chain".into(),
        ));
    }
    if opts.nx == 0 || opts.ny == 0 {
        return Err(CoreError::Precondition("empty grid".into()));
    }
    let mut grid = HeatmapGrid {
        bbox: opts.bbox.unwrap_or_else(|| BoundingBox::reach_square(spec)),
        nx: opts.nx,
        ny: opts.ny,
        cells: Vec::new(),
        reference: Some(reference.clone()),
    };
    let r = Reference::Configuration(reference.clone());
    let cells: Vec<(usize, usize)> = (0..opts.ny)
        .flat_map(|iy| (0..opts.nx).map(move |ix| (ix, iy)))
        .collect();
    grid.cells = cells
        .par_iter()
        .map(|&(ix, iy)| cell_status(spec, &r, grid.center(ix, iy), &opts.pipeline))
        .collect::<Result<Vec<_>>>()?;
    Ok(grid)
}

/// Rank1 where any grid is Rank1, else Infeasible where any is, else
/// HigherRank.
pub fn union_grid(grids: &[HeatmapGrid]) -> Option<HeatmapGrid> {
    let first = grids.first()?;
    let cells = (0..first.cells.len())
        .map(|k| {
            let s: Vec<CellStatus> = grids.iter().map(|g| g.cells[k]).collect();
            if s.contains(&CellStatus::Rank1) {
                CellStatus::Rank1
            } else if s.contains(&CellStatus::Infeasible) {
                CellStatus::Infeasible
            } else {
                CellStatus::HigherRank
            }
        })
        .collect();
    Some(HeatmapGrid {
        cells,
        reference: None,
        ..first.clone()
    })
}

#[derive(Debug, Clone)]
pub struct Heatmap {
    pub per_reference: Vec<HeatmapGrid>,
    pub union: HeatmapGrid,
}

/// Grids for references `seed, seed + 1, ...` and their union.
pub fn run_heatmap(spec: &ChainSpec, opts: &HeatmapOptions) -> Result<Heatmap> {
    if opts.references == 0 {
        return Err(CoreError::Precondition("at least one reference".into()));
    }
    let per_reference = (0..opts.references)
        .map(|k| {
            let Reference::Configuration(c) =
                random_reference(spec, opts.seed.wrapping_add(k as u64))
            else {
                unreachable!("random references are configurations")
            };
            heatmap_for_reference(spec, &c, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let union = union_grid(&per_reference).expect("nonempty");
    Ok(Heatmap {
        per_reference,
        union,
    })
}
