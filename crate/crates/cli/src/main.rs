//! `sosik`: certified inverse kinematics from the command line.
//!
//! Exit codes of `solve`: 0 global optimum, 2 infeasible, 3 indeterminate,
//! 1 on any error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sosik_core::campaign::{
    parse_solvers, run_bench, run_heatmap, BenchOptions, BoundingBox, CellStatus, GoalKind,
    HeatmapGrid, HeatmapOptions,
};
use sosik_core::chain::{ChainSpec, Configuration, Goal};
use sosik_core::extract::Certificate;
use sosik_core::pipeline::{solve_ik_traced, solve_with_reference, PipelineOptions};
use sosik_core::qcqp::Reference;
use sosik_sdp::sdpa::{parse_sdpa_solution, write_sdpa};
use sosik_sdp::SdpProblem;

#[derive(Parser)]
#[command(
    name = "sosik",
    version,
    about = "Certified inverse kinematics for spherical-joint chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one IK instance and write the result as JSON.
    Solve(SolveArgs),
    /// Scan a planar workspace grid for rank-one regions.
    Heatmap(HeatmapArgs),
    /// Compare the certified pipeline with the local solver on random goals.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RelaxationArgs {
    /// Multiplier degree of the relaxation.
    #[arg(long, default_value_t = 1)]
    d: usize,
    /// Relative eigenvalue threshold for the rank decision.
    #[arg(long, default_value_t = 1e-5)]
    rank_tol: f64,
    /// Project extracted points onto the variety before the feasibility check.
    #[arg(long)]
    polish: bool,
}

impl RelaxationArgs {
    fn pipeline(&self) -> PipelineOptions {
        let mut o = PipelineOptions {
            d: self.d,
            ..Default::default()
        };
        o.certify.rank_tol = self.rank_tol;
        o.certify.polish = self.polish;
        o
    }
}

#[derive(Args)]
struct SolveArgs {
    /// Chain spec (JSON).
    spec: PathBuf,
    /// Goal end point, comma separated; replaces the spec's goal.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    goal: Option<Vec<f64>>,
    /// Second-to-last point, making the goal a pose.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        requires = "goal"
    )]
    goal_prev: Option<Vec<f64>>,
    /// Radius, making the goal a ball around `--goal`.
    #[arg(long, requires = "goal", conflicts_with = "goal_prev")]
    goal_radius: Option<f64>,
    /// `random`, or a JSON file holding a configuration (`{"points": ...}`)
    /// or a plain vector of the relaxation's variables.
    #[arg(long, default_value = "random")]
    reference: String,
    /// Random references tried before giving up.
    #[arg(long, default_value_t = 5)]
    refs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the reach shortcut and let the relaxation decide.
    #[arg(long)]
    no_reach_check: bool,
    #[command(flatten)]
    relaxation: RelaxationArgs,
    /// Write the last relaxation in SDPA sparse format.
    #[arg(long)]
    export_sdpa: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    spec: PathBuf,
    #[arg(long, num_args = 2, value_names = ["NX", "NY"], default_values_t = [40, 40])]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    refs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bounding box; defaults to the reach square around the base.
    #[arg(long, num_args = 4, value_names = ["XMIN", "XMAX", "YMIN", "YMAX"], allow_hyphen_values = true)]
    bbox: Option<Vec<f64>>,
    #[command(flatten)]
    relaxation: RelaxationArgs,
    /// Prefix of the CSV and PPM files.
    #[arg(long, default_value = "heatmap")]
    out: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum GoalArg {
    Position,
    Pose,
}

#[derive(Args)]
struct BenchArgs {
    spec: PathBuf,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Comma-separated subset of `sos,local`.
    #[arg(long, default_value = "sos,local")]
    solvers: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "pose")]
    goal: GoalArg,
    /// Attempts of the local solver per goal.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[command(flatten)]
    relaxation: RelaxationArgs,
    /// Per-instance CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full statistics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn load_spec(path: &Path) -> Result<ChainSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ChainSpec::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn apply_goal(spec: ChainSpec, a: &SolveArgs) -> Result<ChainSpec> {
    let Some(x_n) = a.goal.clone() else {
        return Ok(spec);
    };
    let goal = match (&a.goal_prev, a.goal_radius) {
        (Some(prev), _) => Goal::Pose {
            x_nm1: prev.clone(),
            x_n,
        },
        (None, Some(radius)) => Goal::Ball {
            center: x_n,
            radius,
        },
        (None, None) => Goal::Position { x_n },
    };
    Ok(spec.with_goal(goal)?)
}

fn load_reference(path: &str) -> Result<Reference> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading reference {path}"))?;
    if let Ok(v) = serde_json::from_str::<Vec<f64>>(&text) {
        return Ok(Reference::Vector(v));
    }
    let cfg: Configuration =
        serde_json::from_str(&text).with_context(|| format!("parsing reference {path}"))?;
    Ok(Reference::Configuration(cfg))
}

/// Solves `problem` with the external SDPA-format binary and returns its
/// dual objective `b'y`.
fn external_objective(bin: &str, problem: &SdpProblem) -> Result<f64> {
    let dir = std::env::temp_dir().join(format!("sosik-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let input = dir.join("relaxation.dat-s");
    let output = dir.join("relaxation.out");
    write_sdpa(problem, BufWriter::new(File::create(&input)?))?;
    let status = Command::new(bin)
        .arg(&input)
        .arg(&output)
        .status()
        .with_context(|| format!("running {bin}"))?;
    if !status.success() {
        bail!("{bin} exited with {status}");
    }
    let text = std::fs::read_to_string(&output)?;
    let sol = parse_sdpa_solution(&text, &problem.blocks)?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok(sol.dual.iter().zip(&problem.rhs).map(|(y, b)| y * b).sum())
}

fn cmd_solve(a: &SolveArgs) -> Result<ExitCode> {
    let spec = apply_goal(load_spec(&a.spec)?, a)?;
    let mut opts = a.relaxation.pipeline();
    opts.seed = a.seed;
    opts.max_references = a.refs;
    opts.reach_check = !a.no_reach_check;

    let mut last = None;
    let out = if a.reference == "random" {
        solve_ik_traced(&spec, &opts, |_, s| {
            last = Some((s.program.sdp.clone(), s.solution.dual_objective))
        })?
    } else {
        let reference = load_reference(&a.reference)?;
        let (out, solved) = solve_with_reference(&spec, &reference, &opts)?;
        last = Some((solved.program.sdp.clone(), solved.solution.dual_objective));
        out
    };
    let mut value = serde_json::to_value(&out)?;
    if let Some((p, ours)) = &last {
        if let Some(path) = &a.export_sdpa {
            write_sdpa(p, BufWriter::new(File::create(path)?))?;
        }
        if let Ok(bin) = std::env::var("SOSIK_EXTERNAL_SDP") {
            let ext = external_objective(&bin, p)?;
            let agrees = (ext - ours).abs() <= 1e-6 * (1.0 + ours.abs());
            value["external_check"] =
                json!({ "solver": bin, "dual_objective": ext, "agrees": agrees });
        }
    }
    let text = serde_json::to_string_pretty(&value)?;
    match &a.out {
        Some(path) => std::fs::write(path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))?,
        None => {
            let _ = writeln!(std::io::stdout().lock(), "{text}");
        }
    }
    Ok(ExitCode::from(match out.certificate {
        Certificate::GlobalOptimum => 0,
        Certificate::Infeasible => 2,
        Certificate::Indeterminate => 3,
    }))
}

fn write_grid(grid: &HeatmapGrid, stem: &str) -> Result<()> {
    grid.write_csv(BufWriter::new(File::create(format!("{stem}.csv"))?))?;
    grid.write_ppm(BufWriter::new(File::create(format!("{stem}.ppm"))?))?;
    Ok(())
}

fn cmd_heatmap(a: &HeatmapArgs) -> Result<ExitCode> {
    let spec = load_spec(&a.spec)?;
    if spec.dimension != 2 {
        bail!("heatmaps need a planar (dimension 2) chain");
    }
    let bbox = a.bbox.as_ref().map(|b| BoundingBox {
        x_min: b[0],
        x_max: b[1],
        y_min: b[2],
        y_max: b[3],
    });
    let opts = HeatmapOptions {
        nx: a.grid[0],
        ny: a.grid[1],
        references: a.refs,
        seed: a.seed,
        bbox,
        pipeline: a.relaxation.pipeline(),
    };
    let hm = run_heatmap(&spec, &opts)?;
    for (k, g) in hm.per_reference.iter().enumerate() {
        write_grid(g, &format!("{}_ref{k}", a.out))?;
    }
    write_grid(&hm.union, &format!("{}_union", a.out))?;
    let line = |name: &str, g: &HeatmapGrid| {
        println!(
            "{name:<8} rank1 {:>5}  higher-rank {:>5}  infeasible {:>5}",
            g.count(CellStatus::Rank1),
            g.count(CellStatus::HigherRank),
            g.count(CellStatus::Infeasible)
        )
    };
    for (k, g) in hm.per_reference.iter().enumerate() {
        line(&format!("ref{k}"), g);
    }
    line("union", &hm.union);
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: &BenchArgs) -> Result<ExitCode> {
    let spec = load_spec(&a.spec)?;
    let mut opts = BenchOptions {
        instances: a.instances,
        solvers: parse_solvers(&a.solvers)?,
        seed: a.seed,
        goal: match a.goal {
            GoalArg::Position => GoalKind::Position,
            GoalArg::Pose => GoalKind::Pose,
        },
        pipeline: a.relaxation.pipeline(),
        ..Default::default()
    };
    opts.local.restarts = a.restarts;
    if a.instances == 0 {
        bail!("--instances must be at least 1");
    }
    let stats = run_bench(&spec, &opts)?;
    if let Some(path) = &a.out {
        stats.write_csv(BufWriter::new(File::create(path)?))?;
    }
    if let Some(path) = &a.json {
        std::fs::write(path, serde_json::to_string_pretty(&stats)?)?;
    }
    print!("{}", stats.summary_table());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Solve(a) => cmd_solve(a),
        Cmd::Heatmap(a) => cmd_heatmap(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn goal_flags_build_each_goal_kind() {
        let spec = ChainSpec::bundled_planar_10dof();
        let parse = |args: &[&str]| {
            let cli = Cli::try_parse_from(args).unwrap();
            let Cmd::Solve(a) = cli.command else {
                unreachable!()
            };
            apply_goal(spec.clone(), &a).unwrap().goal
        };
        assert!(matches!(
            parse(&["sosik", "solve", "s.json", "--goal", "1,-2"]),
            Goal::Position { .. }
        ));
        assert!(matches!(
            parse(&[
                "sosik",
                "solve",
                "s.json",
                "--goal",
                "1,2",
                "--goal-prev",
                "1,0"
            ]),
            Goal::Pose { .. }
        ));
        assert!(matches!(
            parse(&[
                "sosik",
                "solve",
                "s.json",
                "--goal",
                "1,2",
                "--goal-radius",
                "0.5"
            ]),
            Goal::Ball { .. }
        ));
    }

    #[test]
    fn reference_file_accepts_vector_or_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("v.json");
        std::fs::write(&v, "[1.0, 2.0]").unwrap();
        assert!(matches!(
            load_reference(v.to_str().unwrap()).unwrap(),
            Reference::Vector(_)
        ));
        let c = dir.path().join("c.json");
        std::fs::write(&c, r#"{"points": [[0.0, 0.0], [1.0, 0.0]]}"#).unwrap();
        assert!(matches!(
            load_reference(c.to_str().unwrap()).unwrap(),
            Reference::Configuration(_)
        ));
    }
}
