use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qcqp_core::geometry::{map_cube_points, sample_uniform_sphere};
use qcqp_core::harness::{
    self, generate_problem_with, reference_solution, run_sweep, sample_boundary, solve_pipeline, ExperimentConfig,
    ProblemOptions, Sampler, Structure,
};
use qcqp_core::linearizer::{default_points_per_ellipsoid, QcqpProblem};
use qcqp_core::nets::{generate_net, sample_uniform_cube, NetConfig};
use qcqp_core::oracle::{solve_exact_bisection, solve_grid_bruteforce};
use qcqp_core::qpsolver::{SolverConfig, Status};
use qcqp_core::Error;
use serde_json::json;

const EXIT_INVALID: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

#[derive(Parser)]
#[command(name = "qcqp", version, about = "Ellipsoid-constrained QPs solved through tangent-plane linearization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random problem as JSON.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leave out the box constraints.
        #[arg(long)]
        no_box: bool,
        /// Diagonal A and B (for very large n).
        #[arg(long)]
        diagonal: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linearize and solve a problem file; prints solution and metrics as JSON.
    Solve {
        problem: PathBuf,
        #[arg(long = "N")]
        n_points: Option<usize>,
        #[arg(long, value_enum, default_value_t = SamplerArg::Net)]
        sampler: SamplerArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        solver: SolverArgs,
        /// Also compute the exact solution when an oracle applies.
        #[arg(long)]
        reference: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact solution: dual bisection, or grid search with --grid.
    Oracle {
        problem: PathBuf,
        /// Grid points per axis; forces the grid oracle (n <= 3).
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment config (JSON) and write its metrics CSV.
    Sweep {
        config: PathBuf,
        /// Overrides the output path of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit cube, sphere or ellipsoid boundary points as CSV.
    Points {
        #[arg(long)]
        n: usize,
        #[arg(long = "N")]
        n_points: usize,
        #[arg(long, value_enum, default_value_t = SamplerArg::Net)]
        sampler: SamplerArg,
        #[arg(long, value_enum, default_value_t = Stage::Ellipsoid)]
        stage: Stage,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Problem whose first ellipsoid receives the points; a generated
        /// problem with the same seed is used otherwise.
        #[arg(long)]
        problem: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Net,
    UniformCube,
    UniformSphere,
}

impl From<SamplerArg> for Sampler {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Net => Sampler::Net,
            SamplerArg::UniformCube => Sampler::UniformCube,
            SamplerArg::UniformSphere => Sampler::UniformSphere,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Cube,
    Sphere,
    Ellipsoid,
}

#[derive(clap::Args)]
struct SolverArgs {
    #[arg(long)]
    eps_abs: Option<f64>,
    #[arg(long)]
    eps_rel: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Skip the active-set polish of the ADMM iterate.
    #[arg(long)]
    no_polish: bool,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Some(v) = self.eps_abs {
            cfg.eps_abs = v;
        }
        if let Some(v) = self.eps_rel {
            cfg.eps_rel = v;
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        cfg.polish = !self.no_polish;
        cfg
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Cell { source, .. } => exit_code(source),
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::Io(_) | Error::Csv(_) | Error::Factorization(_) | Error::QualityNotAttained { .. } => 1,
        _ => EXIT_INVALID,
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn open_output(out: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn read_input(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))
}

fn read_problem(path: &Path) -> Result<QcqpProblem, Error> {
    QcqpProblem::from_json(&read_input(path)?)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Gen { n, seed, no_box, diagonal, out } => {
            let opts = ProblemOptions {
                with_box: !no_box,
                structure: if diagonal { Structure::Diagonal } else { Structure::Dense },
            };
            let p = generate_problem_with(n, seed, &opts)?;
            write_output(out.as_deref(), &p.to_json()?)?;
            Ok(0)
        }
        Command::Solve { problem, n_points, sampler, seed, solver, reference, out } => {
            let p = read_problem(&problem)?;
            let cfg = solver.config();
            let n_points = n_points.unwrap_or_else(|| default_points_per_ellipsoid(p.dim()));
            let (report, mut row) = solve_pipeline(&p, sampler.into(), n_points, seed, &cfg)?;
            if reference {
                if let Some(exact) = reference_solution(&p, usize::MAX)? {
                    row.set_reference(&report.x, &exact);
                }
            }
            let doc = json!({
                "x": report.x,
                "objective": report.objective,
                "status": report.status.as_str(),
                "iterations": report.iterations,
                "primal_residual": report.primal_residual,
                "dual_residual": report.dual_residual,
                "polished": report.polished,
                "metrics": row,
            });
            write_output(out.as_deref(), &serde_json::to_string_pretty(&doc)?)?;
            Ok(match report.status {
                Status::Optimal => 0,
                Status::MaxIter => EXIT_NOT_CONVERGED,
                Status::Infeasible => EXIT_INFEASIBLE,
            })
        }
        Command::Oracle { problem, grid, out } => {
            let p = read_problem(&problem)?;
            let sol = match grid {
                Some(res) => solve_grid_bruteforce(&p, res)?,
                None => solve_exact_bisection(&p)?,
            };
            let doc = json!({
                "x": sol.x_star,
                "lambda": sol.lambda_star,
                "objective": sol.objective,
                "active": sol.active,
                "error_bound": sol.error_bound,
            });
            write_output(out.as_deref(), &serde_json::to_string_pretty(&doc)?)?;
            Ok(0)
        }
        Command::Sweep { config, out } => {
            let mut cfg: ExperimentConfig = serde_json::from_str(&read_input(&config)?)?;
            if let Some(o) = out {
                cfg.output = o;
            }
            let summary = run_sweep(&cfg)?;
            eprintln!(
                "{} rows written to {} ({} computed, {} resumed)",
                summary.rows,
                cfg.output.display(),
                summary.computed,
                summary.skipped
            );
            Ok(0)
        }
        Command::Points { n, n_points, sampler, stage, seed, problem, out } => {
            let sampler: Sampler = sampler.into();
            let w = open_output(out.as_deref())?;
            let cube = || -> Result<_, Error> {
                match sampler {
                    Sampler::Net => {
                        if !n_points.is_power_of_two() {
                            return Err(Error::invalid(format!("net sampler needs N to be a power of 2, got {n_points}")));
                        }
                        generate_net(&NetConfig::sobol(n_points.trailing_zeros(), n - 1)?)
                    }
                    _ => sample_uniform_cube(n_points, n - 1, seed),
                }
            };
            if n < 2 {
                return Err(Error::invalid("points need n >= 2"));
            }
            match stage {
                Stage::Cube => {
                    if sampler == Sampler::UniformSphere {
                        return Err(Error::invalid("the uniform-sphere sampler has no cube stage"));
                    }
                    cube()?.points.write_csv(w)?
                }
                Stage::Sphere => {
                    let s = match sampler {
                        Sampler::UniformSphere => sample_uniform_sphere(n_points, n, seed)?,
                        _ => map_cube_points(&cube()?)?,
                    };
                    s.points.write_csv(w)?
                }
                Stage::Ellipsoid => {
                    let p = match problem {
                        Some(path) => read_problem(&path)?,
                        None => harness::generate_problem(n, seed)?,
                    };
                    if p.dim() != n {
                        return Err(Error::dims(format!("--n {n} but the problem has dimension {}", p.dim())));
                    }
                    let sets = sample_boundary(&p, sampler, n_points, seed)?;
                    sets[0].points.write_csv(w)?
                }
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
