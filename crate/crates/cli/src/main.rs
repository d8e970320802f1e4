use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lqstab::error::{Error, Result};
use lqstab::harness::{self, fmt_f64, ExperimentConfig, MonteCarloOptions, WORKERS_ENV};
use lqstab::identification::{self, estimate_closed_loop};
use lqstab::riccati;
use lqstab::stabilization::{self, matrix_from_rows, run_stabilization};
use lqstab::system::{self, SimOptions, Trajectory};
use nalgebra::DMatrix;

#[derive(Parser)]
#[command(
    name = "lqstab",
    version,
    about = "Stabilization of unknown linear systems by random feedbacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Master seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Output file; stdout when absent and the config names none.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Riccati equation for the configured system.
    Riccati(Common),
    /// Simulate the system under `simulate.feedback` and write the trajectory CSV.
    Simulate(Common),
    /// Least-squares estimate of the closed-loop matrix.
    Identify {
        #[command(flatten)]
        common: Common,
        /// Read the trajectory instead of simulating one.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Eigenvalues, regularity and unit-circle check.
    Spectral(Common),
    /// One stabilization run followed by certification.
    Stabilize(Common),
    /// Monte Carlo batch of stabilization runs.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        /// Add a wall-time column (the report is then no longer reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Empirical quantile of the normalized Gram eigenvalue.
    PsiEstimate(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lqstab: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let cfg = harness::parse_config_file(&common.config)?;
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn workers(common: &Common) -> Result<usize> {
    match common.workers {
        Some(0) => Err(Error::Config("--workers must be positive".into())),
        Some(w) => Ok(w),
        None => Ok(harness::default_workers()),
    }
}

fn emit(text: &str, flag: &Option<PathBuf>, configured: &Option<String>) -> Result<()> {
    match flag.as_deref().or(configured.as_deref().map(Path::new)) {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn matrix_block(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "[{name}]");
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
}

fn analyzed_matrix(cfg: &ExperimentConfig) -> Result<DMatrix<f64>> {
    match &cfg.file.spectral.matrix {
        Some(rows) => matrix_from_rows(rows),
        None => cfg.theta.closed_loop(&cfg.feedback),
    }
}

fn sim_options(cfg: &ExperimentConfig) -> SimOptions {
    cfg.stabilization.sim
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Riccati(c) => {
            let cfg = load(&c)?;
            let sol = riccati::solve_dare(&cfg.theta, &cfg.cost, &cfg.riccati)?;
            let closed = cfg.theta.closed_loop(&sol.gain)?;
            let mut out = String::from("# lqstab-riccati v1\n");
            let _ = writeln!(out, "iterations={}", sol.iterations);
            let _ = writeln!(out, "converged={}", sol.converged);
            let _ = writeln!(out, "fixed_point_residual={}", fmt_f64(sol.fixed_point_residual));
            let _ = writeln!(out, "lyapunov_residual={}", fmt_f64(sol.lyapunov_residual));
            let _ = writeln!(
                out,
                "closed_loop_spectral_radius={}",
                fmt_f64(lqstab::linalg::spectral_radius(&closed)?)
            );
            if let Some(noise) = &cfg.noise {
                let j = riccati::optimal_average_cost(&sol.k, noise.covariance())?;
                let _ = writeln!(out, "optimal_average_cost={}", fmt_f64(j));
            }
            let samples = cfg.file.riccati.radius_samples;
            if samples > 0 {
                let w = workers(&c)?;
                let radius = harness::with_workers(w, || {
                    riccati::estimate_stabilizing_radius(&cfg.theta, &cfg.cost, samples, cfg.seed())
                })??;
                let _ = writeln!(out, "stabilizing_radius={}", fmt_f64(radius));
            }
            matrix_block(&mut out, "K", &sol.k);
            matrix_block(&mut out, "L", &sol.gain);
            emit(&out, &c.out, &None)
        }
        Command::Simulate(c) => {
            let cfg = load(&c)?;
            let traj = system::simulate(
                &cfg.theta,
                &cfg.feedback,
                &cfg.x0,
                cfg.file.simulate.steps,
                cfg.noise.as_ref(),
                cfg.seed(),
                &sim_options(&cfg),
            )?;
            emit(&traj.to_csv(), &c.out, &cfg.file.output.trajectory)
        }
        Command::Identify { common: c, trajectory } => {
            let cfg = load(&c)?;
            let traj = match trajectory {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                    Trajectory::from_csv(&text, cfg.feedback.clone())?
                }
                None => system::simulate(
                    &cfg.theta,
                    &cfg.feedback,
                    &cfg.x0,
                    cfg.file.simulate.steps,
                    cfg.noise.as_ref(),
                    cfg.seed(),
                    &sim_options(&cfg),
                )?,
            };
            let est = estimate_closed_loop(&traj)?;
            let mut out = String::from("# lqstab-identify v1\n");
            let _ = writeln!(out, "transitions={}", est.n);
            let _ = writeln!(out, "gram_min_eig={}", fmt_f64(est.gram_min_eig));
            let _ = writeln!(out, "gram_max_eig={}", fmt_f64(est.gram_max_eig));
            let _ = writeln!(out, "precision_bits={}", est.precision);
            matrix_block(&mut out, "D_hat", &est.d_hat);
            emit(&out, &c.out, &None)
        }
        Command::Spectral(c) => {
            let cfg = load(&c)?;
            let d = analyzed_matrix(&cfg)?;
            let report =
                identification::spectral_report_with(&d, cfg.file.spectral.rank_tol, cfg.file.spectral.unit_tol)?;
            emit(&report.to_text(), &c.out, &None)
        }
        Command::Stabilize(c) => {
            let cfg = load(&c)?;
            let set = run_stabilization(
                &cfg.theta,
                cfg.noise.as_ref(),
                cfg.file.algorithm.epsilon0,
                cfg.file.algorithm.delta,
                &cfg.sizing,
                cfg.seed(),
                &cfg.x0,
                &cfg.stabilization,
            )?;
            let cert = stabilization::certify_with(&cfg.theta, &set.theta_hat, &cfg.cost, &cfg.riccati)?;
            eprintln!(
                "certified={} spectral_radius={} empty={} epsilon_tilde={}",
                cert.certified,
                fmt_f64(cert.spectral_radius),
                set.empty,
                fmt_f64(set.epsilon_tilde)
            );
            let mut json = set.to_json();
            json.push('\n');
            emit(&json, &c.out, &cfg.file.output.set)
        }
        Command::Montecarlo { common: c, timing } => {
            let cfg = load(&c)?;
            let opts = MonteCarloOptions {
                workers: Some(workers(&c)?),
                timing,
            };
            let report = harness::run_montecarlo_with(&cfg, &opts)?;
            let a = &report.aggregate;
            eprintln!(
                "replicates={} successes={} frequency={}",
                a.replicates,
                a.successes,
                a.frequency.map_or("undefined".into(), |f| f.to_string())
            );
            emit(&report.to_csv(), &c.out, &cfg.file.output.report)
        }
        Command::PsiEstimate(c) => {
            let cfg = load(&c)?;
            let noise = cfg
                .noise
                .as_ref()
                .ok_or_else(|| Error::Config("psi-estimate needs a noise model (noise.kind != \"none\")".into()))?;
            let d = analyzed_matrix(&cfg)?;
            let ps = &cfg.file.psi;
            let w = workers(&c)?;
            let psi = harness::with_workers(w, || {
                identification::estimate_psi(&d, noise, ps.delta, ps.n_steps, ps.n_mc, cfg.seed())
            })??;
            let mut out = String::from("# lqstab-psi v1\n");
            let _ = writeln!(out, "delta={}", fmt_f64(ps.delta));
            let _ = writeln!(out, "n_steps={}", ps.n_steps);
            let _ = writeln!(out, "n_mc={}", ps.n_mc);
            let _ = writeln!(out, "psi={}", fmt_f64(psi));
            emit(&out, &c.out, &None)
        }
    }
}
