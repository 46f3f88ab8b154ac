use std::path::{Path, PathBuf};
use std::process::ExitCode;

use barrier_mpc::barrier::{bounds_report, sampled_sigmas, solve_barrier, BarrierConfig};
use barrier_mpc::rollout::{
    closed_loop, export_dataset, fmt_f64, sample_initial_states, smoothness_sweep, sweep_states, write_metadata,
    write_sweep_csv, BarrierPolicy, ExplicitPolicy, Policy, RandomizedPolicy, SweepOptions, Trajectory,
};
use barrier_mpc::smoothing::{randomized_policy, NoiseDistribution, SmoothingSpec};
use barrier_mpc::verify::{run_suite, VerifyOptions};
use barrier_mpc::{
    condense, enumerate_pieces, piece_gains, solve_qp, CondensedQp, Error, Matrix, MpcSpec, PieceCache, StateGrid,
    Vector,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

mod parse;

use parse::{parse_parameters, parse_vector};

#[derive(Parser, Debug)]
#[command(name = "barrier-mpc", version, about = "Log-barrier MPC, explicit MPC and randomized smoothing")]
struct Cli {
    /// Problem file (JSON); the built-in double integrator when omitted.
    #[arg(long, global = true)]
    problem: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, env = "BARRIER_MPC_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the condensed QP matrices as JSON.
    Condense,
    /// Solve the barrier problem at one state.
    Solve {
        #[arg(long, allow_hyphen_values = true)]
        eta: f64,
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
    },
    /// Solve the constrained QP at one state and report its affine piece.
    Explicit {
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
    },
    /// Enumerate active sets over a square grid covering X.
    Pieces {
        #[arg(long, default_value_t = 500)]
        grid: usize,
    },
    /// Randomized-smoothing estimate of the first input.
    RsSolve {
        #[command(flatten)]
        noise: NoiseArgs,
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
    },
    /// Simulate the closed loop.
    Rollout {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Smoothness estimates across a parameter range.
    Sweep {
        /// Barrier weights, `start:stop:logN` or a comma list.
        #[arg(long, conflicts_with = "eps", required_unless_present = "eps")]
        etas: Option<String>,
        /// Smoothing magnitudes, same syntax.
        #[arg(long)]
        eps: Option<String>,
        #[arg(long, default_value_t = 20)]
        grid: usize,
        #[arg(long, default_value_t = 4)]
        directions: usize,
        /// Smallest inner radius of the input polytope at swept states.
        #[arg(long, default_value_t = 0.1, allow_hyphen_values = true)]
        margin: f64,
        #[arg(long, default_value = "gaussian")]
        dist: NoiseDistribution,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Evaluate every bound at one state.
    Bounds {
        #[arg(long, allow_hyphen_values = true)]
        eta: f64,
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        /// Grid used to sample active sets.
        #[arg(long, default_value_t = 100)]
        grid: usize,
    },
    /// Run the invariant suite.
    Verify {
        #[arg(long, default_value_t = 8)]
        grid: usize,
    },
    /// Roll out a policy from sampled initial states and write the dataset.
    ExportDataset {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, default_value_t = 50)]
        trajectories: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Initial states are drawn from this fraction of the box around X.
        #[arg(long, default_value_t = 0.8, allow_hyphen_values = true)]
        scale: f64,
    },
}

#[derive(Args, Debug)]
struct NoiseArgs {
    #[arg(long, default_value = "gaussian")]
    dist: NoiseDistribution,
    #[arg(long, allow_hyphen_values = true)]
    eps: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyKind {
    Barrier,
    Explicit,
    Randomized,
}

#[derive(Args, Debug)]
struct PolicyArgs {
    #[arg(long, value_enum, default_value = "barrier")]
    policy: PolicyKind,
    #[arg(long, default_value_t = 1e-2, allow_hyphen_values = true)]
    eta: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    eps: f64,
    #[arg(long, default_value = "gaussian")]
    dist: NoiseDistribution,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Skip Jacobians of the randomized policy.
    #[arg(long)]
    no_jacobian: bool,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Dataset(_)
            | Error::InvalidArgument(_)
            | Error::Dimension(_) => 1,
            Error::Policy { source, .. } if matches!(**source, Error::Dimension(_)) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    configure_jobs(cli.jobs)?;
    let spec = match &cli.problem {
        Some(path) => MpcSpec::from_file(path).map_err(|e| usage(format!("{}: {e}", path.display())))?,
        None => MpcSpec::double_integrator(),
    };
    let qp = condense(&spec)?;
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| usage(format!("{}: {e}", cli.out_dir.display())))?;
    let ctx = Context {
        spec: &spec,
        qp: &qp,
        seed: cli.seed,
        out_dir: &cli.out_dir,
    };
    match cli.command {
        Command::Condense => ctx.condense_cmd(),
        Command::Solve { eta, x0 } => ctx.solve_cmd(eta, &x0),
        Command::Explicit { x0 } => ctx.explicit_cmd(&x0),
        Command::Pieces { grid } => ctx.pieces_cmd(grid),
        Command::RsSolve { noise, x0 } => ctx.rs_solve_cmd(&noise, &x0),
        Command::Rollout { policy, x0, steps } => ctx.rollout_cmd(&policy, &x0, steps),
        Command::Sweep {
            etas,
            eps,
            grid,
            directions,
            margin,
            dist,
            samples,
        } => ctx.sweep_cmd(etas.as_deref(), eps.as_deref(), grid, directions, margin, dist, samples),
        Command::Bounds { eta, x0, grid } => ctx.bounds_cmd(eta, x0.as_deref(), grid),
        Command::Verify { grid } => ctx.verify_cmd(grid),
        Command::ExportDataset {
            policy,
            trajectories,
            steps,
            scale,
        } => ctx.export_cmd(&policy, trajectories, steps, scale),
    }
}

#[cfg(feature = "parallel")]
fn configure_jobs(jobs: Option<usize>) -> CmdResult {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(usage("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_jobs(jobs: Option<usize>) -> CmdResult {
    if jobs == Some(0) {
        return Err(usage("--jobs must be positive"));
    }
    Ok(())
}

fn csv_row(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(fmt_f64).collect::<Vec<_>>().join(",")
}

fn print_matrix(m: &Matrix) {
    for row in m.row_iter() {
        println!("{}", csv_row(row.iter().copied()));
    }
}

fn matrix_json(m: &Matrix) -> serde_json::Value {
    json!(m.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn square_grid(spec: &MpcSpec, n: usize) -> Result<StateGrid, Failure> {
    if n == 0 {
        return Err(usage("grid resolution must be positive"));
    }
    let (lo, hi) = spec.x_set.bounding_box()?;
    let dim = spec.state_dim();
    Ok(StateGrid::new(lo.iter().copied().collect(), hi.iter().copied().collect(), vec![n; dim])?)
}

struct Context<'a> {
    spec: &'a MpcSpec,
    qp: &'a CondensedQp,
    seed: u64,
    out_dir: &'a Path,
}

impl Context<'_> {
    fn state(&self, text: &str) -> Result<Vector, Failure> {
        let x = parse_vector(text).map_err(usage)?;
        if x.len() != self.spec.state_dim() {
            return Err(usage(format!(
                "--x0 has {} entries, the problem has {} states",
                x.len(),
                self.spec.state_dim()
            )));
        }
        Ok(x)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn condense_cmd(&self) -> CmdResult {
        let qp = self.qp;
        let w: Vec<f64> = qp.w().iter().copied().collect();
        let doc = json!({
            "H": matrix_json(qp.h()),
            "F": matrix_json(qp.f()),
            "G": matrix_json(qp.g()),
            "P": matrix_json(qp.p()),
            "w": w,
            "decision_rows": qp.decision_rows(),
        });
        let path = self.path("condensed.json");
        write_metadata(&path, &doc)?;
        println!("n={}", qp.n());
        println!("m={}", qp.m());
        println!("decision_rows={}", qp.n_decision_rows());
        println!("written={}", path.display());
        Ok(())
    }

    fn solve_cmd(&self, eta: f64, x0: &str) -> CmdResult {
        let x0 = self.state(x0)?;
        let cfg = BarrierConfig::new(eta)?;
        let sol = solve_barrier(self.qp, &cfg, &x0, None)?;
        if !sol.converged {
            return Err(Error::NotConverged {
                iterations: sol.newton_iters,
                decrement: sol.decrement,
            }
            .into());
        }
        println!("u0={}", csv_row(sol.first_input(self.qp).iter().copied()));
        println!("u={}", csv_row(sol.u_eta.iter().copied()));
        println!("min_residual={}", fmt_f64(sol.min_residual(self.qp)));
        println!("newton_iters={}", sol.newton_iters);
        println!("jacobian");
        print_matrix(&sol.jacobian);
        Ok(())
    }

    fn explicit_cmd(&self, x0: &str) -> CmdResult {
        let x0 = self.state(x0)?;
        let sol = solve_qp(self.qp, &x0)?;
        let du = self.qp.input_dim();
        println!("u0={}", csv_row(sol.u_star.rows(0, du).iter().copied()));
        println!("u={}", csv_row(sol.u_star.iter().copied()));
        println!("active_set={}", sol.sigma.to_bit_string());
        println!("objective={}", fmt_f64(sol.objective));
        match piece_gains(self.qp, &sol.sigma) {
            Ok(piece) => {
                println!("gain");
                print_matrix(&piece.gain);
                println!("offset={}", csv_row(piece.offset.iter().copied()));
            }
            Err(e) => println!("gain=unavailable ({e})"),
        }
        Ok(())
    }

    fn pieces_cmd(&self, grid: usize) -> CmdResult {
        let grid = square_grid(self.spec, grid)?;
        let start = std::time::Instant::now();
        let census = enumerate_pieces(self.qp, &grid);
        let path = self.path("pieces.csv");
        let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
        w.write_record(["sigma_bitmask", "count", "K_frobenius_norm"])
            .map_err(Error::from)?;
        for (sigma, count) in &census.counts {
            let norm = piece_gains(self.qp, sigma).map_or(f64::NAN, |p| p.gain.norm());
            w.write_record([sigma.to_bit_string(), count.to_string(), fmt_f64(norm)])
                .map_err(Error::from)?;
        }
        w.flush().map_err(Error::from)?;
        println!("grid_points={}", census.grid_points);
        println!("infeasible={}", census.infeasible);
        println!("failures={}", census.failures);
        println!("pieces={}", census.n_pieces());
        println!("seconds={:.3}", start.elapsed().as_secs_f64());
        println!("written={}", path.display());
        Ok(())
    }

    fn rs_solve_cmd(&self, noise: &NoiseArgs, x0: &str) -> CmdResult {
        let x0 = self.state(x0)?;
        let rs = SmoothingSpec::new(noise.dist, noise.eps, noise.samples, self.seed)?;
        let est = randomized_policy(self.qp, &self.spec.x_set, &rs, &x0, None)?;
        println!("u0={}", csv_row(est.mean.iter().copied()));
        println!("stderr={}", csv_row(est.stderr.iter().copied()));
        println!("outside_fraction={}", fmt_f64(est.outside_fraction));
        println!("projected_fraction={}", fmt_f64(est.projected_fraction));
        println!("failed={}", est.failed);
        Ok(())
    }

    fn policy<'b>(&'b self, args: &PolicyArgs, cache: &'b PieceCache) -> Result<Box<dyn Policy + 'b>, Failure> {
        Ok(match args.policy {
            PolicyKind::Barrier => Box::new(BarrierPolicy {
                qp: self.qp,
                cfg: BarrierConfig::new(args.eta)?,
            }),
            PolicyKind::Explicit => Box::new(ExplicitPolicy {
                qp: self.qp,
                cache: Some(cache),
            }),
            PolicyKind::Randomized => Box::new(RandomizedPolicy {
                qp: self.qp,
                x_set: &self.spec.x_set,
                spec: SmoothingSpec::new(args.dist, args.eps, args.samples, self.seed)?,
                cache: Some(cache),
                step: 1e-4 * square_grid(self.spec, 2)?.extent(),
                with_jacobian: !args.no_jacobian,
            }),
        })
    }

    fn policy_config(&self, args: &PolicyArgs) -> serde_json::Value {
        match args.policy {
            PolicyKind::Barrier => json!({"policy": "barrier", "eta": args.eta}),
            PolicyKind::Explicit => json!({"policy": "explicit"}),
            PolicyKind::Randomized => json!({
                "policy": "randomized",
                "eps": args.eps,
                "distribution": args.dist.to_string(),
                "samples": args.samples,
                "jacobians": !args.no_jacobian,
            }),
        }
    }

    fn rollout_cmd(&self, args: &PolicyArgs, x0: &str, steps: usize) -> CmdResult {
        let x0 = self.state(x0)?;
        let cache = PieceCache::new();
        let policy = self.policy(args, &cache)?;
        let traj = closed_loop(self.spec, policy.as_ref(), &x0, steps)?;
        let path = self.path("rollout.csv");
        if traj.steps() > 0 {
            export_dataset(std::slice::from_ref(&traj), &path)?;
        }
        println!("policy={}", traj.policy_tag);
        println!("steps={}", traj.steps());
        println!("violations={}", traj.violations());
        println!("exited={}", traj.exited);
        println!("final_state={}", csv_row(traj.states.last().expect("initial state").iter().copied()));
        println!("replay_error={}", fmt_f64(traj.replay_error(self.spec)));
        println!("written={}", path.display());
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn sweep_cmd(
        &self,
        etas: Option<&str>,
        eps: Option<&str>,
        grid: usize,
        directions: usize,
        margin: f64,
        dist: NoiseDistribution,
        samples: usize,
    ) -> CmdResult {
        let grid = square_grid(self.spec, grid)?;
        let states = sweep_states(self.qp, &grid, margin);
        if states.is_empty() {
            return Err(usage("no swept state satisfies the margin"));
        }
        let opts = SweepOptions::for_grid(&grid, directions, self.seed);
        let (rows, name) = match (etas, eps) {
            (Some(text), _) => {
                let params = parse_parameters(text).map_err(usage)?;
                let rows = smoothness_sweep(
                    &params,
                    |eta| {
                        Ok(BarrierPolicy {
                            qp: self.qp,
                            cfg: BarrierConfig::new(eta)?,
                        })
                    },
                    &states,
                    &opts,
                )?;
                (rows, "sweep_barrier.csv")
            }
            (None, Some(text)) => {
                let params = parse_parameters(text).map_err(usage)?;
                let census = enumerate_pieces(self.qp, &grid);
                let cache = PieceCache::from_pieces(census.sigmas().filter_map(|s| piece_gains(self.qp, s).ok()));
                let rows = smoothness_sweep(
                    &params,
                    |e| {
                        Ok(RandomizedPolicy {
                            qp: self.qp,
                            x_set: &self.spec.x_set,
                            spec: SmoothingSpec::new(dist, e, samples, self.seed)?,
                            cache: Some(&cache),
                            step: opts.step,
                            with_jacobian: false,
                        })
                    },
                    &states,
                    &opts,
                )?;
                (rows, "sweep_randomized.csv")
            }
            (None, None) => return Err(usage("one of --etas or --eps is required")),
        };
        let path = self.path(name);
        write_sweep_csv(&path, &rows)?;
        println!("parameter,L0,L1,n_failures");
        for r in &rows {
            println!("{},{},{},{}", fmt_f64(r.parameter), fmt_f64(r.l0), fmt_f64(r.l1), r.n_failures);
        }
        eprintln!("states={} written={}", states.len(), path.display());
        Ok(())
    }

    fn bounds_cmd(&self, eta: f64, x0: Option<&str>, grid: usize) -> CmdResult {
        let x0 = match x0 {
            Some(text) => self.state(text)?,
            None => Vector::zeros(self.spec.state_dim()),
        };
        let cfg = BarrierConfig::new(eta)?;
        let census = enumerate_pieces(self.qp, &square_grid(self.spec, grid)?);
        let sigmas = sampled_sigmas(self.qp, census.sigmas());
        let report = bounds_report(self.qp, &cfg, &x0, &sigmas, self.seed)?;
        for (key, value) in report.fields() {
            println!("{key}={}", fmt_f64(value));
        }
        println!("sampled_sets={}", sigmas.len());
        let violated = report.violations();
        println!("violations={}", if violated.is_empty() { "none".into() } else { violated.join(",") });
        Ok(())
    }

    fn verify_cmd(&self, grid: usize) -> CmdResult {
        let opts = VerifyOptions {
            grid,
            seed: self.seed,
            ..Default::default()
        };
        let checks = run_suite(self.spec, &opts)?;
        for c in &checks {
            println!("{c}");
        }
        let failed = checks.iter().filter(|c| !c.passed).count();
        println!("{} checks, {failed} failed", checks.len());
        let path = self.path("verify.json");
        write_metadata(&path, &serde_json::to_value(&checks).map_err(Error::from)?)?;
        if failed > 0 {
            return Err(Failure {
                code: 3,
                message: format!("{failed} invariant checks failed"),
            });
        }
        Ok(())
    }

    fn export_cmd(&self, args: &PolicyArgs, n: usize, steps: usize, scale: f64) -> CmdResult {
        if n == 0 || steps == 0 {
            return Err(usage("--trajectories and --steps must be positive"));
        }
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(usage("--scale must lie in (0, 1]"));
        }
        let qp = self.qp;
        let starts = sample_initial_states(&self.spec.x_set, n, scale, self.seed, |x| solve_qp(qp, x).is_ok())?;
        let cache = PieceCache::new();
        let policy = self.policy(args, &cache)?;
        let trajectories: Vec<Trajectory> = starts
            .iter()
            .map(|x| closed_loop(self.spec, policy.as_ref(), x, steps))
            .collect::<Result<_, _>>()?;
        let path = self.path("dataset.csv");
        let rows = export_dataset(&trajectories, &path)?;
        let violations: usize = trajectories.iter().map(Trajectory::violations).sum();
        let meta = json!({
            "problem": serde_json::from_str::<serde_json::Value>(&self.spec.to_json_string()?).map_err(Error::from)?,
            "policy": self.policy_config(args),
            "seed": self.seed,
            "trajectories": n,
            "steps": steps,
            "initial_state_box_scale": scale,
            "rows": rows,
            "violations": violations,
        });
        let meta_path = self.path("dataset.json");
        write_metadata(&meta_path, &meta)?;
        println!("rows={rows}");
        println!("violations={violations}");
        println!("written={}", path.display());
        Ok(())
    }
}
