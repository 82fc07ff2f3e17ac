use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lattice_hitting::harness::{run_scenario, write_artifacts, Scenario, ScenarioConfig, Task};
use lattice_hitting::Result;

/// Hitting matrices between distant sites: exact, simulated and predicted.
#[derive(Parser, Debug)]
#[command(name = "lattice-hitting", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Potential Gram table and transition matrix by quadrature.
    Exact(Common),
    /// Monte Carlo estimates of the transition matrix at every scale.
    Simulate(Common),
    /// Asymptotic prediction in the configured regime.
    Predict(Common),
    /// Runs the tasks listed in the config and checks the criteria they cover.
    Verify(Common),
    /// Period and colouring of the first-return structure.
    Structure(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON scenario file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: `output` from the config, else the current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Quadrature points per axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Trajectories per start site.
    #[arg(long)]
    ntraj: Option<u64>,
    /// Comma-separated scales.
    #[arg(long, value_delimiter = ',')]
    t: Option<Vec<f64>>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Comma-separated increasing ρ values for the twisted-operator route.
    #[arg(long, value_delimiter = ',')]
    rho_schedule: Option<Vec<f64>>,
    /// Also run the absorbing oracle (d = 1), optionally with a starting box radius.
    #[arg(long, num_args = 0..=1)]
    oracle: Option<Option<i64>>,
}

fn apply(cfg: &mut ScenarioConfig, c: &Common, tasks: Option<&[Task]>) {
    if let Some(tasks) = tasks {
        cfg.tasks = tasks.to_vec();
    }
    if c.seed.is_some() || c.ntraj.is_some() || c.max_steps.is_some() {
        let sim = cfg.simulation.get_or_insert_with(Default::default);
        if let Some(s) = c.seed {
            sim.seed = s;
        }
        if let Some(n) = c.ntraj {
            sim.n_traj = n;
        }
        if let Some(m) = c.max_steps {
            sim.max_steps = m;
        }
    }
    if let Some(g) = c.grid {
        cfg.grid.points_per_dim = Some(g);
    }
    if let Some(t) = &c.t {
        cfg.sites.t_values = t.clone();
    }
    if let Some(r) = &c.rho_schedule {
        cfg.rho_schedule = Some(r.clone());
    }
    if let Some(radius) = c.oracle {
        if !cfg.tasks.contains(&Task::Oracle) {
            cfg.tasks.push(Task::Oracle);
        }
        if radius.is_some() {
            cfg.oracle_radius = radius;
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    let (c, tasks): (&Common, Option<&[Task]>) = match &cli.command {
        Command::Exact(c) => (c, Some(&[Task::Exact])),
        Command::Simulate(c) => (c, Some(&[Task::Simulate])),
        Command::Predict(c) => (c, Some(&[Task::Predict])),
        Command::Verify(c) => (c, None),
        Command::Structure(c) => (c, Some(&[Task::Structure])),
    };
    let mut cfg = ScenarioConfig::load(&c.config)?;
    apply(&mut cfg, c, tasks);
    let scenario = Scenario::from_config(&cfg)?;
    let report = run_scenario(&scenario)?;
    let out = c.out.clone().or_else(|| cfg.output.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    write_artifacts(&report, &out)?;
    for chk in &report.checks {
        let tag = if chk.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {}: {} ({:.6e} vs {:.1e})", chk.criterion, chk.name, chk.value, chk.threshold);
    }
    for d in &report.discrepancies {
        let t = d.t.map(|t| format!("t={t} ")).unwrap_or_default();
        let kind = if d.relative { "relative " } else { "" };
        println!("{t}{kind}{} norm of {} − {}: {:.6e}", d.norm, d.left, d.right, d.value);
    }
    for e in &report.errors {
        let t = e.t.map(|t| format!(" at t={t}")).unwrap_or_default();
        eprintln!("error in {}{t}: {}", e.task.name(), e.message);
    }
    eprintln!("wrote {} in {:.2} s", out.display(), report.runtime_seconds);
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; exit code 2 is reserved for failed criteria.
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
