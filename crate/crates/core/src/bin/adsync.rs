use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use adsync::control::ControlMode;
use adsync::scenario::{self, Overrides, Scenario, SweepAxis};
use adsync::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adsync", version, about = "Simulate leader-following adaptive synchronization scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a scenario and print its assumption checks.
    Check(Common),
    /// Simulate a scenario and write trace, summary and plot data.
    Run {
        #[command(flatten)]
        common: Common,
        /// Only run the assumption checks.
        #[arg(long)]
        check_only: bool,
    },
    /// Run one simulation per point of a parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid axis `key=v1,v2,...`; keys: epsilon, step, duration, mu0, mu1, mu2, k, k_<agent>.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    DisturbanceRejection,
}

#[derive(Args)]
struct Common {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; defaults to $ADSYNC_OUT_DIR/<name>, then the
    /// scenario's [output] dir, then adsync-out/<name>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Control law, replacing the scenario's [control] mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Boundary-layer width of the smoothed sign; 0 selects the exact sign.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Integration step.
    #[arg(long)]
    step: Option<f64>,
    /// Simulated time.
    #[arg(long)]
    duration: Option<f64>,
    /// Base seed for seeded noise disturbances.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode.map(|m| match m {
                ModeArg::Baseline => ControlMode::Baseline,
                ModeArg::DisturbanceRejection => ControlMode::DisturbanceRejection,
            }),
            epsilon: self.epsilon,
            step: self.step,
            duration: self.duration,
            seed: self.seed,
        }
    }

    fn load(&self) -> adsync::Result<Scenario> {
        let base = scenario::load_scenario(&self.scenario)?;
        let mut cfg = base.config;
        self.overrides().apply(&mut cfg);
        Scenario::from_config(cfg)
    }

    fn out_dir(&self, s: &Scenario) -> PathBuf {
        scenario::resolve_out_dir(self.out_dir.as_deref(), s)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Assumptions(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn print_checks(s: &Scenario) -> ExitCode {
    let a = &s.assumptions;
    println!("scenario {}", s.name());
    println!("  leader marginally stable  {}", a.leader.marginally_stable);
    println!("  leader neutrally stable   {}", a.leader.neutrally_stable);
    println!("  leader detectable         {}", a.leader.detectable);
    println!("  observer gain             {:?} ({})", a.l0, if a.gain_designed { "designed" } else { "supplied" });
    println!("  jointly connected         {} ({})", a.joint_connectivity.holds, a.joint_connectivity.message);
    println!("  undirected followers      {}", a.undirected_followers);
    println!("  static graph              {}", a.static_graph);
    for (i, b) in a.regressor_bounds.iter().enumerate() {
        println!("  agent {} regressor bound   {} (worst margin {:.3e})", i + 1, b.passed, b.worst_margin);
    }
    if a.passed {
        println!("all required checks passed");
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", a.failures.join("; "));
        ExitCode::from(2)
    }
}

fn run(common: &Common) -> adsync::Result<()> {
    let s = common.load()?;
    let started = Instant::now();
    let (report, trace) = scenario::execute(&s)?;
    let seconds = started.elapsed().as_secs_f64();
    let dir = common.out_dir(&s);
    let written = scenario::write_outputs(&dir, &report, &trace)?;
    scenario::write_timing(&dir, seconds)?;
    let m = &report.summary.metrics;
    println!("scenario {} ({:?}, epsilon {})", s.name(), report.summary.mode, report.summary.epsilon);
    println!("{:>6} {:>12} {:>12} {:>12} {:>12} {:>10}", "agent", "terminal", "v_err", "residual", "chatter", "D_hat max");
    for a in &m.agents {
        println!(
            "{:>6} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>10.4}",
            a.agent, a.terminal_error, a.terminal_v_err, a.residual_band, a.chattering_band, a.d_hat_max
        );
    }
    let l = &report.summary.lyapunov;
    println!("V: {} increases above {:.1e} (worst {:.3e}); W tail increment {:.3e}", l.violations, l.tolerance, l.worst_increase, m.w_tail_increment);
    match m.sync_time {
        Some(t) => println!("synchronized below {:.1e} from t = {t}", m.sync_threshold),
        None => println!("not synchronized below {:.1e}", m.sync_threshold),
    }
    println!("converged: {}", m.converged);
    println!("wall clock {seconds:.2} s; {} files in {}", written.len() + 1, dir.display());
    Ok(())
}

fn sweep(common: &Common, grid: &[String]) -> adsync::Result<()> {
    let s = common.load()?;
    let axes = grid.iter().map(|g| g.parse::<SweepAxis>()).collect::<adsync::Result<Vec<_>>>()?;
    let points = scenario::sweep(&s.config, &axes)?;
    let path = scenario::write_sweep(&common.out_dir(&s), &axes, &points)?;
    for p in &points {
        let params: Vec<String> = p.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        match (&p.summary, &p.error) {
            (Some(sm), _) => {
                let band = sm.metrics.agents.iter().map(|a| a.residual_band).fold(0.0, f64::max);
                println!("{:<30} terminal {:.3e} band {:.3e}", params.join(" "), sm.metrics.max_terminal_error, band);
            }
            (None, Some(e)) => println!("{:<30} failed: {e}", params.join(" ")),
            (None, None) => {}
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Check(common) => return common.load().map_or_else(report_error, |s| print_checks(&s)),
        Command::Run { common, check_only: true } => return common.load().map_or_else(report_error, |s| print_checks(&s)),
        Command::Run { common, check_only: false } => run(common),
        Command::Sweep { common, grid } => sweep(common, grid),
    };
    result.map_or_else(report_error, |_| ExitCode::SUCCESS)
}

fn report_error(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}
