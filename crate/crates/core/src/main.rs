//! `wcstab`: certify weak contraction, build stabilizing feedback and run
//! monitored simulations from scenario files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use wcstab::commands::{
    cmd_certify, cmd_geodesic, cmd_selftest, cmd_simulate, CommandOutput, Overrides, EXIT_ERROR,
    EXIT_USAGE,
};
use wcstab::scenario::{load_scenario, Scenario};

#[derive(Parser)]
#[command(
    name = "wcstab",
    about = "Global stabilization of weakly contractive control systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check weak contraction by sampling and build the Lyapunov certificate
    Certify {
        /// Scenario files
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Override the sampling seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the certification sample count
        #[arg(long)]
        samples: Option<usize>,
        /// Run scenarios in parallel on N threads
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Integrate the configured loop, write the trace CSV and monitor report
    Simulate {
        /// Scenario files
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Output directory for CSV traces and reports
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the sampling seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the certification sample count
        #[arg(long)]
        samples: Option<usize>,
        /// Override the simulation horizon
        #[arg(long = "T")]
        horizon: Option<f64>,
        /// Override the integration step
        #[arg(long = "h")]
        step: Option<f64>,
        /// Override the terminal norm threshold
        #[arg(long)]
        terminal_tol: Option<f64>,
        /// Run scenarios in parallel on N threads
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Distance, log vector and shooting diagnostics between two points
    Geodesic {
        scenario: PathBuf,
        /// Start point, comma-separated
        #[arg(long)]
        from: String,
        /// End point, comma-separated
        #[arg(long)]
        to: String,
    },
    /// Run the built-in numerical oracle battery
    Selftest,
}

fn parse_point(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad coordinate `{p}`: {e}")))
        .collect()
}

fn load(path: &Path) -> Result<Scenario, CommandOutput> {
    load_scenario(path).map_err(|e| CommandOutput {
        exit: EXIT_ERROR,
        report: format!("ERROR: {e}\nEXIT: {EXIT_ERROR}\n"),
    })
}

/// Run one job per scenario, preserving input order in the output; the
/// process exit is the worst per-scenario code.
fn run_batch(
    scenarios: &[PathBuf],
    jobs: usize,
    f: impl Fn(&PathBuf) -> CommandOutput + Sync,
) -> i32 {
    let jobs = jobs.max(1);
    let outputs: Vec<CommandOutput> = if jobs == 1 || scenarios.len() <= 1 {
        scenarios.iter().map(&f).collect()
    } else {
        let mut outputs: Vec<Option<CommandOutput>> = (0..scenarios.len()).map(|_| None).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut outputs);
        std::thread::scope(|scope| {
            let next = &next;
            let f = &f;
            let slots = &slots;
            for _ in 0..jobs.min(scenarios.len()) {
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= scenarios.len() {
                        break;
                    }
                    let out = f(&scenarios[i]);
                    slots.lock().unwrap()[i] = Some(out);
                });
            }
        });
        outputs.into_iter().map(|o| o.expect("all jobs finished")).collect()
    };
    let mut worst = 0;
    for (path, out) in scenarios.iter().zip(&outputs) {
        if scenarios.len() > 1 {
            println!("# {}", path.display());
        }
        print!("{}", out.report);
        worst = worst.max(out.exit);
    }
    worst
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successful exits; everything else is a
            // usage error (exit 1)
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match cli.cmd {
        Cmd::Certify { scenarios, seed, samples, jobs } => {
            let ov = Overrides { seed, samples, ..Default::default() };
            run_batch(&scenarios, jobs, |path| match load(path) {
                Ok(scn) => cmd_certify(&scn, &ov),
                Err(out) => out,
            })
        }
        Cmd::Simulate {
            scenarios,
            out,
            seed,
            samples,
            horizon,
            step,
            terminal_tol,
            jobs,
        } => {
            let ov = Overrides { seed, samples, horizon, step, terminal_tol };
            run_batch(&scenarios, jobs, |path| match load(path) {
                Ok(scn) => cmd_simulate(&scn, &out, &ov),
                Err(out) => out,
            })
        }
        Cmd::Geodesic { scenario, from, to } => {
            let parsed = parse_point(&from).and_then(|f| Ok((f, parse_point(&to)?)));
            match parsed {
                Err(msg) => {
                    eprintln!("error: {msg}");
                    EXIT_USAGE
                }
                Ok((from, to)) => {
                    let out = match load(&scenario) {
                        Ok(scn) => cmd_geodesic(&scn, &from, &to),
                        Err(out) => out,
                    };
                    print!("{}", out.report);
                    out.exit
                }
            }
        }
        Cmd::Selftest => {
            let out = cmd_selftest();
            print!("{}", out.report);
            out.exit
        }
    };
    ExitCode::from(code as u8)
}
