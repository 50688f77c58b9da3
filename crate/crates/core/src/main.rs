use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use oae_link::analysis::{check_invariants, Invariant, ViolationReport};
use oae_link::consensus::{explore_exhaustive, explore_random, ExploreReport};
use oae_link::netsim::{run, Scenario};
use oae_link::trace::Mode;

#[derive(Parser)]
#[command(name = "oae", version, about = "Simulate and audit reflect-before-commit link transactions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Oae,
    Fito,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Oae => Mode::Oae,
            ModeArg::Fito => Mode::Fito,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and audit its trace.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Write the trace (JSON lines) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the violation report (JSON) here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a scenario under many seeds and sum the reports.
    Sweep {
        scenario: PathBuf,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Run a scenario under both link disciplines side by side.
    Compare {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Explore compare-and-swap consensus over link transactions.
    Consensus {
        #[arg(long)]
        n: usize,
        /// Proposed values, one per process (defaults to 1..=n).
        #[arg(long, value_delimiter = ',')]
        proposals: Vec<i64>,
        /// Processes that may crash.
        #[arg(long, value_delimiter = ',')]
        crash: Vec<usize>,
        #[arg(long)]
        exhaustive: bool,
        #[arg(long, default_value_t = 1000)]
        seeds: u64,
        #[arg(long, default_value_t = 2)]
        max_crashes: usize,
    },
}

fn load(path: &PathBuf) -> Result<Scenario, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Scenario::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn sweep(base: &Scenario, mode: Mode, seeds: u64) -> ViolationReport {
    let mut total = ViolationReport { scenario: base.name.clone(), mode: mode.to_string(), ..Default::default() };
    for seed in 0..seeds {
        let mut s = base.clone();
        s.mode = mode;
        s.seed = base.seed.wrapping_add(seed);
        total.absorb(check_invariants(&run(&s).trace));
    }
    total
}

fn print_consensus(r: &ExploreReport) {
    println!(
        "states {}  terminal {}  max own steps {}  decided values {:?}",
        r.states, r.terminals, r.max_own_steps, r.decided_values
    );
    for p in &r.problems {
        println!("problem: {p}");
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode, String> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { scenario, seed, mode, trace, report } => {
            let mut s = load(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(m) = mode {
                s.mode = m.into();
            }
            let result = run(&s);
            let r = check_invariants(&result.trace);
            if let Some(p) = trace {
                fs::write(&p, result.trace.to_jsonl()).map_err(|e| format!("{}: {e}", p.display()))?;
            }
            if let Some(p) = report {
                let json = serde_json::to_string_pretty(&r).expect("report serializes");
                fs::write(&p, json).map_err(|e| format!("{}: {e}", p.display()))?;
            }
            print!("{}", r.table());
            println!("{}", r.machine_line());
            Ok(if s.mode == Mode::Oae && !r.is_clean() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Cmd::Sweep { scenario, seeds, mode } => {
            let s = load(&scenario)?;
            let mode = mode.map_or(s.mode, Mode::from);
            let r = sweep(&s, mode, seeds);
            print!("{}", r.table());
            println!("{}", r.machine_line());
            Ok(if mode == Mode::Oae && !r.is_clean() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Cmd::Compare { scenario, seeds } => {
            let s = load(&scenario)?;
            let oae = sweep(&s, Mode::Oae, seeds);
            let fito = sweep(&s, Mode::Fito, seeds);
            println!("{:<4} {:>8} {:>8}  meaning", "inv", "oae", "fito");
            for inv in Invariant::ALL {
                println!("{:<4} {:>8} {:>8}  {}", inv, oae.count(inv), fito.count(inv), inv.describe());
            }
            println!("{:<4} {:>8} {:>8}", "txns", oae.transactions, fito.transactions);
            println!("{:<4} {:>8} {:>8}", "ok", oae.committed, fito.committed);
            Ok(if oae.is_clean() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Consensus { n, proposals, crash, exhaustive, seeds, max_crashes } => {
            let proposals = if proposals.is_empty() { (1..=n as i64).collect() } else { proposals };
            if proposals.len() != n {
                return Err(format!("{} proposals for {n} processes", proposals.len()));
            }
            let crash: BTreeSet<usize> = crash.into_iter().collect();
            let r = if exhaustive {
                explore_exhaustive(&proposals, &crash)
            } else {
                explore_random(&proposals, &crash, max_crashes, 0..seeds)
            }
            .map_err(|e| e.to_string())?;
            print_consensus(&r);
            Ok(if r.problems.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
