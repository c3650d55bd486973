//! `sim` - command-line front end for the mcsim multicore simulator.
//!
//! Exit codes: 0 on success, 1 when a run fails verification (an expectation
//! or invariant does not hold, a core faults, or the cycle budget runs out),
//! 2 on usage or configuration errors.

use std::path::PathBuf;
use std::process::exit;

use clap::{Args, Parser, Subcommand};
use mcsim::consistency::Model;
use mcsim::cpu::SimError;
use mcsim::harness::{
    self, load_config, load_litmus_corpus, parse_topology, report_stats, run_experiment,
    ExperimentConfig, HarnessError, Mode, OutFormat,
};

#[derive(Parser)]
#[command(name = "sim", version, about = "Deterministic multicore microarchitecture simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an assembly program (or replay a memory trace) on the
    /// cycle-level system and report statistics.
    Run {
        #[command(flatten)]
        common: Common,
        /// Assembly program; overrides the config's `program` key.
        program: Option<PathBuf>,
        /// Memory trace (`core ld|st addr [value]` lines) to replay instead
        /// of a program.
        #[arg(long, value_name = "F")]
        trace: Option<PathBuf>,
    },
    /// Check litmus-test `expect` lines against exhaustive outcome
    /// enumeration.
    Litmus {
        #[command(flatten)]
        common: Common,
        /// Litmus file, or a directory of `.lit` files; overrides the
        /// config's `litmus` key.
        #[arg(long, value_name = "F")]
        file: Option<PathBuf>,
    },
    /// Score the configured branch predictor on a trace of `pc outcome`
    /// records.
    Bpred {
        #[command(flatten)]
        common: Common,
        /// Branch trace; overrides the config's `trace` key.
        #[arg(long, value_name = "F")]
        trace: Option<PathBuf>,
    },
    /// Tabulate the closed-form scaling calculators.
    Laws {
        #[command(flatten)]
        common: Common,
    },
    /// Exhaustively model-check the snoopy and directory coherence
    /// protocols at the configured core count.
    CheckProtocol {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config file (flat `key = value` with [section] headers).
    #[arg(long, value_name = "F")]
    config: Option<PathBuf>,
    /// Master seed; every component stream derives from it.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Memory consistency model. For `litmus`, restricts checking to that
    /// model's expectations.
    #[arg(long, value_parser = ["sc", "tso"])]
    model: Option<String>,
    /// Core count: replicates single-thread programs and sizes protocol
    /// checks.
    #[arg(long, value_name = "N")]
    cores: Option<usize>,
    /// Topology: bus|line|ring|mesh|torus, optionally shaped (mesh2x4,
    /// ring6). Unshaped topologies are fitted to the core count.
    #[arg(long, value_name = "T")]
    topology: Option<String>,
    /// Report format.
    #[arg(long, value_parser = ["kv", "csv", "table"], default_value = "table")]
    out: String,
}

impl Common {
    fn build(&self, mode: Mode) -> Result<(ExperimentConfig, OutFormat), HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.mode = mode;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(model) = &self.model {
            cfg.cpu.model = if model == "sc" { Model::Sc } else { Model::Tso };
        }
        if let Some(cores) = self.cores {
            cfg.cores = cores;
        }
        if let Some(topo) = &self.topology {
            let (t, shaped) = parse_topology(topo)
                .map_err(|msg| HarnessError::Constraint { rule: msg })?;
            cfg.mem.topology = t;
            cfg.dims_given = shaped;
        }
        cfg.validate()?;
        let out = self.out.parse().expect("clap restricts the values");
        Ok((cfg, out))
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli.cmd) {
        Ok(ok) => exit(if ok { 0 } else { 1 }),
        Err(e) => {
            eprintln!("error: {e}");
            exit(match e {
                // The run itself failed rather than the invocation.
                HarnessError::Verify(_)
                | HarnessError::Sim(SimError::Budget { .. })
                | HarnessError::Sim(SimError::Fault { .. }) => 1,
                _ => 2,
            });
        }
    }
}

fn run(cmd: &Cmd) -> Result<bool, HarnessError> {
    let report = match cmd {
        Cmd::Run { common, program, trace } => {
            let (mut cfg, out) = common.build(Mode::Run)?;
            if let Some(p) = program {
                cfg.program = Some(p.clone());
            }
            if let Some(t) = trace {
                cfg.trace = Some(t.clone());
                if program.is_none() {
                    cfg.program = None; // an explicit trace wins over a config program
                }
            }
            print_report(&run_experiment(&cfg)?, out)
        }
        Cmd::Litmus { common, file } => {
            let (mut cfg, out) = common.build(Mode::Litmus)?;
            if let Some(f) = file {
                cfg.litmus = Some(f.clone());
            }
            let path = cfg
                .litmus
                .clone()
                .ok_or(HarnessError::MissingInput { mode: Mode::Litmus, what: "litmus" })?;
            let mut tests = load_litmus_corpus(&path)?;
            if let Some(model) = &common.model {
                let model = if model == "sc" { Model::Sc } else { Model::Tso };
                for (_, t) in &mut tests {
                    t.expectations.retain(|e| e.model == model);
                }
            }
            print_report(&harness::litmus_report(&tests), out)
        }
        Cmd::Bpred { common, trace } => {
            let (mut cfg, out) = common.build(Mode::Bpred)?;
            if let Some(t) = trace {
                cfg.trace = Some(t.clone());
            }
            print_report(&run_experiment(&cfg)?, out)
        }
        Cmd::Laws { common } => {
            let (cfg, out) = common.build(Mode::Laws)?;
            print_report(&run_experiment(&cfg)?, out)
        }
        Cmd::CheckProtocol { common } => {
            let (cfg, out) = common.build(Mode::CheckProtocol)?;
            print_report(&run_experiment(&cfg)?, out)
        }
    };
    Ok(report)
}

fn print_report(report: &harness::StatsReport, out: OutFormat) -> bool {
    print!("{}", report_stats(report, out));
    report.ok
}
