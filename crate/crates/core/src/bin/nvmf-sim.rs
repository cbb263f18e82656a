use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nvmf_rdma_sim::attacks::AttackId;
use nvmf_rdma_sim::harness::{run_scenario, Format, ScenarioConfig, SecurityConfig, Testbed, ThreatModel};
use nvmf_rdma_sim::nvmeof::Command;

#[derive(Parser)]
#[command(name = "nvmf-sim", about = "RDMA/NVMe-oF fabric simulator with attack scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Tlu,
    Tra,
}

#[derive(Clone, Copy, ValueEnum)]
enum SecurityArg {
    None,
    Inband,
    Ipsec,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the attacks of a scenario file and print a report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Full attack x model x security grid.
        #[arg(long)]
        matrix: bool,
        /// Exit nonzero if any cell differs from the published table.
        #[arg(long)]
        check_against_paper: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: OutFormat,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Attack id; repeat to run several. Overrides the scenario list.
        #[arg(long = "attack")]
        attacks: Vec<String>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long, value_enum)]
        security: Option<SecurityArg>,
    },
    /// Issue block I/O from the scenario's client and print the victim trace.
    Io {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// LBA=TEXT
        #[arg(long = "write")]
        writes: Vec<String>,
        /// LBA:LEN
        #[arg(long = "read")]
        reads: Vec<String>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load(path: &std::path::Path, seed: Option<u64>) -> Result<ScenarioConfig, String> {
    let mut cfg = ScenarioConfig::load(path).map_err(|e| e.to_string())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            matrix,
            check_against_paper,
            format,
            seed,
            out,
            attacks,
            model,
            security,
        } => {
            let mut cfg = load(&scenario, seed)?;
            cfg.matrix |= matrix;
            if !attacks.is_empty() {
                for a in &attacks {
                    AttackId::from_name(a).ok_or_else(|| format!("unknown attack {a:?}"))?;
                }
                cfg.attacks = Some(attacks);
                // Naming attacks on the command line selects single mode.
                cfg.matrix = matrix;
            }
            if let Some(m) = model {
                cfg.threat_model = Some(match m {
                    ModelArg::Tlu => ThreatModel::Tlu,
                    ModelArg::Tra => ThreatModel::Tra,
                });
            }
            if let Some(s) = security {
                cfg.security = match s {
                    SecurityArg::None => SecurityConfig::None,
                    SecurityArg::Inband => SecurityConfig::InBand,
                    SecurityArg::Ipsec => SecurityConfig::IPsec,
                };
            }
            let report = run_scenario(&cfg).map_err(|e| e.to_string())?;
            let fmt = match format {
                OutFormat::Text => Format::Text,
                OutFormat::Csv => Format::Csv,
            };
            let text = report.render(fmt);
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| format!("{}: {e}", p.display()))?,
                None => print!("{text}"),
            }
            if check_against_paper {
                let bad = report.mismatches();
                for m in &bad {
                    eprintln!("mismatch: {}", m.0);
                }
                if !bad.is_empty() {
                    return Ok(ExitCode::FAILURE);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Io {
            scenario,
            seed,
            writes,
            reads,
        } => {
            let cfg = load(&scenario, seed)?;
            let mut cmds = Vec::new();
            for w in &writes {
                let (lba, text) = w.split_once('=').ok_or_else(|| format!("bad --write {w:?}, want LBA=TEXT"))?;
                let lba = lba.parse().map_err(|_| format!("bad LBA in {w:?}"))?;
                cmds.push(Command::Write {
                    lba,
                    data: text.as_bytes().to_vec(),
                });
            }
            for r in &reads {
                let (lba, len) = r.split_once(':').ok_or_else(|| format!("bad --read {r:?}, want LBA:LEN"))?;
                let lba = lba.parse().map_err(|_| format!("bad LBA in {r:?}"))?;
                let len = len.parse().map_err(|_| format!("bad length in {r:?}"))?;
                cmds.push(Command::Read { lba, len });
            }
            let mut tb = Testbed::new(cfg.testbed_config());
            let client = tb.client;
            tb.run(client, cmds);
            for e in tb.victim_trace() {
                println!("{e}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
