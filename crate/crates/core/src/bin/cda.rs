use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cda_core::corpus::{load_dir, load_scenario};
use cda_core::exploit::{run_exploit, verify, ExploitChain, ExploitError, ExploitOptions, PocFile};
use cda_core::extract::{build_gadget_db, GadgetDb};
use cda_core::fuzz::{synthesize_report, FuzzConfig};
use cda_core::machine::MachineConfig;
use cda_core::matcher::{extract_pointer_meta, match_gadgets, MatchError};
use cda_core::report::{census, census_csv, coverage, coverage_csv, CoverageConfig};
use cda_core::scenario::{run_sequence, EntryKind, Scenario};

const EXIT_IO: u8 = 2;
const EXIT_NO_CORRUPTION: u8 = 3;
const EXIT_SYNTH: u8 = 4;
const EXIT_EXPLOIT: u8 = 5;

#[derive(Parser)]
#[command(name = "cda", version, about = "Cross-domain attack laboratory")]
struct Cli {
    /// Seed for the simulated machine and the fuzzer.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the gadget database of a scenario.
    Extract {
        scenario: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Rank gadgets against the pointer corrupted by a PoC.
    Match {
        scenario: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        poc: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Synthesize an input that reaches one gadget.
    Synth {
        scenario: PathBuf,
        #[arg(long)]
        gadget: String,
        #[arg(long, default_value_t = 100_000)]
        budget: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run every stage and verify the assembled chain.
    Exploit {
        scenario: PathBuf,
        /// Defaults to `<scenario>.poc.json` next to the scenario.
        #[arg(long)]
        poc: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        budget: u64,
        /// Verify the chain with the gadget actions stripped instead.
        #[arg(long)]
        negative_control: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Re-verify a chain produced by `exploit`.
    Verify {
        scenario: PathBuf,
        #[arg(long)]
        chain: PathBuf,
    },
    /// Run an input sequence and print its trace.
    Replay {
        scenario: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Print the machine dump instead of the trace.
        #[arg(long)]
        dump: bool,
    },
    /// Gadget counts per family and trigger kind over a corpus directory.
    Census {
        #[arg(env = "CDA_CORPUS")]
        dir: PathBuf,
    },
    /// Residue coverage bands as CSV.
    Coverage {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        entry_kind: Option<Kind>,
        #[arg(long, default_value_t = 64)]
        workload: usize,
        #[arg(long, default_value_t = 100_000)]
        budget: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Mmio,
    Timer,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

type Res<T> = Result<T, Failure>;

fn read(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))
}

fn scenario(path: &Path) -> Res<Scenario> {
    load_scenario(path).map_err(|e| fail(EXIT_IO, e))
}

fn json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Res<T> {
    serde_json::from_str(&read(path)?).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))
}

fn poc(path: &Path) -> Res<PocFile> {
    PocFile::from_json(&read(path)?).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))
}

fn emit(text: &str, out: Option<&Path>) -> Res<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| fail(EXIT_IO, format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn default_poc(scenario: &Path) -> PathBuf {
    let stem = scenario.file_stem().unwrap_or_default().to_string_lossy();
    scenario.with_file_name(format!("{stem}.poc.json"))
}

fn exploit_code(e: &ExploitError) -> u8 {
    match e {
        ExploitError::NoCorruption | ExploitError::Match(MatchError::NoCorruption) => EXIT_NO_CORRUPTION,
        ExploitError::SynthesisExhausted => EXIT_SYNTH,
        ExploitError::Fuzz(_) | ExploitError::Machine(_) | ExploitError::Interp(_) => EXIT_IO,
        _ => EXIT_EXPLOIT,
    }
}

fn run(cli: Cli) -> Res<()> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Extract { scenario: path, out } => {
            let db = build_gadget_db(&scenario(&path)?);
            emit(&(db.to_json() + "\n"), out.as_deref())
        }
        Cmd::Match {
            scenario: path,
            db,
            poc: poc_path,
            out,
        } => {
            let s = scenario(&path)?;
            let db = GadgetDb::from_json(&read(&db)?).map_err(|e| fail(EXIT_IO, e))?;
            let poc = poc(&poc_path)?;
            let mut m = MachineConfig::with_seed(seed).build().map_err(|e| fail(EXIT_IO, e))?;
            let trace = run_sequence(&mut m, &s, &poc.actions.actions, None).map_err(|e| fail(EXIT_IO, e))?;
            let meta = extract_pointer_meta(&trace, &s).map_err(|e| match e {
                MatchError::NoCorruption => fail(EXIT_NO_CORRUPTION, e),
                _ => fail(EXIT_IO, e),
            })?;
            emit(&pretty(&match_gadgets(&db, &meta)), out.as_deref())
        }
        Cmd::Synth {
            scenario: path,
            gadget,
            budget,
            out,
        } => {
            let s = scenario(&path)?;
            let db = build_gadget_db(&s);
            let g = db
                .get(&gadget)
                .ok_or_else(|| fail(EXIT_IO, format!("unknown gadget `{gadget}`")))?;
            let cfg = FuzzConfig {
                budget,
                ..FuzzConfig::with_seed(seed)
            };
            let report = synthesize_report(&s, g, &cfg).map_err(|e| fail(EXIT_IO, e))?;
            match report.input {
                Some(input) => emit(&pretty(&input), out.as_deref()),
                None => Err(fail(
                    EXIT_SYNTH,
                    format!("no input reached {gadget} within {} iterations", report.iterations),
                )),
            }
        }
        Cmd::Exploit {
            scenario: path,
            poc: poc_path,
            budget,
            negative_control,
            out,
        } => {
            let s = scenario(&path)?;
            let poc = poc(&poc_path.unwrap_or_else(|| default_poc(&path)))?;
            let mut opts = ExploitOptions::with_seed(seed);
            opts.fuzz.budget = budget;
            let mut outcome = run_exploit(&s, &poc.actions, &opts).map_err(|e| fail(exploit_code(&e), e))?;
            if negative_control {
                outcome.chain = outcome.chain.strip_gadget();
                outcome.report = outcome.control.clone();
            }
            emit(&pretty(&outcome), out.as_deref())?;
            if outcome.report.success {
                Ok(())
            } else {
                Err(fail(EXIT_EXPLOIT, "chain verified without any expected variant"))
            }
        }
        Cmd::Verify { scenario: path, chain } => {
            let s = scenario(&path)?;
            let mut value: serde_json::Value = json(&chain)?;
            if let Some(inner) = value.get_mut("chain") {
                value = inner.take();
            }
            let chain: ExploitChain = serde_json::from_value(value).map_err(|e| fail(EXIT_IO, e))?;
            let report = verify(&s, &chain, &MachineConfig::with_seed(seed)).map_err(|e| fail(EXIT_IO, e))?;
            emit(&pretty(&report), None)?;
            if report.success {
                Ok(())
            } else {
                Err(fail(EXIT_EXPLOIT, "chain verified without any expected variant"))
            }
        }
        Cmd::Replay {
            scenario: path,
            input,
            dump,
        } => {
            let s = scenario(&path)?;
            let input = poc(&input)?;
            let mut m = MachineConfig::with_seed(seed).build().map_err(|e| fail(EXIT_IO, e))?;
            let trace = run_sequence(&mut m, &s, &input.actions.actions, None).map_err(|e| fail(EXIT_IO, e))?;
            if dump {
                emit(&m.dump(16), None)
            } else {
                emit(&pretty(&trace), None)
            }
        }
        Cmd::Census { dir } => {
            let corpus = load_dir(&dir).map_err(|e| fail(EXIT_IO, e))?;
            emit(&census_csv(&census(&corpus)), None)
        }
        Cmd::Coverage {
            scenario: path,
            entry_kind,
            workload,
            budget,
        } => {
            let s = scenario(&path)?;
            let mut cfg = CoverageConfig::new(workload, seed);
            cfg.fuzz.budget = budget;
            cfg.entry_kind = entry_kind.map(|k| match k {
                Kind::Mmio => EntryKind::Mmio,
                Kind::Timer => EntryKind::TimerBh,
            });
            let rows = coverage(&s, &cfg).map_err(|e| fail(EXIT_IO, e))?;
            emit(&coverage_csv(&rows), None)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("cda: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
