use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iaxkad::sim::{measure_scaling, run_scenario, verify, Scenario, SimError};
use iaxkad::wire::golden::fixtures;
use iaxkad::wire::{decode_frame, encode_frame};

const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "iaxkad",
    version,
    about = "Simulate IAX signaling over a Kademlia overlay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its metrics as JSON.
    Run(Overrides),
    /// Build a network and check every invariant and oracle; nonzero exit on a violation.
    Verify(Overrides),
    /// Mean lookup rounds and messages per network size.
    Scaling {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated network sizes, ascending.
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        sizes: Vec<usize>,
    },
    /// Write the reference frame fixtures into --out, or check the ones already there.
    CodecGolden {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Scenario file (JSON). Flags below override its fields.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    peers: Option<usize>,
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    loss: Option<f64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Invariant(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Invariant(_) => EXIT_INVARIANT,
            Failure::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Invariant(m) | Failure::Io(m) => m,
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => Failure::Config(m),
            other => Failure::Invariant(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

impl Overrides {
    fn scenario(&self) -> Result<Scenario, Failure> {
        let mut s = match &self.scenario {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
            }
            None => Scenario::default(),
        };
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.peers {
            s.n_peers = v;
        }
        if let Some(v) = self.alpha {
            s.params.alpha = v;
        }
        if let Some(v) = self.k {
            s.params.k = v;
        }
        if let Some(v) = self.bits {
            s.params.bits = v;
        }
        if let Some(v) = self.loss {
            s.link.loss = v;
        }
        s.validate()?;
        Ok(s)
    }

    fn emit(&self, text: &str) -> Result<(), Failure> {
        match &self.out {
            Some(path) => fs::write(path, text).map_err(|e| io_error(path, e)),
            None => {
                println!("{text}");
                Ok(())
            }
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(o) => {
            let s = o.scenario()?;
            log::info!("running {} peers, seed {}", s.n_peers, s.seed);
            let metrics = run_scenario(&s)?;
            o.emit(&metrics.to_json())
        }
        Command::Verify(o) => {
            let s = o.scenario()?;
            let report = verify(&s)?;
            let mut text = String::new();
            for c in &report.checks {
                let verdict = if c.passed { "ok  " } else { "FAIL" };
                text.push_str(&format!("{verdict} {:<20} {}\n", c.name, c.detail));
            }
            o.emit(text.trim_end())?;
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Invariant("verification failed".into()))
            }
        }
        Command::Scaling { overrides, sizes } => {
            let s = overrides.scenario()?;
            let rows = measure_scaling(&sizes, s.seed, s.params)?;
            let mut text = format!(
                "{:>6} {:>8} {:>12} {:>14}\n",
                "n", "lookups", "mean_rounds", "mean_messages"
            );
            for r in &rows {
                text.push_str(&format!(
                    "{:>6} {:>8} {:>12.3} {:>14.2}\n",
                    r.n, r.lookups, r.mean_rounds, r.mean_messages
                ));
            }
            if let [.., a, b] = rows.as_slice() {
                text.push_str(&format!(
                    "ratio {}/{}: {:.3}\n",
                    b.n,
                    a.n,
                    b.mean_rounds / a.mean_rounds
                ));
            }
            overrides.emit(text.trim_end())
        }
        Command::CodecGolden { out } => codec_golden(out.as_deref()),
    }
}

fn codec_golden(dir: Option<&Path>) -> Result<(), Failure> {
    let mut mismatched = Vec::new();
    for (name, frame) in fixtures() {
        let bytes = encode_frame(&frame).map_err(|e| Failure::Invariant(format!("{name}: {e}")))?;
        if decode_frame(&bytes).as_ref() != Ok(&frame) {
            mismatched.push(format!("{name} does not round-trip"));
        }
        let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
        let Some(dir) = dir else {
            println!("{name} {hex}");
            continue;
        };
        let path = dir.join(format!("{name}.bin"));
        match fs::read(&path) {
            Ok(stored) if stored == bytes => println!("{name} matches"),
            Ok(_) => mismatched.push(format!("{name} differs from {}", path.display())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::write(&path, &bytes).map_err(|e| io_error(&path, e))?;
                println!("{name} written");
            }
            Err(e) => return Err(io_error(&path, e)),
        }
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(mismatched.join("; ")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("IAXKAD_LOG")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
