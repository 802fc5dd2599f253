//! `tila` command-line driver. Each subcommand reads a run configuration,
//! writes its outputs into a run directory and finishes with a
//! [`RunManifest`] that checksums every artifact.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a configuration or
//! usage error.

mod commands;
pub mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tila_core::config::RunConfig;
use tila_core::training::checkpoint::write_atomic;
use tila_core::{Error, Result};

pub use manifest::{verify_run, RunManifest, MANIFEST_FILE};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "TILA_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "tila", version, about = "Temporal inversion-aware training and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for this run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train and test splits.
    GenData,
    /// Staged contrastive pretraining.
    Pretrain {
        /// Dataset directory written by gen-data; generated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint with a progression head.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// baseline-ce, bice or bice-tcl.
        #[arg(long, default_value = "bice-tcl")]
        variant: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Four-protocol evaluation on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// supervised, zero-shot or retrieval; supervised when the
        /// checkpoint carries a head, zero-shot otherwise.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the three directional report variants per test study and finding.
    BuildRetrieval {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Linear probe for change versus no change on frozen pair embeddings.
    ScreenBinary {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sweep λ (fine-tuning) or W (pretraining) and tabulate the protocols.
    Ablate {
        /// lambda or w.
        #[arg(long, default_value = "lambda")]
        sweep: String,
        /// Pretrained checkpoint for the λ sweep; pretrained from the
        /// configuration when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference certification of every objective gradient.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        settings: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::BuildRetrieval { .. } => "build-retrieval",
            Command::ScreenBinary { .. } => "screen-binary",
            Command::Ablate { .. } => "ablate",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    tila_core::config::load_config(path)
}

/// State shared by a subcommand while it runs.
pub(crate) struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub quiet: bool,
    pub manifest: RunManifest,
}

impl Run {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_atomic(&path, bytes.as_ref())
    }

    /// Records an input file by content so that the run identity changes
    /// whenever the input does.
    pub fn input(&mut self, key: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.manifest.options.insert(key.to_string(), manifest::sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn option(&mut self, key: &str, value: impl ToString) {
        self.manifest.options.insert(key.to_string(), value.to_string());
    }
}

fn prepare_run(common: &Common, command: &Command) -> Result<Run> {
    let (mut cfg, config_path, config_bytes) = match &common.config {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            (load_config(p)?, Some(p.display().to_string()), bytes)
        }
        None => (RunConfig::default(), None, Vec::new()),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let seeds = BTreeMap::from([
        ("data".to_string(), cfg.data_config().seed),
        ("encoder".to_string(), cfg.encoder_config().seed),
        ("pretrain".to_string(), cfg.pretrain_config().seed),
        ("finetune".to_string(), cfg.finetune_config().seed),
    ]);
    let manifest = RunManifest {
        command: command.name().to_string(),
        config_path,
        config_sha256: manifest::sha256_hex(&config_bytes),
        seed: cfg.seed,
        seeds,
        options: BTreeMap::new(),
        out_dir: String::new(),
        artifacts: BTreeMap::new(),
    };
    Ok(Run {
        cfg,
        out: PathBuf::new(),
        quiet: common.quiet,
        manifest,
    })
}

/// Resolves the output directory once the run identity is known and makes
/// sure it does not already hold a different run.
fn claim_out_dir(run: &mut Run, requested: Option<&Path>) -> Result<()> {
    let out = match requested {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            let id = run.manifest.identity();
            root.join(format!("{}-{}-s{}", run.manifest.command, &id[..12], run.manifest.seed))
        }
    };
    if out.exists() {
        match RunManifest::load(&out) {
            Ok(existing) if existing.same_run(&run.manifest) => {}
            Ok(_) => {
                return Err(Error::config(format!(
                    "{} already holds a different run; choose another --out",
                    out.display()
                )))
            }
            Err(_) => {
                let occupied = fs::read_dir(&out).map_err(|e| Error::io(&out, e))?.next().is_some();
                if occupied {
                    return Err(Error::config(format!("{} exists and is not a run directory", out.display())));
                }
            }
        }
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    run.manifest.out_dir = out.display().to_string();
    run.out = out;
    Ok(())
}

fn finish(run: &mut Run) -> Result<()> {
    run.write("config.toml", run.cfg.to_toml())?;
    run.manifest.artifacts = manifest::checksum_files(&run.out)?;
    run.write(MANIFEST_FILE, run.manifest.to_json())
}

fn execute(cli: Cli) -> Result<()> {
    let mut run = prepare_run(&cli.common, &cli.command)?;
    commands::record_options(&mut run, &cli.command)?;
    claim_out_dir(&mut run, cli.common.out.as_deref())?;
    let outcome = commands::dispatch(&mut run, &cli.command);
    // The manifest is written even when a check fails so the evidence is
    // attributable.
    finish(&mut run)?;
    outcome?;
    if !run.quiet {
        println!("{}", run.out.display());
    }
    Ok(())
}

/// Runs the command line `argv` (including the program name) and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}
