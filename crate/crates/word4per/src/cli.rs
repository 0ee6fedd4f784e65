//! Command-line parsing and dispatch.
//!
//! Every subcommand reads the same config schema (`--config`, TOML or
//! JSON), then applies `--set section.key=value` overrides, then its own
//! flags. The resolved config is validated as a whole before anything runs
//! and is snapshotted into the run directory.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use word4per_core::analysis::SubstitutionStrategy;
use word4per_core::losses::Supervision;
use word4per_core::retrieval::QueryMode;
use word4per_core::tinet::Activation;

use crate::commands;
use crate::config::{Config, NetSection};
use crate::error::{AppError, Result};
use crate::service;

#[derive(Debug, Parser)]
#[command(name = "word4per", version, about = "Zero-shot composed person retrieval toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Config file (TOML, or JSON such as a run's config.json).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `run.dir`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Override one config key, e.g. `--set tinet.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_supervision(s: &str) -> std::result::Result<Supervision, String> {
    Supervision::from_str(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<QueryMode, String> {
    QueryMode::from_str(s).map_err(|e| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<SubstitutionStrategy, String> {
    SubstitutionStrategy::from_str(s).map_err(|e| e.to_string())
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown activation `{s}`"))
}

/// Overrides for the single configured TINet.
#[derive(Debug, Clone, Default, Args)]
pub struct NetFlags {
    /// Supervision: `Text` or `Vis`.
    #[arg(long, value_parser = parse_supervision)]
    pub mode: Option<Supervision>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `gelu` or `identity`.
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<Activation>,
    /// Save randomly initialised networks without training.
    #[arg(long)]
    pub untrained: bool,
}

impl NetFlags {
    fn apply(&self, cfg: &mut Config) -> Result<()> {
        if self.untrained {
            cfg.tinet.untrained = true;
        }
        let any = self.mode.is_some()
            || self.depth.is_some()
            || self.hidden.is_some()
            || self.name.is_some()
            || self.seed.is_some()
            || self.activation.is_some();
        if !any {
            return Ok(());
        }
        if cfg.tinet.nets.len() > 1 {
            return Err(AppError::Usage(format!(
                "network flags need exactly one configured net, found {} under tinet.nets",
                cfg.tinet.nets.len()
            )));
        }
        if cfg.tinet.nets.is_empty() {
            cfg.tinet.nets.push(NetSection::default());
        }
        let net = &mut cfg.tinet.nets[0];
        if let Some(m) = self.mode {
            if net.mode != m && self.name.is_none() {
                net.name = m.to_string().to_ascii_lowercase();
            }
            net.mode = m;
        }
        if let Some(d) = self.depth {
            net.depth = Some(d);
        }
        if let Some(h) = self.hidden {
            net.hidden = h;
        }
        if let Some(n) = &self.name {
            net.name = n.clone();
        }
        if let Some(s) = self.seed {
            net.seed = s;
        }
        if let Some(a) = self.activation {
            net.activation = a;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalFlags {
    /// `composed`, `image-only`, `text-only` or `avg`.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<QueryMode>,
    /// TINet checkpoint; repeat to fuse several.
    #[arg(long = "tinet")]
    pub tinets: Vec<PathBuf>,
    /// `pseudo`, `1st-sim` or `text-only`.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<SubstitutionStrategy>,
    #[arg(long)]
    pub exclude_reference: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic identity corpus and its manifests.
    Synth(Common),
    /// Stage 1: fine-tune the encoder pair on image-caption data.
    Finetune(Common),
    /// Encode manifests into feature caches with a frozen encoder.
    Cache(Common),
    /// Stage 2: train inversion networks against the frozen encoder.
    TrainTinet {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        net: NetFlags,
    },
    /// Composed or baseline retrieval metrics over triplets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: EvalFlags,
    },
    /// Nearest vocabulary words to each image's pseudo-word.
    ProbeVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tinet: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Retrieve each reference image from its pseudo-word alone.
    SelfRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "tinet")]
        tinets: Vec<PathBuf>,
    },
    /// Mine candidate false negatives for annotated targets.
    CurateMine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Apply a verdict log to the triplet file.
    CurateApply {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        verdicts: Option<PathBuf>,
    },
    /// Keep the highest-resolution fraction of a manifest.
    FilterCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        top_fraction: Option<f64>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Serve the /api/v1 HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        /// host:port; `W4P_BIND` still takes precedence.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Validate a config and print it fully resolved.
    CheckConfig(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Synth(c) | Self::Finetune(c) | Self::Cache(c) | Self::CheckConfig(c) => c,
            Self::TrainTinet { common, .. }
            | Self::Eval { common, .. }
            | Self::ProbeVocab { common, .. }
            | Self::SelfRetrieval { common, .. }
            | Self::CurateMine { common, .. }
            | Self::CurateApply { common, .. }
            | Self::FilterCorpus { common, .. }
            | Self::Serve { common, .. } => common,
        }
    }

    /// The validated config this command will run with.
    pub fn config(&self) -> Result<Config> {
        let common = self.common();
        let base = match &common.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let mut cfg = base.with_overrides(&common.set)?;
        if let Some(d) = &common.run_dir {
            cfg.run.dir = Some(d.clone());
        }
        match self {
            Self::TrainTinet { net, .. } => net.apply(&mut cfg)?,
            Self::Eval { flags, .. } => {
                if let Some(m) = flags.mode {
                    cfg.eval.mode = m;
                }
                if !flags.tinets.is_empty() {
                    cfg.eval.tinets = flags.tinets.clone();
                }
                if let Some(s) = flags.strategy {
                    cfg.eval.strategy = s;
                }
                if flags.exclude_reference {
                    cfg.eval.exclude_reference = true;
                }
            }
            Self::ProbeVocab { tinet, k, .. } => {
                if tinet.is_some() {
                    cfg.probe.tinet = tinet.clone();
                }
                if let Some(k) = k {
                    cfg.probe.k = *k;
                }
            }
            Self::SelfRetrieval { tinets, .. } => {
                if !tinets.is_empty() {
                    cfg.self_retrieval.tinets = tinets.clone();
                }
            }
            Self::CurateMine { k: Some(k), .. } => cfg.curate.k = *k,
            Self::CurateApply { candidates, verdicts, .. } => {
                if candidates.is_some() {
                    cfg.curate.candidates = candidates.clone();
                }
                if verdicts.is_some() {
                    cfg.curate.verdicts = verdicts.clone();
                }
            }
            Self::FilterCorpus { top_fraction, input, .. } => {
                if let Some(f) = top_fraction {
                    cfg.filter.top_fraction = *f;
                }
                if input.is_some() {
                    cfg.filter.input = input.clone();
                }
            }
            Self::Serve { bind: Some(b), .. } => cfg.serve.bind = Some(b.clone()),
            _ => {}
        }
        let cwd = std::env::current_dir().map_err(|e| AppError::io(".", e))?;
        cfg.resolve_paths(&cwd);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Runs the command; the returned JSON is printed on success.
    pub fn run(&self) -> Result<Value> {
        let cfg = self.config()?;
        match self {
            Self::Synth(_) => commands::synth(&cfg),
            Self::Finetune(_) => commands::finetune(&cfg),
            Self::Cache(_) => commands::cache(&cfg),
            Self::TrainTinet { .. } => commands::train_tinet(&cfg),
            Self::Eval { .. } => commands::eval(&cfg),
            Self::ProbeVocab { .. } => commands::probe_vocab(&cfg),
            Self::SelfRetrieval { .. } => commands::self_retrieval(&cfg),
            Self::CurateMine { .. } => commands::curate_mine(&cfg),
            Self::CurateApply { .. } => commands::curate_apply(&cfg),
            Self::FilterCorpus { .. } => commands::filter_corpus(&cfg),
            Self::Serve { .. } => service::serve(cfg).map(|_| Value::Null),
            Self::CheckConfig(_) => Ok(serde_json::to_value(&cfg).expect("config serializes")),
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Success prints the summary JSON on stdout; failure prints
/// `{"error": ...}` on stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = AppError::Usage(e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match cli.command.run() {
        Ok(Value::Null) => 0,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
