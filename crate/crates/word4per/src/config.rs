//! The run configuration shared by every subcommand.
//!
//! A config is a TOML (or JSON) document with one table per section. Every
//! key is optional; omitted keys take the defaults below. Unknown sections
//! and keys are errors, and a failed load reports every offending key at
//! once. Relative paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use word4per_core::analysis::SubstitutionStrategy;
use word4per_core::encoder::ToyEncoderConfig;
use word4per_core::losses::{IrrNorm, Supervision};
use word4per_core::retrieval::QueryMode;
use word4per_core::schedule::TrainConfig;
use word4per_core::synth::SynthConfig;
use word4per_core::tinet::{Activation, TiNetConfig};
use word4per_core::training::Stage1Options;

use crate::error::{AppError, Result};

fn from_str_de<'de, D, T>(d: D) -> std::result::Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: FromStr,
    T::Err: std::fmt::Display,
{
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Output directory of the subcommand.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Image-caption training manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Gallery manifest searched at query time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gallery: Option<PathBuf>,
    /// Manifest of query (reference) images outside the gallery.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub references: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplets: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// Encoder checkpoint; without one a fresh toy encoder is built from the
    /// dimensions below and the training captions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub visual_hidden: usize,
    pub patch_grid: (usize, usize),
    pub cell_grid: (usize, usize),
    pub image_height: usize,
    pub image_width: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self::from_toy(None, ToyEncoderConfig::default())
    }
}

impl EncoderSection {
    fn from_toy(checkpoint: Option<PathBuf>, c: ToyEncoderConfig) -> Self {
        Self {
            checkpoint,
            embed_dim: c.embed_dim,
            token_dim: c.token_dim,
            text_hidden: c.text_hidden,
            visual_hidden: c.visual_hidden,
            patch_grid: c.patch_grid,
            cell_grid: c.cell_grid,
            image_height: c.image_height,
            image_width: c.image_width,
            max_len: c.max_len,
            seed: c.seed,
        }
    }

    pub fn toy(&self) -> ToyEncoderConfig {
        ToyEncoderConfig {
            embed_dim: self.embed_dim,
            token_dim: self.token_dim,
            text_hidden: self.text_hidden,
            visual_hidden: self.visual_hidden,
            patch_grid: self.patch_grid,
            cell_grid: self.cell_grid,
            image_height: self.image_height,
            image_width: self.image_width,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub head_lr: f64,
    pub warmup_epochs: usize,
    pub tau: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub mask_rate: f64,
    pub attention_dim: usize,
    pub irr_norm: IrrNorm,
    pub epsilon: f64,
    /// Images per identity in a batch; 0 disables identity-aware sampling.
    pub identity_cap: usize,
    /// Save the encoder every this many epochs.
    pub checkpoint_every: usize,
    /// Keep only the newest this many per-epoch checkpoints; 0 keeps all.
    pub keep_checkpoints: usize,
    /// Encoder checkpoint to continue from instead of a fresh toy encoder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let t = TrainConfig::stage1();
        let o = Stage1Options::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            head_lr: t.head_lr,
            warmup_epochs: t.warmup_epochs,
            tau: t.tau,
            seed: t.seed,
            max_steps: t.max_steps,
            mask_rate: o.mask_rate,
            attention_dim: o.attention_dim,
            irr_norm: o.irr_norm,
            epsilon: o.epsilon,
            identity_cap: o.identity_cap.unwrap_or(0),
            checkpoint_every: 1,
            keep_checkpoints: 3,
            resume: None,
        }
    }
}

impl FinetuneSection {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            head_lr: self.head_lr,
            warmup_epochs: self.warmup_epochs,
            tau: self.tau,
            seed: self.seed,
            max_steps: self.max_steps,
        }
    }

    pub fn options(&self) -> Stage1Options {
        Stage1Options {
            mask_rate: self.mask_rate,
            attention_dim: self.attention_dim,
            irr_norm: self.irr_norm,
            epsilon: self.epsilon,
            identity_cap: (self.identity_cap > 0).then_some(self.identity_cap),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    /// Feature cache directory written by `cache` and read by later steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// One inversion network to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub name: String,
    #[serde(deserialize_with = "from_str_de")]
    pub mode: Supervision,
    /// Defaults to 3 for `Text` and 2 for `Vis`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    pub hidden: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            name: "text".into(),
            mode: Supervision::Text,
            depth: None,
            hidden: 512,
            activation: Activation::Gelu,
            seed: 1,
        }
    }
}

impl NetSection {
    pub fn depth(&self) -> usize {
        self.depth.unwrap_or(match self.mode {
            Supervision::Text => 3,
            Supervision::Vis => 2,
        })
    }

    pub fn tinet_config(&self, d_in: usize, d_out: usize) -> TiNetConfig {
        TiNetConfig {
            depth: self.depth(),
            hidden_width: self.hidden,
            d_in,
            d_out,
            activation: self.activation,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinetSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub head_lr: f64,
    pub warmup_epochs: usize,
    pub tau: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub checkpoint_every: usize,
    /// Keep only the newest this many per-epoch checkpoints of each net;
    /// 0 keeps all.
    pub keep_checkpoints: usize,
    /// Save the networks at initialisation instead of training them.
    pub untrained: bool,
    pub nets: Vec<NetSection>,
}

impl Default for TinetSection {
    fn default() -> Self {
        let t = TrainConfig::stage2();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            head_lr: t.head_lr,
            warmup_epochs: t.warmup_epochs,
            tau: t.tau,
            seed: t.seed,
            max_steps: t.max_steps,
            checkpoint_every: 1,
            keep_checkpoints: 3,
            untrained: false,
            nets: vec![NetSection::default()],
        }
    }
}

impl TinetSection {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            head_lr: self.head_lr,
            warmup_epochs: self.warmup_epochs,
            tau: self.tau,
            seed: self.seed,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    #[serde(deserialize_with = "from_str_de")]
    pub mode: QueryMode,
    /// TINet checkpoints fused into composed queries.
    pub tinets: Vec<PathBuf>,
    #[serde(deserialize_with = "from_str_de")]
    pub strategy: SubstitutionStrategy,
    pub exclude_reference: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mode: QueryMode::Composed,
            tinets: Vec::new(),
            strategy: SubstitutionStrategy::Pseudo,
            exclude_reference: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tinet: Option<PathBuf>,
    pub k: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { tinet: None, k: 10 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfRetrievalSection {
    pub tinets: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurateSection {
    /// Candidates proposed per target image.
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdicts: Option<PathBuf>,
}

impl Default for CurateSection {
    fn default() -> Self {
        Self {
            k: word4per_core::curation::DEFAULT_CANDIDATES,
            candidates: None,
            verdicts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub top_fraction: f64,
    /// Manifest to filter; defaults to `data.manifest`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            top_fraction: 0.2,
            input: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    /// `host:port`; the `W4P_BIND` environment variable takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bind: Option<String>,
    pub tinets: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<PathBuf>,
    /// Append-only verdict log.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdicts: Option<PathBuf>,
    /// Triplet file rewritten after every verdict.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplets_out: Option<PathBuf>,
    /// Directory of UI assets served at `/`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub identities: usize,
    pub images_per_identity: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub noise: u8,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            identities: s.identities,
            images_per_identity: s.images_per_identity,
            seed: s.seed,
            height: s.height,
            width: s.width,
            noise: s.noise,
        }
    }
}

impl SynthSection {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            identities: self.identities,
            images_per_identity: self.images_per_identity,
            seed: self.seed,
            height: self.height,
            width: self.width,
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub finetune: FinetuneSection,
    pub cache: CacheSection,
    pub tinet: TinetSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
    pub self_retrieval: SelfRetrievalSection,
    pub curate: CurateSection,
    pub filter: FilterSection,
    pub serve: ServeSection,
    pub synth: SynthSection,
}

const SECTIONS: [&str; 13] = [
    "run",
    "data",
    "encoder",
    "finetune",
    "cache",
    "tinet",
    "eval",
    "probe",
    "self_retrieval",
    "curate",
    "filter",
    "serve",
    "synth",
];

fn short(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.find(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

/// Deserializes each key of `table` on its own into `T`, recording one
/// violation per bad key and dropping it from the table.
fn check_keys<T: DeserializeOwned>(prefix: &str, table: &mut Map<String, Value>, out: &mut Vec<String>) {
    table.retain(|key, value| {
        let single = Value::Object(Map::from_iter([(key.clone(), value.clone())]));
        match serde_json::from_value::<T>(single) {
            Ok(_) => true,
            Err(e) => {
                out.push(format!("{prefix}.{key}: {}", short(&e)));
                false
            }
        }
    });
}

/// Structural violations of `doc`; offending keys and sections are removed
/// so the rest can still be checked semantically.
fn check_document(doc: &mut Value) -> Vec<String> {
    let mut out = Vec::new();
    let Some(root) = doc.as_object_mut() else {
        return vec!["config must be a table of sections".into()];
    };
    root.retain(|name, value| {
        if !SECTIONS.contains(&name.as_str()) {
            out.push(format!("{name}: unknown section (expected one of {})", SECTIONS.join(", ")));
            return false;
        }
        let Some(table) = value.as_object_mut() else {
            out.push(format!("{name}: must be a table"));
            return false;
        };
        match name.as_str() {
            "run" => check_keys::<RunSection>(name, table, &mut out),
            "data" => check_keys::<DataSection>(name, table, &mut out),
            "encoder" => check_keys::<EncoderSection>(name, table, &mut out),
            "finetune" => check_keys::<FinetuneSection>(name, table, &mut out),
            "cache" => check_keys::<CacheSection>(name, table, &mut out),
            "tinet" => {
                let nets = table.remove("nets");
                check_keys::<TinetSection>(name, table, &mut out);
                match nets {
                    None => {}
                    Some(Value::Array(mut list)) => {
                        let mut ok = true;
                        for (i, net) in list.iter_mut().enumerate() {
                            match net.as_object_mut() {
                                Some(t) => check_keys::<NetSection>(&format!("tinet.nets[{i}]"), t, &mut out),
                                None => {
                                    out.push(format!("tinet.nets[{i}]: must be a table"));
                                    ok = false;
                                }
                            }
                        }
                        if ok {
                            table.insert("nets".into(), Value::Array(list));
                        }
                    }
                    Some(_) => out.push("tinet.nets: must be an array of tables".into()),
                }
            }
            "eval" => check_keys::<EvalSection>(name, table, &mut out),
            "probe" => check_keys::<ProbeSection>(name, table, &mut out),
            "self_retrieval" => check_keys::<SelfRetrievalSection>(name, table, &mut out),
            "curate" => check_keys::<CurateSection>(name, table, &mut out),
            "filter" => check_keys::<FilterSection>(name, table, &mut out),
            "serve" => check_keys::<ServeSection>(name, table, &mut out),
            "synth" => check_keys::<SynthSection>(name, table, &mut out),
            _ => unreachable!(),
        }
        true
    });
    out
}

fn split_core(prefix: &str, e: word4per_core::Error, out: &mut Vec<String>) {
    match e {
        word4per_core::Error::InvalidConfig(msg) => {
            out.extend(msg.split("; ").map(|m| format!("{prefix}: {m}")));
        }
        other => out.push(format!("{prefix}: {other}")),
    }
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
    if let Ok(abs) = std::path::absolute(&*p) {
        let mut out = PathBuf::new();
        for c in abs.components() {
            match c {
                std::path::Component::ParentDir => {
                    out.pop();
                }
                std::path::Component::CurDir => {}
                other => out.push(other),
            }
        }
        *p = out;
    }
}

impl Config {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let doc: Value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| AppError::Parse {
                path: origin.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?
        } else {
            let table: toml::Table = toml::from_str(text).map_err(|e| AppError::Parse {
                path: origin.to_path_buf(),
                line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
                message: e.message().to_string(),
            })?;
            serde_json::to_value(table).map_err(|e| AppError::Config(vec![e.to_string()]))?
        };
        Self::from_document(doc)
    }

    /// Builds a config from a JSON document, listing every bad key.
    pub fn from_document(mut doc: Value) -> Result<Self> {
        let mut violations = check_document(&mut doc);
        let cfg: Self = serde_json::from_value(doc).map_err(|e| AppError::Config(vec![short(&e)]))?;
        if violations.is_empty() {
            return Ok(cfg);
        }
        if let Err(AppError::Config(more)) = cfg.validate() {
            violations.extend(more);
        }
        Err(AppError::Config(violations))
    }

    /// Applies `section.key=value` overrides. Values are read as TOML
    /// (`3`, `true`, `["a", "b"]`) and fall back to plain strings.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self).expect("config serializes");
        let mut bad = Vec::new();
        for s in sets {
            let Some((key, raw)) = s.split_once('=') else {
                bad.push(format!("--set {s}: expected section.key=value"));
                continue;
            };
            let Some((section, field)) = key.trim().split_once('.').filter(|(a, b)| !a.is_empty() && !b.is_empty() && !b.contains('.')) else {
                bad.push(format!("--set {s}: key must look like section.key"));
                continue;
            };
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .and_then(|v| serde_json::to_value(v).ok())
                .unwrap_or_else(|| Value::String(raw.to_string()));
            let root = doc.as_object_mut().expect("config is a table");
            match root.entry(section).or_insert_with(|| Value::Object(Map::new())) {
                Value::Object(table) => {
                    table.insert(field.to_string(), value);
                }
                _ => bad.push(format!("--set {s}: `{section}` is not a section")),
            }
        }
        if !bad.is_empty() {
            return Err(AppError::Config(bad));
        }
        Self::from_document(doc)
    }

    /// Loads and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let single = [
            &mut self.run.dir,
            &mut self.data.manifest,
            &mut self.data.gallery,
            &mut self.data.references,
            &mut self.data.triplets,
            &mut self.encoder.checkpoint,
            &mut self.finetune.resume,
            &mut self.cache.dir,
            &mut self.probe.tinet,
            &mut self.curate.candidates,
            &mut self.curate.verdicts,
            &mut self.filter.input,
            &mut self.serve.candidates,
            &mut self.serve.verdicts,
            &mut self.serve.triplets_out,
            &mut self.serve.static_dir,
        ];
        for p in single.into_iter().flatten() {
            absolutize(base, p);
        }
        for list in [&mut self.eval.tinets, &mut self.self_retrieval.tinets, &mut self.serve.tinets] {
            for p in list.iter_mut() {
                absolutize(base, p);
            }
        }
    }

    /// Semantic checks across all sections; every problem is reported.
    pub fn validate(&self) -> Result<()> {
        let mut out = Vec::new();
        if let Err(e) = self.encoder.toy().validate() {
            split_core("encoder", e, &mut out);
        }
        if let Err(e) = self.finetune.train().validate() {
            split_core("finetune", e, &mut out);
        }
        let f = &self.finetune;
        if !(f.mask_rate > 0.0 && f.mask_rate < 1.0) {
            out.push(format!("finetune.mask_rate: must lie in (0, 1), got {}", f.mask_rate));
        }
        if f.attention_dim == 0 {
            out.push("finetune.attention_dim: must be positive".into());
        }
        if !(f.epsilon > 0.0 && f.epsilon < 1e-4) {
            out.push(format!("finetune.epsilon: must lie in (0, 1e-4), got {}", f.epsilon));
        }
        if f.checkpoint_every == 0 {
            out.push("finetune.checkpoint_every: must be positive".into());
        }
        let t = &self.tinet;
        if let Err(e) = t.train().validate() {
            split_core("tinet", e, &mut out);
        }
        if t.checkpoint_every == 0 {
            out.push("tinet.checkpoint_every: must be positive".into());
        }
        if t.nets.is_empty() {
            out.push("tinet.nets: at least one network is required".into());
        }
        for (i, n) in t.nets.iter().enumerate() {
            if n.name.is_empty() || n.name.contains(['/', '\\']) || n.name.starts_with('.') {
                out.push(format!("tinet.nets[{i}].name: `{}` is not a valid file stem", n.name));
            }
            if t.nets[..i].iter().any(|m| m.name == n.name) {
                out.push(format!("tinet.nets[{i}].name: duplicate name `{}`", n.name));
            }
            if let Err(e) = n.tinet_config(1, 1).validate() {
                split_core(&format!("tinet.nets[{i}]"), e, &mut out);
            }
        }
        if self.eval.strategy != SubstitutionStrategy::Pseudo && self.eval.mode != QueryMode::Composed {
            out.push("eval.strategy: word substitution needs mode = \"composed\"".into());
        }
        if self.probe.k == 0 {
            out.push("probe.k: must be positive".into());
        }
        if self.curate.k == 0 {
            out.push("curate.k: must be positive".into());
        }
        let frac = self.filter.top_fraction;
        if !(frac > 0.0 && frac <= 1.0) {
            out.push(format!("filter.top_fraction: must lie in (0, 1], got {frac}"));
        }
        if let Some(b) = &self.serve.bind {
            if b.parse::<std::net::SocketAddr>().is_err() {
                out.push(format!("serve.bind: `{b}` is not a host:port address"));
            }
        }
        if let Err(e) = self.synth.synth().validate() {
            split_core("synth", e, &mut out);
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(AppError::Config(out))
        }
    }

    /// Fails listing every key in `keys` (dotted) that is unset.
    pub fn require(&self, keys: &[&str]) -> Result<()> {
        let missing: Vec<String> = keys
            .iter()
            .filter(|k| !self.is_set(k))
            .map(|k| format!("{k}: required by this subcommand"))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(AppError::Config(missing))
        }
    }

    fn is_set(&self, key: &str) -> bool {
        match key {
            "run.dir" => self.run.dir.is_some(),
            "data.manifest" => self.data.manifest.is_some(),
            "data.gallery" => self.data.gallery.is_some(),
            "data.references" => self.data.references.is_some(),
            "data.triplets" => self.data.triplets.is_some(),
            "encoder.checkpoint" => self.encoder.checkpoint.is_some(),
            "cache.dir" => self.cache.dir.is_some(),
            "eval.tinets" => !self.eval.tinets.is_empty(),
            "probe.tinet" => self.probe.tinet.is_some(),
            "self_retrieval.tinets" => !self.self_retrieval.tinets.is_empty(),
            "curate.candidates" => self.curate.candidates.is_some(),
            "curate.verdicts" => self.curate.verdicts.is_some(),
            "serve.verdicts" => self.serve.verdicts.is_some(),
            "serve.candidates" => self.serve.candidates.is_some(),
            "serve.triplets_out" => self.serve.triplets_out.is_some(),
            other => panic!("unknown config key {other}"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// SHA-256 of the snapshot with the output directory blanked, so reruns
    /// into different directories agree.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.run.dir = None;
        hex::encode(Sha256::digest(c.to_json().as_bytes()))
    }
}
