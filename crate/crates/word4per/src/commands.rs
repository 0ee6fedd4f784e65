//! One function per subcommand. Each reads a validated [`Config`], writes
//! into the run directory and returns a JSON summary for stdout.
//!
//! Outputs never embed timestamps or the run directory itself, so two runs
//! with the same config and seeds produce byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use word4per_core::analysis::{self_retrieval_probe, substitute_word_query, vocab_neighbors, SubstitutionStrategy};
use word4per_core::cache::{build_feature_cache, FeatureCache, FeatureTable};
use word4per_core::curation::{apply_verdicts, false_negative_candidates, filter_by_resolution, Candidate, Verdict};
use word4per_core::dataset::{ImageDataset, ManifestKind, Triplet};
use word4per_core::encoder::{DualEncoder, ToyDualEncoder};
use word4per_core::losses::Supervision;
use word4per_core::metrics::{evaluate, EvalReport, QueryOutcome};
use word4per_core::retrieval::{QueryEngine, QueryMode, QuerySpec};
use word4per_core::synth::SyntheticCorpus;
use word4per_core::tinet::TiNet;
use word4per_core::tokenizer::WhitespaceTokenizer;
use word4per_core::training::{random_tinet, run_stage1, run_stage2, StepRecord, TinetSpec};

use crate::config::Config;
use crate::error::{AppError, Result};
use crate::formats::{read_cache, read_encoder, read_tinet, write_cache, write_encoder, write_tinet, TinetCheckpoint};
use crate::imageio::{write_png, FsImages};
use crate::manifest::{load_images, load_triplets, load_triplets_checked, read_jsonl, write_images, write_jsonl, write_triplets, ImageManifest, ManifestLine};
use crate::rundir::{NetInfo, RunDir, TrainLog};

const TOOL: &str = concat!("word4per ", env!("CARGO_PKG_VERSION"));

fn run_dir(cfg: &Config) -> Result<RunDir> {
    let run = RunDir::create(cfg.run.dir.as_deref().expect("run.dir is required"))?;
    run.write_snapshot(cfg)?;
    Ok(run)
}

fn path(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("required key checked by Config::require")
}

/// The configured encoder checkpoint, frozen.
pub fn load_frozen_encoder(cfg: &Config) -> Result<ToyDualEncoder> {
    Ok(read_encoder(path(&cfg.encoder.checkpoint))?.frozen())
}

pub fn image_source(manifest: &ImageManifest, encoder: &ToyDualEncoder) -> FsImages {
    let c = encoder.config();
    FsImages::new(&manifest.root, c.image_height, c.image_width)
}

/// Features of `manifest`, read from `<cache.dir>/<split>` when that cache
/// exists and computed with the encoder otherwise.
pub fn split_features(cfg: &Config, encoder: &ToyDualEncoder, split: &str, manifest: &ImageManifest) -> Result<FeatureCache> {
    if let Some(dir) = &cfg.cache.dir {
        let d = dir.join(split);
        if d.join("images.w4pc").exists() {
            let cache = read_cache(&d)?;
            cache.check_encoder(encoder)?;
            for r in manifest.dataset.images() {
                cache.images.require(&r.image_id)?;
            }
            return Ok(cache);
        }
    }
    Ok(build_feature_cache(encoder, &manifest.dataset, &image_source(manifest, encoder))?)
}

/// TINet checkpoints keyed by their stored name, plus the names in the
/// order given.
pub fn load_tinets(paths: &[PathBuf]) -> Result<(BTreeMap<String, TiNet>, Vec<String>)> {
    let mut map = BTreeMap::new();
    let mut order = Vec::new();
    for p in paths {
        let ckpt = read_tinet(p)?;
        if map.insert(ckpt.name.clone(), ckpt.tinet).is_some() {
            return Err(AppError::format(p, format!("a TINet named `{}` is already loaded", ckpt.name)));
        }
        order.push(ckpt.name);
    }
    Ok((map, order))
}

fn trace_summary(trace: &[StepRecord]) -> Value {
    json!({
        "steps": trace.len(),
        "first_loss": trace.first().map(|r| r.loss),
        "last_loss": trace.last().map(|r| r.loss),
    })
}

/// Renders the synthetic corpus to PNGs with manifests for training, the
/// target gallery, the query images and the triplets.
pub fn synth(cfg: &Config) -> Result<Value> {
    cfg.require(&["run.dir"])?;
    let run = run_dir(cfg)?;
    let corpus = SyntheticCorpus::generate(cfg.synth.synth())?;
    let (h, w) = (corpus.config.height, corpus.config.width);
    for r in corpus.dataset.images() {
        write_png(&run.path(&r.path), h, w, corpus.render_rgb8(&r.image_id)?)?;
    }
    write_images(&run.path("train.jsonl"), &corpus.dataset)?;
    let select = |ids: &[&str]| -> Result<ImageDataset> {
        let keep: Vec<usize> = ids.iter().map(|id| corpus.dataset.position(id).expect("corpus id")).collect();
        let entries = corpus.dataset.select(&keep)?.entries();
        Ok(ImageDataset::new(entries, ManifestKind::ImageOnly)?)
    };
    let gallery: Vec<&str> = corpus.gallery_ids.iter().map(String::as_str).collect();
    let queries: Vec<&str> = corpus.triplets.iter().map(|t| t.query_image_id.as_str()).collect();
    write_images(&run.path("gallery.jsonl"), &select(&gallery)?)?;
    write_images(&run.path("references.jsonl"), &select(&queries)?)?;
    write_triplets(&run.path("triplets.jsonl"), &corpus.triplets)?;
    let summary = json!({
        "identities": corpus.identities.len(),
        "images": corpus.dataset.len(),
        "gallery": gallery.len(),
        "triplets": corpus.triplets.len(),
    });
    run.write_json("summary.json", &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct PartsRow {
    step: usize,
    irr: f64,
    cmpm: f64,
    id: f64,
}

/// Stage 1: fine-tunes the toy encoder pair on an image-caption manifest.
pub fn finetune(cfg: &Config) -> Result<Value> {
    cfg.require(&["run.dir", "data.manifest"])?;
    let run = run_dir(cfg)?;
    let manifest = load_images(path(&cfg.data.manifest), ManifestKind::ImageCaption)?;
    let mut encoder = match &cfg.finetune.resume {
        Some(p) => read_encoder(p)?,
        None => {
            let captions = manifest.dataset.captions().unwrap_or_default();
            let tokenizer = WhitespaceTokenizer::with_corpus(captions.iter().map(|c| c.text.as_str()));
            ToyDualEncoder::new(cfg.encoder.toy(), tokenizer)?
        }
    };
    let source = image_source(&manifest, &encoder);
    let f = &cfg.finetune;
    let mut log = TrainLog::stage1(&run, f.checkpoint_every, f.keep_checkpoints)?;
    let report = run_stage1(&mut encoder, &manifest.dataset, &source, &f.train(), &f.options(), &mut log)
        .map_err(|e| log.explain(e))?;
    log.finish()?;
    write_encoder(&run.path("encoder.w4pe"), &encoder)?;
    let parts: Vec<PartsRow> = report
        .trace
        .iter()
        .zip(&report.parts)
        .map(|(r, p)| PartsRow {
            step: r.step,
            irr: p.irr,
            cmpm: p.cmpm,
            id: p.id,
        })
        .collect();
    run.write_csv("parts.csv", &parts)?;
    let mut summary = trace_summary(&report.trace);
    summary["encoder"] = json!("encoder.w4pe");
    summary["encoder_fingerprint"] = json!(hex::encode(encoder.fingerprint()));
    run.write_json("summary.json", &summary)?;
    Ok(summary)
}

/// Encodes every configured manifest with the frozen encoder into
/// `<run>/{train,gallery,references}/`.
pub fn cache(cfg: &Config) -> Result<Value> {
    cfg.require(&["run.dir", "encoder.checkpoint"])?;
    let splits: Vec<(&str, &Path, ManifestKind)> = [
        ("train", &cfg.data.manifest, ManifestKind::ImageCaption),
        ("gallery", &cfg.data.gallery, ManifestKind::ImageOnly),
        ("references", &cfg.data.references, ManifestKind::ImageOnly),
    ]
    .into_iter()
    .filter_map(|(s, p, k)| p.as_deref().map(|p| (s, p, k)))
    .collect();
    if splits.is_empty() {
        return Err(AppError::Config(vec![
            "data: set at least one of manifest, gallery, references to cache".into(),
        ]));
    }
    let run = run_dir(cfg)?;
    let encoder = load_frozen_encoder(cfg)?;
    let mut out = serde_json::Map::new();
    for (split, p, kind) in splits {
        let manifest = load_images(p, kind)?;
        let cache = build_feature_cache(&encoder, &manifest.dataset, &image_source(&manifest, &encoder))?;
        write_cache(&run.path(split), &cache)?;
        out.insert(
            split.into(),
            json!({
                "images": cache.images.len(),
                "texts": cache.texts.as_ref().map(FeatureTable::len),
            }),
        );
    }
    let summary = json!({
        "splits": out,
        "dim": encoder.embed_dim(),
        "encoder_fingerprint": hex::encode(encoder.fingerprint()),
    });
    run.write_json("summary.json", &summary)?;
    Ok(summary)
}

/// Stage 2: trains (or, with `untrained`, only initialises) every
/// configured TINet against the frozen encoder.
pub fn train_tinet(cfg: &Config) -> Result<Value> {
    cfg.require(&["run.dir", "encoder.checkpoint", "data.manifest"])?;
    let run = run_dir(cfg)?;
    let encoder = load_frozen_encoder(cfg)?;
    let t = &cfg.tinet;
    let specs: Vec<TinetSpec> = t
        .nets
        .iter()
        .map(|n| TinetSpec {
            config: n.tinet_config(encoder.embed_dim(), encoder.token_dim()),
            mode: n.mode,
        })
        .collect();
    let fp = encoder.fingerprint();
    let (tinets, traces) = if t.untrained {
        let nets = specs
            .iter()
            .map(|s| random_tinet(&encoder, s.config))
            .collect::<word4per_core::Result<Vec<_>>>()?;
        (nets, vec![Vec::new(); specs.len()])
    } else {
        let needs_text = specs.iter().any(|s| s.mode == Supervision::Text);
        let kind = if needs_text { ManifestKind::ImageCaption } else { ManifestKind::ImageOnly };
        let manifest = load_images(path(&cfg.data.manifest), kind)?;
        let features = split_features(cfg, &encoder, "train", &manifest)?;
        let nets = t.nets.iter().map(|n| NetInfo { name: n.name.clone(), mode: n.mode }).collect();
        let mut log = TrainLog::stage2(&run, nets, fp, t.checkpoint_every, t.keep_checkpoints)?;
        let out = run_stage2(&encoder, &manifest.dataset, &features, &specs, &t.train(), &mut log)
            .map_err(|e| log.explain(e))?;
        log.finish()?;
        (out.tinets, out.traces)
    };
    let mut nets = Vec::new();
    for ((net, tinet), trace) in t.nets.iter().zip(tinets).zip(&traces) {
        let rel = format!("tinets/{}.w4pt", net.name);
        let mut metadata = BTreeMap::from([
            ("tool".to_string(), json!(TOOL)),
            ("trained".to_string(), json!(!t.untrained)),
            ("steps".to_string(), json!(trace.len())),
        ]);
        if let Some(last) = trace.last() {
            metadata.insert("final_loss".into(), json!(last.loss));
        }
        let ckpt = TinetCheckpoint {
            name: net.name.clone(),
            mode: net.mode,
            tinet: tinet.with_encoder(fp),
            metadata,
        };
        write_tinet(&run.path(&rel), &ckpt)?;
        let mut entry = trace_summary(trace);
        entry["name"] = json!(net.name);
        entry["mode"] = json!(net.mode.to_string());
        entry["config"] = json!(ckpt.tinet.config());
        entry["checkpoint"] = json!(rel);
        nets.push(entry);
    }
    let summary = json!({ "nets": nets, "encoder_fingerprint": hex::encode(fp) });
    run.write_json("summary.json", &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct Metrics {
    rank1: f64,
    rank5: f64,
    rank10: f64,
    map: f64,
    num_queries: usize,
}

impl Metrics {
    fn of(report: &EvalReport) -> Self {
        let [(_, r1), (_, r5), (_, r10), (_, map)] = report.summary();
        Self {
            rank1: r1,
            rank5: r5,
            rank10: r10,
            map,
            num_queries: report.num_queries,
        }
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    metrics: Metrics,
    config_fingerprint: String,
    encoder_fingerprint: String,
    query: Value,
    per_query: &'a [QueryOutcome],
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    command: &'a str,
    mode: String,
    tinets: String,
    strategy: String,
    rank1: f64,
    rank5: f64,
    rank10: f64,
    map: f64,
    num_queries: usize,
}

fn write_report(run: &RunDir, cfg: &Config, encoder: &ToyDualEncoder, command: &str, query: Value, report: &EvalReport) -> Result<Value> {
    let metrics = Metrics::of(report);
    let row = SummaryRow {
        command,
        mode: query["mode"].as_str().unwrap_or_default().to_string(),
        tinets: query["tinets"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_str).collect::<Vec<_>>().join("+"))
            .unwrap_or_default(),
        strategy: query["strategy"].as_str().unwrap_or_default().to_string(),
        rank1: metrics.rank1,
        rank5: metrics.rank5,
        rank10: metrics.rank10,
        map: metrics.map,
        num_queries: metrics.num_queries,
    };
    let file = ReportFile {
        metrics,
        config_fingerprint: cfg.fingerprint(),
        encoder_fingerprint: hex::encode(encoder.fingerprint()),
        query,
        per_query: &report.per_query,
    };
    run.write_json("report.json", &file)?;
    run.write_csv("summary.csv", &[row])?;
    Ok(json!({ "metrics": file.metrics, "report": "report.json" }))
}

fn strategy_name(s: SubstitutionStrategy) -> &'static str {
    match s {
        SubstitutionStrategy::Pseudo => "pseudo",
        SubstitutionStrategy::FirstSim => "1st-sim",
        SubstitutionStrategy::TextOnly => "text-only",
    }
}

/// Reference-image features: the `references` manifest when configured,
/// otherwise none (the gallery is searched instead).
fn reference_features(cfg: &Config, encoder: &ToyDualEncoder) -> Result<FeatureTable> {
    match &cfg.data.references {
        Some(p) => {
            let m = load_images(p, ManifestKind::ImageOnly)?;
            Ok(split_features(cfg, encoder, "references", &m)?.images)
        }
        None => Ok(FeatureTable::new(encoder.embed_dim())),
    }
}

/// Composed (or baseline) retrieval over grouped triplets.
pub fn eval(cfg: &Config) -> Result<Value> {
    let e = &cfg.eval;
    let mut required = vec!["run.dir", "encoder.checkpoint", "data.gallery", "data.triplets"];
    if e.mode == QueryMode::Composed && e.strategy != SubstitutionStrategy::TextOnly {
        required.push("eval.tinets");
    }
    cfg.require(&required)?;
    let run = run_dir(cfg)?;
    let encoder = load_frozen_encoder(cfg)?;
    let gallery_m = load_images(path(&cfg.data.gallery), ManifestKind::ImageOnly)?;
    let gallery = split_features(cfg, &encoder, "gallery", &gallery_m)?.images;
    let references = reference_features(cfg, &encoder)?;
    let triplets = load_triplets_checked(path(&cfg.data.triplets), |id| {
        gallery.position(id).is_some() || references.position(id).is_some()
    })?;
    let (tinets, names) = load_tinets(&e.tinets)?;
    let engine = QueryEngine {
        encoder: &encoder,
        references: &references,
        gallery: &gallery,
        tinets: &tinets,
    };
    let report = evaluate(&triplets, &gallery, e.exclude_reference, |q| match e.strategy {
        SubstitutionStrategy::Pseudo => engine.embed(
            &QuerySpec {
                mode: e.mode,
                image_id: Some(q.image_id.clone()),
                caption: q.caption.clone(),
                tinet_ids: names.clone(),
            },
            None,
        ),
        strategy => {
            let image = engine.reference_embedding(&q.image_id)?;
            let nets = engine.tinets_for(&names)?;
            substitute_word_query(&encoder, &nets, image, q.caption.as_deref().unwrap_or_default(), strategy)
        }
    })?;
    let query = json!({
        "mode": e.mode.to_string(),
        "tinets": names,
        "strategy": strategy_name(e.strategy),
        "exclude_reference": e.exclude_reference,
    });
    write_report(&run, cfg, &encoder, "eval", query, &report)
}

#[derive(Serialize)]
struct NeighborOut {
    word: String,
    sim: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    partial: bool,
}

#[derive(Serialize)]
struct NeighborLine {
    image_id: String,
    neighbors: Vec<NeighborOut>,
}

/// Nearest vocabulary words to the pseudo-word of every probed image.
pub fn probe_vocab(cfg: &Config) -> Result<Value> {
    cfg.require(&["run.dir", "encoder.checkpoint", "probe.tinet"])?;
    let source = cfg.data.references.as_ref().or(cfg.data.gallery.as_ref()).ok_or_else(|| {
        AppError::Config(vec!["data.references: required by probe-vocab (or data.gallery)".into()])
    })?;
    let (split, _) = if cfg.data.references.is_some() { ("references", ()) } else { ("gallery", ()) };
    let run = run_dir(cfg)?;
    let encoder = load_frozen_encoder(cfg)?;
    let ckpt = read_tinet(path(&cfg.probe.tinet))?;
    if ckpt.tinet.encoder_fingerprint() != Some(&encoder.fingerprint()) {
        return Err(word4per_core::Error::FingerprintMismatch.into());
    }
    let manifest = load_images(source, ManifestKind::ImageOnly)?;
    let features = split_features(cfg, &encoder, split, &manifest)?.images;
    let mut lines = Vec::with_capacity(manifest.dataset.len());
    for r in manifest.dataset.images() {
        let pseudo = ckpt.tinet.forward_f32(features.require(&r.image_id)?)?;
        let neighbors = vocab_neighbors(&pseudo.vector, encoder.tokenizer(), encoder.token_table(), cfg.probe.k)?;
        lines.push(NeighborLine {
            image_id: r.image_id.clone(),
            neighbors: neighbors
                .into_iter()
                .map(|n| NeighborOut {
                    word: n.word,
                    sim: n.similarity,
                    partial: n.partial,
                })
                .collect(),
        });
    }
    write_jsonl(&run.path("neighbors.jsonl"), &lines)?;
    Ok(json!({ "tinet": ckpt.name, "images": lines.len(), "k": cfg.probe.k, "output": "neighbors.jsonl" }))
}

/// Caption-free pseudo-word queries that should retrieve their own image
/// from the gallery extended with the reference images.
pub fn self_retrieval(cfg: &Config) -> Result<Value> {
    cfg.require(&["run.dir", "encoder.checkpoint", "data.gallery", "self_retrieval.tinets"])?;
    if cfg.data.references.is_none() && cfg.data.triplets.is_none() {
        return Err(AppError::Config(vec![
            "data.references: required by self-retrieval (or data.triplets)".into(),
        ]));
    }
    let run = run_dir(cfg)?;
    let encoder = load_frozen_encoder(cfg)?;
    let gallery_m = load_images(path(&cfg.data.gallery), ManifestKind::ImageOnly)?;
    let gallery = split_features(cfg, &encoder, "gallery", &gallery_m)?.images;
    let references = reference_features(cfg, &encoder)?;
    let ids: Vec<String> = match &cfg.data.references {
        Some(_) => references.ids().to_vec(),
        None => {
            let mut seen = BTreeSet::new();
            load_triplets(path(&cfg.data.triplets))?
                .into_iter()
                .filter_map(|t| seen.insert(t.query_image_id.clone()).then_some(t.query_image_id))
                .collect()
        }
    };
    let mut search = gallery;
    for (id, row) in references.iter() {
        if search.position(id).is_none() {
            search.push(id.to_string(), row)?;
        }
    }
    let (tinets, names) = load_tinets(&cfg.self_retrieval.tinets)?;
    let nets: Vec<&TiNet> = names.iter().map(|n| &tinets[n]).collect();
    let report = self_retrieval_probe(&encoder, &nets, &ids, &references, &search)?;
    let query = json!({ "mode": "self-retrieval", "tinets": names, "strategy": "pseudo" });
    write_report(&run, cfg, &encoder, "self-retrieval", query, &report)
}

fn unique_targets(triplets: &[Triplet]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    triplets
        .iter()
        .flat_map(|t| t.target_image_ids.iter())
        .filter(|id| seen.insert(id.as_str()))
        .cloned()
        .collect()
}

/// Proposes likely false negatives for every annotated target.
pub fn curate_mine(cfg: &Config) -> Result<Value> {
    cfg.require(&["run.dir", "encoder.checkpoint", "data.gallery", "data.triplets"])?;
    let run = run_dir(cfg)?;
    let encoder = load_frozen_encoder(cfg)?;
    let gallery_m = load_images(path(&cfg.data.gallery), ManifestKind::ImageOnly)?;
    let refs_m = cfg
        .data
        .references
        .as_deref()
        .map(|p| load_images(p, ManifestKind::ImageOnly))
        .transpose()?;
    let triplets = load_triplets_checked(path(&cfg.data.triplets), |id| {
        gallery_m.dataset.contains(id) || refs_m.as_ref().is_some_and(|m| m.dataset.contains(id))
    })?;
    let gallery = split_features(cfg, &encoder, "gallery", &gallery_m)?;
    let targets = unique_targets(&triplets);
    let candidates = false_negative_candidates(&encoder, &gallery, &triplets, &targets, cfg.curate.k)?;
    write_jsonl(&run.path("candidates.jsonl"), &candidates)?;
    let summary = json!({
        "targets": targets.len(),
        "candidates": candidates.len(),
        "k": cfg.curate.k,
        "output": "candidates.jsonl",
    });
    run.write_json("summary.json", &summary)?;
    Ok(summary)
}

pub fn read_candidates(p: &Path) -> Result<Vec<Candidate>> {
    Ok(read_jsonl(p)?.into_iter().map(|(_, c)| c).collect())
}

pub fn read_verdicts(p: &Path) -> Result<Vec<Verdict>> {
    Ok(read_jsonl(p)?.into_iter().map(|(_, v)| v).collect())
}

/// Folds a verdict log into the triplet file.
pub fn curate_apply(cfg: &Config) -> Result<Value> {
    cfg.require(&["run.dir", "data.triplets", "curate.candidates", "curate.verdicts"])?;
    let run = run_dir(cfg)?;
    let triplets = load_triplets(path(&cfg.data.triplets))?;
    let candidates = read_candidates(path(&cfg.curate.candidates))?;
    let verdicts = read_verdicts(path(&cfg.curate.verdicts))?;
    let out = apply_verdicts(&triplets, &candidates, &verdicts)?;
    write_triplets(&run.path("triplets.jsonl"), &out.triplets)?;
    write_jsonl(&run.path("rejected.jsonl"), &out.rejected)?;
    let summary = json!({
        "verdicts": verdicts.len(),
        "added": out.added,
        "rejected": out.rejected.len(),
        "triplets": out.triplets.len(),
        "targets": out.triplets.iter().map(|t| t.target_image_ids.len()).sum::<usize>(),
    });
    run.write_json("summary.json", &summary)?;
    Ok(summary)
}

/// Keeps the largest images of a manifest by pixel area. Image paths in the
/// output are absolute so the new manifest resolves from the run directory.
pub fn filter_corpus(cfg: &Config) -> Result<Value> {
    let input = cfg.filter.input.as_ref().or(cfg.data.manifest.as_ref());
    let Some(input) = input else {
        return Err(AppError::Config(vec!["filter.input: required by filter-corpus (or data.manifest)".into()]));
    };
    cfg.require(&["run.dir"])?;
    let run = run_dir(cfg)?;
    let lines: Vec<(usize, ManifestLine)> = read_jsonl(input)?;
    let kind = if !lines.is_empty() && lines.iter().all(|(_, l)| l.caption.is_some()) {
        ManifestKind::ImageCaption
    } else {
        ManifestKind::ImageOnly
    };
    let manifest = load_images(input, kind)?;
    let kept = filter_by_resolution(&manifest.dataset, cfg.filter.top_fraction)?;
    let out: Vec<ManifestLine> = kept
        .entries()
        .into_iter()
        .map(|(mut r, c)| {
            r.path = manifest.resolve(&r).to_string_lossy().into_owned();
            ManifestLine::new(&r, c.as_deref())
        })
        .collect();
    write_jsonl(&run.path("manifest.jsonl"), &out)?;
    let summary = json!({
        "input": manifest.dataset.len(),
        "kept": out.len(),
        "top_fraction": cfg.filter.top_fraction,
        "output": "manifest.jsonl",
    });
    run.write_json("summary.json", &summary)?;
    Ok(summary)
}
