//! A small on-disk world for service and CLI tests: a rendered synthetic
//! corpus, an untrained frozen encoder, two random TINets bound to it, one
//! bound to a different encoder, and a three-pair curation queue.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;
use word4per::commands;
use word4per::config::Config;
use word4per::formats::{write_encoder, write_tinet, TinetCheckpoint};
use word4per::manifest::{load_images, read_jsonl, write_jsonl};
use word4per::service::{router, AppState};
use word4per_core::curation::Candidate;
use word4per_core::dataset::ManifestKind;
use word4per_core::encoder::{ToyDualEncoder, ToyEncoderConfig};
use word4per_core::losses::Supervision;
use word4per_core::tinet::TiNetConfig;
use word4per_core::tokenizer::WhitespaceTokenizer;
use word4per_core::training::random_tinet;

pub mod pipeline;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: Config,
    pub encoder: ToyDualEncoder,
}

impl Fixture {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn state(&self) -> Arc<AppState> {
        AppState::load(self.config.clone()).unwrap()
    }
}

fn encoder_config(seed: u64) -> ToyEncoderConfig {
    ToyEncoderConfig {
        embed_dim: 16,
        token_dim: 12,
        text_hidden: 16,
        visual_hidden: 16,
        seed,
        ..Default::default()
    }
}

pub fn save_tinet(path: &Path, name: &str, mode: Supervision, encoder: &ToyDualEncoder, seed: u64) {
    let cfg = TiNetConfig {
        depth: 2,
        hidden_width: 24,
        ..TiNetConfig::new(0, 0, seed)
    };
    let ckpt = TinetCheckpoint {
        name: name.into(),
        mode,
        tinet: random_tinet(encoder, cfg).unwrap(),
        metadata: BTreeMap::new(),
    };
    write_tinet(path, &ckpt).unwrap();
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = Config::default();
    cfg.synth.identities = 4;
    cfg.run.dir = Some(root.join("data"));
    commands::synth(&cfg).unwrap();

    let train = load_images(&root.join("data/train.jsonl"), ManifestKind::ImageCaption).unwrap();
    let captions = train.dataset.captions().unwrap();
    let tokenizer = WhitespaceTokenizer::with_corpus(captions.iter().map(|c| c.text.as_str()));
    let encoder = ToyDualEncoder::new(encoder_config(0), tokenizer.clone()).unwrap().frozen();
    write_encoder(&root.join("encoder.w4pe"), &encoder).unwrap();
    let other = ToyDualEncoder::new(encoder_config(1), tokenizer).unwrap().frozen();
    save_tinet(&root.join("text.w4pt"), "text", Supervision::Text, &encoder, 1);
    save_tinet(&root.join("vis.w4pt"), "vis", Supervision::Vis, &encoder, 2);
    save_tinet(&root.join("foreign.w4pt"), "foreign", Supervision::Text, &other, 3);

    let mut cfg = Config::default();
    cfg.data.manifest = Some(root.join("data/train.jsonl"));
    cfg.data.gallery = Some(root.join("data/gallery.jsonl"));
    cfg.data.references = Some(root.join("data/references.jsonl"));
    cfg.data.triplets = Some(root.join("data/triplets.jsonl"));
    cfg.encoder.checkpoint = Some(root.join("encoder.w4pe"));
    cfg.run.dir = Some(root.join("mine"));
    cfg.curate.k = 2;
    commands::curate_mine(&cfg).unwrap();
    let mined: Vec<Candidate> = read_jsonl(&root.join("mine/candidates.jsonl"))
        .unwrap()
        .into_iter()
        .map(|(_, c)| c)
        .collect();
    write_jsonl(&root.join("three.jsonl"), &mined[..3]).unwrap();

    cfg.run.dir = None;
    cfg.serve.tinets = ["text", "vis", "foreign"].iter().map(|n| root.join(format!("{n}.w4pt"))).collect();
    cfg.serve.candidates = Some(root.join("three.jsonl"));
    cfg.serve.verdicts = Some(root.join("verdicts.jsonl"));
    cfg.serve.triplets_out = Some(root.join("curated.jsonl"));
    Fixture {
        dir,
        config: cfg,
        encoder,
    }
}

pub struct Reply {
    pub status: StatusCode,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

pub async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<String>) -> Reply {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let res = router(state.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, body }
}

pub async fn post(state: &Arc<AppState>, uri: &str, body: serde_json::Value) -> Reply {
    call(state, "POST", uri, Some(body.to_string())).await
}

pub async fn get(state: &Arc<AppState>, uri: &str) -> Reply {
    call(state, "GET", uri, None).await
}
