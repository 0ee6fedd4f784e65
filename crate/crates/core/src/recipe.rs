//! The desk-scale end-to-end run: synthetic corpus, toy encoders, both
//! training stages and the inversion networks used by the overfit checks.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cache::{build_feature_cache, FeatureCache};
use crate::encoder::{ToyDualEncoder, ToyEncoderConfig};
use crate::losses::Supervision;
use crate::schedule::TrainConfig;
use crate::synth::{SynthConfig, SyntheticCorpus};
use crate::tinet::{TiNet, TiNetConfig};
use crate::tokenizer::WhitespaceTokenizer;
use crate::training::{run_stage1, run_stage2, Stage1Options, Stage1Report, Stage2Output, TinetSpec, TrainObserver};
use crate::{Error, Result};

/// A named inversion network to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTinet {
    pub name: String,
    pub spec: TinetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskRecipe {
    pub synth: SynthConfig,
    pub encoder: ToyEncoderConfig,
    pub stage1: TrainConfig,
    pub stage1_options: Stage1Options,
    pub stage2: TrainConfig,
    pub tinets: Vec<NamedTinet>,
}

impl Default for DeskRecipe {
    /// 16 identities × 4 images; 300 fine-tuning steps and 200 inversion
    /// steps at batch size 32.
    fn default() -> Self {
        let encoder = ToyEncoderConfig::default();
        let tinet = |depth, seed| TiNetConfig {
            depth,
            ..TiNetConfig::new(encoder.embed_dim, encoder.token_dim, seed)
        };
        Self {
            synth: SynthConfig::default(),
            encoder,
            stage1: TrainConfig {
                epochs: 150,
                batch_size: 32,
                base_lr: 2e-3,
                head_lr: 1e-2,
                warmup_epochs: 5,
                tau: 0.1,
                seed: 0,
                max_steps: None,
            },
            stage1_options: Stage1Options::default(),
            stage2: TrainConfig {
                epochs: 100,
                batch_size: 32,
                base_lr: 1e-2,
                head_lr: 1e-2,
                warmup_epochs: 5,
                tau: 0.02,
                seed: 0,
                max_steps: None,
            },
            tinets: vec![
                NamedTinet {
                    name: "text".into(),
                    spec: TinetSpec {
                        config: tinet(3, 1),
                        mode: Supervision::Text,
                    },
                },
                NamedTinet {
                    name: "vis".into(),
                    spec: TinetSpec {
                        config: tinet(2, 2),
                        mode: Supervision::Vis,
                    },
                },
            ],
        }
    }
}

impl DeskRecipe {
    pub fn specs(&self) -> Vec<TinetSpec> {
        self.tinets.iter().map(|t| t.spec).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.tinets.is_empty() {
            return Err(Error::Empty("tinet list"));
        }
        let mut names: Vec<&str> = self.tinets.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("tinet names must be unique".into()));
        }
        Ok(())
    }
}

/// Everything produced by [`run_desk`].
#[derive(Debug, Clone)]
pub struct DeskRun {
    pub corpus: SyntheticCorpus,
    /// Fine-tuned and frozen.
    pub encoder: ToyDualEncoder,
    pub stage1: Stage1Report,
    pub cache: FeatureCache,
    pub stage2: Stage2Output,
    pub tinets: BTreeMap<String, TiNet>,
}

pub fn desk_tokenizer(corpus: &SyntheticCorpus) -> WhitespaceTokenizer {
    WhitespaceTokenizer::with_corpus(corpus.identities.iter().map(|i| i.caption.as_str()))
}

/// Generates the corpus, fine-tunes the toy encoders, freezes them, caches
/// features and trains every TINet of the recipe.
pub fn run_desk(recipe: &DeskRecipe, observer: &mut dyn TrainObserver) -> Result<DeskRun> {
    recipe.validate()?;
    let corpus = SyntheticCorpus::generate(recipe.synth)?;
    let mut encoder = ToyDualEncoder::new(recipe.encoder, desk_tokenizer(&corpus))?;
    let stage1 = run_stage1(
        &mut encoder,
        &corpus.dataset,
        &corpus,
        &recipe.stage1,
        &recipe.stage1_options,
        observer,
    )?;
    let encoder = encoder.frozen();
    let cache = build_feature_cache(&encoder, &corpus.dataset, &corpus)?;
    let stage2 = run_stage2(&encoder, &corpus.dataset, &cache, &recipe.specs(), &recipe.stage2, observer)?;
    let tinets = recipe
        .tinets
        .iter()
        .zip(&stage2.tinets)
        .map(|(n, t)| (n.name.clone(), t.clone()))
        .collect();
    Ok(DeskRun {
        corpus,
        encoder,
        stage1,
        cache,
        stage2,
        tinets,
    })
}
