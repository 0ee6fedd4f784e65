//! Stage-1 dual-encoder fine-tuning and stage-2 inversion-network training.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cache::{FeatureCache, ImageSource};
use crate::dataset::{BatchSampler, ImageDataset, SamplerConfig};
use crate::encoder::{prompt_layout, DualEncoder, PromptSlot, Template, ToyDualEncoder};
use crate::linalg::Matrix;
use crate::losses::{
    cmpm_loss, id_loss, irr_loss, stage1_objective, tinet_loss, EmbeddingBatch, IrrNorm, LossConfig, MaskedPrediction,
    Supervision,
};
use crate::optim::{Adam, AdamConfig};
use crate::random::{derived_rng, uniform_matrix};
use crate::schedule::{lr_at, TrainConfig};
use crate::tinet::{TiNet, TiNetConfig};
use crate::tokenizer::{tokenize, Tokenizer};
use crate::{Error, Fingerprint, Result};

/// One row of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based global step.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Callbacks fired by the training loops. All methods default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _run: usize, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_stage1_epoch(&mut self, _epoch: usize, _encoder: &ToyDualEncoder) -> Result<()> {
        Ok(())
    }

    fn on_stage2_epoch(&mut self, _epoch: usize, _tinets: &[TiNet]) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

struct Schedule {
    steps_per_epoch: usize,
    total_steps: usize,
}

impl Schedule {
    fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        if steps_per_epoch == 0 {
            return Err(Error::InvalidConfig("dataset yields no complete batch".into()));
        }
        let full = cfg.epochs * steps_per_epoch;
        Ok(Self {
            steps_per_epoch,
            total_steps: cfg.max_steps.map_or(full, |m| m.min(full)),
        })
    }

    /// `(epoch, step within epoch, fractional epoch)` of global step `s`.
    fn position(&self, s: usize) -> (usize, usize, f64) {
        let epoch = s / self.steps_per_epoch;
        let within = s % self.steps_per_epoch;
        (epoch, within, epoch as f64 + within as f64 / self.steps_per_epoch as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Options {
    /// Fraction of caption tokens masked for relation reasoning.
    pub mask_rate: f64,
    /// Width of the cross-attention block of the masked-token head.
    pub attention_dim: usize,
    pub irr_norm: IrrNorm,
    pub epsilon: f64,
    /// Per-identity cap of the batch sampler; `None` samples freely.
    pub identity_cap: Option<usize>,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            attention_dim: 32,
            irr_norm: IrrNorm::Paper,
            epsilon: 1e-8,
            identity_cap: Some(SamplerConfig::DEFAULT_IDENTITY_CAP),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Parts {
    pub irr: f64,
    pub cmpm: f64,
    pub id: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub trace: Vec<StepRecord>,
    pub parts: Vec<Stage1Parts>,
}

/// Masked-token head: token states attend to patch features, then a
/// vocabulary classifier.
struct IrrHead {
    query: Matrix,
    key: Matrix,
    value: Matrix,
    out: Matrix,
    cls_w: Matrix,
    cls_b: Matrix,
}

impl IrrHead {
    fn init(seed: u64, hidden: usize, visual: usize, attn: usize, vocab: usize) -> Self {
        let mut r = derived_rng(seed, u64::MAX, 1);
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);
        Self {
            query: uniform_matrix(&mut r, hidden, attn, inv(hidden)),
            key: uniform_matrix(&mut r, visual, attn, inv(visual)),
            value: uniform_matrix(&mut r, visual, attn, inv(visual)),
            out: uniform_matrix(&mut r, attn, hidden, inv(attn)),
            cls_w: uniform_matrix(&mut r, hidden, vocab, inv(hidden)),
            cls_b: Matrix::zeros(1, vocab),
        }
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.out,
            &mut self.cls_w,
            &mut self.cls_b,
        ]
    }

    fn tensors(&self) -> [&Matrix; 6] {
        [&self.query, &self.key, &self.value, &self.out, &self.cls_w, &self.cls_b]
    }
}

struct MaskedCaption {
    input: Vec<usize>,
    positions: Vec<usize>,
    targets: Vec<usize>,
}

/// Masks at least one content token: each is chosen with probability
/// `rate`, then replaced by MASK (80%), a random word (10%) or kept (10%).
fn mask_caption(ids: &[u32], tokenizer: &dyn Tokenizer, rate: f64, r: &mut impl Rng) -> MaskedCaption {
    let sp = tokenizer.specials();
    let content: Vec<usize> = (0..ids.len()).filter(|&i| !sp.contains(ids[i])).collect();
    let mut positions: Vec<usize> = content.iter().copied().filter(|_| r.random::<f64>() < rate).collect();
    if positions.is_empty() && !content.is_empty() {
        positions.push(content[r.random_range(0..content.len())]);
    }
    let mut input: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let vocab = tokenizer.vocab_size() as u32;
    for &p in &positions {
        let u: f64 = r.random();
        if u < 0.8 {
            input[p] = sp.mask as usize;
        } else if u < 0.9 {
            loop {
                let w = r.random_range(0..vocab);
                if !sp.contains(w) {
                    input[p] = w as usize;
                    break;
                }
            }
        }
    }
    let targets = positions.iter().map(|&p| ids[p] as usize).collect();
    MaskedCaption {
        input,
        positions,
        targets,
    }
}

fn class_index(dataset: &ImageDataset) -> Vec<usize> {
    let identities = dataset.identities();
    dataset
        .images()
        .iter()
        .map(|r| identities.iter().position(|i| *i == r.identity_id).expect("identity listed"))
        .collect()
}

fn grads_for<'g>(grads: &'g crate::autodiff::Gradients, vars: &[Var]) -> Vec<Option<&'g Matrix>> {
    vars.iter().map(|&v| grads.get(v)).collect()
}

/// Fine-tunes the toy encoder pair on image-caption pairs with the sum of
/// the masked-token, matching and identity losses.
pub fn run_stage1(
    encoder: &mut ToyDualEncoder,
    dataset: &ImageDataset,
    images: &dyn ImageSource,
    cfg: &TrainConfig,
    opts: &Stage1Options,
    observer: &mut dyn TrainObserver,
) -> Result<Stage1Report> {
    if encoder.is_frozen() {
        return Err(Error::EncoderFrozen);
    }
    cfg.validate()?;
    if !(opts.mask_rate > 0.0 && opts.mask_rate <= 1.0) || opts.attention_dim == 0 {
        return Err(Error::InvalidConfig("mask_rate must lie in (0, 1] and attention_dim be positive".into()));
    }
    let loss_cfg = LossConfig {
        tau: cfg.tau,
        epsilon: opts.epsilon,
        irr_norm: opts.irr_norm,
    };
    loss_cfg.validate()?;
    let captions = dataset.captions().ok_or(Error::MissingInput("captions"))?;

    let patches = dataset
        .images()
        .iter()
        .map(|rec| encoder.patchify(&images.load(rec)?))
        .collect::<Result<Vec<_>>>()?;
    let max_len = encoder.max_len();
    let token_ids = captions
        .iter()
        .map(|c| Ok(tokenize(encoder.tokenizer(), &c.text, max_len)?.valid().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let classes = class_index(dataset);
    let num_classes = dataset.identities().len();

    let ecfg = *encoder.config();
    let vocab = encoder.tokenizer().vocab_size();
    let mut head = IrrHead::init(cfg.seed, ecfg.text_hidden, ecfg.visual_hidden, opts.attention_dim, vocab);
    let mut id_head = {
        let mut r = derived_rng(cfg.seed, u64::MAX, 2);
        let bound = 1.0 / libm::sqrt(ecfg.embed_dim as f64);
        [uniform_matrix(&mut r, ecfg.embed_dim, num_classes, bound), Matrix::zeros(1, num_classes)]
    };
    let mut enc_opt = Adam::new(AdamConfig::default(), encoder.params().tensors());
    let mut head_opt = Adam::new(
        AdamConfig::default(),
        head.tensors().into_iter().chain(id_head.iter()),
    );

    let sampler = BatchSampler::new(
        dataset,
        SamplerConfig {
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            identity_cap: opts.identity_cap,
        },
    )?;
    let sched = Schedule::new(cfg, sampler.steps_per_epoch())?;
    let inv_sqrt_attn = 1.0 / libm::sqrt(opts.attention_dim as f64);
    let mut plan = Vec::new();
    let mut report = Stage1Report {
        trace: Vec::new(),
        parts: Vec::new(),
    };

    for s in 0..sched.total_steps {
        let (epoch, within, epoch_frac) = sched.position(s);
        if within == 0 {
            plan = sampler.epoch_plan(epoch as u64);
        }
        let batch = sampler.materialize(plan[within].clone());
        let labels = batch.match_labels()?;

        let mut tape = Tape::new();
        let ev = encoder.bind(&mut tape, true);
        let tv = ev.text_vars();
        let vv = ev.visual_vars();
        let hv: Vec<Var> = head.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        let iv: Vec<Var> = id_head.iter().map(|t| tape.param(t.clone())).collect();

        let mut globals_v = Vec::with_capacity(batch.len());
        let mut globals_t = Vec::with_capacity(batch.len());
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        let mut masked_positions = Vec::new();
        for (row, &idx) in batch.indices.iter().enumerate() {
            let p = tape.constant(patches[idx].clone());
            let (g_v, feats) = encoder.visual_on_tape(&mut tape, &vv, p)?;
            globals_v.push(g_v);

            let ids: Vec<usize> = token_ids[idx].iter().map(|&t| t as usize).collect();
            let rows = tape.gather_rows(ev.token_table(), &ids)?;
            let (g_t, _) = encoder.text_on_tape(&mut tape, &tv, rows)?;
            globals_t.push(g_t);

            let mut mr = derived_rng(cfg.seed, s as u64, 1 + row as u64);
            let m = mask_caption(&token_ids[idx], encoder.tokenizer(), opts.mask_rate, &mut mr);
            if m.positions.is_empty() {
                continue;
            }
            let rows = tape.gather_rows(ev.token_table(), &m.input)?;
            let (_, states) = encoder.text_on_tape(&mut tape, &tv, rows)?;
            let q = tape.matmul(states, hv[0])?;
            let k = tape.matmul(feats, hv[1])?;
            let v = tape.matmul(feats, hv[2])?;
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt_attn);
            let attn = tape.row_softmax(scores);
            let ctx = tape.matmul(attn, v)?;
            let ctx = tape.matmul(ctx, hv[3])?;
            let mixed = tape.add(states, ctx)?;
            let hidden = tape.tanh(mixed);
            let picked = tape.gather_rows(hidden, &m.positions)?;
            let lg = tape.matmul(picked, hv[4])?;
            logits.push(tape.add_row(lg, hv[5])?);
            masked_positions.extend(m.positions.iter().map(|&p| (row, p)));
            targets.extend(m.targets);
        }
        if logits.is_empty() {
            return Err(Error::Empty("masked tokens in batch"));
        }

        let f_v = tape.concat_rows(&globals_v)?;
        let f_t = tape.concat_rows(&globals_t)?;
        let all_logits = tape.concat_rows(&logits)?;
        let ids = batch.identity_ids.clone();
        let cmpm = tape.scalar_fn(&[f_v, f_t], |v| {
            let b = EmbeddingBatch {
                f_v: Some(v[0].clone()),
                f_t: Some(v[1].clone()),
                f_c: None,
                identity_ids: ids,
            };
            let l = cmpm_loss(&b, &labels, &loss_cfg)?;
            Ok((l.value, vec![l.grad_a, l.grad_b]))
        })?;
        let lv = tape.matmul(f_v, iv[0])?;
        let lv = tape.add_row(lv, iv[1])?;
        let lt = tape.matmul(f_t, iv[0])?;
        let lt = tape.add_row(lt, iv[1])?;
        let class_ids: Vec<usize> = batch.indices.iter().map(|&i| classes[i]).collect();
        let id = tape.scalar_fn(&[lv, lt], |v| {
            let l = id_loss(v[0], v[1], &class_ids)?;
            Ok((l.value, vec![l.grad_a, l.grad_b]))
        })?;
        let irr = tape.scalar_fn(&[all_logits], |v| {
            let pred = MaskedPrediction {
                masked_positions,
                logits: v[0].clone(),
                targets,
            };
            let (value, grad) = irr_loss(&pred, loss_cfg.irr_norm)?;
            Ok((value, vec![grad]))
        })?;
        let parts = Stage1Parts {
            irr: tape.value(irr)[(0, 0)],
            cmpm: tape.value(cmpm)[(0, 0)],
            id: tape.value(id)[(0, 0)],
        };
        let loss = stage1_objective(parts.irr, parts.cmpm, parts.id).map_err(|_| {
            Error::NonFinite(format!(
                "stage-1 objective at step {} (irr {}, cmpm {}, id {})",
                s + 1,
                parts.irr,
                parts.cmpm,
                parts.id
            ))
        })?;
        let total = tape.sum_scalars(&[irr, cmpm, id])?;
        let grads = tape.backward(total)?;

        let lr = lr_at(cfg, cfg.base_lr, epoch_frac)?;
        let head_lr = lr_at(cfg, cfg.head_lr, epoch_frac)?;
        let enc_grads = grads_for(&grads, &ev.vars);
        let head_vars: Vec<Var> = hv.iter().chain(&iv).copied().collect();
        let head_grads = grads_for(&grads, &head_vars);
        {
            let params = encoder.params_mut()?;
            let mut tensors = params.tensors_mut();
            enc_opt.step(lr, &mut tensors, &enc_grads)?;
        }
        {
            let [a, b, c, d, e, f] = head.tensors_mut();
            let [g, h] = &mut id_head;
            head_opt.step(head_lr, &mut [a, b, c, d, e, f, g, h], &head_grads)?;
        }

        let record = StepRecord {
            step: s + 1,
            epoch,
            loss,
            lr,
        };
        observer.on_step(0, &record)?;
        report.trace.push(record);
        report.parts.push(parts);
        if within + 1 == sched.steps_per_epoch {
            observer.on_stage1_epoch(epoch, encoder)?;
        }
    }
    Ok(report)
}

/// One inversion network to train and the loss that supervises it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinetSpec {
    pub config: TiNetConfig,
    pub mode: Supervision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    pub tinets: Vec<TiNet>,
    /// One loss trace per TINet.
    pub traces: Vec<Vec<StepRecord>>,
    pub encoder_fingerprint_before: Fingerprint,
    pub encoder_fingerprint_after: Fingerprint,
}

/// Global features of the batch rows: `(f_v, f_t)`.
type FeatureFn<'a> = dyn FnMut(&[usize]) -> Result<(Matrix, Option<Matrix>)> + 'a;

/// Trains every TINet of `specs` against a frozen encoder using cached
/// image and caption features. All networks see the same batches; each
/// has its own optimizer.
pub fn run_stage2<E: DualEncoder + ?Sized>(
    encoder: &E,
    dataset: &ImageDataset,
    cache: &FeatureCache,
    specs: &[TinetSpec],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Stage2Output> {
    cache.check_encoder(encoder)?;
    let ids: Vec<&str> = dataset.images().iter().map(|r| r.image_id.as_str()).collect();
    let image_rows = ids.iter().map(|id| cache.images.position(id).ok_or_else(|| Error::UnknownId(String::from(*id)))).collect::<Result<Vec<_>>>()?;
    let text_rows = match &cache.texts {
        Some(t) => Some(
            ids.iter()
                .map(|id| t.position(id).ok_or_else(|| Error::UnknownId(String::from(*id))))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    if text_rows.is_none() && specs.iter().any(|s| s.mode == Supervision::Text) {
        return Err(Error::MissingInput("cached text features"));
    }
    let mut features = |batch: &[usize]| -> Result<(Matrix, Option<Matrix>)> {
        let fv = Matrix::from_f32_rows(&batch.iter().map(|&i| cache.images.row(image_rows[i])).collect::<Vec<_>>())?;
        let ft = match (&cache.texts, &text_rows) {
            (Some(t), Some(rows)) => Some(Matrix::from_f32_rows(
                &batch.iter().map(|&i| t.row(rows[i])).collect::<Vec<_>>(),
            )?),
            _ => None,
        };
        Ok((fv, ft))
    };
    stage2_loop(encoder, dataset, specs, cfg, &mut features, observer)
}

/// [`run_stage2`] computing `f_v` and `f_t` with the encoder at every step.
pub fn run_stage2_uncached<E: DualEncoder + ?Sized>(
    encoder: &E,
    dataset: &ImageDataset,
    images: &dyn ImageSource,
    specs: &[TinetSpec],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Stage2Output> {
    if specs.iter().any(|s| s.mode == Supervision::Text) && !dataset.has_captions() {
        return Err(Error::MissingInput("captions"));
    }
    let mut features = |batch: &[usize]| -> Result<(Matrix, Option<Matrix>)> {
        let mut fv = Vec::with_capacity(batch.len());
        let mut ft = Vec::with_capacity(batch.len());
        for &i in batch {
            fv.push(encoder.encode_image(&images.load(&dataset.images()[i])?)?);
            if let Some(c) = dataset.captions() {
                ft.push(encoder.encode_text(&c[i].text)?);
            }
        }
        let ft = if dataset.has_captions() {
            Some(Matrix::from_f32_rows(&ft)?)
        } else {
            None
        };
        Ok((Matrix::from_f32_rows(&fv)?, ft))
    };
    stage2_loop(encoder, dataset, specs, cfg, &mut features, observer)
}

fn stage2_loop<E: DualEncoder + ?Sized>(
    encoder: &E,
    dataset: &ImageDataset,
    specs: &[TinetSpec],
    cfg: &TrainConfig,
    features: &mut FeatureFn<'_>,
    observer: &mut dyn TrainObserver,
) -> Result<Stage2Output> {
    if !encoder.is_frozen() {
        return Err(Error::EncoderNotFrozen);
    }
    if specs.is_empty() {
        return Err(Error::Empty("tinet list"));
    }
    cfg.validate()?;
    let loss_cfg = LossConfig {
        tau: cfg.tau,
        ..LossConfig::default()
    };
    loss_cfg.validate()?;
    let before = encoder.fingerprint();
    for s in specs {
        if s.config.d_in != encoder.embed_dim() || s.config.d_out != encoder.token_dim() {
            return Err(Error::Shape {
                context: "TINet dimensions",
                expected: format!("{} -> {}", encoder.embed_dim(), encoder.token_dim()),
                found: format!("{} -> {}", s.config.d_in, s.config.d_out),
            });
        }
    }
    let mut tinets = specs
        .iter()
        .map(|s| Ok(TiNet::init(s.config)?.with_encoder(before)))
        .collect::<Result<Vec<_>>>()?;
    let mut optimizers: Vec<Adam> = tinets
        .iter()
        .map(|t| {
            Adam::new(
                AdamConfig::default(),
                t.layers().iter().flat_map(|l| [&l.weight, &l.bias]),
            )
        })
        .collect();

    let slots = prompt_layout(encoder.tokenizer(), Template::Train, "", encoder.max_len())?;
    let slot = slots
        .iter()
        .position(|s| *s == PromptSlot::Pseudo)
        .expect("training template has a pseudo-word slot");
    let table_rows = |part: &[PromptSlot]| -> Result<Matrix> {
        let rows: Vec<&[f64]> = part
            .iter()
            .map(|s| match s {
                PromptSlot::Token(id) => Ok(encoder.token_table().row(*id as usize)),
                PromptSlot::Pseudo => Err(Error::InvalidConfig("template has two pseudo-word slots".into())),
            })
            .collect::<Result<_>>()?;
        Matrix::from_rows(&rows)
    };
    let prefix = table_rows(&slots[..slot])?;
    let suffix = table_rows(&slots[slot + 1..])?;

    let sampler = BatchSampler::new(dataset, SamplerConfig::shuffled(cfg.batch_size, cfg.seed))?;
    let sched = Schedule::new(cfg, sampler.steps_per_epoch())?;
    let mut traces = vec![Vec::new(); tinets.len()];
    let mut plan = Vec::new();

    for s in 0..sched.total_steps {
        let (epoch, within, epoch_frac) = sched.position(s);
        if within == 0 {
            plan = sampler.epoch_plan(epoch as u64);
        }
        let batch = sampler.materialize(plan[within].clone());
        let labels = batch.match_labels()?;
        let (f_v, f_t) = features(&batch.indices)?;
        let lr = lr_at(cfg, cfg.base_lr, epoch_frac)?;

        for (k, (tinet, spec)) in tinets.iter_mut().zip(specs).enumerate() {
            let mut tape = Tape::new();
            let params = tinet.bind(&mut tape);
            let input = tape.constant(f_v.clone());
            let pseudo = tinet.forward_on_tape(&mut tape, &params, input)?;
            let pre = tape.constant(prefix.clone());
            let post = tape.constant(suffix.clone());
            let mut rows = Vec::with_capacity(batch.len());
            for i in 0..batch.len() {
                let p = tape.slice_rows(pseudo, i, i + 1)?;
                rows.push(tape.concat_rows(&[pre, p, post])?);
            }
            let globals = encoder.text_forward_on_tape(&mut tape, &rows)?;
            let f_c = tape.concat_rows(&globals)?;
            let loss = tape.scalar_fn(&[f_c], |v| {
                let b = EmbeddingBatch {
                    f_v: Some(f_v.clone()),
                    f_t: f_t.clone(),
                    f_c: Some(v[0].clone()),
                    identity_ids: batch.identity_ids.clone(),
                };
                let l = tinet_loss(&b, &labels, &loss_cfg, spec.mode)?;
                Ok((l.value, vec![l.grad_c]))
            })?;
            let value = tape.value(loss)[(0, 0)];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("TINet {k} loss at step {}", s + 1)));
            }
            let grads = tape.backward(loss)?;
            let vars: Vec<Var> = params.iter().flat_map(|&(w, b)| [w, b]).collect();
            let g = grads_for(&grads, &vars);
            let mut tensors: Vec<&mut Matrix> = tinet
                .layers_mut()
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect();
            optimizers[k].step(lr, &mut tensors, &g)?;
            let record = StepRecord {
                step: s + 1,
                epoch,
                loss: value,
                lr,
            };
            observer.on_step(k, &record)?;
            traces[k].push(record);
        }
        if within + 1 == sched.steps_per_epoch {
            observer.on_stage2_epoch(epoch, &tinets)?;
        }
    }
    let after = encoder.fingerprint();
    if after != before {
        return Err(Error::FingerprintMismatch);
    }
    Ok(Stage2Output {
        tinets,
        traces,
        encoder_fingerprint_before: before,
        encoder_fingerprint_after: after,
    })
}

/// Randomly initialised TINet bound to `encoder`, for the untrained baseline.
pub fn random_tinet<E: DualEncoder + ?Sized>(encoder: &E, mut config: TiNetConfig) -> Result<TiNet> {
    config.d_in = encoder.embed_dim();
    config.d_out = encoder.token_dim();
    Ok(TiNet::init(config)?.with_encoder(encoder.fingerprint()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::rng;
    use crate::tokenizer::WhitespaceTokenizer;

    #[test]
    fn masking_covers_at_least_one_content_token() {
        let tok = WhitespaceTokenizer::desk();
        let seq = tokenize(&tok, "a red coat", 77).unwrap();
        for seed in 0..50 {
            let m = mask_caption(seq.valid(), &tok, 0.15, &mut rng(seed));
            assert!(!m.positions.is_empty());
            for (&p, &t) in m.positions.iter().zip(&m.targets) {
                assert!(p > 0 && p < seq.length - 1);
                assert_eq!(t, seq.valid()[p] as usize);
            }
            assert_eq!(m.input[0], 1);
        }
    }

    #[test]
    fn schedule_positions() {
        let cfg = TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            max_steps: Some(5),
            ..TrainConfig::stage2()
        };
        let s = Schedule::new(&cfg, 2).unwrap();
        assert_eq!(s.total_steps, 5);
        assert_eq!(s.position(3), (1, 1, 1.5));
    }
}
