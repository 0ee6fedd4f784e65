//! Dual-encoder contract, pseudo-word prompt construction and the seeded
//! desk-scale encoder pair.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::linalg::{to_f32, Matrix};
use crate::random::{normal_matrix, rng, uniform_matrix};
use crate::tokenizer::{tokenize, Tokenizer, WhitespaceTokenizer, MAX_LEN};
use crate::{Embedding, Error, Fingerprint, Result};

/// Input resolution expected by the visual encoder (height × width).
pub const IMAGE_HEIGHT: usize = 384;
pub const IMAGE_WIDTH: usize = 128;

/// Per-channel normalisation applied to `[0, 1]` pixels.
pub const PIXEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const PIXEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

/// Decoded, resized, normalised RGB image stored row-major as `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("ImageTensor", height * width * 3, data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Normalises 8-bit RGB pixels (`H × W × 3`).
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::shape("rgb8 buffer", height * width * 3, rgb.len()));
        }
        let data = rgb
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % 3;
                (v as f32 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c]
            })
            .collect();
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

/// Token embeddings of one prompt, padded to the context length.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    pub vectors: Matrix,
    pub valid_length: usize,
}

impl TokenEmbeddingSequence {
    pub fn valid_rows(&self) -> Result<Matrix> {
        let d = self.vectors.cols();
        Matrix::from_vec(
            self.valid_length,
            d,
            self.vectors.as_slice()[..self.valid_length * d].to_vec(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// `a photo of [S*]`, used while training the inversion network.
    Train,
    /// `a [S*] is {caption}`, used for composed queries.
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSlot {
    Token(u32),
    Pseudo,
}

/// Valid (non-PAD) slots of a pseudo-word prompt.
///
/// The caption is truncated before anything else so BOS, the template words,
/// the pseudo-word and EOS always survive.
pub fn prompt_layout<T: Tokenizer + ?Sized>(
    tokenizer: &T,
    template: Template,
    caption: &str,
    max_len: usize,
) -> Result<Vec<PromptSlot>> {
    let sp = tokenizer.specials();
    let word = |w: &str| -> Result<PromptSlot> {
        match tokenizer.word_ids(w).as_slice() {
            [id] if *id != sp.unk => Ok(PromptSlot::Token(*id)),
            _ => Err(Error::InvalidConfig(format!("template word `{w}` is not a single vocabulary token"))),
        }
    };
    let mut slots = vec![PromptSlot::Token(sp.bos)];
    match template {
        Template::Train => {
            if !caption.trim().is_empty() {
                return Err(Error::InvalidConfig("the training template takes no caption".into()));
            }
            slots.extend([word("a")?, word("photo")?, word("of")?, PromptSlot::Pseudo]);
        }
        Template::Infer => {
            if caption.trim().is_empty() {
                return Err(Error::MissingInput("caption"));
            }
            slots.extend([word("a")?, PromptSlot::Pseudo, word("is")?]);
            let room = max_len.checked_sub(slots.len() + 1).ok_or_else(|| {
                Error::InvalidConfig(format!("max_len {max_len} too short for the template"))
            })?;
            slots.extend(tokenizer.word_ids(caption).into_iter().take(room).map(PromptSlot::Token));
        }
    }
    slots.push(PromptSlot::Token(sp.eos));
    if slots.len() > max_len {
        return Err(Error::InvalidConfig(format!("max_len {max_len} too short for the template")));
    }
    Ok(slots)
}

/// Looks up token rows and splices the raw pseudo-word vector at its slot.
pub fn embed_slots(
    slots: &[PromptSlot],
    token_table: &Matrix,
    pad_id: u32,
    pseudo: Option<&[f64]>,
    max_len: usize,
) -> Result<TokenEmbeddingSequence> {
    let d = token_table.cols();
    if let Some(p) = pseudo {
        if p.len() != d {
            return Err(Error::shape("pseudo-word dimension", d, p.len()));
        }
    }
    let mut vectors = Matrix::zeros(max_len, d);
    for row in 0..max_len {
        let src: &[f64] = match slots.get(row) {
            Some(PromptSlot::Token(id)) => table_row(token_table, *id)?,
            Some(PromptSlot::Pseudo) => pseudo.ok_or(Error::MissingInput("pseudo-word"))?,
            None => table_row(token_table, pad_id)?,
        };
        vectors.row_mut(row).copy_from_slice(src);
    }
    Ok(TokenEmbeddingSequence {
        vectors,
        valid_length: slots.len(),
    })
}

fn table_row(table: &Matrix, id: u32) -> Result<&[f64]> {
    let id = id as usize;
    if id >= table.rows() {
        return Err(Error::OutOfRange {
            what: "token id",
            detail: format!("{id} of {}", table.rows()),
        });
    }
    Ok(table.row(id))
}

/// Builds the embedding sequence of a pseudo-word prompt for `encoder`.
pub fn inject_pseudo_word<E: DualEncoder + ?Sized>(
    encoder: &E,
    template: Template,
    pseudo: &[f64],
    caption: &str,
) -> Result<TokenEmbeddingSequence> {
    let slots = prompt_layout(encoder.tokenizer(), template, caption, encoder.max_len())?;
    embed_slots(
        &slots,
        encoder.token_table(),
        encoder.tokenizer().specials().pad,
        Some(pseudo),
        encoder.max_len(),
    )
}

/// Plain table lookup of a tokenized string.
pub fn embed_text<E: DualEncoder + ?Sized>(encoder: &E, text: &str) -> Result<TokenEmbeddingSequence> {
    let seq = tokenize(encoder.tokenizer(), text, encoder.max_len())?;
    let slots: Vec<PromptSlot> = seq.valid().iter().map(|&id| PromptSlot::Token(id)).collect();
    embed_slots(
        &slots,
        encoder.token_table(),
        encoder.tokenizer().specials().pad,
        None,
        encoder.max_len(),
    )
}

/// Paired visual/text encoders projecting into a shared space.
pub trait DualEncoder {
    fn embed_dim(&self) -> usize;

    fn token_dim(&self) -> usize {
        self.token_table().cols()
    }

    fn max_len(&self) -> usize {
        MAX_LEN
    }

    fn tokenizer(&self) -> &dyn Tokenizer;

    /// `|V| × d_token` input embedding table.
    fn token_table(&self) -> &Matrix;

    fn encode_image(&self, image: &ImageTensor) -> Result<Embedding>;

    fn encode_token_embeddings(&self, seq: &TokenEmbeddingSequence) -> Result<Embedding>;

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        self.encode_token_embeddings(&embed_text(self, text)?)
    }

    /// Text tower on a tape with parameters held constant. Each entry of
    /// `rows` is one `valid_length × d_token` input; returns one
    /// `1 × d_embed` output per input.
    fn text_forward_on_tape(&self, tape: &mut Tape, rows: &[Var]) -> Result<Vec<Var>>;

    /// Hash of every parameter and of the architecture.
    fn fingerprint(&self) -> Fingerprint;

    fn is_frozen(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub visual_hidden: usize,
    /// Patch grid over the input image (rows, cols).
    pub patch_grid: (usize, usize),
    /// Average-pooled cells per patch (rows, cols).
    pub cell_grid: (usize, usize),
    pub image_height: usize,
    pub image_width: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            token_dim: 64,
            text_hidden: 64,
            visual_hidden: 64,
            patch_grid: (4, 2),
            cell_grid: (4, 4),
            image_height: IMAGE_HEIGHT,
            image_width: IMAGE_WIDTH,
            max_len: MAX_LEN,
            seed: 0,
        }
    }
}

impl ToyEncoderConfig {
    pub fn patch_dim(&self) -> usize {
        self.cell_grid.0 * self.cell_grid.1 * 3
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let cells_y = self.patch_grid.0 * self.cell_grid.0;
        let cells_x = self.patch_grid.1 * self.cell_grid.1;
        if [self.embed_dim, self.token_dim, self.text_hidden, self.visual_hidden, cells_y, cells_x]
            .contains(&0)
        {
            return Err(Error::InvalidConfig("toy encoder dimensions must be positive".into()));
        }
        if !self.image_height.is_multiple_of(cells_y) || !self.image_width.is_multiple_of(cells_x) {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} is not divisible into {cells_y}x{cells_x} cells",
                self.image_height, self.image_width
            )));
        }
        if self.max_len < 6 {
            return Err(Error::InvalidConfig("max_len must fit the training template".into()));
        }
        Ok(())
    }
}

/// Parameters of the toy encoder pair. Vectors are rows; a layer is `x·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub visual_w: Matrix,
    pub visual_b: Matrix,
    pub visual_pos: Matrix,
    pub visual_out_w: Matrix,
    pub visual_out_b: Matrix,
    pub token_table: Matrix,
    pub text_in_w: Matrix,
    pub text_in_b: Matrix,
    pub text_prev_w: Matrix,
    pub text_out_w: Matrix,
    pub text_out_b: Matrix,
}

impl ToyParams {
    pub const COUNT: usize = 11;

    pub const NAMES: [&'static str; Self::COUNT] = [
        "visual_w",
        "visual_b",
        "visual_pos",
        "visual_out_w",
        "visual_out_b",
        "token_table",
        "text_in_w",
        "text_in_b",
        "text_prev_w",
        "text_out_w",
        "text_out_b",
    ];

    pub fn tensors(&self) -> [&Matrix; Self::COUNT] {
        [
            &self.visual_w,
            &self.visual_b,
            &self.visual_pos,
            &self.visual_out_w,
            &self.visual_out_b,
            &self.token_table,
            &self.text_in_w,
            &self.text_in_b,
            &self.text_prev_w,
            &self.text_out_w,
            &self.text_out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; Self::COUNT] {
        [
            &mut self.visual_w,
            &mut self.visual_b,
            &mut self.visual_pos,
            &mut self.visual_out_w,
            &mut self.visual_out_b,
            &mut self.token_table,
            &mut self.text_in_w,
            &mut self.text_in_b,
            &mut self.text_prev_w,
            &mut self.text_out_w,
            &mut self.text_out_b,
        ]
    }

    /// Inverse of [`ToyParams::tensors`].
    pub fn from_tensors(tensors: Vec<Matrix>) -> Result<Self> {
        let [visual_w, visual_b, visual_pos, visual_out_w, visual_out_b, token_table, text_in_w, text_in_b, text_prev_w, text_out_w, text_out_b]: [Matrix; Self::COUNT] =
            tensors
                .try_into()
                .map_err(|t: Vec<Matrix>| Error::shape("toy encoder tensors", Self::COUNT, t.len()))?;
        Ok(Self {
            visual_w,
            visual_b,
            visual_pos,
            visual_out_w,
            visual_out_b,
            token_table,
            text_in_w,
            text_in_b,
            text_prev_w,
            text_out_w,
            text_out_b,
        })
    }
}

/// Tape handles for one binding of [`ToyParams`], in [`ToyParams::NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct ToyParamVars {
    pub vars: [Var; ToyParams::COUNT],
}

impl ToyParamVars {
    pub fn visual_vars(&self) -> VisualVars {
        VisualVars {
            w: self.vars[0],
            b: self.vars[1],
            pos: self.vars[2],
            out_w: self.vars[3],
            out_b: self.vars[4],
        }
    }

    pub fn token_table(&self) -> Var {
        self.vars[5]
    }

    pub fn text_vars(&self) -> TextVars {
        TextVars {
            in_w: self.vars[6],
            in_b: self.vars[7],
            prev_w: self.vars[8],
            out_w: self.vars[9],
            out_b: self.vars[10],
        }
    }
}

/// Tape handles of the visual tower.
#[derive(Debug, Clone, Copy)]
pub struct VisualVars {
    pub w: Var,
    pub b: Var,
    pub pos: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Tape handles of the text tower alone.
#[derive(Debug, Clone, Copy)]
pub struct TextVars {
    pub in_w: Var,
    pub in_b: Var,
    pub prev_w: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Seeded desk-scale encoder pair.
///
/// * visual: the image is cut into a patch grid, each patch average-pooled
///   into `cell_grid` cells; per patch `tanh(x·W + b + pos)`, mean over
///   patches, then a linear projection.
/// * text: per-token `tanh(x_i·W_in + x_{i-1}·W_prev + b_in)` (a zero row
///   before the first token), mean over valid tokens,
///   then a linear projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDualEncoder {
    cfg: ToyEncoderConfig,
    tokenizer: WhitespaceTokenizer,
    params: ToyParams,
    frozen: bool,
}

impl ToyDualEncoder {
    pub fn new(cfg: ToyEncoderConfig, tokenizer: WhitespaceTokenizer) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(cfg.seed);
        let v = tokenizer.vocab_size();
        let pd = cfg.patch_dim();
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);
        let params = ToyParams {
            visual_w: uniform_matrix(&mut r, pd, cfg.visual_hidden, inv(pd)),
            visual_b: uniform_matrix(&mut r, 1, cfg.visual_hidden, inv(pd)),
            visual_pos: normal_matrix(&mut r, cfg.num_patches(), cfg.visual_hidden, 0.1),
            visual_out_w: uniform_matrix(&mut r, cfg.visual_hidden, cfg.embed_dim, inv(cfg.visual_hidden)),
            visual_out_b: uniform_matrix(&mut r, 1, cfg.embed_dim, inv(cfg.visual_hidden)),
            token_table: normal_matrix(&mut r, v, cfg.token_dim, 1.0),
            text_in_w: uniform_matrix(&mut r, cfg.token_dim, cfg.text_hidden, inv(cfg.token_dim)),
            text_in_b: uniform_matrix(&mut r, 1, cfg.text_hidden, inv(cfg.token_dim)),
            text_prev_w: uniform_matrix(&mut r, cfg.token_dim, cfg.text_hidden, inv(cfg.token_dim)),
            text_out_w: uniform_matrix(&mut r, cfg.text_hidden, cfg.embed_dim, inv(cfg.text_hidden)),
            text_out_b: uniform_matrix(&mut r, 1, cfg.embed_dim, inv(cfg.text_hidden)),
        };
        Self::with_params(cfg, tokenizer, params)
    }

    pub fn with_params(cfg: ToyEncoderConfig, tokenizer: WhitespaceTokenizer, params: ToyParams) -> Result<Self> {
        cfg.validate()?;
        let expected = [
            (cfg.patch_dim(), cfg.visual_hidden),
            (1, cfg.visual_hidden),
            (cfg.num_patches(), cfg.visual_hidden),
            (cfg.visual_hidden, cfg.embed_dim),
            (1, cfg.embed_dim),
            (tokenizer.vocab_size(), cfg.token_dim),
            (cfg.token_dim, cfg.text_hidden),
            (1, cfg.text_hidden),
            (cfg.token_dim, cfg.text_hidden),
            (cfg.text_hidden, cfg.embed_dim),
            (1, cfg.embed_dim),
        ];
        for ((name, t), shape) in ToyParams::NAMES.iter().zip(params.tensors()).zip(expected) {
            if t.shape() != shape {
                return Err(Error::Shape {
                    context: "toy encoder parameter",
                    expected: format!("{name} {shape:?}"),
                    found: format!("{:?}", t.shape()),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(Self {
            cfg,
            tokenizer,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.cfg
    }

    pub fn whitespace_tokenizer(&self) -> &WhitespaceTokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ToyParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut ToyParams> {
        if self.frozen {
            return Err(Error::EncoderFrozen);
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// `P × patch_dim` matrix of average-pooled patch cells.
    pub fn patchify(&self, image: &ImageTensor) -> Result<Matrix> {
        let c = &self.cfg;
        if image.height != c.image_height || image.width != c.image_width {
            return Err(Error::shape(
                "image size",
                format_args!("{}x{}", c.image_height, c.image_width),
                format_args!("{}x{}", image.height, image.width),
            ));
        }
        let cell_h = c.image_height / (c.patch_grid.0 * c.cell_grid.0);
        let cell_w = c.image_width / (c.patch_grid.1 * c.cell_grid.1);
        let inv_area = 1.0 / (cell_h * cell_w) as f64;
        let mut out = Matrix::zeros(c.num_patches(), c.patch_dim());
        for py in 0..c.patch_grid.0 {
            for px in 0..c.patch_grid.1 {
                let row = out.row_mut(py * c.patch_grid.1 + px);
                for cy in 0..c.cell_grid.0 {
                    for cx in 0..c.cell_grid.1 {
                        let y0 = (py * c.cell_grid.0 + cy) * cell_h;
                        let x0 = (px * c.cell_grid.1 + cx) * cell_w;
                        let mut acc = [0.0f64; 3];
                        for y in y0..y0 + cell_h {
                            for x in x0..x0 + cell_w {
                                for (ch, a) in acc.iter_mut().enumerate() {
                                    *a += image.pixel(y, x, ch) as f64;
                                }
                            }
                        }
                        let base = (cy * c.cell_grid.1 + cx) * 3;
                        for ch in 0..3 {
                            row[base + ch] = acc[ch] * inv_area;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Binds the parameters to `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ToyParamVars {
        let vars = self.params.tensors().map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        ToyParamVars { vars }
    }

    /// Visual tower: returns `(global 1×d, patch states P×d_hidden)`.
    pub fn visual_on_tape(&self, tape: &mut Tape, vars: &VisualVars, patches: Var) -> Result<(Var, Var)> {
        let h = tape.matmul(patches, vars.w)?;
        let h = tape.add(h, vars.pos)?;
        let h = tape.add_row(h, vars.b)?;
        let states = tape.tanh(h);
        let pooled = tape.mean_rows(states)?;
        let out = tape.matmul(pooled, vars.out_w)?;
        let global = tape.add_row(out, vars.out_b)?;
        Ok((global, states))
    }

    /// Text tower: returns `(global 1×d, token states L×d_hidden)`.
    pub fn text_on_tape(&self, tape: &mut Tape, vars: &TextVars, rows: Var) -> Result<(Var, Var)> {
        let len = tape.value(rows).rows();
        if len == 0 || len > self.cfg.max_len {
            return Err(Error::OutOfRange {
                what: "sequence length",
                detail: format!("{len} (max {})", self.cfg.max_len),
            });
        }
        let h = tape.matmul(rows, vars.in_w)?;
        let width = tape.value(rows).cols();
        let start = tape.constant(Matrix::zeros(1, width));
        let prev = if len > 1 {
            let head = tape.slice_rows(rows, 0, len - 1)?;
            tape.concat_rows(&[start, head])?
        } else {
            start
        };
        let prev = tape.matmul(prev, vars.prev_w)?;
        let h = tape.add(h, prev)?;
        let h = tape.add_row(h, vars.in_b)?;
        let states = tape.tanh(h);
        let pooled = tape.mean_rows(states)?;
        let out = tape.matmul(pooled, vars.out_w)?;
        let global = tape.add_row(out, vars.out_b)?;
        Ok((global, states))
    }

    fn visual_forward(&self, patches: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = &self.params;
        let vars = VisualVars {
            w: tape.constant(p.visual_w.clone()),
            b: tape.constant(p.visual_b.clone()),
            pos: tape.constant(p.visual_pos.clone()),
            out_w: tape.constant(p.visual_out_w.clone()),
            out_b: tape.constant(p.visual_out_b.clone()),
        };
        let x = tape.constant(patches.clone());
        let (g, _) = self.visual_on_tape(&mut tape, &vars, x)?;
        Ok(tape.value(g).as_slice().to_vec())
    }

    fn text_forward(&self, rows: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let r = tape.constant(rows.clone());
        let g = self.text_forward_on_tape(&mut tape, &[r])?[0];
        Ok(tape.value(g).as_slice().to_vec())
    }

    fn bind_text_constants(&self, tape: &mut Tape) -> TextVars {
        let p = &self.params;
        TextVars {
            in_w: tape.constant(p.text_in_w.clone()),
            in_b: tape.constant(p.text_in_b.clone()),
            prev_w: tape.constant(p.text_prev_w.clone()),
            out_w: tape.constant(p.text_out_w.clone()),
            out_b: tape.constant(p.text_out_b.clone()),
        }
    }
}

impl DualEncoder for ToyDualEncoder {
    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn token_table(&self) -> &Matrix {
        &self.params.token_table
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<Embedding> {
        let out = self.visual_forward(&self.patchify(image)?)?;
        finite_embedding(out, "image embedding")
    }

    fn encode_token_embeddings(&self, seq: &TokenEmbeddingSequence) -> Result<Embedding> {
        if seq.vectors.cols() != self.cfg.token_dim {
            return Err(Error::shape("token embedding width", self.cfg.token_dim, seq.vectors.cols()));
        }
        let out = self.text_forward(&seq.valid_rows()?)?;
        finite_embedding(out, "text embedding")
    }

    fn text_forward_on_tape(&self, tape: &mut Tape, rows: &[Var]) -> Result<Vec<Var>> {
        let vars = self.bind_text_constants(tape);
        rows.iter()
            .map(|&r| Ok(self.text_on_tape(tape, &vars, r)?.0))
            .collect()
    }

    fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(b"w4p-toy-dual-encoder-v2");
        let c = &self.cfg;
        for v in [
            c.embed_dim,
            c.token_dim,
            c.text_hidden,
            c.visual_hidden,
            c.patch_grid.0,
            c.patch_grid.1,
            c.cell_grid.0,
            c.cell_grid.1,
            c.image_height,
            c.image_width,
            c.max_len,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for w in self.tokenizer.words() {
            h.update((w.len() as u64).to_le_bytes());
            h.update(w.as_bytes());
        }
        for t in self.params.tensors() {
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for x in t.as_slice() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}

fn finite_embedding(v: Vec<f64>, what: &str) -> Result<Embedding> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(to_f32(&v))
}

/// Boxed encoder handle for callers that pick a backend at run time.
pub type DynEncoder = Box<dyn DualEncoder + Send + Sync>;
