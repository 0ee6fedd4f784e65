//! Textual inversion network: a shallow fully connected map from a global
//! image embedding to one pseudo-word token embedding.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gelu, Tape, Var};
use crate::linalg::Matrix;
use crate::random::{rng, uniform_matrix};
use crate::{Error, Fingerprint, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Gelu => gelu(x),
            Self::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TiNetConfig {
    pub depth: usize,
    pub hidden_width: usize,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl TiNetConfig {
    /// Three layers with a 512-wide hidden layer.
    pub fn new(d_in: usize, d_out: usize, seed: u64) -> Self {
        Self {
            depth: 3,
            hidden_width: 512,
            d_in,
            d_out,
            activation: Activation::Gelu,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig("TINet depth must be at least 1".into()));
        }
        if self.d_in == 0 || self.d_out == 0 || (self.depth > 1 && self.hidden_width == 0) {
            return Err(Error::InvalidConfig("TINet widths must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        if self.depth == 1 {
            return alloc::vec![(self.d_in, self.d_out)];
        }
        let mut shapes = alloc::vec![(self.d_in, self.hidden_width)];
        shapes.extend(core::iter::repeat_n((self.hidden_width, self.hidden_width), self.depth - 2));
        shapes.push((self.hidden_width, self.d_out));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weight: Matrix,
    /// `1 × fan_out`.
    pub bias: Matrix,
}

/// A pseudo-word token embedding `S*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoWord {
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiNet {
    config: TiNetConfig,
    layers: Vec<Layer>,
    /// Encoder the network was trained against; `None` while unbound.
    encoder_fingerprint: Option<Fingerprint>,
}

impl TiNet {
    /// Seeded init: weights and biases `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init(config: TiNetConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng(config.seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / libm::sqrt(fan_in as f64);
                let weight = uniform_matrix(&mut r, fan_in, fan_out, bound);
                let bias = uniform_matrix(&mut r, 1, fan_out, bound);
                Layer { weight, bias }
            })
            .collect();
        Ok(Self {
            config,
            layers,
            encoder_fingerprint: None,
        })
    }

    pub fn from_layers(config: TiNetConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::shape("TINet layer count", shapes.len(), layers.len()));
        }
        for (k, ((fi, fo), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.weight.shape() != (*fi, *fo) || l.bias.shape() != (1, *fo) {
                return Err(Error::Shape {
                    context: "TINet layer",
                    expected: format!("layer {k}: {fi}x{fo} weight, 1x{fo} bias"),
                    found: format!("{:?} / {:?}", l.weight.shape(), l.bias.shape()),
                });
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::NonFinite(format!("TINet layer {k}")));
            }
        }
        Ok(Self {
            config,
            layers,
            encoder_fingerprint: None,
        })
    }

    pub fn config(&self) -> &TiNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn encoder_fingerprint(&self) -> Option<&Fingerprint> {
        self.encoder_fingerprint.as_ref()
    }

    pub fn bind_encoder(&mut self, fingerprint: Fingerprint) {
        self.encoder_fingerprint = Some(fingerprint);
    }

    pub fn with_encoder(mut self, fingerprint: Fingerprint) -> Self {
        self.bind_encoder(fingerprint);
        self
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.as_slice().len())
            .sum()
    }

    /// `S* = f_M(f_v)` for one embedding.
    pub fn forward(&self, f_v: &[f64]) -> Result<PseudoWord> {
        let out = self.forward_batch(&Matrix::row_vector(f_v))?;
        Ok(PseudoWord {
            vector: out.row(0).to_vec(),
        })
    }

    pub fn forward_f32(&self, f_v: &[f32]) -> Result<PseudoWord> {
        self.forward(&crate::linalg::to_f64(f_v))
    }

    /// Row-wise forward pass over an `N × d_in` matrix.
    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.config.d_in {
            return Err(Error::shape("TINet input", self.config.d_in, input.cols()));
        }
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight)?;
            for i in 0..z.rows() {
                for (x, b) in z.row_mut(i).iter_mut().zip(layer.bias.row(0)) {
                    *x += b;
                }
            }
            if k != last {
                z = z.map(|x| self.config.activation.apply(x));
            }
            h = z;
        }
        if !h.is_finite() {
            return Err(Error::NonFinite("TINet output".into()));
        }
        Ok(h)
    }

    /// Binds the layer parameters to `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect()
    }

    /// Forward pass on a tape; `input` is `N × d_in`.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[(Var, Var)], input: Var) -> Result<Var> {
        if tape.value(input).cols() != self.config.d_in {
            return Err(Error::shape("TINet input", self.config.d_in, tape.value(input).cols()));
        }
        let last = params.len() - 1;
        let mut h = input;
        for (k, &(w, b)) in params.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if k == last {
                z
            } else {
                match self.config.activation {
                    Activation::Gelu => tape.gelu(z),
                    Activation::Identity => z,
                }
            };
        }
        Ok(h)
    }

    /// Product of layer spectral norms; with biases folded in this bounds
    /// `‖f(x)‖` via `‖W x + b‖ ≤ ‖W‖‖x‖ + ‖b‖` and `|gelu(z)| ≤ |z|`.
    pub fn output_norm_bound(&self, input_norm: f64) -> f64 {
        self.layers.iter().fold(input_norm, |acc, l| {
            l.weight.spectral_norm(500) * 1.000_001 * acc + l.bias.frobenius()
        })
    }
}
