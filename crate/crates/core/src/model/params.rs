use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Longest accepted input sequence, not counting the summary token.
    pub max_seq_len: usize,
    pub dropout_p: f64,
    pub input_dim: usize,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            max_seq_len: 128,
            dropout_p: 0.0,
            input_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Scalars per encoder block.
pub fn block_parameter_count(config: &ModelConfig) -> usize {
    let (d, f) = (config.d_model, config.d_ff);
    // two layer norms, four d×d projections with bias, two feed-forward layers
    2 * 2 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d)
}

pub fn count_parameters(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let embedding = config.input_dim * d + d;
    let summary = d;
    let final_norm = 2 * d;
    let head = d + 1;
    embedding + summary + config.n_layers * block_parameter_count(config) + final_norm + head
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    Weight,
    Bias,
    Scale,
    Offset,
    Token,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Tensor ids (indices into [`Layout::specs`]) of one encoder block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIds {
    pub ln1_scale: usize,
    pub ln1_offset: usize,
    pub w_q: usize,
    pub b_q: usize,
    pub w_k: usize,
    pub b_k: usize,
    pub w_v: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_scale: usize,
    pub ln2_offset: usize,
    pub w_ff1: usize,
    pub b_ff1: usize,
    pub w_ff2: usize,
    pub b_ff2: usize,
}

/// Named tensors packed in one flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub input_w: usize,
    pub input_b: usize,
    pub summary: usize,
    pub blocks: Vec<BlockIds>,
    pub final_scale: usize,
    pub final_offset: usize,
    pub head_w: usize,
    pub head_b: usize,
}

struct Builder {
    specs: Vec<TensorSpec>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: TensorKind) -> usize {
        let spec = TensorSpec {
            name,
            shape,
            offset: self.offset,
            kind,
        };
        self.offset += spec.len();
        self.specs.push(spec);
        self.specs.len() - 1
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        use TensorKind::*;
        let (d, f) = (config.d_model, config.d_ff);
        let mut b = Builder {
            specs: Vec::new(),
            offset: 0,
        };
        let input_w = b.add("input.weight".into(), vec![config.input_dim, d], Weight);
        let input_b = b.add("input.bias".into(), vec![d], Bias);
        let summary = b.add("summary_token".into(), vec![d], Token);
        let blocks = (0..config.n_layers)
            .map(|l| {
                let mut t = |name: &str, shape: Vec<usize>, kind| {
                    b.add(format!("blocks.{l}.{name}"), shape, kind)
                };
                BlockIds {
                    ln1_scale: t("attn_norm.scale", vec![d], Scale),
                    ln1_offset: t("attn_norm.offset", vec![d], Offset),
                    w_q: t("attn.query.weight", vec![d, d], Weight),
                    b_q: t("attn.query.bias", vec![d], Bias),
                    w_k: t("attn.key.weight", vec![d, d], Weight),
                    b_k: t("attn.key.bias", vec![d], Bias),
                    w_v: t("attn.value.weight", vec![d, d], Weight),
                    b_v: t("attn.value.bias", vec![d], Bias),
                    w_o: t("attn.output.weight", vec![d, d], Weight),
                    b_o: t("attn.output.bias", vec![d], Bias),
                    ln2_scale: t("ff_norm.scale", vec![d], Scale),
                    ln2_offset: t("ff_norm.offset", vec![d], Offset),
                    w_ff1: t("ff.hidden.weight", vec![d, f], Weight),
                    b_ff1: t("ff.hidden.bias", vec![f], Bias),
                    w_ff2: t("ff.output.weight", vec![f, d], Weight),
                    b_ff2: t("ff.output.bias", vec![d], Bias),
                }
            })
            .collect();
        let final_scale = b.add("final_norm.scale".into(), vec![d], Scale);
        let final_offset = b.add("final_norm.offset".into(), vec![d], Offset);
        let head_w = b.add("head.weight".into(), vec![d, 1], Weight);
        let head_b = b.add("head.bias".into(), vec![1], Bias);
        Self {
            specs: b.specs,
            input_w,
            input_b,
            summary,
            blocks,
            final_scale,
            final_offset,
            head_w,
            head_b,
        }
    }

    pub fn total_len(&self) -> usize {
        self.specs.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn mat<'a>(&self, data: &'a [f64], id: usize) -> ArrayView2<'a, f64> {
        let s = &self.specs[id];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &data[s.range()]).unwrap()
    }

    pub fn vec<'a>(&self, data: &'a [f64], id: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.specs[id].range()])
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64], id: usize) -> ArrayViewMut2<'a, f64> {
        let s = &self.specs[id];
        ArrayViewMut2::from_shape((s.shape[0], s.shape[1]), &mut data[s.range()]).unwrap()
    }

    pub fn slice_mut<'a>(&self, data: &'a mut [f64], id: usize) -> &'a mut [f64] {
        &mut data[self.specs[id].range()]
    }
}

/// Glorot-uniform weights, zero biases and offsets, unit scales; the
/// summary token is uniform in `±1/√d_model`.
pub fn initial_parameters(layout: &Layout, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; layout.total_len()];
    for spec in &layout.specs {
        let slot = &mut data[spec.range()];
        match spec.kind {
            TensorKind::Weight => {
                let limit = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                slot.iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
            }
            TensorKind::Token => {
                let limit = 1.0 / (spec.len() as f64).sqrt();
                slot.iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
            }
            TensorKind::Scale => slot.fill(1.0),
            TensorKind::Bias | TensorKind::Offset => {}
        }
    }
    data
}
