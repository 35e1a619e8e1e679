//! A small pre-norm transformer encoder for capacity regression.
//!
//! Each input sequence is a window of per-cycle feature tokens. Tokens are
//! linearly embedded, a learned summary token is prepended, sinusoidal
//! position encodings are added, and the stack of
//! `LayerNorm → multi-head self-attention → residual → LayerNorm →
//! GELU feed-forward → residual` blocks is applied. The summary token's final
//! (layer-normalized) representation goes through a linear head to give one
//! scalar per sequence.
//!
//! Parameters live in one flat `f64` buffer described by a [`Layout`];
//! gradients share the same layout. Gradients are computed by a hand-written
//! reverse pass over cached activations.
//!
//! For scale: the reference full-size encoder this mirrors has 109,483,009
//! trainable parameters. The default configuration here has 17,377.

mod checkpoint;
pub mod nn;
mod optim;
mod params;
mod train;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{FeatureMatrix, Scaling};
use nn::{
    dense, dense_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, positional_encoding,
    softmax_rows, softmax_rows_backward, LayerNormCache,
};

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT};
pub use optim::{AdamW, AdamWConfig};
pub use params::{
    block_parameter_count, count_parameters, BlockIds, Layout, ModelConfig, TensorKind, TensorSpec,
};
pub use train::{train, EpochLoss, EpochTiming, TrainOptions, TrainReport};

/// Full-scale reference model size, recorded for comparison only.
pub const REFERENCE_PARAMETER_COUNT: u64 = 109_483_009;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("training diverged at epoch {epoch}, batch {batch}; parameters restored to the last finite step")]
    Divergence { epoch: usize, batch: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// One input sequence: `len × input_dim` tokens.
pub type Sequence = Array2<f64>;

#[derive(Debug, Clone)]
pub struct TransformerRegressor {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub seed: u64,
    /// Feature scaling the model was trained with, when known.
    pub scaling: Option<Scaling>,
    pe: Array2<f64>,
}

/// Gradient buffer laid out like [`TransformerRegressor::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn named<'a>(&'a self, layout: &'a Layout) -> impl Iterator<Item = (&'a str, &'a [f64])> + 'a {
        layout
            .specs
            .iter()
            .map(move |s| (s.name.as_str(), &self.data[s.range()]))
    }
}

/// Attention probabilities of one sequence, indexed `[layer][head]`.
pub type AttentionMaps = Vec<Vec<Array2<f64>>>;

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub predictions: Vec<f64>,
    /// Indexed `[sequence][layer][head]`.
    pub attention: Vec<AttentionMaps>,
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln2: LayerNormCache,
    c: Array2<f64>,
    u: Array2<f64>,
    z: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
}

struct SeqCache {
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    summary: Array2<f64>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

fn add_into(grads: &mut [f64], layout: &Layout, id: usize, values: impl IntoIterator<Item = f64>) {
    for (g, v) in layout.slice_mut(grads, id).iter_mut().zip(values) {
        *g += v;
    }
}

impl TransformerRegressor {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = params::initial_parameters(&layout, seed);
        Ok(Self::from_parts(config, layout, params, seed))
    }

    fn from_parts(config: ModelConfig, layout: Layout, params: Vec<f64>, seed: u64) -> Self {
        let pe = positional_encoding(config.max_seq_len + 1, config.d_model);
        Self {
            config,
            layout,
            params,
            seed,
            scaling: None,
            pe,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            data: vec![0.0; self.params.len()],
        }
    }

    pub fn check_sequence(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(ModelError::Shape(format!(
                "token width {} does not match input_dim {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        if x.nrows() == 0 || x.nrows() > self.config.max_seq_len {
            return Err(ModelError::Shape(format!(
                "sequence length {} outside [1, {}]",
                x.nrows(),
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    fn forward_sequence(&self, x: &ArrayView2<f64>, mut dropout: Option<&mut ChaCha8Rng>) -> (f64, SeqCache) {
        let lay = &self.layout;
        let p = &self.params;
        let cfg = &self.config;
        let (n, d) = (x.nrows() + 1, cfg.d_model);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let drop_p = if dropout.is_some() { cfg.dropout_p } else { 0.0 };

        let embedded = dense(x, lay.mat(p, lay.input_w), lay.vec(p, lay.input_b));
        let mut h = Array2::zeros((n, d));
        h.row_mut(0).assign(&lay.vec(p, lay.summary));
        h.slice_mut(s![1.., ..]).assign(&embedded);
        h += &self.pe.slice(s![..n, ..]);

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for ids in &lay.blocks {
            let (a, ln1) = layer_norm(&h, lay.vec(p, ids.ln1_scale), lay.vec(p, ids.ln1_offset));
            let q = dense(&a.view(), lay.mat(p, ids.w_q), lay.vec(p, ids.b_q));
            let k = dense(&a.view(), lay.mat(p, ids.w_k), lay.vec(p, ids.b_k));
            let v = dense(&a.view(), lay.mat(p, ids.w_v), lay.vec(p, ids.b_v));
            let mut ctx = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let cols = s![.., head * dh..(head + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut scores);
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let mut attn = dense(&ctx.view(), lay.mat(p, ids.w_o), lay.vec(p, ids.b_o));
            let attn_mask = match dropout.as_deref_mut() {
                Some(rng) if drop_p > 0.0 => {
                    let m = dropout_mask(rng, (n, d), drop_p);
                    attn *= &m;
                    Some(m)
                }
                _ => None,
            };
            h += &attn;

            let (c, ln2) = layer_norm(&h, lay.vec(p, ids.ln2_scale), lay.vec(p, ids.ln2_offset));
            let u = dense(&c.view(), lay.mat(p, ids.w_ff1), lay.vec(p, ids.b_ff1));
            let z = u.mapv(gelu);
            let mut f = dense(&z.view(), lay.mat(p, ids.w_ff2), lay.vec(p, ids.b_ff2));
            let ff_mask = match dropout.as_deref_mut() {
                Some(rng) if drop_p > 0.0 => {
                    let m = dropout_mask(rng, (n, d), drop_p);
                    f *= &m;
                    Some(m)
                }
                _ => None,
            };
            h += &f;

            blocks.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                attn_mask,
                ln2,
                c,
                u,
                z,
                ff_mask,
            });
        }

        let first = h.slice(s![0..1, ..]).to_owned();
        let (summary, final_ln) = layer_norm(&first, lay.vec(p, lay.final_scale), lay.vec(p, lay.final_offset));
        let y = dense(&summary.view(), lay.mat(p, lay.head_w), lay.vec(p, lay.head_b))[[0, 0]];
        (
            y,
            SeqCache {
                blocks,
                final_ln,
                summary,
            },
        )
    }

    /// Reverse pass for one sequence, adding `dloss/dy · dy/dθ` into `grads`.
    fn backward_sequence(&self, x: &ArrayView2<f64>, cache: &SeqCache, dy: f64, grads: &mut [f64]) {
        let lay = &self.layout;
        let p = &self.params;
        let cfg = &self.config;
        let n = x.nrows() + 1;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let dout = Array2::from_elem((1, 1), dy);
        let (dsummary, dw, db) = dense_backward(&cache.summary.view(), lay.mat(p, lay.head_w), &dout);
        add_into(grads, lay, lay.head_w, dw);
        add_into(grads, lay, lay.head_b, db);
        let (dfirst, dg, db) = layer_norm_backward(&dsummary, &cache.final_ln, lay.vec(p, lay.final_scale));
        add_into(grads, lay, lay.final_scale, dg);
        add_into(grads, lay, lay.final_offset, db);

        let mut dhid = Array2::zeros((n, cfg.d_model));
        dhid.row_mut(0).assign(&dfirst.row(0));

        for (ids, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // feed-forward branch
            let df = match &bc.ff_mask {
                Some(m) => &dhid * m,
                None => dhid.clone(),
            };
            let (dz, dw, db) = dense_backward(&bc.z.view(), lay.mat(p, ids.w_ff2), &df);
            add_into(grads, lay, ids.w_ff2, dw);
            add_into(grads, lay, ids.b_ff2, db);
            let du = dz * &bc.u.mapv(gelu_grad);
            let (dc, dw, db) = dense_backward(&bc.c.view(), lay.mat(p, ids.w_ff1), &du);
            add_into(grads, lay, ids.w_ff1, dw);
            add_into(grads, lay, ids.b_ff1, db);
            let (dx, dg, db) = layer_norm_backward(&dc, &bc.ln2, lay.vec(p, ids.ln2_scale));
            add_into(grads, lay, ids.ln2_scale, dg);
            add_into(grads, lay, ids.ln2_offset, db);
            dhid += &dx;

            // attention branch
            let dattn = match &bc.attn_mask {
                Some(m) => &dhid * m,
                None => dhid.clone(),
            };
            let (dctx, dw, db) = dense_backward(&bc.ctx.view(), lay.mat(p, ids.w_o), &dattn);
            add_into(grads, lay, ids.w_o, dw);
            add_into(grads, lay, ids.b_o, db);
            let mut dq = Array2::zeros(bc.q.raw_dim());
            let mut dk = Array2::zeros(bc.k.raw_dim());
            let mut dv = Array2::zeros(bc.v.raw_dim());
            for (head, probs) in bc.probs.iter().enumerate() {
                let cols = s![.., head * dh..(head + 1) * dh];
                let dctx_h = dctx.slice(cols);
                let dprobs = dctx_h.dot(&bc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
                let dscores = softmax_rows_backward(probs, &dprobs) * scale;
                dq.slice_mut(cols).assign(&dscores.dot(&bc.k.slice(cols)));
                dk.slice_mut(cols).assign(&dscores.t().dot(&bc.q.slice(cols)));
            }
            let a = bc.a.view();
            let mut da = Array2::zeros(bc.a.raw_dim());
            for (dproj, w, b) in [(&dq, ids.w_q, ids.b_q), (&dk, ids.w_k, ids.b_k), (&dv, ids.w_v, ids.b_v)] {
                let (dx, dw, db) = dense_backward(&a, lay.mat(p, w), dproj);
                add_into(grads, lay, w, dw);
                add_into(grads, lay, b, db);
                da += &dx;
            }
            let (dx, dg, db) = layer_norm_backward(&da, &bc.ln1, lay.vec(p, ids.ln1_scale));
            add_into(grads, lay, ids.ln1_scale, dg);
            add_into(grads, lay, ids.ln1_offset, db);
            dhid += &dx;
        }

        add_into(grads, lay, lay.summary, dhid.row(0).iter().copied());
        let dembedded = dhid.slice(s![1.., ..]).to_owned();
        let (_, dw, db) = dense_backward(x, lay.mat(p, lay.input_w), &dembedded);
        add_into(grads, lay, lay.input_w, dw);
        add_into(grads, lay, lay.input_b, db);
    }

    /// Predictions and per-layer, per-head attention maps.
    pub fn forward(&self, batch: &[Sequence]) -> Result<ForwardOutput> {
        for x in batch {
            self.check_sequence(&x.view())?;
        }
        let (predictions, attention) = batch
            .iter()
            .map(|x| {
                let (y, cache) = self.forward_sequence(&x.view(), None);
                (y, cache.blocks.into_iter().map(|b| b.probs).collect())
            })
            .unzip();
        Ok(ForwardOutput {
            predictions,
            attention,
        })
    }

    /// Forward pass without keeping attention maps.
    pub fn predict_sequences(&self, batch: &[Sequence]) -> Result<Vec<f64>> {
        for x in batch {
            self.check_sequence(&x.view())?;
        }
        Ok(batch
            .iter()
            .map(|x| self.forward_sequence(&x.view(), None).0)
            .collect())
    }

    /// Mean-squared-error loss and its exact gradient over `batch`.
    pub fn backward(&self, batch: &[Sequence], labels: &[f64]) -> Result<(f64, Gradients)> {
        self.backward_with(batch, labels, BackwardMode::default())
    }

    pub(crate) fn backward_with(&self, batch: &[Sequence], labels: &[f64], mode: BackwardMode) -> Result<(f64, Gradients)> {
        if batch.len() != labels.len() || batch.is_empty() {
            return Err(ModelError::Argument(format!(
                "{} sequences vs {} labels",
                batch.len(),
                labels.len()
            )));
        }
        for x in batch {
            self.check_sequence(&x.view())?;
        }
        let scale = 2.0 / batch.len() as f64;
        let dropout_rng = |i: usize| {
            mode.dropout_seed
                .map(|s| ChaCha8Rng::seed_from_u64(s ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)))
        };
        let per_example = |i: usize, grads: &mut [f64]| {
            let x = batch[i].view();
            let mut rng = dropout_rng(i);
            let (y, cache) = self.forward_sequence(&x, rng.as_mut());
            let r = y - labels[i];
            self.backward_sequence(&x, &cache, scale * r, grads);
            r * r
        };

        let mut grads = self.zero_gradients();
        let mut sq = 0.0;
        if mode.parallel {
            let parts: Vec<(f64, Vec<f64>)> = (0..batch.len())
                .into_par_iter()
                .map(|i| {
                    let mut g = vec![0.0; self.params.len()];
                    let e = per_example(i, &mut g);
                    (e, g)
                })
                .collect();
            // reduce in index order so results do not depend on scheduling
            for (e, g) in parts {
                sq += e;
                for (acc, v) in grads.data.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        } else {
            for i in 0..batch.len() {
                sq += per_example(i, &mut grads.data);
            }
        }
        Ok((sq / batch.len() as f64, grads))
    }

    /// Predictions for every row of `features`, in label units (mAh).
    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..features.len()).collect();
        self.predict_rows(features, &idx)
    }

    pub fn predict_rows(&self, features: &FeatureMatrix, rows: &[usize]) -> Result<Vec<f64>> {
        let seqs = sequences(features, rows);
        let raw = self.predict_sequences(&seqs)?;
        Ok(raw
            .into_iter()
            .map(|y| features.scaling.label.denormalize(y))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct BackwardMode {
    pub parallel: bool,
    pub dropout_seed: Option<u64>,
}

/// Rows of `features` as model input sequences.
pub fn sequences(features: &FeatureMatrix, rows: &[usize]) -> Vec<Sequence> {
    rows.iter()
        .map(|&i| {
            Array2::from_shape_vec((features.window(), features.token_width), features.rows[i].clone())
                .expect("row length is window × token_width")
        })
        .collect()
}

pub fn loss_mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(ModelError::Argument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (y - p) * (y - p))
        .sum::<f64>()
        / predictions.len() as f64)
}

/// Sum of every attention row minus one, worst case; used by checks.
pub fn max_attention_row_error(maps: &[AttentionMaps]) -> f64 {
    maps.iter()
        .flatten()
        .flatten()
        .flat_map(|m| m.sum_axis(Axis(1)).to_vec())
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}
