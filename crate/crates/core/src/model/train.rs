use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sequences, AdamW, AdamWConfig, BackwardMode, ModelError, Result, TransformerRegressor};
use crate::ingest::FeatureMatrix;
use crate::util::nonfinite_as_null;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Seeds batch order and dropout.
    pub seed: u64,
    /// Per-example gradients computed on the rayon pool and reduced in
    /// example order.
    pub parallel: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
            parallel: false,
        }
    }
}

/// Losses are in squared label units (mAh²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses seen while training.
    pub train_mse: f64,
    /// NaN (written as `null`) when the split has no test rows.
    #[serde(with = "nonfinite_as_null")]
    pub test_mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub wall_seconds: f64,
    pub batches_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_epochs: usize,
    pub epochs: Vec<EpochLoss>,
    pub options: TrainOptions,
    pub parameter_count: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub batches_per_epoch: usize,
    /// FNV-1a over the final parameter bits.
    pub parameter_fingerprint: String,
    /// Kept apart so determinism checks can drop it.
    pub timing: Vec<EpochTiming>,
}

pub fn fingerprint(params: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for b in p.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Train on `features.train_indices`, evaluating on `features.test_indices`
/// after each epoch. Targets are labels mapped onto the charge-capacity
/// feature scale; reported losses are converted back to mAh².
pub fn train(model: &mut TransformerRegressor, features: &FeatureMatrix, options: &TrainOptions) -> Result<TrainReport> {
    if options.epochs == 0 || options.batch_size == 0 {
        return Err(ModelError::Argument("epochs and batch_size must be positive".into()));
    }
    if features.train_indices.is_empty() {
        return Err(ModelError::Argument("no training rows".into()));
    }
    if features.token_width != model.config.input_dim {
        return Err(ModelError::Shape(format!(
            "feature width {} does not match input_dim {}",
            features.token_width, model.config.input_dim
        )));
    }
    if features.window() > model.config.max_seq_len {
        return Err(ModelError::Shape(format!(
            "window {} exceeds max_seq_len {}",
            features.window(),
            model.config.max_seq_len
        )));
    }

    let label_range = features.scaling.label.range();
    let unit = if label_range > 0.0 { label_range * label_range } else { 1.0 };
    let targets: Vec<f64> = (0..features.len()).map(|i| features.normalized_label(i)).collect();
    let test_seqs = sequences(features, &features.test_indices);
    let test_targets: Vec<f64> = features.test_indices.iter().map(|&i| targets[i]).collect();

    let mut order = features.train_indices.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut opt = AdamW::new(options.optimizer, model.params.len());
    let n_batches = order.len().div_ceil(options.batch_size);
    let mut epochs = Vec::with_capacity(options.epochs);
    let mut timing = Vec::with_capacity(options.epochs);
    let mut last_finite = model.params.clone();

    for epoch in 1..=options.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(options.batch_size).enumerate() {
            let batch = sequences(features, chunk);
            let labels: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let mode = BackwardMode {
                parallel: options.parallel,
                dropout_seed: (model.config.dropout_p > 0.0)
                    .then(|| options.seed ^ ((opt.steps() as u64 + 1) << 20)),
            };
            let (loss, grads) = model.backward_with(&batch, &labels, mode)?;
            if !loss.is_finite() || grads.data.iter().any(|g| !g.is_finite()) {
                // the current parameters produced the bad loss
                model.params = last_finite;
                return Err(ModelError::Divergence { epoch, batch: b });
            }
            last_finite = model.params.clone();
            opt.step(&mut model.params, &grads.data);
            if model.params.iter().any(|p| !p.is_finite()) {
                model.params = last_finite;
                return Err(ModelError::Divergence { epoch, batch: b });
            }
            weighted += loss * chunk.len() as f64;
        }
        let train_mse = weighted / order.len() as f64 * unit;
        let test_mse = if test_seqs.is_empty() {
            f64::NAN
        } else {
            let preds = model.predict_sequences(&test_seqs)?;
            super::loss_mse(&preds, &test_targets)? * unit
        };
        let wall = start.elapsed().as_secs_f64();
        epochs.push(EpochLoss {
            epoch,
            train_mse,
            test_mse,
        });
        timing.push(EpochTiming {
            wall_seconds: wall,
            batches_per_second: if wall > 0.0 { n_batches as f64 / wall } else { 0.0 },
        });
    }
    model.scaling = Some(features.scaling.clone());

    Ok(TrainReport {
        n_epochs: options.epochs,
        epochs,
        options: options.clone(),
        parameter_count: model.parameter_count(),
        n_train: features.train_indices.len(),
        n_test: features.test_indices.len(),
        batches_per_epoch: n_batches,
        parameter_fingerprint: fingerprint(&model.params),
        timing,
    })
}
