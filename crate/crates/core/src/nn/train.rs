use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, bce_loss, AdamHyper, AdamState, Checkpoint, Dropout, EpochRecord, Model,
    ModelConfig, ModelKind,
};
use crate::error::{Error, Result};
use crate::featurize::{batchify, Batch, FeatureRecord, TokenSequence};
use crate::rng::{derive_seed, mix64, Stream};

const TAG_SPLIT: u64 = 0x0073_706c_6974;
const TAG_SHUFFLE: u64 = 0x0073_6875_6666;
const TAG_DROPOUT: u64 = 0x6472_6f70;

/// Rows per forward chunk at inference; fixed so results never depend on
/// the thread count.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind, seed: u64) -> Self {
        match kind {
            ModelKind::Transformer => TrainConfig {
                learning_rate: 1e-4,
                batch_size: 1024,
                max_epochs: 50,
                patience: 3,
                validation_fraction: 0.15,
                seed,
            },
            ModelKind::FeedForward => TrainConfig {
                learning_rate: 1e-3,
                batch_size: 512,
                max_epochs: 50,
                patience: 3,
                validation_fraction: 0.15,
                seed,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.patience == 0
        {
            return Err(Error::InvalidConfig(
                "learning rate, batch size and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn id_key(seed: u64, id: &str) -> u64 {
    // FNV-1a, then mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h ^ derive_seed(seed, TAG_SPLIT, 0))
}

/// Deterministic train/validation partition of `ids`, returned as
/// `(train, validation)` index lists. Membership depends only on the seed
/// and the ids: entries are ranked by a keyed hash of their id and the
/// lowest-ranked `round(fraction * n)` (at least one, at most `n - 1`)
/// form the validation set. Both lists come back in rank order.
pub fn split_indices(ids: &[&str], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (id_key(seed, ids[i]), ids[i]));
    let n_val = if n < 2 {
        0
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

fn mean_loss(model: &Model<f32>, batch: &Batch) -> Result<f64> {
    let probs = predict_probs(model, batch)?;
    let labels = batch.labels.as_ref().expect("labelled batch");
    Ok(f64::from(bce_loss(&probs, labels)?))
}

fn predict_probs(model: &Model<f32>, batch: &Batch) -> Result<Vec<f32>> {
    let chunks: Vec<Vec<usize>> = (0..batch.rows)
        .collect::<Vec<_>>()
        .chunks(PREDICT_CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let parts = chunks
        .par_iter()
        .map(|idx| model.forward(&batch.select(idx)))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Trains from the seeded initialization with early stopping on the
/// validation loss and returns the parameters of the best epoch.
pub fn train(mcfg: &ModelConfig, data: &[FeatureRecord], tcfg: &TrainConfig) -> Result<Checkpoint> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let seqs: Vec<TokenSequence> = data.iter().map(|r| r.seq.clone()).collect();
    let all = batchify(&seqs, true)?;
    let labels = all.labels.clone().expect("labels required");
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::SingleClassData);
    }

    let ids: Vec<&str> = data.iter().map(|r| r.id.as_str()).collect();
    let (train_idx, val_idx) = split_indices(&ids, tcfg.validation_fraction, tcfg.seed);
    let val = all.select(&val_idx);
    let batch_size = tcfg.batch_size.min(train_idx.len()).max(1);

    let mut model = Model::<f32>::new(mcfg.clone())?;
    let mut adam = AdamState::new(model.params.len());
    let hyper = AdamHyper::new(tcfg.learning_rate);
    let mut step = 0u64;
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut history = Vec::new();
    let mut stale = 0;

    for epoch in 0..tcfg.max_epochs {
        let mut order = train_idx.clone();
        Stream::derived(tcfg.seed, TAG_SHUFFLE, epoch as u64).shuffle(&mut order);
        let mut total = 0.0f64;
        for chunk in order.chunks(batch_size) {
            step += 1;
            let b = all.select(chunk);
            let y = b.labels.as_ref().expect("labelled batch");
            let mut rng = Stream::derived(tcfg.seed, TAG_DROPOUT, step);
            let dropout = Some(Dropout {
                rate: mcfg.dropout_rate,
                rng: &mut rng,
            });
            let (loss, grads, _) = model.backward_with(&b, y, dropout)?;
            adam_step(&mut model.params, &grads, &mut adam, &hyper, step)?;
            total += f64::from(loss) * chunk.len() as f64;
        }
        let train_loss = total / train_idx.len() as f64;
        let val_loss = if val.rows > 0 {
            mean_loss(&model, &val)?
        } else {
            train_loss
        };
        log::info!("epoch {epoch}: train loss {train_loss:.5}, validation loss {val_loss:.5}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.patience {
                break;
            }
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(Checkpoint {
        config: mcfg.clone(),
        train_config: Some(tcfg.clone()),
        history,
        best_epoch: Some(best_epoch),
        params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f32,
    /// 1 iff the probability exceeds 0.5.
    pub label: u8,
}

impl Prediction {
    pub fn from_probability(probability: f32) -> Self {
        Prediction {
            probability,
            label: u8::from(probability > 0.5),
        }
    }
}

pub fn predict(checkpoint: &Checkpoint, seqs: &[TokenSequence]) -> Result<Vec<Prediction>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let model = checkpoint.model()?;
    let batch = batchify(seqs, false)?;
    Ok(predict_probs(&model, &batch)?
        .into_iter()
        .map(Prediction::from_probability)
        .collect())
}
