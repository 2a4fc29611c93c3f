//! A small neural stack: a masked feed-forward classifier and a transformer
//! encoder with a classification token, trained with Adam on binary
//! cross-entropy.
//!
//! Every computation is generic over [`Scalar`] so the same code trains in
//! `f32` and is gradient-checked in `f64`. Padding positions are never
//! touched by the transformer: attention, projections and feed-forward
//! layers run over the valid tokens of each row only, which makes outputs
//! bitwise independent of whatever sits under the padding.

mod adam;
mod checkpoint;
mod ff;
mod loss;
mod ops;
mod params;
mod scalar;
mod train;
mod transformer;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, CHECKPOINT_VERSION,
};
pub use loss::{bce_loss, BCE_EPS};
pub use params::{Init, Layout, ParamSpec};
pub use scalar::Scalar;
pub use train::{predict, split_indices, train, Prediction, TrainConfig};

use crate::digest::Algo;
use crate::error::{Error, Result};
use crate::featurize::{seq_len, vocab_size, Batch};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FeedForward,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Featurizer contract the model was built for; `None` for free-form
    /// test models.
    pub algo: Option<Algo>,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    /// Transformer only: normalize sublayer inputs instead of residual sums.
    #[serde(default)]
    pub pre_norm: bool,
    /// Transformer only: start the position table from sines and cosines
    /// rather than random values. It is trained either way.
    #[serde(default)]
    pub sinusoidal_positions: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn transformer(algo: Algo, seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::Transformer,
            algo: Some(algo),
            vocab_size: vocab_size(algo),
            seq_len: seq_len(algo),
            embed_dim: 128,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            hidden_dims: Vec::new(),
            dropout_rate: 0.0,
            pre_norm: false,
            sinusoidal_positions: false,
            seed,
        }
    }

    pub fn feed_forward(algo: Algo, seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::FeedForward,
            algo: Some(algo),
            vocab_size: vocab_size(algo),
            seq_len: seq_len(algo),
            embed_dim: 32,
            num_layers: 0,
            num_heads: 0,
            ffn_dim: 0,
            hidden_dims: vec![256, 64],
            dropout_rate: 0.0,
            pre_norm: false,
            sinusoidal_positions: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.seq_len == 0 || self.embed_dim == 0 {
            return bad("vocabulary, sequence length and embedding width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if let Some(algo) = self.algo {
            if self.vocab_size != vocab_size(algo) || self.seq_len != seq_len(algo) {
                return bad(format!(
                    "vocabulary or length does not match {algo} sequences"
                ));
            }
        }
        match self.kind {
            ModelKind::Transformer => {
                if self.num_layers == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
                    return bad("transformer needs layers, heads and a feed-forward width".into());
                }
                if self.embed_dim % self.num_heads != 0 {
                    return bad(format!(
                        "embedding width {} not divisible by {} heads",
                        self.embed_dim, self.num_heads
                    ));
                }
            }
            ModelKind::FeedForward => {
                if self.hidden_dims.contains(&0) {
                    return bad("hidden layers must be non-empty".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Arch {
    FeedForward(ff::FfLayout),
    Transformer(transformer::TfLayout),
}

/// A configured network with its parameters in one flat buffer.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    arch: Arch,
    pub params: Vec<T>,
}

/// Dropout masks drawn for one training step.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Stream,
}

impl Dropout<'_> {
    /// Inverted-dropout multipliers: `0` or `1 / (1 - rate)`.
    pub fn mask<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        let keep = T::of(1.0 / (1.0 - self.rate));
        let threshold = (self.rate * (1u64 << 53) as f64) as u64;
        (0..n)
            .map(|_| {
                if (self.rng.next_u64() >> 11) < threshold {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (layout, arch) = Self::build(&config)?;
        let params = layout.initialize(config.seed);
        Ok(Model {
            config,
            layout,
            arch,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        let (layout, arch) = Self::build(&config)?;
        if params.len() != layout.total() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters supplied, configuration needs {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(Model {
            config,
            layout,
            arch,
            params,
        })
    }

    fn build(config: &ModelConfig) -> Result<(Layout, Arch)> {
        config.validate()?;
        let mut layout = Layout::default();
        let arch = match config.kind {
            ModelKind::FeedForward => Arch::FeedForward(ff::FfLayout::new(config, &mut layout)),
            ModelKind::Transformer => {
                Arch::Transformer(transformer::TfLayout::new(config, &mut layout))
            }
        };
        Ok((layout, arch))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.rows == 0 {
            return Ok(());
        }
        if batch.seq_len != self.config.seq_len {
            return Err(Error::ShapeMismatch(format!(
                "batch sequences have length {}, model expects {}",
                batch.seq_len, self.config.seq_len
            )));
        }
        if let (Some(want), Some(got)) = (self.config.algo, batch.algo) {
            if want != got {
                return Err(Error::ShapeMismatch(format!(
                    "{got} batch for a {want} model"
                )));
            }
        }
        if let Some(t) = batch
            .tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::ShapeMismatch(format!(
                "token {t} outside the vocabulary"
            )));
        }
        Ok(())
    }

    /// Probability of the positive class for every row.
    pub fn forward(&self, batch: &Batch) -> Result<Vec<T>> {
        self.check_batch(batch)?;
        if batch.rows == 0 {
            return Ok(Vec::new());
        }
        Ok(match &self.arch {
            Arch::FeedForward(l) => ff::forward(l, &self.config, &self.params, batch, None).probs,
            Arch::Transformer(l) => {
                transformer::forward(l, &self.config, &self.params, batch, None)?.probs
            }
        })
    }

    /// Mean loss, its gradient with respect to every parameter, and the
    /// probabilities, for one batch.
    pub fn backward(&self, batch: &Batch, labels: &[u8]) -> Result<(T, Vec<T>, Vec<T>)> {
        self.backward_with(batch, labels, None)
    }

    pub(crate) fn backward_with(
        &self,
        batch: &Batch,
        labels: &[u8],
        dropout: Option<Dropout<'_>>,
    ) -> Result<(T, Vec<T>, Vec<T>)> {
        self.check_batch(batch)?;
        if labels.len() != batch.rows {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                batch.rows
            )));
        }
        let mut grads = vec![T::zero(); self.params.len()];
        if batch.rows == 0 {
            return Ok((T::zero(), grads, Vec::new()));
        }
        let probs = match &self.arch {
            Arch::FeedForward(l) => {
                let cache = ff::forward(l, &self.config, &self.params, batch, dropout);
                let dlogit = loss::bce_logit_grad(&cache.probs, labels);
                ff::backward(
                    l,
                    &self.config,
                    &self.params,
                    batch,
                    &cache,
                    &dlogit,
                    &mut grads,
                );
                cache.probs
            }
            Arch::Transformer(l) => {
                let cache = transformer::forward(l, &self.config, &self.params, batch, dropout)?;
                let dlogit = loss::bce_logit_grad(&cache.probs, labels);
                transformer::backward(l, &self.config, &self.params, &cache, &dlogit, &mut grads);
                cache.probs
            }
        };
        let loss = bce_loss(&probs, labels)?;
        Ok((loss, grads, probs))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|&x| U::of(x.to_f64().expect("finite")))
                .collect(),
        }
    }
}

/// Parameter layout implied by a configuration.
pub fn layout_of(config: &ModelConfig) -> Result<Layout> {
    Model::<f32>::build(config).map(|(l, _)| l)
}

/// Probabilities for every row of `batch`.
pub fn forward<T: Scalar>(model: &Model<T>, batch: &Batch) -> Result<Vec<T>> {
    model.forward(batch)
}

/// Gradients of the mean binary cross-entropy, laid out like the parameters.
pub fn backward<T: Scalar>(model: &Model<T>, batch: &Batch, labels: &[u8]) -> Result<Vec<T>> {
    model.backward(batch, labels).map(|(_, g, _)| g)
}
