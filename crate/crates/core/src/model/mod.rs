//! The SAFERec scorer: a basket-history encoder and transformer produce a
//! user vector scored against item embeddings, and a frequency module adds
//! an item-specific score from each item's purchase pattern in the window.
//! Disabling the frequency module gives the SASRec* ablation.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::ModelConfig;
pub use forward::{attention_mask, ForwardPass, ScoreVars};
pub use params::{init_params, EMBEDDING_STD};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{encode_batch, BasketDataset, DataError, EncodedBatch, ItemId};
use crate::tensor::{ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("batch does not match model: {0}")]
    BatchMismatch(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Score matrices `(batch, n_items)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutput {
    pub scores: Tensor,
    pub p_uu: Tensor,
    /// All zero when the frequency module is disabled.
    pub p_ui: Tensor,
}

/// Configuration plus learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Saferec {
    config: ModelConfig,
    n_items: usize,
    params: ParamStore,
}

/// Users scored per forward pass when ranking.
const RANK_CHUNK: usize = 256;

impl Saferec {
    pub fn new(config: ModelConfig, n_items: usize) -> Result<Self> {
        config.validate()?;
        if n_items == 0 {
            return Err(ModelError::Config("empty item catalog".into()));
        }
        let params = init_params(&config, n_items);
        Ok(Self {
            config,
            n_items,
            params,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, n_items: usize, params: ParamStore) -> Self {
        Self {
            config,
            n_items,
            params,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Toggles the frequency module without touching parameters.
    pub fn set_freq_module(&mut self, enabled: bool) {
        self.config.freq_module_enabled = enabled;
    }

    /// Inference scores for a batch (dropout off).
    pub fn score(&self, batch: &EncodedBatch) -> Result<ScoreOutput> {
        let mut fp = ForwardPass::new(self);
        let vars = fp.total_score(batch)?;
        Ok(fp.score_output(&vars))
    }

    /// Forward + backward on `batch`; overwrites the stored gradients and
    /// returns the loss. `rng` enables dropout.
    pub fn compute_gradients(&mut self, batch: &EncodedBatch, rng: Option<ChaCha8Rng>) -> Result<f64> {
        let mut fp = match rng {
            Some(r) => ForwardPass::with_dropout(self, r),
            None => ForwardPass::new(self),
        };
        let vars = fp.total_score(batch)?;
        let loss = fp.loss(vars.scores, batch.targets())?;
        let loss_value = fp.tape.value(loss).item();
        let grads = fp.param_gradients(loss)?;
        self.params.zero_grad();
        for (id, g) in grads {
            self.params.by_id_mut(id).grad = g;
        }
        Ok(loss_value)
    }

    /// Full rankings for `users`, scored from their input baskets (the last
    /// basket is held out).
    pub fn rank_users(&self, ds: &BasketDataset, users: &[usize]) -> Result<Vec<Vec<ItemId>>> {
        let chunks: Vec<Vec<Vec<ItemId>>> = users
            .par_chunks(RANK_CHUNK)
            .map(|chunk| {
                let batch = encode_batch(ds, chunk, self.config.seq_len, self.config.f_max, true)?;
                let out = self.score(&batch)?;
                Ok((0..chunk.len()).map(|r| rank_scores(out.scores.row(r))).collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

/// Item indices by descending score, ties by ascending index. `-0.0` and
/// `0.0` tie.
pub fn rank_scores(scores: &[f64]) -> Vec<ItemId> {
    // adding +0.0 maps -0.0 to +0.0 and leaves every other value unchanged
    let key = |i: ItemId| scores[i as usize] + 0.0;
    let mut idx: Vec<ItemId> = (0..scores.len() as ItemId).collect();
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    idx
}
