//! Mini-batch Adam training with validation-driven early stopping, and a
//! grid/random hyperparameter sweep built on top of it.
//!
//! Each user contributes one example per epoch: the history before their
//! last training basket predicts that basket. The training view drops every
//! user's held-out basket, so validation and test targets are never seen.

mod sweep;

pub use sweep::{apply_assignment, sweep, Grid, SweepReport, Trial};

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{encode_batch, BasketDataset, SplitSpec};
use crate::metrics::{evaluate_users, Metric, MetricError};
use crate::model::{ModelConfig, ModelError, Saferec};
use crate::tensor::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("validation split is empty")]
    NoValidationUsers,
    #[error("no user has enough baskets to train on")]
    NoTrainingUsers,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("non-finite gradient in `{param}` at epoch {epoch}, batch {batch}")]
    NonFiniteGradient { epoch: usize, batch: usize, param: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Drives shuffling and dropout; initialization uses `ModelConfig::init_seed`.
    pub seed: u64,
    /// Recall or NDCG at one cutoff.
    pub monitor: (Metric, usize),
    /// Cutoffs reported by evaluation after training.
    pub eval_cutoffs: Vec<usize>,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-3,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            monitor: (Metric::Ndcg, 10),
            eval_cutoffs: vec![10, 100],
            grad_clip: 5.0,
        }
    }
}

fn monitor_name((m, k): (Metric, usize)) -> String {
    format!("{}@{k}", m.name())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_epochs < 1 || self.patience > self.max_epochs {
            return bad(format!(
                "need 1 <= max_epochs and patience <= max_epochs (got {} and {})",
                self.max_epochs, self.patience
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr={} must be positive", self.lr));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return bad(format!("grad_clip={} must be >= 0", self.grad_clip));
        }
        if self.monitor.0 == Metric::Novelty || self.monitor.1 == 0 {
            return bad(format!("cannot monitor {}", monitor_name(self.monitor)));
        }
        if self.eval_cutoffs.is_empty() || self.eval_cutoffs.contains(&0) {
            return bad("eval_cutoffs must be non-empty and positive".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = || TrainError::Config(format!("invalid value `{value}` for train.{key}"));
        match key {
            "batch_size" => self.batch_size = value.parse().map_err(|_| err())?,
            "lr" => self.lr = value.parse().map_err(|_| err())?,
            "max_epochs" => self.max_epochs = value.parse().map_err(|_| err())?,
            "patience" => self.patience = value.parse().map_err(|_| err())?,
            "seed" => self.seed = value.parse().map_err(|_| err())?,
            "grad_clip" => self.grad_clip = value.parse().map_err(|_| err())?,
            "monitor_metric" => self.monitor = Metric::parse_column(value).ok_or_else(err)?,
            "eval_cutoffs" => {
                self.eval_cutoffs = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err())?
            }
            _ => return Err(TrainError::Config(format!("unknown key train.{key}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let cutoffs: Vec<String> = self.eval_cutoffs.iter().map(usize::to_string).collect();
        format!(
            "batch_size={}\nlr={:?}\nmax_epochs={}\npatience={}\nseed={}\nmonitor_metric={}\neval_cutoffs={}\ngrad_clip={:?}\n",
            self.batch_size,
            self.lr,
            self.max_epochs,
            self.patience,
            self.seed,
            monitor_name(self.monitor),
            cutoffs.join(","),
            self.grad_clip
        )
    }
}

/// Strict-improvement early stopping over 1-based epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None }
    }

    /// Records `metric` for `epoch`; returns whether it is a new best. NaN
    /// never improves.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = match self.best {
            None => !metric.is_nan(),
            Some((_, best)) => metric > best,
        };
        if improved {
            self.best = Some((epoch, metric));
        }
        improved
    }

    /// True once `patience` epochs have passed without improvement.
    pub fn should_stop(&self, epoch: usize) -> bool {
        let since = match self.best {
            Some((e, _)) => epoch - e,
            None => epoch,
        };
        since >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Validation monitor metric after the epoch.
    pub metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub monitor: (Metric, usize),
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

impl TrainReport {
    /// `epoch,loss,metric` lines. Timing is left out so reruns compare
    /// byte-for-byte.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch,loss,metric\n");
        for r in &self.epochs {
            writeln!(s, "{},{:?},{:?}", r.epoch, r.loss, r.metric).unwrap();
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.loss).collect()
    }
}

/// Passed to the per-epoch callback after validation.
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub model: &'a Saferec,
    pub is_best: bool,
}

/// Users with at least two baskets in `view`: one input, one target.
pub fn trainable_users(view: &BasketDataset) -> Vec<usize> {
    (0..view.n_users()).filter(|&u| view.baskets(u).len() >= 2).collect()
}

fn dropout_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d80f);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng
}

fn shuffled(users: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order = users.to_vec();
    order.shuffle(&mut rng);
    order
}

/// Trains from a fresh initialization and returns the best-epoch model.
pub fn train(
    ds: &BasketDataset,
    split: &SplitSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(Saferec, TrainReport)> {
    train_with(ds, split, model_config, train_config, |_| Ok(()))
}

/// [`train`] with a hook run after every epoch, e.g. for checkpointing.
pub fn train_with<F>(
    ds: &BasketDataset,
    split: &SplitSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Saferec, TrainReport)>
where
    F: FnMut(&EpochEvent) -> std::result::Result<(), String>,
{
    train_config.validate()?;
    if split.validation_users.is_empty() {
        return Err(TrainError::NoValidationUsers);
    }
    let view = ds.without_last_basket();
    let users = trainable_users(&view);
    if users.is_empty() {
        return Err(TrainError::NoTrainingUsers);
    }
    let mut model = Saferec::new(model_config.clone(), ds.n_items())?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: train_config.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let (metric, k) = train_config.monitor;
    let use_dropout = model_config.dropout > 0.0;
    let mut stopper = EarlyStopping::new(train_config.patience);
    let mut best_model = None;
    let mut epochs = Vec::new();

    for epoch in 1..=train_config.max_epochs {
        let start = Instant::now();
        let order = shuffled(&users, train_config.seed, epoch);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for (b, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let batch =
                encode_batch(&view, chunk, model_config.seq_len, model_config.f_max, true).map_err(ModelError::from)?;
            let rng = use_dropout.then(|| dropout_rng(train_config.seed, epoch, b));
            let loss = match model.compute_gradients(&batch, rng) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        loss: l,
                    })
                }
                Err(ModelError::NonFinite(_)) => {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            if train_config.grad_clip > 0.0 {
                model.params_mut().clip_grad_norm(train_config.grad_clip);
            }
            adam.step(model.params_mut())
                .map_err(|param| TrainError::NonFiniteGradient { epoch, batch: b, param })?;
            loss_sum += loss;
            n_batches += 1;
        }
        let value = evaluate_users(&model, ds, &split.validation_users, &[k])?
            .mean(metric, k)
            .expect("monitored series is always evaluated");
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n_batches as f64,
            metric: value,
            seconds: start.elapsed().as_secs_f64(),
        };
        let is_best = stopper.observe(epoch, value);
        if is_best {
            best_model = Some(model.clone());
        }
        on_epoch(&EpochEvent {
            record: &record,
            model: &model,
            is_best,
        })
        .map_err(TrainError::Callback)?;
        epochs.push(record);
        if stopper.should_stop(epoch) {
            break;
        }
    }
    let (best_epoch, best_metric) = stopper.best().unwrap_or((epochs.len(), f64::NAN));
    let report = TrainReport {
        monitor: train_config.monitor,
        epochs,
        best_epoch,
        best_metric,
    };
    Ok((best_model.unwrap_or(model), report))
}
