use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{train, Result, TrainConfig, TrainError, TrainReport};
use crate::data::{BasketDataset, SplitSpec};
use crate::model::ModelConfig;

/// Value lists per dotted key (`model.*` or `train.*`), in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl Grid {
    /// Parses `section.key = v1,v2,...` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| TrainError::Config(format!("grid line {}: {m}", n + 1));
            let (key, values) = line.split_once('=').ok_or_else(|| bad("expected `key = values`"))?;
            let key = key.trim();
            if !(key.starts_with("model.") || key.starts_with("train.")) {
                return Err(bad(&format!("`{key}` is not a model.* or train.* key")));
            }
            if axes.iter().any(|(k, _)| k == key) {
                return Err(bad(&format!("duplicate key `{key}`")));
            }
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(bad("empty value"));
            }
            axes.push((key.to_string(), values));
        }
        if axes.is_empty() {
            return Err(TrainError::Config("grid has no axes".into()));
        }
        Ok(Self { axes })
    }

    /// Number of combinations, or `None` on overflow.
    pub fn size(&self) -> Option<usize> {
        self.axes
            .iter()
            .try_fold(1usize, |acc, (_, v)| acc.checked_mul(v.len()))
    }

    /// Combination `index` in row-major order, first axis slowest.
    pub fn assignment(&self, mut index: usize) -> Vec<(String, String)> {
        let mut out = vec![(String::new(), String::new()); self.axes.len()];
        for (slot, (key, values)) in out.iter_mut().zip(&self.axes).rev() {
            *slot = (key.clone(), values[index % values.len()].clone());
            index /= values.len();
        }
        out
    }

    /// The full grid when it fits in `budget`, else a seeded uniform sample
    /// of `budget` combination indices, ascending.
    pub fn select(&self, budget: usize, seed: u64) -> Result<Vec<usize>> {
        if budget < 1 {
            return Err(TrainError::Config("budget must be >= 1".into()));
        }
        let total = self
            .size()
            .ok_or_else(|| TrainError::Config("grid too large to enumerate".into()))?;
        if total <= budget {
            return Ok((0..total).collect());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, total, budget).into_vec();
        picked.sort_unstable();
        Ok(picked)
    }
}

/// Applies dotted-key overrides to copies of the base configs.
pub fn apply_assignment(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    assignment: &[(String, String)],
) -> Result<(ModelConfig, TrainConfig)> {
    let (mut m, mut t) = (base_model.clone(), base_train.clone());
    for (key, value) in assignment {
        match key.split_once('.') {
            Some(("model", k)) => m.set(k, value)?,
            Some(("train", k)) => t.set(k, value)?,
            _ => return Err(TrainError::Config(format!("unknown key `{key}`"))),
        }
    }
    m.validate()?;
    t.validate()?;
    Ok((m, t))
}

#[derive(Debug, Clone)]
pub struct Trial {
    /// Position in the selected trial list.
    pub index: usize,
    /// Combination index within the full grid.
    pub grid_index: usize,
    pub assignment: Vec<(String, String)>,
    /// Failures are recorded as their message.
    pub outcome: std::result::Result<TrainReport, String>,
}

impl Trial {
    pub fn best_metric(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|r| r.best_metric)
    }

    pub fn label(&self) -> String {
        let parts: Vec<String> = self.assignment.iter().map(|(k, v)| format!("{k}={v}")).collect();
        parts.join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    /// In trial-index order.
    pub trials: Vec<Trial>,
    /// Trial indices by best validation metric descending, ties by index;
    /// failed trials last.
    pub ranking: Vec<usize>,
}

impl SweepReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("rank\ttrial\tbest_metric\tbest_epoch\tconfig\n");
        for (rank, &i) in self.ranking.iter().enumerate() {
            let t = &self.trials[i];
            let (metric, epoch) = match &t.outcome {
                Ok(r) => (format!("{:.4}", r.best_metric), r.best_epoch.to_string()),
                Err(e) => (format!("failed: {e}"), "-".into()),
            };
            writeln!(s, "{}\t{}\t{metric}\t{epoch}\t{}", rank + 1, t.index, t.label()).unwrap();
        }
        s
    }
}

fn rank_trials(trials: &[Trial]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| {
        let key = |i: usize| trials[i].best_metric().filter(|m| !m.is_nan());
        match (key(a), key(b)) {
            (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.cmp(&b),
        }
    });
    order
}

/// Trains every selected combination in parallel. A failing trial is
/// recorded and the sweep continues.
pub fn sweep(
    ds: &BasketDataset,
    split: &SplitSpec,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    grid: &Grid,
    budget: usize,
    sample_seed: u64,
) -> Result<SweepReport> {
    let selected = grid.select(budget, sample_seed)?;
    let trials: Vec<Trial> = selected
        .par_iter()
        .enumerate()
        .map(|(index, &grid_index)| {
            let assignment = grid.assignment(grid_index);
            let outcome = apply_assignment(base_model, base_train, &assignment)
                .and_then(|(m, t)| train(ds, split, &m, &t))
                .map(|(_, report)| report)
                .map_err(|e| e.to_string());
            Trial {
                index,
                grid_index,
                assignment,
                outcome,
            }
        })
        .collect();
    let ranking = rank_trials(&trials);
    Ok(SweepReport { trials, ranking })
}
