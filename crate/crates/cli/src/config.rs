//! Run configuration: line-oriented `section.key = value` entries over the
//! data, model, train, eval and baseline sections.
//!
//! Defaults:
//! - `data.cache = dataset.nbrc`, `data.split_seed = 0`
//! - `model.*` as `ModelConfig::default()`; `model.preset` (tafeng,
//!   dunnhumby, taobao) is applied before any other model key
//! - `train.*` as `TrainConfig::default()`
//! - `eval.cutoffs = 10,100`, `eval.users = test`, `eval.n_comparisons = 0`
//!   (0 means one comparison per reported series)
//! - `baseline.*` as `TifuConfig::default()`, `baseline.window = all`

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use nbrlab::baselines::TifuConfig;
use nbrlab::model::ModelConfig;
use nbrlab::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalUsers {
    Test,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cache: PathBuf,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cutoffs: Vec<usize>,
    pub eval_users: EvalUsers,
    pub n_comparisons: usize,
    pub baseline: TifuConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cache: PathBuf::from("dataset.nbrc"),
            split_seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            cutoffs: vec![10, 100],
            eval_users: EvalUsers::Test,
            n_comparisons: 0,
            baseline: TifuConfig::default(),
        }
    }
}

fn parse_list(value: &str) -> Option<Vec<usize>> {
    value.split(',').map(|s| s.trim().parse().ok()).collect()
}

/// Splits `section.key = value`, ignoring blank lines and `#` comments.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `section.key = value`, got `{line}`", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then file entries, then overrides; presets first within
    /// each layer.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            cfg.apply_all(&parse_entries(&text).with_context(|| format!("in {}", p.display()))?)?;
        }
        cfg.apply_all(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_all(&mut self, entries: &[(String, String)]) -> Result<()> {
        let (presets, rest): (Vec<_>, Vec<_>) = entries.iter().partition(|(k, _)| k == "model.preset");
        for (k, v) in presets.into_iter().chain(rest) {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| anyhow!("config key `{key}` must be `section.key`"))?;
        let bad = || anyhow!("invalid value `{value}` for {key}");
        match (section, field) {
            ("data", "cache") => self.cache = PathBuf::from(value),
            ("data", "split_seed") => self.split_seed = value.parse().map_err(|_| bad())?,
            ("model", "preset") => {
                let seed = self.model.init_seed;
                self.model =
                    ModelConfig::named_preset(value).ok_or_else(|| anyhow!("unknown model.preset `{value}`"))?;
                self.model.init_seed = seed;
            }
            ("model", k) => self.model.set(k, value)?,
            ("train", k) => self.train.set(k, value)?,
            ("eval", "cutoffs") => self.cutoffs = parse_list(value).ok_or_else(bad)?,
            ("eval", "users") => {
                self.eval_users = match value {
                    "test" => EvalUsers::Test,
                    "validation" => EvalUsers::Validation,
                    _ => return Err(bad()),
                }
            }
            ("eval", "n_comparisons") => self.n_comparisons = value.parse().map_err(|_| bad())?,
            ("baseline", "k") => self.baseline.k = value.parse().map_err(|_| bad())?,
            ("baseline", "m") => self.baseline.m = value.parse().map_err(|_| bad())?,
            ("baseline", "r_b") => self.baseline.r_b = value.parse().map_err(|_| bad())?,
            ("baseline", "r_g") => self.baseline.r_g = value.parse().map_err(|_| bad())?,
            ("baseline", "alpha") => self.baseline.alpha = value.parse().map_err(|_| bad())?,
            ("baseline", "window") => {
                self.baseline.window = match value {
                    "all" => None,
                    v => Some(v.parse().map_err(|_| bad())?),
                }
            }
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.baseline.validate().map_err(|e| anyhow!("baseline: {e}"))?;
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            bail!("eval.cutoffs must be non-empty and positive");
        }
        Ok(())
    }

    /// Every key with its effective value; loading this text alone
    /// reproduces the configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        writeln!(s, "data.cache = {}", self.cache.display()).unwrap();
        writeln!(s, "data.split_seed = {}", self.split_seed).unwrap();
        for (prefix, text) in [("model", self.model.to_text()), ("train", self.train.to_text())] {
            for line in text.lines() {
                let (k, v) = line.split_once('=').unwrap();
                writeln!(s, "{prefix}.{k} = {v}").unwrap();
            }
        }
        writeln!(s, "eval.cutoffs = {}", list(&self.cutoffs)).unwrap();
        let users = match self.eval_users {
            EvalUsers::Test => "test",
            EvalUsers::Validation => "validation",
        };
        writeln!(s, "eval.users = {users}").unwrap();
        writeln!(s, "eval.n_comparisons = {}", self.n_comparisons).unwrap();
        let b = &self.baseline;
        writeln!(s, "baseline.k = {}", b.k).unwrap();
        writeln!(s, "baseline.m = {}", b.m).unwrap();
        writeln!(s, "baseline.r_b = {:?}", b.r_b).unwrap();
        writeln!(s, "baseline.r_g = {:?}", b.r_g).unwrap();
        writeln!(s, "baseline.alpha = {:?}", b.alpha).unwrap();
        match b.window {
            Some(w) => writeln!(s, "baseline.window = {w}").unwrap(),
            None => writeln!(s, "baseline.window = all").unwrap(),
        }
        s
    }
}
