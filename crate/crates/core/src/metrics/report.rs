use std::fmt::Write as _;

use rayon::prelude::*;

use super::{ndcg_at_k, paired_t_test, recall_at_k, user_novelty_at_k, MetricError, Result, TTest};
use crate::data::{BasketDataset, ItemId, SplitSpec};
use crate::model::Saferec;

/// Produces a full, duplicate-free ranking of the catalog per user, based on
/// the user's input baskets only.
pub trait Recommender: Sync {
    fn name(&self) -> String;
    fn rank(&self, ds: &BasketDataset, users: &[usize]) -> std::result::Result<Vec<Vec<ItemId>>, String>;
}

impl Recommender for Saferec {
    fn name(&self) -> String {
        if self.config().freq_module_enabled {
            "SAFERec".into()
        } else {
            "SASRec*".into()
        }
    }

    fn rank(&self, ds: &BasketDataset, users: &[usize]) -> std::result::Result<Vec<Vec<ItemId>>, String> {
        self.rank_users(ds, users).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Recall,
    Ndcg,
    Novelty,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Recall, Metric::Ndcg, Metric::Novelty];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Recall => "Recall",
            Metric::Ndcg => "NDCG",
            Metric::Novelty => "UN",
        }
    }

    /// Parses `Recall@10`, `NDCG@100`, `UN@10`.
    pub fn parse_column(s: &str) -> Option<(Metric, usize)> {
        let (m, k) = s.split_once('@')?;
        let metric = Metric::ALL.into_iter().find(|x| x.name().eq_ignore_ascii_case(m))?;
        Some((metric, k.parse().ok()?))
    }
}

/// One metric at one cutoff, per evaluated user.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub metric: Metric,
    pub cutoff: usize,
    pub values: Vec<f64>,
    pub test: Option<TTest>,
}

impl MetricSeries {
    /// Arithmetic mean accumulated in user order.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn column(&self) -> String {
        format!("{}@{}", self.metric.name(), self.cutoff)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub users: Vec<usize>,
    pub series: Vec<MetricSeries>,
}

/// Per-user values read back from [`EvalReport::per_user_tsv`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerUserTable {
    pub users: Vec<usize>,
    pub columns: Vec<(Metric, usize)>,
    /// `values[c][u]`.
    pub values: Vec<Vec<f64>>,
}

impl PerUserTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| MetricError::BadReport("empty".into()))?;
        let mut cols = header.split('\t');
        if cols.next() != Some("user") {
            return Err(MetricError::BadReport("first column must be `user`".into()));
        }
        let columns = cols
            .map(|c| Metric::parse_column(c).ok_or_else(|| MetricError::BadReport(format!("bad column {c}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut users = Vec::new();
        let mut values = vec![Vec::new(); columns.len()];
        for line in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != columns.len() + 1 {
                return Err(MetricError::BadReport(format!("ragged row `{line}`")));
            }
            users.push(
                fields[0]
                    .parse()
                    .map_err(|_| MetricError::BadReport(format!("bad user `{}`", fields[0])))?,
            );
            for (c, f) in fields[1..].iter().enumerate() {
                values[c].push(
                    f.parse()
                        .map_err(|_| MetricError::BadReport(format!("bad value `{f}`")))?,
                );
            }
        }
        Ok(Self { users, columns, values })
    }

    pub fn column(&self, metric: Metric, cutoff: usize) -> Option<&[f64]> {
        let c = self.columns.iter().position(|&x| x == (metric, cutoff))?;
        Some(&self.values[c])
    }
}

impl EvalReport {
    pub fn mean(&self, metric: Metric, cutoff: usize) -> Option<f64> {
        self.series
            .iter()
            .find(|s| s.metric == metric && s.cutoff == cutoff)
            .map(MetricSeries::mean)
    }

    /// `model, metric, cutoff, mean` rows (4 decimals), plus `t, p,
    /// significant` once significance has been attached.
    pub fn to_tsv(&self) -> String {
        let with_sig = self.series.iter().any(|s| s.test.is_some());
        let mut out = String::from("model\tmetric\tcutoff\tmean");
        if with_sig {
            out.push_str("\tt\tp\tsignificant");
        }
        out.push('\n');
        for s in &self.series {
            write!(
                out,
                "{}\t{}\t{}\t{:.4}",
                self.model,
                s.metric.name(),
                s.cutoff,
                s.mean()
            )
            .unwrap();
            if with_sig {
                match s.test {
                    Some(t) => write!(out, "\t{:.4}\t{:.3e}\t{}", t.t, t.p, t.significant).unwrap(),
                    None => out.push_str("\t-\t-\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// One row per user with every series at full precision.
    pub fn per_user_tsv(&self) -> String {
        let mut out = String::from("user");
        for s in &self.series {
            write!(out, "\t{}", s.column()).unwrap();
        }
        out.push('\n');
        for (r, u) in self.users.iter().enumerate() {
            write!(out, "{u}").unwrap();
            for s in &self.series {
                write!(out, "\t{}", s.values[r]).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Attaches a paired t-test against `reference` to every series that the
    /// reference also reports. Users must match one-to-one.
    pub fn attach_significance(&mut self, reference: &PerUserTable, n_comparisons: usize) -> Result<()> {
        if reference.users != self.users {
            return Err(MetricError::BadReport("reference report covers different users".into()));
        }
        for s in &mut self.series {
            if let Some(ref_values) = reference.column(s.metric, s.cutoff) {
                s.test = Some(paired_t_test(ref_values, &s.values, n_comparisons)?);
            }
        }
        Ok(())
    }
}

/// Scores `users` against their held-out last basket at every cutoff.
pub fn evaluate_users(
    rec: &dyn Recommender,
    ds: &BasketDataset,
    users: &[usize],
    cutoffs: &[usize],
) -> Result<EvalReport> {
    let max_k = cutoffs.iter().copied().max().unwrap_or(0);
    let rankings = rec.rank(ds, users).map_err(MetricError::Recommender)?;
    if rankings.len() != users.len() {
        return Err(MetricError::Recommender(format!(
            "{} rankings for {} users",
            rankings.len(),
            users.len()
        )));
    }
    let rows: Vec<Vec<f64>> = users
        .par_iter()
        .zip(rankings.par_iter())
        .map(|(&u, ranked)| {
            if ranked.len() < max_k {
                return Err(MetricError::RankingTooShort {
                    len: ranked.len(),
                    k: max_k,
                });
            }
            let mut seen = vec![false; ds.n_items()];
            for &i in ranked {
                match seen.get_mut(i as usize) {
                    Some(s) if !*s => *s = true,
                    _ => return Err(MetricError::DuplicateItem(i)),
                }
            }
            let truth = ds.target_basket(u).ok_or(MetricError::EmptyTruth)?;
            let history = ds.input_item_set(u);
            let mut row = Vec::with_capacity(cutoffs.len() * 3);
            for &k in cutoffs {
                row.push(recall_at_k(ranked, truth, k)?);
                row.push(ndcg_at_k(ranked, truth, k)?);
                row.push(user_novelty_at_k(ranked, &history, k)?);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut series = Vec::with_capacity(cutoffs.len() * 3);
    for (ci, &k) in cutoffs.iter().enumerate() {
        for (mi, metric) in Metric::ALL.into_iter().enumerate() {
            series.push(MetricSeries {
                metric,
                cutoff: k,
                values: rows.iter().map(|r| r[ci * 3 + mi]).collect(),
                test: None,
            });
        }
    }
    Ok(EvalReport {
        model: rec.name(),
        users: users.to_vec(),
        series,
    })
}

/// [`evaluate_users`] on the test half of `split`.
pub fn evaluate_model(
    rec: &dyn Recommender,
    ds: &BasketDataset,
    split: &SplitSpec,
    cutoffs: &[usize],
) -> Result<EvalReport> {
    evaluate_users(rec, ds, &split.test_users, cutoffs)
}
