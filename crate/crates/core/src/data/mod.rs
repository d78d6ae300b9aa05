//! Transaction ingestion, preprocessing, the leave-one-basket split and
//! mini-batch encoding.

mod cache;
mod encode;
mod load;
mod preprocess;
mod split;
pub mod synthetic;

use std::collections::BTreeSet;

pub use cache::{decode_cache, encode_cache, read_cache, write_cache, CACHE_MAGIC, CACHE_VERSION};
pub use encode::{encode_batch, EncodedBatch, PairHistory};
pub use load::{load_transactions, parse_timestamp, BasketKey, LoadedTransactions, TableFormat};
pub use preprocess::{preprocess, preprocess_single_pass, PreprocessConfig};
pub use split::{split_leave_one_basket, SplitSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("no valid rows in {0}")]
    NoValidRows(String),
    #[error("dataset is empty after filtering")]
    EmptyAfterFiltering,
    #[error("invalid preprocessing thresholds: {0}")]
    InvalidThresholds(String),
    #[error("user {user} has no input baskets")]
    NoInputBaskets { user: usize },
    #[error("user index {user} out of range ({n_users} users)")]
    UnknownUser { user: usize, n_users: usize },
    #[error("invalid encoding parameter: {0}")]
    InvalidEncoding(String),
    #[error("bad dataset cache: {0}")]
    BadCache(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Dense item index in `[0, n_items)`.
pub type ItemId = u32;

/// A basket: sorted, deduplicated item indices.
pub type Basket = Vec<ItemId>;

/// One raw purchase row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub user_id: String,
    pub item_id: String,
    pub basket_key: String,
    /// Seconds; used only to order baskets.
    pub timestamp: i64,
}

/// Per-user ordered basket sequences over a dense item catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasketDataset {
    n_items: usize,
    histories: Vec<Vec<Basket>>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
}

impl BasketDataset {
    /// Builds a dataset from already-dense histories. Baskets are sorted and
    /// deduplicated; raw ids default to the dense index.
    pub fn from_histories(n_items: usize, histories: Vec<Vec<Basket>>) -> Result<Self> {
        let user_ids = (0..histories.len()).map(|u| u.to_string()).collect();
        let item_ids = (0..n_items).map(|i| i.to_string()).collect();
        Self::with_ids(n_items, histories, user_ids, item_ids)
    }

    pub fn with_ids(
        n_items: usize,
        mut histories: Vec<Vec<Basket>>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        if user_ids.len() != histories.len() || item_ids.len() != n_items {
            return Err(DataError::InvalidEncoding(
                "id tables do not match dataset dimensions".into(),
            ));
        }
        for basket in histories.iter_mut().flatten() {
            basket.sort_unstable();
            basket.dedup();
            if let Some(&bad) = basket.iter().find(|&&i| i as usize >= n_items) {
                return Err(DataError::InvalidEncoding(format!(
                    "item {bad} outside catalog of {n_items}"
                )));
            }
        }
        Ok(Self {
            n_items,
            histories,
            user_ids,
            item_ids,
        })
    }

    pub fn n_users(&self) -> usize {
        self.histories.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_baskets(&self) -> usize {
        self.histories.iter().map(Vec::len).sum()
    }

    pub fn histories(&self) -> &[Vec<Basket>] {
        &self.histories
    }

    pub fn baskets(&self, user: usize) -> &[Basket] {
        &self.histories[user]
    }

    /// Baskets available as model input under leave-one-basket: all but the
    /// last.
    pub fn input_baskets(&self, user: usize) -> &[Basket] {
        let b = &self.histories[user];
        &b[..b.len().saturating_sub(1)]
    }

    /// The held-out final basket.
    pub fn target_basket(&self, user: usize) -> Option<&Basket> {
        self.histories[user].last()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Every distinct item in the user's input baskets.
    pub fn input_item_set(&self, user: usize) -> BTreeSet<ItemId> {
        self.input_baskets(user).iter().flatten().copied().collect()
    }

    /// The same users with their held-out last basket removed, so that the
    /// former second-to-last basket becomes the prediction target. This is
    /// the training view of leave-one-basket.
    pub fn without_last_basket(&self) -> Self {
        Self {
            n_items: self.n_items,
            histories: self
                .histories
                .iter()
                .map(|h| h[..h.len().saturating_sub(1)].to_vec())
                .collect(),
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
        }
    }

    /// Interaction count per item over the users' input baskets.
    pub fn input_item_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_items];
        for u in 0..self.n_users() {
            for &i in self.input_baskets(u).iter().flatten() {
                counts[i as usize] += 1;
            }
        }
        counts
    }

    /// Flattens back to transactions in user/basket order. Basket keys and
    /// timestamps encode the basket position so that re-preprocessing keeps
    /// the order.
    pub fn to_transactions(&self) -> Vec<Transaction> {
        let mut out = Vec::new();
        for (u, history) in self.histories.iter().enumerate() {
            for (k, basket) in history.iter().enumerate() {
                for &i in basket {
                    out.push(Transaction {
                        user_id: self.user_ids[u].clone(),
                        item_id: self.item_ids[i as usize].clone(),
                        basket_key: format!("{k:010}"),
                        timestamp: k as i64,
                    });
                }
            }
        }
        out
    }

    pub fn stats(&self) -> DatasetStats {
        dataset_stats(self)
    }
}

/// Summary counts in the layout of a dataset statistics table.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_baskets: usize,
    pub avg_baskets_per_user: f64,
    pub avg_basket_size: f64,
}

pub fn dataset_stats(ds: &BasketDataset) -> DatasetStats {
    let n_baskets = ds.n_baskets();
    let n_interactions: usize = ds.histories.iter().flatten().map(Vec::len).sum();
    DatasetStats {
        n_users: ds.n_users(),
        n_items: ds.n_items(),
        n_baskets,
        avg_baskets_per_user: n_baskets as f64 / ds.n_users().max(1) as f64,
        avg_basket_size: n_interactions as f64 / n_baskets.max(1) as f64,
    }
}

impl DatasetStats {
    pub const HEADER: &'static str = "dataset\t#users\t#items\t#baskets\tavg #baskets per user\tavg basket size";

    /// One tab-separated table row, averages to 2 decimals.
    pub fn row(&self, name: &str) -> String {
        format!(
            "{name}\t{}\t{}\t{}\t{:.2}\t{:.2}",
            self.n_users, self.n_items, self.n_baskets, self.avg_baskets_per_user, self.avg_basket_size
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_single_basket_dataset() {
        let ds = BasketDataset::from_histories(3, vec![vec![vec![0, 1, 2]]]).unwrap();
        let s = ds.stats();
        assert_eq!((s.n_users, s.n_items, s.n_baskets), (1, 3, 1));
        assert_eq!(s.row("x"), "x\t1\t3\t1\t1.00\t3.00");
    }

    #[test]
    fn baskets_are_normalized() {
        let ds = BasketDataset::from_histories(4, vec![vec![vec![3, 1, 3], vec![0]]]).unwrap();
        assert_eq!(ds.baskets(0)[0], vec![1, 3]);
        assert!(BasketDataset::from_histories(2, vec![vec![vec![2]]]).is_err());
    }

    #[test]
    fn input_and_target_views() {
        let ds = BasketDataset::from_histories(3, vec![vec![vec![0], vec![1], vec![0, 2]]]).unwrap();
        assert_eq!(ds.input_baskets(0), &[vec![0], vec![1]]);
        assert_eq!(ds.target_basket(0), Some(&vec![0, 2]));
        let train = ds.without_last_basket();
        assert_eq!(train.target_basket(0), Some(&vec![1]));
        assert_eq!(ds.input_item_counts(), vec![1, 1, 0]);
    }
}
