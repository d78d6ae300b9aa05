use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{Basket, BasketDataset, DataError, ItemId, Result};

/// Purchase pattern of one item for one user inside the retained window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairHistory {
    /// Row in the batch.
    pub row: usize,
    pub item: ItemId,
    /// Window positions (0-based, left-padded) where the item was bought.
    pub positions: Vec<usize>,
    /// `min(positions.len(), f_max)`.
    pub frequency: usize,
}

/// Sparse multi-hot encoding of a batch of user histories.
///
/// Each user contributes `seq_len` rows; the most recent retained basket is
/// always the last row, earlier rows are padded when the user has fewer
/// baskets than `seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    users: Vec<usize>,
    seq_len: usize,
    n_items: usize,
    f_max: usize,
    rows: Vec<Basket>,
    pad_mask: Vec<bool>,
    targets: Vec<Basket>,
    pairs: Vec<PairHistory>,
    pair_offsets: Vec<usize>,
}

struct UserRows {
    rows: Vec<Basket>,
    pad: Vec<bool>,
    target: Basket,
    pairs: Vec<(ItemId, Vec<usize>)>,
}

fn encode_user(ds: &BasketDataset, user: usize, seq_len: usize, drop_last: bool) -> Result<UserRows> {
    if user >= ds.n_users() {
        return Err(DataError::UnknownUser {
            user,
            n_users: ds.n_users(),
        });
    }
    let (history, target) = if drop_last {
        (
            ds.input_baskets(user),
            ds.target_basket(user).cloned().unwrap_or_default(),
        )
    } else {
        (ds.baskets(user), Basket::new())
    };
    if history.is_empty() {
        return Err(DataError::NoInputBaskets { user });
    }
    let retained = &history[history.len().saturating_sub(seq_len)..];
    let n_pad = seq_len - retained.len();
    let mut rows = vec![Basket::new(); n_pad];
    rows.extend(retained.iter().cloned());
    let mut pad = vec![true; n_pad];
    pad.resize(seq_len, false);
    let mut by_item: BTreeMap<ItemId, Vec<usize>> = BTreeMap::new();
    for (offset, basket) in retained.iter().enumerate() {
        for &i in basket {
            by_item.entry(i).or_default().push(n_pad + offset);
        }
    }
    Ok(UserRows {
        rows,
        pad,
        target,
        pairs: by_item.into_iter().collect(),
    })
}

/// Encodes `users` of `ds`. With `drop_last_basket` the final basket of each
/// user is the target and only the earlier ones are history; otherwise the
/// whole history is input and targets are empty.
pub fn encode_batch(
    ds: &BasketDataset,
    users: &[usize],
    seq_len: usize,
    f_max: usize,
    drop_last_basket: bool,
) -> Result<EncodedBatch> {
    if seq_len < 1 || f_max < 1 {
        return Err(DataError::InvalidEncoding(format!(
            "seq_len={seq_len} and f_max={f_max} must both be >= 1"
        )));
    }
    let encoded: Vec<UserRows> = users
        .par_iter()
        .map(|&u| encode_user(ds, u, seq_len, drop_last_basket))
        .collect::<Result<_>>()?;

    let mut batch = EncodedBatch {
        users: users.to_vec(),
        seq_len,
        n_items: ds.n_items(),
        f_max,
        rows: Vec::with_capacity(users.len() * seq_len),
        pad_mask: Vec::with_capacity(users.len() * seq_len),
        targets: Vec::with_capacity(users.len()),
        pairs: Vec::new(),
        pair_offsets: vec![0],
    };
    for (row, enc) in encoded.into_iter().enumerate() {
        batch.rows.extend(enc.rows);
        batch.pad_mask.extend(enc.pad);
        batch.targets.push(enc.target);
        for (item, positions) in enc.pairs {
            let frequency = positions.len().min(f_max);
            batch.pairs.push(PairHistory {
                row,
                item,
                positions,
                frequency,
            });
        }
        batch.pair_offsets.push(batch.pairs.len());
    }
    Ok(batch)
}

impl EncodedBatch {
    pub fn batch_size(&self) -> usize {
        self.users.len()
    }

    pub fn users(&self) -> &[usize] {
        &self.users
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn f_max(&self) -> usize {
        self.f_max
    }

    /// All `batch_size * seq_len` basket rows; pad rows are empty.
    pub fn rows(&self) -> &[Basket] {
        &self.rows
    }

    pub fn basket(&self, row: usize, pos: usize) -> &[ItemId] {
        &self.rows[row * self.seq_len + pos]
    }

    /// `(batch_size * seq_len)` flags, true where the position is padding.
    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn is_pad(&self, row: usize, pos: usize) -> bool {
        self.pad_mask[row * self.seq_len + pos]
    }

    pub fn targets(&self) -> &[Basket] {
        &self.targets
    }

    /// Dense `(batch_size, n_items)` 0/1 target matrix.
    pub fn target_multihot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.batch_size() * self.n_items];
        for (r, t) in self.targets.iter().enumerate() {
            for &i in t {
                out[r * self.n_items + i as usize] = 1.0;
            }
        }
        out
    }

    /// Dense multi-hot `(seq_len, n_items)` history of one row.
    pub fn history_multihot(&self, row: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.seq_len * self.n_items];
        for pos in 0..self.seq_len {
            for &i in self.basket(row, pos) {
                out[pos * self.n_items + i as usize] = 1.0;
            }
        }
        out
    }

    /// Every `(row, item)` pair with at least one purchase in the window,
    /// ordered by row then item.
    pub fn pairs(&self) -> &[PairHistory] {
        &self.pairs
    }

    pub fn pairs_for(&self, row: usize) -> &[PairHistory] {
        &self.pairs[self.pair_offsets[row]..self.pair_offsets[row + 1]]
    }

    fn pair(&self, row: usize, item: ItemId) -> Option<&PairHistory> {
        let ps = self.pairs_for(row);
        ps.binary_search_by_key(&item, |p| p.item).ok().map(|i| &ps[i])
    }

    /// 0/1 vector of length `seq_len`: was `item` bought at each position.
    pub fn item_history(&self, row: usize, item: ItemId) -> Vec<f64> {
        let mut h = vec![0.0; self.seq_len];
        if let Some(p) = self.pair(row, item) {
            for &pos in &p.positions {
                h[pos] = 1.0;
            }
        }
        h
    }

    /// Window purchase count clipped to `f_max` (0 when never bought).
    pub fn item_frequency(&self, row: usize, item: ItemId) -> usize {
        self.pair(row, item).map_or(0, |p| p.frequency)
    }

    /// The non-pad baskets of a row, oldest first.
    pub fn retained_baskets(&self, row: usize) -> Vec<Basket> {
        (0..self.seq_len)
            .filter(|&p| !self.is_pad(row, p))
            .map(|p| self.basket(row, p).to_vec())
            .collect()
    }
}
