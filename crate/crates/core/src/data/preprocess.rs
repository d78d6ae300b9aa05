use std::collections::HashMap;

use super::{Basket, BasketDataset, DataError, ItemId, Result, Transaction};

/// Interaction and basket thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub min_interactions: usize,
    pub min_baskets: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_interactions: 5,
            min_baskets: 2,
        }
    }
}

struct RawBasket<'a> {
    user: usize,
    key: &'a str,
    timestamp: i64,
    items: Vec<usize>,
}

fn intern<'a>(table: &mut HashMap<&'a str, usize>, order: &mut Vec<&'a str>, key: &'a str) -> usize {
    *table.entry(key).or_insert_with(|| {
        order.push(key);
        order.len() - 1
    })
}

/// Filters rare items, light users and single-basket users until nothing
/// changes, then renumbers ids densely in first-seen order and sorts each
/// user's baskets by `(timestamp, basket_key)`.
///
/// An interaction is one `(basket, item)` pair; duplicate rows inside a
/// basket count once. A basket's timestamp is the earliest among its rows.
pub fn preprocess(tx: &[Transaction], min_interactions: usize, min_baskets: usize) -> Result<BasketDataset> {
    filter(tx, min_interactions, min_baskets, true)
}

/// One round of item filter, then user filters, without iterating. Used to
/// report how far a single pass is from the fixed point.
pub fn preprocess_single_pass(
    tx: &[Transaction],
    min_interactions: usize,
    min_baskets: usize,
) -> Result<BasketDataset> {
    filter(tx, min_interactions, min_baskets, false)
}

fn filter(tx: &[Transaction], min_interactions: usize, min_baskets: usize, fixed_point: bool) -> Result<BasketDataset> {
    if min_interactions < 1 || min_baskets < 2 {
        return Err(DataError::InvalidThresholds(format!(
            "min_interactions={min_interactions} (need >= 1), min_baskets={min_baskets} (need >= 2)"
        )));
    }
    let mut user_table = HashMap::new();
    let mut user_order = Vec::new();
    let mut item_table = HashMap::new();
    let mut item_order = Vec::new();
    let mut basket_table: HashMap<(usize, &str), usize> = HashMap::new();
    let mut baskets: Vec<RawBasket> = Vec::new();

    for t in tx {
        let user = intern(&mut user_table, &mut user_order, &t.user_id);
        let item = intern(&mut item_table, &mut item_order, &t.item_id);
        let slot = *basket_table.entry((user, t.basket_key.as_str())).or_insert_with(|| {
            baskets.push(RawBasket {
                user,
                key: &t.basket_key,
                timestamp: t.timestamp,
                items: Vec::new(),
            });
            baskets.len() - 1
        });
        let b = &mut baskets[slot];
        b.timestamp = b.timestamp.min(t.timestamp);
        b.items.push(item);
    }
    for b in &mut baskets {
        b.items.sort_unstable();
        b.items.dedup();
    }

    let mut item_alive = vec![true; item_order.len()];
    let mut user_alive = vec![true; user_order.len()];
    loop {
        let mut changed = false;

        let mut item_counts = vec![0usize; item_order.len()];
        for b in baskets.iter().filter(|b| user_alive[b.user]) {
            for &i in &b.items {
                item_counts[i] += 1;
            }
        }
        for (alive, &c) in item_alive.iter_mut().zip(&item_counts) {
            if *alive && c < min_interactions {
                *alive = false;
                changed = true;
            }
        }
        for b in &mut baskets {
            b.items.retain(|&i| item_alive[i]);
        }

        let mut user_interactions = vec![0usize; user_order.len()];
        let mut user_baskets = vec![0usize; user_order.len()];
        for b in baskets.iter().filter(|b| !b.items.is_empty()) {
            user_interactions[b.user] += b.items.len();
            user_baskets[b.user] += 1;
        }
        for u in 0..user_order.len() {
            if user_alive[u] && (user_interactions[u] < min_interactions || user_baskets[u] < min_baskets) {
                user_alive[u] = false;
                changed = true;
            }
        }
        if !changed || !fixed_point {
            break;
        }
    }

    let mut item_remap = vec![None; item_order.len()];
    let mut item_ids = Vec::new();
    for (i, &alive) in item_alive.iter().enumerate() {
        if alive {
            item_remap[i] = Some(item_ids.len() as ItemId);
            item_ids.push(item_order[i].to_string());
        }
    }
    let mut user_remap = vec![None; user_order.len()];
    let mut user_ids = Vec::new();
    for (u, &alive) in user_alive.iter().enumerate() {
        if alive {
            user_remap[u] = Some(user_ids.len());
            user_ids.push(user_order[u].to_string());
        }
    }
    if user_ids.is_empty() || item_ids.is_empty() {
        return Err(DataError::EmptyAfterFiltering);
    }

    let mut per_user: Vec<Vec<&RawBasket>> = vec![Vec::new(); user_ids.len()];
    for b in baskets.iter().filter(|b| !b.items.is_empty()) {
        if let Some(u) = user_remap[b.user] {
            per_user[u].push(b);
        }
    }
    let histories: Vec<Vec<Basket>> = per_user
        .into_iter()
        .map(|mut bs| {
            bs.sort_by(|a, b| (a.timestamp, a.key).cmp(&(b.timestamp, b.key)));
            bs.into_iter()
                .map(|b| {
                    let mut items: Basket = b.items.iter().filter_map(|&i| item_remap[i]).collect();
                    items.sort_unstable();
                    items
                })
                .collect()
        })
        .collect();

    BasketDataset::with_ids(item_ids.len(), histories, user_ids, item_ids)
}
