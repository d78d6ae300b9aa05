//! Frequency baselines: personal popularity, personal popularity back-filled
//! by global popularity, and TIFU-KNN.

mod tifu;

pub use tifu::{build_pif, nearest_neighbors, pif_distance, tifu_knn, tifu_scores, Pif, TifuConfig, TifuKnn};

use crate::data::{Basket, BasketDataset, ItemId};
use crate::metrics::Recommender;

/// Number of baskets containing each item.
fn personal_counts(history: &[Basket]) -> Vec<(ItemId, u64)> {
    let mut counts = std::collections::BTreeMap::new();
    for &i in history.iter().flatten() {
        *counts.entry(i).or_insert(0u64) += 1;
    }
    counts.into_iter().collect()
}

/// Purchased items by descending personal count, ties by ascending index.
pub fn p_pop(history: &[Basket]) -> Vec<ItemId> {
    let mut counts = personal_counts(history);
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    counts.into_iter().map(|(i, _)| i).collect()
}

/// Every catalog item ranked by global count, ties by index.
pub fn global_ranking(global_counts: &[u64]) -> Vec<ItemId> {
    let mut items: Vec<ItemId> = (0..global_counts.len() as ItemId).collect();
    items.sort_by(|&a, &b| {
        global_counts[b as usize]
            .cmp(&global_counts[a as usize])
            .then(a.cmp(&b))
    });
    items
}

/// [`p_pop`] followed by the user's unpurchased items in global order.
pub fn gp_pop(history: &[Basket], global_order: &[ItemId]) -> Vec<ItemId> {
    let mut ranked = p_pop(history);
    let mut taken = vec![false; global_order.len()];
    for &i in &ranked {
        taken[i as usize] = true;
    }
    ranked.extend(global_order.iter().filter(|&&i| !taken[i as usize]));
    ranked
}

/// Appends items missing from `ranked` in ascending index order.
fn complete(mut ranked: Vec<ItemId>, n_items: usize) -> Vec<ItemId> {
    let mut taken = vec![false; n_items];
    for &i in &ranked {
        taken[i as usize] = true;
    }
    ranked.extend((0..n_items as ItemId).filter(|&i| !taken[i as usize]));
    ranked
}

/// P-Pop as a full-catalog recommender; unpurchased items follow by index.
#[derive(Debug, Clone, Copy, Default)]
pub struct PPop;

impl Recommender for PPop {
    fn name(&self) -> String {
        "P-Pop".into()
    }

    fn rank(&self, ds: &BasketDataset, users: &[usize]) -> Result<Vec<Vec<ItemId>>, String> {
        Ok(users
            .iter()
            .map(|&u| complete(p_pop(ds.input_baskets(u)), ds.n_items()))
            .collect())
    }
}

/// GP-Pop with global counts taken over every user's input baskets.
#[derive(Debug, Clone, Copy, Default)]
pub struct GpPop;

impl Recommender for GpPop {
    fn name(&self) -> String {
        "GP-Pop".into()
    }

    fn rank(&self, ds: &BasketDataset, users: &[usize]) -> Result<Vec<Vec<ItemId>>, String> {
        let global = global_ranking(&ds.input_item_counts());
        Ok(users.iter().map(|&u| gp_pop(ds.input_baskets(u), &global)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{fixed_basket_dataset, generate_dataset, FixtureConfig};
    use crate::metrics::{evaluate_users, recall_at_k, Metric};

    #[test]
    fn p_pop_orders_by_count_then_index() {
        assert_eq!(p_pop(&[vec![0], vec![0], vec![1]]), vec![0, 1]);
        assert_eq!(p_pop(&[vec![0, 1]]), vec![0, 1]);
        assert_eq!(p_pop(&[vec![3], vec![1, 3], vec![1, 2]]), vec![1, 3, 2]);
    }

    #[test]
    fn gp_pop_fills_with_global_order() {
        // items a=0, b=1, c=2; global order c, b, a
        let global = global_ranking(&[1, 5, 9]);
        assert_eq!(global, vec![2, 1, 0]);
        assert_eq!(gp_pop(&[vec![0]], &global), vec![0, 2, 1]);
        assert_eq!(gp_pop(&[], &global), global);
    }

    #[test]
    fn repeated_fixed_basket_is_recalled_perfectly() {
        let ds = fixed_basket_dataset(20, 50, 6, 4, 1);
        let users: Vec<usize> = (0..20).collect();
        for rec in [&PPop as &dyn Recommender, &GpPop] {
            let r = evaluate_users(rec, &ds, &users, &[6, 10]).unwrap();
            assert_eq!(r.mean(Metric::Recall, 6), Some(1.0));
        }
    }

    #[test]
    fn gp_pop_recall_dominates_personal_list_per_user() {
        let ds = generate_dataset(&FixtureConfig {
            n_users: 150,
            ..FixtureConfig::default()
        });
        let global = global_ranking(&ds.input_item_counts());
        for u in 0..ds.n_users() {
            let truth = ds.target_basket(u).unwrap();
            let personal = p_pop(ds.input_baskets(u));
            let filled = gp_pop(ds.input_baskets(u), &global);
            let rp = recall_at_k(&personal, truth, 100).unwrap();
            let rg = recall_at_k(&filled, truth, 100).unwrap();
            assert!(rg >= rp, "user {u}: {rg} < {rp}");
        }
        let users: Vec<usize> = (0..ds.n_users()).collect();
        let p = evaluate_users(&PPop, &ds, &users, &[100]).unwrap();
        let g = evaluate_users(&GpPop, &ds, &users, &[100]).unwrap();
        assert!(g.mean(Metric::Recall, 100).unwrap() >= p.mean(Metric::Recall, 100).unwrap());
    }
}
