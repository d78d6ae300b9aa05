//! Cross-module properties over random datasets.

use proptest::prelude::*;

use nbrlab::baselines::{build_pif, p_pop, tifu_knn, Pif, TifuConfig, TifuKnn};
use nbrlab::data::{Basket, BasketDataset, ItemId};
use nbrlab::metrics::{ndcg_at_k, recall_at_k, Recommender};
use nbrlab::model::rank_scores;

fn dataset() -> impl Strategy<Value = BasketDataset> {
    let basket = prop::collection::btree_set(0u32..12, 1..4).prop_map(|s| s.into_iter().collect::<Basket>());
    let user = prop::collection::vec(basket, 2..6);
    prop::collection::vec(user, 2..7).prop_map(|h| BasketDataset::from_histories(12, h).unwrap())
}

proptest! {
    #[test]
    fn shifting_scores_leaves_metrics_unchanged(
        scores in prop::collection::vec(-5.0f64..5.0, 20),
        shift in -100.0f64..100.0,
        truth in prop::collection::vec(0u32..20, 1..5),
        k in 1usize..20,
    ) {
        // work on a grid coarse enough that the shift is exact
        let grid: Vec<f64> = scores.iter().map(|s| (s * 8.0).round() / 8.0).collect();
        let shifted: Vec<f64> = grid.iter().map(|s| s + shift.round()).collect();
        let (a, b) = (rank_scores(&grid), rank_scores(&shifted));
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(recall_at_k(&a, &truth, k).unwrap(), recall_at_k(&b, &truth, k).unwrap());
        prop_assert_eq!(ndcg_at_k(&a, &truth, k).unwrap(), ndcg_at_k(&b, &truth, k).unwrap());
    }

    #[test]
    fn tifu_with_alpha_one_ignores_neighbours(ds in dataset(), m in 1usize..4, k in 1usize..6) {
        let cfg = TifuConfig { k, m, r_b: 0.8, r_g: 0.6, alpha: 1.0, window: None };
        let pifs: Vec<Pif> = (0..ds.n_users()).map(|u| build_pif(ds.input_baskets(u), &cfg)).collect();
        for u in 0..ds.n_users() {
            let mut own = vec![0.0; 12];
            for &(i, x) in &pifs[u] {
                own[i as usize] = x;
            }
            prop_assert_eq!(tifu_knn(&pifs, u, &cfg, 12), rank_scores(&own));
        }
    }

    #[test]
    fn baselines_are_deterministic_full_rankings(ds in dataset()) {
        let users: Vec<usize> = (0..ds.n_users()).collect();
        let tifu = TifuKnn::new(TifuConfig { k: 2, ..TifuConfig::default() });
        for rec in [&nbrlab::baselines::PPop as &dyn Recommender, &nbrlab::baselines::GpPop, &tifu] {
            let a = rec.rank(&ds, &users).unwrap();
            prop_assert_eq!(&a, &rec.rank(&ds, &users).unwrap());
            for r in &a {
                let mut sorted: Vec<ItemId> = r.clone();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..12).collect::<Vec<ItemId>>());
            }
        }
        for u in users {
            let personal = p_pop(ds.input_baskets(u));
            let purchased = ds.input_item_set(u);
            prop_assert_eq!(personal.len(), purchased.len());
        }
    }
}
