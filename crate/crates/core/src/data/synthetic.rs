//! Seeded synthetic purchase logs standing in for the public datasets.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Basket, BasketDataset, Transaction};

/// Repeat-heavy generator. Each user owns a weighted set of favorite items;
/// every basket slot repeats a favorite with probability `repeat_prob` and
/// otherwise draws from a popularity-skewed global catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub repeat_prob: f64,
    /// Per-basket probability that one favorite is replaced by a random item.
    pub drift: f64,
    pub min_baskets: usize,
    pub max_baskets: usize,
    pub min_basket_size: usize,
    pub max_basket_size: usize,
    pub favorites_per_user: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 200,
            repeat_prob: 0.8,
            drift: 0.05,
            min_baskets: 4,
            max_baskets: 12,
            min_basket_size: 2,
            max_basket_size: 6,
            favorites_per_user: 8,
            seed: 0,
        }
    }
}

/// Zipf-like weights `1 / (rank + 1)`.
fn zipf(n: usize) -> Vec<f64> {
    (0..n).map(|r| 1.0 / (r as f64 + 1.0)).collect()
}

fn draw(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let x = rng.random::<f64>() * cumulative[cumulative.len() - 1];
    cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1)
}

fn cumsum(w: &[f64]) -> Vec<f64> {
    w.iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Dense basket histories for `cfg`; baskets are sorted and deduplicated.
pub fn generate_histories(cfg: &FixtureConfig) -> Vec<Vec<Basket>> {
    assert!(cfg.n_items >= 1 && cfg.min_baskets >= 1 && cfg.min_baskets <= cfg.max_baskets);
    assert!(cfg.min_basket_size >= 1 && cfg.min_basket_size <= cfg.max_basket_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Popularity rank is a random permutation so item index carries no signal.
    let mut by_rank: Vec<usize> = (0..cfg.n_items).collect();
    by_rank.shuffle(&mut rng);
    let global = cumsum(&zipf(cfg.n_items));
    let n_fav = cfg.favorites_per_user.clamp(1, cfg.n_items);
    let fav_weights = cumsum(&zipf(n_fav));

    (0..cfg.n_users)
        .map(|_| {
            let mut favorites: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.n_items, n_fav).into_vec();
            let n_baskets = rng.random_range(cfg.min_baskets..=cfg.max_baskets);
            (0..n_baskets)
                .map(|_| {
                    if rng.random::<f64>() < cfg.drift {
                        let slot = rng.random_range(0..n_fav);
                        favorites[slot] = rng.random_range(0..cfg.n_items);
                    }
                    let size = rng.random_range(cfg.min_basket_size..=cfg.max_basket_size);
                    let mut basket: Basket = (0..size)
                        .map(|_| {
                            let item = if rng.random::<f64>() < cfg.repeat_prob {
                                favorites[draw(&mut rng, &fav_weights)]
                            } else {
                                by_rank[draw(&mut rng, &global)]
                            };
                            item as u32
                        })
                        .collect();
                    basket.sort_unstable();
                    basket.dedup();
                    basket
                })
                .collect()
        })
        .collect()
}

/// Raw transaction rows for `cfg`, one basket per simulated day.
pub fn generate_transactions(cfg: &FixtureConfig) -> Vec<Transaction> {
    let mut out = Vec::new();
    for (u, history) in generate_histories(cfg).iter().enumerate() {
        for (k, basket) in history.iter().enumerate() {
            for &i in basket {
                out.push(Transaction {
                    user_id: format!("u{u}"),
                    item_id: format!("i{i}"),
                    basket_key: format!("{k:04}"),
                    timestamp: k as i64 * 86_400,
                });
            }
        }
    }
    out
}

/// Dataset built straight from `generate_histories`, with no filtering.
pub fn generate_dataset(cfg: &FixtureConfig) -> BasketDataset {
    BasketDataset::from_histories(cfg.n_items, generate_histories(cfg)).expect("generator emits valid ids")
}

/// Every user buys the same random basket of `basket_size` items
/// `n_baskets` times.
pub fn fixed_basket_dataset(
    n_users: usize,
    n_items: usize,
    basket_size: usize,
    n_baskets: usize,
    seed: u64,
) -> BasketDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let histories = (0..n_users)
        .map(|_| {
            let basket: Basket = rand::seq::index::sample(&mut rng, n_items, basket_size)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            vec![basket; n_baskets]
        })
        .collect();
    BasketDataset::from_histories(n_items, histories).expect("generator emits valid ids")
}

/// Each user has one core item present in every basket; earlier baskets add
/// `noise` one-off items, and the final basket is the core item alone. The
/// next basket is therefore exactly the most frequent past item.
pub fn frequency_dataset(n_users: usize, n_items: usize, n_baskets: usize, noise: usize, seed: u64) -> BasketDataset {
    assert!(n_baskets >= 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<u32> = (0..n_items as u32).collect();
    let histories = (0..n_users)
        .map(|_| {
            let core = *all.choose(&mut rng).unwrap();
            let mut history: Vec<Basket> = (0..n_baskets - 1)
                .map(|_| {
                    let mut b = vec![core];
                    while b.len() < noise + 1 {
                        let i = rng.random_range(0..n_items as u32);
                        if !b.contains(&i) {
                            b.push(i);
                        }
                    }
                    b
                })
                .collect();
            history.push(vec![core]);
            history
        })
        .collect();
    BasketDataset::from_histories(n_items, histories).expect("generator emits valid ids")
}
