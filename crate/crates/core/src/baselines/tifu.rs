use rayon::prelude::*;

use crate::data::{Basket, BasketDataset, ItemId};
use crate::metrics::Recommender;
use crate::model::rank_scores;

#[derive(Debug, Clone, PartialEq)]
pub struct TifuConfig {
    /// Neighbours; clipped to `n_users - 1`.
    pub k: usize,
    /// Groups; clipped to the history length.
    pub m: usize,
    pub r_b: f64,
    pub r_g: f64,
    pub alpha: f64,
    /// Most recent baskets used for the PIF; `None` uses all input baskets.
    pub window: Option<usize>,
}

impl Default for TifuConfig {
    fn default() -> Self {
        Self {
            k: 300,
            m: 7,
            r_b: 0.9,
            r_g: 0.7,
            alpha: 0.7,
            window: None,
        }
    }
}

impl TifuConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k < 1 || self.m < 1 {
            return Err(format!("k={} and m={} must be >= 1", self.k, self.m));
        }
        for (name, r) in [("r_b", self.r_b), ("r_g", self.r_g)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(format!("{name}={r} outside (0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha={} outside [0, 1]", self.alpha));
        }
        if self.window == Some(0) {
            return Err("window must be >= 1".into());
        }
        Ok(())
    }
}

/// Sparse personalized item frequency, sorted by item, strictly positive.
pub type Pif = Vec<(ItemId, f64)>;

/// Splits `history` (oldest first) into `min(m, len)` contiguous groups,
/// earlier groups taking the remainder. Basket `j` of a size-`s` group
/// weighs `r_b^(s-1-j) / s`; group `g` of `m'` weighs `r_g^(m'-1-g) / m'`.
pub fn build_pif(history: &[Basket], cfg: &TifuConfig) -> Pif {
    let l = history.len();
    if l == 0 {
        return Vec::new();
    }
    let m = cfg.m.min(l);
    let (base, rem) = (l / m, l % m);
    let mut acc = std::collections::BTreeMap::<ItemId, f64>::new();
    let mut start = 0;
    for g in 0..m {
        let s = base + usize::from(g < rem);
        let group_w = cfg.r_g.powi((m - 1 - g) as i32) / m as f64;
        for (j, basket) in history[start..start + s].iter().enumerate() {
            let w = group_w * cfg.r_b.powi((s - 1 - j) as i32) / s as f64;
            for &i in basket {
                *acc.entry(i).or_insert(0.0) += w;
            }
        }
        start += s;
    }
    acc.into_iter().filter(|&(_, v)| v > 0.0).collect()
}

/// Squared Euclidean distance, summed in ascending item order.
pub fn pif_distance(a: &Pif, b: &Pif) -> f64 {
    let (mut i, mut j, mut sum) = (0, 0, 0.0);
    while i < a.len() || j < b.len() {
        let d = match (a.get(i), b.get(j)) {
            (Some(&(ia, va)), Some(&(ib, vb))) if ia == ib => {
                i += 1;
                j += 1;
                va - vb
            }
            (Some(&(ia, va)), Some(&(ib, _))) if ia < ib => {
                i += 1;
                va
            }
            (Some(&(_, va)), None) => {
                i += 1;
                va
            }
            (_, Some(&(_, vb))) => {
                j += 1;
                -vb
            }
            (None, None) => unreachable!(),
        };
        sum += d * d;
    }
    sum
}

/// The `k` users nearest to `target` (excluding it), ties by index,
/// returned in ascending index order.
pub fn nearest_neighbors(pifs: &[Pif], target: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..pifs.len())
        .filter(|&v| v != target)
        .map(|v| (pif_distance(&pifs[target], &pifs[v]), v))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = d.into_iter().take(k).map(|(_, v)| v).collect();
    out.sort_unstable();
    out
}

/// Dense `alpha · own + (1 − alpha) · mean(neighbours)` over `n_items`.
pub fn tifu_scores(pifs: &[Pif], target: usize, cfg: &TifuConfig, n_items: usize) -> Vec<f64> {
    let k = cfg.k.min(pifs.len().saturating_sub(1));
    let neighbors = nearest_neighbors(pifs, target, k);
    let mut mean = vec![0.0; n_items];
    for &v in &neighbors {
        for &(i, x) in &pifs[v] {
            mean[i as usize] += x;
        }
    }
    if k > 0 {
        mean.iter_mut().for_each(|x| *x /= k as f64);
    }
    let mut own = vec![0.0; n_items];
    for &(i, x) in &pifs[target] {
        own[i as usize] = x;
    }
    own.iter()
        .zip(&mean)
        .map(|(o, n)| cfg.alpha * o + (1.0 - cfg.alpha) * n)
        .collect()
}

/// Full-catalog ranking of [`tifu_scores`], ties by item index.
pub fn tifu_knn(pifs: &[Pif], target: usize, cfg: &TifuConfig, n_items: usize) -> Vec<ItemId> {
    rank_scores(&tifu_scores(pifs, target, cfg, n_items))
}

#[derive(Debug, Clone, Default)]
pub struct TifuKnn {
    pub config: TifuConfig,
}

impl TifuKnn {
    pub fn new(config: TifuConfig) -> Self {
        Self { config }
    }

    /// PIFs of every user from their (windowed) input baskets.
    pub fn pifs(&self, ds: &BasketDataset) -> Vec<Pif> {
        (0..ds.n_users())
            .into_par_iter()
            .map(|u| {
                let input = ds.input_baskets(u);
                let start = self.config.window.map_or(0, |w| input.len().saturating_sub(w));
                build_pif(&input[start..], &self.config)
            })
            .collect()
    }
}

impl Recommender for TifuKnn {
    fn name(&self) -> String {
        "TIFU-KNN".into()
    }

    fn rank(&self, ds: &BasketDataset, users: &[usize]) -> Result<Vec<Vec<ItemId>>, String> {
        self.config.validate()?;
        let pifs = self.pifs(ds);
        Ok(users
            .par_iter()
            .map(|&u| tifu_knn(&pifs, u, &self.config, ds.n_items()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::p_pop;
    use proptest::prelude::*;

    fn cfg(m: usize, r_b: f64, r_g: f64) -> TifuConfig {
        TifuConfig {
            m,
            r_b,
            r_g,
            ..TifuConfig::default()
        }
    }

    fn dense(p: &Pif, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        for &(i, x) in p {
            v[i as usize] = x;
        }
        v
    }

    #[test]
    fn no_decay_single_group_is_mean_count() {
        let h = vec![vec![0, 1], vec![1], vec![1, 2], vec![0]];
        let p = dense(&build_pif(&h, &cfg(1, 1.0, 1.0)), 3);
        assert_eq!(p, vec![2.0 / 4.0, 3.0 / 4.0, 1.0 / 4.0]);
    }

    #[test]
    fn single_basket_is_its_multi_hot() {
        let p = build_pif(&[vec![2, 5]], &cfg(3, 0.5, 0.5));
        assert_eq!(p, vec![(2, 1.0), (5, 1.0)]);
    }

    #[test]
    fn four_baskets_two_groups_match_direct_sum() {
        let h = vec![vec![0], vec![0, 1], vec![2], vec![1, 2]];
        let p = dense(&build_pif(&h, &cfg(2, 0.9, 0.7)), 3);
        // group 1 = baskets 1, 2 (factor 0.7); group 2 = baskets 3, 4 (factor 1)
        let g1 = |i: u32| (0.9 * h[0].contains(&i) as u8 as f64 + h[1].contains(&i) as u8 as f64) / 2.0;
        let g2 = |i: u32| (0.9 * h[2].contains(&i) as u8 as f64 + h[3].contains(&i) as u8 as f64) / 2.0;
        for i in 0..3u32 {
            let expected = (0.7 * g1(i) + g2(i)) / 2.0;
            assert!((p[i as usize] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn uneven_groups_give_the_remainder_to_earlier_groups() {
        // 5 baskets, 2 groups: sizes 3 and 2
        let h: Vec<Basket> = (0..5).map(|i| vec![i]).collect();
        let p = dense(&build_pif(&h, &cfg(2, 1.0, 1.0)), 5);
        assert_eq!(p, vec![1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.25, 0.25]);
    }

    #[test]
    fn alpha_one_reproduces_p_pop() {
        let hs = [
            vec![vec![3, 1], vec![1], vec![2, 1]],
            vec![vec![0], vec![0, 4]],
            vec![vec![4], vec![3], vec![3, 4]],
        ];
        let c = TifuConfig {
            k: 2,
            m: 1,
            r_b: 1.0,
            r_g: 1.0,
            alpha: 1.0,
            window: None,
        };
        let pifs: Vec<Pif> = hs.iter().map(|h| build_pif(h, &c)).collect();
        for (u, h) in hs.iter().enumerate() {
            let ranked = tifu_knn(&pifs, u, &c, 5);
            let personal = p_pop(h);
            assert_eq!(&ranked[..personal.len()], &personal[..]);
        }
    }

    #[test]
    fn identical_neighbor_leaves_prediction_unchanged() {
        let h = vec![vec![0, 2], vec![2]];
        let other = vec![vec![1], vec![3], vec![4]];
        for alpha in [0.0, 0.3, 1.0] {
            let c = TifuConfig {
                k: 1,
                alpha,
                ..TifuConfig::default()
            };
            let pifs = vec![build_pif(&h, &c), build_pif(&h, &c), build_pif(&other, &c)];
            let s = tifu_scores(&pifs, 0, &c, 5);
            let own = dense(&pifs[0], 5);
            for (a, b) in s.iter().zip(&own) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    fn pif_strategy() -> impl Strategy<Value = Pif> {
        prop::collection::btree_map(0u32..30, 0.01f64..2.0, 0..10).prop_map(|m| m.into_iter().collect())
    }

    proptest! {
        #[test]
        fn sparse_distance_is_bitwise_dense(a in pif_strategy(), b in pif_strategy()) {
            let (da, db) = (dense(&a, 30), dense(&b, 30));
            let d: f64 = da.iter().zip(&db).map(|(x, y)| (x - y) * (x - y)).sum();
            prop_assert_eq!(pif_distance(&a, &b).to_bits(), d.to_bits());
        }

        #[test]
        fn pif_is_equivariant_under_item_relabeling(
            hist in prop::collection::vec(prop::collection::btree_set(0u32..15, 1..5), 1..9),
            seed in any::<u64>(),
        ) {
            let hist: Vec<Basket> = hist.into_iter().map(|b| b.into_iter().collect()).collect();
            let mut perm: Vec<u32> = (0..15).collect();
            perm.sort_by_key(|&i| (i as u64 + 1).wrapping_mul(seed | 1).rotate_left(17));
            let relabeled: Vec<Basket> = hist.iter().map(|b| {
                let mut v: Basket = b.iter().map(|&i| perm[i as usize]).collect();
                v.sort_unstable();
                v
            }).collect();
            let c = cfg(3, 0.8, 0.6);
            let p = dense(&build_pif(&hist, &c), 15);
            let q = dense(&build_pif(&relabeled, &c), 15);
            for i in 0..15 {
                prop_assert_eq!(p[i].to_bits(), q[perm[i] as usize].to_bits());
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TifuConfig::default().validate().is_ok());
        assert!(TifuConfig {
            k: 0,
            ..TifuConfig::default()
        }
        .validate()
        .is_err());
        assert!(TifuConfig {
            r_b: 0.0,
            ..TifuConfig::default()
        }
        .validate()
        .is_err());
        assert!(TifuConfig {
            alpha: 1.5,
            ..TifuConfig::default()
        }
        .validate()
        .is_err());
    }
}
