use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::BasketDataset;

/// Leave-one-basket user split: every user's last basket is held out, and
/// users are divided between validation and test.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SplitSpec {
    pub seed: u64,
    /// Sorted ascending.
    pub validation_users: Vec<usize>,
    /// Sorted ascending.
    pub test_users: Vec<usize>,
}

/// Seeded uniform shuffle of user indices; the first `n / 2` become
/// validation users and the rest test users.
pub fn split_leave_one_basket(ds: &BasketDataset, seed: u64) -> SplitSpec {
    let mut users: Vec<usize> = (0..ds.n_users()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users.shuffle(&mut rng);
    let half = users.len() / 2;
    let mut validation_users = users[..half].to_vec();
    let mut test_users = users[half..].to_vec();
    validation_users.sort_unstable();
    test_users.sort_unstable();
    SplitSpec {
        seed,
        validation_users,
        test_users,
    }
}

impl SplitSpec {
    /// Canonical text form: seed line, then one line per set.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "seed={}\nvalidation={}\ntest={}\n",
            self.seed,
            join(&self.validation_users),
            join(&self.test_users)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn ds(n: usize) -> BasketDataset {
        BasketDataset::from_histories(1, vec![vec![vec![0], vec![0]]; n]).unwrap()
    }

    #[test]
    fn four_users_split_two_and_two() {
        let s = split_leave_one_basket(&ds(4), 9);
        assert_eq!((s.validation_users.len(), s.test_users.len()), (2, 2));
        let v: BTreeSet<_> = s.validation_users.iter().collect();
        assert!(s.test_users.iter().all(|u| !v.contains(u)));
    }

    #[test]
    fn same_seed_same_split() {
        let a = split_leave_one_basket(&ds(50), 3);
        let b = split_leave_one_basket(&ds(50), 3);
        assert_eq!(a.to_text(), b.to_text());
        assert_ne!(a, split_leave_one_basket(&ds(50), 4));
    }

    #[test]
    fn odd_user_count() {
        let s = split_leave_one_basket(&ds(5), 0);
        let sizes = (s.validation_users.len(), s.test_users.len());
        assert!(sizes == (2, 3) || sizes == (3, 2));
        let all: BTreeSet<_> = s.validation_users.iter().chain(&s.test_users).copied().collect();
        assert_eq!(all, (0..5).collect());
    }
}
