//! Seeded, class-stratified train/test assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::patches::Split;

/// Assigns `round(n_c * train_fraction)` items of every class to train.
/// `items_per_class[c]` lists item ids; the result maps id to split.
pub fn stratified(items_per_class: &[Vec<usize>], train_fraction: f64, seed: u64) -> Vec<(usize, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for items in items_per_class {
        let mut ids = items.clone();
        ids.shuffle(&mut rng);
        let n_train = (items.len() as f64 * train_fraction).round() as usize;
        out.extend(ids.iter().enumerate().map(|(i, &id)| (id, if i < n_train { Split::Train } else { Split::Test })));
    }
    out.sort_unstable_by_key(|&(id, _)| id);
    out
}

/// Half/half split with exactly `ceil(n / 2)` train items overall: each class
/// contributes `floor(n_c / 2)` and leftover slots go to odd classes in a
/// seeded order.
pub fn half_half(items_per_class: &[Vec<usize>], seed: u64) -> Vec<(usize, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = items_per_class.iter().map(Vec::len).sum();
    let mut quota: Vec<usize> = items_per_class.iter().map(|v| v.len() / 2).collect();
    let mut odd: Vec<usize> = (0..items_per_class.len()).filter(|&c| items_per_class[c].len() % 2 == 1).collect();
    odd.shuffle(&mut rng);
    let missing = total.div_ceil(2) - quota.iter().sum::<usize>();
    for &c in odd.iter().take(missing) {
        quota[c] += 1;
    }
    let mut out = Vec::new();
    for (items, &q) in items_per_class.iter().zip(&quota) {
        let mut ids = items.clone();
        ids.shuffle(&mut rng);
        out.extend(ids.iter().enumerate().map(|(i, &id)| (id, if i < q { Split::Train } else { Split::Test })));
    }
    out.sort_unstable_by_key(|&(id, _)| id);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(sizes: &[usize]) -> Vec<Vec<usize>> {
        let mut next = 0;
        sizes
            .iter()
            .map(|&n| {
                let v = (next..next + n).collect();
                next += n;
                v
            })
            .collect()
    }

    fn train_count(s: &[(usize, Split)]) -> usize {
        s.iter().filter(|x| x.1 == Split::Train).count()
    }

    #[test]
    fn stratified_counts() {
        let s = stratified(&classes(&[40, 40]), 0.75, 1);
        assert_eq!(s.len(), 80);
        assert_eq!(train_count(&s[..40]), 30);
        assert_eq!(train_count(&s[40..]), 30);
        assert_eq!(s, stratified(&classes(&[40, 40]), 0.75, 1));
        assert_eq!(train_count(&stratified(&classes(&[7, 3]), 1.0, 2)), 10);
    }

    #[test]
    fn half_half_rounds_up_overall() {
        for sizes in [[494usize, 286], [5, 7], [3, 4], [1, 1]] {
            let s = half_half(&classes(&sizes), 9);
            let n: usize = sizes.iter().sum();
            assert_eq!(train_count(&s), n.div_ceil(2));
        }
    }
}
