use crate::apportion::largest_remainder;
use crate::error::{MccError, Result};

/// Per-class prototype budgets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationPlan {
    budgets: Vec<usize>,
    total: usize,
}

impl AllocationPlan {
    /// Wraps explicit budgets, checking they are all positive.
    pub fn from_budgets(budgets: Vec<usize>) -> Result<Self> {
        if budgets.is_empty() || budgets.contains(&0) {
            return Err(MccError::config("every class needs at least one prototype"));
        }
        let total = budgets.iter().sum();
        Ok(AllocationPlan { budgets, total })
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_classes(&self) -> usize {
        self.budgets.len()
    }

    /// Class index of every prototype, prototypes laid out class by class.
    pub fn owners(&self) -> Vec<usize> {
        self.budgets
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
            .collect()
    }
}

/// Real-valued inverse-frequency shares `ŵ_c · K`.
///
/// Zero counts are clamped to one before normalising. Counts are divided by
/// their common divisor first so that scaled count vectors give bit-identical
/// quotas.
pub fn inverse_frequency_quotas(counts: &[usize], k: usize) -> Vec<f64> {
    let clamped: Vec<usize> = counts.iter().map(|&c| c.max(1)).collect();
    let common = clamped.iter().fold(0, |g, &c| gcd(g, c)).max(1);
    let clamped: Vec<f64> = clamped.iter().map(|&c| (c / common) as f64).collect();
    let total: f64 = clamped.iter().sum();
    let weights: Vec<f64> = clamped.iter().map(|&p| total / p).collect();
    let wsum: f64 = weights.iter().sum();
    weights.iter().map(|w| w / wsum * k as f64).collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Splits `k` prototypes across classes in inverse proportion to their
/// frequency.
///
/// Quotas go through largest remainder; a class left with no prototype then
/// takes a seat from the largest class that was rounded up (or, failing
/// that, the largest class). Ties go to the lower index.
pub fn allocate_prototypes(counts: &[usize], k: usize) -> Result<AllocationPlan> {
    let c = counts.len();
    if c == 0 {
        return Err(MccError::config("cannot allocate prototypes for zero classes"));
    }
    if k < c {
        return Err(MccError::config(format!(
            "K = {k} is smaller than the number of classes ({c}); every class needs a prototype"
        )));
    }
    if counts.iter().all(|&n| n == 0) {
        return Err(MccError::config("all class counts are zero"));
    }
    let quotas = inverse_frequency_quotas(counts, k);
    let mut budgets = largest_remainder(&quotas, k);

    while let Some(needy) = budgets.iter().position(|&b| b == 0) {
        let pick = |rounded_up_only: bool| {
            (0..c)
                .filter(|&i| budgets[i] >= 2)
                .filter(|&i| !rounded_up_only || budgets[i] as f64 > quotas[i])
                .max_by(|&a, &b| budgets[a].cmp(&budgets[b]).then(b.cmp(&a)))
        };
        let donor = pick(true).or_else(|| pick(false)).expect("K >= C leaves a donor");
        budgets[donor] -= 1;
        budgets[needy] += 1;
    }
    AllocationPlan::from_budgets(budgets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_counts_split_evenly() {
        let plan = allocate_prototypes(&[10, 10, 10, 10], 8).unwrap();
        assert_eq!(plan.budgets(), &[2, 2, 2, 2]);
    }

    #[test]
    fn worked_example() {
        let quotas = inverse_frequency_quotas(&[50, 30, 20], 10);
        let expected = [1.9355, 3.2258, 4.8387];
        for (q, e) in quotas.iter().zip(expected) {
            assert!((q - e).abs() < 1e-4, "{quotas:?}");
        }
        assert_eq!(allocate_prototypes(&[50, 30, 20], 10).unwrap().budgets(), &[2, 3, 5]);
    }

    #[test]
    fn min_one_rule_keeps_the_frequent_class_alive() {
        assert_eq!(allocate_prototypes(&[1, 1_000_000], 4).unwrap().budgets(), &[3, 1]);
    }

    #[test]
    fn zero_counts_are_clamped() {
        let plan = allocate_prototypes(&[0, 10], 4).unwrap();
        assert_eq!(plan.total(), 4);
        assert!(plan.budgets()[0] > plan.budgets()[1]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(allocate_prototypes(&[1, 2, 3], 2).is_err());
        assert!(allocate_prototypes(&[0, 0], 4).is_err());
        assert!(allocate_prototypes(&[], 4).is_err());
    }

    #[test]
    fn owner_layout() {
        let plan = AllocationPlan::from_budgets(vec![2, 3, 5]).unwrap();
        assert_eq!(plan.owners(), vec![0, 0, 1, 1, 1, 2, 2, 2, 2, 2]);
    }

    proptest! {
        #[test]
        fn budget_is_exact_and_positive(
            counts in prop::collection::vec(0usize..500, 2..20),
            extra in 0usize..300,
        ) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let k = counts.len() + extra;
            let plan = allocate_prototypes(&counts, k).unwrap();
            prop_assert_eq!(plan.budgets().iter().sum::<usize>(), k);
            prop_assert!(plan.budgets().iter().all(|&b| b >= 1));
        }

        #[test]
        fn scaling_counts_leaves_budgets_unchanged(
            counts in prop::collection::vec(1usize..200, 2..12),
            factor in 2usize..50,
            extra in 0usize..100,
        ) {
            let k = counts.len() + extra;
            let scaled: Vec<usize> = counts.iter().map(|c| c * factor).collect();
            prop_assert_eq!(
                allocate_prototypes(&counts, k).unwrap(),
                allocate_prototypes(&scaled, k).unwrap()
            );
        }

        #[test]
        fn rarer_classes_never_get_fewer_beyond_one(
            counts in prop::collection::vec(1usize..1000, 2..15),
            extra in 0usize..200,
        ) {
            let k = counts.len() + extra;
            let plan = allocate_prototypes(&counts, k).unwrap();
            for a in 0..counts.len() {
                for b in 0..counts.len() {
                    if counts[a] < counts[b] {
                        prop_assert!(plan.budgets()[a] + 1 >= plan.budgets()[b]);
                    }
                }
            }
        }
    }
}
