use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

const MAX_COLD_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: usize,
    /// Fold index of every interaction, in dataset order.
    pub assignment: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// `(train, test)` positions for held-out fold `fold`.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignment.len()).partition(|&i| self.assignment[i] != fold)
    }
}

/// Shuffles `n` positions and deals them round-robin into `folds` folds.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if folds > n {
        return Err(Error::Argument(format!(
            "{folds} folds for {n} interactions"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % folds;
    }
    Ok(FoldAssignment { folds, assignment })
}

/// Cold entities plus a partition of the interaction positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColdStartScenario {
    pub cold_users: Vec<usize>,
    pub cold_items: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ColdStartScenario {
    pub fn is_cold_user(&self, user: usize) -> bool {
        self.cold_users.binary_search(&user).is_ok()
    }

    pub fn is_cold_item(&self, item: usize) -> bool {
        self.cold_items.binary_search(&item).is_ok()
    }
}

fn check_fraction(f: f64, what: &str) -> Result<()> {
    if !(0.0..=0.9).contains(&f) {
        return Err(Error::Argument(format!(
            "{what} fraction {f} outside [0, 0.9]"
        )));
    }
    Ok(())
}

/// Samples `floor(fraction · n)` of `0..n`, resampling until every chosen
/// entity has at least one interaction.
fn sample_cold(
    n: usize,
    fraction: f64,
    counts: &[usize],
    rng: &mut crate::numerics::SeededRng,
    what: &str,
) -> Result<Vec<usize>> {
    let take = (fraction * n as f64).floor() as usize;
    if take == 0 {
        return Ok(Vec::new());
    }
    let all: Vec<usize> = (0..n).collect();
    for _ in 0..MAX_COLD_ATTEMPTS {
        let mut chosen: Vec<usize> = all.choose_multiple(rng, take).copied().collect();
        if chosen.iter().all(|&e| counts[e] > 0) {
            chosen.sort_unstable();
            return Ok(chosen);
        }
    }
    Err(Error::Scenario(format!(
        "no {what} set of size {take} without an interaction-free entity after {MAX_COLD_ATTEMPTS} attempts"
    )))
}

/// Cold sets plus the warm interaction positions (those touching no cold entity).
fn cold_sets(
    dataset: &Dataset,
    user_fraction: f64,
    item_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> {
    check_fraction(user_fraction, "cold-user")?;
    check_fraction(item_fraction, "cold-item")?;
    let mut user_counts = vec![0; dataset.num_users()];
    let mut item_counts = vec![0; dataset.num_items()];
    for it in &dataset.interactions {
        user_counts[it.user] += 1;
        item_counts[it.item] += 1;
    }
    let mut rng = seeded_rng(seed);
    let cold_users = sample_cold(
        dataset.num_users(),
        user_fraction,
        &user_counts,
        &mut rng,
        "cold-user",
    )?;
    let cold_items = sample_cold(
        dataset.num_items(),
        item_fraction,
        &item_counts,
        &mut rng,
        "cold-item",
    )?;
    let (cold, warm): (Vec<usize>, Vec<usize>) = (0..dataset.interactions.len()).partition(|&i| {
        let it = &dataset.interactions[i];
        cold_users.binary_search(&it.user).is_ok() || cold_items.binary_search(&it.item).is_ok()
    });
    Ok((cold_users, cold_items, cold, warm))
}

/// Moves every interaction of sampled cold users/items to test and splits
/// the rest 80/20.
pub fn build_cold_start_scenario(
    dataset: &Dataset,
    cold_user_fraction: f64,
    cold_item_fraction: f64,
    seed: u64,
) -> Result<ColdStartScenario> {
    let (cold_users, cold_items, mut test, mut warm) =
        cold_sets(dataset, cold_user_fraction, cold_item_fraction, seed)?;
    warm.shuffle(&mut seeded_rng(crate::numerics::derive_seed(seed, 1)));
    let n_train = (warm.len() as f64 * 0.8).round() as usize;
    test.extend_from_slice(&warm[n_train..]);
    warm.truncate(n_train);
    warm.sort_unstable();
    test.sort_unstable();
    Ok(ColdStartScenario {
        cold_users,
        cold_items,
        train: warm,
        test,
    })
}

/// One scenario per fold: the cold sets are drawn once, warm interactions
/// are dealt into `folds` folds, and fold `f` plus every cold interaction
/// forms the test split.
pub fn cross_validation_scenarios(
    dataset: &Dataset,
    cold_user_fraction: f64,
    cold_item_fraction: f64,
    folds: usize,
    seed: u64,
) -> Result<Vec<ColdStartScenario>> {
    let (cold_users, cold_items, cold, warm) =
        cold_sets(dataset, cold_user_fraction, cold_item_fraction, seed)?;
    let assignment = kfold_split(warm.len(), folds, crate::numerics::derive_seed(seed, 1))?;
    Ok((0..folds)
        .map(|f| {
            let (train, held) = assignment.split(f);
            let train: Vec<usize> = train.into_iter().map(|p| warm[p]).collect();
            let mut test: Vec<usize> = held
                .into_iter()
                .map(|p| warm[p])
                .chain(cold.iter().copied())
                .collect();
            test.sort_unstable();
            ColdStartScenario {
                cold_users: cold_users.clone(),
                cold_items: cold_items.clone(),
                train,
                test,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::{synth_generate, SynthSpec};
    use super::*;
    use proptest::prelude::*;

    fn bench() -> Dataset {
        synth_generate(&SynthSpec {
            users: 200,
            items: 300,
            density: 0.02,
            seed: 7,
            ..SynthSpec::default()
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn eighty_two_rows_in_five_folds() {
        let a = kfold_split(82, 5, 1).unwrap();
        let mut sizes = a.fold_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![17, 17, 16, 16, 16]);
    }

    #[test]
    fn leave_one_out_and_errors() {
        assert_eq!(kfold_split(6, 6, 0).unwrap().fold_sizes(), vec![1; 6]);
        assert!(matches!(kfold_split(3, 4, 0), Err(Error::Argument(_))));
        assert!(matches!(kfold_split(3, 1, 0), Err(Error::Argument(_))));
        assert_eq!(
            kfold_split(50, 3, 9).unwrap(),
            kfold_split(50, 3, 9).unwrap()
        );
    }

    #[test]
    fn thirty_percent_of_200_users_are_cold() {
        let d = bench();
        let s = build_cold_start_scenario(&d, 0.3, 0.0, 11).unwrap();
        assert_eq!(s.cold_users.len(), 60);
        for &i in &s.train {
            assert!(!s.is_cold_user(d.interactions[i].user));
        }
        for &u in &s.cold_users {
            assert!(s.test.iter().any(|&i| d.interactions[i].user == u));
        }
    }

    #[test]
    fn zero_fractions_give_plain_split() {
        let d = bench();
        let s = build_cold_start_scenario(&d, 0.0, 0.0, 2).unwrap();
        assert!(s.cold_users.is_empty() && s.cold_items.is_empty());
        let n = d.interactions.len();
        assert_eq!(s.train.len(), (n as f64 * 0.8).round() as usize);
    }

    #[test]
    fn bad_fraction_is_rejected() {
        assert!(matches!(
            build_cold_start_scenario(&bench(), 0.95, 0.0, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn cross_validation_keeps_cold_users_in_every_test_split() {
        let d = bench();
        let scenarios = cross_validation_scenarios(&d, 0.3, 0.0, 3, 5).unwrap();
        assert_eq!(scenarios.len(), 3);
        let mut warm_tests = 0;
        for s in &scenarios {
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..d.interactions.len()).collect::<Vec<_>>());
            warm_tests += s
                .test
                .iter()
                .filter(|&&i| !s.is_cold_user(d.interactions[i].user))
                .count();
        }
        let warm_total = scenarios[0].train.len()
            + scenarios[0]
                .test
                .iter()
                .filter(|&&i| !scenarios[0].is_cold_user(d.interactions[i].user))
                .count();
        assert_eq!(warm_tests, warm_total);
    }

    proptest! {
        #[test]
        fn folds_partition_and_balance(n in 2usize..300, f in 2usize..10, seed in any::<u64>()) {
            prop_assume!(f <= n);
            let a = kfold_split(n, f, seed).unwrap();
            let sizes = a.fold_sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn scenario_is_exact_partition(seed in any::<u64>(), uf in 0.0f64..0.9, itf in 0.0f64..0.5) {
            let d = synth_generate(&SynthSpec { users: 30, items: 40, density: 0.3, seed: 1, ..SynthSpec::default() }).unwrap().dataset;
            let s = build_cold_start_scenario(&d, uf, itf, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..d.interactions.len()).collect::<Vec<_>>());
            for &i in &s.train {
                let it = d.interactions[i];
                prop_assert!(!s.is_cold_user(it.user) && !s.is_cold_item(it.item));
            }
        }
    }
}
