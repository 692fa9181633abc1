use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{HybridModel, Source};
use super::{Features, Head};
use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::numerics::{
    derive_seed, optimizer_step, seeded_rng, sigmoid, zero, zeros_like, OptimizerConfig,
    OptimizerState, Parameters,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Weighted squared error on normalized ratings.
    #[default]
    Explicit,
    /// Weighted binary cross-entropy with sampled negatives.
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub negatives: usize,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            negatives: 4,
            objective: Objective::Explicit,
        }
    }
}

/// One side of a training pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Entity(usize),
    /// Fused features fed straight to the tower (generated samples).
    Fused(Vec<f64>),
}

impl Endpoint {
    fn source(&self) -> Source<'_> {
        match self {
            Endpoint::Entity(i) => Source::Entity(*i),
            Endpoint::Fused(v) => Source::Fused(v),
        }
    }
}

/// Extra weighted example, typically a pseudo-labelled generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub user: Endpoint,
    pub item: Endpoint,
    pub target: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    /// Mean weighted loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Positives whose user had already observed every item.
    pub skipped_negatives: usize,
}

#[derive(Clone, Copy)]
struct Example<'a> {
    user: Source<'a>,
    item: Source<'a>,
    target: f64,
    weight: f64,
}

fn example_loss(
    model: &HybridModel,
    objective: Objective,
    logit: f64,
    output: f64,
    target: f64,
) -> (f64, f64) {
    match objective {
        Objective::Implicit => {
            let p = sigmoid(logit);
            let eps = 1e-12;
            let loss = -(target * (p + eps).ln() + (1.0 - target) * (1.0 - p + eps).ln());
            (loss, p - target)
        }
        Objective::Explicit => {
            let diff = output - target;
            let slope = match &model.head {
                Head::Mf { .. } => 1.0,
                Head::NeuMf(h) => h.sigma.derivative(logit, output),
            };
            (diff * diff, 2.0 * diff * slope)
        }
    }
}

/// Uniform draw over the items `user` has not interacted with. The caller
/// guarantees at least one such item exists.
fn sample_negative(
    rng: &mut impl Rng,
    user: usize,
    items: usize,
    positives: &HashSet<(usize, usize)>,
) -> usize {
    loop {
        let j = rng.random_range(0..items);
        if !positives.contains(&(user, j)) {
            return j;
        }
    }
}

/// Mini-batch training. Pseudo-samples are spread evenly over the batches
/// of real examples, in an order drawn from their own RNG stream, so the
/// real batches do not depend on them. Gradients are normalized by the
/// batch weight sum and zero-weight examples are skipped entirely.
pub fn train_model(
    model: &mut HybridModel,
    features: &Features,
    train: &[Interaction],
    pseudo: &[TrainSample],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Argument("empty train set".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for s in pseudo {
        if !(0.0..=1.0).contains(&s.weight) || !s.target.is_finite() {
            return Err(Error::Argument(format!(
                "sample weight {} or target {} out of range",
                s.weight, s.target
            )));
        }
    }
    let (nu, ni) = (model.num_users(), model.num_items());
    for it in train {
        if it.user >= nu {
            return Err(Error::UnknownEntity {
                kind: "user",
                id: it.user.to_string(),
            });
        }
        if it.item >= ni {
            return Err(Error::UnknownEntity {
                kind: "item",
                id: it.item.to_string(),
            });
        }
        model.user.seen[it.user] = true;
        model.item.seen[it.item] = true;
    }

    let positives: HashSet<(usize, usize)> = train.iter().map(|it| (it.user, it.item)).collect();
    let mut observed = vec![0usize; nu];
    for &(u, _) in &positives {
        observed[u] += 1;
    }

    let mut rng = seeded_rng(derive_seed(seed, 1));
    let mut pseudo_rng = seeded_rng(derive_seed(seed, 2));
    let mut state = OptimizerState::new(config.optimizer, &*model);
    let mut grads = zeros_like(&*model);
    let mut report = TrainReport::default();

    for _ in 0..config.epochs {
        let mut real: Vec<Example<'_>> = Vec::with_capacity(train.len() * (1 + config.negatives));
        for it in train {
            real.push(Example {
                user: Source::Entity(it.user),
                item: Source::Entity(it.item),
                target: it.rating,
                weight: 1.0,
            });
            if config.objective == Objective::Implicit && config.negatives > 0 {
                if observed[it.user] >= ni {
                    report.skipped_negatives += 1;
                    continue;
                }
                for _ in 0..config.negatives {
                    let j = sample_negative(&mut rng, it.user, ni, &positives);
                    real.push(Example {
                        user: Source::Entity(it.user),
                        item: Source::Entity(j),
                        target: 0.0,
                        weight: 1.0,
                    });
                }
            }
        }
        real.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..pseudo.len()).collect();
        order.shuffle(&mut pseudo_rng);

        let batches = real.len().div_ceil(config.batch_size);
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        for b in 0..batches {
            let lo = b * config.batch_size;
            let hi = (lo + config.batch_size).min(real.len());
            let plo = b * order.len() / batches;
            let phi = (b + 1) * order.len() / batches;
            let extra = order[plo..phi].iter().map(|&k| {
                let s = &pseudo[k];
                Example {
                    user: s.user.source(),
                    item: s.item.source(),
                    target: s.target,
                    weight: s.weight,
                }
            });
            zero(&mut grads);
            let mut batch_weight = 0.0;
            let mut batch_loss = 0.0;
            for ex in real[lo..hi].iter().copied().chain(extra) {
                if ex.weight == 0.0 {
                    continue;
                }
                let cache = model.forward(features, ex.user, ex.item)?;
                let (loss, d_logit) = example_loss(
                    model,
                    config.objective,
                    cache.logit,
                    cache.output,
                    ex.target,
                );
                model.backward_into(&cache, ex.weight * d_logit, &mut grads)?;
                batch_loss += ex.weight * loss;
                batch_weight += ex.weight;
            }
            if batch_weight == 0.0 {
                continue;
            }
            let scale = 1.0 / batch_weight;
            for t in grads.tensors_mut() {
                t.iter_mut().for_each(|g| *g *= scale);
            }
            optimizer_step(model, &grads, &mut state)?;
            epoch_loss += batch_loss;
            epoch_weight += batch_weight;
        }
        let mean = epoch_loss / epoch_weight;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("training loss became {mean}")));
        }
        report.loss_trace.push(mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::recsys::model::tests::small_features;
    use crate::recsys::{HeadKind, ModelConfig};
    use proptest::prelude::*;

    fn setup(head: HeadKind) -> (HybridModel, Features, Vec<Interaction>) {
        let (f, ds) = small_features(true);
        let cfg = ModelConfig {
            head,
            embedding_dim: 4,
            mlp_hidden: vec![8],
            ..ModelConfig::default()
        };
        let m = HybridModel::new(
            &cfg,
            &FusionConfig {
                projection_dim: 6,
                ..FusionConfig::default()
            },
            &f,
            &mut seeded_rng(3),
        )
        .unwrap();
        (m, f, ds.interactions)
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (mut m, f, train) = setup(HeadKind::NeuMf);
        let before = m.flatten();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let r = train_model(&mut m, &f, &train, &[], &cfg, 1).unwrap();
        assert!(r.loss_trace.is_empty());
        assert_eq!(m.flatten(), before);
    }

    #[test]
    fn empty_train_set_is_rejected() {
        let (mut m, f, _) = setup(HeadKind::Mf);
        assert!(matches!(
            train_model(&mut m, &f, &[], &[], &TrainConfig::default(), 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn loss_decreases_for_both_objectives() {
        for objective in [Objective::Explicit, Objective::Implicit] {
            for head in [HeadKind::NeuMf, HeadKind::Mf] {
                let (mut m, f, train) = setup(head);
                let cfg = TrainConfig {
                    objective,
                    batch_size: 4,
                    optimizer: OptimizerConfig {
                        learning_rate: 0.01,
                        ..OptimizerConfig::default()
                    },
                    ..TrainConfig::default()
                };
                let r = train_model(&mut m, &f, &train, &[], &cfg, 9).unwrap();
                assert_eq!(r.loss_trace.len(), 10);
                assert!(
                    r.loss_trace[9] < r.loss_trace[0],
                    "{objective:?} {head:?} {:?}",
                    r.loss_trace
                );
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let run = |seed| {
            let (mut m, f, train) = setup(HeadKind::NeuMf);
            let cfg = TrainConfig {
                objective: Objective::Implicit,
                epochs: 3,
                ..TrainConfig::default()
            };
            train_model(&mut m, &f, &train, &[], &cfg, seed).unwrap();
            m.flatten()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn zero_weight_pseudo_samples_are_inert() {
        let (m0, f, train) = setup(HeadKind::NeuMf);
        let dim = m0.fused_dim(crate::embeddings::EntityKind::Item).unwrap();
        let pseudo: Vec<TrainSample> = (0..7)
            .map(|k| TrainSample {
                user: Endpoint::Entity(k % 6),
                item: Endpoint::Fused((0..dim).map(|j| (j + k) as f64 * 0.01).collect()),
                target: 0.8,
                weight: 0.0,
            })
            .collect();
        let cfg = TrainConfig {
            objective: Objective::Implicit,
            epochs: 3,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let mut a = m0.clone();
        let mut b = m0.clone();
        train_model(&mut a, &f, &train, &[], &cfg, 11).unwrap();
        train_model(&mut b, &f, &train, &pseudo, &cfg, 11).unwrap();
        let (fa, fb) = (a.flatten(), b.flatten());
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut c = m0.clone();
        let weighted: Vec<TrainSample> = pseudo
            .into_iter()
            .map(|s| TrainSample { weight: 0.5, ..s })
            .collect();
        train_model(&mut c, &f, &train, &weighted, &cfg, 11).unwrap();
        assert_ne!(c.flatten(), fa);
    }

    #[test]
    fn negatives_skip_users_who_saw_everything() {
        let (mut m, f, _) = setup(HeadKind::Mf);
        let train: Vec<Interaction> = (0..5)
            .map(|i| Interaction {
                user: 0,
                item: i,
                rating: 1.0,
                timestamp: None,
            })
            .chain([Interaction {
                user: 1,
                item: 2,
                rating: 1.0,
                timestamp: None,
            }])
            .collect();
        let cfg = TrainConfig {
            objective: Objective::Implicit,
            epochs: 2,
            ..TrainConfig::default()
        };
        let r = train_model(&mut m, &f, &train, &[], &cfg, 1).unwrap();
        assert_eq!(r.skipped_negatives, 10);
    }

    proptest! {
        #[test]
        fn negatives_are_never_training_positives(
            pairs in proptest::collection::vec((0usize..4, 0usize..6), 1..20),
            seed in any::<u64>(),
        ) {
            let positives: HashSet<(usize, usize)> = pairs.iter().copied().collect();
            let mut rng = seeded_rng(seed);
            for u in 0..4 {
                if positives.iter().filter(|p| p.0 == u).count() == 6 {
                    continue;
                }
                for _ in 0..20 {
                    let j = sample_negative(&mut rng, u, 6, &positives);
                    prop_assert!(!positives.contains(&(u, j)));
                }
            }
        }
    }
}
