use std::collections::{BTreeMap, HashSet};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::AblationConfig;
use crate::data::{DataBundle, Dataset, Interaction, RatingScale};
use crate::embeddings::{EmbeddingStore, EntityKind, Modality};
use crate::error::{Error, Result};
use crate::fusion::{fuse_late, FusionConfig, FusionMode};
use crate::metrics::{evaluate, EvalInput, MetricReport, UserRanking};
use crate::numerics::{derive_seed, seeded_rng};
use crate::recsys::{
    rank_top_k, train_model, Endpoint, FeatureTable, Features, HybridModel, Objective, TrainSample,
};
use crate::vae::{
    generate_pseudo_samples, train_vae, ConfidenceRule, PseudoRequest, PseudoSource, VaeParams,
};

/// VAE half of a branch: per-kind VAEs over the teacher's fused vectors and
/// the student trained on their reconstructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeStage {
    pub user: VaeParams,
    pub item: VaeParams,
    pub student: HybridModel,
    pub pseudo_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedBranch {
    pub modalities: Vec<Modality>,
    pub teacher: HybridModel,
    pub vae: Option<VaeStage>,
}

/// A fitted configuration: one branch, or one per modality for late fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommender {
    pub config: AblationConfig,
    pub objective: Objective,
    pub rating_scale: RatingScale,
    pub users: Vec<String>,
    pub items: Vec<String>,
    /// Training pairs, kept so that evaluation never samples them as negatives.
    pub train_pairs: Vec<(String, String)>,
    pub branches: Vec<TrainedBranch>,
}

fn content_modalities(store: &EmbeddingStore) -> Vec<Modality> {
    let items = store.modalities(EntityKind::Item);
    store
        .modalities(EntityKind::User)
        .into_iter()
        .filter(|m| *m != Modality::Side && items.contains(m))
        .collect()
}

fn build_features(
    store: &EmbeddingStore,
    users: &[String],
    items: &[String],
    modalities: &[Modality],
    side: bool,
) -> Result<Features> {
    Ok(Features {
        user: FeatureTable::from_store(store, EntityKind::User, users, modalities, side)?,
        item: FeatureTable::from_store(store, EntityKind::Item, items, modalities, side)?,
    })
}

fn reconstructions(vae: &VaeParams, fused: &[Option<Vec<f64>>]) -> Result<Vec<Option<Vec<f64>>>> {
    fused
        .iter()
        .map(|f| f.as_ref().map(|x| vae.reconstruct(x)).transpose())
        .collect()
}

fn student_features(
    user_vae: &VaeParams,
    item_vae: &VaeParams,
    teacher: &HybridModel,
    features: &Features,
) -> Result<Features> {
    let table = |kind: EntityKind, vae: &VaeParams| -> Result<FeatureTable> {
        let fused = teacher.fused_vectors(features, kind)?;
        FeatureTable::from_vectors(
            Modality::Text,
            vae.input_dim(),
            reconstructions(vae, &fused)?,
        )
    };
    Ok(Features {
        user: table(EntityKind::User, user_vae)?,
        item: table(EntityKind::Item, item_vae)?,
    })
}

fn branch_seed(seed: u64, branch: usize, stage: u64) -> u64 {
    derive_seed(derive_seed(seed, branch as u64 + 1), stage)
}

impl Recommender {
    /// Trains every branch on `train`. Entities in `cold_users` /
    /// `cold_items` receive generated samples when the VAE is on.
    pub fn fit(
        config: &AblationConfig,
        dataset: &Dataset,
        store: &EmbeddingStore,
        train: &[Interaction],
        cold_users: &[usize],
        cold_items: &[usize],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let objective = config.objective_for(dataset);
        let train_cfg = config.train_config(objective);
        let model_cfg = config.model_config();
        let groups: Vec<Vec<Modality>> = if config.content {
            let mods = content_modalities(store);
            if mods.is_empty() {
                return Err(Error::Config(
                    "no modality is present for both users and items".into(),
                ));
            }
            match config.fusion {
                FusionMode::Late => mods.into_iter().map(|m| vec![m]).collect(),
                _ => vec![mods],
            }
        } else {
            vec![Vec::new()]
        };
        let mut fusion = config.fusion_config();
        if fusion.mode == FusionMode::Late {
            fusion.mode = FusionMode::Early;
        }

        let mut branches = Vec::with_capacity(groups.len());
        for (b, modalities) in groups.into_iter().enumerate() {
            let features = if config.content {
                build_features(
                    store,
                    &dataset.users,
                    &dataset.items,
                    &modalities,
                    config.side_features,
                )?
            } else {
                id_only_features(dataset.num_users(), dataset.num_items())
            };
            let mut teacher = HybridModel::new(
                &model_cfg,
                &fusion,
                &features,
                &mut seeded_rng(branch_seed(seed, b, 1)),
            )?;
            train_model(
                &mut teacher,
                &features,
                train,
                &[],
                &train_cfg,
                branch_seed(seed, b, 2),
            )?;
            let vae = if config.vae {
                Some(fit_vae_stage(
                    config,
                    &teacher,
                    &features,
                    train,
                    cold_users,
                    cold_items,
                    objective,
                    branch_seed(seed, b, 3),
                )?)
            } else {
                None
            };
            branches.push(TrainedBranch {
                modalities,
                teacher,
                vae,
            });
        }
        Ok(Self {
            config: config.clone(),
            objective,
            rating_scale: dataset.manifest.rating_scale,
            users: dataset.users.clone(),
            items: dataset.items.clone(),
            train_pairs: train
                .iter()
                .map(|it| {
                    (
                        dataset.users[it.user].clone(),
                        dataset.items[it.item].clone(),
                    )
                })
                .collect(),
            branches,
        })
    }

    /// Binds the fitted branches to the entities `users` / `items`, whose
    /// first entries must be the training-time entities in order.
    pub fn scorer(
        &self,
        store: &EmbeddingStore,
        users: &[String],
        items: &[String],
    ) -> Result<Scorer> {
        for (known, given, kind) in [(&self.users, users, "user"), (&self.items, items, "item")] {
            if given.len() < known.len() || given[..known.len()] != known[..] {
                return Err(Error::Argument(format!(
                    "{kind} list must extend the {} training {kind}s in order",
                    known.len()
                )));
            }
        }
        let mut parts = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let features = if self.config.content {
                build_features(
                    store,
                    users,
                    items,
                    &branch.modalities,
                    self.config.side_features,
                )?
            } else {
                id_only_features(users.len(), items.len())
            };
            let mut teacher = branch.teacher.clone();
            teacher.extend_entities(users.len(), items.len())?;
            parts.push(match &branch.vae {
                None => (teacher, features),
                Some(stage) => {
                    let sf = student_features(&stage.user, &stage.item, &teacher, &features)?;
                    let mut student = stage.student.clone();
                    student.extend_entities(users.len(), items.len())?;
                    (student, sf)
                }
            });
        }
        let weights = match &self.config.fusion {
            FusionMode::Late if parts.len() > 1 => vec![1.0 / parts.len() as f64; parts.len()],
            _ => vec![1.0],
        };
        Ok(Scorer { parts, weights })
    }

    /// Evaluates on the interactions of `data`. Entities unknown at training
    /// time are scored from their content alone.
    pub fn evaluate_bundle(&self, data: &DataBundle, k: usize, seed: u64) -> Result<MetricReport> {
        let extend = |known: &[String], more: &[String], kind: EntityKind| -> Vec<String> {
            let mut all = known.to_vec();
            let mut seen: HashSet<String> = all.iter().cloned().collect();
            let from_store = data
                .embeddings
                .iter()
                .filter(|e| e.entity_kind == kind)
                .map(|e| e.entity_id.clone())
                .collect::<std::collections::BTreeSet<_>>();
            for id in more.iter().cloned().chain(from_store) {
                if seen.insert(id.clone()) {
                    all.push(id);
                }
            }
            all
        };
        let ds = &data.dataset;
        let users = extend(&self.users, &ds.users, EntityKind::User);
        let items = extend(&self.items, &ds.items, EntityKind::Item);
        let user_index: BTreeMap<&str, usize> = users
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let item_index: BTreeMap<&str, usize> = items
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let test: Vec<Interaction> = ds
            .interactions
            .iter()
            .map(|it| Interaction {
                user: user_index[ds.users[it.user].as_str()],
                item: item_index[ds.items[it.item].as_str()],
                ..*it
            })
            .collect();
        let train: Vec<Interaction> = self
            .train_pairs
            .iter()
            .map(|(u, i)| Interaction {
                user: user_index[u.as_str()],
                item: item_index[i.as_str()],
                rating: 1.0,
                timestamp: None,
            })
            .collect();
        let scorer = self.scorer(&data.embeddings, &users, &items)?;
        let protocol = EvalProtocol {
            k,
            ..EvalProtocol::from_config(&self.config, ds.manifest.rating_scale, seed)
        };
        evaluate_split(&scorer, &users, &items, &train, &test, &protocol)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn id_only_features(users: usize, items: usize) -> Features {
    let empty = |n| FeatureTable {
        modalities: Vec::new(),
        dims: Vec::new(),
        side_dim: 0,
        rows: vec![None; n],
    };
    Features {
        user: empty(users),
        item: empty(items),
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_vae_stage(
    config: &AblationConfig,
    teacher: &HybridModel,
    features: &Features,
    train: &[Interaction],
    cold_users: &[usize],
    cold_items: &[usize],
    objective: Objective,
    seed: u64,
) -> Result<VaeStage> {
    let vae_cfg = config.vae_config();
    let fit = |kind: EntityKind, tag: u64| -> Result<(VaeParams, Vec<Vec<f64>>)> {
        let enc = match kind {
            EntityKind::User => &teacher.user,
            EntityKind::Item => &teacher.item,
        };
        let fused = teacher.fused_vectors(features, kind)?;
        let warm: Vec<Vec<f64>> = fused
            .iter()
            .zip(&enc.seen)
            .filter(|(_, seen)| **seen)
            .filter_map(|(f, _)| f.clone())
            .collect();
        let dim = teacher
            .fused_dim(kind)
            .ok_or_else(|| Error::Config("VAE mode needs content features".into()))?;
        let mut vae = VaeParams::new(
            dim,
            &vae_cfg.hidden_dims,
            vae_cfg.latent_dim,
            &mut seeded_rng(derive_seed(seed, tag)),
        )?;
        train_vae(&mut vae, &warm, &vae_cfg, derive_seed(seed, tag + 1))?;
        Ok((vae, warm))
    };
    let (user_vae, warm_users) = fit(EntityKind::User, 10)?;
    let (item_vae, warm_items) = fit(EntityKind::Item, 20)?;

    let rule = |vae: &VaeParams, warm: &[Vec<f64>]| -> Result<ConfidenceRule> {
        match objective {
            Objective::Implicit => Ok(ConfidenceRule::Implicit),
            Objective::Explicit => ConfidenceRule::reconstruction(vae, warm),
        }
    };
    let item_rule = rule(&item_vae, &warm_items)?;
    let user_rule = rule(&user_vae, &warm_users)?;
    let mut pseudo = Vec::new();
    for &u in cold_users {
        if features.user.get(u).is_none() {
            continue;
        }
        let request = PseudoRequest {
            count: config.pseudo_per_cold,
            tau: config.tau,
            lambda: config.lambda,
            source: PseudoSource::ColdUser,
            anchor: u,
            rule: item_rule.clone(),
        };
        let labeler = |x: &[f64]| teacher.predict_fused_item(features, u, x);
        for s in generate_pseudo_samples(
            &item_vae,
            labeler,
            &request,
            derive_seed(derive_seed(seed, 30), u as u64),
        )? {
            pseudo.push(TrainSample {
                user: Endpoint::Entity(u),
                item: Endpoint::Fused(s.features),
                target: s.pseudo_label,
                weight: s.weight,
            });
        }
    }
    for &i in cold_items {
        if features.item.get(i).is_none() {
            continue;
        }
        let request = PseudoRequest {
            count: config.pseudo_per_cold,
            tau: config.tau,
            lambda: config.lambda,
            source: PseudoSource::ColdItem,
            anchor: i,
            rule: user_rule.clone(),
        };
        let labeler = |x: &[f64]| teacher.predict_fused_user(features, x, i);
        for s in generate_pseudo_samples(
            &user_vae,
            labeler,
            &request,
            derive_seed(derive_seed(seed, 40), i as u64),
        )? {
            pseudo.push(TrainSample {
                user: Endpoint::Fused(s.features),
                item: Endpoint::Entity(i),
                target: s.pseudo_label,
                weight: s.weight,
            });
        }
    }

    let sf = student_features(&user_vae, &item_vae, teacher, features)?;
    let fusion = FusionConfig {
        mode: FusionMode::Early,
        ..config.fusion_config()
    };
    let mut student = HybridModel::new(
        &config.model_config(),
        &fusion,
        &sf,
        &mut seeded_rng(derive_seed(seed, 50)),
    )?;
    train_model(
        &mut student,
        &sf,
        train,
        &pseudo,
        &config.train_config(objective),
        derive_seed(seed, 51),
    )?;
    Ok(VaeStage {
        user: user_vae,
        item: item_vae,
        student,
        pseudo_samples: pseudo.len(),
    })
}

/// Frozen models bound to feature tables, ready to score pairs.
#[derive(Debug, Clone)]
pub struct Scorer {
    parts: Vec<(HybridModel, Features)>,
    weights: Vec<f64>,
}

impl Scorer {
    /// Prediction on the normalized rating scale.
    pub fn predict(&self, user: usize, item: usize) -> Result<f64> {
        let preds = self
            .parts
            .iter()
            .map(|(m, f)| m.predict(f, user, item))
            .collect::<Result<Vec<_>>>()?;
        if preds.len() == 1 {
            return Ok(preds[0]);
        }
        fuse_late(&preds, &self.weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub k: usize,
    pub eval_negatives: usize,
    pub relevance_threshold: f64,
    pub scale: RatingScale,
    pub seed: u64,
}

impl EvalProtocol {
    pub fn from_config(config: &AblationConfig, scale: RatingScale, seed: u64) -> Self {
        Self {
            k: config.k,
            eval_negatives: config.eval_negatives,
            relevance_threshold: config.relevance_threshold,
            scale,
            seed,
        }
    }
}

/// MSE over every test pair on the original rating scale, and top-K
/// metrics per test user over their held-out items plus sampled unobserved
/// items. Users with fewer than K candidates are left out.
pub fn evaluate_split(
    scorer: &Scorer,
    users: &[String],
    items: &[String],
    train: &[Interaction],
    test: &[Interaction],
    protocol: &EvalProtocol,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    let mut predicted = Vec::with_capacity(test.len());
    let mut actual = Vec::with_capacity(test.len());
    let mut by_user: BTreeMap<usize, Vec<(usize, f64, f64)>> = BTreeMap::new();
    for it in test {
        let p = scorer.predict(it.user, it.item)?;
        predicted.push(protocol.scale.denormalize(p));
        actual.push(protocol.scale.denormalize(it.rating));
        by_user
            .entry(it.user)
            .or_default()
            .push((it.item, it.rating, p));
    }
    let mut observed: BTreeMap<usize, HashSet<usize>> = BTreeMap::new();
    for it in train.iter().chain(test) {
        observed.entry(it.user).or_default().insert(it.item);
    }

    let mut rankings = Vec::new();
    for (&u, held) in &by_user {
        let seen = &observed[&u];
        let pool: Vec<usize> = (0..items.len()).filter(|i| !seen.contains(i)).collect();
        let mut rng = seeded_rng(derive_seed(protocol.seed, u as u64));
        let negatives: Vec<usize> = pool
            .choose_multiple(&mut rng, protocol.eval_negatives.min(pool.len()))
            .copied()
            .collect();
        let mut scored: Vec<(String, f64)> = held
            .iter()
            .map(|&(i, _, p)| (items[i].clone(), p))
            .collect();
        for &j in &negatives {
            scored.push((items[j].clone(), scorer.predict(u, j)?));
        }
        if scored.len() < protocol.k {
            continue;
        }
        rankings.push(UserRanking {
            user_id: users[u].clone(),
            relevant: held
                .iter()
                .filter(|(_, r, _)| *r >= protocol.relevance_threshold)
                .map(|&(i, _, _)| items[i].clone())
                .collect(),
            ranked: rank_top_k(&scored, protocol.k)?,
        });
    }
    evaluate(
        &predicted,
        &actual,
        &EvalInput {
            k: protocol.k,
            users: rankings,
        },
    )
}
