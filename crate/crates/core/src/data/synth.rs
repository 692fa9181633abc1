use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Interaction, Manifest, RatingScale, SideFeatureKind, SideFeatureSpec};
use crate::embeddings::{EmbeddingStore, EntityKind, Modality, ModalityEmbedding};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, dot, l2_norm, seeded_rng, sigmoid, Matrix, SeededRng};

/// Parameters of the synthetic benchmark.
///
/// Each entity gets a latent vector `z ~ N(0, I)`. An observed pair has
/// rating `σ(a · z_u·z_i/√k + γ · (‖z_u‖‖z_i‖/k − 1) + noise · ε)`, and every
/// entity gets text, image and side views `A z + view_noise · ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub density: f64,
    pub latent_dim: usize,
    /// Standard deviation of the rating logit noise.
    pub noise: f64,
    /// Scale `a` of the bilinear affinity.
    pub affinity_scale: f64,
    /// Weight `γ` of the norm-product term.
    pub nonlinearity: f64,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Width of the numeric side-feature view; 0 disables side features.
    pub side_dim: usize,
    pub view_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 300,
            density: 0.02,
            latent_dim: 8,
            noise: 0.1,
            affinity_scale: 2.0,
            nonlinearity: 1.0,
            text_dim: 32,
            image_dim: 32,
            side_dim: 7,
            view_noise: 0.1,
            seed: 42,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Argument(format!(
                "density {} outside (0, 1]",
                self.density
            )));
        }
        if self.users < 2 || self.items < 2 {
            return Err(Error::Argument("need at least 2 users and 2 items".into()));
        }
        if self.latent_dim == 0 || self.text_dim == 0 || self.image_dim == 0 {
            return Err(Error::Argument(
                "latent and view dims must be positive".into(),
            ));
        }
        let reals = [
            self.noise,
            self.view_noise,
            self.affinity_scale,
            self.nonlinearity,
        ];
        if reals.iter().any(|v| !v.is_finite()) || self.noise < 0.0 || self.view_noise < 0.0 {
            return Err(Error::Argument(
                "noise levels must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub user: Matrix,
    pub item: Matrix,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub latents: GroundTruth,
    pub embeddings: EmbeddingStore,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Matrix {
    let values = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, values).expect("sizes match")
}

fn ids(prefix: char, n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

/// Noisy linear view `A z + σ ε` of every row of `latents`.
fn views(latents: &Matrix, dim: usize, noise: f64, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let k = latents.cols();
    let a = gaussian_matrix(dim, k, 1.0 / (k as f64).sqrt(), rng);
    latents
        .iter_rows()
        .map(|z| {
            let mut v = a.matvec(z).expect("latent dim matches");
            for x in &mut v {
                *x += noise * rng.sample::<f64, _>(StandardNormal);
            }
            v
        })
        .collect()
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let k = spec.latent_dim;
    let mut latent_rng = seeded_rng(derive_seed(spec.seed, 1));
    let user = gaussian_matrix(spec.users, k, 1.0, &mut latent_rng);
    let item = gaussian_matrix(spec.items, k, 1.0, &mut latent_rng);

    let mut obs_rng = seeded_rng(derive_seed(spec.seed, 2));
    let mut noise_rng = seeded_rng(derive_seed(spec.seed, 3));
    let kf = k as f64;
    let user_norms: Vec<f64> = user.iter_rows().map(l2_norm).collect();
    let item_norms: Vec<f64> = item.iter_rows().map(l2_norm).collect();
    let mut interactions = Vec::new();
    for u in 0..spec.users {
        for i in 0..spec.items {
            if obs_rng.random::<f64>() >= spec.density {
                continue;
            }
            let eps: f64 = noise_rng.sample(StandardNormal);
            let logit = spec.affinity_scale * dot(user.row(u), item.row(i)) / kf.sqrt()
                + spec.nonlinearity * (user_norms[u] * item_norms[i] / kf - 1.0)
                + spec.noise * eps;
            interactions.push(Interaction {
                user: u,
                item: i,
                rating: sigmoid(logit),
                timestamp: None,
            });
        }
    }

    let user_ids = ids('u', spec.users);
    let item_ids = ids('i', spec.items);
    let mut store = EmbeddingStore::new();
    let mut side_features = BTreeMap::new();
    for (kind, latents, names, tag) in [
        (EntityKind::User, &user, &user_ids, 10),
        (EntityKind::Item, &item, &item_ids, 20),
    ] {
        let mut view_rng = seeded_rng(derive_seed(spec.seed, tag));
        let text = views(latents, spec.text_dim, spec.view_noise, &mut view_rng);
        let image = views(latents, spec.image_dim, spec.view_noise, &mut view_rng);
        let side = if spec.side_dim > 0 {
            views(latents, spec.side_dim, spec.view_noise, &mut view_rng)
        } else {
            Vec::new()
        };
        for (e, id) in names.iter().enumerate() {
            store.insert(ModalityEmbedding::new(
                id.clone(),
                kind,
                Modality::Text,
                text[e].clone(),
            ))?;
            store.insert(ModalityEmbedding::new(
                id.clone(),
                kind,
                Modality::Image,
                image[e].clone(),
            ))?;
            if let Some(s) = side.get(e) {
                store.insert(ModalityEmbedding::new(
                    id.clone(),
                    kind,
                    Modality::Side,
                    s.clone(),
                ))?;
                side_features.insert((kind, id.clone()), s.clone());
            }
        }
    }

    let mut manifest = Manifest::new(RatingScale::UNIT);
    manifest.name = format!("synthetic-{}x{}-seed{}", spec.users, spec.items, spec.seed);
    manifest.side_features = (1..=spec.side_dim)
        .map(|j| SideFeatureSpec {
            name: format!("f{j}"),
            kind: SideFeatureKind::Numeric,
        })
        .collect();
    manifest.descriptions.insert(
        "rating".into(),
        "sigmoid of latent affinity plus norm-product term".into(),
    );

    Ok(SynthOutput {
        dataset: Dataset {
            users: user_ids,
            items: item_ids,
            interactions,
            manifest,
            side_features,
            duplicates_replaced: 0,
        },
        latents: GroundTruth { user, item },
        embeddings: store,
    })
}
