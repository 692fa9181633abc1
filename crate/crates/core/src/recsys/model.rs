use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{HeadKind, NeuMfCache, NeuMfHead};
use crate::embeddings::{get_embedding, EmbeddingStore, EntityKind, Modality};
use crate::error::{Error, Result};
use crate::fusion::{check_restore_layer, FusionCache, FusionConfig, FusionStage};
use crate::numerics::init::init_dense;
use crate::numerics::{dot, Activation, DenseCache, DenseLayer, Matrix, Parameters, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub embedding_dim: usize,
    pub mlp_hidden: Vec<usize>,
    /// Activation `t` on the GMF path.
    pub gmf_activation: Activation,
    /// Output activation `σ` of NeuMF.
    pub output_activation: Activation,
    /// Learn a per-entity ID embedding added to the content embedding.
    pub use_ids: bool,
    /// Encode modality features; off for pure collaborative baselines.
    pub use_content: bool,
    pub id_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::NeuMf,
            embedding_dim: 16,
            mlp_hidden: vec![128, 64],
            gmf_activation: Activation::Identity,
            output_activation: Activation::Sigmoid,
            use_ids: true,
            use_content: true,
            id_init_std: 0.1,
        }
    }
}

/// Modality vectors of one entity in table order, plus optional side features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityInputs {
    pub blocks: Vec<Vec<f64>>,
    pub side: Option<Vec<f64>>,
}

/// Content inputs for every entity of one kind, indexed like the dataset.
/// Entities lacking any requested modality have no row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub modalities: Vec<Modality>,
    pub dims: Vec<usize>,
    pub side_dim: usize,
    pub rows: Vec<Option<EntityInputs>>,
}

impl FeatureTable {
    pub fn from_store(
        store: &EmbeddingStore,
        kind: EntityKind,
        ids: &[String],
        modalities: &[Modality],
        side: bool,
    ) -> Result<Self> {
        let mut modalities = modalities.to_vec();
        modalities.sort();
        modalities.dedup();
        let dims = modalities
            .iter()
            .map(|&m| {
                store
                    .dim(kind, m)
                    .ok_or_else(|| Error::Config(format!("no {m} embeddings for any {kind}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let side_dim = if side {
            store.dim(kind, Modality::Side).ok_or_else(|| {
                Error::Config(format!(
                    "side features requested but none exist for {kind}s"
                ))
            })?
        } else {
            0
        };
        let rows = ids
            .iter()
            .map(|id| {
                let blocks: Option<Vec<Vec<f64>>> = modalities
                    .iter()
                    .map(|&m| {
                        get_embedding(store, kind, id, m)
                            .ok()
                            .map(|e| e.values.clone())
                    })
                    .collect();
                let side_values = if side {
                    match get_embedding(store, kind, id, Modality::Side) {
                        Ok(e) => Some(e.values.clone()),
                        Err(_) => return None,
                    }
                } else {
                    None
                };
                blocks.map(|blocks| EntityInputs {
                    blocks,
                    side: side_values,
                })
            })
            .collect();
        Ok(Self {
            modalities,
            dims,
            side_dim,
            rows,
        })
    }

    /// A table whose entities each carry one precomputed vector.
    pub fn from_vectors(
        modality: Modality,
        dim: usize,
        rows: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        if let Some(v) = rows.iter().flatten().find(|v| v.len() != dim) {
            return Err(Error::shape("precomputed feature row", dim, v.len()));
        }
        Ok(Self {
            modalities: vec![modality],
            dims: vec![dim],
            side_dim: 0,
            rows: rows
                .into_iter()
                .map(|r| {
                    r.map(|v| EntityInputs {
                        blocks: vec![v],
                        side: None,
                    })
                })
                .collect(),
        })
    }

    pub fn get(&self, idx: usize) -> Option<&EntityInputs> {
        self.rows.get(idx).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub user: FeatureTable,
    pub item: FeatureTable,
}

/// Fusion, optional side-feature restore, then a linear tower to the
/// embedding dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentEncoder {
    pub fusion: FusionStage,
    pub restore: Option<DenseLayer>,
    pub tower: DenseLayer,
}

#[derive(Debug, Clone)]
struct ContentCache {
    fusion: Option<FusionCache>,
    restore: Option<DenseCache>,
    tower: DenseCache,
}

impl ContentEncoder {
    pub fn new(
        table: &FeatureTable,
        fusion: &FusionConfig,
        d: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let inputs: Vec<(Modality, usize)> = table
            .modalities
            .iter()
            .copied()
            .zip(table.dims.iter().copied())
            .collect();
        let stage = FusionStage::build(&inputs, fusion, rng)?;
        let fused = stage.output_dim();
        let restore = if table.side_dim > 0 {
            // starts as [I | 0] so side features enter through training
            let mut w = Matrix::zeros(fused, fused + table.side_dim);
            for j in 0..fused {
                w.set(j, j, 1.0);
            }
            let layer = DenseLayer::new(w, vec![0.0; fused], Activation::Identity)?;
            check_restore_layer(&layer, fused, table.side_dim)?;
            Some(layer)
        } else {
            None
        };
        let tower = init_dense(fused, d, Activation::Identity, rng)?;
        Ok(Self {
            fusion: stage,
            restore,
            tower,
        })
    }

    pub fn fused_dim(&self) -> usize {
        self.tower.inputs()
    }

    fn fuse(&self, inputs: &EntityInputs) -> Result<(Vec<f64>, FusionCache, Option<DenseCache>)> {
        let blocks: Vec<&[f64]> = inputs.blocks.iter().map(Vec::as_slice).collect();
        let (f, fc) = self.fusion.forward(&blocks)?;
        match (&self.restore, &inputs.side) {
            (Some(r), Some(side)) => {
                let (out, rc) = r.forward(&[f.as_slice(), side.as_slice()].concat())?;
                Ok((out, fc, Some(rc)))
            }
            (None, _) => Ok((f, fc, None)),
            (Some(_), None) => Err(Error::Config("side features missing for an entity".into())),
        }
    }

    /// The fused representation that feeds the tower.
    pub fn fused(&self, inputs: &EntityInputs) -> Result<Vec<f64>> {
        self.fuse(inputs).map(|(f, _, _)| f)
    }

    fn forward(&self, inputs: &EntityInputs) -> Result<(Vec<f64>, ContentCache)> {
        let (f, fc, rc) = self.fuse(inputs)?;
        let (e, tc) = self.tower.forward(&f)?;
        Ok((
            e,
            ContentCache {
                fusion: Some(fc),
                restore: rc,
                tower: tc,
            },
        ))
    }

    fn forward_fused(&self, fused: &[f64]) -> Result<(Vec<f64>, ContentCache)> {
        let (e, tc) = self.tower.forward(fused)?;
        Ok((
            e,
            ContentCache {
                fusion: None,
                restore: None,
                tower: tc,
            },
        ))
    }

    fn backward_into(
        &self,
        cache: &ContentCache,
        upstream: &[f64],
        grads: &mut ContentEncoder,
    ) -> Result<()> {
        let mut d = self
            .tower
            .backward_into(&cache.tower, upstream, &mut grads.tower)?;
        let Some(fc) = &cache.fusion else {
            return Ok(());
        };
        if let (Some(r), Some(rc), Some(gr)) =
            (&self.restore, &cache.restore, grads.restore.as_mut())
        {
            d = r.backward_into(rc, &d, gr)?;
            d.truncate(r.outputs());
        }
        self.fusion.backward_into(fc, &d, &mut grads.fusion)?;
        Ok(())
    }
}

impl Parameters for ContentEncoder {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.fusion.tensors();
        if let Some(r) = &self.restore {
            t.extend(r.tensors());
        }
        t.extend(self.tower.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.fusion.tensors_mut();
        if let Some(r) = &mut self.restore {
            t.extend(r.tensors_mut());
        }
        t.extend(self.tower.tensors_mut());
        t
    }
}

/// Embedding of one entity kind: content encoder output plus an ID
/// residual for entities seen in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityEncoder {
    pub ids: Option<Matrix>,
    /// Which ID rows were trained; others contribute nothing.
    pub seen: Vec<bool>,
    pub content: Option<ContentEncoder>,
}

#[derive(Debug, Clone)]
struct EmbedCache {
    id_row: Option<usize>,
    content: Option<ContentCache>,
}

/// Where an embedding comes from: a dataset entity, or a fused vector that
/// bypasses fusion (generated pseudo-sample features).
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Entity(usize),
    Fused(&'a [f64]),
}

impl EntityEncoder {
    fn embed(
        &self,
        table: Option<&FeatureTable>,
        source: Source<'_>,
        d: usize,
    ) -> Result<(Vec<f64>, EmbedCache)> {
        let mut out = vec![0.0; d];
        let mut cache = EmbedCache {
            id_row: None,
            content: None,
        };
        match source {
            Source::Entity(idx) => {
                if let (Some(ids), true) = (&self.ids, self.seen.get(idx).copied().unwrap_or(false))
                {
                    out.copy_from_slice(ids.row(idx));
                    cache.id_row = Some(idx);
                }
                if let (Some(enc), Some(inputs)) = (&self.content, table.and_then(|t| t.get(idx))) {
                    let (e, c) = enc.forward(inputs)?;
                    for (o, v) in out.iter_mut().zip(&e) {
                        *o += v;
                    }
                    cache.content = Some(c);
                }
            }
            Source::Fused(f) => {
                let enc = self.content.as_ref().ok_or_else(|| {
                    Error::Usage("fused input to a model without content encoder".into())
                })?;
                let (e, c) = enc.forward_fused(f)?;
                out = e;
                cache.content = Some(c);
            }
        }
        Ok((out, cache))
    }

    fn backward_into(
        &self,
        cache: &EmbedCache,
        upstream: &[f64],
        grads: &mut EntityEncoder,
    ) -> Result<()> {
        if let (Some(r), Some(g)) = (cache.id_row, grads.ids.as_mut()) {
            for (a, b) in g.row_mut(r).iter_mut().zip(upstream) {
                *a += b;
            }
        }
        if let (Some(c), Some(enc), Some(g)) =
            (&cache.content, &self.content, grads.content.as_mut())
        {
            enc.backward_into(c, upstream, g)?;
        }
        Ok(())
    }
}

impl Parameters for EntityEncoder {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = Vec::new();
        if let Some(ids) = &self.ids {
            t.push(ids.values());
        }
        if let Some(c) = &self.content {
            t.extend(c.tensors());
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = Vec::new();
        if let Some(ids) = &mut self.ids {
            t.push(ids.values_mut());
        }
        if let Some(c) = &mut self.content {
            t.extend(c.tensors_mut());
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    /// `p·q + b`.
    Mf {
        bias: Vec<f64>,
    },
    NeuMf(NeuMfHead),
}

impl Parameters for Head {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Head::Mf { bias } => vec![bias],
            Head::NeuMf(h) => h.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Head::Mf { bias } => vec![bias],
            Head::NeuMf(h) => h.tensors_mut(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    p: Vec<f64>,
    q: Vec<f64>,
    user: EmbedCache,
    item: EmbedCache,
    head: Option<NeuMfCache>,
    pub(crate) logit: f64,
    pub(crate) output: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub config: ModelConfig,
    pub user: EntityEncoder,
    pub item: EntityEncoder,
    pub head: Head,
}

fn id_table(rows: usize, d: usize, std: f64, rng: &mut SeededRng) -> Result<Matrix> {
    let values = (0..rows * d)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, d, values)
}

impl HybridModel {
    /// Builds a model for `features.user.len()` users and
    /// `features.item.len()` items.
    pub fn new(
        config: &ModelConfig,
        fusion: &FusionConfig,
        features: &Features,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let d = config.embedding_dim;
        if d == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !config.use_ids && !config.use_content {
            return Err(Error::Config(
                "a model needs ID embeddings, content, or both".into(),
            ));
        }
        let mut encoder = |table: &FeatureTable| -> Result<EntityEncoder> {
            Ok(EntityEncoder {
                ids: if config.use_ids {
                    Some(id_table(table.len(), d, config.id_init_std, rng)?)
                } else {
                    None
                },
                seen: vec![false; table.len()],
                content: if config.use_content {
                    Some(ContentEncoder::new(table, fusion, d, rng)?)
                } else {
                    None
                },
            })
        };
        let user = encoder(&features.user)?;
        let item = encoder(&features.item)?;
        let head = match config.head {
            HeadKind::Mf => Head::Mf { bias: vec![0.0] },
            HeadKind::NeuMf => Head::NeuMf(NeuMfHead::new(
                d,
                &config.mlp_hidden,
                config.gmf_activation,
                config.output_activation,
                rng,
            )?),
        };
        Ok(Self {
            config: config.clone(),
            user,
            item,
            head,
        })
    }

    /// Grows the ID tables so that indices up to `users`/`items` are valid;
    /// the new rows are untrained and contribute nothing.
    pub fn extend_entities(&mut self, users: usize, items: usize) -> Result<()> {
        for (enc, n, kind) in [
            (&mut self.user, users, "user"),
            (&mut self.item, items, "item"),
        ] {
            let old = enc.seen.len();
            if n < old {
                return Err(Error::Argument(format!(
                    "cannot shrink {kind} table from {old} to {n}"
                )));
            }
            if let Some(ids) = &mut enc.ids {
                let mut values = ids.values().to_vec();
                values.resize(n * ids.cols(), 0.0);
                *ids = Matrix::from_vec(n, ids.cols(), values)?;
            }
            enc.seen.resize(n, false);
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.user.seen.len()
    }

    pub fn num_items(&self) -> usize {
        self.item.seen.len()
    }

    pub(crate) fn forward(
        &self,
        features: &Features,
        user: Source<'_>,
        item: Source<'_>,
    ) -> Result<ForwardCache> {
        let d = self.config.embedding_dim;
        for (src, n, kind) in [
            (user, self.num_users(), "user"),
            (item, self.num_items(), "item"),
        ] {
            if let Source::Entity(idx) = src {
                if idx >= n {
                    return Err(Error::UnknownEntity {
                        kind,
                        id: idx.to_string(),
                    });
                }
            }
        }
        let (p, uc) = self.user.embed(Some(&features.user), user, d)?;
        let (q, ic) = self.item.embed(Some(&features.item), item, d)?;
        let (logit, output, head) = match &self.head {
            Head::Mf { bias } => {
                let raw = dot(&p, &q) + bias[0];
                (raw, raw, None)
            }
            Head::NeuMf(h) => {
                let (out, c) = h.forward(&p, &q)?;
                (c.logit(), out, Some(c))
            }
        };
        Ok(ForwardCache {
            p,
            q,
            user: uc,
            item: ic,
            head,
            logit,
            output,
        })
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂logit`.
    pub(crate) fn backward_into(
        &self,
        cache: &ForwardCache,
        d_logit: f64,
        grads: &mut HybridModel,
    ) -> Result<()> {
        let (dp, dq) = match (&self.head, &mut grads.head) {
            (Head::Mf { .. }, Head::Mf { bias }) => {
                bias[0] += d_logit;
                (
                    cache.q.iter().map(|v| v * d_logit).collect::<Vec<_>>(),
                    cache.p.iter().map(|v| v * d_logit).collect::<Vec<_>>(),
                )
            }
            (Head::NeuMf(h), Head::NeuMf(g)) => {
                let hc = cache
                    .head
                    .as_ref()
                    .ok_or_else(|| Error::Usage("NeuMF backward without head cache".into()))?;
                h.backward_into(&cache.p, &cache.q, hc, d_logit, g)?
            }
            _ => {
                return Err(Error::Usage(
                    "gradient accumulator has a different head".into(),
                ))
            }
        };
        self.user.backward_into(&cache.user, &dp, &mut grads.user)?;
        self.item.backward_into(&cache.item, &dq, &mut grads.item)?;
        Ok(())
    }

    /// Rating-scale prediction in normalized units: `σ(·)` for NeuMF, the
    /// raw inner product plus bias for MF.
    pub fn predict(&self, features: &Features, user: usize, item: usize) -> Result<f64> {
        Ok(self
            .forward(features, Source::Entity(user), Source::Entity(item))?
            .output)
    }

    /// Prediction for a user paired with fused item features.
    pub fn predict_fused_item(
        &self,
        features: &Features,
        user: usize,
        fused_item: &[f64],
    ) -> Result<f64> {
        Ok(self
            .forward(features, Source::Entity(user), Source::Fused(fused_item))?
            .output)
    }

    /// Prediction for fused user features paired with a dataset item.
    pub fn predict_fused_user(
        &self,
        features: &Features,
        fused_user: &[f64],
        item: usize,
    ) -> Result<f64> {
        Ok(self
            .forward(features, Source::Fused(fused_user), Source::Entity(item))?
            .output)
    }

    /// Fused representation of every entity of one kind (None without content).
    pub fn fused_vectors(
        &self,
        features: &Features,
        kind: EntityKind,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let (enc, table) = match kind {
            EntityKind::User => (&self.user, &features.user),
            EntityKind::Item => (&self.item, &features.item),
        };
        let Some(content) = &enc.content else {
            return Ok(vec![None; table.len()]);
        };
        table
            .rows
            .iter()
            .map(|r| r.as_ref().map(|inputs| content.fused(inputs)).transpose())
            .collect()
    }

    pub fn fused_dim(&self, kind: EntityKind) -> Option<usize> {
        let enc = match kind {
            EntityKind::User => &self.user,
            EntityKind::Item => &self.item,
        };
        enc.content.as_ref().map(ContentEncoder::fused_dim)
    }
}

impl Parameters for HybridModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.user.tensors();
        t.extend(self.item.tensors());
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.user.tensors_mut();
        t.extend(self.item.tensors_mut());
        t.extend(self.head.tensors_mut());
        t
    }
}
