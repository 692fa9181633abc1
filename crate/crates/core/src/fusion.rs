//! Combining per-modality embeddings.
//!
//! * early: concatenate raw modality vectors (text, image, side order)
//! * intermediate: per-modality relu projections, then a combiner
//! * late: weighted mean of per-modality model predictions
//!
//! Side features can be appended to any fused vector and projected back to
//! the fused dimension by a trainable identity-activation layer.

use serde::{Deserialize, Serialize};

use crate::embeddings::{Modality, ModalityEmbedding};
use crate::error::{Error, Result};
use crate::numerics::init::init_dense;
use crate::numerics::{Activation, DenseCache, DenseLayer, Parameters, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Early,
    #[default]
    #[serde(alias = "middle")]
    Intermediate,
    Late,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Early => "early",
            FusionMode::Intermediate => "intermediate",
            FusionMode::Late => "late",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    Concat,
    WeightedSum,
    #[default]
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub projection_dim: usize,
    pub combine: Combine,
    /// Per-modality weights for the weighted-sum combiner; uniform when absent.
    pub combine_weights: Option<Vec<f64>>,
    /// Per-modality weights for late fusion; uniform when absent.
    pub late_combine_weights: Option<Vec<f64>>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Intermediate,
            projection_dim: 32,
            combine: Combine::Mlp,
            combine_weights: None,
            late_combine_weights: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.projection_dim == 0 {
            return Err(Error::Config("projection_dim must be positive".into()));
        }
        if let Some(w) = &self.late_combine_weights {
            check_convex(w, "late_combine_weights")?;
        }
        if let Some(w) = &self.combine_weights {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("combine_weights must be finite".into()));
            }
        }
        Ok(())
    }

    /// Late-fusion weights for `n` modalities.
    pub fn late_weights(&self, n: usize) -> Result<Vec<f64>> {
        match &self.late_combine_weights {
            Some(w) if w.len() != n => Err(Error::Config(format!(
                "{} late_combine_weights for {n} modalities",
                w.len()
            ))),
            Some(w) => Ok(w.clone()),
            None => Ok(vec![1.0 / n as f64; n]),
        }
    }
}

fn check_convex(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config(format!(
            "{what} must be non-negative and finite"
        )));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{what} sum to {sum}, expected 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: FusionMode,
    pub modalities: Vec<Modality>,
    pub side_appended: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedVector {
    pub entity_id: String,
    pub dim: usize,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

/// Sorts embeddings into canonical modality order, checking they describe
/// one entity with no repeated modality.
fn canonical(embeddings: &[ModalityEmbedding]) -> Result<Vec<&ModalityEmbedding>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Argument("no modality embeddings to fuse".into()))?;
    let mut sorted: Vec<&ModalityEmbedding> = embeddings.iter().collect();
    sorted.sort_by_key(|e| e.modality);
    for e in &sorted {
        if e.entity_id != first.entity_id || e.entity_kind != first.entity_kind {
            return Err(Error::Argument(format!(
                "cannot fuse embeddings of `{}` and `{}`",
                first.entity_id, e.entity_id
            )));
        }
    }
    if let Some(w) = sorted.windows(2).find(|w| w[0].modality == w[1].modality) {
        return Err(Error::Argument(format!(
            "modality {} given twice",
            w[0].modality
        )));
    }
    Ok(sorted)
}

/// Concatenation in canonical modality order.
pub fn fuse_early(embeddings: &[ModalityEmbedding]) -> Result<FusedVector> {
    let sorted = canonical(embeddings)?;
    let values: Vec<f64> = sorted
        .iter()
        .flat_map(|e| e.values.iter().copied())
        .collect();
    Ok(FusedVector {
        entity_id: sorted[0].entity_id.clone(),
        dim: values.len(),
        values,
        provenance: Provenance {
            mode: FusionMode::Early,
            modalities: sorted.iter().map(|e| e.modality).collect(),
            side_appended: false,
        },
    })
}

/// Trainable intermediate fusion: one projection per modality, then a combiner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateFusion {
    pub modalities: Vec<Modality>,
    pub projections: Vec<DenseLayer>,
    pub combine: Combine,
    /// Fixed weights of the weighted-sum combiner.
    pub combine_weights: Vec<f64>,
    /// Relu projection of the concatenated projections (mlp combiner only).
    pub mixer: Option<DenseLayer>,
}

#[derive(Debug, Clone)]
pub struct IntermediateCache {
    projections: Vec<DenseCache>,
    mixer: Option<DenseCache>,
}

impl IntermediateFusion {
    /// Randomly initialized projections for modalities of the given dims.
    pub fn new(
        inputs: &[(Modality, usize)],
        config: &FusionConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let p = config.projection_dim;
        let projections = inputs
            .iter()
            .map(|&(_, dim)| init_dense(dim, p, Activation::Relu, rng))
            .collect::<Result<Vec<_>>>()?;
        let mixer = match config.combine {
            Combine::Mlp => Some(init_dense(p * inputs.len(), p, Activation::Relu, rng)?),
            _ => None,
        };
        Self::from_parts(
            inputs.iter().map(|(m, _)| *m).collect(),
            projections,
            config.combine,
            config.combine_weights.clone(),
            mixer,
        )
    }

    pub fn from_parts(
        modalities: Vec<Modality>,
        projections: Vec<DenseLayer>,
        combine: Combine,
        combine_weights: Option<Vec<f64>>,
        mixer: Option<DenseLayer>,
    ) -> Result<Self> {
        if modalities.is_empty() || modalities.len() != projections.len() {
            return Err(Error::Config(format!(
                "{} modalities but {} projection layers",
                modalities.len(),
                projections.len()
            )));
        }
        let p = projections[0].outputs();
        if projections.iter().any(|l| l.outputs() != p) {
            return Err(Error::Config(
                "projections must share one output dim".into(),
            ));
        }
        let m = modalities.len();
        let combine_weights = combine_weights.unwrap_or_else(|| vec![1.0 / m as f64; m]);
        if combine_weights.len() != m {
            return Err(Error::Config(format!(
                "{} combine weights for {m} modalities",
                combine_weights.len()
            )));
        }
        match (&combine, &mixer) {
            (Combine::Mlp, Some(mx)) if mx.inputs() != m * p => {
                return Err(Error::Config(format!(
                    "mixer expects {} inputs, concatenated projections have {}",
                    mx.inputs(),
                    m * p
                )))
            }
            (Combine::Mlp, None) => return Err(Error::Config("mlp combiner needs a mixer".into())),
            (Combine::Concat | Combine::WeightedSum, Some(_)) => {
                return Err(Error::Config("mixer given for a non-mlp combiner".into()))
            }
            _ => {}
        }
        Ok(Self {
            modalities,
            projections,
            combine,
            combine_weights,
            mixer,
        })
    }

    pub fn projection_dim(&self) -> usize {
        self.projections[0].outputs()
    }

    pub fn output_dim(&self) -> usize {
        match self.combine {
            Combine::Concat => self.projection_dim() * self.projections.len(),
            Combine::WeightedSum => self.projection_dim(),
            Combine::Mlp => self.mixer.as_ref().map_or(0, DenseLayer::outputs),
        }
    }

    /// Forward over per-modality inputs given in `self.modalities` order.
    pub fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, IntermediateCache)> {
        if inputs.len() != self.projections.len() {
            return Err(Error::Config(format!(
                "{} modality inputs for {} projections",
                inputs.len(),
                self.projections.len()
            )));
        }
        let mut outs = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for (layer, x) in self.projections.iter().zip(inputs) {
            let (o, c) = layer.forward(x)?;
            outs.push(o);
            caches.push(c);
        }
        let (fused, mixer_cache) = match self.combine {
            Combine::Concat => (outs.concat(), None),
            Combine::WeightedSum => {
                let mut acc = vec![0.0; self.projection_dim()];
                for (o, w) in outs.iter().zip(&self.combine_weights) {
                    crate::numerics::axpy(*w, o, &mut acc);
                }
                (acc, None)
            }
            Combine::Mlp => {
                let mixer = self.mixer.as_ref().expect("validated in from_parts");
                let (o, c) = mixer.forward(&outs.concat())?;
                (o, Some(c))
            }
        };
        Ok((
            fused,
            IntermediateCache {
                projections: caches,
                mixer: mixer_cache,
            },
        ))
    }

    /// Accumulates parameter gradients and returns ∂L/∂input per modality.
    pub fn backward_into(
        &self,
        cache: &IntermediateCache,
        upstream: &[f64],
        grads: &mut IntermediateFusion,
    ) -> Result<Vec<Vec<f64>>> {
        let p = self.projection_dim();
        let per_modality: Vec<Vec<f64>> = match self.combine {
            Combine::Concat => upstream.chunks(p).map(<[f64]>::to_vec).collect(),
            Combine::WeightedSum => self
                .combine_weights
                .iter()
                .map(|w| upstream.iter().map(|g| g * w).collect())
                .collect(),
            Combine::Mlp => {
                let mixer = self.mixer.as_ref().expect("validated in from_parts");
                let mixer_cache = cache
                    .mixer
                    .as_ref()
                    .ok_or_else(|| Error::Usage("intermediate cache lacks mixer state".into()))?;
                let gmix = grads
                    .mixer
                    .as_mut()
                    .ok_or_else(|| Error::Usage("gradient accumulator lacks mixer".into()))?;
                let g = mixer.backward_into(mixer_cache, upstream, gmix)?;
                g.chunks(p).map(<[f64]>::to_vec).collect()
            }
        };
        if per_modality.len() != self.projections.len() {
            return Err(Error::shape(
                "intermediate fusion upstream gradient",
                self.output_dim(),
                upstream.len(),
            ));
        }
        self.projections
            .iter()
            .zip(&cache.projections)
            .zip(grads.projections.iter_mut())
            .zip(&per_modality)
            .map(|(((layer, c), g), up)| layer.backward_into(c, up, g))
            .collect()
    }
}

impl Parameters for IntermediateFusion {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = self.projections.iter().flat_map(|l| l.tensors()).collect();
        if let Some(m) = &self.mixer {
            t.extend(m.tensors());
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = self
            .projections
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect();
        if let Some(m) = &mut self.mixer {
            t.extend(m.tensors_mut());
        }
        t
    }
}

/// Intermediate fusion of one entity's embeddings.
pub fn fuse_intermediate(
    embeddings: &[ModalityEmbedding],
    fusion: &IntermediateFusion,
) -> Result<FusedVector> {
    let sorted = canonical(embeddings)?;
    let mut inputs = Vec::with_capacity(fusion.modalities.len());
    for m in &fusion.modalities {
        let e = sorted.iter().find(|e| e.modality == *m).ok_or_else(|| {
            Error::Config(format!("no {m} embedding for `{}`", sorted[0].entity_id))
        })?;
        inputs.push(e.values.as_slice());
    }
    if let Some(extra) = sorted
        .iter()
        .find(|e| !fusion.modalities.contains(&e.modality))
    {
        return Err(Error::Config(format!(
            "no projection layer for modality {}",
            extra.modality
        )));
    }
    let (values, _) = fusion.forward(&inputs)?;
    Ok(FusedVector {
        entity_id: sorted[0].entity_id.clone(),
        dim: values.len(),
        values,
        provenance: Provenance {
            mode: FusionMode::Intermediate,
            modalities: fusion.modalities.clone(),
            side_appended: false,
        },
    })
}

/// Weighted mean of per-modality predictions.
pub fn fuse_late(predictions: &[f64], weights: &[f64]) -> Result<f64> {
    if predictions.len() != weights.len() {
        return Err(Error::shape(
            "late fusion weights",
            predictions.len(),
            weights.len(),
        ));
    }
    check_convex(weights, "late fusion weights")?;
    Ok(predictions.iter().zip(weights).map(|(p, w)| p * w).sum())
}

/// The fused-vector stage of a model: parameter-free concatenation or
/// trainable intermediate fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FusionStage {
    Early {
        modalities: Vec<Modality>,
        dims: Vec<usize>,
    },
    Intermediate(IntermediateFusion),
}

#[derive(Debug, Clone)]
pub enum FusionCache {
    Early,
    Intermediate(IntermediateCache),
}

impl FusionStage {
    pub fn build(
        inputs: &[(Modality, usize)],
        config: &FusionConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        match config.mode {
            FusionMode::Intermediate => Ok(FusionStage::Intermediate(IntermediateFusion::new(
                inputs, config, rng,
            )?)),
            // a late-fusion branch sees exactly one modality and concatenates it
            FusionMode::Early | FusionMode::Late => Ok(FusionStage::Early {
                modalities: inputs.iter().map(|(m, _)| *m).collect(),
                dims: inputs.iter().map(|(_, d)| *d).collect(),
            }),
        }
    }

    pub fn modalities(&self) -> &[Modality] {
        match self {
            FusionStage::Early { modalities, .. } => modalities,
            FusionStage::Intermediate(f) => &f.modalities,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FusionStage::Early { dims, .. } => dims.iter().sum(),
            FusionStage::Intermediate(f) => f.output_dim(),
        }
    }

    pub fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, FusionCache)> {
        match self {
            FusionStage::Early { dims, .. } => {
                if inputs.len() != dims.len() || inputs.iter().zip(dims).any(|(x, d)| x.len() != *d)
                {
                    return Err(Error::shape(
                        "early fusion inputs",
                        format!("{dims:?}"),
                        format!("{:?}", inputs.iter().map(|x| x.len()).collect::<Vec<_>>()),
                    ));
                }
                Ok((inputs.concat(), FusionCache::Early))
            }
            FusionStage::Intermediate(f) => {
                let (v, c) = f.forward(inputs)?;
                Ok((v, FusionCache::Intermediate(c)))
            }
        }
    }

    /// Accumulates parameter gradients; returns ∂L/∂input per modality.
    pub fn backward_into(
        &self,
        cache: &FusionCache,
        upstream: &[f64],
        grads: &mut FusionStage,
    ) -> Result<Vec<Vec<f64>>> {
        match (self, cache, grads) {
            (FusionStage::Early { dims, .. }, FusionCache::Early, _) => {
                let mut out = Vec::with_capacity(dims.len());
                let mut offset = 0;
                for d in dims {
                    out.push(upstream[offset..offset + d].to_vec());
                    offset += d;
                }
                Ok(out)
            }
            (
                FusionStage::Intermediate(f),
                FusionCache::Intermediate(c),
                FusionStage::Intermediate(g),
            ) => f.backward_into(c, upstream, g),
            _ => Err(Error::Usage(
                "fusion cache or gradient of the wrong kind".into(),
            )),
        }
    }
}

impl Parameters for FusionStage {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            FusionStage::Early { .. } => Vec::new(),
            FusionStage::Intermediate(f) => f.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            FusionStage::Early { .. } => Vec::new(),
            FusionStage::Intermediate(f) => f.tensors_mut(),
        }
    }
}

/// Checks that `restore` maps `fused_dim + side_dim` back to `fused_dim`
/// through an identity activation.
pub fn check_restore_layer(restore: &DenseLayer, fused_dim: usize, side_dim: usize) -> Result<()> {
    if restore.outputs() != fused_dim || restore.inputs() != fused_dim + side_dim {
        return Err(Error::Config(format!(
            "side-feature restore layer must be {fused_dim}x{}, got {}x{}",
            fused_dim + side_dim,
            restore.outputs(),
            restore.inputs()
        )));
    }
    if restore.activation != Activation::Identity {
        return Err(Error::Config(
            "side-feature restore layer must use identity activation".into(),
        ));
    }
    Ok(())
}

/// Concatenates side features to a fused vector and projects back to the
/// original fused dimension.
pub fn append_side_features(
    fused: &FusedVector,
    side: &ModalityEmbedding,
    restore: &DenseLayer,
) -> Result<FusedVector> {
    check_restore_layer(restore, fused.dim, side.dim)?;
    let input = [fused.values.as_slice(), side.values.as_slice()].concat();
    let values = restore.apply(&input)?;
    let mut provenance = fused.provenance.clone();
    provenance.side_appended = true;
    Ok(FusedVector {
        entity_id: fused.entity_id.clone(),
        dim: values.len(),
        values,
        provenance,
    })
}
