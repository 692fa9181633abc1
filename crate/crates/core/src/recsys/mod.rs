//! Scoring heads, the hybrid content + ID model, training and ranking.

mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::init::init_dense;
use crate::numerics::{dot, Activation, DenseCache, Matrix, Mlp, Parameters, SeededRng};

pub use model::{
    ContentEncoder, EntityEncoder, EntityInputs, FeatureTable, Features, Head, HybridModel,
    ModelConfig, Source,
};
pub use train::{train_model, Endpoint, Objective, TrainConfig, TrainReport, TrainSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mf,
    #[default]
    #[serde(alias = "ncf")]
    NeuMf,
}

/// NeuMF scoring head: `σ(hᵀ t(p ⊙ q) + MLP([p ∥ q]))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuMfHead {
    pub h: Vec<f64>,
    pub t: Activation,
    pub mlp: Mlp,
    pub sigma: Activation,
}

#[derive(Debug, Clone)]
pub struct NeuMfCache {
    gmf_pre: Vec<f64>,
    gmf_out: Vec<f64>,
    mlp: Vec<DenseCache>,
    logit: f64,
    output: f64,
}

impl NeuMfCache {
    pub fn logit(&self) -> f64 {
        self.logit
    }

    pub fn output(&self) -> f64 {
        self.output
    }
}

impl NeuMfHead {
    /// Relu hidden layers of the given sizes and an identity scalar output.
    pub fn new(
        d: usize,
        hidden: &[usize],
        t: Activation,
        sigma: Activation,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = 2 * d;
        for &width in hidden {
            layers.push(init_dense(prev, width, Activation::Relu, rng)?);
            prev = width;
        }
        layers.push(init_dense(prev, 1, Activation::Identity, rng)?);
        Self::from_parts(vec![1.0; d], t, Mlp::new(layers)?, sigma)
    }

    pub fn from_parts(h: Vec<f64>, t: Activation, mlp: Mlp, sigma: Activation) -> Result<Self> {
        if mlp.inputs() != 2 * h.len() || mlp.outputs() != 1 {
            return Err(Error::shape(
                "NeuMF MLP path",
                format!("{}->1", 2 * h.len()),
                format!("{}->{}", mlp.inputs(), mlp.outputs()),
            ));
        }
        Ok(Self { h, t, mlp, sigma })
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn forward(&self, p: &[f64], q: &[f64]) -> Result<(f64, NeuMfCache)> {
        check_pair(p, q, self.dim())?;
        let product: Vec<f64> = p.iter().zip(q).map(|(a, b)| a * b).collect();
        let gmf_out: Vec<f64> = product.iter().map(|&v| self.t.apply(v)).collect();
        let gmf = dot(&self.h, &gmf_out);
        let (m, mlp) = self.mlp.forward(&[p, q].concat())?;
        let logit = gmf + m[0];
        let output = self.sigma.apply(logit);
        Ok((
            output,
            NeuMfCache {
                gmf_pre: product,
                gmf_out,
                mlp,
                logit,
                output,
            },
        ))
    }

    /// Accumulates head gradients; returns `(∂L/∂p, ∂L/∂q)` given `∂L/∂logit`.
    pub fn backward_into(
        &self,
        p: &[f64],
        q: &[f64],
        cache: &NeuMfCache,
        d_logit: f64,
        grads: &mut NeuMfHead,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let d_cat = self
            .mlp
            .backward_into(&cache.mlp, &[d_logit], &mut grads.mlp)?;
        let mut dp = d_cat[..d].to_vec();
        let mut dq = d_cat[d..].to_vec();
        for j in 0..d {
            grads.h[j] += d_logit * cache.gmf_out[j];
            let d_prod =
                d_logit * self.h[j] * self.t.derivative(cache.gmf_pre[j], cache.gmf_out[j]);
            dp[j] += d_prod * q[j];
            dq[j] += d_prod * p[j];
        }
        Ok((dp, dq))
    }
}

impl Parameters for NeuMfHead {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = vec![&self.h];
        t.extend(self.mlp.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = vec![&mut self.h];
        t.extend(self.mlp.tensors_mut());
        t
    }
}

fn check_pair(p: &[f64], q: &[f64], d: usize) -> Result<()> {
    if p.len() != d {
        return Err(Error::shape("user embedding", d, p.len()));
    }
    if q.len() != d {
        return Err(Error::shape("item embedding", d, q.len()));
    }
    Ok(())
}

/// Pre-sigmoid GMF term `hᵀ t(p ⊙ q)`.
pub fn gmf_score(p: &[f64], q: &[f64], h: &[f64], t: Activation) -> Result<f64> {
    check_pair(p, q, h.len())?;
    Ok(p.iter()
        .zip(q)
        .zip(h)
        .map(|((a, b), w)| w * t.apply(a * b))
        .sum())
}

/// Pre-sigmoid MLP term over `[p ∥ q]`.
pub fn mlp_score(p: &[f64], q: &[f64], mlp: &Mlp) -> Result<f64> {
    if p.len() + q.len() != mlp.inputs() || mlp.outputs() != 1 {
        return Err(Error::shape(
            "MLP path",
            format!("{}->1", mlp.inputs()),
            format!("{}->{}", p.len() + q.len(), mlp.outputs()),
        ));
    }
    Ok(mlp.apply(&[p, q].concat())?[0])
}

/// Pure ID-based NeuMF: embedding tables plus a head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuMfParams {
    pub p: Matrix,
    pub q: Matrix,
    pub head: NeuMfHead,
}

/// Pure ID-based matrix factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfParams {
    pub p: Matrix,
    pub q: Matrix,
    pub bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub user: usize,
    pub item: usize,
    pub score: f64,
}

fn lookup<'a>(table: &'a Matrix, idx: usize, kind: &'static str) -> Result<&'a [f64]> {
    if idx >= table.rows() {
        return Err(Error::UnknownEntity {
            kind,
            id: idx.to_string(),
        });
    }
    Ok(table.row(idx))
}

pub fn neumf_predict(params: &NeuMfParams, user: usize, item: usize) -> Result<Prediction> {
    let p = lookup(&params.p, user, "user")?;
    let q = lookup(&params.q, item, "item")?;
    let (score, _) = params.head.forward(p, q)?;
    Ok(Prediction { user, item, score })
}

/// `σ(p·q + b)` when `squash` is set (ranking), raw `p·q + b` otherwise.
pub fn mf_predict(params: &MfParams, user: usize, item: usize, squash: bool) -> Result<Prediction> {
    let p = lookup(&params.p, user, "user")?;
    let q = lookup(&params.q, item, "item")?;
    check_pair(p, q, p.len())?;
    let raw = dot(p, q) + params.bias;
    let score = if squash {
        crate::numerics::sigmoid(raw)
    } else {
        raw
    };
    Ok(Prediction { user, item, score })
}

/// Orders `(id, score)` pairs by descending score, breaking ties by
/// ascending id, and returns the first `k` ids.
pub fn rank_top_k(scored: &[(String, f64)], k: usize) -> Result<Vec<String>> {
    if k > scored.len() {
        return Err(Error::Argument(format!(
            "K = {k} exceeds {} candidates",
            scored.len()
        )));
    }
    if let Some((id, s)) = scored.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::Numeric(format!("score {s} for `{id}`")));
    }
    let mut order: Vec<&(String, f64)> = scored.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|(id, _)| id.clone())
        .collect())
}
