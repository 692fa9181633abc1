//! Variational autoencoder over fused vectors and pseudo-sample generation.
//!
//! The posterior is a diagonal Gaussian `N(μ, diag(exp(logvar)))`, the prior
//! is `N(0, I)`, and the loss is
//! `mean((x̂ − x)²) + β · KL(q ‖ p)` with `z = μ + exp(logvar/2) ⊙ ε`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::init::init_dense;
use crate::numerics::{
    derive_seed, optimizer_step, seeded_rng, zero, zeros_like, Activation, DenseLayer, Mlp,
    OptimizerConfig, OptimizerState, Parameters, SeededRng,
};

/// Bound on |logvar| so that `exp` stays finite.
pub const LOGVAR_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32],
            latent_dim: 8,
            beta: 1.0,
            epochs: 10,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeParams {
    pub encoder: Mlp,
    pub mu_head: DenseLayer,
    pub logvar_head: DenseLayer,
    pub decoder: Mlp,
    pub latent_dim: usize,
}

impl VaeParams {
    /// Relu hidden layers `hidden_dims` on both sides, identity heads and
    /// identity decoder output.
    pub fn new(
        input_dim: usize,
        hidden_dims: &[usize],
        latent_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::Argument("VAE dims must be positive".into()));
        }
        let mut encoder = Vec::new();
        let mut prev = input_dim;
        for &h in hidden_dims {
            encoder.push(init_dense(prev, h, Activation::Relu, rng)?);
            prev = h;
        }
        let mu_head = init_dense(prev, latent_dim, Activation::Identity, rng)?;
        let logvar_head = init_dense(prev, latent_dim, Activation::Identity, rng)?;
        let mut decoder = Vec::new();
        prev = latent_dim;
        for &h in hidden_dims.iter().rev() {
            decoder.push(init_dense(prev, h, Activation::Relu, rng)?);
            prev = h;
        }
        decoder.push(init_dense(prev, input_dim, Activation::Identity, rng)?);
        Self::from_parts(Mlp::new(encoder)?, mu_head, logvar_head, Mlp::new(decoder)?)
    }

    pub fn from_parts(
        encoder: Mlp,
        mu_head: DenseLayer,
        logvar_head: DenseLayer,
        decoder: Mlp,
    ) -> Result<Self> {
        let latent_dim = mu_head.outputs();
        let hidden = if encoder.layers.is_empty() {
            mu_head.inputs()
        } else {
            encoder.outputs()
        };
        if logvar_head.outputs() != latent_dim
            || mu_head.inputs() != hidden
            || logvar_head.inputs() != hidden
        {
            return Err(Error::shape(
                "VAE heads",
                format!("{hidden}->{latent_dim}"),
                format!(
                    "{}->{} and {}->{}",
                    mu_head.inputs(),
                    mu_head.outputs(),
                    logvar_head.inputs(),
                    logvar_head.outputs()
                ),
            ));
        }
        if decoder.layers.is_empty() || decoder.inputs() != latent_dim {
            return Err(Error::shape(
                "VAE decoder input",
                latent_dim,
                decoder.inputs(),
            ));
        }
        let input_dim = if encoder.layers.is_empty() {
            mu_head.inputs()
        } else {
            encoder.inputs()
        };
        if decoder.outputs() != input_dim {
            return Err(Error::shape(
                "VAE decoder output",
                input_dim,
                decoder.outputs(),
            ));
        }
        Ok(Self {
            encoder,
            mu_head,
            logvar_head,
            decoder,
            latent_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.decoder.outputs()
    }

    /// `(mu, logvar)` with logvar clamped to `[-20, 20]`.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let h = self.encoder.apply(x)?;
        let mu = self.mu_head.apply(&h)?;
        let logvar = self
            .logvar_head
            .apply(&h)?
            .into_iter()
            .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
            .collect();
        Ok((mu, logvar))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::shape("VAE latent", self.latent_dim, z.len()));
        }
        self.decoder.apply(z)
    }

    /// Deterministic reconstruction `decode(mu(x))`.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (mu, _) = self.encode(x)?;
        self.decode(&mu)
    }

    /// Draws `ε ~ N(0, I)` and returns the full latent sample.
    pub fn sample(&self, x: &[f64], rng: &mut SeededRng) -> Result<LatentSample> {
        let (mu, logvar) = self.encode(x)?;
        let eps = standard_normal(self.latent_dim, rng);
        LatentSample::new(mu, logvar, eps)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("VAE input", self.input_dim(), x.len()));
        }
        Ok(())
    }
}

impl Parameters for VaeParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.mu_head.tensors());
        t.extend(self.logvar_head.tensors());
        t.extend(self.decoder.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.mu_head.tensors_mut());
        t.extend(self.logvar_head.tensors_mut());
        t.extend(self.decoder.tensors_mut());
        t
    }
}

pub fn standard_normal(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `z = mu + exp(logvar/2) ⊙ eps`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if logvar.len() != mu.len() {
        return Err(Error::shape(
            "reparameterize logvar",
            mu.len(),
            logvar.len(),
        ));
    }
    if eps.len() != mu.len() {
        return Err(Error::shape("reparameterize eps", mu.len(), eps.len()));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub eps: Vec<f64>,
}

impl LatentSample {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>, eps: Vec<f64>) -> Result<Self> {
        let logvar: Vec<f64> = logvar
            .into_iter()
            .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
            .collect();
        let z = reparameterize(&mu, &logvar, &eps)?;
        Ok(Self { z, mu, logvar, eps })
    }

    /// Whether `z` equals `mu + exp(logvar/2) ⊙ eps` bit for bit.
    pub fn identity_holds(&self) -> bool {
        reparameterize(&self.mu, &self.logvar, &self.eps).is_ok_and(|z| {
            z.len() == self.z.len()
                && z.iter()
                    .zip(&self.z)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

/// `−½ Σ (1 + logvar − mu² − exp(logvar))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

pub fn elbo_loss(
    x: &[f64],
    x_hat: &[f64],
    mu: &[f64],
    logvar: &[f64],
    beta: f64,
) -> Result<ElboTerms> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(Error::shape("ELBO reconstruction", x.len(), x_hat.len()));
    }
    if mu.len() != logvar.len() {
        return Err(Error::shape("ELBO logvar", mu.len(), logvar.len()));
    }
    if !(beta >= 0.0) {
        return Err(Error::Argument(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    let all = x.iter().chain(x_hat).chain(mu).chain(logvar);
    if all.clone().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input to the ELBO".into()));
    }
    let recon = x
        .iter()
        .zip(x_hat)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        / x.len() as f64;
    let kl = kl_divergence(mu, logvar);
    Ok(ElboTerms {
        total: recon + beta * kl,
        recon,
        kl,
    })
}

/// Loss and parameter gradient for one input with a fixed noise draw.
pub fn elbo_with_grad(
    params: &VaeParams,
    x: &[f64],
    eps: &[f64],
    beta: f64,
) -> Result<(ElboTerms, VaeParams)> {
    let mut grads = zeros_like(params);
    let terms = accumulate_elbo_grad(params, x, eps, beta, 1.0, &mut grads)?;
    Ok((terms, grads))
}

/// Adds `scale · ∂loss/∂params` into `grads` and returns the loss terms.
fn accumulate_elbo_grad(
    params: &VaeParams,
    x: &[f64],
    eps: &[f64],
    beta: f64,
    scale: f64,
    grads: &mut VaeParams,
) -> Result<ElboTerms> {
    params.check_input(x)?;
    let (h, enc_caches) = params.encoder.forward(x)?;
    let (mu, mu_cache) = params.mu_head.forward(&h)?;
    let (raw_lv, lv_cache) = params.logvar_head.forward(&h)?;
    let logvar: Vec<f64> = raw_lv
        .iter()
        .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
        .collect();
    let z = reparameterize(&mu, &logvar, eps)?;
    let (x_hat, dec_caches) = params.decoder.forward(&z)?;
    let terms = elbo_loss(x, &x_hat, &mu, &logvar, beta)?;

    let n = x.len() as f64;
    let d_xhat: Vec<f64> = x_hat
        .iter()
        .zip(x)
        .map(|(a, b)| scale * 2.0 * (a - b) / n)
        .collect();
    let dz = params
        .decoder
        .backward_into(&dec_caches, &d_xhat, &mut grads.decoder)?;
    let mut d_mu = Vec::with_capacity(mu.len());
    let mut d_lv = Vec::with_capacity(mu.len());
    for j in 0..mu.len() {
        let std = (0.5 * logvar[j]).exp();
        d_mu.push(dz[j] + scale * beta * mu[j]);
        let g = dz[j] * eps[j] * 0.5 * std + scale * beta * 0.5 * (logvar[j].exp() - 1.0);
        // the clamp has zero slope outside its range
        d_lv.push(if raw_lv[j].abs() > LOGVAR_CLAMP {
            0.0
        } else {
            g
        });
    }
    let mut dh = params
        .mu_head
        .backward_into(&mu_cache, &d_mu, &mut grads.mu_head)?;
    let dh2 = params
        .logvar_head
        .backward_into(&lv_cache, &d_lv, &mut grads.logvar_head)?;
    for (a, b) in dh.iter_mut().zip(&dh2) {
        *a += b;
    }
    params
        .encoder
        .backward_into(&enc_caches, &dh, &mut grads.encoder)?;
    Ok(terms)
}

/// Mean ELBO over `data`, one noise draw per row from `seed`.
pub fn mean_elbo(params: &VaeParams, data: &[Vec<f64>], beta: f64, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut sum = 0.0;
    for x in data {
        let s = params.sample(x, &mut rng)?;
        let x_hat = params.decode(&s.z)?;
        sum += elbo_loss(x, &x_hat, &s.mu, &s.logvar, beta)?.total;
    }
    Ok(sum / data.len() as f64)
}

/// Minibatch training on the ELBO. Returns the mean loss of every epoch.
pub fn train_vae(
    params: &mut VaeParams,
    data: &[Vec<f64>],
    config: &VaeConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.len() < 2 {
        return Err(Error::Argument(format!(
            "VAE training needs at least 2 samples, got {}",
            data.len()
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("VAE batch_size must be positive".into()));
    }
    for x in data {
        params.check_input(x)?;
    }
    let mut order_rng = seeded_rng(derive_seed(seed, 1));
    let mut eps_rng = seeded_rng(derive_seed(seed, 2));
    let mut state = OptimizerState::new(config.optimizer, params);
    let mut grads = zeros_like(params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            zero(&mut grads);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let eps = standard_normal(params.latent_dim, &mut eps_rng);
                let terms =
                    accumulate_elbo_grad(params, &data[i], &eps, config.beta, scale, &mut grads)?;
                epoch_loss += terms.total;
            }
            optimizer_step(params, &grads, &mut state)?;
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric("VAE loss diverged".into()));
        }
        trace.push(mean);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    ColdUser,
    ColdItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSample {
    /// Generated counterpart features in the fused space.
    pub features: Vec<f64>,
    pub pseudo_label: f64,
    pub weight: f64,
    pub source: PseudoSource,
    /// Index of the cold entity the sample is paired with.
    pub anchor: usize,
}

/// How the confidence of a generated sample is judged.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfidenceRule {
    /// `2·|ŷ − 0.5|` for sigmoid outputs.
    Implicit,
    /// `1 − F(e)`, where `e` is the sample's reconstruction error and `F`
    /// the empirical distribution of the given reference errors.
    Reconstruction { reference_errors: Vec<f64> },
}

impl ConfidenceRule {
    /// Reference errors are the deterministic reconstruction errors of `data`.
    pub fn reconstruction(vae: &VaeParams, data: &[Vec<f64>]) -> Result<Self> {
        let mut errors = data
            .iter()
            .map(|x| reconstruction_error(vae, x))
            .collect::<Result<Vec<_>>>()?;
        errors.sort_by(f64::total_cmp);
        Ok(ConfidenceRule::Reconstruction {
            reference_errors: errors,
        })
    }

    fn confidence(&self, vae: &VaeParams, features: &[f64], label: f64) -> Result<f64> {
        match self {
            ConfidenceRule::Implicit => Ok(2.0 * (label - 0.5).abs()),
            ConfidenceRule::Reconstruction { reference_errors } => {
                if reference_errors.is_empty() {
                    return Ok(1.0);
                }
                let e = reconstruction_error(vae, features)?;
                let below = reference_errors.partition_point(|r| *r < e);
                Ok(1.0 - below as f64 / reference_errors.len() as f64)
            }
        }
    }
}

fn reconstruction_error(vae: &VaeParams, x: &[f64]) -> Result<f64> {
    let r = vae.reconstruct(x)?;
    Ok(r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRequest {
    pub count: usize,
    pub tau: f64,
    pub lambda: f64,
    pub source: PseudoSource,
    pub anchor: usize,
    pub rule: ConfidenceRule,
}

/// Decodes `count` prior draws, labels each with `labeler` and keeps those
/// whose confidence is at least `tau`, weighted `lambda`.
pub fn generate_pseudo_samples<L>(
    vae: &VaeParams,
    labeler: L,
    request: &PseudoRequest,
    seed: u64,
) -> Result<Vec<PseudoSample>>
where
    L: Fn(&[f64]) -> Result<f64>,
{
    if !(0.0..1.0).contains(&request.tau) {
        return Err(Error::Argument(format!(
            "tau {} outside [0, 1)",
            request.tau
        )));
    }
    if !(0.0..=1.0).contains(&request.lambda) {
        return Err(Error::Argument(format!(
            "lambda {} outside [0, 1]",
            request.lambda
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut out = Vec::new();
    for _ in 0..request.count {
        let z = standard_normal(vae.latent_dim, &mut rng);
        let features = vae.decode(&z)?;
        let label = labeler(&features)?;
        if !label.is_finite() {
            return Err(Error::Numeric(format!("pseudo-label {label}")));
        }
        if request.rule.confidence(vae, &features, label)? >= request.tau {
            out.push(PseudoSample {
                features,
                pseudo_label: label.clamp(0.0, 1.0),
                weight: request.lambda,
                source: request.source,
                anchor: request.anchor,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_params, Matrix};
    use proptest::prelude::*;
    use rand::Rng;

    fn zero_vae(input: usize, latent: usize) -> VaeParams {
        VaeParams::from_parts(
            Mlp::new(vec![DenseLayer::zeros(input, 4, Activation::Relu)]).unwrap(),
            DenseLayer::zeros(4, latent, Activation::Identity),
            DenseLayer::zeros(4, latent, Activation::Identity),
            Mlp::new(vec![DenseLayer::zeros(latent, input, Activation::Identity)]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_parameters_give_standard_posterior_and_zero_output() {
        let v = zero_vae(5, 3);
        let (mu, lv) = v.encode(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
        assert_eq!(mu, vec![0.0; 3]);
        assert_eq!(lv, vec![0.0; 3]);
        assert_eq!(v.decode(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn shapes_and_determinism() {
        let v = VaeParams::new(6, &[5], 2, &mut seeded_rng(3)).unwrap();
        let x = [0.1, 0.2, -0.3, 4.0, 0.0, -1.0];
        let a = v.encode(&x).unwrap();
        assert_eq!((a.0.len(), a.1.len()), (2, 2));
        assert_eq!(a, v.encode(&x).unwrap());
        assert_eq!(v.decode(&[0.5, 0.5]).unwrap().len(), 6);
        assert!(matches!(v.encode(&[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(v.decode(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn logvar_is_clamped() {
        let mut v = zero_vae(2, 2);
        v.logvar_head.bias = vec![50.0, -50.0];
        let (_, lv) = v.encode(&[0.0, 0.0]).unwrap();
        assert_eq!(lv, vec![20.0, -20.0]);
    }

    #[test]
    fn reparameterize_examples() {
        assert_eq!(
            reparameterize(&[1.0, 2.0], &[0.3, -0.7], &[0.0, 0.0]).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            reparameterize(&[1.0, 2.0], &[0.0, 0.0], &[0.5, -1.5]).unwrap(),
            vec![1.5, 0.5]
        );
        let z = reparameterize(&[1.0], &[4f64.ln()], &[0.5]).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-15);
        assert!(matches!(
            reparameterize(&[1.0], &[0.0, 0.0], &[0.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
        for d in [1, 3, 8] {
            assert!((kl_divergence(&vec![1.0; d], &vec![0.0; d]) - 0.5 * d as f64).abs() < 1e-12);
        }
        let t = elbo_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0], &[0.0], 0.7).unwrap();
        assert_eq!(t.recon, 0.0);
        assert!((t.total - 0.35).abs() < 1e-15);
        assert!(matches!(
            elbo_loss(&[f64::NAN], &[0.0], &[0.0], &[0.0], 1.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn kl_is_non_negative_on_random_pairs() {
        let mut rng = seeded_rng(99);
        for _ in 0..10_000 {
            let mu = standard_normal(4, &mut rng)
                .iter()
                .map(|v| 3.0 * v)
                .collect::<Vec<_>>();
            let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-20.0..20.0)).collect();
            assert!(kl_divergence(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn stored_samples_satisfy_reparameterization() {
        let v = VaeParams::new(4, &[6], 3, &mut seeded_rng(5)).unwrap();
        let mut rng = seeded_rng(6);
        for _ in 0..500 {
            let x = standard_normal(4, &mut rng);
            let s = v.sample(&x, &mut rng).unwrap();
            assert!(s.identity_holds());
            for j in 0..3 {
                // z − mu recovers the scaled noise up to the rounding of one addition
                let scaled = (0.5 * s.logvar[j]).exp() * s.eps[j];
                assert!(
                    ((s.z[j] - s.mu[j]) - scaled).abs()
                        <= f64::EPSILON * s.z[j].abs().max(s.mu[j].abs())
                );
            }
        }
    }

    #[test]
    fn full_elbo_gradient_matches_finite_differences() {
        let v = VaeParams::new(5, &[4], 3, &mut seeded_rng(11)).unwrap();
        let x = [0.3, -0.8, 1.2, 0.05, -0.4];
        let eps = [0.7, -1.1, 0.25];
        let report = grad_check_params(
            &v,
            |p: &VaeParams| {
                let (t, g) = elbo_with_grad(p, &x, &eps, 0.8).unwrap();
                (t.total, g)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let mut v = VaeParams::new(3, &[4], 2, &mut seeded_rng(1)).unwrap();
        let before = v.clone();
        let data = vec![vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]];
        let trace = train_vae(
            &mut v,
            &data,
            &VaeConfig {
                epochs: 0,
                ..VaeConfig::default()
            },
            4,
        )
        .unwrap();
        assert!(trace.is_empty());
        assert_eq!(v, before);
        assert!(matches!(
            train_vae(&mut v, &data[..1], &VaeConfig::default(), 4),
            Err(Error::Argument(_))
        ));
    }

    fn linear_gaussian(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        let w = Matrix::from_vec(8, 2, standard_normal(16, &mut rng)).unwrap();
        let offset: Vec<f64> = (0..8).map(|j| 0.5 * j as f64 - 1.5).collect();
        (0..n)
            .map(|_| {
                let z = standard_normal(2, &mut rng);
                let mut x = w.matvec(&z).unwrap();
                for (j, v) in x.iter_mut().enumerate() {
                    *v += offset[j] + 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
                x
            })
            .collect()
    }

    #[test]
    fn training_on_linear_gaussian_data() {
        let data = linear_gaussian(1000, 21);
        let cfg = VaeConfig {
            hidden_dims: vec![16],
            latent_dim: 2,
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig {
                learning_rate: 5e-3,
                ..OptimizerConfig::default()
            },
            ..VaeConfig::default()
        };
        let mut v = VaeParams::new(8, &cfg.hidden_dims, 2, &mut seeded_rng(22)).unwrap();
        let initial = mean_elbo(&v, &data, cfg.beta, 5).unwrap();
        let trace = train_vae(&mut v, &data, &cfg, 23).unwrap();
        let fin = mean_elbo(&v, &data, cfg.beta, 5).unwrap();
        assert!(fin < initial, "{initial} -> {fin}");
        assert!(trace.last().unwrap() < &trace[0]);

        let mut again = VaeParams::new(8, &cfg.hidden_dims, 2, &mut seeded_rng(22)).unwrap();
        assert_eq!(train_vae(&mut again, &data, &cfg, 23).unwrap(), trace);

        let mut rng = seeded_rng(24);
        let n = 2000;
        let mut decoded_mean = [0.0; 8];
        for _ in 0..n {
            let x = v.decode(&standard_normal(2, &mut rng)).unwrap();
            for (m, xi) in decoded_mean.iter_mut().zip(&x) {
                *m += xi / n as f64;
            }
        }
        for j in 0..8 {
            let data_mean = data.iter().map(|x| x[j]).sum::<f64>() / data.len() as f64;
            assert!(
                (decoded_mean[j] - data_mean).abs() < 0.15,
                "coordinate {j}: {} vs {data_mean}",
                decoded_mean[j]
            );
        }
    }

    fn request(tau: f64, lambda: f64, rule: ConfidenceRule) -> PseudoRequest {
        PseudoRequest {
            count: 40,
            tau,
            lambda,
            source: PseudoSource::ColdUser,
            anchor: 3,
            rule,
        }
    }

    #[test]
    fn pseudo_sample_gating() {
        let v = VaeParams::new(4, &[4], 2, &mut seeded_rng(8)).unwrap();
        let varied = |f: &[f64]| Ok(crate::numerics::sigmoid(3.0 * f[0]));
        let all =
            generate_pseudo_samples(&v, varied, &request(0.0, 0.3, ConfidenceRule::Implicit), 1)
                .unwrap();
        assert_eq!(all.len(), 40);
        assert!(all.iter().all(|s| s.weight == 0.3 && s.anchor == 3));

        let flat = |_: &[f64]| Ok(0.5);
        let none =
            generate_pseudo_samples(&v, flat, &request(0.4, 0.5, ConfidenceRule::Implicit), 1)
                .unwrap();
        assert!(none.is_empty());

        let some =
            generate_pseudo_samples(&v, varied, &request(0.5, 0.5, ConfidenceRule::Implicit), 1)
                .unwrap();
        assert!(some.len() < 40);
        assert!(some
            .iter()
            .all(|s| 2.0 * (s.pseudo_label - 0.5).abs() >= 0.5));

        assert!(generate_pseudo_samples(
            &v,
            varied,
            &request(1.0, 0.5, ConfidenceRule::Implicit),
            1
        )
        .is_err());
        assert!(generate_pseudo_samples(
            &v,
            varied,
            &request(-0.1, 0.5, ConfidenceRule::Implicit),
            1
        )
        .is_err());
    }

    #[test]
    fn reconstruction_rule_keeps_well_reconstructed_samples() {
        let v = VaeParams::new(4, &[4], 2, &mut seeded_rng(8)).unwrap();
        let data: Vec<Vec<f64>> = (0..50)
            .map(|i| standard_normal(4, &mut seeded_rng(i)))
            .collect();
        let rule = ConfidenceRule::reconstruction(&v, &data).unwrap();
        let label = |_: &[f64]| Ok(0.7);
        let all = generate_pseudo_samples(&v, label, &request(0.0, 0.5, rule.clone()), 2).unwrap();
        assert_eq!(all.len(), 40);
        let kept = generate_pseudo_samples(&v, label, &request(0.9, 0.5, rule), 2).unwrap();
        assert!(kept.len() <= 40);
    }

    proptest! {
        #[test]
        fn kl_non_negative(mu in prop::collection::vec(-5.0f64..5.0, 1..6), seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let lv: Vec<f64> = mu.iter().map(|_| rng.random_range(-20.0..20.0)).collect();
            prop_assert!(kl_divergence(&mu, &lv) >= 0.0);
        }

        #[test]
        fn latent_samples_are_exact(mu in prop::collection::vec(-5.0f64..5.0, 3), lv in prop::collection::vec(-25.0f64..25.0, 3), eps in prop::collection::vec(-4.0f64..4.0, 3)) {
            let s = LatentSample::new(mu, lv, eps).unwrap();
            prop_assert!(s.identity_holds());
            prop_assert!(s.logvar.iter().all(|v| v.abs() <= LOGVAR_CLAMP));
        }
    }
}
