use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{synth_generate, SynthSpec};
use crate::embeddings::{EntityKind, Modality};
use crate::error::{Error, Result};
use crate::fusion::{fuse_late, Combine, FusionConfig, FusionMode};
use crate::numerics::{
    grad_check, grad_check_params, seeded_rng, sigmoid, zeros_like, Activation, DenseLayer,
    GradCheckReport, Mlp, Parameters, SeededRng,
};
use crate::recsys::{FeatureTable, Features, HeadKind, HybridModel, ModelConfig, Source};
use crate::vae::{elbo_with_grad, standard_normal, VaeParams};

const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteModule {
    Numerics,
    Vae,
    Recsys,
    Fusion,
    All,
}

impl SuiteModule {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteModule::Numerics => "numerics",
            SuiteModule::Vae => "vae",
            SuiteModule::Recsys => "recsys",
            SuiteModule::Fusion => "fusion",
            SuiteModule::All => "all",
        }
    }
}

impl fmt::Display for SuiteModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SuiteModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "numerics" => Ok(SuiteModule::Numerics),
            "vae" => Ok(SuiteModule::Vae),
            "recsys" => Ok(SuiteModule::Recsys),
            "fusion" => Ok(SuiteModule::Fusion),
            "all" => Ok(SuiteModule::All),
            other => Err(Error::Usage(format!("unknown module `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub module: SuiteModule,
    pub check: String,
    pub report: GradCheckReport,
}

fn jitter<P: Parameters + ?Sized>(p: &mut P, scale: f64, rng: &mut SeededRng) {
    // moves biases off zero so no relu sits exactly on its kink
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += scale * (rng.random::<f64>() - 0.5);
        }
    }
}

fn random_vec(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn numerics_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::new();
    for act in [
        Activation::Identity,
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
    ] {
        let mut layer = crate::numerics::init::init_dense(5, 4, act, &mut rng)?;
        jitter(&mut layer, 0.2, &mut rng);
        let x = random_vec(5, &mut rng);
        let c = random_vec(4, &mut rng);
        let loss = |l: &DenseLayer, x: &[f64]| -> (f64, DenseLayer, Vec<f64>) {
            let (y, cache) = l.forward(x).expect("shapes fixed above");
            let mut g = zeros_like(l);
            let dx = l
                .backward_into(&cache, &c, &mut g)
                .expect("shapes fixed above");
            (y.iter().zip(&c).map(|(a, b)| a * b).sum(), g, dx)
        };
        let r = grad_check_params(
            &layer,
            |l: &DenseLayer| {
                let (v, g, _) = loss(l, &x);
                (v, g)
            },
            TOLERANCE,
        )?;
        out.push((format!("dense {act:?} parameters").to_lowercase(), r));
        let r = grad_check(
            |x: &[f64]| {
                let (v, _, dx) = loss(&layer, x);
                (v, dx)
            },
            &x,
            TOLERANCE,
        )?;
        out.push((format!("dense {act:?} input").to_lowercase(), r));
    }

    let dims = [
        (6, 8, Activation::Relu),
        (8, 5, Activation::Tanh),
        (5, 3, Activation::Sigmoid),
        (3, 2, Activation::Identity),
    ];
    let mut layers = Vec::new();
    for (i, o, a) in dims {
        layers.push(crate::numerics::init::init_dense(i, o, a, &mut rng)?);
    }
    let mut mlp = Mlp::new(layers)?;
    jitter(&mut mlp, 0.2, &mut rng);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(6, &mut rng)).collect();
    let target = random_vec(2, &mut rng);
    let r = grad_check_params(
        &mlp,
        |m: &Mlp| {
            let mut g = zeros_like(m);
            let mut loss = 0.0;
            for x in &xs {
                let (y, caches) = m.forward(x).expect("shapes fixed above");
                let d: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
                loss += 0.5 * d.iter().map(|v| v * v).sum::<f64>();
                m.backward_into(&caches, &d, &mut g)
                    .expect("shapes fixed above");
            }
            (loss, g)
        },
        TOLERANCE,
    )?;
    out.push(("mlp stack".into(), r));
    Ok(out)
}

fn vae_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::new();
    for (hidden, beta) in [(vec![5], 1.0), (vec![7, 4], 0.3)] {
        let mut vae = VaeParams::new(6, &hidden, 3, &mut rng)?;
        jitter(&mut vae, 0.2, &mut rng);
        let data: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| (random_vec(6, &mut rng), standard_normal(3, &mut rng)))
            .collect();
        let r = grad_check_params(
            &vae,
            |p: &VaeParams| {
                let mut g = zeros_like(p);
                let mut loss = 0.0;
                for (x, eps) in &data {
                    let (terms, gi) = elbo_with_grad(p, x, eps, beta).expect("shapes fixed above");
                    loss += terms.total;
                    crate::numerics::add_scaled(&mut g, &gi, 1.0);
                }
                (loss, g)
            },
            TOLERANCE,
        )?;
        out.push((format!("elbo hidden {hidden:?} beta {beta}"), r));
    }
    Ok(out)
}

fn small_features(side: bool) -> Result<Features> {
    let synth = synth_generate(&SynthSpec {
        users: 5,
        items: 4,
        density: 0.6,
        text_dim: 4,
        image_dim: 3,
        side_dim: 2,
        latent_dim: 3,
        seed: 17,
        ..SynthSpec::default()
    })?;
    let mods = [Modality::Text, Modality::Image];
    Ok(Features {
        user: FeatureTable::from_store(
            &synth.embeddings,
            EntityKind::User,
            &synth.dataset.users,
            &mods,
            side,
        )?,
        item: FeatureTable::from_store(
            &synth.embeddings,
            EntityKind::Item,
            &synth.dataset.items,
            &mods,
            side,
        )?,
    })
}

fn model_check(
    config: &ModelConfig,
    fusion: &FusionConfig,
    features: &Features,
    rng: &mut SeededRng,
) -> Result<GradCheckReport> {
    let mut model = HybridModel::new(config, fusion, features, rng)?;
    model.user.seen.iter_mut().for_each(|s| *s = true);
    model.item.seen.iter_mut().for_each(|s| *s = true);
    jitter(&mut model, 0.1, rng);
    let pairs = [(0, 1, 0.9), (2, 3, 0.1), (4, 0, 0.6), (1, 2, 0.3)];
    let fused = model
        .fused_dim(EntityKind::Item)
        .map(|d| random_vec(d, rng));
    grad_check_params(
        &model,
        |m: &HybridModel| {
            let mut g = zeros_like(m);
            let mut loss = 0.0;
            let mut step = |user: Source<'_>, item: Source<'_>, y: f64| {
                let c = m
                    .forward(features, user, item)
                    .expect("indices fixed above");
                let p = sigmoid(c.logit);
                loss += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                m.backward_into(&c, p - y, &mut g)
                    .expect("shapes fixed above");
            };
            for (u, i, y) in pairs {
                step(Source::Entity(u), Source::Entity(i), y);
            }
            if let Some(f) = &fused {
                step(Source::Entity(3), Source::Fused(f), 0.7);
            }
            (loss, g)
        },
        TOLERANCE,
    )
}

fn recsys_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = seeded_rng(seed);
    let features = small_features(false)?;
    let mut out = Vec::new();
    for (name, head, content, t) in [
        (
            "neumf embedding tables",
            HeadKind::NeuMf,
            false,
            Activation::Identity,
        ),
        (
            "neumf tanh gmf, embedding tables",
            HeadKind::NeuMf,
            false,
            Activation::Tanh,
        ),
        (
            "neumf content + ids",
            HeadKind::NeuMf,
            true,
            Activation::Identity,
        ),
        (
            "mf embedding tables",
            HeadKind::Mf,
            false,
            Activation::Identity,
        ),
        ("mf content + ids", HeadKind::Mf, true, Activation::Identity),
    ] {
        let cfg = ModelConfig {
            head,
            embedding_dim: 3,
            mlp_hidden: vec![6, 4],
            gmf_activation: t,
            use_content: content,
            ..ModelConfig::default()
        };
        out.push((
            name.to_string(),
            model_check(
                &cfg,
                &FusionConfig {
                    projection_dim: 4,
                    ..FusionConfig::default()
                },
                &features,
                &mut rng,
            )?,
        ));
    }
    Ok(out)
}

fn fusion_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::new();
    let cfg = ModelConfig {
        embedding_dim: 3,
        mlp_hidden: vec![5],
        ..ModelConfig::default()
    };
    let modes = [
        ("early", FusionMode::Early, Combine::Mlp),
        (
            "intermediate concat",
            FusionMode::Intermediate,
            Combine::Concat,
        ),
        (
            "intermediate weighted sum",
            FusionMode::Intermediate,
            Combine::WeightedSum,
        ),
        ("intermediate mlp", FusionMode::Intermediate, Combine::Mlp),
    ];
    for side in [false, true] {
        let features = small_features(side)?;
        for (name, mode, combine) in modes {
            let fusion = FusionConfig {
                mode,
                combine,
                projection_dim: 4,
                ..FusionConfig::default()
            };
            let label = if side {
                format!("{name} + side restore")
            } else {
                name.to_string()
            };
            out.push((label, model_check(&cfg, &fusion, &features, &mut rng)?));
        }
    }

    let weights = [0.2, 0.5, 0.3];
    let preds = random_vec(3, &mut rng);
    let r = grad_check(
        |p: &[f64]| {
            let y = fuse_late(p, &weights).expect("weights are convex");
            (y * y, weights.iter().map(|w| 2.0 * y * w).collect())
        },
        &preds,
        TOLERANCE,
    )?;
    out.push(("late".into(), r));
    Ok(out)
}

/// Finite-difference checks of every trainable component of `module`.
pub fn gradcheck_suite(module: SuiteModule, seed: u64) -> Result<Vec<SuiteResult>> {
    let modules = match module {
        SuiteModule::All => vec![
            SuiteModule::Numerics,
            SuiteModule::Vae,
            SuiteModule::Recsys,
            SuiteModule::Fusion,
        ],
        m => vec![m],
    };
    let mut results = Vec::new();
    for m in modules {
        let checks = match m {
            SuiteModule::Numerics => numerics_checks(seed)?,
            SuiteModule::Vae => vae_checks(seed)?,
            SuiteModule::Recsys => recsys_checks(seed)?,
            SuiteModule::Fusion => fusion_checks(seed)?,
            SuiteModule::All => unreachable!("expanded above"),
        };
        results.extend(checks.into_iter().map(|(check, report)| SuiteResult {
            module: m,
            check,
            report,
        }));
    }
    Ok(results)
}
