//! Rating error and top-K ranking quality.
//!
//! Ranking metrics use binary relevance. Users whose relevant set is empty
//! are left out of the user average and counted in
//! [`MetricReport::users_excluded`].

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user_id: String,
    /// Held-out relevant items.
    pub relevant: Vec<String>,
    /// Top-K recommendations, best first.
    pub ranked: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInput {
    pub k: usize,
    pub users: Vec<UserRanking>,
}

impl EvalInput {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Argument("K must be positive".into()));
        }
        for u in &self.users {
            if u.ranked.len() != self.k {
                return Err(Error::Argument(format!(
                    "user `{}` has {} ranked items, expected K = {}",
                    u.user_id,
                    u.ranked.len(),
                    self.k
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user_id: String,
    pub hits: usize,
    pub precision: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Number of rating pairs behind `mse`.
    pub n: usize,
    pub mse: f64,
    pub k: usize,
    pub precision_at_k: f64,
    pub ndcg_at_k: f64,
    pub users_evaluated: usize,
    pub users_excluded: usize,
    pub per_user: Vec<UserMetrics>,
}

impl MetricReport {
    /// `model,MSE,Precision@K,NDCG` with two decimals.
    pub fn csv_row(&self, model: &str) -> String {
        format!(
            "{model},{:.2},{:.2},{:.2}",
            self.mse, self.precision_at_k, self.ndcg_at_k
        )
    }
}

pub fn mse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} ratings",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Argument("mse of zero ratings".into()));
    }
    let sum: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// `1 / log2(pos + 1)` for 1-based positions `1..=k`.
fn discounts(k: usize) -> Vec<f64> {
    (1..=k).map(|pos| 1.0 / ((pos + 1) as f64).log2()).collect()
}

fn per_user(input: &EvalInput) -> Result<(Vec<UserMetrics>, usize)> {
    input.validate()?;
    let disc = discounts(input.k);
    let mut ideal = vec![0.0; input.k + 1];
    for i in 0..input.k {
        ideal[i + 1] = ideal[i] + disc[i];
    }
    let mut out = Vec::with_capacity(input.users.len());
    let mut excluded = 0;
    for u in &input.users {
        let relevant: HashSet<&str> = u.relevant.iter().map(String::as_str).collect();
        if relevant.is_empty() {
            excluded += 1;
            continue;
        }
        let mut hits = 0;
        let mut dcg = 0.0;
        for (item, d) in u.ranked.iter().zip(&disc) {
            if relevant.contains(item.as_str()) {
                hits += 1;
                dcg += d;
            }
        }
        let idcg = ideal[relevant.len().min(input.k)];
        out.push(UserMetrics {
            user_id: u.user_id.clone(),
            hits,
            precision: hits as f64 / input.k as f64,
            ndcg: dcg / idcg,
        });
    }
    if out.is_empty() {
        return Err(Error::UndefinedMetric(
            "no user has a non-empty relevant set".into(),
        ));
    }
    Ok((out, excluded))
}

fn mean_of(users: &[UserMetrics], f: impl Fn(&UserMetrics) -> f64) -> f64 {
    users.iter().map(f).sum::<f64>() / users.len() as f64
}

/// Mean over users of `|R_u ∩ top-K| / K`.
pub fn precision_at_k(input: &EvalInput) -> Result<f64> {
    let (users, _) = per_user(input)?;
    Ok(mean_of(&users, |u| u.precision))
}

/// Mean over users of `DCG@K / IDCG@K`.
pub fn ndcg_at_k(input: &EvalInput) -> Result<f64> {
    let (users, _) = per_user(input)?;
    Ok(mean_of(&users, |u| u.ndcg))
}

/// MSE over the rating pairs plus both ranking metrics.
pub fn evaluate(predicted: &[f64], actual: &[f64], input: &EvalInput) -> Result<MetricReport> {
    let mse = mse(predicted, actual)?;
    let (users, excluded) = per_user(input)?;
    Ok(MetricReport {
        n: predicted.len(),
        mse,
        k: input.k,
        precision_at_k: mean_of(&users, |u| u.precision),
        ndcg_at_k: mean_of(&users, |u| u.ndcg),
        users_evaluated: users.len(),
        users_excluded: excluded,
        per_user: users,
    })
}

/// Naive reference implementations for cross-checking [`evaluate`].
pub mod oracle {
    use super::{EvalInput, MetricReport, UserMetrics};
    use crate::error::{Error, Result};

    pub fn oracle_metrics(
        predicted: &[f64],
        actual: &[f64],
        input: &EvalInput,
    ) -> Result<MetricReport> {
        input.validate()?;
        if predicted.len() != actual.len() || predicted.is_empty() {
            return Err(Error::Argument(
                "rating vectors must be equal and nonempty".into(),
            ));
        }
        let mut sq = 0.0;
        let mut i = 0;
        while i < predicted.len() {
            let d = predicted[i] - actual[i];
            sq += d * d;
            i += 1;
        }

        let mut users = Vec::new();
        let mut excluded = 0;
        for u in &input.users {
            let mut distinct: Vec<&String> = Vec::new();
            for r in &u.relevant {
                if !distinct.contains(&r) {
                    distinct.push(r);
                }
            }
            if distinct.is_empty() {
                excluded += 1;
                continue;
            }
            let mut hits = 0;
            let mut dcg = 0.0;
            for pos in 1..=input.k {
                let item = &u.ranked[pos - 1];
                if distinct.contains(&item) {
                    hits += 1;
                    dcg += 1.0 / ((pos as f64 + 1.0).ln() / 2f64.ln());
                }
            }
            let mut idcg = 0.0;
            let mut pos = 1;
            while pos <= input.k && pos <= distinct.len() {
                idcg += 1.0 / ((pos as f64 + 1.0).ln() / 2f64.ln());
                pos += 1;
            }
            users.push(UserMetrics {
                user_id: u.user_id.clone(),
                hits,
                precision: hits as f64 / input.k as f64,
                ndcg: dcg / idcg,
            });
        }
        if users.is_empty() {
            return Err(Error::UndefinedMetric(
                "no user has a non-empty relevant set".into(),
            ));
        }
        let mut p = 0.0;
        let mut g = 0.0;
        for u in &users {
            p += u.precision;
            g += u.ndcg;
        }
        Ok(MetricReport {
            n: predicted.len(),
            mse: sq / predicted.len() as f64,
            k: input.k,
            precision_at_k: p / users.len() as f64,
            ndcg_at_k: g / users.len() as f64,
            users_evaluated: users.len(),
            users_excluded: excluded,
            per_user: users,
        })
    }
}
