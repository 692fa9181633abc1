use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::l2_norm;

/// Splits on Unicode whitespace, removes ASCII punctuation and lowercases.
/// Tokens that end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// TF-IDF vectors of dimension `vocab_size` for every document.
///
/// The vocabulary holds the `vocab_size` tokens with the highest document
/// frequency (ties by token order); coordinate `j` is the `j`-th vocabulary
/// entry. `idf = ln((1 + N) / (1 + df)) + 1` with raw term counts, and each
/// vector is L2-normalized unless it is all zero.
pub fn tfidf_encode(
    corpus: &[(String, String)],
    vocab_size: usize,
) -> Result<Vec<(String, Vec<f64>)>> {
    if corpus.is_empty() {
        return Err(Error::Argument("tf-idf corpus is empty".into()));
    }
    if vocab_size == 0 {
        return Err(Error::Argument("vocab_size must be positive".into()));
    }
    let docs: Vec<Vec<String>> = corpus.iter().map(|(_, text)| tokenize(text)).collect();

    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in &docs {
        let mut seen: Vec<&str> = doc.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    if df.is_empty() {
        return Err(Error::EmptyVocabulary);
    }

    let mut ranked: Vec<(&str, usize)> = df.into_iter().collect();
    // BTreeMap order is already lexicographic; a stable sort keeps it for ties.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(vocab_size);

    let n_docs = docs.len() as f64;
    let index: HashMap<&str, usize> = ranked
        .iter()
        .enumerate()
        .map(|(j, (t, _))| (*t, j))
        .collect();
    let idf: Vec<f64> = ranked
        .iter()
        .map(|&(_, df)| ((1.0 + n_docs) / (1.0 + df as f64)).ln() + 1.0)
        .collect();

    Ok(corpus
        .iter()
        .zip(&docs)
        .map(|((id, _), doc)| {
            let mut v = vec![0.0; vocab_size];
            for t in doc {
                if let Some(&j) = index.get(t.as_str()) {
                    v[j] += 1.0;
                }
            }
            for (x, w) in v.iter_mut().zip(&idf) {
                *x *= w;
            }
            let norm = l2_norm(&v);
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            (id.clone(), v)
        })
        .collect())
}
