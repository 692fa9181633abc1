//! Modality embeddings: the JSON-lines interchange format, an in-memory
//! store, and built-in fallback encoders (TF-IDF text, pooled pixels).

mod pixel;
mod tfidf;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use pixel::{pixel_encode, read_pgm, GrayImage, POOLED_SIDE};
pub use tfidf::{tfidf_encode, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Side,
}

impl Modality {
    /// Canonical fusion order.
    pub const CANONICAL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Side];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Side => "side",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Item,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
        }
    }
}

impl std::fmt::Display for EntityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One entity's vector in one modality. Serializes to exactly one line of
/// the embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEmbedding {
    pub entity_id: String,
    pub entity_kind: EntityKind,
    pub modality: Modality,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ModalityEmbedding {
    pub fn new(
        entity_id: impl Into<String>,
        entity_kind: EntityKind,
        modality: Modality,
        values: Vec<f64>,
    ) -> Self {
        Self {
            entity_id: entity_id.into(),
            entity_kind,
            modality,
            dim: values.len(),
            values,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.dim == 0 {
            return Err("dim must be positive".into());
        }
        if self.values.len() != self.dim {
            return Err(format!(
                "declared dim {} but {} values",
                self.dim,
                self.values.len()
            ));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(format!("value {i} is not finite"));
        }
        Ok(())
    }
}

type StoreKey = (EntityKind, String, Modality);

/// Embeddings keyed by (entity kind, entity id, modality). All embeddings
/// of one kind and modality share a dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    entries: BTreeMap<StoreKey, ModalityEmbedding>,
    dims: BTreeMap<(EntityKind, Modality), usize>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, embedding: ModalityEmbedding) -> Result<()> {
        embedding.validate().map_err(Error::Schema)?;
        let dim_key = (embedding.entity_kind, embedding.modality);
        if let Some(&dim) = self.dims.get(&dim_key) {
            if dim != embedding.dim {
                return Err(Error::Schema(format!(
                    "{} {} embeddings have dim {dim}, but `{}` declares dim {}",
                    embedding.entity_kind, embedding.modality, embedding.entity_id, embedding.dim
                )));
            }
        }
        let key = (
            embedding.entity_kind,
            embedding.entity_id.clone(),
            embedding.modality,
        );
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateKey(format!(
                "{} `{}` already has a {} embedding",
                key.0, key.1, key.2
            )));
        }
        self.dims.insert(dim_key, embedding.dim);
        self.entries.insert(key, embedding);
        Ok(())
    }

    /// Declared dimension of a modality for one entity kind.
    pub fn dim(&self, kind: EntityKind, modality: Modality) -> Option<usize> {
        self.dims.get(&(kind, modality)).copied()
    }

    /// Modalities present for an entity kind, in canonical order.
    pub fn modalities(&self, kind: EntityKind) -> Vec<Modality> {
        Modality::CANONICAL
            .into_iter()
            .filter(|m| self.dims.contains_key(&(kind, *m)))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModalityEmbedding> {
        self.entries.values()
    }

    /// Stacks the embeddings of `ids` into a matrix, one row per id.
    pub fn matrix(&self, kind: EntityKind, ids: &[String], modality: Modality) -> Result<Matrix> {
        let dim = self
            .dim(kind, modality)
            .ok_or_else(|| Error::MissingEmbedding {
                entity_id: ids.first().cloned().unwrap_or_default(),
                modality,
            })?;
        let mut values = Vec::with_capacity(ids.len() * dim);
        for id in ids {
            values.extend_from_slice(&get_embedding(self, kind, id, modality)?.values);
        }
        Matrix::from_vec(ids.len(), dim, values)
    }
}

/// Looks up one embedding; a miss is the signal for cold-start handling upstream.
pub fn get_embedding<'a>(
    store: &'a EmbeddingStore,
    kind: EntityKind,
    entity_id: &str,
    modality: Modality,
) -> Result<&'a ModalityEmbedding> {
    store
        .entries
        .get(&(kind, entity_id.to_string(), modality))
        .ok_or_else(|| Error::MissingEmbedding {
            entity_id: entity_id.to_string(),
            modality,
        })
}

/// Reads a JSON-lines embedding file. Blank lines are ignored.
pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_embeddings(reader: impl BufRead) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line.map_err(|e| Error::io("<embeddings>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ModalityEmbedding = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        store.insert(record).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("line {line_no}: {m}")),
            Error::DuplicateKey(m) => Error::DuplicateKey(format!("line {line_no}: {m}")),
            other => other,
        })?;
    }
    Ok(store)
}

pub fn write_embeddings(store: &EmbeddingStore, mut writer: impl Write) -> Result<()> {
    for e in store.iter() {
        serde_json::to_writer(&mut writer, e)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<embeddings>", e))?;
    }
    Ok(())
}

pub fn save_embedding_file(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_embeddings(store, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(id: &str, kind: &str, modality: &str, dim: usize, values: &[f64]) -> String {
        format!(
            r#"{{"entity_id": "{id}", "entity_kind": "{kind}", "modality": "{modality}", "dim": {dim}, "values": {values:?}}}"#
        )
    }

    fn parse(lines: &[String]) -> Result<EmbeddingStore> {
        read_embeddings(lines.join("\n").as_bytes())
    }

    #[test]
    fn empty_input_is_an_empty_store() {
        let store = read_embeddings(&b""[..]).unwrap();
        assert!(store.is_empty());
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let l = line("u1", "user", "text", 2, &[0.1, 0.2]);
        let err = parse(&[l.clone(), l]).unwrap_err();
        assert!(
            matches!(err, Error::DuplicateKey(ref m) if m.contains("line 2")),
            "{err}"
        );
    }

    #[test]
    fn user_and_item_may_share_an_id() {
        let store = parse(&[
            line("7", "user", "text", 2, &[0.1, 0.2]),
            line("7", "item", "text", 3, &[0.1, 0.2, 0.3]),
        ])
        .unwrap();
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn declared_dim_must_match_values() {
        let err = parse(&[
            line("u1", "user", "text", 3, &[0.0, 1.0, 2.0]),
            line("u2", "user", "text", 4, &[0.0, 1.0, 2.0]),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn dim_conflict_names_both_dims() {
        let err = parse(&[
            line("u1", "user", "image", 3, &[0.0, 1.0, 2.0]),
            line("u2", "user", "image", 2, &[0.0, 1.0]),
        ])
        .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Schema(_)));
        assert!(msg.contains("dim 3") && msg.contains("dim 2"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let err = parse(&[line("u1", "user", "text", 1, &[0.5]), "{not json".into()]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse(&[line("u1", "robot", "text", 1, &[0.5])]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn lookup_contract() {
        let store = parse(&[line("u1", "user", "text", 2, &[0.1, -0.2])]).unwrap();
        let e = get_embedding(&store, EntityKind::User, "u1", Modality::Text).unwrap();
        assert_eq!(e.values, vec![0.1, -0.2]);
        assert!(matches!(
            get_embedding(&store, EntityKind::User, "u9", Modality::Text),
            Err(Error::MissingEmbedding { .. })
        ));
        let err = get_embedding(&store, EntityKind::User, "u1", Modality::Image).unwrap_err();
        assert!(err.to_string().contains("u1") && err.to_string().contains("image"));
    }

    proptest! {
        #[test]
        fn write_then_read_round_trips(
            rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..12)
        ) {
            let mut store = EmbeddingStore::new();
            for (i, r) in rows.iter().enumerate() {
                store.insert(ModalityEmbedding::new(format!("i{i}"), EntityKind::Item, Modality::Image, r.clone())).unwrap();
                store.insert(ModalityEmbedding::new(format!("u{i}"), EntityKind::User, Modality::Text, r[..2].to_vec())).unwrap();
            }
            let mut buf = Vec::new();
            write_embeddings(&store, &mut buf).unwrap();
            let back = read_embeddings(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &store);
            let mut buf2 = Vec::new();
            write_embeddings(&back, &mut buf2).unwrap();
            prop_assert_eq!(buf, buf2);
        }
    }
}
