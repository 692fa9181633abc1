//! Interaction datasets: loading, splitting, synthetic generation.

mod split;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{
    load_embedding_file, save_embedding_file, EmbeddingStore, EntityKind, Modality,
    ModalityEmbedding,
};
use crate::error::{Error, Result};

pub use split::{
    build_cold_start_scenario, cross_validation_scenarios, kfold_split, ColdStartScenario,
    FoldAssignment,
};
pub use synth::{synth_generate, GroundTruth, SynthOutput, SynthSpec};

pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const SIDE_FEATURES_FILE: &str = "side_features.csv";
pub const LATENTS_FILE: &str = "latents.json";

const INTERACTION_COLUMNS: [&str; 4] = ["user_id", "item_id", "rating", "timestamp"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl RatingScale {
    pub const UNIT: RatingScale = RatingScale { min: 0.0, max: 1.0 };

    pub fn normalize(&self, rating: f64) -> f64 {
        (rating - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        self.min + value * (self.max - self.min)
    }

    fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.max > self.min) {
            return Err(Error::Schema(format!(
                "rating scale [{}, {}] is not a proper interval",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SideFeatureKind {
    Numeric,
    /// Expanded one-hot in the listed category order.
    Categorical {
        categories: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideFeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: SideFeatureKind,
}

impl SideFeatureSpec {
    fn width(&self) -> usize {
        match &self.kind {
            SideFeatureKind::Numeric => 1,
            SideFeatureKind::Categorical { categories } => categories.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    pub rating_scale: RatingScale,
    /// Interactions are events rather than graded ratings.
    #[serde(default)]
    pub implicit: bool,
    #[serde(default)]
    pub side_features: Vec<SideFeatureSpec>,
    /// Free-text descriptions of features, keyed by feature name.
    #[serde(default)]
    pub descriptions: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(rating_scale: RatingScale) -> Self {
        Self {
            name: String::new(),
            rating_scale,
            implicit: false,
            side_features: Vec::new(),
            descriptions: BTreeMap::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_reader(BufReader::new(file))?;
        m.rating_scale.validate()?;
        Ok(m)
    }

    /// Width of a side-feature row after one-hot expansion.
    pub fn side_dim(&self) -> usize {
        self.side_features.iter().map(SideFeatureSpec::width).sum()
    }
}

/// One observed (user, item) event. Ids are indices into the owning dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    /// Rating normalized to `[0, 1]`.
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub interactions: Vec<Interaction>,
    pub manifest: Manifest,
    /// One-hot expanded side features keyed by (kind, entity id).
    pub side_features: BTreeMap<(EntityKind, String), Vec<f64>>,
    /// Rows dropped on load because a later row had the same (user, item).
    pub duplicates_replaced: usize,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn entity_ids(&self, kind: EntityKind) -> &[String] {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }

    pub fn index_of(&self, kind: EntityKind, id: &str) -> Option<usize> {
        self.entity_ids(kind).iter().position(|x| x == id)
    }

    /// Appends entities that have embeddings but no interactions, in id
    /// order, and returns how many were added.
    pub fn include_store_entities(&mut self, store: &EmbeddingStore) -> usize {
        let mut added = 0;
        for kind in [EntityKind::User, EntityKind::Item] {
            let known: std::collections::HashSet<String> =
                self.entity_ids(kind).iter().cloned().collect();
            let extra: std::collections::BTreeSet<String> = store
                .iter()
                .filter(|e| e.entity_kind == kind && !known.contains(&e.entity_id))
                .map(|e| e.entity_id.clone())
                .collect();
            added += extra.len();
            match kind {
                EntityKind::User => self.users.extend(extra),
                EntityKind::Item => self.items.extend(extra),
            }
        }
        added
    }

    /// Side features as `side`-modality embeddings.
    pub fn side_embeddings(&self) -> Vec<ModalityEmbedding> {
        self.side_features
            .iter()
            .map(|((kind, id), v)| {
                ModalityEmbedding::new(id.clone(), *kind, Modality::Side, v.clone())
            })
            .collect()
    }

    pub fn write_interactions(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(INTERACTION_COLUMNS)?;
        let scale = self.manifest.rating_scale;
        for it in &self.interactions {
            w.write_record([
                self.users[it.user].as_str(),
                self.items[it.item].as_str(),
                &format_rating(scale.denormalize(it.rating)),
                &it.timestamp.map(|t| t.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_side_features(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["entity_id".to_string(), "kind".to_string()];
        header.extend(self.manifest.side_features.iter().map(|f| f.name.clone()));
        w.write_record(&header)?;
        for ((kind, id), values) in &self.side_features {
            let mut row = vec![id.clone(), kind.as_str().to_string()];
            let mut offset = 0;
            for spec in &self.manifest.side_features {
                match &spec.kind {
                    SideFeatureKind::Numeric => row.push(format_rating(values[offset])),
                    SideFeatureKind::Categorical { categories } => {
                        let hot = values[offset..offset + categories.len()]
                            .iter()
                            .position(|v| *v == 1.0)
                            .unwrap_or(0);
                        row.push(categories[hot].clone());
                    }
                }
                offset += spec.width();
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn format_rating(v: f64) -> String {
    // shortest representation that parses back to the same f64
    format!("{v:?}")
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses an interactions CSV (`user_id,item_id,rating,timestamp`). Ratings
/// are checked against the manifest scale and normalized to `[0, 1]`;
/// duplicate pairs keep the last row.
pub fn read_interactions(reader: impl Read, manifest: &Manifest) -> Result<Dataset> {
    manifest.rating_scale.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if let Some(bad) = cols.iter().find(|c| !INTERACTION_COLUMNS.contains(c)) {
        return Err(parse_err(1, format!("unknown column `{bad}`")));
    }
    let col = |name: &str| cols.iter().position(|c| *c == name);
    let (Some(cu), Some(ci), Some(cr)) = (col("user_id"), col("item_id"), col("rating")) else {
        return Err(parse_err(
            1,
            "header must contain user_id, item_id and rating",
        ));
    };
    let ct = col("timestamp");

    let mut users: Vec<String> = Vec::new();
    let mut items: Vec<String> = Vec::new();
    let mut user_idx: HashMap<String, usize> = HashMap::new();
    let mut item_idx: HashMap<String, usize> = HashMap::new();
    let mut pair_pos: HashMap<(usize, usize), usize> = HashMap::new();
    let mut interactions = Vec::new();
    let mut duplicates = 0;
    let scale = manifest.rating_scale;

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let (uid, iid) = (field(cu), field(ci));
        if uid.is_empty() || iid.is_empty() {
            return Err(parse_err(line, "empty user or item id"));
        }
        let raw = field(cr);
        let rating: f64 = if raw.is_empty() && manifest.implicit {
            scale.max
        } else {
            raw.parse()
                .map_err(|_| parse_err(line, format!("rating `{raw}` is not a number")))?
        };
        if !rating.is_finite() || rating < scale.min || rating > scale.max {
            return Err(Error::Scale {
                line,
                rating,
                min: scale.min,
                max: scale.max,
            });
        }
        let timestamp = match ct.map(field) {
            None | Some("") => None,
            Some(t) => Some(
                t.parse::<i64>()
                    .map_err(|_| parse_err(line, format!("timestamp `{t}` is not an integer")))?,
            ),
        };
        let u = *user_idx.entry(uid.to_string()).or_insert_with(|| {
            users.push(uid.to_string());
            users.len() - 1
        });
        let i = *item_idx.entry(iid.to_string()).or_insert_with(|| {
            items.push(iid.to_string());
            items.len() - 1
        });
        let it = Interaction {
            user: u,
            item: i,
            rating: scale.normalize(rating),
            timestamp,
        };
        match pair_pos.get(&(u, i)) {
            Some(&pos) => {
                interactions[pos] = it;
                duplicates += 1;
            }
            None => {
                pair_pos.insert((u, i), interactions.len());
                interactions.push(it);
            }
        }
    }
    if interactions.is_empty() {
        return Err(parse_err(1, "no interactions after the header"));
    }
    Ok(Dataset {
        users,
        items,
        interactions,
        manifest: manifest.clone(),
        side_features: BTreeMap::new(),
        duplicates_replaced: duplicates,
    })
}

pub fn load_interactions(path: impl AsRef<Path>, manifest: &Manifest) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_interactions(BufReader::new(file), manifest)
}

/// Parses a side-feature CSV (`entity_id,kind,<manifest columns>`),
/// expanding categorical columns one-hot.
pub fn read_side_features(
    reader: impl Read,
    manifest: &Manifest,
) -> Result<BTreeMap<(EntityKind, String), Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected: Vec<&str> = ["entity_id", "kind"]
        .into_iter()
        .chain(manifest.side_features.iter().map(|f| f.name.as_str()))
        .collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(
            1,
            format!("side-feature header must be `{}`", expected.join(",")),
        ));
    }
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record.get(0).unwrap_or("");
        if id.is_empty() {
            return Err(parse_err(line, "empty entity id"));
        }
        let kind = match record.get(1).unwrap_or("") {
            "user" => EntityKind::User,
            "item" => EntityKind::Item,
            other => {
                return Err(parse_err(
                    line,
                    format!("kind `{other}` is not user or item"),
                ))
            }
        };
        let mut row = Vec::with_capacity(manifest.side_dim());
        for (spec, raw) in manifest.side_features.iter().zip(record.iter().skip(2)) {
            match &spec.kind {
                SideFeatureKind::Numeric => {
                    let v: f64 = raw
                        .parse()
                        .ok()
                        .filter(|v: &f64| v.is_finite())
                        .ok_or_else(|| {
                            parse_err(line, format!("{}: `{raw}` is not a number", spec.name))
                        })?;
                    row.push(v);
                }
                SideFeatureKind::Categorical { categories } => {
                    let hot = categories.iter().position(|c| c == raw).ok_or_else(|| {
                        parse_err(line, format!("{}: unknown category `{raw}`", spec.name))
                    })?;
                    row.extend((0..categories.len()).map(|j| if j == hot { 1.0 } else { 0.0 }));
                }
            }
        }
        if out.insert((kind, id.to_string()), row).is_some() {
            return Err(Error::DuplicateKey(format!(
                "line {line}: side features for {kind} `{id}`"
            )));
        }
    }
    Ok(out)
}

/// A dataset directory together with its embeddings.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub dataset: Dataset,
    pub embeddings: EmbeddingStore,
}

/// Loads `manifest.json`, `interactions.csv`, and when present
/// `embeddings.jsonl` and `side_features.csv` from `dir`. Side features are
/// also inserted into the store as the `side` modality.
pub fn load_data_dir(dir: impl AsRef<Path>) -> Result<DataBundle> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir.join(MANIFEST_FILE))?;
    let mut dataset = load_interactions(dir.join(INTERACTIONS_FILE), &manifest)?;
    let emb_path = dir.join(EMBEDDINGS_FILE);
    let mut embeddings = if emb_path.exists() {
        load_embedding_file(&emb_path)?
    } else {
        EmbeddingStore::new()
    };
    let side_path = dir.join(SIDE_FEATURES_FILE);
    if side_path.exists() && !manifest.side_features.is_empty() {
        let file = File::open(&side_path).map_err(|e| Error::io(&side_path, e))?;
        dataset.side_features = read_side_features(BufReader::new(file), &manifest)?;
        for e in dataset.side_embeddings() {
            embeddings.insert(e)?;
        }
    }
    Ok(DataBundle {
        dataset,
        embeddings,
    })
}

/// Writes the layout read by [`load_data_dir`]. Side-modality embeddings go
/// to the side-feature CSV rather than the embedding file.
pub fn save_data_dir(
    dir: impl AsRef<Path>,
    dataset: &Dataset,
    embeddings: &EmbeddingStore,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    dataset.write_interactions(dir.join(INTERACTIONS_FILE))?;
    let mut modal = EmbeddingStore::new();
    for e in embeddings.iter().filter(|e| e.modality != Modality::Side) {
        modal.insert(e.clone())?;
    }
    save_embedding_file(&modal, dir.join(EMBEDDINGS_FILE))?;
    if !dataset.side_features.is_empty() {
        dataset.write_side_features(dir.join(SIDE_FEATURES_FILE))?;
    }
    Ok(())
}
