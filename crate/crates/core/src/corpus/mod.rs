//! Entities, reviews and metadata tables, plus the self-supervised pair
//! construction used by every training stage.

mod jsonl;
pub mod synth;
pub mod vocab;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::RasterImage;
pub use jsonl::{load_corpus, load_corpus_str, read_raw_corpus, save_corpus, save_corpus_string, RawEntity};
pub use vocab::{CategoryId, TokenId, Vocab};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: malformed entity: {source}")]
    Malformed { line: usize, source: serde_json::Error },
    #[error("line {line}: field `{field}` has unknown value type `{kind}`")]
    UnknownFieldType { line: usize, field: String, kind: String },
    #[error("line {line}: rating {rating} outside [{min}, {max}]")]
    RatingRange { line: usize, rating: f64, min: f64, max: f64 },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("entity `{id}` has {count} review(s); leave-one-out needs at least 2")]
    DegenerateEntity { id: String, count: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Review {
    pub tokens: Vec<TokenId>,
    pub rating: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldValue {
    Nominal(Vec<TokenId>),
    Binary(bool),
    /// `level` is the 1-based rank when the corpus gave one; `label` holds
    /// the words the level stands for.
    Ordinal { level: Option<u32>, label: Vec<TokenId> },
    Numeric(f64),
    Categorical(Vec<CategoryId>),
    /// Opening and closing time in fractional hours.
    Hours { open: f64, close: f64 },
}

impl FieldValue {
    pub fn kind(&self) -> &'static str {
        match self {
            FieldValue::Nominal(_) => "nominal",
            FieldValue::Binary(_) => "binary",
            FieldValue::Ordinal { .. } => "ordinal",
            FieldValue::Numeric(_) => "numeric",
            FieldValue::Categorical(_) => "categorical",
            FieldValue::Hours { .. } => "hours",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub name: Vec<TokenId>,
    pub value: FieldValue,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TableData {
    pub fields: Vec<Field>,
}

impl TableData {
    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub id: String,
    pub reviews: Vec<Review>,
    pub images: Vec<RasterImage>,
    pub table: TableData,
}

impl Entity {
    pub fn mean_rating(&self) -> f64 {
        self.reviews.iter().map(|r| r.rating).sum::<f64>() / self.reviews.len() as f64
    }
}

/// Ingestion limits and schema knowledge applied while loading a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusLimits {
    /// Reviews are truncated to this many tokens.
    pub max_review_tokens: usize,
    pub rating_min: f64,
    pub rating_max: f64,
    /// When set, ratings must be multiples of this step. Absent from a
    /// config file means unset, so configs round-trip.
    #[serde(default)]
    pub rating_step: Option<f64>,
    /// Images beyond this count are dropped.
    pub max_images: usize,
    pub max_fields: usize,
    pub description_max_tokens: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Words for each 1-based level of an ordinal field, keyed by field name.
    pub ordinal_labels: BTreeMap<String, Vec<String>>,
}

impl Default for CorpusLimits {
    fn default() -> Self {
        let mut ordinal_labels = BTreeMap::new();
        ordinal_labels.insert(
            "RestaurantsPriceRange".to_string(),
            ["cheap", "average", "expensive", "very expensive"].iter().map(|s| s.to_string()).collect(),
        );
        Self {
            max_review_tokens: 128,
            rating_min: 1.0,
            rating_max: 5.0,
            rating_step: Some(0.5),
            max_images: 10,
            max_fields: 5 + 128,
            description_max_tokens: 128,
            image_channels: 3,
            image_height: 32,
            image_width: 32,
            ordinal_labels,
        }
    }
}

/// Builds a vocabulary over raw entities, including the words that ordinal
/// levels in `limits` expand to.
pub fn build_vocab(raw: &[RawEntity], limits: &CorpusLimits, max_size: usize) -> Vocab {
    let mut words: Vec<String> = raw.iter().flat_map(RawEntity::words).collect();
    for labels in limits.ordinal_labels.values() {
        for l in labels {
            words.extend(vocab::split_words(l));
        }
    }
    let cats: Vec<String> = raw.iter().flat_map(RawEntity::categories).collect();
    Vocab::build(words.iter().map(String::as_str), cats.iter().map(String::as_str), max_size)
}

/// One leave-one-out instance: review `target` is generated from all the
/// other reviews of the same entity.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub target: usize,
    /// Indices of the source reviews, in corpus order.
    pub sources: Vec<usize>,
    /// Mean source rating minus target rating.
    pub sd: f64,
}

impl TrainingPair {
    pub fn target_review<'e>(&self, entity: &'e Entity) -> &'e Review {
        &entity.reviews[self.target]
    }

    pub fn source_reviews<'e>(&self, entity: &'e Entity) -> Vec<&'e Review> {
        self.sources.iter().map(|&i| &entity.reviews[i]).collect()
    }
}

/// All `N` leave-one-out pairs of an entity, pair `j` targeting review `j`.
pub fn build_leave_one_out_pairs(entity: &Entity) -> Result<Vec<TrainingPair>, CorpusError> {
    let n = entity.reviews.len();
    if n < 2 {
        return Err(CorpusError::DegenerateEntity { id: entity.id.clone(), count: n });
    }
    Ok((0..n)
        .map(|j| {
            let sources: Vec<usize> = (0..n).filter(|&i| i != j).collect();
            let mean = sources.iter().map(|&i| entity.reviews[i].rating).sum::<f64>() / (n - 1) as f64;
            TrainingPair { target: j, sources, sd: mean - entity.reviews[j].rating }
        })
        .collect())
}

/// A single-reference pair for non-text pretraining: the images and table of
/// `entity` paired with one of its reviews.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferencePair {
    pub entity: usize,
    pub target: usize,
}

/// Splits an entity's multiple references into `N` single-reference pairs.
pub fn flatten_multireference(entity_index: usize, entity: &Entity) -> Vec<ReferencePair> {
    (0..entity.reviews.len()).map(|target| ReferencePair { entity: entity_index, target }).collect()
}
