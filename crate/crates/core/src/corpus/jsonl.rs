//! JSONL corpus format: one entity per line.
//!
//! ```text
//! {"id": "b1",
//!  "reviews": [{"text": "great tacos .", "rating": 4.5}],
//!  "images": ["photos/b1_0.raw", {"channels": 3, "height": 32, "width": 32, "data": [...]}],
//!  "table": [{"name": "RestaurantsPriceRange", "type": "ordinal", "value": 2},
//!            {"name": "hours monday", "type": "hours", "value": [9.0, 17.5]}]}
//! ```
//!
//! Image references are paths to raw float files, relative to the corpus
//! file's directory. `images` and `table` may be empty or absent.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CorpusError, CorpusLimits, Entity, Field, FieldValue, Review, TableData, Vocab};
use crate::image::RasterImage;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawReview {
    pub text: String,
    pub rating: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawImage {
    Ref(String),
    Inline { channels: usize, height: usize, width: usize, data: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawField {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub value: Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawEntity {
    pub id: String,
    pub reviews: Vec<RawReview>,
    #[serde(default)]
    pub images: Vec<RawImage>,
    #[serde(default)]
    pub table: Vec<RawField>,
}

impl RawEntity {
    /// Every word this entity contributes to a vocabulary.
    pub fn words(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.reviews {
            out.extend(super::vocab::split_words(&r.text));
        }
        for f in &self.table {
            out.extend(super::vocab::split_words(&f.name));
            if let Value::String(s) = &f.value {
                if f.kind == "nominal" || f.kind == "ordinal" {
                    out.extend(super::vocab::split_words(s));
                }
            }
        }
        out
    }

    pub fn categories(&self) -> Vec<String> {
        let mut out = Vec::new();
        for f in self.table.iter().filter(|f| f.kind == "categorical") {
            match &f.value {
                Value::String(s) => out.push(s.clone()),
                Value::Array(items) => out.extend(items.iter().filter_map(|v| v.as_str().map(str::to_string))),
                _ => {}
            }
        }
        out
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.to_path_buf(), source }
}

pub fn read_raw_corpus(path: &Path) -> Result<Vec<RawEntity>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_raw(&text)
}

fn parse_raw(text: &str) -> Result<Vec<RawEntity>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| CorpusError::Malformed { line: i + 1, source }))
        .collect()
}

/// Loads and tokenizes a corpus file, truncating reviews to
/// `limits.max_review_tokens` tokens.
pub fn load_corpus(path: &Path, vocab: &Vocab, limits: &CorpusLimits) -> Result<Vec<Entity>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_lines(&text, base, vocab, limits)
}

/// Like [`load_corpus`] for in-memory text; image references resolve
/// against the current directory.
pub fn load_corpus_str(text: &str, vocab: &Vocab, limits: &CorpusLimits) -> Result<Vec<Entity>, CorpusError> {
    load_lines(text, Path::new("."), vocab, limits)
}

fn load_lines(text: &str, base: &Path, vocab: &Vocab, limits: &CorpusLimits) -> Result<Vec<Entity>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let raw: RawEntity =
            serde_json::from_str(line).map_err(|source| CorpusError::Malformed { line: line_no, source })?;
        out.push(convert(raw, line_no, base, vocab, limits)?);
    }
    Ok(out)
}

fn invalid(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Invalid { line, message: message.into() }
}

fn convert(raw: RawEntity, line: usize, base: &Path, vocab: &Vocab, limits: &CorpusLimits) -> Result<Entity, CorpusError> {
    let mut reviews = Vec::with_capacity(raw.reviews.len());
    for r in &raw.reviews {
        if !r.rating.is_finite() || r.rating < limits.rating_min || r.rating > limits.rating_max {
            return Err(CorpusError::RatingRange { line, rating: r.rating, min: limits.rating_min, max: limits.rating_max });
        }
        if let Some(step) = limits.rating_step {
            let k = (r.rating - limits.rating_min) / step;
            if (k - k.round()).abs() > 1e-9 {
                return Err(invalid(line, format!("rating {} is not a multiple of {step}", r.rating)));
            }
        }
        let mut tokens = vocab.encode(&r.text);
        if tokens.is_empty() {
            return Err(invalid(line, "empty review text"));
        }
        tokens.truncate(limits.max_review_tokens);
        reviews.push(Review { tokens, rating: r.rating });
    }

    let mut images = Vec::new();
    for im in raw.images.iter().take(limits.max_images) {
        let image = match im {
            RawImage::Ref(rel) => RasterImage::read_raw(&base.join(rel)),
            RawImage::Inline { channels, height, width, data } => RasterImage::new(*channels, *height, *width, data.clone()),
        }
        .map_err(|e| invalid(line, format!("image: {e}")))?;
        let expected = (limits.image_channels, limits.image_height, limits.image_width);
        if image.shape() != expected {
            return Err(invalid(line, format!("image shape {:?}, expected {expected:?}", image.shape())));
        }
        images.push(image);
    }

    let mut fields = Vec::new();
    for f in &raw.table {
        let name = vocab.encode(&f.name);
        if name.is_empty() {
            return Err(invalid(line, "table field with empty name"));
        }
        let bad = |what: &str| invalid(line, format!("field `{}`: {what}", f.name));
        let value = match f.kind.as_str() {
            "nominal" => {
                let s = f.value.as_str().ok_or_else(|| bad("nominal value must be a string"))?;
                let tokens = vocab.encode(s);
                if super::vocab::split_words(&f.name) == ["description"] {
                    for t in tokens.into_iter().take(limits.description_max_tokens) {
                        fields.push(Field { name: name.clone(), value: FieldValue::Nominal(vec![t]) });
                    }
                    continue;
                }
                FieldValue::Nominal(tokens)
            }
            "binary" => match &f.value {
                Value::Bool(b) => FieldValue::Binary(*b),
                Value::String(s) if s == "true" || s == "false" => FieldValue::Binary(s == "true"),
                _ => return Err(bad("binary value must be true or false")),
            },
            "ordinal" => match &f.value {
                Value::String(s) => FieldValue::Ordinal { level: None, label: vocab.encode(s) },
                Value::Number(n) => {
                    let level = n.as_u64().filter(|&l| l >= 1).ok_or_else(|| bad("ordinal level must be a positive integer"))?;
                    let key = super::vocab::split_words(&f.name);
                    let labels = limits
                        .ordinal_labels
                        .iter()
                        .find(|(k, _)| super::vocab::split_words(k) == key)
                        .map(|(_, v)| v)
                        .ok_or_else(|| bad("no ordinal labels declared for this field"))?;
                    let word = labels.get(level as usize - 1).ok_or_else(|| bad("ordinal level out of range"))?;
                    FieldValue::Ordinal { level: Some(level as u32), label: vocab.encode(word) }
                }
                _ => return Err(bad("ordinal value must be a level or a label")),
            },
            "numeric" => {
                let x = f.value.as_f64().filter(|x| x.is_finite()).ok_or_else(|| bad("numeric value must be a number"))?;
                FieldValue::Numeric(x)
            }
            "categorical" => {
                let names: Vec<&str> = match &f.value {
                    Value::String(s) => vec![s.as_str()],
                    Value::Array(items) => {
                        items.iter().map(|v| v.as_str().ok_or_else(|| bad("categories must be strings"))).collect::<Result<_, _>>()?
                    }
                    _ => return Err(bad("categorical value must be a list of strings")),
                };
                if names.is_empty() {
                    return Err(bad("empty category set"));
                }
                let ids = names
                    .iter()
                    .map(|n| vocab.category_id(n).ok_or_else(|| bad(&format!("unknown category `{n}`"))))
                    .collect::<Result<_, _>>()?;
                FieldValue::Categorical(ids)
            }
            "hours" => {
                let pair = f.value.as_array().filter(|a| a.len() == 2).ok_or_else(|| bad("hours must be [open, close]"))?;
                let (open, close) = match (pair[0].as_f64(), pair[1].as_f64()) {
                    (Some(o), Some(c)) => (o, c),
                    _ => return Err(bad("hours must be numbers")),
                };
                if !(0.0..24.0).contains(&open) || !(0.0..24.0).contains(&close) {
                    return Err(bad("hours must lie in [0, 24)"));
                }
                FieldValue::Hours { open, close }
            }
            other => {
                return Err(CorpusError::UnknownFieldType { line, field: f.name.clone(), kind: other.to_string() });
            }
        };
        fields.push(Field { name, value });
    }
    if fields.len() > limits.max_fields {
        return Err(invalid(line, format!("{} table fields exceed the limit of {}", fields.len(), limits.max_fields)));
    }

    Ok(Entity { id: raw.id, reviews, images, table: TableData { fields } })
}

fn to_raw(e: &Entity, vocab: &Vocab) -> RawEntity {
    let reviews = e.reviews.iter().map(|r| RawReview { text: vocab.decode(&r.tokens), rating: r.rating }).collect();
    let images = e
        .images
        .iter()
        .map(|im| {
            let (channels, height, width) = im.shape();
            RawImage::Inline { channels, height, width, data: im.pixels().to_vec() }
        })
        .collect();
    let table = e
        .table
        .fields
        .iter()
        .map(|f| {
            let (kind, value) = match &f.value {
                FieldValue::Nominal(t) => ("nominal", Value::from(vocab.decode(t))),
                FieldValue::Binary(b) => ("binary", Value::from(*b)),
                FieldValue::Ordinal { level: Some(l), .. } => ("ordinal", Value::from(*l)),
                FieldValue::Ordinal { level: None, label } => ("ordinal", Value::from(vocab.decode(label))),
                FieldValue::Numeric(x) => ("numeric", Value::from(*x)),
                FieldValue::Categorical(ids) => (
                    "categorical",
                    Value::from(ids.iter().map(|&c| vocab.category(c).unwrap_or("").to_string()).collect::<Vec<_>>()),
                ),
                FieldValue::Hours { open, close } => ("hours", Value::from(vec![*open, *close])),
            };
            RawField { name: vocab.decode(&f.name), kind: kind.to_string(), value }
        })
        .collect();
    RawEntity { id: e.id.clone(), reviews, images, table }
}

pub fn save_corpus_string(entities: &[Entity], vocab: &Vocab) -> String {
    let mut out = String::new();
    for e in entities {
        out.push_str(&serde_json::to_string(&to_raw(e, vocab)).expect("entity serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: &Path, entities: &[Entity], vocab: &Vocab) -> Result<(), CorpusError> {
    fs::write(path, save_corpus_string(entities, vocab)).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_for(text: &str) -> Vocab {
        super::super::build_vocab(&parse_raw(text).unwrap(), &CorpusLimits::default(), 1000)
    }

    const TWO: &str = r#"{"id":"a","reviews":[{"text":"Good food.","rating":4},{"text":"ok","rating":3.5}],"table":[{"name":"RestaurantsPriceRange","type":"ordinal","value":2},{"name":"categories","type":"categorical","value":["thai","bars"]},{"name":"hours monday","type":"hours","value":[9,17]},{"name":"stars","type":"numeric","value":4.5},{"name":"wifi","type":"binary","value":true}]}
{"id":"b","reviews":[{"text":"bad","rating":1}],"images":[],"table":[]}
"#;

    #[test]
    fn loads_two_entities() {
        let v = vocab_for(TWO);
        let es = load_corpus_str(TWO, &v, &CorpusLimits::default()).unwrap();
        assert_eq!(es.len(), 2);
        assert_eq!(es[0].table.fields.len(), 5);
        assert_eq!(v.decode(&es[0].reviews[0].tokens), "good food .");
        match &es[0].table.fields[0].value {
            FieldValue::Ordinal { level: Some(2), label } => assert_eq!(v.decode(label), "average"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rating_out_of_range_is_an_error() {
        let text = r#"{"id":"a","reviews":[{"text":"x","rating":9.0}]}"#;
        let err = load_corpus_str(text, &vocab_for(text), &CorpusLimits::default()).unwrap_err();
        assert!(matches!(err, CorpusError::RatingRange { line: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", TWO.lines().next().unwrap());
        let err = load_corpus_str(&text, &vocab_for(TWO), &CorpusLimits::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }));
    }

    #[test]
    fn unknown_field_type_names_the_field() {
        let text = r#"{"id":"a","reviews":[{"text":"x","rating":3}],"table":[{"name":"color","type":"rgb","value":1}]}"#;
        let err = load_corpus_str(text, &vocab_for(text), &CorpusLimits::default()).unwrap_err();
        match err {
            CorpusError::UnknownFieldType { field, kind, .. } => {
                assert_eq!(field, "color");
                assert_eq!(kind, "rgb");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn long_reviews_are_truncated_to_limit() {
        let words: Vec<String> = (0..200).map(|i| format!("w{}", i % 7)).collect();
        let text = format!(r#"{{"id":"a","reviews":[{{"text":"{}","rating":3}}]}}"#, words.join(" "));
        let es = load_corpus_str(&text, &vocab_for(&text), &CorpusLimits::default()).unwrap();
        assert_eq!(es[0].reviews[0].tokens.len(), 128);
    }

    #[test]
    fn description_tokens_become_fields() {
        let text = r#"{"id":"a","reviews":[{"text":"x","rating":3}],"table":[{"name":"description","type":"nominal","value":"soft warm blanket"}]}"#;
        let v = vocab_for(text);
        let es = load_corpus_str(text, &v, &CorpusLimits::default()).unwrap();
        assert_eq!(es[0].table.fields.len(), 3);
        assert!(es[0].table.fields.iter().all(|f| v.decode(&f.name) == "description"));
    }

    #[test]
    fn unknown_category_is_an_error() {
        let text = r#"{"id":"a","reviews":[{"text":"x","rating":3}],"table":[{"name":"categories","type":"categorical","value":["zzz"]}]}"#;
        let v = vocab_for(TWO);
        assert!(load_corpus_str(text, &v, &CorpusLimits::default()).is_err());
    }

    #[test]
    fn save_then_load_is_identity() {
        let v = vocab_for(TWO);
        let limits = CorpusLimits::default();
        let es = load_corpus_str(TWO, &v, &limits).unwrap();
        let again = load_corpus_str(&save_corpus_string(&es, &v), &v, &limits).unwrap();
        assert_eq!(es, again);
    }

    #[test]
    fn image_refs_resolve_next_to_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::new(3, 32, 32, vec![0.25; 3 * 32 * 32]).unwrap();
        img.write_raw(&dir.path().join("p.raw")).unwrap();
        let line = r#"{"id":"a","reviews":[{"text":"x","rating":3}],"images":["p.raw"]}"#;
        let path = dir.path().join("c.jsonl");
        fs::write(&path, line).unwrap();
        let es = load_corpus(&path, &vocab_for(line), &CorpusLimits::default()).unwrap();
        assert_eq!(es[0].images, vec![img]);
    }
}
