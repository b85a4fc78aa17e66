//! Deterministic synthetic restaurant corpus.
//!
//! Each entity has latent attributes (cuisine, quality, price level, an
//! ambience class rendered into its images, a signature dish) and every
//! review is produced from sentence templates over those attributes.
//!
//! Table-only tokens: exactly one review per entity ends with the sentence
//! `known for the <signature> .`, where `<signature>` is one of
//! [`SIGNATURE_WORDS`] and equals the entity's `specialty` table field. As no
//! other review of the entity mentions it, a leave-one-out pair that targets
//! that review can only recover the word from the table.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::jsonl::{RawField, RawImage, RawReview};
use super::{CorpusError, RawEntity};

pub const CUISINES: [(&str, [&str; 4]); 6] = [
    ("italian", ["pasta", "pizza", "risotto", "lasagna"]),
    ("mexican", ["tacos", "burritos", "nachos", "enchiladas"]),
    ("thai", ["curry", "noodles", "satay", "dumplings"]),
    ("indian", ["biryani", "naan", "samosas", "masala"]),
    ("french", ["crepes", "croissants", "quiche", "souffle"]),
    ("greek", ["gyros", "souvlaki", "moussaka", "falafel"]),
];

pub const SIGNATURE_WORDS: [&str; 16] = [
    "tiramisu", "churros", "mango", "chai", "macarons", "baklava", "cheesecake", "brownies", "gelato", "cannoli",
    "donuts", "waffles", "pancakes", "cupcakes", "truffles", "pretzels",
];

/// Ambience word per image class.
pub const AMBIENCE: [&str; 4] = ["cozy", "modern", "rustic", "bright"];

const TASTE: [[&str; 4]; 3] = [
    ["bland", "awful", "cold", "greasy"],
    ["okay", "decent", "fine", "fair"],
    ["great", "delicious", "amazing", "fantastic"],
];
const SERVICE: [[&str; 3]; 3] =
    [["rude", "careless", "sloppy"], ["acceptable", "ordinary", "uneven"], ["friendly", "attentive", "quick"]];
const PRICE_WORDS: [&str; 4] = ["cheap", "average", "expensive", "very expensive"];
const HOUR_CENTROIDS: [(f64, f64); 4] = [(16.5, 23.2), (8.7, 17.1), (6.4, 23.0), (10.6, 22.6)];
const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ren", "tu", "sa", "vel", "dor", "pi", "zen", "bo", "ru"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateSet {
    #[default]
    Restaurant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub entities: usize,
    pub reviews_per_entity: usize,
    /// Number of distinct filler words outside the templates.
    pub filler_vocab: usize,
    pub max_images: usize,
    pub image_size: usize,
    pub missing_images_rate: f64,
    pub missing_table_rate: f64,
    /// How many of [`SIGNATURE_WORDS`] are in use.
    pub signatures: usize,
    pub templates: TemplateSet,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            reviews_per_entity: 9,
            filler_vocab: 300,
            max_images: 2,
            image_size: 32,
            missing_images_rate: 0.15,
            missing_table_rate: 0.05,
            signatures: SIGNATURE_WORDS.len(),
            templates: TemplateSet::Restaurant,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.entities == 0 {
            return fail("entities must be positive");
        }
        if self.reviews_per_entity < 2 {
            return fail("reviews_per_entity must be at least 2");
        }
        if self.filler_vocab < 12 || self.filler_vocab > 800 {
            return fail("filler_vocab must lie in [12, 800]");
        }
        if self.signatures == 0 || self.signatures > SIGNATURE_WORDS.len() {
            return fail("signatures must lie in [1, 16]");
        }
        if self.image_size < 4 {
            return fail("image_size must be at least 4");
        }
        for (name, r) in [("missing_images_rate", self.missing_images_rate), ("missing_table_rate", self.missing_table_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(CorpusError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Filler words built from syllables, distinct from every template word.
pub fn filler_words(n: usize) -> Vec<String> {
    let reserved: HashSet<&str> = template_words().into_iter().collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    while out.len() < n {
        let mut w = String::new();
        let mut k = i;
        for _ in 0..2 {
            w.push_str(SYLLABLES[k % SYLLABLES.len()]);
            k /= SYLLABLES.len();
        }
        while k > 0 {
            w.push_str(SYLLABLES[k % SYLLABLES.len()]);
            k /= SYLLABLES.len();
        }
        if !reserved.contains(w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
        i += 1;
    }
    out
}

fn template_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = vec!["the", "was", "service", "we", "also", "tried", "place", "looks", "prices", "are", "known", "for", "very", "."];
    for (c, dishes) in CUISINES {
        w.push(c);
        w.extend(dishes);
    }
    w.extend(SIGNATURE_WORDS);
    w.extend(AMBIENCE);
    w.extend(TASTE.iter().flatten());
    w.extend(SERVICE.iter().flatten());
    w.extend(["cheap", "average", "expensive"]);
    w
}

fn round_half(x: f64) -> f64 {
    (x * 2.0).round() / 2.0
}

fn sentiment_bucket(rating: f64) -> usize {
    if rating >= 4.0 {
        2
    } else if rating >= 3.0 {
        1
    } else {
        0
    }
}

/// Generates `config.entities` entities; identical `(config, seed)` give
/// identical output.
pub fn generate_synthetic_corpus(config: &SynthConfig, seed: u64) -> Result<Vec<RawEntity>, CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers = filler_words(config.filler_vocab);
    let rating_noise = Normal::new(0.0, 0.75).unwrap();
    let mut out = Vec::with_capacity(config.entities);
    for e in 0..config.entities {
        let (cuisine, dishes) = CUISINES[rng.random_range(0..CUISINES.len())];
        let quality: f64 = rng.random_range(1.5..4.5);
        let price_level = rng.random_range(1..=4u32);
        let ambience = rng.random_range(0..AMBIENCE.len());
        let signature = SIGNATURE_WORDS[rng.random_range(0..config.signatures)];
        let topic: Vec<&str> = fillers.choose_multiple(&mut rng, 6).map(String::as_str).collect();
        let designated = rng.random_range(0..config.reviews_per_entity);

        let mut reviews = Vec::with_capacity(config.reviews_per_entity);
        for r in 0..config.reviews_per_entity {
            let rating = round_half(quality + rating_noise.sample(&mut rng)).clamp(1.0, 5.0);
            let bucket = sentiment_bucket(rating);
            let mut s: Vec<&str> = Vec::new();
            s.extend(["the", dishes[rng.random_range(0..4)], "was", TASTE[bucket][rng.random_range(0..4)], "."]);
            if rng.random_bool(0.8) {
                let sb = if rng.random_bool(0.7) { bucket } else { rng.random_range(0..3) };
                s.extend(["service", "was", SERVICE[sb][rng.random_range(0..3)], "."]);
            }
            if rng.random_bool(0.5) {
                s.extend(["we", "also", "tried", "the", dishes[rng.random_range(0..4)], "."]);
            }
            if rng.random_bool(0.35) {
                s.extend(["the", "place", "looks", AMBIENCE[ambience], "."]);
            }
            if rng.random_bool(0.3) {
                s.extend(["prices", "are", PRICE_WORDS[price_level as usize - 1], "."]);
            }
            if rng.random_bool(0.7) {
                for _ in 0..3 {
                    let w = if rng.random_bool(0.7) { topic[rng.random_range(0..topic.len())] } else { fillers[rng.random_range(0..fillers.len())].as_str() };
                    s.push(w);
                }
                s.push(".");
            }
            if r == designated {
                s.extend(["known", "for", "the", signature, "."]);
            }
            reviews.push(RawReview { text: s.join(" "), rating });
        }

        let n_images = if rng.random_bool(config.missing_images_rate) { 0 } else { rng.random_range(1..=config.max_images.max(1)) };
        let images = (0..n_images.min(config.max_images)).map(|_| render_image(&mut rng, ambience, config.image_size)).collect();

        let table = if rng.random_bool(config.missing_table_rate) {
            Vec::new()
        } else {
            let (open, close) = HOUR_CENTROIDS[rng.random_range(0..4)];
            let jitter = |rng: &mut ChaCha8Rng, x: f64| round_half(x + rng.random_range(-1.0..1.0)).clamp(0.0, 23.5);
            let hours = [jitter(&mut rng, open), jitter(&mut rng, close)];
            let price = round_half(price_level as f64 * 10.0 + rng.random_range(0.0..8.0));
            let name = format!("{} {}", fillers[rng.random_range(0..fillers.len())], fillers[rng.random_range(0..fillers.len())]);
            let field = |name: &str, kind: &str, value: Value| RawField { name: name.into(), kind: kind.into(), value };
            vec![
                field("name", "nominal", Value::from(name)),
                field("categories", "categorical", Value::from(vec![cuisine.to_string(), "restaurants".to_string()])),
                field("RestaurantsPriceRange", "ordinal", Value::from(price_level)),
                field("OutdoorSeating", "binary", Value::from(rng.random_bool(0.5))),
                field("stars", "numeric", Value::from(round_half(quality))),
                field("average price", "numeric", Value::from(price)),
                field("hours monday", "hours", Value::from(hours.to_vec())),
                field("specialty", "nominal", Value::from(signature)),
            ]
        };

        out.push(RawEntity { id: format!("synth-{e:04}"), reviews, images, table });
    }
    Ok(out)
}

/// Class-specific colour and texture plus noise, quantized to 1/16.
fn render_image(rng: &mut ChaCha8Rng, class: usize, size: usize) -> RawImage {
    const BASE: [[f64; 3]; 4] = [[0.8, 0.5, 0.2], [0.3, 0.4, 0.8], [0.5, 0.3, 0.1], [0.9, 0.9, 0.6]];
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let pattern = match class {
                    0 => ((y / 2) % 2) as f64,
                    1 => ((x / 2) % 2) as f64,
                    2 => (((x / 4) + (y / 4)) % 2) as f64,
                    _ => x as f64 / size as f64,
                };
                let v = 0.6 * BASE[class][c] + 0.3 * pattern + rng.random_range(-0.1..0.1);
                data.push(((v.clamp(0.0, 1.0) * 16.0).round() / 16.0).clamp(0.0, 1.0));
            }
        }
    }
    RawImage::Inline { channels: 3, height: size, width: size, data }
}

pub fn to_jsonl(entities: &[RawEntity]) -> String {
    let mut s = String::new();
    for e in entities {
        s.push_str(&serde_json::to_string(e).expect("entity serializes"));
        s.push('\n');
    }
    s
}
