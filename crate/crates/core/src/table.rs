//! Metadata table encoder.
//!
//! Field `k` becomes `f_k = ReLU([n_k; v_k] W_f + b_f)`, where `n_k` sums the
//! shared token embeddings of the field name and `v_k` embeds the value. The
//! stacked `F` is projected as `h_table = F W_table`.
//!
//! Value embeddings by kind:
//! - nominal and ordinal: sum of token embeddings (ordinal levels are first
//!   replaced by their label words);
//! - binary: the token `true` or `false`;
//! - numeric: sum of place-value embeddings over the set binary digits;
//! - categorical: mean of category embeddings;
//! - hours: embedding of the nearest opening-hours centroid.
//!
//! Each embedding is a sparse linear combination of rows of some table, so the
//! encoder builds one coefficient matrix per table and multiplies it in.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, NodeId};
use crate::corpus::vocab::Vocab;
use crate::corpus::{FieldValue, TableData, TokenId};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Binary places `2^9 … 2^-1`.
pub const PRICE_DIGITS: usize = 11;
/// Binary places `2^2 … 2^-1`.
pub const RATING_DIGITS: usize = 4;
const TOP_EXPONENT: i32 = 9;

pub const DEFAULT_HOUR_CENTROIDS: [(f64, f64); 4] = [(16.5, 23.2), (8.7, 17.1), (6.4, 23.0), (10.6, 22.6)];

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("value {value} exceeds the largest representable {max}")]
    Overflow { value: f64, max: f64 },
    #[error("value {0} is negative or not finite")]
    OutOfDomain(f64),
    #[error("unknown category id {0}")]
    UnknownCategory(u32),
    #[error("categorical field has no categories")]
    EmptyCategorical,
    #[error("table has {got} fields; at most {max} allowed")]
    TooManyFields { got: usize, max: usize },
    #[error("table is empty")]
    Empty,
}

/// Rounds to the nearest multiple of 0.5, ties away from zero.
pub fn round_half(x: f64) -> f64 {
    (x * 2.0).round() / 2.0
}

fn binary_digits<const D: usize>(x: f64) -> Result<[u8; D], TableError> {
    if !x.is_finite() || x < 0.0 {
        return Err(TableError::OutOfDomain(x));
    }
    let max = (1u64 << D) as f64 / 2.0 - 0.5;
    let r = round_half(x);
    if r > max {
        return Err(TableError::Overflow { value: x, max });
    }
    let halves = (r * 2.0) as u64;
    let mut out = [0u8; D];
    for (p, d) in out.iter_mut().enumerate() {
        *d = ((halves >> (D - 1 - p)) & 1) as u8;
    }
    Ok(out)
}

/// Four digits over places `(2^2, 2^1, 2^0, 2^-1)`.
pub fn encode_rating_binary(rating: f64) -> Result<[u8; RATING_DIGITS], TableError> {
    binary_digits::<RATING_DIGITS>(rating)
}

/// Eleven digits over places `(2^9, …, 2^0, 2^-1)`.
pub fn encode_price_binary(price: f64) -> Result<[u8; PRICE_DIGITS], TableError> {
    binary_digits::<PRICE_DIGITS>(price)
}

/// Exponent of digit `i` in an 11-digit encoding.
pub fn place_exponent(i: usize) -> i32 {
    TOP_EXPONENT - i as i32
}

/// Index of the Euclidean-nearest centroid, lowest index on ties.
pub fn assign_hour_cluster(open: f64, close: f64, centroids: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &(o, c)) in centroids.iter().enumerate() {
        let d = (open - o).powi(2) + (close - c).powi(2);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableConfig {
    pub hour_centroids: Vec<(f64, f64)>,
    /// `l_T` upper bound.
    pub max_fields: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self { hour_centroids: DEFAULT_HOUR_CENTROIDS.to_vec(), max_fields: 5 + 128 }
    }
}

/// Parameter handles of the table encoder. `e_T` equals the width of the
/// shared token embedding.
#[derive(Clone, Debug)]
pub struct TableParams {
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub w_table: ParamId,
    pub places: ParamId,
    pub categories: ParamId,
    pub hours: ParamId,
    num_categories: usize,
    true_token: TokenId,
    false_token: TokenId,
    config: TableConfig,
}

/// Coefficients of one field over the rows of each embedding table.
#[derive(Default)]
struct Coeffs {
    tokens: Vec<(usize, f64)>,
    places: Vec<(usize, f64)>,
    categories: Vec<(usize, f64)>,
    hours: Vec<(usize, f64)>,
}

impl TableParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: &TableConfig,
        vocab: &Vocab,
        e_t: usize,
        d_model: usize,
    ) -> Self {
        let num_categories = vocab.num_categories();
        let w_f = store.add("table.w_f", normal_init(rng, 2 * e_t, e_t, (1.0 / e_t as f64).sqrt()));
        let b_f = store.add("table.b_f", Matrix::zeros(1, e_t));
        let std = 1.0 / (e_t as f64).sqrt();
        let w_table = store.add("table.w_table", normal_init(rng, e_t, d_model, std));
        let places = store.add("table.places", normal_init(rng, PRICE_DIGITS, e_t, 0.02));
        let categories = store.add("table.categories", normal_init(rng, num_categories.max(1), e_t, 0.02));
        let hours = store.add("table.hours", normal_init(rng, config.hour_centroids.len().max(1), e_t, 0.02));
        Self {
            w_f,
            b_f,
            w_table,
            places,
            categories,
            hours,
            num_categories,
            true_token: vocab.token_id("true"),
            false_token: vocab.token_id("false"),
            config: config.clone(),
        }
    }

    pub fn config(&self) -> &TableConfig {
        &self.config
    }

    fn value_coeffs(&self, value: &FieldValue) -> Result<Coeffs, TableError> {
        let mut c = Coeffs::default();
        match value {
            FieldValue::Nominal(ids) | FieldValue::Ordinal { label: ids, .. } => {
                c.tokens = ids.iter().map(|&t| (t as usize, 1.0)).collect();
            }
            FieldValue::Binary(b) => {
                c.tokens.push((if *b { self.true_token } else { self.false_token } as usize, 1.0));
            }
            FieldValue::Numeric(x) => {
                let digits = encode_price_binary(*x)?;
                c.places = digits.iter().enumerate().filter(|(_, &d)| d == 1).map(|(i, _)| (i, 1.0)).collect();
            }
            FieldValue::Categorical(ids) => {
                if ids.is_empty() {
                    return Err(TableError::EmptyCategorical);
                }
                let w = 1.0 / ids.len() as f64;
                for &id in ids {
                    if id as usize >= self.num_categories {
                        return Err(TableError::UnknownCategory(id));
                    }
                    c.categories.push((id as usize, w));
                }
            }
            FieldValue::Hours { open, close } => {
                c.hours.push((assign_hour_cluster(*open, *close, &self.config.hour_centroids), 1.0));
            }
        }
        Ok(c)
    }

    /// `rows × e_T` combination of the rows of `table`.
    fn combine(g: &mut Graph, table: NodeId, rows: &[Vec<(usize, f64)>]) -> Option<NodeId> {
        if rows.iter().all(Vec::is_empty) {
            return None;
        }
        let n = g.value(table).rows();
        let mut s = Matrix::zeros(rows.len(), n);
        for (r, row) in rows.iter().enumerate() {
            for &(i, w) in row {
                let cur = s.get(r, i);
                s.set(r, i, cur + w);
            }
        }
        let s = g.input(s);
        Some(g.matmul(s, table))
    }

    /// Value embeddings `V` (`rows × e_T`) for the given values.
    fn embed_values(&self, g: &mut Graph, token_table: NodeId, values: &[&FieldValue]) -> Result<NodeId, TableError> {
        let coeffs = values.iter().map(|v| self.value_coeffs(v)).collect::<Result<Vec<_>, _>>()?;
        let e_t = g.value(token_table).cols();
        let mut parts = Vec::new();
        let tok: Vec<_> = coeffs.iter().map(|c| c.tokens.clone()).collect();
        parts.extend(Self::combine(g, token_table, &tok));
        for (sel, pid) in [
            (coeffs.iter().map(|c| c.places.clone()).collect::<Vec<_>>(), self.places),
            (coeffs.iter().map(|c| c.categories.clone()).collect(), self.categories),
            (coeffs.iter().map(|c| c.hours.clone()).collect(), self.hours),
        ] {
            if sel.iter().any(|r| !r.is_empty()) {
                let table = g.param(pid);
                parts.extend(Self::combine(g, table, &sel));
            }
        }
        Ok(match parts.len() {
            0 => g.input(Matrix::zeros(values.len(), e_t)),
            1 => parts[0],
            _ => g.sum(&parts, 1.0),
        })
    }

    /// `v_k` for a single value, as a `1 × e_T` node.
    pub fn embed_field_value(&self, g: &mut Graph, token_table: NodeId, value: &FieldValue) -> Result<NodeId, TableError> {
        self.embed_values(g, token_table, &[value])
    }

    /// `h_table` (`l_T × e_D`). `token_table` is the shared token embedding.
    pub fn encode_table(&self, g: &mut Graph, token_table: NodeId, table: &TableData) -> Result<NodeId, TableError> {
        let f = self.field_representations(g, token_table, table)?;
        let w = g.param(self.w_table);
        Ok(g.matmul(f, w))
    }

    /// `F`, the stacked `f_k` (`l_T × e_T`).
    pub fn field_representations(&self, g: &mut Graph, token_table: NodeId, table: &TableData) -> Result<NodeId, TableError> {
        if table.is_empty() {
            return Err(TableError::Empty);
        }
        if table.len() > self.config.max_fields {
            return Err(TableError::TooManyFields { got: table.len(), max: self.config.max_fields });
        }
        let names: Vec<Vec<(usize, f64)>> =
            table.fields.iter().map(|f| f.name.iter().map(|&t| (t as usize, 1.0)).collect()).collect();
        let e_t = g.value(token_table).cols();
        let n = match Self::combine(g, token_table, &names) {
            Some(n) => n,
            None => g.input(Matrix::zeros(table.len(), e_t)),
        };
        let values: Vec<&FieldValue> = table.fields.iter().map(|f| &f.value).collect();
        let v = self.embed_values(g, token_table, &values)?;
        let nv = g.concat_cols(&[n, v]);
        let (w_f, b_f) = (g.param(self.w_f), g.param(self.b_f));
        let pre = g.matmul(nv, w_f);
        let pre = g.add_row(pre, b_f);
        Ok(g.relu(pre))
    }
}
