//! ROUGE-{1,2,L} F1, multi-reference scoring, paired bootstrap significance
//! and multimodal gate traces.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::vocab::{Vocab, BOS};
use crate::corpus::{Entity, TokenId};
use crate::decoding::{entity_inputs, generate_summary, DecodeConfig, Summary};
use crate::pipeline::FusionOptions;
use crate::seq_model::{Ctx, ModalInputs, Model, ModelError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no reference summaries given")]
    NoReferences,
    #[error("score lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("score lists are empty")]
    Empty,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A side had too few tokens for the measure to be defined.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl RougeScore {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1, degenerate: false }
    }

    fn undefined() -> Self {
        Self { degenerate: true, ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RougeVariant {
    #[serde(rename = "rouge1")]
    R1,
    #[serde(rename = "rouge2")]
    R2,
    #[serde(rename = "rougeL")]
    L,
}

impl RougeVariant {
    pub const ALL: [RougeVariant; 3] = [RougeVariant::R1, RougeVariant::R2, RougeVariant::L];
}

/// Lowercased alphanumeric runs; no stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + std::hash::Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be positive");
    if candidate.len() < n || reference.len() < n {
        return RougeScore::undefined();
    }
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    let nc = (candidate.len() + 1 - n) as f64;
    let nr = (reference.len() + 1 - n) as f64;
    RougeScore::from_pr(overlap as f64 / nc, overlap as f64 / nr)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::undefined();
    }
    let l = lcs_len(candidate, reference) as f64;
    RougeScore::from_pr(l / candidate.len() as f64, l / reference.len() as f64)
}

pub fn rouge<T: Eq + std::hash::Hash>(candidate: &[T], reference: &[T], variant: RougeVariant) -> RougeScore {
    match variant {
        RougeVariant::R1 => rouge_n(candidate, reference, 1),
        RougeVariant::R2 => rouge_n(candidate, reference, 2),
        RougeVariant::L => rouge_l(candidate, reference),
    }
}

/// Best F1 over references; precision and recall come from that reference
/// (the first one on ties).
pub fn rouge_multi<T: Eq + std::hash::Hash, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    variant: RougeVariant,
) -> Result<RougeScore, EvalError> {
    references
        .iter()
        .map(|r| rouge(candidate, r.as_ref(), variant))
        .reduce(|best, s| if s.f1 > best.f1 { s } else { best })
        .ok_or(EvalError::NoReferences)
}

/// Two-sided paired bootstrap: resample entities with replacement and count
/// resamples whose mean difference does not keep the observed sign; the
/// one-sided fraction is doubled and capped at 1. A zero observed
/// difference gives 1.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = diffs.iter().sum::<f64>() / n as f64;
    if observed == 0.0 {
        return Ok(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flips = 0usize;
    for _ in 0..resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += diffs[rng.random_range(0..n)];
        }
        if s / n as f64 * observed.signum() <= 0.0 {
            flips += 1;
        }
    }
    Ok((2.0 * flips as f64 / resamples.max(1) as f64).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub baseline: String,
    pub resamples: usize,
    pub seed: u64,
    pub p_values: HashMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    pub entity_id: String,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
}

impl EntityScores {
    pub fn get(&self, v: RougeVariant) -> &RougeScore {
        match v {
            RougeVariant::R1 => &self.rouge1,
            RougeVariant::R2 => &self.rouge2,
            RougeVariant::L => &self.rouge_l,
        }
    }
}

/// Corpus-level mean F1 with per-entity detail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub per_entity: Vec<EntityScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<Significance>,
}

pub fn score_entity(entity_id: &str, candidate: &str, references: &[String]) -> Result<EntityScores, EvalError> {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    Ok(EntityScores {
        entity_id: entity_id.to_string(),
        rouge1: rouge_multi(&cand, &refs, RougeVariant::R1)?,
        rouge2: rouge_multi(&cand, &refs, RougeVariant::R2)?,
        rouge_l: rouge_multi(&cand, &refs, RougeVariant::L)?,
    })
}

pub fn build_report(per_entity: Vec<EntityScores>) -> EvalReport {
    let mean = |v: RougeVariant| {
        if per_entity.is_empty() {
            0.0
        } else {
            per_entity.iter().map(|e| e.get(v).f1).sum::<f64>() / per_entity.len() as f64
        }
    };
    EvalReport {
        rouge1: mean(RougeVariant::R1),
        rouge2: mean(RougeVariant::R2),
        rouge_l: mean(RougeVariant::L),
        per_entity,
        significance: None,
    }
}

/// Per-variant p-values of system `a` against `baseline`, aligned by entity.
pub fn compare_systems(
    a: &[EntityScores],
    baseline: &[EntityScores],
    baseline_name: &str,
    resamples: usize,
    seed: u64,
) -> Result<Significance, EvalError> {
    let mut p_values = HashMap::new();
    for v in RougeVariant::ALL {
        let xa: Vec<f64> = a.iter().map(|e| e.get(v).f1).collect();
        let xb: Vec<f64> = baseline.iter().map(|e| e.get(v).f1).collect();
        let key = serde_json::to_value(v).expect("variant serializes").as_str().unwrap_or_default().to_string();
        p_values.insert(key, paired_bootstrap(&xa, &xb, resamples, seed)?);
    }
    Ok(Significance { baseline: baseline_name.to_string(), resamples, seed, p_values })
}

/// Per generated token, α and β averaged over dimensions and decoder layers.
/// A gate that was not computed (absent modality) counts as zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub tokens: Vec<TokenId>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GateTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mean_alpha(&self) -> f64 {
        mean(&self.alpha)
    }

    pub fn mean_beta(&self) -> f64 {
        mean(&self.beta)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Teacher-forces `tokens` after `<bos>` and records the gates at the
/// position that predicts each token.
pub fn gate_trace_for(model: &Model, inputs: &ModalInputs, tokens: &[TokenId], sd: f64) -> Result<GateTrace, ModelError> {
    let n = tokens.len().min(model.config().max_len);
    if n == 0 {
        return Ok(GateTrace::default());
    }
    let mut input = Vec::with_capacity(n);
    input.push(BOS);
    input.extend_from_slice(&tokens[..n - 1]);
    let mut g = Graph::inference(&model.store);
    let mut ctx = Ctx::eval();
    let blocks = model.encode_inputs(&mut g, &mut ctx, inputs)?;
    let memory = model.project_memory(&mut g, &blocks);
    let out = model.decode(&mut g, &mut ctx, &memory, &input, sd, false)?;
    let layers = out.alpha.len().max(1) as f64;
    let per_token = |gates: &[Option<crate::autograd::NodeId>]| {
        let mut acc = vec![0.0; n];
        for gate in gates.iter().flatten() {
            let m = g.value(*gate);
            for (t, a) in acc.iter_mut().enumerate() {
                *a += mean(m.row(t));
            }
        }
        acc.iter().map(|a| a / layers).collect::<Vec<_>>()
    };
    Ok(GateTrace { tokens: tokens[..n].to_vec(), alpha: per_token(&out.alpha), beta: per_token(&out.beta) })
}

/// Decodes a summary for `entity` and traces the gates along it.
pub fn trace_gates(
    model: &Model,
    vocab: &Vocab,
    entity: &Entity,
    cfg: &DecodeConfig,
    fusion: FusionOptions,
) -> Result<(Summary, GateTrace), ModelError> {
    let summary = generate_summary(model, vocab, entity, cfg, fusion)?;
    let trace = gate_trace_for(model, &entity_inputs(entity, fusion), &summary.tokens, 0.0)?;
    Ok((summary, trace))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateMeans {
    pub alpha: f64,
    pub beta: f64,
    pub tokens: usize,
}

/// Token-weighted means over a set of traces.
pub fn corpus_gate_means<'a>(traces: impl IntoIterator<Item = &'a GateTrace>) -> GateMeans {
    let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
    for t in traces {
        a += t.alpha.iter().sum::<f64>();
        b += t.beta.iter().sum::<f64>();
        n += t.len();
    }
    if n == 0 {
        return GateMeans::default();
    }
    GateMeans { alpha: a / n as f64, beta: b / n as f64, tokens: n }
}

/// Gate means split by whether the token predicted at a position is marked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateContrast {
    pub marked_alpha: f64,
    pub marked_beta: f64,
    pub other_alpha: f64,
    pub other_beta: f64,
    pub marked_count: usize,
    pub other_count: usize,
}

impl GateContrast {
    pub fn beta_ratio(&self) -> f64 {
        self.marked_beta / self.other_beta
    }

    pub fn alpha_ratio(&self) -> f64 {
        self.marked_alpha / self.other_alpha
    }
}

/// Teacher-forces every leave-one-out pair of each entity (sources are the
/// other reviews plus images and table, sd as in training) and contrasts the
/// gates at positions predicting a `marked` token against all others.
pub fn leave_one_out_gate_contrast(
    model: &Model,
    entities: &[Entity],
    marked: &[TokenId],
    fusion: FusionOptions,
) -> Result<GateContrast, ModelError> {
    let mut c = GateContrast::default();
    for e in entities {
        let Ok(pairs) = crate::corpus::build_leave_one_out_pairs(e) else { continue };
        for p in pairs {
            let mut inputs = entity_inputs(e, fusion);
            inputs.text = p.sources.iter().map(|&i| e.reviews[i].tokens.as_slice()).collect();
            let (_, target) = model.teacher_forcing(&e.reviews[p.target].tokens);
            let trace = gate_trace_for(model, &inputs, &target, p.sd)?;
            for (i, tok) in trace.tokens.iter().enumerate() {
                if marked.contains(tok) {
                    c.marked_alpha += trace.alpha[i];
                    c.marked_beta += trace.beta[i];
                    c.marked_count += 1;
                } else {
                    c.other_alpha += trace.alpha[i];
                    c.other_beta += trace.beta[i];
                    c.other_count += 1;
                }
            }
        }
    }
    let (m, o) = (c.marked_count.max(1) as f64, c.other_count.max(1) as f64);
    c.marked_alpha /= m;
    c.marked_beta /= m;
    c.other_alpha /= o;
    c.other_beta /= o;
    Ok(c)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `entity_id,position,token,alpha,beta`, one row per generated token.
pub fn gates_csv(traces: &[(String, GateTrace)], vocab: &Vocab) -> String {
    let mut out = String::from("entity_id,position,token,alpha,beta\n");
    for (id, t) in traces {
        for (i, &tok) in t.tokens.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", csv_field(id), i, csv_field(vocab.word(tok)), t.alpha[i], t.beta[i]);
        }
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Heatmap with one column per token and two rows (α, β) per trace. Cell
/// shading is relative to the largest gate value shown.
pub fn gates_svg(traces: &[(String, GateTrace)], vocab: &Vocab) -> String {
    const CELL: usize = 28;
    const LABEL: usize = 120;
    let cols = traces.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
    let peak = traces
        .iter()
        .flat_map(|(_, t)| t.alpha.iter().chain(&t.beta))
        .fold(0.0f64, |m, &x| m.max(x))
        .max(1e-12);
    let row_h = 3 * CELL;
    let width = LABEL + cols * CELL + 10;
    let height = traces.len() * row_h + 10;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"9\">\n"
    );
    for (r, (id, t)) in traces.iter().enumerate() {
        let y0 = r * row_h;
        let _ = writeln!(s, "<text x=\"2\" y=\"{}\">{}</text>", y0 + 10, xml_escape(id));
        for (k, (name, vals)) in [("alpha", &t.alpha), ("beta", &t.beta)].into_iter().enumerate() {
            let y = y0 + CELL / 2 + k * CELL;
            let _ = writeln!(s, "<text x=\"2\" y=\"{}\">{name}</text>", y + CELL / 2);
            for (i, &v) in vals.iter().enumerate() {
                let shade = 255 - (255.0 * (v / peak).clamp(0.0, 1.0)).round() as u8;
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb(255,{shade},{shade})\"><title>{} {v:.6}</title></rect>",
                    LABEL + i * CELL,
                    xml_escape(vocab.word(t.tokens[i])),
                );
            }
        }
        for (i, &tok) in t.tokens.iter().enumerate() {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\">{}</text>",
                LABEL + i * CELL + 1,
                y0 + CELL / 2 - 2,
                xml_escape(vocab.word(tok)),
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
