//! Beam search with length penalty, early stopping and trigram blocking.
//!
//! A hypothesis scores `logprob / len^lp`, `len` counting generated tokens
//! including the final `<eos>`. An extension that would repeat a trigram
//! already present in the hypothesis is never generated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::vocab::{Vocab, BOS, EOS, MASK, PAD};
use crate::corpus::{Entity, TokenId};
use crate::pipeline::FusionOptions;
use crate::seq_model::{Ctx, Memory, ModalInputs, Model, ModelError};
use crate::tensor::{log_softmax_rows, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    /// Generated tokens, `<eos>` included.
    pub max_len: usize,
    pub early_stopping: bool,
    pub block_repeated_trigrams: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Preset::Yelp.config()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Yelp,
    Amazon,
}

impl Preset {
    pub fn config(self) -> DecodeConfig {
        let (beam_size, length_penalty, max_len) = match self {
            Preset::Yelp => (4, 0.97, 105),
            Preset::Amazon => (2, 0.9, 80),
        };
        DecodeConfig { beam_size, length_penalty, max_len, early_stopping: true, block_repeated_trigrams: true }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "yelp" => Ok(Preset::Yelp),
            "amazon" => Ok(Preset::Amazon),
            other => Err(format!("unknown preset `{other}` (expected yelp or amazon)")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Preset::Yelp => "yelp",
            Preset::Amazon => "amazon",
        })
    }
}

/// Next-token distribution given the tokens generated so far (the leading
/// `<bos>` is implicit).
pub trait Scorer {
    fn log_probs(&mut self, prefix: &[TokenId]) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Generated tokens, ending in `<eos>` when finished.
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
    /// Every continuation was blocked before any hypothesis finished.
    pub pruned_fallback: bool,
}

pub fn length_normalized(logprob: f64, len: usize, lp: f64) -> f64 {
    logprob / (len as f64).powf(lp)
}

/// True when appending `next` would repeat a trigram of `tokens`.
pub fn repeats_trigram(tokens: &[TokenId], next: TokenId) -> bool {
    let n = tokens.len();
    if n < 2 {
        return false;
    }
    let (a, b) = (tokens[n - 2], tokens[n - 1]);
    tokens.windows(3).any(|w| w[0] == a && w[1] == b && w[2] == next)
}

pub fn has_repeated_trigram(tokens: &[TokenId]) -> bool {
    let mut seen = std::collections::HashSet::new();
    tokens.windows(3).any(|w| !seen.insert((w[0], w[1], w[2])))
}

#[derive(Clone, Copy, Debug)]
pub struct TokenRules<'a> {
    pub eos: TokenId,
    /// Never generated.
    pub banned: &'a [TokenId],
}

impl TokenRules<'static> {
    pub fn standard() -> Self {
        const BANNED: [TokenId; 3] = [PAD, BOS, MASK];
        TokenRules { eos: EOS, banned: &BANNED }
    }
}

struct Beam {
    tokens: Vec<TokenId>,
    logprob: f64,
}

fn allowed(cfg: &DecodeConfig, rules: &TokenRules, tokens: &[TokenId], v: TokenId) -> bool {
    !rules.banned.contains(&v) && !(cfg.block_repeated_trigrams && repeats_trigram(tokens, v))
}

pub fn beam_search(scorer: &mut dyn Scorer, cfg: &DecodeConfig, rules: &TokenRules) -> DecodeResult {
    let k = cfg.beam_size.max(1);
    let lp = cfg.length_penalty;
    let mut beams = vec![Beam { tokens: Vec::new(), logprob: 0.0 }];
    let mut finished: Vec<DecodeResult> = Vec::new();
    let mut best_pruned: Option<Beam> = None;
    for cur_len in 1..=cfg.max_len.max(1) {
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let lps = scorer.log_probs(&beam.tokens);
            for (v, &l) in lps.iter().enumerate() {
                let v = v as TokenId;
                if l.is_finite() && allowed(cfg, rules, &beam.tokens, v) {
                    cands.push((beam.logprob + l, b, v));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(k);
        for (rank, &(score, b, v)) in cands.iter().enumerate() {
            let mut tokens = beams[b].tokens.clone();
            tokens.push(v);
            if v == rules.eos {
                if rank < k {
                    finished.push(DecodeResult {
                        score: length_normalized(score, cur_len, lp),
                        tokens,
                        logprob: score,
                        finished: true,
                        pruned_fallback: false,
                    });
                }
            } else {
                next.push(Beam { tokens, logprob: score });
            }
            if next.len() == k {
                break;
            }
        }
        finished.sort_by(|x, y| y.score.total_cmp(&x.score));
        finished.truncate(k);
        if next.is_empty() {
            if finished.is_empty() {
                best_pruned = beams.into_iter().max_by(|x, y| x.logprob.total_cmp(&y.logprob));
            }
            beams = Vec::new();
            break;
        }
        beams = next;
        if cfg.early_stopping && finished.len() >= k {
            let best_live = beams.iter().map(|b| b.logprob).fold(f64::NEG_INFINITY, f64::max);
            let worst = finished.last().unwrap().score;
            if length_normalized(best_live, cur_len, lp) <= worst {
                beams.clear();
                break;
            }
        }
    }
    for b in beams {
        let len = b.tokens.len().max(1);
        finished.push(DecodeResult {
            score: length_normalized(b.logprob, len, lp),
            tokens: b.tokens,
            logprob: b.logprob,
            finished: false,
            pruned_fallback: false,
        });
    }
    if let Some(best) = finished.into_iter().max_by(|x, y| x.score.total_cmp(&y.score).then(y.tokens.cmp(&x.tokens))) {
        return best;
    }
    let b = best_pruned.unwrap_or(Beam { tokens: Vec::new(), logprob: 0.0 });
    DecodeResult {
        score: length_normalized(b.logprob, b.tokens.len().max(1), lp),
        tokens: b.tokens,
        logprob: b.logprob,
        finished: false,
        pruned_fallback: true,
    }
}

/// Argmax decoding under the same blocking rules; ties go to the lowest id.
pub fn greedy_decode(scorer: &mut dyn Scorer, cfg: &DecodeConfig, rules: &TokenRules) -> DecodeResult {
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut pruned = false;
    for _ in 0..cfg.max_len.max(1) {
        let lps = scorer.log_probs(&tokens);
        let best = lps
            .iter()
            .enumerate()
            .filter(|&(v, l)| l.is_finite() && allowed(cfg, rules, &tokens, v as TokenId))
            .fold(None, |acc: Option<(usize, f64)>, (v, &l)| match acc {
                Some((_, bl)) if bl >= l => acc,
                _ => Some((v, l)),
            });
        let Some((v, l)) = best else {
            pruned = true;
            break;
        };
        tokens.push(v as TokenId);
        logprob += l;
        if v as TokenId == rules.eos {
            break;
        }
    }
    let finished = tokens.last() == Some(&rules.eos);
    DecodeResult {
        score: length_normalized(logprob, tokens.len().max(1), cfg.length_penalty),
        tokens,
        logprob,
        finished,
        pruned_fallback: pruned && !finished,
    }
}

/// Scores prefixes with a trained model against fixed encoder memory;
/// the rating deviation is 0.
pub struct ModelScorer<'m> {
    model: &'m Model,
    memory: Memory<Matrix>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, inputs: &ModalInputs) -> Result<Self, ModelError> {
        let mut g = Graph::inference(&model.store);
        let blocks = model.encode_inputs(&mut g, &mut Ctx::eval(), inputs)?;
        let memory = model.project_memory(&mut g, &blocks).freeze(&g);
        Ok(Self { model, memory })
    }

    pub fn memory(&self) -> &Memory<Matrix> {
        &self.memory
    }
}

impl Scorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[TokenId]) -> Vec<f64> {
        let mut g = Graph::inference(&self.model.store);
        let mem = self.memory.load(&mut g);
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prefix);
        let out = self.model.decode(&mut g, &mut Ctx::eval(), &mem, &input, 0.0, true).expect("prefix within model length");
        log_softmax_rows(g.value(out.logits)).row(0).to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub entity_id: String,
    pub summary: String,
    pub pruned_fallback: bool,
    #[serde(skip)]
    pub tokens: Vec<TokenId>,
}

/// The model inputs of an entity at test time: all reviews, plus images and
/// table as enabled.
pub fn entity_inputs<'e>(entity: &'e Entity, fusion: FusionOptions) -> ModalInputs<'e> {
    ModalInputs {
        text: entity.reviews.iter().map(|r| r.tokens.as_slice()).collect(),
        images: if fusion.use_image { &entity.images } else { &[] },
        table: if fusion.use_table { Some(&entity.table) } else { None },
    }
}

pub fn generate_summary(
    model: &Model,
    vocab: &Vocab,
    entity: &Entity,
    cfg: &DecodeConfig,
    fusion: FusionOptions,
) -> Result<Summary, ModelError> {
    if entity.reviews.is_empty() {
        return Err(ModelError::NoSources);
    }
    let mut scorer = ModelScorer::new(model, &entity_inputs(entity, fusion))?;
    let cfg = DecodeConfig { max_len: cfg.max_len.min(model.config().max_len - 1), ..*cfg };
    let r = beam_search(&mut scorer, &cfg, &TokenRules::standard());
    Ok(Summary {
        entity_id: entity.id.clone(),
        summary: vocab.decode(&r.tokens),
        pruned_fallback: r.pruned_fallback,
        tokens: r.tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed log-probabilities per prefix length.
    struct Table(Vec<Vec<f64>>);

    impl Scorer for Table {
        fn log_probs(&mut self, prefix: &[TokenId]) -> Vec<f64> {
            self.0[prefix.len().min(self.0.len() - 1)].clone()
        }
    }

    fn norm(xs: &[f64]) -> Vec<f64> {
        let z = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        xs.iter().map(|x| x - z).collect()
    }

    #[test]
    fn presets() {
        let y = Preset::Yelp.config();
        assert_eq!((y.beam_size, y.length_penalty, y.max_len), (4, 0.97, 105));
        let a: Preset = "Amazon".parse().unwrap();
        let a = a.config();
        assert_eq!((a.beam_size, a.length_penalty, a.max_len), (2, 0.9, 80));
        assert!("imdb".parse::<Preset>().is_err());
    }

    #[test]
    fn length_penalty_ranking() {
        let short = length_normalized(-10.0, 10, 0.97);
        let long = length_normalized(-10.5, 12, 0.97);
        assert!((short - (-10.0 / 10f64.powf(0.97))).abs() < 1e-12);
        assert!(long > short);
        assert!((short + 1.0715).abs() < 1e-3 && (long + 0.9427).abs() < 1e-3);
    }

    #[test]
    fn trigram_detection() {
        assert!(repeats_trigram(&[5, 6, 7, 5, 6], 7));
        assert!(!repeats_trigram(&[5, 6, 7, 5, 6], 8));
        assert!(repeats_trigram(&[5, 5, 5], 5));
        assert!(has_repeated_trigram(&[1, 2, 3, 1, 2, 3]));
        assert!(!has_repeated_trigram(&[1, 2, 3, 1, 2, 4]));
    }

    #[test]
    fn all_blocked_falls_back() {
        // Only token 3 is ever allowed besides banned ones, so a fourth 3 is blocked.
        let mut s = Table(vec![norm(&[0.0, -1e9, -1e9, 5.0]); 1]);
        let rules = TokenRules { eos: 2, banned: &[0, 1] };
        let cfg = DecodeConfig { beam_size: 2, max_len: 10, ..DecodeConfig::default() };
        let r = beam_search(&mut s, &cfg, &rules);
        let rules = TokenRules { eos: 2, banned: &[0, 1, 2] };
        let r2 = beam_search(&mut s, &cfg, &rules);
        assert!(!r.pruned_fallback);
        assert!(r2.pruned_fallback);
        assert_eq!(r2.tokens, vec![3, 3, 3]);
        let g = greedy_decode(&mut s, &cfg, &rules);
        assert!(g.pruned_fallback && g.tokens == vec![3, 3, 3]);
    }
}
