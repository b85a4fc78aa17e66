//! Denoising corruption: sentence permutation followed by span infilling,
//! where each masked span collapses to a single `<mask>` token.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::MASK;
use crate::corpus::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Fraction of tokens covered by masked spans.
    pub mask_rate: f64,
    /// Poisson mean of span lengths.
    pub mean_span: f64,
    pub shuffle_sentences: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { mask_rate: 0.3, mean_span: 3.0, shuffle_sentences: true }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { mask_rate: 0.0, mean_span: 3.0, shuffle_sentences: false }
    }
}

/// Permutes sentences, each ending at a token in `terminators` (a trailing
/// fragment counts as a sentence).
pub fn shuffle_sentences(tokens: &[TokenId], terminators: &[TokenId], rng: &mut impl Rng) -> Vec<TokenId> {
    let mut sentences: Vec<&[TokenId]> = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if terminators.contains(t) {
            sentences.push(&tokens[start..=i]);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        sentences.push(&tokens[start..]);
    }
    sentences.shuffle(rng);
    sentences.concat()
}

/// Positions covered by spans; exactly `floor(rate·len)` or one more, so the
/// expected coverage is `rate·len`.
pub fn sample_span_mask(len: usize, cfg: &NoiseConfig, rng: &mut impl Rng) -> Vec<bool> {
    let mut masked = vec![false; len];
    let want = cfg.mask_rate * len as f64;
    let mut target = want.floor() as usize;
    if rng.random_bool((want - want.floor()).clamp(0.0, 1.0)) {
        target += 1;
    }
    let target = target.min(len);
    let poisson = Poisson::new(cfg.mean_span.max(1e-9)).expect("positive mean");
    let mut covered = 0;
    while covered < target {
        let span = (poisson.sample(rng) as usize).clamp(1, target - covered);
        let free: Vec<usize> = (0..len).filter(|&i| !masked[i]).collect();
        let mut i = free[rng.random_range(0..free.len())];
        let mut added = 0;
        while added < span && i < len {
            if !masked[i] {
                masked[i] = true;
                added += 1;
            }
            i += 1;
        }
        covered += added;
    }
    masked
}

/// Replaces every maximal masked run by one `<mask>`.
pub fn collapse_spans(tokens: &[TokenId], masked: &[bool]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        if !masked[i] {
            out.push(t);
        } else if i == 0 || !masked[i - 1] {
            out.push(MASK);
        }
    }
    out
}

pub fn noise_review(tokens: &[TokenId], cfg: &NoiseConfig, terminators: &[TokenId], rng: &mut impl Rng) -> Vec<TokenId> {
    let shuffled = if cfg.shuffle_sentences { shuffle_sentences(tokens, terminators, rng) } else { tokens.to_vec() };
    if cfg.mask_rate <= 0.0 {
        return shuffled;
    }
    let mask = sample_span_mask(shuffled.len(), cfg, rng);
    collapse_spans(&shuffled, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_without_shuffle_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Vec<u32> = (10..30).collect();
        assert_eq!(noise_review(&t, &NoiseConfig::none(), &[15], &mut rng), t);
    }

    #[test]
    fn coverage_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NoiseConfig { mask_rate: 0.3, ..NoiseConfig::default() };
        let n = 10_000;
        let total: usize = (0..n).map(|_| sample_span_mask(10, &cfg, &mut rng).iter().filter(|&&m| m).count()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 3.0).abs() <= 0.05 * 3.0, "mean coverage {mean}");
        let cfg = NoiseConfig { mask_rate: 0.25, ..NoiseConfig::default() };
        let total: usize = (0..n).map(|_| sample_span_mask(10, &cfg, &mut rng).iter().filter(|&&m| m).count()).sum();
        assert!((total as f64 / n as f64 - 2.5).abs() <= 0.05 * 2.5);
    }

    #[test]
    fn spans_collapse_to_single_masks() {
        let t = [10, 11, 12, 13, 14, 15];
        let m = [false, true, true, false, true, true];
        assert_eq!(collapse_spans(&t, &m), vec![10, MASK, 13, MASK]);
    }

    #[test]
    fn shuffle_keeps_sentences_intact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = [10, 11, 5, 12, 5, 13, 14, 5, 15];
        for _ in 0..20 {
            let s = shuffle_sentences(&t, &[5], &mut rng);
            let mut sorted = s.clone();
            sorted.sort();
            let mut orig = t.to_vec();
            orig.sort();
            assert_eq!(sorted, orig);
            let pos = s.iter().position(|&x| x == 13).unwrap();
            assert_eq!(s[pos + 1], 14);
        }
    }
}
