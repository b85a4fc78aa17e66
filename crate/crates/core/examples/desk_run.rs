//! Trains stages 0-3 on the synthetic corpus and prints validation losses.

use std::time::Instant;

use multisum::corpus::synth::{generate_synthetic_corpus, to_jsonl, SynthConfig, SIGNATURE_WORDS};
use multisum::corpus::{build_vocab, load_corpus_str, CorpusLimits};
use multisum::evaluation::leave_one_out_gate_contrast;
use multisum::pipeline::*;
use multisum::seq_model::{Model, ModelConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(17);
    let limits = CorpusLimits::default();
    let raw = generate_synthetic_corpus(&SynthConfig::default(), seed).unwrap();
    let vocab = build_vocab(&raw, &limits, 1000);
    let entities = load_corpus_str(&to_jsonl(&raw), &vocab, &limits).unwrap();
    let (train, val) = split_validation(&entities, 0.1);
    println!("vocab {} train {} val {}", vocab.len(), train.len(), val.len());
    let cfg = TrainConfig::default().with_seed(seed);
    let mut model = Model::new(&ModelConfig::for_vocab(&vocab), &vocab, seed).unwrap();
    let mut sink = |_: &StepMetrics| {};
    let t = Instant::now();
    let o = stage0_denoise_pretrain(&mut model, train, val, &vocab, &cfg.stage0, &cfg.noise, &mut sink).unwrap();
    println!("stage0 {:?} drop {:.3} {:.1}s", o.val_losses, o.relative_val_drop(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let o = stage1_text_pretrain(&mut model, train, val, &cfg.stage1, &mut sink).unwrap();
    println!("stage1 {:?} drop {:.3} {:.1}s", o.val_losses, o.relative_val_drop(), t.elapsed().as_secs_f64());
    for m in [Modality::Table, Modality::Image] {
        let t = Instant::now();
        let o = stage2_other_pretrain(&mut model, train, val, m, &cfg.stage2, &mut sink).unwrap();
        println!("stage2 {m:?} {:?} {:.1}s", o.val_losses, t.elapsed().as_secs_f64());
    }
    let t = Instant::now();
    let o = stage3_multimodal_train(&mut model, train, val, &cfg.stage3, FusionOptions::default(), &mut sink).unwrap();
    println!("stage3 {:?} {:.1}s", o.val_losses, t.elapsed().as_secs_f64());
    let marked: Vec<_> = SIGNATURE_WORDS.iter().map(|w| vocab.token_id(w)).collect();
    let c = leave_one_out_gate_contrast(&model, val, &marked, FusionOptions::default()).unwrap();
    println!("gates {c:?} beta ratio {:.3} alpha ratio {:.3}", c.beta_ratio(), c.alpha_ratio());
}
