//! Command-line front end: synthetic data, staged training, generation,
//! evaluation and gate inspection over a run directory.

pub mod config;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use multisum::corpus::synth::{generate_synthetic_corpus, to_jsonl};
use multisum::corpus::vocab::Vocab;
use multisum::corpus::{build_vocab, load_corpus, read_raw_corpus, Entity};
use multisum::decoding::{generate_summary, Preset, Summary};
use multisum::evaluation::{
    build_report, compare_systems, corpus_gate_means, gates_csv, gates_svg, score_entity, trace_gates, EntityScores, EvalReport, GateTrace,
};
use multisum::pipeline::{
    split_validation, stage0_denoise_pretrain, stage1_text_pretrain, stage2_other_pretrain, stage3_multimodal_train, FusionOptions,
    Modality, StageOutcome, StepMetrics, TrainError,
};
use multisum::seq_model::Model;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "multisum", version, about = "Multimodal opinion summarization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus with images and tables.
    Synth(SynthArgs),
    /// Run training stages, checkpointing after each.
    Train(TrainArgs),
    /// Summarize entities with the latest checkpoint.
    Generate(GenerateArgs),
    /// Score generated summaries against references.
    Evaluate(EvaluateArgs),
    /// Decode summaries and export per-token gate values.
    InspectGates(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub reviews: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Overrides the corpus path of the config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated subset of 0,1,2,3.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub stages: Vec<u8>,
    /// Start from fresh weights instead of the latest earlier checkpoint.
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long)]
    pub skip_stage2: bool,
    #[arg(long)]
    pub no_image: bool,
    #[arg(long)]
    pub no_table: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Entities to summarize; defaults to the config's eval corpus, then
    /// the validation split.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Defaults to the highest-numbered stage checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub no_image: bool,
    #[arg(long)]
    pub no_table: bool,
    /// Only the first N entities.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Defaults to `generated.jsonl` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// JSONL lines `{"entity_id": .., "references": [..]}`.
    #[arg(long)]
    pub references: PathBuf,
    /// Defaults to `generated.jsonl` in the run directory.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// `yelp` scores against the first reference only, `amazon` against all.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Another system's generated.jsonl for a paired bootstrap test.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::InspectGates(a) => inspect_gates(a),
    }
}

/// Content hash in the style of git's SHA-256 object format:
/// `sha256("blob <len>\0" ++ bytes)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.entities {
        cfg.synth.entities = n;
    }
    if let Some(n) = a.reviews {
        cfg.synth.reviews_per_entity = n;
    }
    let raw = generate_synthetic_corpus(&cfg.synth, cfg.seed)?;
    let text = to_jsonl(&raw);
    write(&a.out, &text)?;
    println!("{}  {}", content_hash(text.as_bytes()), a.out.display());
    Ok(())
}

const CONFIG_FILE: &str = "config.toml";
const VOCAB_FILE: &str = "vocab.json";
const HASH_FILE: &str = "corpus.sha256";
const METRICS_FILE: &str = "metrics.jsonl";

fn checkpoint_path(run_dir: &Path, stage: u8) -> PathBuf {
    run_dir.join(format!("stage{stage}.ckpt"))
}

fn latest_checkpoint(run_dir: &Path, below: u8) -> Option<(u8, PathBuf)> {
    (0..below).rev().map(|k| (k, checkpoint_path(run_dir, k))).find(|(_, p)| p.exists())
}

/// One line of `metrics.jsonl`.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricsLine {
    Step(StepMetrics),
    Stage { stage: u8, modality: Option<Modality>, steps: usize, train_losses: Vec<f64>, val_losses: Vec<f64> },
}

struct MetricsLog(PathBuf);

impl MetricsLog {
    fn line(&self, m: &MetricsLine) {
        let line = serde_json::to_string(m).expect("metrics serialize");
        let res = fs::OpenOptions::new().create(true).append(true).open(&self.0).and_then(|mut f| writeln!(f, "{line}"));
        // A failed metrics write should not abort training.
        if let Err(e) = res {
            warn!("metrics write failed: {e}");
        }
    }

    fn outcome(&self, o: &StageOutcome, modality: Option<Modality>) {
        self.line(&MetricsLine::Stage {
            stage: o.stage,
            modality,
            steps: o.steps,
            train_losses: o.train_losses.clone(),
            val_losses: o.val_losses.clone(),
        });
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    if let Some(p) = a.corpus {
        cfg.corpus.path = Some(p);
    }
    if a.no_image {
        cfg.fusion.use_image = false;
    }
    if a.no_table {
        cfg.fusion.use_table = false;
    }
    let mut stages = a.stages.clone();
    stages.sort_unstable();
    stages.dedup();
    if a.skip_stage2 {
        stages.retain(|&s| s != 2);
    }
    if let Some(bad) = stages.iter().find(|&&s| s > 3) {
        bail!("unknown stage {bad}; stages are 0 to 3");
    }
    let Some(&first) = stages.first() else { bail!("no stages to run") };
    let corpus_path = cfg.corpus.path.clone().ok_or_else(|| anyhow!("no corpus: set corpus.path in the config or pass --corpus"))?;

    fs::create_dir_all(&a.run_dir).with_context(|| format!("creating {}", a.run_dir.display()))?;
    let corpus_bytes = fs::read(&corpus_path).with_context(|| format!("reading {}", corpus_path.display()))?;
    write(&a.run_dir.join(HASH_FILE), format!("{}\n", content_hash(&corpus_bytes)))?;

    let vocab_path = a.run_dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() && !a.from_scratch {
        Vocab::from_json(&read(&vocab_path)?).context("parsing vocab.json")?
    } else {
        let raw = read_raw_corpus(&corpus_path)?;
        let v = build_vocab(&raw, &cfg.limits, cfg.corpus.vocab_size);
        write(&vocab_path, v.to_json())?;
        v
    };
    cfg.model.vocab_size = vocab.len();
    cfg.model.num_categories = vocab.num_categories();
    write(&a.run_dir.join(CONFIG_FILE), cfg.to_toml())?;

    let entities = load_corpus(&corpus_path, &vocab, &cfg.limits)?;
    let (train_set, val_set) = split_validation(&entities, cfg.corpus.val_fraction);
    info!("{} training and {} validation entities, vocabulary {}", train_set.len(), val_set.len(), vocab.len());

    let mut model = if a.from_scratch || first == 0 {
        Model::new(&cfg.model, &vocab, seed)?
    } else {
        match latest_checkpoint(&a.run_dir, first) {
            Some((k, p)) if k >= 1 || first == 1 => {
                info!("resuming from {}", p.display());
                Model::load(&p, &vocab)?
            }
            None if first == 1 => Model::new(&cfg.model, &vocab, seed)?,
            _ => bail!("stage {first} needs a stage-1 checkpoint in {}; run stage 1 first or pass --from-scratch", a.run_dir.display()),
        }
    };

    let log = MetricsLog(a.run_dir.join(METRICS_FILE));
    for &stage in &stages {
        let mut sink = |m: &StepMetrics| log.line(&MetricsLine::Step(*m));
        match stage {
            0 => {
                let o = stage0_denoise_pretrain(&mut model, train_set, val_set, &vocab, &cfg.train.stage0, &cfg.train.noise, &mut sink)?;
                log.outcome(&o, None);
                report(&o, None);
            }
            1 => {
                let o = stage1_text_pretrain(&mut model, train_set, val_set, &cfg.train.stage1, &mut sink)?;
                log.outcome(&o, None);
                report(&o, None);
            }
            2 => {
                let enabled = [(Modality::Table, cfg.fusion.use_table), (Modality::Image, cfg.fusion.use_image)];
                for (modality, on) in enabled {
                    if !on {
                        continue;
                    }
                    match stage2_other_pretrain(&mut model, train_set, val_set, modality, &cfg.train.stage2, &mut sink) {
                        Ok(o) => {
                            log.outcome(&o, Some(modality));
                            report(&o, Some(modality));
                        }
                        Err(TrainError::ModalityAbsent(m)) => warn!("corpus has no {m:?} data; skipping its stage-2 pretraining"),
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            _ => {
                let o = stage3_multimodal_train(&mut model, train_set, val_set, &cfg.train.stage3, cfg.fusion, &mut sink)?;
                log.outcome(&o, None);
                report(&o, None);
            }
        }
        model.save(&checkpoint_path(&a.run_dir, stage))?;
    }
    Ok(())
}

fn report(o: &StageOutcome, modality: Option<Modality>) {
    let tag = modality.map(|m| format!(" ({m:?})")).unwrap_or_default();
    println!(
        "stage {}{tag}: {} steps, val loss {:.4} -> {:.4}",
        o.stage,
        o.steps,
        o.val_losses[0],
        o.val_losses.last().copied().unwrap_or(f64::NAN)
    );
}

/// A trained model with the entities it should summarize.
struct Loaded {
    cfg: RunConfig,
    vocab: Vocab,
    model: Model,
    entities: Vec<Entity>,
    fusion: FusionOptions,
}

fn load_run(a: &ModelArgs) -> Result<Loaded> {
    let cfg = RunConfig::load(&a.run_dir.join(CONFIG_FILE))?;
    let vocab = Vocab::from_json(&read(&a.run_dir.join(VOCAB_FILE))?).context("parsing vocab.json")?;
    let ckpt = match &a.checkpoint {
        Some(p) => p.clone(),
        None => latest_checkpoint(&a.run_dir, 4).map(|(_, p)| p).ok_or_else(|| anyhow!("no checkpoint in {}", a.run_dir.display()))?,
    };
    let model = Model::load(&ckpt, &vocab).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut entities = match a.corpus.as_ref().or(cfg.corpus.eval.as_ref()) {
        Some(p) => load_corpus(p, &vocab, &cfg.limits)?,
        None => {
            let p = cfg.corpus.path.as_ref().ok_or_else(|| anyhow!("config names no corpus; pass --corpus"))?;
            let all = load_corpus(p, &vocab, &cfg.limits)?;
            split_validation(&all, cfg.corpus.val_fraction).1.to_vec()
        }
    };
    if let Some(n) = a.limit {
        entities.truncate(n);
    }
    let fusion = FusionOptions {
        use_image: cfg.fusion.use_image && !a.no_image,
        use_table: cfg.fusion.use_table && !a.no_table,
        ..cfg.fusion
    };
    Ok(Loaded { cfg, vocab, model, entities, fusion })
}

fn generate(a: GenerateArgs) -> Result<()> {
    let l = load_run(&a.model)?;
    let dcfg = l.cfg.decode.resolve(a.model.preset);
    let out = a.out.unwrap_or_else(|| a.model.run_dir.join("generated.jsonl"));
    let mut text = String::new();
    for e in &l.entities {
        let s = generate_summary(&l.model, &l.vocab, e, &dcfg, l.fusion).with_context(|| format!("entity `{}`", e.id))?;
        text.push_str(&serde_json::to_string(&s)?);
        text.push('\n');
    }
    write(&out, text)?;
    println!("{} summaries -> {}", l.entities.len(), out.display());
    Ok(())
}

#[derive(Deserialize)]
struct ReferenceLine {
    entity_id: String,
    references: Vec<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

/// The evaluation report plus how references were used.
#[derive(Serialize)]
struct ReportFile {
    preset: Preset,
    /// `first` or `max` over the available references.
    references: &'static str,
    #[serde(flatten)]
    report: EvalReport,
}

fn score_file(generated: &Path, refs: &HashMap<String, Vec<String>>, preset: Preset) -> Result<Vec<EntityScores>> {
    let summaries: Vec<Summary> = read_jsonl(generated)?;
    summaries
        .iter()
        .map(|s| {
            let r = refs.get(&s.entity_id).ok_or_else(|| anyhow!("no references for entity `{}`", s.entity_id))?;
            let r = match preset {
                Preset::Yelp => &r[..r.len().min(1)],
                Preset::Amazon => &r[..],
            };
            score_entity(&s.entity_id, &s.summary, r).with_context(|| format!("entity `{}`", s.entity_id))
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = RunConfig::resolve(Some(&a.run_dir.join(CONFIG_FILE)))?;
    let preset = a.preset.unwrap_or(cfg.decode.preset);
    let refs: HashMap<String, Vec<String>> =
        read_jsonl::<ReferenceLine>(&a.references)?.into_iter().map(|r| (r.entity_id, r.references)).collect();
    let generated = a.generated.unwrap_or_else(|| a.run_dir.join("generated.jsonl"));
    let scores = score_file(&generated, &refs, preset)?;
    let significance = match &a.baseline {
        Some(b) => {
            let base = score_file(b, &refs, preset)?;
            let ids = |v: &[EntityScores]| v.iter().map(|e| e.entity_id.clone()).collect::<Vec<_>>();
            if ids(&scores) != ids(&base) {
                bail!("baseline {} covers different entities", b.display());
            }
            let seed = a.seed.unwrap_or(cfg.seed);
            Some(compare_systems(&scores, &base, &b.display().to_string(), a.resamples, seed)?)
        }
        None => None,
    };
    let mut report = build_report(scores);
    report.significance = significance;
    let out = ReportFile { preset, references: if preset == Preset::Yelp { "first" } else { "max" }, report };
    let json = serde_json::to_string_pretty(&out)?;
    write(&a.run_dir.join("report.json"), &json)?;
    println!("ROUGE-1 {:.4}  ROUGE-2 {:.4}  ROUGE-L {:.4}", out.report.rouge1, out.report.rouge2, out.report.rouge_l);
    Ok(())
}

fn inspect_gates(a: InspectArgs) -> Result<()> {
    let l = load_run(&a.model)?;
    if !l.fusion.use_image && !l.fusion.use_table {
        warn!("text-only model: there are no gates, every trace is zero");
    }
    let dcfg = l.cfg.decode.resolve(a.model.preset);
    let mut traces: Vec<(String, GateTrace)> = Vec::new();
    for e in &l.entities {
        let (_, t) = trace_gates(&l.model, &l.vocab, e, &dcfg, l.fusion).with_context(|| format!("entity `{}`", e.id))?;
        traces.push((e.id.clone(), t));
    }
    write(&a.model.run_dir.join("gates.csv"), gates_csv(&traces, &l.vocab))?;
    write(&a.model.run_dir.join("gates.svg"), gates_svg(&traces, &l.vocab))?;
    let means = corpus_gate_means(traces.iter().map(|(_, t)| t));
    println!("{}", serde_json::to_string(&means)?);
    Ok(())
}
