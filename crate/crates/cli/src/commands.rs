//! Subcommand definitions and their implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxmt::corpus::{
    load_contrastive, load_documents, read_examples, shuffle_examples, singles, transform_multisegment, write_examples,
    CorpusFormat, ExampleKind,
};
use ctxmt::decode::{translate_all, DecodeParams};
use ctxmt::eval::{
    context_sensitivity, contrastive_accuracy, length_binned_bleu, AccuracyMode, EvalReport,
    LengthBins, ModelCandidateScorer, BLEU_SIGNATURE,
};
use ctxmt::experiment::{run_synthetic_suite, RunConfig, RunDirs};
use ctxmt::model::{checkpoint, parameter_count, ModelConfig, ScoreNorm, TransformerModel, PRESETS};
use ctxmt::subword::TextCodec;
use ctxmt::train::{distill_examples, encode_examples, train, DistillConfig, MixMode, Perplexity, TrainOutputs};
use serde::Serialize;

use crate::config;
use crate::manifest::ManifestBuilder;

#[derive(Debug, Parser)]
#[command(name = "ctxmt", version, about = "Multi-segment translation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a document corpus into delimited training examples.
    PrepareData(PrepareData),
    /// Learn BPE merges and a vocabulary.
    BpeTrain(BpeTrain),
    /// Segment a text file with a trained codec.
    BpeApply(BpeApply),
    /// Train a model on prepared examples.
    Train(Train),
    /// Translate sentences, optionally with preceding context.
    Translate(Translate),
    /// Build a distilled corpus from a teacher checkpoint.
    Distill(Distill),
    /// Contrastive accuracy of a checkpoint on a targeted test set.
    ScoreContrastive(ScoreContrastive),
    /// Corpus BLEU and ChrF of a hypothesis file.
    EvalBleu(EvalBleu),
    /// BLEU per source-length bin.
    AnalyzeLength(AnalyzeLength),
    /// How much translations change when context is added.
    AnalyzeSensitivity(AnalyzeSensitivity),
    /// Parameter count of a preset or configuration.
    ParamCount(ParamCount),
    /// Run a complete experiment suite.
    RunExperiment(RunExperiment),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Blankline,
    Tsv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Regime {
    /// Single segments only.
    Baseline,
    /// Single segments plus multi-segment examples.
    Contextual,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.initial_lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        config::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 5)]
    pub beam_size: usize,
    #[arg(long, default_value_t = 100)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    pub length_penalty: f64,
}

impl DecodeArgs {
    fn params(&self) -> Result<DecodeParams> {
        let p = DecodeParams {
            beam_size: self.beam_size,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Args)]
pub struct PrepareData {
    #[arg(long)]
    pub source: PathBuf,
    /// Aligned target file (blank-line format only).
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "blankline")]
    pub format: Format,
    #[arg(long, default_value_t = 1)]
    pub context_window: usize,
    #[arg(long, value_enum, default_value = "contextual")]
    pub regime: Regime,
    /// Shuffle the examples with this seed.
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BpeTrain {
    /// Raw text files to learn from.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = ctxmt::subword::DEFAULT_MERGES)]
    pub merges: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CodecArg {
    /// Directory holding `bpe.merges` and `vocab.txt`.
    #[arg(long)]
    pub codec: PathBuf,
}

impl CodecArg {
    fn load(&self) -> Result<TextCodec> {
        TextCodec::load(&self.codec.join("bpe.merges"), &self.codec.join("vocab.txt"))
            .with_context(|| format!("loading codec from {}", self.codec.display()))
    }

    fn files(&self) -> [PathBuf; 2] {
        [self.codec.join("bpe.merges"), self.codec.join("vocab.txt")]
    }
}

#[derive(Debug, Args)]
pub struct BpeApply {
    #[command(flatten)]
    pub codec: CodecArg,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub codec: CodecArg,
    #[arg(long)]
    pub train_src: PathBuf,
    #[arg(long)]
    pub train_tgt: PathBuf,
    #[arg(long)]
    pub dev_src: PathBuf,
    #[arg(long)]
    pub dev_tgt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Translate {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub codec: CodecArg,
    /// One source sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Line-aligned context: preceding source sentences separated by tabs.
    #[arg(long)]
    pub context: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Distill {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub codec: CodecArg,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, value_enum, default_value = "reference-teacher")]
    pub mix_mode: Mix,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mix {
    ReferenceTeacher,
    TeacherOnly,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Accuracy {
    AllVariants,
    PerPair,
}

#[derive(Debug, Args)]
pub struct ScoreContrastive {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub codec: CodecArg,
    /// JSON-lines contrastive items.
    #[arg(long)]
    pub input: PathBuf,
    /// Context segments to use; 0 scores without context.
    #[arg(long, default_value_t = 1)]
    pub context_window: usize,
    #[arg(long, value_enum, default_value = "all-variants")]
    pub mode: Accuracy,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalBleu {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeLength {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Source sentences; their whitespace token counts select the bin.
    #[arg(long)]
    pub src: PathBuf,
    /// Training sources from which median and standard deviation are taken.
    #[arg(long, conflicts_with_all = ["median", "sd"])]
    pub train_src: Option<PathBuf>,
    #[arg(long, requires = "sd")]
    pub median: Option<f64>,
    #[arg(long, requires = "median")]
    pub sd: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeSensitivity {
    /// Translations produced with context.
    #[arg(long = "with")]
    pub with_ctx: PathBuf,
    /// Translations of the same lines without context.
    #[arg(long = "without")]
    pub without_ctx: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamCount {
    /// Named architecture; omit to use the run configuration's model section.
    #[arg(long, conflicts_with = "all")]
    pub preset: Option<String>,
    /// Every preset.
    #[arg(long)]
    pub all: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Suite {
    Synthetic,
}

#[derive(Debug, Args)]
pub struct RunExperiment {
    #[arg(long, value_enum, default_value = "synthetic")]
    pub suite: Suite,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(a) => prepare_data(a),
        Command::BpeTrain(a) => bpe_train(a),
        Command::BpeApply(a) => bpe_apply(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate(a),
        Command::Distill(a) => distill(a),
        Command::ScoreContrastive(a) => score_contrastive(a),
        Command::EvalBleu(a) => eval_bleu(a),
        Command::AnalyzeLength(a) => analyze_length(a),
        Command::AnalyzeSensitivity(a) => analyze_sensitivity(a),
        Command::ParamCount(a) => param_count(a),
        Command::RunExperiment(a) => run_experiment(a),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Canonical parameter text of a command for the manifest hash.
fn params_text<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

fn load_model(path: &Path) -> Result<TransformerModel<f32>> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn prepare_data(a: PrepareData) -> Result<()> {
    let format = match a.format {
        Format::Blankline => CorpusFormat::Blankline,
        Format::Tsv => CorpusFormat::Tsv,
    };
    let docs = load_documents(&a.source, a.target.as_deref(), format)?;
    let mut examples = match a.regime {
        Regime::Baseline => singles(&docs),
        Regime::Contextual => transform_multisegment(&docs, a.context_window)?,
    };
    if let Some(seed) = a.shuffle_seed {
        shuffle_examples(&mut examples, seed);
    }
    out_dir(&a.out)?;
    write_examples(&examples, &a.out.join("examples.src"), &a.out.join("examples.tgt"))?;
    let multi = examples.iter().filter(|e| e.kind == ExampleKind::Multi).count();
    println!(
        "{} examples ({} single, {multi} multi) from {} documents",
        examples.len(),
        examples.len() - multi,
        docs.len()
    );
    let params = params_text(&(format!("{:?}", a.regime), a.context_window, a.shuffle_seed))?;
    ManifestBuilder::new("prepare-data", params, a.shuffle_seed)
        .input(&a.source)
        .inputs(a.target.iter())
        .write(&a.out)?;
    Ok(())
}

fn bpe_train(a: BpeTrain) -> Result<()> {
    let mut lines = Vec::new();
    for p in &a.input {
        lines.extend(read_lines(p)?.into_iter().filter(|l| !l.trim().is_empty()));
    }
    let codec = TextCodec::train(&lines, a.merges);
    out_dir(&a.out)?;
    codec.save(&a.out.join("bpe.merges"), &a.out.join("vocab.txt"))?;
    println!(
        "{} merges, vocabulary of {} from {} lines",
        codec.bpe.num_merges(),
        codec.vocab.size(),
        lines.len()
    );
    ManifestBuilder::new("bpe-train", params_text(&a.merges)?, None)
        .inputs(a.input.iter())
        .write(&a.out)?;
    Ok(())
}

fn bpe_apply(a: BpeApply) -> Result<()> {
    let codec = a.codec.load()?;
    let lines: Vec<String> = read_lines(&a.input)?
        .iter()
        .map(|l| codec.segment(l).join(" "))
        .collect();
    out_dir(&a.out)?;
    write_lines(&a.out.join("segmented.txt"), &lines)?;
    ManifestBuilder::new("bpe-apply", String::new(), None)
        .inputs(a.codec.files().iter())
        .input(&a.input)
        .write(&a.out)?;
    Ok(())
}

fn train_cmd(a: Train) -> Result<()> {
    let cfg = a.config.load()?;
    let codec = a.codec.load()?;
    let train_ex = read_examples(&a.train_src, &a.train_tgt)?;
    let dev_ex = read_examples(&a.dev_src, &a.dev_tgt)?;
    let max = cfg.experiment.max_tokens;
    let train_enc = encode_examples(&codec, &train_ex, max);
    let dev_enc = encode_examples(&codec, &dev_ex, max);
    eprintln!(
        "training on {} of {} examples, dev {} of {}",
        train_enc.len(),
        train_ex.len(),
        dev_enc.len(),
        dev_ex.len()
    );
    let model_cfg = ModelConfig {
        vocab_size: codec.vocab.size(),
        ..cfg.model.clone()
    };
    let dirs = RunDirs::new(&a.out)?;
    let snapshot = config::snapshot(&cfg)?;
    fs::write(a.out.join("config.snapshot"), &snapshot)?;
    let model = TransformerModel::<f32>::new(model_cfg, cfg.seed)?;
    let mut dev = Perplexity::new(dev_enc, cfg.train.batch_tokens)?;
    let outputs = TrainOutputs {
        checkpoint_dir: Some(dirs.checkpoints()),
        metrics_path: Some(dirs.logs().join("metrics.jsonl")),
    };
    let outcome = train(model, &train_enc, &mut dev, &cfg.train, &outputs).context("stage: train")?;
    #[derive(Serialize)]
    struct Summary {
        steps: usize,
        best_checkpoint: usize,
        best_dev_ppl: f64,
        stop_reason: ctxmt::train::StopReason,
        skipped_updates: u64,
        train_examples: usize,
    }
    let summary = Summary {
        steps: outcome.steps,
        best_checkpoint: outcome.best_checkpoint,
        best_dev_ppl: outcome.best_dev_ppl,
        stop_reason: outcome.stop_reason,
        skipped_updates: outcome.skipped_updates,
        train_examples: train_enc.len(),
    };
    write_json(&dirs.reports().join("train.json"), &summary)?;
    println!(
        "{} steps, best dev perplexity {:.4} at checkpoint {} ({:?})",
        summary.steps, summary.best_dev_ppl, summary.best_checkpoint, summary.stop_reason
    );
    ManifestBuilder::new("train", snapshot, Some(cfg.seed))
        .inputs(a.codec.files().iter())
        .inputs([&a.train_src, &a.train_tgt, &a.dev_src, &a.dev_tgt])
        .write(&a.out)?;
    Ok(())
}

fn translate(a: Translate) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let codec = a.codec.load()?;
    let params = a.decode.params()?;
    let sources = read_lines(&a.input)?;
    let contexts: Vec<Vec<String>> = match &a.context {
        Some(p) => {
            let lines = read_lines(p)?;
            if lines.len() != sources.len() {
                bail!("{} context lines for {} source lines", lines.len(), sources.len());
            }
            lines
                .iter()
                .map(|l| l.split('\t').filter(|s| !s.trim().is_empty()).map(str::to_string).collect())
                .collect()
        }
        None => vec![Vec::new(); sources.len()],
    };
    let inputs: Vec<(String, Vec<String>)> = sources.into_iter().zip(contexts).collect();
    let (translations, fallbacks) = translate_all(&model, &inputs, &codec, &params)?;
    out_dir(&a.out)?;
    let text: Vec<String> = translations.iter().map(|t| t.text.clone()).collect();
    write_lines(&a.out.join("translations.txt"), &text)?;
    #[derive(Serialize)]
    struct Report {
        lines: usize,
        extraction_fallbacks: usize,
        forced_endings: usize,
    }
    let report = Report {
        lines: text.len(),
        extraction_fallbacks: fallbacks,
        forced_endings: translations.iter().filter(|t| t.hypothesis.forced).count(),
    };
    write_json(&a.out.join("report.json"), &report)?;
    eprintln!("{} lines, {} extraction fallbacks", report.lines, report.extraction_fallbacks);
    ManifestBuilder::new("translate", params_text(&params)?, None)
        .input(&a.checkpoint)
        .inputs(a.codec.files().iter())
        .input(&a.input)
        .inputs(a.context.iter())
        .write(&a.out)?;
    Ok(())
}

fn distill(a: Distill) -> Result<()> {
    let teacher = load_model(&a.checkpoint)?;
    let codec = a.codec.load()?;
    let examples = read_examples(&a.src, &a.tgt)?;
    let cfg = DistillConfig {
        teacher_checkpoint: Some(a.checkpoint.display().to_string()),
        decode: a.decode.params()?,
        mix_mode: match a.mix_mode {
            Mix::ReferenceTeacher => MixMode::ReferenceAndTeacher,
            Mix::TeacherOnly => MixMode::TeacherOnly,
        },
    };
    let out = distill_examples(&teacher, &examples, &codec, &cfg)?;
    out_dir(&a.out)?;
    write_examples(&out.examples, &a.out.join("distilled.src"), &a.out.join("distilled.tgt"))?;
    let failures: Vec<String> = out.failures.iter().map(|f| format!("{}\t{}", f.index + 1, f.reason)).collect();
    write_lines(&a.out.join("failures.tsv"), &failures)?;
    println!(
        "{} examples from {} sources, {} dropped",
        out.examples.len(),
        examples.len(),
        out.failures.len()
    );
    let params = params_text(&(&cfg.decode, cfg.mix_mode))?;
    ManifestBuilder::new("distill", params, None)
        .input(&a.checkpoint)
        .inputs(a.codec.files().iter())
        .inputs([&a.src, &a.tgt])
        .write(&a.out)?;
    Ok(())
}

fn score_contrastive(a: ScoreContrastive) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let codec = a.codec.load()?;
    let items = load_contrastive(&a.input)?;
    let mode = match a.mode {
        Accuracy::AllVariants => AccuracyMode::AllVariants,
        Accuracy::PerPair => AccuracyMode::PerPair,
    };
    let mut scorer = ModelCandidateScorer {
        model: &model,
        codec: &codec,
        norm: ScoreNorm::Sum,
    };
    let report = contrastive_accuracy(&mut scorer, &items, a.context_window, mode)?;
    println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.total);
    for (bucket, b) in &report.per_distance {
        println!("  distance {bucket:>7}: {:.4} ({}/{})", b.accuracy, b.correct, b.total);
    }
    if let Some(out) = &a.out {
        out_dir(out)?;
        write_json(&out.join("report.json"), &EvalReport::contrastive(&report))?;
        write_json(&out.join("contrastive.json"), &report)?;
        ManifestBuilder::new("score-contrastive", params_text(&(a.context_window, mode))?, None)
            .input(&a.checkpoint)
            .inputs(a.codec.files().iter())
            .input(&a.input)
            .write(out)?;
    }
    Ok(())
}

fn eval_bleu(a: EvalBleu) -> Result<()> {
    let hyp = read_lines(&a.hyp)?;
    let reference = read_lines(&a.reference)?;
    let report = EvalReport::translation(&hyp, &reference)?;
    report.validate()?;
    println!("BLEU {:.2} ({BLEU_SIGNATURE})", report.bleu.unwrap_or(0.0));
    println!("chrF {:.4}", report.chrf.unwrap_or(0.0));
    if let Some(out) = &a.out {
        out_dir(out)?;
        write_json(&out.join("report.json"), &report)?;
        ManifestBuilder::new("eval-bleu", BLEU_SIGNATURE.to_string(), None)
            .inputs([&a.hyp, &a.reference])
            .write(out)?;
    }
    Ok(())
}

fn token_count(line: &str) -> usize {
    line.split_whitespace().count()
}

fn analyze_length(a: AnalyzeLength) -> Result<()> {
    let hyp = read_lines(&a.hyp)?;
    let reference = read_lines(&a.reference)?;
    let src = read_lines(&a.src)?;
    let bins = match (&a.train_src, a.median, a.sd) {
        (Some(p), _, _) => {
            let lengths: Vec<usize> = read_lines(p)?.iter().filter(|l| !l.trim().is_empty()).map(|l| token_count(l)).collect();
            LengthBins::from_lengths(&lengths)?
        }
        (None, Some(m), Some(sd)) => LengthBins::new(m, sd)?,
        _ => bail!("give either --train-src or both --median and --sd"),
    };
    let lengths: Vec<usize> = src.iter().map(|l| token_count(l)).collect();
    let per_bin = length_binned_bleu(&hyp, &reference, &lengths, &bins)?;
    let mut report = EvalReport::translation(&hyp, &reference)?;
    report.per_bin_bleu = Some(per_bin.clone());
    report.validate()?;
    println!("median {} sd {:.3}", bins.median, bins.sd);
    for b in &per_bin {
        let score = b.bleu.map_or("-".to_string(), |s| format!("{s:.2}"));
        println!("{:>20} {:>7} {:>8}", b.label, b.count, score);
    }
    println!("{:>20} {:>7} {:>8.2}", "all", hyp.len(), report.bleu.unwrap_or(0.0));
    if let Some(out) = &a.out {
        out_dir(out)?;
        write_json(&out.join("report.json"), &report)?;
        ManifestBuilder::new("analyze-length", params_text(&bins)?, None)
            .inputs([&a.hyp, &a.reference, &a.src])
            .inputs(a.train_src.iter())
            .write(out)?;
    }
    Ok(())
}

fn analyze_sensitivity(a: AnalyzeSensitivity) -> Result<()> {
    let with = read_lines(&a.with_ctx)?;
    let without = read_lines(&a.without_ctx)?;
    let s = context_sensitivity(&with, &without)?;
    println!("changed {:.2}% of {} lines, cs_chrf {:.4}", s.changed_pct, s.n_lines, s.cs_chrf);
    if let Some(out) = &a.out {
        out_dir(out)?;
        let report = EvalReport {
            sensitivity_pct: Some(s.changed_pct),
            cs_chrf: Some(s.cs_chrf),
            n_examples: s.n_lines,
            ..EvalReport::default()
        };
        write_json(&out.join("report.json"), &report)?;
        ManifestBuilder::new("analyze-sensitivity", String::new(), None)
            .inputs([&a.with_ctx, &a.without_ctx])
            .write(out)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CountRow {
    pub name: String,
    pub parameters: usize,
}

fn param_count(a: ParamCount) -> Result<()> {
    let rows: Vec<CountRow> = if a.all {
        PRESETS
            .iter()
            .map(|p| {
                Ok(CountRow {
                    name: p.to_string(),
                    parameters: parameter_count(&ModelConfig::preset(p)?),
                })
            })
            .collect::<Result<_>>()?
    } else if let Some(p) = &a.preset {
        vec![CountRow {
            name: p.clone(),
            parameters: parameter_count(&ModelConfig::preset(p)?),
        }]
    } else {
        let cfg = a.config.load()?;
        cfg.model.validate()?;
        vec![CountRow {
            name: "config".into(),
            parameters: parameter_count(&cfg.model),
        }]
    };
    for r in &rows {
        println!("{:<10} {:>12} ({:.1}M)", r.name, r.parameters, r.parameters as f64 / 1e6);
    }
    if let Some(out) = &a.out {
        out_dir(out)?;
        write_json(&out.join("param_count.json"), &rows)?;
        ManifestBuilder::new("param-count", params_text(&rows)?, None).write(out)?;
    }
    Ok(())
}

fn run_experiment(a: RunExperiment) -> Result<()> {
    let cfg = a.config.load()?;
    match a.suite {
        Suite::Synthetic => {}
    }
    let dirs = RunDirs::new(&a.out)?;
    let snapshot = config::snapshot(&cfg)?;
    fs::write(a.out.join("config.snapshot"), &snapshot)?;
    let mut stage = String::from("setup");
    let report = run_synthetic_suite(&cfg, &dirs, &mut |msg| {
        eprintln!("{msg}");
        stage = msg.to_string();
    })
    .with_context(|| format!("run-experiment failed; last completed stage: {stage}"))?;
    print!("{}", report.table());
    ManifestBuilder::new("run-experiment synthetic", snapshot, Some(cfg.seed)).write(&a.out)?;
    Ok(())
}
