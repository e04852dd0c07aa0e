//! End-to-end synthetic suite: data, subwords, Bl / Ctx / Deep / Wide /
//! Student training, and the comparison of contrastive accuracy, BLEU and
//! context sensitivity.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    singles, transform_multisegment, write_contrastive, write_documents, write_examples, ParallelDocument, TrainExample,
};
use crate::decode::{translate_all, DecodeParams};
use crate::error::{Error, Result};
use crate::eval::{
    bleu, context_sensitivity, contrastive_accuracy, AccuracyMode, ModelCandidateScorer, BLEU_SIGNATURE,
};
use crate::model::{parameter_count, ModelConfig, ScoreNorm, TransformerModel};
use crate::subword::TextCodec;
use crate::synthetic::{generate, SyntheticConfig, SyntheticData};
use crate::train::{
    distill_examples, encode_examples, train, DistillConfig, Perplexity, StopReason, TrainOutputs, TrainParams,
};

pub const SYSTEMS: &[&str] = &["Bl", "Ctx", "Deep", "Wide", "Student"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub context_window: usize,
    pub bpe_merges: usize,
    /// Examples longer than this many subwords on either side are dropped.
    pub max_tokens: usize,
    /// Trained in order; `Student` needs its teacher earlier in the list.
    pub systems: Vec<String>,
    pub teacher: String,
    pub deep_dec_layers: usize,
    pub wide_ff_width: usize,
    pub accuracy_mode: AccuracyMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            context_window: 1,
            bpe_merges: 200,
            max_tokens: 95,
            systems: vec!["Bl".into(), "Ctx".into(), "Student".into()],
            teacher: "Ctx".into(),
            deep_dec_layers: 4,
            wide_ff_width: 640,
            accuracy_mode: AccuracyMode::AllVariants,
        }
    }
}

/// Every setting of a run. Serialized into the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds parameter initialization; batching uses `train.seed`.
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub decode: DecodeParams,
    pub distill: DistillConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    /// Desk-scale settings of the synthetic suite.
    fn default() -> Self {
        RunConfig {
            seed: 1,
            synthetic: SyntheticConfig::default(),
            model: ModelConfig {
                d_model: 64,
                ff_width: 256,
                heads: 4,
                enc_layers: 2,
                dec_layers: 2,
                max_positions: 128,
                ..ModelConfig::default()
            },
            train: TrainParams {
                initial_lr: 1e-3,
                lr_reduce_patience: 2,
                max_not_improved: 4,
                checkpoint_interval: 200,
                batch_tokens: 1024,
                max_steps: 3000,
                ..TrainParams::default()
            },
            decode: DecodeParams {
                max_len: 60,
                ..DecodeParams::default()
            },
            distill: DistillConfig {
                decode: DecodeParams {
                    max_len: 60,
                    ..DecodeParams::default()
                },
                ..DistillConfig::default()
            },
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decode.validate()?;
        self.distill.decode.validate()?;
        let ex = &self.experiment;
        for (i, s) in ex.systems.iter().enumerate() {
            if !SYSTEMS.contains(&s.as_str()) {
                return Err(Error::contract(format!(
                    "unknown system {s:?}; expected one of {}",
                    SYSTEMS.join(", ")
                )));
            }
            if ex.systems[..i].contains(s) {
                return Err(Error::contract(format!("system {s:?} listed twice")));
            }
            if s == "Student" && !ex.systems[..i].contains(&ex.teacher) {
                return Err(Error::contract(format!(
                    "Student needs its teacher {:?} listed before it",
                    ex.teacher
                )));
            }
        }
        if ex.teacher == "Bl" || ex.teacher == "Student" {
            return Err(Error::contract(format!("{:?} cannot be a teacher", ex.teacher)));
        }
        if ex.context_window == 0 {
            return Err(Error::contract("context_window must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub name: String,
    pub parameters: usize,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub steps: usize,
    pub best_checkpoint: usize,
    pub stop_reason: StopReason,
    pub best_dev_ppl: f64,
    /// Dev perplexity at the last checkpoint.
    pub final_dev_ppl: f64,
    /// Contrastive accuracy with the context window (absent for Bl).
    pub accuracy_ctx: Option<f64>,
    pub accuracy_no_ctx: f64,
    pub bleu_ctx: Option<f64>,
    pub bleu_no_ctx: f64,
    /// Share of test segments (with at least one preceding segment) whose
    /// translation changes when context is supplied.
    pub changed_pct: Option<f64>,
    pub cs_chrf: Option<f64>,
    pub extraction_fallbacks: usize,
    pub distill_failures: Option<usize>,
}

impl SystemReport {
    /// Accuracy in the condition the system is meant to be used in.
    pub fn accuracy(&self) -> f64 {
        self.accuracy_ctx.unwrap_or(self.accuracy_no_ctx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub systems: Vec<SystemReport>,
    pub bleu_signature: String,
    pub context_window: usize,
    pub vocab_size: usize,
    pub test_segments: usize,
    pub contrastive_examples: usize,
}

impl SuiteReport {
    pub fn system(&self, name: &str) -> Option<&SystemReport> {
        self.systems.iter().find(|s| s.name == name)
    }

    /// Aligned plain-text comparison table.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
        let header = [
            "system", "params", "steps", "dev_ppl", "acc_ctx", "acc_noctx", "bleu_ctx", "bleu_noctx", "changed%", "cs_chrf",
        ];
        let mut rows = vec![header.map(String::from).to_vec()];
        for s in &self.systems {
            rows.push(vec![
                s.name.clone(),
                s.parameters.to_string(),
                s.steps.to_string(),
                format!("{:.4}", s.best_dev_ppl),
                opt(s.accuracy_ctx, 3),
                format!("{:.3}", s.accuracy_no_ctx),
                opt(s.bleu_ctx, 2),
                format!("{:.2}", s.bleu_no_ctx),
                opt(s.changed_pct, 1),
                opt(s.cs_chrf, 4),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Run-directory layout.
#[derive(Clone, Debug)]
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let dirs = RunDirs { root: root.into() };
        for d in [dirs.data(), dirs.checkpoints(), dirs.logs(), dirs.reports()] {
            fs::create_dir_all(d)?;
        }
        Ok(dirs)
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Test inputs as `(source, preceding sources)` with at most `k` context segments.
fn test_inputs(docs: &[ParallelDocument], k: usize) -> Vec<(String, Vec<String>, String)> {
    let mut out = Vec::new();
    for doc in docs {
        for (i, seg) in doc.segments.iter().enumerate() {
            let ctx = doc.segments[i.saturating_sub(k)..i].iter().map(|s| s.source.clone()).collect();
            out.push((seg.source.clone(), ctx, seg.target.clone()));
        }
    }
    out
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

struct Trained {
    name: String,
    model: TransformerModel<f32>,
}

pub fn run_synthetic_suite(cfg: &RunConfig, dirs: &RunDirs, progress: &mut dyn FnMut(&str)) -> Result<SuiteReport> {
    cfg.validate()?;
    let k = cfg.experiment.context_window;
    let data: SyntheticData = generate(&cfg.synthetic);
    let d = dirs.data();
    write_documents(&data.train, &d.join("train.src"), &d.join("train.tgt"))?;
    write_documents(&data.dev, &d.join("dev.src"), &d.join("dev.tgt"))?;
    write_documents(&data.test, &d.join("test.src"), &d.join("test.tgt"))?;
    write_contrastive(&data.contrastive, &d.join("contrastive.jsonl"))?;

    let lines: Vec<&str> = data
        .train
        .iter()
        .flat_map(|doc| doc.segments.iter().flat_map(|s| [s.source.as_str(), s.target.as_str()]))
        .collect();
    let codec = TextCodec::train(&lines, cfg.experiment.bpe_merges);
    codec.save(&d.join("bpe.merges"), &d.join("vocab.txt"))?;
    progress(&format!(
        "data: {} train docs, vocabulary {}",
        data.train.len(),
        codec.vocab.size()
    ));

    let test = test_inputs(&data.test, k);
    let references: Vec<String> = test.iter().map(|t| t.2.clone()).collect();
    let with_ctx: Vec<(String, Vec<String>)> = test.iter().map(|t| (t.0.clone(), t.1.clone())).collect();
    let no_ctx: Vec<(String, Vec<String>)> = test.iter().map(|t| (t.0.clone(), Vec::new())).collect();
    let has_ctx: Vec<usize> = (0..test.len()).filter(|&i| !test[i].1.is_empty()).collect();

    let ctx_train = transform_multisegment(&data.train, k)?;
    let ctx_dev = transform_multisegment(&data.dev, k)?;
    let mut trained: Vec<Trained> = Vec::new();
    let mut reports = Vec::new();

    for name in &cfg.experiment.systems {
        let mut model_cfg = ModelConfig {
            vocab_size: codec.vocab.size(),
            ..cfg.model.clone()
        };
        let mut distill_failures = None;
        let (train_ex, dev_ex): (Vec<TrainExample>, Vec<TrainExample>) = match name.as_str() {
            "Bl" => (singles(&data.train), singles(&data.dev)),
            "Ctx" => (ctx_train.clone(), ctx_dev.clone()),
            "Deep" => {
                model_cfg.dec_layers = cfg.experiment.deep_dec_layers;
                (ctx_train.clone(), ctx_dev.clone())
            }
            "Wide" => {
                model_cfg.ff_width = cfg.experiment.wide_ff_width;
                (ctx_train.clone(), ctx_dev.clone())
            }
            "Student" => {
                let teacher = trained
                    .iter()
                    .find(|t| t.name == cfg.experiment.teacher)
                    .ok_or_else(|| Error::State(format!("teacher {} not trained", cfg.experiment.teacher)))?;
                progress(&format!("distilling {} training examples", ctx_train.len()));
                let tr = distill_examples(&teacher.model, &ctx_train, &codec, &cfg.distill)?;
                let dv = distill_examples(&teacher.model, &ctx_dev, &codec, &cfg.distill)?;
                let failures = tr.failures.len() + dv.failures.len();
                distill_failures = Some(failures);
                let fail_lines: Vec<String> = tr
                    .failures
                    .iter()
                    .map(|f| format!("train\t{}\t{}", f.index, f.reason))
                    .chain(dv.failures.iter().map(|f| format!("dev\t{}\t{}", f.index, f.reason)))
                    .collect();
                fs::write(d.join("distill.failures"), fail_lines.join("\n"))?;
                write_examples(&tr.examples, &d.join("distilled.src"), &d.join("distilled.tgt"))?;
                (tr.examples, dv.examples)
            }
            other => return Err(Error::contract(format!("unknown system {other:?}"))),
        };
        let train_enc = encode_examples(&codec, &train_ex, cfg.experiment.max_tokens);
        let dev_enc = encode_examples(&codec, &dev_ex, cfg.experiment.max_tokens);
        let (n_train, n_dev) = (train_enc.len(), dev_enc.len());
        progress(&format!("training {name}: {n_train} examples, {} parameters", parameter_count(&model_cfg)));
        let model = TransformerModel::<f32>::new(model_cfg.clone(), cfg.seed)?;
        let mut dev = Perplexity::new(dev_enc, cfg.train.batch_tokens)?;
        let outputs = TrainOutputs {
            checkpoint_dir: Some(dirs.checkpoints().join(name)),
            metrics_path: Some(dirs.logs().join(format!("{name}.metrics.jsonl"))),
        };
        let outcome = train(model, &train_enc, &mut dev, &cfg.train, &outputs)?;
        progress(&format!(
            "{name}: {} steps, best dev ppl {:.4} at checkpoint {}",
            outcome.steps, outcome.best_dev_ppl, outcome.best_checkpoint
        ));
        let best = outcome.best_model;
        let uses_ctx = name != "Bl";

        let mut scorer = ModelCandidateScorer {
            model: &best,
            codec: &codec,
            norm: ScoreNorm::Sum,
        };
        let mode = cfg.experiment.accuracy_mode;
        let acc_no = contrastive_accuracy(&mut scorer, &data.contrastive, 0, mode)?.accuracy;
        let acc_ctx = if uses_ctx {
            Some(contrastive_accuracy(&mut scorer, &data.contrastive, k, mode)?.accuracy)
        } else {
            None
        };

        let (plain, mut fallbacks) = translate_all(&best, &no_ctx, &codec, &cfg.decode)?;
        let plain: Vec<String> = plain.into_iter().map(|t| t.text).collect();
        write_lines(&dirs.reports().join(format!("{name}.test.noctx.txt")), &plain)?;
        let bleu_no = bleu(&plain, &references)?;
        let (mut bleu_ctx, mut changed, mut cs) = (None, None, None);
        if uses_ctx {
            let (ctxd, fb) = translate_all(&best, &with_ctx, &codec, &cfg.decode)?;
            fallbacks += fb;
            let ctxd: Vec<String> = ctxd.into_iter().map(|t| t.text).collect();
            write_lines(&dirs.reports().join(format!("{name}.test.ctx.txt")), &ctxd)?;
            bleu_ctx = Some(bleu(&ctxd, &references)?);
            let a: Vec<&str> = has_ctx.iter().map(|&i| ctxd[i].as_str()).collect();
            let b: Vec<&str> = has_ctx.iter().map(|&i| plain[i].as_str()).collect();
            let s = context_sensitivity(&a, &b)?;
            changed = Some(s.changed_pct);
            cs = Some(s.cs_chrf);
        }
        let report = SystemReport {
            name: name.clone(),
            parameters: parameter_count(&model_cfg),
            train_examples: n_train,
            dev_examples: n_dev,
            steps: outcome.steps,
            best_checkpoint: outcome.best_checkpoint,
            stop_reason: outcome.stop_reason,
            best_dev_ppl: outcome.best_dev_ppl,
            final_dev_ppl: outcome.metrics.last().map_or(f64::NAN, |m| m.dev_ppl),
            accuracy_ctx: acc_ctx,
            accuracy_no_ctx: acc_no,
            bleu_ctx,
            bleu_no_ctx: bleu_no,
            changed_pct: changed,
            cs_chrf: cs,
            extraction_fallbacks: fallbacks,
            distill_failures,
        };
        progress(&format!(
            "{name}: accuracy ctx {:?} no-ctx {:.3}, changed {:?}",
            report.accuracy_ctx, report.accuracy_no_ctx, report.changed_pct
        ));
        reports.push(report);
        trained.push(Trained {
            name: name.clone(),
            model: best,
        });
    }

    let suite = SuiteReport {
        systems: reports,
        bleu_signature: BLEU_SIGNATURE.to_string(),
        context_window: k,
        vocab_size: codec.vocab.size(),
        test_segments: test.len(),
        contrastive_examples: data.contrastive.len(),
    };
    fs::write(dirs.reports().join("suite.json"), serde_json::to_string_pretty(&suite)? + "\n")?;
    fs::write(dirs.reports().join("suite.txt"), suite.table())?;
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rejects_misordered_student() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.experiment.systems = vec!["Student".into(), "Ctx".into()];
        assert!(cfg.validate().is_err());
        cfg.experiment.systems = vec!["Ctx".into(), "Huge".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn test_inputs_take_preceding_segments() {
        let doc = ParallelDocument::new(
            "d",
            vec![
                crate::corpus::SegmentPair::new("a", "A"),
                crate::corpus::SegmentPair::new("b", "B"),
                crate::corpus::SegmentPair::new("c", "C"),
            ],
        )
        .unwrap();
        let t = test_inputs(&[doc], 1);
        assert!(t[0].1.is_empty());
        assert_eq!(t[2].1, vec!["b".to_string()]);
    }
}
