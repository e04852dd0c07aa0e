//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Criteria 5, 6 and 8 drive `ctxmt run-experiment` end to end; the full
//! default suite takes several minutes.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use ctxmt::autodiff::{Graph, Tensor, Var};
use ctxmt::corpus::{transform_multisegment, ContrastiveExample, ExampleKind, ParallelDocument, SegmentPair};
use ctxmt::eval::{bleu, chrf, contrastive_accuracy, AccuracyMode, CandidateScorer};
use ctxmt::experiment::SuiteReport;
use ctxmt::model::{ModelConfig, PaddedBatch, TransformerModel};
use ctxmt::synthetic::length_test_set;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PARAM_TOL: f64 = 0.02;
const METRIC_TOL: f64 = 1e-6;
const OP_GRAD_TOL: f64 = 1e-5;
const MODEL_GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;
const CHANCE_TOL: f64 = 0.05;
const PPL_TOL: f64 = 1e-6;

fn ctxmt(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ctxmt")).args(args).output()?;
    if !out.status.success() {
        bail!("ctxmt {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    Ok(String::from_utf8(out.stdout)?)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn param_ladder() -> Result<String> {
    let out = ctxmt(&["param-count", "--all"])?;
    let counts: Vec<(String, f64)> = out
        .lines()
        .map(|l| {
            let mut it = l.split_whitespace();
            Ok((it.next().context("name")?.to_string(), it.next().context("count")?.parse()?))
        })
        .collect::<Result<_>>()?;
    let mut checked = Vec::new();
    for (name, target) in [("Ctx", 44.0), ("Bl", 44.0)]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .chain([52, 60, 68, 76].into_iter().flat_map(|m| {
            [(format!("Deep-{m}"), m as f64), (format!("Wide-{m}"), m as f64)]
        }))
    {
        let count = counts.iter().find(|(n, _)| *n == name).with_context(|| format!("{name} missing"))?.1;
        let rel = count / (target * 1e6) - 1.0;
        ensure!(rel.abs() <= PARAM_TOL, "{name}: {count} is {:+.2}% off {target}M", rel * 100.0);
        checked.push(format!("{name} {:.2}M", count / 1e6));
    }
    Ok(checked.join(", "))
}

fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<ParallelDocument> {
    (0..rng.random_range(0..12))
        .map(|d| {
            let segs = (0..rng.random_range(1..9))
                .map(|s| SegmentPair::new(format!("s{d}_{s} x"), format!("t{d}_{s}")))
                .collect();
            ParallelDocument::new(format!("d{d}"), segs).unwrap()
        })
        .collect()
}

fn transform_counts() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..200 {
        let docs = random_corpus(&mut rng);
        let k = rng.random_range(1..5);
        let out = transform_multisegment(&docs, k)?;
        let singles: usize = docs.iter().map(|d| d.len()).sum();
        let multis: usize = docs.iter().map(|d| d.len().saturating_sub(k)).sum();
        let got_s = out.iter().filter(|e| e.kind == ExampleKind::Single).count();
        let got_m = out.iter().filter(|e| e.kind == ExampleKind::Multi).count();
        ensure!(got_s == singles && got_m == multis, "trial {trial}: {got_s}/{got_m} vs {singles}/{multis}");
        ensure!(out.iter().filter(|e| e.kind == ExampleKind::Multi).all(|e| e.source.matches(" <sep> ").count() == k));
    }

    let dir = tempfile::tempdir()?;
    let (src, tgt, out) = (dir.path().join("t.src"), dir.path().join("t.tgt"), dir.path().join("prep"));
    fs::write(&src, "Fire?\nWell, put it out, why don't you?\n")?;
    fs::write(&tgt, "Ein Feuer?\nNa dann löscht er doch!\n")?;
    ctxmt(&["prepare-data", "--source", p(&src), "--target", p(&tgt), "--out", p(&out)])?;
    let want_src = "<start> Fire? <end>\n<start> Well, put it out, why don't you? <end>\n\
                    <start> Fire? <sep> Well, put it out, why don't you? <end>\n";
    let want_tgt = "<start> Ein Feuer? <end>\n<start> Na dann löscht er doch! <end>\n\
                    <start> Ein Feuer? <sep> Na dann löscht er doch! <end>\n";
    ensure!(fs::read_to_string(out.join("examples.src"))? == want_src, "source layout differs");
    ensure!(fs::read_to_string(out.join("examples.tgt"))? == want_tgt, "target layout differs");
    Ok("200 random corpora, two-segment layout byte-identical".into())
}

fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

type Build = dyn for<'a> Fn(&mut Graph<'a, f64>, &[Var]) -> Var;

/// `sum(weights * op(inputs))` and its input gradients.
fn weighted(inputs: &[(Vec<usize>, Vec<f64>)], weights: &[f64], build: &Build, grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, d)| g.leaf(Tensor::new(s.clone(), d.clone()).unwrap(), true)).collect();
    let out = build(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::new(shape, weights.to_vec()).unwrap());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    let mut grads = Vec::new();
    if grad {
        g.backward(loss).unwrap();
        grads = vars
            .iter()
            .map(|v| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*v).numel()]))
            .collect();
    }
    (value, grads)
}

fn op_error(shapes: &[&[usize]], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
        .iter()
        .map(|s| (s.to_vec(), (0..s.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let n = {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|(s, d)| g.leaf(Tensor::new(s.clone(), d.clone()).unwrap(), true)).collect();
        let out = build(&mut g, &vars);
        g.value(out).numel()
    };
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, analytic) = weighted(&inputs, &weights, build, true);
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = central_diff(
            |x| {
                let mut probe = inputs.clone();
                probe[i].1 = x.to_vec();
                weighted(&probe, &weights, build, false).0
            },
            &inputs[i].1,
        );
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

fn gradient_checks() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ops: Vec<(&str, Vec<&[usize]>, Box<Build>)> = vec![
        ("matmul", vec![&[3, 4], &[4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("batch_matmul_nt", vec![&[2, 3, 4], &[2, 5, 4]], Box::new(|g, v| g.batch_matmul(v[0], v[1], true).unwrap())),
        ("add_row", vec![&[4, 3], &[3]], Box::new(|g, v| g.add_row(v[0], v[1]).unwrap())),
        ("mul", vec![&[2, 3], &[2, 3]], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("relu", vec![&[6, 4]], Box::new(|g, v| g.relu(v[0]))),
        ("softmax", vec![&[3, 5]], Box::new(|g, v| g.softmax(v[0], 1).unwrap())),
        ("log_softmax", vec![&[3, 5]], Box::new(|g, v| g.log_softmax(v[0]))),
        ("layer_norm", vec![&[4, 6], &[6], &[6]], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())),
        ("embedding", vec![&[7, 3]], Box::new(|g, v| g.embedding(v[0], &[3, 0, 3, 6]).unwrap())),
        ("split_heads", vec![&[6, 4]], Box::new(|g, v| g.split_heads(v[0], 2, 3, 2).unwrap())),
        (
            "smoothed_ce",
            vec![&[4, 5]],
            Box::new(|g, v| g.smoothed_ce(v[0], &[Some(1), None, Some(4), Some(0)], 0.1).unwrap()),
        ),
    ];
    let mut worst_op: f64 = 0.0;
    for (name, shapes, build) in &ops {
        for _ in 0..5 {
            let err = op_error(shapes, build.as_ref(), &mut rng);
            ensure!(err < OP_GRAD_TOL, "{name}: relative error {err:e}");
            worst_op = worst_op.max(err);
        }
    }

    let cfg = ModelConfig {
        enc_layers: 1,
        dec_layers: 2,
        d_model: 8,
        ff_width: 12,
        heads: 2,
        vocab_size: 11,
        max_positions: 16,
        ..ModelConfig::default()
    }
    .without_dropout();
    let model = TransformerModel::<f64>::new(cfg, 5)?;
    let (sa, sb, ta, tb) = ([2u32, 7, 5, 4], [2u32, 9, 4], [2u32, 6, 8], [2u32, 10, 4]);
    let batch = PaddedBatch::from_pairs(&[(&sa[..], &ta[..]), (&sb[..], &tb[..])])?;
    let loss_at = |group: usize, values: &[f64]| {
        let mut m = model.clone();
        m.params_mut()[group].data_mut().copy_from_slice(values);
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let loss = m.loss_graph(&mut g, &vars, &batch, 0.1, None).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let loss = model.loss_graph(&mut g, &vars, &batch, 0.1, None)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();
    drop(g);
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for i in 0..model.params().len() {
        let numeric = central_diff(|v| loss_at(i, v), model.params()[i].data());
        all_a.extend_from_slice(&analytic[i]);
        all_n.extend(numeric);
    }
    let model_err = rel_err(&all_a, &all_n);
    ensure!(model_err < MODEL_GRAD_TOL, "transformer: relative error {model_err:e}");
    Ok(format!(
        "{} ops worst {worst_op:.1e} (< {OP_GRAD_TOL:e}), d=8 transformer {model_err:.1e} (< {MODEL_GRAD_TOL:e}) over {} weights",
        ops.len(),
        all_a.len()
    ))
}

struct RandomScorer(ChaCha8Rng);

impl CandidateScorer for RandomScorer {
    fn score(&mut self, _: &str, candidates: &[String]) -> ctxmt::Result<Vec<f64>> {
        Ok(candidates.iter().map(|_| self.0.random::<f64>()).collect())
    }
}

fn metric_fixtures() -> Result<String> {
    let close = |name: &str, got: f64, want: f64| -> Result<()> {
        ensure!((got - want).abs() <= METRIC_TOL, "{name}: {got} vs {want}");
        Ok(())
    };
    close(
        "bleu substitution",
        bleu(&["the cat sat on the mat"], &["the cat sat on a mat"])?,
        100.0 * (5.0 / 6.0 * 4.0 / 6.0 * 3.0 / 5.0 * 2.0 / 4.0f64).powf(0.25),
    )?;
    close("bleu brevity", bleu(&["the cat"], &["the cat sat on the mat"])?, 100.0 * (-2.0f64).exp())?;
    close(
        "bleu punctuation",
        bleu(&["Hello, world!"], &["Hello world!"])?,
        100.0 * (3.0 / 4.0 * 2.0 / 4.0 * 1.0 / 3.0 * 1.0 / 2.0f64).powf(0.25),
    )?;
    close("bleu pooled", bleu(&["a b c d", "x y"], &["a b c d", "x z"])?, 100.0 * (2.0f64 / 3.0).powf(0.25))?;
    close("chrf bigram", chrf("ab", "ac"), 0.25)?;
    let (pr, rc) = (7.0 / 18.0, 2.0 / 3.0);
    close("chrf short hyp", chrf("abc", "ab"), 5.0 * pr * rc / (4.0 * pr + rc))?;
    close("chrf whitespace", chrf("a b c", "abc"), 1.0)?;
    let line = "the quick brown fox jumps over the lazy dog .";
    close("bleu identity", bleu(&[line], &[line])?, 100.0)?;
    close("chrf identity", chrf(line, line), 1.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<ContrastiveExample> = (0..2000)
        .map(|i| ContrastiveExample {
            src: format!("s{i}"),
            ctx_src: vec![format!("c{i}")],
            ctx_tgt: vec![format!("t{i}")],
            reference: format!("r{i}"),
            contrastive_variants: vec![format!("v{i}")],
            antecedent_distance: Some(rng.random_range(0..3)),
        })
        .collect();
    let report = contrastive_accuracy(&mut RandomScorer(rng), &items, 1, AccuracyMode::AllVariants)?;
    ensure!(
        (report.accuracy - 0.5).abs() <= CHANCE_TOL,
        "random scorer accuracy {:.4}",
        report.accuracy
    );
    Ok(format!(
        "9 fixtures within {METRIC_TOL:e}, random scorer {:.4} on 2000 items",
        report.accuracy
    ))
}

fn suite(out: &Path, overrides: &[&str]) -> Result<SuiteReport> {
    let mut args = vec!["run-experiment", "--suite", "synthetic", "--out", p(out)];
    for o in overrides {
        args.extend(["--set", o]);
    }
    ctxmt(&args)?;
    Ok(serde_json::from_str(&fs::read_to_string(out.join("reports/suite.json"))?)?)
}

fn contextual_accuracy(r: &SuiteReport) -> Result<String> {
    let bl = r.system("Bl").context("Bl missing")?;
    let ctx = r.system("Ctx").context("Ctx missing")?;
    let ctx_acc = ctx.accuracy_ctx.context("Ctx has no contextual accuracy")?;
    let detail = format!(
        "Ctx {ctx_acc:.3} (>= 0.90), Bl {:.3} (<= 0.60), Ctx without context {:.3} (<= 0.60)",
        bl.accuracy(),
        ctx.accuracy_no_ctx
    );
    ensure!(ctx_acc >= 0.90 && bl.accuracy() <= 0.60 && ctx.accuracy_no_ctx <= 0.60, "{detail}");
    Ok(detail)
}

fn student(r: &SuiteReport) -> Result<String> {
    let bl = r.system("Bl").context("Bl missing")?.accuracy();
    let teacher = r.system("Ctx").context("teacher missing")?;
    let student = r.system("Student").context("Student missing")?;
    let (t_changed, s_changed) = (
        teacher.changed_pct.context("teacher changed%")?,
        student.changed_pct.context("student changed%")?,
    );
    let retained = student.accuracy() - bl;
    let gain = teacher.accuracy() - bl;
    let detail = format!(
        "student gain {retained:.3} vs 0.8 x teacher gain {:.3}; changed {s_changed:.1}% vs teacher {t_changed:.1}%",
        0.8 * gain
    );
    ensure!(retained >= 0.8 * gain && s_changed < t_changed, "{detail}");
    Ok(detail)
}

fn length_bins() -> Result<String> {
    let pairs = length_test_set(4102, 5);
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    // Hypotheses drop the second word of every fourth line.
    let hyps: Vec<String> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut w: Vec<&str> = p.target.split(' ').collect();
            if i % 4 == 0 && w.len() > 2 {
                w.remove(1);
            }
            w.join(" ")
        })
        .collect();
    let write = |name: &str, lines: Vec<String>| -> Result<std::path::PathBuf> {
        let path = d.join(name);
        fs::write(&path, lines.join("\n") + "\n")?;
        Ok(path)
    };
    let src = write("src", pairs.iter().map(|p| p.source.clone()).collect())?;
    let refs = write("ref", pairs.iter().map(|p| p.target.clone()).collect())?;
    let hyp = write("hyp", hyps.clone())?;
    let report = |hyp: &Path, refs: &Path, src: &Path, out: &Path| -> Result<serde_json::Value> {
        ctxmt(&[
            "analyze-length", "--hyp", p(hyp), "--reference", p(refs), "--src", p(src), "--median", "15", "--sd", "9",
            "--out", p(out),
        ])?;
        Ok(serde_json::from_str(&fs::read_to_string(out.join("report.json"))?)?)
    };
    let full = report(&hyp, &refs, &src, &d.join("full"))?;
    let bins = full["per_bin_bleu"].as_array().context("per_bin_bleu")?;
    let counts: Vec<u64> = bins.iter().map(|b| b["count"].as_u64().unwrap_or(0)).collect();
    ensure!(counts.iter().sum::<u64>() == 4102, "bin counts {counts:?}");
    ensure!(counts.iter().filter(|&&c| c > 0).count() >= 3, "lengths too uniform: {counts:?}");

    // Only the first bin, [0, 15].
    let keep: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].source.split_whitespace().count() <= 15).collect();
    let pick = |v: Vec<String>| keep.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let src1 = write("src1", pick(pairs.iter().map(|p| p.source.clone()).collect()))?;
    let ref1 = write("ref1", pick(pairs.iter().map(|p| p.target.clone()).collect()))?;
    let hyp1 = write("hyp1", pick(hyps))?;
    let one = report(&hyp1, &ref1, &src1, &d.join("one"))?;
    let corpus = one["bleu"].as_f64().context("bleu")?;
    let per_bin = one["per_bin_bleu"][0]["bleu"].as_f64().context("bin bleu")?;
    let from_full = bins[0]["bleu"].as_f64().context("full bin bleu")?;
    ensure!(
        (corpus - per_bin).abs() <= METRIC_TOL && (corpus - from_full).abs() <= METRIC_TOL,
        "corpus {corpus} vs single bin {per_bin} vs bin of full run {from_full}"
    );
    Ok(format!("counts {counts:?} sum to 4102; single-bin BLEU {per_bin:.4} = corpus {corpus:.4}"))
}

const REDUCED: &[&str] = &[
    "synthetic.train_docs=400",
    "synthetic.dev_docs=20",
    "synthetic.test_docs=20",
    "synthetic.contrastive_examples=60",
    "experiment.systems=[\"Bl\", \"Ctx\"]",
    "model.d_model=32",
    "model.ff_width=64",
    "model.heads=2",
    "model.enc_layers=1",
    "model.dec_layers=1",
    "train.max_steps=150",
    "train.checkpoint_interval=50",
];

fn reproducibility() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = suite(&a, REDUCED)?;
    let rb = suite(&b, REDUCED)?;
    let mut compared = 0;
    for name in ["Bl", "Ctx"] {
        let log = format!("logs/{name}.metrics.jsonl");
        ensure!(fs::read(a.join(&log))? == fs::read(b.join(&log))?, "{log} differs");
        let (x, y) = (ra.system(name).context(name)?, rb.system(name).context(name)?);
        ensure!(
            (x.final_dev_ppl - y.final_dev_ppl).abs() <= PPL_TOL,
            "{name}: final dev ppl {} vs {}",
            x.final_dev_ppl,
            y.final_dev_ppl
        );
        compared += fs::read_to_string(a.join(&log))?.lines().count();
    }
    ensure!(fs::read(a.join("manifest"))? == fs::read(b.join("manifest"))?, "manifests differ");
    Ok(format!("{compared} metric records identical, final dev ppl within {PPL_TOL:e}, manifests identical"))
}

fn main() {
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, result: Result<String>| {
        match result {
            Ok(detail) => println!("criterion {n}: PASS {detail}"),
            Err(e) => {
                failed += 1;
                println!("criterion {n}: FAIL {e:#}");
            }
        }
    };
    report(1, param_ladder());
    report(2, transform_counts());
    report(3, gradient_checks());
    report(4, metric_fixtures());
    let full_dir = tempfile::tempdir().expect("tempdir");
    match suite(full_dir.path(), &[]) {
        Ok(r) => {
            report(5, contextual_accuracy(&r));
            report(6, student(&r));
        }
        Err(e) => {
            report(5, Err(anyhow::anyhow!("suite failed: {e:#}")));
            report(6, Err(anyhow::anyhow!("suite failed")));
        }
    }
    report(7, length_bins());
    report(8, reproducibility());
    println!("acceptance finished in {:.0}s", start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
