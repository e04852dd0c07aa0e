use ctxmt::corpus::{
    count_separators, length_filter, load_documents, mirror_dev, transform_multisegment, write_documents, CorpusFormat,
    DevMode, ExampleKind, ParallelDocument, SegmentPair, TrainExample, END, SEP, START,
};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn segment() -> impl Strategy<Value = SegmentPair> {
    (prop::collection::vec(word(), 1..6), prop::collection::vec(word(), 1..6))
        .prop_map(|(s, t)| SegmentPair::new(s.join(" "), t.join(" ")))
}

fn corpus(max_docs: usize, max_segs: usize) -> impl Strategy<Value = Vec<ParallelDocument>> {
    prop::collection::vec(prop::collection::vec(segment(), 1..=max_segs), 0..=max_docs).prop_map(|docs| {
        docs.into_iter()
            .enumerate()
            .map(|(i, segs)| ParallelDocument::new(format!("doc{i}"), segs).unwrap())
            .collect()
    })
}

/// Splits `<start> a <sep> b <end>` back into its segments.
fn split_segments(text: &str) -> Vec<String> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(toks.first(), Some(&START));
    assert_eq!(toks.last(), Some(&END));
    toks[1..toks.len() - 1]
        .split(|t| *t == SEP)
        .map(|chunk| chunk.join(" "))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transform_count_identity(docs in corpus(50, 20), k in 1usize..5) {
        let out = transform_multisegment(&docs, k).unwrap();
        let expected: usize = docs.iter().map(|d| d.len() + d.len().saturating_sub(k)).sum();
        prop_assert_eq!(out.len(), expected);
        prop_assert!(out.iter().all(TrainExample::is_well_formed));
    }

    #[test]
    fn multi_examples_split_into_consecutive_segments(docs in corpus(8, 8), k in 1usize..4) {
        let out = transform_multisegment(&docs, k).unwrap();
        let singles = docs.iter().map(ParallelDocument::len).sum::<usize>();
        prop_assert!(out[..singles].iter().all(|e| e.kind == ExampleKind::Single));
        let mut multis = out[singles..].iter();
        for doc in &docs {
            for window in doc.segments.windows(k + 1) {
                let ex = multis.next().unwrap();
                let src = split_segments(&ex.source);
                let tgt = split_segments(&ex.target);
                prop_assert_eq!(src.len(), k + 1);
                let want_src: Vec<String> = window.iter().map(|p| p.source.clone()).collect();
                let want_tgt: Vec<String> = window.iter().map(|p| p.target.clone()).collect();
                prop_assert_eq!(src, want_src);
                prop_assert_eq!(tgt, want_tgt);
            }
        }
        prop_assert!(multis.next().is_none());
    }

    #[test]
    fn transform_is_deterministic(docs in corpus(10, 6)) {
        prop_assert_eq!(transform_multisegment(&docs, 1).unwrap(), transform_multisegment(&docs, 1).unwrap());
    }

    #[test]
    fn length_filter_matches_recount(docs in corpus(10, 10), cap in 3usize..30) {
        let examples = transform_multisegment(&docs, 1).unwrap();
        let kept = length_filter(examples.clone(), cap);
        let recount: Vec<&TrainExample> = examples
            .iter()
            .filter(|e| e.source.split(' ').filter(|t| !t.is_empty()).count() <= cap
                && e.target.split(' ').filter(|t| !t.is_empty()).count() <= cap)
            .collect();
        prop_assert_eq!(kept.len(), recount.len());
        prop_assert!(kept.iter().zip(recount).all(|(a, b)| a == b));
    }
}

#[test]
fn overlong_multis_drop_while_singles_survive() {
    let seg = |n: usize, tag: &str| (0..n).map(|i| format!("{tag}{i}")).collect::<Vec<_>>().join(" ");
    let doc = ParallelDocument::new(
        "d",
        vec![SegmentPair::new(seg(50, "a"), seg(50, "x")), SegmentPair::new(seg(50, "b"), seg(50, "y"))],
    )
    .unwrap();
    let kept = length_filter(transform_multisegment(&[doc], 1).unwrap(), 95);
    // Singles are 52 tokens with delimiters; the multi is 104.
    assert_eq!(kept.len(), 2);
    assert!(kept.iter().all(|e| e.kind == ExampleKind::Single));
}

#[test]
fn ninety_six_tokens_are_removed() {
    let long = TrainExample::from_pair(vec!["w"; 96].join(" "), "x").unwrap();
    let fits = TrainExample::from_pair(vec!["w"; 95].join(" "), "x").unwrap();
    let kept = length_filter(vec![long, fits.clone()], 95);
    assert_eq!(kept, vec![fits]);
    assert!(length_filter(Vec::new(), 95).is_empty());
}

#[test]
fn dev_mirroring_counts() {
    let doc = |id: &str| {
        ParallelDocument::new(id, vec![SegmentPair::new("a b", "c d"), SegmentPair::new("e", "f")]).unwrap()
    };
    let dev = vec![doc("x"), doc("y")];
    let ctx = mirror_dev(&dev, &DevMode::Contextual { context_window: 1 }).unwrap();
    assert_eq!(ctx.iter().filter(|e| e.kind == ExampleKind::Single).count(), 4);
    assert_eq!(ctx.iter().filter(|e| e.kind == ExampleKind::Multi).count(), 2);
    assert_eq!(mirror_dev(&dev, &DevMode::Baseline).unwrap().len(), 4);

    let teacher: Vec<String> = (0..4).map(|i| format!("<start> hyp{i} <end>")).collect();
    let distilled = mirror_dev(
        &dev,
        &DevMode::Distilled {
            teacher_outputs: Some(teacher),
            context_window: 0,
        },
    )
    .unwrap();
    assert_eq!(distilled.len(), 8);
    assert!(mirror_dev(
        &dev,
        &DevMode::Distilled {
            teacher_outputs: None,
            context_window: 0
        }
    )
    .is_err());
}

#[test]
fn blankline_write_load_round_trip() {
    let docs = vec![
        ParallelDocument::new(
            "doc0",
            (0..5).map(|i| SegmentPair::new(format!("src {i} ."), format!("tgt {i} ."))).collect(),
        )
        .unwrap(),
        ParallelDocument::new(
            "doc1",
            (0..3).map(|i| SegmentPair::new(format!("more {i}"), format!("mehr {i}"))).collect(),
        )
        .unwrap(),
    ];
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("train.src"), dir.path().join("train.tgt"));
    write_documents(&docs, &s, &t).unwrap();
    let back = load_documents(&s, Some(&t), CorpusFormat::Blankline).unwrap();
    assert_eq!(back, docs);
    assert_eq!(back.iter().map(ParallelDocument::len).collect::<Vec<_>>(), vec![5, 3]);
}

#[test]
fn misaligned_files_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::write(&s, (1..=8).map(|i| format!("s{i}\n")).collect::<String>()).unwrap();
    std::fs::write(&t, (1..=7).map(|i| format!("t{i}\n")).collect::<String>()).unwrap();
    let err = load_documents(&s, Some(&t), CorpusFormat::Blankline).unwrap_err().to_string();
    assert!(err.contains("line 8"), "{err}");
}

#[test]
fn separators_are_counted_as_tokens() {
    assert_eq!(count_separators("<start> a <sep> b <sep> c <end>"), 2);
    assert_eq!(count_separators("<start> a<sep> b <end>"), 0);
}
