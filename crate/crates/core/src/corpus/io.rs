use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ParallelDocument, SegmentPair, TrainExample};
use crate::error::{Error, Result};

/// On-disk document layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Two aligned UTF-8 files, one segment per line, blank lines between documents.
    Blankline,
    /// One file with `doc_id<TAB>source<TAB>target` rows; consecutive rows with
    /// the same id form a document.
    Tsv,
}

/// Loads documents. For [`CorpusFormat::Blankline`] `target` names the
/// aligned target file; for [`CorpusFormat::Tsv`] it is ignored.
pub fn load_documents(source: &Path, target: Option<&Path>, format: CorpusFormat) -> Result<Vec<ParallelDocument>> {
    match format {
        CorpusFormat::Blankline => {
            let target = target.ok_or_else(|| Error::contract("blank-line corpora need a target file"))?;
            parse_blankline(&fs::read_to_string(source)?, &fs::read_to_string(target)?)
        }
        CorpusFormat::Tsv => parse_tsv(&fs::read_to_string(source)?),
    }
}

pub fn parse_blankline(source: &str, target: &str) -> Result<Vec<ParallelDocument>> {
    let src: Vec<&str> = source.lines().collect();
    let tgt: Vec<&str> = target.lines().collect();
    if src.len() != tgt.len() {
        let line = src.len().min(tgt.len()) + 1;
        return Err(Error::Ingest(format!(
            "line counts differ (source {}, target {}); first divergent line {line}",
            src.len(),
            tgt.len()
        )));
    }
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let (sb, tb) = (s.trim().is_empty(), t.trim().is_empty());
        if sb != tb {
            return Err(Error::Ingest(format!(
                "document boundary mismatch in document {} at line {}",
                docs.len(),
                i + 1
            )));
        }
        if sb {
            if !current.is_empty() {
                let id = format!("doc{}", docs.len());
                docs.push(ParallelDocument::new(id, std::mem::take(&mut current))?);
            }
        } else {
            current.push(SegmentPair::new(*s, *t));
        }
    }
    if !current.is_empty() {
        let id = format!("doc{}", docs.len());
        docs.push(ParallelDocument::new(id, current)?);
    }
    Ok(docs)
}

pub fn parse_tsv(text: &str) -> Result<Vec<ParallelDocument>> {
    let mut docs: Vec<ParallelDocument> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Ingest(format!(
                "line {}: expected 3 tab-separated columns, found {}",
                i + 1,
                cols.len()
            )));
        }
        let pair = SegmentPair::new(cols[1], cols[2]);
        match docs.last_mut() {
            Some(d) if d.doc_id == cols[0] => d.segments.push(pair),
            _ => docs.push(ParallelDocument::new(cols[0], vec![pair])?),
        }
    }
    Ok(docs)
}

fn check_segment(doc: &ParallelDocument, text: &str) -> Result<()> {
    if text.trim().is_empty() || text.contains('\n') {
        return Err(Error::contract(format!(
            "document {} has a segment that cannot be stored one-per-line: {text:?}",
            doc.doc_id
        )));
    }
    Ok(())
}

/// Writes documents in the blank-line format.
pub fn write_documents(docs: &[ParallelDocument], source: &Path, target: &Path) -> Result<()> {
    let mut s = String::new();
    let mut t = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            s.push('\n');
            t.push('\n');
        }
        for p in &doc.segments {
            check_segment(doc, &p.source)?;
            check_segment(doc, &p.target)?;
            s.push_str(&p.source);
            s.push('\n');
            t.push_str(&p.target);
            t.push('\n');
        }
    }
    fs::write(source, s)?;
    fs::write(target, t)?;
    Ok(())
}

/// Writes examples as two aligned files, one delimited example per line.
pub fn write_examples(examples: &[TrainExample], source: &Path, target: &Path) -> Result<()> {
    let mut s = fs::File::create(source)?;
    let mut t = fs::File::create(target)?;
    let mut sbuf = String::new();
    let mut tbuf = String::new();
    for e in examples {
        sbuf.push_str(&e.source);
        sbuf.push('\n');
        tbuf.push_str(&e.target);
        tbuf.push('\n');
    }
    s.write_all(sbuf.as_bytes())?;
    t.write_all(tbuf.as_bytes())?;
    Ok(())
}

pub fn read_examples(source: &Path, target: &Path) -> Result<Vec<TrainExample>> {
    let s = fs::read_to_string(source)?;
    let t = fs::read_to_string(target)?;
    let src: Vec<&str> = s.lines().collect();
    let tgt: Vec<&str> = t.lines().collect();
    if src.len() != tgt.len() {
        return Err(Error::Ingest(format!(
            "line counts differ (source {}, target {}); first divergent line {}",
            src.len(),
            tgt.len(),
            src.len().min(tgt.len()) + 1
        )));
    }
    src.iter()
        .zip(&tgt)
        .enumerate()
        .map(|(i, (a, b))| {
            TrainExample::from_pair(*a, *b).map_err(|e| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
