use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A targeted test item: the model is correct when it scores `reference`
/// above every contrastive variant, given the source and its context.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveExample {
    pub src: String,
    /// Preceding source segments, most recent last.
    #[serde(default)]
    pub ctx_src: Vec<String>,
    #[serde(default)]
    pub ctx_tgt: Vec<String>,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(rename = "contrastive")]
    pub contrastive_variants: Vec<String>,
    /// Sentences between the pronoun and its antecedent, when known.
    #[serde(rename = "distance", default, skip_serializing_if = "Option::is_none")]
    pub antecedent_distance: Option<usize>,
}

impl ContrastiveExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.contrastive_variants.is_empty() {
            return Err("no contrastive variants".into());
        }
        if let Some(v) = self.contrastive_variants.iter().find(|v| **v == self.reference) {
            return Err(format!("reference equals contrastive variant {v:?}"));
        }
        if self.ctx_src.len() != self.ctx_tgt.len() {
            return Err(format!(
                "{} source context segments but {} target context segments",
                self.ctx_src.len(),
                self.ctx_tgt.len()
            ));
        }
        Ok(())
    }
}

/// Parses JSON-lines records (`src`, `ctx_src`, `ctx_tgt`, `ref`,
/// `contrastive`, `distance`). Blank lines are skipped.
pub fn parse_contrastive(text: &str, path: &Path) -> Result<Vec<ContrastiveExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: ContrastiveExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        ex.validate().map_err(|msg| Error::Validation { index: out.len(), msg })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_contrastive(path: &Path) -> Result<Vec<ContrastiveExample>> {
    parse_contrastive(&fs::read_to_string(path)?, path)
}

pub fn write_contrastive(examples: &[ContrastiveExample], path: &Path) -> Result<()> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&serde_json::to_string(ex)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
