use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::SpecialTokens;
use crate::error::{Error, Result};

/// Internal end-of-word marker attached to the last symbol of a word.
pub const END_OF_WORD: &str = "</w>";
/// Suffix marking a subword that continues into the next token.
pub const CONTINUATION: &str = "@@";

/// Ordered BPE merge table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

fn merged_is_reserved(left: &str, right: &str) -> bool {
    let joined = format!("{left}{right}");
    let bare = joined.strip_suffix(END_OF_WORD).unwrap_or(&joined);
    SpecialTokens::contains(bare)
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate merge {} {}", m.0, m.1)));
            }
            if merged_is_reserved(&m.0, &m.1) {
                return Err(Error::contract(format!("merge {} {} produces a reserved token", m.0, m.1)));
            }
        }
        Ok(BpeModel { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn end_of_word_marker(&self) -> &'static str {
        END_OF_WORD
    }

    /// The model restricted to its first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        BpeModel::from_merges(self.merges[..n.min(self.merges.len())].to_vec()).expect("prefix of a valid model")
    }

    /// Learns up to `num_merges` merges by repeatedly joining the most
    /// frequent adjacent symbol pair. Ties go to the lexicographically
    /// smallest pair. Reserved tokens are never counted.
    pub fn train<I, S>(lines: I, num_merges: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut word_counts: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for w in line.as_ref().split_whitespace() {
                if !SpecialTokens::contains(w) {
                    *word_counts.entry(w.to_string()).or_default() += 1;
                }
            }
        }
        let mut sorted: Vec<(String, u64)> = word_counts.into_iter().collect();
        sorted.sort();

        // Symbol interning keeps the inner loop on integers.
        let mut names: Vec<String> = Vec::new();
        let mut ids: HashMap<String, u32> = HashMap::new();
        let mut intern = |s: String, names: &mut Vec<String>| -> u32 {
            *ids.entry(s.clone()).or_insert_with(|| {
                names.push(s);
                (names.len() - 1) as u32
            })
        };
        let mut words: Vec<(Vec<u32>, u64)> = sorted
            .into_iter()
            .map(|(w, c)| {
                let syms = word_symbols(&w).into_iter().map(|s| intern(s, &mut names)).collect();
                (syms, c)
            })
            .collect();

        let mut merges = Vec::with_capacity(num_merges);
        while merges.len() < num_merges {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (syms, c) in &words {
                for p in syms.windows(2) {
                    *counts.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = counts
                .into_iter()
                .filter(|((a, b), _)| !merged_is_reserved(&names[*a as usize], &names[*b as usize]))
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        let ka = (&names[pa.0 as usize], &names[pa.1 as usize]);
                        let kb = (&names[pb.0 as usize], &names[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                });
            let Some(((a, b), _)) = best else { break };
            let joined = format!("{}{}", names[a as usize], names[b as usize]);
            let new_id = intern(joined, &mut names);
            for (syms, _) in words.iter_mut() {
                if syms.len() < 2 {
                    continue;
                }
                let mut out = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                        out.push(new_id);
                        i += 2;
                    } else {
                        out.push(syms[i]);
                        i += 1;
                    }
                }
                *syms = out;
            }
            merges.push((names[a as usize].clone(), names[b as usize].clone()));
        }
        BpeModel::from_merges(merges).expect("trained merges are unique")
    }

    /// Segments one word into symbols (with the end-of-word marker still
    /// attached to the last one).
    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|r| (*r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == a && &syms[i + 1] == b {
                    out.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    /// Splits whitespace-separated text into subword tokens; non-final pieces
    /// of a word carry the `@@` suffix. Reserved tokens pass through intact.
    ///
    /// Words that themselves end in `@@` do not survive [`bpe_reverse`].
    pub fn apply(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if SpecialTokens::contains(word) {
                out.push(word.to_string());
                continue;
            }
            let syms = self.segment_word(word);
            let n = syms.len();
            for (i, mut s) in syms.into_iter().enumerate() {
                if i + 1 == n {
                    if let Some(stripped) = s.strip_suffix(END_OF_WORD) {
                        s = stripped.to_string();
                    }
                } else {
                    s.push_str(CONTINUATION);
                }
                out.push(s);
            }
        }
        out
    }

    /// [`BpeModel::apply`] joined with single spaces.
    pub fn apply_line(&self, text: &str) -> String {
        self.apply(text).join(" ")
    }

    /// One `left right` pair per line, in merge order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (a, b) in &self.merges {
            text.push_str(a);
            text.push(' ');
            text.push_str(b);
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 2 || parts[0].is_empty() || parts[1].is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected `left right`, got {line:?}"),
                });
            }
            merges.push((parts[0].to_string(), parts[1].to_string()));
        }
        BpeModel::from_merges(merges)
    }
}

/// Undoes subword segmentation: tokens ending in `@@` are glued to their successor.
pub fn bpe_reverse<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue = true;
    for t in tokens {
        let t = t.as_ref();
        if !glue {
            out.push(' ');
        }
        match t.strip_suffix(CONTINUATION) {
            Some(piece) => {
                out.push_str(piece);
                glue = true;
            }
            None => {
                out.push_str(t);
                glue = false;
            }
        }
    }
    out
}
