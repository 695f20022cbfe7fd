//! CoNLL column-format reader.
//!
//! Columns are whitespace separated with the token first and the tag last.
//! A blank line ends a sentence and `-DOCSTART-` lines are skipped. Tokens
//! are mapped to ids by hashing into a fixed number of buckets.

use std::fs;
use std::path::Path;

use super::data::{Dataset, Example, Target, PAD_ID};
use crate::error::{Error, Result};
use crate::model::HeadKind;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConllSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConllCorpus {
    pub sentences: Vec<ConllSentence>,
    /// Tag names in first-seen order; a tag's id is its index here.
    pub tag_names: Vec<String>,
}

impl ConllCorpus {
    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tag_names.iter().position(|t| t == tag)
    }

    /// Token-task dataset: token ids hashed into `1..buckets` (0 is padding),
    /// sentences longer than `seq` split into consecutive chunks. The `O` tag,
    /// when present, is the F1 negative class.
    pub fn to_dataset(&self, buckets: usize, seq: usize) -> Result<Dataset> {
        if buckets < 2 || seq == 0 {
            return Err(Error::Config("CoNLL dataset needs >= 2 buckets and seq >= 1".into()));
        }
        let mut examples = Vec::new();
        for s in &self.sentences {
            let ids: Vec<usize> = s.tokens.iter().map(|t| bucket(t, buckets)).collect();
            let tags: Vec<usize> = s
                .tags
                .iter()
                .map(|t| self.tag_id(t).expect("tags registered while parsing"))
                .collect();
            for (tok, tag) in ids.chunks(seq).zip(tags.chunks(seq)) {
                examples.push(Example {
                    tokens: tok.to_vec(),
                    target: Target::Tags(tag.to_vec()),
                });
            }
        }
        let negative = self.tag_id("O").unwrap_or(0);
        Dataset::new(HeadKind::Token, seq, self.tag_names.len().max(1), negative, examples)
    }
}

/// FNV-1a hash of `token` folded into `1..buckets`.
pub fn bucket(token: &str, buckets: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let id = 1 + (h % (buckets as u64 - 1)) as usize;
    debug_assert_ne!(id, PAD_ID);
    id
}

pub fn parse_conll_str(text: &str) -> Result<ConllCorpus> {
    let mut corpus = ConllCorpus::default();
    let mut current = ConllSentence {
        tokens: Vec::new(),
        tags: Vec::new(),
    };
    let flush = |corpus: &mut ConllCorpus, current: &mut ConllSentence| {
        if !current.tokens.is_empty() {
            corpus.sentences.push(std::mem::replace(
                current,
                ConllSentence {
                    tokens: Vec::new(),
                    tags: Vec::new(),
                },
            ));
        }
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            flush(&mut corpus, &mut current);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected at least two columns, found {:?}", line),
            });
        }
        let tag = cols[cols.len() - 1];
        if corpus.tag_id(tag).is_none() {
            corpus.tag_names.push(tag.to_string());
        }
        current.tokens.push(cols[0].to_string());
        current.tags.push(tag.to_string());
    }
    flush(&mut corpus, &mut current);
    Ok(corpus)
}

pub fn parse_conll(path: &Path) -> Result<ConllCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll_str(&text)
}
