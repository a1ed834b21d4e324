//! Caption evaluation: corpus BLEU-1..4, ROUGE-L, CIDEr-D and an
//! exact-match METEOR, all reported on a ×100 scale.

mod bleu;
mod cider;
mod meteor;
mod rouge;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bleu::bleu;
pub use cider::cider_d;
pub use meteor::{meteor_sentence, meteor_simplified};
pub use rouge::{lcs_len, rouge_l};

/// Lowercases, splits on whitespace, and strips trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_end_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// One candidate caption against its references, already tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalInstance {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalInstance {
    pub fn new(candidate: &str, references: &[&str]) -> Self {
        EvalInstance { candidate: tokenize(candidate), references: references.iter().map(|r| tokenize(r)).collect() }
    }
}

pub(crate) fn check_corpus(corpus: &[EvalInstance]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Contract("empty candidate corpus".into()));
    }
    if let Some(i) = corpus.iter().position(|c| c.references.is_empty()) {
        return Err(Error::Contract(format!("instance {i} has no references")));
    }
    Ok(())
}

/// Multiset of the `n`-grams of `tokens`.
pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "meteor_simplified")]
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub instances: usize,
}

impl MetricReport {
    /// Column order of the usual results table.
    pub fn row(&self) -> [f64; 7] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge_l, self.cider_d]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// All seven metrics over one corpus, scaled ×100.
pub fn evaluate(corpus: &[EvalInstance]) -> Result<MetricReport> {
    check_corpus(corpus)?;
    let b = bleu(corpus, 4)?;
    Ok(MetricReport {
        bleu1: 100.0 * b[0],
        bleu2: 100.0 * b[1],
        bleu3: 100.0 * b[2],
        bleu4: 100.0 * b[3],
        meteor: 100.0 * meteor_simplified(corpus)?,
        rouge_l: 100.0 * rouge_l(corpus)?,
        cider_d: 100.0 * cider_d(corpus)?,
        instances: corpus.len(),
    })
}

/// One line of a references file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub id: String,
    pub refs: Vec<String>,
}

/// Pairs candidates (one per line) with JSON-lines references.
pub fn load_corpus(candidates: &Path, references: &Path) -> Result<Vec<EvalInstance>> {
    let cand_text = std::fs::read_to_string(candidates).map_err(|e| Error::io(candidates, e))?;
    let ref_text = std::fs::read_to_string(references).map_err(|e| Error::io(references, e))?;
    let cands: Vec<&str> = cand_text.lines().collect();
    let mut refs = Vec::new();
    for (n, line) in ref_text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ReferenceRecord = serde_json::from_str(line)
            .map_err(|e| Error::Ingestion(format!("{} line {}: {e}", references.display(), n + 1)))?;
        if rec.refs.is_empty() {
            return Err(Error::Ingestion(format!("reference record {} has no captions", rec.id)));
        }
        refs.push(rec);
    }
    if cands.len() != refs.len() {
        return Err(Error::Ingestion(format!("{} candidates but {} reference records", cands.len(), refs.len())));
    }
    Ok(cands
        .iter()
        .zip(&refs)
        .map(|(c, r)| EvalInstance { candidate: tokenize(c), references: r.refs.iter().map(|s| tokenize(s)).collect() })
        .collect())
}

pub fn evaluate_corpus(candidates: &Path, references: &Path) -> Result<MetricReport> {
    evaluate(&load_corpus(candidates, references)?)
}
