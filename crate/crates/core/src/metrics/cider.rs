use std::collections::{BTreeMap, HashMap, HashSet};

use super::{check_corpus, ngram_counts, EvalInstance};
use crate::error::Result;

const N_MAX: usize = 4;
const SIGMA: f64 = 6.0;

struct TfIdf<'a> {
    vec: Vec<BTreeMap<&'a [String], f64>>,
    norm: Vec<f64>,
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&[String], usize>, log_docs: f64) -> TfIdf<'a> {
    let mut vec = Vec::with_capacity(N_MAX);
    let mut norm = Vec::with_capacity(N_MAX);
    for n in 1..=N_MAX {
        let mut v = BTreeMap::new();
        let mut sq = 0.0;
        for (gram, tf) in ngram_counts(tokens, n) {
            let d = df.get(gram).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_docs - d.ln());
            sq += w * w;
            v.insert(gram, w);
        }
        vec.push(v);
        norm.push(sq.sqrt());
    }
    TfIdf { vec, norm, len: tokens.len() }
}

/// CIDEr-D (unscaled, in `[0, 10]`). Document frequencies count the
/// instances whose reference set contains an n-gram; candidate weights are
/// clipped by the reference weights; a Gaussian penalty (σ = 6) applies to
/// the length difference.
pub fn cider_d(corpus: &[EvalInstance]) -> Result<f64> {
    check_corpus(corpus)?;
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for inst in corpus {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for r in &inst.references {
            for n in 1..=N_MAX {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for gram in seen {
            *df.entry(gram).or_insert(0) += 1;
        }
    }
    if corpus.len() < 2 {
        log::warn!("CIDEr-D over a single document: every idf is zero");
    }
    let log_docs = (corpus.len() as f64).ln();
    let mut total = 0.0;
    for inst in corpus {
        let cand = tfidf(&inst.candidate, &df, log_docs);
        let mut per_ref = 0.0;
        for r in &inst.references {
            let rv = tfidf(r, &df, log_docs);
            let delta = cand.len as f64 - rv.len as f64;
            let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            let mut sim = 0.0;
            for n in 0..N_MAX {
                let mut val = 0.0;
                for (gram, &w) in &cand.vec[n] {
                    if let Some(&rw) = rv.vec[n].get(gram) {
                        val += w.min(rw) * rw;
                    }
                }
                if cand.norm[n] != 0.0 && rv.norm[n] != 0.0 {
                    val /= cand.norm[n] * rv.norm[n];
                }
                sim += val * penalty;
            }
            per_ref += sim / N_MAX as f64;
        }
        total += 10.0 * per_ref / inst.references.len() as f64;
    }
    Ok(total / corpus.len() as f64)
}
