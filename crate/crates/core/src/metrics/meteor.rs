use super::{check_corpus, EvalInstance};
use crate::error::Result;

/// Exact-match METEOR for one candidate/reference pair (unscaled).
///
/// Each candidate word, left to right, aligns to the leftmost unused
/// identical reference word. `F = 10PR / (R + 9P)`, the fragmentation
/// penalty is `0.5·(chunks/matches)³`.
pub fn meteor_sentence(cand: &[String], reference: &[String]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<Option<usize>> = Vec::with_capacity(cand.len());
    for w in cand {
        let hit = (0..reference.len()).find(|&j| !used[j] && &reference[j] == w);
        if let Some(j) = hit {
            used[j] = true;
        }
        alignment.push(hit);
    }
    let matches = alignment.iter().flatten().count();
    if matches == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &alignment {
        match (*a, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *a;
    }
    let p = matches as f64 / cand.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunks as f64 / matches as f64;
    f_mean * (1.0 - 0.5 * frag.powi(3))
}

/// Corpus mean of the best per-reference score. Unscaled.
pub fn meteor_simplified(corpus: &[EvalInstance]) -> Result<f64> {
    check_corpus(corpus)?;
    let total: f64 = corpus
        .iter()
        .map(|inst| inst.references.iter().map(|r| meteor_sentence(&inst.candidate, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / corpus.len() as f64)
}
