use super::{check_corpus, EvalInstance};
use crate::error::Result;

const BETA: f64 = 1.2;

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f_lcs(cand: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    (1.0 + BETA * BETA) * p * r / (r + BETA * BETA * p)
}

/// Mean over instances of the best LCS F-measure (β = 1.2) against any
/// reference. Unscaled.
pub fn rouge_l(corpus: &[EvalInstance]) -> Result<f64> {
    check_corpus(corpus)?;
    let total: f64 =
        corpus.iter().map(|inst| inst.references.iter().map(|r| f_lcs(&inst.candidate, r)).fold(0.0, f64::max)).sum();
    Ok(total / corpus.len() as f64)
}
