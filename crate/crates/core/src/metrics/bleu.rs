use super::{check_corpus, ngram_counts, EvalInstance};
use crate::error::Result;

/// Corpus BLEU-1..`n_max` (unscaled). Clipped n-gram counts are pooled over
/// the corpus; the brevity penalty uses, per instance, the reference length
/// closest to the candidate (shorter on ties).
pub fn bleu(corpus: &[EvalInstance], n_max: usize) -> Result<Vec<f64>> {
    check_corpus(corpus)?;
    let mut matched = vec![0usize; n_max];
    let mut total = vec![0usize; n_max];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for inst in corpus {
        let c = inst.candidate.len();
        cand_len += c;
        ref_len +=
            inst.references.iter().map(Vec::len).min_by_key(|&r| (r.abs_diff(c), r)).expect("non-empty references");
        for n in 1..=n_max {
            let cand = ngram_counts(&inst.candidate, n);
            let refs: Vec<_> = inst.references.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, &count) in &cand {
                let max_ref = refs.iter().map(|r| r.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[n - 1] += count.min(max_ref);
            }
            total[n - 1] += c.saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(vec![0.0; n_max]);
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    let mut out = Vec::with_capacity(n_max);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..n_max {
        if matched[n] == 0 || total[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(out)
}
