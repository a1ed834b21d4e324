//! Brute-force caption metrics written without the library's helpers:
//! n-grams are plain lists, counts are linear scans, tf-idf vectors are
//! dense over every n-gram in the corpus.

pub fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut w: String = raw.to_lowercase();
        while w.chars().last().is_some_and(|c| c.is_ascii_punctuation()) {
            w.pop();
        }
        if !w.is_empty() {
            out.push(w);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Item {
    pub cand: Vec<String>,
    pub refs: Vec<Vec<String>>,
}

pub fn item(cand: &str, refs: &[&str]) -> Item {
    Item { cand: tokens(cand), refs: refs.iter().map(|r| tokens(r)).collect() }
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= t.len() {
        out.push(t[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// Corpus BLEU-1..4.
pub fn bleu(items: &[Item]) -> [f64; 4] {
    let mut hits = [0f64; 4];
    let mut tot = [0f64; 4];
    let mut c_len = 0f64;
    let mut r_len = 0f64;
    for it in items {
        let c = it.cand.len();
        c_len += c as f64;
        let mut best = it.refs[0].len();
        for r in &it.refs {
            let d = (r.len() as i64 - c as i64).abs();
            let bd = (best as i64 - c as i64).abs();
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best as f64;
        for n in 1..=4 {
            let cg = grams(&it.cand, n);
            tot[n - 1] += cg.len() as f64;
            for g in distinct(&cg) {
                let in_cand = count(&cg, &g);
                let in_ref = it.refs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap();
                hits[n - 1] += in_cand.min(in_ref) as f64;
            }
        }
    }
    let mut out = [0.0; 4];
    if c_len == 0.0 {
        return out;
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    for n in 1..=4 {
        let precisions: Vec<f64> = (0..n).map(|k| if tot[k] > 0.0 { hits[k] / tot[k] } else { 0.0 }).collect();
        if precisions.contains(&0.0) {
            continue;
        }
        let geo: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / n as f64;
        out[n - 1] = bp * geo.exp();
    }
    out
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            table[i][j] = if a[i] == b[j] { 1 + table[i + 1][j + 1] } else { table[i + 1][j].max(table[i][j + 1]) };
        }
    }
    table[0][0]
}

pub fn rouge_l(items: &[Item]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut total = 0.0;
    for it in items {
        let mut best = 0.0f64;
        for r in &it.refs {
            let l = lcs(&it.cand, r) as f64;
            if l == 0.0 {
                continue;
            }
            let p = l / it.cand.len() as f64;
            let rc = l / r.len() as f64;
            best = best.max((1.0 + beta2) * p * rc / (rc + beta2 * p));
        }
        total += best;
    }
    total / items.len() as f64
}

fn meteor_one(c: &[String], r: &[String]) -> f64 {
    let mut taken = vec![false; r.len()];
    let mut target: Vec<i64> = Vec::new();
    for w in c {
        let mut found = -1;
        for (j, x) in r.iter().enumerate() {
            if !taken[j] && x == w {
                taken[j] = true;
                found = j as i64;
                break;
            }
        }
        target.push(found);
    }
    let m = target.iter().filter(|&&t| t >= 0).count() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let mut chunks = 0.0;
    for i in 0..target.len() {
        if target[i] < 0 {
            continue;
        }
        let continues = i > 0 && target[i - 1] >= 0 && target[i - 1] + 1 == target[i];
        if !continues {
            chunks += 1.0;
        }
    }
    let p = m / c.len() as f64;
    let rc = m / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (chunks / m).powi(3))
}

pub fn meteor(items: &[Item]) -> f64 {
    items.iter().map(|it| it.refs.iter().map(|r| meteor_one(&it.cand, r)).fold(0.0, f64::max)).sum::<f64>()
        / items.len() as f64
}

pub fn cider_d(items: &[Item]) -> f64 {
    let n_docs = items.len() as f64;
    let mut vocab: Vec<Vec<Vec<String>>> = vec![Vec::new(); 4];
    for it in items {
        for t in std::iter::once(&it.cand).chain(&it.refs) {
            for n in 1..=4 {
                for g in grams(t, n) {
                    if !vocab[n - 1].contains(&g) {
                        vocab[n - 1].push(g);
                    }
                }
            }
        }
    }
    let df = |n: usize, g: &[String]| -> f64 {
        items.iter().filter(|it| it.refs.iter().any(|r| count(&grams(r, n), g) > 0)).count() as f64
    };
    let idf: Vec<Vec<f64>> =
        (1..=4).map(|n| vocab[n - 1].iter().map(|g| n_docs.ln() - df(n, g).max(1.0).ln()).collect()).collect();
    let vector = |t: &[String], n: usize| -> Vec<f64> {
        let gs = grams(t, n);
        vocab[n - 1].iter().zip(&idf[n - 1]).map(|(g, w)| count(&gs, g) as f64 * w).collect()
    };
    let mut total = 0.0;
    for it in items {
        let mut acc = 0.0;
        for r in &it.refs {
            let delta = it.cand.len() as f64 - r.len() as f64;
            let pen = (-delta * delta / 72.0).exp();
            let mut s = 0.0;
            for n in 1..=4 {
                let vc = vector(&it.cand, n);
                let vr = vector(r, n);
                let mut dot = 0.0;
                for k in 0..vc.len() {
                    dot += vc[k].min(vr[k]) * vr[k];
                }
                let nc = vc.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nc != 0.0 && nr != 0.0 {
                    dot /= nc * nr;
                }
                s += dot * pen;
            }
            acc += s / 4.0;
        }
        total += 10.0 * acc / it.refs.len() as f64;
    }
    total / n_docs
}

/// The 20-instance fixture, as oracle items and as library instances.
pub fn fixture() -> (Vec<Item>, Vec<mvcc_core::metrics::EvalInstance>) {
    let text = include_str!("../fixtures/metric_corpus.jsonl");
    let mut items = Vec::new();
    let mut corpus = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("fixture line is JSON");
        let cand = v["candidate"].as_str().expect("candidate");
        let refs: Vec<&str> = v["refs"].as_array().expect("refs").iter().map(|r| r.as_str().expect("ref")).collect();
        items.push(item(cand, &refs));
        corpus.push(mvcc_core::metrics::EvalInstance::new(cand, &refs));
    }
    (items, corpus)
}

/// Library and oracle agree on the fixture within `tol` (pre-×100).
/// Returns the largest disagreement.
pub fn fixture_agreement(tol: f64) -> Result<f64, String> {
    use mvcc_core::metrics::{bleu as lib_bleu, cider_d as lib_cider, meteor_simplified, rouge_l as lib_rouge};
    let (items, corpus) = fixture();
    if items.len() != 20 {
        return Err(format!("fixture has {} instances", items.len()));
    }
    let e = |x: mvcc_core::Result<f64>| x.map_err(|e| e.to_string());
    let b = lib_bleu(&corpus, 4).map_err(|e| e.to_string())?;
    let ob = bleu(&items);
    let mut pairs: Vec<(String, f64, f64)> = (0..4).map(|n| (format!("BLEU-{}", n + 1), b[n], ob[n])).collect();
    pairs.push(("ROUGE-L".into(), e(lib_rouge(&corpus))?, rouge_l(&items)));
    pairs.push(("meteor_simplified".into(), e(meteor_simplified(&corpus))?, meteor(&items)));
    pairs.push(("CIDEr-D".into(), e(lib_cider(&corpus))?, cider_d(&items)));
    let mut worst = 0.0f64;
    for (name, lib, orc) in &pairs {
        let d = (lib - orc).abs();
        if d.is_nan() || d >= tol {
            return Err(format!("{name}: library {lib}, oracle {orc}"));
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Each candidate equal to one of its references scores the maximum:
/// BLEU and ROUGE-L 100, METEOR its fragmentation-limited ceiling, and no
/// other sentence in place of a candidate raises corpus CIDEr-D.
pub fn identity_maximum() -> Result<(), String> {
    use mvcc_core::metrics::{cider_d as lib_cider, evaluate, EvalInstance};
    let refs = [
        "a building appears in the top left",
        "a vertical road is removed from the scene",
        "the scene is the same",
        "a building is demolished in the center and a horizontal road is built across the scene",
    ];
    let corpus: Vec<EvalInstance> = refs.iter().map(|r| EvalInstance::new(r, &[r])).collect();
    let rep = evaluate(&corpus).map_err(|e| e.to_string())?;
    for (name, v) in [
        ("BLEU-1", rep.bleu1),
        ("BLEU-2", rep.bleu2),
        ("BLEU-3", rep.bleu3),
        ("BLEU-4", rep.bleu4),
        ("ROUGE-L", rep.rouge_l),
    ] {
        if (v - 100.0).abs() >= 1e-9 {
            return Err(format!("{name} is {v} on an identity corpus"));
        }
    }
    let ceiling = refs.iter().map(|r| 1.0 - 0.5 / (tokens(r).len() as f64).powi(3)).sum::<f64>() / refs.len() as f64;
    if (rep.meteor / 100.0 - ceiling).abs() >= 1e-9 {
        return Err(format!("meteor_simplified {} below its ceiling {}", rep.meteor / 100.0, ceiling));
    }
    let base = lib_cider(&corpus).map_err(|e| e.to_string())?;
    for i in 0..refs.len() {
        for alt in refs.iter().filter(|a| **a != refs[i]).chain(["a building appears", "the scene"].iter()) {
            let mut swapped = corpus.clone();
            swapped[i] = EvalInstance::new(alt, &[refs[i]]);
            let s = lib_cider(&swapped).map_err(|e| e.to_string())?;
            if s > base {
                return Err(format!("CIDEr-D rose from {base} to {s} replacing candidate {i} by {alt:?}"));
            }
        }
    }
    Ok(())
}
