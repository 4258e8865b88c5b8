//! Corpus BLEU and chrF.
//!
//! BLEU: 4-gram, brevity penalty, exponential smoothing of zero-match
//! orders. Text is split on whitespace; toy tokens carry no punctuation, so
//! 13a tokenization would not change them. chrF: character 1–6-grams with
//! whitespace removed, precision and recall averaged over orders, β = 2,
//! reported in [0, 1].

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

fn ngram_counts<T: Hash + Eq>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and hypothesis n-grams of one order.
fn order_stats<T: Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, hyp.len().saturating_sub(n - 1))
}

fn check_sizes(h: usize, r: usize) -> Result<()> {
    if h != r {
        return Err(Error::Evaluation(format!("{h} hypotheses for {r} references")));
    }
    if h == 0 {
        return Err(Error::Evaluation("cannot score an empty corpus".into()));
    }
    Ok(())
}

/// Corpus BLEU over pre-tokenized sentences, in [0, 100].
pub fn bleu_tokens<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_sizes(hyps.len(), refs.len())?;
    let mut correct = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        sys_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let (m, t) = order_stats(h, r, n);
            correct[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let mut log_sum = 0.0;
    let mut smooth = 1.0;
    for n in 0..4 {
        if total[n] == 0 {
            // no n-grams of this order at all: the score collapses to 0
            return Ok(0.0);
        }
        let p = if correct[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * total[n] as f64)
        } else {
            100.0 * correct[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if sys_len < ref_len {
        (1.0 - ref_len as f64 / sys_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / 4.0).exp())
}

/// Corpus BLEU of whitespace-separated sentences.
pub fn bleu(hyps: &[String], refs: &[String]) -> Result<f64> {
    bleu_tokens(&split_words(hyps), &split_words(refs))
}

fn split_words(v: &[String]) -> Vec<Vec<&str>> {
    v.iter().map(|s| s.split_whitespace().collect()).collect()
}

/// Corpus chrF (β = 2, 6-gram, whitespace ignored), in [0, 1].
pub fn chrf(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_sizes(hyps.len(), refs.len())?;
    const ORDER: usize = 6;
    let mut hyp_n = [0usize; ORDER];
    let mut ref_n = [0usize; ORDER];
    let mut common = [0usize; ORDER];
    for (h, r) in hyps.iter().zip(refs) {
        let hc: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let rc: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=ORDER {
            let (m, t) = order_stats(&hc, &rc, n);
            common[n - 1] += m;
            hyp_n[n - 1] += t;
            ref_n[n - 1] += rc.len().saturating_sub(n - 1);
        }
    }
    let (mut p, mut r, mut k) = (0.0, 0.0, 0);
    for n in 0..ORDER {
        if hyp_n[n] > 0 && ref_n[n] > 0 {
            p += common[n] as f64 / hyp_n[n] as f64;
            r += common[n] as f64 / ref_n[n] as f64;
            k += 1;
        }
    }
    if k == 0 {
        return Ok(0.0);
    }
    let (p, r) = (p / k as f64, r / k as f64);
    if p + r == 0.0 {
        return Ok(0.0);
    }
    let b2 = 4.0;
    Ok((1.0 + b2) * p * r / (b2 * p + r))
}
