//! Brute-force reference scorers: quadratic scans, no hashing, written
//! separately from the library metrics they check.

fn count_occurrences<T: PartialEq>(seq: &[T], gram: &[T]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len())
        .filter(|&i| &seq[i..i + gram.len()] == gram)
        .count()
}

fn clipped_matches<T: PartialEq>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    if hyp.len() < n {
        return (0, 0);
    }
    let total = hyp.len() - n + 1;
    let mut seen: Vec<&[T]> = Vec::new();
    let mut matches = 0;
    for i in 0..total {
        let g = &hyp[i..i + n];
        if seen.iter().any(|s| *s == g) {
            continue;
        }
        seen.push(g);
        matches += count_occurrences(hyp, g).min(count_occurrences(reference, g));
    }
    (matches, total)
}

/// Corpus BLEU, 4-gram, exponential smoothing, brevity penalty; token
/// sequences are already tokenized.
pub fn bleu_oracle(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut correct = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        sys_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let (m, t) = clipped_matches(h, r, n);
            correct[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let mut precisions = [0.0f64; 4];
    let mut smooth = 1.0;
    for n in 0..4 {
        if total[n] == 0 {
            break;
        }
        if correct[n] == 0 {
            smooth *= 2.0;
            precisions[n] = 100.0 / (smooth * total[n] as f64);
        } else {
            precisions[n] = 100.0 * correct[n] as f64 / total[n] as f64;
        }
    }
    let bp = if sys_len < ref_len {
        if sys_len > 0 {
            (1.0 - ref_len as f64 / sys_len as f64).exp()
        } else {
            0.0
        }
    } else {
        1.0
    };
    let log_sum: f64 = precisions
        .iter()
        .map(|&p| if p == 0.0 { -9_999_999_999.0 } else { p.ln() })
        .sum();
    bp * (log_sum / 4.0).exp()
}

/// Corpus chrF with character 6-grams, beta = 2, whitespace removed.
pub fn chrf_oracle(hyps: &[String], refs: &[String]) -> f64 {
    let mut hyp_counts = [0usize; 6];
    let mut ref_counts = [0usize; 6];
    let mut common = [0usize; 6];
    for (h, r) in hyps.iter().zip(refs) {
        let hc: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let rc: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=6 {
            let (m, t) = clipped_matches(&hc, &rc, n);
            common[n - 1] += m;
            hyp_counts[n - 1] += t;
            if rc.len() >= n {
                ref_counts[n - 1] += rc.len() - n + 1;
            }
        }
    }
    let (mut p, mut r, mut order) = (0.0, 0.0, 0);
    for n in 0..6 {
        if hyp_counts[n] > 0 && ref_counts[n] > 0 {
            p += common[n] as f64 / hyp_counts[n] as f64;
            r += common[n] as f64 / ref_counts[n] as f64;
            order += 1;
        }
    }
    if order == 0 {
        return 0.0;
    }
    p /= order as f64;
    r /= order as f64;
    if p + r == 0.0 {
        return 0.0;
    }
    5.0 * p * r / (4.0 * p + r)
}
