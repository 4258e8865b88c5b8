use super::vocab::{TokenClass, Vocab};

/// Deterministic language identifier for toy text.
///
/// Each marker or lexical token is evidence for its language; numerals,
/// tags and specials are ignored. The result is the language with the most
/// evidence, provided that
///
/// - at least two tokens carry evidence (short and numeric lines are
///   "unknown"),
/// - it holds a strict majority of the evidence, and
/// - its marker occurs in the sentence.
pub fn identify_language(vocab: &Vocab, tokens: &[u32]) -> Option<usize> {
    let n = vocab.languages().len();
    let mut evidence = vec![0usize; n];
    let mut marked = vec![false; n];
    for &t in tokens {
        match vocab.classify(t) {
            Some(TokenClass::Marker(l)) => {
                evidence[l] += 1;
                marked[l] = true;
            }
            Some(TokenClass::Lexical { lang, .. }) => evidence[lang] += 1,
            _ => {}
        }
    }
    let total: usize = evidence.iter().sum();
    let (best, &count) = evidence.iter().enumerate().max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i)))?;
    if total < 2 || 2 * count <= total || !marked[best] {
        return None;
    }
    Some(best)
}

/// [`identify_language`] returning the language id.
pub fn identify_language_id<'a>(vocab: &'a Vocab, tokens: &[u32]) -> Option<&'a str> {
    identify_language(vocab, tokens).map(|i| vocab.languages()[i].as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(["en", "fr", "de"].map(String::from).to_vec(), vec!["ted".into()], 10, 3).unwrap()
    }

    #[test]
    fn marked_sentence_is_identified() {
        let v = vocab();
        let s = [v.marker(1), v.lexical(1, 2), v.lexical(1, 5), v.numeral(0)];
        assert_eq!(identify_language_id(&v, &s), Some("fr"));
    }

    #[test]
    fn missing_marker_or_tiny_evidence_is_unknown() {
        let v = vocab();
        assert_eq!(identify_language(&v, &[v.lexical(1, 2), v.lexical(1, 3)]), None);
        assert_eq!(identify_language(&v, &[v.numeral(0), v.numeral(1)]), None);
        assert_eq!(identify_language(&v, &[]), None);
        assert_eq!(identify_language(&v, &[v.marker(2)]), None);
    }

    #[test]
    fn even_split_is_unknown() {
        let v = vocab();
        let s = [v.marker(1), v.lexical(1, 0), v.marker(2), v.lexical(2, 0)];
        assert_eq!(identify_language(&v, &s), None);
    }
}
