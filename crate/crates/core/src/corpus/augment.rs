//! Back-translation, denoising copies and domain tags.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::splits::{Pair, ParallelCorpus, Synthetic};
use super::vocab::{TokenClass, Vocab, MASK};
use super::world::PIVOT_LANG;
use crate::error::{Error, Result};
use crate::routing::Route;

/// Anything that can translate a batch of raw (unformatted) sentences.
pub trait Translator {
    fn translate(&self, route: &Route, sources: &[Vec<u32>]) -> Result<Vec<Vec<u32>>>;
}

/// Both orientations of a back-translated corpus.
#[derive(Clone, Debug)]
pub struct BackTranslation {
    /// en→ℓ: synthetic English source, clean ℓ target.
    pub into_lang: ParallelCorpus,
    /// ℓ→en: clean ℓ source, synthetic English target.
    pub from_lang: ParallelCorpus,
}

/// Translates clean ℓ text into English with `model` and pairs each clean
/// line with its synthetic English side. `domain` labels the emitted
/// routes; the translation itself runs without a domain.
pub fn back_translate(model: &impl Translator, mono: &[(u64, Vec<u32>)], lang: &str, domain: &str) -> Result<BackTranslation> {
    if mono.is_empty() {
        return Err(Error::Corpus(format!("no monolingual `{lang}` text to back-translate")));
    }
    if lang == PIVOT_LANG {
        return Err(Error::Corpus("back-translation needs a non-English language".into()));
    }
    let sources: Vec<Vec<u32>> = mono.iter().map(|(_, s)| s.clone()).collect();
    let english = model.translate(&Route::new(lang, PIVOT_LANG, None), &sources)?;
    if english.len() != mono.len() {
        return Err(Error::Corpus(format!(
            "translator returned {} lines for {} inputs",
            english.len(),
            mono.len()
        )));
    }
    let mut into = Vec::with_capacity(mono.len());
    let mut from = Vec::with_capacity(mono.len());
    for ((id, clean), en) in mono.iter().zip(english) {
        into.push(Pair {
            pivot_id: *id,
            src: en.clone(),
            tgt: clean.clone(),
            synthetic: Synthetic::Source,
        });
        from.push(Pair {
            pivot_id: *id,
            src: clean.clone(),
            tgt: en,
            synthetic: Synthetic::Target,
        });
    }
    Ok(BackTranslation {
        into_lang: ParallelCorpus {
            route: Route::new(PIVOT_LANG, lang, Some(domain)),
            pairs: into,
        },
        from_lang: ParallelCorpus {
            route: Route::new(lang, PIVOT_LANG, Some(domain)),
            pairs: from,
        },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    #[default]
    None,
    /// Swap `round(rate·len/2)` disjoint neighbour pairs.
    Swap,
    /// Replace `round(rate·len)` positions with `<mask>`.
    Mask,
}

/// Noisy copy of `line`. Returns the copy and the positions touched.
pub fn add_noise(line: &[u32], noise: Noise, rate: f64, rng: &mut impl Rng) -> (Vec<u32>, Vec<usize>) {
    let mut out = line.to_vec();
    let n = line.len();
    let touched = match noise {
        Noise::None => Vec::new(),
        Noise::Mask => {
            let k = ((rate * n as f64).round() as usize).min(n);
            let mut pos = sample(rng, n, k).into_vec();
            pos.sort_unstable();
            for &p in &pos {
                out[p] = MASK;
            }
            pos
        }
        Noise::Swap => {
            let k = ((rate * n as f64 / 2.0).round() as usize).min(n / 2);
            // Choosing k of n-k slots and shifting the j-th by j yields k
            // non-overlapping starts uniformly.
            let mut slots = sample(rng, n - k, k).into_vec();
            slots.sort_unstable();
            let mut pos = Vec::with_capacity(2 * k);
            for (j, s) in slots.into_iter().enumerate() {
                let a = s + j;
                out.swap(a, a + 1);
                pos.extend([a, a + 1]);
            }
            pos
        }
    };
    (out, touched)
}

/// ℓ→ℓ pairs whose source is a noisy copy of the clean target.
pub fn make_denoising_pairs(
    mono: &[(u64, Vec<u32>)],
    lang: &str,
    domain: Option<&str>,
    noise: Noise,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<ParallelCorpus> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("noise rate {rate} outside [0, 1)")));
    }
    Ok(ParallelCorpus {
        route: Route::new(lang, lang, domain),
        pairs: mono
            .iter()
            .map(|(id, clean)| Pair {
                pivot_id: *id,
                src: add_noise(clean, noise, rate, rng).0,
                tgt: clean.clone(),
                synthetic: Synthetic::None,
            })
            .collect(),
    })
}

/// `[<domain>] + src`; a source that already starts with a tag is rejected.
pub fn prepend_domain_tag(pair: &Pair, vocab: &Vocab, domain: &str) -> Result<Pair> {
    let tag = vocab.domain_tag(domain)?;
    if let Some(&first) = pair.src.first() {
        if matches!(vocab.classify(first), Some(TokenClass::DomainTag(_))) {
            return Err(Error::Corpus(format!("pair {} is already tagged", pair.pivot_id)));
        }
    }
    let mut src = Vec::with_capacity(pair.src.len() + 1);
    src.push(tag);
    src.extend_from_slice(&pair.src);
    Ok(Pair { src, ..pair.clone() })
}

/// Removes domain tags, e.g. before scoring.
pub fn strip_domain_tags(vocab: &Vocab, tokens: &[u32]) -> Vec<u32> {
    tokens
        .iter()
        .copied()
        .filter(|&t| !matches!(vocab.classify(t), Some(TokenClass::DomainTag(_))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::new(["en", "fr"].map(String::from).to_vec(), vec!["medical".into()], 10, 2).unwrap()
    }

    #[test]
    fn mask_touches_exact_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let line: Vec<u32> = (20..30).collect();
        let (out, pos) = add_noise(&line, Noise::Mask, 0.3, &mut rng);
        assert_eq!(pos.len(), 3);
        assert_eq!(out.iter().filter(|&&t| t == MASK).count(), 3);
        for p in pos {
            assert_eq!(out[p], MASK);
        }
    }

    #[test]
    fn swaps_are_disjoint_neighbour_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let line: Vec<u32> = (20..30).collect();
        for _ in 0..50 {
            let (out, pos) = add_noise(&line, Noise::Swap, 0.5, &mut rng);
            assert_eq!(pos.len(), 6);
            let diff: Vec<usize> = (0..10).filter(|&i| out[i] != line[i]).collect();
            let mut sorted = pos.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted, diff);
        }
    }

    #[test]
    fn no_noise_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = make_denoising_pairs(&[(5, vec![7, 8, 9])], "fr", None, Noise::None, 0.3, &mut rng).unwrap();
        assert_eq!(c.pairs[0].src, c.pairs[0].tgt);
        assert_eq!(c.route, Route::new("fr", "fr", None));
    }

    #[test]
    fn tagging_prepends_once() {
        let v = vocab();
        let p = Pair::clean(1, vec![30, 31], vec![40]);
        let t = prepend_domain_tag(&p, &v, "medical").unwrap();
        assert_eq!(t.src[0], v.domain_tag("medical").unwrap());
        assert_eq!(t.tgt, p.tgt);
        assert!(prepend_domain_tag(&t, &v, "medical").is_err());
        assert!(prepend_domain_tag(&p, &v, "law").is_err());
        assert_eq!(strip_domain_tags(&v, &t.src), p.src);
    }

    struct Echo;

    impl Translator for Echo {
        fn translate(&self, _: &Route, s: &[Vec<u32>]) -> Result<Vec<Vec<u32>>> {
            Ok(s.iter().map(|x| x.iter().rev().copied().collect()).collect())
        }
    }

    #[test]
    fn back_translation_keeps_clean_side() {
        let mono = vec![(3, vec![30, 31, 32]), (4, vec![33])];
        let bt = back_translate(&Echo, &mono, "fr", "medical").unwrap();
        for ((_, clean), (a, b)) in mono.iter().zip(bt.into_lang.pairs.iter().zip(&bt.from_lang.pairs)) {
            assert_eq!(&a.tgt, clean);
            assert_eq!(&b.src, clean);
            assert_eq!(a.synthetic, Synthetic::Source);
        }
        assert_eq!(bt.into_lang.route, Route::new("en", "fr", Some("medical")));
        assert!(back_translate(&Echo, &[], "fr", "medical").is_err());
    }
}
