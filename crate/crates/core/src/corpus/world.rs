//! Deterministic toy languages and domains.
//!
//! A sentence is first sampled as a pivot: a sequence of concepts (plus the
//! occasional shared numeral) drawn from a domain's bigram model. The
//! domain's sentence-level transform is applied to the pivot, and each
//! language then realizes it through its own bijective concept → word map,
//! inserting its marker word at the start and after every `marker_period`
//! words. Because the transform acts on concepts it commutes with every
//! language's map, so the reference translation is defined for every
//! language/domain combination.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenClass, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainTransform {
    Identity,
    /// Every concept from the domain's own range is written twice.
    DoubleDomainTerms,
    /// The domain's first concept opens every sentence.
    PrefixFormula,
    /// The last concept is repeated at the end.
    RepeatLast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    /// Multiparallel lines generated for this domain.
    pub lines: usize,
    pub transform: DomainTransform,
    /// General-purpose text owns no concept range; it samples other
    /// domains' terms only with probability `rare_rate` per word.
    #[serde(default)]
    pub general: bool,
    /// Share of words drawn from the domain's own range.
    #[serde(default = "default_share")]
    pub domain_share: f64,
    #[serde(default)]
    pub rare_rate: f64,
}

fn default_share() -> f64 {
    0.4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub languages: Vec<String>,
    pub domains: Vec<DomainSpec>,
    pub generic_concepts: usize,
    /// Size of each non-general domain's own concept range.
    pub domain_concepts: usize,
    pub numerals: usize,
    pub marker_period: usize,
    /// Inclusive range of concepts per pivot sentence.
    pub min_len: usize,
    pub max_len: usize,
    pub numeral_rate: f64,
    /// Successors per concept that the bigram model prefers.
    pub preferred_successors: usize,
    pub preferred_mass: f64,
}

pub const PIVOT_LANG: &str = "en";

pub const DEFAULT_LANGUAGES: [&str; 12] = ["en", "fr", "de", "cs", "it", "es", "da", "nl", "pl", "pt", "sv", "fi"];

impl WorldSpec {
    /// Twelve languages, four domains plus a general-purpose corpus, sized
    /// so the religious-text domain is the smallest.
    pub fn desk() -> Self {
        let dom = |id: &str, lines, transform| DomainSpec {
            id: id.into(),
            lines,
            transform,
            general: false,
            domain_share: default_share(),
            rare_rate: 0.0,
        };
        WorldSpec {
            languages: DEFAULT_LANGUAGES.map(String::from).to_vec(),
            domains: vec![
                DomainSpec {
                    id: "paracrawl".into(),
                    lines: 6000,
                    transform: DomainTransform::Identity,
                    general: true,
                    domain_share: 0.0,
                    rare_rate: 0.04,
                },
                dom("koran", 500, DomainTransform::PrefixFormula),
                dom("medical", 1200, DomainTransform::DoubleDomainTerms),
                dom("it", 1000, DomainTransform::RepeatLast),
                dom("ted", 700, DomainTransform::Identity),
            ],
            generic_concepts: 16,
            domain_concepts: 6,
            numerals: 4,
            marker_period: 4,
            min_len: 3,
            max_len: 7,
            numeral_rate: 0.05,
            preferred_successors: 3,
            preferred_mass: 0.6,
        }
    }

    pub fn concepts(&self) -> usize {
        self.generic_concepts + self.domain_concepts * self.specialized().count()
    }

    fn specialized(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.iter().filter(|d| !d.general)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(
            self.languages.clone(),
            self.domains.iter().map(|d| d.id.clone()).collect(),
            self.concepts(),
            self.numerals,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !self.languages.iter().any(|l| l == PIVOT_LANG) {
            return Err(Error::Corpus(format!(
                "languages must include the pivot language `{PIVOT_LANG}`"
            )));
        }
        if self.languages.len() < 2 {
            return Err(Error::Corpus("at least two languages are required".into()));
        }
        if self.generic_concepts < 2 {
            return Err(Error::Corpus("vocabulary too small: need at least 2 generic concepts".into()));
        }
        if self.specialized().next().is_some() && self.domain_concepts == 0 {
            return Err(Error::Corpus("vocabulary too small: domains need their own concepts".into()));
        }
        if self.preferred_successors == 0 || self.preferred_successors > self.generic_concepts {
            return Err(Error::Corpus(format!(
                "vocabulary too small for {} preferred successors",
                self.preferred_successors
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.marker_period == 0 {
            return Err(Error::Corpus("invalid sentence length settings".into()));
        }
        if self.numeral_rate > 0.0 && self.numerals == 0 {
            return Err(Error::Corpus("numeral rate set but no numerals in the vocabulary".into()));
        }
        for d in &self.domains {
            let probs = [d.domain_share, d.rare_rate, self.numeral_rate, self.preferred_mass];
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Corpus(format!("domain `{}` has a probability outside [0,1]", d.id)));
            }
        }
        if self.concepts() > 72 {
            return Err(Error::Corpus("at most 72 concepts are supported".into()));
        }
        self.vocab().map(|_| ())
    }

    pub fn domain(&self, id: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::Corpus(format!("unknown domain `{id}`")))
    }

    /// Concept range owned by a specialized domain.
    pub fn domain_range(&self, id: &str) -> Option<std::ops::Range<usize>> {
        let k = self.specialized().position(|d| d.id == id)?;
        let start = self.generic_concepts + k * self.domain_concepts;
        Some(start..start + self.domain_concepts)
    }
}

/// A pivot word before realization in a language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PivotToken {
    Concept(usize),
    Numeral(usize),
}

/// One language's bijective word map and marker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyLanguage {
    pub id: String,
    pub index: usize,
    /// `perm[concept]` is the surface index of the concept's word.
    perm: Vec<usize>,
    inverse: Vec<usize>,
    pub marker: u32,
    period: usize,
}

impl ToyLanguage {
    pub fn new(vocab: &Vocab, id: &str, period: usize, seed: u64) -> Result<Self> {
        let index = vocab.lang_index(id)?;
        let mut perm: Vec<usize> = (0..vocab.concepts()).collect();
        if id != PIVOT_LANG {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + index as u64));
            perm.shuffle(&mut rng);
        }
        let mut inverse = vec![0; perm.len()];
        for (c, &s) in perm.iter().enumerate() {
            inverse[s] = c;
        }
        Ok(ToyLanguage {
            id: id.to_string(),
            index,
            perm,
            inverse,
            marker: vocab.marker(index),
            period,
        })
    }

    pub fn word(&self, vocab: &Vocab, concept: usize) -> u32 {
        vocab.lexical(self.index, self.perm[concept])
    }

    /// Pivot → sentence in this language, with markers.
    pub fn realize(&self, vocab: &Vocab, pivot: &[PivotToken]) -> Vec<u32> {
        let mut out = Vec::with_capacity(pivot.len() + pivot.len() / self.period + 1);
        for (i, t) in pivot.iter().enumerate() {
            if i % self.period == 0 {
                out.push(self.marker);
            }
            out.push(match *t {
                PivotToken::Concept(c) => self.word(vocab, c),
                PivotToken::Numeral(k) => vocab.numeral(k),
            });
        }
        out
    }

    /// Sentence → pivot; markers are dropped. Fails on words of another
    /// language.
    pub fn unrealize(&self, vocab: &Vocab, ids: &[u32]) -> Result<Vec<PivotToken>> {
        ids.iter()
            .filter(|&&i| i != self.marker)
            .map(|&i| match vocab.classify(i) {
                Some(TokenClass::Numeral(k)) => Ok(PivotToken::Numeral(k)),
                Some(TokenClass::Lexical { lang, surface }) if lang == self.index => {
                    Ok(PivotToken::Concept(self.inverse[surface]))
                }
                _ => Err(Error::Corpus(format!(
                    "token `{}` is not a word of `{}`",
                    vocab.render(i),
                    self.id
                ))),
            })
            .collect()
    }
}

/// Sampling model and sentence transform of one domain.
#[derive(Clone, Debug)]
pub struct ToyDomain {
    pub id: String,
    pub transform: DomainTransform,
    own: Option<std::ops::Range<usize>>,
    generic: usize,
    /// Concepts this domain samples from, with unigram weights.
    support: Vec<(usize, f64)>,
    preferred: Vec<Vec<usize>>,
    preferred_mass: f64,
    numeral_rate: f64,
    numerals: usize,
    min_len: usize,
    max_len: usize,
}

impl ToyDomain {
    pub fn new(spec: &WorldSpec, id: &str, seed: u64) -> Result<Self> {
        let d = spec.domain(id)?;
        let own = spec.domain_range(id);
        let generic = spec.generic_concepts;
        let mut support: Vec<(usize, f64)> = Vec::new();
        match &own {
            Some(r) => {
                let w_gen = (1.0 - d.domain_share) / generic as f64;
                let w_own = d.domain_share / r.len() as f64;
                support.extend((0..generic).map(|c| (c, w_gen)));
                support.extend(r.clone().map(|c| (c, w_own)));
            }
            None => {
                let foreign = spec.concepts() - generic;
                let w_rare = if foreign > 0 { d.rare_rate / foreign as f64 } else { 0.0 };
                let w_gen = (1.0 - if foreign > 0 { d.rare_rate } else { 0.0 }) / generic as f64;
                support.extend((0..generic).map(|c| (c, w_gen)));
                support.extend((generic..spec.concepts()).map(|c| (c, w_rare)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash(id));
        // General text only chains generic concepts; its domain terms stay rare.
        let candidates: Vec<usize> = support
            .iter()
            .filter(|&&(c, w)| w > 0.0 && (own.is_some() || c < generic))
            .map(|&(c, _)| c)
            .collect();
        let preferred = (0..spec.concepts())
            .map(|_| {
                candidates
                    .choose_multiple(&mut rng, spec.preferred_successors.min(candidates.len()))
                    .copied()
                    .collect()
            })
            .collect();
        Ok(ToyDomain {
            id: id.to_string(),
            transform: d.transform,
            own,
            generic,
            support,
            preferred,
            preferred_mass: spec.preferred_mass,
            numeral_rate: spec.numeral_rate,
            numerals: spec.numerals,
            min_len: spec.min_len,
            max_len: spec.max_len,
        })
    }

    pub fn owns(&self, concept: usize) -> bool {
        self.own.as_ref().is_some_and(|r| r.contains(&concept))
    }

    fn unigram(&self, rng: &mut ChaCha8Rng) -> usize {
        let mut u = rng.random::<f64>() * self.support.iter().map(|(_, w)| w).sum::<f64>();
        for &(c, w) in &self.support {
            if u < w {
                return c;
            }
            u -= w;
        }
        self.support.last().map_or(0, |&(c, _)| c)
    }

    /// Samples an untransformed pivot sentence.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<PivotToken> {
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut out = Vec::with_capacity(len + 2);
        let mut prev: Option<usize> = None;
        for _ in 0..len {
            let c = match prev {
                Some(p) if rng.random::<f64>() < self.preferred_mass => {
                    self.preferred[p][rng.random_range(0..self.preferred[p].len())]
                }
                _ => self.unigram(rng),
            };
            out.push(PivotToken::Concept(c));
            prev = Some(c);
            if self.numerals > 0 && rng.random::<f64>() < self.numeral_rate {
                out.push(PivotToken::Numeral(rng.random_range(0..self.numerals)));
            }
        }
        out
    }

    /// The domain's sentence-level rewrite, on pivot tokens.
    pub fn apply_transform(&self, pivot: &[PivotToken]) -> Vec<PivotToken> {
        match self.transform {
            DomainTransform::Identity => pivot.to_vec(),
            DomainTransform::DoubleDomainTerms => pivot
                .iter()
                .flat_map(|&t| {
                    let n = match t {
                        PivotToken::Concept(c) if self.owns(c) => 2,
                        _ => 1,
                    };
                    std::iter::repeat_n(t, n)
                })
                .collect(),
            DomainTransform::PrefixFormula => {
                let formula = self.own.as_ref().map_or(self.generic - 1, |r| r.start);
                std::iter::once(PivotToken::Concept(formula)).chain(pivot.iter().copied()).collect()
            }
            DomainTransform::RepeatLast => {
                let mut out = pivot.to_vec();
                if let Some(&last) = pivot.iter().rev().find(|t| matches!(t, PivotToken::Concept(_))) {
                    out.push(last);
                }
                out
            }
        }
    }
}

/// One pivot sentence realized in every language (in `WorldSpec` order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiLine {
    pub pivot_id: u64,
    /// Meaning shared by all sides, after the domain transform.
    pub pivot: Vec<PivotToken>,
    pub sides: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainCorpus {
    pub domain: String,
    pub lines: Vec<MultiLine>,
}

/// The generated world: vocabulary, languages, domains and their text.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub seed: u64,
    pub vocab: Vocab,
    pub languages: Vec<ToyLanguage>,
    pub domains: Vec<ToyDomain>,
}

impl World {
    pub fn new(spec: WorldSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let vocab = spec.vocab()?;
        let languages = spec
            .languages
            .iter()
            .map(|l| ToyLanguage::new(&vocab, l, spec.marker_period, seed))
            .collect::<Result<Vec<_>>>()?;
        let domains = spec
            .domains
            .iter()
            .map(|d| ToyDomain::new(&spec, &d.id, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(World {
            spec,
            seed,
            vocab,
            languages,
            domains,
        })
    }

    pub fn language(&self, id: &str) -> Result<&ToyLanguage> {
        self.languages
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::Corpus(format!("unknown language `{id}`")))
    }

    pub fn toy_domain(&self, id: &str) -> Result<&ToyDomain> {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::Corpus(format!("unknown domain `{id}`")))
    }

    pub fn language_ids(&self) -> Vec<String> {
        self.spec.languages.clone()
    }

    /// Reference sentence of `pivot` in `lang` under `domain`'s transform.
    pub fn reference(&self, lang: &str, domain: &str, pivot: &[PivotToken]) -> Result<Vec<u32>> {
        let d = self.toy_domain(domain)?;
        Ok(self.language(lang)?.realize(&self.vocab, &d.apply_transform(pivot)))
    }
}

/// Samples `lines` pivots per domain and realizes each in every language.
///
/// Each domain draws from its own seeded stream, so adding a domain leaves
/// the others' text unchanged.
pub fn generate_multiparallel(world: &World) -> Vec<DomainCorpus> {
    world
        .domains
        .iter()
        .enumerate()
        .map(|(di, d)| {
            let n = world.spec.domains[di].lines;
            let mut rng = ChaCha8Rng::seed_from_u64(world.seed ^ hash(&d.id).rotate_left(17));
            let lines = (0..n)
                .map(|i| {
                    let raw = d.sample(&mut rng);
                    let transformed = d.apply_transform(&raw);
                    MultiLine {
                        pivot_id: ((di as u64) << 32) | i as u64,
                        sides: world
                            .languages
                            .iter()
                            .map(|l| l.realize(&world.vocab, &transformed))
                            .collect(),
                        pivot: transformed,
                    }
                })
                .collect();
            DomainCorpus {
                domain: d.id.clone(),
                lines,
            }
        })
        .collect()
}

/// Concepts that appear in a corpus' pivots.
pub fn concepts_used(corpus: &DomainCorpus) -> BTreeSet<usize> {
    corpus
        .lines
        .iter()
        .flat_map(|l| l.pivot.iter())
        .filter_map(|t| match t {
            PivotToken::Concept(c) => Some(*c),
            PivotToken::Numeral(_) => None,
        })
        .collect()
}

pub(crate) fn hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> WorldSpec {
        let mut s = WorldSpec::desk();
        for d in &mut s.domains {
            d.lines = 50;
        }
        s
    }

    #[test]
    fn pivot_language_is_identity_map() {
        let w = World::new(small_spec(), 3).unwrap();
        let en = w.language("en").unwrap();
        for c in 0..w.vocab.concepts() {
            assert_eq!(w.vocab.classify(en.word(&w.vocab, c)), Some(TokenClass::Lexical { lang: 0, surface: c }));
        }
    }

    #[test]
    fn markers_have_fixed_period() {
        let w = World::new(small_spec(), 3).unwrap();
        let fr = w.language("fr").unwrap();
        let pivot: Vec<_> = (0..9).map(PivotToken::Concept).collect();
        let s = fr.realize(&w.vocab, &pivot);
        let marks: Vec<usize> = s.iter().enumerate().filter(|(_, &t)| t == fr.marker).map(|(i, _)| i).collect();
        assert_eq!(marks, vec![0, 5, 10]);
        assert_eq!(s.len(), 12);
    }

    #[test]
    fn transforms_do_what_they_say() {
        let w = World::new(small_spec(), 3).unwrap();
        let med = w.toy_domain("medical").unwrap();
        let own = w.spec.domain_range("medical").unwrap().start;
        let p = [PivotToken::Concept(0), PivotToken::Concept(own), PivotToken::Numeral(1)];
        assert_eq!(
            med.apply_transform(&p),
            vec![p[0], p[1], p[1], p[2]]
        );
        let it = w.toy_domain("it").unwrap();
        assert_eq!(it.apply_transform(&p), vec![p[0], p[1], p[2], p[1]]);
        let koran = w.toy_domain("koran").unwrap();
        assert_eq!(koran.apply_transform(&p)[0], PivotToken::Concept(w.spec.domain_range("koran").unwrap().start));
    }

    #[test]
    fn general_domain_rarely_uses_domain_terms() {
        let w = World::new(small_spec(), 5).unwrap();
        let pc = w.toy_domain("paracrawl").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut rare, mut total) = (0, 0);
        for _ in 0..2000 {
            for t in pc.sample(&mut rng) {
                if let PivotToken::Concept(c) = t {
                    total += 1;
                    rare += usize::from(c >= w.spec.generic_concepts);
                }
            }
        }
        let share = rare as f64 / total as f64;
        assert!(share > 0.0 && share < 0.15, "{share}");
    }

    #[test]
    fn validation_errors() {
        let mut s = small_spec();
        s.languages.retain(|l| l != "en");
        assert!(World::new(s, 0).is_err());
        let mut s = small_spec();
        s.generic_concepts = 1;
        assert!(World::new(s, 0).is_err());
    }
}
