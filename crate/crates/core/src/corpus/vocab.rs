use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
const SPECIALS: u32 = 4;

/// What a vocabulary id stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    /// Target-language token fed as the decoder's first input.
    LangToken(usize),
    DomainTag(usize),
    Marker(usize),
    Numeral(usize),
    Lexical { lang: usize, surface: usize },
}

/// Closed word-level vocabulary of the toy world.
///
/// Layout: 4 specials, one target-language token per language, one tag per
/// domain, one marker per language, shared numerals, then one lexical block
/// of `concepts` ids per language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    languages: Vec<String>,
    domains: Vec<String>,
    concepts: usize,
    numerals: usize,
}

impl Vocab {
    pub fn new(languages: Vec<String>, domains: Vec<String>, concepts: usize, numerals: usize) -> Result<Self> {
        // Languages and domains are separate namespaces: `it` may be both.
        for (what, ids) in [("language", &languages), ("domain", &domains)] {
            let mut seen = std::collections::BTreeSet::new();
            if let Some(dup) = ids.iter().find(|x| !seen.insert(x.as_str())) {
                return Err(Error::Corpus(format!("duplicate {what} id `{dup}`")));
            }
        }
        if languages.is_empty() || concepts == 0 {
            return Err(Error::Corpus("vocabulary needs languages and concepts".into()));
        }
        Ok(Vocab {
            languages,
            domains,
            concepts,
            numerals,
        })
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn concepts(&self) -> usize {
        self.concepts
    }

    pub fn numerals(&self) -> usize {
        self.numerals
    }

    fn n_lang(&self) -> u32 {
        self.languages.len() as u32
    }

    fn lang_base(&self) -> u32 {
        SPECIALS
    }

    fn tag_base(&self) -> u32 {
        self.lang_base() + self.n_lang()
    }

    fn marker_base(&self) -> u32 {
        self.tag_base() + self.domains.len() as u32
    }

    fn numeral_base(&self) -> u32 {
        self.marker_base() + self.n_lang()
    }

    fn lexical_base(&self) -> u32 {
        self.numeral_base() + self.numerals as u32
    }

    pub fn size(&self) -> usize {
        self.lexical_base() as usize + self.languages.len() * self.concepts
    }

    pub fn lang_index(&self, lang: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::Corpus(format!("unknown language `{lang}`")))
    }

    pub fn domain_index(&self, domain: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d == domain)
            .ok_or_else(|| Error::Corpus(format!("unknown domain `{domain}`")))
    }

    pub fn lang_token(&self, lang: &str) -> Result<u32> {
        Ok(self.lang_base() + self.lang_index(lang)? as u32)
    }

    pub fn domain_tag(&self, domain: &str) -> Result<u32> {
        Ok(self.tag_base() + self.domain_index(domain)? as u32)
    }

    pub fn marker(&self, lang_idx: usize) -> u32 {
        self.marker_base() + lang_idx as u32
    }

    pub fn numeral(&self, k: usize) -> u32 {
        debug_assert!(k < self.numerals);
        self.numeral_base() + k as u32
    }

    pub fn lexical(&self, lang_idx: usize, surface: usize) -> u32 {
        debug_assert!(surface < self.concepts);
        self.lexical_base() + (lang_idx * self.concepts + surface) as u32
    }

    pub fn classify(&self, id: u32) -> Option<TokenClass> {
        let n_lang = self.n_lang();
        Some(if id < SPECIALS {
            TokenClass::Special
        } else if id < self.tag_base() {
            TokenClass::LangToken((id - self.lang_base()) as usize)
        } else if id < self.marker_base() {
            TokenClass::DomainTag((id - self.tag_base()) as usize)
        } else if id < self.numeral_base() {
            TokenClass::Marker((id - self.marker_base()) as usize)
        } else if id < self.lexical_base() {
            TokenClass::Numeral((id - self.numeral_base()) as usize)
        } else if (id as usize) < self.size() {
            let rel = (id - self.lexical_base()) as usize;
            debug_assert!(rel / self.concepts < n_lang as usize);
            TokenClass::Lexical {
                lang: rel / self.concepts,
                surface: rel % self.concepts,
            }
        } else {
            return None;
        })
    }

    /// Human-readable surface form of one id.
    ///
    /// Lexical items become pseudo-words built from a per-language syllable
    /// inventory, so character metrics see realistic partial overlaps.
    pub fn render(&self, id: u32) -> String {
        match self.classify(id) {
            Some(TokenClass::Special) => ["<pad>", "<s>", "</s>", "<mask>"][id as usize].to_string(),
            Some(TokenClass::LangToken(l)) => format!("<2{}>", self.languages[l]),
            Some(TokenClass::DomainTag(d)) => format!("<{}>", self.domains[d]),
            Some(TokenClass::Marker(l)) => format!("{}{}", marker_stem(l), &self.languages[l]),
            Some(TokenClass::Numeral(k)) => k.to_string(),
            Some(TokenClass::Lexical { lang, surface }) => pseudo_word(lang, surface),
            None => format!("<unk{id}>"),
        }
    }

    /// Space-joined surface text; specials are skipped.
    pub fn render_sentence(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| self.classify(i) != Some(TokenClass::Special))
            .map(|&i| self.render(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`Vocab::render`] for every id.
    pub fn parse_token(&self, s: &str) -> Result<u32> {
        (0..self.size() as u32)
            .find(|&i| self.render(i) == s)
            .ok_or_else(|| Error::Corpus(format!("unknown token `{s}`")))
    }

    pub fn token_map(&self) -> std::collections::HashMap<String, u32> {
        (0..self.size() as u32).map(|i| (self.render(i), i)).collect()
    }
}

const ONSETS: [&str; 12] = ["b", "d", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "y"];

fn marker_stem(lang: usize) -> &'static str {
    ["qa", "qe", "qi", "qo", "qu"][lang % 5]
}

/// Three syllables; each language shifts the onset and nucleus orderings so
/// inventories overlap. The first syllable alone is unique below 72 items.
fn pseudo_word(lang: usize, surface: usize) -> String {
    let mut s = String::new();
    let mut x = surface;
    for k in 0..3 {
        let onset = ONSETS[(x % 12 + lang * 5 + k) % 12];
        let nucleus = NUCLEI[(x / 12 % 6 + lang) % 6];
        s.push_str(onset);
        s.push_str(nucleus);
        x = x / 72 + k + 1;
    }
    // The language index keeps words of different languages distinct.
    s.push(char::from(b'a' + (lang % 26) as u8));
    s
}
