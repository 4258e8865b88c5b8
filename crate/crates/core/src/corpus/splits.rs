use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{DomainCorpus, MultiLine, World, PIVOT_LANG};
use crate::error::{Error, Result};
use crate::routing::Route;

/// Which side of a pair, if any, was produced by a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Synthetic {
    #[default]
    None,
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub pivot_id: u64,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub synthetic: Synthetic,
}

impl Pair {
    pub fn clean(pivot_id: u64, src: Vec<u32>, tgt: Vec<u32>) -> Self {
        Pair {
            pivot_id,
            src,
            tgt,
            synthetic: Synthetic::None,
        }
    }
}

/// Sentence pairs of one route.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub route: Route,
    pub pairs: Vec<Pair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Train/valid/test lines of one domain, still multiparallel.
#[derive(Clone, Debug)]
pub struct DomainSplit {
    pub domain: String,
    pub languages: Vec<String>,
    pub train: Vec<MultiLine>,
    pub valid: Vec<MultiLine>,
    pub test: Vec<MultiLine>,
}

impl DomainSplit {
    pub fn lines(&self, split: Split) -> &[MultiLine] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn side(&self, lang: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::Corpus(format!("unknown language `{lang}`")))
    }

    /// Projects the multiparallel lines onto one route.
    pub fn route_corpus(&self, split: Split, src: &str, tgt: &str) -> Result<ParallelCorpus> {
        let (s, t) = (self.side(src)?, self.side(tgt)?);
        Ok(ParallelCorpus {
            route: Route::new(src, tgt, Some(&self.domain)),
            pairs: self
                .lines(split)
                .iter()
                .map(|l| Pair::clean(l.pivot_id, l.sides[s].clone(), l.sides[t].clone()))
                .collect(),
        })
    }

    /// One language's side of a split, e.g. as monolingual input.
    pub fn monolingual(&self, split: Split, lang: &str) -> Result<Vec<(u64, Vec<u32>)>> {
        let s = self.side(lang)?;
        Ok(self
            .lines(split)
            .iter()
            .map(|l| (l.pivot_id, l.sides[s].clone()))
            .collect())
    }
}

/// All domains' splits plus the pivot ids set aside for evaluation.
#[derive(Clone, Debug)]
pub struct SplitSet {
    pub domains: BTreeMap<String, DomainSplit>,
    pub held_out_pivot_ids: BTreeSet<u64>,
}

impl SplitSet {
    pub fn domain(&self, id: &str) -> Result<&DomainSplit> {
        self.domains
            .get(id)
            .ok_or_else(|| Error::Corpus(format!("no split for domain `{id}`")))
    }
}

/// Sets aside `valid_size + test_size` pivots per domain and purges train.
///
/// Every route's valid/test set is built from the same held-out pivots, so
/// the fr→de and de→fr test sets share their English side. Train lines are
/// removed if their id is held out or if their English side equals a
/// held-out English sentence of any domain.
pub fn make_splits(world: &World, corpus: &[DomainCorpus], valid_size: usize, test_size: usize, seed: u64) -> Result<SplitSet> {
    let en = world.spec.languages.iter().position(|l| l == PIVOT_LANG).ok_or_else(|| {
        Error::Corpus(format!("pivot language `{PIVOT_LANG}` missing"))
    })?;
    let mut held_ids = BTreeSet::new();
    let mut held_text: HashSet<Vec<u32>> = HashSet::new();
    let mut staged = Vec::new();
    for dc in corpus {
        let need = valid_size + test_size;
        if dc.lines.len() <= need {
            return Err(Error::Corpus(format!(
                "domain `{}` has {} lines, needs more than {need} for valid+test",
                dc.domain,
                dc.lines.len()
            )));
        }
        let mut order: Vec<usize> = (0..dc.lines.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ super::world::hash(&dc.domain));
        order.shuffle(&mut rng);
        // Identical English sentences inside the held-out block would make
        // the purge drop more than intended; keep only first occurrences.
        let mut valid = Vec::new();
        let mut test = Vec::new();
        let mut rest = Vec::new();
        let mut seen = HashSet::new();
        for i in order {
            let line = &dc.lines[i];
            if valid.len() + test.len() < need {
                if seen.insert(line.sides[en].clone()) {
                    if valid.len() < valid_size {
                        valid.push(line.clone());
                    } else {
                        test.push(line.clone());
                    }
                    continue;
                }
            }
            rest.push(i);
        }
        if test.len() < test_size {
            return Err(Error::Corpus(format!(
                "domain `{}` has too few distinct sentences for its test set",
                dc.domain
            )));
        }
        for l in valid.iter().chain(&test) {
            held_ids.insert(l.pivot_id);
            held_text.insert(l.sides[en].clone());
        }
        staged.push((dc, valid, test, rest));
    }
    let mut domains = BTreeMap::new();
    for (dc, mut valid, mut test, rest) in staged {
        let mut train: Vec<MultiLine> = rest
            .into_iter()
            .map(|i| &dc.lines[i])
            .filter(|l| !held_ids.contains(&l.pivot_id) && !held_text.contains(&l.sides[en]))
            .cloned()
            .collect();
        // keep generation order inside each split for readable files
        for v in [&mut train, &mut valid, &mut test] {
            v.sort_by_key(|l| l.pivot_id);
        }
        domains.insert(
            dc.domain.clone(),
            DomainSplit {
                domain: dc.domain.clone(),
                languages: world.spec.languages.clone(),
                train,
                valid,
                test,
            },
        );
    }
    Ok(SplitSet {
        domains,
        held_out_pivot_ids: held_ids,
    })
}
