//! On-disk corpus: a manifest plus English-centric TSV files.
//!
//! Layout under the corpus directory:
//!
//! ```text
//! manifest.toml
//! <domain>/<split>/en-<lang>.tsv     pivot_id \t english \t lang
//! ```
//!
//! Only English-centric files are written; every other direction is
//! recovered by joining on the pivot id, which is how the multiparallel
//! alignment works anyway.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::splits::{make_splits, DomainSplit, Pair, ParallelCorpus, Split, SplitSet};
use super::world::{generate_multiparallel, MultiLine, World, WorldSpec, PIVOT_LANG};
use super::Vocab;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Everything needed to regenerate a corpus bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub valid_size: usize,
    pub test_size: usize,
    pub world: WorldSpec,
}

impl CorpusManifest {
    pub fn desk() -> Self {
        CorpusManifest {
            seed: 1,
            valid_size: 40,
            test_size: 40,
            world: WorldSpec::desk(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: CorpusManifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.world.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    /// Builds the world, samples its text and splits it.
    pub fn generate(&self) -> Result<(World, SplitSet)> {
        let world = World::new(self.world.clone(), self.seed)?;
        let corpus = generate_multiparallel(&world);
        let splits = make_splits(&world, &corpus, self.valid_size, self.test_size, self.seed)?;
        Ok((world, splits))
    }
}

fn tsv_line(vocab: &Vocab, id: u64, a: &[u32], b: &[u32]) -> String {
    format!("{id}\t{}\t{}\n", vocab.render_sentence(a), vocab.render_sentence(b))
}

/// Writes pairs as `pivot_id \t src \t tgt` lines.
pub fn write_pairs(path: &Path, vocab: &Vocab, pairs: &[Pair]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        w.write_all(tsv_line(vocab, p.pivot_id, &p.src, &p.tgt).as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path, vocab: &Vocab) -> Result<Vec<Pair>> {
    let map = vocab.token_map();
    let parse = |s: &str, line: usize| -> Result<Vec<u32>> {
        s.split_whitespace()
            .map(|t| {
                map.get(t).copied().ok_or_else(|| {
                    Error::Corpus(format!("{}:{line}: unknown token `{t}`", path.display()))
                })
            })
            .collect()
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Corpus(format!(
                "{}:{}: expected 3 tab-separated fields, found {}",
                path.display(),
                n + 1,
                f.len()
            )));
        }
        let id = f[0]
            .parse()
            .map_err(|_| Error::Corpus(format!("{}:{}: bad pivot id `{}`", path.display(), n + 1, f[0])))?;
        out.push(Pair::clean(id, parse(f[1], n + 1)?, parse(f[2], n + 1)?));
    }
    Ok(out)
}

/// Writes the manifest and every domain/split as English-centric TSVs.
pub fn write_corpus(dir: &Path, manifest: &CorpusManifest, world: &World, splits: &SplitSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), manifest.to_toml()?)?;
    for (domain, ds) in &splits.domains {
        for split in Split::ALL {
            for lang in world.spec.languages.iter().filter(|l| *l != PIVOT_LANG) {
                let pc = ds.route_corpus(split, PIVOT_LANG, lang)?;
                let path = dir.join(domain).join(split.name()).join(format!("{PIVOT_LANG}-{lang}.tsv"));
                write_pairs(&path, &world.vocab, &pc.pairs)?;
            }
        }
    }
    Ok(())
}

/// Reads a directory written by [`write_corpus`] back into a [`SplitSet`].
pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, World, SplitSet)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
    let manifest = CorpusManifest::from_toml(&text)?;
    let world = World::new(manifest.world.clone(), manifest.seed)?;
    let en_lang = world.language(PIVOT_LANG)?;
    let langs = &world.spec.languages;
    let en = langs.iter().position(|l| l == PIVOT_LANG).unwrap();
    let mut domains = BTreeMap::new();
    let mut held = std::collections::BTreeSet::new();
    for d in &world.spec.domains {
        let mut per_split: BTreeMap<Split, Vec<MultiLine>> = BTreeMap::new();
        for split in Split::ALL {
            let mut lines: BTreeMap<u64, MultiLine> = BTreeMap::new();
            for (li, lang) in langs.iter().enumerate().filter(|(_, l)| *l != PIVOT_LANG) {
                let path = dir.join(&d.id).join(split.name()).join(format!("{PIVOT_LANG}-{lang}.tsv"));
                for p in read_pairs(&path, &world.vocab)? {
                    let entry = lines.entry(p.pivot_id).or_insert_with(|| MultiLine {
                        pivot_id: p.pivot_id,
                        pivot: Vec::new(),
                        sides: vec![Vec::new(); langs.len()],
                    });
                    if entry.sides[en].is_empty() {
                        entry.pivot = en_lang.unrealize(&world.vocab, &p.src)?;
                        entry.sides[en] = p.src;
                    } else if entry.sides[en] != p.src {
                        return Err(Error::Corpus(format!(
                            "{}: pivot {} has a different English side than in other files",
                            path.display(),
                            p.pivot_id
                        )));
                    }
                    entry.sides[li] = p.tgt;
                }
            }
            if let Some(l) = lines.values().find(|l| l.sides.iter().any(Vec::is_empty)) {
                return Err(Error::Corpus(format!(
                    "{}/{}: pivot {} is missing in some language",
                    d.id,
                    split.name(),
                    l.pivot_id
                )));
            }
            if split != Split::Train {
                held.extend(lines.keys().copied());
            }
            per_split.insert(split, lines.into_values().collect());
        }
        let mut take = |s| per_split.remove(&s).unwrap_or_default();
        domains.insert(
            d.id.clone(),
            DomainSplit {
                domain: d.id.clone(),
                languages: langs.clone(),
                train: take(Split::Train),
                valid: take(Split::Valid),
                test: take(Split::Test),
            },
        );
    }
    Ok((
        manifest,
        world,
        SplitSet {
            domains,
            held_out_pivot_ids: held,
        },
    ))
}

/// Convenience: one route of one split as a [`ParallelCorpus`].
pub fn route_corpus(splits: &SplitSet, domain: &str, split: Split, src: &str, tgt: &str) -> Result<ParallelCorpus> {
    splits.domain(domain)?.route_corpus(split, src, tgt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_through_toml() {
        let m = CorpusManifest::desk();
        assert_eq!(CorpusManifest::from_toml(&m.to_toml().unwrap()).unwrap(), m);
        assert!(CorpusManifest::from_toml("seed = 1").is_err());
    }
}
