//! Synthetic multiparallel corpora: toy languages and domains, splits,
//! files, augmentation and language identification.

mod augment;
mod io;
mod langid;
mod splits;
mod vocab;
mod world;

pub use augment::{
    add_noise, back_translate, make_denoising_pairs, prepend_domain_tag, strip_domain_tags, BackTranslation, Noise,
    Translator,
};
pub use io::{read_corpus, read_pairs, route_corpus, write_corpus, write_pairs, CorpusManifest, MANIFEST_FILE};
pub use langid::{identify_language, identify_language_id};
pub use splits::{make_splits, DomainSplit, Pair, ParallelCorpus, Split, SplitSet, Synthetic};
pub use vocab::{TokenClass, Vocab, BOS, EOS, MASK, PAD};
pub use world::{
    concepts_used, generate_multiparallel, DomainCorpus, DomainSpec, DomainTransform, MultiLine, PivotToken,
    ToyDomain, ToyLanguage, World, WorldSpec, DEFAULT_LANGUAGES, PIVOT_LANG,
};
pub(crate) use world::hash as world_hash;
