use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Route;
use crate::corpus::{Pair, ParallelCorpus};
use crate::error::{Error, Result};

/// Draws a key with probability proportional to `size^(1/T)`.
/// `T = ∞` gives uniform sampling.
pub fn sample_direction<K: Clone + Ord>(sizes: &BTreeMap<K, usize>, temperature: f64, rng: &mut impl Rng) -> Result<K> {
    let w = temperature_weights(sizes.values().copied(), temperature)?;
    let idx = WeightedIndex::new(&w).map_err(|e| Error::Config(format!("sampling weights: {e}")))?;
    Ok(sizes.keys().nth(idx.sample(rng)).unwrap().clone())
}

/// Normalised probability of each corpus under temperature sampling.
pub fn sampling_probabilities(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    let w = temperature_weights(sizes.iter().copied(), temperature)?;
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

fn temperature_weights(sizes: impl Iterator<Item = usize>, temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let w: Vec<f64> = sizes.map(|n| (n as f64).powf(1.0 / temperature)).collect();
    if w.is_empty() {
        return Err(Error::Config("cannot sample from an empty corpus map".into()));
    }
    if w.iter().any(|&x| x == 0.0) {
        return Err(Error::Config("every route needs at least one line".into()));
    }
    Ok(w)
}

/// Sentence pairs sharing one route.
#[derive(Clone, Debug)]
pub struct Batch {
    pub route: Route,
    pub pairs: Vec<Pair>,
}

impl Batch {
    /// Padded token footprint: pairs × longest side, counting the `</s>` or
    /// start token each side receives.
    pub fn token_cost(&self) -> usize {
        self.pairs.len() * self.pairs.iter().map(pair_len).max().unwrap_or(0)
    }
}

fn pair_len(p: &Pair) -> usize {
    p.src.len().max(p.tgt.len()) + 1
}

pub trait BatchSource {
    fn next_batch(&mut self) -> Result<Batch>;
    /// Pairs emitted so far.
    fn pairs_drawn(&self) -> usize;
}

struct RouteCursor {
    corpus: ParallelCorpus,
    order: Vec<usize>,
    pos: usize,
}

/// Homogeneous batches: pick a route by temperature sampling, then fill a
/// batch from that route's shuffled epoch order up to `max_tokens`.
pub struct BatchStream {
    cursors: Vec<RouteCursor>,
    sampler: WeightedIndex<f64>,
    max_tokens: usize,
    rng: ChaCha8Rng,
    drawn: usize,
    total: usize,
}

impl BatchStream {
    pub fn new(corpora: Vec<ParallelCorpus>, max_tokens: usize, temperature: f64, seed: u64) -> Result<Self> {
        let corpora: Vec<_> = corpora.into_iter().filter(|c| !c.pairs.is_empty()).collect();
        let weights = temperature_weights(corpora.iter().map(|c| c.pairs.len()), temperature)?;
        let mut seen = std::collections::BTreeSet::new();
        for c in &corpora {
            if !seen.insert(&c.route) {
                return Err(Error::Config(format!("route {} listed twice", c.route)));
            }
            if let Some(p) = c.pairs.iter().find(|p| pair_len(p) > max_tokens) {
                return Err(Error::Config(format!(
                    "pair {} of route {} needs {} tokens, max_tokens is {max_tokens}",
                    p.pivot_id,
                    c.route,
                    pair_len(p)
                )));
            }
        }
        let sampler = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("sampling weights: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = corpora.iter().map(|c| c.pairs.len()).sum();
        let cursors = corpora
            .into_iter()
            .map(|corpus| {
                let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
                order.shuffle(&mut rng);
                RouteCursor { corpus, order, pos: 0 }
            })
            .collect();
        Ok(BatchStream {
            cursors,
            sampler,
            max_tokens,
            rng,
            drawn: 0,
            total,
        })
    }

    /// Lines across all routes; one epoch means this many pairs drawn.
    pub fn total_pairs(&self) -> usize {
        self.total
    }

    pub fn routes(&self) -> impl Iterator<Item = &Route> {
        self.cursors.iter().map(|c| &c.corpus.route)
    }
}

impl BatchSource for BatchStream {
    fn next_batch(&mut self) -> Result<Batch> {
        let r = self.sampler.sample(&mut self.rng);
        let cur = &mut self.cursors[r];
        let mut pairs: Vec<Pair> = Vec::new();
        let mut longest = 0;
        loop {
            if cur.pos == cur.order.len() {
                cur.order.shuffle(&mut self.rng);
                cur.pos = 0;
            }
            let p = &cur.corpus.pairs[cur.order[cur.pos]];
            let l = longest.max(pair_len(p));
            // A route smaller than one batch would otherwise repeat lines
            // inside the batch.
            if (pairs.len() + 1) * l > self.max_tokens || pairs.len() == cur.order.len() {
                break;
            }
            longest = l;
            pairs.push(p.clone());
            cur.pos += 1;
        }
        self.drawn += pairs.len();
        Ok(Batch {
            route: cur.corpus.route.clone(),
            pairs,
        })
    }

    fn pairs_drawn(&self) -> usize {
        self.drawn
    }
}

/// Takes each batch from `extra` with probability `p_extra`, else from
/// `primary`.
pub struct MixedStream<A, B> {
    primary: A,
    extra: B,
    p_extra: f64,
    rng: ChaCha8Rng,
}

impl<A: BatchSource, B: BatchSource> MixedStream<A, B> {
    pub fn new(primary: A, extra: B, p_extra: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p_extra) {
            return Err(Error::Config(format!("mixing probability {p_extra} outside [0, 1)")));
        }
        Ok(MixedStream {
            primary,
            extra,
            p_extra,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl<A: BatchSource, B: BatchSource> BatchSource for MixedStream<A, B> {
    fn next_batch(&mut self) -> Result<Batch> {
        // Always consume the coin so p_extra = 0 leaves the primary stream
        // untouched while keeping the rng schedule fixed.
        if self.rng.random::<f64>() < self.p_extra {
            self.extra.next_batch()
        } else {
            self.primary.next_batch()
        }
    }

    fn pairs_drawn(&self) -> usize {
        self.primary.pairs_drawn() + self.extra.pairs_drawn()
    }
}

impl<S: BatchSource + ?Sized> BatchSource for Box<S> {
    fn next_batch(&mut self) -> Result<Batch> {
        (**self).next_batch()
    }

    fn pairs_drawn(&self) -> usize {
        (**self).pairs_drawn()
    }
}
