use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenClass, Vocab, EOS};
use crate::error::{Error, Result};
use crate::routing::ActivationPlan;
use crate::tensor::Float;
use crate::transformer::{DecoderCache, Seq2Seq, StepInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    /// Output tokens before `</s>` is forced.
    pub max_len: usize,
    /// Output tokens before `</s>` is allowed.
    pub min_len: usize,
    /// Scores are `log p / (len + 1)^length_penalty`, counting `</s>`.
    pub length_penalty: f64,
    /// Sources decoded together.
    pub batch_sources: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 5,
            max_len: 30,
            min_len: 1,
            length_penalty: 0.6,
            batch_sources: 64,
        }
    }
}

impl BeamConfig {
    pub fn greedy() -> Self {
        BeamConfig {
            beam: 1,
            ..Default::default()
        }
    }

    pub fn normalize(&self, log_prob: f64, tokens: usize) -> f64 {
        log_prob / ((tokens + 1) as f64).powf(self.length_penalty)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output without `</s>`.
    pub tokens: Vec<u32>,
    /// Summed log-probability, including the final `</s>`.
    pub log_prob: f64,
    pub score: f64,
    /// `</s>` was forced at `max_len`.
    pub truncated: bool,
}

/// Ids the decoder may never emit: every special except `</s>`, the
/// target-language tokens and the domain tags.
pub fn banned_outputs(vocab: &Vocab) -> Vec<u32> {
    (0..vocab.size() as u32)
        .filter(|&i| match vocab.classify(i) {
            Some(TokenClass::Special) => i != EOS,
            Some(TokenClass::LangToken(_)) | Some(TokenClass::DomainTag(_)) => true,
            _ => false,
        })
        .collect()
}

struct Live<T: Float> {
    source: usize,
    tokens: Vec<u32>,
    log_prob: f64,
    cache: DecoderCache<T>,
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Beam search over raw source sentences; returns one best hypothesis per
/// source.
///
/// Each step expands every live hypothesis by its `2·beam` best tokens.
/// Per source the candidates are ranked by raw log-probability; a `</s>`
/// candidate ranked within the first `beam` finishes a hypothesis, other
/// candidates refill the beam. A source stops once `beam` hypotheses have
/// finished or none are live; the finished hypothesis with the best
/// length-normalized score wins. With `beam = 1` this is greedy decoding.
pub fn beam_search<T: Float>(
    model: &Seq2Seq<T>,
    sources: &[Vec<u32>],
    plan: &ActivationPlan,
    cfg: &BeamConfig,
    banned: &[u32],
) -> Result<Vec<Hypothesis>> {
    if cfg.beam == 0 || cfg.max_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Evaluation(format!(
            "beam {} / max_len {} / min_len {} is not a valid search",
            cfg.beam, cfg.max_len, cfg.min_len
        )));
    }
    let limit = model.config().max_len;
    if cfg.max_len + 1 > limit {
        return Err(Error::Evaluation(format!(
            "max_len {} needs {} decoder positions, model has {limit}",
            cfg.max_len,
            cfg.max_len + 1
        )));
    }
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(cfg.batch_sources.max(1)) {
        out.extend(search_chunk(model, chunk, plan, cfg, banned)?);
    }
    Ok(out)
}

fn search_chunk<T: Float>(
    model: &Seq2Seq<T>,
    sources: &[Vec<u32>],
    plan: &ActivationPlan,
    cfg: &BeamConfig,
    banned: &[u32],
) -> Result<Vec<Hypothesis>> {
    let formatted: Vec<Vec<u32>> = sources.iter().map(|s| plan.source_ids(s)).collect();
    let memory = model.encode_memory(&formatted, plan)?;
    let vocab = model.config().vocab_size;
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); sources.len()];
    let mut live: Vec<Live<T>> = (0..sources.len())
        .map(|s| Live {
            source: s,
            tokens: Vec::new(),
            log_prob: 0.0,
            cache: model.empty_cache(),
        })
        .collect();
    // The first step feeds the decoder start token.
    let mut feed: Vec<u32> = vec![plan.decoder_start; live.len()];
    let width = 2 * cfg.beam;
    while !live.is_empty() {
        let inputs: Vec<StepInput<'_, T>> = live
            .iter()
            .zip(&feed)
            .map(|(h, &token)| StepInput {
                source: h.source,
                cache: &h.cache,
                token,
            })
            .collect();
        let (logp, caches) = model.decode_step(&memory, plan, &inputs)?;
        let mut caches: Vec<Option<DecoderCache<T>>> = caches.into_iter().map(Some).collect();

        // candidates per source: (score, hyp index, token)
        let mut cands: Vec<Vec<(f64, usize, u32)>> = vec![Vec::new(); sources.len()];
        for (hi, h) in live.iter().enumerate() {
            let mut row: Vec<(f64, u32)> = logp[hi * vocab..(hi + 1) * vocab]
                .iter()
                .enumerate()
                .map(|(t, &lp)| (lp, t as u32))
                .collect();
            for &b in banned {
                row[b as usize].0 = f64::NEG_INFINITY;
            }
            let len = h.tokens.len();
            if len < cfg.min_len {
                row[EOS as usize].0 = f64::NEG_INFINITY;
            }
            if len == cfg.max_len {
                // forced end: only </s> may follow
                let lp = row[EOS as usize].0;
                cands[h.source].push((h.log_prob + lp, hi, EOS));
                continue;
            }
            row.sort_by(|a, b| by_score_desc(a.0, b.0).then(a.1.cmp(&b.1)));
            for &(lp, t) in row.iter().take(width) {
                if lp.is_finite() {
                    cands[h.source].push((h.log_prob + lp, hi, t));
                }
            }
        }

        let mut next: Vec<Live<T>> = Vec::new();
        let mut next_feed = Vec::new();
        for (s, mut cs) in cands.into_iter().enumerate() {
            if cs.is_empty() {
                continue;
            }
            cs.sort_by(|a, b| by_score_desc(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut kept = 0;
            for (rank, &(score, hi, t)) in cs.iter().enumerate() {
                let parent = &live[hi];
                if t == EOS {
                    let forced = parent.tokens.len() == cfg.max_len;
                    if rank < cfg.beam || forced {
                        finished[s].push(Hypothesis {
                            tokens: parent.tokens.clone(),
                            log_prob: score,
                            score: cfg.normalize(score, parent.tokens.len()),
                            truncated: forced,
                        });
                    }
                    continue;
                }
                if kept == cfg.beam {
                    continue;
                }
                kept += 1;
                let cache = match caches[hi].take() {
                    Some(c) => {
                        // keep a copy in case another child of the same
                        // parent survives
                        caches[hi] = Some(c.clone());
                        c
                    }
                    None => unreachable!("cache slot is refilled above"),
                };
                let mut tokens = parent.tokens.clone();
                tokens.push(t);
                next.push(Live {
                    source: s,
                    tokens,
                    log_prob: score,
                    cache,
                });
                next_feed.push(t);
            }
        }
        // Sources with enough finished hypotheses stop expanding.
        let keep: Vec<bool> = next.iter().map(|h| finished[h.source].len() < cfg.beam).collect();
        let mut k = keep.iter();
        next.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        next_feed.retain(|_| *k.next().unwrap());
        live = next;
        feed = next_feed;
    }
    finished
        .into_iter()
        .enumerate()
        .map(|(s, mut f)| {
            f.sort_by(|a, b| by_score_desc(a.score, b.score));
            f.into_iter()
                .next()
                .ok_or_else(|| Error::Evaluation(format!("source {s} produced no finished hypothesis")))
        })
        .collect()
}

/// Log-probability of `tokens` followed by `</s>` under the model, computed
/// with the same incremental steps beam search uses.
pub fn sequence_log_prob<T: Float>(
    model: &Seq2Seq<T>,
    source: &[u32],
    plan: &ActivationPlan,
    tokens: &[u32],
) -> Result<f64> {
    let memory = model.encode_memory(&[plan.source_ids(source)], plan)?;
    let vocab = model.config().vocab_size;
    let mut cache = model.empty_cache();
    let mut total = 0.0;
    let mut feed = plan.decoder_start;
    for &t in tokens.iter().chain(std::iter::once(&EOS)) {
        let (lp, mut c) = model.decode_step(
            &memory,
            plan,
            &[StepInput {
                source: 0,
                cache: &cache,
                token: feed,
            }],
        )?;
        debug_assert_eq!(lp.len(), vocab);
        total += lp[t as usize];
        cache = c.pop().unwrap();
        feed = t;
    }
    Ok(total)
}
