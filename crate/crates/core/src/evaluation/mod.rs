//! Decoding, metrics, off-target measurement and grouped reports.

mod beam;
mod metrics;
mod report;

pub use beam::{banned_outputs, beam_search, sequence_log_prob, BeamConfig, Hypothesis};
pub use metrics::{bleu, bleu_tokens, chrf};
pub use report::{
    aggregate, average_reports, compare_reports, heatmap_csv, render_table, EvalReport, Group, GroupSummary, RouteScore,
    ON_TARGET_DISPLAY_THRESHOLD,
};

use crate::corpus::{identify_language, strip_domain_tags, DomainSplit, Split, Translator, Vocab};
use crate::error::{Error, Result};
use crate::routing::{plan_activation, Route, RoutingSetup};
use crate::transformer::Seq2Seq;

/// Percentage of hypotheses identified as `tgt`, counted only over lines
/// whose reference is identified as `tgt`. `None` when no reference is.
pub fn on_target_rate(
    hyps: &[Vec<u32>],
    refs: &[Vec<u32>],
    tgt: usize,
    identify: impl Fn(&[u32]) -> Option<usize>,
) -> Option<f64> {
    let mut denom = 0;
    let mut hits = 0;
    for (h, r) in hyps.iter().zip(refs) {
        if identify(r) == Some(tgt) {
            denom += 1;
            if identify(h) == Some(tgt) {
                hits += 1;
            }
        }
    }
    (denom > 0).then(|| 100.0 * hits as f64 / denom as f64)
}

/// Translates with a model, routing each request through its plan.
pub struct ModelTranslator<'a> {
    pub model: &'a Seq2Seq<f32>,
    pub setup: &'a RoutingSetup,
    pub vocab: &'a Vocab,
    pub beam: BeamConfig,
}

impl Translator for ModelTranslator<'_> {
    fn translate(&self, route: &Route, sources: &[Vec<u32>]) -> Result<Vec<Vec<u32>>> {
        let c = self.model.config();
        let plan = plan_activation(route, self.setup, self.vocab, self.model.adapters(), c.enc_layers, c.dec_layers)?;
        let banned = banned_outputs(self.vocab);
        Ok(beam_search(self.model, sources, &plan, &self.beam, &banned)?
            .into_iter()
            .map(|h| h.tokens)
            .collect())
    }
}

/// Decodes and scores one route on a split of `data`.
pub fn score_route(translator: &ModelTranslator, data: &DomainSplit, split: Split, route: &Route) -> Result<RouteScore> {
    let corpus = data.route_corpus(split, &route.src, &route.tgt)?;
    if corpus.pairs.is_empty() {
        return Err(Error::Evaluation(format!("route {route} has no {} lines", split.name())));
    }
    let sources: Vec<Vec<u32>> = corpus.pairs.iter().map(|p| p.src.clone()).collect();
    let hyps = translator.translate(route, &sources)?;
    let vocab = translator.vocab;
    let refs: Vec<Vec<u32>> = corpus.pairs.iter().map(|p| p.tgt.clone()).collect();
    let text = |v: &[Vec<u32>]| -> Vec<String> {
        v.iter()
            .map(|s| vocab.render_sentence(&strip_domain_tags(vocab, s)))
            .collect()
    };
    let (ht, rt) = (text(&hyps), text(&refs));
    let tgt = vocab.lang_index(&route.tgt)?;
    Ok(RouteScore {
        src: route.src.clone(),
        tgt: route.tgt.clone(),
        bleu: bleu(&ht, &rt)?,
        chrf: chrf(&ht, &rt)?,
        on_target_pct: on_target_rate(&hyps, &refs, tgt, |s| identify_language(vocab, s)),
        n_scored: hyps.len(),
    })
}

/// Worker threads for route-parallel evaluation: `ADAPTERFORGE_THREADS`,
/// else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("ADAPTERFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Scores every route, spreading routes over `threads` workers. Results
/// come back in route order whatever the thread count.
pub fn score_routes(
    translator: &ModelTranslator,
    data: &DomainSplit,
    split: Split,
    routes: &[Route],
    threads: usize,
) -> Result<Vec<RouteScore>> {
    let threads = threads.clamp(1, routes.len().max(1));
    if threads == 1 {
        return routes.iter().map(|r| score_route(translator, data, split, r)).collect();
    }
    let mut slots: Vec<Option<Result<RouteScore>>> = (0..routes.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = slots.chunks_mut(routes.len().div_ceil(threads)).collect();
        let mut start = 0;
        for chunk in chunks {
            let lo = start;
            start += chunk.len();
            scope.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(score_route(translator, data, split, &routes[lo + i]));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}
