//! Optimization loop with validation-based checkpoint selection.

mod adam;

pub use adam::{Adam, AdamConfig};

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, Vocab};
use crate::error::{Error, Result};
use crate::routing::{plan_activation, ActivationPlan, BatchSource, BatchStream, MixedStream, Route, RoutingSetup};
use crate::tensor::{GroupPattern, Tape, Tensor};
use crate::transformer::{RunCtx, Seq2Seq};

/// Learning rate used by every adapter phase unless overridden.
pub const ADAPTER_LR: f64 = 5e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    LanguageAdapters,
    DomainAdapters,
    Finetune,
    Tags,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Schedule {
    InvSqrt { peak: f64, warmup: usize },
    Fixed { lr: f64 },
}

/// Learning rate at 1-based `step`.
pub fn lr_at(schedule: Schedule, step: usize) -> f64 {
    let step = step.max(1) as f64;
    match schedule {
        Schedule::Fixed { lr } => lr,
        Schedule::InvSqrt { peak, warmup } => {
            let w = warmup.max(1) as f64;
            peak * (step / w).min((w / step).sqrt())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub schedule: Schedule,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub max_updates: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: Option<usize>,
    pub trainable_groups: Vec<String>,
    pub max_tokens: usize,
    /// Temperature for direction sampling; infinity means uniform.
    pub temperature: f64,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(phase: Phase, trainable_groups: &[&str]) -> Self {
        let schedule = match phase {
            Phase::Pretrain | Phase::Finetune | Phase::Tags => Schedule::InvSqrt {
                peak: 1e-3,
                warmup: 400,
            },
            Phase::LanguageAdapters | Phase::DomainAdapters => Schedule::Fixed { lr: ADAPTER_LR },
        };
        TrainConfig {
            phase,
            schedule,
            label_smoothing: 0.1,
            dropout: 0.1,
            max_updates: 5000,
            max_epochs: 20,
            eval_every: 250,
            patience: None,
            trainable_groups: trainable_groups.iter().map(|s| s.to_string()).collect(),
            max_tokens: 512,
            temperature: 5.0,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn patterns(&self) -> Vec<GroupPattern> {
        self.trainable_groups.iter().map(|g| GroupPattern::new(g.as_str())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 || self.max_tokens == 0 {
            return Err(Error::Config("eval_every and max_tokens must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("label smoothing and dropout must lie in [0, 1)".into()));
        }
        let peak = match self.schedule {
            Schedule::Fixed { lr } => lr,
            Schedule::InvSqrt { peak, .. } => peak,
        };
        if self.trainable_groups.is_empty() && peak != 0.0 {
            return Err(Error::Config("no trainable groups but a nonzero learning rate".into()));
        }
        Ok(())
    }
}

/// Training and validation text for one phase.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<ParallelCorpus>,
    /// Second stream mixed in with the given per-batch probability.
    pub extra: Option<(Vec<ParallelCorpus>, f64)>,
    pub valid: Vec<ParallelCorpus>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: Option<f64>,
    pub lr: Option<f64>,
    pub route: Option<String>,
    pub val_nll: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub updates: usize,
    pub epochs: f64,
    pub best_step: usize,
    pub best_val_nll: Option<f64>,
    /// `(step, validation NLL)` of every evaluation.
    pub history: Vec<(usize, f64)>,
}

/// Keeps the trainable tensors of the lowest validation NLL seen so far.
pub struct BestTracker {
    best: Option<(usize, f64)>,
    snapshot: Vec<(usize, Tensor<f32>)>,
    since_best: usize,
}

impl BestTracker {
    pub fn new() -> Self {
        BestTracker {
            best: None,
            snapshot: Vec::new(),
            since_best: 0,
        }
    }

    /// Records an evaluation; returns true if it is the new best.
    pub fn observe(&mut self, step: usize, nll: f64, model: &Seq2Seq<f32>) -> bool {
        if self.best.is_none_or(|(_, b)| nll < b) {
            self.best = Some((step, nll));
            self.snapshot = model
                .store()
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(id, p)| (id.index(), p.value.clone()))
                .collect();
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn evaluations_since_best(&self) -> usize {
        self.since_best
    }

    /// Writes the best snapshot back into the model.
    pub fn restore(&self, model: &mut Seq2Seq<f32>) {
        let store = model.store_mut();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, t) in &self.snapshot {
            store.get_mut(ids[*i]).value = t.clone();
        }
    }
}

impl Default for BestTracker {
    fn default() -> Self {
        Self::new()
    }
}

/// Caches one activation plan per route.
pub struct Planner<'a> {
    pub setup: &'a RoutingSetup,
    pub vocab: &'a Vocab,
    plans: BTreeMap<Route, ActivationPlan>,
}

impl<'a> Planner<'a> {
    pub fn new(setup: &'a RoutingSetup, vocab: &'a Vocab) -> Self {
        Planner {
            setup,
            vocab,
            plans: BTreeMap::new(),
        }
    }

    pub fn plan(&mut self, route: &Route, model: &Seq2Seq<f32>) -> Result<&ActivationPlan> {
        if !self.plans.contains_key(route) {
            let c = model.config();
            let p = plan_activation(route, self.setup, self.vocab, model.adapters(), c.enc_layers, c.dec_layers)?;
            self.plans.insert(route.clone(), p);
        }
        Ok(&self.plans[route])
    }
}

/// Token-averaged NLL over every validation pair, in eval mode.
pub fn validation_nll(model: &Seq2Seq<f32>, planner: &mut Planner, valid: &[ParallelCorpus], max_tokens: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for c in valid {
        let plan = planner.plan(&c.route, model)?.clone();
        let mut chunk: Vec<(&[u32], &[u32])> = Vec::new();
        let mut longest = 0;
        let flush = |chunk: &mut Vec<(&[u32], &[u32])>, total: &mut f64, tokens: &mut usize| -> Result<()> {
            if !chunk.is_empty() {
                let (s, n) = model.nll(chunk, &plan)?;
                *total += s;
                *tokens += n;
                chunk.clear();
            }
            Ok(())
        };
        for p in &c.pairs {
            let l = p.src.len().max(p.tgt.len()) + 1;
            if (chunk.len() + 1) * longest.max(l) > max_tokens {
                flush(&mut chunk, &mut total, &mut tokens)?;
                longest = 0;
            }
            longest = longest.max(l);
            chunk.push((&p.src, &p.tgt));
        }
        flush(&mut chunk, &mut total, &mut tokens)?;
    }
    if tokens == 0 {
        return Err(Error::Config("validation set is empty".into()));
    }
    Ok(total / tokens as f64)
}

/// Trains the configured groups and leaves the model at its best
/// validation state.
///
/// Runs until `max_updates` or `max_epochs` (an epoch being as many pairs
/// drawn as the primary training stream holds), evaluating every
/// `eval_every` updates and once before the first update.
pub fn train(
    model: &mut Seq2Seq<f32>,
    data: &TrainData,
    setup: &RoutingSetup,
    vocab: &Vocab,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.set_trainable(&cfg.patterns())?;
    if model.store().trainable_count() == 0 && !cfg.trainable_groups.is_empty() {
        return Err(Error::Config("trainable groups hold no parameters".into()));
    }
    let saved_dropout = model.config().dropout_p;
    model.set_dropout(cfg.dropout);
    let result = run(model, data, setup, vocab, cfg, &mut log);
    model.set_dropout(saved_dropout);
    result
}

fn run(
    model: &mut Seq2Seq<f32>,
    data: &TrainData,
    setup: &RoutingSetup,
    vocab: &Vocab,
    cfg: &TrainConfig,
    log: &mut Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let primary = BatchStream::new(data.train.clone(), cfg.max_tokens, cfg.temperature, cfg.seed)?;
    let epoch_size = primary.total_pairs();
    let mut stream: Box<dyn BatchSource> = match &data.extra {
        Some((extra, p)) if *p > 0.0 => {
            let extra = BatchStream::new(extra.clone(), cfg.max_tokens, cfg.temperature, cfg.seed ^ 0xe7)?;
            Box::new(MixedStream::new(primary, extra, *p, cfg.seed ^ 0x313)?)
        }
        _ => Box::new(primary),
    };
    let mut planner = Planner::new(setup, vocab);
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd50);
    let mut best = BestTracker::new();
    let mut out = TrainOutcome::default();
    let emit = |log: &mut Option<&mut dyn Write>, rec: &LogRecord| -> Result<()> {
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    };

    let evaluate = |model: &Seq2Seq<f32>, planner: &mut Planner| -> Result<f64> {
        let v = validation_nll(model, planner, &data.valid, cfg.max_tokens)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("validation NLL is {v}")));
        }
        Ok(v)
    };
    let v0 = evaluate(model, &mut planner)?;
    best.observe(0, v0, model);
    out.history.push((0, v0));
    emit(log, &LogRecord { step: 0, loss: None, lr: None, route: None, val_nll: Some(v0) })?;

    let frozen = model.store().trainable_count() == 0;
    let max_pairs = cfg.max_epochs.saturating_mul(epoch_size);
    let mut step = 0;
    while step < cfg.max_updates && stream.pairs_drawn() < max_pairs {
        step += 1;
        let batch = stream.next_batch()?;
        let plan = planner.plan(&batch.route, model)?;
        let pairs: Vec<(&[u32], &[u32])> = batch.pairs.iter().map(|p| (&p.src[..], &p.tgt[..])).collect();
        let mut tape = Tape::new();
        let mut ctx = RunCtx::train(&mut rng);
        let loss = model.loss(&mut tape, &pairs, plan, cfg.label_smoothing, &mut ctx)?;
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("loss is {lv} at step {step} on route {}", batch.route)));
        }
        let lr = lr_at(cfg.schedule, step);
        if !frozen {
            tape.backward_into(loss, model.store_mut())?;
            // DADrop can skip every trained adapter of a batch; such a
            // batch still counts as an update but moves nothing.
            if model.store().iter().any(|(_, p)| p.trainable && p.grad.is_some()) {
                adam.step(model.store_mut(), lr)?;
            }
        }
        let mut rec = LogRecord {
            step,
            loss: Some(lv),
            lr: Some(lr),
            route: Some(batch.route.to_string()),
            val_nll: None,
        };
        if step % cfg.eval_every == 0 {
            let v = evaluate(model, &mut planner)?;
            best.observe(step, v, model);
            out.history.push((step, v));
            rec.val_nll = Some(v);
        }
        emit(log, &rec)?;
        if cfg.patience.is_some_and(|p| best.evaluations_since_best() >= p) {
            break;
        }
    }
    if step % cfg.eval_every != 0 {
        let v = evaluate(model, &mut planner)?;
        best.observe(step, v, model);
        out.history.push((step, v));
        emit(log, &LogRecord { step, loss: None, lr: None, route: None, val_nll: Some(v) })?;
    }
    best.restore(model);
    let (bs, bv) = best.best().expect("evaluated at least once");
    out.updates = step;
    out.epochs = stream.pairs_drawn() as f64 / epoch_size as f64;
    out.best_step = bs;
    out.best_val_nll = Some(bv);
    Ok(out)
}
