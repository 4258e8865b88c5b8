//! Step-by-step decoding with cached decoder keys and values.
//!
//! Each step runs one new token per hypothesis through the decoder. The
//! self-attention keys and values of earlier positions come from the
//! hypothesis' [`DecoderCache`], so a step costs one row per hypothesis
//! instead of re-running the whole prefix.

use std::sync::Arc;

use super::{CrossKv, RunCtx, SelfKv, Seq2Seq};
use crate::error::{Error, Result};
use crate::routing::ActivationPlan;
use crate::tensor::{AttentionSegments, Float, Tape, Tensor, Var};

/// Encoder output of a batch of sources, with every decoder layer's
/// cross-attention keys and values projected once.
pub struct Memory<T: Float = f32> {
    states: Tensor<T>,
    offsets: Vec<usize>,
    cross: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Float> Memory<T> {
    pub fn sources(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn states(&self) -> &Tensor<T> {
        &self.states
    }
}

/// Self-attention keys and values of the tokens a hypothesis has consumed.
#[derive(Clone, Debug, Default)]
pub struct DecoderCache<T: Float = f32> {
    len: usize,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> DecoderCache<T> {
    /// Number of tokens already fed, i.e. the position of the next one.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub(crate) struct StepState<T: Float> {
    caches: Vec<DecoderCache<T>>,
    d: usize,
}

impl<T: Float> StepState<T> {
    /// Appends the new rows to every cache and returns the concatenated
    /// keys, values and per-hypothesis attention segments for layer `l`.
    pub(crate) fn extend(
        &mut self,
        tape: &mut Tape<T>,
        l: usize,
        k_new: Var,
        v_new: Var,
    ) -> Result<(Var, Var, Arc<AttentionSegments>)> {
        let d = self.d;
        let (kn, vn) = (tape.value(k_new).clone(), tape.value(v_new).clone());
        let mut k_all = Vec::new();
        let mut v_all = Vec::new();
        let mut q_ranges = Vec::with_capacity(self.caches.len());
        let mut k_ranges = Vec::with_capacity(self.caches.len());
        for (b, c) in self.caches.iter_mut().enumerate() {
            c.k[l].extend_from_slice(kn.row(b));
            c.v[l].extend_from_slice(vn.row(b));
            let start = k_all.len() / d;
            k_all.extend_from_slice(&c.k[l]);
            v_all.extend_from_slice(&c.v[l]);
            q_ranges.push(b..b + 1);
            k_ranges.push(start..k_all.len() / d);
        }
        let rows = k_all.len() / d;
        let segs = Arc::new(AttentionSegments::with_ranges(q_ranges, k_ranges, rows)?);
        let kk = tape.constant(Tensor::new(vec![rows, d], k_all)?);
        let vv = tape.constant(Tensor::new(vec![rows, d], v_all)?);
        Ok((kk, vv, segs))
    }
}

/// One hypothesis to advance: which source it translates, what it has
/// consumed so far, and the token to feed next.
pub struct StepInput<'a, T: Float> {
    pub source: usize,
    pub cache: &'a DecoderCache<T>,
    pub token: u32,
}

impl<T: Float> Seq2Seq<T> {
    /// Encodes formatted sources in eval mode and pre-projects the
    /// cross-attention memory of every decoder layer.
    pub fn encode_memory(&self, src: &[Vec<u32>], plan: &ActivationPlan) -> Result<Memory<T>> {
        let mut tape = Tape::new();
        let mut ctx = RunCtx::eval();
        let enc = self.encode(&mut tape, src, plan, &mut ctx)?;
        let mut cross = Vec::with_capacity(self.dec.len());
        for layer in &self.dec {
            let k = self.linear(&mut tape, layer.cross.k, enc.states)?;
            let v = self.linear(&mut tape, layer.cross.v, enc.states)?;
            cross.push((tape.value(k).clone(), tape.value(v).clone()));
        }
        Ok(Memory {
            states: tape.value(enc.states).clone(),
            offsets: enc.offsets,
            cross,
        })
    }

    pub fn empty_cache(&self) -> DecoderCache<T> {
        DecoderCache {
            len: 0,
            k: vec![Vec::new(); self.dec.len()],
            v: vec![Vec::new(); self.dec.len()],
        }
    }

    /// Feeds one token per hypothesis. Returns next-token log-probabilities
    /// (`[hyps × vocab]`, row-major) and the advanced caches.
    pub fn decode_step(
        &self,
        memory: &Memory<T>,
        plan: &ActivationPlan,
        inputs: &[StepInput<'_, T>],
    ) -> Result<(Vec<f64>, Vec<DecoderCache<T>>)> {
        if inputs.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        if let Some(bad) = inputs.iter().find(|i| i.source >= memory.sources()) {
            return Err(Error::InvalidTensor(format!(
                "hypothesis refers to source {} of {}",
                bad.source,
                memory.sources()
            )));
        }
        let mut tape = Tape::new();
        let mut ctx = RunCtx::eval();
        let ids: Vec<u32> = inputs.iter().map(|i| i.token).collect();
        let positions: Vec<usize> = inputs.iter().map(|i| i.cache.len).collect();
        let mut x = self.embed(&mut tape, &ids, &positions, &mut ctx)?;

        let cross_segs = Arc::new(AttentionSegments::with_ranges(
            (0..inputs.len()).map(|b| b..b + 1).collect(),
            inputs
                .iter()
                .map(|i| memory.offsets[i.source]..memory.offsets[i.source + 1])
                .collect(),
            *memory.offsets.last().unwrap(),
        )?);
        let mut state = StepState {
            caches: inputs.iter().map(|i| i.cache.clone()).collect(),
            d: self.config.d_model,
        };
        for (l, (ck, cv)) in memory.cross.iter().enumerate() {
            let k = tape.constant(ck.clone());
            let v = tape.constant(cv.clone());
            x = self.decoder_layer(
                &mut tape,
                l,
                x,
                SelfKv::Cached(&mut state),
                CrossKv::Projected(k, v),
                &cross_segs,
                plan,
                &mut ctx,
            )?;
        }
        let logits = self.logits(&mut tape, x)?;
        let logits = tape.value(logits);
        let v = logits.last_dim();
        let mut out = Vec::with_capacity(logits.numel());
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x.as_f64() - lse));
        }
        debug_assert_eq!(out.len(), inputs.len() * v);
        for c in &mut state.caches {
            c.len += 1;
        }
        Ok((out, state.caches))
    }
}
