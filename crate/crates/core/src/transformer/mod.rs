//! Post-norm transformer encoder-decoder with tied embeddings and one
//! adapter hook after every layer.
//!
//! Sequences are packed back to back without padding; attention is confined
//! to each sentence by [`AttentionSegments`].

pub mod checkpoint;
mod incremental;

pub use checkpoint::CheckpointMeta;
pub use incremental::{DecoderCache, Memory, StepInput};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::adapters::{
    init_near_identity, stack_forward, AdapterBank, AdapterKind, AdapterLayer, MadxInputs, Side, LN_EPS,
};
use crate::error::{Error, Result};
use crate::routing::ActivationPlan;
use crate::tensor::{AttentionSegments, Float, GroupPattern, ParamId, ParamStore, Tape, Tensor, Var};

pub const BASE_GROUP: &str = "base";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
}

fn default_tie() -> bool {
    true
}

impl ModelConfig {
    /// CPU-sized default: width 64, 2+2 layers, 4 heads, FFN 256.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 256,
            vocab_size,
            max_len: 64,
            dropout_p: 0.1,
            tie_embeddings: true,
        }
    }

    /// Transformer Base shape, used for parameter accounting only.
    pub fn base_shape(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            ffn_dim: 2048,
            vocab_size,
            max_len: 1024,
            dropout_p: 0.1,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.n_heads,
            self.enc_layers,
            self.dec_layers,
            self.ffn_dim,
            self.vocab_size,
            self.max_len,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn layers(&self, side: Side) -> usize {
        match side {
            Side::Encoder => self.enc_layers,
            Side::Decoder => self.dec_layers,
        }
    }

    /// Closed-form size of the bare model without materializing it.
    pub fn base_param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let ffn = 2 * d * self.ffn_dim + self.ffn_dim + d;
        let ln = 2 * d;
        let enc = attn + ffn + 2 * ln;
        let dec = 2 * attn + ffn + 3 * ln;
        let emb = self.vocab_size * d;
        let out = if self.tie_embeddings { 0 } else { emb };
        emb + out + self.enc_layers * enc + self.dec_layers * dec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Record of one hook invocation, for routing audits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HookEvent {
    pub side: Side,
    pub layer: usize,
    pub language: Option<String>,
    pub domain: Option<String>,
    pub domain_dropped: bool,
}

/// Per-forward settings: train/eval, the randomness source for dropout and
/// domain-adapter dropping, and an optional hook recorder.
pub struct RunCtx<'a> {
    pub mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
    pub hooks: Option<&'a mut Vec<HookEvent>>,
}

impl<'a> RunCtx<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        RunCtx {
            mode: Mode::Train,
            rng: Some(rng),
            hooks: None,
        }
    }

    pub fn eval() -> Self {
        RunCtx {
            mode: Mode::Eval,
            rng: None,
            hooks: None,
        }
    }

    pub fn recording(mut self, hooks: &'a mut Vec<HookEvent>) -> Self {
        self.hooks = Some(hooks);
        self
    }

    fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng.as_deref_mut().expect("training forward needs an rng")
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    attn: Attn,
    ln1: Norm,
    ffn: Ffn,
    ln2: Norm,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    self_attn: Attn,
    ln1: Norm,
    cross: Attn,
    ln2: Norm,
    ffn: Ffn,
    ln3: Norm,
}

/// Source side of a packed batch after encoding.
pub struct Encoded {
    pub states: Var,
    /// Row offsets of each sentence in `states` (`len == batch + 1`).
    pub offsets: Vec<usize>,
}

pub struct Seq2Seq<T: Float = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    adapters: AdapterBank,
    emb: ParamId,
    out_proj: Option<ParamId>,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    pe: Tensor<T>,
}

struct Builder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Float> Builder<'_, T> {
    fn tensor(&mut self, name: String, value: Tensor<T>) -> ParamId {
        self.store.add(name, BASE_GROUP, value)
    }

    fn linear(&mut self, name: &str, out_dim: usize, in_dim: usize) -> Linear {
        // Xavier-uniform, stored [out × in].
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("valid range");
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[out_dim, in_dim], |_| T::of_f64(dist.sample(rng)));
        Linear {
            w: self.tensor(format!("{name}.w"), w),
            b: self.tensor(format!("{name}.b"), Tensor::zeros(&[out_dim])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.tensor(format!("{name}.g"), Tensor::ones(&[d])),
            b: self.tensor(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), f, d),
            down: self.linear(&format!("{name}.down"), d, f),
        }
    }
}

fn sinusoidal<T: Float>(max_len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[max_len, d], |i| {
        let (pos, c) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((c - c % 2) as f64) / d as f64);
        T::of_f64(if c % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() })
    })
}

impl<T: Float> Seq2Seq<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (d, f, v) = (config.d_model, config.ffn_dim, config.vocab_size);
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("valid std");
        let rng = &mut b.rng;
        let table = Tensor::from_fn(&[v, d], |_| T::of_f64(normal.sample(rng)));
        let emb = b.tensor("emb".into(), table);
        let out_proj = (!config.tie_embeddings).then(|| {
            let rng = &mut b.rng;
            let w = Tensor::from_fn(&[v, d], |_| T::of_f64(normal.sample(rng)));
            b.tensor("out_proj".into(), w)
        });
        let enc = (0..config.enc_layers)
            .map(|l| EncLayer {
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln1: b.norm(&format!("enc.{l}.ln1"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, f),
                ln2: b.norm(&format!("enc.{l}.ln2"), d),
            })
            .collect();
        let dec = (0..config.dec_layers)
            .map(|l| DecLayer {
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln1: b.norm(&format!("dec.{l}.ln1"), d),
                cross: b.attn(&format!("dec.{l}.cross"), d),
                ln2: b.norm(&format!("dec.{l}.ln2"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, f),
                ln3: b.norm(&format!("dec.{l}.ln3"), d),
            })
            .collect();
        let pe = sinusoidal(config.max_len, d);
        Ok(Seq2Seq {
            config,
            store,
            adapters: AdapterBank::default(),
            emb,
            out_proj,
            enc,
            dec,
            pe,
        })
    }

    /// Rebuilds handles for a store whose names follow this model's layout.
    fn from_parts(config: ModelConfig, store: ParamStore<T>, mut adapters: AdapterBank) -> Result<Self> {
        config.validate()?;
        let id = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let lin = |name: &str| -> Result<Linear> {
            Ok(Linear {
                w: id(format!("{name}.w"))?,
                b: id(format!("{name}.b"))?,
            })
        };
        let norm = |name: &str| -> Result<Norm> {
            Ok(Norm {
                g: id(format!("{name}.g"))?,
                b: id(format!("{name}.b"))?,
            })
        };
        let attn = |name: &str| -> Result<Attn> {
            Ok(Attn {
                q: lin(&format!("{name}.q"))?,
                k: lin(&format!("{name}.k"))?,
                v: lin(&format!("{name}.v"))?,
                o: lin(&format!("{name}.o"))?,
            })
        };
        let ffn = |name: &str| -> Result<Ffn> {
            Ok(Ffn {
                up: lin(&format!("{name}.up"))?,
                down: lin(&format!("{name}.down"))?,
            })
        };
        let enc = (0..config.enc_layers)
            .map(|l| {
                Ok(EncLayer {
                    attn: attn(&format!("enc.{l}.attn"))?,
                    ln1: norm(&format!("enc.{l}.ln1"))?,
                    ffn: ffn(&format!("enc.{l}.ffn"))?,
                    ln2: norm(&format!("enc.{l}.ln2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec = (0..config.dec_layers)
            .map(|l| {
                Ok(DecLayer {
                    self_attn: attn(&format!("dec.{l}.self"))?,
                    ln1: norm(&format!("dec.{l}.ln1"))?,
                    cross: attn(&format!("dec.{l}.cross"))?,
                    ln2: norm(&format!("dec.{l}.ln2"))?,
                    ffn: ffn(&format!("dec.{l}.ffn"))?,
                    ln3: norm(&format!("dec.{l}.ln3"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let emb = id("emb".into())?;
        let out_proj = if config.tie_embeddings {
            None
        } else {
            Some(id("out_proj".into())?)
        };
        let expected = [config.vocab_size, config.d_model];
        if store.get(emb).value.shape() != expected {
            return Err(Error::Checkpoint(format!(
                "embedding shape {:?} does not match config {:?}",
                store.get(emb).value.shape(),
                expected
            )));
        }
        for a in adapters.iter_mut() {
            a.bind(&store)?;
        }
        let pe = sinusoidal(config.max_len, config.d_model);
        Ok(Seq2Seq {
            config,
            store,
            adapters,
            emb,
            out_proj,
            enc,
            dec,
            pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Dropout used by training-mode forwards.
    pub fn set_dropout(&mut self, p: f64) {
        self.config.dropout_p = p;
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn adapters(&self) -> &AdapterBank {
        &self.adapters
    }

    /// Handle of the shared embedding / output matrix.
    pub fn embedding_id(&self) -> ParamId {
        self.emb
    }

    /// Handle of the output projection; the embedding itself when tied.
    pub fn output_id(&self) -> ParamId {
        self.out_proj.unwrap_or(self.emb)
    }

    /// Same weights in another float type, e.g. `f64` for gradient checks.
    pub fn cast<U: Float>(&self) -> Seq2Seq<U> {
        Seq2Seq {
            config: self.config.clone(),
            store: self.store.cast(),
            adapters: self.adapters.clone(),
            emb: self.emb,
            out_proj: self.out_proj,
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            pe: self.pe.cast(),
        }
    }

    /// Installs near-identity adapters of one kind and owner on the listed
    /// layers of each side. Returns the parameter group id.
    pub fn install_adapters(
        &mut self,
        kind: AdapterKind,
        owner: &str,
        enc_layers: &[usize],
        dec_layers: &[usize],
        bottleneck: usize,
        seed: u64,
    ) -> Result<String> {
        let sides = [(Side::Encoder, enc_layers), (Side::Decoder, dec_layers)];
        for (side, layers) in sides {
            for &l in layers {
                if l >= self.config.layers(side) {
                    return Err(Error::Config(format!("no {side} layer {l} to hold an adapter")));
                }
                if self.adapters.get(kind, owner, side, l).is_some() {
                    return Err(Error::Config(format!(
                        "adapter {} already installed at {side} layer {l}",
                        kind.group(owner)
                    )));
                }
            }
        }
        for (side, layers) in sides {
            for &l in layers {
                let a = AdapterLayer::install(&mut self.store, kind, owner, side, l, self.config.d_model, bottleneck)?;
                // distinct, reproducible stream per adapter
                let sub = seed ^ ((side as u64) << 40) ^ ((l as u64) << 32) ^ hash_str(owner);
                init_near_identity(&mut self.store, &a, sub);
                self.adapters.insert(a)?;
            }
        }
        Ok(kind.group(owner))
    }

    /// Language adapters on every layer of both sides.
    pub fn install_language_adapter(&mut self, lang: &str, bottleneck: usize, seed: u64) -> Result<String> {
        let enc: Vec<_> = (0..self.config.enc_layers).collect();
        let dec: Vec<_> = (0..self.config.dec_layers).collect();
        self.install_adapters(AdapterKind::Language, lang, &enc, &dec, bottleneck, seed)
    }

    pub fn set_trainable(&mut self, groups: &[GroupPattern]) -> Result<()> {
        self.store.set_trainable(groups)
    }

    pub fn count_parameters(&self, groups: &[GroupPattern]) -> Result<usize> {
        self.store.count(groups)
    }

    fn linear(&self, tape: &mut Tape<T>, p: Linear, x: Var) -> Result<Var> {
        let w = tape.param(&self.store, p.w);
        let b = tape.param(&self.store, p.b);
        let y = tape.matmul_nt(x, w)?;
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape<T>, p: Norm, x: Var) -> Result<Var> {
        let g = tape.param(&self.store, p.g);
        let b = tape.param(&self.store, p.b);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, ctx: &mut RunCtx) -> Var {
        if ctx.training() && self.config.dropout_p > 0.0 {
            tape.dropout(x, self.config.dropout_p, ctx.rng())
        } else {
            x
        }
    }

    fn ffn(&self, tape: &mut Tape<T>, p: Ffn, x: Var, ctx: &mut RunCtx) -> Result<Var> {
        let up = self.linear(tape, p.up, x)?;
        let act = tape.relu(up);
        let act = self.dropout(tape, act, ctx);
        self.linear(tape, p.down, act)
    }

    /// Token embeddings scaled by `√D` plus sinusoidal positions.
    fn embed(&self, tape: &mut Tape<T>, ids: &[u32], positions: &[usize], ctx: &mut RunCtx) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_len) {
            return Err(Error::Config(format!(
                "position {p} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let d = self.config.d_model;
        let table = tape.param(&self.store, self.emb);
        let x = tape.embedding(table, ids, (d as f64).sqrt())?;
        let mut pe = Tensor::zeros(&[ids.len(), d]);
        for (r, &p) in positions.iter().enumerate() {
            pe.data_mut()[r * d..(r + 1) * d].copy_from_slice(self.pe.row(p));
        }
        let pe = tape.constant(pe);
        let x = tape.add(x, pe)?;
        Ok(self.dropout(tape, x, ctx))
    }

    /// Post-layer hook: applies the plan's adapter stack for `(side, layer)`.
    fn hook(
        &self,
        tape: &mut Tape<T>,
        side: Side,
        layer: usize,
        h: Var,
        madx: MadxInputs,
        plan: &ActivationPlan,
        ctx: &mut RunCtx,
    ) -> Result<Var> {
        let stack = plan.stack(side, layer);
        let la = match &stack.language {
            Some(o) => Some(self.adapters.require(AdapterKind::Language, o, side, layer)?),
            None => None,
        };
        let da = match &stack.domain {
            Some(o) => Some(self.adapters.require(AdapterKind::Domain, o, side, layer)?),
            None => None,
        };
        let drop = da.is_some() && ctx.training() && plan.dadrop_p > 0.0 && ctx.rng().random::<f64>() < plan.dadrop_p;
        if let Some(log) = ctx.hooks.as_deref_mut() {
            log.push(HookEvent {
                side,
                layer,
                language: stack.language.clone(),
                domain: stack.domain.clone(),
                domain_dropped: drop,
            });
        }
        stack_forward(tape, &self.store, la, da, h, Some(madx), plan.mode, drop)
    }

    fn self_attention(&self, tape: &mut Tape<T>, p: Attn, x: Var, segs: &Arc<AttentionSegments>, causal: bool) -> Result<Var> {
        let q = self.linear(tape, p.q, x)?;
        let k = self.linear(tape, p.k, x)?;
        let v = self.linear(tape, p.v, x)?;
        let a = tape.attention(q, k, v, segs, self.config.n_heads, causal)?;
        self.linear(tape, p.o, a)
    }

    /// Encoder states for a batch of already-formatted source sequences
    /// (see [`ActivationPlan::source_ids`]).
    pub fn encode(&self, tape: &mut Tape<T>, src: &[Vec<u32>], plan: &ActivationPlan, ctx: &mut RunCtx) -> Result<Encoded> {
        plan.check_shape(self.config.enc_layers, self.config.dec_layers)?;
        if src.is_empty() || src.iter().any(Vec::is_empty) {
            return Err(Error::InvalidTensor("empty source sentence".into()));
        }
        let mut offsets = vec![0];
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for s in src {
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            offsets.push(ids.len());
        }
        let segs = Arc::new(AttentionSegments::self_attention(&offsets)?);
        let mut x = self.embed(tape, &ids, &positions, ctx)?;
        for (l, layer) in self.enc.iter().enumerate() {
            let a = self.self_attention(tape, layer.attn, x, &segs, false)?;
            let a = self.dropout(tape, a, ctx);
            let x1 = tape.add(x, a)?;
            let x1 = self.norm(tape, layer.ln1, x1)?;
            let f = self.ffn(tape, layer.ffn, x1, ctx)?;
            let f = self.dropout(tape, f, ctx);
            let r = tape.add(x1, f)?;
            let h = self.norm(tape, layer.ln2, r)?;
            let madx = self.madx_inputs(tape, r, layer.ln2);
            x = self.hook(tape, Side::Encoder, l, h, madx, plan, ctx)?;
        }
        Ok(Encoded { states: x, offsets })
    }

    fn madx_inputs(&self, tape: &mut Tape<T>, r: Var, ln: Norm) -> MadxInputs {
        MadxInputs {
            r,
            ln_gain: tape.param(&self.store, ln.g),
            ln_bias: tape.param(&self.store, ln.b),
        }
    }

    /// Teacher-forced decoder logits. Each target sentence is fed as
    /// `[start] + tgt` and the returned rows predict `tgt + [eos]`.
    pub fn decode_train(
        &self,
        tape: &mut Tape<T>,
        enc: &Encoded,
        tgt_in: &[Vec<u32>],
        plan: &ActivationPlan,
        ctx: &mut RunCtx,
    ) -> Result<Var> {
        if tgt_in.len() + 1 != enc.offsets.len() {
            return Err(Error::InvalidTensor(format!(
                "{} targets for {} sources",
                tgt_in.len(),
                enc.offsets.len() - 1
            )));
        }
        let mut offsets = vec![0];
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for t in tgt_in {
            ids.extend_from_slice(t);
            positions.extend(0..t.len());
            offsets.push(ids.len());
        }
        let self_segs = Arc::new(AttentionSegments::self_attention(&offsets)?);
        let cross_segs = Arc::new(AttentionSegments::new(offsets.clone(), enc.offsets.clone())?);
        let mut x = self.embed(tape, &ids, &positions, ctx)?;
        for l in 0..self.dec.len() {
            let cross = CrossKv::Project(enc.states);
            x = self.decoder_layer(tape, l, x, SelfKv::Causal(&self_segs), cross, &cross_segs, plan, ctx)?;
        }
        self.logits(tape, x)
    }

    fn logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.store, self.output_id());
        tape.matmul_nt(x, w)
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        tape: &mut Tape<T>,
        l: usize,
        x: Var,
        self_kv: SelfKv<'_, T>,
        cross: CrossKv,
        cross_segs: &Arc<AttentionSegments>,
        plan: &ActivationPlan,
        ctx: &mut RunCtx,
    ) -> Result<Var> {
        let layer = self.dec[l];
        let heads = self.config.n_heads;
        let q = self.linear(tape, layer.self_attn.q, x)?;
        let k = self.linear(tape, layer.self_attn.k, x)?;
        let v = self.linear(tape, layer.self_attn.v, x)?;
        let a = match self_kv {
            SelfKv::Causal(segs) => tape.attention(q, k, v, segs, heads, true)?,
            SelfKv::Cached(step) => {
                let (kk, vv, segs) = step.extend(tape, l, k, v)?;
                tape.attention(q, kk, vv, &segs, heads, false)?
            }
        };
        let a = self.linear(tape, layer.self_attn.o, a)?;
        let a = self.dropout(tape, a, ctx);
        let x1 = tape.add(x, a)?;
        let x1 = self.norm(tape, layer.ln1, x1)?;

        let cq = self.linear(tape, layer.cross.q, x1)?;
        let (ck, cv) = match cross {
            CrossKv::Project(memory) => (
                self.linear(tape, layer.cross.k, memory)?,
                self.linear(tape, layer.cross.v, memory)?,
            ),
            CrossKv::Projected(k, v) => (k, v),
        };
        let c = tape.attention(cq, ck, cv, cross_segs, heads, false)?;
        let c = self.linear(tape, layer.cross.o, c)?;
        let c = self.dropout(tape, c, ctx);
        let x2 = tape.add(x1, c)?;
        let x2 = self.norm(tape, layer.ln2, x2)?;

        let f = self.ffn(tape, layer.ffn, x2, ctx)?;
        let f = self.dropout(tape, f, ctx);
        let r = tape.add(x2, f)?;
        let h = self.norm(tape, layer.ln3, r)?;
        let madx = self.madx_inputs(tape, r, layer.ln3);
        self.hook(tape, Side::Decoder, l, h, madx, plan, ctx)
    }

    /// Label-smoothed mean token loss of a batch of raw sentence pairs.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        pairs: &[(&[u32], &[u32])],
        plan: &ActivationPlan,
        smoothing: f64,
        ctx: &mut RunCtx,
    ) -> Result<Var> {
        let src: Vec<_> = pairs.iter().map(|(s, _)| plan.source_ids(s)).collect();
        let tgt_in: Vec<_> = pairs.iter().map(|(_, t)| plan.decoder_input(t)).collect();
        let targets: Vec<u32> = pairs.iter().flat_map(|(_, t)| plan.decoder_target(t)).collect();
        let enc = self.encode(tape, &src, plan, ctx)?;
        let logits = self.decode_train(tape, &enc, &tgt_in, plan, ctx)?;
        tape.cross_entropy_smoothed(logits, &targets, smoothing)
    }

    /// Summed (not averaged) token NLL of the pairs in eval mode, and the
    /// number of target tokens scored.
    pub fn nll(&self, pairs: &[(&[u32], &[u32])], plan: &ActivationPlan) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let mut ctx = RunCtx::eval();
        let loss = self.loss(&mut tape, pairs, plan, 0.0, &mut ctx)?;
        let n: usize = pairs.iter().map(|(_, t)| t.len() + 1).sum();
        Ok((tape.value(loss).item().as_f64() * n as f64, n))
    }
}

pub(crate) enum SelfKv<'a, T: Float> {
    Causal(&'a Arc<AttentionSegments>),
    Cached(&'a mut incremental::StepState<T>),
}

#[derive(Clone, Copy)]
pub(crate) enum CrossKv {
    /// Project encoder states with this layer's cross-attention weights.
    Project(Var),
    /// Keys and values projected once ahead of incremental decoding.
    Projected(Var, Var),
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a; only used to decorrelate seeds
    s.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_len: 16,
            dropout_p: 0.1,
            tie_embeddings: true,
        }
    }

    #[test]
    fn closed_form_count_matches_store() {
        for tie in [true, false] {
            let cfg = ModelConfig {
                tie_embeddings: tie,
                ..tiny()
            };
            let m = Seq2Seq::<f32>::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.count_parameters(&["base".into()]).unwrap(), cfg.base_param_count());
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ModelConfig { n_heads: 3, ..tiny() };
        assert!(Seq2Seq::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn positional_table_is_sinusoidal() {
        let pe = sinusoidal::<f64>(4, 6);
        assert_eq!(pe.row(0)[0], 0.0);
        assert_eq!(pe.row(0)[1], 1.0);
        assert!((pe.row(3)[0] - 3f64.sin()).abs() < 1e-12);
        assert!((pe.row(2)[3] - (2.0 * 10000f64.powf(-2.0 / 6.0)).cos()).abs() < 1e-12);
    }
}
