//! Bottleneck adapters, their serial and MAD-X stacking, placement, and
//! parameter accounting.
//!
//! An adapter's tensors live in the model's [`ParamStore`] under the group
//! `la:<lang>` or `da:<domain>`; [`AdapterLayer`] keeps the handles.

mod budget;

pub use budget::{adapter_param_count, count_adapter_budget, AdapterSetSpec, DeploymentSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Standard deviation of the down-projection at initialization.
pub const INIT_DOWN_STD: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Language,
    Domain,
}

impl AdapterKind {
    pub fn prefix(self) -> &'static str {
        match self {
            AdapterKind::Language => "la",
            AdapterKind::Domain => "da",
        }
    }

    pub fn group(self, owner: &str) -> String {
        format!("{}:{owner}", self.prefix())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        })
    }
}

/// One adapter at one hook: `LN → W_down → ReLU → W_up → + h`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterLayer {
    pub kind: AdapterKind,
    pub owner: String,
    pub side: Side,
    pub layer: usize,
    pub d_model: usize,
    pub bottleneck: usize,
    #[serde(skip)]
    ids: Option<AdapterIds>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct AdapterIds {
    ln_gain: ParamId,
    ln_bias: ParamId,
    w_down: ParamId,
    b_down: ParamId,
    w_up: ParamId,
    b_up: ParamId,
}

impl AdapterLayer {
    /// Adds zero-valued adapter tensors to `store`. Call
    /// [`init_near_identity`] before training.
    pub fn install<T: Float>(
        store: &mut ParamStore<T>,
        kind: AdapterKind,
        owner: &str,
        side: Side,
        layer: usize,
        d_model: usize,
        bottleneck: usize,
    ) -> Result<Self> {
        if bottleneck == 0 || d_model == 0 {
            return Err(Error::Config(format!(
                "adapter needs positive widths, got D={d_model} d={bottleneck}"
            )));
        }
        let group = kind.group(owner);
        let prefix = format!("{group}.{side}.{layer}");
        let mut add = |name: &str, shape: &[usize]| {
            store.add(format!("{prefix}.{name}"), group.clone(), Tensor::zeros(shape))
        };
        let ids = AdapterIds {
            ln_gain: add("ln.g", &[d_model]),
            ln_bias: add("ln.b", &[d_model]),
            w_down: add("down.w", &[d_model, bottleneck]),
            b_down: add("down.b", &[bottleneck]),
            w_up: add("up.w", &[bottleneck, d_model]),
            b_up: add("up.b", &[d_model]),
        };
        let a = AdapterLayer {
            kind,
            owner: owner.to_string(),
            side,
            layer,
            d_model,
            bottleneck,
            ids: Some(ids),
        };
        store.get_mut(ids.ln_gain).value = Tensor::ones(&[d_model]);
        Ok(a)
    }

    /// Re-resolves parameter handles by name, e.g. after loading a checkpoint.
    pub fn bind<T: Float>(&mut self, store: &ParamStore<T>) -> Result<()> {
        let prefix = format!("{}.{}.{}", self.group(), self.side, self.layer);
        let get = |name: &str| {
            store
                .id(&format!("{prefix}.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing adapter tensor {prefix}.{name}")))
        };
        self.ids = Some(AdapterIds {
            ln_gain: get("ln.g")?,
            ln_bias: get("ln.b")?,
            w_down: get("down.w")?,
            b_down: get("down.b")?,
            w_up: get("up.w")?,
            b_up: get("up.b")?,
        });
        Ok(())
    }

    fn ids(&self) -> AdapterIds {
        self.ids.expect("adapter used before being installed or bound")
    }

    pub fn group(&self) -> String {
        self.kind.group(&self.owner)
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        let i = self.ids();
        [i.ln_gain, i.ln_bias, i.w_down, i.b_down, i.w_up, i.b_up]
    }

    pub fn param_count(&self) -> usize {
        adapter_param_count(self.d_model, self.bottleneck)
    }

    pub fn w_down(&self) -> ParamId {
        self.ids().w_down
    }

    pub fn w_up(&self) -> ParamId {
        self.ids().w_up
    }
}

/// Near-identity start: `W_down ~ N(0, 1e-2²)`, `W_up = 0`, biases 0, LN gain 1.
///
/// The zero up-projection makes the adapter an exact identity until the
/// first update.
pub fn init_near_identity<T: Float>(store: &mut ParamStore<T>, a: &AdapterLayer, seed: u64) {
    let ids = a.ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_DOWN_STD).expect("valid std");
    let (d, b) = (a.d_model, a.bottleneck);
    store.get_mut(ids.w_down).value = Tensor::from_fn(&[d, b], |_| T::of_f64(normal.sample(&mut rng)));
    store.get_mut(ids.b_down).value = Tensor::zeros(&[b]);
    store.get_mut(ids.w_up).value = Tensor::zeros(&[b, d]);
    store.get_mut(ids.b_up).value = Tensor::zeros(&[d]);
    store.get_mut(ids.ln_gain).value = Tensor::ones(&[d]);
    store.get_mut(ids.ln_bias).value = Tensor::zeros(&[d]);
}

fn check_width<T: Float>(tape: &Tape<T>, a: &AdapterLayer, h: Var) -> Result<()> {
    let shape = tape.value(h).shape();
    if tape.value(h).last_dim() != a.d_model {
        return Err(Error::dim("adapter", shape, &[a.d_model]));
    }
    Ok(())
}

/// `W_up · ReLU(W_down · x + b_down) + b_up`, no normalization or residual.
pub fn adapter_ffn<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, a: &AdapterLayer, x: Var) -> Result<Var> {
    check_width(tape, a, x)?;
    let ids = a.ids();
    let wd = tape.param(store, ids.w_down);
    let bd = tape.param(store, ids.b_down);
    let wu = tape.param(store, ids.w_up);
    let bu = tape.param(store, ids.b_up);
    let down = tape.matmul(x, wd)?;
    let down = tape.add_row(down, bd)?;
    let act = tape.relu(down);
    let up = tape.matmul(act, wu)?;
    tape.add_row(up, bu)
}

/// `FFN(LN(h)) + h` with the adapter's own layer norm.
pub fn adapter_forward<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, a: &AdapterLayer, h: Var) -> Result<Var> {
    check_width(tape, a, h)?;
    let ids = a.ids();
    let g = tape.param(store, ids.ln_gain);
    let b = tape.param(store, ids.ln_bias);
    let normed = tape.layer_norm(h, g, b, LN_EPS)?;
    let branch = adapter_ffn(tape, store, a, normed)?;
    tape.add(branch, h)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackMode {
    /// `z = LA(h)`, `out = FFN_dom(LN_dom(z)) + z`.
    #[default]
    SerialNewLn,
    /// `out = LN_pre(FFN_dom(FFN_lg(h) + r) + r)` reusing the layer's norm.
    MadX,
}

/// What MAD-X stacking needs from the host layer: the pre-normalization
/// residual sum `r` and the layer's own final norm.
#[derive(Clone, Copy, Debug)]
pub struct MadxInputs {
    pub r: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Applies one hook's adapter stack to the layer output `h`.
///
/// Absent adapters are replaced by the identity; `drop_domain` behaves
/// exactly as if `da` were absent.
pub fn stack_forward<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    la: Option<&AdapterLayer>,
    da: Option<&AdapterLayer>,
    h: Var,
    madx: Option<MadxInputs>,
    mode: StackMode,
    drop_domain: bool,
) -> Result<Var> {
    let da = if drop_domain { None } else { da };
    match mode {
        StackMode::SerialNewLn => {
            let z = match la {
                Some(a) => adapter_forward(tape, store, a, h)?,
                None => h,
            };
            match da {
                Some(a) => adapter_forward(tape, store, a, z),
                None => Ok(z),
            }
        }
        StackMode::MadX => {
            let m = madx.ok_or_else(|| {
                Error::Config("MAD-X stacking needs the layer's feed-forward residual".into())
            })?;
            if la.is_none() && da.is_none() {
                return Ok(h);
            }
            let pre_norm = match (la, da) {
                (Some(l), Some(d)) => {
                    let lang = adapter_ffn(tape, store, l, h)?;
                    let z = tape.add(lang, m.r)?;
                    let dom = adapter_ffn(tape, store, d, z)?;
                    tape.add(dom, m.r)?
                }
                (Some(a), None) | (None, Some(a)) => {
                    let branch = adapter_ffn(tape, store, a, h)?;
                    tape.add(branch, m.r)?
                }
                (None, None) => unreachable!(),
            };
            tape.layer_norm(pre_norm, m.ln_gain, m.ln_bias, LN_EPS)
        }
    }
}

/// Layers that receive domain adapters. Language adapters, when present,
/// always cover every layer of both sides.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementSpec {
    pub encoder_layers: BTreeSet<usize>,
    pub decoder_layers: BTreeSet<usize>,
}

impl PlacementSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn both(enc_layers: usize, dec_layers: usize) -> Self {
        PlacementSpec {
            encoder_layers: (0..enc_layers).collect(),
            decoder_layers: (0..dec_layers).collect(),
        }
    }

    pub fn encoder_only(enc_layers: usize) -> Self {
        PlacementSpec {
            encoder_layers: (0..enc_layers).collect(),
            decoder_layers: BTreeSet::new(),
        }
    }

    pub fn decoder_only(dec_layers: usize) -> Self {
        PlacementSpec {
            encoder_layers: BTreeSet::new(),
            decoder_layers: (0..dec_layers).collect(),
        }
    }

    /// First `⌈L/2⌉` encoder layers (the first 3 of 6 at full depth).
    pub fn encoder_first_half(enc_layers: usize) -> Self {
        PlacementSpec {
            encoder_layers: (0..enc_layers.div_ceil(2)).collect(),
            decoder_layers: BTreeSet::new(),
        }
    }

    /// Last `⌈L/2⌉` encoder layers (the last 3 of 6 at full depth).
    pub fn encoder_last_half(enc_layers: usize) -> Self {
        PlacementSpec {
            encoder_layers: (enc_layers - enc_layers.div_ceil(2)..enc_layers).collect(),
            decoder_layers: BTreeSet::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.encoder_layers.is_empty() && self.decoder_layers.is_empty()
    }

    pub fn layers(&self, side: Side) -> &BTreeSet<usize> {
        match side {
            Side::Encoder => &self.encoder_layers,
            Side::Decoder => &self.decoder_layers,
        }
    }

    pub fn validate(&self, enc_layers: usize, dec_layers: usize) -> Result<()> {
        let bad_enc = self.encoder_layers.iter().find(|&&l| l >= enc_layers);
        let bad_dec = self.decoder_layers.iter().find(|&&l| l >= dec_layers);
        if let Some(l) = bad_enc.or(bad_dec) {
            return Err(Error::Config(format!(
                "placement layer {l} outside a {enc_layers}+{dec_layers} layer model"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub mode: StackMode,
    pub placement: PlacementSpec,
    /// Training-time probability of skipping the domain adapter at a layer.
    pub dadrop_p: f64,
}

impl StackConfig {
    pub fn validate(&self, enc_layers: usize, dec_layers: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.dadrop_p) {
            return Err(Error::Config(format!("dadrop_p {} outside [0, 1)", self.dadrop_p)));
        }
        self.placement.validate(enc_layers, dec_layers)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct AdapterKey {
    kind: AdapterKind,
    owner: String,
    side: Side,
    layer: usize,
}

/// Every adapter installed in a model, keyed by (kind, owner, side, layer).
#[derive(Clone, Debug, Default)]
pub struct AdapterBank {
    layers: BTreeMap<AdapterKey, AdapterLayer>,
}

impl AdapterBank {
    pub fn insert(&mut self, a: AdapterLayer) -> Result<()> {
        let key = AdapterKey {
            kind: a.kind,
            owner: a.owner.clone(),
            side: a.side,
            layer: a.layer,
        };
        if self.layers.contains_key(&key) {
            return Err(Error::Config(format!(
                "adapter {} {} layer {} installed twice",
                a.group(),
                a.side,
                a.layer
            )));
        }
        self.layers.insert(key, a);
        Ok(())
    }

    pub fn get(&self, kind: AdapterKind, owner: &str, side: Side, layer: usize) -> Option<&AdapterLayer> {
        self.layers.get(&AdapterKey {
            kind,
            owner: owner.to_string(),
            side,
            layer,
        })
    }

    /// Like [`AdapterBank::get`] but a missing adapter is a routing error.
    pub fn require(&self, kind: AdapterKind, owner: &str, side: Side, layer: usize) -> Result<&AdapterLayer> {
        self.get(kind, owner, side, layer).ok_or_else(|| {
            Error::Routing(format!(
                "plan uses {} at {side} layer {layer}, which is not installed",
                kind.group(owner)
            ))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdapterLayer> {
        self.layers.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut AdapterLayer> {
        self.layers.values_mut()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Owners of the given kind that have at least one layer installed.
    pub fn owners(&self, kind: AdapterKind) -> BTreeSet<String> {
        self.layers
            .keys()
            .filter(|k| k.kind == kind)
            .map(|k| k.owner.clone())
            .collect()
    }
}
