//! Route-to-adapter activation plans and homogeneous batch streams.

mod batches;

pub use batches::{sample_direction, sampling_probabilities, Batch, BatchSource, BatchStream, MixedStream};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBank, AdapterKind, Side, StackConfig, StackMode};
use crate::corpus::{Vocab, BOS, EOS};
use crate::error::{Error, Result};

/// One translation request: direction plus optional domain.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Route {
    pub src: String,
    pub tgt: String,
    pub domain: Option<String>,
}

impl Route {
    pub fn new(src: &str, tgt: &str, domain: Option<&str>) -> Self {
        Route {
            src: src.to_string(),
            tgt: tgt.to_string(),
            domain: domain.map(str::to_string),
        }
    }

    pub fn with_domain(&self, domain: Option<&str>) -> Self {
        Route::new(&self.src, &self.tgt, domain)
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)?;
        if let Some(d) = &self.domain {
            write!(f, "@{d}")?;
        }
        Ok(())
    }
}

/// Every ordered pair of distinct languages, source-major.
pub fn route_grid(languages: &[String], domain: Option<&str>) -> Vec<Route> {
    let mut out = Vec::new();
    for s in languages {
        for t in languages {
            if s != t {
                out.push(Route::new(s, t, domain));
            }
        }
    }
    out
}

/// Adapters active after one transformer layer, applied LA first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStack {
    pub language: Option<String>,
    pub domain: Option<String>,
}

/// Everything the model needs to run one route.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationPlan {
    pub encoder: Vec<LayerStack>,
    pub decoder: Vec<LayerStack>,
    /// Domain tag prepended to every source sentence.
    pub tag_token: Option<u32>,
    /// First decoder input; the target-language token for routed plans.
    pub decoder_start: u32,
    pub mode: StackMode,
    pub dadrop_p: f64,
}

impl ActivationPlan {
    /// No adapters, no tag, `<s>` as decoder start.
    pub fn bare(enc_layers: usize, dec_layers: usize) -> Self {
        ActivationPlan {
            encoder: vec![LayerStack::default(); enc_layers],
            decoder: vec![LayerStack::default(); dec_layers],
            tag_token: None,
            decoder_start: BOS,
            mode: StackMode::default(),
            dadrop_p: 0.0,
        }
    }

    pub fn stack(&self, side: Side, layer: usize) -> &LayerStack {
        match side {
            Side::Encoder => &self.encoder[layer],
            Side::Decoder => &self.decoder[layer],
        }
    }

    pub fn check_shape(&self, enc_layers: usize, dec_layers: usize) -> Result<()> {
        if self.encoder.len() != enc_layers || self.decoder.len() != dec_layers {
            return Err(Error::Routing(format!(
                "plan covers {}+{} layers, model has {enc_layers}+{dec_layers}",
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        Ok(())
    }

    /// `[tag] + src + [</s>]`.
    pub fn source_ids(&self, src: &[u32]) -> Vec<u32> {
        let mut v = Vec::with_capacity(src.len() + 2);
        v.extend(self.tag_token);
        v.extend_from_slice(src);
        v.push(EOS);
        v
    }

    /// `[start] + tgt`.
    pub fn decoder_input(&self, tgt: &[u32]) -> Vec<u32> {
        let mut v = Vec::with_capacity(tgt.len() + 1);
        v.push(self.decoder_start);
        v.extend_from_slice(tgt);
        v
    }

    /// `tgt + [</s>]`.
    pub fn decoder_target(&self, tgt: &[u32]) -> Vec<u32> {
        let mut v = Vec::with_capacity(tgt.len() + 1);
        v.extend_from_slice(tgt);
        v.push(EOS);
        v
    }

    /// Every (kind, owner, side, layer) the plan activates.
    pub fn adapters(&self) -> Vec<(AdapterKind, &str, Side, usize)> {
        let mut out = Vec::new();
        for (side, stacks) in [(Side::Encoder, &self.encoder), (Side::Decoder, &self.decoder)] {
            for (l, s) in stacks.iter().enumerate() {
                if let Some(o) = &s.language {
                    out.push((AdapterKind::Language, o.as_str(), side, l));
                }
                if let Some(o) = &s.domain {
                    out.push((AdapterKind::Domain, o.as_str(), side, l));
                }
            }
        }
        out
    }

    pub fn verify_installed(&self, bank: &AdapterBank) -> Result<()> {
        for (kind, owner, side, l) in self.adapters() {
            bank.require(kind, owner, side, l)?;
        }
        Ok(())
    }
}

/// Experiment-level routing choices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingSetup {
    /// Activate the source LA in the encoder and the target LA in the decoder.
    pub language_adapters: bool,
    /// Route every language through this one adapter owner instead.
    pub shared_adapter: Option<String>,
    /// Domain adapter placement and stacking; `None` means no DAs.
    pub domain_adapters: Option<StackConfig>,
    /// Domains that own adapters. Routes of other domains (e.g. the general
    /// corpus mixed in during training) run without a DA.
    pub adapter_domains: BTreeSet<String>,
    /// Prefix the domain tag instead of routing through DAs.
    pub tag_mode: bool,
    /// Languages with in-domain training data.
    pub in_domain_languages: BTreeSet<String>,
    /// Skip a DA on any side whose language had no in-domain data, so no
    /// plan composes a DA with an LA it never saw during training.
    pub unseen_guard: bool,
}

impl RoutingSetup {
    pub fn validate(&self, enc_layers: usize, dec_layers: usize) -> Result<()> {
        if let Some(s) = &self.domain_adapters {
            s.validate(enc_layers, dec_layers)?;
            if self.tag_mode {
                return Err(Error::Config("tag mode and domain adapters are exclusive".into()));
            }
        }
        if self.shared_adapter.is_some() && self.language_adapters {
            return Err(Error::Config("a shared adapter replaces language adapters; enable only one".into()));
        }
        Ok(())
    }
}

/// Resolves a route into the adapters, tag and decoder start it uses.
///
/// The plan is checked against `bank`, so a route that needs an adapter the
/// model does not have is a routing error rather than a silent pass-through.
pub fn plan_activation(
    route: &Route,
    setup: &RoutingSetup,
    vocab: &Vocab,
    bank: &AdapterBank,
    enc_layers: usize,
    dec_layers: usize,
) -> Result<ActivationPlan> {
    setup.validate(enc_layers, dec_layers)?;
    vocab.lang_index(&route.src)?;
    let mut plan = ActivationPlan::bare(enc_layers, dec_layers);
    plan.decoder_start = vocab.lang_token(&route.tgt)?;
    if let Some(d) = &route.domain {
        vocab.domain_index(d)?;
    }
    if let Some(owner) = &setup.shared_adapter {
        for s in plan.encoder.iter_mut().chain(plan.decoder.iter_mut()) {
            s.language = Some(owner.clone());
        }
    } else if setup.language_adapters {
        for s in &mut plan.encoder {
            s.language = Some(route.src.clone());
        }
        for s in &mut plan.decoder {
            s.language = Some(route.tgt.clone());
        }
    }
    if setup.tag_mode {
        if let Some(d) = &route.domain {
            plan.tag_token = Some(vocab.domain_tag(d)?);
        }
    } else if let (Some(cfg), Some(d)) = (&setup.domain_adapters, &route.domain) {
        if setup.adapter_domains.contains(d) {
            plan.mode = cfg.mode;
            plan.dadrop_p = cfg.dadrop_p;
            let seen = |lang: &str| !setup.unseen_guard || setup.in_domain_languages.contains(lang);
            if seen(&route.src) {
                for &l in &cfg.placement.encoder_layers {
                    plan.encoder[l].domain = Some(d.clone());
                }
            }
            if seen(&route.tgt) {
                for &l in &cfg.placement.decoder_layers {
                    plan.decoder[l].domain = Some(d.clone());
                }
            }
        }
    }
    plan.verify_installed(bank)?;
    Ok(plan)
}
