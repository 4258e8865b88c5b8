//! Named experiments covering the model matrix: baselines, oracles, tag
//! models, stacked adapters and their appendix variants.

use serde::{Deserialize, Serialize};

use super::{
    AdapterInstall, BackTranslationSpec, DataPlan, DenoisingSpec, Directions, DomainData, DomainRouting, EvalPlan,
    Experiment, LanguageSet, MixSpec, Owners, Placement, RoutingPlan,
};
use crate::adapters::{AdapterKind, StackMode};
use crate::corpus::Noise;
use crate::evaluation::BeamConfig;
use crate::training::{Phase, Schedule, TrainConfig};
use crate::transformer::ModelConfig;

/// General-domain corpus used for pretraining and language adapters.
pub const GENERAL: &str = "paracrawl";
/// Domain the adaptation presets train and report on.
pub const TARGET_DOMAIN: &str = "medical";
pub const DOMAINS: [&str; 4] = ["koran", "medical", "it", "ted"];
pub const IN_DOMAIN: [&str; 4] = ["en", "fr", "de", "cs"];
/// d = 1024 at width 512.
const ADAPTER_RATIO: f64 = 2.0;
const DADROP_P: f64 = 0.2;
const BT_BEAM: usize = 5;
const MIX_P: f64 = 0.5;
const SHARED_OWNER: &str = "shared";

/// Update counts and rates used at desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskBudget {
    pub pretrain_updates: usize,
    pub language_adapter_updates: usize,
    pub adapter_updates: usize,
    pub finetune_updates: usize,
    pub eval_every: usize,
    /// Fixed rate of every adapter phase.
    pub adapter_lr: f64,
    /// Fixed rate when the whole model is fine-tuned.
    pub finetune_lr: f64,
}

impl Default for DeskBudget {
    fn default() -> Self {
        DeskBudget {
            pretrain_updates: 4000,
            language_adapter_updates: 2000,
            adapter_updates: 1500,
            finetune_updates: 1500,
            eval_every: 250,
            adapter_lr: 1e-3,
            finetune_lr: 3e-4,
        }
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn source(domain: &str, languages: LanguageSet) -> DomainData {
    DomainData {
        domain: domain.into(),
        languages,
    }
}

fn data(sources: Vec<DomainData>, directions: Directions) -> DataPlan {
    DataPlan {
        sources,
        directions,
        mix: None,
        back_translation: None,
        denoising: None,
    }
}

fn eval(domains: &[&str]) -> EvalPlan {
    EvalPlan {
        domains: strings(domains),
        grouping: LanguageSet::InDomain,
        beam: BeamConfig::default(),
    }
}

fn la_install(ratio: f64) -> AdapterInstall {
    AdapterInstall {
        kind: AdapterKind::Language,
        owners: Owners::AllLanguages,
        placement: Placement::Both,
        bottleneck_ratio: ratio,
    }
}

fn da_install(domains: &[&str], placement: Placement) -> AdapterInstall {
    AdapterInstall {
        kind: AdapterKind::Domain,
        owners: Owners::Named(strings(domains)),
        placement,
        bottleneck_ratio: ADAPTER_RATIO,
    }
}

fn da_routing(domains: &[&str], placement: Placement, mode: StackMode, dadrop_p: f64) -> DomainRouting {
    DomainRouting {
        placement,
        mode,
        dadrop_p,
        domains: strings(domains),
    }
}

fn training(phase: Phase, groups: &[&str], updates: usize, b: &DeskBudget) -> TrainConfig {
    let mut t = TrainConfig::new(phase, groups);
    t.max_updates = updates;
    t.eval_every = b.eval_every;
    match phase {
        Phase::Pretrain => t.eval_every = b.eval_every * 2,
        Phase::LanguageAdapters | Phase::DomainAdapters => t.schedule = Schedule::Fixed { lr: b.adapter_lr },
        Phase::Finetune | Phase::Tags => t.schedule = Schedule::Fixed { lr: b.finetune_lr },
    }
    t
}

fn skeleton(id: &str, description: &str, parent: Option<&str>) -> Experiment {
    Experiment {
        id: id.into(),
        description: description.into(),
        parent: parent.map(str::to_string),
        model: None,
        domain: TARGET_DOMAIN.into(),
        in_domain: strings(&IN_DOMAIN),
        data: data(vec![source(TARGET_DOMAIN, LanguageSet::InDomain)], Directions::All),
        install: Vec::new(),
        routing: RoutingPlan::default(),
        train: TrainConfig::new(Phase::DomainAdapters, &[]),
        eval: eval(&[TARGET_DOMAIN]),
    }
}

/// Options of the adapters-on-paracrawl-LA family.
#[derive(Clone, Copy, Default)]
struct Adapt {
    placement: Option<Placement>,
    unfreeze_la: bool,
    dadrop: bool,
    bt: bool,
    madx: bool,
    mono: bool,
}

fn adapt(id: &str, description: &str, o: Adapt, b: &DeskBudget) -> Experiment {
    let mut e = skeleton(id, description, Some(super::BASELINE_ID));
    e.routing.language_adapters = true;
    let mut groups = Vec::new();
    if let Some(p) = o.placement {
        e.install.push(da_install(&[TARGET_DOMAIN], p));
        let mode = if o.madx { StackMode::MadX } else { StackMode::SerialNewLn };
        let p_drop = if o.dadrop { DADROP_P } else { 0.0 };
        e.routing.domain_adapters = Some(da_routing(&[TARGET_DOMAIN], p, mode, p_drop));
        groups.push("da:medical");
    }
    if o.unfreeze_la {
        groups.push("la:*");
    }
    if o.bt {
        e.data.back_translation = Some(BackTranslationSpec {
            model: super::BASELINE_ID.into(),
            beam: BT_BEAM,
        });
    }
    if o.mono {
        e.data.denoising = Some(DenoisingSpec {
            noise: Noise::None,
            rate: 0.0,
        });
    }
    let phase = if o.placement.is_some() {
        Phase::DomainAdapters
    } else {
        Phase::LanguageAdapters
    };
    e.train = training(phase, &groups, b.adapter_updates, b);
    // uniform over the in-domain directions
    e.train.temperature = f64::INFINITY;
    e
}

/// Every preset, in matrix order.
pub fn presets(shape: &ModelConfig, b: &DeskBudget) -> Vec<Experiment> {
    let mut v = Vec::new();

    // Pretraining and language adapters.
    let mut base = skeleton("base", "English-centric model trained on the general corpus", None);
    base.model = Some(shape.clone());
    base.data = data(vec![source(GENERAL, LanguageSet::All)], Directions::EnglishCentric);
    base.train = training(Phase::Pretrain, &["base"], b.pretrain_updates, b);
    v.push(base);

    let mut la = skeleton(
        "paracrawl-la",
        "base + language adapters trained on the multiparallel general corpus",
        Some("base"),
    );
    la.data = data(vec![source(GENERAL, LanguageSet::All)], Directions::All);
    la.install.push(la_install(ADAPTER_RATIO));
    la.routing.language_adapters = true;
    la.train = training(Phase::LanguageAdapters, &["la:*"], b.language_adapter_updates, b);
    v.push(la);

    // Oracles with in-domain data for every language.
    let mut ft = skeleton("finetune-all-langs", "base fine-tuned on the target domain, all directions", Some("base"));
    ft.data = data(vec![source(TARGET_DOMAIN, LanguageSet::All)], Directions::All);
    ft.train = training(Phase::Finetune, &["base"], b.finetune_updates, b);
    v.push(ft);

    let all_domains = || DOMAINS.iter().map(|d| source(d, LanguageSet::All)).collect::<Vec<_>>();

    let mut ftd = skeleton("finetune-all-domains", "base fine-tuned on all domains and directions", Some("base"));
    ftd.data = data(all_domains(), Directions::All);
    ftd.train = training(Phase::Finetune, &["base"], b.finetune_updates, b);
    ftd.eval = eval(&DOMAINS);
    v.push(ftd);

    let mut tags_all = skeleton(
        "tags-all",
        "base fine-tuned on all domains and directions with domain tags",
        Some("base"),
    );
    tags_all.data = data(all_domains(), Directions::All);
    tags_all.routing.tag_mode = true;
    tags_all.train = training(Phase::Tags, &["base"], b.finetune_updates, b);
    tags_all.eval = eval(&DOMAINS);
    v.push(tags_all);

    // Multi-domain adapters trained on every direction.
    let mut single = skeleton("single-adapter", "one adapter per layer shared by all languages and domains", Some("base"));
    single.data = data(all_domains(), Directions::All);
    single.install.push(AdapterInstall {
        owners: Owners::Named(vec![SHARED_OWNER.into()]),
        ..la_install(ADAPTER_RATIO)
    });
    single.routing.shared_adapter = Some(SHARED_OWNER.into());
    single.train = training(Phase::LanguageAdapters, &["la:shared"], b.adapter_updates, b);
    single.eval = eval(&DOMAINS);
    v.push(single);

    for (id, ratio, what) in [
        ("multi-la", 1365.0 / 512.0, "language adapters (d=1365) on all domains"),
        ("multi-la-2048", 4.0, "language adapters (d=2048) on all domains"),
    ] {
        let mut e = skeleton(id, what, Some("base"));
        e.data = data(all_domains(), Directions::All);
        e.install.push(la_install(ratio));
        e.routing.language_adapters = true;
        e.train = training(Phase::LanguageAdapters, &["la:*"], b.adapter_updates, b);
        e.eval = eval(&DOMAINS);
        v.push(e);
    }
    for (id, p, what) in [
        ("multi-la+dec-da", Placement::Decoder, "language + decoder domain adapters on all domains"),
        ("multi-la+enc-da", Placement::Encoder, "language + encoder domain adapters on all domains"),
        ("multi-la+encdec-da", Placement::Both, "language + encoder/decoder domain adapters on all domains"),
    ] {
        let mut e = skeleton(id, what, Some("base"));
        e.data = data(all_domains(), Directions::All);
        e.install.push(la_install(ADAPTER_RATIO));
        e.install.push(da_install(&DOMAINS, p));
        e.routing.language_adapters = true;
        e.routing.domain_adapters = Some(da_routing(&DOMAINS, p, StackMode::SerialNewLn, 0.0));
        e.train = training(Phase::DomainAdapters, &["la:*", "da:*"], b.adapter_updates, b);
        e.eval = eval(&DOMAINS);
        v.push(e);
    }

    // Cross-lingual transfer: in-domain data for four languages only.
    let mut da_only = skeleton("da-only", "base + domain adapters without language adapters", Some("base"));
    da_only.install.push(da_install(&[TARGET_DOMAIN], Placement::Both));
    da_only.routing.domain_adapters = Some(da_routing(&[TARGET_DOMAIN], Placement::Both, StackMode::SerialNewLn, 0.0));
    da_only.train = training(Phase::DomainAdapters, &["da:medical"], b.adapter_updates, b);
    da_only.train.temperature = f64::INFINITY;
    v.push(da_only);

    let tag_sources = || DOMAINS.iter().map(|d| source(d, LanguageSet::InDomain)).collect::<Vec<_>>();
    let mut tags = skeleton("tags", "base fine-tuned with domain tags on all domains, in-domain languages", Some("base"));
    tags.data = data(tag_sources(), Directions::All);
    tags.routing.tag_mode = true;
    tags.train = training(Phase::Tags, &["base"], b.finetune_updates, b);
    v.push(tags);

    let mut tags_pc = skeleton(
        "tags+paracrawl",
        "tags + general corpus mixed in with its own tag",
        Some("base"),
    );
    tags_pc.data = data(tag_sources(), Directions::All);
    tags_pc.data.mix = Some(MixSpec {
        domain: GENERAL.into(),
        p: MIX_P,
    });
    tags_pc.routing.tag_mode = true;
    tags_pc.train = training(Phase::Tags, &["base"], b.finetune_updates, b);
    v.push(tags_pc);

    let d = |p| Adapt {
        placement: Some(p),
        ..Adapt::default()
    };
    let rows: Vec<(&str, &str, Adapt)> = vec![
        ("freeze-la+encdec-da", "frozen LA + encoder and decoder DA", d(Placement::Both)),
        ("freeze-la+enc-da", "frozen LA + encoder DA", d(Placement::Encoder)),
        ("freeze-la+dec-da", "frozen LA + decoder DA", d(Placement::Decoder)),
        ("freeze-la+encdec-da+bt", "frozen LA + encoder and decoder DA + BT", Adapt { bt: true, ..d(Placement::Both) }),
        ("freeze-la+enc-da+bt", "frozen LA + encoder DA + BT", Adapt { bt: true, ..d(Placement::Encoder) }),
        ("freeze-la+dec-da+bt", "frozen LA + decoder DA + BT", Adapt { bt: true, ..d(Placement::Decoder) }),
        (
            "freeze-la+encdec-da+dadrop",
            "frozen LA + encoder and decoder DA + DADrop",
            Adapt { dadrop: true, ..d(Placement::Both) },
        ),
        (
            "freeze-la+encdec-da+dadrop+bt",
            "frozen LA + encoder and decoder DA + DADrop + BT",
            Adapt { dadrop: true, bt: true, ..d(Placement::Both) },
        ),
        (
            "freeze-la+dec-da+dadrop+bt",
            "frozen LA + decoder DA + DADrop + BT",
            Adapt { dadrop: true, bt: true, ..d(Placement::Decoder) },
        ),
        (
            "freeze-la+enc-da+dadrop+bt",
            "frozen LA + encoder DA + DADrop + BT",
            Adapt { dadrop: true, bt: true, ..d(Placement::Encoder) },
        ),
        ("unfreeze-la+dec-da", "trainable LA + decoder DA", Adapt { unfreeze_la: true, ..d(Placement::Decoder) }),
        (
            "unfreeze-la+dec-da+dadrop",
            "trainable LA + decoder DA + DADrop",
            Adapt { unfreeze_la: true, dadrop: true, ..d(Placement::Decoder) },
        ),
        (
            "unfreeze-la+dec-da+dadrop+bt",
            "trainable LA + decoder DA + DADrop + BT",
            Adapt { unfreeze_la: true, dadrop: true, bt: true, ..d(Placement::Decoder) },
        ),
        ("unfreeze-la", "LA fine-tuned on in-domain data", Adapt { unfreeze_la: true, ..Adapt::default() }),
        ("unfreeze-la+bt", "LA fine-tuned on in-domain data + BT", Adapt { unfreeze_la: true, bt: true, ..Adapt::default() }),
        ("enc-first-half-da", "frozen LA + DA in the first half of the encoder", d(Placement::EncoderFirstHalf)),
        ("enc-last-half-da", "frozen LA + DA in the last half of the encoder", d(Placement::EncoderLastHalf)),
        (
            "madx-stack",
            "frozen LA + encoder and decoder DA + BT, MAD-X stacking",
            Adapt { bt: true, madx: true, ..d(Placement::Both) },
        ),
        (
            "freeze-la+dec-da+mono",
            "frozen LA + decoder DA + copied out-of-domain text",
            Adapt { mono: true, ..d(Placement::Decoder) },
        ),
        (
            "freeze-la+enc-da+mono",
            "frozen LA + encoder DA + copied out-of-domain text",
            Adapt { mono: true, ..d(Placement::Encoder) },
        ),
    ];
    for (id, what, o) in rows {
        v.push(adapt(id, what, o, b));
    }

    // Joint multi-domain training with a partial target domain.
    for (id, p) in [
        ("multi-domain-joint", Placement::Both),
        ("multi-domain-joint+enc-da", Placement::Encoder),
        ("multi-domain-joint+dec-da", Placement::Decoder),
    ] {
        let mut e = skeleton(
            id,
            "LA + DA trained jointly on all directions of the other domains and the in-domain subset of the target",
            Some("base"),
        );
        let mut sources: Vec<DomainData> = DOMAINS
            .iter()
            .filter(|d| **d != TARGET_DOMAIN)
            .map(|d| source(d, LanguageSet::All))
            .collect();
        sources.push(source(TARGET_DOMAIN, LanguageSet::InDomain));
        e.data = data(sources, Directions::All);
        e.install.push(la_install(ADAPTER_RATIO));
        e.install.push(da_install(&DOMAINS, p));
        e.routing.language_adapters = true;
        e.routing.domain_adapters = Some(da_routing(&DOMAINS, p, StackMode::SerialNewLn, 0.0));
        e.train = training(Phase::DomainAdapters, &["la:*", "da:*"], b.adapter_updates, b);
        v.push(e);
    }
    v
}

pub fn preset_ids() -> Vec<String> {
    presets(&ModelConfig::desk(0), &DeskBudget::default())
        .into_iter()
        .map(|e| e.id)
        .collect()
}

pub fn preset(id: &str, shape: &ModelConfig, budget: &DeskBudget) -> Option<Experiment> {
    presets(shape, budget).into_iter().find(|e| e.id == id)
}
