//! Experiment definitions and the staged run that trains, checkpoints and
//! evaluates one of them.
//!
//! Every experiment starts either from a fresh model or from the checkpoint
//! of a parent experiment in the same output directory. A missing parent is
//! reported, never retrained on the fly.

mod presets;

pub use presets::{preset, preset_ids, presets, DeskBudget, DOMAINS, GENERAL, IN_DOMAIN, TARGET_DOMAIN};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    count_adapter_budget, AdapterKind, DeploymentSpec, PlacementSpec, StackConfig, StackMode,
};
use crate::corpus::{
    back_translate, make_denoising_pairs, read_pairs, write_pairs, Noise, Pair, ParallelCorpus, Split, SplitSet,
    Synthetic, World, PIVOT_LANG,
};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, heatmap_csv, score_routes, BeamConfig, EvalReport, ModelTranslator};
use crate::routing::{route_grid, Route, RoutingSetup};
use crate::tensor::GroupPattern;
use crate::training::{train, TrainConfig, TrainData, TrainOutcome};
use crate::transformer::{checkpoint, CheckpointMeta, ModelConfig, Seq2Seq, BASE_GROUP};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const TRAIN_LOG_FILE: &str = "train.jsonl";
/// Experiment whose reports serve as the delta baseline when present.
pub const BASELINE_ID: &str = "paracrawl-la";

pub fn report_file(domain: &str) -> String {
    format!("report-{domain}.json")
}

pub fn heatmap_file(domain: &str) -> String {
    format!("heatmap-{domain}.csv")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LanguageSet {
    All,
    InDomain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Directions {
    /// en→ℓ and ℓ→en only.
    EnglishCentric,
    /// Every ordered pair of distinct languages.
    All,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainData {
    pub domain: String,
    pub languages: LanguageSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    /// Corpus drawn from; every direction of every language.
    pub domain: String,
    /// Per-batch probability of drawing from it.
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackTranslationSpec {
    /// Experiment whose checkpoint translates into English.
    pub model: String,
    pub beam: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoisingSpec {
    pub noise: Noise,
    pub rate: f64,
}

/// Training text. Back-translation and denoising copies are built from
/// the adaptation domain's training side of every out-of-domain language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPlan {
    pub sources: Vec<DomainData>,
    pub directions: Directions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<MixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub back_translation: Option<BackTranslationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoising: Option<DenoisingSpec>,
}

/// Layers covered by an adapter set, independent of model depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    Both,
    Encoder,
    Decoder,
    EncoderFirstHalf,
    EncoderLastHalf,
}

impl Placement {
    pub fn spec(self, enc_layers: usize, dec_layers: usize) -> PlacementSpec {
        match self {
            Placement::Both => PlacementSpec::both(enc_layers, dec_layers),
            Placement::Encoder => PlacementSpec::encoder_only(enc_layers),
            Placement::Decoder => PlacementSpec::decoder_only(dec_layers),
            Placement::EncoderFirstHalf => PlacementSpec::encoder_first_half(enc_layers),
            Placement::EncoderLastHalf => PlacementSpec::encoder_last_half(enc_layers),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Owners {
    AllLanguages,
    Named(Vec<String>),
}

/// Adapters an experiment adds on top of its parent's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterInstall {
    pub kind: AdapterKind,
    pub owners: Owners,
    pub placement: Placement,
    /// Bottleneck width over model width; 2.0 is d=1024 at width 512.
    pub bottleneck_ratio: f64,
}

impl AdapterInstall {
    pub fn bottleneck(&self, d_model: usize) -> usize {
        ((self.bottleneck_ratio * d_model as f64).round() as usize).max(1)
    }

    pub fn owner_list(&self, languages: &[String]) -> Vec<String> {
        match &self.owners {
            Owners::AllLanguages => languages.to_vec(),
            Owners::Named(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRouting {
    pub placement: Placement,
    pub mode: StackMode,
    pub dadrop_p: f64,
    /// Domains that own adapters.
    pub domains: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingPlan {
    pub language_adapters: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shared_adapter: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_adapters: Option<DomainRouting>,
    pub tag_mode: bool,
    pub unseen_guard: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub domains: Vec<String>,
    /// Languages counted as in-domain when grouping routes.
    pub grouping: LanguageSet,
    pub beam: BeamConfig,
}

/// One trainable, evaluable configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: String,
    pub description: String,
    /// Experiment whose checkpoint this one starts from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Shape of a fresh model; the vocabulary size is taken from the corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    /// Domain being adapted to.
    pub domain: String,
    /// Languages with parallel data in that domain.
    pub in_domain: Vec<String>,
    pub data: DataPlan,
    #[serde(default)]
    pub install: Vec<AdapterInstall>,
    pub routing: RoutingPlan,
    pub train: TrainConfig,
    pub eval: EvalPlan,
}

impl Experiment {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("experiment file: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize experiment: {e}")))
    }

    pub fn routing_setup(&self, enc_layers: usize, dec_layers: usize) -> RoutingSetup {
        let r = &self.routing;
        RoutingSetup {
            language_adapters: r.language_adapters,
            shared_adapter: r.shared_adapter.clone(),
            domain_adapters: r.domain_adapters.as_ref().map(|d| StackConfig {
                mode: d.mode,
                placement: d.placement.spec(enc_layers, dec_layers),
                dadrop_p: d.dadrop_p,
            }),
            adapter_domains: r
                .domain_adapters
                .as_ref()
                .map(|d| d.domains.iter().cloned().collect())
                .unwrap_or_default(),
            tag_mode: r.tag_mode,
            in_domain_languages: self.in_domain.iter().cloned().collect(),
            unseen_guard: r.unseen_guard,
        }
    }

    pub fn languages(&self, set: LanguageSet, all: &[String]) -> Vec<String> {
        match set {
            LanguageSet::All => all.to_vec(),
            LanguageSet::InDomain => all.iter().filter(|l| self.in_domain.contains(l)).cloned().collect(),
        }
    }

    /// Languages without data in the adaptation domain, English aside.
    pub fn out_of_domain(&self, all: &[String]) -> Vec<String> {
        all.iter()
            .filter(|l| *l != PIVOT_LANG && !self.in_domain.contains(l))
            .cloned()
            .collect()
    }

    /// Structural checks that need no corpus.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(Error::Config(format!("`{}` is not a usable experiment id", self.id)));
        }
        if self.parent.is_none() == self.model.is_none() {
            return Err(Error::Config(format!(
                "experiment `{}` needs exactly one of a parent or a fresh model shape",
                self.id
            )));
        }
        if self.parent.as_deref() == Some(self.id.as_str()) {
            return Err(Error::Config(format!("experiment `{}` names itself as parent", self.id)));
        }
        if self.data.sources.is_empty() {
            return Err(Error::Config(format!("experiment `{}` has no training data", self.id)));
        }
        if let Some(m) = &self.data.mix {
            if !(0.0..1.0).contains(&m.p) {
                return Err(Error::Config(format!("mixing probability {} outside [0, 1)", m.p)));
            }
        }
        if let Some(bt) = &self.data.back_translation {
            if bt.beam == 0 {
                return Err(Error::Config("back-translation beam must be positive".into()));
            }
        }
        if let Some(d) = &self.data.denoising {
            if !(0.0..1.0).contains(&d.rate) {
                return Err(Error::Config(format!("noise rate {} outside [0, 1)", d.rate)));
            }
        }
        if self.routing.tag_mode && self.routing.domain_adapters.is_some() {
            return Err(Error::Config("tag mode and domain adapters are exclusive".into()));
        }
        if self.eval.domains.is_empty() {
            return Err(Error::Config(format!("experiment `{}` evaluates no domain", self.id)));
        }
        for a in &self.install {
            if !(a.bottleneck_ratio > 0.0) {
                return Err(Error::Config("adapter bottleneck ratio must be positive".into()));
            }
        }
        self.train.validate()
    }

    /// Checks ids against a concrete corpus.
    pub fn validate_against(&self, world: &World) -> Result<()> {
        self.validate()?;
        let langs: BTreeSet<&str> = world.spec.languages.iter().map(String::as_str).collect();
        let domains: BTreeSet<&str> = world.spec.domains.iter().map(|d| d.id.as_str()).collect();
        let check_domain = |d: &str| {
            if domains.contains(d) {
                Ok(())
            } else {
                Err(Error::Config(format!("experiment `{}` names unknown domain `{d}`", self.id)))
            }
        };
        check_domain(&self.domain)?;
        for l in &self.in_domain {
            if !langs.contains(l.as_str()) {
                return Err(Error::Config(format!("in-domain language `{l}` is not in the corpus")));
            }
        }
        for s in &self.data.sources {
            check_domain(&s.domain)?;
        }
        if let Some(m) = &self.data.mix {
            check_domain(&m.domain)?;
        }
        for d in &self.eval.domains {
            check_domain(d)?;
        }
        if let Some(dr) = &self.routing.domain_adapters {
            for d in &dr.domains {
                check_domain(d)?;
            }
        }
        Ok(())
    }
}

/// Ordered (src, tgt) directions over `langs`.
pub fn directions(langs: &[String], kind: Directions) -> Vec<(String, String)> {
    match kind {
        Directions::All => route_grid(langs, None).into_iter().map(|r| (r.src, r.tgt)).collect(),
        Directions::EnglishCentric => langs
            .iter()
            .filter(|l| *l != PIVOT_LANG)
            .flat_map(|l| [(PIVOT_LANG.to_string(), l.clone()), (l.clone(), PIVOT_LANG.to_string())])
            .collect(),
    }
}

pub fn stage_dir(out: &Path, id: &str) -> PathBuf {
    out.join(id)
}

/// Knobs of a single run that are not part of the experiment itself.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: u64,
    pub evaluate: bool,
    /// Route-parallel evaluation workers.
    pub threads: usize,
    /// Write the per-step JSONL training log.
    pub log_training: bool,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        RunOptions {
            seed,
            evaluate: true,
            threads: 1,
            log_training: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub training: TrainOutcome,
    pub reports: Vec<EvalReport>,
}

fn salt(seed: u64, id: &str) -> u64 {
    seed ^ crate::corpus::world_hash(id)
}

/// Loads the parent's checkpoint and experiment, refusing anything that was
/// not produced for this seed.
pub fn load_stage(out: &Path, id: &str, seed: u64) -> Result<(Seq2Seq<f32>, CheckpointMeta, Experiment)> {
    let dir = stage_dir(out, id);
    let ckpt = dir.join(CHECKPOINT_FILE);
    if !ckpt.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no checkpoint for `{id}` at {}; run that experiment first",
            ckpt.display()
        )));
    }
    let (model, meta) = checkpoint::load(&ckpt)?;
    if meta.seed != seed {
        return Err(Error::MissingPrerequisite(format!(
            "checkpoint for `{id}` was trained with seed {}, not {seed}",
            meta.seed
        )));
    }
    let text = fs::read_to_string(dir.join(EXPERIMENT_FILE))
        .map_err(|e| Error::MissingPrerequisite(format!("experiment file for `{id}`: {e}")))?;
    Ok((model, meta, Experiment::from_toml(&text)?))
}

fn corpora(
    splits: &SplitSet,
    domain: &str,
    split: Split,
    dirs: &[(String, String)],
) -> Result<Vec<ParallelCorpus>> {
    let d = splits.domain(domain)?;
    dirs.iter().map(|(s, t)| d.route_corpus(split, s, t)).collect()
}

/// Back-translated pairs for every out-of-domain language, cached next to
/// the translating model's checkpoint.
fn back_translation(
    exp: &Experiment,
    spec: &BackTranslationSpec,
    world: &World,
    splits: &SplitSet,
    out: &Path,
    seed: u64,
) -> Result<Vec<ParallelCorpus>> {
    let cache = stage_dir(out, &spec.model).join("bt").join(&exp.domain);
    let mut loaded: Option<(Seq2Seq<f32>, RoutingSetup)> = None;
    let data = splits.domain(&exp.domain)?;
    let mut corpora = Vec::new();
    for lang in exp.out_of_domain(&world.spec.languages) {
        let file = cache.join(format!("{lang}.beam{}.tsv", spec.beam));
        let from_lang: Vec<Pair> = if file.exists() {
            read_pairs(&file, &world.vocab)?
        } else {
            if loaded.is_none() {
                let (model, _, bt_exp) = load_stage(out, &spec.model, seed)?;
                let c = model.config();
                let setup = bt_exp.routing_setup(c.enc_layers, c.dec_layers);
                loaded = Some((model, setup));
            }
            let (model, setup) = loaded.as_ref().unwrap();
            let translator = ModelTranslator {
                model,
                setup,
                vocab: &world.vocab,
                beam: BeamConfig {
                    beam: spec.beam,
                    ..BeamConfig::default()
                },
            };
            let mono = data.monolingual(Split::Train, &lang)?;
            let bt = back_translate(&translator, &mono, &lang, &exp.domain)?;
            fs::create_dir_all(&cache)?;
            write_pairs(&file, &world.vocab, &bt.from_lang.pairs)?;
            bt.from_lang.pairs
        };
        let into: Vec<Pair> = from_lang
            .iter()
            .map(|p| Pair {
                pivot_id: p.pivot_id,
                src: p.tgt.clone(),
                tgt: p.src.clone(),
                synthetic: Synthetic::Source,
            })
            .collect();
        let from: Vec<Pair> = from_lang
            .into_iter()
            .map(|p| Pair {
                synthetic: Synthetic::Target,
                ..p
            })
            .collect();
        corpora.push(ParallelCorpus {
            route: Route::new(PIVOT_LANG, &lang, Some(&exp.domain)),
            pairs: into,
        });
        corpora.push(ParallelCorpus {
            route: Route::new(&lang, PIVOT_LANG, Some(&exp.domain)),
            pairs: from,
        });
    }
    Ok(corpora)
}

/// Training and validation streams for an experiment.
pub fn build_train_data(
    exp: &Experiment,
    world: &World,
    splits: &SplitSet,
    out: &Path,
    seed: u64,
) -> Result<TrainData> {
    let all = &world.spec.languages;
    let mut data = TrainData::default();
    for src in &exp.data.sources {
        let dirs = directions(&exp.languages(src.languages, all), exp.data.directions);
        data.train.extend(corpora(splits, &src.domain, Split::Train, &dirs)?);
        data.valid.extend(corpora(splits, &src.domain, Split::Valid, &dirs)?);
    }
    if let Some(bt) = &exp.data.back_translation {
        data.train.extend(back_translation(exp, bt, world, splits, out, seed)?);
    }
    if let Some(dn) = &exp.data.denoising {
        let mut rng = ChaCha8Rng::seed_from_u64(salt(seed, "denoising"));
        let d = splits.domain(&exp.domain)?;
        for lang in exp.out_of_domain(all) {
            let mono = d.monolingual(Split::Train, &lang)?;
            data.train
                .push(make_denoising_pairs(&mono, &lang, Some(&exp.domain), dn.noise, dn.rate, &mut rng)?);
        }
    }
    if let Some(m) = &exp.data.mix {
        let dirs = directions(all, Directions::All);
        data.extra = Some((corpora(splits, &m.domain, Split::Train, &dirs)?, m.p));
    }
    Ok(data)
}

fn install(model: &mut Seq2Seq<f32>, exp: &Experiment, languages: &[String], seed: u64) -> Result<()> {
    let (enc, dec, width) = {
        let c = model.config();
        (c.enc_layers, c.dec_layers, c.d_model)
    };
    for (i, a) in exp.install.iter().enumerate() {
        let p = a.placement.spec(enc, dec);
        let enc_l: Vec<usize> = p.encoder_layers.iter().copied().collect();
        let dec_l: Vec<usize> = p.decoder_layers.iter().copied().collect();
        for owner in a.owner_list(languages) {
            let s = salt(seed ^ (i as u64) << 48, &format!("{}{owner}", a.kind.prefix()));
            model.install_adapters(a.kind, &owner, &enc_l, &dec_l, a.bottleneck(width), s)?;
        }
    }
    Ok(())
}

/// Trains one experiment, saves its checkpoint and evaluates it.
///
/// Writes into `<out>/<id>/`: the resolved experiment, the checkpoint, the
/// training log, and one report plus heatmap per evaluated domain.
pub fn run_experiment(
    exp: &Experiment,
    world: &World,
    splits: &SplitSet,
    out: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    exp.validate_against(world)?;
    let languages = &world.spec.languages;
    let (mut model, parent) = match (&exp.parent, &exp.model) {
        (Some(p), _) => {
            let (m, _, _) = load_stage(out, p, opts.seed)?;
            if m.config().vocab_size != world.vocab.size() {
                return Err(Error::Config(format!(
                    "parent `{p}` has vocabulary {} but the corpus has {}",
                    m.config().vocab_size,
                    world.vocab.size()
                )));
            }
            (m, Some(p.clone()))
        }
        (None, Some(shape)) => {
            let cfg = ModelConfig {
                vocab_size: world.vocab.size(),
                ..shape.clone()
            };
            (Seq2Seq::new(cfg, opts.seed)?, None)
        }
        (None, None) => unreachable!("validated"),
    };
    let data = build_train_data(exp, world, splits, out, opts.seed)?;
    install(&mut model, exp, languages, opts.seed)?;
    let (enc, dec) = (model.config().enc_layers, model.config().dec_layers);
    let setup = exp.routing_setup(enc, dec);
    setup.validate(enc, dec)?;

    let dir = stage_dir(out, &exp.id);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(EXPERIMENT_FILE), exp.to_toml()?)?;

    let mut cfg = exp.train.clone();
    cfg.seed = salt(opts.seed, &exp.id);
    let training = if opts.log_training {
        let mut w = BufWriter::new(fs::File::create(dir.join(TRAIN_LOG_FILE))?);
        let r = train(&mut model, &data, &setup, &world.vocab, &cfg, Some(&mut w));
        w.flush()?;
        r?
    } else {
        train(&mut model, &data, &setup, &world.vocab, &cfg, None)?
    };
    let ckpt = dir.join(CHECKPOINT_FILE);
    let meta = CheckpointMeta {
        stage: exp.id.clone(),
        updates: training.updates,
        best_val_nll: training.best_val_nll,
        seed: opts.seed,
        parent,
    };
    checkpoint::save(&ckpt, &model, &meta)?;

    let reports = if opts.evaluate {
        evaluate_experiment(exp, &model, &setup, world, splits, out, opts.threads)?
    } else {
        Vec::new()
    };
    Ok(RunOutcome {
        checkpoint: ckpt,
        training,
        reports,
    })
}

/// Scores the full route grid of every evaluation domain on the test split
/// and writes reports and heatmaps.
pub fn evaluate_experiment(
    exp: &Experiment,
    model: &Seq2Seq<f32>,
    setup: &RoutingSetup,
    world: &World,
    splits: &SplitSet,
    out: &Path,
    threads: usize,
) -> Result<Vec<EvalReport>> {
    let languages = &world.spec.languages;
    let dir = stage_dir(out, &exp.id);
    let grouping: BTreeSet<String> = exp.languages(exp.eval.grouping, languages).into_iter().collect();
    let translator = ModelTranslator {
        model,
        setup,
        vocab: &world.vocab,
        beam: exp.eval.beam.clone(),
    };
    let mut reports = Vec::new();
    for domain in &exp.eval.domains {
        let routes = route_grid(languages, Some(domain));
        let scores = score_routes(&translator, splits.domain(domain)?, Split::Test, &routes, threads)?;
        let mut report = aggregate(&exp.id, domain, languages, &grouping, scores)?;
        let baseline = if exp.id == BASELINE_ID {
            None
        } else {
            read_report(&stage_dir(out, BASELINE_ID).join(report_file(domain))).ok()
        };
        let baseline = baseline.filter(|b| b.languages == report.languages);
        report.baseline = baseline.as_ref().map(|b| b.model.clone());
        fs::write(dir.join(report_file(domain)), serde_json::to_string_pretty(&report)?)?;
        fs::write(dir.join(heatmap_file(domain)), heatmap_csv(&report, baseline.as_ref()))?;
        reports.push(report);
    }
    Ok(reports)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs experiments in order. Each one's parent must come earlier in the
/// list or already be present in `out`.
pub fn run_pipeline(
    stages: &[Experiment],
    world: &World,
    splits: &SplitSet,
    out: &Path,
    opts: &RunOptions,
) -> Result<Vec<RunOutcome>> {
    let mut done: BTreeSet<&str> = BTreeSet::new();
    for s in stages {
        if let Some(p) = &s.parent {
            if !done.contains(p.as_str()) && !stage_dir(out, p).join(CHECKPOINT_FILE).exists() {
                return Err(Error::MissingPrerequisite(format!(
                    "stage `{}` needs `{p}`, which is neither earlier in the pipeline nor on disk",
                    s.id
                )));
            }
        }
        done.insert(&s.id);
    }
    stages.iter().map(|s| run_experiment(s, world, splits, out, opts)).collect()
}

/// Parameter counts of an experiment at a given model shape, without
/// building the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Every adapter installed along the parent chain.
    pub adapters: usize,
    /// Scalars in the groups this experiment trains.
    pub tunable: usize,
    pub base: usize,
}

/// Closed-form counts for `exp` at `shape`, following parents through
/// `lookup`.
pub fn count_parameters(
    exp: &Experiment,
    shape: &ModelConfig,
    languages: &[String],
    lookup: impl Fn(&str) -> Option<Experiment>,
) -> Result<ParamCount> {
    let mut chain = vec![exp.clone()];
    let mut seen: BTreeSet<String> = [exp.id.clone()].into();
    while let Some(p) = chain.last().unwrap().parent.clone() {
        let parent = lookup(&p).ok_or_else(|| Error::MissingPrerequisite(format!("unknown parent experiment `{p}`")))?;
        if !seen.insert(parent.id.clone()) {
            return Err(Error::Config(format!("parent chain of `{}` is cyclic", exp.id)));
        }
        chain.push(parent);
    }
    // group name → scalars
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    groups.insert(BASE_GROUP.to_string(), shape.base_param_count());
    for stage in chain.iter().rev() {
        for a in &stage.install {
            let p = a.placement.spec(shape.enc_layers, shape.dec_layers);
            let layers = p.encoder_layers.len() + p.decoder_layers.len();
            for owner in a.owner_list(languages) {
                let n = count_adapter_budget(&DeploymentSpec::default().with(
                    a.kind,
                    1,
                    layers,
                    a.bottleneck(shape.d_model),
                    shape.d_model,
                ));
                *groups.entry(a.kind.group(&owner)).or_default() += n;
            }
        }
    }
    let patterns: Vec<GroupPattern> = exp.train.patterns();
    let tunable = groups
        .iter()
        .filter(|(g, _)| patterns.iter().any(|p| p.matches(g)))
        .map(|(_, n)| n)
        .sum();
    Ok(ParamCount {
        adapters: groups.iter().filter(|(g, _)| *g != BASE_GROUP).map(|(_, n)| n).sum(),
        tunable,
        base: groups[BASE_GROUP],
    })
}
