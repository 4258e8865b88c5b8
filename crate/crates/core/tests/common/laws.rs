//! Property checks shared by the integration tests and the acceptance
//! target. Each returns a one-line summary on success.

use std::collections::{BTreeMap, BTreeSet};

use adapterforge::adapters::{AdapterKind, PlacementSpec, Side, StackConfig, StackMode};
use adapterforge::corpus::{CorpusManifest, ParallelCorpus, Split, SplitSet, World, BOS, MASK, PAD};
use adapterforge::evaluation::{beam_search, bleu, chrf, sequence_log_prob, BeamConfig};
use adapterforge::routing::{
    plan_activation, route_grid, sample_direction, ActivationPlan, BatchSource, BatchStream, MixedStream, Route,
    RoutingSetup,
};
use adapterforge::tensor::{Tape, Var};
use adapterforge::transformer::{HookEvent, ModelConfig, RunCtx, Seq2Seq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad_cases::tiny_config;
use super::metric_oracles::{bleu_oracle, chrf_oracle};

pub type Law = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn desk_corpus() -> (World, SplitSet) {
    CorpusManifest::desk().generate().expect("desk manifest generates")
}

fn logits(model: &Seq2Seq<f32>, plan: &ActivationPlan, src: &[u32], tgt: &[u32]) -> Result<Vec<f32>, String> {
    let mut tape = Tape::new();
    let mut ctx = RunCtx::eval();
    let enc = model.encode(&mut tape, &[plan.source_ids(src)], plan, &mut ctx).map_err(err)?;
    let out: Var = model
        .decode_train(&mut tape, &enc, &[plan.decoder_input(tgt)], plan, &mut ctx)
        .map_err(err)?;
    Ok(tape.value(out).data().to_vec())
}

/// Freshly installed adapters leave every logit bit-identical.
pub fn identity_at_init() -> Law {
    let vocab = 40;
    let base = Seq2Seq::<f32>::new(ModelConfig { max_len: 24, ..tiny_config(vocab) }, 11).map_err(err)?;
    let mut adapted = base.cast::<f32>();
    let all = [0, 1];
    adapted.install_adapters(AdapterKind::Language, "fr", &all, &all, 8, 5).map_err(err)?;
    adapted.install_adapters(AdapterKind::Language, "de", &all, &all, 8, 6).map_err(err)?;
    adapted.install_adapters(AdapterKind::Domain, "medical", &all, &all, 8, 7).map_err(err)?;
    let bare = ActivationPlan::bare(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f32;
    for i in 0..100 {
        let sent = |rng: &mut ChaCha8Rng| -> Vec<u32> {
            let n = rng.random_range(1..10);
            (0..n).map(|_| rng.random_range(4..vocab as u32)).collect()
        };
        let (src, tgt) = (sent(&mut rng), sent(&mut rng));
        let mode = if i % 2 == 0 { StackMode::SerialNewLn } else { StackMode::MadX };
        let mut plan = ActivationPlan::bare(2, 2);
        for s in &mut plan.encoder {
            s.language = Some("fr".into());
            s.domain = Some("medical".into());
        }
        for s in &mut plan.decoder {
            s.language = Some("de".into());
            s.domain = Some("medical".into());
        }
        plan.mode = mode;
        let a = logits(&base, &bare, &src, &tgt)?;
        let b = logits(&adapted, &plan, &src, &tgt)?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    if worst != 0.0 {
        return Err(format!("adapters at init moved a logit by {worst:e}"));
    }
    Ok("100 inputs, both stacking modes, L∞ = 0".into())
}

/// Decoder-only domain adapters: over every route of the grid and every
/// batch, the encoder runs the source LA and never a DA, the decoder runs
/// the target LA and the domain's DA.
pub fn routing_law(world: &World, splits: &SplitSet) -> Law {
    let vocab = &world.vocab;
    let langs = world.language_ids();
    let domain = "medical";
    let cfg = ModelConfig::desk(vocab.size());
    let mut model = Seq2Seq::<f32>::new(cfg.clone(), 3).map_err(err)?;
    for l in &langs {
        model.install_language_adapter(l, 16, 1).map_err(err)?;
    }
    let dec: Vec<usize> = (0..cfg.dec_layers).collect();
    model.install_adapters(AdapterKind::Domain, domain, &[], &dec, 16, 2).map_err(err)?;
    let setup = RoutingSetup {
        language_adapters: true,
        domain_adapters: Some(StackConfig {
            placement: PlacementSpec::decoder_only(cfg.dec_layers),
            dadrop_p: 0.2,
            ..Default::default()
        }),
        adapter_domains: [domain.to_string()].into(),
        ..Default::default()
    };
    let data = splits.domain(domain).map_err(err)?;
    let grid = route_grid(&langs, Some(domain));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut batches, mut enc_da, mut dec_da) = (0usize, 0usize, 0usize);
    for route in &grid {
        let plan = plan_activation(route, &setup, vocab, model.adapters(), cfg.enc_layers, cfg.dec_layers)
            .map_err(err)?;
        let corpus = data.route_corpus(Split::Test, &route.src, &route.tgt).map_err(err)?;
        let mut stream = BatchStream::new(vec![corpus], 128, 1.0, 4).map_err(err)?;
        let total = stream.total_pairs();
        while stream.pairs_drawn() < total {
            let batch = stream.next_batch().map_err(err)?;
            let pairs: Vec<(&[u32], &[u32])> = batch.pairs.iter().map(|p| (&p.src[..], &p.tgt[..])).collect();
            let mut hooks: Vec<HookEvent> = Vec::new();
            let mut tape = Tape::new();
            let mut ctx = RunCtx::train(&mut rng).recording(&mut hooks);
            model.loss(&mut tape, &pairs, &plan, 0.1, &mut ctx).map_err(err)?;
            batches += 1;
            let (mut enc_seen, mut dec_seen) = (0, 0);
            for h in &hooks {
                match h.side {
                    Side::Encoder => {
                        enc_seen += 1;
                        if h.domain.is_some() && !h.domain_dropped {
                            enc_da += 1;
                        }
                        if h.language.as_deref() != Some(route.src.as_str()) {
                            return Err(format!("{route}: encoder layer {} ran {:?}", h.layer, h.language));
                        }
                    }
                    Side::Decoder => {
                        dec_seen += 1;
                        if h.language.as_deref() != Some(route.tgt.as_str()) || h.domain.as_deref() != Some(domain) {
                            return Err(format!("{route}: decoder layer {} ran {:?}/{:?}", h.layer, h.language, h.domain));
                        }
                        if !h.domain_dropped {
                            dec_da += 1;
                        }
                    }
                }
            }
            if enc_seen != cfg.enc_layers || dec_seen != cfg.dec_layers {
                return Err(format!("{route}: {enc_seen}+{dec_seen} hook calls per batch"));
            }
        }
    }
    if enc_da != 0 {
        return Err(format!("{enc_da} encoder-side domain adapter invocations"));
    }
    Ok(format!(
        "{} routes, {batches} batches, 0 encoder DA calls, {dec_da} decoder DA calls",
        grid.len()
    ))
}

/// Empirical direction frequencies over 10k draws at T = 5 sit within two
/// points of `n^(1/T) / Σ n^(1/T)`.
pub fn temperature_law() -> Law {
    let sizes: BTreeMap<&str, usize> = [("a", 50), ("b", 400), ("c", 3000), ("d", 20000), ("e", 150000)].into();
    let t = 5.0;
    let z: f64 = sizes.values().map(|&n| (n as f64).powf(1.0 / t)).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut hits: BTreeMap<&str, usize> = BTreeMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        *hits.entry(sample_direction(&sizes, t, &mut rng).map_err(err)?).or_default() += 1;
    }
    let mut worst = 0.0f64;
    for (k, &n) in &sizes {
        let expected = (n as f64).powf(1.0 / t) / z;
        let got = hits.get(k).copied().unwrap_or(0) as f64 / draws as f64;
        worst = worst.max((got - expected).abs());
    }
    if worst > 0.02 {
        return Err(format!("largest frequency error {worst:.4}"));
    }
    Ok(format!("10k draws, largest frequency error {worst:.4}"))
}

/// Share of domain-adapter calls skipped during training at p = 0.2.
pub fn dadrop_law() -> Law {
    let mut model = Seq2Seq::<f32>::new(tiny_config(12), 1).map_err(err)?;
    let all = [0, 1];
    model.install_adapters(AdapterKind::Domain, "medical", &all, &all, 4, 1).map_err(err)?;
    let mut plan = ActivationPlan::bare(2, 2);
    for s in plan.encoder.iter_mut().chain(plan.decoder.iter_mut()) {
        s.domain = Some("medical".into());
    }
    plan.dadrop_p = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hooks = Vec::new();
    let pairs: [(&[u32], &[u32]); 1] = [(&[5, 6], &[7])];
    while hooks.len() < 10_000 {
        let mut tape = Tape::new();
        let mut ctx = RunCtx::train(&mut rng).recording(&mut hooks);
        model.loss(&mut tape, &pairs, &plan, 0.0, &mut ctx).map_err(err)?;
    }
    let rate = hooks.iter().filter(|h| h.domain_dropped).count() as f64 / hooks.len() as f64;
    if !(0.18..=0.22).contains(&rate) {
        return Err(format!("skip rate {rate:.4} over {} calls", hooks.len()));
    }
    Ok(format!("skip rate {rate:.4} over {} calls", hooks.len()))
}

fn toy_corpus(src: &str, n: usize) -> ParallelCorpus {
    use adapterforge::corpus::Pair;
    ParallelCorpus {
        route: Route::new(src, "en", Some("medical")),
        pairs: (0..n as u64).map(|i| Pair::clean(i, vec![10; 3], vec![11; 3])).collect(),
    }
}

/// Share of batches drawn from the mixed-in stream at p = 0.5.
pub fn mixing_law() -> Law {
    let primary = BatchStream::new(vec![toy_corpus("fr", 300)], 16, 5.0, 1).map_err(err)?;
    let extra = BatchStream::new(vec![toy_corpus("de", 30)], 16, 5.0, 2).map_err(err)?;
    let mut mixed = MixedStream::new(primary, extra, 0.5, 3).map_err(err)?;
    let n = 10_000;
    let mut from_extra = 0;
    for _ in 0..n {
        if mixed.next_batch().map_err(err)?.route.src == "de" {
            from_extra += 1;
        }
    }
    let share = from_extra as f64 / n as f64;
    if !(0.48..=0.52).contains(&share) {
        return Err(format!("extra share {share:.4}"));
    }
    Ok(format!("extra share {share:.4} over 10k batches"))
}

const WORDS: [&str; 8] = ["a", "b", "ab", "ba", "abc", "c", "ca", "d"];

/// Reference sentences over a tiny lexicon and hypotheses made by random
/// edits of them, so every n-gram order sees matches and misses.
pub fn toy_text(seed: u64) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = rng.random_range(1..8);
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for i in 0..lines {
        // one line long enough for 4-grams, so identity scores 100
        let len = rng.random_range(if i == 0 { 4 } else { 1 }..14);
        let r: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
        let mut h = Vec::new();
        for w in &r {
            match rng.random_range(0..10) {
                0 => {}
                1 => h.push(WORDS[rng.random_range(0..WORDS.len())]),
                2 => {
                    h.push(*w);
                    h.push(WORDS[rng.random_range(0..WORDS.len())]);
                }
                _ => h.push(*w),
            }
        }
        if rng.random_range(0..20) == 0 {
            h.clear();
        }
        hyps.push(h.join(" "));
        refs.push(r.join(" "));
    }
    (hyps, refs)
}

pub fn split_words(v: &[String]) -> Vec<Vec<String>> {
    v.iter().map(|s| s.split_whitespace().map(String::from).collect()).collect()
}

/// Library metrics against the brute-force oracles on 100 toy corpora.
pub fn metric_law() -> Law {
    let (mut worst_bleu, mut worst_chrf) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let (h, r) = toy_text(seed);
        let b = bleu(&h, &r).map_err(err)?;
        let c = chrf(&h, &r).map_err(err)?;
        worst_bleu = worst_bleu.max((b - bleu_oracle(&split_words(&h), &split_words(&r))).abs());
        worst_chrf = worst_chrf.max((c - chrf_oracle(&h, &r)).abs());
        let (ib, ic) = (bleu(&r, &r).map_err(err)?, chrf(&r, &r).map_err(err)?);
        if (ib - 100.0).abs() > 1e-9 || (ic - 1.0).abs() > 1e-12 {
            return Err(format!("identity corpus {seed} scored {ib} / {ic}"));
        }
    }
    if worst_bleu > 0.01 || worst_chrf > 1e-6 {
        return Err(format!("oracle gap BLEU {worst_bleu:e}, chrF {worst_chrf:e}"));
    }
    Ok(format!("100 corpora, oracle gap BLEU {worst_bleu:.1e}, chrF {worst_chrf:.1e}"))
}

/// Every output of length 1..=3 over the three content ids.
fn all_outputs(content: &[u32]) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..3 {
        let mut next = Vec::new();
        for p in &frontier {
            for &t in content {
                let mut q: Vec<u32> = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// A beam wide enough to hold the whole output space returns the
/// brute-force argmax under the same length-normalized score.
pub fn beam_law() -> Law {
    // ids 0..4 are specials, 4..7 the three content tokens
    let banned = [PAD, BOS, MASK];
    let content = [4u32, 5, 6];
    let space = all_outputs(&content);
    if space.len() != 39 {
        return Err(format!("enumerated {} outputs", space.len()));
    }
    let mut checked = 0;
    for seed in 0..4 {
        let cfg = ModelConfig { max_len: 8, ..tiny_config(7) };
        let model = Seq2Seq::<f32>::new(cfg, 40 + seed).map_err(err)?.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources: Vec<Vec<u32>> = (0..6)
            .map(|_| (0..rng.random_range(1..5)).map(|_| content[rng.random_range(0..3)]).collect())
            .collect();
        let plan = ActivationPlan::bare(2, 2);
        for alpha in [0.0, 0.6, 1.0] {
            let beam = BeamConfig {
                beam: space.len(),
                max_len: 3,
                min_len: 1,
                length_penalty: alpha,
                batch_sources: 3,
            };
            let found = beam_search(&model, &sources, &plan, &beam, &banned).map_err(err)?;
            for (src, hyp) in sources.iter().zip(&found) {
                let mut best: Option<(f64, &Vec<u32>)> = None;
                for cand in &space {
                    let lp = sequence_log_prob(&model, src, &plan, cand).map_err(err)?;
                    let score = lp / ((cand.len() + 1) as f64).powf(alpha);
                    if best.is_none_or(|(s, _)| score > s) {
                        best = Some((score, cand));
                    }
                }
                let (score, tokens) = best.expect("non-empty space");
                if &hyp.tokens != tokens || (hyp.score - score).abs() > 1e-9 {
                    return Err(format!(
                        "seed {seed} α {alpha} source {src:?}: beam {:?} ({:.6}) vs brute force {tokens:?} ({score:.6})",
                        hyp.tokens, hyp.score
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} searches agree with brute force over 39 outputs"))
}

/// No pivot id crosses from train into valid/test on any route of any
/// domain, and each domain's valid/test pivots are the same on every route.
pub fn split_hygiene(world: &World, splits: &SplitSet) -> Law {
    let langs = world.language_ids();
    let grid = route_grid(&langs, None);
    let mut routes = 0;
    for (id, data) in &splits.domains {
        let mut reference: BTreeMap<Split, Vec<u64>> = BTreeMap::new();
        for r in &grid {
            let ids = |s: Split| -> Result<Vec<u64>, String> {
                Ok(data
                    .route_corpus(s, &r.src, &r.tgt)
                    .map_err(err)?
                    .pairs
                    .iter()
                    .map(|p| p.pivot_id)
                    .collect())
            };
            let train: BTreeSet<u64> = ids(Split::Train)?.into_iter().collect();
            for s in [Split::Valid, Split::Test] {
                let held = ids(s)?;
                if let Some(x) = held.iter().find(|x| train.contains(x)) {
                    return Err(format!("{id} {}→{}: pivot {x} in train and {}", r.src, r.tgt, s.name()));
                }
                match reference.get(&s) {
                    None => {
                        reference.insert(s, held);
                    }
                    Some(first) if *first != held => {
                        return Err(format!("{id} {}→{}: {} pivots differ across routes", r.src, r.tgt, s.name()));
                    }
                    Some(_) => {}
                }
            }
            routes += 1;
        }
        let all_held: BTreeSet<u64> = reference.values().flatten().copied().collect();
        if !all_held.is_subset(&splits.held_out_pivot_ids) {
            return Err(format!("{id}: held-out pivots missing from the held-out set"));
        }
    }
    Ok(format!("{routes} domain routes, no leakage, aligned valid/test"))
}

/// Trains the medical domain adapters for `steps` updates and checks that
/// the base model, and the language adapters unless `train_la`, are
/// bitwise untouched while the trained groups did move.
pub fn freeze_integrity(world: &World, splits: &SplitSet, steps: usize, train_la: bool) -> Law {
    use adapterforge::tensor::GroupPattern;
    use adapterforge::training::{train, Phase, Schedule, TrainConfig, TrainData};

    let vocab = &world.vocab;
    let cfg = ModelConfig::desk(vocab.size());
    let mut model = Seq2Seq::<f32>::new(cfg.clone(), 8).map_err(err)?;
    for l in world.language_ids() {
        model.install_language_adapter(&l, 16, 1).map_err(err)?;
    }
    let (enc, dec): (Vec<usize>, Vec<usize>) = ((0..cfg.enc_layers).collect(), (0..cfg.dec_layers).collect());
    model.install_adapters(AdapterKind::Domain, "medical", &enc, &dec, 16, 2).map_err(err)?;
    let setup = RoutingSetup {
        language_adapters: true,
        domain_adapters: Some(StackConfig {
            placement: PlacementSpec::both(cfg.enc_layers, cfg.dec_layers),
            dadrop_p: 0.2,
            ..Default::default()
        }),
        adapter_domains: ["medical".to_string()].into(),
        ..Default::default()
    };
    let data = splits.domain("medical").map_err(err)?;
    let mut train_c = Vec::new();
    let mut valid_c = Vec::new();
    for l in ["fr", "de", "cs"] {
        for (s, t) in [("en", l), (l, "en")] {
            train_c.push(data.route_corpus(Split::Train, s, t).map_err(err)?);
            valid_c.push(data.route_corpus(Split::Valid, s, t).map_err(err)?);
        }
    }
    let groups: &[&str] = if train_la { &["da:medical", "la:*"] } else { &["da:medical"] };
    let mut tc = TrainConfig::new(Phase::DomainAdapters, groups);
    tc.schedule = Schedule::Fixed { lr: 1e-3 };
    tc.max_updates = steps;
    tc.max_epochs = usize::MAX;
    tc.eval_every = steps;
    tc.seed = 3;
    let frozen: Vec<GroupPattern> = if train_la {
        vec![GroupPattern::new("base")]
    } else {
        vec![GroupPattern::new("base"), GroupPattern::new("la:*")]
    };
    let trained = [GroupPattern::new("da:medical")];
    let before = model.store().snapshot(&frozen);
    let da_before = model.store().snapshot(&trained);
    let td = TrainData {
        train: train_c,
        extra: None,
        valid: valid_c,
    };
    let out = train(&mut model, &td, &setup, vocab, &tc, None).map_err(err)?;
    if out.updates != steps {
        return Err(format!("ran {} of {steps} updates", out.updates));
    }
    let bits = |t: &adapterforge::tensor::Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let after = model.store().snapshot(&frozen);
    let mut scalars = 0;
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if bits(a) != bits(b) {
            return Err(format!("frozen tensor {name} changed"));
        }
        scalars += a.numel();
    }
    let moved = da_before
        .iter()
        .zip(model.store().snapshot(&trained))
        .filter(|((_, a), (_, b))| bits(a) != bits(b))
        .count();
    if moved == 0 {
        return Err("the domain adapters never moved".into());
    }
    let which = if train_la { "base" } else { "base + la:*" };
    Ok(format!("{steps} updates, {which} ({scalars} scalars) bitwise unchanged, {moved} DA tensors moved"))
}
