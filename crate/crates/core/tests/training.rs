mod common;

use adapterforge::corpus::{Pair, ParallelCorpus, Vocab};
use adapterforge::routing::{Route, RoutingSetup};
use adapterforge::training::{train, validation_nll, Phase, Planner, Schedule, TrainConfig, TrainData};
use adapterforge::transformer::{ModelConfig, Seq2Seq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::laws;

#[test]
fn frozen_groups_survive_domain_adapter_training() {
    let (world, splits) = laws::desk_corpus();
    laws::freeze_integrity(&world, &splits, 60, false).unwrap();
}

#[test]
fn unfrozen_language_adapters_leave_base_alone() {
    let (world, splits) = laws::desk_corpus();
    laws::freeze_integrity(&world, &splits, 60, true).unwrap();
}

fn copy_task(n: usize, seed: u64) -> (Vocab, Vec<ParallelCorpus>) {
    let vocab = Vocab::new(vec!["en".into()], vec![], 8, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n as u64)
        .map(|i| {
            let len = rng.random_range(3..7);
            let s: Vec<u32> = (0..len).map(|_| vocab.lexical(0, rng.random_range(0..8))).collect();
            Pair::clean(i, s.clone(), s)
        })
        .collect();
    let route = Route::new("en", "en", None);
    (vocab, vec![ParallelCorpus { route, pairs }])
}

fn copy_model(vocab: &Vocab) -> Seq2Seq<f32> {
    let cfg = ModelConfig {
        d_model: 32,
        n_heads: 4,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 64,
        vocab_size: vocab.size(),
        max_len: 16,
        dropout_p: 0.0,
        tie_embeddings: true,
    };
    Seq2Seq::new(cfg, 1).unwrap()
}

#[test]
fn frozen_model_keeps_validation_nll_constant() {
    let (vocab, train_set) = copy_task(40, 1);
    let (_, valid) = copy_task(10, 2);
    let mut model = copy_model(&vocab);
    let mut cfg = TrainConfig::new(Phase::Pretrain, &[]);
    cfg.schedule = Schedule::Fixed { lr: 0.0 };
    cfg.max_updates = 20;
    cfg.eval_every = 5;
    let data = TrainData { train: train_set, extra: None, valid };
    let out = train(&mut model, &data, &RoutingSetup::default(), &vocab, &cfg, None).unwrap();
    assert_eq!(out.history.len(), 5);
    assert!(out.history.iter().all(|&(_, v)| v == out.history[0].1), "{:?}", out.history);
}

#[test]
fn copy_task_is_learned_and_best_checkpoint_is_kept() {
    let (vocab, train_set) = copy_task(500, 3);
    let (_, valid) = copy_task(50, 4);
    let mut model = copy_model(&vocab);
    let mut cfg = TrainConfig::new(Phase::Pretrain, &["base"]);
    cfg.schedule = Schedule::InvSqrt { peak: 3e-3, warmup: 100 };
    cfg.label_smoothing = 0.0;
    cfg.dropout = 0.0;
    cfg.max_updates = 2000;
    cfg.max_epochs = 1000;
    cfg.eval_every = 100;
    cfg.max_tokens = 128;
    let data = TrainData { train: train_set, extra: None, valid: valid.clone() };
    let setup = RoutingSetup::default();
    let out = train(&mut model, &data, &setup, &vocab, &cfg, None).unwrap();
    let best = out.best_val_nll.unwrap();
    assert!(best < 0.1, "validation NLL {best}");
    let min = out.history.iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min);
    assert_eq!(best, min);
    let again = validation_nll(&model, &mut Planner::new(&setup, &vocab), &valid, cfg.max_tokens).unwrap();
    assert_eq!(again, best);
}
