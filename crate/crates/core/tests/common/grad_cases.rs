//! Finite-difference cases for every differentiable op and for the whole
//! adapter-stacked model. Each returns the first mismatch as an error.

use std::sync::Arc;

use adapterforge::adapters::{AdapterKind, StackMode};
use adapterforge::routing::ActivationPlan;
use adapterforge::tensor::{matmul, AttentionSegments, GroupPattern, Tape, Tensor};
use adapterforge::transformer::{ModelConfig, RunCtx, Seq2Seq};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fd_check, rand_tensor, relative_error};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

type Case = (&'static str, fn() -> Result<(), String>);

pub const OP_CASES: &[Case] = &[
    ("matmul", matmul_case),
    ("matmul_nt + bias", matmul_nt_bias),
    ("layer norm", layer_norm),
    ("relu and scale", relu_scale),
    ("smoothed cross-entropy", cross_entropy),
    ("embedding", embedding),
    ("dropout", dropout),
    ("self-attention", self_attention),
    ("cross-attention", cross_attention),
];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn matmul_case() -> Result<(), String> {
    let a = rand_tensor(&[3, 4], 1, 1.0);
    let b = rand_tensor(&[4, 2], 2, 1.0);
    let mut tape = Tape::<f64>::new();
    let (va, vb) = (tape.leaf(a.clone(), true), tape.leaf(b.clone(), true));
    let out = tape.matmul(va, vb).map_err(err)?;
    let loss = tape.sum(out);
    tape.backward(loss).map_err(err)?;
    // d/dA sum(A·B) = 1 · Bᵀ
    let bt = Tensor::from_fn(&[2, 4], |i| b.data()[(i % 4) * 2 + i / 4]);
    let expected = matmul(&Tensor::ones(&[3, 2]), &bt).map_err(err)?;
    let diff = tape.grad(va).ok_or("no gradient")?.max_abs_diff(&expected);
    if diff > 1e-12 {
        return Err(format!("closed-form gradient off by {diff:e}"));
    }
    fd_check(&[a, b], OP_TOL, |t, v| {
        let o = t.matmul(v[0], v[1]).unwrap();
        t.sum(o)
    })
}

pub fn matmul_nt_bias() -> Result<(), String> {
    let inputs = [
        rand_tensor(&[3, 5], 3, 1.0),
        rand_tensor(&[4, 5], 4, 1.0),
        rand_tensor(&[4], 5, 1.0),
        rand_tensor(&[3, 4], 6, 1.0),
    ];
    fd_check(&inputs, OP_TOL, |t, v| {
        let o = t.matmul_nt(v[0], v[1]).unwrap();
        let o = t.add_row(o, v[2]).unwrap();
        let w = t.add(o, v[3]).unwrap();
        // weight the sum so the gradient is not uniform
        let w2 = t.matmul_nt(w, v[3]).unwrap();
        t.sum(w2)
    })
}

pub fn layer_norm() -> Result<(), String> {
    let inputs = [
        rand_tensor(&[2, 8], 7, 2.0),
        rand_tensor(&[8], 8, 1.5),
        rand_tensor(&[8], 9, 0.5),
        rand_tensor(&[2, 8], 10, 1.0),
    ];
    fd_check(&inputs, OP_TOL, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let z = t.matmul_nt(y, v[3]).unwrap();
        t.sum(z)
    })
}

pub fn relu_scale() -> Result<(), String> {
    // keep entries away from the kink at zero
    let mut x = rand_tensor(&[4, 6], 11, 1.0);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let w = rand_tensor(&[4, 6], 12, 1.0);
    fd_check(&[x, w], OP_TOL, |t, v| {
        let r = t.relu(v[0]);
        let s = t.scale(r, 0.7);
        let z = t.matmul_nt(s, v[1]).unwrap();
        t.sum(z)
    })
}

pub fn cross_entropy() -> Result<(), String> {
    let logits = rand_tensor(&[3, 5], 13, 2.0);
    let targets = [4u32, 0, 2];
    fd_check(&[logits.clone()], OP_TOL, |t, v| {
        t.cross_entropy_smoothed(v[0], &targets, 0.1).unwrap()
    })?;

    // brute-force per-token sum over the vocabulary
    let mut expected = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        let nll = |c: usize| -(row[c].exp() / z).ln();
        let uniform: f64 = (0..5).map(nll).sum::<f64>() / 5.0;
        expected += 0.9 * nll(y as usize) + 0.1 * uniform;
    }
    expected /= 3.0;
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits);
    let loss = tape.cross_entropy_smoothed(l, &targets, 0.1).map_err(err)?;
    let got = tape.value(loss).item();
    if (got - expected).abs() > 1e-6 {
        return Err(format!("loss {got} vs brute force {expected}"));
    }
    Ok(())
}

pub fn embedding() -> Result<(), String> {
    let table = rand_tensor(&[6, 4], 14, 1.0);
    let w = rand_tensor(&[5, 4], 15, 1.0);
    fd_check(&[table, w], OP_TOL, |t, v| {
        let e = t.embedding(v[0], &[1, 3, 1, 5, 0], 2.0).unwrap();
        let z = t.matmul_nt(e, v[1]).unwrap();
        t.sum(z)
    })
}

pub fn dropout() -> Result<(), String> {
    let x = rand_tensor(&[3, 4], 16, 1.0);
    let w = rand_tensor(&[3, 4], 17, 1.0);
    fd_check(&[x, w], OP_TOL, |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let d = t.dropout(v[0], 0.3, &mut rng);
        let z = t.matmul_nt(d, v[1]).unwrap();
        t.sum(z)
    })
}

pub fn self_attention() -> Result<(), String> {
    let segs = Arc::new(AttentionSegments::self_attention(&[0, 3, 7]).map_err(err)?);
    for causal in [false, true] {
        let inputs = [
            rand_tensor(&[7, 8], 18, 1.0),
            rand_tensor(&[7, 8], 19, 1.0),
            rand_tensor(&[7, 8], 20, 1.0),
            rand_tensor(&[7, 8], 21, 1.0),
        ];
        fd_check(&inputs, OP_TOL, |t, v| {
            let a = t.attention(v[0], v[1], v[2], &segs, 2, causal).unwrap();
            let z = t.matmul_nt(a, v[3]).unwrap();
            t.sum(z)
        })
        .map_err(|e| format!("causal={causal}: {e}"))?;
    }
    Ok(())
}

pub fn cross_attention() -> Result<(), String> {
    // two query segments read the same key range, as beam hypotheses do
    let segs = Arc::new(
        AttentionSegments::with_ranges(vec![0..2, 2..5, 5..6], vec![0..3, 0..3, 3..5], 5).map_err(err)?,
    );
    let inputs = [
        rand_tensor(&[6, 4], 22, 1.0),
        rand_tensor(&[5, 4], 23, 1.0),
        rand_tensor(&[5, 4], 24, 1.0),
        rand_tensor(&[6, 4], 25, 1.0),
    ];
    fd_check(&inputs, OP_TOL, |t, v| {
        let a = t.attention(v[0], v[1], v[2], &segs, 1, false).unwrap();
        let z = t.matmul_nt(a, v[3]).unwrap();
        t.sum(z)
    })
}

pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        ffn_dim: 16,
        vocab_size: vocab,
        max_len: 16,
        dropout_p: 0.0,
        tie_embeddings: true,
    }
}

/// Width-8 model with language and domain adapters on every layer, all
/// adapter weights randomized so no stack is an identity.
pub fn stacked_model(seed: u64) -> Result<Seq2Seq<f64>, String> {
    let mut m = Seq2Seq::<f32>::new(tiny_config(12), seed).map_err(err)?;
    let all = [0, 1];
    m.install_adapters(AdapterKind::Language, "fr", &all, &all, 4, seed).map_err(err)?;
    m.install_adapters(AdapterKind::Language, "de", &all, &all, 4, seed).map_err(err)?;
    m.install_adapters(AdapterKind::Domain, "medical", &all, &all, 4, seed).map_err(err)?;
    let mut m = m.cast::<f64>();
    let mut k = 0;
    for (_, p) in m.store_mut().iter_mut() {
        if p.group != "base" {
            k += 1;
            let shift = if p.name.ends_with("ln.g") { 1.0 } else { 0.0 };
            let noise = rand_tensor(p.value.shape(), 1000 + seed * 97 + k, 0.4);
            p.value = Tensor::from_fn(p.value.shape(), |i| shift + noise.data()[i]);
        }
    }
    Ok(m)
}

pub fn stacked_plan(mode: StackMode) -> ActivationPlan {
    let mut plan = ActivationPlan::bare(2, 2);
    for s in &mut plan.encoder {
        s.language = Some("fr".into());
        s.domain = Some("medical".into());
    }
    for s in &mut plan.decoder {
        s.language = Some("de".into());
        s.domain = Some("medical".into());
    }
    plan.decoder_start = 5;
    plan.mode = mode;
    plan
}

/// Central differences over every scalar of every parameter of the full
/// model, against the gradients `backward_into` leaves in the store.
pub fn full_model(mode: StackMode) -> Result<(), String> {
    let mut model = stacked_model(3)?;
    model
        .set_trainable(&[GroupPattern::new("base"), GroupPattern::new("la:*"), GroupPattern::new("da:*")])
        .map_err(err)?;
    let plan = stacked_plan(mode);
    let src: [&[u32]; 2] = [&[6, 7, 8], &[9, 10, 11, 6]];
    let tgt: [&[u32]; 2] = [&[7, 7, 10, 11], &[8, 9]];
    let pairs: Vec<(&[u32], &[u32])> = src.into_iter().zip(tgt).collect();
    let loss_of = |m: &Seq2Seq<f64>| -> f64 {
        let mut tape = Tape::new();
        let l = m.loss(&mut tape, &pairs, &plan, 0.1, &mut RunCtx::eval()).unwrap();
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let l = model.loss(&mut tape, &pairs, &plan, 0.1, &mut RunCtx::eval()).map_err(err)?;
    tape.backward_into(l, model.store_mut()).map_err(err)?;
    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    let h = 1e-5;
    for id in ids {
        let p = model.store().get(id);
        let name = p.name.clone();
        let analytic = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for e in 0..p.value.numel() {
            let orig = model.store().get(id).value.data()[e];
            model.store_mut().get_mut(id).value.data_mut()[e] = orig + h;
            let up = loss_of(&model);
            model.store_mut().get_mut(id).value.data_mut()[e] = orig - h;
            let down = loss_of(&model);
            model.store_mut().get_mut(id).value.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[e];
            if relative_error(a, numeric) > MODEL_TOL {
                return Err(format!("{name}[{e}]: analytic {a:.8e} vs numeric {numeric:.8e}"));
            }
        }
    }
    Ok(())
}
