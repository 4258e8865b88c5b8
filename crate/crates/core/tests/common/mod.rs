//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod grad_cases;
pub mod laws;
pub mod metric_oracles;

use adapterforge::tensor::{Tape, Tensor, Var};

/// Central finite differences in f64, h = 1e-3.
///
/// `build` records a scalar function of its input vars on the given tape; it
/// is called once with gradient-tracking leaves for the analytic gradient and
/// then repeatedly with perturbed constants.
pub fn fd_check(
    inputs: &[Tensor<f64>],
    rel_tol: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> Result<(), String> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).map_err(|e| e.to_string())?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let h = 1e-3;
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[ti].data()[e];
            let rel = relative_error(a, numeric);
            worst = worst.max(rel);
            if rel > rel_tol {
                return Err(format!(
                    "input {ti} element {e}: analytic {a:.8e} vs numeric {numeric:.8e} (rel {rel:.2e})"
                ));
            }
        }
    }
    let _ = worst;
    Ok(())
}

/// Relative error with a 1e-2 floor on the magnitude so that gradients
/// that are zero up to rounding do not blow up the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Deterministic pseudo-random tensor with entries in [-scale, scale].
pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let u = (state >> 11) as f64 / (1u64 << 53) as f64;
        (2.0 * u - 1.0) * scale
    })
}
