//! Browser bindings: adapter budget, temperature sampling and corpus metrics.
//!
//! Each export wraps a plain function so the logic is testable off wasm.

use adapterforge::adapters::adapter_param_count;
use adapterforge::evaluation::{bleu, chrf};
use adapterforge::routing::sampling_probabilities;
use wasm_bindgen::prelude::*;

pub fn probabilities(sizes: &[u32], temperature: f64) -> Result<Vec<f64>, String> {
    let sizes: Vec<usize> = sizes.iter().map(|&n| n as usize).collect();
    sampling_probabilities(&sizes, temperature).map_err(|e| e.to_string())
}

fn lines(text: &str) -> Vec<String> {
    text.lines().map(str::to_owned).collect()
}

/// `[BLEU, chrF]` for newline-separated hypotheses and references.
pub fn scores(hypotheses: &str, references: &str) -> Result<Vec<f64>, String> {
    let (h, r) = (lines(hypotheses), lines(references));
    let b = bleu(&h, &r).map_err(|e| e.to_string())?;
    let c = chrf(&h, &r).map_err(|e| e.to_string())?;
    Ok(vec![b, c])
}

/// Adapter scalars for `languages` language sets over `language_layers`
/// layers plus `domains` domain sets over `domain_layers` layers. Summed in
/// f64 since usize is 32 bits on wasm32.
#[wasm_bindgen(js_name = adapterBudget)]
pub fn adapter_budget(
    d_model: u32,
    bottleneck: u32,
    languages: u32,
    language_layers: u32,
    domains: u32,
    domain_layers: u32,
) -> f64 {
    let one = adapter_param_count(d_model as usize, bottleneck as usize) as f64;
    one * (languages as f64 * language_layers as f64 + domains as f64 * domain_layers as f64)
}

#[wasm_bindgen(js_name = samplingProbabilities)]
pub fn sampling_probabilities_js(sizes: Vec<u32>, temperature: f64) -> Result<Vec<f64>, JsError> {
    probabilities(&sizes, temperature).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = corpusScores)]
pub fn corpus_scores(hypotheses: &str, references: &str) -> Result<Vec<f64>, JsError> {
    scores(hypotheses, references).map_err(|e| JsError::new(&e))
}
