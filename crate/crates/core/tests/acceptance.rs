//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Criterion 10 trains 18 desk-scale models and takes a while.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use adapterforge::adapters::{adapter_param_count, AdapterKind, AdapterLayer, Side, StackMode};
use adapterforge::corpus::{SplitSet, World, DEFAULT_LANGUAGES};
use adapterforge::evaluation::{average_reports, worker_threads, EvalReport, Group};
use adapterforge::experiment::{
    count_parameters, heatmap_file, preset, report_file, run_experiment, stage_dir, DeskBudget, RunOptions,
    CHECKPOINT_FILE, TARGET_DOMAIN,
};
use adapterforge::tensor::{GroupPattern, ParamStore};
use adapterforge::transformer::ModelConfig;
use common::grad_cases::{self, OP_CASES};
use common::laws::{self, Law};

const SEEDS: [u64; 3] = [1, 2, 3];
const PIPELINE: [&str; 6] = [
    "base",
    "paracrawl-la",
    "freeze-la+encdec-da",
    "freeze-la+enc-da",
    "freeze-la+dec-da",
    "freeze-la+dec-da+bt",
];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn budgets() -> Law {
    let shape = ModelConfig::base_shape(64_000);
    let desk = ModelConfig::desk(0);
    let budget = DeskBudget::default();
    let langs: Vec<String> = DEFAULT_LANGUAGES.map(String::from).to_vec();
    let lookup = |id: &str| preset(id, &desk, &budget);

    // Oracle: materialize one full-width adapter and count its scalars.
    let mut store = ParamStore::<f32>::new();
    AdapterLayer::install(&mut store, AdapterKind::Language, "x", Side::Encoder, 0, 512, 1024).map_err(err)?;
    let one = store.count(&[GroupPattern::new("la:x")]).map_err(err)?;
    if one != adapter_param_count(512, 1024) {
        return Err(format!("materialized adapter has {one} scalars"));
    }
    // (preset, which count, adapters of size `one`, expected, published rounding)
    let cases = [
        ("single-adapter", "adapters", 12, 12_613_632usize, "12.6"),
        ("multi-la+dec-da", "adapters", 12 * 12 + 4 * 6, 176_590_848, "177"),
        ("multi-la+encdec-da", "adapters", 12 * 12 + 4 * 12, 201_818_112, "202"),
        ("freeze-la+dec-da", "tunable", 6, 6_306_816, "6.3"),
    ];
    let mut shown = Vec::new();
    for (id, which, adapters, expected, rounded) in cases {
        let exp = lookup(id).ok_or_else(|| format!("no preset {id}"))?;
        let c = count_parameters(&exp, &shape, &langs, lookup).map_err(err)?;
        let got = if which == "adapters" { c.adapters } else { c.tunable };
        if got != expected || adapters * one != expected {
            return Err(format!("{id}: counted {got}, oracle {}, expected {expected}", adapters * one));
        }
        let m = got as f64 / 1e6;
        let printed = if rounded.contains('.') { format!("{m:.1}") } else { format!("{m:.0}") };
        if printed != rounded {
            return Err(format!("{id}: {printed}M does not read as {rounded}M"));
        }
        shown.push(format!("{id} {m:.1}M"));
    }
    Ok(shown.join(", "))
}

fn gradients() -> Law {
    for (name, case) in OP_CASES {
        case().map_err(|e| format!("{name}: {e}"))?;
    }
    for mode in [StackMode::SerialNewLn, StackMode::MadX] {
        grad_cases::full_model(mode).map_err(|e| format!("stacked model ({mode:?}): {e}"))?;
    }
    Ok(format!(
        "{} op cases at {:.0e}, stacked width-8 model in both stacking modes at {:.0e}",
        OP_CASES.len(),
        grad_cases::OP_TOL,
        grad_cases::MODEL_TOL
    ))
}

fn medical(reports: &[EvalReport]) -> Result<EvalReport, String> {
    reports
        .iter()
        .find(|r| r.domain == TARGET_DOMAIN)
        .cloned()
        .ok_or_else(|| "no medical report".to_string())
}

fn group(r: &EvalReport, g: Group) -> Result<(f64, f64), String> {
    let s = r.group(g).ok_or_else(|| format!("{} lacks {}", r.model, g.label()))?;
    Ok((s.bleu, s.on_target_pct.unwrap_or(f64::NAN)))
}

/// Trains the pipeline for every seed and checks the four directional
/// effects on seed-averaged medical reports.
fn directional_effects(world: &World, splits: &SplitSet, out: &Path) -> Law {
    let desk = ModelConfig::desk(0);
    let budget = DeskBudget::default();
    let mut runs: BTreeMap<&str, Vec<EvalReport>> = BTreeMap::new();
    for seed in SEEDS {
        let root = out.join(format!("seed-{seed}"));
        for id in PIPELINE {
            let exp = preset(id, &desk, &budget).ok_or_else(|| format!("no preset {id}"))?;
            let opts = RunOptions {
                evaluate: id != "base",
                threads: worker_threads(),
                ..RunOptions::new(seed)
            };
            let t = Instant::now();
            let r = run_experiment(&exp, world, splits, &root, &opts).map_err(|e| format!("{id} seed {seed}: {e}"))?;
            eprintln!("    seed {seed} {id}: {} updates in {:.0}s", r.training.updates, t.elapsed().as_secs_f64());
            if id != "base" {
                runs.entry(id).or_default().push(medical(&r.reports)?);
            }
        }
    }
    let mean = |id: &str| average_reports(&runs[id]).map_err(err);
    let pla = mean("paracrawl-la")?;
    let encdec = mean("freeze-la+encdec-da")?;
    let enc = mean("freeze-la+enc-da")?;
    let dec = mean("freeze-la+dec-da")?;
    let dec_bt = mean("freeze-la+dec-da+bt")?;

    let (pla_inin, _) = group(&pla, Group::InIn)?;
    let (_, pla_inout_ot) = group(&pla, Group::InOut)?;
    let (encdec_inin, _) = group(&encdec, Group::InIn)?;
    let (_, encdec_inout_ot) = group(&encdec, Group::InOut)?;
    let (dec_outin, _) = group(&dec, Group::OutIn)?;
    let (enc_outin, _) = group(&enc, Group::OutIn)?;
    let (dec_inout, _) = group(&dec, Group::InOut)?;
    let (enc_inout, _) = group(&enc, Group::InOut)?;
    let (dec_outout, _) = group(&dec, Group::OutOut)?;
    let (bt_outout, _) = group(&dec_bt, Group::OutOut)?;

    let checks = [
        ("a", encdec_inin > pla_inin, format!("in→in {encdec_inin:.1} vs {pla_inin:.1}")),
        (
            "b",
            pla_inout_ot - encdec_inout_ot >= 15.0,
            format!("in→out on-target {encdec_inout_ot:.0}% vs {pla_inout_ot:.0}%"),
        ),
        (
            "c",
            dec_outin > enc_outin && dec_inout < enc_inout,
            format!("dec/enc out→in {dec_outin:.1}/{enc_outin:.1}, in→out {dec_inout:.1}/{enc_inout:.1}"),
        ),
        ("d", bt_outout > dec_outout, format!("out→out +bt {bt_outout:.1} vs {dec_outout:.1}")),
    ];
    let detail = checks
        .iter()
        .map(|(k, ok, s)| format!("({k}) {} {s}", if *ok { "ok" } else { "NO" }))
        .collect::<Vec<_>>()
        .join("; ");
    if checks.iter().all(|(_, ok, _)| *ok) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

/// Reruns one preset from the same parent and seed in a fresh directory
/// and compares checkpoint, report and heatmap byte for byte.
fn determinism(world: &World, splits: &SplitSet, out: &Path) -> Law {
    let id = "freeze-la+dec-da";
    let seed = SEEDS[0];
    let first = out.join(format!("seed-{seed}"));
    let again = out.join("rerun");
    if !stage_dir(&first, id).join(CHECKPOINT_FILE).exists() {
        return Err(format!("no first run of {id} to compare against"));
    }
    copy_dir(&stage_dir(&first, "paracrawl-la"), &stage_dir(&again, "paracrawl-la")).map_err(err)?;
    let exp = preset(id, &ModelConfig::desk(0), &DeskBudget::default()).ok_or("no preset")?;
    let opts = RunOptions {
        threads: worker_threads(),
        ..RunOptions::new(seed)
    };
    run_experiment(&exp, world, splits, &again, &opts).map_err(err)?;
    let mut compared = 0;
    for file in [CHECKPOINT_FILE.to_string(), report_file(TARGET_DOMAIN), heatmap_file(TARGET_DOMAIN)] {
        let a = fs::read(stage_dir(&first, id).join(&file)).map_err(err)?;
        let b = fs::read(stage_dir(&again, id).join(&file)).map_err(err)?;
        if a != b {
            return Err(format!("{file} differs between runs"));
        }
        compared += a.len();
    }
    let report: EvalReport = serde_json::from_slice(&fs::read(stage_dir(&again, id).join(report_file(TARGET_DOMAIN))).map_err(err)?)
        .map_err(err)?;
    Ok(format!(
        "{id} seed {seed}: checkpoint, report ({} routes) and heatmap identical, {compared} bytes",
        report.routes.len()
    ))
}

struct Criterion<'a> {
    number: usize,
    name: &'static str,
    limit: Duration,
    check: Box<dyn FnOnce() -> Law + 'a>,
}

fn main() -> ExitCode {
    let (world, splits) = laws::desk_corpus();
    let out = tempfile::tempdir().expect("temporary directory");
    let (w, s, o) = (&world, &splits, out.path());
    let min = |m: u64| Duration::from_secs(60 * m);
    let sec = Duration::from_secs;
    let criteria: Vec<Criterion> = vec![
        Criterion { number: 1, name: "parameter budgets", limit: sec(1), check: Box::new(budgets) },
        Criterion { number: 2, name: "gradient suite", limit: sec(60), check: Box::new(gradients) },
        Criterion { number: 3, name: "identity at init", limit: sec(10), check: Box::new(laws::identity_at_init) },
        Criterion {
            number: 4,
            name: "freeze integrity",
            limit: min(5),
            check: Box::new(move || {
                let frozen = laws::freeze_integrity(w, s, 1000, false)?;
                let unfrozen = laws::freeze_integrity(w, s, 1000, true)?;
                Ok(format!("{frozen}; {unfrozen}"))
            }),
        },
        Criterion { number: 5, name: "routing law", limit: min(1), check: Box::new(move || laws::routing_law(w, s)) },
        Criterion {
            number: 6,
            name: "sampling laws",
            limit: min(1),
            check: Box::new(|| {
                Ok(format!("{}; {}; {}", laws::temperature_law()?, laws::dadrop_law()?, laws::mixing_law()?))
            }),
        },
        Criterion { number: 7, name: "metric oracles", limit: min(2), check: Box::new(laws::metric_law) },
        Criterion { number: 8, name: "beam correctness", limit: sec(30), check: Box::new(laws::beam_law) },
        Criterion { number: 9, name: "split hygiene", limit: min(1), check: Box::new(move || laws::split_hygiene(w, s)) },
        Criterion {
            number: 10,
            name: "directional effects",
            limit: min(120),
            check: Box::new(move || directional_effects(w, s, o)),
        },
        Criterion { number: 11, name: "determinism", limit: min(10), check: Box::new(move || determinism(w, s, o)) },
    ];

    let mut failed = 0;
    for c in criteria {
        let t = Instant::now();
        let mut result = (c.check)();
        let took = t.elapsed();
        if result.is_ok() && took > c.limit {
            result = Err(format!("took {:.1}s, limit {:.0}s", took.as_secs_f64(), c.limit.as_secs_f64()));
        }
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if result.is_err() {
            failed += 1;
        }
        println!("criterion {:>2} {tag} {} ({:.1}s): {detail}", c.number, c.name, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all criteria passed");
        ExitCode::SUCCESS
    }
}
