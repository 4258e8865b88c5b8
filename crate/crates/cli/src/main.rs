use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adapterforge::corpus::{read_corpus, write_corpus, CorpusManifest, DEFAULT_LANGUAGES};
use adapterforge::evaluation::{average_reports, render_table, worker_threads, EvalReport, Group};
use adapterforge::experiment::{
    count_parameters, preset, presets, read_report, report_file, run_experiment, run_pipeline,
    DeskBudget, Experiment, RunOptions,
};
use adapterforge::transformer::ModelConfig;
use adapterforge::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Vocabulary size assumed when counting parameters at full model shape.
const PAPER_VOCAB: usize = 64_000;

#[derive(Parser)]
#[command(name = "adapterforge", version, about = "Language and domain adapters for multilingual translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its splits.
    Generate {
        /// Manifest (TOML); the built-in desk manifest when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the built-in desk manifest.
    Manifest,
    /// List presets.
    Presets,
    /// Print a preset as an editable experiment file.
    ShowPreset { id: String },
    /// Train and evaluate one experiment.
    Run(RunArgs),
    /// Run several experiments in order, parents first.
    Pipeline {
        /// Comma-separated preset ids.
        #[arg(long, value_delimiter = ',', required = true)]
        stages: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Merge reports into one comparison table.
    Report {
        /// Experiment directories or report files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "medical")]
        domain: String,
        /// Model id to show deltas against.
        #[arg(long)]
        baseline: Option<String>,
        /// Also write group means as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// Experiment file instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
}

#[derive(Args)]
struct CommonArgs {
    /// Corpus directory written by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Root holding one directory per experiment.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Only CPU execution exists.
    #[arg(long, value_enum, default_value_t = Device::None)]
    device: Device,
}

#[derive(Clone, Copy, ValueEnum)]
enum Device {
    None,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    Desk,
    PaperShapeCountOnly,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownGroup(_) | Error::Routing(_) | Error::Corpus(_) => 2,
        Error::MissingPrerequisite(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Error> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn desk_shape() -> ModelConfig {
    ModelConfig::desk(0)
}

fn lookup(id: &str) -> Result<Experiment, Error> {
    preset(id, &desk_shape(), &DeskBudget::default())
        .ok_or_else(|| Error::Config(format!("unknown preset `{id}`; see `adapterforge presets`")))
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Generate { manifest, out } => cmd_generate(manifest.as_deref(), &out),
        Command::Manifest => {
            print!("{}", CorpusManifest::desk().to_toml()?);
            Ok(())
        }
        Command::Presets => {
            for e in presets(&desk_shape(), &DeskBudget::default()) {
                let parent = e.parent.as_deref().unwrap_or("-");
                println!("{:<32} {:<14} {}", e.id, parent, e.description);
            }
            Ok(())
        }
        Command::ShowPreset { id } => {
            print!("{}", lookup(&id)?.to_toml()?);
            Ok(())
        }
        Command::Run(args) => cmd_run(args),
        Command::Pipeline { stages, common } => {
            let exps = stages.iter().map(|s| lookup(s)).collect::<Result<Vec<_>, _>>()?;
            let (_, world, splits) = read_corpus(need(&common.data, "data")?)?;
            let out = need(&common.out, "out")?;
            let opts = options(&common);
            for r in run_pipeline(&exps, &world, &splits, out, &opts)? {
                print_outcome(&r.reports, &r.checkpoint);
            }
            Ok(())
        }
        Command::Report {
            inputs,
            domain,
            baseline,
            csv,
        } => cmd_report(&inputs, &domain, baseline.as_deref(), csv.as_deref()),
    }
}

fn cmd_generate(manifest: Option<&Path>, out: &Path) -> Result<(), Error> {
    let m = match manifest {
        Some(p) => CorpusManifest::from_toml(
            &fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        )?,
        None => CorpusManifest::desk(),
    };
    let (world, splits) = m.generate()?;
    write_corpus(out, &m, &world, &splits)?;
    for (id, d) in &splits.domains {
        println!("{id:<10} train {:>5}  valid {:>3}  test {:>3}", d.train.len(), d.valid.len(), d.test.len());
    }
    println!("vocabulary {} tokens, written to {}", world.vocab.size(), out.display());
    Ok(())
}

fn options(c: &CommonArgs) -> RunOptions {
    let Device::None = c.device;
    RunOptions {
        threads: worker_threads(),
        ..RunOptions::new(c.seed)
    }
}

fn print_outcome(reports: &[EvalReport], ckpt: &Path) {
    println!("checkpoint {}", ckpt.display());
    for r in reports {
        println!("[{}]", r.domain);
        match render_table(std::slice::from_ref(r), None) {
            Ok(t) => print!("{t}"),
            Err(e) => eprintln!("{e}"),
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let exp = match (&args.preset, &args.config) {
        (Some(id), _) => lookup(id)?,
        (None, Some(path)) => Experiment::from_toml(
            &fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?,
        )?,
        (None, None) => unreachable!("clap requires one"),
    };
    exp.validate()?;
    if args.scale == Scale::PaperShapeCountOnly {
        let shape = ModelConfig::base_shape(PAPER_VOCAB);
        let langs: Vec<String> = DEFAULT_LANGUAGES.map(String::from).to_vec();
        let c = count_parameters(&exp, &shape, &langs, |id| lookup(id).ok())?;
        let m = |n: usize| n as f64 / 1e6;
        println!("{} at width {} with {}+{} layers", exp.id, shape.d_model, shape.enc_layers, shape.dec_layers);
        println!("  adapters installed  {:>12}  ({:.1}M)", c.adapters, m(c.adapters));
        println!("  tunable             {:>12}  ({:.1}M)", c.tunable, m(c.tunable));
        println!("  base model          {:>12}  ({:.1}M)", c.base, m(c.base));
        return Ok(());
    }
    let (_, world, splits) = read_corpus(need(&args.common.data, "data")?)?;
    let out = need(&args.common.out, "out")?;
    let r = run_experiment(&exp, &world, &splits, out, &options(&args.common))?;
    println!(
        "{}: {} updates, best validation NLL {:.4} at update {}",
        exp.id,
        r.training.updates,
        r.training.best_val_nll.unwrap_or(f64::NAN),
        r.training.best_step
    );
    print_outcome(&r.reports, &r.checkpoint);
    Ok(())
}

fn collect_reports(inputs: &[PathBuf], domain: &str) -> Result<Vec<EvalReport>, Error> {
    let mut out = Vec::new();
    for p in inputs {
        let file = if p.is_dir() { p.join(report_file(domain)) } else { p.clone() };
        if !file.exists() {
            return Err(Error::Config(format!("no {domain} report at {}", file.display())));
        }
        out.push(read_report(&file)?);
    }
    Ok(out)
}

fn cmd_report(inputs: &[PathBuf], domain: &str, baseline: Option<&str>, csv: Option<&Path>) -> Result<(), Error> {
    let reports = collect_reports(inputs, domain)?;
    // Runs of the same model (e.g. several seeds) are averaged route-wise.
    let mut by_model: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in reports {
        if !by_model.contains_key(&r.model) {
            order.push(r.model.clone());
        }
        by_model.entry(r.model.clone()).or_default().push(r);
    }
    let merged = order
        .iter()
        .map(|m| {
            let runs = &by_model[m];
            if runs.len() == 1 {
                Ok(runs[0].clone())
            } else {
                average_reports(runs)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    print!("{}", render_table(&merged, baseline)?);
    if let Some(path) = csv {
        let mut text = String::from("model,group,routes,bleu,chrf,on_target_pct\n");
        for r in &merged {
            for g in Group::ORDER {
                if let Some(s) = r.group(g) {
                    let ot = s.on_target_pct.map(|p| format!("{p:.2}")).unwrap_or_default();
                    text.push_str(&format!("{},{},{},{:.4},{:.4},{ot}\n", r.model, g.label(), s.routes, s.bleu, s.chrf));
                }
            }
        }
        fs::write(path, text)?;
    }
    Ok(())
}
