use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use surgscene::dataset_io::{self, FoldSplit, LoadOptions};
use surgscene::evaluation::{self, EvalReport};
use surgscene::gradcheck::{self, GradModule};
use surgscene::grammar::{self, FrameSemantics};
use surgscene::harness::{
    self, checkpoint, prepare, train_prepared, CrossvalReport, ExperimentConfig, RunManifest, SynthConfig,
};
use surgscene::toy_model::Ablation;
use surgscene::vocab::{load_label_space, LabelSpace};
use surgscene::SCHEMA_VERSION;

#[derive(Debug, Parser, Serialize)]
#[command(name = "surgscene", about = "Structured surgical scene reasoning and grounding toolkit")]
struct Cli {
    /// Label space file (JSON); defaults to the one shipped with the data, then the toy space.
    #[arg(long, global = true)]
    label_space: Option<PathBuf>,
    /// Overrides the seed of config-driven commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the loss history of training runs to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    /// Fail on the first invalid record.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Validate an annotation directory and print its statistics.
    ValidateDataset {
        /// Dataset directory.
        #[arg(long)]
        root: PathBuf,
    },
    /// Parse structured output text into semantics and [SEG] markers.
    Parse {
        /// A JSON array of output strings, or one raw output.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a semantics file into structured output text.
    Render {
        /// JSON array of {"frame", "phase", "triplets": [ids], "think"?}.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// nn, fusion, losses, toy_model or all.
        #[arg(long, default_value = "all", value_parser = parse_grad_module)]
        module: ModuleArg,
        /// Random cases per op.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Generate a synthetic dataset.
    Synth {
        /// Experiment config (JSON); its `synth` section and seed are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all folds but one and evaluate on the held-out fold.
    Train {
        /// Experiment config (JSON); the standard config when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// full, no_residual_fusion, no_per_frame_token, no_phase, no_triplet or no_grounding.
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: Ablation,
        /// Held-out fold; overrides the config.
        #[arg(long)]
        fold: Option<u32>,
        /// Directory for manifest.json, the checkpoint and predictions/.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction directory against ground truth.
    Eval {
        /// Prediction directory in the dataset layout, with optional scores/.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth dataset directory.
        #[arg(long)]
        gt: PathBuf,
        /// Fold config; adds per-fold metrics and their mean and std.
        #[arg(long)]
        folds: Option<PathBuf>,
        /// Report file (JSON); the table is always printed.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and evaluate every fold and aggregate.
    Crossval {
        /// Experiment config (JSON); the standard config when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// full, no_residual_fusion, no_per_frame_token, no_phase, no_triplet or no_grounding.
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: Ablation,
        /// Report file (JSON); the table is always printed.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print a run manifest, cross-validation report or evaluation report.
    Report {
        /// A manifest.json, crossval report or eval report.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy)]
enum ModuleArg {
    All,
    One(GradModule),
}

impl Serialize for ModuleArg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ModuleArg::All => s.serialize_str("all"),
            ModuleArg::One(m) => m.serialize(s),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Format {
    Table,
    Json,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_grad_module(s: &str) -> Result<ModuleArg, String> {
    if s == "all" {
        return Ok(ModuleArg::All);
    }
    GradModule::parse(s).map(ModuleArg::One).ok_or_else(|| {
        let names: Vec<&str> = GradModule::ALL.iter().map(|m| m.name()).collect();
        format!("expected all or one of {}", names.join(", "))
    })
}

/// A failure that is not an error of the tool itself: invalid data,
/// failed checks.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ValidationFailed(String);

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn label_space(cli: &Cli, fallback: Option<&Path>) -> Result<LabelSpace> {
    if let Some(p) = &cli.label_space {
        return load_label_space(p).with_context(|| format!("label space {}", p.display()));
    }
    if let Some(p) = fallback.filter(|p| p.exists()) {
        return load_label_space(p).with_context(|| format!("label space {}", p.display()));
    }
    Ok(LabelSpace::toy())
}

fn experiment(cli: &Cli, path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => ExperimentConfig::standard(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(p) = &cli.label_space {
        config.label_space = Some(p.clone());
    }
    config.validate()?;
    Ok(config)
}

fn print_config(value: &impl Serialize) {
    eprintln!("resolved config: {}", serde_json::to_string(value).expect("config serializes"));
}

#[derive(Deserialize)]
struct SemanticsRecord {
    frame: usize,
    phase: usize,
    triplets: Vec<usize>,
    #[serde(default)]
    think: String,
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::ValidateDataset { root } => {
            let space = label_space(cli, Some(&root.join(dataset_io::LABEL_SPACE_FILE)))?;
            print_config(cli);
            let loaded = dataset_io::load_dataset(root, &space, LoadOptions { strict: cli.strict })
                .map_err(|e| ValidationFailed(e.to_string()))?;
            for e in &loaded.report.errors {
                eprintln!("invalid record: {e}");
            }
            println!("{}", serde_json::to_string_pretty(&loaded.stats)?);
            if !loaded.report.is_ok() {
                bail!(ValidationFailed(format!("{} invalid records", loaded.report.errors.len())));
            }
            Ok(())
        }
        Command::Parse { input, out } => {
            let space = label_space(cli, None)?;
            print_config(cli);
            let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let texts: Vec<String> = serde_json::from_str(&text).unwrap_or_else(|_| vec![text]);
            let mut parsed = Vec::with_capacity(texts.len());
            for (i, t) in texts.iter().enumerate() {
                let output = grammar::parse_frame(t, i, &space).map_err(|e| ValidationFailed(format!("output {i}: {e}")))?;
                parsed.push(output);
            }
            write_out(out.as_deref(), &serde_json::to_string_pretty(&parsed)?)
        }
        Command::Render { input, out } => {
            let space = label_space(cli, None)?;
            print_config(cli);
            let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let records: Vec<SemanticsRecord> =
                serde_json::from_str(&text).map_err(|e| ValidationFailed(format!("{}: {e}", input.display())))?;
            let mut rendered = Vec::with_capacity(records.len());
            for r in &records {
                let triplets = r
                    .triplets
                    .iter()
                    .map(|&id| space.triplet_components(id))
                    .collect::<Result<_, _>>()
                    .map_err(|e| ValidationFailed(format!("frame {}: {e}", r.frame)))?;
                let sem = FrameSemantics {
                    frame_index: r.frame,
                    phase: r.phase,
                    triplets,
                };
                let t = grammar::render(&sem, &r.think, &space)
                    .map_err(|e| ValidationFailed(format!("frame {}: {e}", r.frame)))?;
                rendered.push(t);
            }
            write_out(out.as_deref(), &serde_json::to_string_pretty(&rendered)?)
        }
        Command::Gradcheck { module, seeds } => {
            print_config(cli);
            let checks = match module {
                ModuleArg::All => gradcheck::check_all(*seeds),
                ModuleArg::One(m) => gradcheck::check_module(*m, *seeds),
            };
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                bail!(ValidationFailed(format!(
                    "{failed} of {} gradient checks exceed {:e}",
                    checks.len(),
                    gradcheck::FD_TOLERANCE
                )));
            }
            Ok(())
        }
        Command::Synth { config, out } => {
            let exp = experiment(cli, config.as_deref())?;
            let space = exp.space()?;
            let synth = SynthConfig {
                seed: exp.seed,
                ..exp.synth.clone()
            };
            print_config(&synth);
            let data = harness::generate_synthetic(&synth, &space)?;
            data.write(out, &space)?;
            eprintln!("wrote {} frames of {} videos to {}", data.frames.len(), data.video_ids().len(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            ablation,
            fold,
            out,
        } => {
            let mut exp = experiment(cli, config.as_deref())?;
            if let Some(f) = fold {
                exp.train.test_fold = *f;
            }
            print_config(&exp);
            let data = prepare(&exp)?;
            let run = train_prepared(&exp, &data, *ablation)?;
            if cli.verbose {
                for r in &run.manifest.loss_history {
                    eprintln!("step {:>5} loss {:.6}", r.step, r.total);
                }
            }
            eprintln!("trained {} steps in {:.1} s", exp.train.steps, run.seconds);
            println!("{}", run.manifest.metrics.table());
            match out {
                Some(dir) => {
                    write_out(Some(&dir.join("manifest.json")), &run.manifest.to_json())?;
                    let shape = surgscene::toy_model::ModelShape::new(data.grid[2], &data.space);
                    checkpoint::save_checkpoint(&run.model, shape, &dir.join("checkpoint"))?;
                    harness::write_predictions(&dir.join("predictions"), &data, &run.predictions)?;
                    eprintln!("wrote manifest, checkpoint and predictions to {}", dir.display());
                }
                None => println!("{}", run.manifest.to_json()),
            }
            Ok(())
        }
        Command::Eval {
            pred,
            gt,
            folds,
            report,
        } => {
            let space = label_space(cli, Some(&gt.join(dataset_io::LABEL_SPACE_FILE)))?;
            print_config(cli);
            let options = LoadOptions { strict: cli.strict };
            let invalid = |what: &str, e: dataset_io::DatasetError| ValidationFailed(format!("{what}: {e}"));
            let gt_data = dataset_io::load_dataset(gt, &space, options).map_err(|e| invalid("ground truth", e))?;
            let pred_data = dataset_io::load_dataset(pred, &space, options).map_err(|e| invalid("predictions", e))?;
            for e in gt_data.report.errors.iter().chain(&pred_data.report.errors) {
                eprintln!("skipped invalid record: {e}");
            }
            let mut scores = BTreeMap::new();
            for video in &pred_data.stats.videos {
                if let Some(s) = evaluation::read_scores(pred, video)? {
                    scores.insert(video.clone(), s);
                }
            }
            let folds = folds.as_deref().map(FoldSplit::load).transpose()?;
            let result = evaluation::evaluate_report(&pred_data, &scores, &gt_data, &space, folds.as_ref())
                .map_err(|e| ValidationFailed(e.to_string()))?;
            let unscored = gt_data.stats.videos.iter().filter(|v| !result.videos.contains(v)).count();
            if unscored > 0 {
                eprintln!("{unscored} ground-truth videos not evaluated");
            }
            println!("{}", result.table());
            if let Some(path) = report {
                write_out(Some(path), &result.to_json())?;
            }
            Ok(())
        }
        Command::Crossval {
            config,
            ablation,
            report,
        } => {
            let exp = experiment(cli, config.as_deref())?;
            print_config(&exp);
            let result = harness::crossval(&exp, *ablation)?;
            println!("{}", result.summary.table());
            if let Some(path) = report {
                write_out(Some(path), &result.to_json())?;
            }
            Ok(())
        }
        Command::Report { manifest, format } => {
            print_config(cli);
            let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let doc = Document::from_json(&text).ok_or_else(|| {
                ValidationFailed(format!(
                    "{} is not a run manifest, cross-validation report or evaluation report",
                    manifest.display()
                ))
            })?;
            match format {
                Format::Json => println!("{}", doc.to_json()),
                Format::Table => println!("{}", doc.table()),
            }
            Ok(())
        }
    }
}

enum Document {
    Run(Box<RunManifest>),
    Crossval(Box<CrossvalReport>),
    Eval(Box<EvalReport>),
}

impl Document {
    fn from_json(text: &str) -> Option<Self> {
        if let Ok(m) = serde_json::from_str::<RunManifest>(text) {
            return Some(Document::Run(Box::new(m)));
        }
        if let Ok(r) = serde_json::from_str::<CrossvalReport>(text) {
            return Some(Document::Crossval(Box::new(r)));
        }
        serde_json::from_str::<EvalReport>(text)
            .ok()
            .map(|r| Document::Eval(Box::new(r)))
    }

    fn to_json(&self) -> String {
        match self {
            Document::Run(m) => m.to_json(),
            Document::Crossval(r) => r.to_json(),
            Document::Eval(r) => r.to_json(),
        }
    }

    fn table(&self) -> String {
        match self {
            Document::Run(m) => format!(
                "ablation {}  test fold {}  seed {}  final loss {:.6}  digest {}\n{}",
                m.ablation,
                m.fold,
                m.seed,
                m.final_loss.total,
                m.parameter_digest,
                m.metrics.table()
            ),
            Document::Crossval(r) => {
                let mut out = format!("ablation {}  {} folds\n", r.ablation, r.folds.len());
                for f in &r.folds {
                    out += &format!("fold {}\n{}\n", f.fold, f.metrics.table());
                }
                out + &format!("mean ± std over folds\n{}", r.summary.table())
            }
            Document::Eval(r) => r.table(),
        }
    }
}

fn version() -> &'static str {
    let text = format!("{} (schema {SCHEMA_VERSION})", env!("CARGO_PKG_VERSION"));
    Box::leak(text.into_boxed_str())
}

fn main() -> ExitCode {
    let matches = Cli::command().version(version()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ValidationFailed>().is_none() && cli.verbose {
                eprintln!("{e:?}");
            }
            ExitCode::from(1)
        }
    }
}
