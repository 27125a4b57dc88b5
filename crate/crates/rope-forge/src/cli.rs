//! Command-line interface: training, searching, fine-tuning, evaluation,
//! the full pipeline, and factor-file utilities.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use crate::corpus::{synthetic, Corpus, Split};
use crate::eval::{passkey_eval, ppl_sweep, CheckpointGenerator};
use crate::pipeline::{
    derive_seed, run_progressive, FactorBundle, PipelineConfig, PipelineError, RUN_DIR_ENV,
};
use crate::rope::{
    ntk_factors, pi_factors, yarn_factors, FactorFile, RotaryConfig, YARN_RAMP_HIGH,
    YARN_RAMP_LOW,
};
use crate::search::{
    baseline_seeds, composed_baseline_seeds, history_csv, run_search_with_seeds,
    PerplexityOracle, SearchSidecar,
};
use crate::tinyformer::{checkpoint, finetune_progressive, init_model, train, train_log_csv};

#[derive(Parser)]
#[command(
    name = "rope-forge",
    about = "Non-uniform rotary position interpolation laboratory: search, progressive extension, and evaluation on a desk-scale transformer",
    version
)]
struct Cli {
    /// JSON file holding a full pipeline configuration (see README).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory; overrides the ROPE_FORGE_RUN_DIR environment variable.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Built-in configuration preset.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Pi,
    Ntk,
    Yarn,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model at its trained context length.
    TrainBase {
        /// Plain-text corpus files; a deterministic sample corpus is
        /// generated under the run directory when omitted.
        #[arg(long, num_args = 0..)]
        corpus: Vec<PathBuf>,
    },
    /// Evolutionary search for rescale factors at a target length.
    Search {
        #[arg(long)]
        target_len: usize,
        /// Checkpoint to search on; defaults to <run-dir>/base.ckpt.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, num_args = 0..)]
        corpus: Vec<PathBuf>,
        /// Output factor file; defaults to <run-dir>/search_<len>.factors.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-stage progressive fine-tune under two factor files.
    Finetune {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        factors1: PathBuf,
        #[arg(long)]
        steps1: Option<usize>,
        #[arg(long)]
        factors2: PathBuf,
        #[arg(long)]
        steps2: Option<usize>,
        #[arg(long, num_args = 0..)]
        corpus: Vec<PathBuf>,
        /// Output checkpoint; defaults to <run-dir>/ft.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sliding-window perplexity across context lengths.
    EvalPpl {
        #[arg(long)]
        ckpt: PathBuf,
        /// Bundle file for per-length factor selection.
        #[arg(long, conflicts_with = "factors")]
        bundle: Option<PathBuf>,
        /// Single factor file applied to every length.
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        docs: usize,
        #[arg(long, num_args = 0..)]
        corpus: Vec<PathBuf>,
        /// Write the CSV report here in addition to printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Passkey retrieval accuracy across context lengths.
    EvalPasskey {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "factors")]
        bundle: Option<PathBuf>,
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full progressive pipeline: searches, fine-tune, secondary search,
    /// recovery searches, bundle assembly, and reports.
    Pipeline {
        #[arg(long, num_args = 0..)]
        corpus: Vec<PathBuf>,
    },
    /// Factor-file utilities.
    Factors {
        #[command(subcommand)]
        action: FactorsCmd,
    },
}

#[derive(Subcommand)]
enum FactorsCmd {
    /// Print a factor file as an aligned table.
    Show { file: PathBuf },
    /// Generate a baseline factor file.
    Gen {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 32)]
        head_dim: usize,
        #[arg(long, default_value_t = 10000.0)]
        base: f64,
        #[arg(long, default_value_t = 128)]
        original_len: usize,
        #[arg(long, default_value_t = 0)]
        start_token: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

/// Parse and dispatch; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn resolve_run_dir(flag: &Option<PathBuf>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.clone();
    }
    if let Ok(dir) = std::env::var(RUN_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from("runs/desk")
}

fn build_config(cli: &Cli) -> CliResult2<PipelineConfig> {
    let run_dir = resolve_run_dir(&cli.run_dir);
    let mut cfg = if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| format!("malformed config {}: {e}", path.display()))?;
        cfg
    } else {
        match cli.preset.unwrap_or(PresetArg::Desk) {
            PresetArg::Desk => PipelineConfig::desk(run_dir.clone(), 0),
            PresetArg::Paper => PipelineConfig::paper(run_dir.clone(), 0),
        }
    };
    if let Some(preset) = cli.preset {
        if cli.config.is_some() {
            // Preset switch on top of an explicit config re-derives targets.
            let base = match preset {
                PresetArg::Desk => PipelineConfig::desk(cfg.run_dir.clone(), cfg.seed),
                PresetArg::Paper => PipelineConfig::paper(cfg.run_dir.clone(), cfg.seed),
            };
            cfg.preset = base.preset;
            cfg.targets = base.targets;
            cfg.eval_lengths = base.eval_lengths;
            cfg.passkey_lengths = base.passkey_lengths;
            cfg.stride = base.stride;
        }
    }
    if cli.run_dir.is_some() || std::env::var(RUN_DIR_ENV).is_ok() || cli.config.is_none() {
        cfg.run_dir = run_dir;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.base_train.seed = seed;
        cfg.finetune.seed = seed.wrapping_add(1);
    }
    Ok(cfg)
}

type CliResult2<T> = Result<T, Box<dyn std::error::Error>>;

/// Ingest the given files, or deterministically generate (and ingest) the
/// bundled sample corpus under the run directory.
fn load_corpus(paths: &[PathBuf], cfg: &PipelineConfig) -> CliResult2<Corpus> {
    let split_seed = derive_seed(cfg.seed, "corpus-split");
    if paths.is_empty() {
        let dir = cfg.run_dir.join("sample_corpus");
        eprintln!(
            "no corpus given; generating {} sample documents in {}",
            cfg.sample_docs,
            dir.display()
        );
        let files = synthetic::write_sample_corpus(
            &dir,
            cfg.sample_docs,
            cfg.sample_doc_bytes,
            derive_seed(cfg.seed, "corpus-sample"),
        )?;
        Ok(Corpus::ingest(&files, cfg.split_ratios, split_seed)?)
    } else {
        Ok(Corpus::ingest(paths, cfg.split_ratios, split_seed)?)
    }
}

fn load_ckpt_or_name_it(path: &Path) -> CliResult2<crate::tinyformer::ModelCheckpoint> {
    if !path.exists() {
        return Err(Box::new(PipelineError::MissingArtifact {
            path: path.display().to_string(),
            hint: "train one first with `rope-forge train-base`".into(),
        }));
    }
    Ok(checkpoint::load(path)?)
}

fn bundle_from_flags(
    bundle: &Option<PathBuf>,
    factors: &Option<PathBuf>,
) -> CliResult2<FactorBundle> {
    match (bundle, factors) {
        (Some(path), _) => Ok(FactorBundle::load(path)?.0),
        (None, Some(path)) => {
            let (_, rf) = FactorFile::load(path)?.into_parts()?;
            Ok(FactorBundle::single(rf))
        }
        (None, None) => Err("one of --bundle or --factors is required".into()),
    }
}

fn execute(cli: Cli) -> CliResult {
    let cfg = build_config(&cli)?;
    match &cli.command {
        Command::TrainBase { corpus } => {
            let corpus = load_corpus(corpus, &cfg)?;
            std::fs::create_dir_all(cfg.run_dir.join("reports"))?;
            let init = init_model(&cfg.model, cfg.base_train.seed)?;
            let out = train(&init, &corpus, &cfg.base_train, None)?;
            let ckpt_path = cfg.run_dir.join("base.ckpt");
            checkpoint::save(&out.checkpoint, &ckpt_path)?;
            std::fs::write(
                cfg.run_dir.join("reports/train_base.csv"),
                train_log_csv(&out.log),
            )?;
            let last = out.log.last().expect("at least one step");
            println!(
                "trained {} steps (final loss {:.4}); wrote {}",
                out.log.len(),
                last.loss,
                ckpt_path.display()
            );
        }
        Command::Search {
            target_len,
            ckpt,
            corpus,
            out,
        } => {
            let ckpt_path = ckpt.clone().unwrap_or_else(|| cfg.run_dir.join("base.ckpt"));
            let model = load_ckpt_or_name_it(&ckpt_path)?;
            let corpus = load_corpus(corpus, &cfg)?;
            let sc = cfg.search_config_public(*target_len, "cli-search");
            let docs = corpus.sample_eval_docs(
                Split::Val,
                cfg.fitness_docs_public(*target_len),
                *target_len,
                derive_seed(cfg.seed, "docs:cli-search"),
            )?;
            let oracle = PerplexityOracle::new(
                &model,
                docs.iter().map(|d| d.to_vec()).collect(),
                *target_len,
            )
            .map_err(|e| e.to_string())?;
            // Searching on a fine-tuned checkpoint composes the baseline
            // seeds with the factors it was tuned under.
            let seeds = match &model.rescale_used {
                Some(prior) if *target_len > prior.target_len() => {
                    composed_baseline_seeds(&model.config.rotary, prior, *target_len)?
                }
                _ => baseline_seeds(&model.config.rotary, *target_len)?,
            };
            let outcome = run_search_with_seeds(&oracle, &model.config.rotary, &sc, &seeds)?;
            let out_path = out
                .clone()
                .unwrap_or_else(|| cfg.run_dir.join(format!("search_{target_len}.factors.json")));
            FactorFile::from_parts(&model.config.rotary, &outcome.best.genome).save(&out_path)?;
            let logs = cfg.run_dir.join("search_logs");
            std::fs::create_dir_all(&logs)?;
            std::fs::write(
                logs.join(format!("cli_search_{target_len}.csv")),
                history_csv(&outcome.history),
            )?;
            let sidecar = SearchSidecar::from_outcome(&outcome, &sc, *target_len);
            std::fs::write(
                logs.join(format!("cli_search_{target_len}.sidecar.json")),
                serde_json::to_string_pretty(&sidecar)? + "\n",
            )?;
            println!(
                "best perplexity {:.4} after {} evaluations; wrote {}",
                outcome.best.fitness().expect("evaluated"),
                outcome.evals_total,
                out_path.display()
            );
        }
        Command::Finetune {
            ckpt,
            factors1,
            steps1,
            factors2,
            steps2,
            corpus,
            out,
        } => {
            let ckpt_path = ckpt.clone().unwrap_or_else(|| cfg.run_dir.join("base.ckpt"));
            let model = load_ckpt_or_name_it(&ckpt_path)?;
            let corpus = load_corpus(corpus, &cfg)?;
            let (_, rf1) = FactorFile::load(factors1)?.into_parts()?;
            let (_, rf2) = FactorFile::load(factors2)?.into_parts()?;
            let out_path = out.clone().unwrap_or_else(|| cfg.run_dir.join("ft.ckpt"));
            let result = finetune_progressive(
                &model,
                &rf1,
                steps1.unwrap_or(cfg.finetune_steps1),
                &rf2,
                steps2.unwrap_or(cfg.finetune_steps2),
                &corpus,
                &cfg.finetune,
            )?;
            checkpoint::save(&result.checkpoint, &out_path)?;
            std::fs::create_dir_all(cfg.run_dir.join("reports"))?;
            std::fs::write(
                cfg.run_dir.join("reports/train_ft.csv"),
                train_log_csv(&result.log),
            )?;
            println!(
                "fine-tuned {} + {} steps; wrote {}",
                steps1.unwrap_or(cfg.finetune_steps1),
                steps2.unwrap_or(cfg.finetune_steps2),
                out_path.display()
            );
        }
        Command::EvalPpl {
            ckpt,
            bundle,
            factors,
            lengths,
            docs,
            corpus,
            out,
        } => {
            let model = load_ckpt_or_name_it(ckpt)?;
            let corpus = load_corpus(corpus, &cfg)?;
            let bundle = bundle_from_flags(bundle, factors)?;
            let report = ppl_sweep(
                &model,
                &corpus,
                lengths,
                &bundle,
                Split::Test,
                *docs,
                cfg.stride,
                derive_seed(cfg.seed, "eval:cli-sweep"),
            )?;
            print!("{}", report.to_table());
            if let Some(path) = out {
                std::fs::write(path, report.to_csv())?;
            }
        }
        Command::EvalPasskey {
            ckpt,
            bundle,
            factors,
            lengths,
            iterations,
            out,
        } => {
            let model = load_ckpt_or_name_it(ckpt)?;
            let bundle = bundle_from_flags(bundle, factors)?;
            let generator = CheckpointGenerator {
                ckpt: &model,
                bundle: &bundle,
            };
            let report = passkey_eval(
                &generator,
                lengths,
                *iterations,
                derive_seed(cfg.seed, "eval:cli-passkey"),
            )?;
            print!("{}", report.to_table());
            if let Some(path) = out {
                std::fs::write(path, report.to_csv())?;
            }
        }
        Command::Pipeline { corpus } => {
            let corpus = load_corpus(corpus, &cfg)?;
            let artifacts = run_progressive(&cfg, &corpus)?;
            for event in &artifacts.events {
                println!("{event}");
            }
            let summary = artifacts.run_dir.join("reports/summary.txt");
            if let Ok(text) = std::fs::read_to_string(&summary) {
                print!("{text}");
            }
            println!("bundle entries: {}", artifacts.bundle.entries().len());
            println!("artifacts in {}", artifacts.run_dir.display());
        }
        Command::Factors { action } => match action {
            FactorsCmd::Show { file } => {
                let factor_file = FactorFile::load(file)?;
                println!(
                    "head_dim {}  base {}  original_len {}  target_len {}  start_token {}",
                    factor_file.head_dim,
                    factor_file.base,
                    factor_file.original_len,
                    factor_file.target_len,
                    factor_file.start_token
                );
                println!("{:>5} {:>12}", "pair", "factor");
                for (i, f) in factor_file.factors.iter().enumerate() {
                    println!("{i:>5} {f:>12.6}");
                }
            }
            FactorsCmd::Gen {
                method,
                ratio,
                head_dim,
                base,
                original_len,
                start_token,
                out,
            } => {
                let rotary = RotaryConfig::new(*head_dim, *base, *original_len)?;
                let rf = match method {
                    MethodArg::Pi => pi_factors(&rotary, *ratio)?,
                    MethodArg::Ntk => ntk_factors(&rotary, *ratio)?,
                    MethodArg::Yarn => yarn_factors(&rotary, *ratio, YARN_RAMP_LOW, YARN_RAMP_HIGH)?,
                };
                let rf = rf.with_start_token(*start_token)?;
                let name = match method {
                    MethodArg::Pi => "pi",
                    MethodArg::Ntk => "ntk",
                    MethodArg::Yarn => "yarn",
                };
                let out_path = out
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(format!("{name}_{ratio}.factors.json")));
                FactorFile::from_parts(&rotary, &rf).save(&out_path)?;
                println!("wrote {}", out_path.display());
            }
        },
    }
    Ok(())
}
