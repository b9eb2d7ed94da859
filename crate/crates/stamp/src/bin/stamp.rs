//! Command-line entry point: one configuration file, one subcommand per
//! pipeline stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stamp::cohort::{build_cohort, load_clini_table, load_slide_table};
use stamp::config::{load_config, ModelingCommand, ModelingConfig, PipelineConfig};
use stamp::error::{Result, StampError};
use stamp::features::ToyExtractor;
use stamp::heatmap::run_heatmaps;
use stamp::model::{crossval, deploy, load_bundle, train_full, ArchConfig, TrainConfig};
use stamp::preprocess::run_preprocessing;
use stamp::splits::make_splits;
use stamp::stats::aggregate_folds;

#[derive(Parser)]
#[command(
    name = "stamp",
    version,
    about = "From whole-slide images to patient-level biomarker predictions"
)]
struct Cli {
    /// Path to the configuration file.
    #[arg(long, global = true, default_value = "config.yaml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check configured resources and create the output directories.
    Setup,
    /// Show the configuration settings, fully resolved.
    Config,
    /// Tile, quality-control, normalize and embed every slide.
    Preprocess,
    /// Train models using cross-validation and write per-fold predictions.
    Crossval,
    /// Train one model on the full cohort and export it.
    Train,
    /// Apply an exported model to a cohort of feature files.
    Deploy,
    /// Aggregate prediction files into metrics, curves and plots.
    Statistics,
    /// Render attribution heatmaps and export the top-scoring tiles.
    Heatmaps,
    #[command(external_subcommand)]
    Other(Vec<String>),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(fix) = e.remediation() {
                eprintln!("solution: {fix}");
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Other(args) = &cli.command {
        let name = args.first().map(String::as_str).unwrap_or("").to_string();
        return Err(StampError::UnknownCommand(name));
    }
    let config = load_config(&cli.config)?;
    match &cli.command {
        Command::Setup => setup(&config),
        Command::Config => {
            print!("{}", config.to_yaml());
            Ok(())
        }
        Command::Preprocess => preprocess(&config),
        Command::Crossval => run_crossval(&config),
        Command::Train => run_train(&config),
        Command::Deploy => run_deploy(&config),
        Command::Statistics => {
            let sc = config.statistics()?;
            std::fs::create_dir_all(&sc.output_dir)?;
            let report = aggregate_folds(
                &sc.pred_csvs,
                &sc.target_label,
                &sc.true_class,
                &sc.output_dir,
                sc.seed,
            )?;
            println!(
                "auroc: {:.4} [{:.4}, {:.4}]",
                report.auroc, report.auroc_ci95.0, report.auroc_ci95.1
            );
            println!(
                "auprc: {:.4} [{:.4}, {:.4}]",
                report.auprc, report.auprc_ci95.0, report.auprc_ci95.1
            );
            println!("statistics written to {}", sc.output_dir.display());
            Ok(())
        }
        Command::Heatmaps => {
            let hc = config.heatmaps()?;
            let dirs = run_heatmaps(&hc)?;
            for d in &dirs {
                println!("{}", d.display());
            }
            Ok(())
        }
        Command::Other(_) => unreachable!("handled above"),
    }
}

/// Verify files the configured commands will need and create their output
/// directories. Nothing is fetched from the network.
fn setup(config: &PipelineConfig) -> Result<()> {
    if config.raw.contains_key("preprocessing") {
        let pc = config.preprocessing()?;
        std::fs::create_dir_all(&pc.output_dir)?;
        std::fs::create_dir_all(&pc.cache_dir)?;
        if !pc.wsi_dir.is_dir() {
            return Err(StampError::ConfigFileNotFound(pc.wsi_dir));
        }
        if pc.norm {
            let template = pc.normalization_template.ok_or_else(|| {
                StampError::MissingKeys(vec!["preprocessing.normalization_template".into()])
            })?;
            if !template.is_file() {
                return Err(StampError::ConfigFileNotFound(template));
            }
            println!("normalization template: {}", template.display());
        }
        if let Some(model) = &pc.model_path {
            if model.is_file() {
                println!("extractor model present: {}", model.display());
            } else {
                println!(
                    "warning: extractor model {} not found; the built-in extractor will be used",
                    model.display()
                );
            }
        }
        println!("preprocessing directories ready");
    }
    if config.raw.contains_key("statistics") {
        let sc = config.statistics()?;
        std::fs::create_dir_all(&sc.output_dir)?;
    }
    println!("setup complete");
    Ok(())
}

fn preprocess(config: &PipelineConfig) -> Result<()> {
    let pc = config.preprocessing()?;
    if pc.model_path.is_some() {
        println!("note: external extractor backends are not bundled; using the built-in extractor");
    }
    let extractor = ToyExtractor::new();
    let summary = run_preprocessing(&pc, &extractor)?;
    println!(
        "{} slides: {} processed, {} already cached, {} empty, {} failed ({:.1}s)",
        summary.n_slides,
        summary.n_processed,
        summary.n_skipped_existing,
        summary.n_empty,
        summary.n_failed,
        summary.runtime_s
    );
    Ok(())
}

fn training_knobs(mc: &ModelingConfig) -> (ArchConfig, TrainConfig) {
    let mut arch = ArchConfig::default();
    let mut tc = TrainConfig {
        seed: mc.seed,
        ..TrainConfig::default()
    };
    let a = &mc.advanced;
    if let Some(v) = a.dim_model {
        arch.dim_model = v;
    }
    if let Some(v) = a.n_layers {
        arch.n_layers = v;
    }
    if let Some(v) = a.n_heads {
        arch.n_heads = v;
    }
    if let Some(v) = a.dropout {
        arch.dropout = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.max_bag_size {
        tc.max_bag_size = v;
    }
    if let Some(v) = a.max_epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = a.patience {
        tc.patience = v;
    }
    if let Some(v) = a.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        tc.weight_decay = v;
    }
    (arch, tc)
}

fn load_modeling_cohort(mc: &ModelingConfig) -> Result<stamp::cohort::Cohort> {
    let slide_table = load_slide_table(&mc.slide_table)?;
    let clini_table = load_clini_table(
        &mc.clini_table,
        &mc.target_label,
        mc.categories.as_deref(),
    )?;
    build_cohort(
        &slide_table,
        &clini_table,
        &mc.feature_dir,
        &mc.target_label,
        &mc.cat_labels,
        &mc.cont_labels,
    )
}

fn run_crossval(config: &PipelineConfig) -> Result<()> {
    let mc = config.modeling(ModelingCommand::Crossval)?;
    let cohort = load_modeling_cohort(&mc)?;
    std::fs::create_dir_all(&mc.output_dir)?;
    let plan = make_splits(&cohort, mc.n_splits, mc.seed, &mc.output_dir)?;
    let (arch, tc) = training_knobs(&mc);
    let preds = crossval(&cohort, &plan, &arch, &tc, &mc.output_dir)?;
    for p in &preds {
        println!("{}", p.display());
    }
    Ok(())
}

fn run_train(config: &PipelineConfig) -> Result<()> {
    let mc = config.modeling(ModelingCommand::Train)?;
    let cohort = load_modeling_cohort(&mc)?;
    std::fs::create_dir_all(&mc.output_dir)?;
    let (arch, tc) = training_knobs(&mc);
    let bundle_path = train_full(&cohort, &arch, &tc, &mc.output_dir)?;
    println!("{}", bundle_path.display());
    Ok(())
}

fn run_deploy(config: &PipelineConfig) -> Result<()> {
    let mc = config.modeling(ModelingCommand::Deploy)?;
    let model_path = mc
        .model_path
        .as_ref()
        .expect("deploy validation requires model_path");
    let feature_dir = mc
        .deploy_feature_dir
        .as_ref()
        .expect("deploy validation requires deploy_feature_dir");
    let bundle = load_bundle(model_path)?;
    let slide_table = load_slide_table(&mc.slide_table)?;
    // a deployment cohort may lack clinical truth entirely
    let clini_table = if mc.clini_table.is_file() {
        Some(load_clini_table(
            &mc.clini_table,
            &bundle.target_label,
            Some(&bundle.categories),
        )?)
    } else {
        println!(
            "note: no clinical table at {}; predictions without ground truth",
            mc.clini_table.display()
        );
        None
    };
    std::fs::create_dir_all(&mc.output_dir)?;
    let preds = deploy(
        &bundle,
        &slide_table,
        clini_table.as_ref(),
        feature_dir,
        &mc.output_dir,
    )?;
    println!("{}", preds.display());
    Ok(())
}
