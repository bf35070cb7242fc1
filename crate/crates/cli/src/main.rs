//! `latefuse`: run the late-fusion protocol from a manifest, or one stage at a time.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use latefuse_core::dataio::{align_modalities, load_labels, load_predictions, load_probability_matrix, ModalitySources};
use latefuse_core::fusion::{assemble_fusion_input, load_ensemble, policy_predict, save_ensemble, FeatureFusionMode};
use latefuse_core::pipeline::{
    manifest_for_bundles, prepare, run_denoise, run_pipeline, train_variants, TrainOn, REPORT,
};
use latefuse_core::synth::{generate, write_bundle, GeneratorConfig};
use latefuse_core::{EvaluationReport, PipelineError, PipelineManifest, Stage};

#[derive(Parser)]
#[command(name = "latefuse", version, about = "Multimodal late fusion with label-noise pruning")]
struct Cli {
    /// Worker threads for fold and variant training (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test bundles and a manifest for them.
    Synth(SynthArgs),
    /// Out-of-fold label-noise detection and pruning.
    Denoise(ManifestArgs),
    /// Train the policy ensembles of every variant.
    FuseTrain(ManifestArgs),
    /// Predict with a saved policy ensemble.
    Predict(PredictArgs),
    /// Score a prediction file against labels.
    Evaluate(EvaluateArgs),
    /// Every stage, as configured by the manifest.
    Run(ManifestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Two modalities with complementary confusions (27 classes).
    Complementary,
    /// One accurate modality with injected label noise.
    Noisy,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "complementary")]
    preset: Preset,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    /// Size of the separately generated test set; 0 for none.
    #[arg(long, default_value_t = 0)]
    test_n: usize,
    /// Classes for the noisy preset.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Label flip rate for the noisy preset.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ManifestArgs {
    manifest: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags mirroring manifest keys; each one replaces the manifest value.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (relative to the working directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long, overrides_with = "no_denoise")]
    denoise: bool,
    #[arg(long)]
    no_denoise: bool,
    #[arg(long)]
    denoise_folds: Option<usize>,
    #[arg(long)]
    prune_fraction: Option<f64>,
    #[arg(long)]
    denoise_modality: Option<String>,
    #[arg(long)]
    policy_folds: Option<usize>,
    /// Hidden units of the policy network; 0 for linear.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_train_on)]
    train_on: Option<TrainOn>,
    #[arg(long, value_parser = parse_mode)]
    feature_mode: Option<FeatureFusionMode>,
    #[arg(long)]
    no_feature_fusion: bool,
}

fn parse_train_on(s: &str) -> Result<TrainOn, String> {
    match s {
        "validation" => Ok(TrainOn::Validation),
        "train" => Ok(TrainOn::Train),
        _ => Err(format!("expected `validation` or `train`, got `{s}`")),
    }
}

fn parse_mode(s: &str) -> Result<FeatureFusionMode, String> {
    match s {
        "concat" => Ok(FeatureFusionMode::Concat),
        "sum" => Ok(FeatureFusionMode::Sum),
        "attention" => Ok(FeatureFusionMode::Attention),
        _ => Err(format!("expected concat, sum or attention, got `{s}`")),
    }
}

impl Overrides {
    fn apply(&self, m: &mut PipelineManifest) -> anyhow::Result<()> {
        if let Some(v) = self.seed {
            m.seed = v;
        }
        if let Some(v) = &self.out_dir {
            m.out_dir = std::env::current_dir()?.join(v);
        }
        if let Some(v) = self.train_fraction {
            m.split.train_fraction = v;
        }
        if self.denoise {
            m.denoise.enabled = true;
        }
        if self.no_denoise {
            m.denoise.enabled = false;
        }
        if let Some(v) = self.denoise_folds {
            m.denoise.folds = v;
        }
        if let Some(v) = self.prune_fraction {
            m.denoise.fraction = v;
        }
        if let Some(v) = &self.denoise_modality {
            m.denoise.modality = Some(v.clone());
        }
        if let Some(v) = self.policy_folds {
            m.fusion.folds = v;
        }
        if let Some(v) = self.hidden {
            m.fusion.hidden = v;
        }
        if let Some(v) = self.lr {
            m.fusion.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            m.fusion.epochs = v;
        }
        if let Some(v) = self.batch_size {
            m.fusion.batch_size = v;
        }
        if let Some(v) = self.train_on {
            m.fusion.train_on = v;
        }
        if let Some(v) = self.feature_mode {
            m.feature_fusion.mode = v;
        }
        if self.no_feature_fusion {
            m.feature_fusion.enabled = false;
        }
        m.validate().map_err(|e| tagged(Stage::Manifest, e))
    }
}

#[derive(Args)]
struct PredictArgs {
    /// Ensemble directory (or its ensemble.toml).
    #[arg(long)]
    ensemble: PathBuf,
    /// `name=probabilities.csv`, once per modality.
    #[arg(long = "input", value_parser = parse_input, required = true)]
    inputs: Vec<(String, PathBuf)>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for predictions.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_input(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=path")?;
    Ok((name.to_string(), PathBuf::from(path)))
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    n_classes: usize,
    #[arg(long, default_value = "evaluation")]
    name: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for evaluation.toml; printed to stdout when absent.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn tagged(stage: Stage, source: latefuse_core::Error) -> anyhow::Error {
    PipelineError { stage, source }.into()
}

fn load_manifest(args: &ManifestArgs) -> anyhow::Result<PipelineManifest> {
    let mut m = PipelineManifest::load(&args.manifest).map_err(|e| tagged(Stage::Manifest, e))?;
    args.overrides.apply(&mut m)?;
    Ok(m)
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| anyhow!("creating {}: {e}", dir.display()))
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let config = |n: usize, seed: u64| match args.preset {
        Preset::Complementary => GeneratorConfig::complementary(n, seed),
        Preset::Noisy => GeneratorConfig::noisy_labels(n, args.classes, args.noise, seed),
    };
    ensure_dir(&args.out_dir)?;
    let labeled_cfg = config(args.n, args.seed);
    let labeled = generate(&labeled_cfg)?;
    let paths = write_bundle(&labeled, &args.out_dir, "train")?;
    let test_paths = if args.test_n > 0 {
        // the test set gets its own stream and no label noise
        let mut cfg = config(args.test_n, args.seed.wrapping_add(1));
        cfg.label_noise_rate = 0.0;
        Some(write_bundle(&generate(&cfg)?, &args.out_dir, "test")?)
    } else {
        None
    };
    let manifest = manifest_for_bundles(labeled_cfg.n_classes, &paths, test_paths.as_ref(), &args.out_dir, args.seed);
    let path = args.out_dir.join("manifest.toml");
    manifest.save(&path)?;
    println!("wrote {} samples and {}", args.n, path.display());
    Ok(())
}

fn denoise_cmd(args: &ManifestArgs) -> anyhow::Result<()> {
    let m = load_manifest(args)?;
    let data = prepare(&m)?;
    let out = m.out_dir();
    let outcome = run_denoise(&m, &data.labeled, &out)?;
    println!(
        "{} candidates, {} removed, {} protected -> {}",
        outcome.report.candidates.len(),
        outcome.prune.removed_ids.len(),
        outcome.prune.protected_ids.len(),
        out.display()
    );
    Ok(())
}

fn fuse_train(args: &ManifestArgs) -> anyhow::Result<()> {
    let m = load_manifest(args)?;
    let data = prepare(&m)?;
    let out = m.out_dir();
    let removed = if m.denoise.enabled {
        run_denoise(&m, &data.labeled, &out)?.prune.removed_ids
    } else {
        Vec::new()
    };
    let ensembles = train_variants(&m, data.fit_split(m.fusion.train_on), &removed)?;
    for (variant, ens) in &ensembles {
        let dir = out.join("policy").join(&variant.name);
        save_ensemble(&dir, ens).map_err(|e| tagged(Stage::Policy, e))?;
        let best = ens.members.iter().map(|t| t.best_val_score).fold(f64::NEG_INFINITY, f64::max);
        println!("{}: {} members, best fold macro-F1 {best:.4} -> {}", variant.name, ens.members.len(), dir.display());
    }
    Ok(())
}

fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let tag = |e| tagged(Stage::Predict, e);
    let ensemble = load_ensemble(&args.ensemble).map_err(tag)?;
    let c = ensemble.n_classes();
    let mut sources = ModalitySources::default();
    for (name, path) in &args.inputs {
        sources.probabilities.push((name.clone(), load_probability_matrix(path, c).map_err(tag)?));
    }
    let dataset = align_modalities(sources, c).map_err(tag)?;
    let input = assemble_fusion_input(&dataset).map_err(tag)?;
    let pred = policy_predict(&ensemble, &input).map_err(tag)?;
    ensure_dir(&args.out_dir)?;
    let path = args.out_dir.join("predictions.csv");
    pred.save_csv(&path, dataset.ids()).map_err(tag)?;
    println!("{} predictions -> {}", pred.labels.len(), path.display());
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let tag = |e| tagged(Stage::Evaluate, e);
    let preds = load_predictions(&args.predictions, args.n_classes).map_err(tag)?;
    let labels = load_labels(&args.labels, args.n_classes).map_err(tag)?;
    let index: std::collections::HashMap<&str, usize> =
        labels.ids.iter().zip(&labels.values).map(|(id, &y)| (id.as_str(), y)).collect();
    let truth = preds
        .ids
        .iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| anyhow!("[evaluate] no label for id `{id}`")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = EvaluationReport::new(&args.name, &preds.values, &truth, args.n_classes).map_err(tag)?;
    let text = report.to_toml();
    match &args.out_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            let path = dir.join("evaluation.toml");
            std::fs::write(&path, &text).map_err(|e| anyhow!("[evaluate] writing {}: {e}", path.display()))?;
            println!("macro-F1 {:.6} accuracy {:.6} -> {}", report.macro_f1, report.accuracy, path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(args: &ManifestArgs) -> anyhow::Result<()> {
    let m = load_manifest(args)?;
    let report = run_pipeline(&m)?;
    println!("evaluated on {} ({} samples)", report.evaluation_set, report.sizes.evaluation);
    println!("{:<24} {:>10} {:>10}", "stage", "macro_f1", "accuracy");
    for s in &report.stages {
        println!("{:<24} {:>10.4} {:>10.4}", s.stage, s.macro_f1, s.accuracy);
    }
    println!("report: {}", m.out_dir().join(REPORT).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: [manifest] cannot set up {jobs} workers: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => synth(a).map_err(|e| anyhow!("[synth] {e}")),
        Command::Denoise(a) => denoise_cmd(a),
        Command::FuseTrain(a) => fuse_train(a),
        Command::Predict(a) => {
            if let Some(seed) = a.seed {
                info!("predict is deterministic; seed {seed} unused");
            }
            predict(a)
        }
        Command::Evaluate(a) => evaluate(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // messages already embed their causes
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_manifest_values() {
        let mut m = PipelineManifest::new(3, "l.csv".into(), Vec::new());
        m.modalities.push(latefuse_core::pipeline::ModalityFiles {
            name: "a".into(),
            probabilities: "a.csv".into(),
            features: None,
        });
        let o = Overrides {
            seed: Some(9),
            no_denoise: true,
            hidden: Some(0),
            lr: Some(0.05),
            train_on: Some(TrainOn::Train),
            ..Overrides::default()
        };
        o.apply(&mut m).unwrap();
        assert_eq!(m.seed, 9);
        assert!(!m.denoise.enabled);
        assert_eq!(m.fusion.hidden, 0);
        assert_eq!(m.fusion.learning_rate, 0.05);
        assert_eq!(m.fusion.train_on, TrainOn::Train);

        let bad = Overrides {
            prune_fraction: Some(2.0),
            ..Overrides::default()
        };
        let err = bad.apply(&mut m).unwrap_err();
        assert!(err.to_string().starts_with("[manifest]"), "{err}");
    }

    #[test]
    fn parses_inputs() {
        assert_eq!(parse_input("text=a/b.csv").unwrap(), ("text".into(), PathBuf::from("a/b.csv")));
        assert!(parse_input("nope").is_err());
        assert!(parse_mode("sum").is_ok() && parse_mode("max").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
