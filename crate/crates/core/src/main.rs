use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use koopman_cck::bench::{
    hist_csv, prediction_histograms, split_dataset, train_models, write_comparison, run_tracking, generate_training_data, hybrid_model,
    Comparison,
};
use koopman_cck::config::{RunConfig, SEED_ENV};
use koopman_cck::fit::Variant;
use koopman_cck::mpc::AnyModel;
use koopman_cck::persist::{validate_model_file, DatasetFile, ModelFile, Provenance};
use koopman_cck::{Error, Result};

#[derive(Parser)]
#[command(name = "koopman-cck", version, about = "Control-coherent Koopman models and MPC tracking on a compliant two-link arm")]
struct Cli {
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and KOOPMAN_CCK_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training data set.
    GenData {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit one variant (cck, dmdc, bilinear, hybrid) or `all` from a data set.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "all")]
        variant: String,
    },
    /// Tracking comparison over the configured radii. Without models the
    /// full pipeline (data, fits) runs first.
    Bench {
        #[arg(long, num_args = 1..)]
        models: Vec<PathBuf>,
    },
    /// DMDc against A_DMDc with B_CCK at the hybrid radius.
    Hybrid {
        #[arg(long)]
        cck: Option<PathBuf>,
        #[arg(long)]
        dmdc: Option<PathBuf>,
    },
    /// One-step prediction error histograms on the holdout episodes.
    Hist {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, num_args = 1..)]
        models: Vec<PathBuf>,
    },
    /// Check a model file's structural invariants.
    Validate { model: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    cfg.apply_seed_override(cli.seed, env.as_deref())?;
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Validate { model } = &cli.command {
        let file = ModelFile::load(model)?;
        let report = validate_model_file(&file);
        print!("{}", report.render());
        return Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(3) });
    }
    let cfg = load_config(&cli)?;
    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out)?;
    match &cli.command {
        Command::GenData { output } => {
            let data = generate_training_data(&cfg.plant, &cfg.data, cfg.seed)?;
            let path = output.clone().unwrap_or_else(|| out.join("dataset.json"));
            DatasetFile::from_dataset(&data, &cfg)?.save(&path)?;
            log::info!("{} transitions in {} episodes -> {}", data.len(), data.episodes.len(), path.display());
        }
        Command::Fit { dataset, variant } => {
            let data = DatasetFile::load(dataset)?.to_dataset()?;
            let (train, _) = split_dataset(&cfg, &data);
            let models = train_models(&cfg, &train)?;
            for (v, r) in &models.reports {
                log::info!("{v}: {} samples, {} regressors, condition {:.3e}", r.samples, r.regressors, r.condition_number);
            }
            let wanted: Vec<Variant> = if variant == "all" {
                vec![Variant::Cck, Variant::Dmdc, Variant::Bilinear, Variant::Hybrid]
            } else {
                vec![Variant::parse(variant).ok_or_else(|| Error::ConfigInvalid {
                    field: "variant".into(),
                    reason: format!("unknown variant `{variant}`"),
                })?]
            };
            let prov = Provenance::of(&cfg);
            for v in wanted {
                let model = match v {
                    Variant::Cck => AnyModel::Linear(models.cck.clone()),
                    Variant::Dmdc => AnyModel::Linear(models.dmdc.clone()),
                    Variant::Hybrid => AnyModel::Linear(models.hybrid()?),
                    Variant::Bilinear => models.bilinear.clone(),
                };
                let path = out.join(format!("model_{v}.json"));
                ModelFile::from_model(&model, &cfg.plant.actuator, prov.clone()).save(&path)?;
                log::info!("{v} -> {}", path.display());
            }
        }
        Command::Bench { models } => {
            let set = if models.is_empty() {
                let data = generate_training_data(&cfg.plant, &cfg.data, cfg.seed)?;
                train_models(&cfg, &split_dataset(&cfg, &data).0)?.tracked()
            } else {
                load_models(&cfg, models)?
            };
            let cmp = run_tracking(&cfg, &set, &cfg.bench.radii_cm)?;
            emit(&cfg, &out, "bench", &cmp, "summary.csv", "trajectories.svg")?;
            return Ok(exit_for(&cmp));
        }
        Command::Hybrid { cck, dmdc } => {
            let (cck, dmdc) = match (cck, dmdc) {
                (Some(c), Some(d)) => {
                    let mut m = load_models(&cfg, &[c.clone(), d.clone()])?.into_iter();
                    (linear(m.next().unwrap(), Variant::Cck)?, linear(m.next().unwrap(), Variant::Dmdc)?)
                }
                (None, None) => {
                    let data = generate_training_data(&cfg.plant, &cfg.data, cfg.seed)?;
                    let m = train_models(&cfg, &split_dataset(&cfg, &data).0)?;
                    (m.cck, m.dmdc)
                }
                _ => {
                    return Err(Error::ConfigInvalid {
                        field: "hybrid".into(),
                        reason: "give both --cck and --dmdc, or neither".into(),
                    })
                }
            };
            let hybrid = hybrid_model(&dmdc, &cck)?;
            let set = [AnyModel::Linear(dmdc), AnyModel::Linear(hybrid)];
            let cmp = run_tracking(&cfg, &set, &[cfg.bench.hybrid_radius_cm])?;
            emit(&cfg, &out, "hybrid", &cmp, "hybrid_summary.csv", "hybrid.svg")?;
            return Ok(exit_for(&cmp));
        }
        Command::Hist { dataset, models } => {
            let data = DatasetFile::load(dataset)?.to_dataset()?;
            let (_, holdout) = split_dataset(&cfg, &data);
            let set = load_models(&cfg, models)?;
            let h = prediction_histograms(&set, &holdout, cfg.bench.hist_bins);
            for (v, _, med) in &h.entries {
                log::info!("{v}: median one-step error {med:.4e}");
            }
            let path = out.join("hist.csv");
            std::fs::write(&path, hist_csv(&h))?;
            write_manifest(&cfg, &out, "hist", &[path])?;
        }
        Command::Validate { .. } => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn linear(m: AnyModel, want: Variant) -> Result<koopman_cck::fit::LinearLiftedModel> {
    match m {
        AnyModel::Linear(l) if l.variant == want => Ok(l),
        other => Err(Error::InvalidModel(format!("expected a {want} model, got {}", other.variant()))),
    }
}

fn load_models(cfg: &RunConfig, paths: &[PathBuf]) -> Result<Vec<AnyModel>> {
    let mut out = Vec::with_capacity(paths.len());
    let mut first_hash: Option<String> = None;
    for p in paths {
        let file = ModelFile::load(p)?;
        match &first_hash {
            None => first_hash = Some(file.dictionary_hash.clone()),
            Some(h) if *h != file.dictionary_hash => {
                return Err(Error::DictionaryMismatch {
                    first: h.clone(),
                    second: file.dictionary_hash.clone(),
                })
            }
            Some(_) => {}
        }
        if file.actuator != cfg.plant.actuator {
            log::warn!("{} was fitted for different actuator parameters than the configured plant", p.display());
        }
        out.push(file.to_model()?);
    }
    Ok(out)
}

fn exit_for(cmp: &Comparison) -> ExitCode {
    if cmp.any_diverged() {
        log::error!("at least one closed-loop run diverged");
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn emit(cfg: &RunConfig, out: &Path, what: &str, cmp: &Comparison, summary: &str, svg: &str) -> Result<()> {
    let note = format!("config_hash={} seed={}", cfg.hash(), cfg.seed);
    let files = write_comparison(out, cmp, summary, svg, &note)?;
    for r in &cmp.rows {
        println!("{:<9} r={:>5} cm  mean error {:.4} cm{}", r.variant, 100.0 * r.radius, r.mean_error_cm(), if r.diverged { "  DIVERGED" } else { "" });
    }
    write_manifest(cfg, out, what, &files)
}

/// Records config hash, seed and a digest of each artifact.
fn write_manifest(cfg: &RunConfig, out: &Path, what: &str, files: &[PathBuf]) -> Result<()> {
    let mut artifacts = Vec::new();
    for f in files {
        let bytes = std::fs::read(f)?;
        artifacts.push(json!({
            "file": f.file_name().map(|n| n.to_string_lossy().into_owned()),
            "sha256": hex::encode(Sha256::digest(&bytes)),
        }));
    }
    let manifest = json!({
        "command": what,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg,
        "artifacts": artifacts,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidModel(e.to_string()))?;
    std::fs::write(out.join(format!("manifest_{what}.json")), text + "\n")?;
    Ok(())
}
