//! Command-line front end: dataset generation, pretraining, training,
//! evaluation, explainability export and the verification selftest, all
//! driven by one config file plus `--set` overrides.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use echograph::config::{RunConfig, CONFIG_ENV};
use echograph::error::Error;
use echograph::eval::{evaluate, write_per_sample_csv, write_report_json, write_scatter_csv, write_scatter_svg, write_weights_svg, extract_es_ed};
use echograph::model::Model;
use echograph::sampling::make_test_clips;
use echograph::synth::{generate_dataset, manifest_path, read_manifest, Split};
use echograph::trainer::{load_checkpoint, load_dataset, pretrain_epoch, restore_params, save_checkpoint, snapshot_for_pretrain, train, Adam};
use echograph::Result;

#[derive(Parser)]
#[command(
    name = "echograph",
    about = "Latent-graph ejection fraction estimation on synthetic periodic videos",
    version
)]
struct Cli {
    /// Config file; falls back to $ECHOGRAPH_CONFIG, then to built-in
    /// defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value (repeatable): --set train.epochs=50
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads for data-parallel stages (dataset rendering).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and manifest.
    GenerateData,
    /// Run only the ES/ED pretraining stage and save a warmed checkpoint.
    Pretrain,
    /// Train the model (with the configured pretraining stage) and write
    /// logs plus best/last checkpoints.
    Train {
        /// Resume from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split and write the report files.
    Eval {
        /// Checkpoint path (default: <checkpoint_dir>/best.ckpt; a fresh
        /// model is evaluated if the default is absent).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export node/edge weights and the triage verdict for chosen samples.
    Explain {
        /// Sample ids (comma-separated); defaults to the whole test split.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the gradient and invariant verification suites.
    Selftest,
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => match std::env::var_os(CONFIG_ENV) {
            Some(path) => RunConfig::from_file(std::path::Path::new(&path))?,
            None => RunConfig::default(),
        },
    };
    for ov in &cli.overrides {
        let (key_path, value) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set '{ov}': expected section.key=value")))?;
        let (section, key) = key_path
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("--set '{ov}': expected section.key=value")))?;
        cfg.apply_kv(section.trim(), key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn build_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(cfg.model_config()?, cfg.model.seed)
}

/// Loads the checkpoint into a fresh model; `explicit` paths must exist,
/// the default path silently falls back to the fresh-seed model.
fn model_from_checkpoint(
    cfg: &RunConfig,
    explicit: Option<&PathBuf>,
) -> Result<(Model, Option<u64>)> {
    let model = build_model(cfg)?;
    let path = match explicit {
        Some(p) => p.clone(),
        None => cfg.paths.checkpoint_dir.join("best.ckpt"),
    };
    if path.exists() {
        let ckpt = load_checkpoint(&path)?;
        if ckpt.config_hash != cfg.hash() {
            eprintln!(
                "warning: checkpoint {} was written by config {:016x}, current config is {:016x}",
                path.display(),
                ckpt.config_hash,
                cfg.hash()
            );
        }
        restore_params(&model, &ckpt.params)?;
        Ok((model, Some(ckpt.config_hash)))
    } else if explicit.is_some() {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        )))
    } else {
        eprintln!(
            "note: {} absent; evaluating the fresh-seed model",
            path.display()
        );
        Ok((model, None))
    }
}

fn test_samples(cfg: &RunConfig) -> Result<Vec<(u64, echograph::synth::Video)>> {
    let manifest = read_manifest(&manifest_path(&cfg.paths.dataset_dir))?;
    let mut out = Vec::new();
    for e in manifest.split(Split::Test) {
        out.push((e.id, manifest.load_video(&cfg.paths.dataset_dir, e)?));
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<u8> {
    let cfg = load_config(cli)?;
    cfg.train.precision.apply();
    let hash = cfg.hash();
    match &cli.command {
        Command::GenerateData => {
            let spec = cfg.dataset_spec()?;
            let manifest = generate_dataset(&spec, &cfg.paths.dataset_dir, cli.workers)?;
            println!(
                "wrote {} samples ({} train / {} val / {} test) to {} [config {hash:016x}]",
                manifest.entries.len(),
                manifest.split(Split::Train).count(),
                manifest.split(Split::Val).count(),
                manifest.split(Split::Test).count(),
                cfg.paths.dataset_dir.display()
            );
            Ok(0)
        }
        Command::Pretrain => {
            let manifest = read_manifest(&manifest_path(&cfg.paths.dataset_dir))?;
            let data = load_dataset(&cfg.paths.dataset_dir, &manifest)?;
            let model = build_model(&cfg)?;
            let mut optimizer = Adam::new(
                model
                    .pretrain_params()
                    .into_iter()
                    .filter(|p| p.trainable())
                    .collect(),
                cfg.train.learning_rate,
            );
            let mut rng = <echograph::Rng as rand::SeedableRng>::seed_from_u64(
                cfg.train.seed ^ 0x7EA1_0002,
            );
            for epoch in 0..cfg.train.pretrain_epochs {
                let loss = pretrain_epoch(&model, &mut optimizer, &data.train, &cfg.train, &mut rng)?;
                println!(
                    "pretrain epoch {epoch}: bce={}",
                    loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into())
                );
            }
            let path = cfg.paths.checkpoint_dir.join("pretrained.ckpt");
            save_checkpoint(&path, &snapshot_for_pretrain(&model, hash, cfg.train.seed))?;
            println!("saved {}", path.display());
            Ok(0)
        }
        Command::Train { resume } => {
            let manifest = read_manifest(&manifest_path(&cfg.paths.dataset_dir))?;
            let data = load_dataset(&cfg.paths.dataset_dir, &manifest)?;
            let model = build_model(&cfg)?;
            let resume_ckpt = match resume {
                Some(path) => Some(load_checkpoint(path)?),
                None => None,
            };
            let outcome = train(
                &model,
                &data,
                &cfg.train,
                &cfg.paths.checkpoint_dir,
                hash,
                resume_ckpt,
            )?;
            println!(
                "trained {} epochs; best val MAE {:.3} at epoch {} [config {hash:016x}]",
                outcome.log.len(),
                outcome.best_val_mae,
                outcome.best_epoch
            );
            println!("checkpoints: {}", cfg.paths.checkpoint_dir.display());
            Ok(0)
        }
        Command::Eval { checkpoint } => {
            let (model, _) = model_from_checkpoint(&cfg, checkpoint.as_ref())?;
            let samples = test_samples(&cfg)?;
            let report = evaluate(&model, &samples, cfg.threshold_rule())?;
            let dir = &cfg.paths.report_dir;
            write_report_json(&dir.join("report.json"), &report, hash, cfg.train.seed)?;
            write_per_sample_csv(&dir.join("per_sample.csv"), &report, hash, cfg.train.seed)?;
            write_scatter_csv(&dir.join("scatter.csv"), &report, hash, cfg.train.seed)?;
            write_scatter_svg(&dir.join("scatter.svg"), &report)?;
            println!(
                "mae={:.3} r2={:.3} f1<40%={} periodic {}/{} afd_es={} afd_ed={}",
                report.mae,
                report.r2,
                report
                    .f1_below_40
                    .map(|v| format!("{v:.3}"))
                    .unwrap_or_else(|| "n/a".into()),
                report.periodic_count,
                report.total_count,
                report
                    .afd_es
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "n/a".into()),
                report
                    .afd_ed
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "n/a".into()),
            );
            println!("reports: {}", dir.display());
            Ok(0)
        }
        Command::Explain { ids, checkpoint } => {
            let (model, _) = model_from_checkpoint(&cfg, checkpoint.as_ref())?;
            let samples = test_samples(&cfg)?;
            let chosen: Vec<&(u64, echograph::synth::Video)> = if ids.is_empty() {
                samples.iter().collect()
            } else {
                samples.iter().filter(|(id, _)| ids.contains(id)).collect()
            };
            if !ids.is_empty() && chosen.len() != ids.len() {
                return Err(Error::Config(
                    "some requested sample ids are not in the test split".into(),
                ));
            }
            let dir = cfg.paths.report_dir.join("explain");
            std::fs::create_dir_all(&dir)?;
            for (id, video) in chosen {
                let clip = make_test_clips(video, *id, model.cfg.t_fixed)
                    .into_iter()
                    .next()
                    .expect("at least one clip");
                let pred = model.predict_clip(&clip)?;
                let w = &pred.graph.node_weights;
                let verdict = extract_es_ed(w, cfg.threshold_rule());

                let mut nodes = format!("# config_hash={hash:016x} seed={}\n", cfg.train.seed);
                nodes.push_str("frame,weight\n");
                for (j, v) in w.iter().enumerate() {
                    nodes.push_str(&format!("{j},{v}\n"));
                }
                std::fs::write(dir.join(format!("{id:05}_nodes.csv")), nodes)?;

                let mut edges = format!("# config_hash={hash:016x} seed={}\n", cfg.train.seed);
                edges.push_str("row,col,weight\n");
                let t = pred.graph.frame_count();
                for k in 0..t {
                    for s in 0..t {
                        if k != s {
                            edges.push_str(&format!("{k},{s},{}\n", pred.graph.adjacency.at2(k, s)));
                        }
                    }
                }
                std::fs::write(dir.join(format!("{id:05}_edges.csv")), edges)?;
                write_weights_svg(
                    &dir.join(format!("{id:05}_weights.svg")),
                    w,
                    verdict.periodic,
                )?;
                println!(
                    "sample {id}: {}",
                    if verdict.periodic {
                        "periodic (weights localize the cycle)"
                    } else {
                        "needs review (weights spread evenly)"
                    }
                );
            }
            println!("explain artifacts: {}", dir.display());
            Ok(0)
        }
        Command::Selftest => {
            let ok = echograph::selftest::run_all(cfg.train.seed)?;
            if ok {
                println!("selftest passed");
                Ok(0)
            } else {
                println!("selftest FAILED");
                Ok(1)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
