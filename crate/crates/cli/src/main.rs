use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fusionreid::ablation::{run_grid, GridSpec, Status, Sweep};
use fusionreid::checkpoint::{config_diff, Checkpoint};
use fusionreid::config::{EvalPolicy, RunConfig, SourceKind};
use fusionreid::data::{export_dataset, read_image, resize_bilinear, synth_generate, Split};
use fusionreid::evaluator::{evaluate, export_attention, extract_features};
use fusionreid::model::FusionReid;
use fusionreid::trainer::{TrainLog, Trainer};
use fusionreid::{Error, Result};

/// Train, evaluate and inspect dual-backbone person re-identification
/// models at toy scale.
///
/// Every command writes its resolved configuration to the output
/// directory. Exit codes: 0 success, 2 configuration or input error,
/// 3 numerical failure during training.
#[derive(Parser)]
#[command(name = "fusionreid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration. Without it the built-in toy preset is used
    /// (8 synthetic identities, 2 cameras, PK 4×4, 32×16 input, 200 steps).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override with a dotted key, e.g. `optim.total_epochs=1`.
    /// Values are TOML literals; bare words are read as strings. Applied
    /// after the file. FUSIONREID_SEED, if set, replaces `seed`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(path) => RunConfig::load(path, &self.overrides)?,
            None => {
                let base = RunConfig::toy().to_toml()?;
                let mut cfg = RunConfig::from_toml(&base, &self.overrides)?;
                cfg.apply_env()?;
                cfg
            }
        };
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing `train_log.csv`, `checkpoint.bin` and
    /// `config.toml` under the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; replaces `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes `eval_report.json` and `summary.txt`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Configuration supplying the dataset (for example the
        /// `config.toml` written by `train`). Its model section must match
        /// the checkpoint.
        #[command(flatten)]
        config: ConfigArgs,
        /// CSV manifest to evaluate on instead of the configured data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// `query_gallery` or `train_vs_held_out`; defaults to the config.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per grid cell; writes `ablation.csv`.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated sweeps (variants, sharing, layers, dims) or a
        /// TOML grid file with `variants`, `sharing`, `layers`, `dims`.
        #[arg(long, default_value = "variants,sharing")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-head fusion attention maps of one image as CSV and PGM.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PPM or PNG image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        cam_id: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured synthetic dataset as PPM files plus
    /// `manifest.csv`.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, resume } => cmd_train(&config, out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            data,
            policy,
            out,
        } => cmd_eval(&checkpoint, &config, data, policy.as_deref(), &out),
        Command::Ablate { config, grid, out } => cmd_ablate(&config, &grid, &out),
        Command::ExportAttention {
            checkpoint,
            image,
            cam_id,
            out,
        } => cmd_export_attention(&checkpoint, &image, cam_id, &out),
        Command::SynthData { config, out } => cmd_synth_data(&config, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_train(args: &ConfigArgs, out: Option<PathBuf>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = args.resolve()?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    cfg.write_resolved(&dir)?;
    let dataset = cfg.dataset()?;
    let log_path = dir.join("train_log.csv");
    let (mut trainer, mut log) = match resume {
        Some(path) => {
            let ck = Checkpoint::load_expecting(path, &cfg.model)?;
            let mut trainer = Trainer::resume(ck, dataset)?;
            trainer.train.max_steps = cfg.train.max_steps;
            trainer.train.checkpoint_every = cfg.train.checkpoint_every;
            let log = if log_path.is_file() {
                TrainLog::append(&log_path)?
            } else {
                TrainLog::create(&log_path)?
            };
            (trainer, log)
        }
        None => {
            let model = FusionReid::new(cfg.model.clone())?;
            let trainer = Trainer::new(model, cfg.optim.clone(), cfg.train.clone(), dataset, cfg.seed)?;
            (trainer, TrainLog::create(&log_path)?)
        }
    };
    let ck_path = dir.join("checkpoint.bin");
    let total = trainer.total_steps();
    let mut last = None;
    while trainer.step < total {
        let metrics = match trainer.step() {
            Ok(m) => m,
            Err(e) => {
                if let Some(d) = &trainer.diagnostics {
                    let path = dir.join("diagnostics.json");
                    write_json(&path, d)?;
                    eprintln!("diagnostics written to {}", path.display());
                }
                return Err(e);
            }
        };
        log.record(&metrics)?;
        if cfg.train.checkpoint_every > 0 && trainer.step % cfg.train.checkpoint_every == 0 {
            trainer.checkpoint().save(&ck_path)?;
        }
        last = Some(metrics);
    }
    trainer.checkpoint().save(&ck_path)?;
    match last {
        Some(m) => println!(
            "trained {} steps; final loss {:.6} (ce {:.6}, triplet {:.6})",
            trainer.step, m.total, m.ce_sum, m.tri_sum
        ),
        None => println!("nothing to train: already at step {}", trainer.step),
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_eval(ck_path: &Path, args: &ConfigArgs, data: Option<PathBuf>, policy: Option<&str>, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ck_path)?;
    let mut cfg = match &args.config {
        Some(_) => {
            let cfg = args.resolve()?;
            let diff = config_diff(&ck.model, &cfg.model);
            if !diff.is_empty() {
                return Err(Error::Config(format!(
                    "checkpoint and config disagree: {}",
                    diff.join(", ")
                )));
            }
            cfg
        }
        None => {
            let mut cfg = args.resolve()?;
            cfg.model = ck.model.clone();
            cfg.seed = ck.seed;
            cfg
        }
    };
    if let Some(m) = data {
        cfg.data.source = SourceKind::Manifest;
        cfg.data.manifest = Some(m);
    }
    if let Some(p) = policy {
        cfg.eval.policy = toml::Value::String(p.to_string())
            .try_into::<EvalPolicy>()
            .map_err(|_| Error::Config(format!("--policy `{p}`: expected query_gallery or train_vs_held_out")))?;
    }
    cfg.output_dir = out.to_path_buf();
    cfg.validate()?;
    cfg.write_resolved(out)?;
    let dataset = cfg.dataset()?;
    let (qs, gs) = cfg.eval.policy.splits();
    let pick = |splits: &[Split]| dataset.samples.iter().filter(|s| splits.contains(&s.split)).collect::<Vec<_>>();
    let (queries, gallery) = (pick(qs), pick(gs));
    if queries.is_empty() {
        return Err(Error::Data("the query split is empty".into()));
    }
    if gallery.is_empty() {
        return Err(Error::Data("the gallery split is empty".into()));
    }
    let model = FusionReid::new(ck.model.clone())?;
    let mut store = ck.store;
    let q = extract_features(&model, &mut store, &ck.stats, &queries)?;
    let g = extract_features(&model, &mut store, &ck.stats, &gallery)?;
    let report = evaluate(&q, &g)?;
    write_json(&out.join("eval_report.json"), &report)?;
    let summary = report.summary();
    std::fs::write(out.join("summary.txt"), format!("{summary}\n")).map_err(|e| Error::io(out, e))?;
    println!("{summary}");
    Ok(())
}

fn parse_grid(spec: &str, cfg: &RunConfig) -> Result<Vec<fusionreid::ablation::Cell>> {
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "toml") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: GridSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        return Ok(grid.cells(&cfg.model.dmf));
    }
    let mut cells = Vec::new();
    for name in spec.split(',') {
        cells.extend(name.parse::<Sweep>()?.cells(&cfg.model.dmf));
    }
    Ok(cells)
}

fn cmd_ablate(args: &ConfigArgs, grid: &str, out: &Path) -> Result<()> {
    let mut cfg = args.resolve()?;
    cfg.output_dir = out.to_path_buf();
    cfg.validate()?;
    let cells = parse_grid(grid, &cfg)?;
    cfg.write_resolved(out)?;
    let dataset = cfg.dataset()?;
    let csv_path = out.join("ablation.csv");
    let rows = run_grid(&cfg, &dataset, &cells, &csv_path, |row| {
        let c = &row.cell;
        match row.status {
            Status::Ok => println!(
                "{} {} seu_shared={} mfu_shared={} L={} D={}: loss {:.4}, mAP {:.4}",
                c.sweep,
                c.variant.name(),
                c.seu_shared,
                c.mfu_shared,
                c.layers,
                c.dim,
                row.final_loss.unwrap_or(f64::NAN),
                row.map.unwrap_or(f64::NAN)
            ),
            _ => println!("{} {}: {:?} ({})", c.sweep, c.variant.name(), row.status, row.reason),
        }
    })?;
    let ok = rows.iter().filter(|r| r.status == Status::Ok).count();
    println!("{ok}/{} cells completed; results in {}", rows.len(), csv_path.display());
    Ok(())
}

fn cmd_export_attention(ck_path: &Path, image: &Path, cam_id: usize, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ck_path)?;
    let img = read_image(image)?;
    let model = FusionReid::new(ck.model.clone())?;
    let img = resize_bilinear(&img, ck.model.image_height, ck.model.image_width);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut cfg = RunConfig::default();
    cfg.model = ck.model.clone();
    cfg.optim = ck.optim.clone();
    cfg.train = ck.train.clone();
    cfg.seed = ck.seed;
    cfg.output_dir = out.to_path_buf();
    cfg.write_resolved(out)?;
    let mut store = ck.store;
    let files = export_attention(&model, &mut store, &ck.stats, &img, cam_id, out)?;
    let maps = files.iter().filter(|f| f.extension().is_some_and(|e| e == "pgm")).count();
    for f in &files {
        println!("{}", f.display());
    }
    println!("{maps} attention maps, {} files", files.len());
    Ok(())
}

fn cmd_synth_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let mut cfg = args.resolve()?;
    cfg.output_dir = out.to_path_buf();
    let mut synth = cfg.data.synthetic.clone();
    synth.seed = synth.seed.wrapping_add(cfg.seed);
    let dataset = synth_generate(&synth)?;
    cfg.write_resolved(out)?;
    let manifest = export_dataset(&dataset, out)?;
    println!("{} images; manifest at {}", dataset.len(), manifest.display());
    Ok(())
}
