use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sward::config::RunConfig;
use sward::data::{load_image, load_manifest, load_unlabeled, synth_dataset, CaptureSource, Schema, Split, SplitPlan, SynthConfig};
use sward::metrics::{evaluate, predict_batch, write_predictions_csv, HreAggregate};
use sward::model::Checkpoint;
use sward::train::{finetune, load_unlabeled_images, pretrain, LogEntry, TrainConfig};
use sward::Tensor;

/// Sward composition, herbage mass and height estimation from canopy images.
#[derive(Parser)]
#[command(name = "sward", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural labeled + unlabeled dataset.
    Synth(SynthArgs),
    /// i-Mix contrastive pretraining on unlabeled images.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning on a labeled manifest.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Predict one image; prints a single JSON line.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 528)]
    labeled: usize,
    #[arg(long, default_value_t = 594)]
    unlabeled: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train:val:test proportions for labeled images.
    #[arg(long, default_value = "52:104:372")]
    split: SplitPlan,
}

/// Flat overrides applied to the phase's section of the config file.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sets both the model input size and the augmentation output size.
    #[arg(long)]
    input_size: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, run: &mut RunConfig, phase: fn(&mut RunConfig) -> &mut TrainConfig) {
        let t = phase(run);
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.momentum {
            t.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.input_size {
            run.model.input_size = v;
            run.augment.output_size = v;
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    unlabeled: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    alpha: Option<f32>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Pretrained checkpoint whose trunk initializes the model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    source: Option<CaptureSource>,
    /// Directory for report.json, report.md and predictions.csv.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "mean")]
    hre: HreAggregate,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn report_epoch(e: &LogEntry) {
    let val = e.val_loss.map_or(String::new(), |v| format!(" val_loss={v:.5}"));
    eprintln!(
        "[{}] epoch {} train_loss={:.5}{val} ({:.1}s)",
        e.phase, e.epoch, e.train_loss, e.wall_time_s
    );
}

fn schema_for(ckpt_or_config: usize) -> Result<Schema> {
    Schema::for_species_count(ckpt_or_config)
        .with_context(|| format!("no manifest schema has {ckpt_or_config} species"))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        n_labeled: a.labeled,
        n_unlabeled: a.unlabeled,
        size: a.size,
        seed: a.seed,
        split: a.split,
    };
    let m = synth_dataset(&a.out, &config)?;
    eprintln!(
        "wrote {} labeled and {} unlabeled images to {}",
        m.records.len(),
        m.unlabeled_paths.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut run = load_config(a.config.as_deref())?;
    a.train.apply(&mut run, |r| &mut r.pretrain);
    if let Some(t) = a.temperature {
        run.pretrain.contrastive.temperature = t;
    }
    if let Some(al) = a.alpha {
        run.pretrain.contrastive.alpha = al;
    }
    run.save(sidecar(&a.out, ".config.json"))?;
    let paths = load_unlabeled(&a.unlabeled)?;
    let images = load_unlabeled_images(&paths)?;
    eprintln!("pretraining on {} unlabeled images", images.len());
    let (ckpt, log) = pretrain(&run.pretrain, &run.model, &run.augment, &images, report_epoch)?;
    ckpt.save(&a.out)?;
    log.write_jsonl(sidecar(&a.out, ".log.jsonl"))?;
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let mut run = load_config(a.config.as_deref())?;
    a.train.apply(&mut run, |r| &mut r.finetune);
    run.save(sidecar(&a.out, ".config.json"))?;
    let manifest = load_manifest(&a.manifest, schema_for(run.model.n_species)?)?;
    let init = a.init.as_ref().map(Checkpoint::load).transpose()?;
    let (ckpt, log) = finetune(&run.finetune, &run.model, &manifest, init.as_ref(), report_epoch)?;
    ckpt.save(&a.out)?;
    log.write_jsonl(sidecar(&a.out, ".log.jsonl"))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let manifest = load_manifest(&a.manifest, schema_for(ckpt.config.n_species)?)?;
    let (report, preds) = evaluate(&ckpt, &manifest, a.split, a.source, a.hre)?;
    std::fs::create_dir_all(&a.report).with_context(|| format!("creating {}", a.report.display()))?;
    let write = |name: &str, body: String| -> Result<()> {
        let path = a.report.join(name);
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    };
    write("report.json", report.to_json() + "\n")?;
    write("report.md", report.to_markdown())?;
    write_predictions_csv(a.report.join("predictions.csv"), manifest.schema, &preds)?;
    eprint!("{}", report.to_markdown());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let image = load_image(&a.image, ckpt.config.input_size)?;
    let path = a.image.display().to_string();
    let batch = Tensor::stack(&[image])?;
    let Some(p) = predict_batch(&ckpt, &[path.clone()], &batch)?.pop() else {
        bail!("no prediction produced");
    };
    let schema = schema_for(ckpt.config.n_species)?;
    let composition: serde_json::Map<String, serde_json::Value> = schema
        .species()
        .iter()
        .zip(p.percentages())
        .map(|(s, v)| (s.to_string(), json!(v)))
        .collect();
    let line = json!({
        "path": path,
        "composition": composition,
        "total_mass": p.total_mass,
        "height": p.height,
    });
    println!("{line}");
    Ok(())
}

/// 2: bad input, 3: incompatible checkpoint, 4: empty selection, 1: other.
fn exit_code(err: &anyhow::Error) -> u8 {
    use sward::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Incompatible { .. } => 3,
                E::EmptySelection(_) => 4,
                E::Io { .. }
                | E::ManifestRow { .. }
                | E::Manifest { .. }
                | E::Image { .. }
                | E::Checkpoint(_)
                | E::Config(_)
                | E::MissingTarget { .. }
                | E::DegenerateTarget(_)
                | E::Shape { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
