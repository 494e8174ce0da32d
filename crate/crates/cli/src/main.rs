mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use spn_core::aat::{case_probabilities, AatConfig};
use spn_core::checkpoint;
use spn_core::dataset::{label_path, read_label, write_label, Split, Video, VideoDataset};
use spn_core::gradcheck::run_suite;
use spn_core::label::LabelMap;
use spn_core::metrics::DiceReport;
use spn_core::model::{ModelConfig, NUM_CLASSES};
use spn_core::msi::{msi_infer, overlay, select_key_frames, InferMode, MsiConfig};
use spn_core::pnm;
use spn_core::synth::{generate, SynthConfig};
use spn_core::trainer::{train, TrainConfig, TrainMode};
use spn_core::{SpnError, Tensor};

use config::{FileValues, Settings};
use error::{exit_code, CliError, EXIT_USAGE};

const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "head", "arm", "torso", "leg"];

/// Body-part segmentation of partially annotated videos.
#[derive(Parser)]
#[command(name = "spn", version)]
struct Cli {
    /// Flat key=value file; keys are the long flag names of the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Segment videos with a trained model.
    Infer(InferArgs),
    /// Dice of predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Print the clip partition of a video.
    Keyframes(KeyframesArgs),
    /// Dump the case-probability schedule as CSV.
    AatCurve(AatCurveArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Frame width and height in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    label_fraction: Option<f64>,
    #[arg(long)]
    unlabeled_videos: Option<usize>,
    /// Fully labeled test videos; defaults to a quarter of the videos.
    #[arg(long)]
    test_videos: Option<usize>,
    #[arg(long)]
    occlusion_rate: Option<f64>,
    #[arg(long)]
    no_shadow: bool,
    #[arg(long)]
    motion_jumps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// full, no-ssl, no-consistency or seg-only.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Pairs per step.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    p1_min: Option<f64>,
    #[arg(long)]
    aat_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    pairs_per_case: Option<usize>,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-step CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Video id; every test video when omitted.
    #[arg(long)]
    video: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// msi or seg-only.
    #[arg(long)]
    mode: Option<InferMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Propagate key-frame labels instead of probabilities.
    #[arg(long)]
    hard_source: bool,
    /// Also write colour overlays.
    #[arg(long)]
    overlay: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Args)]
struct KeyframesArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    video: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct AatCurveArgs {
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    p1_min: Option<f64>,
    #[arg(long)]
    i_max: Option<u64>,
    /// Rows for steps 0 to M - 1; defaults to i-max + 1.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", describe(&e));
        std::process::exit(exit_code(&e));
    }
}

/// The error chain joined by `: `, skipping causes their parent already quotes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let s = Settings::new(FileValues::load(cli.config.as_deref())?);
    match cli.command {
        Command::GenData(a) => gen_data(s, a),
        Command::Train(a) => train_cmd(s, a),
        Command::Infer(a) => infer(s, a),
        Command::Eval(a) => eval(s, a),
        Command::Keyframes(a) => keyframes(s, a),
        Command::AatCurve(a) => aat_curve(s, a),
        Command::Gradcheck(a) => gradcheck(s, a),
    }
}

fn gen_data(mut s: Settings, a: GenDataArgs) -> Result<()> {
    let d = SynthConfig::default();
    let out = s.path(a.out, "out")?;
    let videos = s.value(a.videos, "videos", d.videos)?;
    let size = s.value(a.size, "size", d.width)?;
    let cfg = SynthConfig {
        videos,
        frames_per_video: s.value(a.frames, "frames", d.frames_per_video)?,
        width: size,
        height: size,
        label_fraction: s.value(a.label_fraction, "label-fraction", d.label_fraction)?,
        unlabeled_videos: s.value(a.unlabeled_videos, "unlabeled-videos", d.unlabeled_videos)?,
        test_videos: s.value(a.test_videos, "test-videos", videos / 4)?,
        occlusion_rate: s.value(a.occlusion_rate, "occlusion-rate", d.occlusion_rate)?,
        shadow: !s.switch(a.no_shadow, "no-shadow")?,
        motion_jumps: s.value(a.motion_jumps, "motion-jumps", d.motion_jumps)?,
        seed: s.value(a.seed, "seed", d.seed)?,
    };
    s.finish("gen-data")?;
    let (data, info) = generate(&cfg)?;
    data.save(&out)?;
    for (v, jumps) in data.videos.iter().zip(&info.jumps) {
        let labeled = v.labeled_indices().len();
        let jumps: Vec<String> = jumps.iter().map(|j| j.to_string()).collect();
        println!("{} split={} frames={} labeled={labeled} jumps={}", v.id, v.split, v.len(), jumps.join(","));
    }
    Ok(())
}

fn train_cmd(mut s: Settings, a: TrainArgs) -> Result<()> {
    let d = TrainConfig::default();
    let data_dir = s.path(a.data, "data")?;
    let out = s.path(a.out, "out")?;
    let log_path = s.optional_path(a.log, "log")?;
    let cfg = TrainConfig {
        lr0: s.value(a.lr, "lr", d.lr0)?,
        momentum: s.value(a.momentum, "momentum", d.momentum)?,
        batch_pairs: s.value(a.batch, "batch", d.batch_pairs)?,
        max_epochs: s.value(a.epochs, "epochs", d.max_epochs)?,
        lambda: s.value(a.lambda, "lambda", d.lambda)?,
        k: s.value(a.k, "k", d.k)?,
        mode: s.value(a.mode, "mode", d.mode)?,
        p1_floor: s.value(a.p1_min, "p1-min", d.p1_floor)?,
        t: s.value(a.t, "t", d.t)?,
        aat_epochs: s.value(a.aat_epochs, "aat-epochs", d.aat_epochs)?,
        pairs_per_case: s.value(a.pairs_per_case, "pairs-per-case", d.pairs_per_case)?,
        augment: !s.switch(a.no_augment, "no-augment")?,
        time_budget_secs: s.optional(a.time_budget, "time-budget")?,
        seed: s.value(a.seed, "seed", d.seed)?,
        ..d
    };
    s.finish("train")?;
    cfg.validate()?;
    let data = VideoDataset::load(&data_dir)?;
    let start = Instant::now();
    let outcome = train::<f64>(&data, &ModelConfig::default(), &cfg, |e, steps| {
        let n = steps.len().max(1) as f64;
        let mean = steps.iter().map(|r| r.loss.total).sum::<f64>() / n;
        eprintln!(
            "epoch={} seg_acc={:.4} prop_acc={:.4} mean_loss={:.4} elapsed={:.1}s",
            e.epoch,
            e.seg_accuracy,
            e.prop_accuracy,
            mean,
            start.elapsed().as_secs_f64()
        );
    })?;
    create_parent(&out)?;
    checkpoint::save(&outcome.model, outcome.steps, &out)?;
    if let Some(p) = log_path {
        create_parent(&p)?;
        fs::write(&p, outcome.log.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("stop={:?} steps={} checkpoint={}", outcome.stop, outcome.steps, out.display());
    Ok(())
}

fn frames_of(v: &Video) -> Vec<Tensor> {
    v.frames.iter().map(|f| f.to_tensor()).collect()
}

fn infer(mut s: Settings, a: InferArgs) -> Result<()> {
    let d = MsiConfig::default();
    let ckpt = s.path(a.ckpt, "ckpt")?;
    let data_dir = s.path(a.data, "data")?;
    let video = s.optional(a.video, "video")?;
    let out = s.path(a.out, "out")?;
    let cfg = MsiConfig {
        mode: s.value(a.mode, "mode", d.mode)?,
        alpha: s.value(a.alpha, "alpha", d.alpha)?,
        k: s.value(a.k, "k", d.k)?,
        hard_source: s.switch(a.hard_source, "hard-source")?,
    };
    let with_overlay = s.switch(a.overlay, "overlay")?;
    s.finish("infer")?;
    let (model, _) = checkpoint::load::<f64>(&ckpt)?;
    let data = VideoDataset::load(&data_dir)?;
    let videos: Vec<&Video> = match &video {
        Some(id) => vec![data.video(id)?],
        None => data.split(Split::Test).collect(),
    };
    if videos.is_empty() {
        return Err(CliError::Data(format!("{}: no test videos", data_dir.display())).into());
    }
    for v in videos {
        let result = msi_infer(&model, &frames_of(v), &cfg)?;
        let dir = out.join(&v.id);
        fs::create_dir_all(&dir).map_err(|e| SpnError::io(&dir, e))?;
        for (i, l) in result.labels.iter().enumerate() {
            write_label(&label_path(&out, &v.id, i), l)?;
            if with_overlay {
                let img = pnm::Image { width: l.width(), height: l.height(), channels: 3, data: overlay(l) };
                pnm::write(&dir.join(format!("overlay_{i:04}.ppm")), &img)?;
            }
        }
        println!("{} {} threshold={} seg_calls={}", v.id, result.partition, result.threshold, result.seg_calls);
    }
    Ok(())
}

fn eval(mut s: Settings, a: EvalArgs) -> Result<()> {
    let pred_dir = s.path(a.pred, "pred")?;
    let data_dir = s.path(a.data, "data")?;
    let split = s.value(a.split, "split", Split::Test)?;
    s.finish("eval")?;
    let data = VideoDataset::load(&data_dir)?;
    let mut pairs: Vec<(LabelMap, &LabelMap)> = Vec::new();
    for v in data.split(split) {
        for (i, gt) in v.labels.iter().enumerate() {
            if let Some(gt) = gt {
                pairs.push((read_label(&label_path(&pred_dir, &v.id, i))?, gt));
            }
        }
    }
    if pairs.is_empty() {
        return Err(CliError::Data(format!("{}: no labeled {split} frames", data_dir.display())).into());
    }
    let report = DiceReport::from_pairs(pairs.iter().map(|(p, g)| (p, *g)), NUM_CLASSES)?;
    println!("mean_dice={}", report.mean);
    println!("frames={}", report.frames);
    println!("class,name,dice");
    for c in 1..NUM_CLASSES {
        let d = report.per_class[c].map_or_else(String::new, |d| d.to_string());
        println!("{c},{},{d}", CLASS_NAMES[c]);
    }
    Ok(())
}

fn keyframes(mut s: Settings, a: KeyframesArgs) -> Result<()> {
    let data_dir = s.path(a.data, "data")?;
    let id: String = s.required(a.video, "video")?;
    let alpha = s.value(a.alpha, "alpha", MsiConfig::default().alpha)?;
    s.finish("keyframes")?;
    let data = VideoDataset::load(&data_dir)?;
    let (_, threshold, partition) = select_key_frames(&frames_of(data.video(&id)?), alpha)?;
    eprintln!("threshold={threshold}");
    println!("{partition}");
    Ok(())
}

fn aat_curve(mut s: Settings, a: AatCurveArgs) -> Result<()> {
    let d = AatConfig::default();
    let cfg = AatConfig {
        t: s.value(a.t, "t", d.t)?,
        p1_floor: s.value(a.p1_min, "p1-min", d.p1_floor)?,
        i_max: s.required(a.i_max, "i-max")?,
        seed: 0,
    };
    let steps = s.optional(a.steps, "steps")?.unwrap_or(cfg.i_max + 1);
    s.finish("aat-curve")?;
    cfg.validate()?;
    let mut out = String::from("step,p1,p2,p3\n");
    for i in 0..steps {
        let [p1, p2, p3] = case_probabilities(i, &cfg);
        out.push_str(&format!("{i},{p1},{p2},{p3}\n"));
    }
    print!("{out}");
    Ok(())
}

fn gradcheck(mut s: Settings, a: GradcheckArgs) -> Result<()> {
    let seed = s.value(a.seed, "seed", 0)?;
    s.finish("gradcheck")?;
    let start = Instant::now();
    let reports = run_suite(seed)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    for r in &reports {
        println!("{r}");
    }
    eprintln!("checks={} failed={} elapsed={:.1}s", reports.len(), failed.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        return Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))).into());
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SpnError::io(dir, e))?;
    }
    Ok(())
}
