//! `spikeseg` command line: phantom synthesis, per-view training, single-view
//! prediction, three-view ensembling and FLOPs accounting.

mod config;
mod files;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use spikeseg::data::{extract_slices, synth_phantom, write_pgm, write_smmv, write_volume, PhantomConfig, ViewSlices};
use spikeseg::ensemble::{predict_view, EnsembleReport};
use spikeseg::metrics::{dice_ratio_3d, nll, FlopsSummary};
use spikeseg::model::{read_checkpoint, write_checkpoint, CheckpointMeta};
use spikeseg::train::CSV_HEADER;
use spikeseg::{flops_count, predict_ensemble, ClassDice, MultiModalVolume, SpikingUSegNet32, Tensor, Trainer32, View};

use config::RunConfig;
use files::{load_dataset, write_manifest};

/// Bad arguments or configuration; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "spikeseg", version, about = "Spiking U-Net brain tumour segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom volumes.
    Synth(SynthArgs),
    /// Train one view model.
    Train(TrainArgs),
    /// Run one checkpoint over a directory of volumes.
    Predict(PredictArgs),
    /// Fuse sagittal, coronal and axial checkpoints.
    Ensemble(EnsembleArgs),
    /// Dense and spike-driven FLOPs of one checkpoint.
    Flops(FlopsArgs),
}

#[derive(Clone, Copy, Debug)]
struct Shape([usize; 3]);

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        <[usize; 3]>::try_from(parts)
            .map(Shape)
            .map_err(|_| format!("expected XxYxZ, got `{s}`"))
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Volume extent as XxYxZ.
    #[arg(long, default_value = "32x40x24")]
    shape: Shape,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    view: Option<View>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total epochs, counting those already completed when resuming.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop: Option<Shape>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    crop: Option<Shape>,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Three checkpoints, one per view, in any order.
    #[arg(long, num_args = 3, required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    crop: Option<Shape>,
    /// Skip the per-slice disagreement images.
    #[arg(long)]
    no_pgm: bool,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    crop: Option<Shape>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Flops(a) => flops(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = matches!(e.downcast_ref::<spikeseg::Error>(), Some(spikeseg::Error::Config(_)));
            if e.downcast_ref::<UsageError>().is_some() || config_error {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SPIKESEG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("SPIKESEG_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let cfg = PhantomConfig::default();
    (0..a.count).into_par_iter().try_for_each(|i| -> Result<()> {
        let seed = a.seed + i as u64;
        let vol = synth_phantom(seed, a.shape.0, &cfg).map_err(|e| usage(e.to_string()))?;
        write_volume(&a.out.join(format!("phantom-{i:03}.smmv")), &vol)?;
        Ok(())
    })?;
    let m = write_manifest(&a.out, "synth")?;
    eprintln!("wrote {} volumes to {}", m.files.len(), a.out.display());
    Ok(())
}

fn parse_view(name: &str) -> Result<View> {
    name.parse().map_err(|e: spikeseg::Error| usage(e.to_string()))
}

fn slices_for(data: &[(String, MultiModalVolume)], view: View) -> Result<Vec<ViewSlices>> {
    Ok(data
        .iter()
        .map(|(id, v)| extract_slices(v, view, id.clone()))
        .collect::<spikeseg::Result<_>>()?)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.view {
        cfg.view = Some(v.name().into());
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(c) = a.crop {
        cfg.data.crop = Some(c.0);
    }
    cfg.data.train = a.data.or(cfg.data.train);
    cfg.data.val = a.val.or(cfg.data.val);
    cfg.out = a.out.or(cfg.out);
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;

    let resumed = a.resume.as_deref().map(read_checkpoint::<f32>).transpose().context("reading resume checkpoint")?;
    let view = match (cfg.view.clone(), resumed.as_ref().and_then(|c| c.meta.view.clone())) {
        (Some(v), Some(r)) if parse_view(&v)? != parse_view(&r)? => {
            bail!(usage(format!("--view {v} does not match the {r} checkpoint being resumed")))
        }
        (Some(v), _) | (None, Some(v)) => parse_view(&v)?,
        (None, None) => bail!(usage("no view given; pass --view or set `view` in the config")),
    };
    let data_dir = cfg.data.train.clone().ok_or_else(|| usage("no training data; pass --data"))?;
    let out = cfg.out.clone().ok_or_else(|| usage("no output directory; pass --out"))?;

    let train_set = slices_for(&load_dataset(&data_dir, cfg.data.crop)?, view)?;
    let val_set = match &cfg.data.val {
        Some(dir) => slices_for(&load_dataset(dir, cfg.data.crop)?, view)?,
        None => Vec::new(),
    };
    let (h, w) = train_set[0].slice_hw();

    let (mut trainer, mut csv) = match resumed {
        Some(ck) => {
            let completed = ck.meta.epoch.unwrap_or(0);
            let prior = std::fs::read_to_string(out.join("train.csv")).unwrap_or_default();
            let kept = csv_through_epoch(&prior, completed);
            (Trainer32::resume(ck.model, cfg.train.clone(), view, cfg.seed, completed)?, kept)
        }
        None => {
            let model_cfg = cfg.model.clone().with_slice(h, w);
            model_cfg.validate().map_err(|e| usage(e.to_string()))?;
            let model = SpikingUSegNet32::build(model_cfg, cfg.seed)?;
            (Trainer32::new(model, cfg.train.clone(), view, cfg.seed)?, format!("{CSV_HEADER}\n"))
        }
    };
    let model_cfg = trainer.model.config().clone();
    if (model_cfg.height, model_cfg.width) != (h, w) {
        bail!(usage(format!(
            "checkpoint expects {}x{} {view} slices, data gives {h}x{w}",
            model_cfg.height, model_cfg.width
        )));
    }

    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let header_len = CSV_HEADER.len() + 1;
    while trainer.completed_epochs() < cfg.train.epochs {
        let before = trainer.csv().len();
        let s = trainer.run_epoch(&train_set, &val_set)?;
        csv.push_str(&trainer.csv()[before.max(header_len)..]);
        std::fs::write(out.join("train.csv"), &csv)?;
        let meta = CheckpointMeta { model: model_cfg.clone(), view: Some(view.name().into()), epoch: Some(s.epoch) };
        write_checkpoint(&out.join("last.ckpt"), &meta, &trainer.model)?;
        if s.improved || val_set.is_empty() {
            write_checkpoint(&out.join("best.ckpt"), &meta, trainer.best_model())?;
        }
        match &s.val_dice {
            Some(d) => eprintln!(
                "epoch {} loss {:.4} lr {:.2e} val dice ET {:.3} TC {:.3} WT {:.3}{}",
                s.epoch, s.mean_task_loss, s.lr, d.et, d.tc, d.wt, if s.improved { " *" } else { "" }
            ),
            None => eprintln!("epoch {} loss {:.4} lr {:.2e}", s.epoch, s.mean_task_loss, s.lr),
        }
    }
    write_manifest(&out, "train")?;
    Ok(())
}

/// Rows of an earlier CSV up to and including `epoch`.
fn csv_through_epoch(csv: &str, epoch: usize) -> String {
    let mut kept = format!("{CSV_HEADER}\n");
    for line in csv.lines().skip(1) {
        match line.split(',').next().and_then(|e| e.parse::<usize>().ok()) {
            Some(e) if e <= epoch => {
                kept.push_str(line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    kept
}

struct LoadedModel {
    model: SpikingUSegNet32,
    view: View,
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    let ck = read_checkpoint::<f32>(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let name = ck.meta.view.ok_or_else(|| anyhow!("checkpoint {} records no view", path.display()))?;
    Ok(LoadedModel { model: ck.model, view: parse_view(&name)? })
}

#[derive(Serialize)]
struct VolumeMetrics {
    id: String,
    dice: ClassDice,
    nll: f64,
    flops: FlopsSummary,
}

#[derive(Serialize)]
struct PredictSummary {
    view: String,
    volumes: Vec<VolumeMetrics>,
    mean_dice: ClassDice,
    mean_nll: f64,
}

fn predict(a: PredictArgs) -> Result<()> {
    let lm = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.data, a.crop.map(|s| s.0))?;
    std::fs::create_dir_all(&a.out)?;
    let volumes = data
        .par_iter()
        .map(|(id, vol)| -> Result<VolumeMetrics> {
            let (probs, flops) = predict_view(&lm.model, vol, lm.view)?;
            write_smmv(&a.out.join(format!("{id}.{}.smmv", lm.view.name())), &probs.to_smmv())?;
            Ok(VolumeMetrics {
                id: id.clone(),
                dice: dice_ratio_3d(&probs.probs, &vol.labels)?,
                nll: nll(&probs.probs, &vol.labels)?,
                flops: FlopsSummary::from(&flops),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dice: Vec<ClassDice> = volumes.iter().map(|v| v.dice.clone()).collect();
    let summary = PredictSummary {
        view: lm.view.name().into(),
        mean_dice: ClassDice::average(&dice),
        mean_nll: volumes.iter().map(|v| v.nll).sum::<f64>() / volumes.len() as f64,
        volumes,
    };
    std::fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    write_manifest(&a.out, "predict")?;
    println!("{}", serde_json::to_string(&summary.mean_dice)?);
    Ok(())
}

#[derive(Serialize)]
struct EnsembleSummary {
    volumes: BTreeMap<String, EnsembleReport>,
    mean_dice: ClassDice,
    mean_view_dice: BTreeMap<String, ClassDice>,
    mean_nll: f64,
    mean_view_nll: f64,
}

/// Largest population variance three values in `[0, 1]` can have.
const MAX_DISAGREEMENT: f32 = 2.0 / 9.0;

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let loaded = a.checkpoints.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let found: Vec<&str> = loaded.iter().map(|lm| lm.view.name()).collect();
    let models: Vec<&SpikingUSegNet32> = View::ALL
        .iter()
        .map(|&v| {
            let mut matching = loaded.iter().filter(|lm| lm.view == v);
            match (matching.next(), matching.next()) {
                (Some(lm), None) => Ok(&lm.model),
                (None, _) => Err(usage(format!("no {v} checkpoint among --checkpoints (got {})", found.join(", ")))),
                (Some(_), Some(_)) => Err(usage(format!("more than one {v} checkpoint among --checkpoints"))),
            }
        })
        .collect::<Result<_>>()?;
    let reference = without_slice(models[0].config());
    for m in &models[1..] {
        if without_slice(m.config()) != reference {
            bail!(usage("view checkpoints disagree on architecture"));
        }
    }

    let data = load_dataset(&a.data, a.crop.map(|s| s.0))?;
    std::fs::create_dir_all(&a.out)?;
    let mut reports = BTreeMap::new();
    for (id, vol) in &data {
        let out = predict_ensemble([models[0], models[1], models[2]], vol)?;
        let dir = a.out.join(id);
        std::fs::create_dir_all(&dir)?;
        write_smmv(&dir.join("fused.smmv"), &out.fused.to_smmv())?;
        for p in &out.views {
            write_smmv(&dir.join(format!("{}.smmv", p.provenance)), &p.to_smmv())?;
        }
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&out.report)? + "\n")?;
        if !a.no_pgm {
            dump_disagreement(&dir, &out.disagreement)?;
        }
        reports.insert(id.clone(), out.report);
    }

    let n = reports.len() as f64;
    let fused: Vec<ClassDice> = reports.values().map(|r| r.ensemble.dice.clone()).collect();
    let mean_view_dice = View::ALL
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let per: Vec<ClassDice> = reports.values().map(|r| r.views[i].dice.clone()).collect();
            (v.name().to_string(), ClassDice::average(&per))
        })
        .collect();
    let summary = EnsembleSummary {
        mean_dice: ClassDice::average(&fused),
        mean_view_dice,
        mean_nll: reports.values().map(|r| r.ensemble.nll).sum::<f64>() / n,
        mean_view_nll: reports.values().map(|r| r.mean_view_nll).sum::<f64>() / n,
        volumes: reports,
    };
    std::fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    write_manifest(&a.out, "ensemble")?;
    println!("{}", serde_json::to_string(&summary.mean_dice)?);
    Ok(())
}

fn without_slice(cfg: &spikeseg::ModelConfig) -> spikeseg::ModelConfig {
    cfg.clone().with_slice(0, 0)
}

/// One greyscale image per axial slice and class of the `[3, X, Y, Z]` map.
fn dump_disagreement(dir: &Path, var: &Tensor<f32>) -> Result<()> {
    let pgm = dir.join("disagreement");
    std::fs::create_dir_all(&pgm)?;
    let s = var.shape();
    let (x, y, z) = (s[1], s[2], s[3]);
    for (c, class) in spikeseg::data::LABEL_CHANNELS.iter().enumerate() {
        for k in 0..z {
            let plane: Vec<f32> = (0..x * y).map(|i| var.data()[((c * x + i / y) * y + i % y) * z + k]).collect();
            write_pgm(&pgm.join(format!("{}-z{k:03}.pgm", class.to_lowercase())), x, y, &plane, 0.0, MAX_DISAGREEMENT)?;
        }
    }
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let lm = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.data, a.crop.map(|s| s.0))?;
    let mut rec = lm.model.new_recorder();
    for (id, vol) in &data {
        let vs = extract_slices(vol, lm.view, id.clone())?;
        let slices: Vec<Tensor<f32>> = vs.slices;
        lm.model.forward_volume(&slices, Some(&mut rec)).with_context(|| format!("running {id}"))?;
    }
    let report = flops_count(&rec)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.out {
        std::fs::write(path, json.clone() + "\n")?;
    }
    println!("{json}");
    Ok(())
}
