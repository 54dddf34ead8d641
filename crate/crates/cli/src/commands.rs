use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fip_core::exec::Execution;
use fip_core::finetune_eval::{
    default_snr_grid, evaluate_by_snr, evaluate_samples, export_features, ModelClassifier,
};
use fip_core::fip_train::{make_mask_plan, FipConfig, TrainLog};
use fip_core::modalities::{ImageTensor, ModalityKind, MultimodalSample, RenderConfig};
use fip_core::model::{Mmae, ModelConfig};
use fip_core::pipeline;
use fip_core::rng::rng_for;
use fip_core::sigsim::ModulationScheme;
use fip_core::storage::{
    generate_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_json, Checkpoint,
    DatasetManifest, GenSpec, CHECKPOINT_MANIFEST, DATASET_MANIFEST,
};
use fip_core::tensor_ad::check_primitives;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{EvalArgs, FeaturesArgs, FinetuneArgs, GenArgs, GradcheckArgs, PretrainArgs, ReconArgs, Usage};

const RESOLVED_CONFIG: &str = "config.json";
const TRAIN_LOG: &str = "train_log.csv";
const FINETUNE_LOG: &str = "finetune_log.csv";

fn usage(msg: String) -> anyhow::Error {
    Usage(msg).into()
}

fn dataset_arg(flag: &str, dir: &Path, exec: Execution) -> anyhow::Result<(Vec<MultimodalSample>, DatasetManifest)> {
    if !dir.join(DATASET_MANIFEST).is_file() {
        return Err(usage(format!("{flag}: no dataset at {}", dir.display())));
    }
    Ok(load_dataset(dir, exec)?)
}

fn checkpoint_arg(flag: &str, dir: &Path) -> anyhow::Result<Checkpoint> {
    if !dir.join(CHECKPOINT_MANIFEST).is_file() {
        return Err(usage(format!("{flag}: no checkpoint at {}", dir.display())));
    }
    Ok(load_checkpoint(dir)?)
}

fn check_image_size(flag: &str, manifest: &DatasetManifest, model: &ModelConfig) -> anyhow::Result<()> {
    if manifest.image_size != model.image_size {
        return Err(usage(format!(
            "{flag}: dataset images are {}x{}, the model expects {}x{}",
            manifest.image_size, manifest.image_size, model.image_size, model.image_size
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `out.csv` -> `out.config.json`, for commands whose output is a single file.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("config.json")
}

#[derive(Serialize)]
struct GenConfig<'a> {
    spec: &'a GenSpec,
}

pub fn gen(a: GenArgs, exec: Execution) -> anyhow::Result<()> {
    let classes = if a.classes.is_empty() {
        ModulationScheme::ALL.to_vec()
    } else {
        a.classes
            .iter()
            .map(|c| c.parse::<ModulationScheme>())
            .collect::<Result<_, _>>()
            .map_err(|e| usage(format!("--classes: {e}")))?
    };
    let spec = GenSpec {
        n: a.n,
        labeled: a.labeled,
        snr_min: a.snr_min,
        snr_max: a.snr_max,
        classes,
        render: RenderConfig {
            image_size: a.image_size,
            ..RenderConfig::default()
        },
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let (samples, seeds) = generate_dataset(&spec, exec)?;
    let stats = fip_core::modalities::NormStats::compute(&samples);
    save_dataset(&a.out, &samples, &seeds, &stats, &spec.render)?;
    write_json(&a.out.join(RESOLVED_CONFIG), &GenConfig { spec: &spec })?;
    eprintln!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn pretrain(a: PretrainArgs, exec: Execution) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.fip.mode = m;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    let cfg = cfg.resolve()?;
    let data_dir = cfg.data.clone().ok_or_else(|| usage("--data: required (or `data` in --config)".into()))?;
    let out = cfg.out.clone().ok_or_else(|| usage("--out: required (or `out` in --config)".into()))?;
    let (samples, manifest) = dataset_arg("--data", &data_dir, exec)?;
    check_image_size("--data", &manifest, &cfg.model)?;

    let (mut ckpt, mut log) = if a.resume {
        let ckpt = checkpoint_arg("--out", &out)?;
        if ckpt.model != cfg.model || ckpt.fip != cfg.fip || ckpt.train != cfg.train {
            return Err(usage(format!(
                "--resume: the checkpoint in {} was trained with a different config",
                out.display()
            )));
        }
        let log = match fs::read_to_string(out.join(TRAIN_LOG)) {
            Ok(text) => TrainLog::from_csv(&text)?,
            Err(_) => TrainLog::default(),
        };
        (ckpt, log)
    } else {
        let ckpt = pipeline::init_checkpoint(&cfg.model, &cfg.fip, &cfg.train, manifest.norm_stats.clone(), samples.len())?;
        (ckpt, TrainLog::default())
    };
    // Drop log rows past the checkpoint (written after the last save of an interrupted run).
    let at = ckpt.step();
    log.records.retain(|r| r.step <= at);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(RESOLVED_CONFIG), &cfg)?;

    let spe = cfg.train.steps_per_epoch(samples.len()) as u64;
    let total = ckpt.state.as_ref().map_or(0, |s| s.total_steps);
    let end = a.stop_at.unwrap_or(total).min(total);
    while ckpt.step() < end {
        let next = ((ckpt.step() / spe + 1) * spe).min(end);
        let part = pipeline::pretrain(&mut ckpt, &samples, Some(next), exec)?;
        log.records.extend(part.records);
        save_checkpoint(&out, &ckpt)?;
        write_text(&out.join(TRAIN_LOG), &log.to_csv())?;
        if let Some(r) = log.records.last() {
            eprintln!("epoch {:>3}  step {:>6}/{total}  loss {:.5}", r.step.div_ceil(spe), r.step, r.total);
        }
    }
    if log.records.is_empty() {
        save_checkpoint(&out, &ckpt)?;
        write_text(&out.join(TRAIN_LOG), &log.to_csv())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FinetuneRun<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    finetune: &'a fip_core::finetune_eval::FinetuneConfig,
}

pub fn finetune(a: FinetuneArgs, exec: Execution) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    let cfg = cfg.resolve()?;
    let mut ft = cfg.finetune;
    if let Some(e) = a.epochs {
        ft.epochs = e;
    }
    if let Some(b) = a.batch {
        ft.batch_size = b;
    }
    if let Some(lr) = a.lr {
        ft.lr = lr;
    }
    ft.head_only |= a.head_only;
    ft.optimizer().validate().map_err(|e| usage(e.to_string()))?;
    let ckpt = checkpoint_arg("--ckpt", &a.ckpt)?;
    let (samples, manifest) = dataset_arg("--data", &a.data, exec)?;
    check_image_size("--data", &manifest, &ckpt.model)?;
    if samples.iter().any(|s| s.label.is_none()) {
        return Err(usage(format!("--data: {} is unlabeled; fine-tuning needs labels", a.data.display())));
    }
    let (tuned, log) = pipeline::finetune_checkpoint(&ckpt, &samples, &ft, exec)?;
    save_checkpoint(&a.out, &tuned)?;
    let mut csv = String::from("step,lr,loss,batch_accuracy\n");
    for r in &log {
        csv.push_str(&format!("{},{},{},{}\n", r.step, r.lr, r.loss, r.batch_accuracy));
    }
    write_text(&a.out.join(FINETUNE_LOG), &csv)?;
    write_json(
        &a.out.join(RESOLVED_CONFIG),
        &FinetuneRun {
            checkpoint: &a.ckpt,
            data: &a.data,
            finetune: &ft,
        },
    )?;
    if let Some(r) = log.last() {
        eprintln!("final loss {:.4}, batch accuracy {:.3}", r.loss, r.batch_accuracy);
    }
    Ok(())
}

fn model_of(ckpt: &Checkpoint) -> anyhow::Result<Mmae<f32>> {
    Ok(Mmae::new(ckpt.model.clone())?)
}

#[derive(Serialize)]
struct EvalRun<'a> {
    checkpoint: &'a Path,
    data: Option<&'a Path>,
    snr_grid: &'a [f64],
    n_per_point: usize,
    seed: u64,
    render: RenderConfig,
}

pub fn eval(a: EvalArgs, exec: Execution) -> anyhow::Result<()> {
    let ckpt = checkpoint_arg("--ckpt", &a.ckpt)?;
    if !ckpt.has_head() {
        return Err(usage("--ckpt: checkpoint has no classification head; run `fip finetune` first".into()));
    }
    let model = model_of(&ckpt)?;
    let clf = ModelClassifier {
        model: &model,
        params: &ckpt.params,
        stats: *ckpt.norm_stats.get(ModalityKind::Constellation),
    };
    let grid = if a.snr_grid.is_empty() { default_snr_grid() } else { a.snr_grid.clone() };
    let render = RenderConfig {
        image_size: ckpt.model.image_size,
        ..RenderConfig::default()
    };
    let report = match &a.data {
        Some(dir) => {
            let (samples, manifest) = dataset_arg("--data", dir, exec)?;
            check_image_size("--data", &manifest, &ckpt.model)?;
            evaluate_samples(&clf, &samples, exec)?
        }
        None => {
            if a.n_per_point == 0 {
                return Err(usage("--n-per-point must be at least 1".into()));
            }
            evaluate_by_snr(&clf, &grid, a.n_per_point, a.seed, &render, exec).map_err(|e| match e {
                fip_core::FipError::InvalidArgument(m) => usage(format!("--snr-grid: {m}")),
                other => other.into(),
            })?
        }
    };
    write_text(&a.csv, &report.to_csv())?;
    let confusion = a.confusion.clone().unwrap_or_else(|| {
        let stem = a.csv.file_stem().and_then(|s| s.to_str()).unwrap_or("eval");
        a.csv.with_file_name(format!("{stem}_confusion.csv"))
    });
    write_text(&confusion, &report.confusion_csv())?;
    write_json(
        &sidecar(&a.csv),
        &EvalRun {
            checkpoint: &a.ckpt,
            data: a.data.as_deref(),
            snr_grid: &grid,
            n_per_point: a.n_per_point,
            seed: a.seed,
            render,
        },
    )?;
    for r in &report.rows {
        eprintln!("{:>6.1} dB  {:.3}  (n={})", r.snr_db, r.accuracy, r.n);
    }
    eprintln!("overall {:.4}", report.overall);
    Ok(())
}

#[derive(Serialize)]
struct FeaturesRun<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
}

pub fn features(a: FeaturesArgs, exec: Execution) -> anyhow::Result<()> {
    let ckpt = checkpoint_arg("--ckpt", &a.ckpt)?;
    let (samples, manifest) = dataset_arg("--data", &a.data, exec)?;
    check_image_size("--data", &manifest, &ckpt.model)?;
    let model = model_of(&ckpt)?;
    let csv = export_features(&model, &ckpt.params, ckpt.norm_stats.get(ModalityKind::Constellation), &samples, exec)?;
    write_text(&a.out, &csv)?;
    write_json(
        &sidecar(&a.out),
        &FeaturesRun {
            checkpoint: &a.ckpt,
            data: &a.data,
        },
    )?;
    eprintln!("wrote {} feature rows to {}", samples.len(), a.out.display());
    Ok(())
}

fn save_png(path: &Path, img: &ImageTensor) -> anyhow::Result<()> {
    let s = img.size() as u32;
    image::save_buffer(path, &img.to_rgb8(), s, s, image::ColorType::Rgb8)
        .with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct ReconRun<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    sample: usize,
    seed: u64,
    fip: &'a FipConfig,
    mask: &'a fip_core::model::MaskPlan,
}

pub fn recon(a: ReconArgs) -> anyhow::Result<()> {
    let ckpt = checkpoint_arg("--ckpt", &a.ckpt)?;
    let (samples, manifest) = dataset_arg("--data", &a.data, Execution::Sequential)?;
    check_image_size("--data", &manifest, &ckpt.model)?;
    let sample = samples.get(a.sample).ok_or_else(|| {
        usage(format!("--sample: index {} out of range (dataset has {})", a.sample, samples.len()))
    })?;
    let plan = make_mask_plan(&ckpt.fip, &ckpt.model, &mut rng_for(a.seed, &[a.sample as u64]))?;
    let panels = pipeline::reconstruct(&ckpt, sample, &plan)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for p in &panels {
        for (kind, img) in [("input", &p.input), ("reference", &p.reference), ("reconstruction", &p.reconstruction)] {
            save_png(&a.out.join(format!("{}_{kind}.png", p.modality)), img)?;
        }
    }
    write_json(
        &a.out.join(RESOLVED_CONFIG),
        &ReconRun {
            checkpoint: &a.ckpt,
            data: &a.data,
            sample: a.sample,
            seed: a.seed,
            fip: &ckpt.fip,
            mask: &plan,
        },
    )?;
    eprintln!("wrote {} PNGs to {}", 3 * panels.len(), a.out.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(usage("--tol must be positive".into()));
    }
    let mut reports = check_primitives(a.seed, a.tol)?;
    for fip in [FipConfig::default(), FipConfig::uniform()] {
        let model = fip.resolve_model(&ModelConfig::tiny());
        let mut r = fip_core::fip_train::check_pretrain_gradients(a.seed, a.tol, &model, &fip)?;
        r.name = format!("pretrain_loss[{:?}]", fip.mode).to_lowercase();
        reports.push(r);
    }
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{:<24} {:>6} values  max rel error {:.3e}  {status}", r.name, r.n_checked, r.max_rel_error);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        anyhow::bail!("{failed} of {} gradient checks exceeded tolerance {:e}", reports.len(), a.tol);
    }
    println!("all {} checks passed (seed {}, tolerance {:e})", reports.len(), a.seed, a.tol);
    Ok(())
}
