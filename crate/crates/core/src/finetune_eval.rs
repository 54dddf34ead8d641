//! Classification on top of the pretrained encoder: fine-tuning on labeled
//! constellation images, accuracy across SNR, and feature export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{FipError, Result};
use crate::exec::Execution;
use crate::fip_train::{optimizer_step, Schedule, TrainConfig, TrainState};
use crate::modalities::{build_constellation, normalize, ChannelStats, ImageTensor, ModalityKind, MultimodalSample, RenderConfig};
use crate::model::{head_specs, patchify, stack_patches, Binder, Mmae, ParamStore};
use crate::rng::rng_for;
use crate::sigsim::ModulationScheme;
use crate::tensor_ad::{Graph, Tensor};

const HEAD_STREAM: u64 = 0x4845_4144;
const FT_SHUFFLE_STREAM: u64 = 0x4654_5348;
const EVAL_STREAM: u64 = 0x4556_414c;

/// Parameters frozen by head-only fine-tuning.
pub const ENCODER_PREFIXES: [&str; 3] = ["patch_embed.", "modality_embed.", "encoder."];

/// Chunk size for inference.
const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub schedule: Schedule,
    /// Train only the classification head; the encoder stays fixed.
    pub head_only: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            batch_size: 32,
            micro_batch: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_frac: 0.1,
            schedule: Schedule::WarmupCosine,
            head_only: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn optimizer(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            micro_batch: self.micro_batch,
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            schedule: self.schedule,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Normalized constellation patches `[n, 3 P^2]` of one image.
pub fn prepare_constellation(img: &ImageTensor, stats: &ChannelStats, patch: usize) -> Result<Tensor<f32>> {
    patchify(&normalize(img, stats)?, patch)
}

/// A labeled constellation ready for the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatches {
    pub patches: Tensor<f32>,
    pub label: usize,
    pub snr_db: f64,
}

pub fn prepare_labeled(
    samples: &[MultimodalSample],
    stats: &ChannelStats,
    patch: usize,
    exec: Execution,
) -> Result<Vec<LabeledPatches>> {
    exec.map(samples.iter().enumerate().collect(), |(i, s)| {
        let label = s.label.ok_or_else(|| FipError::Dataset {
            sample: i.to_string(),
            reason: "fine-tuning needs labeled samples".into(),
        })?;
        Ok(LabeledPatches {
            patches: prepare_constellation(s.input(ModalityKind::Constellation), stats, patch)?,
            label,
            snr_db: s.snr_db,
        })
    })
    .into_iter()
    .collect()
}

/// Adds a freshly initialized head if the store has none.
pub fn ensure_head(model: &Mmae<f32>, params: &mut ParamStore<f32>, seed: u64) {
    params.init_missing(&head_specs(model.config()), &mut rng_for(seed, &[HEAD_STREAM]));
}

/// Logits `[B, n_classes]` for a batch of patch matrices.
pub fn logits(model: &Mmae<f32>, params: &ParamStore<f32>, patches: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let x = g.constant(stack_patches(patches)?);
    let l = model.classify(&mut g, &mut b, x)?;
    Ok(g.value(l).clone())
}

/// Logits for a single raw (unnormalized) constellation image.
pub fn pool_and_classify(
    image: &ImageTensor,
    model: &Mmae<f32>,
    params: &ParamStore<f32>,
    stats: &ChannelStats,
) -> Result<Vec<f32>> {
    let cfg = model.config();
    if image.size() != cfg.image_size {
        return Err(FipError::ShapeMismatch {
            op: "pool_and_classify",
            lhs: image.shape().to_vec(),
            rhs: vec![3, cfg.image_size, cfg.image_size],
        });
    }
    let p = prepare_constellation(image, stats, cfg.patch_size)?;
    Ok(logits(model, params, &[&p])?.into_data())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes, evaluated in fixed-size chunks.
pub fn predict(model: &Mmae<f32>, params: &ParamStore<f32>, patches: &[&Tensor<f32>], exec: Execution) -> Result<Vec<usize>> {
    let c = model.config().n_classes;
    let chunks: Vec<&[&Tensor<f32>]> = patches.chunks(INFER_CHUNK).collect();
    let out = exec.map(chunks, |ch| -> Result<Vec<usize>> {
        let l = logits(model, params, ch)?;
        Ok(l.data().chunks(c).map(argmax).collect())
    });
    let mut preds = Vec::with_capacity(patches.len());
    for r in out {
        preds.extend(r?);
    }
    Ok(preds)
}

/// Mean-pooled encoder features `[N, d_model]`, row-major.
pub fn pooled_features(
    model: &Mmae<f32>,
    params: &ParamStore<f32>,
    patches: &[&Tensor<f32>],
    exec: Execution,
) -> Result<Vec<Vec<f32>>> {
    let d = model.config().d_model;
    let chunks: Vec<&[&Tensor<f32>]> = patches.chunks(INFER_CHUNK).collect();
    let out = exec.map(chunks, |ch| -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let x = g.constant(stack_patches(ch)?);
        let f = model.pooled_features(&mut g, &mut b, ModalityKind::Constellation, x)?;
        Ok(g.value(f).data().chunks(d).map(|r| r.to_vec()).collect())
    });
    let mut rows = Vec::with_capacity(patches.len());
    for r in out {
        rows.extend(r?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub batch_accuracy: f64,
}

/// Cross-entropy fine-tuning of the encoder and head (or the head alone).
/// Decoder parameters are never read or written.
pub fn finetune(
    model: &Mmae<f32>,
    params: &mut ParamStore<f32>,
    data: &[LabeledPatches],
    cfg: &FinetuneConfig,
    exec: Execution,
) -> Result<Vec<FinetuneRecord>> {
    if data.is_empty() {
        return Err(FipError::invalid("fine-tuning dataset is empty"));
    }
    let opt = cfg.optimizer();
    opt.validate()?;
    ensure_head(model, params, cfg.seed);
    let spe = opt.steps_per_epoch(data.len());
    let total = (cfg.epochs * spe) as u64;
    let mut state = TrainState::new(params, total, &opt);
    let frozen: &[&str] = if cfg.head_only { &ENCODER_PREFIXES } else { &[] };
    let mut log = Vec::with_capacity(total as usize);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[FT_SHUFFLE_STREAM, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let bsz = batch.len();
            let chunks: Vec<&[usize]> = batch.chunks(cfg.micro_batch).collect();
            let shared: &ParamStore<f32> = params;
            let results = exec.map(chunks, |ch| -> Result<_> {
                let mut g = Graph::new();
                let mut b = Binder::with_frozen(shared, frozen);
                let x: Vec<&Tensor<f32>> = ch.iter().map(|&i| &data[i].patches).collect();
                let labels: Vec<usize> = ch.iter().map(|&i| data[i].label).collect();
                let xv = g.constant(stack_patches(&x)?);
                let l = model.classify(&mut g, &mut b, xv)?;
                let correct = g
                    .value(l)
                    .data()
                    .chunks(model.config().n_classes)
                    .zip(&labels)
                    .filter(|(r, &y)| argmax(r) == y)
                    .count();
                let ce = g.cross_entropy_with_logits(l, &labels)?;
                let loss = g.value(ce).item() as f64;
                if !loss.is_finite() {
                    return Err(FipError::NonFinite(format!("fine-tuning loss is {loss}")));
                }
                let scaled = g.scale(ce, ch.len() as f64 / bsz as f64);
                g.backward(scaled)?;
                Ok((loss * ch.len() as f64, correct, b.grads(&g)))
            });
            let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            let (mut loss, mut correct) = (0.0, 0);
            for r in results {
                let (l, c, gr) = r?;
                loss += l;
                correct += c;
                for (n, t) in gr {
                    match grads.get_mut(&n) {
                        Some(acc) => acc.add_assign(&t),
                        None => {
                            grads.insert(n, t);
                        }
                    }
                }
            }
            let lr = optimizer_step(params, &grads, &mut state, &opt)?;
            log.push(FinetuneRecord {
                step: state.step,
                lr,
                loss: loss / bsz as f64,
                batch_accuracy: correct as f64 / bsz as f64,
            });
        }
    }
    Ok(log)
}

/// One constellation image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub image: ImageTensor,
    pub label: usize,
    pub snr_db: f64,
}

/// Anything that maps constellation images to class predictions.
pub trait Classifier: Sync {
    fn predict(&self, samples: &[EvalSample], exec: Execution) -> Result<Vec<usize>>;
}

/// The fine-tuned network.
pub struct ModelClassifier<'a> {
    pub model: &'a Mmae<f32>,
    pub params: &'a ParamStore<f32>,
    pub stats: ChannelStats,
}

impl Classifier for ModelClassifier<'_> {
    fn predict(&self, samples: &[EvalSample], exec: Execution) -> Result<Vec<usize>> {
        let p = self.model.config().patch_size;
        let patches: Result<Vec<Tensor<f32>>> = exec
            .map(samples.iter().collect(), |s| prepare_constellation(&s.image, &self.stats, p))
            .into_iter()
            .collect();
        let patches = patches?;
        let refs: Vec<&Tensor<f32>> = patches.iter().collect();
        predict(self.model, self.params, &refs, exec)
    }
}

/// Test-mode classifier that reads the ground truth.
pub struct OracleClassifier;

impl Classifier for OracleClassifier {
    fn predict(&self, samples: &[EvalSample], _exec: Execution) -> Result<Vec<usize>> {
        Ok(samples.iter().map(|s| s.label).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrRow {
    pub snr_db: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SnrRow>,
    pub overall: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(samples: &[EvalSample], preds: &[usize], n_classes: usize) -> Result<Self> {
        if samples.len() != preds.len() || samples.is_empty() {
            return Err(FipError::invalid("need one prediction per sample and at least one sample"));
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        // Group by SNR in first-seen order.
        let mut order: Vec<f64> = Vec::new();
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for (s, &p) in samples.iter().zip(preds) {
            if s.label >= n_classes || p >= n_classes {
                return Err(FipError::invalid(format!("class index out of range: {} / {p}", s.label)));
            }
            confusion[s.label][p] += 1;
            let k = match order.iter().position(|&v| v == s.snr_db) {
                Some(k) => k,
                None => {
                    order.push(s.snr_db);
                    counts.push((0, 0));
                    order.len() - 1
                }
            };
            counts[k].0 += (s.label == p) as usize;
            counts[k].1 += 1;
        }
        let rows = order
            .into_iter()
            .zip(counts)
            .map(|(snr_db, (c, n))| SnrRow {
                snr_db,
                accuracy: c as f64 / n as f64,
                n,
            })
            .collect();
        let trace: usize = (0..n_classes).map(|i| confusion[i][i]).sum();
        Ok(EvalReport {
            rows,
            overall: trace as f64 / samples.len() as f64,
            confusion,
        })
    }

    pub fn accuracy_at(&self, snr_db: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.snr_db == snr_db).map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("snr_db,accuracy,n\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.snr_db, r.accuracy, r.n);
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let names: Vec<&str> = ModulationScheme::ALL.iter().map(|m| m.name()).collect();
        let mut s = String::from("true\\pred");
        for (i, _) in self.confusion.iter().enumerate() {
            let _ = write!(s, ",{}", names.get(i).copied().unwrap_or("?"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(names.get(i).copied().unwrap_or("?"));
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// {-10, -8, ..., 10} dB.
pub fn default_snr_grid() -> Vec<f64> {
    (-5..=5).map(|k| 2.0 * k as f64).collect()
}

/// Fresh, class-balanced constellations for one grid point.
pub fn generate_eval_samples(
    snr_db: f64,
    grid_index: usize,
    n: usize,
    seed: u64,
    render: &RenderConfig,
    exec: Execution,
) -> Result<Vec<EvalSample>> {
    let classes = ModulationScheme::ALL;
    exec.map_range(n, |i| {
        let scheme = classes[i % classes.len()];
        let mut rng = rng_for(seed, &[EVAL_STREAM, grid_index as u64, i as u64]);
        Ok(EvalSample {
            image: build_constellation(scheme, snr_db, &mut rng, render)?,
            label: scheme.index(),
            snr_db,
        })
    })
    .into_iter()
    .collect()
}

/// `n_total` fresh samples spread round-robin over the grid, classes balanced
/// within each grid point.
pub fn generate_grid_test_set(
    grid: &[f64],
    n_total: usize,
    seed: u64,
    render: &RenderConfig,
    exec: Execution,
) -> Result<Vec<EvalSample>> {
    if grid.is_empty() {
        return Err(FipError::invalid("SNR grid is empty"));
    }
    let classes = ModulationScheme::ALL;
    exec.map_range(n_total, |i| {
        let (j, k) = (i % grid.len(), i / grid.len());
        let scheme = classes[k % classes.len()];
        let mut rng = rng_for(seed, &[EVAL_STREAM, j as u64, k as u64]);
        Ok(EvalSample {
            image: build_constellation(scheme, grid[j], &mut rng, render)?,
            label: scheme.index(),
            snr_db: grid[j],
        })
    })
    .into_iter()
    .collect()
}

/// Scores a classifier on prepared samples.
pub fn evaluate(classifier: &dyn Classifier, samples: &[EvalSample], exec: Execution) -> Result<EvalReport> {
    let preds = classifier.predict(samples, exec)?;
    EvalReport::from_predictions(samples, &preds, ModulationScheme::ALL.len())
}

/// Accuracy on `n_per_point` freshly generated samples at every grid SNR.
pub fn evaluate_by_snr(
    classifier: &dyn Classifier,
    grid: &[f64],
    n_per_point: usize,
    seed: u64,
    render: &RenderConfig,
    exec: Execution,
) -> Result<EvalReport> {
    if grid.is_empty() {
        return Err(FipError::invalid("SNR grid is empty"));
    }
    if n_per_point == 0 {
        return Err(FipError::invalid("need at least one sample per SNR point"));
    }
    let mut samples = Vec::with_capacity(grid.len() * n_per_point);
    for (j, &snr) in grid.iter().enumerate() {
        samples.extend(generate_eval_samples(snr, j, n_per_point, seed, render, exec)?);
    }
    let preds = classifier.predict(&samples, exec)?;
    EvalReport::from_predictions(&samples, &preds, ModulationScheme::ALL.len())
}

/// Evaluates a fixed labeled dataset, grouping by each sample's SNR.
pub fn evaluate_samples(classifier: &dyn Classifier, samples: &[MultimodalSample], exec: Execution) -> Result<EvalReport> {
    let eval: Result<Vec<EvalSample>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(EvalSample {
                image: s.input(ModalityKind::Constellation).clone(),
                label: s.label.ok_or_else(|| FipError::Dataset {
                    sample: i.to_string(),
                    reason: "evaluation needs labels".into(),
                })?,
                snr_db: s.snr_db,
            })
        })
        .collect();
    let eval = eval?;
    let preds = classifier.predict(&eval, exec)?;
    EvalReport::from_predictions(&eval, &preds, ModulationScheme::ALL.len())
}

/// CSV with `id,label,snr_db,f0..f{d-1}`; unlabeled rows leave `label` empty.
pub fn export_features(
    model: &Mmae<f32>,
    params: &ParamStore<f32>,
    stats: &ChannelStats,
    samples: &[MultimodalSample],
    exec: Execution,
) -> Result<String> {
    let p = model.config().patch_size;
    let patches: Result<Vec<Tensor<f32>>> = exec
        .map(samples.iter().collect(), |s| {
            prepare_constellation(s.input(ModalityKind::Constellation), stats, p)
        })
        .into_iter()
        .collect();
    let patches = patches?;
    let refs: Vec<&Tensor<f32>> = patches.iter().collect();
    let feats = pooled_features(model, params, &refs, exec)?;
    let mut s = String::from("id,label,snr_db");
    for k in 0..model.config().d_model {
        let _ = write!(s, ",f{k}");
    }
    s.push('\n');
    for (i, (smp, row)) in samples.iter().zip(&feats).enumerate() {
        let label = smp.label.map(|l| l.to_string()).unwrap_or_default();
        let _ = write!(s, "{i},{label},{}", smp.snr_db);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}
