//! Pretraining objective and loop.
//!
//! The target modality is masked harder and weighted more than the others;
//! `mode = uniform` switches back to one ratio, equal weights and equal
//! decoder depths.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FipError, Result};
use crate::exec::Execution;
use crate::modalities::{ModalityKind, MultimodalSample, NormStats, N_MODALITIES};
use crate::model::{patchify, stack_patches, Binder, MaskPlan, Mmae, ModelConfig, ParamStore};
use crate::rng::rng_for;
use crate::tensor_ad::{Graph, Real, RowIndex, Tensor, Var};

// Stream tags for derived seeds.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const MASK_STREAM: u64 = 0x4d41_534b;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Fip,
    Uniform,
}

impl std::str::FromStr for Mode {
    type Err = FipError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fip" => Ok(Mode::Fip),
            "uniform" => Ok(Mode::Uniform),
            _ => Err(FipError::invalid(format!("unknown mode {s:?} (expected fip or uniform)"))),
        }
    }
}

/// Masking ratios and loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FipConfig {
    pub mode: Mode,
    pub target_modality: ModalityKind,
    pub p_target: f64,
    pub p_other: f64,
    pub w_target: f64,
    pub w_other: f64,
    /// Ratio used for every modality in uniform mode.
    pub p_mask: f64,
}

impl Default for FipConfig {
    fn default() -> Self {
        FipConfig {
            mode: Mode::Fip,
            target_modality: ModalityKind::Constellation,
            p_target: 0.80,
            p_other: 0.60,
            w_target: 1.0,
            w_other: 0.5,
            p_mask: 0.75,
        }
    }
}

impl FipConfig {
    pub fn uniform() -> Self {
        FipConfig {
            mode: Mode::Uniform,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_target", self.p_target), ("p_other", self.p_other), ("p_mask", self.p_mask)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FipError::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, w) in [("w_target", self.w_target), ("w_other", self.w_other)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(FipError::Config(format!("{name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Mask ratio per modality, indexed by [`ModalityKind::index`].
    pub fn ratios(&self) -> [f64; N_MODALITIES] {
        let mut r = [0.0; N_MODALITIES];
        for m in ModalityKind::ALL {
            r[m.index()] = match self.mode {
                Mode::Uniform => self.p_mask,
                Mode::Fip if m == self.target_modality => self.p_target,
                Mode::Fip => self.p_other,
            };
        }
        r
    }

    /// Loss weight per modality.
    pub fn weights(&self) -> [f64; N_MODALITIES] {
        let mut w = [0.0; N_MODALITIES];
        for m in ModalityKind::ALL {
            w[m.index()] = match self.mode {
                Mode::Uniform => 1.0,
                Mode::Fip if m == self.target_modality => self.w_target,
                Mode::Fip => self.w_other,
            };
        }
        w
    }

    /// The same configuration with every effective value spelled out: in uniform
    /// mode both ratios become `p_mask` and both weights 1.
    pub fn resolved(&self) -> FipConfig {
        match self.mode {
            Mode::Fip => self.clone(),
            Mode::Uniform => FipConfig {
                p_target: self.p_mask,
                p_other: self.p_mask,
                w_target: 1.0,
                w_other: 1.0,
                ..self.clone()
            },
        }
    }

    /// The model actually trained: in uniform mode every decoder gets the depth
    /// of the shallowest non-target decoder.
    pub fn resolve_model(&self, model: &ModelConfig) -> ModelConfig {
        let mut out = model.clone();
        if self.mode == Mode::Uniform {
            let depth = model
                .decoder_layers
                .iter()
                .filter(|(&m, _)| m != self.target_modality)
                .map(|(_, &d)| d)
                .min()
                .or_else(|| model.decoder_layers.values().copied().min());
            if let Some(d) = depth {
                out.decoder_layers.values_mut().for_each(|v| *v = d);
            }
        }
        out
    }
}

/// `w_target L_target + sum over other modalities of w_other L_m`; in uniform
/// mode the plain sum.
pub fn fip_loss(losses: &BTreeMap<ModalityKind, f64>, cfg: &FipConfig) -> Result<f64> {
    if !losses.contains_key(&cfg.target_modality) {
        return Err(FipError::invalid(format!(
            "loss map has no entry for target modality {}",
            cfg.target_modality
        )));
    }
    let w = cfg.weights();
    Ok(losses.iter().map(|(m, l)| w[m.index()] * l).sum())
}

/// Independent exact-count masks per modality for one sample.
pub fn make_mask_plan<R: Rng + ?Sized>(cfg: &FipConfig, model: &ModelConfig, rng: &mut R) -> Result<MaskPlan> {
    MaskPlan::sample(model.n_patches(), &cfg.ratios(), rng)
}

/// Mean squared error over the masked rows of `[B, n, pd]` predictions.
/// Returns `None` when nothing is masked.
pub fn masked_mse<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, masked: &RowIndex) -> Result<Option<Var>> {
    if g.shape(pred) != g.shape(target) {
        return Err(FipError::ShapeMismatch {
            op: "masked_mse",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    if masked.iter().all(|r| r.is_empty()) {
        return Ok(None);
    }
    let p = g.gather_rows(pred, masked.clone())?;
    let t = g.gather_rows(target, masked.clone())?;
    Ok(Some(g.mse(p, t)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    WarmupCosine,
    Constant,
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per independently evaluated chunk. Fixed by config (not by the
    /// thread count) so results do not depend on parallelism.
    pub micro_batch: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            micro_batch: 8,
            lr: 1e-3,
            warmup_frac: 0.1,
            schedule: Schedule::WarmupCosine,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(FipError::Config("batch_size and micro_batch must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FipError::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(FipError::Config("warmup_frac outside [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(FipError::Config("beta1/beta2 must lie in [0, 1) and eps > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(FipError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }
}

/// Optimizer state. The RNG streams are derived from `(seed, step)`, so the
/// step counter is all that is needed to resume them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub seed: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl TrainState {
    pub fn new(params: &ParamStore<f32>, total_steps: u64, cfg: &TrainConfig) -> Self {
        let zeros = |p: &ParamStore<f32>| {
            let mut z = ParamStore::new();
            for (n, t) in p.iter() {
                z.insert(n.clone(), Tensor::zeros(t.shape()));
            }
            z
        };
        let warmup_steps = match cfg.schedule {
            Schedule::Constant => 0,
            Schedule::WarmupCosine => ((cfg.warmup_frac * total_steps as f64).round() as u64).max(1),
        };
        TrainState {
            step: 0,
            total_steps,
            warmup_steps,
            base_lr: cfg.lr,
            seed: cfg.seed,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// Adds zero moments for parameters created after the state (e.g. a new head).
    pub fn cover(&mut self, params: &ParamStore<f32>) {
        for (n, t) in params.iter() {
            if !self.m.contains(n) {
                self.m.insert(n.clone(), Tensor::zeros(t.shape()));
                self.v.insert(n.clone(), Tensor::zeros(t.shape()));
            }
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
/// With no warmup the rate is constant.
pub fn lr_schedule(step: u64, state: &TrainState) -> f64 {
    let (w, total, base) = (state.warmup_steps, state.total_steps, state.base_lr);
    if w == 0 {
        return base;
    }
    if step < w {
        return base * step as f64 / w as f64;
    }
    if total <= w {
        return base;
    }
    let t = ((step - w) as f64 / (total - w) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One AdamW update with decoupled weight decay on `.weight` tensors.
/// Parameters without a gradient are left untouched.
pub fn optimizer_step(
    params: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<f64> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(FipError::NonFinite(format!("gradient of {name}")));
        }
    }
    state.cover(params);
    let t = state.step + 1;
    let lr = lr_schedule(t, state);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| FipError::invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(FipError::ShapeMismatch {
                op: "optimizer_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let decay = if name.ends_with(".weight") { cfg.weight_decay } else { 0.0 };
        let m = state.m.get_mut(name).unwrap().data_mut();
        let v = state.v.get_mut(name).unwrap().data_mut();
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gv;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gv * gv;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps) + decay * *pv as f64;
            *pv = (*pv as f64 - lr * update) as f32;
        }
    }
    state.step = t;
    Ok(lr)
}

/// A sample turned into normalized patch matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchedSample {
    pub inputs: Vec<Tensor<f32>>,
    pub targets: Vec<Tensor<f32>>,
    pub label: Option<usize>,
    pub snr_db: f64,
}

pub fn prepare_sample(s: &MultimodalSample, stats: &NormStats, patch: usize) -> Result<PatchedSample> {
    let mut inputs = Vec::with_capacity(N_MODALITIES);
    let mut targets = Vec::with_capacity(N_MODALITIES);
    for m in ModalityKind::ALL {
        let st = stats.get(m);
        inputs.push(patchify(&crate::modalities::normalize(s.input(m), st)?, patch)?);
        targets.push(patchify(&crate::modalities::normalize(s.target(m), st)?, patch)?);
    }
    Ok(PatchedSample {
        inputs,
        targets,
        label: s.label,
        snr_db: s.snr_db,
    })
}

pub fn prepare_samples(
    samples: &[MultimodalSample],
    stats: &NormStats,
    patch: usize,
    exec: Execution,
) -> Result<Vec<PatchedSample>> {
    exec.map(samples.iter().collect(), |s| prepare_sample(s, stats, patch))
        .into_iter()
        .collect()
}

/// Loss pieces and gradients of one chunk.
pub struct ChunkResult<T: Real> {
    /// Unweighted masked MSE per modality (`None`: no decoder or empty mask).
    pub losses: [Option<f64>; N_MODALITIES],
    pub total: f64,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Builds the weighted pretraining loss of a chunk inside `g`.
/// Returns the total and the per-modality loss nodes.
pub fn pretrain_loss<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    model: &Mmae<T>,
    samples: &[&PatchedSample],
    plans: &[MaskPlan],
    fip: &FipConfig,
    scale: f64,
) -> Result<(Var, [Option<Var>; N_MODALITIES])> {
    let mut inputs = Vec::with_capacity(N_MODALITIES);
    for m in ModalityKind::ALL {
        let x: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.inputs[m.index()]).collect();
        inputs.push((m, g.constant(stack_patches(&x)?)));
    }
    let preds = model.forward_pretrain(g, b, &inputs, plans)?;
    let w = fip.weights();
    let mut per = [None; N_MODALITIES];
    let mut terms = Vec::new();
    for (&m, &pred) in &preds {
        let t: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.targets[m.index()]).collect();
        let target = g.constant(stack_patches(&t)?);
        let masked: RowIndex = plans.iter().map(|p| p.masked(m)).collect();
        if let Some(l) = masked_mse(g, pred, target, &masked)? {
            per[m.index()] = Some(l);
            terms.push(g.scale(l, w[m.index()] * scale));
        }
    }
    let mut total = *terms
        .first()
        .ok_or_else(|| FipError::invalid("no modality contributes a reconstruction loss"))?;
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, per))
}

/// Forward and backward on one chunk; the loss is multiplied by `scale`.
pub fn chunk_step<T: Real>(
    model: &Mmae<T>,
    params: &ParamStore<T>,
    samples: &[&PatchedSample],
    plans: &[MaskPlan],
    fip: &FipConfig,
    scale: f64,
) -> Result<ChunkResult<T>> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let (total, per) = pretrain_loss(&mut g, &mut b, model, samples, plans, fip, scale)?;
    let total_v = g.value(total).item().as_f64();
    if !total_v.is_finite() {
        return Err(FipError::NonFinite(format!("pretraining loss is {total_v}")));
    }
    g.backward(total)?;
    let mut losses = [None; N_MODALITIES];
    for (i, l) in per.iter().enumerate() {
        losses[i] = l.map(|v| g.value(v).item().as_f64());
    }
    Ok(ChunkResult {
        losses,
        total: total_v,
        grads: b.grads(&g),
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    /// Batch-mean masked MSE per modality (0 when not computed).
    pub losses: [f64; N_MODALITIES],
    /// Modalities whose loss was skipped because nothing was masked.
    pub empty: Vec<ModalityKind>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,lr,total,constellation,scalogram,raw_signal,noise";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{},{:e},{:e}", r.step, r.lr, r.total);
            for l in r.losses {
                let _ = write!(s, ",{l:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(FipError::invalid("train log header mismatch"));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || FipError::invalid(format!("train log row {} malformed", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 + N_MODALITIES {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let mut losses = [0.0; N_MODALITIES];
            for (k, l) in losses.iter_mut().enumerate() {
                *l = num(f[3 + k])?;
            }
            records.push(TrainRecord {
                step: f[0].parse().map_err(|_| bad())?,
                lr: num(f[1])?,
                total: num(f[2])?,
                losses,
                empty: Vec::new(),
            });
        }
        Ok(TrainLog { records })
    }
}

/// Everything the pretraining loop needs besides the mutable state.
pub struct Pretrainer<'a> {
    pub model: &'a Mmae<f32>,
    pub fip: &'a FipConfig,
    pub train: &'a TrainConfig,
    pub exec: Execution,
}

impl Pretrainer<'_> {
    pub fn total_steps(&self, n_samples: usize) -> u64 {
        (self.train.epochs * self.train.steps_per_epoch(n_samples)) as u64
    }

    /// Dataset indices of the batch at global `step`.
    pub fn batch_indices(&self, n_samples: usize, step: u64) -> Vec<usize> {
        let spe = self.train.steps_per_epoch(n_samples) as u64;
        let (epoch, within) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut rng_for(self.train.seed, &[SHUFFLE_STREAM, epoch]));
        let start = within * self.train.batch_size;
        order[start..(start + self.train.batch_size).min(n_samples)].to_vec()
    }

    /// Mask plan of dataset sample `idx` at `step`.
    pub fn plan_for(&self, step: u64, idx: usize) -> Result<MaskPlan> {
        let mut rng = rng_for(self.train.seed, &[MASK_STREAM, step, idx as u64]);
        make_mask_plan(self.fip, self.model.config(), &mut rng)
    }

    /// Runs one optimizer step on the given samples and plans.
    pub fn step_on(
        &self,
        data: &[&PatchedSample],
        plans: &[MaskPlan],
        params: &mut ParamStore<f32>,
        state: &mut TrainState,
    ) -> Result<TrainRecord> {
        let bsz = data.len();
        let mb = self.train.micro_batch;
        let chunks: Vec<usize> = (0..bsz.div_ceil(mb)).collect();
        let results = self.exec.map(chunks, |c| {
            let r = c * mb..((c + 1) * mb).min(bsz);
            let scale = r.len() as f64 / bsz as f64;
            chunk_step(self.model, params, &data[r.clone()], &plans[r], self.fip, scale)
        });
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut losses = [0.0; N_MODALITIES];
        let mut present = [false; N_MODALITIES];
        for (c, res) in results.into_iter().enumerate() {
            let res = res?;
            let frac = (((c + 1) * mb).min(bsz) - c * mb) as f64 / bsz as f64;
            for (i, l) in res.losses.iter().enumerate() {
                if let Some(l) = l {
                    losses[i] += frac * l;
                    present[i] = true;
                }
            }
            for (n, gr) in res.grads {
                match grads.get_mut(&n) {
                    Some(acc) => acc.add_assign(&gr),
                    None => {
                        grads.insert(n, gr);
                    }
                }
            }
        }
        let map: BTreeMap<ModalityKind, f64> = ModalityKind::ALL
            .iter()
            .filter(|m| present[m.index()])
            .map(|&m| (m, losses[m.index()]))
            .collect();
        let mut full = map.clone();
        full.entry(self.fip.target_modality).or_insert(0.0);
        let total = fip_loss(&full, self.fip)?;
        let empty = ModalityKind::ALL
            .iter()
            .copied()
            .filter(|m| self.model.config().decoder_depth(*m).is_some() && !present[m.index()])
            .collect();
        let lr = optimizer_step(params, &grads, state, self.train)?;
        Ok(TrainRecord {
            step: state.step,
            lr,
            total,
            losses,
            empty,
        })
    }

    /// Trains until `state.step` reaches `stop_at` (or the configured total).
    /// Resuming from a saved state continues the identical trajectory.
    pub fn run(
        &self,
        data: &[PatchedSample],
        params: &mut ParamStore<f32>,
        state: &mut TrainState,
        stop_at: Option<u64>,
        log: &mut TrainLog,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(FipError::invalid("pretraining dataset is empty"));
        }
        let end = stop_at.unwrap_or(state.total_steps).min(state.total_steps);
        while state.step < end {
            let idx = self.batch_indices(data.len(), state.step);
            let plans = idx
                .iter()
                .map(|&i| self.plan_for(state.step, i))
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<&PatchedSample> = idx.iter().map(|&i| &data[i]).collect();
            let rec = self.step_on(&batch, &plans, params, state)?;
            log.records.push(rec);
        }
        Ok(())
    }
}

/// Checks the gradient of the full pretraining loss of a small model against
/// central differences, over every parameter.
pub fn check_pretrain_gradients(
    seed: u64,
    tolerance: f64,
    model_cfg: &ModelConfig,
    fip: &FipConfig,
) -> Result<crate::tensor_ad::GradCheckReport> {
    use rand_distr::{Distribution, StandardNormal};
    let model: Mmae<f64> = Mmae::new(model_cfg.clone())?;
    let mut rng = rng_for(seed, &[0x4743]);
    let specs = crate::model::backbone_specs(model_cfg);
    let mut params: ParamStore<f64> = ParamStore::init(&specs, &mut rng);
    // Random (not unit/zero) norm and bias values so every path is exercised.
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * z;
        }
    }
    let n = model_cfg.n_patches();
    let pd = model_cfg.patch_dim();
    let rand_patches = |rng: &mut crate::rng::FipRng| {
        let d: Vec<f32> = (0..n * pd).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(vec![n, pd], d).unwrap()
    };
    let samples: Vec<PatchedSample> = (0..2)
        .map(|_| PatchedSample {
            inputs: (0..N_MODALITIES).map(|_| rand_patches(&mut rng)).collect(),
            targets: (0..N_MODALITIES).map(|_| rand_patches(&mut rng)).collect(),
            label: None,
            snr_db: 0.0,
        })
        .collect();
    let refs: Vec<&PatchedSample> = samples.iter().collect();
    let plans = (0..refs.len())
        .map(|_| make_mask_plan(fip, model_cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let names: Vec<String> = params.names().cloned().collect();
    let shapes: Vec<Vec<usize>> = names.iter().map(|n| params.get(n).unwrap().shape().to_vec()).collect();
    let flat: Vec<f64> = names.iter().flat_map(|n| params.get(n).unwrap().data().to_vec()).collect();
    let unflatten = |x: &[f64]| {
        let mut p = ParamStore::new();
        let mut off = 0;
        for (n, s) in names.iter().zip(&shapes) {
            let len: usize = s.iter().product();
            p.insert(n.clone(), Tensor::new(s.clone(), x[off..off + len].to_vec()).unwrap());
            off += len;
        }
        p
    };
    let res = chunk_step(&model, &params, &refs, &plans, fip, 1.0)?;
    let analytic: Vec<f64> = names
        .iter()
        .zip(&shapes)
        .flat_map(|(n, s)| match res.grads.get(n) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; s.iter().product()],
        })
        .collect();
    let f = |x: &[f64]| {
        let p = unflatten(x);
        let mut g = Graph::new();
        let mut b = Binder::new(&p);
        let (total, _) = pretrain_loss(&mut g, &mut b, &model, &refs, &plans, fip, 1.0).expect("forward");
        g.value(total).item()
    };
    Ok(crate::tensor_ad::compare_with_differences(
        "pretrain_loss",
        &analytic,
        f,
        &flat,
        crate::tensor_ad::DEFAULT_STEP,
        tolerance,
    ))
}
