//! End-to-end helpers shared by the command line and the tests.

use crate::error::Result;
use crate::exec::Execution;
use crate::finetune_eval::{finetune, prepare_labeled, FinetuneConfig, FinetuneRecord};
use crate::fip_train::{prepare_sample, prepare_samples, FipConfig, Pretrainer, TrainConfig, TrainLog, TrainState};
use crate::modalities::{denormalize, ImageTensor, ModalityKind, MultimodalSample, NormStats};
use crate::model::{backbone_specs, stack_patches, unpatchify, Binder, MaskPlan, Mmae, ModelConfig, ParamStore};
use crate::tensor_ad::{Graph, Var};
use crate::rng::rng_for;
use crate::storage::Checkpoint;

const INIT_STREAM: u64 = 0x494e_4954;

/// A checkpoint at step 0 with freshly initialized parameters. In uniform mode
/// the decoder depths are equalized first.
pub fn init_checkpoint(model: &ModelConfig, fip: &FipConfig, train: &TrainConfig, norm_stats: NormStats, n_samples: usize) -> Result<Checkpoint> {
    let model = fip.resolve_model(model);
    model.validate()?;
    fip.validate()?;
    train.validate()?;
    let params = ParamStore::init(&backbone_specs(&model), &mut rng_for(train.seed, &[INIT_STREAM]));
    let total = (train.epochs * train.steps_per_epoch(n_samples)) as u64;
    let state = TrainState::new(&params, total, train);
    Ok(Checkpoint {
        model,
        fip: fip.resolved(),
        train: train.clone(),
        norm_stats,
        params,
        state: Some(state),
    })
}

/// Continues pretraining `ckpt` on `samples` up to `stop_at` (or the end).
pub fn pretrain(
    ckpt: &mut Checkpoint,
    samples: &[MultimodalSample],
    stop_at: Option<u64>,
    exec: Execution,
) -> Result<TrainLog> {
    let model: Mmae<f32> = Mmae::new(ckpt.model.clone())?;
    let data = prepare_samples(samples, &ckpt.norm_stats, ckpt.model.patch_size, exec)?;
    let trainer = Pretrainer {
        model: &model,
        fip: &ckpt.fip,
        train: &ckpt.train,
        exec,
    };
    let mut state = match ckpt.state.take() {
        Some(s) => s,
        None => TrainState::new(&ckpt.params, trainer.total_steps(samples.len()), &ckpt.train),
    };
    let mut log = TrainLog::default();
    let res = trainer.run(&data, &mut ckpt.params, &mut state, stop_at, &mut log);
    // Failed steps leave the parameters untouched, so the state is always the last good one.
    ckpt.state = Some(state);
    res.map(|_| log)
}

/// Fine-tunes a copy of the pretrained parameters on labeled samples.
pub fn finetune_checkpoint(
    pretrained: &Checkpoint,
    labeled: &[MultimodalSample],
    cfg: &FinetuneConfig,
    exec: Execution,
) -> Result<(Checkpoint, Vec<FinetuneRecord>)> {
    let model: Mmae<f32> = Mmae::new(pretrained.model.clone())?;
    let stats = *pretrained.norm_stats.get(ModalityKind::Constellation);
    let data = prepare_labeled(labeled, &stats, pretrained.model.patch_size, exec)?;
    let mut params = pretrained.params.clone();
    let log = finetune(&model, &mut params, &data, cfg, exec)?;
    let out = Checkpoint {
        params,
        state: None,
        ..pretrained.clone()
    };
    Ok((out, log))
}

/// Noisy input, clean reference and reconstruction of one modality, in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconPanels {
    pub modality: ModalityKind,
    pub input: ImageTensor,
    pub reference: ImageTensor,
    /// Predicted patches at masked positions, input patches elsewhere.
    /// Equal to the input for modalities without a decoder.
    pub reconstruction: ImageTensor,
}

/// Masks one sample with `plan`, runs the autoencoder and assembles per-modality panels.
pub fn reconstruct(ckpt: &Checkpoint, sample: &MultimodalSample, plan: &MaskPlan) -> Result<Vec<ReconPanels>> {
    let cfg = &ckpt.model;
    let model: Mmae<f32> = Mmae::new(cfg.clone())?;
    let prepared = prepare_sample(sample, &ckpt.norm_stats, cfg.patch_size)?;
    let mut g = Graph::new();
    let mut b = Binder::new(&ckpt.params);
    let inputs: Vec<(ModalityKind, Var)> = ModalityKind::ALL
        .iter()
        .map(|&m| Ok((m, g.constant(stack_patches(&[&prepared.inputs[m.index()]])?))))
        .collect::<Result<_>>()?;
    let preds = model.forward_pretrain(&mut g, &mut b, &inputs, std::slice::from_ref(plan))?;
    let pd = cfg.patch_dim();
    let mut out = Vec::with_capacity(ModalityKind::ALL.len());
    for m in ModalityKind::ALL {
        let stats = ckpt.norm_stats.get(m);
        let mut patches = prepared.inputs[m.index()].clone();
        if let Some(&p) = preds.get(&m) {
            let pred = g.value(p).data();
            let dst = patches.data_mut();
            for i in plan.masked(m) {
                dst[i * pd..(i + 1) * pd].copy_from_slice(&pred[i * pd..(i + 1) * pd]);
            }
        }
        let recon = unpatchify(&patches, cfg.image_size, cfg.patch_size)?;
        out.push(ReconPanels {
            modality: m,
            input: sample.input(m).clone(),
            reference: sample.target(m).clone(),
            reconstruction: denormalize(&recon, stats),
        });
    }
    Ok(out)
}
