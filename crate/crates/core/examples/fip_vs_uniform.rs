//! Pretrains FIP and uniform models on the same data, fine-tunes both the same
//! way and prints accuracy per SNR.
//!
//!     cargo run --release --example fip_vs_uniform -- [seed] [n_unlabeled] [epochs]

use fip_core::exec::Execution;
use fip_core::finetune_eval::{default_snr_grid, evaluate, generate_grid_test_set, FinetuneConfig, ModelClassifier};
use fip_core::fip_train::{FipConfig, TrainConfig};
use fip_core::modalities::{ModalityKind, NormStats, RenderConfig};
use fip_core::model::{Mmae, ModelConfig};
use fip_core::pipeline;
use fip_core::sigsim::ModulationScheme;
use fip_core::storage::{generate_dataset, GenSpec};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> fip_core::Result<()> {
    let (seed, n, epochs): (u64, usize, usize) = (arg(1, 0), arg(2, 512), arg(3, 30));
    let render = RenderConfig::default();
    let spec = |n, labeled, seed| GenSpec {
        n,
        labeled,
        snr_min: -10.0,
        snr_max: 10.0,
        classes: ModulationScheme::ALL.to_vec(),
        render,
        seed,
    };
    let exec = Execution::Parallel;
    let (unlabeled, _) = generate_dataset(&spec(n, false, 3 * seed), exec)?;
    let (labeled, _) = generate_dataset(&spec(n / 2, true, 3 * seed + 1), exec)?;
    let test = generate_grid_test_set(&default_snr_grid(), 512, 3 * seed + 2, &render, exec)?;
    let stats = NormStats::compute(&unlabeled);
    let train = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let ft = FinetuneConfig {
        seed,
        ..FinetuneConfig::default()
    };
    for fip in [FipConfig::default(), FipConfig::uniform()] {
        let t = std::time::Instant::now();
        let mut ckpt = pipeline::init_checkpoint(&ModelConfig::desk(), &fip, &train, stats.clone(), n)?;
        let log = pipeline::pretrain(&mut ckpt, &unlabeled, None, exec)?;
        let (tuned, _) = pipeline::finetune_checkpoint(&ckpt, &labeled, &ft, exec)?;
        let model: Mmae<f32> = Mmae::new(tuned.model.clone())?;
        let clf = ModelClassifier {
            model: &model,
            params: &tuned.params,
            stats: *tuned.norm_stats.get(ModalityKind::Constellation),
        };
        let report = evaluate(&clf, &test, exec)?;
        let last = log.records.last().map_or(f64::NAN, |r| r.total);
        println!("{:?}: final pretrain loss {last:.4}, overall accuracy {:.3} ({:.0?})", fip.mode, report.overall, t.elapsed());
        for r in &report.rows {
            println!("  {:>5.1} dB  {:.3}", r.snr_db, r.accuracy);
        }
    }
    Ok(())
}
