//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line and the
//! test fails if any of them fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use fip_core::exec::Execution;
use fip_core::finetune_eval::{
    default_snr_grid, evaluate, generate_grid_test_set, FinetuneConfig, ModelClassifier,
};
use fip_core::fip_train::{
    chunk_step, check_pretrain_gradients, fip_loss, make_mask_plan, prepare_samples, FipConfig,
    PatchedSample, Pretrainer, Schedule, TrainConfig, TrainState,
};
use fip_core::modalities::{build_sample, ModalityKind, NormStats, RenderConfig};
use fip_core::model::{backbone_specs, masked_count_for, sample_mask, Mmae, ModelConfig, ParamStore};
use fip_core::pipeline;
use fip_core::rng::rng_for;
use fip_core::sigsim::{measure_snr, simulate, ModulationScheme, SignalConfig};
use fip_core::storage::{
    decode_tensor, encode_tensor, generate_dataset, load_checkpoint, load_dataset, save_checkpoint,
    save_dataset, GenSpec,
};
use fip_core::tensor_ad::{check_primitives, Tensor};
use fip_core::FipError;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn e<T>(r: fip_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn full_size_step() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::paper();
    let fip = FipConfig::default();
    let train = TrainConfig {
        batch_size: 1,
        micro_batch: 1,
        ..TrainConfig::default()
    };
    let render = RenderConfig {
        image_size: cfg.image_size,
        ..RenderConfig::default()
    };
    let s = e(build_sample(ModulationScheme::Qam16, 5.0, &mut rng_for(1, &[]), &render))?;
    let stats = NormStats::compute(std::slice::from_ref(&s));
    let data = e(prepare_samples(std::slice::from_ref(&s), &stats, cfg.patch_size, Execution::Parallel))?;
    let model: Mmae<f32> = e(Mmae::new(cfg.clone()))?;
    let mut params: ParamStore<f32> = ParamStore::init(&backbone_specs(&cfg), &mut rng_for(2, &[]));
    let mut state = TrainState::new(&params, 1, &train);
    let tr = Pretrainer {
        model: &model,
        fip: &fip,
        train: &train,
        exec: Execution::Parallel,
    };
    let plan = e(tr.plan_for(0, 0))?;
    let rec = e(tr.step_on(&[&data[0]], &[plan], &mut params, &mut state))?;
    let el = t.elapsed();
    check(
        rec.total.is_finite() && el <= Duration::from_secs(600),
        format!("{} params, loss {:.4}, {:.1?}", params.total_count(), rec.total, el),
        format!("loss {} after {:.1?}", rec.total, el),
    )
}

fn mask_counts() -> Outcome {
    let t = Instant::now();
    let mut rng = rng_for(7, &[]);
    for (n, r, want) in [(16, 0.8, 13), (16, 0.6, 10), (196, 0.8, 157), (196, 0.6, 118)] {
        if masked_count_for(n, r) != want {
            return Err(format!("masked_count_for({n}, {r}) = {}", masked_count_for(n, r)));
        }
        for _ in 0..1000 {
            let m = e(sample_mask(n, r, &mut rng))?;
            let c = m.iter().filter(|&&b| b).count();
            if c != want {
                return Err(format!("n={n} ratio={r}: drew {c}, expected {want}"));
            }
        }
    }
    let el = t.elapsed();
    check(el < Duration::from_secs(1), format!("4000 draws exact in {el:.1?}"), format!("took {el:.1?}"))
}

fn loss_weighting() -> Outcome {
    let losses: BTreeMap<ModalityKind, f64> = ModalityKind::ALL.into_iter().zip([2.0, 1.0, 3.0, 0.0]).collect();
    let fip = FipConfig::default();
    let a = e(fip_loss(&losses, &fip))?;
    let b = e(fip_loss(&losses, &FipConfig { w_other: 0.0, ..fip.clone() }))?;
    let c = e(fip_loss(&losses, &FipConfig::uniform()))?;
    check(
        a == 4.0 && b == 2.0 && c == 6.0,
        format!("fip {a}, target-only {b}, uniform {c}"),
        format!("fip {a} (want 4), target-only {b} (want 2), uniform {c} (want 6)"),
    )
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let tol = 1e-3;
    let mut worst = 0.0f64;
    let mut n = 0;
    for seed in 0..20 {
        for r in e(check_primitives(seed, tol))? {
            worst = worst.max(r.max_rel_error);
            n += 1;
            if !r.passed {
                return Err(format!("{} seed {seed}: rel error {:.2e}", r.name, r.max_rel_error));
            }
        }
        let fip = if seed % 2 == 0 { FipConfig::default() } else { FipConfig::uniform() };
        let model = fip.resolve_model(&ModelConfig::tiny());
        let r = e(check_pretrain_gradients(seed, tol, &model, &fip))?;
        worst = worst.max(r.max_rel_error);
        n += 1;
        if !r.passed {
            return Err(format!("pretrain loss seed {seed}: rel error {:.2e} at {}", r.max_rel_error, r.worst_index));
        }
    }
    let el = t.elapsed();
    check(
        el < Duration::from_secs(300),
        format!("{n} checks over 20 seeds, worst {worst:.2e}, {el:.1?}"),
        format!("took {el:.1?}"),
    )
}

fn small_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<PatchedSample>, String> {
    let render = RenderConfig {
        image_size: cfg.image_size,
        ..RenderConfig::default()
    };
    let spec = gen_spec(n, false, seed, render);
    let (samples, _) = e(generate_dataset(&spec, Execution::Parallel))?;
    let stats = NormStats::compute(&samples);
    e(prepare_samples(&samples, &stats, cfg.patch_size, Execution::Parallel))
}

fn gen_spec(n: usize, labeled: bool, seed: u64, render: RenderConfig) -> GenSpec {
    GenSpec {
        n,
        labeled,
        snr_min: -10.0,
        snr_max: 10.0,
        classes: ModulationScheme::ALL.to_vec(),
        render,
        seed,
    }
}

fn target_isolation() -> Outcome {
    let cfg = ModelConfig::desk();
    let fip = FipConfig {
        w_other: 0.0,
        ..FipConfig::default()
    };
    let model: Mmae<f32> = e(Mmae::new(cfg.clone()))?;
    let params: ParamStore<f32> = ParamStore::init(&backbone_specs(&cfg), &mut rng_for(3, &[]));
    let data = small_batch(&cfg, 4, 3)?;
    let refs: Vec<&PatchedSample> = data.iter().collect();
    let plans = (0..4)
        .map(|i| e(make_mask_plan(&fip, &cfg, &mut rng_for(3, &[i]))))
        .collect::<Result<Vec<_>, _>>()?;
    let res = e(chunk_step(&model, &params, &refs, &plans, &fip, 1.0))?;
    let target = format!("decoder.{}.", fip.target_modality);
    let mut checked = 0;
    for name in params.names().filter(|n| n.starts_with("decoder.") && !n.starts_with(&target)) {
        if let Some(g) = res.grads.get(name) {
            if let Some(v) = g.data().iter().find(|v| **v != 0.0) {
                return Err(format!("{name} has gradient {v}"));
            }
        }
        checked += 1;
    }
    let enc: f64 = res
        .grads
        .iter()
        .filter(|(n, _)| n.starts_with("encoder."))
        .flat_map(|(_, g)| g.data().iter().map(|v| (*v as f64).powi(2)))
        .sum::<f64>()
        .sqrt();
    check(
        enc > 0.0 && checked > 0,
        format!("{checked} non-target decoder tensors exactly zero, encoder grad norm {enc:.3e}"),
        format!("encoder grad norm {enc}"),
    )
}

fn overfit() -> Outcome {
    let cfg = ModelConfig::desk();
    let fip = FipConfig::default();
    let model: Mmae<f32> = e(Mmae::new(cfg.clone()))?;
    let mut hits = Vec::new();
    for seed in 0..5u64 {
        let train = TrainConfig {
            lr: 1e-3,
            schedule: Schedule::Constant,
            batch_size: 1,
            micro_batch: 1,
            seed,
            ..TrainConfig::default()
        };
        let s = e(build_sample(ModulationScheme::ALL[seed as usize], 10.0, &mut rng_for(seed, &[1]), &RenderConfig::default()))?;
        let stats = NormStats::compute(std::slice::from_ref(&s));
        let data = e(prepare_samples(std::slice::from_ref(&s), &stats, cfg.patch_size, Execution::Sequential))?;
        let mut params: ParamStore<f32> = ParamStore::init(&backbone_specs(&cfg), &mut rng_for(seed, &[2]));
        let mut state = TrainState::new(&params, 500, &train);
        let plan = e(make_mask_plan(&fip, &cfg, &mut rng_for(seed, &[3])))?;
        let tr = Pretrainer {
            model: &model,
            fip: &fip,
            train: &train,
            exec: Execution::Parallel,
        };
        let mut hit = None;
        for k in 0..500 {
            let r = e(tr.step_on(&[&data[0]], std::slice::from_ref(&plan), &mut params, &mut state))?;
            if r.losses[fip.target_modality.index()] < 0.01 {
                hit = Some(k + 1);
                break;
            }
        }
        hits.push(hit);
    }
    let n = hits.iter().filter(|h| h.is_some()).count();
    check(n >= 4, format!("{n}/5 seeds, steps {hits:?}"), format!("only {n}/5 seeds, steps {hits:?}"))
}

fn snr_calibration() -> Outcome {
    let sig = SignalConfig {
        n_symbols: 4096,
        ..SignalConfig::default()
    };
    let mut worst = 0.0f64;
    for snr in [-10.0, 0.0, 10.0] {
        let mut ok = 0;
        for seed in 0..100u64 {
            let scheme = ModulationScheme::ALL[(seed % 10) as usize];
            let ch = e(simulate(scheme, snr, &sig, &mut rng_for(seed, &[snr.to_bits()])))?;
            let d = (e(measure_snr(&ch.clean, &ch.noise))? - snr).abs();
            worst = worst.max(d);
            if d <= 0.5 {
                ok += 1;
            }
        }
        if ok < 99 {
            return Err(format!("{snr} dB: {ok}/100 seeds within 0.5 dB"));
        }
    }
    Ok(format!("all levels within tolerance, worst deviation {worst:.3} dB"))
}

struct PairResult {
    fip: (f64, f64, f64),
    uniform: (f64, f64, f64),
}

/// Pretrains both modes on the same data, fine-tunes identically and returns
/// (overall, -10 dB, +10 dB) accuracy for each.
fn seed_pair(seed: u64) -> Result<PairResult, String> {
    let render = RenderConfig::default();
    let (unl, _) = e(generate_dataset(&gen_spec(512, false, 3 * seed + 100, render), Execution::Parallel))?;
    let (lab, _) = e(generate_dataset(&gen_spec(256, true, 3 * seed + 101, render), Execution::Parallel))?;
    let test = e(generate_grid_test_set(&default_snr_grid(), 512, 3 * seed + 102, &render, Execution::Parallel))?;
    let stats = NormStats::compute(&unl);
    let train = TrainConfig {
        epochs: 30,
        seed,
        ..TrainConfig::default()
    };
    let ft = FinetuneConfig {
        seed,
        ..FinetuneConfig::default()
    };
    let mut out = Vec::new();
    for fip in [FipConfig::default(), FipConfig::uniform()] {
        let mut ck = e(pipeline::init_checkpoint(&ModelConfig::desk(), &fip, &train, stats.clone(), unl.len()))?;
        e(pipeline::pretrain(&mut ck, &unl, None, Execution::Parallel))?;
        let (tuned, _) = e(pipeline::finetune_checkpoint(&ck, &lab, &ft, Execution::Parallel))?;
        let model: Mmae<f32> = e(Mmae::new(tuned.model.clone()))?;
        let clf = ModelClassifier {
            model: &model,
            params: &tuned.params,
            stats: *tuned.norm_stats.get(ModalityKind::Constellation),
        };
        let rep = e(evaluate(&clf, &test, Execution::Parallel))?;
        let at = |s: f64| rep.accuracy_at(s).ok_or(format!("no rows at {s} dB"));
        out.push((rep.overall, at(-10.0)?, at(10.0)?));
    }
    Ok(PairResult {
        fip: out[0],
        uniform: out[1],
    })
}

fn comparison(pairs: &[PairResult], elapsed: Duration) -> Outcome {
    let min_acc = pairs
        .iter()
        .flat_map(|p| [p.fip.0, p.uniform.0])
        .fold(f64::INFINITY, f64::min);
    let diff = pairs.iter().map(|p| p.fip.0 - p.uniform.0).sum::<f64>() / pairs.len() as f64;
    let detail = format!("min overall accuracy {min_acc:.3}, mean fip - uniform {diff:+.3}, {elapsed:.0?}");
    check(
        min_acc > 0.15 && diff >= -0.02 && elapsed <= Duration::from_secs(3600),
        detail.clone(),
        detail,
    )
}

fn snr_trend(pairs: &[PairResult]) -> Outcome {
    let n = pairs.iter().filter(|p| p.fip.2 > p.fip.1).count();
    let m = pairs.iter().filter(|p| p.uniform.2 > p.uniform.1).count();
    let detail = format!("+10 dB beats -10 dB on {n}/5 fip and {m}/5 uniform runs");
    check(n >= 4 && m >= 4, detail.clone(), detail)
}

fn files_equal(a: &Path, b: &Path) -> Result<usize, String> {
    let mut n = 0;
    let mut stack = vec![std::path::PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(a.join(&rel))
            .map_err(|e| e.to_string())?
            .map(|d| d.unwrap().file_name())
            .collect();
        entries.sort();
        for name in entries {
            let r = rel.join(name);
            if a.join(&r).is_dir() {
                stack.push(r);
                continue;
            }
            let x = std::fs::read(a.join(&r)).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.join(&r)).map_err(|e| format!("{}: {e}", r.display()))?;
            if x != y {
                return Err(format!("{} differs", r.display()));
            }
            n += 1;
        }
    }
    Ok(n)
}

fn determinism() -> Outcome {
    let render = RenderConfig::default();
    let (samples, _) = e(generate_dataset(&gen_spec(24, false, 9, render), Execution::Parallel))?;
    let stats = NormStats::compute(&samples);
    let train = TrainConfig {
        epochs: 2,
        batch_size: 8,
        micro_batch: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let fip = FipConfig::default();
    let cfg = ModelConfig::desk();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |dir: &str, exec: Execution, stop: Option<u64>| -> Result<(), String> {
        let mut ck = e(pipeline::init_checkpoint(&cfg, &fip, &train, stats.clone(), samples.len()))?;
        if let Some(k) = stop {
            e(pipeline::pretrain(&mut ck, &samples, Some(k), exec))?;
            let mid = tmp.path().join(format!("{dir}-mid"));
            e(save_checkpoint(&mid, &ck))?;
            ck = e(load_checkpoint(&mid))?;
        }
        e(pipeline::pretrain(&mut ck, &samples, None, exec))?;
        e(save_checkpoint(&tmp.path().join(dir), &ck))
    };
    run("a", Execution::Parallel, None)?;
    run("b", Execution::Sequential, None)?;
    run("c", Execution::Parallel, Some(2))?;
    let n = files_equal(&tmp.path().join("a"), &tmp.path().join("b"))?;
    files_equal(&tmp.path().join("a"), &tmp.path().join("c"))?;
    Ok(format!("{n} checkpoint files identical across repeat, sequential and resume-at-2 runs"))
}

fn field_of(err: FipError) -> String {
    match err {
        FipError::Format { field, .. } => field,
        other => format!("<{other}>"),
    }
}

fn storage_round_trips() -> Outcome {
    let t32 = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f32 * 0.37 - 3.0).collect()).unwrap();
    let t64 = Tensor::new(vec![5], vec![1e-300, -0.0, 3.5, f64::MAX, 1.0 / 3.0]).unwrap();
    let p = Path::new("blob.fipt");
    if e(decode_tensor::<f32>(&e(encode_tensor(&t32))?, p))? != t32 {
        return Err("f32 tensor round-trip differs".into());
    }
    if e(decode_tensor::<f64>(&e(encode_tensor(&t64))?, p))? != t64 {
        return Err("f64 tensor round-trip differs".into());
    }
    let good = e(encode_tensor(&t32))?;
    let cases: Vec<(usize, u32, &str)> = vec![(0, 0x5850_4946, "magic"), (4, 9, "version"), (8, 7, "dtype"), (12, 9, "ndim"), (32, 2, "dims[4]")];
    for (off, v, field) in cases {
        let mut bad = good.clone();
        bad[off..off + 4].copy_from_slice(&v.to_le_bytes());
        let got = field_of(decode_tensor::<f32>(&bad, p).unwrap_err());
        if got != field {
            return Err(format!("corrupting {field} reported `{got}`"));
        }
    }
    let got = field_of(decode_tensor::<f32>(&good[..good.len() - 1], p).unwrap_err());
    if got != "payload" {
        return Err(format!("truncated payload reported `{got}`"));
    }
    let got = field_of(decode_tensor::<f64>(&good, p).unwrap_err());
    if got != "dtype" {
        return Err(format!("dtype mismatch reported `{got}`"));
    }

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let render = RenderConfig::default();
    let (samples, seeds) = e(generate_dataset(&gen_spec(6, true, 4, render), Execution::Parallel))?;
    let stats = NormStats::compute(&samples);
    e(save_dataset(&tmp.path().join("data"), &samples, &seeds, &stats, &render))?;
    let (back, manifest) = e(load_dataset(&tmp.path().join("data"), Execution::Parallel))?;
    if back != samples || manifest.norm_stats != stats {
        return Err("dataset round-trip differs".into());
    }

    let mut ck = e(pipeline::init_checkpoint(&ModelConfig::tiny(), &FipConfig::default(), &TrainConfig::default(), NormStats::identity(), 8))?;
    if let Some(st) = ck.state.as_mut() {
        st.step = 3;
    }
    let dir = tmp.path().join("ckpt");
    e(save_checkpoint(&dir, &ck))?;
    if e(load_checkpoint(&dir))? != ck {
        return Err("checkpoint round-trip differs".into());
    }
    let blob = dir.join("params").join("encoder.0.attn.q.weight.fipt");
    let mut bytes = std::fs::read(&blob).map_err(|e| e.to_string())?;
    bytes[4] = 2;
    std::fs::write(&blob, bytes).map_err(|e| e.to_string())?;
    let err = load_checkpoint(&dir).unwrap_err().to_string();
    check(
        err.contains("version") && err.contains("encoder.0.attn.q.weight"),
        "tensor, dataset and checkpoint round-trips exact; corrupt headers name the field".into(),
        format!("corrupt checkpoint blob reported: {err}"),
    )
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mut record = |id: u32, name: &str, o: Outcome| {
        let line = match &o {
            Ok(d) => format!("criterion {id:>2} PASS {name}: {d}"),
            Err(d) => format!("criterion {id:>2} FAIL {name}: {d}"),
        };
        println!("{line}");
        lines.push((o.is_ok(), line));
    };
    record(1, "full-size forward/backward", full_size_step());
    record(2, "masked patch counts", mask_counts());
    record(3, "weighted loss", loss_weighting());
    record(4, "gradient checks", gradient_checks());
    record(5, "target-only loss isolation", target_isolation());
    record(6, "single-sample overfit", overfit());
    record(7, "SNR calibration", snr_calibration());
    let t = Instant::now();
    let pairs: Result<Vec<PairResult>, String> = (0..5).map(seed_pair).collect();
    let el = t.elapsed();
    match &pairs {
        Ok(p) => {
            for (i, r) in p.iter().enumerate() {
                println!(
                    "  pair {i}: fip {:.3} ({:.3} / {:.3})  uniform {:.3} ({:.3} / {:.3})",
                    r.fip.0, r.fip.1, r.fip.2, r.uniform.0, r.uniform.1, r.uniform.2
                );
            }
            record(8, "fip vs uniform", comparison(p, el));
        }
        Err(err) => record(8, "fip vs uniform", Err(err.clone())),
    }
    record(9, "determinism and resume", determinism());
    record(10, "storage round-trips", storage_round_trips());
    match &pairs {
        Ok(p) => record(11, "accuracy rises with SNR", snr_trend(p)),
        Err(err) => record(11, "accuracy rises with SNR", Err(err.clone())),
    }
    let failed: Vec<&String> = lines.iter().filter(|(ok, _)| !ok).map(|(_, l)| l).collect();
    assert!(failed.is_empty(), "failed criteria:\n{failed:#?}");
}
