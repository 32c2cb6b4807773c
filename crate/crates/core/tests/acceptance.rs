//! Acceptance checks, one line per criterion.
//!
//! Criteria 5 and 6 train a network on a synthetic dataset and are skipped
//! unless `PSSTRNET_ACCEPTANCE_TRAIN` is set:
//!
//! * `full`: the default configuration, as the criterion requires.
//!   `PSSTRNET_BACKBONE_WEIGHTS` selects a VGG-16 archive for the loss
//!   network; without it a seeded random one is used.
//! * `proxy`: a reduced-width network that finishes in about an hour on one
//!   core. Its quality numbers are reported, but criterion 5 is marked FAIL
//!   because it is not the default configuration.
//!
//! `PSSTRNET_ACCEPTANCE_DIR` keeps the dataset and run directory.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use common::*;
use psstrnet::backbone::{BackboneConfig, WeightSource};
use psstrnet::data::{load_pairs, synth_toy_dataset, SynthConfig};
use psstrnet::losses::{dice_segmentation_loss, perceptual_loss, region_content_loss, style_loss, LossWeights, DICE_SMOOTH};
use psstrnet::metrics::{age, mse, mssim, pceps, peps, psnr, ssim, PlanarImage};
use psstrnet::model::{adaptive_fuse, compose_region, fuse, merge_masks, Psstrnet, PsstrConfig};
use psstrnet::params::parameter_count;
use psstrnet::train::{checkpoint_path, evaluate, load_model, Checkpoint, LogRecord, TrainConfig, Trainer};

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: impl Into<String>) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Self { status, detail: detail.into() }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self { status: Status::Fail, detail: detail.into() }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Self { status: Status::Skip, detail: detail.into() }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn f32_values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn formula_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(100);
    let w = LossWeights::default();
    let (mut merge_bad, mut compose_bad) = (0, 0);
    let (mut fuse_err, mut rc_err, mut dice_err) = (0f64, 0f64, 0f64);
    for k in 0..200 {
        let b = 1 + k % 2;
        let dims = [b, 3, 4, 4];
        let mdims = [b, 1, 4, 4];
        let (n, nm) = (b * 48, b * 16);
        let f32s = |r: &mut _, n| uniform(r, n).into_iter().map(|v| v as f32).collect::<Vec<f32>>();

        let (ma, mb) = (f32s(&mut r, nm), f32s(&mut r, nm));
        let t = |v: &[f32], d: &[usize]| Tensor::from_slice(v, d, &Device::Cpu).unwrap();
        let merged = f32_values(&merge_masks(&t(&ma, &mdims), &t(&mb, &mdims)).unwrap());
        merge_bad += (merged != loop_merge(&ma, &mb)) as usize;

        let (i_in, i_temp, m) = (f32s(&mut r, n), f32s(&mut r, n), f32s(&mut r, nm));
        let composed = f32_values(&compose_region(&t(&i_in, &dims), &t(&i_temp, &dims), &t(&m, &mdims)).unwrap());
        compose_bad += (composed != loop_compose(&i_in, &i_temp, &m, &dims)) as usize;

        let iters = 1 + k % 3;
        let results: Vec<Vec<f64>> = (0..iters).map(|_| uniform(&mut r, n)).collect();
        let masks: Vec<Vec<f64>> = (0..iters).map(|_| uniform(&mut r, nm)).collect();
        let input = uniform(&mut r, n);
        let rt: Vec<Tensor> = results.iter().map(|v| tensor(v.clone(), &dims, DType::F64)).collect();
        let mt: Vec<Tensor> = masks.iter().map(|v| tensor(v.clone(), &mdims, DType::F64)).collect();
        let (img, mask) = fuse(&rt, &mt, &tensor(input.clone(), &dims, DType::F64), 1e-8).unwrap();
        let (want_img, want_mask) = loop_fuse(&results, &masks, &input, &dims, 1e-8);
        fuse_err = fuse_err.max(max_abs_diff(&values(&img), &want_img)).max(max_abs_diff(&values(&mask), &want_mask));

        let gt = uniform(&mut r, n);
        let m_gt: Vec<f64> = uniform(&mut r, nm).into_iter().map(|v| v.round()).collect();
        let gt_t = tensor(gt.clone(), &dims, DType::F64);
        let m_gt_t = tensor(m_gt.clone(), &mdims, DType::F64);
        let rc = scalar(&region_content_loss(&rt, &gt_t, &m_gt_t, &w).unwrap());
        rc_err = rc_err.max((rc - loop_region_content(&results, &gt, &m_gt, &dims, w.gamma_text, w.gamma_background)).abs());
        let lw = LossWeights::for_iterations(iters);
        let dice = scalar(&dice_segmentation_loss(&mt, &m_gt_t, &lw).unwrap());
        dice_err = dice_err.max((dice - loop_dice(&masks, &m_gt, &lw.gamma_seg, DICE_SMOOTH)).abs());
    }
    let elapsed = start.elapsed();
    Outcome::check(
        merge_bad == 0 && compose_bad == 0 && fuse_err <= 1e-6 && rc_err <= 1e-6 && dice_err <= 1e-6 && elapsed < Duration::from_secs(10),
        format!(
            "200 instances, merge mismatches {merge_bad}, compose mismatches {compose_bad}, fuse {fuse_err:.1e}, \
             region content {rc_err:.1e}, dice {dice_err:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let shape = [1, 3, 8, 8];
    let mut r = rng(200);
    let w = LossWeights::default();
    let gt = random(&mut r, &shape, DType::F64);
    let x = random(&mut r, &shape, DType::F64);
    let m = random(&mut r, &[1, 1, 8, 8], DType::F64).round().unwrap();
    let xm = random(&mut r, &[1, 1, 8, 8], DType::F64);
    let net = stub_backbone(201);
    let errors = [
        ("region content", gradient_error(&x, |o| region_content_loss(&[o.clone()], &gt, &m, &w).unwrap())),
        ("style", gradient_error(&x, |o| style_loss(&[o.clone()], &gt, &net).unwrap())),
        ("dice", gradient_error(&xm, |o| dice_segmentation_loss(&[o.clone()], &m, &w).unwrap())),
        ("perceptual", gradient_error(&x, |o| perceptual_loss(&[o.clone()], &gt, &net).unwrap())),
    ];
    let elapsed = start.elapsed();
    let ok = errors.iter().all(|(_, e)| *e < 1e-4) && elapsed < Duration::from_secs(60);
    let list: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome::check(ok, format!("{}, {:.2}s", list.join(", "), elapsed.as_secs_f64()))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(300);
    let (mut exact_bad, mut order_bad) = (0, 0);
    let mut ssim_err = 0f64;
    let mut pairs: Vec<(PlanarImage, PlanarImage)> = Vec::new();
    for _ in 0..100 {
        let a = random_image(&mut r, 16, 16);
        let b = perturbed(&mut r, &a);
        let m = brute_mse(&a, &b);
        let p = if m == 0.0 { 100.0 } else { 10.0 * (1.0 / m).log10() };
        let (g, grid) = brute_errors(&a, &b);
        let errs = grid.iter().flatten().filter(|e| **e).count() as f64 / 256.0;
        let clustered = brute_clustered(&grid) as f64 / 256.0;
        let (pe, pce) = (peps(&a, &b).unwrap(), pceps(&a, &b).unwrap());
        let exact = mse(&a, &b).unwrap() == m
            && psnr(&a, &b).unwrap() == p
            && age(&a, &b).unwrap() == g
            && pe == errs
            && pce == clustered;
        exact_bad += (!exact) as usize;
        order_bad += (pce > pe) as usize;
        ssim_err = ssim_err.max((ssim(&a, &b).unwrap() - direct_ssim(&a, &b)).abs());
        pairs.push((a, b));
    }
    let refs: Vec<(&PlanarImage, &PlanarImage)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    let direct_mean = 100.0 * pairs.iter().map(|(a, b)| direct_ssim(a, b)).sum::<f64>() / pairs.len() as f64;
    let mean_err = (mssim(&refs).unwrap() - direct_mean).abs() / 100.0;
    let ok = exact_bad == 0 && order_bad == 0 && ssim_err <= 1e-6 && mean_err <= 1e-6;
    Outcome::check(
        ok,
        format!(
            "100 pairs, inexact {exact_bad}, pceps > peps {order_bad}, ssim {ssim_err:.1e}, mssim {mean_err:.1e}"
        ),
    )
}

fn identity_invariants() -> Outcome {
    let mut r = rng(400);
    let dims = [2, 3, 16, 16];
    let i_in = random(&mut r, &dims, DType::F32);
    let i_temp = random(&mut r, &dims, DType::F32);
    let zeros = Tensor::zeros((2, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
    let same = |t: &Tensor| f32_values(t) == f32_values(&i_in);
    let composed = compose_region(&i_in, &i_temp, &zeros).unwrap();
    let results = vec![i_temp.clone(), random(&mut r, &dims, DType::F32)];
    let (fused, _) = fuse(&results, &[zeros.clone(), zeros.clone()], &i_in, 1e-8).unwrap();
    let identity = same(&composed) && same(&fused);

    let tol = 1e-6f32;
    let (mut monotone_bad, mut range_bad) = (0, 0);
    let cfg = PsstrConfig {
        base_channels: 4,
        input_size: (16, 16),
        ..Default::default()
    };
    for net_seed in 0..10u64 {
        let (net, _) = Psstrnet::init(&cfg, net_seed).unwrap();
        for k in 0..10 {
            let x = random(&mut r, &dims, DType::F32);
            let out = net.forward(&x, k % 2 == 1).unwrap();
            let mut prev = zeros.clone();
            for s in &out.states {
                let merged = f32_values(&s.mask_merged);
                if merged.iter().zip(f32_values(&prev)).any(|(m, p)| *m < p) {
                    monotone_bad += 1;
                }
                prev = s.mask.clone();
            }
            let (pre_clamp, fused_mask) = adaptive_fuse(&out.states, &x, cfg.epsilon).unwrap();
            let mut tensors = vec![pre_clamp, fused_mask, out.image, out.mask];
            for s in out.states {
                tensors.extend([s.removed, s.mask, s.mask_raw, s.mask_merged]);
            }
            let in_range = tensors
                .iter()
                .all(|t| f32_values(t).iter().all(|v| *v >= -tol && *v <= 1.0 + tol));
            range_bad += (!in_range) as usize;
        }
    }
    Outcome::check(
        identity && monotone_bad == 0 && range_bad == 0,
        format!(
            "zero-mask identity {}, 100 forward passes, non-monotone merges {monotone_bad}, out of range {range_bad}",
            if identity { "bit-exact" } else { "broken" }
        ),
    )
}

struct ToyRun {
    label: &'static str,
    psnr_gain: f64,
    mask_iou: f64,
    psnr_fused: f64,
    psnr_last: f64,
    elapsed: Duration,
}

fn toy_config(full: bool) -> TrainConfig {
    let weights = match std::env::var_os("PSSTRNET_BACKBONE_WEIGHTS") {
        Some(path) if full => WeightSource::File { path: path.into() },
        _ => WeightSource::Random { seed: 1 },
    };
    let mut cfg = TrainConfig {
        model: PsstrConfig {
            input_size: (64, 64),
            ..Default::default()
        },
        backbone: BackboneConfig {
            weights: Some(weights),
            ..Default::default()
        },
        epochs: 30,
        checkpoint_interval: 5,
        seed: 0,
        ..Default::default()
    };
    if !full {
        cfg.model.base_channels = 8;
        cfg.backbone.width_divisor = 4;
    }
    cfg
}

fn toy_training(mode: &str, root: &Path) -> Result<ToyRun, String> {
    let full = match mode {
        "full" => true,
        "proxy" => false,
        other => return Err(format!("unknown PSSTRNET_ACCEPTANCE_TRAIN mode {other:?}")),
    };
    let data_root = root.join("data");
    let synth = SynthConfig {
        count: 300,
        test_count: 50,
        image_size: (64, 64),
        seed: 7,
        ..Default::default()
    };
    synth_toy_dataset(&synth, &data_root).map_err(|e| e.to_string())?;
    let cfg = toy_config(full);
    let train = load_pairs(&data_root, "train", &cfg.loader()).map_err(|e| e.to_string())?;
    let test = load_pairs(&data_root, "test", &cfg.loader()).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    trainer.fit(&train, &root.join("run")).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let fused = evaluate(trainer.net(), &test, 3, true, 10, None).map_err(|e| e.to_string())?;
    let last = evaluate(trainer.net(), &test, 3, false, 10, None).map_err(|e| e.to_string())?;
    Ok(ToyRun {
        label: if full { "default config" } else { "reduced-width proxy" },
        psnr_gain: fused.report.psnr - fused.baseline.psnr,
        mask_iou: fused.mask_iou,
        psnr_fused: fused.report.psnr,
        psnr_last: last.report.psnr,
        elapsed,
    })
}

fn toy_criterion(run: &Result<ToyRun, String>, full: bool) -> Outcome {
    let run = match run {
        Ok(run) => run,
        Err(e) => return Outcome::fail(e.clone()),
    };
    let budget = Duration::from_secs(30 * 60);
    let quality = run.psnr_gain >= 3.0 && run.mask_iou >= 0.5;
    let mut detail = format!(
        "{}, psnr gain {:.2} dB, mask iou {:.3}, trained in {:.1} min",
        run.label,
        run.psnr_gain,
        run.mask_iou,
        run.elapsed.as_secs_f64() / 60.0
    );
    if !full {
        detail.push_str(", not the default configuration");
    } else if run.elapsed >= budget {
        detail.push_str(", over the 30 min budget");
    }
    Outcome::check(full && quality && run.elapsed < budget, detail)
}

fn ablation_direction(run: &Result<ToyRun, String>) -> Outcome {
    match run {
        Ok(run) => Outcome::check(
            run.psnr_fused >= run.psnr_last - 0.1,
            format!(
                "{}, 3It.+AF {:.2} dB, 3It. {:.2} dB",
                run.label, run.psnr_fused, run.psnr_last
            ),
        ),
        Err(e) => Outcome::fail(e.clone()),
    }
}

fn parameter_budget() -> Outcome {
    let (_, params) = Psstrnet::init(&PsstrConfig::default(), 0).unwrap();
    let n = parameter_count(&params);
    let target = 4_880_000f64;
    let ratio = n as f64 / target;
    Outcome::check((0.5..=1.5).contains(&ratio), format!("{n} parameters, {:.1}% of 4.88M", ratio * 100.0))
}

fn step_losses(run_dir: &Path) -> Vec<(usize, f64)> {
    std::fs::read_to_string(run_dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .filter_map(|l| match serde_json::from_str::<LogRecord>(l).unwrap() {
            LogRecord::Step { step, loss, .. } => Some((step, loss.total)),
            _ => None,
        })
        .collect()
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data_root = dir.path().join("data");
    tiny_dataset(&data_root, 12, 0, 16);
    let cfg = TrainConfig { epochs: 3, ..tiny_train_config(8) };
    let data = load_pairs(&data_root, "train", &cfg.loader()).unwrap();

    let full = dir.path().join("full");
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    trainer.fit(&data, &full).unwrap();
    let saved = checkpoint_path(&full, 3);
    let copy = dir.path().join("copy.safetensors");
    Checkpoint::read(&saved).unwrap().write(&copy).unwrap();
    let bytes_equal = std::fs::read(&saved).unwrap() == std::fs::read(&copy).unwrap();
    let (loaded, _, _) = load_model(&copy).unwrap();
    let x = random(&mut rng(800), &[2, 3, 16, 16], DType::F32);
    let a = trainer.net().forward(&x, false).unwrap();
    let b = loaded.forward(&x, false).unwrap();
    let outputs_equal = f32_values(&a.image) == f32_values(&b.image) && f32_values(&a.mask) == f32_values(&b.mask);

    let split = dir.path().join("split");
    Trainer::new(TrainConfig { epochs: 1, ..cfg }).unwrap().fit(&data, &split).unwrap();
    let mut resumed = Trainer::resume(&checkpoint_path(&split, 1)).unwrap();
    resumed.set_epochs(3);
    resumed.fit(&data, &split).unwrap();
    let (la, lb) = (step_losses(&full), step_losses(&split));
    let worst = la
        .iter()
        .zip(&lb)
        .map(|((_, x), (_, y))| (x - y).abs() / x.abs())
        .fold(0.0, f64::max);
    let steps_match = la.len() == lb.len() && la.iter().zip(&lb).all(|(x, y)| x.0 == y.0);
    Outcome::check(
        bytes_equal && outputs_equal && steps_match && worst <= 1e-5,
        format!(
            "bytes {}, outputs {}, {} steps after resume, worst relative loss difference {worst:.1e}",
            if bytes_equal { "identical" } else { "differ" },
            if outputs_equal { "identical" } else { "differ" },
            lb.len()
        ),
    )
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Outcome::fail(msg)
    });
    let label = match outcome.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    println!("criterion {n} {name}: {label} ({})", outcome.detail);
    !matches!(outcome.status, Status::Fail)
}

fn main() {
    let mut ok = true;
    ok &= report(1, "formula oracles", formula_oracles);
    ok &= report(2, "gradient checks", gradient_checks);
    ok &= report(3, "metric oracles", metric_oracles);
    ok &= report(4, "identity invariants", identity_invariants);

    let mode = std::env::var("PSSTRNET_ACCEPTANCE_TRAIN").ok();
    let run = mode.as_deref().map(|mode| {
        let kept = std::env::var_os("PSSTRNET_ACCEPTANCE_DIR");
        let temp = tempfile::tempdir().unwrap();
        let root = kept.map(Into::into).unwrap_or_else(|| temp.path().to_path_buf());
        catch_unwind(AssertUnwindSafe(|| toy_training(mode, &root))).unwrap_or_else(|_| Err("training panicked".into()))
    });
    let skipped = "not run, set PSSTRNET_ACCEPTANCE_TRAIN=full or proxy";
    let full = mode.as_deref() == Some("full");
    ok &= report(5, "toy-scale training", || match &run {
        Some(run) => toy_criterion(run, full),
        None => Outcome::skip(skipped),
    });
    ok &= report(6, "ablation direction", || match &run {
        Some(run) => ablation_direction(run),
        None => Outcome::skip(skipped),
    });

    ok &= report(7, "parameter budget", parameter_budget);
    ok &= report(8, "checkpoint round trip", checkpoint_round_trip);
    if !ok {
        std::process::exit(1);
    }
}
