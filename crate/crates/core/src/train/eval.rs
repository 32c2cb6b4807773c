use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{Trainer, TrainConfig};
use crate::data::{collate, mask_iou, write_image, write_mask, Batch, Mask, PairDataset};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{MetricReport, PlanarImage};
use crate::model::Psstrnet;

/// Aggregate scores of one model configuration on a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean metrics of the predictions against the ground truth.
    pub report: MetricReport,
    /// Mean metrics of the unmodified inputs against the ground truth.
    pub baseline: MetricReport,
    /// Mean IoU of the predicted masks (binarized at 0.5) and the dataset masks.
    pub mask_iou: f64,
    pub images: BTreeMap<String, MetricReport>,
    /// Samples that could not be loaded.
    pub errors: BTreeMap<String, String>,
}

fn quantized(t: &Tensor) -> Result<PlanarImage> {
    Ok(PlanarImage::from_rgb8(&PlanarImage::from_tensor(t)?.to_rgb8()))
}

/// Scores `predict`, which maps a batch to (images, masks). Predictions are
/// rounded to 8 bits first, so scores match those of the written files.
/// With `out_dir`, predictions go to `out_dir/{image,mask}/NAME.png`.
pub fn evaluate_with(
    data: &PairDataset,
    batch_size: usize,
    out_dir: Option<&Path>,
    mut predict: impl FnMut(&Batch) -> Result<(Tensor, Tensor)>,
) -> Result<Evaluation> {
    if let Some(dir) = out_dir {
        for sub in ["image", "mask"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let mut eval = Evaluation::default();
    let (mut baselines, mut ious) = (Vec::new(), Vec::new());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut samples = Vec::with_capacity(chunk.len());
        for &i in chunk {
            match data.get(i) {
                Ok(s) => samples.push(s),
                Err(e) => {
                    eval.errors.insert(data.names()[i].clone(), e.to_string());
                }
            }
        }
        if samples.is_empty() {
            continue;
        }
        let batch = collate(&samples, &Device::Cpu)?;
        let (images, masks) = predict(&batch)?;
        for (k, s) in samples.iter().enumerate() {
            let pred = quantized(&images.get(k)?)?;
            let mask = Mask::from_tensor(&masks.get(k)?)?;
            eval.images.insert(s.name.clone(), MetricReport::compute(&pred, &s.gt)?);
            baselines.push(MetricReport::compute(&s.input, &s.gt)?);
            ious.push(mask_iou(&mask, &s.mask)?);
            if let Some(dir) = out_dir {
                write_image(&dir.join("image").join(format!("{}.png", s.name)), &pred)?;
                write_mask(&dir.join("mask").join(format!("{}.png", s.name)), &mask)?;
            }
        }
    }
    if eval.images.is_empty() {
        return Err(Error::Empty("no samples could be evaluated".into()));
    }
    let reports: Vec<MetricReport> = eval.images.values().copied().collect();
    eval.report = MetricReport::mean(&reports)?;
    eval.baseline = MetricReport::mean(&baselines)?;
    eval.mask_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok(eval)
}

/// Scores the network in inference mode with the given pass count and fusion.
pub fn evaluate(
    net: &Psstrnet,
    data: &PairDataset,
    iterations: usize,
    fusion: bool,
    batch_size: usize,
    out_dir: Option<&Path>,
) -> Result<Evaluation> {
    evaluate_with(data, batch_size, out_dir, |b| {
        let out = net.forward_with(&b.input, iterations, fusion, false)?;
        Ok((out.image, out.mask))
    })
}

/// One configuration of the iteration-count and fusion ablation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub iterations: usize,
    pub fusion: bool,
}

impl AblationEntry {
    pub fn new(iterations: usize, fusion: bool) -> Self {
        let label = if fusion {
            format!("{iterations}It.+AF")
        } else {
            format!("{iterations}It.")
        };
        Self { label, iterations, fusion }
    }

    /// Parses labels such as `3It.` and `3It.+AF`.
    pub fn parse(label: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown ablation configuration {label:?}"));
        let (head, fusion) = match label.strip_suffix("+AF") {
            Some(h) => (h, true),
            None => (label, false),
        };
        let n: usize = head
            .strip_suffix("It.")
            .and_then(|n| n.parse().ok())
            .ok_or_else(bad)?;
        if n == 0 || (fusion && n < 2) {
            return Err(bad());
        }
        Ok(Self::new(n, fusion))
    }
}

/// The seven configurations: 1-4 passes without fusion, 2-4 with.
pub fn ablation_matrix() -> Vec<AblationEntry> {
    let mut out: Vec<AblationEntry> = (1..=4).map(|n| AblationEntry::new(n, false)).collect();
    out.extend((2..=4).map(|n| AblationEntry::new(n, true)));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub entry: AblationEntry,
    pub checkpoint: PathBuf,
    pub evaluation: Evaluation,
}

/// Trains one model per distinct pass count and evaluates every entry with
/// its fusion setting. Fusion does not enter the losses, so entries that
/// differ only in fusion share a model. Runs go to `run_dir/{n}it`.
pub fn run_ablation(
    base: &TrainConfig,
    train: &PairDataset,
    test: &PairDataset,
    entries: &[AblationEntry],
    run_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if entries.is_empty() {
        return Err(Error::Config("no ablation configurations selected".into()));
    }
    let mut models: BTreeMap<usize, (Trainer, PathBuf)> = BTreeMap::new();
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        if !models.contains_key(&entry.iterations) {
            let mut cfg = base.clone();
            cfg.model.iterations = entry.iterations;
            cfg.model.adaptive_fusion = entry.fusion;
            cfg.loss = Some(LossWeights {
                gamma_seg: LossWeights::for_iterations(entry.iterations).gamma_seg,
                ..base.loss_weights()
            });
            let dir = run_dir.join(format!("{}it", entry.iterations));
            let mut trainer = Trainer::new(cfg)?;
            log::info!("ablation: training {} passes", entry.iterations);
            trainer.fit(train, &dir)?;
            let ckpt = super::checkpoint_path(&dir, trainer.epoch());
            models.insert(entry.iterations, (trainer, ckpt));
        }
        let (trainer, ckpt) = &models[&entry.iterations];
        let pred_dir = run_dir.join("predictions").join(entry.label.replace('+', "_"));
        let evaluation = evaluate(
            trainer.net(),
            test,
            entry.iterations,
            entry.fusion,
            base.batch_size,
            Some(&pred_dir),
        )?;
        rows.push(AblationRow {
            entry: entry.clone(),
            checkpoint: ckpt.clone(),
            evaluation,
        });
    }
    Ok(rows)
}

/// Tab-separated ablation table, one row per configuration.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from("config\tpsnr\tmssim\tmse\tage\tpeps\tpceps\tmask_iou\n");
    for row in rows {
        let r = &row.evaluation.report;
        out.push_str(&format!(
            "{}\t{:.2}\t{:.2}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.3}\n",
            row.entry.label, r.psnr, r.mssim, r.mse, r.age, r.peps, r.pceps, row.evaluation.mask_iou
        ));
    }
    out
}
