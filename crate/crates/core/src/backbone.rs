//! Frozen convolutional feature extractor for the perceptual and style losses.
//!
//! The default plan is the VGG-16 feature stack with torchvision parameter
//! names (`features.{index}.weight`), so weights exported from torchvision
//! load unchanged. Activations are tapped after the first ReLU of each block.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::conv2d;
use crate::params::{Init, NamedParameterSet};

/// VGG-16 feature plan: channel counts, 0 marks a 2x2 max-pool.
const VGG16_PLAN: [usize; 18] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
];

/// ImageNet channel statistics.
const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightSource {
    /// Named-tensor archive with torchvision-style names.
    File { path: PathBuf },
    /// Seeded He-normal weights; useful when no pretrained archive exists.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Divides every VGG-16 channel count; 1 is the standard network.
    pub width_divisor: usize,
    /// Activation names such as `relu3_1`.
    pub taps: Vec<String>,
    pub weights: Option<WeightSource>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width_divisor: 1,
            taps: ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"]
                .map(String::from)
                .to_vec(),
            weights: None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv { weight: Tensor, bias: Tensor },
    Relu,
    MaxPool,
}

/// A fixed stack of layers whose activations at selected positions are
/// returned. Weights are plain tensors, so gradients reach only the input.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<Layer>,
    /// Layer indices whose outputs are returned, ascending.
    taps: Vec<usize>,
    normalize: bool,
}

struct PlanEntry {
    index: usize,
    layer: PlanLayer,
    name: Option<String>,
}

enum PlanLayer {
    Conv { cin: usize, cout: usize },
    Relu,
    MaxPool,
}

fn vgg16_plan(width_divisor: usize) -> Vec<PlanEntry> {
    let mut out = Vec::new();
    let mut cin = 3;
    let (mut block, mut within) = (1, 0);
    for &c in VGG16_PLAN.iter() {
        if c == 0 {
            out.push(PlanEntry {
                index: out.len(),
                layer: PlanLayer::MaxPool,
                name: None,
            });
            block += 1;
            within = 0;
            continue;
        }
        let cout = (c / width_divisor).max(1);
        within += 1;
        out.push(PlanEntry {
            index: out.len(),
            layer: PlanLayer::Conv { cin, cout },
            name: None,
        });
        out.push(PlanEntry {
            index: out.len(),
            layer: PlanLayer::Relu,
            name: Some(format!("relu{block}_{within}")),
        });
        cin = cout;
    }
    out
}

impl FeatureExtractor {
    pub fn new(layers: Vec<Layer>, mut taps: Vec<usize>, normalize: bool) -> Result<Self> {
        taps.sort_unstable();
        taps.dedup();
        if taps.is_empty() {
            return Err(Error::Config("feature extractor needs at least one tap".into()));
        }
        if let Some(&last) = taps.last() {
            if last >= layers.len() {
                return Err(Error::Config(format!(
                    "tap {last} beyond {} layers",
                    layers.len()
                )));
            }
        }
        Ok(Self {
            layers,
            taps,
            normalize,
        })
    }

    /// Builds the configured VGG-16 variant. Fails if no weight source is set.
    pub fn from_config(cfg: &BackboneConfig, device: &Device) -> Result<Self> {
        if cfg.width_divisor == 0 {
            return Err(Error::Config("backbone width_divisor must be >= 1".into()));
        }
        let source = cfg.weights.as_ref().ok_or_else(|| {
            Error::Config("backbone weights missing: set a weight archive or a random seed".into())
        })?;
        let plan = vgg16_plan(cfg.width_divisor);
        let mut taps = Vec::with_capacity(cfg.taps.len());
        for tap in &cfg.taps {
            let idx = plan
                .iter()
                .find(|p| p.name.as_deref() == Some(tap.as_str()))
                .map(|p| p.index)
                .ok_or_else(|| Error::Config(format!("unknown backbone tap {tap}")))?;
            taps.push(idx);
        }
        let last = *taps.iter().max().ok_or_else(|| Error::Config("no backbone taps".into()))?;
        let plan: Vec<PlanEntry> = plan.into_iter().take(last + 1).collect();

        let stored: BTreeMap<String, Tensor> = match source {
            WeightSource::File { path } => load_archive(path)?,
            WeightSource::Random { seed } => {
                let set = NamedParameterSet::new(*seed, DType::F32, device);
                let root = set.root().pp("features");
                for p in &plan {
                    if let PlanLayer::Conv { cin, cout } = p.layer {
                        let s = root.pp(p.index);
                        s.param((cout, cin, 3, 3), "weight", Init::KaimingNormal)?;
                        s.param(cout, "bias", Init::Const(0.0))?;
                    }
                }
                set.to_tensors()
            }
        };

        let mut layers = Vec::with_capacity(plan.len());
        for p in &plan {
            layers.push(match p.layer {
                PlanLayer::Conv { cin, cout } => {
                    let fetch = |suffix: &str, dims: &[usize]| -> Result<Tensor> {
                        let name = format!("features.{}.{suffix}", p.index);
                        let t = stored
                            .get(&name)
                            .ok_or_else(|| Error::Config(format!("backbone weights missing {name}")))?;
                        if t.dims() != dims {
                            return Err(Error::Config(format!(
                                "backbone tensor {name} has shape {:?}, expected {:?}",
                                t.dims(),
                                dims
                            )));
                        }
                        Ok(t.to_dtype(DType::F32)?.to_device(device)?)
                    };
                    Layer::Conv {
                        weight: fetch("weight", &[cout, cin, 3, 3])?,
                        bias: fetch("bias", &[cout])?,
                    }
                }
                PlanLayer::Relu => Layer::Relu,
                PlanLayer::MaxPool => Layer::MaxPool,
            });
        }
        Self::new(layers, taps, true)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    Layer::Conv { weight, bias } => Layer::Conv {
                        weight: weight.to_dtype(dtype)?,
                        bias: bias.to_dtype(dtype)?,
                    },
                    Layer::Relu => Layer::Relu,
                    Layer::MaxPool => Layer::MaxPool,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            taps: self.taps.clone(),
            normalize: self.normalize,
        })
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    /// Activations at each tap for an NCHW batch in [0, 1].
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = if self.normalize {
            let shape = (1, 3, 1, 1);
            let mean = Tensor::new(&MEAN, x.device())?.to_dtype(x.dtype())?.reshape(shape)?;
            let std = Tensor::new(&STD, x.device())?.to_dtype(x.dtype())?.reshape(shape)?;
            x.broadcast_sub(&mean)?.broadcast_div(&std)?
        } else {
            x.clone()
        };
        let last = *self.taps.last().expect("non-empty taps");
        let mut out = Vec::with_capacity(self.taps.len());
        let mut next_tap = 0;
        for (i, layer) in self.layers.iter().enumerate().take(last + 1) {
            x = match layer {
                Layer::Conv { weight, bias } => {
                    let k = weight.dim(2)?;
                    conv2d(&x, weight, Some(bias), 1, k / 2, 1)?
                }
                Layer::Relu => x.relu()?,
                Layer::MaxPool => max_pool2(&x)?,
            };
            if self.taps[next_tap] == i {
                out.push(x.clone());
                next_tap += 1;
            }
        }
        Ok(out)
    }
}

/// 2x2 max-pooling with stride 2; odd trailing rows/columns are dropped.
fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    if h2 == 0 || w2 == 0 {
        return Err(Error::Shape(format!("cannot max-pool {:?}", x.dims())));
    }
    let x = x.narrow(2, 0, h2 * 2)?.narrow(3, 0, w2 * 2)?;
    Ok(x.reshape((b, c, h2, 2, w2, 2))?.max(5)?.max(3)?)
}

fn load_archive(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    Ok(checkpoint::read_archive(path)?.tensors)
}
