//! Named, hierarchical parameter storage.
//!
//! Every learnable tensor and every normalization buffer of the network lives
//! in a [`NamedParameterSet`] under a dotted name such as
//! `encoder.stage0.conv.weight`. Names are kept sorted so iteration order, and
//! therefore checkpoint layout and optimizer state layout, is stable.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Receives gradients and optimizer updates.
    Learnable,
    /// Running statistics and other state updated outside the optimizer.
    Buffer,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Const(f64),
    /// He-normal with fan-in taken from every dim except the first.
    KaimingNormal,
    Normal { std: f64 },
}

#[derive(Clone)]
pub struct Entry {
    pub var: Var,
    pub kind: ParamKind,
}

struct Inner {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

/// Thread-safe map from hierarchical name to tensor.
#[derive(Clone)]
pub struct NamedParameterSet {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for NamedParameterSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.lock();
        f.debug_struct("NamedParameterSet")
            .field("entries", &inner.entries.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl NamedParameterSet {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter set lock poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            set: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<Entry> {
        self.lock().entries.get(name).cloned()
    }

    /// All entries in name order.
    pub fn entries(&self) -> Vec<(String, Entry)> {
        self.lock()
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn learnable(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Learnable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Inserts a tensor directly; used for tests and for archives built by hand.
    pub fn insert(&self, name: &str, tensor: &Tensor, kind: ParamKind) -> Result<Var> {
        let mut inner = self.lock();
        if inner.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?)?;
        inner.entries.insert(
            name.to_string(),
            Entry {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }

    fn get_or_create(&self, name: String, shape: Shape, init: Init, kind: ParamKind) -> Result<Var> {
        let mut inner = self.lock();
        if let Some(entry) = inner.entries.get(&name) {
            if entry.var.shape() != &shape {
                return Err(Error::Config(format!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    entry.var.shape(),
                    shape
                )));
            }
            return Ok(entry.var.clone());
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::KaimingNormal => {
                let dims = shape.dims();
                let fan_in: usize = dims.iter().skip(1).product::<usize>().max(1);
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| std * sample_normal(&mut inner.rng)).collect()
            }
            Init::Normal { std } => (0..n).map(|_| std * sample_normal(&mut inner.rng)).collect(),
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        inner.entries.insert(
            name,
            Entry {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }

    /// Snapshot of every entry, detached from the autograd graph.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.lock()
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_detached_tensor()))
            .collect()
    }

    /// Overwrites every entry from `tensors`. Names and shapes must match
    /// exactly; entries in `tensors` that this set does not own are rejected.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        for name in tensors.keys() {
            if !inner.entries.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
        }
        for (name, entry) in inner.entries.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != entry.var.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    entry.var.shape()
                )));
            }
            entry.var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// Sum of element counts over the learnable entries.
pub fn parameter_count(params: &NamedParameterSet) -> usize {
    params
        .learnable()
        .iter()
        .map(|(_, v)| v.elem_count())
        .sum()
}

/// A name prefix into a [`NamedParameterSet`].
#[derive(Clone)]
pub struct Scope<'a> {
    set: &'a NamedParameterSet,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            set: self.set,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Tensor> {
        let var = self
            .set
            .get_or_create(self.full_name(name), shape.into(), init, ParamKind::Learnable)?;
        Ok(var.as_tensor().clone())
    }

    pub fn buffer<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Var> {
        self.set
            .get_or_create(self.full_name(name), shape.into(), init, ParamKind::Buffer)
    }

    pub fn dtype(&self) -> DType {
        self.set.dtype
    }

    pub fn device(&self) -> &Device {
        &self.set.device
    }
}

/// Box-Muller standard normal draw.
pub(crate) fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
