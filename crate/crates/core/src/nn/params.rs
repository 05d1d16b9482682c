use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// PyTorch's default for linear and convolution layers.
    pub fn fan_in_uniform(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

struct Inner {
    vars: BTreeMap<String, Var>,
    trainable: BTreeSet<String>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

/// Named parameter storage with seeded initialization.
///
/// Cloning shares the underlying store; [`ParamStore::pp`] scopes names the
/// same way candle's `VarBuilder::pp` does.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    prefix: String,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                trainable: BTreeSet::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                dtype,
                device: device.clone(),
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        Self {
            inner: self.inner.clone(),
            prefix: self.path(name.as_ref()),
        }
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    pub fn dtype(&self) -> DType {
        self.lock().dtype
    }

    /// Creates (or returns the existing) trainable parameter.
    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        Ok(self.create(name, shape.into(), init, true)?.as_tensor().clone())
    }

    /// Creates a non-trainable buffer, e.g. batch-norm running statistics.
    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.create(name, shape.into(), init, false)
    }

    fn create(&self, name: &str, shape: Shape, init: Init, trainable: bool) -> Result<Var> {
        let path = self.path(name);
        let mut inner = self.lock();
        if let Some(v) = inner.vars.get(&path) {
            if v.shape() != &shape {
                return Err(Error::Shape(format!(
                    "parameter {path} exists with shape {:?}, requested {:?}",
                    v.shape(),
                    shape
                )));
            }
            return Ok(v.clone());
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut inner.rng);
                    z * s
                })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.vars.insert(path.clone(), var.clone());
        if trainable {
            inner.trainable.insert(path);
        }
        Ok(var)
    }

    /// Trainable variables in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let inner = self.lock();
        inner
            .trainable
            .iter()
            .map(|k| inner.vars[k].clone())
            .collect()
    }

    /// All variables (parameters and buffers) in name order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_vars()
            .iter()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Detached copies of every variable, keyed by `prefix + name`.
    pub fn snapshot(&self, prefix: &str) -> Result<HashMap<String, Tensor>> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| Ok((format!("{prefix}{k}"), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites every variable from `tensors[prefix + name]`.
    pub fn restore(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (k, v) in self.named_vars() {
            let key = format!("{prefix}{k}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Shape(format!("tensor {key} missing from weights")))?;
            if t.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    v.shape()
                )));
            }
            v.set(&t.to_dtype(v.dtype())?)?;
        }
        Ok(())
    }

    /// Copies every value from a store with identical structure.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.restore(&other.snapshot("")?, "")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.snapshot("")?, path)?;
        Ok(())
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }
}
