//! Named trainable parameters with seed-deterministic initialization.
//!
//! Every parameter draws its initial value from an RNG keyed by the store
//! seed and the parameter name, so two models built from the same seed agree
//! on every shared parameter regardless of construction order or of which
//! optional parameters exist.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn { fan_in: usize },
}

pub struct ParamStore {
    varmap: VarMap,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .field("num_params", &self.len())
            .finish()
    }
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            varmap: VarMap::new(),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Returns the parameter, creating it on first use.
    pub fn get(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let mut data = self.varmap.data().lock().unwrap();
        if let Some(var) = data.get(name) {
            if var.shape() != &shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    var.shape(),
                    shape
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.initial_values(name, shape.elem_count(), init);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn initial_values(&self, name: &str, n: usize, init: Init) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v; n],
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
            Init::FanIn { fan_in } => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        }
    }

    /// Overwrites an existing parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let data = self.varmap.data().lock().unwrap();
        let var = data
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let data = self.varmap.data().lock().unwrap();
        data.get(name).map(|v| v.as_tensor().clone())
    }

    pub fn names(&self) -> Vec<String> {
        let data = self.varmap.data().lock().unwrap();
        let mut names: Vec<String> = data.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn len(&self) -> usize {
        self.varmap.data().lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_scalars(&self) -> usize {
        let data = self.varmap.data().lock().unwrap();
        data.values().map(|v| v.elem_count()).sum()
    }

    /// All variables ordered by name.
    pub fn vars(&self) -> Vec<Var> {
        let data = self.varmap.data().lock().unwrap();
        let mut named: Vec<(&String, &Var)> = data.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    /// Bit patterns of every parameter, for exact before/after comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<u64>>> {
        let data = self.varmap.data().lock().unwrap();
        let mut out = BTreeMap::new();
        for (name, var) in data.iter() {
            let bits = var
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?
                .into_iter()
                .map(f64::to_bits)
                .collect();
            out.insert(name.clone(), bits);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.varmap
            .save(path)
            .map_err(|e| Error::Checkpoint(format!("saving {}: {e}", path.display())))
    }

    /// Loads values for every existing parameter; missing names or shape
    /// mismatches are errors.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.varmap
            .load(path)
            .map_err(|e| Error::Checkpoint(format!("loading {}: {e}", path.display())))
    }
}
