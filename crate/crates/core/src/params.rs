//! Named parameter storage with deterministic, per-name seeded initialization.
//!
//! Every tensor the model owns lives here under a dotted path such as
//! `decoder.d3.acb.w3x3`. Trainable parameters and non-trainable buffers
//! (normalization running statistics) share the namespace but are counted
//! and optimized separately.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    /// He-style uniform bound for a layer with `fan_in` inputs feeding a rectifier.
    pub fn he_uniform(fan_in: usize) -> Self {
        Init::Uniform((6.0 / fan_in.max(1) as f64).sqrt())
    }

    /// Bound used for biases and layers not followed by a rectifier.
    pub fn lecun_uniform(fan_in: usize) -> Self {
        Init::Uniform((1.0 / fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Debug)]
struct Entry {
    name: String,
    var: Var,
    trainable: bool,
}

#[derive(Debug)]
struct Inner {
    entries: Vec<Entry>,
    seed: u64,
    dtype: DType,
    device: Device,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Shared handle on the parameter table of one model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: Vec::new(),
                seed,
                dtype,
                device,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn root(&self) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            path: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.lock().dtype
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    /// Trainable variables in creation order, optionally restricted to a name prefix.
    pub fn trainable_vars(&self, prefix: Option<&str>) -> Vec<Var> {
        self.lock()
            .entries
            .iter()
            .filter(|e| e.trainable && prefix.is_none_or(|p| in_component(&e.name, p)))
            .map(|e| e.var.clone())
            .collect()
    }

    /// Number of trainable scalars whose name lies under `prefix` (all when `None`).
    pub fn count(&self, prefix: Option<&str>) -> usize {
        self.lock()
            .entries
            .iter()
            .filter(|e| e.trainable && prefix.is_none_or(|p| in_component(&e.name, p)))
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Number of non-trainable buffer scalars.
    pub fn buffer_count(&self) -> usize {
        self.lock()
            .entries
            .iter()
            .filter(|e| !e.trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Name, shape and kind of every entry, in creation order.
    pub fn describe(&self) -> Vec<ParamInfo> {
        self.lock()
            .entries
            .iter()
            .map(|e| ParamInfo {
                name: e.name.clone(),
                shape: e.var.dims().to_vec(),
                trainable: e.trainable,
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock()
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.var.clone())
    }

    /// All tensors (parameters and buffers) keyed by name.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.lock()
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.var.as_tensor().clone()))
            .collect()
    }

    /// SHA-256 over every entry's name and value, in creation order.
    ///
    /// Values are widened to f64 first, which is exact for f32 storage, so two
    /// stores hash equal iff they are bitwise identical.
    pub fn checksum(&self) -> Result<String> {
        let inner = self.lock();
        let mut hasher = Sha256::new();
        for e in &inner.entries {
            hasher.update(e.name.as_bytes());
            let values = e
                .var
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path)?;
        Ok(())
    }

    /// Overwrite entries from a safetensors file.
    ///
    /// With `prefix` set, only entries under that component are expected in
    /// the file and only they are assigned. Every expected entry must be
    /// present with a matching shape.
    pub fn load(&self, path: &Path, prefix: Option<&str>) -> Result<()> {
        if !path.is_file() {
            return Err(Error::Config(format!(
                "weights file {} does not exist",
                path.display()
            )));
        }
        let loaded = candle_core::safetensors::load(path, &self.device()).map_err(|e| {
            Error::Config(format!("cannot read weights file {}: {e}", path.display()))
        })?;
        let inner = self.lock();
        for e in &inner.entries {
            if prefix.is_some_and(|p| !in_component(&e.name, p)) {
                continue;
            }
            let t = loaded.get(&e.name).ok_or_else(|| {
                Error::Config(format!(
                    "weights file {} has no tensor named {}",
                    path.display(),
                    e.name
                ))
            })?;
            if t.dims() != e.var.dims() {
                return Err(Error::Config(format!(
                    "tensor {} in {} has shape {:?}, expected {:?}",
                    e.name,
                    path.display(),
                    t.dims(),
                    e.var.dims()
                )));
            }
            e.var.set(&t.to_dtype(inner.dtype)?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: Shape, init: Init, trainable: bool) -> Result<Var> {
        let mut inner = self.lock();
        if inner.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => {
                let mut rng = param_rng(inner.seed, &name);
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.entries.push(Entry {
            name,
            var: var.clone(),
            trainable,
        });
        Ok(var)
    }
}

fn in_component(name: &str, prefix: &str) -> bool {
    name == prefix
        || name
            .strip_prefix(prefix)
            .is_some_and(|rest| rest.starts_with('.'))
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Scoped view on a [`ParamStore`] that prefixes every name it creates.
#[derive(Debug, Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    path: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl std::fmt::Display) -> ParamBuilder {
        ParamBuilder {
            store: self.store.clone(),
            path: self.full_name(&name.to_string()),
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        }
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store
            .create(self.full_name(name), shape.into(), init, true)
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store
            .create(self.full_name(name), shape.into(), init, false)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_name() {
        let a = ParamStore::new(3, DType::F32, Device::Cpu);
        let b = ParamStore::new(3, DType::F32, Device::Cpu);
        a.root().pp("x").param("w", (4, 4), Init::Uniform(1.0)).unwrap();
        // Creating another parameter first must not perturb `x.w`.
        b.root().param("other", 10, Init::Uniform(1.0)).unwrap();
        b.root().pp("x").param("w", (4, 4), Init::Uniform(1.0)).unwrap();
        let wa = a.get("x.w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let wb = b.get("x.w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(wa, wb);
        assert!(wa.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn counts_split_trainable_and_buffers() {
        let s = ParamStore::new(0, DType::F32, Device::Cpu);
        let r = s.root();
        r.pp("a").param("w", (2, 3), Init::Zeros).unwrap();
        r.pp("ab").param("w", 5, Init::Zeros).unwrap();
        r.pp("a").buffer("m", 7, Init::Zeros).unwrap();
        assert_eq!(s.count(Some("a")), 6);
        assert_eq!(s.count(Some("ab")), 5);
        assert_eq!(s.count(None), 11);
        assert_eq!(s.buffer_count(), 7);
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.root().param("w", 1, Init::Zeros).unwrap();
        assert!(matches!(
            s.root().param("w", 1, Init::Zeros),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let a = ParamStore::new(1, DType::F32, Device::Cpu);
        a.root().param("w", (3, 3), Init::Uniform(0.5)).unwrap();
        a.root().buffer("b", 3, Init::Ones).unwrap();
        a.save(&path).unwrap();
        let b = ParamStore::new(2, DType::F32, Device::Cpu);
        b.root().param("w", (3, 3), Init::Uniform(0.5)).unwrap();
        b.root().buffer("b", 3, Init::Zeros).unwrap();
        assert_ne!(a.checksum().unwrap(), b.checksum().unwrap());
        b.load(&path, None).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
    }

    #[test]
    fn load_rejects_missing_and_misshapen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let a = ParamStore::new(1, DType::F32, Device::Cpu);
        a.root().param("w", (3, 3), Init::Zeros).unwrap();
        a.save(&path).unwrap();
        let b = ParamStore::new(1, DType::F32, Device::Cpu);
        b.root().param("w", (3, 2), Init::Zeros).unwrap();
        assert!(matches!(b.load(&path, None), Err(Error::Config(_))));
        let c = ParamStore::new(1, DType::F32, Device::Cpu);
        c.root().param("v", 1, Init::Zeros).unwrap();
        assert!(matches!(c.load(&path, None), Err(Error::Config(_))));
        assert!(matches!(
            c.load(&dir.path().join("missing"), None),
            Err(Error::Config(_))
        ));
        std::fs::write(dir.path().join("corrupt"), b"not a tensor file").unwrap();
        assert!(matches!(
            c.load(&dir.path().join("corrupt"), None),
            Err(Error::Config(_))
        ));
    }
}
