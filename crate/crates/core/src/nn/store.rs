use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
}

/// Named parameters. Initial values are a pure function of `(seed, name)`,
/// so construction order never changes the draw.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Create parameter `name`; fails if it already exists.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::contract(format!("parameter `{name}` defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        };
        // Draw in f64, then round once to the store precision.
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite `name` with `value` (shape-checked, cast to store dtype).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::contract(format!(
                "parameter `{name}`: shape {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Copy every parameter of `other` sharing a name with this store.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in &self.vars {
            if let Some(src) = other.vars.get(name) {
                var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }

    /// `self ← momentum · self + (1 − momentum) · source` for every shared name.
    /// `momentum == 1` leaves the store untouched.
    pub fn ema_update(&self, source: &ParamStore, momentum: f64) -> Result<()> {
        if momentum >= 1.0 {
            return Ok(());
        }
        for (name, var) in &self.vars {
            if let Some(src) = source.vars.get(name) {
                let mixed = ((var.as_tensor() * momentum)? + (src.as_tensor() * (1.0 - momentum))?)?;
                var.set(&mixed)?;
            }
        }
        Ok(())
    }

    /// Flattened f32 values per parameter.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let t = var.as_tensor();
                Ok((
                    name.clone(),
                    t.dims().to_vec(),
                    t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
                ))
            })
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, shape, values) in self.export()? {
            h.update(name.as_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Fingerprint restricted to names starting with `prefix`.
    pub fn fingerprint_prefix(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for v in var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}
