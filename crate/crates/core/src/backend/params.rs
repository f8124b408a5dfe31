use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};

/// Named trainable tensors of one model.
///
/// Cloning shares storage with the original; [`ParamStore::deep_clone`]
/// copies it. Keys are kept sorted so iteration (and serialization) order is
/// stable.
#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
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

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) -> Result<()> {
        let tensor = tensor.to_dtype(self.dtype)?.to_device(&self.device)?;
        self.vars.insert(name.into(), Var::from_tensor(&tensor)?);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Capability(format!("missing parameter `{name}`")))
    }

    /// Overwrites a parameter in place; every holder of this store sees the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name)?;
        let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        if value.dims() != var.dims() {
            return Err(Error::Input(format!(
                "shape mismatch for `{name}`: {:?} vs {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(&value)?;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every tensor into fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            vars,
            dtype: self.dtype,
            device: self.device.clone(),
        })
    }

    /// Copies values from `other` into this store's existing storage.
    pub fn assign_from(&self, other: &ParamStore) -> Result<()> {
        for (k, v) in &self.vars {
            let src = other.var(k)?;
            v.set(src.as_tensor())?;
        }
        Ok(())
    }

    pub fn detached(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let tensors = self.detached();
        safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), None)
            .map_err(|e| Error::Io {
                context: "serializing parameters".into(),
                source: std::io::Error::other(e.to_string()),
            })
    }

    pub fn view(&self, track: bool) -> ParamView<'_> {
        ParamView { store: self, track }
    }
}

/// Read access to a [`ParamStore`] for one forward pass.
///
/// With `track == false` the returned tensors are detached, so no autograd
/// graph is recorded (evaluation mode).
#[derive(Clone, Copy)]
pub struct ParamView<'a> {
    store: &'a ParamStore,
    track: bool,
}

impl<'a> ParamView<'a> {
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let var = self.store.var(name)?;
        Ok(if self.track {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        })
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn tracking(&self) -> bool {
        self.track
    }
}
