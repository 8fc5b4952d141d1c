//! Named parameter tensors with safetensors persistence.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution weight with the given fan-in.
    Weight { fan_in: usize },
    Bias,
    BnWeight,
    BnBias,
    BnMean,
    BnVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Parameters (and frozen buffers) keyed by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl ParamStore {
    /// He-normal conv weights, zero biases, identity batch norm.
    pub fn init(specs: &[ParamSpec], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let shape = IxDyn(&spec.shape);
            let t = match spec.kind {
                ParamKind::Weight { fan_in } => {
                    let normal = Normal::new(0.0f32, (2.0 / fan_in.max(1) as f32).sqrt()).expect("finite std");
                    ArrayD::from_shape_simple_fn(shape, || normal.sample(&mut rng))
                }
                ParamKind::Bias | ParamKind::BnBias | ParamKind::BnMean => ArrayD::zeros(shape),
                ParamKind::BnWeight | ParamKind::BnVar => ArrayD::ones(shape),
            };
            tensors.insert(spec.name.clone(), t);
        }
        ParamStore { tensors }
    }

    pub fn zeros_like(specs: &[ParamSpec]) -> ParamStore {
        let tensors = specs
            .iter()
            .filter(|s| s.kind.trainable())
            .map(|s| (s.name.clone(), ArrayD::zeros(IxDyn(&s.shape))))
            .collect();
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter `{name}`")))
    }

    /// Adds `other` element-wise; missing entries are inserted.
    pub fn accumulate(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(t) => *t += v,
                None => {
                    self.tensors.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn add_to(&mut self, name: &str, delta: ArrayD<f32>) {
        match self.tensors.get_mut(name) {
            Some(t) => *t += &delta,
            None => {
                self.tensors.insert(name.to_string(), delta);
            }
        }
    }

    pub fn scale(&mut self, k: f32) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    /// Verifies every spec is present with the right shape. Extra tensors are
    /// allowed (e.g. classifier layers of a full checkpoint).
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Model(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the named tensors.
    pub fn restrict(&self, specs: &[ParamSpec]) -> ParamStore {
        let tensors = specs
            .iter()
            .filter_map(|s| self.tensors.get(&s.name).map(|t| (s.name.clone(), t.clone())))
            .collect();
        ParamStore { tensors }
    }

    pub fn from_safetensors(bytes: &[u8]) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Model(e.to_string()))?;
        let metadata: BTreeMap<String, String> = meta
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Model(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let values: Vec<f32> = match view.dtype() {
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                    .collect(),
                // integer buffers such as batch-norm step counters are not parameters
                Dtype::I64 | Dtype::I32 => continue,
                other => return Err(Error::Model(format!("tensor `{name}` has unsupported dtype {other:?}"))),
            };
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| Error::Model(e.to_string()))?;
            tensors.insert(name, arr);
        }
        Ok((ParamStore { tensors }, metadata))
    }

    pub fn to_safetensors(&self, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let bytes = t.iter().flat_map(|v| v.to_le_bytes()).collect();
                (k.clone(), t.shape().to_vec(), bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Model(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: std::collections::HashMap<String, String> =
            metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Model(e.to_string()))?;
        canonical_header(bytes)
    }

    pub fn load(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let bytes = std::fs::read(path)?;
        Self::from_safetensors(&bytes).map_err(|e| Error::Model(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        std::fs::write(path, self.to_safetensors(metadata)?)?;
        Ok(())
    }
}

/// Rewrites the JSON header with sorted keys so equal parameters give equal
/// bytes. The padded header length is kept.
fn canonical_header(mut bytes: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte length prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n])?;
    let mut sorted = serde_json::to_vec(&header)?;
    if sorted.len() > n {
        return Err(Error::Model("safetensors header grew when sorted".into()));
    }
    sorted.resize(n, b' ');
    bytes[8..8 + n].copy_from_slice(&sorted);
    Ok(bytes)
}
