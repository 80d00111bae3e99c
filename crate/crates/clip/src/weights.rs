//! Named tensor storage and conversion into tower parameters.

use std::collections::HashMap;
use std::path::Path;

use half::{bf16, f16};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use safetensors::{Dtype, SafeTensors};

use crate::ops::{BatchNorm, Conv2d, LayerNorm, Linear, Mlp, ResidualBlock, SelfAttention};
use crate::{ClipError, Real, Result};

/// Flat `f32` tensors keyed by state-dict name.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    tensors: HashMap<String, ArrayD<f32>>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_safetensors_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ClipError::Io { path: path.to_owned(), source })?;
        Self::from_safetensors_bytes(&bytes)
    }

    pub fn from_safetensors_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes)?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let data = view.data();
            let values: Vec<f32> = match view.dtype() {
                Dtype::F32 => data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                Dtype::F16 => data.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
                Dtype::BF16 => data.chunks_exact(2).map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
                Dtype::F64 => data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32).collect(),
                // batch-norm counters and similar integer buffers are not needed
                Dtype::I64 | Dtype::I32 => continue,
                other => {
                    return Err(ClipError::UnsupportedDtype { name, dtype: format!("{other:?}") });
                }
            };
            let array = ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|_| ClipError::BadShape {
                name: name.clone(),
                actual: view.shape().to_vec(),
                expected: "element count matching shape".into(),
            })?;
            tensors.insert(name, array);
        }
        Ok(Self { tensors })
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors.get(name).ok_or_else(|| ClipError::MissingTensor(name.to_owned()))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(self.get(name)?.shape())
    }

    pub fn scalar<F: Real>(&self, name: &str) -> Result<F> {
        let t = self.get(name)?;
        match t.iter().next() {
            Some(&v) if t.len() == 1 => Ok(F::of_f32(v)),
            _ => Err(bad_shape(name, t.shape(), "scalar")),
        }
    }

    pub fn vector<F: Real>(&self, name: &str) -> Result<Array1<F>> {
        let t = self.get(name)?;
        if t.ndim() != 1 {
            return Err(bad_shape(name, t.shape(), "rank 1"));
        }
        Ok(t.iter().map(|&v| F::of_f32(v)).collect())
    }

    pub fn matrix<F: Real>(&self, name: &str) -> Result<Array2<F>> {
        let t = self.get(name)?;
        if t.ndim() != 2 {
            return Err(bad_shape(name, t.shape(), "rank 2"));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        Ok(Array2::from_shape_vec((r, c), t.iter().map(|&v| F::of_f32(v)).collect()).unwrap())
    }

    /// Rank-4 conv kernel flattened to `(out, in * kh * kw)`.
    pub fn conv_kernel<F: Real>(&self, name: &str) -> Result<(Array2<F>, usize, usize)> {
        let t = self.get(name)?;
        let s = t.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(bad_shape(name, s, "(out, in, k, k)"));
        }
        let flat: Vec<F> = t.iter().map(|&v| F::of_f32(v)).collect();
        let weight = Array2::from_shape_vec((s[0], s[1] * s[2] * s[3]), flat).unwrap();
        Ok((weight, s[1], s[2]))
    }

    pub fn linear<F: Real>(&self, prefix: &str, bias: bool) -> Result<Linear<F>> {
        let weight = self.matrix(&format!("{prefix}.weight"))?;
        let bias = if bias { Some(self.vector(&format!("{prefix}.bias"))?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn layer_norm<F: Real>(&self, prefix: &str) -> Result<LayerNorm<F>> {
        Ok(LayerNorm {
            weight: self.vector(&format!("{prefix}.weight"))?,
            bias: self.vector(&format!("{prefix}.bias"))?,
            eps: F::from_f64(1e-5).unwrap(),
        })
    }

    pub fn conv<F: Real>(&self, name: &str, stride: usize, padding: usize) -> Result<Conv2d<F>> {
        let (weight, in_channels, kernel) = self.conv_kernel(name)?;
        Ok(Conv2d { weight, in_channels, kernel, stride, padding })
    }

    pub fn batch_norm<F: Real>(&self, prefix: &str) -> Result<BatchNorm<F>> {
        Ok(BatchNorm::from_stats(
            self.vector(&format!("{prefix}.weight"))?,
            self.vector(&format!("{prefix}.bias"))?,
            self.vector(&format!("{prefix}.running_mean"))?,
            self.vector(&format!("{prefix}.running_var"))?,
            F::from_f64(1e-5).unwrap(),
        ))
    }

    pub fn residual_block<F: Real>(&self, prefix: &str, heads: usize) -> Result<ResidualBlock<F>> {
        let in_proj = Linear {
            weight: self.matrix(&format!("{prefix}.attn.in_proj_weight"))?,
            bias: Some(self.vector(&format!("{prefix}.attn.in_proj_bias"))?),
        };
        Ok(ResidualBlock {
            ln_1: self.layer_norm(&format!("{prefix}.ln_1"))?,
            attn: SelfAttention { in_proj, out_proj: self.linear(&format!("{prefix}.attn.out_proj"), true)?, heads },
            ln_2: self.layer_norm(&format!("{prefix}.ln_2"))?,
            mlp: Mlp {
                c_fc: self.linear(&format!("{prefix}.mlp.c_fc"), true)?,
                c_proj: self.linear(&format!("{prefix}.mlp.c_proj"), true)?,
            },
        })
    }

    /// Number of consecutive `{prefix}.{i}.` groups starting at 0.
    pub fn count_indexed(&self, prefix: &str) -> usize {
        let mut n = 0;
        loop {
            let needle = format!("{prefix}.{n}.");
            if !self.tensors.keys().any(|k| k.starts_with(&needle)) {
                return n;
            }
            n += 1;
        }
    }
}

fn bad_shape(name: &str, actual: &[usize], expected: &str) -> ClipError {
    ClipError::BadShape { name: name.to_owned(), actual: actual.to_vec(), expected: expected.to_owned() }
}
