//! Named-tensor checkpoints: a raw little-endian tensor file `<stem>.bin`
//! plus a JSON manifest `<stem>.json` giving names, shapes, offsets (in
//! elements), dtype and free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::lora::{Adapters, LoraAdapter};
use super::matrix::Matrix;
use super::mlp::{Activation, Layer, MlpParams};
use crate::error::{Result, RlpoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    dtype: Dtype,
    ordering: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    pub meta: serde_json::Value,
}

pub fn bin_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".bin")
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".json")
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn ck_err(path: &Path, reason: impl Into<String>) -> RlpoError {
    RlpoError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| ck_err(Path::new(name), "tensor missing from checkpoint"))
    }

    pub fn write(&self, stem: &Path, dtype: Dtype) -> Result<()> {
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(ck_err(stem, format!("tensor {} shape/data mismatch", t.name)));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += t.data.len();
            for v in &t.data {
                match dtype {
                    Dtype::F32 => bytes.extend_from_slice(&(*v as f32).to_le_bytes()),
                    Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let manifest = Manifest {
            dtype,
            ordering: "row-major".into(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        fs::write(bin_path(stem), bytes)?;
        fs::write(manifest_path(stem), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Checkpoint> {
        let mpath = manifest_path(stem);
        let bpath = bin_path(stem);
        let text = fs::read_to_string(&mpath).map_err(|e| ck_err(&mpath, e.to_string()))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| ck_err(&mpath, e.to_string()))?;
        let bytes = fs::read(&bpath).map_err(|e| ck_err(&bpath, e.to_string()))?;
        let width = manifest.dtype.width();
        if bytes.len() % width != 0 {
            return Err(ck_err(&bpath, "length is not a whole number of elements"));
        }
        let values: Vec<f64> = match manifest.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset + n > values.len() {
                return Err(ck_err(&bpath, format!("tensor {} runs past end of file", e.name)));
            }
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data: values[e.offset..e.offset + n].to_vec(),
            });
        }
        Ok(Checkpoint {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn push_mlp(&mut self, prefix: &str, params: &MlpParams) {
        for (i, l) in params.layers.iter().enumerate() {
            self.push(
                format!("{prefix}.layer{i}.weight"),
                vec![l.weight.rows, l.weight.cols],
                l.weight.data.clone(),
            );
            self.push(format!("{prefix}.layer{i}.bias"), vec![l.bias.len()], l.bias.clone());
        }
    }

    /// Rebuild an MLP from `prefix.layer{i}.*` tensors and the given
    /// per-layer activations (layer order).
    pub fn mlp(&self, prefix: &str, activations: &[Activation]) -> Result<MlpParams> {
        let mut layers = Vec::with_capacity(activations.len());
        for (i, &activation) in activations.iter().enumerate() {
            let w = self.require(&format!("{prefix}.layer{i}.weight"))?;
            let b = self.require(&format!("{prefix}.layer{i}.bias"))?;
            if w.shape.len() != 2 {
                return Err(ck_err(Path::new(&w.name), "weight must be 2-d"));
            }
            layers.push(Layer {
                weight: Matrix::from_vec(w.shape[0], w.shape[1], w.data.clone())?,
                bias: b.data.clone(),
                activation,
            });
        }
        let p = MlpParams { layers };
        p.validate()?;
        Ok(p)
    }

    pub fn push_adapters(&mut self, prefix: &str, adapters: &Adapters) {
        for (k, ad) in adapters {
            self.push(format!("{prefix}.{k}.a"), vec![ad.a.rows, ad.a.cols], ad.a.data.clone());
            self.push(format!("{prefix}.{k}.b"), vec![ad.b.rows, ad.b.cols], ad.b.data.clone());
        }
    }

    pub fn adapters(&self, prefix: &str, scales: &BTreeMap<usize, f64>) -> Result<Adapters> {
        let mut out = Adapters::new();
        for (&k, &scale) in scales {
            let a = self.require(&format!("{prefix}.{k}.a"))?;
            let b = self.require(&format!("{prefix}.{k}.b"))?;
            out.insert(
                k,
                LoraAdapter {
                    a: Matrix::from_vec(a.shape[0], a.shape[1], a.data.clone())?,
                    b: Matrix::from_vec(b.shape[0], b.shape[1], b.data.clone())?,
                    scale,
                },
            );
        }
        Ok(out)
    }
}

pub fn activations_of(params: &MlpParams) -> Vec<Activation> {
    params.layers.iter().map(|l| l.activation).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn f32_round_trip_is_bit_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = MlpParams::init(&[6, 5, 3], Activation::Relu, &mut rng_for(3, &[])).unwrap();
        let rounded: Vec<f64> = p.to_flat().iter().map(|v| *v as f32 as f64).collect();
        p.set_flat(&rounded).unwrap();
        let mut ck = Checkpoint::default();
        ck.push_mlp("net", &p);
        ck.meta = serde_json::json!({"note": "x"});
        let stem = dir.path().join("probe");
        ck.write(&stem, Dtype::F32).unwrap();
        let back = Checkpoint::read(&stem).unwrap();
        let q = back.mlp("net", &activations_of(&p)).unwrap();
        assert_eq!(p, q);
        assert_eq!(back.meta["note"], "x");
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = MlpParams::init(&[4, 7, 2], Activation::Relu, &mut rng_for(9, &[])).unwrap();
        let mut ck = Checkpoint::default();
        ck.push_mlp("q", &p);
        let stem = dir.path().join("qnet");
        ck.write(&stem, Dtype::F64).unwrap();
        assert_eq!(Checkpoint::read(&stem).unwrap().mlp("q", &activations_of(&p)).unwrap(), p);
    }

    #[test]
    fn truncated_file_is_diagnosed() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::default();
        ck.push("t", vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let stem = dir.path().join("c");
        ck.write(&stem, Dtype::F64).unwrap();
        let b = bin_path(&stem);
        let bytes = std::fs::read(&b).unwrap();
        std::fs::write(&b, &bytes[..16]).unwrap();
        let err = Checkpoint::read(&stem).unwrap_err();
        assert!(err.to_string().contains("past end"), "{err}");
        assert!(Checkpoint::read(&dir.path().join("missing")).is_err());
    }
}
