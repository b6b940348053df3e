//! Named-array files in the safetensors layout (JSON header with dtype and
//! shape per tensor, then little-endian data).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{HarnessError, Result};

/// One array to be written.
pub enum Array {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Array {
    fn bytes(&self) -> (Dtype, &[usize], Vec<u8>) {
        match self {
            Self::F64 { shape, data } => (Dtype::F64, shape, data.iter().flat_map(|v| v.to_le_bytes()).collect()),
            Self::U8 { shape, data } => (Dtype::U8, shape, data.clone()),
        }
    }
}

pub fn write_arrays(path: &Path, arrays: &BTreeMap<String, Array>, metadata: &BTreeMap<String, String>) -> Result<()> {
    let encoded: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(k, a)| {
            let (dt, shape, bytes) = a.bytes();
            (k.clone(), dt, shape.to_vec(), bytes)
        })
        .collect();
    let views = encoded
        .iter()
        .map(|(k, dt, shape, bytes)| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| HarnessError::format(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| HarnessError::format(path, e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// Contents of a named-array file.
pub struct ArrayFile {
    path: std::path::PathBuf,
    bytes: Vec<u8>,
}

impl ArrayFile {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        SafeTensors::deserialize(&bytes).map_err(|e| HarnessError::format(path, e.to_string()))?;
        Ok(Self {
            path: path.to_path_buf(),
            bytes,
        })
    }

    fn tensors(&self) -> SafeTensors<'_> {
        SafeTensors::deserialize(&self.bytes).expect("validated on open")
    }

    pub fn metadata(&self) -> Result<BTreeMap<String, String>> {
        let (_, meta) = SafeTensors::read_metadata(&self.bytes).map_err(|e| HarnessError::format(&self.path, e.to_string()))?;
        Ok(meta.metadata().clone().unwrap_or_default().into_iter().collect())
    }

    pub fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = self.tensors().names().into_iter().cloned().collect();
        n.sort();
        n
    }

    fn view(&self, name: &str, dtype: Dtype) -> Result<(Vec<usize>, Vec<u8>)> {
        let t = self.tensors();
        let v = t
            .tensor(name)
            .map_err(|_| HarnessError::format(&self.path, format!("missing tensor `{name}`")))?;
        if v.dtype() != dtype {
            return Err(HarnessError::format(&self.path, format!("tensor `{name}` has dtype {:?}, expected {dtype:?}", v.dtype())));
        }
        Ok((v.shape().to_vec(), v.data().to_vec()))
    }

    pub fn f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (shape, bytes) = self.view(name, Dtype::F64)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok((shape, data))
    }

    pub fn u8(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        self.view(name, Dtype::U8)
    }
}
