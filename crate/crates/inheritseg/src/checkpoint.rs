//! Bit-exact parameter checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use inheritseg_core::nets::{Architecture, DiscriminatorParams, ParamTensors, SegmentationParams};

use crate::error::{HarnessError, Result};
use crate::tensors::{Array, ArrayFile};

fn add<P: ParamTensors>(prefix: &str, params: &P, out: &mut BTreeMap<String, Array>) {
    for (name, t) in params.tensors() {
        out.insert(
            format!("{prefix}.{name}"),
            Array::F64 {
                shape: vec![t.len()],
                data: t.clone(),
            },
        );
    }
}

fn fill<P: ParamTensors>(file: &ArrayFile, prefix: &str, params: &mut P, path: &Path) -> Result<()> {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let (_, data) = file.f64(&format!("{prefix}.{name}"))?;
        if data.len() != t.len() {
            return Err(HarnessError::format(path, format!("`{prefix}.{name}` has {} values, expected {}", data.len(), t.len())));
        }
        t.copy_from_slice(&data);
    }
    Ok(())
}

/// Parameters stored in one checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SegmentationParams,
    pub discriminator: Option<DiscriminatorParams>,
    /// Free-form key/value pairs (config text, epoch, step).
    pub metadata: BTreeMap<String, String>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut arrays = BTreeMap::new();
    add("model", &ckpt.model, &mut arrays);
    if let Some(d) = &ckpt.discriminator {
        add("disc", d, &mut arrays);
    }
    crate::tensors::write_arrays(path, &arrays, &ckpt.metadata)
}

pub fn load_checkpoint(path: &Path, arch: &Architecture) -> Result<Checkpoint> {
    let file = ArrayFile::open(path)?;
    let mut model = arch.zero_segmentation();
    fill(&file, "model", &mut model, path)?;
    let discriminator = if file.names().iter().any(|n| n.starts_with("disc.")) {
        let mut d = arch.zero_discriminator();
        fill(&file, "disc", &mut d, path)?;
        Some(d)
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        discriminator,
        metadata: file.metadata()?,
    })
}
