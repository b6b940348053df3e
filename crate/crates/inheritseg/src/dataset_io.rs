//! On-disk dataset: `manifest.json` plus one array file per sample.

use std::collections::BTreeMap;
use std::path::Path;

use inheritseg_core::datagen::{DatasetBundle, LabelMap, LabeledSample, ModalityProfile};
use inheritseg_core::Tensor3;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::tensors::{write_arrays, Array, ArrayFile};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub base_intensity: Vec<f64>,
    pub gamma: f64,
    pub gain: f64,
    pub offset: f64,
    pub class_jitter: f64,
    pub bias_field_amplitude: f64,
    pub noise_sigma: f64,
}

impl From<&ModalityProfile> for ProfileRecord {
    fn from(p: &ModalityProfile) -> Self {
        Self {
            base_intensity: p.base_intensity.clone(),
            gamma: p.transfer.gamma,
            gain: p.transfer.gain,
            offset: p.transfer.offset,
            class_jitter: p.class_jitter,
            bias_field_amplitude: p.bias_field_amplitude,
            noise_sigma: p.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub unseen: Vec<usize>,
    pub seen: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub data_seed: u64,
    pub direction: String,
    pub prior_profile: ProfileRecord,
    pub target_profile: ProfileRecord,
    pub prior_files: Vec<String>,
    pub mirror_files: Vec<String>,
}

fn image_array(t: &Tensor3) -> Array {
    Array::F64 {
        shape: vec![t.channels(), t.height(), t.width()],
        data: t.as_slice().to_vec(),
    }
}

fn label_array(l: &LabelMap) -> Array {
    Array::U8 {
        shape: vec![l.height(), l.width()],
        data: l.indices().into_iter().map(|i| i as u8).collect(),
    }
}

fn write_sample(path: &Path, sample: &LabeledSample, seen: Option<&[usize]>) -> Result<()> {
    let mut arrays = BTreeMap::new();
    arrays.insert("image".to_string(), image_array(&sample.image));
    arrays.insert("label".to_string(), label_array(&sample.label));
    if let Some(seen) = seen {
        let s = sample.label.seen_view(seen);
        arrays.insert(
            "seen_label".to_string(),
            Array::U8 {
                shape: vec![s.mask.channels(), s.mask.height(), s.mask.width()],
                data: s.mask.as_slice().iter().map(|&v| v as u8).collect(),
            },
        );
    }
    write_arrays(path, &arrays, &BTreeMap::new())
}

fn read_sample(path: &Path, names: &[String]) -> Result<LabeledSample> {
    let f = ArrayFile::open(path)?;
    let (shape, data) = f.f64("image")?;
    let [c, h, w] = <[usize; 3]>::try_from(shape).map_err(|_| HarnessError::format(path, "image must be 3-D"))?;
    let image = Tensor3::from_vec(c, h, w, data)?;
    let (lshape, ldata) = f.u8("label")?;
    if lshape != [h, w] {
        return Err(HarnessError::format(path, "label shape differs from image"));
    }
    let idx: Vec<usize> = ldata.into_iter().map(usize::from).collect();
    let label = LabelMap::from_indices(h, w, &idx, names.to_vec())?;
    Ok(LabeledSample { image, label })
}

/// Writes the bundle; existing files in `dir` are overwritten.
pub fn write_bundle(
    dir: &Path,
    bundle: &DatasetBundle,
    data_seed: u64,
    direction: &str,
    prior_profile: &ModalityProfile,
    target_profile: &ModalityProfile,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let prior_files: Vec<String> = (0..bundle.prior.len()).map(|i| format!("prior_{i:04}.safetensors")).collect();
    let mirror_files: Vec<String> = (0..bundle.mirror.len()).map(|i| format!("target_{i:04}.safetensors")).collect();
    for (s, f) in bundle.prior.iter().zip(&prior_files) {
        write_sample(&dir.join(f), s, None)?;
    }
    for (s, f) in bundle.mirror.iter().zip(&mirror_files) {
        write_sample(&dir.join(f), s, Some(&bundle.seen))?;
    }
    let first = bundle.mirror.first().ok_or(inheritseg_core::Error::EmptySplit)?;
    let manifest = Manifest {
        class_names: bundle.class_names.clone(),
        height: first.label.height(),
        width: first.label.width(),
        unseen: bundle.unseen.clone(),
        seen: bundle.seen.clone(),
        train: bundle.train.clone(),
        test: bundle.test.clone(),
        data_seed,
        direction: direction.to_string(),
        prior_profile: prior_profile.into(),
        target_profile: target_profile.into(),
        prior_files,
        mirror_files,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_bundle(dir: &Path) -> Result<(Manifest, DatasetBundle)> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| HarnessError::format(&path, e.to_string()))?;
    let load = |files: &[String]| files.iter().map(|f| read_sample(&dir.join(f), &m.class_names)).collect::<Result<Vec<_>>>();
    let prior = load(&m.prior_files)?;
    let mirror = load(&m.mirror_files)?;
    if m.train.iter().chain(&m.test).any(|&i| i >= mirror.len()) {
        return Err(HarnessError::format(&path, "split index out of range"));
    }
    let bundle = DatasetBundle {
        class_names: m.class_names.clone(),
        prior,
        mirror,
        unseen: m.unseen.clone(),
        seen: m.seen.clone(),
        train: m.train.clone(),
        test: m.test.clone(),
    };
    Ok((m, bundle))
}
