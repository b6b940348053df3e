use alloc::string::String;
use alloc::vec::Vec;

use super::{generate_anatomy, normalize, render_modality, LabeledSample, Layout, ModalityProfile, SeenLabels};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};

const STREAM_ANATOMY_A: u64 = 0x1_0000;
const STREAM_RENDER_A: u64 = 0x2_0000;
const STREAM_ANATOMY_B: u64 = 0x3_0000;
const STREAM_RENDER_B: u64 = 0x4_0000;
const STREAM_SPLIT: u64 = 0x5_0000;

#[derive(Debug, Clone, PartialEq)]
pub struct BundleConfig {
    /// Fully labeled samples of the prior modality.
    pub n_prior: usize,
    /// Samples of the second modality (split 80/20 into train/test).
    pub n_target: usize,
    pub layout: Layout,
    pub profile_prior: ModalityProfile,
    pub profile_target: ModalityProfile,
    /// Structure indices (never 0) left unannotated in the second modality.
    pub unseen: Vec<usize>,
    pub seed: u64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            n_prior: 40,
            n_target: 40,
            layout: Layout::abdominal(),
            profile_prior: ModalityProfile::modality_a(),
            profile_target: ModalityProfile::modality_b(),
            unseen: alloc::vec![1],
            seed: 0,
        }
    }
}

/// Prior set `D_p`, mirror set `D_m` and the seen/unseen partition that
/// defines the restricted view `D_s` of `D_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub class_names: Vec<String>,
    pub prior: Vec<LabeledSample>,
    pub mirror: Vec<LabeledSample>,
    pub unseen: Vec<usize>,
    pub seen: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetBundle {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Seen-class labels of mirror sample `i` (the `D_s` view).
    pub fn seen_labels(&self, i: usize) -> SeenLabels {
        self.mirror[i].label.seen_view(&self.seen)
    }

    pub fn mirror_train(&self) -> Vec<&LabeledSample> {
        self.train.iter().map(|&i| &self.mirror[i]).collect()
    }

    pub fn mirror_test(&self) -> Vec<&LabeledSample> {
        self.test.iter().map(|&i| &self.mirror[i]).collect()
    }

    /// True when no structure is unseen.
    pub fn fully_supervised(&self) -> bool {
        self.unseen.is_empty()
    }
}

/// Splits structure indices `1..classes` into (seen, unseen), validating the
/// unseen set.
pub fn partition_classes(classes: usize, unseen: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut unseen_sorted: Vec<usize> = unseen.to_vec();
    unseen_sorted.sort_unstable();
    unseen_sorted.dedup();
    if unseen_sorted.contains(&0) {
        return Err(Error::Invalid("background can never be unseen".into()));
    }
    if let Some(&c) = unseen_sorted.iter().find(|&&c| c >= classes) {
        return Err(Error::Invalid(alloc::format!("unseen class {c} out of range")));
    }
    let seen: Vec<usize> = (1..classes).filter(|c| !unseen_sorted.contains(c)).collect();
    if seen.is_empty() {
        return Err(Error::NoSeenClasses);
    }
    Ok((seen, unseen_sorted))
}

fn make_sample(layout: &Layout, profile: &ModalityProfile, anatomy_seed: u64, render_seed: u64) -> Result<LabeledSample> {
    let label = generate_anatomy(anatomy_seed, layout)?;
    let raw = render_modality(&label, profile, render_seed)?;
    Ok(LabeledSample {
        image: normalize(&raw)?,
        label,
    })
}

pub fn build_bundle(config: &BundleConfig) -> Result<DatasetBundle> {
    if config.n_prior < 5 || config.n_target < 5 {
        return Err(Error::Invalid("both modalities need at least 5 samples".into()));
    }
    let classes = config.layout.classes();
    if config.profile_prior.classes() != classes || config.profile_target.classes() != classes {
        return Err(Error::Invalid("profiles must list one intensity per class".into()));
    }
    let (seen, unseen) = partition_classes(classes, &config.unseen)?;
    let prior = (0..config.n_prior)
        .map(|i| {
            make_sample(
                &config.layout,
                &config.profile_prior,
                derive_seed(config.seed, STREAM_ANATOMY_A + i as u64),
                derive_seed(config.seed, STREAM_RENDER_A + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mirror = (0..config.n_target)
        .map(|i| {
            make_sample(
                &config.layout,
                &config.profile_target,
                derive_seed(config.seed, STREAM_ANATOMY_B + i as u64),
                derive_seed(config.seed, STREAM_RENDER_B + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..config.n_target).collect();
    SeededRng::new(derive_seed(config.seed, STREAM_SPLIT)).shuffle(&mut order);
    let n_train = (config.n_target * 4 + 2) / 5;
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(DatasetBundle {
        class_names: config.layout.class_names(),
        prior,
        mirror,
        unseen,
        seen,
        train,
        test,
    })
}
