//! Synthetic multi-modality datasets, in memory or on disk.
//!
//! Disk layout:
//! ```text
//! <root>/manifest.json
//! <root>/<subject>/<modality>/<slice>.zt
//! <root>/<subject>/label/<slice>.zt
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zeus_core::synth::{generate_volume_with, slice_volume, split_subjects, ModalityStack, SyntheticVolume, VolumeDims};
use zeus_core::{Error, Tensor};

use crate::config::DataConfig;
use crate::error::{read_file, write_file, Result, ZeusError};
use crate::zt::{self, Dtype};

pub const MANIFEST: &str = "manifest.json";
pub const LABEL_DIR: &str = "label";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub modalities: Vec<String>,
    pub slices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<SubjectEntry>,
    pub seed: u64,
    pub dims: VolumeDims,
}

/// Which subjects belong to which split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

pub fn subject_id(i: usize) -> String {
    format!("subject-{i:03}")
}

/// Seed of subject `i`, derived from the dataset seed.
pub fn subject_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Renders subject `i`. Voxels are rounded to `f32` precision so a
/// dataset written to disk reloads bit-identically.
pub fn synthesize_subject(cfg: &DataConfig, i: usize) -> Result<SyntheticVolume> {
    let mut v = generate_volume_with(subject_seed(cfg.seed, i), cfg.modalities, cfg.volume, &cfg.synth)?;
    v.voxels = v.voxels.map(|x| x as f32 as f64);
    Ok(v)
}

pub fn synthesize_stacks(cfg: &DataConfig, i: usize) -> Result<Vec<ModalityStack>> {
    Ok(slice_volume(&synthesize_subject(cfg, i)?, &subject_id(i), cfg.drop_empty))
}

/// Subject indices of each split.
pub fn split_indices(n: usize, seed: u64, split: Split) -> Vec<usize> {
    let (tr, va, te) = split_subjects(n, seed);
    match split {
        Split::Train => tr,
        Split::Val => va,
        Split::Test => te,
    }
}

/// Where stacks come from: rendered on demand or read from a data directory.
#[derive(Debug, Clone)]
pub enum Source {
    Synthetic(DataConfig),
    Disk { root: PathBuf, manifest: Manifest },
}

impl Source {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = read_manifest(root)?;
        Ok(Source::Disk { root: root.to_path_buf(), manifest })
    }

    pub fn subject_count(&self) -> usize {
        match self {
            Source::Synthetic(c) => c.subjects,
            Source::Disk { manifest, .. } => manifest.subjects.len(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Source::Synthetic(c) => c.seed,
            Source::Disk { manifest, .. } => manifest.seed,
        }
    }

    pub fn stacks(&self, i: usize) -> Result<Vec<ModalityStack>> {
        match self {
            Source::Synthetic(c) => synthesize_stacks(c, i),
            Source::Disk { root, manifest } => {
                let entry = manifest
                    .subjects
                    .get(i)
                    .ok_or_else(|| Error::Input(format!("subject index {i} out of range")))?;
                load_subject(root, entry)
            }
        }
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        split_indices(self.subject_count(), self.seed(), split)
    }
}

pub fn slice_path(root: &Path, subject: &str, dir: &str, slice: usize) -> PathBuf {
    root.join(subject).join(dir).join(format!("{slice:03}.zt"))
}

/// Writes the whole dataset and its manifest under `root`.
pub fn write_dataset(root: &Path, cfg: &DataConfig) -> Result<Manifest> {
    let mut subjects = Vec::with_capacity(cfg.subjects);
    for i in 0..cfg.subjects {
        let stacks = synthesize_stacks(cfg, i)?;
        let id = subject_id(i);
        let names = stacks.first().map(|s| s.modality_names.clone()).unwrap_or_default();
        for (k, st) in stacks.iter().enumerate() {
            for (img, name) in st.images.iter().zip(&st.modality_names) {
                let [_, h, w] = img.shape() else { unreachable!("stack images are [1, H, W]") };
                zt::write(&slice_path(root, &id, name, k), &img.clone().reshape(&[*h, *w])?, Dtype::F32)?;
            }
            zt::write(&slice_path(root, &id, LABEL_DIR, k), &st.label, Dtype::U8)?;
        }
        subjects.push(SubjectEntry { id, modalities: names, slices: stacks.len() });
    }
    let manifest = Manifest { subjects, seed: cfg.seed, dims: cfg.volume };
    write_file(&root.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&read_file(&root.join(MANIFEST))?)?)
}

pub fn load_subject(root: &Path, entry: &SubjectEntry) -> Result<Vec<ModalityStack>> {
    (0..entry.slices)
        .map(|k| {
            let label_path = slice_path(root, &entry.id, LABEL_DIR, k);
            let label = zt::read(&label_path)?;
            let images = entry
                .modalities
                .iter()
                .map(|m| {
                    let path = slice_path(root, &entry.id, m, k);
                    let img = zt::read(&path)?;
                    if img.shape() != label.shape() {
                        return Err(ZeusError::format(path, format!("shape {:?} differs from label", img.shape())));
                    }
                    let (h, w) = (img.shape()[0], img.shape()[1]);
                    Ok(img.reshape(&[1, h, w])?)
                })
                .collect::<Result<Vec<Tensor>>>()?;
            Ok(ModalityStack {
                images,
                label,
                modality_names: entry.modalities.clone(),
                subject_id: entry.id.clone(),
                slice_index: k,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            subjects: 3,
            modalities: 2,
            volume: VolumeDims { depth: 2, height: 16, width: 16 },
            ..Default::default()
        }
    }

    #[test]
    fn subject_seeds_differ() {
        assert_ne!(subject_seed(0, 0), subject_seed(0, 1));
        assert_ne!(subject_seed(0, 0), subject_seed(1, 0));
    }

    #[test]
    fn disk_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let manifest = write_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(manifest.subjects.len(), 3);
        assert_eq!(manifest.subjects[0].modalities, ["T1", "T1-Gd"]);
        let disk = Source::open(dir.path()).unwrap();
        let mem = Source::Synthetic(cfg);
        for i in 0..3 {
            let (a, b) = (disk.stacks(i).unwrap(), mem.stacks(i).unwrap());
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.images, y.images);
                assert_eq!(x.label, y.label);
                assert_eq!(x.subject_id, y.subject_id);
            }
        }
        assert_eq!(disk.split(Split::Test), mem.split(Split::Test));
    }
}
