use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::profile::LongTailProfile;
use super::split::{split_by_shot, ShotSplit};
use crate::error::{Error, Result};

/// Labelled samples stored row-major as 32-bit floats.
///
/// Known labels are `0..K`; open labels are disjoint from them (the generators
/// use `K..K+Z`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub known_labels: BTreeSet<usize>,
    pub open_labels: BTreeSet<usize>,
    pub info: DatasetInfo,
}

/// Provenance recorded alongside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub generator: String,
    pub seed: u64,
    pub stream: u64,
    pub profile: Option<LongTailProfile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    dtype: String,
    blob: String,
    sample_shape: Vec<usize>,
    num_samples: usize,
    labels: Vec<usize>,
    known_labels: Vec<usize>,
    open_labels: Vec<usize>,
    class_counts: Vec<(usize, usize)>,
    splits: ShotSplit,
    info: DatasetInfo,
}

const FORMAT: &str = "oltr-dataset/1";

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.features[i * n..(i + 1) * n]
    }

    pub fn num_known(&self) -> usize {
        self.known_labels.len()
    }

    pub fn is_open(&self, label: usize) -> bool {
        self.open_labels.contains(&label)
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Indices of samples per label.
    pub fn indices_by_label(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut by = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            by.entry(l).or_insert_with(Vec::new).push(i);
        }
        by
    }

    /// Shot split from the known-class counts of this (training) set.
    pub fn shot_split(&self) -> ShotSplit {
        let counts = self
            .class_counts()
            .into_iter()
            .filter(|(l, _)| self.known_labels.contains(l))
            .collect();
        split_by_shot(&counts)
    }

    pub fn check(&self) -> Result<()> {
        if self.features.len() != self.labels.len() * self.sample_len() {
            return Err(Error::invalid(format!(
                "dataset has {} values for {} samples of shape {:?}",
                self.features.len(),
                self.labels.len(),
                self.sample_shape
            )));
        }
        if !self.known_labels.is_disjoint(&self.open_labels) {
            return Err(Error::invalid("known and open labels overlap"));
        }
        if let Some(&l) = self
            .labels
            .iter()
            .find(|l| !self.known_labels.contains(l) && !self.open_labels.contains(l))
        {
            return Err(Error::invalid(format!("label {l} is neither known nor open")));
        }
        Ok(())
    }

    /// Writes `<stem>.json` (header) and `<stem>.bin` (little-endian f32 rows).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.check()?;
        fs::create_dir_all(dir)?;
        let blob = format!("{stem}.bin");
        let header = Header {
            format: FORMAT.into(),
            dtype: "f32le".into(),
            blob: blob.clone(),
            sample_shape: self.sample_shape.clone(),
            num_samples: self.len(),
            labels: self.labels.clone(),
            known_labels: self.known_labels.iter().copied().collect(),
            open_labels: self.open_labels.iter().copied().collect(),
            class_counts: self.class_counts().into_iter().collect(),
            splits: self.shot_split(),
            info: self.info.clone(),
        };
        let mut bytes = Vec::with_capacity(self.features.len() * 4);
        for v in &self.features {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&blob), bytes)?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&header)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Dataset> {
        let header: Header = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if header.format != FORMAT || header.dtype != "f32le" {
            return Err(Error::invalid(format!(
                "unsupported dataset format {} / {}",
                header.format, header.dtype
            )));
        }
        let bytes = fs::read(dir.join(&header.blob))?;
        let expected = header.num_samples * header.sample_shape.iter().product::<usize>() * 4;
        if bytes.len() != expected || header.labels.len() != header.num_samples {
            return Err(Error::invalid(format!(
                "dataset blob {} has {} bytes, expected {expected}",
                header.blob,
                bytes.len()
            )));
        }
        let features = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ds = Dataset {
            sample_shape: header.sample_shape,
            features,
            labels: header.labels,
            known_labels: header.known_labels.into_iter().collect(),
            open_labels: header.open_labels.into_iter().collect(),
            info: header.info,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Restriction to the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            known_labels: self.known_labels.clone(),
            open_labels: self.open_labels.clone(),
            info: self.info.clone(),
        }
    }

    /// Concatenation of two datasets with the same sample shape.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.sample_shape != other.sample_shape {
            return Err(Error::invalid(
                "cannot concatenate datasets with different sample shapes",
            ));
        }
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        out.known_labels.extend(&other.known_labels);
        out.open_labels.extend(&other.open_labels);
        Ok(out)
    }
}
