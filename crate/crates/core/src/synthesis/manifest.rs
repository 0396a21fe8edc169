//! On-disk record of the synthetic dataset.
//!
//! Layout under one directory:
//!
//! ```text
//! images/r01_t08_i000.png   one lossless file per record
//! records.csv               path,label,harvest_t,round,teacher_confidence,lca_applied,seed
//! manifest.json             config hash, per-class counts, validity flag
//! ```
//!
//! `manifest.json` is written last with `valid: true`; if any write fails the
//! manifest is left marked invalid. All content is deterministic given the
//! run config and seed (no timestamps), so identical runs produce
//! byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{load_image, save_image, ImageDataset};
use crate::error::{Error, Result};

/// One harvested image still in memory.
#[derive(Debug, Clone)]
pub struct HarvestedImage {
    /// Decoded predicted-clean image, `[C,H,W]`.
    pub image: Array3<f64>,
    pub label: usize,
    pub harvest_t: usize,
    pub round: usize,
    pub teacher_confidence: f64,
    pub lca_applied: bool,
    pub seed: u64,
}

/// One line of `records.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub path: String,
    pub label: usize,
    pub harvest_t: usize,
    pub round: usize,
    pub teacher_confidence: f64,
    pub lca_applied: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub config_hash: String,
    pub count: usize,
    pub rounds: usize,
    pub per_class_counts: Vec<usize>,
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticManifest {
    pub root: PathBuf,
    pub meta: ManifestMeta,
    pub records: Vec<SyntheticRecord>,
}

const RECORDS_HEADER: &str = "path,label,harvest_t,round,teacher_confidence,lca_applied,seed";

impl SyntheticManifest {
    /// Write images, records and metadata. On any failure the metadata is
    /// (best-effort) marked invalid before the error propagates.
    pub fn write(
        root: &Path,
        config_hash: &str,
        num_classes: usize,
        rounds: usize,
        harvested: &[HarvestedImage],
    ) -> Result<SyntheticManifest> {
        match Self::write_inner(root, config_hash, num_classes, rounds, harvested) {
            Ok(m) => Ok(m),
            Err(e) => {
                let meta = ManifestMeta {
                    config_hash: config_hash.to_string(),
                    count: 0,
                    rounds,
                    per_class_counts: vec![0; num_classes],
                    valid: false,
                };
                if let Ok(json) = serde_json::to_string_pretty(&meta) {
                    let _ = fs::write(root.join("manifest.json"), json);
                }
                Err(e)
            }
        }
    }

    fn write_inner(
        root: &Path,
        config_hash: &str,
        num_classes: usize,
        rounds: usize,
        harvested: &[HarvestedImage],
    ) -> Result<SyntheticManifest> {
        fs::create_dir_all(root.join("images"))?;
        let mut records = Vec::with_capacity(harvested.len());
        let mut csv = String::from(RECORDS_HEADER);
        csv.push('\n');
        let mut per_class = vec![0usize; num_classes];
        let mut index_in_key = std::collections::BTreeMap::<(usize, usize), usize>::new();
        for h in harvested {
            if h.label >= num_classes {
                return Err(Error::Manifest(format!(
                    "record label {} outside [0, {num_classes})",
                    h.label
                )));
            }
            if !h.image.iter().all(|v| v.is_finite()) {
                return Err(Error::Manifest(format!(
                    "non-finite image in round {} at t={}",
                    h.round, h.harvest_t
                )));
            }
            let idx = index_in_key.entry((h.round, h.harvest_t)).or_insert(0);
            let rel = format!("images/r{:02}_t{:02}_i{:03}.png", h.round, h.harvest_t, idx);
            *idx += 1;
            save_image(&root.join(&rel), h.image.view())?;
            per_class[h.label] += 1;
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                rel, h.label, h.harvest_t, h.round, h.teacher_confidence, h.lca_applied, h.seed
            ));
            records.push(SyntheticRecord {
                path: rel,
                label: h.label,
                harvest_t: h.harvest_t,
                round: h.round,
                teacher_confidence: h.teacher_confidence,
                lca_applied: h.lca_applied,
                seed: h.seed,
            });
        }
        fs::write(root.join("records.csv"), csv)?;
        let meta = ManifestMeta {
            config_hash: config_hash.to_string(),
            count: records.len(),
            rounds,
            per_class_counts: per_class,
            valid: true,
        };
        fs::write(
            root.join("manifest.json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(SyntheticManifest {
            root: root.to_path_buf(),
            meta,
            records,
        })
    }

    pub fn load(root: &Path) -> Result<SyntheticManifest> {
        let meta: ManifestMeta =
            serde_json::from_slice(&fs::read(root.join("manifest.json")).map_err(|e| {
                Error::Manifest(format!("missing manifest at {}: {e}", root.display()))
            })?)?;
        if !meta.valid {
            return Err(Error::Manifest(format!(
                "manifest at {} is marked invalid",
                root.display()
            )));
        }
        let text = fs::read_to_string(root.join("records.csv"))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == RECORDS_HEADER => {}
            other => {
                return Err(Error::Manifest(format!(
                    "bad records header: {other:?}"
                )))
            }
        }
        let mut records = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 7 {
                return Err(Error::Manifest(format!("bad record line: {line}")));
            }
            records.push(SyntheticRecord {
                path: parts[0].to_string(),
                label: parse(parts[1], line)?,
                harvest_t: parse(parts[2], line)?,
                round: parse(parts[3], line)?,
                teacher_confidence: parse(parts[4], line)?,
                lca_applied: parse(parts[5], line)?,
                seed: parse(parts[6], line)?,
            });
        }
        if records.len() != meta.count {
            return Err(Error::Manifest(format!(
                "manifest count {} != {} records",
                meta.count,
                records.len()
            )));
        }
        Ok(SyntheticManifest {
            root: root.to_path_buf(),
            meta,
            records,
        })
    }

    /// Read the record images back as a dataset for distillation.
    pub fn load_as_dataset(&self, num_classes: usize) -> Result<ImageDataset> {
        if self.records.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "manifest at {} has no records",
                self.root.display()
            )));
        }
        let first = load_image(&self.root.join(&self.records[0].path))?;
        let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
        let mut images = ndarray::Array4::zeros((self.records.len(), c, h, w));
        let mut labels = Vec::with_capacity(self.records.len());
        for (i, rec) in self.records.iter().enumerate() {
            let img = if i == 0 {
                first.clone()
            } else {
                load_image(&self.root.join(&rec.path))?
            };
            images.index_axis_mut(ndarray::Axis(0), i).assign(&img);
            labels.push(rec.label);
        }
        Ok(ImageDataset {
            images,
            labels,
            num_classes,
        })
    }
}

fn parse<T: std::str::FromStr>(s: &str, line: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Manifest(format!("cannot parse field {s:?} in line: {line}")))
}
