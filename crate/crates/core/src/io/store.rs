//! Directory layouts for generated datasets and pseudo-labels.
//!
//! ```text
//! dataset/
//!   data_config.json         DataConfig used to generate it
//!   manifest.json            ids, seeds and file names per split
//!   labeled/00000.image.pfm  .depth.pfm  .valid.pfm  [.sky.pfm]
//!   unlabeled/00000.image.pfm
//!   test/d1_00000.image.pfm  ...
//! pseudo/
//!   manifest.json            provenance per item
//!   00000.image.pfm  00000.disparity.pfm
//! ```
//!
//! Masks are stored as 0/1 maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pfm::{read_tensor, write_image, write_map};
use super::{create_dir, read_json, write_json};
use crate::error::{Error, Result};
use crate::synth::{DataConfig, Datasets, LabeledItem, TestSplit, UnlabeledItem};
use crate::tensor::{DepthMap, DepthSample, DisparityMap, Mask, Provenance, PseudoSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemEntry {
    pub id: usize,
    pub seed: u64,
    /// File stem relative to the split directory.
    pub stem: String,
    pub has_sky: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub domain: u32,
    pub items: Vec<ItemEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub labeled: Vec<ItemEntry>,
    pub unlabeled: Vec<ItemEntry>,
    pub test: Vec<TestEntry>,
}

fn read_mask(path: &Path) -> Result<Mask> {
    let t = read_tensor(path)?;
    let (h, w) = t.dims2()?;
    Mask::new(h, w, t.data().iter().map(|&v| v > 0.5).collect())
}

fn write_labeled(dir: &Path, stem: &str, s: &DepthSample) -> Result<()> {
    write_image(&dir.join(format!("{stem}.image.pfm")), &s.image)?;
    write_map(&dir.join(format!("{stem}.depth.pfm")), &s.depth.values)?;
    write_map(&dir.join(format!("{stem}.valid.pfm")), &s.depth.valid.to_tensor())?;
    if let Some(sky) = &s.sky {
        write_map(&dir.join(format!("{stem}.sky.pfm")), &sky.to_tensor())?;
    }
    Ok(())
}

fn read_labeled(dir: &Path, e: &ItemEntry) -> Result<LabeledItem> {
    let stem = &e.stem;
    let image = read_tensor(&dir.join(format!("{stem}.image.pfm")))?;
    let values = read_tensor(&dir.join(format!("{stem}.depth.pfm")))?;
    let valid = read_mask(&dir.join(format!("{stem}.valid.pfm")))?;
    let sky = if e.has_sky {
        Some(read_mask(&dir.join(format!("{stem}.sky.pfm")))?)
    } else {
        None
    };
    Ok(LabeledItem {
        id: e.id,
        seed: e.seed,
        sample: DepthSample::new(image, DepthMap::new(values, valid)?, sky)?,
    })
}

fn entry(id: usize, seed: u64, stem: String, has_sky: bool) -> ItemEntry {
    ItemEntry {
        id,
        seed,
        stem,
        has_sky,
    }
}

pub fn write_datasets(dir: &Path, config: &DataConfig, data: &Datasets) -> Result<()> {
    let (ld, ud, td) = (dir.join("labeled"), dir.join("unlabeled"), dir.join("test"));
    for d in [&ld, &ud, &td] {
        create_dir(d)?;
    }
    let mut manifest = DatasetManifest {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
    };
    for item in &data.labeled {
        let stem = format!("{:05}", item.id);
        write_labeled(&ld, &stem, &item.sample)?;
        manifest
            .labeled
            .push(entry(item.id, item.seed, stem, item.sample.sky.is_some()));
    }
    for item in &data.unlabeled {
        let stem = format!("{:05}", item.id);
        write_image(&ud.join(format!("{stem}.image.pfm")), &item.image)?;
        manifest.unlabeled.push(entry(item.id, item.seed, stem, false));
    }
    for split in &data.test {
        let mut items = Vec::new();
        for item in &split.items {
            let stem = format!("d{}_{:05}", split.domain, item.id);
            write_labeled(&td, &stem, &item.sample)?;
            items.push(entry(item.id, item.seed, stem, item.sample.sky.is_some()));
        }
        manifest.test.push(TestEntry {
            domain: split.domain,
            items,
        });
    }
    write_json(&dir.join("data_config.json"), config)?;
    write_json(&dir.join("manifest.json"), &manifest)
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ))
    }
}

pub fn read_datasets(dir: &Path) -> Result<(DataConfig, Datasets)> {
    require_dir(dir)?;
    let config: DataConfig = read_json(&dir.join("data_config.json"))?;
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let (ld, ud, td) = (dir.join("labeled"), dir.join("unlabeled"), dir.join("test"));
    let labeled = manifest
        .labeled
        .iter()
        .map(|e| read_labeled(&ld, e))
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = manifest
        .unlabeled
        .iter()
        .map(|e| {
            Ok(UnlabeledItem {
                id: e.id,
                seed: e.seed,
                image: read_tensor(&ud.join(format!("{}.image.pfm", e.stem)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = manifest
        .test
        .iter()
        .map(|t| {
            Ok(TestSplit {
                domain: t.domain,
                items: t.items.iter().map(|e| read_labeled(&td, e)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        config,
        Datasets {
            labeled,
            unlabeled,
            test,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    pub stem: String,
    pub provenance: Provenance,
}

pub fn write_pseudo(dir: &Path, items: &[PseudoSample]) -> Result<()> {
    create_dir(dir)?;
    let mut manifest = Vec::with_capacity(items.len());
    for (i, p) in items.iter().enumerate() {
        let stem = format!("{i:05}");
        write_image(&dir.join(format!("{stem}.image.pfm")), &p.image)?;
        write_map(&dir.join(format!("{stem}.disparity.pfm")), &p.pseudo_disparity.values)?;
        manifest.push(PseudoEntry {
            stem,
            provenance: p.provenance.clone(),
        });
    }
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Pseudo-labels come back at `f32` precision.
pub fn read_pseudo(dir: &Path) -> Result<Vec<PseudoSample>> {
    require_dir(dir)?;
    let manifest: Vec<PseudoEntry> = read_json(&dir.join("manifest.json"))?;
    manifest
        .into_iter()
        .map(|e| {
            let image = read_tensor(&dir.join(format!("{}.image.pfm", e.stem)))?;
            let values = read_tensor(&dir.join(format!("{}.disparity.pfm", e.stem)))?;
            let (h, w) = values.dims2()?;
            Ok(PseudoSample {
                image,
                pseudo_disparity: DisparityMap {
                    values,
                    valid: Mask::full(h, w, true),
                },
                provenance: e.provenance,
            })
        })
        .collect()
}
