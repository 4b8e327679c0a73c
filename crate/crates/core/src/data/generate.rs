//! Source scanning, stratified splitting and low-resolution fabrication.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_ops::{degrade, ChannelStats, DegradationSpec, FloatImage};
use super::manifest::{DatasetManifest, ManifestHeader, ManifestRecord, Split, MANIFEST_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::exec;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<String>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_owned))
        .collect())
}

fn relative(path: &Path, root: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Builds a manifest from `<root>/<split>/<class>/<image>` or, when no
/// `train`/`test` directories exist, from `<root>/<class>/<image>` with a
/// seeded stratified split holding out `test_fraction` of each class.
pub fn scan_source(root: &Path, test_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("source directory {} does not exist", root.display())));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
    }
    let top = subdirs(root)?;
    let presplit = top.iter().any(|d| d == "train") && top.iter().any(|d| d == "test");
    let splits: Vec<(Option<Split>, PathBuf)> = if presplit {
        vec![(Some(Split::Train), root.join("train")), (Some(Split::Test), root.join("test"))]
    } else {
        vec![(None, root.to_path_buf())]
    };
    let mut class_names: Vec<String> = Vec::new();
    for (_, dir) in &splits {
        for c in subdirs(dir)? {
            if !class_names.contains(&c) {
                class_names.push(c);
            }
        }
    }
    class_names.sort();
    if class_names.len() < 2 {
        return Err(Error::Dataset(format!(
            "{}: found {} class directories, need at least 2",
            root.display(),
            class_names.len()
        )));
    }
    let mut records = Vec::new();
    for (split, dir) in &splits {
        for (label, class) in class_names.iter().enumerate() {
            let class_dir = dir.join(class);
            if !class_dir.is_dir() {
                continue;
            }
            for p in sorted_entries(&class_dir)?.into_iter().filter(|p| is_image(p)) {
                records.push(ManifestRecord {
                    relative_path: relative(&p, root),
                    label_index: label,
                    split: split.unwrap_or(Split::Train),
                    lr_relative_path: None,
                });
            }
        }
    }
    let first = records
        .first()
        .ok_or_else(|| Error::Dataset(format!("{}: no images found", root.display())))?;
    let first_path = root.join(&first.relative_path);
    let (w, h) = image::image_dimensions(&first_path).map_err(|e| super::image_ops::image_error(&first_path, e))?;
    if !presplit {
        stratified_split(&mut records, test_fraction, seed);
    }
    let m = DatasetManifest {
        header: ManifestHeader {
            schema_version: MANIFEST_SCHEMA_VERSION,
            class_names,
            hr_size: h.min(w) as usize,
            lr_size: None,
            hr_root: root.to_path_buf(),
            lr_root: None,
            normalization: None,
            degradation: None,
            provenance: None,
        },
        records,
    };
    m.validate()?;
    Ok(m)
}

/// Marks `round(n * test_fraction)` records of every class as test, chosen by a seeded shuffle.
pub fn stratified_split(records: &mut [ManifestRecord], test_fraction: f64, seed: u64) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label_index).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            records[i].split = if k < n_test { Split::Test } else { Split::Train };
        }
    }
}

/// Per-channel statistics of the high-resolution training images.
pub fn compute_normalization(manifest: &DatasetManifest) -> Result<ChannelStats> {
    let train: Vec<&ManifestRecord> = manifest.split(Split::Train).collect();
    let images = exec::map_indices(train.len(), |i| FloatImage::load(&manifest.hr_path(train[i])));
    let images = images.into_iter().collect::<Result<Vec<_>>>()?;
    ChannelStats::from_images(&images)
}

/// `<root>_lr<target>` next to the source root.
pub fn default_lr_root(hr_root: &Path, target: usize) -> PathBuf {
    let name = hr_root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    hr_root.with_file_name(format!("{name}_lr{target}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct GenerationReport {
    pub manifest: DatasetManifest,
    pub failures: Vec<GenerationFailure>,
}

/// Degrades every source image to `spec.target_size` and writes it as PNG
/// under `out_dir`, mirroring the source layout. Unreadable sources are
/// reported and skipped; an empty result is an error.
pub fn generate_lr_dataset(src: &DatasetManifest, spec: &DegradationSpec, out_dir: &Path) -> Result<GenerationReport> {
    spec.validate()?;
    src.validate()?;
    if spec.target_size >= src.header.hr_size {
        return Err(Error::Config(format!(
            "target size {} must be below the source size {}",
            spec.target_size, src.header.hr_size
        )));
    }
    let outcomes = exec::map_indices(src.records.len(), |i| -> Result<String> {
        let r = &src.records[i];
        let hr = FloatImage::load(&src.hr_path(r))?;
        let lr = degrade(&hr, spec)?;
        let rel = Path::new(&r.relative_path).with_extension("png");
        let rel = relative(&rel, Path::new(""));
        lr.save_png(&out_dir.join(&rel))?;
        Ok(rel)
    });
    let mut records = Vec::with_capacity(src.records.len());
    let mut failures = Vec::new();
    for (r, outcome) in src.records.iter().zip(outcomes) {
        match outcome {
            Ok(rel) => records.push(ManifestRecord {
                lr_relative_path: Some(rel),
                ..r.clone()
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", r.relative_path);
                failures.push(GenerationFailure {
                    path: src.hr_path(r),
                    message: e.to_string(),
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "no low-resolution images were produced ({} failures)",
            failures.len()
        )));
    }
    let header = ManifestHeader {
        lr_size: Some(spec.target_size),
        lr_root: Some(out_dir.to_path_buf()),
        degradation: Some(spec.clone()),
        ..src.header.clone()
    };
    Ok(GenerationReport {
        manifest: DatasetManifest { header, records },
        failures,
    })
}
