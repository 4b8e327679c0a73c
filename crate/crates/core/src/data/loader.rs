//! Paired high/low-resolution samples prepared once and batched per epoch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::compute_normalization;
use super::image_ops::{bicubic_resize, prepare_student_input, ChannelStats, FloatImage};
use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::exec;
use crate::network::INPUT_CHANNELS;
use crate::tensor::{Scalar, Tensor};

/// What to do when an image listed in the manifest cannot be read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    FailFast,
    SkipWithWarning,
}

#[derive(Clone, Debug)]
pub struct LoaderOptions {
    pub input_size: (usize, usize),
    pub missing: MissingPolicy,
}

/// Teacher images, student images and labels for one step; row `k` of each belongs together.
#[derive(Clone, Debug)]
pub struct DistillationBatch<T> {
    pub hr_images: Tensor<T>,
    pub lr_images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Dataset positions of the rows.
    pub indices: Vec<usize>,
    pub flipped: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct PairedDataset<T> {
    input_size: (usize, usize),
    hr: Vec<T>,
    lr: Vec<T>,
    labels: Vec<usize>,
    names: Vec<String>,
}

impl<T: Scalar> PairedDataset<T> {
    /// Builds a dataset from `(n, 3, h, w)` tensors.
    pub fn from_tensors(hr: &Tensor<T>, lr: &Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if hr.rank() != 4 || hr.shape() != lr.shape() || hr.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "paired tensors {:?} / {:?} with {} labels",
                hr.shape(),
                lr.shape(),
                labels.len()
            )));
        }
        let (_, c, h, w) = hr.dims4();
        if c != INPUT_CHANNELS {
            return Err(Error::Shape(format!("expected {INPUT_CHANNELS} channels, got {c}")));
        }
        Ok(PairedDataset {
            input_size: (h, w),
            hr: hr.data().to_vec(),
            lr: lr.data().to_vec(),
            names: (0..labels.len()).map(|i| format!("#{i}")).collect(),
            labels,
        })
    }

    /// Loads and prepares one split. Teacher inputs are the high-resolution
    /// images resized to the network input; student inputs are the stored
    /// low-resolution images upscaled and blurred. Both use the manifest's
    /// normalisation (computed from the training split when absent).
    pub fn load(manifest: &DatasetManifest, split: Split, options: &LoaderOptions) -> Result<Self> {
        manifest.validate()?;
        let header = &manifest.header;
        if header.lr_root.is_none() {
            return Err(Error::Dataset("manifest has no low-resolution images; run prepare-data".into()));
        }
        let spec = header.degradation.clone().unwrap_or_default();
        let stats = normalization_of(manifest)?;
        let records: Vec<_> = manifest.split(split).collect();
        let size = options.input_size;
        let prepared = exec::map_indices(records.len(), |i| -> Result<(Vec<T>, Vec<T>)> {
            let r = records[i];
            let lr_path = manifest
                .lr_path(r)
                .ok_or_else(|| Error::Dataset(format!("{}: no low-resolution path", r.relative_path)))?;
            let hr = FloatImage::load(&manifest.hr_path(r))?;
            let hr = stats.normalize(&bicubic_resize(&hr, size)?)?;
            let lr = FloatImage::load(&lr_path)?;
            let lr = prepare_student_input(&lr, size, &spec, Some(&stats))?;
            let cast = |img: FloatImage| img.data.into_iter().map(T::from_f64).collect();
            Ok((cast(hr), cast(lr)))
        });
        let mut out = PairedDataset {
            input_size: size,
            hr: Vec::new(),
            lr: Vec::new(),
            labels: Vec::new(),
            names: Vec::new(),
        };
        for (r, p) in records.iter().zip(prepared) {
            match p {
                Ok((hr, lr)) => {
                    out.hr.extend(hr);
                    out.lr.extend(lr);
                    out.labels.push(r.label_index);
                    out.names.push(r.relative_path.clone());
                }
                Err(e) if options.missing == MissingPolicy::SkipWithWarning => {
                    log::warn!("skipping {}: {e}", r.relative_path);
                }
                Err(e) => return Err(e),
            }
        }
        if out.labels.is_empty() {
            return Err(Error::Dataset(format!("{split} split has no loadable records")));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    fn per_sample(&self) -> usize {
        INPUT_CHANNELS * self.input_size.0 * self.input_size.1
    }

    /// Sample order and flip decisions of one epoch; a pure function of `(seed, epoch)`.
    pub fn epoch_plan(&self, epoch: usize, seed: u64, augment: bool) -> (Vec<usize>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        let flips = order.iter().map(|_| augment && rng.random_bool(0.5)).collect();
        (order, flips)
    }

    /// Shuffled training batches of one epoch; the last batch may be short.
    pub fn batches(
        &self,
        epoch: usize,
        batch_size: usize,
        seed: u64,
        augment: bool,
    ) -> impl Iterator<Item = DistillationBatch<T>> + Send + '_ {
        let (order, flips) = self.epoch_plan(epoch, seed, augment);
        self.assemble(order, flips, batch_size)
    }

    /// Dataset-order batches without augmentation.
    pub fn ordered_batches(&self, batch_size: usize) -> impl Iterator<Item = DistillationBatch<T>> + Send + '_ {
        self.assemble((0..self.len()).collect(), vec![false; self.len()], batch_size)
    }

    fn assemble(
        &self,
        order: Vec<usize>,
        flips: Vec<bool>,
        batch_size: usize,
    ) -> impl Iterator<Item = DistillationBatch<T>> + Send + '_ {
        let batch_size = batch_size.max(1);
        let n_batches = order.len().div_ceil(batch_size);
        (0..n_batches).map(move |b| {
            let idx = &order[b * batch_size..((b + 1) * batch_size).min(order.len())];
            let flip = &flips[b * batch_size..b * batch_size + idx.len()];
            let gather = |src: &[T]| {
                let per = self.per_sample();
                let mut out = Vec::with_capacity(idx.len() * per);
                for (&i, &f) in idx.iter().zip(flip) {
                    let s = &src[i * per..(i + 1) * per];
                    if f {
                        for row in s.chunks(self.input_size.1) {
                            out.extend(row.iter().rev());
                        }
                    } else {
                        out.extend_from_slice(s);
                    }
                }
                let shape = [idx.len(), INPUT_CHANNELS, self.input_size.0, self.input_size.1];
                Tensor::from_vec(&shape, out).expect("gathered batch matches its shape")
            };
            DistillationBatch {
                hr_images: gather(&self.hr),
                lr_images: gather(&self.lr),
                labels: idx.iter().map(|&i| self.labels[i]).collect(),
                indices: idx.to_vec(),
                flipped: flip.to_vec(),
            }
        })
    }
}

/// Loads the training split and returns epoch `epoch`'s batches.
pub fn load_paired_batches<T: Scalar>(
    manifest: &DatasetManifest,
    options: &LoaderOptions,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    augment: bool,
) -> Result<Vec<DistillationBatch<T>>> {
    let data = PairedDataset::<T>::load(manifest, Split::Train, options)?;
    Ok(data.batches(epoch, batch_size, seed, augment).collect())
}

/// The manifest's normalisation, computed from the training split when absent.
pub fn normalization_of(manifest: &DatasetManifest) -> Result<ChannelStats> {
    match &manifest.header.normalization {
        Some(s) => Ok(s.clone()),
        None => compute_normalization(manifest),
    }
}
