//! Top-1 evaluation with a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Scalar;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Which side of the paired data a network is fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSide {
    /// Resized high-resolution images (teacher).
    Hr,
    /// Upscaled, blurred low-resolution images (student).
    Lr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    /// Percentage, `100 * trace / sample_count`.
    pub overall_accuracy: f64,
    /// Percentage per class; `None` for classes absent from the split.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion_matrix[true][predicted]`.
    pub confusion_matrix: Vec<Vec<u64>>,
    pub sample_count: u64,
    pub input: InputSide,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl EvaluationReport {
    pub fn from_predictions(num_classes: usize, labels: &[usize], predictions: &[usize], input: InputSide) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Internal(format!(
                "{} labels for {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Dataset("cannot evaluate on an empty split".into()));
        }
        let mut cm = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in labels.iter().zip(predictions) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Validation(format!("class index out of range for {num_classes} classes")));
            }
            cm[t][p] += 1;
        }
        let trace: u64 = (0..num_classes).map(|i| cm[i][i]).sum();
        let total = labels.len() as u64;
        let per_class = cm
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| 100.0 * row[i] as f64 / n as f64)
            })
            .collect();
        Ok(EvaluationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            overall_accuracy: 100.0 * trace as f64 / total as f64,
            per_class_accuracy: per_class,
            confusion_matrix: cm,
            sample_count: total,
            input,
            provenance: serde_json::Value::Null,
        })
    }

    pub fn trace(&self) -> u64 {
        (0..self.confusion_matrix.len()).map(|i| self.confusion_matrix[i][i]).sum()
    }
}

/// Single deterministic pass over `data` in dataset order.
pub fn evaluate<T: Scalar>(
    network: &Network<T>,
    data: &PairedDataset<T>,
    input: InputSide,
    batch_size: usize,
) -> Result<EvaluationReport> {
    let k = network.config.num_classes;
    if let Some(&bad) = data.labels().iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!(
            "dataset label {bad} does not exist in a {k}-class network"
        )));
    }
    let mut predictions = Vec::with_capacity(data.len());
    for batch in data.ordered_batches(batch_size) {
        let images = match input {
            InputSide::Hr => &batch.hr_images,
            InputSide::Lr => &batch.lr_images,
        };
        predictions.extend(network.predict(images)?);
    }
    EvaluationReport::from_predictions(k, data.labels(), &predictions, input)
}
