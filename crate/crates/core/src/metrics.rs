//! Transfer difficulty, class separability, accuracy and harmonic mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Base,
    Novel,
}

/// One side of a base-to-novel experiment. Sample labels index `class_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSplit<S> {
    pub kind: SplitKind,
    pub samples: Vec<S>,
    pub class_ids: Vec<usize>,
}

/// Relative transfer difficulty `1 / (C · precision)`, where precision is the
/// zero-shot top-1 accuracy.
pub fn rtd(num_classes: usize, zero_shot_precision: f64) -> Result<f64> {
    if num_classes == 0 {
        return Err(Error::Input("rtd needs at least one class".into()));
    }
    if !(zero_shot_precision > 0.0) {
        return Err(Error::DivisionDomain(format!(
            "rtd with precision {zero_shot_precision}"
        )));
    }
    if zero_shot_precision > 1.0 {
        return Err(Error::Range {
            what: "precision must lie in (0, 1]",
            value: zero_shot_precision,
        });
    }
    Ok(1.0 / (num_classes as f64 * zero_shot_precision))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub intra: f64,
    pub inter: f64,
    pub ratio: f64,
}

/// Mean cosine similarity over same-class and cross-class unordered pairs
/// (self-pairs excluded) and their ratio.
pub fn separability_ratio(features: &[Tensor], labels: &[usize]) -> Result<Separability> {
    if features.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let (mut intra_sum, mut intra_n) = (0.0, 0usize);
    let (mut inter_sum, mut inter_n) = (0.0, 0usize);
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let s = cosine_similarity(&features[i], &features[j])?;
            if labels[i] == labels[j] {
                intra_sum += s;
                intra_n += 1;
            } else {
                inter_sum += s;
                inter_n += 1;
            }
        }
    }
    if inter_n == 0 {
        return Err(Error::Input(
            "separability needs at least two classes".into(),
        ));
    }
    if intra_n == 0 {
        return Err(Error::Input(
            "separability needs two samples in some class".into(),
        ));
    }
    let intra = intra_sum / intra_n as f64;
    let inter = inter_sum / inter_n as f64;
    if inter <= 0.0 {
        return Err(Error::DivisionDomain(format!(
            "mean inter-class similarity {inter} is not positive"
        )));
    }
    Ok(Separability {
        intra,
        inter,
        ratio: intra / inter,
    })
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `2ab / (a + b)`; works on fractions or percentages alike.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    let sum = base + novel;
    if sum == 0.0 {
        return Err(Error::DivisionDomain("harmonic mean of zeros".into()));
    }
    // Ordered operands keep the result symmetric; equal ones give exactly x.
    let (lo, hi) = if base <= novel { (base, novel) } else { (novel, base) };
    Ok(hi * (2.0 * lo / sum))
}
