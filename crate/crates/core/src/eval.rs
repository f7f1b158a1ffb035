//! Per-class AUROC, validation reports, and the max-validation-AUC model
//! selection rule.

use std::path::Path;

use crate::config::{ModelConfig, CLASS_NAMES};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::SwinModel;
use crate::tensor::no_grad;

/// Area under the ROC curve by the rank formulation: the probability that a
/// random positive outscores a random negative, ties counted half. Requires
/// at least one example of each class.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auroc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // average ranks across tie groups, then sum the positives' ranks
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Per-class AUROC over one split. Classes whose labels are single-valued in
/// the split have no defined AUC; they are `None` here and excluded from the
/// mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub epoch: usize,
    pub per_class: Vec<Option<f64>>,
    pub mean_auc: f64,
}

impl EvalReport {
    pub fn from_scores(
        split: impl Into<String>,
        epoch: usize,
        scores: &[Vec<f64>],
        labels: &[Vec<u8>],
    ) -> Result<Self> {
        let per_class: Vec<Option<f64>> = scores
            .iter()
            .zip(labels)
            .map(|(s, l)| match auroc(s, l) {
                Ok(v) => Ok(Some(v)),
                Err(Error::UndefinedAuc) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        let mean_auc = mean_of_defined(&per_class);
        Ok(EvalReport {
            split: split.into(),
            epoch,
            per_class,
            mean_auc,
        })
    }

    /// Classes with no defined AUC on this split (single-class labels).
    pub fn undefined_classes(&self) -> Vec<&'static str> {
        self.per_class
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.is_none().then(|| CLASS_NAMES[i]))
            .collect()
    }
}

pub fn mean_of_defined(per_class: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Run inference over the batches and score every class. Inference builds no
/// backward graph and leaves the model untouched.
pub fn evaluate(
    model: &SwinModel,
    config: &ModelConfig,
    batches: &[Batch],
    split: &str,
    epoch: usize,
) -> Result<EvalReport> {
    let classes = config.num_classes;
    let mut scores = vec![Vec::new(); classes];
    let mut labels = vec![Vec::new(); classes];
    for batch in batches {
        let probs = no_grad(|| model.forward_probs(&batch.images, config))?;
        let b = batch.images.shape()[0];
        for i in 0..b {
            for c in 0..classes {
                scores[c].push(probs.data()[i * classes + c]);
                labels[c].push(batch.labels.data()[i * classes + c] as u8);
            }
        }
    }
    EvalReport::from_scores(split, epoch, &scores, &labels)
}

/// The epoch whose validation mean AUC is maximal; ties go to the earliest.
pub fn select_best_epoch(val_mean_auc: &[f64]) -> Result<usize> {
    if val_mean_auc.is_empty() {
        return Err(Error::Data("empty history: no epochs to select".into()));
    }
    let mut best = 0;
    for (i, &v) in val_mean_auc.iter().enumerate() {
        if v > val_mean_auc[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Write a report table: one row per pathology plus a Mean row, one column
/// per named report. Undefined entries print as NA.
pub fn write_report_csv(path: impl AsRef<Path>, columns: &[(String, EvalReport)]) -> Result<()> {
    let mut out = String::from("pathology");
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, class) in CLASS_NAMES.iter().enumerate() {
        out.push_str(class);
        for (_, report) in columns {
            match report.per_class.get(i).copied().flatten() {
                Some(v) => out.push_str(&format!(",{v:.6}")),
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out.push_str("Mean");
    for (_, report) in columns {
        out.push_str(&format!(",{:.6}", report.mean_auc));
    }
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}
