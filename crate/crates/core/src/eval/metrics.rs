use serde::Serialize;

use crate::error::{Error, Result};

/// `K × K` pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

/// Result of an mIoU computation.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MiouReport {
    /// Per-class IoU (`None` for classes absent from both truth and
    /// prediction) and their mean over present classes.
    Evaluated { per_class: Vec<Option<f64>>, miou: f64 },
    /// Every pixel was ignored; the mean is undefined.
    NoEvaluatedPixels,
}

impl MiouReport {
    pub fn miou(&self) -> Option<f64> {
        match self {
            Self::Evaluated { miou, .. } => Some(*miou),
            Self::NoEvaluatedPixels => None,
        }
    }
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds pixel pairs; labels equal to `ignore` are skipped.
    pub fn add(&mut self, preds: &[usize], labels: &[usize], ignore: Option<usize>) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::Dimension {
                op: "confusion",
                lhs: vec![preds.len()],
                rhs: vec![labels.len()],
            });
        }
        let k = self.num_classes;
        for (&p, &t) in preds.iter().zip(labels) {
            if Some(t) == ignore {
                continue;
            }
            for v in [t, p] {
                if v >= k {
                    return Err(Error::InvalidLabel {
                        label: v,
                        num_classes: k,
                    });
                }
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(mut self, other: &Self) -> Self {
        assert_eq!(self.num_classes, other.num_classes, "merging matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    /// `IoU_k = TP / (TP + FP + FN)`, averaged over classes present in truth
    /// or prediction.
    pub fn report(&self) -> MiouReport {
        if self.total() == 0 {
            return MiouReport::NoEvaluatedPixels;
        }
        let k = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let truth: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..k).map(|t| self.get(t, c)).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        MiouReport::Evaluated { per_class, miou }
    }
}

/// mIoU of predicted class maps against labels in one call.
pub fn miou(preds: &[usize], labels: &[usize], num_classes: usize, ignore: Option<usize>) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(preds, labels, ignore)?;
    Ok(cm.report())
}

/// Index of the largest logit per row of `K` values (first wins on ties).
pub fn argmax_rows(logits: &[f64], k: usize) -> Vec<usize> {
    logits
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
