//! Confusion matrices and segmentation metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scan::{Class, IGNORE, NUM_CLASSES};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub ignored: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub per_class_iou: [f64; NUM_CLASSES],
    pub miou: f64,
    pub acc: f64,
    pub macc: f64,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::dim("accumulate", &[truth.len()], &[pred.len()]));
        }
        // validate first so a bad batch leaves the matrix untouched
        for (&t, &p) in truth.iter().zip(pred) {
            if (t as usize >= NUM_CLASSES && t != IGNORE) || p as usize >= NUM_CLASSES {
                return Err(Error::Index {
                    op: "accumulate",
                    index: if p as usize >= NUM_CLASSES { p as usize } else { t as usize },
                    limit: NUM_CLASSES,
                });
            }
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE {
                self.ignored += 1;
            } else {
                self.counts[t as usize][p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
        self.ignored += other.ignored;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// IoU per class (absent classes score 0 and still count toward mIoU),
    /// overall accuracy, and mean recall over classes with ground truth.
    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let mut per_class_iou = [0.0; NUM_CLASSES];
        let mut trace = 0u64;
        let mut recall_sum = 0.0;
        let mut recall_classes = 0usize;
        for k in 0..NUM_CLASSES {
            let tp = self.counts[k][k];
            let gt: u64 = self.counts[k].iter().sum();
            let predicted: u64 = self.counts.iter().map(|r| r[k]).sum();
            let union = gt + predicted - tp;
            per_class_iou[k] = if union == 0 { 0.0 } else { tp as f64 / union as f64 };
            trace += tp;
            if gt > 0 {
                recall_sum += tp as f64 / gt as f64;
                recall_classes += 1;
            }
        }
        Ok(Metrics {
            miou: per_class_iou.iter().sum::<f64>() / NUM_CLASSES as f64,
            acc: trace as f64 / total as f64,
            macc: recall_sum / recall_classes as f64,
            per_class_iou,
        })
    }
}

/// Column order of the final-results table.
pub const REPORT_CLASS_ORDER: [Class; NUM_CLASSES] = [
    Class::Ground,
    Class::Road,
    Class::Vegetation,
    Class::Structure,
    Class::Vehicle,
    Class::People,
    Class::Object,
    Class::Outlier,
];

impl Metrics {
    pub fn csv_header() -> String {
        let mut cols = vec!["miou".to_string(), "acc".into(), "macc".into()];
        cols.extend(REPORT_CLASS_ORDER.iter().map(|c| format!("iou_{}", c.name())));
        cols.join(",")
    }

    /// Percentages with two decimals, in [`REPORT_CLASS_ORDER`].
    pub fn csv_row(&self) -> String {
        let mut cols = vec![pct(self.miou), pct(self.acc), pct(self.macc)];
        cols.extend(REPORT_CLASS_ORDER.iter().map(|c| pct(self.per_class_iou[c.id() as usize])));
        cols.join(",")
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "mIoU {}%  Acc {}%  mAcc {}%\n",
            pct(self.miou),
            pct(self.acc),
            pct(self.macc)
        );
        for c in REPORT_CLASS_ORDER {
            s.push_str(&format!("  {:<11} IoU {}%\n", c.name(), pct(self.per_class_iou[c.id() as usize])));
        }
        s
    }
}

pub fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new();
        let t: Vec<u8> = (0..8).chain(0..8).collect();
        cm.accumulate(&t, &t).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(cm.counts[i][j], if i == j { 2 } else { 0 });
            }
        }
        let m = cm.metrics().unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.acc, 1.0);
        assert_eq!(m.macc, 1.0);
    }

    #[test]
    fn all_ignore_leaves_counts() {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[IGNORE; 5], &[3; 5]).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.ignored, 5);
        assert!(matches!(cm.metrics(), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let mut cm = ConfusionMatrix::new();
        assert!(cm.accumulate(&[9], &[0]).is_err());
        assert!(cm.accumulate(&[0], &[8]).is_err());
        assert!(cm.accumulate(&[0, 1], &[0]).is_err());
        assert_eq!(cm, ConfusionMatrix::new());
    }

    #[test]
    fn rare_class_with_no_hits_scores_zero_inside_the_mean() {
        // 14 people points, all predicted as vegetation
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[Class::People.id(); 14], &[Class::Vegetation.id(); 14]).unwrap();
        let others: Vec<u8> = [0u8, 1, 2, 4, 5, 6, 7].iter().flat_map(|&c| vec![c; 10]).collect();
        cm.accumulate(&others, &others).unwrap();
        let m = cm.metrics().unwrap();
        assert_eq!(m.per_class_iou[3], 0.0);
        let mean: f64 = m.per_class_iou.iter().sum::<f64>() / 8.0;
        assert_eq!(m.miou, mean);
        assert!(m.miou < 1.0);
        // the people class has ground truth, so recall 0 enters mAcc
        assert!((m.macc - 7.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn macc_skips_classes_without_ground_truth() {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[0, 0, 1], &[0, 1, 1]).unwrap();
        let m = cm.metrics().unwrap();
        assert!((m.macc - 0.75).abs() < 1e-15);
        assert!((m.acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_formatting() {
        assert_eq!(Metrics::csv_header().split(',').count(), 11);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        let row = cm.metrics().unwrap().csv_row();
        assert!(row.starts_with("25.00,100.00,100.00,100.00,100.00,0.00"), "{row}");
    }
}
