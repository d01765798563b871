//! Confusion-matrix accounting and the summary indicators derived from it.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `K x K` counts; entry `(i, j)` counts samples of true class `i + 1`
/// predicted as class `j + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::InvalidShape {
                op: "confusion matrix",
                shape: vec![classes, classes],
                reason: format!("{} counts supplied", counts.len()),
            });
        }
        Ok(Self { classes, counts })
    }

    pub fn from_predictions(classes: usize, preds: &[usize], labels: &[usize]) -> Result<Self> {
        let mut cm = Self::new(classes);
        cm.accumulate(preds, labels)?;
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Count for 1-based `(truth, predicted)`.
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[(truth - 1) * self.classes + predicted - 1]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn accumulate(&mut self, preds: &[usize], labels: &[usize]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion accumulate",
                lhs: vec![preds.len()],
                rhs: vec![labels.len()],
            });
        }
        let k = self.classes;
        if let Some(&bad) = preds.iter().chain(labels).find(|&&v| v == 0 || v > k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        for (&p, &t) in preds.iter().zip(labels) {
            self.counts[(t - 1) * k + p - 1] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "confusion merge",
                lhs: vec![self.classes],
                rhs: vec![other.classes],
            });
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i * self.classes + i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.counts[i * self.classes + j]).sum()
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Empty("confusion matrix")),
            n => Ok(n as f64),
        }
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        Ok(self.trace() as f64 / self.nonempty()?)
    }

    /// Per-class recall; `None` for classes absent from the reference.
    pub fn per_class_accuracy(&self) -> Result<Vec<Option<f64>>> {
        self.nonempty()?;
        Ok((0..self.classes)
            .map(|i| {
                let row = self.row_sum(i);
                (row > 0).then(|| self.counts[i * self.classes + i] as f64 / row as f64)
            })
            .collect())
    }

    /// Mean per-class accuracy over classes present in the reference.
    pub fn average_accuracy(&self) -> Result<f64> {
        let present: Vec<f64> = self.per_class_accuracy()?.into_iter().flatten().collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Cohen's kappa; 0 when chance agreement is 1.
    pub fn kappa(&self) -> Result<f64> {
        let n = self.nonempty()?;
        let p_o = self.trace() as f64 / n;
        let p_e = (0..self.classes)
            .map(|i| self.row_sum(i) as f64 * self.col_sum(i) as f64)
            .sum::<f64>()
            / (n * n);
        if p_e == 1.0 {
            return Ok(0.0);
        }
        Ok((p_o - p_e) / (1.0 - p_e))
    }

    /// Per-class F1 (0 when precision and recall are both 0 or undefined).
    pub fn f1_scores(&self) -> Result<Vec<f64>> {
        self.nonempty()?;
        Ok((0..self.classes)
            .map(|i| {
                let tp = self.counts[i * self.classes + i] as f64;
                let (col, row) = (self.col_sum(i) as f64, self.row_sum(i) as f64);
                let p = if col > 0.0 { tp / col } else { 0.0 };
                let r = if row > 0.0 { tp / row } else { 0.0 };
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            })
            .collect())
    }

    /// Mean F1 over classes present in the reference.
    pub fn f1_macro(&self) -> Result<f64> {
        let f1 = self.f1_scores()?;
        let present: Vec<f64> = (0..self.classes).filter(|&i| self.row_sum(i) > 0).map(|i| f1[i]).collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn report(&self) -> Result<Report> {
        Ok(Report {
            per_class: self.per_class_accuracy()?,
            class_counts: (0..self.classes).map(|i| self.row_sum(i)).collect(),
            overall: self.overall_accuracy()?,
            average: self.average_accuracy()?,
            kappa: self.kappa()?,
            f1: self.f1_macro()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub per_class: Vec<Option<f64>>,
    pub class_counts: Vec<u64>,
    pub overall: f64,
    pub average: f64,
    pub kappa: f64,
    pub f1: f64,
}

impl Report {
    /// Aligned table: one row per class, then OA, AA, Kappa, F1 (percent).
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<8} {:>8} {:>10}\n", "Class", "Samples", "Accuracy");
        for (i, (acc, n)) in self.per_class.iter().zip(&self.class_counts).enumerate() {
            let acc = acc.map_or_else(|| "absent".to_string(), |a| format!("{:.2}", 100.0 * a));
            writeln!(out, "{:<8} {:>8} {:>10}", i + 1, n, acc).expect("write to string");
        }
        for (name, v) in self.summary() {
            writeln!(out, "{:<8} {:>8} {:>10.2}", name, "", 100.0 * v).expect("write to string");
        }
        out
    }

    /// `metric,samples,value` rows with fractional values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,samples,value\n");
        for (i, (acc, n)) in self.per_class.iter().zip(&self.class_counts).enumerate() {
            let acc = acc.map_or_else(String::new, |a| format!("{a:.6}"));
            writeln!(out, "class{},{n},{acc}", i + 1).expect("write to string");
        }
        let total: u64 = self.class_counts.iter().sum();
        for (name, v) in self.summary() {
            writeln!(out, "{name},{total},{v:.6}").expect("write to string");
        }
        out
    }

    fn summary(&self) -> [(&'static str, f64); 4] {
        [("OA", self.overall), ("AA", self.average), ("Kappa", self.kappa), ("F1", self.f1)]
    }
}
