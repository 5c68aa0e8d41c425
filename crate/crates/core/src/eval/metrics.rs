use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of positions where `predictions` matches `truth`.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(Error::Metric(format!(
            "accuracy needs equal nonempty inputs, got {} predictions and {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / predictions.len() as f64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `100 * sigma / mean` with the population standard deviation.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Metric(format!(
            "coefficient of variation needs at least 2 values, got {}",
            values.len()
        )));
    }
    let mu = mean(values);
    if mu.is_nan() || mu <= 0.0 {
        return Err(Error::Metric(format!(
            "coefficient of variation needs a positive mean, got {mu}"
        )));
    }
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / values.len() as f64;
    Ok(100.0 * var.sqrt() / mu)
}

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(Vec<Vec<u64>>);

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        ConfusionMatrix(vec![vec![0; num_classes]; num_classes])
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Metric("confusion matrix must be square and nonempty".into()));
        }
        Ok(ConfusionMatrix(rows))
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.0
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.0[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.0.len()).map(|i| self.0[i][i]).sum()
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        self.0[row].iter().sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Metric("accuracy of an empty confusion matrix".into())),
            n => Ok(self.trace() as f64 / n as f64),
        }
    }
}

pub fn confusion_matrix(predictions: &[usize], truth: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(num_classes);
    for (&p, &t) in predictions.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Metric(format!(
                "class index out of range for {num_classes} classes: truth {t}, predicted {p}"
            )));
        }
        m.0[t][p] += 1;
    }
    Ok(m)
}

/// A row left out of the cross-fold mean because it had no items.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedRow {
    pub fold: usize,
    pub row: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConfusion {
    pub values: Vec<Vec<f64>>,
    pub excluded: Vec<ExcludedRow>,
}

/// Row-normalizes each matrix, then averages elementwise across matrices.
/// Rows with no items in a given matrix do not contribute to that row's mean.
pub fn normalize_and_average(matrices: &[ConfusionMatrix]) -> Result<NormalizedConfusion> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Metric("no confusion matrices to average".into()))?;
    let k = first.num_classes();
    if matrices.iter().any(|m| m.num_classes() != k) {
        return Err(Error::Metric("confusion matrices differ in shape".into()));
    }
    let mut values = vec![vec![0.0; k]; k];
    let mut excluded = Vec::new();
    for row in 0..k {
        let mut used = 0usize;
        for (fold, m) in matrices.iter().enumerate() {
            let n = m.row_sum(row);
            if n == 0 {
                excluded.push(ExcludedRow { fold, row });
                continue;
            }
            used += 1;
            for col in 0..k {
                values[row][col] += m.get(row, col) as f64 / n as f64;
            }
        }
        if used == 0 {
            return Err(Error::Metric(format!("row {row} is empty in every matrix")));
        }
        values[row].iter_mut().for_each(|v| *v /= used as f64);
    }
    excluded.sort_by_key(|e| (e.fold, e.row));
    Ok(NormalizedConfusion { values, excluded })
}
