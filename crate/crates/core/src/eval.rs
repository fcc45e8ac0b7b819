//! Strict accuracy, accuracy matrices, average accuracy and backward transfer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::Model;
use crate::error::{Error, Result};

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `test` whose argmax over every observed relation is the
/// true label. The classifier width defines the observed relation set.
pub fn strict_accuracy(model: &Model, test: &[Sample]) -> Result<f64> {
    Ok(strict_predictions(model, test)?.0)
}

/// Strict accuracy together with the per-sample predicted class indices.
pub fn strict_predictions(model: &Model, test: &[Sample]) -> Result<(f64, Vec<usize>)> {
    if test.is_empty() {
        return Err(Error::contract("strict accuracy of an empty test set"));
    }
    let mut correct = 0usize;
    let mut predictions = Vec::with_capacity(test.len());
    for s in test {
        let label = model
            .class_of(s.relation)
            .ok_or_else(|| Error::contract(format!("test relation {} is not observed", s.relation)))?;
        let pred = argmax(&model.forward(s)?.logits);
        if pred == label {
            correct += 1;
        }
        predictions.push(pred);
    }
    Ok((correct as f64 / test.len() as f64, predictions))
}

/// Lower-triangular grid `ACC[j][i]` (0-based) of accuracy on task `i`'s
/// test set after training task `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    tasks: usize,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            rows: Vec::with_capacity(tasks),
            tasks,
        }
    }

    /// Builds a matrix from complete rows; row `j` must have `j + 1` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn completed(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Appends the row for the next task. Each row is written exactly once.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let j = self.rows.len();
        if j >= self.tasks {
            return Err(Error::contract("accuracy matrix is already full"));
        }
        if row.len() != j + 1 {
            return Err(Error::contract(format!("row {} needs {} entries, got {}", j + 1, j + 1, row.len())));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::contract("accuracies must lie in [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    /// `ACC_{j,i}` with 1-based indices.
    pub fn get(&self, j: usize, i: usize) -> Option<f64> {
        self.rows.get(j.checked_sub(1)?)?.get(i.checked_sub(1)?).copied()
    }

    /// Mean of row `j` (1-based).
    pub fn average_accuracy(&self, j: usize) -> Result<f64> {
        let row = j
            .checked_sub(1)
            .and_then(|k| self.rows.get(k))
            .ok_or_else(|| Error::contract(format!("row {j} is not populated")))?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Average accuracy after the last completed task.
    pub fn final_average(&self) -> Result<f64> {
        self.average_accuracy(self.rows.len())
    }

    /// Backward transfer over the full matrix; `None` when fewer than two
    /// tasks exist.
    pub fn bwt(&self) -> Result<Option<f64>> {
        let big_j = self.tasks;
        if self.rows.len() != big_j {
            return Err(Error::contract("backward transfer needs a full matrix"));
        }
        if big_j < 2 {
            return Ok(None);
        }
        let last = &self.rows[big_j - 1];
        let sum: f64 = (0..big_j - 1).map(|i| last[i] - self.rows[i][i]).sum();
        Ok(Some(sum / (big_j - 1) as f64))
    }

    /// Rows are evaluated-after tasks, columns are task test sets; the
    /// upper triangle is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task");
        for i in 1..=self.tasks {
            let _ = write!(out, ",task{i}");
        }
        out.push('\n');
        for (j, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{}", j + 1);
            for i in 0..self.tasks {
                match row.get(i) {
                    Some(a) => {
                        let _ = write!(out, ",{a}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            line: 0,
            message: "empty accuracy matrix".into(),
        })?;
        let tasks = header.split(',').count().saturating_sub(1);
        let mut m = AccuracyMatrix::new(tasks);
        for (k, line) in lines.enumerate() {
            let row = line
                .split(',')
                .skip(1)
                .filter(|c| !c.is_empty())
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: k + 2,
                    message: e.to_string(),
                })?;
            m.push_row(row)?;
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_examples() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.95], vec![0.9, 0.8], vec![0.9, 0.8, 0.7]]).unwrap();
        assert!((m.average_accuracy(3).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(m.average_accuracy(1).unwrap(), 0.95);
        assert!(m.average_accuracy(4).is_err());
        assert!(m.average_accuracy(0).is_err());
    }

    #[test]
    fn bwt_examples() {
        let same = AccuracyMatrix::from_rows(vec![vec![0.7], vec![0.7, 0.6]]).unwrap();
        assert_eq!(same.bwt().unwrap(), Some(0.0));
        let drop = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.9], vec![0.8, 0.8, 0.9]]).unwrap();
        assert!((drop.bwt().unwrap().unwrap() + 0.1).abs() < 1e-15);
        let single = AccuracyMatrix::from_rows(vec![vec![0.5]]).unwrap();
        assert_eq!(single.bwt().unwrap(), None);
        let mut partial = AccuracyMatrix::new(3);
        partial.push_row(vec![0.5]).unwrap();
        assert!(partial.bwt().is_err());
    }

    #[test]
    fn rows_are_validated() {
        let mut m = AccuracyMatrix::new(2);
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        assert!(m.push_row(vec![1.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        m.push_row(vec![0.5, 0.25]).unwrap();
        assert!(m.push_row(vec![0.1, 0.1, 0.1]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.95], vec![0.125, 0.8]]).unwrap();
        let csv = m.to_csv();
        assert_eq!(csv, "after_task,task1,task2\n1,0.95,\n2,0.125,0.8\n");
        assert_eq!(AccuracyMatrix::from_csv(&csv).unwrap(), m);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }
}
