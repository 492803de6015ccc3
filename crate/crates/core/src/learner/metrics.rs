//! Average accuracy and average forgetting over the per-task accuracy matrix.

use serde::Serialize;

use crate::error::{Error, Result};

/// Lower-triangular matrix: row `i` holds the accuracy on tasks `0..=i`
/// after training through task `i`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expect = self.rows.len() + 1;
        if row.len() != expect {
            return Err(Error::dim("AccuracyMatrix::push_row", expect, row.len()));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::domain("accuracies must lie in [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }
}

/// Mean accuracy over all tasks after the final task.
pub fn average_accuracy(acc: &AccuracyMatrix) -> Result<f64> {
    let last = acc.rows.last().ok_or_else(|| Error::domain("no completed tasks"))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over earlier tasks `j` of `max_{k < T} a[k][j] − a[T][j]`. Negative
/// when earlier tasks improved after they were learned.
/// A single task has nothing to forget; that case returns 0 with a warning.
pub fn average_forgetting(acc: &AccuracyMatrix) -> Result<f64> {
    let t = acc.tasks();
    if t == 0 {
        return Err(Error::domain("no completed tasks"));
    }
    if t == 1 {
        log::warn!("average forgetting needs at least two tasks; reporting 0");
        return Ok(0.0);
    }
    let last = &acc.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|j| {
            let best = (j..t - 1).map(|k| acc.rows[k][j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![vec![0.8], vec![0.6, 0.9], vec![0.5, 0.7, 0.9]]).unwrap()
    }

    #[test]
    fn hand_matrix() {
        let m = hand();
        assert!((average_accuracy(&m).unwrap() - 0.7).abs() < 1e-15);
        assert!((average_forgetting(&m).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_matrix_has_no_forgetting() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.4], vec![0.4, 0.4], vec![0.4, 0.4, 0.4]]).unwrap();
        assert_eq!(average_forgetting(&m).unwrap(), 0.0);
    }

    #[test]
    fn improving_columns_give_nonpositive_forgetting() {
        let flat = AccuracyMatrix::from_rows(vec![vec![0.2], vec![0.2, 0.5], vec![0.2, 0.5, 0.1]]).unwrap();
        assert_eq!(average_forgetting(&flat).unwrap(), 0.0);
        // backward transfer shows up as negative forgetting
        let m = AccuracyMatrix::from_rows(vec![vec![0.2], vec![0.3, 0.5], vec![0.6, 0.5, 0.1]]).unwrap();
        assert!((average_forgetting(&m).unwrap() + 0.15).abs() < 1e-12);
    }

    #[test]
    fn single_task_and_errors() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.3]]).unwrap();
        assert_eq!(average_forgetting(&m).unwrap(), 0.0);
        assert_eq!(average_accuracy(&m).unwrap(), 0.3);
        assert!(average_accuracy(&AccuracyMatrix::new()).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![0.3, 0.2]]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.3]]).is_err());
    }
}
