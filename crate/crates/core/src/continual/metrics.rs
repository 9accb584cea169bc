use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `f_i(w_j)`: score on task `i` after training through task `j`, defined for `j >= i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    n: usize,
    cells: Vec<Option<f64>>,
}

impl ScoreMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, cells: vec![None; n * n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        // rows[j] holds f_0(w_j) .. f_j(w_j)
        let mut m = Self::new(rows.len());
        for (j, row) in rows.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(Error::Dimension(format!("row {j} has {} scores, expected {}", row.len(), j + 1)));
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, task: usize, after: usize, score: f64) -> Result<()> {
        if task > after || after >= self.n {
            return Err(Error::Index(format!("f_{task}(w_{after}) outside a {}-task matrix", self.n)));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Contract(format!("score {score} outside [0, 1]")));
        }
        self.cells[task * self.n + after] = Some(score);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        if task >= self.n || after >= self.n {
            return None;
        }
        self.cells[task * self.n + after]
    }

    fn need(&self, task: usize, after: usize) -> Result<f64> {
        self.get(task, after)
            .ok_or_else(|| Error::State(format!("score f_{task}(w_{after}) missing")))
    }
}

/// `OP_n = (1/n) sum_i f_i(w_n)` over the first `n` tasks.
pub fn op_metric(m: &ScoreMatrix, n: usize) -> Result<f64> {
    check_n(m, n)?;
    let mut s = 0.0;
    for i in 0..n {
        s += m.need(i, n - 1)?;
    }
    Ok(s / n as f64)
}

/// `BWT_n = (1/n) sum_i (f_i(w_n) - f_i(w_i))`; negative means forgetting.
///
/// The sign makes forgetting negative. The denominator counts the last
/// task, whose term is zero.
pub fn bwt_metric(m: &ScoreMatrix, n: usize) -> Result<f64> {
    check_n(m, n)?;
    let mut s = 0.0;
    for i in 0..n {
        s += m.need(i, n - 1)? - m.need(i, i)?;
    }
    Ok(s / n as f64)
}

/// Mean of a final score row, on any scale.
pub fn mean_scores(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("no scores".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn check_n(m: &ScoreMatrix, n: usize) -> Result<()> {
    if n == 0 || n > m.size() {
        return Err(Error::Index(format!("n = {n} outside 1..={}", m.size())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_task_bwt() {
        let m = ScoreMatrix::from_rows(&[vec![0.8], vec![0.6, 0.7]]).unwrap();
        assert!((bwt_metric(&m, 2).unwrap() + 0.1).abs() < 1e-12);
        assert!((op_metric(&m, 2).unwrap() - 0.65).abs() < 1e-12);
        assert_eq!(op_metric(&m, 1).unwrap(), 0.8);
    }

    #[test]
    fn missing_entries_are_errors() {
        let mut m = ScoreMatrix::new(2);
        m.set(0, 0, 0.5).unwrap();
        assert!(matches!(bwt_metric(&m, 2), Err(Error::State(_))));
        assert!(m.set(1, 0, 0.5).is_err());
        assert!(m.set(0, 1, 1.5).is_err());
    }
}
