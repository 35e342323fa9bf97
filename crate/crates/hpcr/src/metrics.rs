//! Evaluation metrics over the lower-triangular accuracy matrix a_{i,j}:
//! per-stage average accuracy, averaged anytime accuracy, and forgetting.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Lower-triangular accuracy matrix: `a(i, j)` is the accuracy on task j's
/// held-out split after training through task i (1-based, j <= i).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Appends the evaluation row after task `rows.len() + 1`; the row must
    /// cover exactly the tasks seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Shape(format!(
                "row {} must have {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Domain("accuracies must lie in [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of completed stages T.
    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    /// a_{i,j} with 1-based indices, j <= i.
    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        if i == 0 || j == 0 || j > i || i > self.rows.len() {
            return Err(Error::Domain(format!(
                "cell ({i},{j}) is outside the matrix"
            )));
        }
        Ok(self.rows[i - 1][j - 1])
    }

    /// Writes `i,j,a` rows, 1-based.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "i,j,a")?;
        for (i, row) in self.rows.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                writeln!(out, "{},{},{}", i + 1, j + 1, a)?;
            }
        }
        Ok(())
    }

    /// Reads a matrix back from `write_csv` output.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut cells = Vec::new();
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "accuracy matrix line {lineno}: bad row"
                )));
            }
            let i: usize = parts[0]
                .parse()
                .map_err(|_| Error::Config(format!("accuracy matrix line {lineno}: bad i")))?;
            let j: usize = parts[1]
                .parse()
                .map_err(|_| Error::Config(format!("accuracy matrix line {lineno}: bad j")))?;
            let a: f64 = parts[2]
                .parse()
                .map_err(|_| Error::Config(format!("accuracy matrix line {lineno}: bad a")))?;
            cells.push((i, j, a));
        }
        let stages = cells.iter().map(|&(i, _, _)| i).max().unwrap_or(0);
        let mut rows: Vec<Vec<f64>> = (1..=stages).map(|i| vec![f64::NAN; i]).collect();
        for (i, j, a) in cells {
            if j > i || i > stages {
                return Err(Error::Config(format!(
                    "cell ({i},{j}) is not lower-triangular"
                )));
            }
            rows[i - 1][j - 1] = a;
        }
        if rows.iter().flatten().any(|a| a.is_nan()) {
            return Err(Error::Config("accuracy matrix has missing cells".into()));
        }
        Ok(AccuracyMatrix { rows })
    }
}

/// A_i: mean accuracy over the first i tasks after training through task i.
pub fn average_accuracy(m: &AccuracyMatrix, i: usize) -> Result<f64> {
    if i == 0 || i > m.stages() {
        return Err(Error::Domain(format!("A_{i} needs a completed stage {i}")));
    }
    Ok(m.rows[i - 1].iter().sum::<f64>() / i as f64)
}

/// AAA: mean of A_1..A_T over the whole run.
pub fn averaged_anytime_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    if m.stages() == 0 {
        return Err(Error::Domain(
            "AAA needs at least one completed stage".into(),
        ));
    }
    let mut total = 0.0;
    for i in 1..=m.stages() {
        total += average_accuracy(m, i)?;
    }
    Ok(total / m.stages() as f64)
}

/// f_{k,j}: best accuracy ever seen on task j before stage k, minus the
/// accuracy at stage k.
pub fn forgetting_cell(m: &AccuracyMatrix, k: usize, j: usize) -> Result<f64> {
    if k < 2 || j >= k {
        return Err(Error::Domain(format!("f_({k},{j}) requires 1 <= j < k")));
    }
    let mut best = f64::NEG_INFINITY;
    for l in j..k {
        best = best.max(m.get(l, j)?);
    }
    Ok(best - m.get(k, j)?)
}

/// F_i: mean forgetting over tasks seen before stage i; undefined at i = 1.
pub fn forgetting(m: &AccuracyMatrix, i: usize) -> Result<f64> {
    if i < 2 {
        return Err(Error::Domain("F_1 is undefined".into()));
    }
    if i > m.stages() {
        return Err(Error::Domain(format!("F_{i} needs a completed stage {i}")));
    }
    let mut total = 0.0;
    for j in 1..i {
        total += forgetting_cell(m, i, j)?;
    }
    Ok(total / (i - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row.to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn average_accuracy_examples() {
        let m = matrix(&[&[0.9], &[0.6, 0.8]]);
        assert!((average_accuracy(&m, 2).unwrap() - 0.7).abs() < 1e-15);
        assert!((average_accuracy(&m, 1).unwrap() - 0.9).abs() < 1e-15);
        assert!(average_accuracy(&m, 3).is_err());
    }

    #[test]
    fn anytime_accuracy_averages_stage_means() {
        let m = matrix(&[&[0.5], &[0.1, 0.5]]);
        // A_1 = 0.5, A_2 = 0.3 -> AAA = 0.4.
        assert!((averaged_anytime_accuracy(&m).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn forgetting_examples() {
        let m = matrix(&[&[0.8], &[0.6, 0.9]]);
        assert!((forgetting_cell(&m, 2, 1).unwrap() - 0.2).abs() < 1e-15);
        assert!((forgetting(&m, 2).unwrap() - 0.2).abs() < 1e-15);
        assert!(forgetting(&m, 1).is_err());
    }

    #[test]
    fn forgetting_uses_best_earlier_accuracy() {
        let m = matrix(&[&[0.5], &[0.9, 0.8], &[0.6, 0.7, 0.9]]);
        // Best on task 1 before stage 3 is 0.9.
        assert!((forgetting_cell(&m, 3, 1).unwrap() - 0.3).abs() < 1e-12);
        let f3 = forgetting(&m, 3).unwrap();
        assert!((f3 - (0.3 + 0.1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rows_must_grow_one_at_a_time() {
        let mut m = AccuracyMatrix::new();
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        assert!(m.push_row(vec![0.5]).is_err());
        assert!(m.push_row(vec![1.5, 0.0]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = matrix(&[&[0.123456789012345], &[0.5, 1.0 / 3.0], &[0.0, 1.0, 0.25]]);
        m.write_csv(&path).unwrap();
        let back = AccuracyMatrix::read_csv(&path).unwrap();
        assert_eq!(m, back);
    }

    proptest! {
        #[test]
        fn forgetting_stays_in_range(cells in proptest::collection::vec(0.0f64..=1.0, 6)) {
            let m = matrix(&[&cells[0..1], &cells[1..3], &cells[3..6]]);
            for i in 2..=3 {
                let f = forgetting(&m, i).unwrap();
                prop_assert!((-1.0..=1.0).contains(&f));
            }
            // Monotone-degrading columns give nonnegative forgetting.
            let degrading = matrix(&[&[0.9], &[0.7, 0.8], &[0.5, 0.6, 0.9]]);
            prop_assert!(forgetting(&degrading, 3).unwrap() >= 0.0);
        }
    }
}
