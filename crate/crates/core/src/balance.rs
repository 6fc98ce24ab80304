//! SMOTE oversampling of the minority class.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;

pub const DEFAULT_SMOTE_K: usize = 5;

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest other rows of `i` (Euclidean, ties to lower
/// index).
pub fn nearest_neighbors(x: ArrayView2<'_, f64>, i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..x.nrows())
        .filter(|&j| j != i)
        .map(|j| (sq_dist(x.row(i), x.row(j)), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Generate `n_new` synthetic rows `x_i + lambda * (x_nn - x_i)` with `x_i`
/// drawn uniformly from the minority rows, `x_nn` uniformly among its
/// `min(k, m - 1)` nearest minority neighbours and `lambda ~ U[0, 1)`.
pub fn smote(x_min: ArrayView2<'_, f64>, n_new: usize, k: usize, seed: u64) -> Result<Array2<f64>> {
    let m = x_min.nrows();
    if m < 2 {
        return Err(Error::InvalidInput(format!(
            "SMOTE needs at least 2 minority rows, got {m}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidInput("SMOTE k must be >= 1".into()));
    }
    let k = k.min(m - 1);
    let neighbors: Vec<Vec<usize>> = (0..m).map(|i| nearest_neighbors(x_min, i, k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((n_new, x_min.ncols()));
    for mut row in out.axis_iter_mut(Axis(0)) {
        let i = rng.random_range(0..m);
        let nn = neighbors[i][rng.random_range(0..k)];
        let lambda: f64 = rng.random();
        let base = x_min.row(i);
        let other = x_min.row(nn);
        for ((o, &b), &t) in row.iter_mut().zip(base.iter()).zip(other.iter()) {
            *o = b + lambda * (t - b);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    /// `(n_majority, n_minority)` before balancing.
    pub before: (usize, usize),
    pub after: (usize, usize),
    pub synthetic_count: usize,
    pub k_neighbors_used: usize,
    pub minority: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Balanced {
    /// Original rows first, synthetic minority rows appended.
    pub x: Array2<f64>,
    pub y: Vec<Label>,
    pub report: BalanceReport,
}

impl Balanced {
    pub fn original_rows(&self) -> usize {
        self.report.before.0 + self.report.before.1
    }
}

/// Append SMOTE rows of the minority class until both classes have the same
/// count. Training data only.
pub fn balance_training_set(x: ArrayView2<'_, f64>, y: &[Label], k: usize, seed: u64) -> Result<Balanced> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    let n_anom = y.iter().filter(|l| l.is_anomaly()).count();
    let n_norm = y.len() - n_anom;
    if n_anom == 0 || n_norm == 0 {
        return Err(Error::InvalidInput(
            "balancing needs both classes in the training set".into(),
        ));
    }
    let (minority, n_min, n_maj) = if n_anom <= n_norm {
        (Label::Anomaly, n_anom, n_norm)
    } else {
        (Label::Normal, n_norm, n_anom)
    };
    let needed = n_maj - n_min;
    if needed > 0 && n_min < 2 {
        return Err(Error::InvalidInput(format!(
            "minority class has {n_min} row(s); SMOTE needs at least 2 \
             (add minority examples or skip balancing for this set)"
        )));
    }
    let min_rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == minority).collect();
    let x_min = x.select(Axis(0), &min_rows);
    let synthetic = if needed > 0 {
        smote(x_min.view(), needed, k, seed)?
    } else {
        Array2::zeros((0, x.ncols()))
    };
    let xb = ndarray::concatenate(Axis(0), &[x, synthetic.view()])
        .expect("column counts agree");
    let mut yb = y.to_vec();
    yb.extend(std::iter::repeat(minority).take(needed));
    Ok(Balanced {
        x: xb,
        y: yb,
        report: BalanceReport {
            before: (n_maj, n_min),
            after: (n_maj, n_maj),
            synthetic_count: needed,
            k_neighbors_used: if needed > 0 { k.min(n_min - 1) } else { 0 },
            minority,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_points_stay_on_their_segment() {
        let x = array![[0.0, 0.0], [1.0, 1.0]];
        let s = smote(x.view(), 50, 1, 9).unwrap();
        for r in s.rows() {
            assert_eq!(r[0], r[1]);
            assert!((0.0..=1.0).contains(&r[0]));
        }
    }

    #[test]
    fn zero_requested_is_empty() {
        let x = array![[0.0], [1.0]];
        assert_eq!(smote(x.view(), 0, 5, 1).unwrap().nrows(), 0);
    }

    #[test]
    fn too_few_minority_rows() {
        assert!(smote(array![[1.0]].view(), 3, 5, 1).is_err());
        assert!(smote(Array2::<f64>::zeros((0, 2)).view(), 3, 5, 1).is_err());
        let x = array![[0.0], [1.0], [2.0]];
        let y = [Label::Normal, Label::Normal, Label::Anomaly];
        let err = balance_training_set(x.view(), &y, 5, 1).unwrap_err().to_string();
        assert!(err.contains("skip balancing"), "{err}");
    }

    #[test]
    fn nine_hundred_to_one_hundred() {
        let n = 1000;
        let x = Array2::from_shape_fn((n, 3), |(i, j)| (i * 7 + j) as f64 % 13.0);
        let y: Vec<Label> = (0..n)
            .map(|i| if i < 100 { Label::Anomaly } else { Label::Normal })
            .collect();
        let b = balance_training_set(x.view(), &y, 5, 4).unwrap();
        assert_eq!(b.report.synthetic_count, 800);
        assert_eq!(b.report.after, (900, 900));
        assert_eq!(b.x.slice(ndarray::s![..n, ..]), x);
        assert_eq!(&b.y[..n], &y[..]);
        assert_eq!(b.y.iter().filter(|l| l.is_anomaly()).count(), 900);
    }

    #[test]
    fn balanced_input_unchanged() {
        let x = Array2::from_shape_fn((100, 2), |(i, j)| (i + j) as f64);
        let y: Vec<Label> = (0..100).map(|i| Label::from_bit((i % 2) as u8).unwrap()).collect();
        let b = balance_training_set(x.view(), &y, 5, 4).unwrap();
        assert_eq!(b.report.synthetic_count, 0);
        assert_eq!(b.x, x);
    }

    #[test]
    fn overall_corpus_ratio() {
        let x = Array2::from_shape_fn((1016, 2), |(i, j)| ((i * 31 + j * 17) % 101) as f64);
        let y: Vec<Label> = (0..1016)
            .map(|i| if i % 63 == 0 && i / 63 < 16 { Label::Anomaly } else { Label::Normal })
            .collect();
        assert_eq!(y.iter().filter(|l| l.is_anomaly()).count(), 16);
        let b = balance_training_set(x.view(), &y, 5, 2).unwrap();
        assert_eq!(b.report.synthetic_count, 984);
        assert_eq!(b.report.before, (1000, 16));
    }
}
