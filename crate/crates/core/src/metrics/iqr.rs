use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FslmError, Result};

/// Linear-interpolation quantile (type 7) of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Interquartile range `Q3 − Q1` with type-7 quantiles.
pub fn iqr(samples: &[f64]) -> Result<f64> {
    if samples.len() < 4 {
        return Err(FslmError::TooFewSamples { needed: 4, got: samples.len() });
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(FslmError::config("IQR of data containing NaN"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25))
}

/// Per-parameter IQR ratios; rows are reduced posteriors, columns parameters.
/// `None` marks a ratio whose reference IQR is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqrMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub entries: Vec<Vec<Option<f64>>>,
}

impl IqrMatrix {
    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.columns.iter().position(|c| c == column)?;
        self.entries[i][j]
    }

    /// Header row of parameter names and a leading `removed` column; undefined
    /// entries are empty cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["removed".to_string()];
        header.extend(self.columns.iter().cloned());
        out.write_record(&header)?;
        for (name, row) in self.rows.iter().zip(&self.entries) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|e| e.map_or(String::new(), |v| format!("{v}"))));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Column IQRs of a sample matrix.
pub fn column_iqrs(samples: ndarray::ArrayView2<f64>) -> Result<Vec<f64>> {
    samples.columns().into_iter().map(|c| iqr(&c.to_vec())).collect()
}

/// Entry `(i, j)` is `IQR(reduced_i[:, j]) / IQR(full[:, j])`.
pub fn iqr_ratio_matrix(
    reduced: &[(String, ndarray::ArrayView2<f64>)],
    full: ndarray::ArrayView2<f64>,
    columns: &[String],
) -> Result<IqrMatrix> {
    let d = full.ncols();
    if columns.len() != d {
        return Err(FslmError::Dimension { expected: d, got: columns.len() });
    }
    let base = column_iqrs(full)?;
    let mut entries = Vec::with_capacity(reduced.len());
    for (_, r) in reduced {
        if r.ncols() != d {
            return Err(FslmError::Dimension { expected: d, got: r.ncols() });
        }
        let iqrs = column_iqrs(*r)?;
        entries.push(iqrs.iter().zip(&base).map(|(a, b)| if *b > 0.0 { Some(a / b) } else { None }).collect());
    }
    Ok(IqrMatrix { rows: reduced.iter().map(|(n, _)| n.clone()).collect(), columns: columns.to_vec(), entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn uniform_quartiles() {
        let mut rng = rng_from_seed(1);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        assert!((iqr(&xs).unwrap() - 0.5).abs() < 0.01);
    }

    #[test]
    fn small_cases() {
        assert_eq!(iqr(&[3.0; 6]).unwrap(), 0.0);
        // type 7 on 1..=5: Q1 = 2, Q3 = 4
        assert_eq!(iqr(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap(), 2.0);
        // on 1..=4: Q1 = 1.75, Q3 = 3.25
        assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.5);
        assert!(iqr(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn ratio_matrix_identity_and_undefined() {
        let mut rng = rng_from_seed(2);
        let full = Array2::from_shape_simple_fn((100, 2), || rng.random_range(0.0..1.0));
        let cols = vec!["a".to_string(), "b".to_string()];
        let m = iqr_ratio_matrix(&[("x0".into(), full.view())], full.view(), &cols).unwrap();
        assert_eq!(m.entries, vec![vec![Some(1.0), Some(1.0)]]);
        let mut flat = full.clone();
        flat.column_mut(1).fill(0.5);
        let m = iqr_ratio_matrix(&[("x0".into(), full.view())], flat.view(), &cols).unwrap();
        assert_eq!(m.entries[0][1], None);
        assert_eq!(m.get("x0", "a"), Some(1.0));
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap(), "x0,1,");
    }

    #[test]
    fn wide_reduced_over_narrow_full() {
        let mut rng = rng_from_seed(3);
        let wide = Array2::from_shape_simple_fn((20_000, 1), || rng.random_range(-5.0..5.0));
        let narrow = Array2::from_shape_simple_fn((20_000, 1), || rng.random_range(-1.0..1.0));
        let m = iqr_ratio_matrix(&[("x".into(), wide.view())], narrow.view(), &["t".to_string()]).unwrap();
        assert!((m.entries[0][0].unwrap() - 5.0).abs() < 0.2);
    }

    proptest! {
        #[test]
        fn scale_equivariant(seed in any::<u64>(), c in prop_oneof![Just(2.0), Just(-0.5), Just(4.0)]) {
            let mut rng = rng_from_seed(seed);
            let xs: Vec<f64> = (0..37).map(|_| rng.random_range(-3.0..3.0)).collect();
            let scaled: Vec<f64> = xs.iter().map(|x| c * x).collect();
            prop_assert_eq!(iqr(&scaled).unwrap(), f64::abs(c) * iqr(&xs).unwrap());
        }
    }
}
