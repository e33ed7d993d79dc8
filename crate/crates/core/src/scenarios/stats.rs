use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    Pearson,
    Spearman,
}

/// Pearson or Spearman (average ranks for ties) correlation.
pub fn correlation(a: &[f64], b: &[f64], kind: CorrelationKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "correlation input",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("needs at least two pairs".into()));
    }
    match kind {
        CorrelationKind::Pearson => pearson(a, b),
        CorrelationKind::Spearman => pearson(&ranks(a), &ranks(b)),
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_cases() {
        let a = [1.0, 2.0, 3.0];
        assert!((correlation(&a, &a, CorrelationKind::Pearson).unwrap() - 1.0).abs() < 1e-15);
        assert!((correlation(&a, &[-1.0, -2.0, -3.0], CorrelationKind::Pearson).unwrap() + 1.0).abs() < 1e-15);
        let b = [1.0, 4.0, 9.0];
        assert!((correlation(&a, &b, CorrelationKind::Spearman).unwrap() - 1.0).abs() < 1e-15);
        let want = 8.0 / (2.0f64 * (98.0 / 3.0)).sqrt();
        assert!((correlation(&a, &b, CorrelationKind::Pearson).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.9897).abs() < 1e-4);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            correlation(&[1.0, 1.0], &[2.0, 3.0], CorrelationKind::Pearson),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(correlation(&[1.0], &[2.0], CorrelationKind::Pearson).is_err());
        assert!(correlation(&[1.0, 2.0], &[2.0], CorrelationKind::Pearson).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn pearson_is_affine_invariant(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
                                       s in 0.1f64..10.0, c in -5.0f64..5.0) {
            let a: Vec<f64> = v.iter().map(|p| p.0).collect();
            let b: Vec<f64> = v.iter().map(|p| p.1).collect();
            if let Ok(r) = correlation(&a, &b, CorrelationKind::Pearson) {
                let a2: Vec<f64> = a.iter().map(|x| s * x + c).collect();
                let r2 = correlation(&a2, &b, CorrelationKind::Pearson).unwrap();
                prop_assert!((r - r2).abs() <= 1e-12);
            }
        }

        #[test]
        fn spearman_is_monotone_invariant(v in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 3..30)) {
            let a: Vec<f64> = v.iter().map(|p| p.0).collect();
            let b: Vec<f64> = v.iter().map(|p| p.1).collect();
            if let Ok(r) = correlation(&a, &b, CorrelationKind::Spearman) {
                let a2: Vec<f64> = a.iter().map(|x| x.exp() + x * x * x).collect();
                prop_assert_eq!(r, correlation(&a2, &b, CorrelationKind::Spearman).unwrap());
            }
        }
    }
}
