//! Synthetic class-conditional Gaussian data and feature-space transforms.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Target, TestPoint};

/// Unit-norm vertices of a regular simplex with `classes` corners, expressed
/// in `classes − 1` coordinates and padded to `d`.
fn simplex_means(d: usize, classes: usize) -> Result<Vec<Vec<f64>>> {
    if classes == 1 {
        return Ok(vec![vec![0.0; d]]);
    }
    if d + 1 < classes {
        return Err(Error::InvalidInput(format!("{classes} simplex corners need d >= {}", classes - 1)));
    }
    let c = classes as f64;
    let centered: Vec<Vec<f64>> = (0..classes)
        .map(|i| (0..classes).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / c).collect())
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in centered.iter().take(classes - 1) {
        let mut u = v.clone();
        for b in &basis {
            let proj: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(u.into_iter().map(|x| x / n).collect());
    }
    Ok(centered
        .iter()
        .map(|v| {
            let mut coords: Vec<f64> = basis.iter().map(|b| v.iter().zip(b).map(|(x, y)| x * y).sum()).collect();
            let n = coords.iter().map(|x| x * x).sum::<f64>().sqrt();
            coords.iter_mut().for_each(|x| *x /= n);
            coords.resize(d, 0.0);
            coords
        })
        .collect())
}

/// Class means of [`gen_gaussian_classes`]: simplex corners at distance
/// `separation / 2` from the origin.
pub fn class_means(d: usize, classes: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    Ok(simplex_means(d, classes)?
        .into_iter()
        .map(|m| m.into_iter().map(|x| x * separation / 2.0).collect())
        .collect())
}

/// `n` points with uniformly drawn labels and unit-covariance Gaussian
/// features around the class means.
pub fn gen_gaussian_classes(seed: u64, n: usize, d: usize, classes: usize, separation: f64) -> Result<Vec<TestPoint>> {
    if n == 0 || d == 0 || classes == 0 {
        return Err(Error::InvalidInput("n, d and classes must be positive".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidInput(format!("separation {separation} must be finite and >= 0")));
    }
    let means = class_means(d, classes, separation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let c = rng.random_range(0..classes);
            sample_class(&mut rng, &means[c], c)
        })
        .collect())
}

/// `n` points of class `c` only.
pub fn gen_class_points(seed: u64, n: usize, d: usize, classes: usize, separation: f64, c: usize) -> Result<Vec<TestPoint>> {
    if c >= classes {
        return Err(Error::OutOfRange {
            what: "class",
            index: c,
            bound: classes,
        });
    }
    let means = class_means(d, classes, separation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sample_class(&mut rng, &means[c], c)).collect())
}

fn sample_class(rng: &mut ChaCha8Rng, mean: &[f64], c: usize) -> TestPoint {
    TestPoint::class(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect(), c)
}

/// An orthogonal map on feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTransform {
    /// Counter-clockwise rotation of the first two features, in degrees.
    RotationDeg(f64),
    /// Rotation by the same angle in every plane `(i, i + d/2)`, `i < d/2`.
    /// At 90 degrees the first half of the features is moved onto the second.
    SubspaceRotationDeg(f64),
    /// Row-major orthogonal matrix.
    Matrix(Vec<Vec<f64>>),
}

impl FeatureTransform {
    pub fn matrix(&self, d: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            FeatureTransform::RotationDeg(deg) => {
                if d < 2 {
                    return Err(Error::InvalidInput("a plane rotation needs d >= 2".into()));
                }
                let (s, c) = deg.to_radians().sin_cos();
                let mut m = DMatrix::identity(d, d);
                m[(0, 0)] = c;
                m[(0, 1)] = -s;
                m[(1, 0)] = s;
                m[(1, 1)] = c;
                m
            }
            FeatureTransform::SubspaceRotationDeg(deg) => {
                if d < 2 {
                    return Err(Error::InvalidInput("a subspace rotation needs d >= 2".into()));
                }
                let (s, c) = deg.to_radians().sin_cos();
                let h = d / 2;
                let mut m = DMatrix::identity(d, d);
                for i in 0..h {
                    m[(i, i)] = c;
                    m[(i + h, i)] = s;
                    m[(i, i + h)] = -s;
                    m[(i + h, i + h)] = c;
                }
                m
            }
            FeatureTransform::Matrix(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::DimensionMismatch {
                        what: "transform matrix",
                        expected: d,
                        got: rows.len(),
                    });
                }
                DMatrix::from_fn(d, d, |i, j| rows[i][j])
            }
        };
        let err = (m.transpose() * &m - DMatrix::<f64>::identity(d, d)).amax();
        if err > 1e-10 {
            return Err(Error::InvalidInput(format!("transform is not orthogonal (‖RᵀR − I‖_max = {err:e})")));
        }
        Ok(m)
    }
}

/// `x ↦ R x` on every point; labels are kept.
pub fn apply_feature_transform(points: &[TestPoint], transform: &FeatureTransform) -> Result<Vec<TestPoint>> {
    let Some(first) = points.first() else {
        return Ok(vec![]);
    };
    let d = first.x.len();
    let r = transform.matrix(d)?;
    points
        .iter()
        .map(|p| {
            if p.x.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "feature vector",
                    expected: d,
                    got: p.x.len(),
                });
            }
            let x = &r * nalgebra::DVector::from_column_slice(&p.x);
            Ok(TestPoint {
                x: x.as_slice().to_vec(),
                y: p.y.clone(),
            })
        })
        .collect()
}

/// Appends a binary confound feature `±1` that agrees with the sign of the
/// label (class 1 ↦ +1, class 0 ↦ −1) with probability `(1 + ρ) / 2`, so its
/// correlation with the label code is `ρ` in expectation.
pub fn append_confound(points: &[TestPoint], rho: f64, seed: u64) -> Result<Vec<TestPoint>> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("confound correlation {rho} outside [-1, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    points
        .iter()
        .map(|p| {
            let code = label_code(p)?;
            let agree = rng.random::<f64>() < (1.0 + rho) / 2.0;
            let mut x = p.x.clone();
            x.push(if agree { code } else { -code });
            Ok(TestPoint { x, y: p.y.clone() })
        })
        .collect()
}

pub(crate) fn label_code(p: &TestPoint) -> Result<f64> {
    match p.y {
        Target::Class(0) => Ok(-1.0),
        Target::Class(1) => Ok(1.0),
        _ => Err(Error::InvalidInput("the confound construction needs binary class labels".into())),
    }
}

/// Cyclic label shift `c ↦ (c + shift) mod classes`.
pub fn shift_labels(points: &[TestPoint], shift: usize, classes: usize) -> Result<Vec<TestPoint>> {
    points
        .iter()
        .map(|p| match p.y {
            Target::Class(c) if c < classes => Ok(TestPoint::class(p.x.clone(), (c + shift) % classes)),
            _ => Err(Error::InvalidInput("label shift needs class labels below the class count".into())),
        })
        .collect()
}
