//! Smooth feed-forward models on flat parameter vectors.
//!
//! A [`ModelSpec`] describes a stack of dense layers. Hidden layers apply a
//! twice-differentiable activation; the last layer is affine and feeds either
//! a squared-error head (regression) or a softmax cross-entropy head
//! (classification). Parameters live in one flat [`ParameterVector`] laid out
//! layer by layer: weights row-major `(fan_out, fan_in)`, then the bias.
//!
//! Gradients come from hand-written backpropagation. Hessian-vector products
//! run the same backpropagation on dual numbers seeded with the direction
//! (forward-over-reverse), so they are exact up to roundoff.

mod dual;

use std::ops::{Deref, DerefMut, Range};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use dual::{Dual, Real};

/// Default upper bound on `p` for dense Hessian construction.
pub const DEFAULT_HESSIAN_CAP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Squared error `½‖f(x) − y‖²`.
    Regression,
    /// Cross-entropy over a softmax of the outputs.
    Classification,
}

fn default_bias() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input dimension, hidden widths, output dimension.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub task: Task,
    /// Whether every layer carries a bias vector.
    #[serde(default = "default_bias")]
    pub bias: bool,
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlice {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Option<Range<usize>>,
}

impl LayerSlice {
    pub fn range(&self) -> Range<usize> {
        let end = self.bias.as_ref().map_or(self.weights.end, |b| b.end);
        self.weights.start..end
    }
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, task: Task) -> Result<Self> {
        let spec = ModelSpec {
            layer_sizes,
            activation,
            task,
            bias: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(
                "need at least an input and an output size".into(),
            ));
        }
        if let Some(i) = self.layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidSpec(format!("layer {i} has size zero")));
        }
        if self.task == Task::Classification && self.output_dim() < 2 {
            return Err(Error::InvalidSpec(
                "classification needs at least two outputs".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerSlice> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                offset = weights.end;
                let bias = self.bias.then(|| {
                    let b = offset..offset + fan_out;
                    offset = b.end;
                    b
                });
                LayerSlice {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                }
            })
            .collect()
    }

    /// Total parameter count `p`.
    pub fn param_count(&self) -> usize {
        let per_unit = usize::from(self.bias);
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + per_unit) * w[1])
            .sum()
    }

    pub fn check_params(&self, params: &[f64]) -> Result<()> {
        check_len("parameter vector", self.param_count(), params.len())
    }

    pub fn check_point(&self, point: &TestPoint) -> Result<()> {
        check_len("feature vector", self.input_dim(), point.x.len())?;
        match (&point.y, self.task) {
            (Target::Class(c), Task::Classification) => {
                if *c >= self.output_dim() {
                    return Err(Error::OutOfRange {
                        what: "class",
                        index: *c,
                        bound: self.output_dim(),
                    });
                }
            }
            (Target::Values(v), Task::Regression) => {
                check_len("regression target", self.output_dim(), v.len())?
            }
            (Target::Class(_), Task::Regression) => {
                return Err(Error::InvalidInput(
                    "class label given to a regression model".into(),
                ))
            }
            (Target::Values(_), Task::Classification) => {
                return Err(Error::InvalidInput(
                    "real-valued target given to a classifier".into(),
                ))
            }
        }
        Ok(())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Flat `θ ∈ R^p`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn zeros(p: usize) -> Self {
        ParameterVector(vec![0.0; p])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::InvalidInput(format!(
                "byte length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(ParameterVector(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ))
    }

    /// Equality on the raw bit patterns of every entry.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        ParameterVector(v)
    }
}

impl Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

/// One labeled instance. Used both for training data and for the points a
/// performance function is evaluated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPoint {
    pub x: Vec<f64>,
    pub y: Target,
}

impl TestPoint {
    pub fn class(x: Vec<f64>, c: usize) -> Self {
        TestPoint {
            x,
            y: Target::Class(c),
        }
    }

    pub fn regression(x: Vec<f64>, y: Vec<f64>) -> Self {
        TestPoint {
            x,
            y: Target::Values(y),
        }
    }
}

/// Training data addressed by index from batch plans.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dataset(Vec<TestPoint>);

impl Dataset {
    pub fn new(points: Vec<TestPoint>) -> Self {
        Dataset(points)
    }

    pub fn points(&self) -> &[TestPoint] {
        &self.0
    }

    pub fn into_points(self) -> Vec<TestPoint> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&TestPoint> {
        self.0.get(index).ok_or(Error::OutOfRange {
            what: "dataset",
            index,
            bound: self.0.len(),
        })
    }

    pub fn select(&self, indices: &[usize]) -> Result<Vec<&TestPoint>> {
        indices.iter().map(|&i| self.get(i)).collect()
    }

    /// 64-bit content hash over features and targets.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for p in &self.0 {
            h.update((p.x.len() as u64).to_le_bytes());
            for v in &p.x {
                h.update(v.to_le_bytes());
            }
            match &p.y {
                Target::Class(c) => {
                    h.update([0u8]);
                    h.update((*c as u64).to_le_bytes());
                }
                Target::Values(vs) => {
                    h.update([1u8]);
                    h.update((vs.len() as u64).to_le_bytes());
                    for v in vs {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

impl From<Vec<TestPoint>> for Dataset {
    fn from(points: Vec<TestPoint>) -> Self {
        Dataset(points)
    }
}

/// The performance function `γ(x, θ)` whose change is attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerformanceKind {
    /// `log p(y | x; θ)` for classifiers; the unit-variance Gaussian
    /// log-likelihood without its constant for regression.
    #[default]
    LogLikelihood,
    /// Negated per-example training loss.
    NegativeLoss,
    /// The raw model output for the labeled class (classification) or the
    /// first output unit (regression). Linear in `θ` for single-layer
    /// identity models.
    Output,
}

#[derive(Clone, Copy)]
enum Head {
    Loss,
    Perf(PerformanceKind),
}

/// Deterministic Glorot-uniform initialization; biases start at zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParameterVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let a = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut theta[layer.weights.clone()] {
            *w = rng.random_range(-a..a);
        }
    }
    Ok(theta.into())
}

fn activate<T: Real>(act: Activation, z: T) -> T {
    match act {
        Activation::Tanh => z.tanh(),
        Activation::Softplus => z.softplus(),
        Activation::Identity => z,
    }
}

fn activate_deriv<T: Real>(act: Activation, z: T) -> T {
    match act {
        Activation::Tanh => {
            let t = z.tanh();
            T::cst(1.0) - t * t
        }
        Activation::Softplus => z.sigmoid(),
        Activation::Identity => T::cst(1.0),
    }
}

/// Forward pass returning hidden pre-activations, layer inputs and outputs.
fn forward<T: Real>(spec: &ModelSpec, layers: &[LayerSlice], params: &[T], x: &[f64]) -> (Vec<Vec<T>>, Vec<Vec<T>>, Vec<T>) {
    let n_layers = layers.len();
    let mut inputs: Vec<Vec<T>> = Vec::with_capacity(n_layers);
    let mut pre: Vec<Vec<T>> = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut a: Vec<T> = x.iter().map(|&v| T::cst(v)).collect();
    for (l, layer) in layers.iter().enumerate() {
        let w = &params[layer.weights.clone()];
        let mut z: Vec<T> = match &layer.bias {
            Some(b) => params[b.clone()].to_vec(),
            None => vec![T::cst(0.0); layer.fan_out],
        };
        for (i, zi) in z.iter_mut().enumerate() {
            let row = &w[i * layer.fan_in..(i + 1) * layer.fan_in];
            for (wij, aj) in row.iter().zip(&a) {
                *zi += *wij * *aj;
            }
        }
        if l + 1 < n_layers {
            let next = z.iter().map(|&v| activate(spec.activation, v)).collect();
            pre.push(z);
            inputs.push(std::mem::replace(&mut a, next));
        } else {
            inputs.push(std::mem::take(&mut a));
            return (pre, inputs, z);
        }
    }
    unreachable!("validated spec has at least one layer")
}

/// Objective value and its gradient with respect to the outputs.
fn head_value<T: Real>(task: Task, head: Head, z: &[T], y: &Target) -> (T, Vec<T>) {
    match (task, y) {
        (Task::Classification, Target::Class(c)) => {
            let c = *c;
            let m = z.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = T::cst(0.0);
            for &v in z {
                sum += (v - T::cst(m)).exp();
            }
            let lse = T::cst(m) + sum.ln();
            let probs: Vec<T> = z.iter().map(|&v| (v - lse).exp()).collect();
            let onehot = |i: usize| T::cst(if i == c { 1.0 } else { 0.0 });
            let nll = lse - z[c];
            match head {
                Head::Loss => (nll, probs.iter().enumerate().map(|(i, &p)| p - onehot(i)).collect()),
                Head::Perf(PerformanceKind::LogLikelihood | PerformanceKind::NegativeLoss) => {
                    (-nll, probs.iter().enumerate().map(|(i, &p)| onehot(i) - p).collect())
                }
                Head::Perf(PerformanceKind::Output) => {
                    (z[c], (0..z.len()).map(onehot).collect())
                }
            }
        }
        (Task::Regression, Target::Values(y)) => {
            let r: Vec<T> = z.iter().zip(y).map(|(&zi, &yi)| zi - T::cst(yi)).collect();
            let mut half_sq = T::cst(0.0);
            for &ri in &r {
                half_sq += ri * ri;
            }
            half_sq = half_sq * T::cst(0.5);
            match head {
                Head::Loss => (half_sq, r),
                Head::Perf(PerformanceKind::LogLikelihood | PerformanceKind::NegativeLoss) => {
                    (-half_sq, r.into_iter().map(|v| -v).collect())
                }
                Head::Perf(PerformanceKind::Output) => {
                    let mut g = vec![T::cst(0.0); z.len()];
                    g[0] = T::cst(1.0);
                    (z[0], g)
                }
            }
        }
        _ => unreachable!("target checked against task before evaluation"),
    }
}

/// Adds the gradient of the chosen objective at one point into `grad` and
/// returns the objective value.
fn backprop<T: Real>(spec: &ModelSpec, layers: &[LayerSlice], params: &[T], point: &TestPoint, head: Head, grad: &mut [T]) -> T {
    let (pre, inputs, z) = forward(spec, layers, params, &point.x);
    let (value, mut delta) = head_value(spec.task, head, &z, &point.y);
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let a = &inputs[l];
        for (i, &d) in delta.iter().enumerate() {
            let row = layer.weights.start + i * layer.fan_in;
            for (j, &aj) in a.iter().enumerate() {
                grad[row + j] += d * aj;
            }
        }
        if let Some(b) = &layer.bias {
            for (g, &d) in grad[b.clone()].iter_mut().zip(&delta) {
                *g += d;
            }
        }
        if l > 0 {
            let w = &params[layer.weights.clone()];
            let mut back = vec![T::cst(0.0); layer.fan_in];
            for (i, &d) in delta.iter().enumerate() {
                let row = &w[i * layer.fan_in..(i + 1) * layer.fan_in];
                for (bj, &wij) in back.iter_mut().zip(row) {
                    *bj += wij * d;
                }
            }
            delta = back
                .into_iter()
                .zip(&pre[l - 1])
                .map(|(b, &zj)| b * activate_deriv(spec.activation, zj))
                .collect();
        }
    }
    value
}

fn collect_batch<'a, I>(spec: &ModelSpec, batch: I) -> Result<Vec<&'a TestPoint>>
where
    I: IntoIterator<Item = &'a TestPoint>,
{
    let points: Vec<&TestPoint> = batch.into_iter().collect();
    if points.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for p in &points {
        spec.check_point(p)?;
    }
    Ok(points)
}

/// Batch-mean loss and batch-mean gradient.
pub fn loss_grad<'a, I>(spec: &ModelSpec, params: &[f64], batch: I) -> Result<(f64, ParameterVector)>
where
    I: IntoIterator<Item = &'a TestPoint>,
{
    spec.check_params(params)?;
    let points = collect_batch(spec, batch)?;
    let layers = spec.layers();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for p in &points {
        loss += backprop(spec, &layers, params, p, Head::Loss, &mut grad);
    }
    let n = points.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad.into()))
}

fn dual_params(params: &[f64], vec: &[f64]) -> Vec<Dual> {
    params.iter().zip(vec).map(|(&p, &v)| Dual::new(p, v)).collect()
}

/// Product of the batch-mean loss Hessian at `params` with `vec`.
pub fn hvp<'a, I>(spec: &ModelSpec, params: &[f64], batch: I, vec: &[f64]) -> Result<ParameterVector>
where
    I: IntoIterator<Item = &'a TestPoint>,
{
    spec.check_params(params)?;
    check_len("hvp direction", params.len(), vec.len())?;
    let points = collect_batch(spec, batch)?;
    Ok(hvp_unchecked(spec, &spec.layers(), params, &points, vec).into())
}

/// HVP on already-validated inputs; the propagators call this in a loop.
pub(crate) fn hvp_unchecked(spec: &ModelSpec, layers: &[LayerSlice], params: &[f64], points: &[&TestPoint], vec: &[f64]) -> Vec<f64> {
    let dp = dual_params(params, vec);
    let mut grad = vec![Dual::cst(0.0); params.len()];
    for p in points {
        backprop(spec, layers, &dp, p, Head::Loss, &mut grad);
    }
    let n = points.len() as f64;
    grad.into_iter().map(|g| g.eps / n).collect()
}

/// Dense batch-mean Hessian, one HVP per column, symmetrized.
pub fn explicit_hessian<'a, I>(spec: &ModelSpec, params: &[f64], batch: I, cap: usize) -> Result<DMatrix<f64>>
where
    I: IntoIterator<Item = &'a TestPoint>,
{
    spec.check_params(params)?;
    let p = params.len();
    if p > cap {
        return Err(Error::TooLarge { p, cap });
    }
    let points = collect_batch(spec, batch)?;
    Ok(dense_hessian(spec, &spec.layers(), params, &points))
}

pub(crate) fn dense_hessian(spec: &ModelSpec, layers: &[LayerSlice], params: &[f64], points: &[&TestPoint]) -> DMatrix<f64> {
    let p = params.len();
    let mut h = DMatrix::zeros(p, p);
    let mut e = vec![0.0; p];
    for j in 0..p {
        e[j] = 1.0;
        let col = hvp_unchecked(spec, layers, params, points, &e);
        h.set_column(j, &nalgebra::DVector::from_vec(col));
        e[j] = 0.0;
    }
    (&h + h.transpose()) * 0.5
}

/// `γ(x, θ)` and `∇_θ γ(x, θ)` for one labeled point.
pub fn perf_value_grad(spec: &ModelSpec, params: &[f64], point: &TestPoint, perf: PerformanceKind) -> Result<(f64, ParameterVector)> {
    spec.check_params(params)?;
    spec.check_point(point)?;
    let mut grad = vec![0.0; params.len()];
    let v = backprop(spec, &spec.layers(), params, point, Head::Perf(perf), &mut grad);
    Ok((v, grad.into()))
}

/// `∇²_θ γ(x, θ) · vec`.
pub fn perf_hvp(spec: &ModelSpec, params: &[f64], point: &TestPoint, perf: PerformanceKind, vec: &[f64]) -> Result<ParameterVector> {
    spec.check_params(params)?;
    spec.check_point(point)?;
    check_len("hvp direction", params.len(), vec.len())?;
    let dp = dual_params(params, vec);
    let mut grad = vec![Dual::cst(0.0); params.len()];
    backprop(spec, &spec.layers(), &dp, point, Head::Perf(perf), &mut grad);
    Ok(grad.into_iter().map(|g| g.eps).collect::<Vec<_>>().into())
}

/// Raw model outputs (logits for classifiers).
pub fn predict(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    check_len("feature vector", spec.input_dim(), x.len())?;
    Ok(forward(spec, &spec.layers(), params, x).2)
}

/// Fraction of points whose arg-max output equals the label.
pub fn accuracy(spec: &ModelSpec, params: &[f64], points: &[TestPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    for p in points {
        spec.check_point(p)?;
        let Target::Class(c) = p.y else {
            return Err(Error::InvalidInput("accuracy needs class labels".into()));
        };
        let out = predict(spec, params, &p.x)?;
        let arg = out
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty output");
        hits += usize::from(arg == c);
    }
    Ok(hits as f64 / points.len() as f64)
}
