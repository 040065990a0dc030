//! Dense layers with hand-written forward and backward passes.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and
//! is gradient-checked in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerGrads<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        LayerGrads {
            weight: Matrix::zeros(rows, cols),
            bias: vec![T::zero(); rows],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Subgradient at zero is zero.
pub fn relu_grad<T: Real>(pre: T) -> T {
    if pre > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn embedding_forward<T: Real>(ids: &[u32], table: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(ids.len(), table.cols);
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= table.rows {
            return Err(Error::IndexError {
                index: id,
                len: table.rows,
            });
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatters `grad_out` rows into the embedding gradient.
pub fn embedding_backward<T: Real>(
    ids: &[u32],
    grad_out: &Matrix<T>,
    grad_table: &mut Matrix<T>,
) -> Result<()> {
    if grad_out.rows != ids.len() || grad_out.cols != grad_table.cols {
        return Err(Error::shape("embedding gradient"));
    }
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= grad_table.rows {
            return Err(Error::IndexError {
                index: id,
                len: grad_table.rows,
            });
        }
        axpy(T::one(), grad_out.row(i), grad_table.row_mut(id));
    }
    Ok(())
}

/// Filter bank of `filters` kernels, each `kernel × dim`, stored as a
/// `filters × (kernel·dim)` matrix so each window of consecutive input rows
/// is one contiguous slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub kernel: usize,
    pub dim: usize,
}

/// Cached pre-activations of a convolution.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub pre: Matrix<T>,
}

/// Valid stride-1 convolution followed by ReLU. Returns the activations and
/// the pre-activation cache.
pub fn conv1d_forward<T: Real>(
    x: &Matrix<T>,
    weight: &Matrix<T>,
    bias: &[T],
    kernel: usize,
) -> Result<(Matrix<T>, ConvCache<T>)> {
    let pre = conv1d_linear(x, weight, bias, kernel)?;
    let out = Matrix {
        rows: pre.rows,
        cols: pre.cols,
        data: pre.data.iter().map(|&v| relu(v)).collect(),
    };
    Ok((out, ConvCache { pre }))
}

/// The convolution without its activation.
pub fn conv1d_linear<T: Real>(
    x: &Matrix<T>,
    weight: &Matrix<T>,
    bias: &[T],
    kernel: usize,
) -> Result<Matrix<T>> {
    if kernel == 0 || weight.cols != kernel * x.cols || bias.len() != weight.rows {
        return Err(Error::shape(format!(
            "conv weight {}x{} with kernel {kernel} over input width {}",
            weight.rows, weight.cols, x.cols
        )));
    }
    if x.rows < kernel {
        return Err(Error::SequenceTooShort {
            len: x.rows,
            kernel,
        });
    }
    let steps = x.rows - kernel + 1;
    let window = kernel * x.cols;
    let mut pre = Matrix::zeros(steps, weight.rows);
    for t in 0..steps {
        let xs = &x.data[t * x.cols..t * x.cols + window];
        let row = pre.row_mut(t);
        for (f, out) in row.iter_mut().enumerate() {
            *out = bias[f] + dot(weight.row(f), xs);
        }
    }
    Ok(pre)
}

/// Accumulates parameter gradients into `grads` and returns the gradient
/// with respect to the input rows.
pub fn conv1d_backward_into<T: Real>(
    x: &Matrix<T>,
    weight: &Matrix<T>,
    cache: &ConvCache<T>,
    grad_out: &Matrix<T>,
    grads: &mut LayerGrads<T>,
) -> Result<Matrix<T>> {
    let steps = cache.pre.rows;
    if grad_out.rows != steps
        || grad_out.cols != weight.rows
        || grads.weight.rows != weight.rows
        || grads.weight.cols != weight.cols
    {
        return Err(Error::shape("conv backward"));
    }
    let window = weight.cols;
    let mut grad_x = Matrix::zeros(x.rows, x.cols);
    for t in 0..steps {
        let xs = &x.data[t * x.cols..t * x.cols + window];
        for f in 0..weight.rows {
            let g = grad_out.get(t, f) * relu_grad(cache.pre.get(t, f));
            if g == T::zero() {
                continue;
            }
            grads.bias[f] += g;
            axpy(g, xs, grads.weight.row_mut(f));
            axpy(
                g,
                weight.row(f),
                &mut grad_x.data[t * x.cols..t * x.cols + window],
            );
        }
    }
    Ok(grad_x)
}

pub fn conv1d_backward<T: Real>(
    x: &Matrix<T>,
    weight: &Matrix<T>,
    cache: &ConvCache<T>,
    grad_out: &Matrix<T>,
) -> Result<(LayerGrads<T>, Matrix<T>)> {
    let mut grads = LayerGrads::zeros(weight.rows, weight.cols);
    let gx = conv1d_backward_into(x, weight, cache, grad_out, &mut grads)?;
    Ok((grads, gx))
}

/// Maximum over rows per column; ties resolve to the earliest row.
pub fn global_max_pool<T: Real>(h: &Matrix<T>) -> Result<(Vec<T>, Vec<usize>)> {
    if h.rows == 0 {
        return Err(Error::EmptyInput);
    }
    let mut out = h.row(0).to_vec();
    let mut arg = vec![0; h.cols];
    for t in 1..h.rows {
        for (f, &v) in h.row(t).iter().enumerate() {
            if v > out[f] {
                out[f] = v;
                arg[f] = t;
            }
        }
    }
    Ok((out, arg))
}

/// Routes each column's gradient to its recorded argmax row.
pub fn global_max_pool_backward<T: Real>(
    grad_out: &[T],
    argmax: &[usize],
    rows: usize,
) -> Result<Matrix<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape("max-pool backward"));
    }
    let mut g = Matrix::zeros(rows, grad_out.len());
    for (f, (&go, &t)) in grad_out.iter().zip(argmax).enumerate() {
        if t >= rows {
            return Err(Error::IndexError {
                index: t,
                len: rows,
            });
        }
        g.data[t * g.cols + f] = go;
    }
    Ok(g)
}

/// `act(W x + b)`; also returns the pre-activation.
pub fn dense_forward<T: Real>(
    x: &[T],
    weight: &Matrix<T>,
    bias: &[T],
    act: Activation,
) -> Result<(Vec<T>, Vec<T>)> {
    if weight.cols != x.len() || bias.len() != weight.rows {
        return Err(Error::shape(format!(
            "dense {}x{} applied to length {}",
            weight.rows,
            weight.cols,
            x.len()
        )));
    }
    let pre: Vec<T> = (0..weight.rows)
        .map(|r| bias[r] + dot(weight.row(r), x))
        .collect();
    let out = match act {
        Activation::Relu => pre.iter().map(|&v| relu(v)).collect(),
        Activation::None => pre.clone(),
    };
    Ok((out, pre))
}

pub fn dense_backward_into<T: Real>(
    x: &[T],
    weight: &Matrix<T>,
    pre: &[T],
    act: Activation,
    grad_out: &[T],
    grads: &mut LayerGrads<T>,
) -> Result<Vec<T>> {
    if grad_out.len() != weight.rows
        || pre.len() != weight.rows
        || x.len() != weight.cols
        || grads.weight.rows != weight.rows
        || grads.weight.cols != weight.cols
    {
        return Err(Error::shape("dense backward"));
    }
    let mut grad_x = vec![T::zero(); weight.cols];
    for r in 0..weight.rows {
        let g = match act {
            Activation::Relu => grad_out[r] * relu_grad(pre[r]),
            Activation::None => grad_out[r],
        };
        if g == T::zero() {
            continue;
        }
        grads.bias[r] += g;
        axpy(g, x, grads.weight.row_mut(r));
        axpy(g, weight.row(r), &mut grad_x);
    }
    Ok(grad_x)
}

pub fn dense_backward<T: Real>(
    x: &[T],
    weight: &Matrix<T>,
    pre: &[T],
    act: Activation,
    grad_out: &[T],
) -> Result<(LayerGrads<T>, Vec<T>)> {
    let mut grads = LayerGrads::zeros(weight.rows, weight.cols);
    let gx = dense_backward_into(x, weight, pre, act, grad_out, &mut grads)?;
    Ok((grads, gx))
}

pub fn softmax<T: Real>(z: &[T]) -> Result<Vec<T>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericError);
    }
    if z.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Numerically stable `ln softmax(z)`.
pub fn log_softmax<T: Real>(z: &[T]) -> Result<Vec<T>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericError);
    }
    if z.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = z.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + total.ln();
    Ok(z.iter().map(|&v| v - lse).collect())
}

/// Probability floor inside the log.
pub const CE_FLOOR: f64 = 1e-12;

pub fn cross_entropy<T: Real>(p: &[T], target: usize) -> Result<T> {
    let pt = *p.get(target).ok_or(Error::IndexError {
        index: target,
        len: p.len(),
    })?;
    Ok(-(pt.max(T::of(CE_FLOOR))).ln())
}

/// Gradient of `cross_entropy(softmax(z), target)` with respect to `z`.
pub fn softmax_cross_entropy_grad<T: Real>(p: &[T], target: usize) -> Result<Vec<T>> {
    if target >= p.len() {
        return Err(Error::IndexError {
            index: target,
            len: p.len(),
        });
    }
    // Below the floor the loss is constant.
    if p[target] < T::of(CE_FLOOR) {
        return Ok(vec![T::zero(); p.len()]);
    }
    let mut g = p.to_vec();
    g[target] -= T::one();
    Ok(g)
}

/// Relative error between an analytic and a numerical derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `f` at `params`,
/// entry by entry, and returns the largest relative error. `params` is
/// restored before returning.
pub fn grad_check<F>(mut f: F, params: &mut [f64], analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length");
    assert!(eps > 0.0, "eps must be positive");
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        let plus = f(params);
        params[i] = orig - eps;
        let minus = f(params);
        params[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn embedding_lookup() {
        let e = Matrix::<f64>::identity(2);
        assert_eq!(embedding_forward(&[0], &e).unwrap().data, vec![1.0, 0.0]);
        let e = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = embedding_forward(&[1, 1], &e).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), &[3.0, 4.0]);
        let e4 = Matrix::<f64>::zeros(4, 2);
        assert!(matches!(
            embedding_forward(&[5], &e4),
            Err(Error::IndexError { index: 5, len: 4 })
        ));
    }

    #[test]
    fn conv_hand_example() {
        let x = col(&[1.0, 2.0, 3.0, 4.0]);
        let w = Matrix::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let (out, _) = conv1d_forward(&x, &w, &[0.0], 3).unwrap();
        assert_eq!((out.rows, out.cols), (2, 1));
        assert_eq!(out.data, vec![6.0, 9.0]);

        let zero = Matrix::zeros(1, 3);
        let (out, _) = conv1d_forward(&x, &zero, &[0.0], 3).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));

        let short = col(&[1.0, 2.0]);
        assert!(matches!(
            conv1d_forward(&short, &w, &[0.0], 3),
            Err(Error::SequenceTooShort { len: 2, kernel: 3 })
        ));
    }

    #[test]
    fn pool_examples() {
        let h = col(&[6.0, 9.0]);
        let (v, arg) = global_max_pool(&h).unwrap();
        assert_eq!(v, vec![9.0]);
        assert_eq!(arg, vec![1]);

        let one = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let (v, arg) = global_max_pool(&one).unwrap();
        assert_eq!(v, vec![1.0, -2.0, 0.5]);
        assert_eq!(arg, vec![0, 0, 0]);

        let (v, arg) = global_max_pool(&col(&[3.0, 3.0])).unwrap();
        assert_eq!((v, arg), (vec![3.0], vec![0]));

        assert!(matches!(
            global_max_pool(&Matrix::<f64>::zeros(0, 2)),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn pool_backward_routes_to_argmax() {
        let g = global_max_pool_backward(&[2.5], &[1], 2).unwrap();
        assert_eq!(g.data, vec![0.0, 2.5]);
    }

    #[test]
    fn dense_examples() {
        let id = Matrix::<f64>::identity(2);
        let (out, _) = dense_forward(&[-1.0, 2.0], &id, &[0.0, 0.0], Activation::Relu).unwrap();
        assert_eq!(out, vec![0.0, 2.0]);
        let w = Matrix::<f64>::zeros(1, 2);
        let (out, _) = dense_forward(&[7.0, 8.0], &w, &[5.0], Activation::None).unwrap();
        assert_eq!(out, vec![5.0]);
        assert!(matches!(
            dense_forward(&[1.0, 2.0, 3.0], &id, &[0.0, 0.0], Activation::None),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn dense_identity_backward_passes_gradient() {
        let id = Matrix::<f64>::identity(3);
        let x = [0.3, -0.2, 1.0];
        let (_, pre) = dense_forward(&x, &id, &[0.0; 3], Activation::None).unwrap();
        let (_, gx) = dense_backward(&x, &id, &pre, Activation::None, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(gx, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_zero_subgradient() {
        assert_eq!(relu_grad(0.0f64), 0.0);
        let id = Matrix::<f64>::identity(1);
        let (_, pre) = dense_forward(&[0.0], &id, &[0.0], Activation::Relu).unwrap();
        let (g, gx) = dense_backward(&[0.0], &id, &pre, Activation::Relu, &[1.0]).unwrap();
        assert_eq!(gx, vec![0.0]);
        assert_eq!(g.bias, vec![0.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0f64, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[0.0f64, 3.0f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        assert!(matches!(softmax(&[f64::NAN]), Err(Error::NumericError)));
        assert!(matches!(softmax(&[f64::INFINITY, 0.0]), Err(Error::NumericError)));
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&[0.5f64, 0.5], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(cross_entropy(&[1.0f64, 0.0], 0).unwrap(), 0.0);
        let floor = cross_entropy(&[1.0f64, 0.0], 1).unwrap();
        assert!((floor - 27.631021115928547).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&[1.0f64], 3),
            Err(Error::IndexError { .. })
        ));
    }

    #[test]
    fn grad_check_closed_forms() {
        let mut theta = [3.0];
        let err = grad_check(|p| p[0] * p[0], &mut theta, &[6.0], 1e-5);
        assert!(err < 1e-9, "{err}");
        assert_eq!(theta, [3.0]);

        let mut theta = [1.0, -2.0];
        let err = grad_check(|_| 4.0, &mut theta, &[0.0, 0.0], 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_catches_wrong_gradient() {
        let mut theta = [3.0];
        let err = grad_check(|p| p[0] * p[0], &mut theta, &[-6.0], 1e-5);
        assert!(err > 1.0);
    }

    /// Scalar probe: sum of the layer output weighted by fixed coefficients.
    fn weighted(out: &[f64], coef: &[f64]) -> f64 {
        out.iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (len, dim, kernel, filters) = (6, 3, 3, 4);
        let x = random_matrix(&mut rng, len, dim);
        let w = random_matrix(&mut rng, filters, kernel * dim);
        let b: Vec<f64> = (0..filters).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let steps = len - kernel + 1;
        let coef: Vec<f64> = (0..steps * filters).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (_, cache) = conv1d_forward(&x, &w, &b, kernel).unwrap();
        assert!(cache.pre.data.iter().all(|v| v.abs() > 1e-4));
        let gout = Matrix::from_vec(steps, filters, coef.clone()).unwrap();
        let (grads, gx) = conv1d_backward(&x, &w, &cache, &gout).unwrap();

        let mut wp = w.data.clone();
        let err = grad_check(
            |p| {
                let w = Matrix::from_vec(filters, kernel * dim, p.to_vec()).unwrap();
                weighted(&conv1d_forward(&x, &w, &b, kernel).unwrap().0.data, &coef)
            },
            &mut wp,
            &grads.weight.data,
            1e-5,
        );
        assert!(err < 1e-5, "weight {err}");

        let mut bp = b.clone();
        let err = grad_check(
            |p| weighted(&conv1d_forward(&x, &w, p, kernel).unwrap().0.data, &coef),
            &mut bp,
            &grads.bias,
            1e-5,
        );
        assert!(err < 1e-5, "bias {err}");

        let mut xp = x.data.clone();
        let err = grad_check(
            |p| {
                let x = Matrix::from_vec(len, dim, p.to_vec()).unwrap();
                weighted(&conv1d_forward(&x, &w, &b, kernel).unwrap().0.data, &coef)
            },
            &mut xp,
            &gx.data,
            1e-5,
        );
        assert!(err < 1e-5, "input {err}");
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, m) = (5, 4);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = random_matrix(&mut rng, m, n);
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let coef: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for act in [Activation::Relu, Activation::None] {
            let (_, pre) = dense_forward(&x, &w, &b, act).unwrap();
            assert!(pre.iter().all(|v| v.abs() > 1e-4));
            let (grads, gx) = dense_backward(&x, &w, &pre, act, &coef).unwrap();
            let mut wp = w.data.clone();
            let err = grad_check(
                |p| {
                    let w = Matrix::from_vec(m, n, p.to_vec()).unwrap();
                    weighted(&dense_forward(&x, &w, &b, act).unwrap().0, &coef)
                },
                &mut wp,
                &grads.weight.data,
                1e-5,
            );
            assert!(err < 1e-5);
            let mut xp = x.clone();
            let err = grad_check(
                |p| weighted(&dense_forward(p, &w, &b, act).unwrap().0, &coef),
                &mut xp,
                &gx,
                1e-5,
            );
            assert!(err < 1e-5);
        }
    }

    #[test]
    fn embedding_and_pool_backward_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = random_matrix(&mut rng, 5, 3);
        let ids = [4u32, 0, 4, 2];
        let coef: Vec<f64> = (0..ids.len() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gout = Matrix::from_vec(ids.len(), 3, coef.clone()).unwrap();
        let mut g = Matrix::zeros(5, 3);
        embedding_backward(&ids, &gout, &mut g).unwrap();
        let mut tp = table.data.clone();
        let err = grad_check(
            |p| {
                let t = Matrix::from_vec(5, 3, p.to_vec()).unwrap();
                weighted(&embedding_forward(&ids, &t).unwrap().data, &coef)
            },
            &mut tp,
            &g.data,
            1e-5,
        );
        assert!(err < 1e-5);

        let h = random_matrix(&mut rng, 4, 3);
        let (_, arg) = global_max_pool(&h).unwrap();
        let up = [0.7, -1.1, 0.4];
        let g = global_max_pool_backward(&up, &arg, 4).unwrap();
        let mut hp = h.data.clone();
        let err = grad_check(
            |p| {
                let h = Matrix::from_vec(4, 3, p.to_vec()).unwrap();
                weighted(&global_max_pool(&h).unwrap().0, &up)
            },
            &mut hp,
            &g.data,
            1e-5,
        );
        assert!(err < 1e-5);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let p = softmax(&z).unwrap();
        let g = softmax_cross_entropy_grad(&p, 2).unwrap();
        let mut zp = z.to_vec();
        let err = grad_check(
            |z| cross_entropy(&softmax(z).unwrap(), 2).unwrap(),
            &mut zp,
            &g,
            1e-5,
        );
        assert!(err < 1e-7, "{err}");
    }

    fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, n)
    }

    proptest! {
        #[test]
        fn softmax_is_on_simplex(z in prop::collection::vec(-500.0f64..500.0, 1..20)) {
            let p = softmax(&z).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let lp = log_softmax(&z).unwrap();
            for (a, b) in p.iter().zip(&lp) {
                prop_assert!((a.ln().max(-700.0) - b.max(-700.0)).abs() < 1e-9);
            }
        }

        #[test]
        fn conv_is_linear_before_activation(
            x1 in finite_vec(12), x2 in finite_vec(12), w in finite_vec(18),
            a in -3.0f64..3.0, b in -3.0f64..3.0,
        ) {
            let m1 = Matrix::from_vec(6, 2, x1).unwrap();
            let m2 = Matrix::from_vec(6, 2, x2).unwrap();
            let w = Matrix::from_vec(3, 6, w).unwrap();
            let zero = [0.0; 3];
            let mix = Matrix::from_vec(
                6, 2,
                m1.data.iter().zip(&m2.data).map(|(p, q)| a * p + b * q).collect(),
            ).unwrap();
            let lhs = conv1d_linear(&mix, &w, &zero, 3).unwrap();
            let c1 = conv1d_linear(&m1, &w, &zero, 3).unwrap();
            let c2 = conv1d_linear(&m2, &w, &zero, 3).unwrap();
            for i in 0..lhs.data.len() {
                let rhs = a * c1.data[i] + b * c2.data[i];
                prop_assert!((lhs.data[i] - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn pool_backward_conserves_mass(h in finite_vec(15), up in finite_vec(3)) {
            let h = Matrix::from_vec(5, 3, h).unwrap();
            let (_, arg) = global_max_pool(&h).unwrap();
            let g = global_max_pool_backward(&up, &arg, 5).unwrap();
            for f in 0..3 {
                let col: f64 = (0..5).map(|t| g.get(t, f)).sum();
                prop_assert_eq!(col, up[f]);
            }
        }
    }
}
