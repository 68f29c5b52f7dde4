//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure. The tape in [`super::tape`] calls these for
//! both the forward value and the backward pass, and the set-similarity and
//! inference code reuses the forward halves directly.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Reduction direction for row- or column-wise normalizations.
///
/// `Cols` reduces across the columns of each row (one result per row);
/// `Rows` reduces across the rows of each column (one result per column).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Rows,
    Cols,
}

/// Which GELU formula to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeluKind {
    /// `x * Phi(x)` with the exact error function.
    #[default]
    Exact,
    /// The `tanh` approximation.
    Tanh,
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    let bs = b.as_slice();
    let os = out.as_mut_slice();
    for i in 0..n {
        let orow = &mut os[i * m..(i + 1) * m];
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &bs[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    debug_assert_eq!(k, b.rows());
    Ok(out)
}

/// `a * b^T`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}^T", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.rows() {
            out[(i, j)] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `a^T * b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}^T x {:?}", a.shape(), b.shape()),
        ));
    }
    let m = b.cols();
    let mut out = Matrix::zeros(a.cols(), m);
    let os = out.as_mut_slice();
    for p in 0..a.rows() {
        let br = b.row(p);
        for (i, &api) in a.row(p).iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            for (o, &bv) in os[i * m..(i + 1) * m].iter_mut().zip(br) {
                *o += api * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax; every slice along `axis` sums to one.
pub fn softmax(m: &Matrix, axis: Axis) -> Matrix {
    match axis {
        Axis::Cols => {
            let mut out = m.clone();
            for i in 0..m.rows() {
                softmax_in_place(out.row_mut(i));
            }
            out
        }
        Axis::Rows => softmax(&m.transpose(), Axis::Cols).transpose(),
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// VJP of softmax given its output `y` and upstream `dy`.
pub fn softmax_backward(y: &Matrix, dy: &Matrix, axis: Axis) -> Matrix {
    match axis {
        Axis::Cols => {
            let mut dx = Matrix::zeros(y.rows(), y.cols());
            for i in 0..y.rows() {
                let (yr, dyr) = (y.row(i), dy.row(i));
                let inner = dot(yr, dyr);
                for ((d, &yv), &g) in dx.row_mut(i).iter_mut().zip(yr).zip(dyr) {
                    *d = yv * (g - inner);
                }
            }
            dx
        }
        Axis::Rows => softmax_backward(&y.transpose(), &dy.transpose(), Axis::Cols).transpose(),
    }
}

/// Log-sum-exp of one slice with max subtraction.
pub fn lse_slice(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-sum-exp per slice: `rows x 1` for `Axis::Cols`, `1 x cols` for `Axis::Rows`.
pub fn lse(m: &Matrix, axis: Axis) -> Matrix {
    match axis {
        Axis::Cols => {
            Matrix::from_vec(m.rows(), 1, m.row_iter().map(lse_slice).collect()).expect("rows x 1")
        }
        Axis::Rows => {
            let t = m.transpose();
            Matrix::from_vec(1, m.cols(), t.row_iter().map(lse_slice).collect()).expect("1 x cols")
        }
    }
}

/// VJP of [`lse`]: the upstream value per slice times that slice's softmax.
pub fn lse_backward(x: &Matrix, dout: &Matrix, axis: Axis) -> Matrix {
    let sm = softmax(x, axis);
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let g = match axis {
            Axis::Cols => dout.as_slice()[i],
            Axis::Rows => dout.as_slice()[j],
        };
        sm[(i, j)] * g
    })
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization with affine `gain` and `bias` (both `1 x cols`).
pub fn layer_norm(m: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    layer_norm_with_cache(m, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_cache(
    m: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    if gain.len() != m.cols() || bias.len() != m.cols() {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gain {} / bias {} for {} columns",
                gain.len(),
                bias.len(),
                m.cols()
            ),
        ));
    }
    let d = m.cols() as f64;
    let mut normalized = Matrix::zeros(m.rows(), m.cols());
    let mut inv_std = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let r = m.row(i);
        let mean = r.iter().sum::<f64>() / d;
        let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for (o, &x) in normalized.row_mut(i).iter_mut().zip(r) {
            *o = (x - mean) * is;
        }
    }
    let (g, b) = (gain.as_slice(), bias.as_slice());
    let mut y = normalized.clone();
    for i in 0..y.rows() {
        for ((v, gv), bv) in y.row_mut(i).iter_mut().zip(g).zip(b) {
            *v = *v * gv + bv;
        }
    }
    Ok((
        y,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// VJP of layer norm: returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Matrix,
    dy: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let xhat = &cache.normalized;
    let (rows, cols) = xhat.shape();
    let d = cols as f64;
    let g = gain.as_slice();
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgain = Matrix::zeros(1, cols);
    let mut dbias = Matrix::zeros(1, cols);
    for i in 0..rows {
        let (xr, dyr) = (xhat.row(i), dy.row(i));
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..cols {
            let dxh = dyr[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xr[j];
            dgain.as_mut_slice()[j] += dyr[j] * xr[j];
            dbias.as_mut_slice()[j] += dyr[j];
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            let dxh = dyr[j] * g[j];
            *o = is * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_TANH_COEFF: f64 = 0.044_715;

pub fn gelu_scalar(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Exact => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        GeluKind::Tanh => {
            0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_TANH_COEFF * x * x * x)).tanh())
        }
    }
}

pub fn gelu_derivative(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Exact => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
        GeluKind::Tanh => {
            let u = SQRT_2_OVER_PI * (x + GELU_TANH_COEFF * x * x * x);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_TANH_COEFF * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
    }
}

pub fn gelu(m: &Matrix, kind: GeluKind) -> Matrix {
    m.map(|x| gelu_scalar(x, kind))
}

/// Scales every row to unit L2 norm. Rows with norm below `eps` are divided
/// by `eps` instead, so an all-zero row stays zero.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> Matrix {
    l2_normalize_rows_with_norms(m, eps).0
}

pub fn l2_normalize_rows_with_norms(m: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let r = out.row_mut(i);
        let n = dot(r, r).sqrt();
        norms.push(n);
        let denom = n.max(eps);
        for x in r.iter_mut() {
            *x /= denom;
        }
    }
    (out, norms)
}

/// VJP of [`l2_normalize_rows`] given its output, the saved norms and `dy`.
pub fn l2_normalize_rows_backward(y: &Matrix, norms: &[f64], dy: &Matrix, eps: f64) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for (i, &n) in norms.iter().enumerate().take(y.rows()) {
        let (yr, gr) = (y.row(i), dy.row(i));
        if n >= eps {
            let proj = dot(yr, gr);
            for ((o, &yv), &g) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                *o = (g - proj * yv) / n;
            }
        } else {
            for (o, &g) in dx.row_mut(i).iter_mut().zip(gr) {
                *o = g / eps;
            }
        }
    }
    dx
}

/// Divides each column by its sum, floored at `eps` so a starved column
/// does not divide by zero.
pub fn normalize_cols(m: &Matrix, eps: f64) -> Matrix {
    let sums = m.col_sums();
    let s = sums.as_slice();
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] / s[j].max(eps))
}

pub fn normalize_cols_backward(x: &Matrix, dy: &Matrix, eps: f64) -> Matrix {
    let sums = x.col_sums();
    let s = sums.as_slice();
    let mut weighted = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (j, w) in weighted.iter_mut().enumerate() {
            *w += dy[(i, j)] * x[(i, j)];
        }
    }
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        if s[j] >= eps {
            dy[(i, j)] / s[j] - weighted[j] / (s[j] * s[j])
        } else {
            dy[(i, j)] / eps
        }
    })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let v = Matrix::from_rows(&[[0.0], [1.0]]);
        assert_eq!(matmul(&m, &v).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &a),
            Err(Error::Shape { op: "matmul", .. })
        ));
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, 1.0]]);
        let b = Matrix::from_rows(&[[2.0, 1.0, -1.0], [0.0, 4.0, 2.0]]);
        assert_eq!(
            matmul_nt(&a, &b).unwrap(),
            matmul(&a, &b.transpose()).unwrap()
        );
        assert_eq!(
            matmul_tn(&a, &b).unwrap(),
            matmul(&a.transpose(), &b).unwrap()
        );
    }

    #[test]
    fn softmax_cases() {
        let z = softmax(&Matrix::from_rows(&[[0.0, 0.0]]), Axis::Cols);
        assert_eq!(z.as_slice(), &[0.5, 0.5]);
        let big = softmax(&Matrix::from_rows(&[[1000.0, 1000.0]]), Axis::Cols);
        assert_eq!(big.as_slice(), &[0.5, 0.5]);
        let s = softmax(&Matrix::from_rows(&[[1.0, 2.0], [3.0, 0.0]]), Axis::Cols);
        for r in s.row_iter() {
            assert!(close(r.iter().sum(), 1.0, 1e-12));
        }
        let c = softmax(&Matrix::from_rows(&[[1.0, 2.0], [3.0, 0.0]]), Axis::Rows);
        for v in c.col_sums().as_slice() {
            assert!(close(*v, 1.0, 1e-12));
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Matrix::filled(1, 4, 1.0);
        let zeros = Matrix::zeros(1, 4);
        let constant = Matrix::filled(1, 4, 3.5);
        let y = layer_norm(&constant, &ones, &zeros, 1e-5).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));

        let g = Matrix::filled(1, 2, 1.0);
        let b = Matrix::zeros(1, 2);
        let y = layer_norm(&Matrix::from_rows(&[[1.0, -1.0]]), &g, &b, 1e-300).unwrap();
        assert!(close(y[(0, 0)], 1.0, 1e-12) && close(y[(0, 1)], -1.0, 1e-12));

        assert!(layer_norm(&constant, &g, &b, 1e-5).is_err());
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(gelu_scalar(0.0, GeluKind::Exact), 0.0);
        assert!(close(gelu_scalar(20.0, GeluKind::Exact), 20.0, 1e-9));
        assert!(close(gelu_scalar(-20.0, GeluKind::Exact), 0.0, 1e-9));
        assert!(close(gelu_scalar(20.0, GeluKind::Tanh), 20.0, 1e-9));
    }

    #[test]
    fn lse_cases() {
        let v = lse(&Matrix::from_rows(&[[0.0, 0.0]]), Axis::Cols);
        assert!(close(v[(0, 0)], 2f64.ln(), 1e-15));
        assert_eq!(lse(&Matrix::from_rows(&[[-3.25]]), Axis::Cols)[(0, 0)], -3.25);
        let big = lse(&Matrix::from_rows(&[[1000.0, 999.0]]), Axis::Cols)[(0, 0)];
        let oracle = 1000.0 + (1.0 + (-1f64).exp()).ln();
        assert!(close(big, oracle, 1e-12));
        let by_col = lse(&Matrix::from_rows(&[[0.0], [0.0]]), Axis::Rows);
        assert_eq!(by_col.shape(), (1, 1));
        assert!(close(by_col[(0, 0)], 2f64.ln(), 1e-15));
    }

    #[test]
    fn l2_normalize_cases() {
        let y = l2_normalize_rows(&Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0]]), 1e-12);
        assert!(close(y[(0, 0)], 0.6, 1e-15) && close(y[(0, 1)], 0.8, 1e-15));
        assert_eq!(y.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_cols_sums_to_one() {
        let m = Matrix::from_rows(&[[0.2, 0.9], [0.8, 0.1], [0.5, 0.5]]);
        let y = normalize_cols(&m, 1e-8);
        for v in y.col_sums().as_slice() {
            assert!(close(*v, 1.0, 1e-12));
        }
        let starved = normalize_cols(&Matrix::zeros(3, 1), 1e-8);
        assert!(starved.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_symmetry() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(close(sigmoid(1.0), 0.731_058_578_630_004_9, 1e-15));
        assert!(close(sigmoid(-40.0) + sigmoid(40.0), 1.0, 1e-15));
    }
}
