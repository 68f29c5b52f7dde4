//! Dense matrices, the differentiable primitives the model needs, and a
//! reverse-mode tape over them.

mod matrix;
pub mod ops;
mod tape;

pub use matrix::Matrix;
pub use ops::{
    gelu, l2_normalize_rows, layer_norm, lse, matmul, softmax, Axis, GeluKind,
};
pub use tape::{Gradients, Tape, Var};

/// Norm-wise relative error `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
