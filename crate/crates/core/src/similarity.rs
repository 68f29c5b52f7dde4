//! Set-to-set similarity functions and their closed-form gradients.
//!
//! All four functions work on the cosine matrix `C[i][j] = cos(x_i, y_j)`
//! between the (unnormalized) elements of two embedding sets:
//!
//! * smooth-Chamfer: `1/(2 a K1) sum_i LSE_j(a C_ij) + 1/(2 a K2) sum_j LSE_i(a C_ij)`
//! * Chamfer: the same with `max` in place of `LSE / a`
//! * MIL: `max_ij C_ij`
//! * MP: `sum_ij sigmoid(mp_a C_ij + mp_b)`
//!
//! Gradients are computed in two stages: `ds/dC` from the formula, then the
//! chain rule through row normalization back to the raw elements.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, l2_normalize_rows_with_norms, lse_slice, sigmoid};
use crate::tensor::{Axis, Matrix, Tape, Var};

/// Rows with L2 norm below this are treated as zero vectors (cosine 0).
pub const COSINE_EPS: f64 = 1e-12;

/// `K x D` embedding elements of one sample, stored unnormalized.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    elems: Matrix,
}

impl EmbeddingSet {
    pub fn new(elems: Matrix) -> Result<Self> {
        if elems.rows() == 0 || elems.cols() == 0 {
            return Err(Error::shape(
                "embedding_set",
                format!("empty set {:?}", elems.shape()),
            ));
        }
        if !elems.is_finite() {
            return Err(Error::Numeric {
                stage: "embedding set".into(),
                iteration: None,
            });
        }
        Ok(EmbeddingSet { elems })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        EmbeddingSet::new(Matrix::from_rows(rows))
    }

    /// Cardinality `K`.
    pub fn len(&self) -> usize {
        self.elems.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.elems.cols()
    }

    pub fn elems(&self) -> &Matrix {
        &self.elems
    }

    pub fn into_matrix(self) -> Matrix {
        self.elems
    }

    /// Keeps only the rows where `keep` is true.
    pub fn restrict(&self, keep: &[bool]) -> Result<EmbeddingSet> {
        let idx: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(i, &k)| k && *i < self.len())
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Err(Error::Config("slot mask keeps no elements".into()));
        }
        EmbeddingSet::new(self.elems.select_rows(&idx))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimilarityKind {
    #[serde(rename = "sc")]
    SmoothChamfer,
    #[serde(rename = "chamfer")]
    Chamfer,
    #[serde(rename = "mil")]
    Mil,
    #[serde(rename = "mp")]
    Mp,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 4] = [
        SimilarityKind::SmoothChamfer,
        SimilarityKind::Chamfer,
        SimilarityKind::Mil,
        SimilarityKind::Mp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::SmoothChamfer => "sc",
            SimilarityKind::Chamfer => "chamfer",
            SimilarityKind::Mil => "mil",
            SimilarityKind::Mp => "mp",
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sc" | "smooth-chamfer" | "smooth_chamfer" => Ok(SimilarityKind::SmoothChamfer),
            "chamfer" => Ok(SimilarityKind::Chamfer),
            "mil" => Ok(SimilarityKind::Mil),
            "mp" => Ok(SimilarityKind::Mp),
            other => Err(Error::Config(format!("unknown similarity kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    pub kind: SimilarityKind,
    /// Log-sum-exp temperature for smooth-Chamfer.
    pub alpha: f64,
    /// Initial slope of the MP sigmoid (trained alongside the model).
    pub mp_a: Option<f64>,
    /// Initial offset of the MP sigmoid.
    pub mp_b: Option<f64>,
    /// Average MP over pairs instead of summing. Off by default.
    pub mp_mean: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            kind: SimilarityKind::SmoothChamfer,
            alpha: 16.0,
            mp_a: Some(5.0),
            mp_b: Some(0.0),
            mp_mean: false,
        }
    }
}

impl SimilarityConfig {
    pub fn smooth_chamfer(alpha: f64) -> Self {
        SimilarityConfig {
            kind: SimilarityKind::SmoothChamfer,
            alpha,
            ..Default::default()
        }
    }

    pub fn of_kind(kind: SimilarityKind) -> Self {
        SimilarityConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn mp(a: f64, b: f64) -> Self {
        SimilarityConfig {
            kind: SimilarityKind::Mp,
            mp_a: Some(a),
            mp_b: Some(b),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.kind == SimilarityKind::Mp {
            match (self.mp_a, self.mp_b) {
                (Some(a), Some(b)) if a.is_finite() && b.is_finite() => {}
                _ => return Err(Error::Config("MP similarity needs finite mp_a and mp_b".into())),
            }
        }
        Ok(())
    }

    fn mp_params(&self) -> Result<(f64, f64)> {
        match (self.mp_a, self.mp_b) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Config("MP similarity needs mp_a and mp_b".into())),
        }
    }

    fn expect_kind(&self, kind: SimilarityKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind} config, got {}",
                self.kind
            )));
        }
        self.validate()
    }
}

/// Gradient of a scalar similarity with respect to the raw elements of both sets.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub d_s1: Matrix,
    pub d_s2: Matrix,
}

/// Gradient of MP with respect to its sigmoid slope and offset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MpParamGrad {
    pub d_a: f64,
    pub d_b: f64,
}

#[derive(Clone, Debug)]
pub struct SimilarityGrad {
    pub value: f64,
    pub elems: PairGrad,
    pub mp: MpParamGrad,
}

/// Counts of zero-norm rows encountered while building a cosine matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CosineDiagnostics {
    pub zero_rows_1: usize,
    pub zero_rows_2: usize,
}

/// Unit-normalized rows plus the original norms; zero rows stay zero.
#[derive(Clone, Debug)]
pub struct NormalizedSet {
    pub unit: Matrix,
    pub norms: Vec<f64>,
}

impl NormalizedSet {
    pub fn of(m: &Matrix) -> NormalizedSet {
        let (mut unit, norms) = l2_normalize_rows_with_norms(m, COSINE_EPS);
        for (i, &n) in norms.iter().enumerate() {
            if n < COSINE_EPS {
                unit.row_mut(i).fill(0.0);
            }
        }
        NormalizedSet { unit, norms }
    }

    pub fn zero_rows(&self) -> usize {
        self.norms.iter().filter(|&&n| n < COSINE_EPS).count()
    }

    /// Pulls a gradient on the unit rows back to the raw rows.
    pub fn backward(&self, d_unit: &Matrix) -> Matrix {
        let mut dx = ops::l2_normalize_rows_backward(&self.unit, &self.norms, d_unit, COSINE_EPS);
        for (i, &n) in self.norms.iter().enumerate() {
            if n < COSINE_EPS {
                dx.row_mut(i).fill(0.0);
            }
        }
        dx
    }
}

fn check_dims(s1: &EmbeddingSet, s2: &EmbeddingSet) -> Result<()> {
    if s1.dim() != s2.dim() {
        return Err(Error::shape(
            "similarity",
            format!("element dims {} vs {}", s1.dim(), s2.dim()),
        ));
    }
    Ok(())
}

/// `K1 x K2` matrix of cosine similarities between elements.
pub fn cosine_matrix(s1: &EmbeddingSet, s2: &EmbeddingSet) -> Result<Matrix> {
    cosine_matrix_with_diagnostics(s1, s2).map(|(c, _)| c)
}

pub fn cosine_matrix_with_diagnostics(
    s1: &EmbeddingSet,
    s2: &EmbeddingSet,
) -> Result<(Matrix, CosineDiagnostics)> {
    check_dims(s1, s2)?;
    let n1 = NormalizedSet::of(s1.elems());
    let n2 = NormalizedSet::of(s2.elems());
    let diag = CosineDiagnostics {
        zero_rows_1: n1.zero_rows(),
        zero_rows_2: n2.zero_rows(),
    };
    if diag != CosineDiagnostics::default() {
        log::debug!("cosine matrix over zero-norm elements: {diag:?}");
    }
    Ok((ops::matmul_nt(&n1.unit, &n2.unit)?, diag))
}

/// Similarity value from a precomputed cosine matrix.
pub fn score_from_cosine(c: &Matrix, cfg: &SimilarityConfig) -> Result<f64> {
    Ok(match cfg.kind {
        SimilarityKind::SmoothChamfer => smooth_chamfer_from_cosine(c, cfg.alpha),
        SimilarityKind::Chamfer => chamfer_from_cosine(c),
        SimilarityKind::Mil => mil_from_cosine(c),
        SimilarityKind::Mp => {
            let (a, b) = cfg.mp_params()?;
            mp_from_cosine(c, a, b, cfg.mp_mean)
        }
    })
}

pub(crate) fn smooth_chamfer_from_cosine(c: &Matrix, alpha: f64) -> f64 {
    let (k1, k2) = c.shape();
    let mut buf = Vec::with_capacity(k1.max(k2));
    let mut rows = 0.0;
    for i in 0..k1 {
        buf.clear();
        buf.extend(c.row(i).iter().map(|v| alpha * v));
        rows += lse_slice(&buf);
    }
    let mut cols = 0.0;
    for j in 0..k2 {
        buf.clear();
        buf.extend((0..k1).map(|i| alpha * c[(i, j)]));
        cols += lse_slice(&buf);
    }
    rows / (2.0 * alpha * k1 as f64) + cols / (2.0 * alpha * k2 as f64)
}

/// Index of the first maximum.
fn argmax(it: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub(crate) fn chamfer_from_cosine(c: &Matrix) -> f64 {
    let (k1, k2) = c.shape();
    let rows: f64 = (0..k1).map(|i| argmax(c.row(i).iter().copied()).1).sum();
    let cols: f64 = (0..k2)
        .map(|j| argmax((0..k1).map(|i| c[(i, j)])).1)
        .sum();
    rows / (2.0 * k1 as f64) + cols / (2.0 * k2 as f64)
}

pub(crate) fn mil_from_cosine(c: &Matrix) -> f64 {
    argmax(c.as_slice().iter().copied()).1
}

pub(crate) fn mp_from_cosine(c: &Matrix, a: f64, b: f64, mean: bool) -> f64 {
    let s: f64 = c.as_slice().iter().map(|&v| sigmoid(a * v + b)).sum();
    if mean {
        s / c.len() as f64
    } else {
        s
    }
}

/// Value and `ds/dC` for any kind.
pub fn cosine_gradient(c: &Matrix, cfg: &SimilarityConfig) -> Result<(f64, Matrix, MpParamGrad)> {
    let (k1, k2) = c.shape();
    let mut g = Matrix::zeros(k1, k2);
    let mut mp = MpParamGrad::default();
    let value = match cfg.kind {
        SimilarityKind::SmoothChamfer => {
            let a = cfg.alpha;
            let scaled = c.scale(a);
            let by_row = ops::softmax(&scaled, Axis::Cols);
            let by_col = ops::softmax(&scaled, Axis::Rows);
            let (w1, w2) = (1.0 / (2.0 * k1 as f64), 1.0 / (2.0 * k2 as f64));
            for i in 0..k1 {
                for j in 0..k2 {
                    g[(i, j)] = w1 * by_row[(i, j)] + w2 * by_col[(i, j)];
                }
            }
            smooth_chamfer_from_cosine(c, a)
        }
        SimilarityKind::Chamfer => {
            let (w1, w2) = (1.0 / (2.0 * k1 as f64), 1.0 / (2.0 * k2 as f64));
            for i in 0..k1 {
                let (j, _) = argmax(c.row(i).iter().copied());
                g[(i, j)] += w1;
            }
            for j in 0..k2 {
                let (i, _) = argmax((0..k1).map(|i| c[(i, j)]));
                g[(i, j)] += w2;
            }
            chamfer_from_cosine(c)
        }
        SimilarityKind::Mil => {
            let (flat, v) = argmax(c.as_slice().iter().copied());
            g.as_mut_slice()[flat] = 1.0;
            v
        }
        SimilarityKind::Mp => {
            let (a, b) = cfg.mp_params()?;
            let norm = if cfg.mp_mean { 1.0 / c.len() as f64 } else { 1.0 };
            let mut total = 0.0;
            for (gv, &cv) in g.as_mut_slice().iter_mut().zip(c.as_slice()) {
                let s = sigmoid(a * cv + b);
                let ds = s * (1.0 - s) * norm;
                total += s;
                *gv = a * ds;
                mp.d_a += cv * ds;
                mp.d_b += ds;
            }
            total * norm
        }
    };
    Ok((value, g, mp))
}

pub fn smooth_chamfer(s1: &EmbeddingSet, s2: &EmbeddingSet, cfg: &SimilarityConfig) -> Result<f64> {
    cfg.expect_kind(SimilarityKind::SmoothChamfer)?;
    Ok(smooth_chamfer_from_cosine(&cosine_matrix(s1, s2)?, cfg.alpha))
}

pub fn chamfer(s1: &EmbeddingSet, s2: &EmbeddingSet) -> Result<f64> {
    Ok(chamfer_from_cosine(&cosine_matrix(s1, s2)?))
}

pub fn mil(s1: &EmbeddingSet, s2: &EmbeddingSet) -> Result<f64> {
    Ok(mil_from_cosine(&cosine_matrix(s1, s2)?))
}

pub fn mp(s1: &EmbeddingSet, s2: &EmbeddingSet, cfg: &SimilarityConfig) -> Result<f64> {
    cfg.expect_kind(SimilarityKind::Mp)?;
    let (a, b) = cfg.mp_params()?;
    Ok(mp_from_cosine(&cosine_matrix(s1, s2)?, a, b, cfg.mp_mean))
}

/// Dispatches on `cfg.kind`.
pub fn similarity(s1: &EmbeddingSet, s2: &EmbeddingSet, cfg: &SimilarityConfig) -> Result<f64> {
    cfg.validate()?;
    score_from_cosine(&cosine_matrix(s1, s2)?, cfg)
}

/// Value and element gradients of any similarity kind.
pub fn similarity_grad(
    s1: &EmbeddingSet,
    s2: &EmbeddingSet,
    cfg: &SimilarityConfig,
) -> Result<SimilarityGrad> {
    cfg.validate()?;
    check_dims(s1, s2)?;
    let n1 = NormalizedSet::of(s1.elems());
    let n2 = NormalizedSet::of(s2.elems());
    let c = ops::matmul_nt(&n1.unit, &n2.unit)?;
    let (value, g, mp) = cosine_gradient(&c, cfg)?;
    Ok(SimilarityGrad {
        value,
        elems: pair_grad_from_cosine(&n1, &n2, &g)?,
        mp,
    })
}

/// Chains `ds/dC` back through `C = N1 N2^T` and the row normalizations.
pub fn pair_grad_from_cosine(
    n1: &NormalizedSet,
    n2: &NormalizedSet,
    d_cos: &Matrix,
) -> Result<PairGrad> {
    let d_unit1 = ops::matmul(d_cos, &n2.unit)?;
    let d_unit2 = ops::matmul_tn(d_cos, &n1.unit)?;
    Ok(PairGrad {
        d_s1: n1.backward(&d_unit1),
        d_s2: n2.backward(&d_unit2),
    })
}

/// Smooth-Chamfer value with closed-form gradients for both sets.
pub fn smooth_chamfer_grad(
    s1: &EmbeddingSet,
    s2: &EmbeddingSet,
    cfg: &SimilarityConfig,
) -> Result<(f64, PairGrad)> {
    cfg.expect_kind(SimilarityKind::SmoothChamfer)?;
    let g = similarity_grad(s1, s2, cfg)?;
    Ok((g.value, g.elems))
}

/// Records smooth-Chamfer between two `K x D` values on a tape, built from
/// generic primitives (normalize, product, log-sum-exp, sum).
pub fn smooth_chamfer_on_tape(tape: &mut Tape, s1: Var, s2: Var, alpha: f64) -> Result<Var> {
    let (k1, k2) = (tape.value(s1).rows(), tape.value(s2).rows());
    let n1 = tape.l2_normalize_rows(s1, COSINE_EPS);
    let n2 = tape.l2_normalize_rows(s2, COSINE_EPS);
    let c = tape.matmul_nt(n1, n2)?;
    let z = tape.scale(c, alpha);
    let per_row = tape.lse(z, Axis::Cols);
    let per_col = tape.lse(z, Axis::Rows);
    let sr = tape.sum(per_row);
    let sc = tape.sum(per_col);
    let a = tape.scale(sr, 1.0 / (2.0 * alpha * k1 as f64));
    let b = tape.scale(sc, 1.0 / (2.0 * alpha * k2 as f64));
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> EmbeddingSet {
        EmbeddingSet::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let e1 = set(&[&[1.0, 0.0]]);
        let e2 = set(&[&[0.0, 1.0]]);
        assert_eq!(cosine_matrix(&e1, &e1).unwrap()[(0, 0)], 1.0);
        assert_eq!(cosine_matrix(&e1, &e2).unwrap()[(0, 0)], 0.0);
        let c = cosine_matrix(&set(&[&[3.0, 4.0]]), &set(&[&[4.0, 3.0]])).unwrap();
        assert!((c[(0, 0)] - 0.96).abs() < 1e-15);
    }

    #[test]
    fn zero_row_gives_zero_cosine_and_diagnostic() {
        let a = set(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let b = set(&[&[1.0, 1.0]]);
        let (c, d) = cosine_matrix_with_diagnostics(&a, &b).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
        assert_eq!(d.zero_rows_1, 1);
        let g = similarity_grad(&a, &b, &SimilarityConfig::default()).unwrap();
        assert!(g.elems.d_s1.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = set(&[&[1.0, 0.0]]);
        let b = set(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(
            similarity(&a, &b, &SimilarityConfig::default()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn smooth_chamfer_examples() {
        let x = set(&[&[1.0, 2.0, -1.0]]);
        let y = set(&[&[0.5, -1.0, 2.0]]);
        let c = cosine_matrix(&x, &y).unwrap()[(0, 0)];
        for alpha in [0.5, 1.0, 16.0, 300.0] {
            let s = smooth_chamfer(&x, &y, &SimilarityConfig::smooth_chamfer(alpha)).unwrap();
            assert!((s - c).abs() < 1e-14, "alpha {alpha}: {s} vs {c}");
        }

        // per-element LSE = 16 + ln(1 + e^-16), averaged then divided by alpha
        let s = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = smooth_chamfer(&s, &s, &SimilarityConfig::smooth_chamfer(16.0)).unwrap();
        let oracle = (16.0 + (1.0 + (-16f64).exp()).ln()) / 16.0;
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 1.000_000_007).abs() < 1e-8);
    }

    #[test]
    fn chamfer_mil_mp_examples() {
        let e1 = set(&[&[1.0, 0.0]]);
        let e12 = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((chamfer(&e1, &e12).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(chamfer(&e1, &e1).unwrap(), 1.0);

        assert_eq!(mil(&e1, &e1).unwrap(), 1.0);
        assert_eq!(mil(&e1, &set(&[&[-1.0, 0.0]])).unwrap(), -1.0);
        assert_eq!(mil(&e12, &set(&[&[0.0, 1.0]])).unwrap(), 1.0);

        let cfg = SimilarityConfig::mp(1.0, 0.0);
        let e2 = set(&[&[0.0, 1.0]]);
        assert_eq!(mp(&e1, &e2, &cfg).unwrap(), 0.5);
        assert!((mp(&e1, &e1, &cfg).unwrap() - 0.731_058_578_630_004_9).abs() < 1e-12);
        let a = set(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let b = set(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(mp(&a, &b, &cfg).unwrap(), 2.0);
        let mean = SimilarityConfig {
            mp_mean: true,
            ..cfg
        };
        assert_eq!(mp(&a, &b, &mean).unwrap(), 0.5);
    }

    #[test]
    fn dispatch_and_config_errors() {
        let x = set(&[&[1.0, 0.5]]);
        let v = similarity(&x, &x, &SimilarityConfig::of_kind(SimilarityKind::Mil)).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let mut bad = SimilarityConfig::mp(1.0, 0.0);
        bad.mp_b = None;
        assert!(matches!(similarity(&x, &x, &bad), Err(Error::Config(_))));
        let neg = SimilarityConfig::smooth_chamfer(-1.0);
        assert!(matches!(similarity(&x, &x, &neg), Err(Error::Config(_))));
        assert!(matches!(
            smooth_chamfer(&x, &x, &SimilarityConfig::of_kind(SimilarityKind::Mil)),
            Err(Error::Config(_))
        ));
        assert!("bogus".parse::<SimilarityKind>().is_err());
        assert_eq!("SC".parse::<SimilarityKind>().unwrap(), SimilarityKind::SmoothChamfer);
    }

    #[test]
    fn singleton_gradient_weight_is_one() {
        let x = set(&[&[1.0, 2.0]]);
        let y = set(&[&[-0.5, 1.0]]);
        let c = cosine_matrix(&x, &y).unwrap();
        let (_, g, _) = cosine_gradient(&c, &SimilarityConfig::default()).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn mil_tie_breaks_to_first_pair() {
        let x = set(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let c = cosine_matrix(&x, &x).unwrap();
        let (_, g, _) = cosine_gradient(&c, &SimilarityConfig::of_kind(SimilarityKind::Mil)).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn restrict_rejects_empty_mask() {
        let x = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(x.restrict(&[false, false]).is_err());
        assert_eq!(x.restrict(&[false, true]).unwrap().len(), 1);
    }
}
