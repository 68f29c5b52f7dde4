//! Triplet ranking loss with hardest-negative mining, plus the slot
//! diversity and cross-modal MMD regularizers.
//!
//! Every term returns its value together with closed-form gradients on the
//! embedding sets (and, for the diversity term, on the pre-fusion slots).
//! The trainer seeds the predictor tapes with these.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MatchTable;
use crate::error::{Error, Result};
use crate::similarity::{
    cosine_gradient, pair_grad_from_cosine, score_from_cosine, EmbeddingSet, MpParamGrad,
    NormalizedSet, SimilarityConfig,
};
use crate::tensor::{ops, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Triplet margin `delta`.
    pub margin: f64,
    /// Weight of both regularizers.
    pub reg_weight: f64,
    pub hardest_mining: bool,
    /// Gaussian kernel `exp(-gamma |x - y|^2)` bandwidth for MMD.
    pub mmd_gamma: f64,
    /// Replace `mmd_gamma` by the inverse median pairwise squared distance.
    pub mmd_median_heuristic: bool,
    /// Compare unit-normalized elements in MMD.
    pub mmd_normalize: bool,
    pub sim: SimilarityConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            reg_weight: 0.01,
            hardest_mining: true,
            mmd_gamma: 0.5,
            mmd_median_heuristic: false,
            mmd_normalize: true,
            sim: SimilarityConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("loss.margin must be >= 0, got {}", self.margin)));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Config(format!(
                "loss.reg_weight must be >= 0, got {}",
                self.reg_weight
            )));
        }
        if !(self.mmd_gamma > 0.0 && self.mmd_gamma.is_finite()) {
            return Err(Error::Config("loss.mmd_gamma must be > 0".into()));
        }
        self.sim.validate()
    }
}

/// Embedding sets of a batch of images and all of their captions.
#[derive(Clone, Debug)]
pub struct Batch {
    pub visual: Vec<EmbeddingSet>,
    pub text: Vec<EmbeddingSet>,
    pub matches: MatchTable,
}

impl Batch {
    pub fn new(visual: Vec<EmbeddingSet>, text: Vec<EmbeddingSet>, matches: MatchTable) -> Result<Self> {
        if visual.len() != matches.images() || text.len() != matches.captions() {
            return Err(Error::shape(
                "batch",
                format!(
                    "{} images / {} captions vs match table {} / {}",
                    visual.len(),
                    text.len(),
                    matches.images(),
                    matches.captions()
                ),
            ));
        }
        let dim = visual.first().map(EmbeddingSet::dim);
        if visual.iter().chain(&text).any(|s| Some(s.dim()) != dim) {
            return Err(Error::shape("batch", "element dimension differs across sets"));
        }
        Ok(Batch {
            visual,
            text,
            matches,
        })
    }
}

/// Triplet loss value with gradients on every set of the batch.
#[derive(Clone, Debug)]
pub struct TripletOutput {
    pub loss: f64,
    pub d_visual: Vec<Matrix>,
    pub d_text: Vec<Matrix>,
    pub d_mp: MpParamGrad,
    /// Hinge terms with positive value.
    pub active: usize,
}

fn first_argmax(it: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in it {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Sum over positive pairs of the image-anchored and caption-anchored
/// hinges `[delta + s(neg) - s(pos)]_+`. Captions of the anchor image are
/// never negatives.
pub fn triplet_loss(batch: &Batch, cfg: &LossConfig) -> Result<TripletOutput> {
    cfg.validate()?;
    let nv: Vec<NormalizedSet> = batch.visual.iter().map(|s| NormalizedSet::of(s.elems())).collect();
    let nt: Vec<NormalizedSet> = batch.text.iter().map(|s| NormalizedSet::of(s.elems())).collect();
    let cos: Vec<Vec<Matrix>> = nv
        .par_iter()
        .map(|v| {
            nt.iter()
                .map(|t| ops::matmul_nt(&v.unit, &t.unit))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let scores: Vec<Vec<f64>> = cos
        .par_iter()
        .map(|row| row.iter().map(|c| score_from_cosine(c, &cfg.sim)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;

    let m = &batch.matches;
    let (n_img, n_cap) = (m.images(), m.captions());
    let mut zero = TripletOutput {
        loss: 0.0,
        d_visual: batch.visual.iter().map(|s| Matrix::zeros(s.len(), s.dim())).collect(),
        d_text: batch.text.iter().map(|s| Matrix::zeros(s.len(), s.dim())).collect(),
        d_mp: MpParamGrad::default(),
        active: 0,
    };
    if n_img < 2 {
        log::warn!("triplet loss on a batch with one image has no negatives; returning 0");
        return Ok(zero);
    }

    // dL/ds for every (image, caption) score
    let mut w = vec![vec![0.0; n_cap]; n_img];
    let mut loss = 0.0;
    let mut active = 0;
    let mut hinge = |w: &mut Vec<Vec<f64>>, pos: (usize, usize), neg: (usize, usize), s_neg: f64| {
        let h = cfg.margin + s_neg - scores[pos.0][pos.1];
        if h > 0.0 {
            loss += h;
            active += 1;
            w[neg.0][neg.1] += 1.0;
            w[pos.0][pos.1] -= 1.0;
        }
    };
    for i in 0..n_img {
        for &c in &m.image_captions[i] {
            let neg_caps = (0..n_cap).filter(|&c2| m.caption_image[c2] != i);
            let neg_imgs = (0..n_img).filter(|&i2| i2 != i);
            if cfg.hardest_mining {
                if let Some((c2, s)) = first_argmax(neg_caps.map(|c2| (c2, scores[i][c2]))) {
                    hinge(&mut w, (i, c), (i, c2), s);
                }
                if let Some((i2, s)) = first_argmax(neg_imgs.map(|i2| (i2, scores[i2][c]))) {
                    hinge(&mut w, (i, c), (i2, c), s);
                }
            } else {
                for c2 in neg_caps {
                    hinge(&mut w, (i, c), (i, c2), scores[i][c2]);
                }
                for i2 in neg_imgs {
                    hinge(&mut w, (i, c), (i2, c), scores[i2][c]);
                }
            }
        }
    }

    let contributions: Vec<Vec<(usize, f64, crate::similarity::PairGrad, MpParamGrad)>> = (0..n_img)
        .into_par_iter()
        .map(|i| {
            (0..n_cap)
                .filter(|&c| w[i][c] != 0.0)
                .map(|c| {
                    let (_, g, mp) = cosine_gradient(&cos[i][c], &cfg.sim)?;
                    Ok((c, w[i][c], pair_grad_from_cosine(&nv[i], &nt[c], &g)?, mp))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    for (i, row) in contributions.into_iter().enumerate() {
        for (c, coef, pg, mp) in row {
            zero.d_visual[i].axpy(coef, &pg.d_s1);
            zero.d_text[c].axpy(coef, &pg.d_s2);
            zero.d_mp.d_a += coef * mp.d_a;
            zero.d_mp.d_b += coef * mp.d_b;
        }
    }
    zero.loss = loss;
    zero.active = active;
    Ok(zero)
}

/// Mean over samples of `sum_{i != j} exp(-2 |e_i - e_j|^2)` on slot rows,
/// with its gradient per sample.
pub fn diversity_reg(slots: &[Matrix]) -> (f64, Vec<Matrix>) {
    if slots.is_empty() {
        return (0.0, Vec::new());
    }
    let inv_n = 1.0 / slots.len() as f64;
    let mut total = 0.0;
    let grads = slots
        .iter()
        .map(|e| {
            let (k, d) = e.shape();
            let mut g = Matrix::zeros(k, d);
            for i in 0..k {
                for j in (i + 1)..k {
                    let diff: Vec<f64> = e.row(i).iter().zip(e.row(j)).map(|(a, b)| a - b).collect();
                    let sq = ops::dot(&diff, &diff);
                    let kv = (-2.0 * sq).exp();
                    total += 2.0 * kv;
                    // both ordered pairs contribute -4 k (x_i - x_j)
                    let coef = -8.0 * kv * inv_n;
                    for (t, &dv) in diff.iter().enumerate() {
                        g[(i, t)] += coef * dv;
                        g[(j, t)] -= coef * dv;
                    }
                }
            }
            g
        })
        .collect();
    (total * inv_n, grads)
}

fn stack(sets: &[EmbeddingSet]) -> Matrix {
    let rows: Vec<&[f64]> = sets.iter().flat_map(|s| s.elems().row_iter()).collect();
    Matrix::from_rows(&rows)
}

fn unstack(m: &Matrix, sets: &[EmbeddingSet]) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(sets.len());
    let mut start = 0;
    for s in sets {
        let idx: Vec<usize> = (start..start + s.len()).collect();
        out.push(m.select_rows(&idx));
        start += s.len();
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Inverse of the median pairwise squared distance over both pools.
fn median_gamma(x: &Matrix, y: &Matrix) -> f64 {
    let rows: Vec<&[f64]> = x.row_iter().chain(y.row_iter()).collect();
    let mut d = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *med > 0.0 {
        1.0 / *med
    } else {
        1.0
    }
}

/// Accumulates `sum_{i,j} w k(a_i, b_j)` and, optionally, its gradient on `a`.
fn kernel_block(a: &Matrix, b: &Matrix, gamma: f64, skip_diag: bool, w: f64, ga: &mut Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            if skip_diag && i == j {
                continue;
            }
            let (ai, bj) = (a.row(i), b.row(j));
            let kv = (-gamma * sq_dist(ai, bj)).exp();
            total += kv;
            let coef = -2.0 * gamma * kv * w;
            for (t, (x, y)) in ai.iter().zip(bj).enumerate() {
                ga[(i, t)] += coef * (x - y);
            }
        }
    }
    total * w
}

/// Gradients of the MMD regularizer on each visual and text set.
#[derive(Clone, Debug)]
pub struct MmdOutput {
    pub value: f64,
    pub d_visual: Vec<Matrix>,
    pub d_text: Vec<Matrix>,
}

/// Unbiased Gaussian-kernel MMD^2 between the pooled visual and pooled
/// textual elements, clamped at 0.
pub fn mmd_reg(visual: &[EmbeddingSet], text: &[EmbeddingSet], cfg: &LossConfig) -> Result<MmdOutput> {
    if visual.is_empty() || text.is_empty() {
        return Err(Error::Config("MMD needs both modalities to be non-empty".into()));
    }
    let raw_x = stack(visual);
    let raw_y = stack(text);
    let (nx, ny) = (NormalizedSet::of(&raw_x), NormalizedSet::of(&raw_y));
    let (x, y) = if cfg.mmd_normalize {
        (&nx.unit, &ny.unit)
    } else {
        (&raw_x, &raw_y)
    };
    let gamma = if cfg.mmd_median_heuristic {
        median_gamma(x, y)
    } else {
        cfg.mmd_gamma
    };
    let (n, m) = (x.rows() as f64, y.rows() as f64);
    // a single element falls back to the biased within-pool term
    let wx = if x.rows() > 1 { 1.0 / (n * (n - 1.0)) } else { 1.0 };
    let wy = if y.rows() > 1 { 1.0 / (m * (m - 1.0)) } else { 1.0 };
    let wxy = 1.0 / (n * m);

    let mut gx = Matrix::zeros(x.rows(), x.cols());
    let mut gy = Matrix::zeros(y.rows(), y.cols());
    let mut scratch = Matrix::zeros(y.rows(), y.cols());
    // symmetric within-pool sums: each ordered pair differentiates both ends
    let kxx = kernel_block(x, x, gamma, x.rows() > 1, 2.0 * wx, &mut gx) / 2.0;
    let kyy = kernel_block(y, y, gamma, y.rows() > 1, 2.0 * wy, &mut gy) / 2.0;
    let kxy = kernel_block(x, y, gamma, false, -2.0 * wxy, &mut gx) / -2.0;
    kernel_block(y, x, gamma, false, -2.0 * wxy, &mut scratch);
    gy.add_assign(&scratch);
    let value = kxx + kyy - 2.0 * kxy;

    if value <= 0.0 {
        return Ok(MmdOutput {
            value: 0.0,
            d_visual: visual.iter().map(|s| Matrix::zeros(s.len(), s.dim())).collect(),
            d_text: text.iter().map(|s| Matrix::zeros(s.len(), s.dim())).collect(),
        });
    }
    if cfg.mmd_normalize {
        gx = nx.backward(&gx);
        gy = ny.backward(&gy);
    }
    Ok(MmdOutput {
        value,
        d_visual: unstack(&gx, visual),
        d_text: unstack(&gy, text),
    })
}

/// Pre-fusion slots `E^T` for every sample in a batch.
#[derive(Clone, Debug)]
pub struct BatchSlots {
    pub visual: Vec<Matrix>,
    pub text: Vec<Matrix>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub triplet: f64,
    pub diversity: f64,
    pub mmd: f64,
    pub total: f64,
}

/// Gradients of the total loss. The triplet-only set gradients are kept
/// separately for the untrained-slot diagnostic.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub d_visual_sets: Vec<Matrix>,
    pub d_text_sets: Vec<Matrix>,
    pub d_visual_slots: Vec<Matrix>,
    pub d_text_slots: Vec<Matrix>,
    pub d_mp: MpParamGrad,
    pub triplet_visual: Vec<Matrix>,
    pub triplet_text: Vec<Matrix>,
}

/// `L_tri + w (L_div + L_mmd)`, where `L_div` adds the per-modality means.
pub fn total_loss(batch: &Batch, slots: &BatchSlots, cfg: &LossConfig) -> Result<(LossParts, LossGrads)> {
    let tri = triplet_loss(batch, cfg)?;
    let (div_v, gdv) = diversity_reg(&slots.visual);
    let (div_t, gdt) = diversity_reg(&slots.text);
    let mmd = mmd_reg(&batch.visual, &batch.text, cfg)?;
    let w = cfg.reg_weight;
    let parts = LossParts {
        triplet: tri.loss,
        diversity: div_v + div_t,
        mmd: mmd.value,
        total: tri.loss + w * (div_v + div_t + mmd.value),
    };
    if !parts.total.is_finite() {
        return Err(Error::Numeric {
            stage: "loss".into(),
            iteration: None,
        });
    }
    let combine = |tri: &[Matrix], reg: &[Matrix]| -> Vec<Matrix> {
        tri.iter()
            .zip(reg)
            .map(|(t, r)| {
                let mut g = t.clone();
                g.axpy(w, r);
                g
            })
            .collect()
    };
    let scale = |gs: Vec<Matrix>| gs.into_iter().map(|g| g.scale(w)).collect::<Vec<_>>();
    Ok((
        parts,
        LossGrads {
            d_visual_sets: combine(&tri.d_visual, &mmd.d_visual),
            d_text_sets: combine(&tri.d_text, &mmd.d_text),
            d_visual_slots: scale(gdv),
            d_text_slots: scale(gdt),
            d_mp: tri.d_mp,
            triplet_visual: tri.d_visual,
            triplet_text: tri.d_text,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::SimilarityKind;

    fn unit(d: usize, i: usize, sign: f64) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = sign;
        v
    }

    fn singleton(v: &[f64]) -> EmbeddingSet {
        EmbeddingSet::from_rows(&[v]).unwrap()
    }

    /// Two images with one caption each; scores set by caption angle.
    fn two_pair_batch(pos: f64, neg: f64) -> Batch {
        // s(v0,t0)=s(v1,t1)=pos, s(v0,t1)=s(v1,t0)=neg using 3-d vectors
        let v0 = [1.0, 0.0, 0.0];
        let v1 = [0.0, 1.0, 0.0];
        let solve = |p: f64, n: f64| {
            let z = (1.0 - p * p - n * n).sqrt();
            (p, n, z)
        };
        let (a, b, z) = solve(pos, neg);
        let t0 = [a, b, z];
        let t1 = [b, a, z];
        Batch::new(
            vec![singleton(&v0), singleton(&v1)],
            vec![singleton(&t0), singleton(&t1)],
            MatchTable::new(vec![0, 1], 2).unwrap(),
        )
        .unwrap()
    }

    fn cfg(kind: SimilarityKind, margin: f64) -> LossConfig {
        LossConfig {
            margin,
            sim: SimilarityConfig::of_kind(kind),
            ..Default::default()
        }
    }

    #[test]
    fn hand_example_hinges() {
        let b = two_pair_batch(0.5, 0.6);
        let out = triplet_loss(&b, &cfg(SimilarityKind::SmoothChamfer, 0.1)).unwrap();
        assert!((out.loss - 0.8).abs() < 1e-12, "{}", out.loss);
        assert_eq!(out.active, 4);
    }

    #[test]
    fn inactive_hinge_gives_zero() {
        let b = two_pair_batch(0.9, 0.1);
        let out = triplet_loss(&b, &cfg(SimilarityKind::Mil, 0.1)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.d_visual.iter().chain(&out.d_text).all(|g| g.max_abs() == 0.0));
    }

    #[test]
    fn single_image_batch_returns_zero() {
        let b = Batch::new(
            vec![singleton(&[1.0, 0.0])],
            vec![singleton(&[0.0, 1.0]), singleton(&[1.0, 1.0])],
            MatchTable::new(vec![0, 0], 1).unwrap(),
        )
        .unwrap();
        assert_eq!(triplet_loss(&b, &LossConfig::default()).unwrap().loss, 0.0);
    }

    #[test]
    fn same_image_captions_are_not_negatives() {
        // caption 1 is a near-duplicate of image 0 but belongs to it
        let b = Batch::new(
            vec![singleton(&[1.0, 0.0, 0.0]), singleton(&[0.0, 1.0, 0.0])],
            vec![
                singleton(&[1.0, 0.0, 0.0]),
                singleton(&[1.0, 0.01, 0.0]),
                singleton(&[0.0, 1.0, 0.0]),
            ],
            MatchTable::new(vec![0, 0, 1], 2).unwrap(),
        )
        .unwrap();
        let out = triplet_loss(&b, &cfg(SimilarityKind::SmoothChamfer, 0.1)).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn diversity_examples() {
        let same = Matrix::from_rows(&[[0.3, 0.1], [0.3, 0.1]]);
        assert_eq!(diversity_reg(&[same]).0, 2.0);
        let far = Matrix::from_rows(&[[0.0, 0.0], [10f64.sqrt(), 0.0]]);
        let v = diversity_reg(&[far]).0;
        assert!((v - 2.0 * (-20.0f64).exp()).abs() < 1e-20);
        assert!((v - 4.122e-9).abs() < 1e-12);
        assert_eq!(diversity_reg(&[Matrix::from_rows(&[[1.0, 2.0]])]).0, 0.0);
    }

    #[test]
    fn mmd_antipodal_example() {
        let e1 = unit(3, 0, 1.0);
        let m1 = unit(3, 0, -1.0);
        let v = vec![singleton(&e1), singleton(&e1), singleton(&e1)];
        let t = vec![singleton(&m1), singleton(&m1)];
        let out = mmd_reg(&v, &t, &LossConfig::default()).unwrap();
        assert!((out.value - (2.0 - 2.0 * (-2.0f64).exp())).abs() < 1e-12);
        let same = mmd_reg(&v, &v, &LossConfig::default()).unwrap();
        assert_eq!(same.value, 0.0);
    }

    #[test]
    fn zero_reg_weight_matches_triplet() {
        let b = two_pair_batch(0.5, 0.6);
        let c = LossConfig {
            reg_weight: 0.0,
            ..cfg(SimilarityKind::SmoothChamfer, 0.1)
        };
        let slots = BatchSlots {
            visual: vec![Matrix::zeros(1, 3); 2],
            text: vec![Matrix::zeros(1, 3); 2],
        };
        let (parts, _) = total_loss(&b, &slots, &c).unwrap();
        assert_eq!(parts.total, triplet_loss(&b, &c).unwrap().loss);
    }
}
