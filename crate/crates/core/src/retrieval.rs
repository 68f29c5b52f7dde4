//! Exact set-to-set retrieval and its metrics.
//!
//! Scoring is blocked: all elements of one query set are multiplied against
//! the contiguous element matrix of the whole index, then reduced per index
//! set. Every score equals the pairwise [`similarity`](crate::similarity::similarity)
//! value bit for bit.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MatchTable;
use crate::error::{Error, Result};
use crate::model::Modality;
use crate::similarity::{score_from_cosine, EmbeddingSet, NormalizedSet, SimilarityConfig};
use crate::tensor::{ops, Matrix};

/// Immutable corpus of embedding sets with unit-normalized elements stacked
/// into one matrix.
#[derive(Clone, Debug)]
pub struct SetIndex {
    pub modality: Modality,
    ids: Vec<u32>,
    unit: Matrix,
    offsets: Vec<usize>,
    sets: Vec<EmbeddingSet>,
}

impl SetIndex {
    pub fn build(modality: Modality, sets: Vec<EmbeddingSet>, ids: Vec<u32>) -> Result<SetIndex> {
        if sets.len() != ids.len() {
            return Err(Error::shape(
                "set_index",
                format!("{} sets but {} ids", sets.len(), ids.len()),
            ));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Config(format!("duplicate id {dup} in index")));
        }
        let dim = sets.first().map_or(0, EmbeddingSet::dim);
        if sets.iter().any(|s| s.dim() != dim) {
            return Err(Error::shape("set_index", "element dimension differs across sets"));
        }
        let mut offsets = Vec::with_capacity(sets.len() + 1);
        offsets.push(0);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for s in &sets {
            let n = NormalizedSet::of(s.elems());
            rows.extend(n.unit.row_iter().map(<[f64]>::to_vec));
            offsets.push(rows.len());
        }
        let unit = if rows.is_empty() {
            Matrix::zeros(0, dim)
        } else {
            Matrix::from_rows(&rows)
        };
        Ok(SetIndex {
            modality,
            ids,
            unit,
            offsets,
            sets,
        })
    }

    /// Ids `0..n` in set order.
    pub fn with_positional_ids(modality: Modality, sets: Vec<EmbeddingSet>) -> Result<SetIndex> {
        let ids = (0..sets.len() as u32).collect();
        SetIndex::build(modality, sets, ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn sets(&self) -> &[EmbeddingSet] {
        &self.sets
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Index restricted to the masked rows of every set.
    pub fn restrict(&self, keep: &[bool]) -> Result<SetIndex> {
        let sets = self
            .sets
            .iter()
            .map(|s| s.restrict(keep))
            .collect::<Result<Vec<_>>>()?;
        SetIndex::build(self.modality, sets, self.ids.clone())
    }

    /// Similarities of one query against every indexed set.
    pub fn score(&self, query: &EmbeddingSet, cfg: &SimilarityConfig) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.dim() != self.unit.cols() {
            return Err(Error::shape(
                "rank",
                format!("query dim {} vs index dim {}", query.dim(), self.unit.cols()),
            ));
        }
        let q = NormalizedSet::of(query.elems());
        let block = ops::matmul_nt(&q.unit, &self.unit)?;
        let k1 = block.rows();
        self.offsets
            .windows(2)
            .map(|w| {
                let c = Matrix::from_fn(k1, w[1] - w[0], |i, j| block[(i, w[0] + j)]);
                score_from_cosine(&c, cfg)
            })
            .collect()
    }
}

/// Query-by-index score matrix, rows in query order.
pub fn score_all(queries: &SetIndex, index: &SetIndex, cfg: &SimilarityConfig) -> Result<Matrix> {
    cfg.validate()?;
    let rows: Vec<Vec<f64>> = queries
        .sets
        .par_iter()
        .map(|q| index.score(q, cfg))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, index.len()));
    }
    Ok(Matrix::from_rows(&rows))
}

/// Ids sorted by descending score, ties by ascending id.
pub fn rank(query: &EmbeddingSet, index: &SetIndex, cfg: &SimilarityConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let scores = index.score(query, cfg)?;
    Ok(order_by_score(&scores, index.ids()))
}

fn order_by_score(scores: &[f64], ids: &[u32]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    order.into_iter().map(|i| ids[i]).collect()
}

/// Percentage of queries with at least one relevant id in the top `k`.
pub fn recall_at_k(ranked: &[Vec<u32>], relevant: &[Vec<u32>], k: usize) -> f64 {
    if ranked.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .zip(relevant)
        .filter(|(r, rel)| r.iter().take(k).any(|id| rel.contains(id)))
        .count();
    100.0 * hits as f64 / ranked.len() as f64
}

/// Zero-based rank of the best relevant item, under the ranking tie rule.
fn best_rank(scores: &[f64], ids: &[u32], relevant: &[usize]) -> usize {
    relevant
        .iter()
        .map(|&t| {
            scores
                .iter()
                .zip(ids)
                .filter(|&(&s, &id)| s > scores[t] || (s == scores[t] && id < ids[t]))
                .count()
        })
        .min()
        .unwrap_or(usize::MAX)
}

fn recalls(ranks: &[usize]) -> [f64; 3] {
    let pct = |k: usize| {
        if ranks.is_empty() {
            0.0
        } else {
            100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
        }
    };
    [pct(1), pct(5), pct(10)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAblationRow {
    pub modality: Modality,
    /// The single slot kept in `modality`; the other modality keeps all.
    pub kept_slot: usize,
    pub rsum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Image-to-text Recall@{1,5,10} in percent.
    pub i2t: [f64; 3],
    /// Text-to-image Recall@{1,5,10} in percent.
    pub t2i: [f64; 3],
    pub rsum: f64,
    pub circular_variance_visual: f64,
    pub circular_variance_text: f64,
    /// Natural log of the mean circular variance per modality.
    pub log_circular_variance_visual: f64,
    pub log_circular_variance_text: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slot_ablation: Vec<SlotAblationRow>,
}

impl RetrievalReport {
    pub fn mean_circular_variance(&self) -> f64 {
        (self.circular_variance_visual + self.circular_variance_text) / 2.0
    }
}

pub fn rsum(report: &RetrievalReport) -> f64 {
    report.i2t.iter().chain(&report.t2i).sum()
}

/// `1 - |mean of unit elements|`; zero elements are left out.
pub fn circular_variance(s: &EmbeddingSet) -> f64 {
    let n = NormalizedSet::of(s.elems());
    let kept = n.norms.len() - n.zero_rows();
    if kept < n.norms.len() {
        log::warn!("circular variance: {} zero element(s) excluded", n.zero_rows());
    }
    if kept == 0 {
        return 0.0;
    }
    let mean = n.unit.col_sums().scale(1.0 / kept as f64);
    (1.0 - mean.frobenius_norm()).clamp(0.0, 1.0)
}

pub fn mean_circular_variance(sets: &[EmbeddingSet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(circular_variance).sum::<f64>() / sets.len() as f64
}

/// Recall metrics from an image-by-caption score matrix.
pub fn report_from_scores(
    scores: &Matrix,
    matches: &MatchTable,
    image_ids: &[u32],
    caption_ids: &[u32],
) -> Result<([f64; 3], [f64; 3])> {
    if scores.shape() != (matches.images(), matches.captions()) {
        return Err(Error::shape(
            "retrieval",
            format!(
                "scores {:?} vs {} images x {} captions",
                scores.shape(),
                matches.images(),
                matches.captions()
            ),
        ));
    }
    let i2t: Vec<usize> = (0..matches.images())
        .into_par_iter()
        .map(|i| best_rank(scores.row(i), caption_ids, &matches.image_captions[i]))
        .collect();
    let t = scores.transpose();
    let t2i: Vec<usize> = (0..matches.captions())
        .into_par_iter()
        .map(|c| best_rank(t.row(c), image_ids, &[matches.caption_image[c]]))
        .collect();
    Ok((recalls(&i2t), recalls(&t2i)))
}

fn assemble(
    (i2t, t2i): ([f64; 3], [f64; 3]),
    visual: &[EmbeddingSet],
    text: &[EmbeddingSet],
) -> RetrievalReport {
    let cv_v = mean_circular_variance(visual);
    let cv_t = mean_circular_variance(text);
    let mut r = RetrievalReport {
        i2t,
        t2i,
        rsum: 0.0,
        circular_variance_visual: cv_v,
        circular_variance_text: cv_t,
        log_circular_variance_visual: cv_v.ln(),
        log_circular_variance_text: cv_t.ln(),
        slot_ablation: Vec::new(),
    };
    r.rsum = rsum(&r);
    r
}

/// Full bidirectional evaluation of a visual and a text index.
pub fn evaluate(
    visual: &SetIndex,
    text: &SetIndex,
    matches: &MatchTable,
    cfg: &SimilarityConfig,
) -> Result<RetrievalReport> {
    let scores = score_all(visual, text, cfg)?;
    let recalls = report_from_scores(&scores, matches, visual.ids(), text.ids())?;
    Ok(assemble(recalls, visual.sets(), text.sets()))
}

/// Evaluation with scoring restricted to the kept rows of every set.
pub fn slot_ablation_eval(
    visual: &SetIndex,
    text: &SetIndex,
    keep_visual: &[bool],
    keep_text: &[bool],
    matches: &MatchTable,
    cfg: &SimilarityConfig,
) -> Result<RetrievalReport> {
    let v = visual.restrict(keep_visual)?;
    let t = text.restrict(keep_text)?;
    evaluate(&v, &t, matches, cfg)
}

/// RSUM with only slot `k` kept in one modality, for every slot and modality.
pub fn per_slot_table(
    visual: &SetIndex,
    text: &SetIndex,
    matches: &MatchTable,
    cfg: &SimilarityConfig,
) -> Result<Vec<SlotAblationRow>> {
    let k_of = |idx: &SetIndex| idx.sets().iter().map(EmbeddingSet::len).max().unwrap_or(0);
    let mut rows = Vec::new();
    for modality in Modality::BOTH {
        let k = k_of(if modality == Modality::Visual { visual } else { text });
        for slot in 0..k {
            let one: Vec<bool> = (0..k).map(|i| i == slot).collect();
            let all = vec![true; k_of(text).max(k_of(visual))];
            let (kv, kt) = match modality {
                Modality::Visual => (&one, &all),
                Modality::Text => (&all, &one),
            };
            let r = slot_ablation_eval(visual, text, kv, kt, matches, cfg)?;
            rows.push(SlotAblationRow {
                modality,
                kept_slot: slot,
                rsum: r.rsum,
            });
        }
    }
    Ok(rows)
}

/// Elementwise mean of two score matrices over the same universe.
pub fn ensemble_scores(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.zip_map(b, |x, y| (x + y) / 2.0)
}

/// Report for the averaged scores of several models.
pub fn evaluate_ensemble(
    members: &[(SetIndex, SetIndex, SimilarityConfig)],
    matches: &MatchTable,
) -> Result<RetrievalReport> {
    let (first, rest) = members
        .split_first()
        .ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
    let mut scores = score_all(&first.0, &first.1, &first.2)?;
    for (v, t, cfg) in rest {
        let s = score_all(v, t, cfg)?;
        scores = scores.zip_map(&s, |x, y| x + y)?;
    }
    let scores = scores.scale(1.0 / members.len() as f64);
    let recalls = report_from_scores(&scores, matches, first.0.ids(), first.1.ids())?;
    Ok(assemble(recalls, first.0.sets(), first.1.sets()))
}
