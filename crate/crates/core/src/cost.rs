//! Closed-form per-pair operation counts and a scoring throughput probe.
//!
//! Counting convention: a multiply-add in the `K1 x K2` cosine block counts
//! as one operation, so that block costs `K1 K2 D`. Element normalization
//! happens once per set at index time and is not charged to pairs. Every
//! other scalar step (scale, subtract, exp, log, add, compare, sigmoid
//! stage) counts as one.

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::Modality;
use crate::params::uniform_matrix;
use crate::retrieval::{score_all, SetIndex};
use crate::similarity::{EmbeddingSet, SimilarityConfig, SimilarityKind};

/// The per-pair cost quoted for smooth-Chamfer at `K = 4`, `D = 1024`.
pub const REFERENCE_SC_FLOPS: f64 = 16.4e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct OpCount {
    /// Multiply-adds of the cosine block.
    pub dot: u64,
    /// Reduction work on top of the cosine block.
    pub reduce: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.dot + self.reduce
    }
}

pub fn ops_per_pair(kind: SimilarityKind, k1: usize, k2: usize, d: usize) -> OpCount {
    let (k1, k2, d) = (k1 as u64, k2 as u64, d as u64);
    let cells = k1 * k2;
    let reduce = match kind {
        // scale by alpha, then per direction: max, subtract, exp, accumulate
        // per cell, one log and one add per slice, and a final weighted sum
        SimilarityKind::SmoothChamfer => cells + 2 * 4 * cells + 2 * (k1 + k2) + 3,
        // per direction one compare per cell, one add per slice, final sum
        SimilarityKind::Chamfer => 2 * cells + (k1 + k2) + 3,
        SimilarityKind::Mil => cells,
        // affine, exp, add, divide, accumulate per cell
        SimilarityKind::Mp => 5 * cells,
    };
    OpCount {
        dot: cells * d,
        reduce,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub kind: SimilarityKind,
    pub k: usize,
    pub d: usize,
    pub pairs: usize,
    pub seconds: f64,
    pub pairs_per_second: f64,
    pub ops_per_pair: u64,
}

fn random_sets<R: Rng>(rng: &mut R, n: usize, k: usize, d: usize) -> Result<Vec<EmbeddingSet>> {
    (0..n)
        .map(|_| EmbeddingSet::new(uniform_matrix(rng, k, d, 1.0)))
        .collect()
}

/// Scores `queries x index` random sets with the blocked scorer and times it.
pub fn measure_throughput(
    kind: SimilarityKind,
    k: usize,
    d: usize,
    queries: usize,
    index: usize,
    seed: u64,
) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = SetIndex::with_positional_ids(Modality::Visual, random_sets(&mut rng, queries, k, d)?)?;
    let x = SetIndex::with_positional_ids(Modality::Text, random_sets(&mut rng, index, k, d)?)?;
    let cfg = SimilarityConfig::of_kind(kind);
    let start = Instant::now();
    let scores = score_all(&q, &x, &cfg)?;
    let seconds = start.elapsed().as_secs_f64().max(1e-9);
    std::hint::black_box(scores);
    let pairs = queries * index;
    Ok(BenchRow {
        kind,
        k,
        d,
        pairs,
        seconds,
        pairs_per_second: pairs as f64 / seconds,
        ops_per_pair: ops_per_pair(kind, k, k, d).total(),
    })
}
