use divemb::data::generate_corpus;
use divemb::gradcheck::tiny_run;
use divemb::model::{Modality, Model};
use divemb::objective::{diversity_reg, mmd_reg, triplet_loss, Batch, LossConfig};
use divemb::optim::{adamw_step, OptimState};
use divemb::predictor::{init_params, predict_detailed, SampleFeatures, SetPredictorConfig};
use divemb::retrieval::{circular_variance, rank, recall_at_k, SetIndex};
use divemb::similarity::{cosine_gradient, cosine_matrix, similarity, SimilarityKind};
use divemb::tensor::ops::{lse_slice, softmax};
use divemb::tensor::Axis;
use divemb::trainer::loss_and_grads;
use divemb::data::MatchTable;
use divemb::{EmbeddingSet, Matrix, SimilarityConfig};
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KINDS: [SimilarityKind; 4] = [
    SimilarityKind::SmoothChamfer,
    SimilarityKind::Chamfer,
    SimilarityKind::Mil,
    SimilarityKind::Mp,
];

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn set_of(d: usize) -> impl Strategy<Value = EmbeddingSet> {
    (1usize..=5).prop_flat_map(move |k| matrix(k, d)).prop_map(|m| EmbeddingSet::new(m).unwrap())
}

fn predictor_cfg(k: usize, t: usize) -> SetPredictorConfig {
    SetPredictorConfig {
        k,
        t,
        d: 6,
        d_h: 5,
        mlp_hidden: 7,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(m in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c)), scale in 0.1f64..200.0) {
        let s = softmax(&m.scale(scale), Axis::Cols);
        for r in s.row_iter() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn lse_is_bounded(v in prop::collection::vec(-500.0f64..500.0, 1..10)) {
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let l = lse_slice(&v);
        prop_assert!(l >= max && l <= max + (v.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn similarities_are_symmetric(a in set_of(4), b in set_of(4)) {
        for kind in KINDS {
            let cfg = SimilarityConfig::of_kind(kind);
            let (x, y) = (similarity(&a, &b, &cfg).unwrap(), similarity(&b, &a, &cfg).unwrap());
            prop_assert!((x - y).abs() < 1e-12, "{kind}: {x} vs {y}");
        }
    }

    #[test]
    fn singletons_reduce_to_cosine(a in matrix(1, 5), b in matrix(1, 5)) {
        let (a, b) = (EmbeddingSet::new(a).unwrap(), EmbeddingSet::new(b).unwrap());
        let c = cosine_matrix(&a, &b).unwrap()[(0, 0)];
        for kind in [SimilarityKind::SmoothChamfer, SimilarityKind::Chamfer, SimilarityKind::Mil] {
            let s = similarity(&a, &b, &SimilarityConfig::of_kind(kind)).unwrap();
            prop_assert!((s - c).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_chamfer_sits_above_chamfer_within_bound(a in set_of(4), b in set_of(4), alpha in 0.5f64..300.0) {
        let ch = similarity(&a, &b, &SimilarityConfig::of_kind(SimilarityKind::Chamfer)).unwrap();
        let sc = similarity(&a, &b, &SimilarityConfig::smooth_chamfer(alpha)).unwrap();
        let bound = ((a.len() as f64).ln() + (b.len() as f64).ln()) / (2.0 * alpha);
        prop_assert!(sc - ch >= -1e-12 && sc - ch <= bound + 1e-12);
    }

    #[test]
    fn rescaling_an_element_changes_nothing(a in set_of(4), b in set_of(4), lambda in 0.01f64..100.0, pick in 0usize..5) {
        let mut m = a.elems().clone();
        let r = pick % m.rows();
        for v in m.row_mut(r) {
            *v *= lambda;
        }
        let scaled = EmbeddingSet::new(m).unwrap();
        for kind in KINDS {
            let cfg = SimilarityConfig::of_kind(kind);
            let (x, y) = (similarity(&a, &b, &cfg).unwrap(), similarity(&scaled, &b, &cfg).unwrap());
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mil_touches_one_pair_and_smooth_chamfer_touches_all(a in set_of(4), b in set_of(4)) {
        let c = cosine_matrix(&a, &b).unwrap();
        let (_, g, _) = cosine_gradient(&c, &SimilarityConfig::of_kind(SimilarityKind::Mil)).unwrap();
        prop_assert_eq!(g.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
        let (_, g, _) = cosine_gradient(&c, &SimilarityConfig::smooth_chamfer(16.0)).unwrap();
        prop_assert!(g.as_slice().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn attention_competes_over_slots(seed in any::<u64>(), k in 1usize..5, t in 1usize..4, n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = predictor_cfg(k, t);
        let params = init_params(&cfg, &mut rng).unwrap();
        let feats = SampleFeatures::new(
            divemb::params::uniform_matrix(&mut rng, n, 6, 2.0),
            divemb::params::uniform_matrix(&mut rng, 1, 6, 2.0),
        ).unwrap();
        let p = predict_detailed(&feats, &params, &cfg).unwrap();
        prop_assert_eq!(p.attn.len(), t);
        for (a, ah) in p.attn.iter().zip(&p.attn_hat) {
            for r in a.row_iter() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for s in ah.col_sums().as_slice() {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn block_weights_are_shared_across_iterations(t in 1usize..7) {
        let a = init_params(&predictor_cfg(3, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = init_params(&predictor_cfg(3, t), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(a.0.numel(), b.0.numel());
    }

    #[test]
    fn local_order_does_not_matter(seed in any::<u64>(), shift in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = predictor_cfg(3, 2);
        let params = init_params(&cfg, &mut rng).unwrap();
        let local = divemb::params::uniform_matrix(&mut rng, 5, 6, 1.0);
        let global = divemb::params::uniform_matrix(&mut rng, 1, 6, 1.0);
        let order: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
        let a = predict_detailed(&SampleFeatures::new(local.clone(), global.clone()).unwrap(), &params, &cfg).unwrap();
        let b = predict_detailed(&SampleFeatures::new(local.select_rows(&order), global).unwrap(), &params, &cfg).unwrap();
        for (x, y) in a.set.elems().as_slice().iter().zip(b.set.elems().as_slice()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn permuting_slots_permutes_the_set(seed in any::<u64>(), shift in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = predictor_cfg(4, 3);
        let params = init_params(&cfg, &mut rng).unwrap();
        let feats = SampleFeatures::new(
            divemb::params::uniform_matrix(&mut rng, 5, 6, 1.0),
            divemb::params::uniform_matrix(&mut rng, 1, 6, 1.0),
        ).unwrap();
        let order: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let mut permuted = params.clone();
        let slots = permuted.0.get_mut("slots").unwrap();
        *slots = slots.select_rows(&order);
        let a = predict_detailed(&feats, &params, &cfg).unwrap();
        let b = predict_detailed(&feats, &permuted, &cfg).unwrap();
        let expect = a.set.elems().select_rows(&order);
        for (x, y) in expect.as_slice().iter().zip(b.set.elems().as_slice()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn hardest_negative_is_never_a_positive(seed in any::<u64>()) {
        // every caption is a copy of its own image, so a selected positive
        // would show up as a zero-margin active hinge
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<EmbeddingSet> = (0..4)
            .map(|_| EmbeddingSet::new(divemb::params::uniform_matrix(&mut rng, 2, 5, 1.0)).unwrap())
            .collect();
        let captions: Vec<EmbeddingSet> = (0..8).map(|c| images[c / 2].clone()).collect();
        let matches = MatchTable::new((0..8).map(|c| c / 2).collect(), 4).unwrap();
        let cfg = LossConfig { margin: 0.0, ..Default::default() };
        let out = triplet_loss(&Batch::new(images, captions, matches).unwrap(), &cfg).unwrap();
        prop_assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn diversity_falls_as_slots_separate(x in matrix(1, 4), dir in matrix(1, 4), s in 0.05f64..1.0, extra in 0.05f64..1.0) {
        prop_assume!(dir.frobenius_norm() > 0.3);
        let pair = |t: f64| {
            let y: Vec<f64> = x.as_slice().iter().zip(dir.as_slice()).map(|(a, d)| a + t * d).collect();
            Matrix::from_rows(&[x.as_slice().to_vec(), y])
        };
        let (near, _) = diversity_reg(&[pair(s)]);
        let (far, _) = diversity_reg(&[pair(s + extra)]);
        prop_assert!(far < near);
    }

    #[test]
    fn mmd_is_non_negative_and_zero_on_identical_pools(a in prop::collection::vec(set_of(3), 2..5), b in prop::collection::vec(set_of(3), 2..5)) {
        let cfg = LossConfig::default();
        prop_assert!(mmd_reg(&a, &b, &cfg).unwrap().value >= 0.0);
        prop_assert!(mmd_reg(&a, &a, &cfg).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_k(perm_seed in any::<u64>(), rel in prop::collection::vec(0u32..20, 1..8)) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let ranked: Vec<Vec<u32>> = rel.iter().map(|_| {
            let mut v: Vec<u32> = (0..20).collect();
            v.shuffle(&mut rng);
            v
        }).collect();
        let relevant: Vec<Vec<u32>> = rel.iter().map(|&r| vec![r]).collect();
        let mut last = 0.0;
        for k in 1..=20 {
            let r = recall_at_k(&ranked, &relevant, k);
            prop_assert!(r >= last);
            last = r;
        }
        prop_assert_eq!(last, 100.0);
    }

    #[test]
    fn circular_variance_in_unit_range(s in set_of(3)) {
        let cv = circular_variance(&s);
        prop_assert!((0.0..=1.0).contains(&cv));
        let row = s.elems().row(0).to_vec();
        let same = EmbeddingSet::new(Matrix::from_rows(&vec![row; s.len()])).unwrap();
        prop_assert!(circular_variance(&same) < 1e-12);
    }

    #[test]
    fn rank_ignores_positive_rescaling(q in set_of(3), idx in prop::collection::vec(set_of(3), 2..6), lambda in 0.1f64..10.0) {
        let cfg = SimilarityConfig::default();
        let index = SetIndex::with_positional_ids(Modality::Text, idx.clone()).unwrap();
        let scaled: Vec<EmbeddingSet> = idx.iter().map(|s| EmbeddingSet::new(s.elems().scale(lambda)).unwrap()).collect();
        let scaled = SetIndex::with_positional_ids(Modality::Text, scaled).unwrap();
        prop_assert_eq!(rank(&q, &index, &cfg).unwrap(), rank(&q, &scaled, &cfg).unwrap());
    }

    #[test]
    fn singleton_corpora_rank_alike(q in matrix(1, 4), idx in prop::collection::vec(matrix(1, 4), 2..8)) {
        let q = EmbeddingSet::new(q).unwrap();
        let sets: Vec<EmbeddingSet> = idx.into_iter().map(|m| EmbeddingSet::new(m).unwrap()).collect();
        let index = SetIndex::with_positional_ids(Modality::Text, sets).unwrap();
        let base = rank(&q, &index, &SimilarityConfig::of_kind(SimilarityKind::Mil)).unwrap();
        for kind in [SimilarityKind::SmoothChamfer, SimilarityKind::Chamfer] {
            prop_assert_eq!(&rank(&q, &index, &SimilarityConfig::of_kind(kind)).unwrap(), &base);
        }
    }
}

#[test]
fn empty_and_identity_tapes() {
    let tape = divemb::Tape::new();
    assert!(tape.backward(&[]).is_ok());
    let mut tape = divemb::Tape::new();
    let x = tape.leaf(Matrix::filled(2, 2, 3.0));
    let seed = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
    let g = tape.backward(&[(x, seed.clone())]).unwrap();
    assert_eq!(g.wrt(x), seed);
}

#[test]
fn frozen_batch_loss_decreases_early() {
    let mut good = 0;
    for seed in 0..3 {
        let mut run = tiny_run(SimilarityKind::SmoothChamfer, seed);
        run.loss.reg_weight = 0.01;
        let corpus = generate_corpus(&run.data).unwrap();
        let mut model = Model::init(&run.predictor, run.data.d_raw, &run.loss.sim, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let images: Vec<usize> = (0..corpus.samples.len()).collect();
        let mut opt = OptimState::new(&model.params);
        let mut losses = Vec::new();
        for _ in 0..20 {
            let (loss, grads) = loss_and_grads(&model, &corpus, &images, &run).unwrap();
            losses.push(loss.total);
            adamw_step(&mut model.params, &grads, &mut opt, 1e-3, 0.0, &run.train.adam, None).unwrap();
        }
        if losses.windows(2).all(|w| w[1] <= w[0]) {
            good += 1;
        }
    }
    assert!(good >= 2, "non-increasing in {good}/3 seeds");
}
