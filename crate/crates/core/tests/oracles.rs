//! Worked examples checked against values computed independently of the crate.

use divemb::data::{encode, generate_corpus, DataConfig, EncoderParams, RawFeatures};
use divemb::gradcheck::fd_gradient;
use divemb::model::Modality;
use divemb::objective::{diversity_reg, mmd_reg, triplet_loss, Batch, LossConfig};
use divemb::params::uniform_matrix;
use divemb::predictor::{init_params, predict_set, predictor_backward, sinusoidal_pe, SampleFeatures, SetPredictorConfig};
use divemb::retrieval::{circular_variance, rank, recall_at_k, SetIndex};
use divemb::similarity::{
    chamfer, cosine_matrix, mil, mp, similarity, similarity_grad, smooth_chamfer, smooth_chamfer_on_tape,
    SimilarityKind,
};
use divemb::data::MatchTable;
use divemb::tensor::ops::{gelu_scalar, lse_slice, softmax};
use divemb::tensor::{relative_error, Axis, GeluKind};
use divemb::{EmbeddingSet, Matrix, SimilarityConfig, Tape};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn set(rows: &[&[f64]]) -> EmbeddingSet {
    EmbeddingSet::from_rows(rows).unwrap()
}

fn random_set(rng: &mut ChaCha8Rng, k: usize, d: usize) -> EmbeddingSet {
    EmbeddingSet::new(uniform_matrix(rng, k, d, 1.0)).unwrap()
}

fn flat(ms: &[&Matrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.as_slice().to_vec()).collect()
}

#[test]
fn matmul_adjoint_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = uniform_matrix(&mut rng, 5, 3, 1.0);
    let b = uniform_matrix(&mut rng, 3, 4, 1.0);
    let w = uniform_matrix(&mut rng, 5, 4, 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let out = tape.matmul(va, vb).unwrap();
    let g = tape.backward(&[(out, w.clone())]).unwrap();
    let inner = |x: &Matrix, y: &Matrix| {
        let p = divemb::tensor::ops::matmul(x, y).unwrap();
        p.as_slice().iter().zip(w.as_slice()).map(|(p, w)| p * w).sum::<f64>()
    };
    let fa = fd_gradient(&a, 1e-6, |x| inner(x, &b));
    let fb = fd_gradient(&b, 1e-6, |y| inner(&a, y));
    let err = relative_error(&flat(&[&g.wrt(va), &g.wrt(vb)]), &flat(&[&fa, &fb]), 1e-12);
    assert!(err < 1e-8, "{err}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 0.0]]);
    let s = softmax(&m, Axis::Cols);
    for r in s.row_iter() {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gelu_at_one() {
    // 0.5 * (1 + erf(1/sqrt 2)), erf value from a 20-digit table
    let oracle = 0.5 * (1.0 + 0.682_689_492_137_085_9);
    assert!((gelu_scalar(1.0, GeluKind::Exact) - oracle).abs() < 1e-12);
    assert!((gelu_scalar(1.0, GeluKind::Exact) - 0.8412).abs() < 1e-3);
    assert!((gelu_scalar(1.0, GeluKind::Tanh) - oracle).abs() < 1e-3);
}

#[test]
fn lse_does_not_overflow() {
    let v = lse_slice(&[1000.0, 999.0]);
    assert!((v - (1000.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-12);
}

#[test]
fn similarity_hand_examples() {
    let c = cosine_matrix(&set(&[&[3.0, 4.0]]), &set(&[&[4.0, 3.0]])).unwrap();
    assert!((c[(0, 0)] - 0.96).abs() < 1e-15);

    let ortho = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let sc = smooth_chamfer(&ortho, &ortho, &SimilarityConfig::smooth_chamfer(16.0)).unwrap();
    assert!((sc - 1.000_000_006_9).abs() < 1e-8, "{sc}");
    assert!((sc - (1.0 + (1.0 + (-16.0f64).exp()).ln() / 16.0)).abs() < 1e-15);

    let e1 = set(&[&[1.0, 0.0]]);
    assert!((chamfer(&e1, &ortho).unwrap() - 0.75).abs() < 1e-15);
    assert_eq!(mil(&ortho, &set(&[&[0.0, 1.0]])).unwrap(), 1.0);
    let sigma1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((mp(&e1, &e1, &SimilarityConfig::mp(1.0, 0.0)).unwrap() - sigma1).abs() < 1e-15);
    assert!((sigma1 - 0.7311).abs() < 1e-4);
}

#[test]
fn smooth_chamfer_gradient_matches_tape_and_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = SimilarityConfig::smooth_chamfer(16.0);
    for _ in 0..20 {
        let (s1, s2) = (random_set(&mut rng, 4, 8), random_set(&mut rng, 4, 8));
        let g = similarity_grad(&s1, &s2, &cfg).unwrap();
        let closed = flat(&[&g.elems.d_s1, &g.elems.d_s2]);

        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(s1.elems().clone()), tape.leaf(s2.elems().clone()));
        let out = smooth_chamfer_on_tape(&mut tape, a, b, 16.0).unwrap();
        let tg = tape.backward(&[(out, Matrix::filled(1, 1, 1.0))]).unwrap();
        assert!(relative_error(&closed, &flat(&[&tg.wrt(a), &tg.wrt(b)]), 1e-12) < 1e-10);

        let f = |x: &Matrix, y: &Matrix| {
            smooth_chamfer(&EmbeddingSet::new(x.clone()).unwrap(), &EmbeddingSet::new(y.clone()).unwrap(), &cfg)
                .unwrap()
        };
        let f1 = fd_gradient(s1.elems(), 1e-5, |x| f(x, s2.elems()));
        let f2 = fd_gradient(s2.elems(), 1e-5, |y| f(s1.elems(), y));
        assert!(relative_error(&closed, &flat(&[&f1, &f2]), 1e-12) < 1e-6);
    }
}

#[test]
fn smooth_chamfer_reaches_chamfer_at_large_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (s1, s2) = (random_set(&mut rng, 3, 8), random_set(&mut rng, 4, 8));
        let ch = similarity(&s1, &s2, &SimilarityConfig::of_kind(SimilarityKind::Chamfer)).unwrap();
        let sc = similarity(&s1, &s2, &SimilarityConfig::smooth_chamfer(1e6)).unwrap();
        assert!((sc - ch).abs() < 1e-5);
    }
}

#[test]
fn predictor_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SetPredictorConfig {
        k: 3,
        t: 3,
        d: 8,
        d_h: 8,
        mlp_hidden: 8,
        ..Default::default()
    };
    let mut params = init_params(&cfg, &mut rng).unwrap();
    for m in params.0.values_mut() {
        for v in m.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let feats = SampleFeatures::new(uniform_matrix(&mut rng, 6, 8, 1.0), uniform_matrix(&mut rng, 1, 8, 1.0)).unwrap();
    let fixed = random_set(&mut rng, 4, 8);
    let sim = SimilarityConfig::smooth_chamfer(16.0);
    let set = predict_set(&feats, &params, &cfg).unwrap();
    let up = similarity_grad(&set, &fixed, &sim).unwrap().elems.d_s1;
    let analytic = predictor_backward(&feats, &params, &cfg, &up, None).unwrap().params;
    let h = 1e-6;
    for _ in 0..20 {
        let t = rng.random_range(0..params.0.len());
        let e = rng.random_range(0..params.0.values()[t].len());
        let mut p = params.clone();
        let orig = p.0.values()[t].as_slice()[e];
        let mut eval = |v: f64| {
            p.0.values_mut()[t].as_mut_slice()[e] = v;
            similarity(&predict_set(&feats, &p, &cfg).unwrap(), &fixed, &sim).unwrap()
        };
        let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        let a = analytic.values()[t].as_slice()[e];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        assert!(err < 1e-4, "{} [{e}]: {a} vs {fd}", params.0.names()[t]);
    }
}

#[test]
fn positional_encoding_value() {
    let pe = sinusoidal_pe(8, 16).unwrap();
    assert!((pe[(3, 0)] - 3.0f64.sin()).abs() < 1e-15);
    assert!((pe[(3, 0)] - 0.1411).abs() < 1e-4);
}

#[test]
fn triplet_hand_example() {
    // image 0 = e1, image 1 = e3; each caption has cosine 0.5 with its
    // image and 0.6 with the other one, so every hinge is 0.1 + 0.6 - 0.5
    let u = [1.0, 0.0, 0.0];
    let v = [0.0, 0.0, 1.0];
    let rest = (1.0f64 - 0.25 - 0.36).sqrt();
    let c0 = [0.5, rest, 0.6];
    let c1 = [0.6, rest, 0.5];
    let visual = vec![set(&[&u]), set(&[&v])];
    let text = vec![set(&[&c0]), set(&[&c1])];
    let matches = MatchTable::new(vec![0, 1], 2).unwrap();
    let cfg = LossConfig {
        margin: 0.1,
        sim: SimilarityConfig::of_kind(SimilarityKind::Mil),
        ..Default::default()
    };
    let out = triplet_loss(&Batch::new(visual, text, matches).unwrap(), &cfg).unwrap();
    assert!((out.loss - (0.2 * 2.0 + 0.2 * 2.0)).abs() < 1e-12, "{}", out.loss);
    assert_eq!(out.active, 4);
}

#[test]
fn regularizer_scalars() {
    let far = Matrix::from_rows(&[[0.0, 0.0], [10f64.sqrt(), 0.0]]);
    let (v, _) = diversity_reg(&[far]);
    assert!((v - 2.0 * (-20.0f64).exp()).abs() < 1e-20);
    assert!((v - 4.1e-9).abs() < 1e-10);

    let pos = vec![set(&[&[1.0, 0.0], &[1.0, 0.0]]); 3];
    let neg = vec![set(&[&[-1.0, 0.0], &[-1.0, 0.0]]); 3];
    let m = mmd_reg(&pos, &neg, &LossConfig::default()).unwrap();
    assert!((m.value - (2.0 - 2.0 * (-2.0f64).exp())).abs() < 1e-12);
    assert!((m.value - 1.729).abs() < 1e-3);
}

#[test]
fn nearest_concept_oracle_on_default_corpus() {
    let corpus = generate_corpus(&DataConfig::default()).unwrap();
    let bank = &corpus.bank.vectors;
    let (mut right, mut total) = (0usize, 0usize);
    for s in &corpus.samples {
        for row in s.features.local.row_iter() {
            let best = (0..bank.rows())
                .map(|c| (c, bank.row(c).iter().zip(row).map(|(a, b)| a * b).sum::<f64>()))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
                .0;
            right += s.concept_ids.contains(&best) as usize;
            total += 1;
        }
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn noiseless_single_concept_images_repeat_their_concept() {
    let cfg = DataConfig {
        m_max: 1,
        noise_sigma: 0.0,
        instance_sigma: 0.0,
        images: 20,
        ..Default::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    for s in &corpus.samples {
        let concept = corpus.bank.vectors.row(s.concept_ids[0]);
        for row in s.features.local.row_iter() {
            for (a, b) in row.iter().zip(concept) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}

#[test]
fn encoder_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw = RawFeatures {
        local: uniform_matrix(&mut rng, 5, 6, 1.0),
        global: uniform_matrix(&mut rng, 1, 6, 1.0),
    };
    let id = encode(&raw, &EncoderParams::identity(6)).unwrap();
    assert_eq!(id.local, raw.local);
    assert_eq!(id.global, raw.global);
    let z = encode(&raw, &EncoderParams::zeros(6, 4)).unwrap();
    assert!(z.local.as_slice().iter().chain(z.global.as_slice()).all(|&v| v == 0.0));
    let zs = EmbeddingSet::new(z.local).unwrap();
    assert_eq!(chamfer(&zs, &zs).unwrap(), 0.0);
}

#[test]
fn retrieval_hand_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus: Vec<EmbeddingSet> = (0..10).map(|_| random_set(&mut rng, 3, 6)).collect();
    let index = SetIndex::with_positional_ids(Modality::Text, corpus.clone()).unwrap();
    for alpha in [1.0, 16.0, 64.0] {
        let cfg = SimilarityConfig::smooth_chamfer(alpha);
        for (i, q) in corpus.iter().enumerate() {
            let scores = index.score(q, &cfg).unwrap();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(scores[i], best);
        }
    }

    let q = set(&[&[1.0, 0.0]]);
    let a = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let b = set(&[&[0.0, 1.0], &[-1.0, 0.0]]);
    let cfg = SimilarityConfig::of_kind(SimilarityKind::Chamfer);
    assert!((chamfer(&q, &a).unwrap() - 0.75).abs() < 1e-15);
    assert!((chamfer(&q, &b).unwrap() + 0.25).abs() < 1e-15);
    let idx = SetIndex::build(Modality::Text, vec![b, a], vec![20, 10]).unwrap();
    assert_eq!(rank(&q, &idx, &cfg).unwrap(), vec![10, 20]);

    let ranked = vec![vec![1, 2, 3], vec![9, 1, 3], vec![4, 5, 6, 7, 8, 9, 2]];
    let relevant = vec![vec![1], vec![1], vec![2]];
    assert!((recall_at_k(&ranked, &relevant, 5) - 200.0 / 3.0).abs() < 1e-12);

    let cv = circular_variance(&set(&[&[1.0, 0.0], &[0.0, 1.0]]));
    assert!((cv - (1.0 - 2f64.sqrt() / 2.0)).abs() < 1e-15);
    assert!((cv - 0.2929).abs() < 1e-4);
}
