//! Finite-difference checks of every analytic gradient in the crate.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{generate_corpus, DataConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::LossConfig;
use crate::params::{uniform_matrix, ParamStore};
use crate::predictor::{init_params, predict_set, predictor_backward, SampleFeatures, SetPredictorConfig};
use crate::similarity::{
    similarity, similarity_grad, smooth_chamfer_on_tape, EmbeddingSet, SimilarityConfig,
    SimilarityKind,
};
use crate::tensor::{relative_error, Axis, GeluKind, Matrix, Tape, Var};
use crate::trainer::loss_and_grads;

pub const SUITES: [&str; 5] = [
    "primitives",
    "smooth-chamfer",
    "similarity-kinds",
    "predictor",
    "end-to-end",
];

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random set pairs for the similarity suites.
    pub pairs: usize,
    /// Random shapes per primitive.
    pub shapes: usize,
    /// Parameter entries probed in the model suites.
    pub probes: usize,
    pub only: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            pairs: 200,
            shapes: 100,
            probes: 20,
            only: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, cases: usize, max_rel_err: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            cases,
            max_rel_err,
            tolerance,
            passed: max_rel_err < tolerance,
        }
    }
}

/// Central differences of `f` at `x`, one entry at a time.
pub fn fd_gradient(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        g.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    g
}

fn concat(ms: &[&Matrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

/// Per-entry relative error with an absolute floor on the denominator.
fn entry_rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Primitive {
    name: &'static str,
    /// Input shapes from a base `(r, c)`.
    shapes: fn(usize, usize) -> Vec<(usize, usize)>,
    positive: bool,
    build: Build,
}

fn primitives() -> Vec<Primitive> {
    fn same(r: usize, c: usize) -> Vec<(usize, usize)> {
        vec![(r, c)]
    }
    fn pair(r: usize, c: usize) -> Vec<(usize, usize)> {
        vec![(r, c), (r, c)]
    }
    fn with_row(r: usize, c: usize) -> Vec<(usize, usize)> {
        vec![(r, c), (1, c)]
    }
    vec![
        Primitive {
            name: "matmul",
            shapes: |r, c| vec![(r, c), (c, r + 1)],
            positive: false,
            build: |t, v| t.matmul(v[0], v[1]),
        },
        Primitive {
            name: "matmul_nt",
            shapes: |r, c| vec![(r, c), (r + 2, c)],
            positive: false,
            build: |t, v| t.matmul_nt(v[0], v[1]),
        },
        Primitive {
            name: "softmax_cols",
            shapes: same,
            positive: false,
            build: |t, v| Ok(t.softmax(v[0], Axis::Cols)),
        },
        Primitive {
            name: "softmax_rows",
            shapes: same,
            positive: false,
            build: |t, v| Ok(t.softmax(v[0], Axis::Rows)),
        },
        Primitive {
            name: "lse_cols",
            shapes: same,
            positive: false,
            build: |t, v| Ok(t.lse(v[0], Axis::Cols)),
        },
        Primitive {
            name: "lse_rows",
            shapes: same,
            positive: false,
            build: |t, v| Ok(t.lse(v[0], Axis::Rows)),
        },
        Primitive {
            name: "layer_norm",
            shapes: |r, c| vec![(r, c + 1), (1, c + 1), (1, c + 1)],
            positive: false,
            build: |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        Primitive {
            name: "gelu_exact",
            shapes: same,
            positive: false,
            build: |t, v| Ok(t.gelu(v[0], GeluKind::Exact)),
        },
        Primitive {
            name: "gelu_tanh",
            shapes: same,
            positive: false,
            build: |t, v| Ok(t.gelu(v[0], GeluKind::Tanh)),
        },
        Primitive {
            name: "l2_normalize_rows",
            shapes: same,
            positive: false,
            build: |t, v| Ok(t.l2_normalize_rows(v[0], 1e-12)),
        },
        Primitive {
            name: "normalize_cols",
            shapes: same,
            positive: true,
            build: |t, v| Ok(t.normalize_cols(v[0], 1e-8)),
        },
        Primitive {
            name: "exp",
            shapes: same,
            positive: false,
            build: |t, v| Ok(t.exp(v[0])),
        },
        Primitive {
            name: "hadamard",
            shapes: pair,
            positive: false,
            build: |t, v| t.hadamard(v[0], v[1]),
        },
        Primitive {
            name: "sub_transpose",
            shapes: pair,
            positive: false,
            build: |t, v| {
                let d = t.sub(v[0], v[1])?;
                let d = t.scale(d, 1.5);
                Ok(t.transpose(d))
            },
        },
        Primitive {
            name: "add_row",
            shapes: with_row,
            positive: false,
            build: |t, v| t.add_row(v[0], v[1]),
        },
        Primitive {
            name: "mul_row",
            shapes: with_row,
            positive: false,
            build: |t, v| t.mul_row(v[0], v[1]),
        },
        Primitive {
            name: "sum",
            shapes: same,
            positive: false,
            build: |t, v| Ok(t.sum(v[0])),
        },
    ]
}

/// Analytic and finite-difference gradients of `<W, op(inputs)>`.
fn check_primitive(p: &Primitive, inputs: &[Matrix], weights_seed: u64, h: f64) -> Result<f64> {
    let forward = |xs: &[Matrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = (p.build)(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = forward(inputs)?;
    let shape = tape.value(out).shape();
    let w = uniform_matrix(&mut ChaCha8Rng::seed_from_u64(weights_seed), shape.0, shape.1, 1.0);
    let grads = tape.backward(&[(out, w.clone())])?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let scalar = |xs: &[Matrix]| -> f64 {
        let (t, _, o) = forward(xs).expect("shapes fixed");
        t.value(o).as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut xs = inputs.to_vec();
        numeric.push(fd_gradient(&inputs[i], h, |x| {
            xs[i] = x.clone();
            scalar(&xs)
        }));
    }
    Ok(relative_error(
        &concat(&analytic.iter().collect::<Vec<_>>()),
        &concat(&numeric.iter().collect::<Vec<_>>()),
        1e-8,
    ))
}

pub fn check_primitives(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for p in primitives() {
        let mut worst: f64 = 0.0;
        for _ in 0..opts.shapes {
            let (r, c) = (rng.random_range(1..=5), rng.random_range(1..=5));
            let inputs: Vec<Matrix> = (p.shapes)(r, c)
                .into_iter()
                .map(|(a, b)| {
                    if p.positive {
                        Matrix::from_fn(a, b, |_, _| rng.random_range(0.1..1.0))
                    } else {
                        uniform_matrix(&mut rng, a, b, 1.5)
                    }
                })
                .collect();
            worst = worst.max(check_primitive(&p, &inputs, rng.random(), 1e-6)?);
        }
        out.push(CheckResult::new(format!("primitive/{}", p.name), opts.shapes, worst, 1e-6));
    }
    Ok(out)
}

fn random_set<R: Rng>(rng: &mut R, k: usize, d: usize) -> EmbeddingSet {
    EmbeddingSet::new(uniform_matrix(rng, k, d, 1.0)).expect("finite")
}

/// Worst closed-form vs tape and closed-form vs finite-difference errors
/// for smooth-Chamfer over random pairs.
pub fn check_smooth_chamfer(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC4A3);
    let alphas = [1.0, 16.0, 64.0];
    let (mut vs_tape, mut vs_fd): (f64, f64) = (0.0, 0.0);
    for n in 0..opts.pairs {
        let alpha = alphas[n % alphas.len()];
        let (k1, k2) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let s1 = random_set(&mut rng, k1, 8);
        let s2 = random_set(&mut rng, k2, 8);
        let cfg = SimilarityConfig::smooth_chamfer(alpha);
        let closed = similarity_grad(&s1, &s2, &cfg)?;
        let analytic = concat(&[&closed.elems.d_s1, &closed.elems.d_s2]);

        let mut tape = Tape::new();
        let a = tape.leaf(s1.elems().clone());
        let b = tape.leaf(s2.elems().clone());
        let out = smooth_chamfer_on_tape(&mut tape, a, b, alpha)?;
        let g = tape.backward(&[(out, Matrix::filled(1, 1, 1.0))])?;
        vs_tape = vs_tape.max(relative_error(&analytic, &concat(&[&g.wrt(a), &g.wrt(b)]), 1e-12));

        let f = |x: &Matrix, y: &Matrix| {
            similarity(&EmbeddingSet::new(x.clone()).unwrap(), &EmbeddingSet::new(y.clone()).unwrap(), &cfg)
                .unwrap()
        };
        let h = fd_step(alpha);
        let n1 = fd_gradient(s1.elems(), h, |x| f(x, s2.elems()));
        let n2 = fd_gradient(s2.elems(), h, |y| f(s1.elems(), y));
        vs_fd = vs_fd.max(relative_error(&analytic, &concat(&[&n1, &n2]), 1e-12));
    }
    Ok(vec![
        CheckResult::new("smooth-chamfer/closed-form-vs-tape", opts.pairs, vs_tape, 1e-6),
        CheckResult::new("smooth-chamfer/closed-form-vs-fd", opts.pairs, vs_fd, 1e-6),
    ])
}

/// Central-difference step for a similarity with scale `alpha`: the third
/// derivative grows like `alpha^3`, so the step shrinks with it.
fn fd_step(alpha: f64) -> f64 {
    (1e-6 * (16.0 / alpha.max(16.0))).max(1e-7)
}

pub fn check_similarity_kinds(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x51A);
    let mut out = Vec::new();
    for kind in [SimilarityKind::Chamfer, SimilarityKind::Mil, SimilarityKind::Mp] {
        let cfg = match kind {
            SimilarityKind::Mp => SimilarityConfig::mp(3.0, -0.5),
            k => SimilarityConfig::of_kind(k),
        };
        let mut worst: f64 = 0.0;
        for _ in 0..opts.pairs {
            let (k1, k2) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let s1 = random_set(&mut rng, k1, 8);
            let s2 = random_set(&mut rng, k2, 8);
            let closed = similarity_grad(&s1, &s2, &cfg)?;
            let f = |x: &Matrix, y: &Matrix| {
                similarity(&EmbeddingSet::new(x.clone()).unwrap(), &EmbeddingSet::new(y.clone()).unwrap(), &cfg)
                    .unwrap()
            };
            let n1 = fd_gradient(s1.elems(), 1e-6, |x| f(x, s2.elems()));
            let n2 = fd_gradient(s2.elems(), 1e-6, |y| f(s1.elems(), y));
            let mut analytic = concat(&[&closed.elems.d_s1, &closed.elems.d_s2]);
            let mut numeric = concat(&[&n1, &n2]);
            if kind == SimilarityKind::Mp {
                let fa = |a: f64, b: f64| {
                    let c = SimilarityConfig::mp(a, b);
                    similarity(&s1, &s2, &c).unwrap()
                };
                analytic.extend([closed.mp.d_a, closed.mp.d_b]);
                numeric.push((fa(3.0 + 1e-6, -0.5) - fa(3.0 - 1e-6, -0.5)) / 2e-6);
                numeric.push((fa(3.0, -0.5 + 1e-6) - fa(3.0, -0.5 - 1e-6)) / 2e-6);
            }
            worst = worst.max(relative_error(&analytic, &numeric, 1e-12));
        }
        out.push(CheckResult::new(format!("similarity/{}", kind.name()), opts.pairs, worst, 1e-6));
    }
    Ok(out)
}

/// Moves every parameter off its structured initial value (zero output
/// layers, unit gains) so that all gradient paths are exercised.
fn jitter<R: Rng>(store: &mut ParamStore, rng: &mut R, scale: f64) {
    for v in store.values_mut() {
        for x in v.as_mut_slice() {
            *x += rng.random_range(-scale..=scale);
        }
    }
}

fn probe_params<R: Rng>(
    store: &ParamStore,
    analytic: &ParamStore,
    probes: usize,
    rng: &mut R,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let t = rng.random_range(0..store.len());
        let e = rng.random_range(0..store.values()[t].len());
        let mut p = store.clone();
        let orig = p.values()[t].as_slice()[e];
        p.values_mut()[t].as_mut_slice()[e] = orig + h;
        let up = loss(&p);
        p.values_mut()[t].as_mut_slice()[e] = orig - h;
        let down = loss(&p);
        let fd = (up - down) / (2.0 * h);
        // roundoff in `fd` grows with the loss value; keep the floor above it
        let floor = 1e-5 * up.abs().max(down.abs()).max(1e-2);
        worst = worst.max(entry_rel_err(analytic.values()[t].as_slice()[e], fd, floor));
    }
    worst
}

/// `s_SC(predict_set(x), fixed)` differentiated through the predictor.
pub fn check_predictor(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9E7);
    let mut out = Vec::new();
    for use_pe in [false, true] {
        let cfg = SetPredictorConfig {
            k: 3,
            t: 2,
            d: 8,
            d_h: 6,
            mlp_hidden: 7,
            use_positional_encoding: use_pe,
            ..Default::default()
        };
        let mut params = init_params(&cfg, &mut rng)?;
        jitter(&mut params.0, &mut rng, 0.3);
        let feats = SampleFeatures::new(uniform_matrix(&mut rng, 5, 8, 1.0), uniform_matrix(&mut rng, 1, 8, 1.0))?;
        let fixed = random_set(&mut rng, 4, 8);
        let sim = SimilarityConfig::smooth_chamfer(16.0);
        let set = predict_set(&feats, &params, &cfg)?;
        let g = similarity_grad(&set, &fixed, &sim)?;
        let grads = predictor_backward(&feats, &params, &cfg, &g.elems.d_s1, None)?;
        let worst = probe_params(&params.0, &grads.params, opts.probes, &mut rng, |p| {
            let s = predict_set(&feats, &crate::predictor::SetPredictorParams(p.clone()), &cfg).unwrap();
            similarity(&s, &fixed, &sim).unwrap()
        });
        let name = if use_pe { "predictor/with-pe" } else { "predictor" };
        out.push(CheckResult::new(name, opts.probes, worst, 1e-4));
    }
    Ok(out)
}

/// A small run configuration used by the end-to-end check.
pub fn tiny_run(kind: SimilarityKind, seed: u64) -> RunConfig {
    RunConfig {
        data: DataConfig {
            concepts: 6,
            images: 5,
            captions_per_image: 2,
            m_max: 2,
            regions: 4,
            tokens: 3,
            d_raw: 6,
            seed,
            ..Default::default()
        },
        predictor: SetPredictorConfig {
            k: 3,
            t: 2,
            d: 8,
            d_h: 6,
            mlp_hidden: 7,
            ..Default::default()
        },
        loss: LossConfig {
            sim: match kind {
                SimilarityKind::Mp => SimilarityConfig::mp(3.0, 0.0),
                k => SimilarityConfig::of_kind(k),
            },
            reg_weight: 0.5,
            margin: 0.5,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Total loss through encoders, predictors and regularizers.
pub fn check_end_to_end(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xE2E);
    let mut out = Vec::new();
    for (kind, hardest) in [
        (SimilarityKind::SmoothChamfer, true),
        (SimilarityKind::SmoothChamfer, false),
        (SimilarityKind::Mp, true),
    ] {
        let mut run = tiny_run(kind, opts.seed);
        run.loss.hardest_mining = hardest;
        let corpus = generate_corpus(&run.data)?;
        let images: Vec<usize> = (0..corpus.samples.len()).collect();
        let mut model = Model::init(&run.predictor, run.data.d_raw, &run.loss.sim, &mut rng)?;
        jitter(&mut model.params, &mut rng, 0.2);
        let (parts, grads) = loss_and_grads(&model, &corpus, &images, &run)?;
        if parts.triplet == 0.0 {
            return Err(Error::Internal("end-to-end check hit an inactive loss".into()));
        }
        let mut probe_model = model.clone();
        let worst = probe_params(&model.params, &grads, opts.probes, &mut rng, |p| {
            probe_model.params = p.clone();
            loss_and_grads(&probe_model, &corpus, &images, &run).unwrap().0.total
        });
        let name = format!(
            "end-to-end/{}{}",
            kind.name(),
            if hardest { "" } else { "-all-negatives" }
        );
        out.push(CheckResult::new(name, opts.probes, worst, 1e-4));
    }
    Ok(out)
}

/// Runs the selected suites in a fixed order.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let only = opts.only.as_deref();
    if let Some(o) = only {
        if !SUITES.contains(&o) {
            return Err(Error::Config(format!(
                "unknown gradcheck suite `{o}` (expected one of {})",
                SUITES.join(", ")
            )));
        }
    }
    let mut out = Vec::new();
    let want = |s: &str| only.is_none_or(|o| o == s);
    if want("primitives") {
        out.extend(check_primitives(opts)?);
    }
    if want("smooth-chamfer") {
        out.extend(check_smooth_chamfer(opts)?);
    }
    if want("similarity-kinds") {
        out.extend(check_similarity_kinds(opts)?);
    }
    if want("predictor") {
        out.extend(check_predictor(opts)?);
    }
    if want("end-to-end") {
        out.extend(check_end_to_end(opts)?);
    }
    Ok(out)
}
