//! Slot-attention set predictor.
//!
//! `K` element slots compete for local features over `T` iterations of a
//! weight-shared aggregation block:
//!
//! ```text
//! q = LN(E) Wq          k = (LN(x) + PE) Wk          v = LN(x) Wv
//! A = softmax_over_slots(k q^T / sqrt(Dh))        (N x K, rows sum to 1)
//! Â = A / colsum(A)                               (columns sum to 1)
//! Ē = Â^T v Wo + E
//! E' = MLP(LN(Ē)) + Ē
//! ```
//!
//! The output set is `LN(E^T) + LN(global)` broadcast over the slots.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform_matrix, BoundParams, ParamStore};
use crate::similarity::EmbeddingSet;
use crate::tensor::{Axis, GeluKind, Matrix, Tape, Var};

/// Floor on the per-slot attention mass before renormalizing over positions.
pub const ATTN_MASS_FLOOR: f64 = 1e-8;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotInit {
    /// `E0` is a learned `K x D` matrix.
    #[default]
    Learnable,
    /// `E0 = mu + sigma * noise` with learned `mu`, `sigma` and fresh noise per call.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetPredictorConfig {
    /// Set cardinality.
    pub k: usize,
    /// Aggregation-block iterations.
    pub t: usize,
    /// Embedding dimension.
    pub d: usize,
    /// Attention dimension.
    pub d_h: usize,
    pub mlp_hidden: usize,
    pub use_positional_encoding: bool,
    pub init_slots: SlotInit,
    pub add_global: bool,
    /// `Ē = Â^T v Wo + E` when true, `Ē = Â^T v Wo` otherwise.
    pub residual_update: bool,
    pub gelu: GeluKind,
}

impl Default for SetPredictorConfig {
    fn default() -> Self {
        SetPredictorConfig {
            k: 4,
            t: 4,
            d: 64,
            d_h: 64,
            mlp_hidden: 64,
            use_positional_encoding: false,
            init_slots: SlotInit::Learnable,
            add_global: true,
            residual_update: true,
            gelu: GeluKind::Exact,
        }
    }
}

impl SetPredictorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k", self.k),
            ("t", self.t),
            ("d", self.d),
            ("d_h", self.d_h),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("predictor.{name} must be at least 1")));
            }
        }
        if self.use_positional_encoding && !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "positional encoding needs an even dimension, got {}",
                self.d
            )));
        }
        Ok(())
    }
}

/// Local features `N x D` and a global feature `1 x D` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatures {
    pub local: Matrix,
    pub global: Matrix,
}

impl SampleFeatures {
    pub fn new(local: Matrix, global: Matrix) -> Result<Self> {
        if local.rows() == 0 {
            return Err(Error::shape("sample_features", "no local features"));
        }
        if global.rows() != 1 || global.cols() != local.cols() {
            return Err(Error::shape(
                "sample_features",
                format!("global {:?} for local {:?}", global.shape(), local.shape()),
            ));
        }
        if !local.is_finite() || !global.is_finite() {
            return Err(Error::Numeric {
                stage: "sample features".into(),
                iteration: None,
            });
        }
        Ok(SampleFeatures { local, global })
    }
}

/// Slot matrix carried between aggregation blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotState {
    pub slots: Matrix,
    pub iteration: usize,
    /// Slot-normalized attention `A` from the block that produced this state.
    pub attn: Matrix,
}

/// Predictor parameters: one copy of the aggregation block shared across iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct SetPredictorParams(pub ParamStore);

impl SetPredictorParams {
    pub fn store(&self) -> &ParamStore {
        &self.0
    }
}

/// Parameter names and shapes implied by a configuration, in storage order.
pub fn param_layout(cfg: &SetPredictorConfig) -> Vec<(&'static str, (usize, usize))> {
    let (k, d, dh, h) = (cfg.k, cfg.d, cfg.d_h, cfg.mlp_hidden);
    let mut out = Vec::new();
    match cfg.init_slots {
        SlotInit::Learnable => out.push(("slots", (k, d))),
        SlotInit::Random => {
            out.push(("slot_mu", (1, d)));
            out.push(("slot_log_sigma", (1, d)));
        }
    }
    out.extend([
        ("ln_in.gain", (1, d)),
        ("ln_in.bias", (1, d)),
        ("ln_slot.gain", (1, d)),
        ("ln_slot.bias", (1, d)),
        ("w_q", (d, dh)),
        ("w_k", (d, dh)),
        ("w_v", (d, dh)),
        ("w_o", (dh, d)),
        ("ln_mlp.gain", (1, d)),
        ("ln_mlp.bias", (1, d)),
        ("mlp.w1", (d, h)),
        ("mlp.b1", (1, h)),
        ("mlp.w2", (h, d)),
        ("mlp.b2", (1, d)),
        ("ln_out.gain", (1, d)),
        ("ln_out.bias", (1, d)),
    ]);
    if cfg.add_global {
        out.push(("ln_global.gain", (1, d)));
        out.push(("ln_global.bias", (1, d)));
    }
    out
}

/// Uniform `±1/sqrt(fan_in)` for slots and projections, zero MLP output layer,
/// identity layer norms.
pub fn init_params<R: Rng>(cfg: &SetPredictorConfig, rng: &mut R) -> Result<SetPredictorParams> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, (r, c)) in param_layout(cfg) {
        let m = match name {
            "slots" | "slot_mu" => uniform_matrix(rng, r, c, 1.0 / (cfg.d as f64).sqrt()),
            "slot_log_sigma" => Matrix::filled(r, c, -0.5 * (3.0 * cfg.d as f64).ln()),
            "w_q" | "w_k" | "w_v" | "mlp.w1" => uniform_matrix(rng, r, c, 1.0 / (r as f64).sqrt()),
            "w_o" => uniform_matrix(rng, r, c, 1.0 / (r as f64).sqrt()),
            n if n.ends_with(".gain") => Matrix::filled(r, c, 1.0),
            _ => Matrix::zeros(r, c),
        };
        store.insert(name, m);
    }
    Ok(SetPredictorParams(store))
}

/// Sinusoidal position encoding, `n x d`, with sines on even and cosines on
/// odd columns and wavelengths `10000^(2i/d)`.
pub fn sinusoidal_pe(n: usize, d: usize) -> Result<Matrix> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even dimension, got {d}"
        )));
    }
    Ok(Matrix::from_fn(n, d, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Draws the standard-normal noise used by [`SlotInit::Random`].
pub fn sample_slot_noise<R: Rng>(cfg: &SetPredictorConfig, rng: &mut R) -> Matrix {
    Matrix::from_fn(cfg.k, cfg.d, |_, _| StandardNormal.sample(rng))
}

/// Fixed noise for inference with random slot init.
pub fn eval_slot_noise(cfg: &SetPredictorConfig) -> Matrix {
    sample_slot_noise(cfg, &mut ChaCha8Rng::seed_from_u64(0x5107))
}

/// Tape handles for one recorded forward pass.
#[derive(Clone, Debug)]
pub struct SetForward {
    /// Output set, `K x D`.
    pub set: Var,
    /// Pre-fusion slots `E^T`.
    pub slots: Var,
    /// `A` of every iteration, `N x K`.
    pub attn: Vec<Var>,
    /// `Â` of every iteration.
    pub attn_hat: Vec<Var>,
}

struct BlockVars {
    ln_slot_g: Var,
    ln_slot_b: Var,
    w_q: Var,
    w_o: Var,
    ln_mlp_g: Var,
    ln_mlp_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BlockVars {
    fn bind(p: &BoundParams) -> Result<Self> {
        Ok(BlockVars {
            ln_slot_g: p.var("ln_slot.gain")?,
            ln_slot_b: p.var("ln_slot.bias")?,
            w_q: p.var("w_q")?,
            w_o: p.var("w_o")?,
            ln_mlp_g: p.var("ln_mlp.gain")?,
            ln_mlp_b: p.var("ln_mlp.bias")?,
            w1: p.var("mlp.w1")?,
            b1: p.var("mlp.b1")?,
            w2: p.var("mlp.w2")?,
            b2: p.var("mlp.b2")?,
        })
    }
}

/// The set predictor for one modality.
#[derive(Clone, Debug)]
pub struct SetPredictor {
    pub cfg: SetPredictorConfig,
}

impl SetPredictor {
    pub fn new(cfg: SetPredictorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SetPredictor { cfg })
    }

    /// Initial slots `E0` on the tape.
    pub fn initial_slots(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        slot_noise: Option<&Matrix>,
    ) -> Result<Var> {
        match self.cfg.init_slots {
            SlotInit::Learnable => params.var("slots"),
            SlotInit::Random => {
                let noise = match slot_noise {
                    Some(n) => n.clone(),
                    None => eval_slot_noise(&self.cfg),
                };
                if noise.shape() != (self.cfg.k, self.cfg.d) {
                    return Err(Error::shape(
                        "slot_noise",
                        format!("{:?}, expected {:?}", noise.shape(), (self.cfg.k, self.cfg.d)),
                    ));
                }
                let eps = tape.constant(noise);
                let sigma = tape.exp(params.var("slot_log_sigma")?);
                let scaled = tape.mul_row(eps, sigma)?;
                tape.add_row(scaled, params.var("slot_mu")?)
            }
        }
    }

    /// Records the full forward pass: `T` aggregation blocks then fusion.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        local: Var,
        global: Var,
        slot_noise: Option<&Matrix>,
    ) -> Result<SetForward> {
        let e0 = self.initial_slots(tape, params, slot_noise)?;
        let prepared = self.prepare_inputs(tape, params, local)?;
        let block = BlockVars::bind(params)?;
        let mut e = e0;
        let mut attn = Vec::with_capacity(self.cfg.t);
        let mut attn_hat = Vec::with_capacity(self.cfg.t);
        for it in 0..self.cfg.t {
            let out = self.block(tape, &block, prepared, e, it + 1)?;
            e = out.0;
            attn.push(out.1);
            attn_hat.push(out.2);
        }
        let set = self.fuse(tape, params, e, global)?;
        Ok(SetForward {
            set,
            slots: e,
            attn,
            attn_hat,
        })
    }

    /// Keys and values depend only on the local features, so they are
    /// projected once and reused by every iteration.
    fn prepare_inputs(&self, tape: &mut Tape, p: &BoundParams, local: Var) -> Result<(Var, Var)> {
        let n = tape.value(local).rows();
        if tape.value(local).cols() != self.cfg.d {
            return Err(Error::shape(
                "set_predictor",
                format!(
                    "local features have {} columns, expected {}",
                    tape.value(local).cols(),
                    self.cfg.d
                ),
            ));
        }
        let x = tape.layer_norm(local, p.var("ln_in.gain")?, p.var("ln_in.bias")?, LN_EPS)?;
        let key_in = if self.cfg.use_positional_encoding {
            let pe = tape.constant(sinusoidal_pe(n, self.cfg.d)?);
            tape.add(x, pe)?
        } else {
            x
        };
        let k = tape.matmul(key_in, p.var("w_k")?)?;
        let v = tape.matmul(x, p.var("w_v")?)?;
        Ok((k, v))
    }

    fn block(
        &self,
        tape: &mut Tape,
        b: &BlockVars,
        (k, v): (Var, Var),
        e_prev: Var,
        iteration: usize,
    ) -> Result<(Var, Var, Var)> {
        let e_norm = tape.layer_norm(e_prev, b.ln_slot_g, b.ln_slot_b, LN_EPS)?;
        let q = tape.matmul(e_norm, b.w_q)?;
        let logits = tape.matmul_nt(k, q)?;
        let logits = tape.scale(logits, 1.0 / (self.cfg.d_h as f64).sqrt());
        let attn = tape.softmax(logits, Axis::Cols);
        let attn_hat = tape.normalize_cols(attn, ATTN_MASS_FLOOR);
        let attn_hat_t = tape.transpose(attn_hat);
        let pooled = tape.matmul(attn_hat_t, v)?;
        let update = tape.matmul(pooled, b.w_o)?;
        let e_bar = if self.cfg.residual_update {
            tape.add(update, e_prev)?
        } else {
            update
        };
        let h = tape.layer_norm(e_bar, b.ln_mlp_g, b.ln_mlp_b, LN_EPS)?;
        let h = tape.matmul(h, b.w1)?;
        let h = tape.add_row(h, b.b1)?;
        let h = tape.gelu(h, self.cfg.gelu);
        let h = tape.matmul(h, b.w2)?;
        let h = tape.add_row(h, b.b2)?;
        let e_new = tape.add(h, e_bar)?;
        if !tape.value(e_new).is_finite() {
            return Err(Error::Numeric {
                stage: "aggregation block".into(),
                iteration: Some(iteration),
            });
        }
        Ok((e_new, attn, attn_hat))
    }

    fn fuse(&self, tape: &mut Tape, p: &BoundParams, slots: Var, global: Var) -> Result<Var> {
        let s = tape.layer_norm(slots, p.var("ln_out.gain")?, p.var("ln_out.bias")?, LN_EPS)?;
        if !self.cfg.add_global {
            return Ok(s);
        }
        let g = tape.layer_norm(
            global,
            p.var("ln_global.gain")?,
            p.var("ln_global.bias")?,
            LN_EPS,
        )?;
        tape.add_row(s, g)
    }
}

/// One aggregation block applied to `state`, outside of any training tape.
pub fn agg_block(
    features: &SampleFeatures,
    state: &SlotState,
    params: &SetPredictorParams,
    cfg: &SetPredictorConfig,
) -> Result<SlotState> {
    let pred = SetPredictor::new(cfg.clone())?;
    if state.slots.shape() != (cfg.k, cfg.d) {
        return Err(Error::shape(
            "agg_block",
            format!("slots {:?}, expected {:?}", state.slots.shape(), (cfg.k, cfg.d)),
        ));
    }
    let mut tape = Tape::new();
    let bound = params.0.bind_frozen(&mut tape);
    let local = tape.constant(features.local.clone());
    let e = tape.constant(state.slots.clone());
    let kv = pred.prepare_inputs(&mut tape, &bound, local)?;
    let block = BlockVars::bind(&bound)?;
    let (e_new, attn, _) = pred.block(&mut tape, &block, kv, e, state.iteration + 1)?;
    Ok(SlotState {
        slots: tape.value(e_new).clone(),
        iteration: state.iteration + 1,
        attn: tape.value(attn).clone(),
    })
}

/// Output of an inference pass with all intermediate attention maps.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub set: EmbeddingSet,
    pub slots: Matrix,
    pub attn: Vec<Matrix>,
    pub attn_hat: Vec<Matrix>,
}

pub fn predict_detailed(
    features: &SampleFeatures,
    params: &SetPredictorParams,
    cfg: &SetPredictorConfig,
) -> Result<Prediction> {
    let pred = SetPredictor::new(cfg.clone())?;
    let mut tape = Tape::new();
    let bound = params.0.bind_frozen(&mut tape);
    let local = tape.constant(features.local.clone());
    let global = tape.constant(features.global.clone());
    let fwd = pred.forward(&mut tape, &bound, local, global, None)?;
    Ok(Prediction {
        set: EmbeddingSet::new(tape.value(fwd.set).clone())?,
        slots: tape.value(fwd.slots).clone(),
        attn: fwd.attn.iter().map(|&v| tape.value(v).clone()).collect(),
        attn_hat: fwd.attn_hat.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// Runs `T` shared-weight blocks from `E0` and fuses with the global feature.
pub fn predict_set(
    features: &SampleFeatures,
    params: &SetPredictorParams,
    cfg: &SetPredictorConfig,
) -> Result<EmbeddingSet> {
    predict_detailed(features, params, cfg).map(|p| p.set)
}

/// Gradients of a scalar with respect to predictor parameters and inputs.
#[derive(Clone, Debug)]
pub struct PredictorGrads {
    pub params: ParamStore,
    pub local: Matrix,
    pub global: Matrix,
}

/// Re-records the forward pass and pulls `upstream_set` (and optionally an
/// adjoint on the pre-fusion slots) back to every parameter and input.
pub fn predictor_backward(
    features: &SampleFeatures,
    params: &SetPredictorParams,
    cfg: &SetPredictorConfig,
    upstream_set: &Matrix,
    upstream_slots: Option<&Matrix>,
) -> Result<PredictorGrads> {
    let pred = SetPredictor::new(cfg.clone())?;
    let mut tape = Tape::new();
    let bound = params.0.bind(&mut tape);
    let local = tape.leaf(features.local.clone());
    let global = tape.leaf(features.global.clone());
    let fwd = pred.forward(&mut tape, &bound, local, global, None)?;
    let mut seeds = vec![(fwd.set, upstream_set.clone())];
    if let Some(u) = upstream_slots {
        seeds.push((fwd.slots, u.clone()));
    }
    let grads = tape.backward(&seeds)?;
    Ok(PredictorGrads {
        params: params.0.collect_grads(&bound, &grads),
        local: grads.wrt(local),
        global: grads.wrt(global),
    })
}
