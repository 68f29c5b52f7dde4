//! The two-tower model: per modality an affine encoder followed by a set
//! predictor, plus MP's sigmoid parameters when that similarity is used.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_on_tape, EncoderParams, RawFeatures};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::predictor::{init_params, SetPredictor, SetPredictorConfig, SetPredictorParams};
use crate::similarity::{EmbeddingSet, SimilarityConfig, SimilarityKind};
use crate::tensor::{Gradients, Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Visual, Modality::Text];

    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Visual => "visual.",
            Modality::Text => "text.",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
        }
    }
}

pub const MP_A: &str = "sim.mp_a";
pub const MP_B: &str = "sim.mp_b";

/// All trainable tensors, named `<modality>.enc.*`, `<modality>.pred.*`
/// and `sim.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub predictor: SetPredictorConfig,
    pub d_raw: usize,
    pub params: ParamStore,
}

/// Parameters of one modality, split out once per step.
#[derive(Clone, Debug)]
pub struct Tower {
    pub modality: Modality,
    pub encoder: EncoderParams,
    pub predictor: SetPredictorParams,
    pub cfg: SetPredictorConfig,
}

impl Model {
    pub fn init<R: Rng>(
        predictor: &SetPredictorConfig,
        d_raw: usize,
        sim: &SimilarityConfig,
        rng: &mut R,
    ) -> Result<Model> {
        predictor.validate()?;
        if d_raw == 0 {
            return Err(Error::Config("d_raw must be at least 1".into()));
        }
        let mut params = ParamStore::new();
        for m in Modality::BOTH {
            let enc = EncoderParams::init(d_raw, predictor.d, rng);
            let pred = init_params(predictor, rng)?;
            params.extend_prefixed(&format!("{}enc.", m.prefix()), &enc.0);
            params.extend_prefixed(&format!("{}pred.", m.prefix()), &pred.0);
        }
        if sim.kind == SimilarityKind::Mp {
            params.insert(MP_A, Matrix::filled(1, 1, sim.mp_a.unwrap_or(5.0)));
            params.insert(MP_B, Matrix::filled(1, 1, sim.mp_b.unwrap_or(0.0)));
        }
        Ok(Model {
            predictor: predictor.clone(),
            d_raw,
            params,
        })
    }

    pub fn tower(&self, m: Modality) -> Tower {
        Tower {
            modality: m,
            encoder: EncoderParams(self.params.sub_store(&format!("{}enc.", m.prefix()))),
            predictor: SetPredictorParams(self.params.sub_store(&format!("{}pred.", m.prefix()))),
            cfg: self.predictor.clone(),
        }
    }

    /// `base` with MP's parameters taken from the model when present.
    pub fn similarity_config(&self, base: &SimilarityConfig) -> SimilarityConfig {
        let mut cfg = base.clone();
        if let (Some(a), Some(b)) = (self.params.get(MP_A), self.params.get(MP_B)) {
            cfg.mp_a = Some(a[(0, 0)]);
            cfg.mp_b = Some(b[(0, 0)]);
        }
        cfg
    }

    /// Frozen-parameter embedding of many samples, in input order.
    pub fn embed_all(&self, m: Modality, raws: &[&RawFeatures]) -> Result<Vec<EmbeddingSet>> {
        let tower = self.tower(m);
        raws.par_iter()
            .map(|r| tower.embed(r).map(|(set, _)| set))
            .collect()
    }
}

/// A recorded forward pass of one sample.
pub struct SampleTape {
    tape: Tape,
    bound_enc: BoundParams,
    bound_pred: BoundParams,
    pub set: Var,
    pub slots: Var,
}

impl SampleTape {
    pub fn set_value(&self) -> &Matrix {
        self.tape.value(self.set)
    }

    pub fn slots_value(&self) -> &Matrix {
        self.tape.value(self.slots)
    }

    /// Pulls adjoints on the fused set and the pre-fusion slots back to the
    /// tower's parameters, returned under their full model names.
    pub fn backward(&self, tower: &Tower, d_set: &Matrix, d_slots: &Matrix) -> Result<ParamStore> {
        let grads: Gradients = self
            .tape
            .backward(&[(self.set, d_set.clone()), (self.slots, d_slots.clone())])?;
        let mut out = ParamStore::new();
        let prefix = tower.modality.prefix();
        out.extend_prefixed(
            &format!("{prefix}enc."),
            &tower.encoder.0.collect_grads(&self.bound_enc, &grads),
        );
        out.extend_prefixed(
            &format!("{prefix}pred."),
            &tower.predictor.0.collect_grads(&self.bound_pred, &grads),
        );
        Ok(out)
    }
}

impl Tower {
    /// Records encoder and predictor for one sample with trainable parameters.
    pub fn record(&self, raw: &RawFeatures, slot_noise: Option<&Matrix>) -> Result<SampleTape> {
        let pred = SetPredictor::new(self.cfg.clone())?;
        let mut tape = Tape::new();
        let bound_enc = self.encoder.0.bind(&mut tape);
        let bound_pred = self.predictor.0.bind(&mut tape);
        let l = tape.constant(raw.local.clone());
        let g = tape.constant(raw.global.clone());
        let (l, g) = encode_on_tape(&mut tape, &bound_enc, l, g)?;
        let fwd = pred.forward(&mut tape, &bound_pred, l, g, slot_noise)?;
        Ok(SampleTape {
            tape,
            bound_enc,
            bound_pred,
            set: fwd.set,
            slots: fwd.slots,
        })
    }

    /// Inference: the embedding set and pre-fusion slots of one sample.
    pub fn embed(&self, raw: &RawFeatures) -> Result<(EmbeddingSet, Matrix)> {
        let pred = SetPredictor::new(self.cfg.clone())?;
        let mut tape = Tape::new();
        let bound_enc = self.encoder.0.bind_frozen(&mut tape);
        let bound_pred = self.predictor.0.bind_frozen(&mut tape);
        let l = tape.constant(raw.local.clone());
        let g = tape.constant(raw.global.clone());
        let (l, g) = encode_on_tape(&mut tape, &bound_enc, l, g)?;
        let fwd = pred.forward(&mut tape, &bound_pred, l, g, None)?;
        Ok((
            EmbeddingSet::new(tape.value(fwd.set).clone())?,
            tape.value(fwd.slots).clone(),
        ))
    }
}
