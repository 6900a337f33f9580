//! Channel-wise feature aggregation (CFA).
//!
//! The two attended maps are concatenated to `F_c[2C×H×W]`, passed through a
//! per-pixel bottleneck MLP (`2C → 2C/r → 2C`, ReLU between), and a softmax
//! over the modality pair `{logit[c], logit[C+c]}` at every `(c, h, w)` yields
//! convex weights `w_a + w_b = 1`. The fused map is `w_a ⊙ F_a + w_b ⊙ F_b`.

use rand::Rng;

use crate::attention::Linear1x1;
use crate::error::{dim_err, Error, Result};
use crate::param::{join_name, Module, Param};
use crate::scalar::{lit, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{fmt_shape, Tensor};

/// Which pair of maps the modality weights are applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AggregateSource {
    /// the SCA outputs the weights were computed from
    #[default]
    ScaOutput,
    /// the raw backbone features entering the SCA block
    BackboneFeature,
}

impl AggregateSource {
    pub fn name(self) -> &'static str {
        match self {
            AggregateSource::ScaOutput => "sca_output",
            AggregateSource::BackboneFeature => "backbone_feature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sca_output" => Some(AggregateSource::ScaOutput),
            "backbone_feature" => Some(AggregateSource::BackboneFeature),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CfaBlock<T> {
    pub squeeze: Linear1x1<T>,
    pub expand: Linear1x1<T>,
    channels: usize,
    reduction: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CfaOutput {
    pub f_agg: Var,
    pub w_a: Var,
    pub w_b: Var,
}

impl<T: Scalar> CfaBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let joined = 2 * channels;
        if channels == 0 || reduction == 0 || joined % reduction != 0 || joined / reduction == 0 {
            return Err(Error::Config(format!(
                "2C = {joined} is not divisible by reduction r = {reduction}"
            )));
        }
        let hidden = joined / reduction;
        Ok(Self {
            squeeze: Linear1x1::new(joined, hidden, rng),
            expand: Linear1x1::new(hidden, joined, rng),
            channels,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    /// Modality weights from `z_a`, `z_b`; aggregates the same two maps.
    pub fn forward(&self, tape: &mut Tape<T>, z_a: Var, z_b: Var) -> Result<CfaOutput> {
        self.forward_onto(tape, z_a, z_b, z_a, z_b)
    }

    /// Modality weights from `z_a`, `z_b`; aggregates `src_a`, `src_b`.
    pub fn forward_onto(&self, tape: &mut Tape<T>, z_a: Var, z_b: Var, src_a: Var, src_b: Var) -> Result<CfaOutput> {
        let shape = tape.shape(z_a).to_vec();
        for v in [z_b, src_a, src_b] {
            if tape.shape(v) != shape.as_slice() {
                return Err(dim_err(
                    "cfa_forward",
                    format!("{} vs {}", fmt_shape(&shape), fmt_shape(tape.shape(v))),
                ));
            }
        }
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(dim_err(
                "cfa_forward",
                format!(
                    "expected {}×H×W maps, got {}",
                    self.channels,
                    fmt_shape(&shape)
                ),
            ));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let joined = tape.concat(&[z_a, z_b], 0)?;
        let hidden = self.squeeze.forward(tape, joined)?;
        let hidden = tape.relu(hidden);
        let logits = self.expand.forward(tape, hidden)?;
        let pairs = tape.reshape(logits, &[2, c, h, w])?;
        let weights = tape.softmax(pairs, 0)?;
        let w_a = tape.slice(weights, 0, 0, 1)?;
        let w_a = tape.reshape(w_a, &shape)?;
        let w_b = tape.slice(weights, 0, 1, 1)?;
        let w_b = tape.reshape(w_b, &shape)?;
        // w_a ⊙ src_a + w_b ⊙ src_b written as src_b + w_a ⊙ (src_a − src_b),
        // which is exact when the two sources coincide
        let diff = tape.sub(src_a, src_b)?;
        let shift = tape.hadamard(w_a, diff)?;
        let f_agg = tape.add(src_b, shift)?;
        Ok(CfaOutput { f_agg, w_a, w_b })
    }
}

impl<T: Scalar> Module<T> for CfaBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.squeeze.visit_params(&join_name(prefix, "squeeze"), f);
        self.expand.visit_params(&join_name(prefix, "expand"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.squeeze.visit_params_mut(&join_name(prefix, "squeeze"), f);
        self.expand.visit_params_mut(&join_name(prefix, "expand"), f);
    }
}

/// `(f_agg + f_modality) / 2`, the map handed to the next stage.
pub fn propagate_update<T: Scalar>(tape: &mut Tape<T>, f_agg: Var, f_modality: Var) -> Result<Var> {
    let sum = tape.add(f_agg, f_modality)?;
    Ok(tape.scale(sum, lit(0.5)))
}

/// Tensor form of [`propagate_update`].
pub fn propagate_update_tensor<T: Scalar>(f_agg: &Tensor<T>, f_modality: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let a = tape.constant(f_agg.clone());
    let b = tape.constant(f_modality.clone());
    let out = propagate_update(&mut tape, a, b)?;
    Ok(tape.value(out).clone())
}
