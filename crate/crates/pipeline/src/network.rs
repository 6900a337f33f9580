//! The two-branch counting network and its single-modality, early- and
//! late-fusion baselines.

use csca_core::attention::{FlopLedger, Linear1x1, ScaBlock};
use csca_core::cfa::{propagate_update, AggregateSource, CfaBlock};
use csca_core::param::join_name;
use csca_core::rng::{substream, substream_seed};
use csca_core::{Error, Module, Param, Result, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::config::{FusionMode, StageConfig};

/// Uniform weights with bound `sqrt(6/fan_in)`, which keeps activation
/// variance roughly constant through ReLU layers.
fn relu_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// 3×3 convolution (padding 1) followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvStage<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
}

impl<T: Scalar> ConvStage<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(relu_init(&[c_out, c_in, 3, 3], 9 * c_in, rng)),
            bias: Param::new(Tensor::zeros(&[c_out])),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.conv2d(x, w, b, self.stride, 1)?;
        Ok(tape.relu(y))
    }
}

impl<T: Scalar> Module<T> for ConvStage<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join_name(prefix, "weight"), &self.weight);
        f(&join_name(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

/// One backbone branch: a stack of conv stages.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub stages: Vec<ConvStage<T>>,
}

impl<T: Scalar> Branch<T> {
    fn new<R: Rng + ?Sized>(in_channels: usize, cfg: &StageConfig, rng: &mut R) -> Self {
        let mut c_in = in_channels;
        let stages = cfg
            .channels
            .iter()
            .zip(&cfg.strides)
            .map(|(&c, &s)| {
                let st = ConvStage::new(c_in, c, s, rng);
                c_in = c;
                st
            })
            .collect();
        Self { stages }
    }

    fn run(&self, tape: &mut Tape<T>, mut x: Var) -> Result<Var> {
        for st in &self.stages {
            x = st.forward(tape, x)?;
        }
        Ok(x)
    }
}

impl<T: Scalar> Module<T> for Branch<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, st) in self.stages.iter().enumerate() {
            st.visit_params(&join_name(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, st) in self.stages.iter_mut().enumerate() {
            st.visit_params_mut(&join_name(prefix, &format!("stage{i}")), f);
        }
    }
}

/// SCA followed by CFA at one stage.
#[derive(Clone, Debug)]
pub struct CscaBlock<T> {
    pub sca: ScaBlock<T>,
    pub cfa: CfaBlock<T>,
    pub source: AggregateSource,
}

/// Result of one CSCA site.
#[derive(Clone, Copy, Debug)]
pub struct CscaSite {
    pub f_agg: Var,
    pub w_a: Var,
    pub w_b: Var,
    pub ledger: FlopLedger,
}

impl<T: Scalar> CscaBlock<T> {
    pub fn forward(&self, tape: &mut Tape<T>, f_a: Var, f_b: Var) -> Result<CscaSite> {
        let sca = self.sca.forward(tape, f_a, f_b)?;
        let out = match self.source {
            AggregateSource::ScaOutput => self.cfa.forward(tape, sca.z_a, sca.z_b)?,
            AggregateSource::BackboneFeature => self.cfa.forward_onto(tape, sca.z_a, sca.z_b, f_a, f_b)?,
        };
        Ok(CscaSite {
            f_agg: out.f_agg,
            w_a: out.w_a,
            w_b: out.w_b,
            ledger: sca.ledger,
        })
    }
}

impl<T: Scalar> Module<T> for CscaBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.sca.visit_params(&join_name(prefix, "sca"), f);
        self.cfa.visit_params(&join_name(prefix, "cfa"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.sca.visit_params_mut(&join_name(prefix, "sca"), f);
        self.cfa.visit_params_mut(&join_name(prefix, "cfa"), f);
    }
}

/// Two 1×1 convolutions with ReLU; the output ReLU keeps densities non-negative.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub hidden: Linear1x1<T>,
    pub out: Linear1x1<T>,
}

impl<T: Scalar> Decoder<T> {
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        let y = self.out.forward(tape, h)?;
        let y = tape.relu(y);
        let (hh, ww) = (tape.shape(y)[1], tape.shape(y)[2]);
        tape.reshape(y, &[hh, ww])
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.hidden.visit_params(&join_name(prefix, "hidden"), f);
        self.out.visit_params(&join_name(prefix, "out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.hidden.visit_params_mut(&join_name(prefix, "hidden"), f);
        self.out.visit_params_mut(&join_name(prefix, "out"), f);
    }
}

/// Everything a forward pass exposes besides the density map.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub density: Var,
    /// propagated (modality a, modality b) features after every CSCA stage
    pub streams: Vec<(Var, Var)>,
    pub sites: Vec<CscaSite>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    pub mode: FusionMode,
    pub cfg: StageConfig,
    /// modality a branch; in early fusion it takes both modalities stacked
    pub branch_a: Option<Branch<T>>,
    pub branch_b: Option<Branch<T>>,
    pub csca: Vec<CscaBlock<T>>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> Network<T> {
    /// Deterministic in `seed`: weights come from the "init" substream and
    /// random partitions from the "partition" substream.
    pub fn new(cfg: &StageConfig, mode: FusionMode, seed: u64) -> Result<Self> {
        cfg.validate(mode)?;
        let mut rng = substream(seed, "init");
        let part_seed = substream_seed(seed, "partition");
        let cin = cfg.in_channels;
        let (branch_a, branch_b) = match mode {
            FusionMode::Csca | FusionMode::Late => (
                Some(Branch::new(cin, cfg, &mut rng)),
                Some(Branch::new(cin, cfg, &mut rng)),
            ),
            FusionMode::RgbOnly => (Some(Branch::new(cin, cfg, &mut rng)), None),
            FusionMode::AuxOnly => (None, Some(Branch::new(cin, cfg, &mut rng))),
            FusionMode::Early => (Some(Branch::new(2 * cin, cfg, &mut rng)), None),
        };
        let mut csca = Vec::new();
        if mode == FusionMode::Csca {
            for (i, &c) in cfg.channels.iter().enumerate() {
                csca.push(CscaBlock {
                    sca: ScaBlock::new(c, cfg.sca_config(i, part_seed), &mut rng)?,
                    cfa: CfaBlock::new(c, cfg.cfa_reduction, &mut rng)?,
                    source: cfg.aggregate_source,
                });
            }
        }
        let last = *cfg.channels.last().expect("validated");
        let dec_in = if mode == FusionMode::Late { 2 * last } else { last };
        let decoder = Decoder {
            hidden: Linear1x1::new(dec_in, cfg.decoder_hidden, &mut rng),
            out: Linear1x1::new(cfg.decoder_hidden, 1, &mut rng),
        };
        Ok(Self {
            mode,
            cfg: cfg.clone(),
            branch_a,
            branch_b,
            csca,
            decoder,
        })
    }

    /// Copies branch a into branch b and every `proj_a` into `proj_b`, so
    /// the two modality paths compute the same function.
    pub fn tie_modalities(&mut self) {
        if let Some(a) = &self.branch_a {
            if self.branch_b.is_some() {
                self.branch_b = Some(a.clone());
            }
        }
        for blk in &mut self.csca {
            blk.sca.proj_b = blk.sca.proj_a.clone();
        }
    }

    fn check_inputs(&self, tape: &Tape<T>, x_a: Var, x_b: Var) -> Result<()> {
        let want = [self.cfg.in_channels, self.cfg.height, self.cfg.width];
        for (name, v) in [("modality a", x_a), ("modality b", x_b)] {
            if tape.shape(v) != want {
                return Err(Error::Dimension {
                    op: "network_forward",
                    detail: format!(
                        "{name} is {:?}, expected {:?}",
                        tape.shape(v),
                        want
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<T>, x_a: Var, x_b: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, x_a, x_b)?.density)
    }

    pub fn forward_traced(&self, tape: &mut Tape<T>, x_a: Var, x_b: Var) -> Result<ForwardTrace> {
        self.check_inputs(tape, x_a, x_b)?;
        let mut streams = Vec::new();
        let mut sites = Vec::new();
        let features = match self.mode {
            FusionMode::RgbOnly => self.branch_a.as_ref().expect("rgb branch").run(tape, x_a)?,
            FusionMode::AuxOnly => self.branch_b.as_ref().expect("aux branch").run(tape, x_b)?,
            FusionMode::Early => {
                let x = tape.concat(&[x_a, x_b], 0)?;
                self.branch_a.as_ref().expect("early branch").run(tape, x)?
            }
            FusionMode::Late => {
                let fa = self.branch_a.as_ref().expect("branch a").run(tape, x_a)?;
                let fb = self.branch_b.as_ref().expect("branch b").run(tape, x_b)?;
                tape.concat(&[fa, fb], 0)?
            }
            FusionMode::Csca => {
                let (ba, bb) = (
                    self.branch_a.as_ref().expect("branch a"),
                    self.branch_b.as_ref().expect("branch b"),
                );
                let (mut ha, mut hb) = (x_a, x_b);
                let last = self.csca.len() - 1;
                let mut fused = None;
                for (i, blk) in self.csca.iter().enumerate() {
                    let fa = ba.stages[i].forward(tape, ha)?;
                    let fb = bb.stages[i].forward(tape, hb)?;
                    let site = blk.forward(tape, fa, fb)?;
                    sites.push(site);
                    if i == last {
                        fused = Some(site.f_agg);
                    } else {
                        ha = propagate_update(tape, site.f_agg, fa)?;
                        hb = propagate_update(tape, site.f_agg, fb)?;
                        streams.push((ha, hb));
                    }
                }
                fused.expect("at least one stage")
            }
        };
        let density = self.decoder.forward(tape, features)?;
        Ok(ForwardTrace {
            density,
            streams,
            sites,
        })
    }

    /// Predicted density map for one input pair.
    pub fn predict(&self, x_a: &Tensor<T>, x_b: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let a = tape.constant(x_a.clone());
        let b = tape.constant(x_b.clone());
        let d = self.forward(&mut tape, a, b)?;
        Ok(tape.value(d).clone())
    }

    /// Attention cost summed over every CSCA site.
    pub fn attention_ledger(&self) -> Vec<FlopLedger> {
        self.cfg
            .stage_extents()
            .iter()
            .zip(&self.csca)
            .map(|(&(h, w), blk)| {
                let c = blk.sca.channels();
                FlopLedger::for_attention(h * w, c, c / 2, blk.sca.cfg.group_factor, 2)
            })
            .collect()
    }
}

impl<T: Scalar> Module<T> for Network<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(b) = &self.branch_a {
            b.visit_params(&join_name(prefix, "branch_a"), f);
        }
        if let Some(b) = &self.branch_b {
            b.visit_params(&join_name(prefix, "branch_b"), f);
        }
        for (i, blk) in self.csca.iter().enumerate() {
            blk.visit_params(&join_name(prefix, &format!("csca{i}")), f);
        }
        self.decoder.visit_params(&join_name(prefix, "decoder"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(b) = &mut self.branch_a {
            b.visit_params_mut(&join_name(prefix, "branch_a"), f);
        }
        if let Some(b) = &mut self.branch_b {
            b.visit_params_mut(&join_name(prefix, "branch_b"), f);
        }
        for (i, blk) in self.csca.iter_mut().enumerate() {
            blk.visit_params_mut(&join_name(prefix, &format!("csca{i}")), f);
        }
        self.decoder.visit_params_mut(&join_name(prefix, "decoder"), f);
    }
}
