//! Non-local self-attention and spatial-wise cross-modal attention (SCA).
//!
//! SCA re-assembles the `N = H·W` positions of each projected map into
//! `G` groups of `S = N/G` positions and folds the group index into the
//! channel axis, so the attention matrix is `S×S` over `Ĉ = C'·G` channels.
//! The attention matmuls then cost `2·S²·Ĉ = 2·N²·C'/G` multiply-accumulates
//! per direction instead of `2·N²·C'`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::param::{init_weight, join_name, Module, Param};
use crate::scalar::{lit, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{fmt_shape, Tensor};

/// A 1×1 convolution: `weight[C_out×C_in]`, `bias[C_out]`.
#[derive(Clone, Debug)]
pub struct Linear1x1<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear1x1<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(init_weight(&[c_out, c_in], c_in, rng)),
            bias: Param::new(Tensor::zeros(&[c_out])),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv1x1(x, w, b)
    }
}

impl<T: Scalar> Module<T> for Linear1x1<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join_name(prefix, "weight"), &self.weight);
        f(&join_name(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

/// Query/key/value embeddings `C → C/2` and the output projection `C/2 → C`.
#[derive(Clone, Debug)]
pub struct ProjectionSet<T> {
    pub query: Linear1x1<T>,
    pub key: Linear1x1<T>,
    pub value: Linear1x1<T>,
    pub out: Linear1x1<T>,
}

impl<T: Scalar> ProjectionSet<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::Config(format!(
                "attention needs an even channel count, got {channels}"
            )));
        }
        let embed = channels / 2;
        Ok(Self {
            query: Linear1x1::new(channels, embed, rng),
            key: Linear1x1::new(channels, embed, rng),
            value: Linear1x1::new(channels, embed, rng),
            out: Linear1x1::new(embed, channels, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.query.in_channels()
    }

    /// `C' = C/2`.
    pub fn embed_channels(&self) -> usize {
        self.query.out_channels()
    }
}

impl<T: Scalar> Module<T> for ProjectionSet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.query.visit_params(&join_name(prefix, "query"), f);
        self.key.visit_params(&join_name(prefix, "key"), f);
        self.value.visit_params(&join_name(prefix, "value"), f);
        self.out.visit_params(&join_name(prefix, "out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.query.visit_params_mut(&join_name(prefix, "query"), f);
        self.key.visit_params_mut(&join_name(prefix, "key"), f);
        self.value.visit_params_mut(&join_name(prefix, "value"), f);
        self.out.visit_params_mut(&join_name(prefix, "out"), f);
    }
}

/// How spatial positions are dealt into groups before re-assembly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Partition {
    /// group `g` holds positions `g·S .. (g+1)·S`
    #[default]
    Contiguous,
    /// positions are shuffled by a seeded permutation, then cut contiguously
    SeededRandom { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaConfig {
    pub group_factor: usize,
    pub partition: Partition,
    pub residual: bool,
    /// divide logits by `sqrt(Ĉ)`
    pub scale_logits: bool,
}

impl Default for ScaConfig {
    fn default() -> Self {
        Self {
            group_factor: 1,
            partition: Partition::Contiguous,
            residual: true,
            scale_logits: true,
        }
    }
}

impl ScaConfig {
    pub fn with_groups(group_factor: usize) -> Self {
        Self {
            group_factor,
            ..Self::default()
        }
    }
}

/// Multiply-accumulate counts of one attention block call.
///
/// `attention_mults` and `projection_mults` are per attention direction;
/// SCA runs two directions (b→a and a→b), the non-local block one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopLedger {
    pub attention_mults: u64,
    pub projection_mults: u64,
    pub directions: u64,
}

impl FlopLedger {
    /// `n` positions, `c` channels, `c_embed = c/2`, `groups = G`.
    pub fn for_attention(n: usize, c: usize, c_embed: usize, groups: usize, directions: u64) -> Self {
        let (n, c, ce, g) = (n as u64, c as u64, c_embed as u64, groups as u64);
        let s = n / g;
        let c_hat = ce * g;
        Self {
            attention_mults: 2 * s * s * c_hat,
            projection_mults: 4 * n * c * ce,
            directions,
        }
    }

    pub fn total(&self) -> u64 {
        self.directions * (self.attention_mults + self.projection_mults)
    }
}

/// Index maps between an `N×C'` (or `C'×N`) map and its `S×Ĉ` re-assembly.
#[derive(Clone, Debug)]
pub struct Reassembly {
    positions: usize,
    embed: usize,
    groups: usize,
    /// `order[g·S + s]` is the spatial position placed at row `s` of group `g`
    order: Vec<usize>,
}

impl Reassembly {
    pub fn new(positions: usize, embed: usize, cfg: &ScaConfig) -> Result<Self> {
        let g = cfg.group_factor;
        if g == 0 || positions % g != 0 {
            return Err(Error::Config(format!(
                "spatial size N = {positions} is not divisible by grouping factor G = {g}"
            )));
        }
        let mut order: Vec<usize> = (0..positions).collect();
        if let Partition::SeededRandom { seed } = cfg.partition {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Self {
            positions,
            embed,
            groups: g,
            order,
        })
    }

    pub fn group_len(&self) -> usize {
        self.positions / self.groups
    }

    pub fn folded_channels(&self) -> usize {
        self.embed * self.groups
    }

    /// Source offsets into a flat `N×C'` map, laid out as `S×Ĉ`.
    pub fn rows_index(&self) -> Vec<usize> {
        self.folded_index(|pos, c| pos * self.embed + c, false)
    }

    /// Source offsets into a flat channel-first `C'×N` map, laid out as `S×Ĉ`
    /// (or `Ĉ×S` when `transposed`).
    pub fn channel_first_index(&self, transposed: bool) -> Vec<usize> {
        self.folded_index(|pos, c| c * self.positions + pos, transposed)
    }

    fn folded_index(&self, src: impl Fn(usize, usize) -> usize, transposed: bool) -> Vec<usize> {
        let (s_len, c_hat) = (self.group_len(), self.folded_channels());
        let mut index = vec![0; self.positions * self.embed];
        for g in 0..self.groups {
            for s in 0..s_len {
                let pos = self.order[g * s_len + s];
                for c in 0..self.embed {
                    let col = g * self.embed + c;
                    let at = if transposed { col * s_len + s } else { s * c_hat + col };
                    index[at] = src(pos, c);
                }
            }
        }
        index
    }

    /// Source offsets into a flat `S×Ĉ` map, laid out as channel-first `C'×N`.
    pub fn restore_index(&self) -> Vec<usize> {
        let (s_len, c_hat) = (self.group_len(), self.folded_channels());
        let mut index = vec![0; self.positions * self.embed];
        for (j, &pos) in self.order.iter().enumerate() {
            let (g, s) = (j / s_len, j % s_len);
            for c in 0..self.embed {
                index[c * self.positions + pos] = s * c_hat + g * self.embed + c;
            }
        }
        index
    }
}

fn gather_plain<T: Scalar>(src: &Tensor<T>, index: &[usize], shape: Vec<usize>) -> Result<Tensor<T>> {
    Tensor::new(shape, index.iter().map(|&i| src.data()[i]).collect())
}

/// Re-assembles `x[N×C']` into `S×Ĉ`:
/// `out(s, g·C' + c) = x(π(g·S + s), c)`.
pub fn sca_reassemble<T: Scalar>(x: &Tensor<T>, cfg: &ScaConfig) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(dim_err(
            "sca_reassemble",
            format!("expected N×C', got {}", fmt_shape(x.shape())),
        ));
    }
    let plan = Reassembly::new(x.shape()[0], x.shape()[1], cfg)?;
    gather_plain(x, &plan.rows_index(), vec![plan.group_len(), plan.folded_channels()])
}

/// Inverse of [`sca_reassemble`] followed by unflattening to `C'×H×W`.
pub fn sca_restore<T: Scalar>(z: &Tensor<T>, cfg: &ScaConfig, shape: (usize, usize, usize)) -> Result<Tensor<T>> {
    let (embed, h, w) = shape;
    let n = h * w;
    if z.rank() != 2 || z.numel() != embed * n || z.shape()[0] * cfg.group_factor != n {
        return Err(dim_err(
            "sca_restore",
            format!(
                "{} cannot restore to {embed}x{h}x{w} with G = {}",
                fmt_shape(z.shape()),
                cfg.group_factor
            ),
        ));
    }
    let plan = Reassembly::new(n, embed, cfg)?;
    gather_plain(z, &plan.restore_index(), vec![embed, h, w])
}

/// Output of one attention block call on a tape.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub z: Var,
    /// row-stochastic attention map (`N×N` or `S×S`)
    pub attention: Var,
}

struct Direction<'a, T> {
    query: &'a Linear1x1<T>,
    key: &'a Linear1x1<T>,
    value: &'a Linear1x1<T>,
    out: &'a Linear1x1<T>,
}

fn check_feature<T: Scalar>(tape: &Tape<T>, x: Var, channels: usize, op: &'static str) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[0] != channels {
        return Err(dim_err(
            op,
            format!("expected {channels}×H×W feature map, got {}", fmt_shape(s)),
        ));
    }
    Ok((s[1], s[2]))
}

/// One attention direction: queries from `x_q`, keys/values from `x_kv`,
/// residual (when enabled) onto `x_kv`.
fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    dir: Direction<'_, T>,
    x_q: Var,
    x_kv: Var,
    plan: &Reassembly,
    cfg: &ScaConfig,
    hw: (usize, usize),
) -> Result<AttentionOutput> {
    let (s_len, c_hat) = (plan.group_len(), plan.folded_channels());
    let rows: Arc<[usize]> = plan.channel_first_index(false).into();
    let cols: Arc<[usize]> = plan.channel_first_index(true).into();

    let q = dir.query.forward(tape, x_q)?;
    let k = dir.key.forward(tape, x_kv)?;
    let v = dir.value.forward(tape, x_kv)?;
    let q = tape.gather(q, rows.clone(), &[s_len, c_hat])?;
    let k_t = tape.gather(k, cols, &[c_hat, s_len])?;
    let v = tape.gather(v, rows, &[s_len, c_hat])?;

    let mut logits = tape.matmul(q, k_t)?;
    if cfg.scale_logits {
        logits = tape.scale(logits, lit::<T>(1.0) / lit::<T>(c_hat as f64).sqrt());
    }
    let attention = tape.softmax(logits, 1)?;
    let z = tape.matmul(attention, v)?;
    let z = tape.gather(z, plan.restore_index().into(), &[plan.embed, hw.0, hw.1])?;
    let mut z = dir.out.forward(tape, z)?;
    if cfg.residual {
        z = tape.add(x_kv, z)?;
    }
    Ok(AttentionOutput { z, attention })
}

/// The baseline non-local block: `Z = softmax(Q·Kᵀ)·V`, projected back to `C`.
#[derive(Clone, Debug)]
pub struct NonLocalBlock<T> {
    pub proj: ProjectionSet<T>,
    pub residual: bool,
}

impl<T: Scalar> NonLocalBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, residual: bool, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: ProjectionSet::new(channels, rng)?,
            residual,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(AttentionOutput, FlopLedger)> {
        let c = self.proj.channels();
        let (h, w) = check_feature(tape, x, c, "nonlocal_forward")?;
        let cfg = ScaConfig {
            group_factor: 1,
            partition: Partition::Contiguous,
            residual: self.residual,
            scale_logits: false,
        };
        let embed = self.proj.embed_channels();
        let plan = Reassembly::new(h * w, embed, &cfg)?;
        let dir = Direction {
            query: &self.proj.query,
            key: &self.proj.key,
            value: &self.proj.value,
            out: &self.proj.out,
        };
        let out = attend(tape, dir, x, x, &plan, &cfg, (h, w))?;
        Ok((out, FlopLedger::for_attention(h * w, c, embed, 1, 1)))
    }

    /// Forward on a throwaway inference tape.
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FlopLedger)> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (out, ledger) = self.forward(&mut tape, xv)?;
        Ok((tape.value(out.z).clone(), ledger))
    }
}

impl<T: Scalar> Module<T> for NonLocalBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.proj.visit_params(&join_name(prefix, "proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.proj.visit_params_mut(&join_name(prefix, "proj"), f);
    }
}

#[derive(Clone, Debug)]
pub struct ScaOutput {
    pub z_a: Var,
    pub z_b: Var,
    pub attention_a: Var,
    pub attention_b: Var,
    pub ledger: FlopLedger,
}

/// Cross-modal attention: `Z_a = softmax(Q_b·K_aᵀ/√Ĉ)·V_a` on re-assembled
/// maps, and symmetrically `Z_b` with queries from modality a.
#[derive(Clone, Debug)]
pub struct ScaBlock<T> {
    pub proj_a: ProjectionSet<T>,
    pub proj_b: ProjectionSet<T>,
    pub cfg: ScaConfig,
}

impl<T: Scalar> ScaBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, cfg: ScaConfig, rng: &mut R) -> Result<Self> {
        if cfg.group_factor == 0 {
            return Err(Error::Config("grouping factor must be positive".into()));
        }
        Ok(Self {
            proj_a: ProjectionSet::new(channels, rng)?,
            proj_b: ProjectionSet::new(channels, rng)?,
            cfg,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj_a.channels()
    }

    pub fn forward(&self, tape: &mut Tape<T>, x_a: Var, x_b: Var) -> Result<ScaOutput> {
        let c = self.channels();
        if tape.shape(x_a) != tape.shape(x_b) {
            return Err(dim_err(
                "sca_forward",
                format!(
                    "modality a is {} but modality b is {}",
                    fmt_shape(tape.shape(x_a)),
                    fmt_shape(tape.shape(x_b))
                ),
            ));
        }
        let (h, w) = check_feature(tape, x_a, c, "sca_forward")?;
        let embed = self.proj_a.embed_channels();
        let plan = Reassembly::new(h * w, embed, &self.cfg)?;
        let to_a = Direction {
            query: &self.proj_b.query,
            key: &self.proj_a.key,
            value: &self.proj_a.value,
            out: &self.proj_a.out,
        };
        let a = attend(tape, to_a, x_b, x_a, &plan, &self.cfg, (h, w))?;
        let to_b = Direction {
            query: &self.proj_a.query,
            key: &self.proj_b.key,
            value: &self.proj_b.value,
            out: &self.proj_b.out,
        };
        let b = attend(tape, to_b, x_a, x_b, &plan, &self.cfg, (h, w))?;
        Ok(ScaOutput {
            z_a: a.z,
            z_b: b.z,
            attention_a: a.attention,
            attention_b: b.attention,
            ledger: FlopLedger::for_attention(h * w, c, embed, self.cfg.group_factor, 2),
        })
    }

    /// Forward on a throwaway inference tape.
    pub fn forward_tensors(&self, x_a: &Tensor<T>, x_b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, FlopLedger)> {
        let mut tape = Tape::inference();
        let a = tape.constant(x_a.clone());
        let b = tape.constant(x_b.clone());
        let out = self.forward(&mut tape, a, b)?;
        Ok((
            tape.value(out.z_a).clone(),
            tape.value(out.z_b).clone(),
            out.ledger,
        ))
    }
}

impl<T: Scalar> Module<T> for ScaBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.proj_a.visit_params(&join_name(prefix, "proj_a"), f);
        self.proj_b.visit_params(&join_name(prefix, "proj_b"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.proj_a.visit_params_mut(&join_name(prefix, "proj_a"), f);
        self.proj_b.visit_params_mut(&join_name(prefix, "proj_b"), f);
    }
}
