//! Finite-difference suites for every tape operation and for the attention
//! and aggregation blocks, run in 64-bit.

use rand::Rng;

use crate::attention::{NonLocalBlock, Partition, ScaBlock, ScaConfig};
use crate::cfa::CfaBlock;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, finite_diff_check_with_fault, GradCheckReport};
use crate::rng::{substream, StreamRng};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const OP_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;

/// Outcome of one finite-difference case.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub suite: &'static str,
    pub name: String,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Runs `f` through [`finite_diff_check`], optionally with a corrupted adjoint.
pub fn run_case<F>(
    suite: &'static str,
    name: impl Into<String>,
    f: F,
    x: &Tensor<f64>,
    tol: f64,
    fault: Option<OpKind>,
) -> Result<CaseResult>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = match fault {
        Some(kind) => finite_diff_check_with_fault(f, x, STEP, tol, kind)?,
        None => finite_diff_check(f, x, STEP, tol)?,
    };
    Ok(CaseResult {
        suite,
        name: name.into(),
        report,
    })
}

fn rand_t(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so ReLU kinks sit outside the stencil.
fn rand_off_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let prod = tape.hadamard(out, r)?;
    Ok(tape.sum(prod))
}

/// One case per differentiable tape operation (and per argument where it matters).
pub fn tensor_op_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CaseResult>> {
    let mut rng = substream(seed, "gradcheck.ops");
    let rng = &mut rng;
    let mut out = Vec::new();
    let s = "tensor-core";

    let a = rand_t(rng, &[3, 4]);
    let b = rand_t(rng, &[4, 5]);
    let r = rand_t(rng, &[3, 5]);
    out.push(run_case(s, "matmul.lhs", |t, x| {
        let bv = t.constant(b.clone());
        let z = t.matmul(x, bv)?;
        weighted_sum(t, z, &r)
    }, &a, OP_TOL, fault)?);
    out.push(run_case(s, "matmul.rhs", |t, x| {
        let av = t.constant(a.clone());
        let z = t.matmul(av, x)?;
        weighted_sum(t, z, &r)
    }, &b, OP_TOL, fault)?);

    let logits = rand_t(rng, &[3, 4, 5]).map(|v| 3.0 * v);
    let r = rand_t(rng, &[3, 4, 5]);
    for axis in 0..3 {
        let r = r.clone();
        out.push(run_case(s, format!("softmax.axis{axis}"), move |t, x| {
            let y = t.softmax(x, axis)?;
            weighted_sum(t, y, &r)
        }, &logits, OP_TOL, fault)?);
    }

    let x = rand_t(rng, &[4, 8, 8]);
    let w = rand_t(rng, &[3, 4]);
    let bias = rand_t(rng, &[3]);
    let r = rand_t(rng, &[3, 8, 8]);
    out.push(run_case(s, "conv1x1.input", |t, v| {
        let (wv, bv) = (t.constant(w.clone()), t.constant(bias.clone()));
        let y = t.conv1x1(v, wv, bv)?;
        weighted_sum(t, y, &r)
    }, &x, OP_TOL, fault)?);
    out.push(run_case(s, "conv1x1.weight", |t, v| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(bias.clone()));
        let y = t.conv1x1(xv, v, bv)?;
        weighted_sum(t, y, &r)
    }, &w, OP_TOL, fault)?);
    out.push(run_case(s, "conv1x1.bias", |t, v| {
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv1x1(xv, wv, v)?;
        weighted_sum(t, y, &r)
    }, &bias, OP_TOL, fault)?);

    let xc = rand_t(rng, &[2, 7, 6]);
    let wc = rand_t(rng, &[3, 2, 3, 3]);
    let bc = rand_t(rng, &[3]);
    for stride in [1usize, 2] {
        let oh = (7 + 2 - 3) / stride + 1;
        let ow = (6 + 2 - 3) / stride + 1;
        let r = rand_t(rng, &[3, oh, ow]);
        out.push(run_case(s, format!("conv2d.s{stride}.input"), |t, v| {
            let (wv, bv) = (t.constant(wc.clone()), t.constant(bc.clone()));
            let y = t.conv2d(v, wv, bv, stride, 1)?;
            weighted_sum(t, y, &r)
        }, &xc, OP_TOL, fault)?);
        out.push(run_case(s, format!("conv2d.s{stride}.weight"), |t, v| {
            let (xv, bv) = (t.constant(xc.clone()), t.constant(bc.clone()));
            let y = t.conv2d(xv, v, bv, stride, 1)?;
            weighted_sum(t, y, &r)
        }, &wc, OP_TOL, fault)?);
        out.push(run_case(s, format!("conv2d.s{stride}.bias"), |t, v| {
            let (xv, wv) = (t.constant(xc.clone()), t.constant(wc.clone()));
            let y = t.conv2d(xv, wv, v, stride, 1)?;
            weighted_sum(t, y, &r)
        }, &bc, OP_TOL, fault)?);
    }

    let x = rand_off_zero(rng, &[2, 4, 4]);
    let other = rand_t(rng, &[2, 4, 4]);
    let r = rand_t(rng, &[2, 4, 4]);
    out.push(run_case(s, "add", |t, v| {
        let o = t.constant(other.clone());
        let y = t.add(v, o)?;
        weighted_sum(t, y, &r)
    }, &x, OP_TOL, fault)?);
    out.push(run_case(s, "sub", |t, v| {
        let o = t.constant(other.clone());
        let y = t.sub(o, v)?;
        weighted_sum(t, y, &r)
    }, &x, OP_TOL, fault)?);
    out.push(run_case(s, "hadamard", |t, v| {
        let o = t.constant(other.clone());
        let y = t.hadamard(v, o)?;
        let y = t.hadamard(y, v)?;
        weighted_sum(t, y, &r)
    }, &x, OP_TOL, fault)?);
    out.push(run_case(s, "scale", |t, v| {
        let y = t.scale(v, -2.5);
        weighted_sum(t, y, &r)
    }, &x, OP_TOL, fault)?);
    out.push(run_case(s, "relu", |t, v| {
        let y = t.relu(v);
        weighted_sum(t, y, &r)
    }, &x, OP_TOL, fault)?);
    out.push(run_case(s, "mean", |t, v| {
        let sq = t.hadamard(v, v)?;
        Ok(t.mean(sq))
    }, &x, OP_TOL, fault)?);
    out.push(run_case(s, "sum", |t, v| {
        let sq = t.hadamard(v, v)?;
        Ok(t.sum(sq))
    }, &x, OP_TOL, fault)?);

    let r_cat = rand_t(rng, &[2, 8, 4]);
    out.push(run_case(s, "concat", |t, v| {
        let o = t.constant(other.clone());
        let y = t.concat(&[o, v, v], 1)?;
        let y = t.slice(y, 1, 0, 8)?;
        weighted_sum(t, y, &r_cat)
    }, &x, OP_TOL, fault)?);
    let r_sl = rand_t(rng, &[2, 2, 4]);
    out.push(run_case(s, "slice", |t, v| {
        let y = t.slice(v, 1, 1, 2)?;
        weighted_sum(t, y, &r_sl)
    }, &x, OP_TOL, fault)?);
    let r_rs = rand_t(rng, &[4, 8]);
    out.push(run_case(s, "reshape", |t, v| {
        let y = t.reshape(v, &[4, 8])?;
        weighted_sum(t, y, &r_rs)
    }, &x, OP_TOL, fault)?);
    let r_pm = rand_t(rng, &[4, 2, 4]);
    out.push(run_case(s, "permute", |t, v| {
        let y = t.permute(v, &[2, 0, 1])?;
        weighted_sum(t, y, &r_pm)
    }, &x, OP_TOL, fault)?);
    let index: std::sync::Arc<[usize]> = (0..40).map(|i| (i * 7 + 3) % 32).collect();
    let r_g = rand_t(rng, &[5, 8]);
    out.push(run_case(s, "gather", |t, v| {
        let y = t.gather(v, index.clone(), &[5, 8])?;
        weighted_sum(t, y, &r_g)
    }, &x, OP_TOL, fault)?);

    Ok(out)
}

/// Non-local and SCA blocks with respect to their inputs and a projection.
pub fn attention_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CaseResult>> {
    let mut rng = substream(seed, "gradcheck.attention");
    let rng = &mut rng;
    let s = "attention-blocks";
    let mut out = Vec::new();

    let nl = NonLocalBlock::<f64>::new(4, true, rng)?;
    let x = rand_t(rng, &[4, 8, 8]);
    let r = rand_t(rng, &[4, 8, 8]);
    out.push(run_case(s, "nonlocal.input", |t, v| {
        let (o, _) = nl.forward(t, v)?;
        weighted_sum(t, o.z, &r)
    }, &x, OP_TOL, fault)?);

    let cfg = ScaConfig {
        group_factor: 4,
        partition: Partition::SeededRandom { seed: 3 },
        residual: true,
        scale_logits: true,
    };
    let sca = ScaBlock::<f64>::new(4, cfg, rng)?;
    let xa = rand_t(rng, &[4, 8, 8]);
    let xb = rand_t(rng, &[4, 8, 8]);
    let ra = rand_t(rng, &[4, 8, 8]);
    let rb = rand_t(rng, &[4, 8, 8]);
    let sca_loss = |t: &mut Tape<f64>, a: Var, b: Var| -> Result<Var> {
        let o = sca.forward(t, a, b)?;
        let la = weighted_sum(t, o.z_a, &ra)?;
        let lb = weighted_sum(t, o.z_b, &rb)?;
        t.add(la, lb)
    };
    out.push(run_case(s, "sca.input_a", |t, v| {
        let b = t.constant(xb.clone());
        sca_loss(t, v, b)
    }, &xa, OP_TOL, fault)?);
    out.push(run_case(s, "sca.input_b", |t, v| {
        let a = t.constant(xa.clone());
        sca_loss(t, a, v)
    }, &xb, OP_TOL, fault)?);
    let wq = &sca.proj_b.query.weight;
    out.push(run_case(s, "sca.proj_b.query.weight", |t, v| {
        t.bind_param(wq.id(), v);
        let a = t.constant(xa.clone());
        let b = t.constant(xb.clone());
        sca_loss(t, a, b)
    }, &wq.value, OP_TOL, fault)?);
    Ok(out)
}

/// CFA alone and the composed SCA + CFA stack.
pub fn cfa_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CaseResult>> {
    let mut rng = substream(seed, "gradcheck.cfa");
    let rng = &mut rng;
    let s = "cfa";
    let mut out = Vec::new();

    let cfa = CfaBlock::<f64>::new(4, 4, rng)?;
    let za = rand_t(rng, &[4, 8, 8]);
    let zb = rand_t(rng, &[4, 8, 8]);
    let r = rand_t(rng, &[4, 8, 8]);
    out.push(run_case(s, "cfa.input_a", |t, v| {
        let b = t.constant(zb.clone());
        let o = cfa.forward(t, v, b)?;
        weighted_sum(t, o.f_agg, &r)
    }, &za, OP_TOL, fault)?);
    out.push(run_case(s, "cfa.input_b", |t, v| {
        let a = t.constant(za.clone());
        let o = cfa.forward(t, a, v)?;
        weighted_sum(t, o.f_agg, &r)
    }, &zb, OP_TOL, fault)?);
    let w1 = &cfa.squeeze.weight;
    out.push(run_case(s, "cfa.squeeze.weight", |t, v| {
        t.bind_param(w1.id(), v);
        let a = t.constant(za.clone());
        let b = t.constant(zb.clone());
        let o = cfa.forward(t, a, b)?;
        weighted_sum(t, o.f_agg, &r)
    }, &w1.value, OP_TOL, fault)?);

    for (c, hw, g) in [(2usize, 4usize, 2usize), (4, 8, 4)] {
        let sca = ScaBlock::<f64>::new(c, ScaConfig::with_groups(g), rng)?;
        let cfa = CfaBlock::<f64>::new(c, 2, rng)?;
        let xa = rand_t(rng, &[c, hw, hw]);
        let xb = rand_t(rng, &[c, hw, hw]);
        let r = rand_t(rng, &[c, hw, hw]);
        out.push(run_case(s, format!("sca+cfa.{c}x{hw}x{hw}.input_a"), |t, v| {
            let b = t.constant(xb.clone());
            let o = sca.forward(t, v, b)?;
            let f = cfa.forward(t, o.z_a, o.z_b)?;
            weighted_sum(t, f.f_agg, &r)
        }, &xa, OP_TOL, fault)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_core_suites_pass() {
        let mut cases = tensor_op_suite(0, None).unwrap();
        cases.extend(attention_suite(0, None).unwrap());
        cases.extend(cfa_suite(0, None).unwrap());
        for c in &cases {
            assert!(c.passed(), "{} {}: {:?}", c.suite, c.name, c.report);
        }
    }

    #[test]
    fn corrupted_softmax_adjoint_is_caught() {
        let cases = tensor_op_suite(0, Some(OpKind::Softmax)).unwrap();
        let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
        assert!(!failed.is_empty());
        assert!(failed.iter().all(|n| n.starts_with("softmax")), "{failed:?}");
    }
}
