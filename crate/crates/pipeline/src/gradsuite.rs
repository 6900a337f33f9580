//! Finite-difference check of the full two-branch network in 64-bit.

use csca_core::gradsuite::{run_case, CaseResult, NETWORK_TOL};
use csca_core::rng::substream;
use csca_core::{Module, OpKind, ParamId, Result, Tape, Tensor, Var};

use crate::config::{FusionMode, StageConfig};
use crate::network::Network;

/// Two stages of eight channels on a 16×16 input.
pub fn network_check_config() -> StageConfig {
    StageConfig {
        height: 16,
        width: 16,
        channels: vec![8, 8],
        strides: vec![2, 2],
        group_factors: vec![4, 4],
        ..StageConfig::default()
    }
}

const CHECKED_PARAMS: [&str; 4] = [
    "branch_b.stage0.weight",
    "csca0.sca.proj_a.key.weight",
    "csca1.cfa.squeeze.weight",
    "decoder.hidden.weight",
];

fn find_param(net: &Network<f64>, name: &str) -> (ParamId, Tensor<f64>) {
    let mut found = None;
    net.visit_params("", &mut |n, p| {
        if n == name {
            found = Some((p.id(), p.value.clone()));
        }
    });
    found.unwrap_or_else(|| panic!("network has no parameter {name}"))
}

/// Gradients of a weighted sum of the density map with respect to both
/// inputs and a few parameters spread over the network.
pub fn network_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CaseResult>> {
    let cfg = network_check_config();
    let net = Network::<f64>::new(&cfg, FusionMode::Csca, seed)?;
    let mut rng = substream(seed, "gradcheck.network");
    let shape = [cfg.in_channels, cfg.height, cfg.width];
    let xa = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let xb = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let (oh, ow) = cfg.output_extents();
    let r = Tensor::uniform(&[oh, ow], -1.0, 1.0, &mut rng);

    let objective = |t: &mut Tape<f64>, a: Var, b: Var| -> Result<Var> {
        let d = net.forward(t, a, b)?;
        let rv = t.constant(r.clone());
        let prod = t.hadamard(d, rv)?;
        Ok(t.sum(prod))
    };
    let s = "network";
    let mut out = Vec::new();
    out.push(run_case(s, "network.input_a", |t, v| {
        let b = t.constant(xb.clone());
        objective(t, v, b)
    }, &xa, NETWORK_TOL, fault)?);
    out.push(run_case(s, "network.input_b", |t, v| {
        let a = t.constant(xa.clone());
        objective(t, a, v)
    }, &xb, NETWORK_TOL, fault)?);
    for name in CHECKED_PARAMS {
        let (id, value) = find_param(&net, name);
        out.push(run_case(s, format!("network.{name}"), |t, v| {
            t.bind_param(id, v);
            let a = t.constant(xa.clone());
            let b = t.constant(xb.clone());
            objective(t, a, b)
        }, &value, NETWORK_TOL, fault)?);
    }
    Ok(out)
}
