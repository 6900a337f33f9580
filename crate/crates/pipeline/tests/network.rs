use csca_core::io::{load_module, save_module};
use csca_core::{Module, Tape, Tensor};
use csca_pipeline::network::Network;
use csca_pipeline::{train_step, Dataset, DatasetSpec, FusionMode, Sample, StageConfig, SynthParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair(cfg: &StageConfig, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [cfg.in_channels, cfg.height, cfg.width];
    (
        Tensor::uniform(&shape, 0.0, 1.0, &mut rng),
        Tensor::uniform(&shape, 0.0, 1.0, &mut rng),
    )
}

fn params<T: csca_core::Scalar>(net: &Network<T>) -> Vec<(String, Tensor<T>)> {
    let mut v = Vec::new();
    net.visit_params("", &mut |n, p| v.push((n.to_string(), p.value.clone())));
    v
}

#[test]
fn tied_modalities_give_identical_streams() {
    let cfg = StageConfig {
        channels: vec![4, 6, 8],
        strides: vec![1, 2, 2],
        group_factors: vec![4, 2, 4],
        ..StageConfig::default()
    };
    let mut net = Network::<f64>::new(&cfg, FusionMode::Csca, 5).unwrap();
    net.tie_modalities();
    let (x, _) = pair(&cfg, 1);
    let mut tape = Tape::inference();
    let a = tape.constant(x.clone());
    let b = tape.constant(x);
    let trace = net.forward_traced(&mut tape, a, b).unwrap();
    assert_eq!(trace.streams.len(), 2);
    for &(sa, sb) in &trace.streams {
        assert_eq!(tape.value(sa), tape.value(sb));
    }
}

#[test]
fn forward_is_deterministic_and_nonnegative() {
    let cfg = StageConfig::default();
    let (a, b) = pair(&cfg, 2);
    for mode in FusionMode::ALL {
        let n1 = Network::<f64>::new(&cfg, mode, 8).unwrap();
        let n2 = Network::<f64>::new(&cfg, mode, 8).unwrap();
        let d1 = n1.predict(&a, &b).unwrap();
        let d2 = n2.predict(&a, &b).unwrap();
        assert_eq!(d1, d2);
        assert!(d1.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        let z = Tensor::zeros(a.shape());
        assert_eq!(n1.predict(&z, &z).unwrap(), n2.predict(&z, &z).unwrap());
    }
}

#[test]
fn baselines_wire_inputs_as_described() {
    let cfg = StageConfig::default();
    let (a, b) = pair(&cfg, 3);
    let (_, c) = pair(&cfg, 4);

    let rgb = Network::<f64>::new(&cfg, FusionMode::RgbOnly, 0).unwrap();
    assert_eq!(rgb.predict(&a, &b).unwrap(), rgb.predict(&a, &c).unwrap());
    let aux = Network::<f64>::new(&cfg, FusionMode::AuxOnly, 0).unwrap();
    assert_eq!(aux.predict(&a, &b).unwrap(), aux.predict(&c, &b).unwrap());

    let early = Network::<f64>::new(&cfg, FusionMode::Early, 0).unwrap();
    let w = &early.branch_a.as_ref().unwrap().stages[0].weight.value;
    assert_eq!(w.shape()[1], 2 * cfg.in_channels);
    assert!(early.branch_b.is_none() && early.csca.is_empty());

    let late = Network::<f64>::new(&cfg, FusionMode::Late, 0).unwrap();
    assert_eq!(late.decoder.hidden.in_channels(), 2 * cfg.channels[1]);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = StageConfig::default();
    let net = Network::<f32>::new(&cfg, FusionMode::Csca, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_module(dir.path(), &net).unwrap();
    let mut other = Network::<f32>::new(&cfg, FusionMode::Csca, 12).unwrap();
    assert_ne!(params(&net), params(&other));
    load_module(dir.path(), &mut other).unwrap();
    assert_eq!(params(&net), params(&other));

    let mut wrong = Network::<f32>::new(&cfg, FusionMode::Late, 12).unwrap();
    assert!(load_module(dir.path(), &mut wrong).is_err());
}

fn small_set() -> Dataset {
    let spec = DatasetSpec {
        samples: 4,
        ..DatasetSpec::default()
    };
    Dataset::generate(&spec, &SynthParams::default()).unwrap()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = small_set();
    let batch: Vec<&Sample<f32>> = ds.samples.iter().collect();
    let mut net = Network::<f32>::new(&StageConfig::default(), FusionMode::Csca, 0).unwrap();
    let before = params(&net);
    let l1 = train_step(&mut net, &batch, 0.0).unwrap();
    let l2 = train_step(&mut net, &batch, 0.0).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(before, params(&net));
}

#[test]
fn target_equal_to_prediction_gives_zero_loss_and_gradient() {
    let cfg = StageConfig::default();
    let net = Network::<f64>::new(&cfg, FusionMode::Csca, 0).unwrap();
    let (a, b) = pair(&cfg, 6);
    let pred = net.predict(&a, &b).unwrap();
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let out = net.forward(&mut tape, va, vb).unwrap();
    let target = tape.constant(pred);
    let loss = tape.mse(out, target).unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
    tape.backward(loss).unwrap();
    net.visit_params("", &mut |name, p| {
        if let Some(g) = tape.param_grad(p) {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    });
}

#[test]
fn two_small_steps_descend_on_every_seed() {
    let ds = small_set();
    let batch: Vec<&Sample<f32>> = ds.samples.iter().collect();
    for seed in 0..5 {
        let mut net = Network::<f32>::new(&StageConfig::default(), FusionMode::Csca, seed).unwrap();
        let l1 = train_step(&mut net, &batch, 1e-3).unwrap();
        let l2 = train_step(&mut net, &batch, 1e-3).unwrap();
        assert!(l2 <= l1, "seed {seed}: {l2} > {l1}");
    }
}

#[test]
fn mismatched_target_is_dimension_error() {
    let ds = small_set();
    let mut s = ds.samples[0].clone();
    s.gt = Tensor::zeros(&[4, 4]);
    let mut net = Network::<f32>::new(&StageConfig::default(), FusionMode::Early, 0).unwrap();
    assert!(matches!(
        train_step(&mut net, &[&s], 0.1),
        Err(csca_core::Error::Dimension { .. })
    ));
}
