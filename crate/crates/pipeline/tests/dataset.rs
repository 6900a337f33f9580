use std::fs;

use csca_pipeline::dataset::INDEX_FILE;
use csca_pipeline::synth::{generate_scene, render};
use csca_pipeline::{Dataset, DatasetSpec, Illumination, Split, SynthParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(samples: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        samples,
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn eight_samples_write_eight_rows_and_24_tensors() {
    let ds = Dataset::generate(&spec(8, 1), &SynthParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let cst = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "cst"))
        .count();
    assert_eq!(cst, 24);
    let index = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
    // metadata line, header, one row per sample
    assert_eq!(index.lines().count(), 10);
    assert!(index.starts_with("# samples=8 "));
    assert!(index.lines().next().unwrap().contains("sigma=2"));
}

#[test]
fn round_trip_is_bit_exact_and_counts_match() {
    let ds = Dataset::generate(&spec(6, 2), &SynthParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    for s in &back.samples {
        let total: f64 = s.gt.data().iter().map(|&v| v as f64).sum();
        assert!((total - s.count as f64).abs() < 1e-3, "{}", s.id);
    }
}

#[test]
fn fixed_seed_gives_identical_bytes() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&d1, &d2] {
        Dataset::generate(&spec(4, 9), &SynthParams::default())
            .unwrap()
            .save(d.path())
            .unwrap();
    }
    let mut names: Vec<_> = fs::read_dir(d1.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in names {
        assert_eq!(fs::read(d1.path().join(&n)).unwrap(), fs::read(d2.path().join(&n)).unwrap());
    }
}

#[test]
fn half_bright_half_dark_and_stratified_split() {
    let ds = Dataset::generate(&spec(64, 0), &SynthParams::default()).unwrap();
    let bright = ds.samples.iter().filter(|s| s.illumination == Illumination::Bright).count();
    assert_eq!(bright, 32);
    assert_eq!(ds.split(Split::Train).len(), 48);
    let test_dark = ds
        .split(Split::Test)
        .iter()
        .filter(|s| s.illumination == Illumination::Dark)
        .count();
    assert_eq!(test_dark, 8);
}

#[test]
fn unreadable_dataset_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        Dataset::load(dir.path().join("missing")),
        Err(csca_core::Error::Io(_))
    ));
}

#[test]
fn dark_scenes_have_weaker_visible_signal_at_heads() {
    let p = SynthParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let scene = generate_scene(&mut rng, 32, 32, Illumination::Dark, &p);
        let r = render(&scene, 3, &p, true, &mut rng);
        let at = |t: &csca_core::Tensor<f32>| {
            scene
                .heads
                .iter()
                .map(|h| (t.get(&[0, h.y as usize, h.x as usize]) as f64).abs())
                .sum::<f64>()
                / scene.heads.len() as f64
        };
        assert!(at(&r.mod_a) < at(&r.mod_b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn density_mass_is_conserved(seed in any::<u64>(), dark in any::<bool>()) {
        let ds = Dataset::generate(&spec(2, seed), &SynthParams::default()).unwrap();
        let s = &ds.samples[usize::from(dark)];
        let total: f64 = s.gt.data().iter().map(|&v| v as f64).sum();
        prop_assert!((total - s.count as f64).abs() < 1e-3);
        prop_assert!(s.gt.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn same_seed_same_sample(seed in any::<u64>()) {
        let a = Dataset::generate(&spec(3, seed), &SynthParams::default()).unwrap();
        let b = Dataset::generate(&spec(5, seed), &SynthParams::default()).unwrap();
        prop_assert_eq!(&a.samples[..], &b.samples[..3]);
    }
}
