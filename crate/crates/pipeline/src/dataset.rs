//! Paired-modality datasets: generation, on-disk layout and loading.
//!
//! A dataset directory holds `sample_NNNN_a.cst`, `sample_NNNN_b.cst`,
//! `sample_NNNN_gt.cst` per sample and an `index.csv` whose first line is a
//! `#`-prefixed list of `key=value` metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use csca_core::io::{load_tensor, save_tensor};
use csca_core::rng::indexed_substream;
use csca_core::{Error, Result, Scalar, Tensor};

use crate::config::parse_num;
use crate::synth::{density_from_heads, generate_scene, render, Illumination, SynthParams};

pub const INDEX_FILE: &str = "index.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub split: Split,
    pub x_a: Tensor<T>,
    pub x_b: Tensor<T>,
    pub gt: Tensor<T>,
    pub count: usize,
    pub illumination: Illumination,
    pub clutter: f64,
}

impl<T: Scalar> Sample<T> {
    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            id: self.id.clone(),
            split: self.split,
            x_a: self.x_a.cast(),
            x_b: self.x_b.cast(),
            gt: self.gt.cast(),
            count: self.count,
            illumination: self.illumination,
            clutter: self.clutter,
        }
    }
}

/// Generation settings, also recorded in the index metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub samples: usize,
    pub train_fraction: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            samples: 64,
            train_fraction: 0.75,
            channels: 3,
            height: 32,
            width: 32,
            out_height: 8,
            out_width: 8,
            sigma: 2.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    fn to_meta(&self) -> String {
        format!(
            "# samples={} train_fraction={} channels={} height={} width={} out_height={} out_width={} sigma={} seed={}",
            self.samples,
            self.train_fraction,
            self.channels,
            self.height,
            self.width,
            self.out_height,
            self.out_width,
            self.sigma,
            self.seed
        )
    }

    fn from_meta(line: &str) -> Result<Self> {
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| Error::Format(format!("{INDEX_FILE}: missing metadata line")))?;
        let kv: BTreeMap<&str, &str> = body
            .split_whitespace()
            .filter_map(|tok| tok.split_once('='))
            .collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("{INDEX_FILE}: metadata lacks {k}")))
        };
        Ok(Self {
            samples: parse_num("samples", get("samples")?)?,
            train_fraction: parse_num("train_fraction", get("train_fraction")?)?,
            channels: parse_num("channels", get("channels")?)?,
            height: parse_num("height", get("height")?)?,
            width: parse_num("width", get("width")?)?,
            out_height: parse_num("out_height", get("out_height")?)?,
            out_width: parse_num("out_width", get("out_width")?)?,
            sigma: parse_num("sigma", get("sigma")?)?,
            seed: parse_num("seed", get("seed")?)?,
        })
    }

    /// Even indices are bright, odd dark; inside each illumination stratum
    /// the first `train_fraction` share goes to training.
    fn split_of(&self, index: usize) -> Split {
        let stratum_len = (self.samples + 1 - index % 2) / 2;
        let n_train = (stratum_len as f64 * self.train_fraction).round() as usize;
        if index / 2 < n_train {
            Split::Train
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample<f32>>,
}

impl Dataset {
    /// Every sample draws from its own indexed random stream, so sample `i`
    /// does not depend on how many samples are generated.
    pub fn generate(spec: &DatasetSpec, params: &SynthParams) -> Result<Self> {
        if spec.samples == 0 || !(0.0..=1.0).contains(&spec.train_fraction) {
            return Err(Error::Config(format!(
                "need at least one sample and a train fraction in [0, 1], got {} and {}",
                spec.samples, spec.train_fraction
            )));
        }
        let samples = (0..spec.samples)
            .map(|i| {
                let mut rng = indexed_substream(spec.seed, "sample", i as u64);
                let illumination = if i % 2 == 0 {
                    Illumination::Bright
                } else {
                    Illumination::Dark
                };
                let scene = generate_scene(&mut rng, spec.height, spec.width, illumination, params);
                let r = render(&scene, spec.channels, params, true, &mut rng);
                let gt = density_from_heads(&scene, spec.sigma, (spec.out_height, spec.out_width))?;
                Ok(Sample {
                    id: format!("sample_{i:04}"),
                    split: spec.split_of(i),
                    x_a: r.mod_a,
                    x_b: r.mod_b,
                    gt,
                    count: scene.heads.len(),
                    illumination,
                    clutter: scene.clutter,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            samples,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample<f32>> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut text = self.spec.to_meta();
        text.push('\n');
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(format!("{INDEX_FILE}: {e}"));
        w.write_record(["id", "split", "count", "illumination", "clutter", "file_a", "file_b", "file_gt"])
            .map_err(csv_err)?;
        for s in &self.samples {
            let files = [
                format!("{}_a.cst", s.id),
                format!("{}_b.cst", s.id),
                format!("{}_gt.cst", s.id),
            ];
            save_tensor(dir.join(&files[0]), &s.x_a)?;
            save_tensor(dir.join(&files[1]), &s.x_b)?;
            save_tensor(dir.join(&files[2]), &s.gt)?;
            w.write_record([
                s.id.as_str(),
                s.split.name(),
                &s.count.to_string(),
                s.illumination.name(),
                &s.clutter.to_string(),
                &files[0],
                &files[1],
                &files[2],
            ])
            .map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        text.push_str(&String::from_utf8(body).map_err(|e| Error::Format(e.to_string()))?);
        fs::write(dir.join(INDEX_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(INDEX_FILE))?;
        let (meta, body) = text.split_once('\n').unwrap_or((&text, ""));
        let spec = DatasetSpec::from_meta(meta)?;
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Format(format!("{INDEX_FILE}: {e}")))?;
            if rec.len() != 8 {
                return Err(Error::Format(format!("{INDEX_FILE}: expected 8 columns, got {}", rec.len())));
            }
            let split = match &rec[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Format(format!("{INDEX_FILE}: bad split {other:?}"))),
            };
            let illumination = Illumination::parse(&rec[3])
                .ok_or_else(|| Error::Format(format!("{INDEX_FILE}: bad illumination {:?}", &rec[3])))?;
            let sample = Sample {
                id: rec[0].to_string(),
                split,
                count: parse_num("count", &rec[2])?,
                illumination,
                clutter: parse_num("clutter", &rec[4])?,
                x_a: load_tensor(dir.join(&rec[5]))?,
                x_b: load_tensor(dir.join(&rec[6]))?,
                gt: load_tensor(dir.join(&rec[7]))?,
            };
            let want = [spec.channels, spec.height, spec.width];
            if sample.x_a.shape() != want || sample.x_b.shape() != want {
                return Err(Error::Format(format!("{}: modality shape mismatch", sample.id)));
            }
            if sample.gt.shape() != [spec.out_height, spec.out_width] {
                return Err(Error::Format(format!("{}: density shape mismatch", sample.id)));
            }
            samples.push(sample);
        }
        Ok(Self { spec, samples })
    }
}
