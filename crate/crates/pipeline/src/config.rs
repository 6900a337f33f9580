use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use csca_core::attention::{Partition, ScaConfig};
use csca_core::cfa::AggregateSource;
use csca_core::{Error, Result};

/// Which architecture variant a network implements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// two branches with a CSCA block (SCA + CFA) after every stage
    #[default]
    Csca,
    /// modality a alone
    RgbOnly,
    /// modality b alone
    AuxOnly,
    /// channel-concatenated inputs into one branch
    Early,
    /// independent branches, final features concatenated before the decoder
    Late,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Csca,
        FusionMode::RgbOnly,
        FusionMode::AuxOnly,
        FusionMode::Early,
        FusionMode::Late,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Csca => "csca",
            FusionMode::RgbOnly => "rgb_only",
            FusionMode::AuxOnly => "aux_only",
            FusionMode::Early => "early",
            FusionMode::Late => "late",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PartitionKind {
    #[default]
    Contiguous,
    /// seeded from the network's "partition" random stream
    SeededRandom,
}

/// Shape of the two-branch network: one 3×3 conv stage per entry of
/// `channels`, each followed by a CSCA site in fusion mode.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub group_factors: Vec<usize>,
    pub cfa_reduction: usize,
    pub decoder_hidden: usize,
    pub residual: bool,
    pub scale_logits: bool,
    pub partition: PartitionKind,
    pub aggregate_source: AggregateSource,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 32,
            width: 32,
            channels: vec![8, 16],
            strides: vec![2, 2],
            group_factors: vec![4, 4],
            cfa_reduction: 4,
            decoder_hidden: 8,
            residual: true,
            scale_logits: true,
            partition: PartitionKind::Contiguous,
            aggregate_source: AggregateSource::ScaOutput,
        }
    }
}

fn conv_out(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

impl StageConfig {
    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    /// Spatial extents after every stage.
    pub fn stage_extents(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.strides
            .iter()
            .map(|&s| {
                h = conv_out(h, s);
                w = conv_out(w, s);
                (h, w)
            })
            .collect()
    }

    /// Extents of the predicted density map.
    pub fn output_extents(&self) -> (usize, usize) {
        self.stage_extents()
            .last()
            .copied()
            .unwrap_or((self.height, self.width))
    }

    pub fn sca_config(&self, stage: usize, partition_seed: u64) -> ScaConfig {
        ScaConfig {
            group_factor: self.group_factors[stage],
            partition: match self.partition {
                PartitionKind::Contiguous => Partition::Contiguous,
                PartitionKind::SeededRandom => Partition::SeededRandom {
                    seed: partition_seed.wrapping_add(stage as u64),
                },
            },
            residual: self.residual,
            scale_logits: self.scale_logits,
        }
    }

    pub fn validate(&self, mode: FusionMode) -> Result<()> {
        let l = self.channels.len();
        if l == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.strides.len() != l || self.group_factors.len() != l {
            return Err(Error::Config(format!(
                "{l} stages but {} strides and {} grouping factors",
                self.strides.len(),
                self.group_factors.len()
            )));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("extents and channel counts must be positive".into()));
        }
        if self.strides.iter().any(|&s| s == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("strides and channels must be positive".into()));
        }
        if mode == FusionMode::Csca {
            for (i, ((&c, &g), (h, w))) in self
                .channels
                .iter()
                .zip(&self.group_factors)
                .zip(self.stage_extents())
                .enumerate()
            {
                if c % 2 != 0 {
                    return Err(Error::Config(format!(
                        "stage {i}: CSCA needs an even channel count, got {c}"
                    )));
                }
                if g == 0 || (h * w) % g != 0 {
                    return Err(Error::Config(format!(
                        "stage {i}: H·W = {} not divisible by G = {g}",
                        h * w
                    )));
                }
                if (2 * c) % self.cfa_reduction.max(1) != 0 || self.cfa_reduction == 0 {
                    return Err(Error::Config(format!(
                        "stage {i}: 2C = {} not divisible by reduction {}",
                        2 * c,
                        self.cfa_reduction
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        m.insert("in_channels".into(), self.in_channels.to_string());
        m.insert("height".into(), self.height.to_string());
        m.insert("width".into(), self.width.to_string());
        m.insert("channels".into(), list(&self.channels));
        m.insert("strides".into(), list(&self.strides));
        m.insert("group_factors".into(), list(&self.group_factors));
        m.insert("cfa_reduction".into(), self.cfa_reduction.to_string());
        m.insert("decoder_hidden".into(), self.decoder_hidden.to_string());
        m.insert("residual".into(), self.residual.to_string());
        m.insert("scale_logits".into(), self.scale_logits.to_string());
        m.insert(
            "partition".into(),
            match self.partition {
                PartitionKind::Contiguous => "contiguous".into(),
                PartitionKind::SeededRandom => "seeded_random".into(),
            },
        );
        m.insert("aggregate_source".into(), self.aggregate_source.name().into());
        m
    }

    /// Reads the keys written by [`StageConfig::to_kv`]; missing keys keep defaults.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv {
            match k.as_str() {
                "in_channels" => cfg.in_channels = parse_num(k, v)?,
                "height" => cfg.height = parse_num(k, v)?,
                "width" => cfg.width = parse_num(k, v)?,
                "channels" => cfg.channels = parse_list(k, v)?,
                "strides" => cfg.strides = parse_list(k, v)?,
                "group_factors" => cfg.group_factors = parse_list(k, v)?,
                "cfa_reduction" => cfg.cfa_reduction = parse_num(k, v)?,
                "decoder_hidden" => cfg.decoder_hidden = parse_num(k, v)?,
                "residual" => cfg.residual = parse_bool(k, v)?,
                "scale_logits" => cfg.scale_logits = parse_bool(k, v)?,
                "partition" => {
                    cfg.partition = match v.as_str() {
                        "contiguous" => PartitionKind::Contiguous,
                        "seeded_random" => PartitionKind::SeededRandom,
                        _ => return Err(Error::Config(format!("bad partition {v:?}"))),
                    }
                }
                "aggregate_source" => {
                    cfg.aggregate_source = AggregateSource::parse(v)
                        .ok_or_else(|| Error::Config(format!("bad aggregate_source {v:?}")))?
                }
                _ => {}
            }
        }
        Ok(cfg)
    }
}

pub fn parse_num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

pub fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse_num(key, x)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// Plain-text `key = value` lines; `#` starts a comment.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(m)
}

pub fn format_kv_text(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
