//! Checkpoint directories: CST1 parameter files, `manifest.txt`, and a
//! `config.txt` of `key = value` lines describing the network.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use csca_core::io::{load_module, save_module};
use csca_pipeline::config::{format_kv_text, parse_kv_text};
use csca_pipeline::{FusionMode, Network, StageConfig};

pub const CONFIG_FILE: &str = "config.txt";

pub fn save_checkpoint(dir: &Path, net: &Network<f32>, seed: u64) -> anyhow::Result<()> {
    save_module(dir, net).with_context(|| format!("writing checkpoint {}", dir.display()))?;
    let mut kv = net.cfg.to_kv();
    kv.insert("mode".into(), net.mode.name().into());
    kv.insert("seed".into(), seed.to_string());
    fs::write(dir.join(CONFIG_FILE), format_kv_text(&kv))?;
    Ok(())
}

/// Rebuilds the network described by `config.txt` and loads its parameters.
pub fn load_checkpoint(dir: &Path) -> anyhow::Result<Network<f32>> {
    let text = fs::read_to_string(dir.join(CONFIG_FILE))
        .with_context(|| format!("reading {}", dir.join(CONFIG_FILE).display()))?;
    let kv: BTreeMap<String, String> = parse_kv_text(&text)?;
    let mode: FusionMode = kv
        .get("mode")
        .context("checkpoint config lacks a mode")?
        .parse()?;
    let seed: u64 = kv.get("seed").map_or(Ok(0), |s| s.parse())?;
    let cfg = StageConfig::from_kv(&kv)?;
    let mut net = Network::new(&cfg, mode, seed)?;
    load_module(dir, &mut net).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok(net)
}
