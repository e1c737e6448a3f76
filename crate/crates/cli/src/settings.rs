//! Config resolution: preset, then the TOML file merged key by key, then flags.

use std::path::Path;

use gas_core::arch_space::{build_network_layout, LayoutConfig, NetworkLayout};
use gas_core::bench::ToyDataset;
use gas_core::error::Error;
use gas_core::latency::LatencyTable;
use gas_core::search_engine::SearchConfig;

use crate::failure::{CliResult, Failure};
use crate::{ConfigArgs, Preset};

fn preset(p: Preset) -> SearchConfig {
    match p {
        Preset::Published => SearchConfig::default(),
        Preset::Toy => SearchConfig::toy(),
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else is replaced.
pub fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

/// Resolves the search config without validating it.
pub fn resolve_unchecked(args: &ConfigArgs) -> CliResult<SearchConfig> {
    let mut value = toml::Value::try_from(preset(args.preset))
        .map_err(|e| Failure::runtime(format!("preset serialization: {e}")))?;
    if let Some(path) = &args.config {
        let text = read_text(path)?;
        let file: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        merge(&mut value, file);
    }
    let mut cfg: SearchConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Parse(format!("config: {e}")))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.finetune.seed = seed;
    }
    Ok(cfg)
}

/// Every violation is reported before any work starts.
pub fn validate(cfg: SearchConfig) -> CliResult<SearchConfig> {
    cfg.validate()?;
    Ok(cfg)
}

pub fn layout_of(cfg: &SearchConfig) -> CliResult<NetworkLayout> {
    Ok(build_network_layout(&cfg.layout)?)
}

pub fn read_layout(path: &Path) -> CliResult<LayoutConfig> {
    let text = read_text(path)?;
    let layout: LayoutConfig =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let v = layout.violations();
    if !v.is_empty() {
        return Err(Error::Config(v).into());
    }
    Ok(layout)
}

pub fn read_lut(path: &Path) -> CliResult<LatencyTable> {
    Ok(LatencyTable::from_json(&read_text(path)?)?)
}

/// The toy dataset, cached on disk when a cache directory is given.
pub fn dataset(args: &ConfigArgs, cfg: &SearchConfig, layout: &NetworkLayout) -> CliResult<ToyDataset> {
    let stride = layout.total_stride();
    let ds = match &args.data_cache {
        Some(dir) => ToyDataset::load_or_generate(dir, &cfg.data, stride)?,
        None => gas_core::bench::make_toy_dataset(&cfg.data, stride)?,
    };
    Ok(ds)
}
