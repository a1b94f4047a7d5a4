//! Run configuration: one TOML document, overridden by command-line flags.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use latsurr::archspace::{preset, SupernetSpec, PRESETS};
use latsurr::lut::{LutConfig, DEFAULT_CALIBRATION_SIZE};
use latsurr::measurement::{OracleParams, DEFAULT_TIMEOUT_SECS};
use latsurr::pipeline::EsmConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Oracle,
    External,
}

/// Where the supernet spec comes from. At most one field may be set; none
/// means the `resnet` preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SpecSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inline: Option<SupernetSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Shell command for the external backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig { kind: BackendKind::Oracle, command: None, timeout_secs: DEFAULT_TIMEOUT_SECS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root of every random stream in a run.
    pub seed: u64,
    /// Fraction of samples held out by `train`.
    pub test_fraction: f64,
    /// Balanced samples measured to fit the lookup-table bias correction.
    pub calibration_size: usize,
    pub spec: SpecSource,
    pub backend: BackendConfig,
    pub oracle: OracleParams,
    pub esm: EsmConfig,
    pub lut: LutConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            test_fraction: 1.0 / 3.0,
            calibration_size: DEFAULT_CALIBRATION_SIZE,
            spec: SpecSource::default(),
            backend: BackendConfig::default(),
            oracle: OracleParams::default(),
            esm: EsmConfig::default(),
            lut: LutConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            // A run manifest: replay the config it recorded.
            #[derive(Deserialize)]
            struct Manifest {
                config: Config,
            }
            serde_json::from_str::<Manifest>(&text).map(|m| m.config).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let mut cfg = parsed.map_err(|e| anyhow::anyhow!("config error in {}: {e}", path.display()))?;
        // Relative spec paths resolve against the config file.
        if let (Some(p), Some(dir)) = (&cfg.spec.path, path.parent()) {
            if p.is_relative() {
                cfg.spec.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    /// Pushes the root seed into the sections that carry their own.
    pub fn propagate_seed(&mut self) {
        self.esm.seed = self.seed;
        self.lut.seed = self.seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }
}

/// Reads a spec from a preset name or a `.toml`/`.json` file.
pub fn load_spec_arg(arg: &str) -> Result<SupernetSpec> {
    if let Some(spec) = preset(arg) {
        return Ok(spec);
    }
    let path = Path::new(arg);
    if !path.exists() {
        bail!("'{arg}' is neither a preset ({}) nor an existing file", PRESETS.join(", "));
    }
    load_spec_file(path)
}

pub fn load_spec_file(path: &Path) -> Result<SupernetSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
    let spec: SupernetSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("spec schema error in {}: {e}", path.display()))?
    } else {
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("spec schema error in {}: {e}", path.display()))?
    };
    spec.validate().map_err(|e| anyhow::anyhow!("spec schema error in {}: {e}", path.display()))?;
    Ok(spec)
}

impl SpecSource {
    pub fn resolve(&self) -> Result<SupernetSpec> {
        let set = self.preset.is_some() as u8 + self.path.is_some() as u8 + self.inline.is_some() as u8;
        if set > 1 {
            bail!("config [spec] sets more than one of preset, path, inline");
        }
        if let Some(p) = &self.path {
            return load_spec_file(p);
        }
        if let Some(spec) = &self.inline {
            spec.validate().map_err(|e| anyhow::anyhow!("inline spec: {e}"))?;
            return Ok(spec.clone());
        }
        let name = self.preset.as_deref().unwrap_or("resnet");
        preset(name).with_context(|| format!("unknown preset '{name}' (known: {})", PRESETS.join(", ")))
    }
}
