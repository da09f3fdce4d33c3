//! Run configuration: one TOML file with sections, dot-path overrides and
//! a content hash recorded in every artifact's provenance.

use crate::flow::FlowConfig;
use crate::geometry::SensorModel;
use crate::synthworld::{GeneratorConfig, ProxyConfig};
use crate::teacher::TeacherConfig;
use crate::trainer::StageConfig;
use crate::vae::VaeConfig;
use serde::{Deserialize, Serialize};
use sha2::Digest;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field error: {0}")]
    Field(String),
    #[error("config validation error: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SensorSection {
    pub f_up_deg: f64,
    pub f_down_deg: f64,
    pub height: usize,
    pub width: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for SensorSection {
    fn default() -> Self {
        SensorSection {
            f_up_deg: 3.0,
            f_down_deg: 25.0,
            height: 32,
            width: 256,
            r_min: 1.0,
            r_max: 56.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FlowSection {
    pub patch: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub temb_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            patch: 2,
            depth: 8,
            width: 128,
            heads: 4,
            temb_dim: 64,
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SamplerSection {
    pub kind: String,
    pub steps: usize,
    pub sigma_scale: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: "sde".into(),
            steps: 256,
            sigma_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MetricsSection {
    pub bev_extent: f64,
    pub jsd_bins: usize,
    pub mmd_voxel: f64,
    /// Caps keeping the O(n^2) minimum-matching affordable.
    pub mmd_generated_cap: usize,
    pub mmd_validation_cap: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            bev_extent: 50.0,
            jsd_bins: 100,
            mmd_voxel: 0.5,
            mmd_generated_cap: 200,
            mmd_validation_cap: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StageTable {
    pub prior_pretrain: StageConfig,
    pub vae_align: StageConfig,
    pub e2e: StageConfig,
}

impl Default for StageTable {
    fn default() -> Self {
        StageTable {
            prior_pretrain: StageConfig::default(),
            vae_align: StageConfig::default(),
            e2e: StageConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub sensor: SensorSection,
    pub generator: GeneratorConfig,
    pub teacher: TeacherConfig,
    pub proxy: ProxyConfig,
    pub vae: VaeConfig,
    pub flow: FlowSection,
    pub stage: StageTable,
    pub sampler: SamplerSection,
    pub metrics: MetricsSection,
}

/// Config resolved into concrete model shapes, with its canonical text and
/// hash.
#[derive(Debug)]
pub struct Loaded {
    pub raw: RunConfig,
    pub sensor: SensorModel,
    pub flow: FlowConfig,
    pub hash: String,
    pub canonical_toml: String,
}

impl RunConfig {
    pub fn materialize(&self) -> Result<Loaded, ConfigError> {
        let sensor = SensorModel {
            f_up: self.sensor.f_up_deg.to_radians(),
            f_down: self.sensor.f_down_deg.to_radians(),
            height: self.sensor.height,
            width: self.sensor.width,
            r_min: self.sensor.r_min,
            r_max: self.sensor.r_max,
        };
        sensor
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.vae
            .validate(sensor.height, sensor.width)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut teacher = self.teacher.clone();
        teacher.r_max = sensor.r_max;
        teacher
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.generator
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let flow = FlowConfig {
            patch: self.flow.patch,
            depth: self.flow.depth,
            width: self.flow.width,
            heads: self.flow.heads,
            temb_dim: self.flow.temb_dim,
            mlp_ratio: self.flow.mlp_ratio,
            teacher_d: self.teacher.d,
            latent_ch: self.vae.latent_ch,
            latent_h: sensor.height / self.vae.down_v,
            latent_w: sensor.width / self.vae.down_h,
        };
        flow.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, st) in [
            ("prior_pretrain", &self.stage.prior_pretrain),
            ("vae_align", &self.stage.vae_align),
            ("e2e", &self.stage.e2e),
        ] {
            st.validate()
                .map_err(|e| ConfigError::Invalid(format!("stage {name}: {e}")))?;
        }
        if self.sampler.kind != "ode" && self.sampler.kind != "sde" {
            return Err(ConfigError::Invalid(format!(
                "sampler.kind must be ode or sde, got {}",
                self.sampler.kind
            )));
        }
        let canonical_toml =
            toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let hash = hex_digest(canonical_toml.as_bytes());
        Ok(Loaded {
            raw: self.clone(),
            sensor,
            flow,
            hash,
            canonical_toml,
        })
    }

    pub fn teacher_resolved(&self) -> TeacherConfig {
        let mut t = self.teacher.clone();
        t.r_max = self.sensor.r_max;
        t
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = sha2::Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a config file (or defaults when absent) and apply `key.path=value`
/// overrides before deserialization.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Loaded, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
            path: p.display().to_string(),
            source: e,
        })?,
        None => String::new(),
    };
    let mut value: toml::Value = if text.trim().is_empty() {
        toml::Value::Table(Default::default())
    } else {
        text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?
    };
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Field(e.to_string()))?;
    cfg.materialize()
}

fn apply_override(value: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Field(format!("override '{spec}' is not key=value")))?;
    let parsed: toml::Value = match raw.parse::<i64>() {
        Ok(i) => toml::Value::Integer(i),
        Err(_) => match raw.parse::<f64>() {
            Ok(f) => toml::Value::Float(f),
            Err(_) => match raw {
                "true" => toml::Value::Boolean(true),
                "false" => toml::Value::Boolean(false),
                s => toml::Value::String(s.to_string()),
            },
        },
    };
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| ConfigError::Field(format!("'{path}' passes through a non-table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

/// Provenance sidecar written next to every artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub command: String,
    pub version: String,
}

impl Provenance {
    pub fn new(hash: &str, seed: u64, command: String) -> Self {
        Provenance {
            config_hash: hash.to_string(),
            seed,
            command,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("provenance.toml"),
            toml::to_string_pretty(self).expect("provenance serializes"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_materialize_and_hash_is_stable() {
        let a = load_config(None, &[]).unwrap();
        let b = load_config(None, &[]).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.flow.latent_h, 8);
        assert_eq!(a.flow.latent_w, 64);
        assert_eq!(a.flow.token_grid(), (4, 32));
    }

    #[test]
    fn overrides_change_fields_and_hash() {
        let base = load_config(None, &[]).unwrap();
        let ov = load_config(None, &["vae.base=8".into(), "sensor.height=16".into()]).unwrap();
        assert_eq!(ov.raw.vae.base, 8);
        assert_eq!(ov.raw.sensor.height, 16);
        assert_ne!(base.hash, ov.hash);
    }

    #[test]
    fn invalid_configs_are_rejected_with_field_messages() {
        // malformed field type
        let err = load_config(None, &["vae.base=notanumber".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Field(_)));
        // semantic violation: indivisible sensor
        let err = load_config(None, &["sensor.height=30".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        // odd transformer depth
        let err = load_config(None, &["flow.depth=5".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, "seed = 7\n[vae]\nbase = 8\n").unwrap();
        let loaded = load_config(Some(&p), &[]).unwrap();
        assert_eq!(loaded.raw.seed, 7);
        assert_eq!(loaded.raw.vae.base, 8);
        // canonical text reparses to the same config
        let re: RunConfig = toml::from_str(&loaded.canonical_toml).unwrap();
        assert_eq!(re, loaded.raw);
    }
}
