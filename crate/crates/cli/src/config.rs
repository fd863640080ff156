use std::path::Path;

use anyhow::{Context, Result};
use mixencoder::bench::corpus::GenConfig;
use mixencoder::bench::latency::BenchConfig;
use mixencoder::model::{ModelConfig, ModelKind};
use mixencoder::train::TrainConfig;
use serde::Deserialize;

/// Contents of `--config`. Every table is optional; command-line flags win.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub gen: Option<GenConfig>,
    pub bench: Option<BenchConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(anyhow::Error::from)
        } else {
            toml::from_str(&text).map_err(anyhow::Error::from)
        };
        parsed.with_context(|| format!("parsing {}", path.display()))
    }
}

/// `mix` is shorthand for the smallest variant.
pub fn parse_kind(name: &str) -> Result<ModelKind> {
    Ok(ModelKind::parse(if name == "mix" { "mix-a" } else { name })?)
}

pub fn model_config(file: &FileConfig, model: Option<&str>) -> Result<ModelConfig> {
    let mut cfg = file.model.clone().unwrap_or_default();
    if let Some(name) = model {
        cfg.kind = parse_kind(name)?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_configs_parse() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(
            &toml_path,
            "[model]\nkind = \"dual\"\n[model.encoder]\nd_model = 32\n[train]\nepochs = 2\n",
        )
        .unwrap();
        let c = FileConfig::load(Some(&toml_path)).unwrap();
        let m = c.model.unwrap();
        assert_eq!(m.kind, ModelKind::Dual);
        assert_eq!(m.encoder.d_model, 32);
        assert_eq!(m.encoder.num_layers, 4);
        assert_eq!(c.train.unwrap().epochs, 2);

        let json_path = dir.path().join("c.json");
        std::fs::write(&json_path, r#"{"gen": {"queries": 7}}"#).unwrap();
        assert_eq!(FileConfig::load(Some(&json_path)).unwrap().gen.unwrap().queries, 7);

        std::fs::write(&json_path, r#"{"unknown": 1}"#).unwrap();
        assert!(FileConfig::load(Some(&json_path)).is_err());
    }

    #[test]
    fn flag_overrides_file_kind() {
        let file = FileConfig {
            model: Some(ModelConfig::new(ModelKind::Poly)),
            ..FileConfig::default()
        };
        assert_eq!(model_config(&file, None).unwrap().kind, ModelKind::Poly);
        assert_eq!(model_config(&file, Some("mix")).unwrap().kind, ModelKind::MixA);
        assert_eq!(model_config(&file, Some("maxsim")).unwrap().kind, ModelKind::MaxSim);
    }
}
