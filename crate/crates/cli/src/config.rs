use std::path::Path;

use msgfield::projection::OCCLUSION_PADDING;
use msgfield::{CentroidGrasp, DistillConfig, Error, FitConfig, ManipulationConfig, RenderConfig};
use serde::{Deserialize, Serialize};

/// Settings shared by all subcommands. Every section is optional; missing
/// keys keep their defaults and unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub render: RenderConfig,
    pub distill: DistillConfig,
    pub fit: FitConfig,
    pub manipulate: ManipulationConfig,
    pub grasp: CentroidGrasp,
    pub occlusion: OcclusionConfig,
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    /// NDC margin added around the object footprint.
    pub padding: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            padding: OCCLUSION_PADDING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Gripper start position.
    pub home: [f64; 3],
    /// Largest gripper displacement per tick.
    pub step: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            home: [0.0, 0.9, -0.7],
            step: 0.05,
        }
    }
}

impl Config {
    /// Reads TOML when the extension is `.toml`, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let parsed = if is_toml {
            toml::from_str(&text).map_err(|e| {
                let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
                (line, e.message().to_string())
            })
        } else {
            serde_json::from_str(&text).map_err(|e| (e.line(), e.to_string()))
        };
        let mut cfg: Config = parsed.map_err(|(line, msg)| Error::Parse {
            path: path.into(),
            line,
            msg,
        })?;
        cfg.sync();
        Ok(cfg)
    }

    /// The manipulation loop refits with the shared fit settings.
    pub fn sync(&mut self) {
        self.manipulate.fit = self.fit.clone();
    }
}
