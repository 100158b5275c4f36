//! Run configuration and artifact writers.
//!
//! Every artifact embeds the [`RunConfig`] that produced it: JSON reports as a
//! `config` field, CSV series as a leading `#` line, SVG plots as a comment and
//! solution files inside their mesh reference.

use std::fs;
use std::path::{Path, PathBuf};

use scherk::polygon::PolygonSpec;
use scherk::{Error, Result};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub version: String,
    pub polygon_file: String,
    pub polygon: PolygonSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh_h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_levels: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn new(command: &str, polygon_file: &Path, polygon: PolygonSpec) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            polygon_file: polygon_file.display().to_string(),
            polygon,
            n_list: None,
            mesh_h: None,
            tau0: None,
            steps: None,
            seed: None,
            ring_levels: None,
        }
    }

    pub fn compact(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Output directory bound to one run.
pub struct Artifacts<'a> {
    dir: PathBuf,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    config: &'a RunConfig,
    #[serde(flatten)]
    body: &'a T,
}

pub fn json_with_config<T: Serialize>(config: &RunConfig, body: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Envelope { config, body })?;
    s.push('\n');
    Ok(s)
}

impl<'a> Artifacts<'a> {
    pub fn create(dir: &Path, config: &'a RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), config })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// `body` must serialize to a JSON object; its fields sit beside `config`.
    pub fn json<T: Serialize>(&self, name: &str, body: &T) -> Result<()> {
        Ok(fs::write(self.path(name), json_with_config(self.config, body)?)?)
    }

    pub fn csv(&self, name: &str, body: &[u8]) -> Result<()> {
        let mut out = format!("# config: {}\n", self.config.compact()).into_bytes();
        out.extend_from_slice(body);
        Ok(fs::write(self.path(name), out)?)
    }

    pub fn svg(&self, name: &str, body: &str) -> Result<()> {
        // "--" may not appear inside an XML comment
        let config = self.config.compact().replace("--", "- -");
        Ok(fs::write(self.path(name), format!("<!-- config: {config} -->\n{body}"))?)
    }

    pub fn binary(&self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        fs::write(self.path(name), buf).map_err(Error::from)
    }

    pub fn config(&self) -> &RunConfig {
        self.config
    }
}
