//! Layered settings: flags, then environment, then a JSON config file, then
//! built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use docloc_core::Error;
use serde::{Deserialize, Serialize};

macro_rules! settings {
    ($($field:ident : $ty:ty),* $(,)?) => {
        /// One layer of settings; unset keys fall through to the next layer.
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct CliConfig {
            $(pub $field: Option<$ty>,)*
        }

        impl CliConfig {
            /// Keeps every key set here and takes the rest from `lower`.
            pub fn over(self, lower: CliConfig) -> CliConfig {
                CliConfig { $($field: self.$field.or(lower.$field),)* }
            }
        }
    };
}

settings! {
    dataset_root: PathBuf,
    format: String,
    split: String,
    mode: String,
    ablation: String,
    workers: usize,
    cache_dir: PathBuf,
    out_dir: PathBuf,
    resume: bool,
    gating: String,
    backend: String,
    mock_script: PathBuf,
    endpoint: String,
    model_id: String,
    prompts: PathBuf,
    detector: String,
    words: PathBuf,
    noise_substitution: f64,
    noise_deletion: f64,
    noise_seed: u64,
    max_in_flight: usize,
    per_minute: u32,
    timeout_secs: u64,
}

impl CliConfig {
    pub fn defaults() -> CliConfig {
        CliConfig {
            format: Some("unified".into()),
            mode: Some("ocr-free".into()),
            ablation: Some("none".into()),
            workers: Some(4),
            resume: Some(false),
            gating: Some("ungated".into()),
            model_id: Some("pixtral-12b".into()),
            detector: Some("reference".into()),
            noise_substitution: Some(0.0),
            noise_deletion: Some(0.0),
            noise_seed: Some(0),
            max_in_flight: Some(4),
            timeout_secs: Some(120),
            ..CliConfig::default()
        }
    }

    pub fn from_file(path: &Path) -> anyhow::Result<CliConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
            .map_err(Into::into)
    }

    /// Flags and environment (already merged by the parser) over the file
    /// over the defaults.
    pub fn resolve(cli: CliConfig, file: Option<&Path>) -> anyhow::Result<CliConfig> {
        let file = match file {
            Some(p) => CliConfig::from_file(p)?,
            None => CliConfig::default(),
        };
        Ok(cli.over(file).over(CliConfig::defaults()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
