//! Declarative experiment configuration: TOML loading, `--set` overrides,
//! validation, resolved snapshots, and the run-directory hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PartitionMethod;
use crate::model::{ModelFamily, ModelSpec};
use crate::seeding::fnv1a64;
use crate::skd::SkdComponent;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("bad --set override `{0}`: {1}")]
    Override(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedskd,
    Fedcross,
    FedcrossDagger,
    Fedavg,
    Fedprox,
    Fedbn,
    Local,
    Centralized,
}

impl Method {
    /// Peer-to-peer methods train `5 * N` iterations per round by default;
    /// everything else trains 5.
    pub fn is_p2p(self) -> bool {
        matches!(self, Self::Fedskd | Self::Fedcross | Self::FedcrossDagger)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fedskd => "fedskd",
            Self::Fedcross => "fedcross",
            Self::FedcrossDagger => "fedcross_dagger",
            Self::Fedavg => "fedavg",
            Self::Fedprox => "fedprox",
            Self::Fedbn => "fedbn",
            Self::Local => "local",
            Self::Centralized => "centralized",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub base_width: usize,
    /// Per-client width decrement; 0 gives a homogeneous fleet.
    pub width_step: usize,
    pub tap_layers: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: ModelFamily::TinyCnn,
            base_width: 16,
            width_step: 2,
            tap_layers: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionerConfig {
    pub method: PartitionMethod,
    pub alpha: f64,
    /// Extra Dirichlet redraw constraint: minimum per-class samples per
    /// client (0 = only the non-empty-client rule).
    pub min_per_class: usize,
    /// Site id -> client index (TOML table keys are strings).
    pub site_grouping: BTreeMap<String, usize>,
}

impl Default for PartitionerConfig {
    fn default() -> Self {
        Self {
            method: PartitionMethod::Dirichlet,
            alpha: 0.5,
            min_per_class: 0,
            site_grouping: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Manifest,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub classes: usize,
    pub samples_per_client: usize,
    /// Sample shape `(c, s...)` for the synthetic task.
    pub shape: Vec<usize>,
    pub per_client_shift: f64,
    /// Peak amplitude of the class signal pattern (task difficulty knob).
    pub class_amp: f64,
    /// Peak amplitude of the attribute-correlated nuisance pattern.
    pub attr_amp: f64,
    /// Pixel noise standard deviation.
    pub noise_std: f64,
    /// Directory containing `manifest.csv` for `source = "manifest"`.
    pub manifest_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            classes: 2,
            samples_per_client: 160,
            shape: vec![1, 12, 12],
            per_client_shift: 0.6,
            class_amp: 1.6,
            attr_amp: 0.8,
            noise_std: 1.0,
            manifest_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default = "default_n_clients")]
    pub n_clients: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Defaults to `5 * n_clients` for P2P methods and 5 otherwise.
    #[serde(default)]
    pub iters_per_round: Option<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_enabled_skd")]
    pub enabled_skd: Vec<SkdComponent>,
    #[serde(default)]
    pub skd_start_fraction: f64,
    #[serde(default)]
    pub partitioner: PartitionerConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub fold: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Evaluate every k rounds (0 = final evaluation only).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub row_eps: f64,
    #[serde(default)]
    pub pixel_norm_literal: bool,
    #[serde(default = "default_fedprox_mu")]
    pub fedprox_mu: f64,
    /// Circulate N homogeneous replicas for `fedcross` instead of one model.
    #[serde(default)]
    pub fedcross_replicas: bool,
    /// Region-mask grid over the input spatial shape.
    #[serde(default = "default_region_grid")]
    pub region_grid: Vec<usize>,
    /// Optional mask file (overrides `region_grid`).
    #[serde(default)]
    pub region_mask_file: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_n_clients() -> usize {
    3
}
fn default_rounds() -> usize {
    30
}
fn default_gamma() -> f64 {
    1.0
}
fn default_enabled_skd() -> Vec<SkdComponent> {
    vec![SkdComponent::Batch, SkdComponent::Pixel, SkdComponent::Region]
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    8
}
fn default_folds() -> usize {
    5
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_fedprox_mu() -> f64 {
    0.01
}
fn default_region_grid() -> Vec<usize> {
    vec![2, 2]
}
fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    /// Per-round training iterations after applying the P2P default.
    pub fn resolved_iters(&self) -> usize {
        self.iters_per_round.unwrap_or(if self.method.is_p2p() {
            5 * self.n_clients
        } else {
            5
        })
    }

    /// Base model spec for client 0 (widths shrink by `width_step` after).
    pub fn base_model_spec(&self, num_classes: usize) -> ModelSpec {
        ModelSpec {
            family: self.model.family,
            base_width: self.model.base_width,
            num_classes,
            input_shape: self.dataset.shape.clone(),
            tap_layers: self.model.tap_layers.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.n_clients == 0 {
            return fail("n_clients must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.skd_start_fraction) {
            return fail(format!(
                "skd_start_fraction must be in [0, 1), got {}",
                self.skd_start_fraction
            ));
        }
        if self.gamma < 0.0 {
            return fail("gamma must be non-negative".into());
        }
        if self.lr <= 0.0 {
            return fail("lr must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.folds < 2 {
            return fail("folds must be >= 2".into());
        }
        if self.fold >= self.folds {
            return fail(format!("fold {} out of range for {} folds", self.fold, self.folds));
        }
        if self.row_eps < 0.0 {
            return fail("row_eps must be non-negative".into());
        }
        if self.workers == 0 {
            return fail("workers must be >= 1".into());
        }
        if let Some(it) = self.iters_per_round {
            if it == 0 {
                return fail("iters_per_round must be >= 1 when set".into());
            }
        }
        match self.dataset.source {
            DatasetSource::Synthetic => {
                if self.dataset.classes < 2 {
                    return fail("dataset.classes must be >= 2".into());
                }
                if self.dataset.samples_per_client < self.folds {
                    return fail("dataset.samples_per_client too small for the fold count".into());
                }
                let rank = self.dataset.shape.len();
                if !(3..=4).contains(&rank) {
                    return fail(format!(
                        "dataset.shape must be (c, s...) with 2 or 3 spatial dims, got {:?}",
                        self.dataset.shape
                    ));
                }
                if self.dataset.per_client_shift < 0.0 {
                    return fail("dataset.per_client_shift must be non-negative".into());
                }
                if self.dataset.noise_std <= 0.0 {
                    return fail("dataset.noise_std must be positive".into());
                }
                if self.dataset.class_amp < 0.0 || self.dataset.attr_amp < 0.0 {
                    return fail("dataset amplitudes must be non-negative".into());
                }
            }
            DatasetSource::Manifest => {
                if self.dataset.manifest_dir.is_none() {
                    return fail("dataset.manifest_dir is required for source = \"manifest\"".into());
                }
            }
        }
        match self.partitioner.method {
            PartitionMethod::Dirichlet => {
                if self.partitioner.alpha <= 0.0 {
                    return fail("partitioner.alpha must be positive".into());
                }
            }
            PartitionMethod::Stratified => {
                if self.partitioner.site_grouping.is_empty() {
                    return fail("partitioner.site_grouping is required for stratified".into());
                }
                for key in self.partitioner.site_grouping.keys() {
                    if key.parse::<usize>().is_err() {
                        return fail(format!("site_grouping key `{key}` is not a site id"));
                    }
                }
            }
            PartitionMethod::Iid => {}
        }
        let uses_region = self
            .enabled_skd
            .iter()
            .any(|c| matches!(c, SkdComponent::Region));
        if uses_region && self.method == Method::Fedskd && self.region_mask_file.is_none() {
            let d = self.dataset.shape.len() - 1;
            if self.region_grid.len() != d {
                return fail(format!(
                    "region_grid rank {} must match spatial rank {d}",
                    self.region_grid.len()
                ));
            }
            if self.region_grid.iter().any(|&g| g == 0) {
                return fail("region_grid entries must be >= 1".into());
            }
        }
        // base spec sanity (width underflow is caught at fleet build)
        self.base_model_spec(2.max(self.dataset.classes))
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Parsed site grouping with integer site ids.
    pub fn site_grouping(&self) -> BTreeMap<usize, usize> {
        self.partitioner
            .site_grouping
            .iter()
            .filter_map(|(k, &v)| k.parse::<usize>().ok().map(|s| (s, v)))
            .collect()
    }

    /// Canonical resolved-snapshot text (field order fixed by the struct).
    pub fn snapshot_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short content hash of the resolved snapshot, for run-directory names.
    pub fn content_hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.snapshot_toml().as_bytes()))[..8].to_string()
    }
}

/// Parse `key.path=value` overrides onto a TOML document. Values are parsed
/// as TOML scalars/arrays when possible and fall back to strings.
fn apply_override(doc: &mut toml::Table, raw: &str) -> Result<(), ConfigError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(raw.into(), "expected key=value".into()))?;
    let key = key.trim();
    let value = value.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(raw.into(), "empty key".into()));
    }
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut parts = key.split('.').peekable();
    let mut table = doc;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            table.insert(part.to_string(), parsed);
            break;
        }
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                ConfigError::Override(raw.into(), format!("`{part}` is not a table"))
            })?;
    }
    Ok(())
}

/// Load a config file, apply `--set` overrides, and validate.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let cfg: ExperimentConfig = if overrides.is_empty() {
        // direct deserialization keeps line/column info in parse errors
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
    } else {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        for raw in overrides {
            apply_override(&mut doc, raw)?;
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parse a resolved snapshot (used by `evaluate` and snapshot re-runs).
pub fn parse_config_str(text: &str, origin: &Path) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_path_buf(),
        detail: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("cfg.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), "method = \"fedskd\"\n");
        let cfg = load_config(&path, &[]).unwrap();
        assert_eq!(cfg.method, Method::Fedskd);
        assert_eq!(cfg.n_clients, 3);
        assert_eq!(cfg.resolved_iters(), 15);
        assert_eq!(cfg.batch_size, 8);
        assert!((cfg.lr - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn server_methods_default_to_five_iters() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), "method = \"local\"\n");
        let cfg = load_config(&path, &[]).unwrap();
        assert_eq!(cfg.resolved_iters(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), "method = \"fedskd\"\nnot_a_key = 3\n");
        let err = load_config(&path, &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
    }

    #[test]
    fn invalid_method_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), "method = \"not_a_method\"\n");
        let err = load_config(&path, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "expected line info, got: {msg}");
    }

    #[test]
    fn overrides_apply_and_type_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), "method = \"fedskd\"\n");
        let cfg = load_config(
            &path,
            &[
                "gamma=2.5".into(),
                "model.base_width=8".into(),
                "enabled_skd=[\"batch\"]".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert!((cfg.gamma - 2.5).abs() < 1e-15);
        assert_eq!(cfg.model.base_width, 8);
        assert_eq!(cfg.enabled_skd, vec![SkdComponent::Batch]);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn bad_override_value_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), "method = \"fedskd\"\n");
        assert!(load_config(&path, &["gamma=banana".into()]).is_err());
        assert!(load_config(&path, &["noequals".into()]).is_err());
    }

    #[test]
    fn validation_catches_bad_fields() {
        let dir = tempfile::tempdir().unwrap();
        for bad in [
            "method = \"fedskd\"\nskd_start_fraction = 1.0\n",
            "method = \"fedskd\"\nbatch_size = 0\n",
            "method = \"fedskd\"\nfolds = 1\n",
            "method = \"fedskd\"\nlr = 0.0\n",
            "method = \"fedskd\"\n[dataset]\nsource = \"manifest\"\n",
        ] {
            let path = write_cfg(dir.path(), bad);
            assert!(load_config(&path, &[]).is_err(), "should reject: {bad}");
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), "method = \"fedcross_dagger\"\nseed = 4\n");
        let cfg = load_config(&path, &[]).unwrap();
        let snap = cfg.snapshot_toml();
        let back = parse_config_str(&snap, Path::new("snapshot")).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.content_hash(), back.content_hash());
        assert_eq!(cfg.content_hash().len(), 8);
    }
}
