//! Experiment runner: run directories, metrics/report/checkpoint
//! persistence, ablation sweeps, and checkpoint re-evaluation.
//!
//! A run directory is named `<unix-nanos>-<config-hash>` under the output
//! root (config `output_dir`, overridable with the `FEDSKD_LAB_OUT`
//! environment variable) and contains:
//!
//! ```text
//! config.resolved.toml   resolved config snapshot (re-runnable)
//! metrics.csv            evaluation rows (byte-identical across reruns)
//! rounds.jsonl           one RoundReport per line
//! checkpoints/client_<i>.fskd   deployed model per client
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::checkpoint::{load_model, save_model};
use crate::config::{load_config, parse_config_str, ConfigError, ExperimentConfig, Method};
use crate::data::LabeledDataset;
use crate::metrics::{
    fairness_gap, global_test, local_test, write_metrics_csv, MetricsError, MetricsRow, Scope,
    TestSummary,
};
use crate::model::ModelInstance;
use crate::protocol::{Experiment, ProtocolError, RoundReport};
use crate::skd::SkdComponent;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl RunnerError {
    /// CLI exit code: 2 for config validation, 3 for non-finite losses,
    /// 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::NonFinite(_) => 3,
            Self::Run(_) => 1,
        }
    }
}

fn from_protocol(e: ProtocolError) -> RunnerError {
    match e {
        ProtocolError::NonFiniteLoss { .. } => RunnerError::NonFinite(e.to_string()),
        other => RunnerError::Run(other.to_string()),
    }
}

fn from_metrics(e: MetricsError) -> RunnerError {
    RunnerError::Run(e.to_string())
}

/// Output root: `FEDSKD_LAB_OUT` wins over the config's `output_dir`.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os("FEDSKD_LAB_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn unique_run_dir(root: &Path, hash: &str) -> Result<PathBuf, RunnerError> {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let mut name = format!("{nanos}-{hash}");
    let mut dir = root.join(&name);
    let mut salt = 0u32;
    while dir.exists() {
        salt += 1;
        name = format!("{nanos}-{hash}-{salt}");
        dir = root.join(&name);
    }
    std::fs::create_dir_all(dir.join("checkpoints"))
        .map_err(|e| RunnerError::Run(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Evaluation rows for one round checkpoint: one row per client per scope,
/// then a mean row per scope; the fairness gap (when computable) rides on the
/// local mean row.
pub fn evaluate_rows(
    cfg: &ExperimentConfig,
    models: &[ModelInstance],
    shards: &[&LabeledDataset],
    round: usize,
) -> Result<(Vec<MetricsRow>, TestSummary, TestSummary, Option<f64>), MetricsError> {
    let refs: Vec<&ModelInstance> = models.iter().collect();
    let local = local_test(&refs, shards)?;
    let global = global_test(&refs, shards)?;
    let fairness = if shards.iter().all(|s| s.sensitive_attr.is_some()) {
        match fairness_gap(&refs, shards) {
            Ok(report) => Some(report.gap),
            Err(MetricsError::SingleClass) | Err(MetricsError::Invalid(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let mut rows = Vec::new();
    let mk = |client: String, scope: Scope, auc: f64, gap: Option<f64>| MetricsRow {
        method: cfg.method.name().to_string(),
        round,
        client,
        scope,
        auc,
        fairness_gap: gap,
        seed: cfg.seed,
        fold: cfg.fold,
    };
    for (i, &v) in local.per_client.iter().enumerate() {
        rows.push(mk(i.to_string(), Scope::Local, v, None));
    }
    for (i, &v) in global.per_client.iter().enumerate() {
        rows.push(mk(i.to_string(), Scope::Global, v, None));
    }
    rows.push(mk("mean".into(), Scope::Local, local.mean, fairness));
    rows.push(mk("mean".into(), Scope::Global, global.mean, None));
    Ok((rows, local, global, fairness))
}

/// Outcome of one `run` invocation.
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub local: TestSummary,
    pub global: TestSummary,
    pub fairness: Option<f64>,
    pub reports: Vec<RoundReport>,
}

/// Run an experiment from a config file plus `--set` overrides, persisting
/// everything into a fresh run directory.
pub fn cli_run(config_path: &Path, overrides: &[String]) -> Result<RunSummary, RunnerError> {
    let cfg = load_config(config_path, overrides)?;
    run_config(cfg)
}

/// Run an already-resolved config (used by `run` and by ablation sweeps).
pub fn run_config(cfg: ExperimentConfig) -> Result<RunSummary, RunnerError> {
    let root = output_root(&cfg);
    let run_dir = unique_run_dir(&root, &cfg.content_hash())?;
    std::fs::write(run_dir.join("config.resolved.toml"), cfg.snapshot_toml())
        .map_err(|e| RunnerError::Run(e.to_string()))?;

    let mut experiment = Experiment::new(cfg.clone()).map_err(from_protocol)?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut rows: Vec<MetricsRow> = Vec::new();
    for round in 0..cfg.rounds {
        reports.push(experiment.step_round().map_err(from_protocol)?);
        let completed = round + 1;
        if cfg.eval_every > 0 && completed % cfg.eval_every == 0 && completed != cfg.rounds {
            let models = experiment.deployed_models();
            let shards = experiment.test_shards();
            let (mut r, _, _, _) =
                evaluate_rows(&cfg, &models, &shards, completed).map_err(from_metrics)?;
            rows.append(&mut r);
        }
    }
    let models = experiment.deployed_models();
    let shards = experiment.test_shards();
    let (mut final_rows, local, global, fairness) =
        evaluate_rows(&cfg, &models, &shards, cfg.rounds).map_err(from_metrics)?;
    rows.append(&mut final_rows);

    for (i, m) in models.iter().enumerate() {
        save_model(m, &run_dir.join(format!("checkpoints/client_{i}.fskd")))
            .map_err(|e| RunnerError::Run(e.to_string()))?;
    }
    write_metrics_csv(&run_dir.join("metrics.csv"), &rows).map_err(from_metrics)?;
    let mut jsonl = std::fs::File::create(run_dir.join("rounds.jsonl"))
        .map_err(|e| RunnerError::Run(e.to_string()))?;
    for report in &reports {
        let line = serde_json::to_string(report).map_err(|e| RunnerError::Run(e.to_string()))?;
        writeln!(jsonl, "{line}").map_err(|e| RunnerError::Run(e.to_string()))?;
    }
    Ok(RunSummary {
        run_dir,
        rows,
        local,
        global,
        fairness,
        reports,
    })
}

/// Reload a run directory's checkpoints and recompute its metrics. The
/// returned rows reproduce the recorded final-round rows.
pub fn cli_evaluate(
    run_dir: &Path,
    scope: Option<Scope>,
) -> Result<Vec<MetricsRow>, RunnerError> {
    let snap_path = run_dir.join("config.resolved.toml");
    let text = std::fs::read_to_string(&snap_path).map_err(|e| {
        RunnerError::Run(format!("cannot read {}: {e}", snap_path.display()))
    })?;
    let cfg = parse_config_str(&text, &snap_path)?;
    let mut models = Vec::with_capacity(cfg.n_clients);
    for i in 0..cfg.n_clients {
        let path = run_dir.join(format!("checkpoints/client_{i}.fskd"));
        if !path.exists() {
            return Err(RunnerError::Run(format!(
                "missing checkpoint {}",
                path.display()
            )));
        }
        models.push(load_model(&path).map_err(|e| RunnerError::Run(e.to_string()))?);
    }
    // test shards are a deterministic function of (config, seed)
    let experiment = Experiment::new(cfg.clone()).map_err(from_protocol)?;
    let shards = experiment.test_shards();
    let (rows, _, _, _) = evaluate_rows(&cfg, &models, &shards, cfg.rounds).map_err(from_metrics)?;
    Ok(match scope {
        None => rows,
        Some(s) => rows.into_iter().filter(|r| r.scope == s).collect(),
    })
}

/// Ablation axes over the distillation configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateAxis {
    Components,
    Layers,
    Timing,
}

impl AblateAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "components" => Some(Self::Components),
            "layers" => Some(Self::Layers),
            "timing" => Some(Self::Timing),
            _ => None,
        }
    }
}

fn component_subsets() -> Vec<(String, Vec<SkdComponent>)> {
    use SkdComponent::*;
    vec![
        ("B".into(), vec![Batch]),
        ("P".into(), vec![Pixel]),
        ("R".into(), vec![Region]),
        ("BP".into(), vec![Batch, Pixel]),
        ("BR".into(), vec![Batch, Region]),
        ("PR".into(), vec![Pixel, Region]),
        ("BPR".into(), vec![Batch, Pixel, Region]),
    ]
}

/// Variants for one axis as `(name, configured copy)` pairs.
pub fn ablation_variants(
    axis: AblateAxis,
    base: &ExperimentConfig,
) -> Vec<(String, ExperimentConfig)> {
    match axis {
        AblateAxis::Components => component_subsets()
            .into_iter()
            .map(|(name, set)| {
                let mut cfg = base.clone();
                cfg.enabled_skd = set;
                (name, cfg)
            })
            .collect(),
        AblateAxis::Layers => [
            vec![4usize],
            vec![3, 4],
            vec![2, 3, 4],
            vec![1, 2, 3, 4],
        ]
        .into_iter()
        .map(|taps| {
            let name = taps
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join("-");
            let mut cfg = base.clone();
            cfg.model.tap_layers = taps;
            (name, cfg)
        })
        .collect(),
        AblateAxis::Timing => [0.0, 0.25, 0.5, 0.75]
            .into_iter()
            .map(|frac| {
                let mut cfg = base.clone();
                cfg.skd_start_fraction = frac;
                (format!("{frac}"), cfg)
            })
            .collect(),
    }
}

/// Outcome of one ablation sweep.
pub struct AblateSummary {
    pub summary_csv: PathBuf,
    pub rows: Vec<(String, MetricsRow)>,
}

/// Run every variant of an axis and write one combined summary CSV with a
/// row per `(variant, client, scope)`.
pub fn cli_ablate(
    axis: AblateAxis,
    config_path: &Path,
    overrides: &[String],
) -> Result<AblateSummary, RunnerError> {
    let base = load_config(config_path, overrides)?;
    if base.method != Method::Fedskd {
        return Err(RunnerError::Config(ConfigError::Invalid(
            "ablations apply to method = \"fedskd\"".into(),
        )));
    }
    let root = output_root(&base);
    let sweep_dir = unique_run_dir(&root, &format!("ablate-{axis:?}").to_lowercase())?;
    let mut rows: Vec<(String, MetricsRow)> = Vec::new();
    for (name, cfg) in ablation_variants(axis, &base) {
        let summary = run_config(cfg)?;
        for row in summary.rows {
            // per-client rows of the final round only
            if row.client != "mean" && row.round == base.rounds {
                rows.push((name.clone(), row));
            }
        }
    }
    let summary_csv = sweep_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_csv)
        .map_err(|e| RunnerError::Run(e.to_string()))?;
    w.write_record(["axis", "variant", "method", "seed", "fold", "client", "scope", "auc"])
        .map_err(|e| RunnerError::Run(e.to_string()))?;
    let axis_name = format!("{axis:?}").to_lowercase();
    for (variant, row) in &rows {
        w.write_record([
            axis_name.as_str(),
            variant,
            &row.method,
            &row.seed.to_string(),
            &row.fold.to_string(),
            &row.client,
            &row.scope.to_string(),
            &format!("{:.6}", row.auc),
        ])
        .map_err(|e| RunnerError::Run(e.to_string()))?;
    }
    w.flush().map_err(|e| RunnerError::Run(e.to_string()))?;
    Ok(AblateSummary { summary_csv, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_cfg(dir: &Path) -> PathBuf {
        let path = dir.join("cfg.toml");
        std::fs::write(
            &path,
            r#"
method = "fedskd"
n_clients = 2
rounds = 1
iters_per_round = 1
seed = 3
lr = 0.001
batch_size = 4

[model]
base_width = 4
width_step = 0
tap_layers = [2, 3]

[dataset]
samples_per_client = 24
shape = [1, 12, 12]

[partitioner]
method = "iid"
"#,
        )
        .unwrap();
        path
    }

    #[test]
    fn run_writes_all_artifacts_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = desk_cfg(dir.path());
        let out = dir.path().join("out");
        let set = vec![format!("output_dir={:?}", out.to_str().unwrap())];
        let a = cli_run(&cfg_path, &set).unwrap();
        assert!(a.run_dir.join("config.resolved.toml").exists());
        assert!(a.run_dir.join("metrics.csv").exists());
        assert!(a.run_dir.join("rounds.jsonl").exists());
        assert!(a.run_dir.join("checkpoints/client_0.fskd").exists());
        assert!(a.run_dir.join("checkpoints/client_1.fskd").exists());

        let b = cli_run(&cfg_path, &set).unwrap();
        assert_ne!(a.run_dir, b.run_dir);
        let csv_a = std::fs::read(a.run_dir.join("metrics.csv")).unwrap();
        let csv_b = std::fs::read(b.run_dir.join("metrics.csv")).unwrap();
        assert_eq!(csv_a, csv_b, "identical config+seed must give identical CSV");
    }

    #[test]
    fn zero_rounds_only_writes_initial_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = desk_cfg(dir.path());
        let out = dir.path().join("out");
        let summary = cli_run(
            &cfg_path,
            &[
                format!("output_dir={:?}", out.to_str().unwrap()),
                "rounds=0".into(),
            ],
        )
        .unwrap();
        assert!(summary.reports.is_empty());
        assert!(summary.run_dir.join("checkpoints/client_0.fskd").exists());
        // metrics rows exist for round 0 (the initial models)
        assert!(summary.rows.iter().all(|r| r.round == 0));
    }

    #[test]
    fn evaluate_reproduces_recorded_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = desk_cfg(dir.path());
        let out = dir.path().join("out");
        let summary = cli_run(&cfg_path, &[format!("output_dir={:?}", out.to_str().unwrap())]).unwrap();
        let rows = cli_evaluate(&summary.run_dir, None).unwrap();
        let finals: Vec<_> = summary.rows.iter().filter(|r| r.round == 1).collect();
        assert_eq!(rows.len(), finals.len());
        for (a, b) in rows.iter().zip(finals) {
            assert_eq!(a.client, b.client);
            assert!((a.auc - b.auc).abs() < 1e-6, "{} vs {}", a.auc, b.auc);
        }
        // scope filter restricts rows
        let local_only = cli_evaluate(&summary.run_dir, Some(Scope::Local)).unwrap();
        assert!(local_only.iter().all(|r| r.scope == Scope::Local));
        assert!(local_only.len() < rows.len());
    }

    #[test]
    fn evaluate_missing_checkpoint_is_clear() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = desk_cfg(dir.path());
        let out = dir.path().join("out");
        let summary = cli_run(&cfg_path, &[format!("output_dir={:?}", out.to_str().unwrap())]).unwrap();
        std::fs::remove_file(summary.run_dir.join("checkpoints/client_1.fskd")).unwrap();
        let err = cli_evaluate(&summary.run_dir, None).unwrap_err();
        assert!(err.to_string().contains("missing checkpoint"), "{err}");
    }

    #[test]
    fn ablation_axes_have_documented_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = desk_cfg(dir.path());
        let base = load_config(&cfg_path, &[]).unwrap();
        assert_eq!(ablation_variants(AblateAxis::Components, &base).len(), 7);
        assert_eq!(ablation_variants(AblateAxis::Layers, &base).len(), 4);
        assert_eq!(ablation_variants(AblateAxis::Timing, &base).len(), 4);
    }

    #[test]
    fn ablate_summary_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = desk_cfg(dir.path());
        let out = dir.path().join("out");
        let summary = cli_ablate(
            AblateAxis::Timing,
            &cfg_path,
            &[format!("output_dir={:?}", out.to_str().unwrap())],
        )
        .unwrap();
        // runs x clients x scopes = 4 x 2 x 2
        assert_eq!(summary.rows.len(), 16);
        assert!(summary.summary_csv.exists());
    }
}
