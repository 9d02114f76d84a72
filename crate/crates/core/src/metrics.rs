//! AUC-based evaluation: Mann-Whitney AUC with midrank tie handling,
//! local/global test harnesses, the sex-subgroup fairness gap, and the
//! metrics CSV schema.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::graph::Graph;
use crate::model::ModelInstance;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("labels contain a single class; AUC is undefined")]
    SingleClass,
    #[error("dataset has no sensitive attribute")]
    MissingAttr,
    #[error("metrics: {0}")]
    Invalid(String),
}

/// Binary ROC AUC via the Mann-Whitney U statistic normalized by
/// `n_pos * n_neg`; ties contribute 1/2 through midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Invalid(
            "scores and labels must have equal length".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::Invalid("non-finite score".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(MetricsError::Invalid("labels must be 0/1".into()));
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // midranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Macro-averaged one-vs-rest AUC over the classes present in `labels`.
/// `scores` holds one column per class. With two classes this equals the
/// binary AUC of the class-1 column.
pub fn multiclass_auc(scores: &Array2<f64>, labels: &[usize]) -> Result<f64, MetricsError> {
    if scores.nrows() != labels.len() {
        return Err(MetricsError::Invalid(
            "scores rows must match label count".into(),
        ));
    }
    let k = scores.ncols();
    if labels.iter().any(|&y| y >= k) {
        return Err(MetricsError::Invalid("label outside score columns".into()));
    }
    let mut present: Vec<usize> = (0..k)
        .filter(|&c| labels.iter().any(|&y| y == c))
        .collect();
    if present.len() < 2 {
        return Err(MetricsError::SingleClass);
    }
    present.sort_unstable();
    let mut total = 0.0;
    for &c in &present {
        let bin: Vec<u8> = labels.iter().map(|&y| (y == c) as u8).collect();
        let col: Vec<f64> = scores.column(c).to_vec();
        total += auc(&col, &bin)?;
    }
    Ok(total / present.len() as f64)
}

/// Softmax class probabilities of a model over a dataset, evaluated in
/// batches.
pub fn predict_scores(
    model: &ModelInstance,
    ds: &LabeledDataset,
) -> Result<Array2<f64>, MetricsError> {
    let n = ds.n();
    let chunk = 64usize;
    let mut out = Array2::<f64>::zeros((n, model.spec().num_classes));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = ds.subset(&idx);
        let logits = model
            .logits(&batch.inputs)
            .map_err(|e| MetricsError::Invalid(e.to_string()))?;
        let probs = Graph::softmax_rows(&logits);
        out.slice_mut(ndarray::s![start..end, ..]).assign(&probs);
        start = end;
    }
    Ok(out)
}

/// Macro OvR AUC of a model on one dataset.
pub fn model_auc(model: &ModelInstance, ds: &LabeledDataset) -> Result<f64, MetricsError> {
    let scores = predict_scores(model, ds)?;
    multiclass_auc(&scores, &ds.labels)
}

/// Per-client values with their mean and population standard deviation.
#[derive(Clone, Debug, Serialize)]
pub struct TestSummary {
    pub per_client: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl TestSummary {
    pub fn from_values(per_client: Vec<f64>) -> Self {
        let n = per_client.len() as f64;
        let mean = per_client.iter().sum::<f64>() / n;
        let var = per_client.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            per_client,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Each client's model on its own test shard.
pub fn local_test(
    models: &[&ModelInstance],
    test_shards: &[&LabeledDataset],
) -> Result<TestSummary, MetricsError> {
    if models.len() != test_shards.len() || models.is_empty() {
        return Err(MetricsError::Invalid(
            "need one model per test shard".into(),
        ));
    }
    let per_client = models
        .iter()
        .zip(test_shards)
        .map(|(m, ds)| model_auc(m, ds))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(TestSummary::from_values(per_client))
}

/// Each client's model on every client's test shard, shards weighted equally
/// regardless of size.
pub fn global_test(
    models: &[&ModelInstance],
    test_shards: &[&LabeledDataset],
) -> Result<TestSummary, MetricsError> {
    if models.is_empty() || test_shards.is_empty() {
        return Err(MetricsError::Invalid("need models and shards".into()));
    }
    let mut per_client = Vec::with_capacity(models.len());
    for m in models {
        let mut acc = 0.0;
        for ds in test_shards {
            acc += model_auc(m, ds)?;
        }
        per_client.push(acc / test_shards.len() as f64);
    }
    Ok(TestSummary::from_values(per_client))
}

/// AUC of each sensitive-attribute subgroup on one score set; `None` marks a
/// subgroup whose labels are single-class or empty (excluded from fairness
/// means).
pub fn subgroup_aucs(
    scores: &Array2<f64>,
    labels: &[usize],
    attr: &[u8],
) -> (Option<f64>, Option<f64>) {
    let one = |target: u8| -> Option<f64> {
        let idx: Vec<usize> = attr
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == target).then_some(i))
            .collect();
        if idx.is_empty() {
            return None;
        }
        let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let sub_scores = scores.select(Axis(0), &idx);
        multiclass_auc(&sub_scores, &sub_labels).ok()
    };
    (one(1), one(0))
}

/// Per-client subgroup AUCs and the resulting gap.
#[derive(Clone, Debug, Serialize)]
pub struct FairnessReport {
    /// `(male, female)` per client; `None` when that subgroup was excluded.
    pub per_client: Vec<(Option<f64>, Option<f64>)>,
    pub gap: f64,
}

/// Absolute difference between the across-client means of the two subgroup
/// AUCs. Clients whose subgroup is single-class are excluded from that
/// subgroup's mean.
pub fn fairness_gap_from_subgroups(
    per_client: &[(Option<f64>, Option<f64>)],
) -> Result<f64, MetricsError> {
    let male: Vec<f64> = per_client.iter().filter_map(|(m, _)| *m).collect();
    let female: Vec<f64> = per_client.iter().filter_map(|(_, f)| *f).collect();
    if male.is_empty() || female.is_empty() {
        return Err(MetricsError::Invalid(
            "no client has a valid subgroup AUC for one of the groups".into(),
        ));
    }
    let m = male.iter().sum::<f64>() / male.len() as f64;
    let f = female.iter().sum::<f64>() / female.len() as f64;
    Ok((m - f).abs())
}

/// Fairness gap over each client's own (local) test shard.
pub fn fairness_gap(
    models: &[&ModelInstance],
    test_shards: &[&LabeledDataset],
) -> Result<FairnessReport, MetricsError> {
    if models.len() != test_shards.len() || models.is_empty() {
        return Err(MetricsError::Invalid(
            "need one model per test shard".into(),
        ));
    }
    let mut per_client = Vec::with_capacity(models.len());
    for (m, ds) in models.iter().zip(test_shards) {
        let attr = ds.sensitive_attr.as_ref().ok_or(MetricsError::MissingAttr)?;
        let scores = predict_scores(m, ds)?;
        per_client.push(subgroup_aucs(&scores, &ds.labels, attr));
    }
    let gap = fairness_gap_from_subgroups(&per_client)?;
    Ok(FairnessReport { per_client, gap })
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Local,
    Global,
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Local => write!(f, "local"),
            Self::Global => write!(f, "global"),
        }
    }
}

/// One metrics row: `client` is a client index or `"mean"` for the summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub round: usize,
    pub client: String,
    pub scope: Scope,
    pub auc: f64,
    pub fairness_gap: Option<f64>,
    pub seed: u64,
    pub fold: usize,
}

/// Write rows with a fixed header and fixed 6-decimal float formatting so
/// identical runs produce byte-identical files.
pub fn write_metrics_csv(path: &std::path::Path, rows: &[MetricsRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MetricsError::Invalid(e.to_string()))?;
    w.write_record(["method", "round", "client", "scope", "auc", "fairness_gap", "seed", "fold"])
        .map_err(|e| MetricsError::Invalid(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.method.as_str(),
            &r.round.to_string(),
            r.client.as_str(),
            &r.scope.to_string(),
            &format!("{:.6}", r.auc),
            &r.fairness_gap.map(|g| format!("{g:.6}")).unwrap_or_default(),
            &r.seed.to_string(),
            &r.fold.to_string(),
        ])
        .map_err(|e| MetricsError::Invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| MetricsError::Invalid(e.to_string()))
}

/// Read back a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &std::path::Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MetricsError::Invalid(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| MetricsError::Invalid(e.to_string()))?;
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        rows.push(MetricsRow {
            method: get(0),
            round: get(1).parse().map_err(|_| MetricsError::Invalid("bad round".into()))?,
            client: get(2),
            scope: match get(3).as_str() {
                "local" => Scope::Local,
                "global" => Scope::Global,
                other => return Err(MetricsError::Invalid(format!("bad scope {other}"))),
            },
            auc: get(4).parse().map_err(|_| MetricsError::Invalid("bad auc".into()))?,
            fairness_gap: {
                let raw = get(5);
                if raw.is_empty() {
                    None
                } else {
                    Some(raw.parse().map_err(|_| MetricsError::Invalid("bad gap".into()))?)
                }
            },
            seed: get(6).parse().map_err(|_| MetricsError::Invalid("bad seed".into()))?,
            fold: get(7).parse().map_err(|_| MetricsError::Invalid("bad fold".into()))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::SeededRng;

    /// Brute-force pairwise AUC oracle with the 1/2 tie rule.
    fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_trivial_cases() {
        // perfectly ranked
        let s = [0.1, 0.2, 0.8, 0.9];
        let y = [0, 0, 1, 1];
        assert_eq!(auc(&s, &y).unwrap(), 1.0);
        // all scores equal -> 0.5 by the tie convention
        let s = [0.3, 0.3, 0.3, 0.3];
        assert_eq!(auc(&s, &y).unwrap(), 0.5);
        // worked example
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = [0, 0, 1, 1];
        assert_eq!(auc(&s, &y).unwrap(), 0.75);
    }

    #[test]
    fn auc_single_class_errors() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(MetricsError::SingleClass)
        ));
    }

    #[test]
    fn auc_matches_bruteforce_with_ties() {
        let mut rng = SeededRng::new(81);
        for _ in 0..100 {
            let n = 3 + rng.gen_index(20);
            // quantized scores force ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.uniform01() * 8.0).floor() / 8.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() & 1) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let got = auc(&scores, &labels).unwrap();
            let expect = auc_bruteforce(&scores, &labels);
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn auc_invariances() {
        let mut rng = SeededRng::new(82);
        for _ in 0..50 {
            let n = 4 + rng.gen_index(12);
            let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() & 1) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let base = auc(&scores, &labels).unwrap();
            // strictly monotone transform leaves AUC unchanged
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            assert!((auc(&warped, &labels).unwrap() - base).abs() < 1e-12);
            // label complement flips the statistic around 1/2 exactly
            let flipped: Vec<u8> = labels.iter().map(|&y| 1 - y).collect();
            let comp = auc(&scores, &flipped).unwrap();
            assert!((base + comp - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multiclass_binary_equals_auc() {
        let mut rng = SeededRng::new(83);
        for _ in 0..20 {
            let n = 6 + rng.gen_index(10);
            let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_index(2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let p1: Vec<f64> = (0..n).map(|_| rng.uniform01()).collect();
            let mut scores = Array2::<f64>::zeros((n, 2));
            for i in 0..n {
                scores[(i, 1)] = p1[i];
                scores[(i, 0)] = 1.0 - p1[i];
            }
            let bin: Vec<u8> = labels.iter().map(|&y| y as u8).collect();
            let got = multiclass_auc(&scores, &labels).unwrap();
            let expect = auc(&p1, &bin).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn multiclass_perfect_and_oracle() {
        // perfect 3-class classifier
        let labels = vec![0usize, 1, 2, 0, 1, 2];
        let mut scores = Array2::<f64>::zeros((6, 3));
        for (i, &y) in labels.iter().enumerate() {
            scores[(i, y)] = 1.0;
        }
        assert_eq!(multiclass_auc(&scores, &labels).unwrap(), 1.0);

        // small random case vs per-class brute force
        let mut rng = SeededRng::new(84);
        let labels = vec![0usize, 1, 2, 1, 0, 2, 1, 0];
        let scores = Array2::from_shape_fn((8, 3), |_| rng.uniform01());
        let got = multiclass_auc(&scores, &labels).unwrap();
        let mut expect = 0.0;
        for c in 0..3 {
            let bin: Vec<u8> = labels.iter().map(|&y| (y == c) as u8).collect();
            let col: Vec<f64> = scores.column(c).to_vec();
            expect += auc_bruteforce(&col, &bin);
        }
        expect /= 3.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn fairness_gap_arithmetic() {
        let per_client = vec![(Some(0.8), Some(0.7)), (Some(0.9), Some(0.8))];
        let gap = fairness_gap_from_subgroups(&per_client).unwrap();
        assert!((gap - 0.10).abs() < 1e-12);
        // equal subgroup AUCs -> 0
        let per_client = vec![(Some(0.8), Some(0.8)), (Some(0.6), Some(0.6))];
        assert_eq!(fairness_gap_from_subgroups(&per_client).unwrap(), 0.0);
        // excluded clients drop out of the corresponding mean
        let per_client = vec![(Some(0.8), None), (Some(0.9), Some(0.75))];
        let gap = fairness_gap_from_subgroups(&per_client).unwrap();
        assert!((gap - (0.85 - 0.75)).abs() < 1e-12);
    }

    #[test]
    fn summary_mean_matches_hand_average() {
        let s = TestSummary::from_values(vec![0.5, 0.7, 0.9]);
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert!(s.std > 0.0);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            MetricsRow {
                method: "fedskd".into(),
                round: 30,
                client: "0".into(),
                scope: Scope::Local,
                auc: 0.8123456,
                fairness_gap: None,
                seed: 1,
                fold: 0,
            },
            MetricsRow {
                method: "fedskd".into(),
                round: 30,
                client: "mean".into(),
                scope: Scope::Local,
                auc: 0.75,
                fairness_gap: Some(0.05),
                seed: 1,
                fold: 0,
            },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].client, "0");
        assert!((back[0].auc - 0.812346).abs() < 1e-9);
        assert_eq!(back[1].fairness_gap, Some(0.05));
    }
}
