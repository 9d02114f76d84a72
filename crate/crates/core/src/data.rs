//! Labeled datasets, non-IID partitioning, synthetic task generation, and
//! train/test splitting.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{lane_seed, SeededRng};
use crate::skd::RegionMaskSet;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("client {client} received zero samples after {retries} partition redraws")]
    EmptyClient { client: usize, retries: usize },
    #[error("site label {0} is not present in the site grouping")]
    UnknownSite(usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// A labeled dataset: inputs `(N, c, s...)`, integer class labels, and
/// optional per-sample binary sensitive attribute and site id.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub inputs: ArrayD<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub sensitive_attr: Option<Vec<u8>>,
    pub site_labels: Option<Vec<usize>>,
}

impl LabeledDataset {
    /// Build and validate a source dataset: classes must be contiguous from 0
    /// and all present; attr/site lengths must equal N when given.
    pub fn new(
        inputs: ArrayD<f64>,
        labels: Vec<usize>,
        sensitive_attr: Option<Vec<u8>>,
        site_labels: Option<Vec<usize>>,
    ) -> Result<Self, DataError> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n == 0 || n != labels.len() {
            return Err(DataError::Invalid(format!(
                "need N >= 1 inputs matching {} labels, got {n}",
                labels.len()
            )));
        }
        let num_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
        let mut seen = vec![false; num_classes];
        for &y in &labels {
            seen[y] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(DataError::Invalid(
                "label classes must be contiguous from 0".into(),
            ));
        }
        if let Some(a) = &sensitive_attr {
            if a.len() != n || a.iter().any(|&v| v > 1) {
                return Err(DataError::Invalid(
                    "sensitive_attr must be binary with one entry per sample".into(),
                ));
            }
        }
        if let Some(s) = &site_labels {
            if s.len() != n {
                return Err(DataError::Invalid(
                    "site_labels must have one entry per sample".into(),
                ));
            }
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            sensitive_attr,
            site_labels,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// `(c, s...)` shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Gather a subset by sample indices. Shards inherit `num_classes` even
    /// when some classes are absent locally.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        let mut inputs = ArrayD::<f64>::zeros(IxDyn(&shape));
        for (row, &i) in idx.iter().enumerate() {
            inputs
                .index_axis_mut(Axis(0), row)
                .assign(&self.inputs.index_axis(Axis(0), i));
        }
        Self {
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            sensitive_attr: self
                .sensitive_attr
                .as_ref()
                .map(|a| idx.iter().map(|&i| a[i]).collect()),
            site_labels: self
                .site_labels
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i]).collect()),
        }
    }

    /// Concatenate shards with identical sample shapes and class counts.
    pub fn concat(parts: &[&Self]) -> Result<Self, DataError> {
        if parts.is_empty() {
            return Err(DataError::Invalid("nothing to concatenate".into()));
        }
        let shape = parts[0].sample_shape().to_vec();
        let num_classes = parts[0].num_classes;
        if parts
            .iter()
            .any(|p| p.sample_shape() != shape || p.num_classes != num_classes)
        {
            return Err(DataError::Invalid(
                "shards disagree on sample shape or class count".into(),
            ));
        }
        let total: usize = parts.iter().map(|p| p.n()).sum();
        let mut full = vec![total];
        full.extend_from_slice(&shape);
        let mut inputs = ArrayD::<f64>::zeros(IxDyn(&full));
        let mut labels = Vec::with_capacity(total);
        let has_attr = parts.iter().all(|p| p.sensitive_attr.is_some());
        let has_site = parts.iter().all(|p| p.site_labels.is_some());
        let mut attr = Vec::new();
        let mut site = Vec::new();
        let mut row = 0;
        for p in parts {
            for i in 0..p.n() {
                inputs
                    .index_axis_mut(Axis(0), row)
                    .assign(&p.inputs.index_axis(Axis(0), i));
                row += 1;
            }
            labels.extend_from_slice(&p.labels);
            if has_attr {
                attr.extend_from_slice(p.sensitive_attr.as_ref().unwrap());
            }
            if has_site {
                site.extend_from_slice(p.site_labels.as_ref().unwrap());
            }
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            sensitive_attr: has_attr.then_some(attr),
            site_labels: has_site.then_some(site),
        })
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMethod {
    Dirichlet,
    Stratified,
    Iid,
}

/// Assignment of every sample to exactly one client.
#[derive(Clone, Debug)]
pub struct PartitionPlan {
    pub assignment: Vec<usize>,
    pub n_clients: usize,
    pub method: PartitionMethod,
}

impl PartitionPlan {
    fn validate(&self) -> Result<(), DataError> {
        let mut counts = vec![0usize; self.n_clients];
        for &c in &self.assignment {
            if c >= self.n_clients {
                return Err(DataError::Invalid(format!(
                    "assignment to client {c} out of range"
                )));
            }
            counts[c] += 1;
        }
        if let Some(client) = counts.iter().position(|&c| c == 0) {
            return Err(DataError::EmptyClient { client, retries: 0 });
        }
        Ok(())
    }

    pub fn client_indices(&self, client: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == client).then_some(i))
            .collect()
    }

    pub fn client_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_clients];
        for &c in &self.assignment {
            counts[c] += 1;
        }
        counts
    }

    pub fn shards(&self, ds: &LabeledDataset) -> Vec<LabeledDataset> {
        (0..self.n_clients)
            .map(|c| ds.subset(&self.client_indices(c)))
            .collect()
    }
}

/// Largest-remainder rounding of proportions to integer counts summing to
/// `total`. Ties go to the lower index.
pub fn largest_remainder_counts(props: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = props[a] * total as f64 - (props[a] * total as f64).floor();
        let fb = props[b] * total as f64 - (props[b] * total as f64).floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for k in 0..total.saturating_sub(assigned) {
        counts[order[k % props.len()]] += 1;
    }
    counts
}

/// Assign samples given explicit per-class client proportions (the
/// deterministic core of the Dirichlet partition, also usable as a test
/// hook). `proportions[c]` must have one entry per client.
pub fn partition_with_proportions(
    ds: &LabeledDataset,
    n_clients: usize,
    proportions: &[Vec<f64>],
    rng: &mut SeededRng,
) -> Result<PartitionPlan, DataError> {
    if proportions.len() != ds.num_classes {
        return Err(DataError::Invalid(format!(
            "need proportions for {} classes, got {}",
            ds.num_classes,
            proportions.len()
        )));
    }
    let mut assignment = vec![usize::MAX; ds.n()];
    for (class, props) in proportions.iter().enumerate() {
        if props.len() != n_clients {
            return Err(DataError::Invalid(
                "proportion vector length must equal n_clients".into(),
            ));
        }
        let mut members: Vec<usize> = ds
            .labels
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| (y == class).then_some(i))
            .collect();
        rng.shuffle(&mut members);
        let counts = largest_remainder_counts(props, members.len());
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            for &sample in &members[cursor..cursor + count] {
                assignment[sample] = client;
            }
            cursor += count;
        }
    }
    let plan = PartitionPlan {
        assignment,
        n_clients,
        method: PartitionMethod::Dirichlet,
    };
    plan.validate()?;
    Ok(plan)
}

/// Options for the Dirichlet partition beyond the concentration parameter.
#[derive(Clone, Copy, Debug)]
pub struct DirichletOptions {
    /// Redraw budget when a constraint fails.
    pub max_redraws: usize,
    /// Additionally require at least this many samples of every class on
    /// every client (0 reproduces the plain empty-client rule).
    pub min_per_class: usize,
}

impl Default for DirichletOptions {
    fn default() -> Self {
        Self {
            max_redraws: 100,
            min_per_class: 0,
        }
    }
}

/// Label-skew partition: per class, client proportions are drawn from a
/// symmetric Dirichlet(alpha) and rounded with the largest-remainder rule.
/// Redraws (up to `max_redraws`) when a client ends up empty.
pub fn dirichlet_partition(
    ds: &LabeledDataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan, DataError> {
    dirichlet_partition_opts(ds, n_clients, alpha, seed, DirichletOptions::default())
}

pub fn dirichlet_partition_opts(
    ds: &LabeledDataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
    opts: DirichletOptions,
) -> Result<PartitionPlan, DataError> {
    if n_clients == 0 {
        return Err(DataError::Invalid("n_clients must be >= 1".into()));
    }
    if alpha <= 0.0 {
        return Err(DataError::Invalid("alpha must be positive".into()));
    }
    for (class, count) in ds.class_counts().iter().enumerate() {
        if *count < n_clients {
            return Err(DataError::Invalid(format!(
                "class {class} has {count} samples, fewer than {n_clients} clients"
            )));
        }
    }
    for attempt in 0..opts.max_redraws {
        let mut rng = SeededRng::for_lane(seed, "dirichlet", attempt as u64);
        let proportions: Vec<Vec<f64>> = (0..ds.num_classes)
            .map(|_| rng.dirichlet(alpha, n_clients))
            .collect();
        match partition_with_proportions(ds, n_clients, &proportions, &mut rng) {
            Ok(plan) => {
                if opts.min_per_class > 0 {
                    let ok = (0..n_clients).all(|c| {
                        let shard_labels: Vec<usize> = plan
                            .client_indices(c)
                            .iter()
                            .map(|&i| ds.labels[i])
                            .collect();
                        (0..ds.num_classes).all(|class| {
                            shard_labels.iter().filter(|&&y| y == class).count()
                                >= opts.min_per_class
                        })
                    });
                    if !ok {
                        continue;
                    }
                }
                return Ok(plan);
            }
            Err(DataError::EmptyClient { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(DataError::EmptyClient {
        client: 0,
        retries: opts.max_redraws,
    })
}

/// Site-stratified partition: each sample follows its site's client per the
/// grouping map.
pub fn stratified_partition(
    ds: &LabeledDataset,
    grouping: &BTreeMap<usize, usize>,
) -> Result<PartitionPlan, DataError> {
    let sites = ds
        .site_labels
        .as_ref()
        .ok_or_else(|| DataError::Invalid("dataset has no site labels".into()))?;
    let n_clients = grouping
        .values()
        .max()
        .map(|m| m + 1)
        .ok_or_else(|| DataError::Invalid("empty site grouping".into()))?;
    let mut assignment = Vec::with_capacity(ds.n());
    for &site in sites {
        let client = grouping.get(&site).ok_or(DataError::UnknownSite(site))?;
        assignment.push(*client);
    }
    let plan = PartitionPlan {
        assignment,
        n_clients,
        method: PartitionMethod::Stratified,
    };
    plan.validate()?;
    Ok(plan)
}

/// Uniform shuffle-and-deal partition.
pub fn iid_partition(
    ds: &LabeledDataset,
    n_clients: usize,
    seed: u64,
) -> Result<PartitionPlan, DataError> {
    if n_clients == 0 || ds.n() < n_clients {
        return Err(DataError::Invalid(format!(
            "cannot split {} samples into {n_clients} non-empty clients",
            ds.n()
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut order: Vec<usize> = (0..ds.n()).collect();
    rng.shuffle(&mut order);
    let mut assignment = vec![0usize; ds.n()];
    for (pos, &sample) in order.iter().enumerate() {
        assignment[sample] = pos % n_clients;
    }
    let plan = PartitionPlan {
        assignment,
        n_clients,
        method: PartitionMethod::Iid,
    };
    plan.validate()?;
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

/// Amplitudes of the synthetic construction; the defaults give an easily
/// separable task, smaller `class_amp` makes it harder.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticParams {
    /// Peak amplitude of the class-specific spatial pattern.
    pub class_amp: f64,
    /// Peak amplitude of the attribute-correlated nuisance pattern.
    pub attr_amp: f64,
    /// Pixel noise standard deviation.
    pub noise_std: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            class_amp: 1.6,
            attr_amp: 0.8,
            noise_std: 1.0,
        }
    }
}

/// Gaussian bump centered at `center` (normalized coordinates), peak 1.
fn bump(pos: &[usize], spatial: &[usize], center: &[f64], sigma: f64) -> f64 {
    let mut d2 = 0.0;
    for a in 0..spatial.len() {
        let x = (pos[a] as f64 + 0.5) / spatial[a] as f64;
        d2 += (x - center[a]) * (x - center[a]);
    }
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Class pattern center: on a circle of radius 0.25 around the image center
/// in the first two spatial dims (angle set by the class), centered in depth.
fn class_center(class: usize, classes: usize, d: usize) -> Vec<f64> {
    let theta = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
    let mut c = vec![0.5 + 0.25 * theta.cos(), 0.5 + 0.25 * theta.sin()];
    if d == 3 {
        c.push(0.5);
    }
    c
}

/// Class-conditional Gaussian-textured pool with the default amplitudes.
pub fn generate_class_pool(
    classes: usize,
    n_samples: usize,
    shape: &[usize],
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    generate_class_pool_with(classes, n_samples, shape, SyntheticParams::default(), seed)
}

/// Class-conditional Gaussian-textured pool: every sample is iid pixel noise
/// plus a class-keyed spatial bump on all channels, plus an attribute-keyed
/// central bump. Labels cycle 0..classes; the binary attribute is balanced
/// within each class.
pub fn generate_class_pool_with(
    classes: usize,
    n_samples: usize,
    shape: &[usize],
    params: SyntheticParams,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if classes < 2 {
        return Err(DataError::Invalid("need at least 2 classes".into()));
    }
    if n_samples < 2 * classes {
        return Err(DataError::Invalid(
            "need at least two samples per class".into(),
        ));
    }
    let d = shape.len() - 1;
    if !(2..=3).contains(&d) {
        return Err(DataError::Invalid(format!(
            "sample shape must be (c, s...) with 2 or 3 spatial dims, got {shape:?}"
        )));
    }
    let spatial = &shape[1..];
    let mut rng = SeededRng::new(seed);
    let mut full = vec![n_samples];
    full.extend_from_slice(shape);
    let mut inputs = ArrayD::<f64>::zeros(IxDyn(&full));
    let mut labels = Vec::with_capacity(n_samples);
    let mut attrs = Vec::with_capacity(n_samples);
    let attr_center: Vec<f64> = vec![0.5; d];
    let sigma = 1.0 / 6.0;
    for i in 0..n_samples {
        let y = i % classes;
        let a = ((i / classes) % 2) as u8;
        labels.push(y);
        attrs.push(a);
        let center = class_center(y, classes, d);
        let mut sample = inputs.index_axis_mut(Axis(0), i);
        for ch in 0..shape[0] {
            let mut lane = sample.index_axis_mut(Axis(0), ch);
            for (pos, v) in lane.indexed_iter_mut() {
                let p: Vec<usize> = (0..d).map(|ax| pos[ax]).collect();
                let mut val = params.noise_std * rng.normal();
                val += params.class_amp * bump(&p, spatial, &center, sigma);
                if a == 1 {
                    val += params.attr_amp * bump(&p, spatial, &attr_center, sigma);
                }
                *v = val;
            }
        }
    }
    LabeledDataset::new(inputs, labels, Some(attrs), None)
}

/// Client-specific intensity transform of the given magnitude, drawn from the
/// client's lane: a gamma-style contrast curve (sign-preserving power remap,
/// like differing sensor response), a linear gain field across the image, and
/// a constant offset. Magnitude 0 leaves the data bit-identical.
pub fn apply_feature_shift(
    ds: &mut LabeledDataset,
    client: usize,
    magnitude: f64,
    seed: u64,
) {
    if magnitude == 0.0 {
        return;
    }
    let mut rng = SeededRng::for_lane(seed, "shift", client as u64);
    let d = ds.sample_shape().len() - 1;
    let slopes: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let offset = rng.uniform_range(-1.0, 1.0);
    let exponent = (1.0 + magnitude * rng.uniform_range(-0.35, 0.35)).max(0.1);
    let spatial: Vec<usize> = ds.sample_shape()[1..].to_vec();
    for mut sample in ds.inputs.axis_iter_mut(Axis(0)) {
        for mut lane in sample.axis_iter_mut(Axis(0)) {
            for (pos, v) in lane.indexed_iter_mut() {
                let mut gain = 0.0;
                for ax in 0..d {
                    let x = (pos[ax] as f64 + 0.5) / spatial[ax] as f64;
                    gain += slopes[ax] * (x - 0.5);
                }
                let warped = v.signum() * v.abs().powf(exponent);
                *v = warped * (1.0 + magnitude * gain) + magnitude * offset;
            }
        }
    }
}

/// Desk-scale synthetic task: a shared class-signal pool, dealt iid to
/// clients, each applying its own feature shift.
pub fn make_synthetic_task(
    n_clients: usize,
    classes: usize,
    per_client_shift: f64,
    shape: &[usize],
    samples_per_client: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>, DataError> {
    let pool = generate_class_pool(
        classes,
        n_clients * samples_per_client,
        shape,
        lane_seed(seed, "synth-pool", 0),
    )?;
    let plan = iid_partition(&pool, n_clients, lane_seed(seed, "synth-iid", 0))?;
    let mut shards = plan.shards(&pool);
    for (i, shard) in shards.iter_mut().enumerate() {
        apply_feature_shift(shard, i, per_client_shift, seed);
    }
    Ok(shards)
}

/// Rectangular grid region masks over a spatial shape.
pub fn make_grid_region_masks(
    spatial: &[usize],
    grid: &[usize],
) -> Result<RegionMaskSet, crate::skd::SkdError> {
    RegionMaskSet::grid(spatial, grid)
}

// ---------------------------------------------------------------------------
// Train/test splitting
// ---------------------------------------------------------------------------

/// Per-class round-robin fold assignment after a seeded shuffle, so folds are
/// label-stratified with sizes differing by at most one per class.
pub fn stratified_fold_assignment(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    assert!(folds >= 2, "need at least 2 folds");
    let num_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut rng = SeededRng::new(seed);
    let mut assignment = vec![0usize; labels.len()];
    for class in 0..num_classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| (y == class).then_some(i))
            .collect();
        rng.shuffle(&mut members);
        for (pos, &i) in members.iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    assignment
}

/// Split a shard into train/test by holding out one fold (fold 0 of 5 gives
/// the default stratified 80/20 split).
pub fn split_train_test(
    ds: &LabeledDataset,
    folds: usize,
    fold: usize,
    seed: u64,
) -> (LabeledDataset, LabeledDataset) {
    let assignment = stratified_fold_assignment(&ds.labels, folds, seed);
    let test_idx: Vec<usize> = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| (f == fold).then_some(i))
        .collect();
    let train_idx: Vec<usize> = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| (f != fold).then_some(i))
        .collect();
    (ds.subset(&train_idx), ds.subset(&test_idx))
}

// ---------------------------------------------------------------------------
// Manifest import
// ---------------------------------------------------------------------------

/// Read one sample tensor: u32 rank, u32 dims, f64 little-endian data.
fn read_array_file(path: &Path) -> Result<ArrayD<f64>, DataError> {
    let bytes = std::fs::read(path)
        .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    let take = |buf: &[u8], at: &mut usize, n: usize| -> Result<Vec<u8>, DataError> {
        if *at + n > buf.len() {
            return Err(DataError::Manifest(format!(
                "{}: truncated array file",
                path.display()
            )));
        }
        let out = buf[*at..*at + n].to_vec();
        *at += n;
        Ok(out)
    };
    let mut at = 0usize;
    let rank = u32::from_le_bytes(take(&bytes, &mut at, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(&bytes, &mut at, 4)?.try_into().unwrap()) as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f64::from_le_bytes(
            take(&bytes, &mut at, 8)?.try_into().unwrap(),
        ));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| DataError::Manifest(e.to_string()))
}

/// Write one sample tensor in the manifest array format.
pub fn write_array_file(path: &Path, a: &ArrayD<f64>) -> Result<(), DataError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
    for &d in a.shape() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in a.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| DataError::Manifest(e.to_string()))
}

/// Import a dataset from `dir/manifest.csv` with columns
/// `path,label,attr,site` (attr and site may be empty, all-or-none per
/// column). Paths are relative to `dir` and point at array files in the
/// format of [`write_array_file`].
pub fn load_manifest_dataset(dir: &Path) -> Result<LabeledDataset, DataError> {
    let manifest = dir.join("manifest.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&manifest)
        .map_err(|e| DataError::Manifest(format!("{}: {e}", manifest.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Manifest(e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(path_col), Some(label_col)) = (col("path"), col("label")) else {
        return Err(DataError::Manifest(
            "manifest must have `path` and `label` columns".into(),
        ));
    };
    let attr_col = col("attr");
    let site_col = col("site");

    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut attrs: Vec<u8> = Vec::new();
    let mut sites: Vec<usize> = Vec::new();
    let mut any_attr = false;
    let mut any_site = false;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Manifest(e.to_string()))?;
        let rel = record
            .get(path_col)
            .ok_or_else(|| DataError::Manifest(format!("row {line}: missing path")))?;
        samples.push(read_array_file(&dir.join(rel))?);
        let label: usize = record
            .get(label_col)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DataError::Manifest(format!("row {line}: bad label")))?;
        labels.push(label);
        if let Some(c) = attr_col {
            let raw = record.get(c).unwrap_or("");
            if !raw.is_empty() {
                any_attr = true;
                attrs.push(
                    raw.parse()
                        .map_err(|_| DataError::Manifest(format!("row {line}: bad attr")))?,
                );
            }
        }
        if let Some(c) = site_col {
            let raw = record.get(c).unwrap_or("");
            if !raw.is_empty() {
                any_site = true;
                sites.push(
                    raw.parse()
                        .map_err(|_| DataError::Manifest(format!("row {line}: bad site")))?,
                );
            }
        }
    }
    if samples.is_empty() {
        return Err(DataError::Manifest("empty manifest".into()));
    }
    if any_attr && attrs.len() != samples.len() {
        return Err(DataError::Manifest(
            "attr column must be filled for every row or none".into(),
        ));
    }
    if any_site && sites.len() != samples.len() {
        return Err(DataError::Manifest(
            "site column must be filled for every row or none".into(),
        ));
    }
    let shape = samples[0].shape().to_vec();
    if samples.iter().any(|s| s.shape() != shape) {
        return Err(DataError::Manifest("samples disagree on shape".into()));
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(&shape);
    let mut inputs = ArrayD::<f64>::zeros(IxDyn(&full));
    for (i, s) in samples.iter().enumerate() {
        inputs.index_axis_mut(Axis(0), i).assign(s);
    }
    LabeledDataset::new(
        inputs,
        labels,
        any_attr.then_some(attrs),
        any_site.then_some(sites),
    )
}
