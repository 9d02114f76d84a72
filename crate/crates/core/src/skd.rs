//! Multi-dimensional similarity knowledge distillation.
//!
//! Three similarity granularities are supported, all sharing one kernel: take
//! a feature matrix `H`, form the Gram product `H · Hᵀ`, row-normalize it, and
//! scale by `sqrt(n)`:
//!
//! * batch-wise: `H ∈ R^(b × c·s)` — inter-sample similarity,
//! * pixel/voxel-wise: `H ∈ R^(s × b·c)` — spatial-unit similarity,
//! * region-wise: `H ∈ R^(r × b·c)` — region-mean similarity.
//!
//! A distillation loss between two models compares their similarity matrices
//! per tap layer with a squared Frobenius distance normalized by `n²` and
//! averaged over layers. Feature channel counts never need to agree; only the
//! pixel loss requires a spatial alignment, done by linearly resampling the
//! teacher-side features to the student-side spatial shape.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::shape::nearest_axis_indices;
use crate::graph::{Graph, NodeId};

/// Row norms of the Gram matrix below this are treated as exactly zero in
/// strict mode.
pub const ZERO_ROW_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SkdError {
    #[error("row {row} of the Gram matrix has norm below {eps:e} (dead feature vector)")]
    ZeroRow { row: usize, eps: f64 },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("target spatial rank {target} does not match feature spatial rank {actual}")]
    ShapeRank { target: usize, actual: usize },
    #[error("region {region} has no pixels {context}")]
    EmptyRegion { region: usize, context: String },
    #[error("region-wise loss requested but no region masks provided")]
    MissingMasks,
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),
    #[error("invalid region mask: {0}")]
    InvalidMask(String),
    #[error("mask file: {0}")]
    MaskIo(String),
}

/// Which model a feature map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelTag {
    Dam,
    Ktm,
}

/// A batch of activations from one tap layer: shape `(b, c, s1, ..., sd)` with
/// `d` in `{2, 3}`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub values: ArrayD<f64>,
    pub layer_id: usize,
    pub model_tag: ModelTag,
}

impl FeatureMap {
    pub fn new(values: ArrayD<f64>, layer_id: usize, model_tag: ModelTag) -> Result<Self, SkdError> {
        let rank = values.ndim();
        if !(4..=5).contains(&rank) {
            return Err(SkdError::InvalidFeatureMap(format!(
                "expected rank 4 or 5 (b, c, spatial...), got rank {rank}"
            )));
        }
        if values.shape()[0] == 0 {
            return Err(SkdError::InvalidFeatureMap("batch size must be >= 1".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(SkdError::NonFinite {
                context: "feature map",
            });
        }
        Ok(Self {
            values,
            layer_id,
            model_tag,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.values.shape()[2..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Batch,
    Pixel,
    Region,
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Batch => write!(f, "batch"),
            Self::Pixel => write!(f, "pixel"),
            Self::Region => write!(f, "region"),
        }
    }
}

/// A `sqrt(n)`-scaled row-normalized Gram matrix. Every row has Euclidean norm
/// `sqrt(n)`; the matrix need not be symmetric.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub kind: SimilarityKind,
    pub n: usize,
    pub layer_id: usize,
}

/// Numerical switches for the similarity kernel.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SkdSettings {
    /// Stabilizer added to row norms before division. 0 means strict mode:
    /// a zero Gram row raises [`SkdError::ZeroRow`] instead of being damped.
    pub row_eps: f64,
    /// Divide the pixel loss by `n * s_last` (the literal `h·w²` reading in
    /// 2D) instead of `n²`. Comparison switch only.
    pub pixel_norm_literal: bool,
}

impl Default for SkdSettings {
    fn default() -> Self {
        Self {
            row_eps: 0.0,
            pixel_norm_literal: false,
        }
    }
}

/// Enabled loss components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkdComponents {
    pub batch: bool,
    pub pixel: bool,
    pub region: bool,
}

impl SkdComponents {
    pub const ALL: Self = Self {
        batch: true,
        pixel: true,
        region: true,
    };
    pub const NONE: Self = Self {
        batch: false,
        pixel: false,
        region: false,
    };

    pub fn any(&self) -> bool {
        self.batch || self.pixel || self.region
    }
}

/// One named component, as it appears in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkdComponent {
    Batch,
    Pixel,
    Region,
}

impl From<&[SkdComponent]> for SkdComponents {
    fn from(list: &[SkdComponent]) -> Self {
        let mut s = Self::NONE;
        for c in list {
            match c {
                SkdComponent::Batch => s.batch = true,
                SkdComponent::Pixel => s.pixel = true,
                SkdComponent::Region => s.region = true,
            }
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Region masks
// ---------------------------------------------------------------------------

/// Integer region assignments over a spatial grid. Entry 0 means unassigned;
/// regions are numbered `1..=r` and every region must be non-empty.
#[derive(Clone, Debug)]
pub struct RegionMaskSet {
    assignments: ArrayD<i64>,
    r: usize,
}

impl RegionMaskSet {
    pub fn new(assignments: ArrayD<i64>, r: usize) -> Result<Self, SkdError> {
        if r == 0 {
            return Err(SkdError::InvalidMask("region count must be >= 1".into()));
        }
        let d = assignments.ndim();
        if !(2..=3).contains(&d) {
            return Err(SkdError::InvalidMask(format!(
                "mask must have 2 or 3 spatial dims, got {d}"
            )));
        }
        let mut counts = vec![0usize; r + 1];
        for &a in assignments.iter() {
            if a < 0 || a as usize > r {
                return Err(SkdError::InvalidMask(format!(
                    "assignment {a} outside 0..={r}"
                )));
            }
            counts[a as usize] += 1;
        }
        for k in 1..=r {
            if counts[k] == 0 {
                return Err(SkdError::EmptyRegion {
                    region: k,
                    context: "in mask definition".into(),
                });
            }
        }
        Ok(Self { assignments, r })
    }

    /// Rectangular tiling of `spatial` into `prod(grid)` regions.
    pub fn grid(spatial: &[usize], grid: &[usize]) -> Result<Self, SkdError> {
        if spatial.len() != grid.len() {
            return Err(SkdError::InvalidMask(format!(
                "grid rank {} != spatial rank {}",
                grid.len(),
                spatial.len()
            )));
        }
        if grid.iter().zip(spatial).any(|(&g, &s)| g == 0 || g > s) {
            return Err(SkdError::InvalidMask(
                "grid cells must be between 1 and the spatial extent".into(),
            ));
        }
        let r: usize = grid.iter().product();
        let assignments = ArrayD::from_shape_fn(IxDyn(spatial), |idx| {
            let mut cell = 0usize;
            for a in 0..spatial.len() {
                let c = (idx[a] * grid[a] / spatial[a]).min(grid[a] - 1);
                cell = cell * grid[a] + c;
            }
            (cell + 1) as i64
        });
        Self::new(assignments, r)
    }

    pub fn region_count(&self) -> usize {
        self.r
    }

    pub fn spatial_shape(&self) -> &[usize] {
        self.assignments.shape()
    }

    /// Nearest-neighbor resample to a new spatial shape (half-pixel centers,
    /// same convention as feature resampling). Fails with
    /// [`SkdError::EmptyRegion`] if a region disappears.
    pub fn resample_nearest(&self, target: &[usize]) -> Result<Self, SkdError> {
        let src = self.assignments.shape();
        if target.len() != src.len() {
            return Err(SkdError::ShapeRank {
                target: target.len(),
                actual: src.len(),
            });
        }
        if target == src {
            return Ok(self.clone());
        }
        let maps: Vec<Vec<usize>> = (0..src.len())
            .map(|a| nearest_axis_indices(src[a], target[a]))
            .collect();
        let resampled = ArrayD::from_shape_fn(IxDyn(target), |idx| {
            let mut s = Vec::with_capacity(src.len());
            for a in 0..src.len() {
                s.push(maps[a][idx[a]]);
            }
            self.assignments[IxDyn(&s)]
        });
        let mut counts = vec![0usize; self.r + 1];
        for &a in resampled.iter() {
            counts[a as usize] += 1;
        }
        for k in 1..=self.r {
            if counts[k] == 0 {
                return Err(SkdError::EmptyRegion {
                    region: k,
                    context: format!("after resampling to {target:?}"),
                });
            }
        }
        Ok(Self {
            assignments: resampled,
            r: self.r,
        })
    }

    /// Flat row-major spatial indices of each region's members.
    pub fn region_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.r];
        for (flat, &a) in self.assignments.iter().enumerate() {
            if a > 0 {
                out[a as usize - 1].push(flat);
            }
        }
        out
    }

    /// Write the plain-text mask format: a header line `d s1 ... sd r`
    /// followed by the row-major region ids (0 = unassigned).
    pub fn save_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let shape = self.assignments.shape();
        write!(w, "{}", shape.len())?;
        for s in shape {
            write!(w, " {s}")?;
        }
        writeln!(w, " {}", self.r)?;
        let per_line = shape[shape.len() - 1];
        for (i, v) in self.assignments.iter().enumerate() {
            if i > 0 {
                if i % per_line == 0 {
                    writeln!(w)?;
                } else {
                    write!(w, " ")?;
                }
            }
            write!(w, "{v}")?;
        }
        writeln!(w)
    }

    /// Read the plain-text mask format written by [`Self::save_text`].
    /// `#`-prefixed lines are comments.
    pub fn load_text<R: BufRead>(r: R) -> Result<Self, SkdError> {
        let mut tokens: Vec<i64> = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| SkdError::MaskIo(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            for tok in line.split_whitespace() {
                tokens.push(
                    tok.parse::<i64>()
                        .map_err(|_| SkdError::MaskIo(format!("bad integer `{tok}`")))?,
                );
            }
        }
        if tokens.is_empty() {
            return Err(SkdError::MaskIo("empty mask file".into()));
        }
        let d = tokens[0] as usize;
        if tokens.len() < 1 + d + 1 {
            return Err(SkdError::MaskIo("truncated header".into()));
        }
        let shape: Vec<usize> = tokens[1..1 + d].iter().map(|&v| v as usize).collect();
        let r = tokens[1 + d] as usize;
        let body = &tokens[2 + d..];
        let expect: usize = shape.iter().product();
        if body.len() != expect {
            return Err(SkdError::MaskIo(format!(
                "expected {expect} assignments, found {}",
                body.len()
            )));
        }
        let assignments = ArrayD::from_shape_vec(IxDyn(&shape), body.to_vec())
            .map_err(|e| SkdError::MaskIo(e.to_string()))?;
        Self::new(assignments, r)
    }

    pub fn load_text_file(path: &Path) -> Result<Self, SkdError> {
        let f = std::fs::File::open(path).map_err(|e| SkdError::MaskIo(e.to_string()))?;
        Self::load_text(std::io::BufReader::new(f))
    }
}

// ---------------------------------------------------------------------------
// Graph-level builders
// ---------------------------------------------------------------------------

fn check_node_finite(g: &Graph, id: NodeId, context: &'static str) -> Result<(), SkdError> {
    if g.value(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SkdError::NonFinite { context })
    }
}

/// Shared kernel on graph nodes: `sqrt(n) * rownorm(h · hᵀ)` with strict
/// zero-row detection when `row_eps == 0`.
pub fn gram_row_normalized_node(
    g: &mut Graph,
    h: NodeId,
    settings: &SkdSettings,
) -> Result<NodeId, SkdError> {
    check_node_finite(g, h, "similarity input")?;
    let gram = g.gram(h);
    if settings.row_eps == 0.0 {
        let gv = g.value(gram);
        let n = gv.shape()[0];
        let cols = gv.shape()[1];
        let data = gv.as_slice().expect("standard layout");
        for i in 0..n {
            let norm: f64 = data[i * cols..(i + 1) * cols]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm < ZERO_ROW_EPS {
                return Err(SkdError::ZeroRow {
                    row: i,
                    eps: ZERO_ROW_EPS,
                });
            }
        }
    }
    Ok(g.row_norm_scale(gram, settings.row_eps))
}

/// Batch-wise similarity node: reshape `(b, c, s...)` to `(b, c*s)` and apply
/// the shared kernel. Returns the node and `n = b`.
pub fn batch_similarity_node(
    g: &mut Graph,
    f: NodeId,
    settings: &SkdSettings,
) -> Result<(NodeId, usize), SkdError> {
    let shape = g.shape(f).to_vec();
    let b = shape[0];
    let flat: usize = shape[1..].iter().product();
    let h = g.reshape(f, &[b, flat]);
    Ok((gram_row_normalized_node(g, h, settings)?, b))
}

/// Pixel/voxel-wise similarity node. The feature map is linearly resampled to
/// `target_spatial` when shapes differ, then laid out as `(prod(target), b*c)`
/// and passed through the shared kernel. Returns the node and
/// `n = prod(target_spatial)`.
pub fn pixel_similarity_node(
    g: &mut Graph,
    f: NodeId,
    target_spatial: &[usize],
    settings: &SkdSettings,
) -> Result<(NodeId, usize), SkdError> {
    let shape = g.shape(f).to_vec();
    let d = shape.len() - 2;
    if target_spatial.len() != d {
        return Err(SkdError::ShapeRank {
            target: target_spatial.len(),
            actual: d,
        });
    }
    let f = g.resize_linear(f, target_spatial);
    let shape = g.shape(f).to_vec();
    let (b, c) = (shape[0], shape[1]);
    let n: usize = target_spatial.iter().product();
    // (b, c, s...) -> (s..., b, c) -> (prod(s), b*c), batch-major columns.
    let mut axes: Vec<usize> = (2..2 + d).collect();
    axes.push(0);
    axes.push(1);
    let p = g.permute(f, &axes);
    let h = g.reshape(p, &[n, b * c]);
    Ok((gram_row_normalized_node(g, h, settings)?, n))
}

/// Region pooling node: masks are resampled (nearest-neighbor) to the feature
/// map's spatial shape, then each region's mean activation is laid out as an
/// `(r, b*c)` matrix.
pub fn region_pool_node(
    g: &mut Graph,
    f: NodeId,
    masks: &RegionMaskSet,
) -> Result<(NodeId, usize), SkdError> {
    let shape = g.shape(f).to_vec();
    let spatial = &shape[2..];
    let local = masks.resample_nearest(spatial)?;
    let regions = Arc::new(local.region_indices());
    debug_assert!(regions.iter().all(|m| !m.is_empty()));
    let rows = g.region_pool_rows(f, regions);
    Ok((rows, masks.region_count()))
}

/// Region-wise similarity node: region pooling followed by the shared kernel.
pub fn region_similarity_node(
    g: &mut Graph,
    f: NodeId,
    masks: &RegionMaskSet,
    settings: &SkdSettings,
) -> Result<(NodeId, usize), SkdError> {
    let (rows, r) = region_pool_node(g, f, masks)?;
    Ok((gram_row_normalized_node(g, rows, settings)?, r))
}

/// Loss nodes for one training step, plus the per-component breakdown.
pub struct SkdLossNodes {
    pub total: NodeId,
    pub batch: Option<NodeId>,
    pub pixel: Option<NodeId>,
    pub region: Option<NodeId>,
}

impl SkdLossNodes {
    pub fn breakdown(&self, g: &Graph) -> SkdBreakdown {
        SkdBreakdown {
            total: g.scalar_value(self.total),
            batch: self.batch.map(|id| g.scalar_value(id)),
            pixel: self.pixel.map(|id| g.scalar_value(id)),
            region: self.region.map(|id| g.scalar_value(id)),
        }
    }
}

/// Values of the total loss and its enabled components.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, Default)]
pub struct SkdBreakdown {
    pub total: f64,
    pub batch: Option<f64>,
    pub pixel: Option<f64>,
    pub region: Option<f64>,
}

fn expect_same_layers(
    g: &Graph,
    dam: &[(usize, NodeId)],
    ktm: &[(usize, NodeId)],
) -> Result<(), SkdError> {
    if dam.is_empty() {
        return Err(SkdError::Mismatch("no tap layers provided".into()));
    }
    if dam.len() != ktm.len() {
        return Err(SkdError::Mismatch(format!(
            "{} tap layers on one side, {} on the other",
            dam.len(),
            ktm.len()
        )));
    }
    for ((la, a), (lb, b)) in dam.iter().zip(ktm) {
        if la != lb {
            return Err(SkdError::Mismatch(format!(
                "tap layer ids disagree: {la} vs {lb}"
            )));
        }
        let (sa, sb) = (g.shape(*a), g.shape(*b));
        if sa[0] != sb[0] {
            return Err(SkdError::Mismatch(format!(
                "batch size disagrees at layer {la}: {} vs {}",
                sa[0], sb[0]
            )));
        }
        if sa.len() != sb.len() {
            return Err(SkdError::Mismatch(format!(
                "spatial rank disagrees at layer {la}: {} vs {}",
                sa.len() - 2,
                sb.len() - 2
            )));
        }
    }
    Ok(())
}

/// Build the full multi-dimensional distillation loss between two models'
/// tap-layer features. `dam_taps` and `ktm_taps` pair `(layer_id, node)` and
/// must cover the same layers in the same order. Pixel similarities are
/// aligned to the DAM's spatial shape per layer.
pub fn total_skd_loss_nodes(
    g: &mut Graph,
    dam_taps: &[(usize, NodeId)],
    ktm_taps: &[(usize, NodeId)],
    masks: Option<&RegionMaskSet>,
    enabled: SkdComponents,
    settings: &SkdSettings,
) -> Result<SkdLossNodes, SkdError> {
    expect_same_layers(g, dam_taps, ktm_taps)?;
    if enabled.region && masks.is_none() {
        return Err(SkdError::MissingMasks);
    }
    let layers = dam_taps.len() as f64;
    let mut batch = None;
    let mut pixel = None;
    let mut region = None;

    if enabled.batch {
        let mut terms = Vec::with_capacity(dam_taps.len());
        for ((_, fd), (_, fk)) in dam_taps.iter().zip(ktm_taps) {
            let (sd, n) = batch_similarity_node(g, *fd, settings)?;
            let (sk, nk) = batch_similarity_node(g, *fk, settings)?;
            debug_assert_eq!(n, nk);
            let diff = g.frob_sq_diff(sd, sk);
            terms.push((diff, 1.0 / (layers * (n * n) as f64)));
        }
        batch = Some(g.weighted_sum_scalars(&terms));
    }
    if enabled.pixel {
        let mut terms = Vec::with_capacity(dam_taps.len());
        for ((_, fd), (_, fk)) in dam_taps.iter().zip(ktm_taps) {
            let target: Vec<usize> = g.shape(*fd)[2..].to_vec();
            let (sd, n) = pixel_similarity_node(g, *fd, &target, settings)?;
            let (sk, _) = pixel_similarity_node(g, *fk, &target, settings)?;
            let divisor = if settings.pixel_norm_literal {
                (n * target[target.len() - 1]) as f64
            } else {
                (n * n) as f64
            };
            let diff = g.frob_sq_diff(sd, sk);
            terms.push((diff, 1.0 / (layers * divisor)));
        }
        pixel = Some(g.weighted_sum_scalars(&terms));
    }
    if enabled.region {
        let masks = masks.expect("checked above");
        let mut terms = Vec::with_capacity(dam_taps.len());
        for ((_, fd), (_, fk)) in dam_taps.iter().zip(ktm_taps) {
            let (sd, r) = region_similarity_node(g, *fd, masks, settings)?;
            let (sk, _) = region_similarity_node(g, *fk, masks, settings)?;
            let diff = g.frob_sq_diff(sd, sk);
            terms.push((diff, 1.0 / (layers * (r * r) as f64)));
        }
        region = Some(g.weighted_sum_scalars(&terms));
    }

    let parts: Vec<(NodeId, f64)> = [batch, pixel, region]
        .iter()
        .flatten()
        .map(|id| (*id, 1.0))
        .collect();
    let total = if parts.is_empty() {
        g.scalar(0.0)
    } else {
        g.weighted_sum_scalars(&parts)
    };
    Ok(SkdLossNodes {
        total,
        batch,
        pixel,
        region,
    })
}

// ---------------------------------------------------------------------------
// Value-level operations (thin wrappers that run the graph forward)
// ---------------------------------------------------------------------------

fn check_matrix_finite(h: &Array2<f64>) -> Result<(), SkdError> {
    if h.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SkdError::NonFinite {
            context: "similarity input",
        })
    }
}

/// `sqrt(n) * rownorm(H · Hᵀ)` for an `n × m` feature matrix.
pub fn gram_row_normalized(
    h: &Array2<f64>,
    kind: SimilarityKind,
    layer_id: usize,
    settings: &SkdSettings,
) -> Result<SimilarityMatrix, SkdError> {
    check_matrix_finite(h)?;
    let n = h.nrows();
    let mut g = Graph::new();
    let hi = g.constant(h.clone().into_dyn());
    let out = gram_row_normalized_node(&mut g, hi, settings)?;
    let values = crate::graph::to_array2(g.value(out));
    Ok(SimilarityMatrix {
        values,
        kind,
        n,
        layer_id,
    })
}

/// Batch-wise similarity of a feature map.
pub fn batch_similarity(f: &FeatureMap, settings: &SkdSettings) -> Result<SimilarityMatrix, SkdError> {
    let mut g = Graph::new();
    let fi = g.constant(f.values.clone());
    let (node, n) = batch_similarity_node(&mut g, fi, settings)?;
    Ok(SimilarityMatrix {
        values: crate::graph::to_array2(g.value(node)),
        kind: SimilarityKind::Batch,
        n,
        layer_id: f.layer_id,
    })
}

/// Pixel/voxel-wise similarity, resampling to `target_spatial` when needed.
pub fn pixel_similarity(
    f: &FeatureMap,
    target_spatial: &[usize],
    settings: &SkdSettings,
) -> Result<SimilarityMatrix, SkdError> {
    let mut g = Graph::new();
    let fi = g.constant(f.values.clone());
    let (node, n) = pixel_similarity_node(&mut g, fi, target_spatial, settings)?;
    Ok(SimilarityMatrix {
        values: crate::graph::to_array2(g.value(node)),
        kind: SimilarityKind::Pixel,
        n,
        layer_id: f.layer_id,
    })
}

/// Region-mean feature rows `(r, b*c)` of a feature map under a mask set.
pub fn region_pool(f: &FeatureMap, masks: &RegionMaskSet) -> Result<Array2<f64>, SkdError> {
    let mut g = Graph::new();
    let fi = g.constant(f.values.clone());
    let (node, _) = region_pool_node(&mut g, fi, masks)?;
    Ok(crate::graph::to_array2(g.value(node)))
}

/// Region-wise similarity of a feature map under a mask set.
pub fn region_similarity(
    f: &FeatureMap,
    masks: &RegionMaskSet,
    settings: &SkdSettings,
) -> Result<SimilarityMatrix, SkdError> {
    let mut g = Graph::new();
    let fi = g.constant(f.values.clone());
    let (node, n) = region_similarity_node(&mut g, fi, masks, settings)?;
    Ok(SimilarityMatrix {
        values: crate::graph::to_array2(g.value(node)),
        kind: SimilarityKind::Region,
        n,
        layer_id: f.layer_id,
    })
}

/// One component's loss over matched per-layer similarity matrices:
/// `(1/L) * sum_l ||S_dam_l - S_ktm_l||_F^2 / n_l^2`.
pub fn skd_component_loss(
    dam: &[SimilarityMatrix],
    ktm: &[SimilarityMatrix],
) -> Result<f64, SkdError> {
    if dam.is_empty() || dam.len() != ktm.len() {
        return Err(SkdError::Mismatch(format!(
            "layer lists must be non-empty and equal length ({} vs {})",
            dam.len(),
            ktm.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in dam.iter().zip(ktm) {
        if a.kind != b.kind {
            return Err(SkdError::Mismatch(format!(
                "similarity kinds disagree: {} vs {}",
                a.kind, b.kind
            )));
        }
        if a.n != b.n || a.values.dim() != b.values.dim() {
            return Err(SkdError::Mismatch(format!(
                "similarity sizes disagree at layer {}: {} vs {}",
                a.layer_id, a.n, b.n
            )));
        }
        let frob: f64 = a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += frob / (a.n * a.n) as f64;
    }
    Ok(total / dam.len() as f64)
}

/// Full multi-dimensional distillation loss between two models' per-layer
/// feature maps, returning the total and the per-component breakdown.
pub fn skd_total_loss(
    dam: &[FeatureMap],
    ktm: &[FeatureMap],
    masks: Option<&RegionMaskSet>,
    enabled: SkdComponents,
    settings: &SkdSettings,
) -> Result<SkdBreakdown, SkdError> {
    let mut g = Graph::new();
    let dam_taps: Vec<(usize, NodeId)> = dam
        .iter()
        .map(|f| (f.layer_id, g.constant(f.values.clone())))
        .collect();
    let ktm_taps: Vec<(usize, NodeId)> = ktm
        .iter()
        .map(|f| (f.layer_id, g.constant(f.values.clone())))
        .collect();
    let nodes = total_skd_loss_nodes(&mut g, &dam_taps, &ktm_taps, masks, enabled, settings)?;
    Ok(nodes.breakdown(&g))
}
