//! Heterogeneous classifier families with tap-layer feature outputs and an
//! extractor/header decomposition.
//!
//! Two families are provided. `resnet10` is a stem conv plus four stages of
//! one basic residual block each (all stride 2, channels doubling per stage)
//! and a single linear header; it works on 2D and 3D inputs. `tinycnn` is a
//! three-stage conv-bn-relu net for fast desk-scale runs; tap ids 1..=4 map
//! onto stages `min(tap, 3)`.
//!
//! The "prediction header" is exactly the final linear classifier; batch-norm
//! layers belong to the feature extractor. While `head_frozen` is set the
//! header parameters are excluded from gradient binding and optimizer
//! updates, so they stay bit-identical across training steps.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::norm::BatchStats;
use crate::graph::{Graph, NodeId};
use crate::seeding::SeededRng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unsupported input shape: {0}")]
    UnsupportedShape(String),
    #[error("width underflow: base {base} - step {step} * {clients_minus_one} < 4")]
    WidthUnderflow {
        base: usize,
        step: usize,
        clients_minus_one: usize,
    },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameter schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Resnet10,
    TinyCnn,
}

impl ModelFamily {
    /// Minimum spatial extent so every stage still has at least one cell.
    fn min_spatial(self) -> usize {
        match self {
            Self::Resnet10 => 16,
            Self::TinyCnn => 8,
        }
    }

    /// Number of 2x downsamplings applied before the given tap is emitted.
    pub fn halvings_at_tap(self, tap: usize) -> usize {
        match self {
            Self::Resnet10 => tap + 1, // stem + stages 1..=tap
            Self::TinyCnn => tap.min(3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub base_width: usize,
    pub num_classes: usize,
    /// `(c_in, s1, ..., sd)` with d spatial dims in {2, 3}.
    pub input_shape: Vec<usize>,
    /// Strictly increasing subset of {1, 2, 3, 4}.
    pub tap_layers: Vec<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.base_width < 4 {
            return Err(ModelError::InvalidSpec(format!(
                "base_width {} < 4",
                self.base_width
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec("num_classes must be >= 2".into()));
        }
        if self.tap_layers.is_empty()
            || self.tap_layers.windows(2).any(|w| w[0] >= w[1])
            || self.tap_layers.iter().any(|&t| !(1..=4).contains(&t))
        {
            return Err(ModelError::InvalidSpec(format!(
                "tap_layers must be a strictly increasing subset of 1..=4, got {:?}",
                self.tap_layers
            )));
        }
        let d = self.input_shape.len().wrapping_sub(1);
        if !(2..=3).contains(&d) {
            return Err(ModelError::UnsupportedShape(format!(
                "input_shape must be (c, s1..sd) with 2 or 3 spatial dims, got {:?}",
                self.input_shape
            )));
        }
        if self.input_shape[0] == 0 {
            return Err(ModelError::UnsupportedShape("zero input channels".into()));
        }
        let min = self.family.min_spatial();
        if self.input_shape[1..].iter().any(|&s| s < min) {
            return Err(ModelError::UnsupportedShape(format!(
                "spatial dims {:?} below the family minimum {min}",
                &self.input_shape[1..]
            )));
        }
        Ok(())
    }

    pub fn spatial_dims(&self) -> usize {
        self.input_shape.len() - 1
    }

    /// Two specs are heterogeneous when family or width differ.
    pub fn is_heterogeneous_with(&self, other: &Self) -> bool {
        self.family != other.family || self.base_width != other.base_width
    }

    /// Documented tap-shape law: each downsampling is a ceil-halving, so tap
    /// `l` of resnet10 sits at `ceil(S / 2^(l+1))` per axis (exactly
    /// `S / 2^(l+1)` when S is divisible).
    pub fn tap_spatial(&self, tap: usize) -> Vec<usize> {
        let halvings = self.family.halvings_at_tap(tap);
        self.input_shape[1..]
            .iter()
            .map(|&s| {
                let mut v = s;
                for _ in 0..halvings {
                    v = v.div_ceil(2);
                }
                v
            })
            .collect()
    }
}

/// Fleet of specs whose widths shrink by `step` per client.
pub fn heterogeneous_fleet(
    n_clients: usize,
    base: &ModelSpec,
    step: usize,
) -> Result<Vec<ModelSpec>, ModelError> {
    if n_clients == 0 {
        return Err(ModelError::InvalidSpec("n_clients must be >= 1".into()));
    }
    let shrink = step * (n_clients - 1);
    if base.base_width < shrink + 4 {
        return Err(ModelError::WidthUnderflow {
            base: base.base_width,
            step,
            clients_minus_one: n_clients - 1,
        });
    }
    Ok((0..n_clients)
        .map(|i| ModelSpec {
            base_width: base.base_width - step * i,
            ..base.clone()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
}

impl ParamKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, Self::BnMean | Self::BnVar)
    }

    pub fn is_batch_norm(self) -> bool {
        matches!(
            self,
            Self::BnScale | Self::BnShift | Self::BnMean | Self::BnVar
        )
    }

    /// Stable one-byte code used in the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            Self::Weight => 0,
            Self::Bias => 1,
            Self::BnScale => 2,
            Self::BnShift => 3,
            Self::BnMean => 4,
            Self::BnVar => 5,
        }
    }

    pub fn from_code(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Weight,
            1 => Self::Bias,
            2 => Self::BnScale,
            3 => Self::BnShift,
            4 => Self::BnMean,
            5 => Self::BnVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelPart {
    Extractor,
    Head,
}

impl ModelPart {
    /// Stable one-byte code used in the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            Self::Extractor => 0,
            Self::Head => 1,
        }
    }

    pub fn from_code(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Extractor,
            1 => Self::Head,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub kind: ParamKind,
    pub part: ModelPart,
}

/// Ordered named-parameter collection. Order is the construction order and is
/// part of the schema.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>, kind: ParamKind, part: ModelPart) {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            kind,
            part,
        });
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// `(name, shape, kind, part)` tuples identifying the schema.
    pub fn schema(&self) -> Vec<(String, Vec<usize>, ParamKind, ModelPart)> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    e.value.shape().to_vec(),
                    e.kind,
                    e.part,
                )
            })
            .collect()
    }

    /// Trainable parameter count (buffers excluded).
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.kind.is_buffer())
            .map(|e| e.value.len())
            .sum()
    }
}

/// Whether parameters enter the graph as trainable leaves or constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamBind {
    Frozen,
    Trainable,
}

pub struct ForwardOutput {
    pub logits: NodeId,
    /// `(tap layer id, feature node)` in tap order.
    pub taps: Vec<(usize, NodeId)>,
    /// `(parameter entry index, leaf node)` for every bound parameter.
    pub bound: Vec<(usize, NodeId)>,
}

struct BufferUpdate {
    mean_idx: usize,
    var_idx: usize,
    stats: BatchStats,
}

#[derive(Clone, Debug)]
pub struct ModelInstance {
    spec: ModelSpec,
    params: ParamSet,
    head_frozen: bool,
}

/// Deterministic build: He-normal conv/linear weights drawn in construction
/// order from the given seed, zero biases, identity batch-norm.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelInstance, ModelError> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let d = spec.spatial_dims();
    let mut params = ParamSet::default();

    let conv = |params: &mut ParamSet, rng: &mut SeededRng, name: &str, cout: usize, cin: usize, k: usize| {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(k, d));
        let fan_in = (cin * k.pow(d as u32)) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&shape), |_| std * rng.normal());
        params.push(name, w, ParamKind::Weight, ModelPart::Extractor);
    };
    let bn = |params: &mut ParamSet, name: &str, c: usize| {
        params.push(
            format!("{name}.scale"),
            ArrayD::from_elem(IxDyn(&[c]), 1.0),
            ParamKind::BnScale,
            ModelPart::Extractor,
        );
        params.push(
            format!("{name}.shift"),
            ArrayD::zeros(IxDyn(&[c])),
            ParamKind::BnShift,
            ModelPart::Extractor,
        );
        params.push(
            format!("{name}.mean"),
            ArrayD::zeros(IxDyn(&[c])),
            ParamKind::BnMean,
            ModelPart::Extractor,
        );
        params.push(
            format!("{name}.var"),
            ArrayD::from_elem(IxDyn(&[c]), 1.0),
            ParamKind::BnVar,
            ModelPart::Extractor,
        );
    };

    let c_in = spec.input_shape[0];
    let w0 = spec.base_width;
    let head_in = match spec.family {
        ModelFamily::Resnet10 => {
            conv(&mut params, &mut rng, "stem.conv.weight", w0, c_in, 3);
            bn(&mut params, "stem.bn", w0);
            let mut cin = w0;
            for l in 1..=4usize {
                let cout = w0 << (l - 1);
                conv(
                    &mut params,
                    &mut rng,
                    &format!("layer{l}.conv1.weight"),
                    cout,
                    cin,
                    3,
                );
                bn(&mut params, &format!("layer{l}.bn1"), cout);
                conv(
                    &mut params,
                    &mut rng,
                    &format!("layer{l}.conv2.weight"),
                    cout,
                    cout,
                    3,
                );
                bn(&mut params, &format!("layer{l}.bn2"), cout);
                conv(
                    &mut params,
                    &mut rng,
                    &format!("layer{l}.down.conv.weight"),
                    cout,
                    cin,
                    1,
                );
                bn(&mut params, &format!("layer{l}.down.bn"), cout);
                cin = cout;
            }
            cin
        }
        ModelFamily::TinyCnn => {
            let mut cin = c_in;
            for s in 1..=3usize {
                let cout = w0 << (s - 1);
                conv(
                    &mut params,
                    &mut rng,
                    &format!("stage{s}.conv.weight"),
                    cout,
                    cin,
                    3,
                );
                bn(&mut params, &format!("stage{s}.bn"), cout);
                cin = cout;
            }
            cin
        }
    };

    let std = (2.0 / head_in as f64).sqrt();
    let fc = ArrayD::from_shape_fn(IxDyn(&[spec.num_classes, head_in]), |_| std * rng.normal());
    params.push("head.fc.weight", fc, ParamKind::Weight, ModelPart::Head);
    params.push(
        "head.fc.bias",
        ArrayD::zeros(IxDyn(&[spec.num_classes])),
        ParamKind::Bias,
        ModelPart::Head,
    );

    Ok(ModelInstance {
        spec: spec.clone(),
        params,
        head_frozen: false,
    })
}

/// Deep copy; mutating the clone never affects the original.
pub fn clone_model(m: &ModelInstance) -> ModelInstance {
    m.clone()
}

struct ForwardCtx<'a, 'g> {
    g: &'g mut Graph,
    params: &'a ParamSet,
    bind: ParamBind,
    head_frozen: bool,
    train: bool,
    bound: Vec<(usize, NodeId)>,
    updates: Vec<BufferUpdate>,
}

impl ForwardCtx<'_, '_> {
    fn bind(&mut self, name: &str) -> NodeId {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        let e = self.params.entry(idx);
        let requires = self.bind == ParamBind::Trainable
            && !e.kind.is_buffer()
            && !(e.part == ModelPart::Head && self.head_frozen);
        let node = self.g.leaf(e.value.clone(), requires);
        self.bound.push((idx, node));
        node
    }

    fn bn(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let scale = self.bind(&format!("{prefix}.scale"));
        let shift = self.bind(&format!("{prefix}.shift"));
        let mean_idx = self
            .params
            .index_of(&format!("{prefix}.mean"))
            .expect("bn mean buffer");
        let var_idx = self
            .params
            .index_of(&format!("{prefix}.var"))
            .expect("bn var buffer");
        if self.train {
            let (y, stats) = self.g.batch_norm_train(x, scale, shift, BN_EPS);
            self.updates.push(BufferUpdate {
                mean_idx,
                var_idx,
                stats,
            });
            y
        } else {
            let mean = crate::graph::node_vec1(self.params.entry(mean_idx).value.view());
            let var = crate::graph::node_vec1(self.params.entry(var_idx).value.view());
            self.g.batch_norm_eval(x, scale, shift, &mean, &var, BN_EPS)
        }
    }
}

impl ModelInstance {
    /// Reassemble an instance from checkpointed parts, validating the
    /// parameter schema against a fresh build of the same spec.
    pub fn from_parts(
        spec: ModelSpec,
        params: ParamSet,
        head_frozen: bool,
    ) -> Result<Self, ModelError> {
        let reference = build_model(&spec, 0)?;
        if reference.params.schema() != params.schema() {
            return Err(ModelError::SchemaMismatch(
                "checkpoint parameters do not match the spec's schema".into(),
            ));
        }
        Ok(Self {
            spec,
            params,
            head_frozen,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn head_frozen(&self) -> bool {
        self.head_frozen
    }

    pub fn set_head_frozen(&mut self, frozen: bool) {
        self.head_frozen = frozen;
    }

    pub(crate) fn param_value_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.params.entries[idx].value
    }

    /// True when the optimizer must not touch this entry.
    pub fn skip_update(&self, idx: usize) -> bool {
        let e = self.params.entry(idx);
        e.kind.is_buffer() || (e.part == ModelPart::Head && self.head_frozen)
    }

    /// Replace parameters with a schema-identical set.
    pub fn replace_params(&mut self, new: ParamSet) -> Result<(), ModelError> {
        if self.params.schema() != new.schema() {
            return Err(ModelError::SchemaMismatch(
                "replacement parameters do not match the model schema".into(),
            ));
        }
        self.params = new;
        Ok(())
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.trainable_len()
    }

    /// Snapshot of head parameter values (for freeze-invariance checks).
    pub fn head_values(&self) -> Vec<ArrayD<f64>> {
        self.params
            .iter()
            .filter(|e| e.part == ModelPart::Head)
            .map(|e| e.value.clone())
            .collect()
    }

    fn check_input(&self, x: &ArrayD<f64>) -> Result<(), ModelError> {
        let expect = &self.spec.input_shape;
        if x.ndim() != expect.len() + 1 || &x.shape()[1..] != expect.as_slice() {
            return Err(ModelError::UnsupportedShape(format!(
                "input shape {:?} does not match spec (b, {:?})",
                x.shape(),
                expect
            )));
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        x: &ArrayD<f64>,
        train: bool,
        bind: ParamBind,
    ) -> Result<(ForwardOutput, Vec<BufferUpdate>), ModelError> {
        self.check_input(x)?;
        let mut ctx = ForwardCtx {
            g,
            params: &self.params,
            bind,
            head_frozen: self.head_frozen,
            train,
            bound: Vec::new(),
            updates: Vec::new(),
        };
        let mut node = ctx.g.leaf(x.clone(), false);
        let mut taps = Vec::new();
        match self.spec.family {
            ModelFamily::Resnet10 => {
                let w = ctx.bind("stem.conv.weight");
                node = ctx.g.conv(node, w, 2, 1);
                node = ctx.bn("stem.bn", node);
                node = ctx.g.relu(node);
                for l in 1..=4usize {
                    let wd = ctx.bind(&format!("layer{l}.down.conv.weight"));
                    let mut sc = ctx.g.conv(node, wd, 2, 0);
                    sc = ctx.bn(&format!("layer{l}.down.bn"), sc);
                    let w1 = ctx.bind(&format!("layer{l}.conv1.weight"));
                    let mut m = ctx.g.conv(node, w1, 2, 1);
                    m = ctx.bn(&format!("layer{l}.bn1"), m);
                    m = ctx.g.relu(m);
                    let w2 = ctx.bind(&format!("layer{l}.conv2.weight"));
                    m = ctx.g.conv(m, w2, 1, 1);
                    m = ctx.bn(&format!("layer{l}.bn2"), m);
                    node = ctx.g.add(m, sc);
                    node = ctx.g.relu(node);
                    if self.spec.tap_layers.contains(&l) {
                        taps.push((l, node));
                    }
                }
            }
            ModelFamily::TinyCnn => {
                let mut stage_nodes = Vec::with_capacity(3);
                for s in 1..=3usize {
                    let w = ctx.bind(&format!("stage{s}.conv.weight"));
                    node = ctx.g.conv(node, w, 2, 1);
                    node = ctx.bn(&format!("stage{s}.bn"), node);
                    node = ctx.g.relu(node);
                    stage_nodes.push(node);
                }
                for &tap in &self.spec.tap_layers {
                    taps.push((tap, stage_nodes[tap.min(3) - 1]));
                }
            }
        }
        let pooled = ctx.g.global_avg_pool(node);
        let fw = ctx.bind("head.fc.weight");
        let fb = ctx.bind("head.fc.bias");
        let logits = ctx.g.linear(pooled, fw, Some(fb));
        let out = ForwardOutput {
            logits,
            taps,
            bound: ctx.bound,
        };
        Ok((out, ctx.updates))
    }

    /// Training-mode forward: batch-norm uses batch statistics and running
    /// buffers are updated with momentum [`BN_MOMENTUM`].
    pub fn forward_train(
        &mut self,
        g: &mut Graph,
        x: &ArrayD<f64>,
        bind: ParamBind,
    ) -> Result<ForwardOutput, ModelError> {
        let (out, updates) = self.forward_impl(g, x, true, bind)?;
        for u in updates {
            let mean = self.param_value_mut(u.mean_idx).as_slice_mut().unwrap();
            for (m, &b) in mean.iter_mut().zip(u.stats.mean.iter()) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            let var = self.param_value_mut(u.var_idx).as_slice_mut().unwrap();
            for (v, &b) in var.iter_mut().zip(u.stats.var.iter()) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
            }
        }
        Ok(out)
    }

    /// Inference-mode forward: running statistics, parameters as constants.
    pub fn forward_eval(&self, g: &mut Graph, x: &ArrayD<f64>) -> Result<ForwardOutput, ModelError> {
        let (out, _) = self.forward_impl(g, x, false, ParamBind::Frozen)?;
        Ok(out)
    }

    /// Convenience inference returning logits as a matrix.
    pub fn logits(&self, x: &ArrayD<f64>) -> Result<Array2<f64>, ModelError> {
        let mut g = Graph::new();
        let out = self.forward_eval(&mut g, x)?;
        Ok(crate::graph::to_array2(g.value(out.logits)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Adam;

    fn spec2d() -> ModelSpec {
        ModelSpec {
            family: ModelFamily::Resnet10,
            base_width: 8,
            num_classes: 2,
            input_shape: vec![1, 32, 32],
            tap_layers: vec![1, 2, 3, 4],
        }
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            family: ModelFamily::TinyCnn,
            base_width: 8,
            num_classes: 2,
            input_shape: vec![1, 16, 16],
            tap_layers: vec![1, 2, 3],
        }
    }

    fn batch(spec: &ModelSpec, b: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = SeededRng::new(seed);
        let mut shape = vec![b];
        shape.extend_from_slice(&spec.input_shape);
        ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.normal())
    }

    #[test]
    fn build_is_deterministic() {
        let spec = tiny_spec();
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        for (ea, eb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.value, eb.value);
        }
        let c = build_model(&spec, 8).unwrap();
        let differs = a
            .params()
            .iter()
            .zip(c.params().iter())
            .any(|(x, y)| x.value != y.value);
        assert!(differs, "different seeds must give different weights");
    }

    #[test]
    fn resnet10_tap_shapes_follow_halving_law() {
        let spec = spec2d();
        let mut m = build_model(&spec, 1).unwrap();
        let x = batch(&spec, 2, 11);
        let mut g = Graph::new();
        let out = m.forward_train(&mut g, &x, ParamBind::Frozen).unwrap();
        assert_eq!(out.taps.len(), 4);
        assert_eq!(g.shape(out.logits), &[2, 2]);
        for (l, node) in &out.taps {
            let shape = g.shape(*node);
            let expect = spec.tap_spatial(*l);
            assert_eq!(&shape[2..], expect.as_slice(), "tap {l}");
            // 32 is divisible by 2^5, so the law is exact: S / 2^(l+1)
            assert_eq!(shape[2], 32 >> (l + 1), "tap {l} exact law");
            assert_eq!(shape[1], spec.base_width << (l - 1), "tap {l} channels");
        }
    }

    #[test]
    fn resnet10_volumetric_input_works() {
        let spec = ModelSpec {
            family: ModelFamily::Resnet10,
            base_width: 4,
            num_classes: 2,
            input_shape: vec![2, 16, 16, 16],
            tap_layers: vec![1, 2, 3, 4],
        };
        let m = build_model(&spec, 3).unwrap();
        let x = batch(&spec, 1, 5);
        let mut g = Graph::new();
        let out = m.forward_eval(&mut g, &x).unwrap();
        assert_eq!(g.shape(out.logits), &[1, 2]);
        assert_eq!(out.taps.len(), 4);
        for (l, node) in &out.taps {
            assert_eq!(&g.shape(*node)[2..], spec.tap_spatial(*l).as_slice());
        }
    }

    #[test]
    fn tinycnn_single_tap() {
        let spec = ModelSpec {
            tap_layers: vec![4],
            base_width: 16,
            ..tiny_spec()
        };
        let m = build_model(&spec, 2).unwrap();
        let x = batch(&spec, 3, 9);
        let mut g = Graph::new();
        let out = m.forward_eval(&mut g, &x).unwrap();
        assert_eq!(out.taps.len(), 1);
        assert_eq!(out.taps[0].0, 4);
        // tap 4 maps onto stage 3
        assert_eq!(g.shape(out.taps[0].1)[1], 64);
    }

    #[test]
    fn heterogeneous_fleet_widths() {
        let base = ModelSpec {
            base_width: 64,
            ..spec2d()
        };
        let fleet = heterogeneous_fleet(3, &base, 2).unwrap();
        let widths: Vec<usize> = fleet.iter().map(|s| s.base_width).collect();
        assert_eq!(widths, vec![64, 62, 60]);

        let homo = heterogeneous_fleet(3, &base, 0).unwrap();
        assert!(homo.iter().all(|s| s.base_width == 64));

        let small = ModelSpec {
            base_width: 16,
            ..spec2d()
        };
        let fleet = heterogeneous_fleet(3, &small, 2).unwrap();
        assert_eq!(
            fleet.iter().map(|s| s.base_width).collect::<Vec<_>>(),
            vec![16, 14, 12]
        );

        let err = heterogeneous_fleet(8, &small, 2).unwrap_err();
        assert!(matches!(err, ModelError::WidthUnderflow { .. }));
    }

    #[test]
    fn width_monotonicity_in_parameter_count() {
        let base = ModelSpec {
            base_width: 16,
            ..tiny_spec()
        };
        let fleet = heterogeneous_fleet(3, &base, 2).unwrap();
        let counts: Vec<usize> = fleet
            .iter()
            .map(|s| build_model(s, 0).unwrap().trainable_param_count())
            .collect();
        assert!(counts[0] > counts[1] && counts[1] > counts[2], "{counts:?}");
    }

    #[test]
    fn unsupported_shape_is_rejected() {
        let spec = ModelSpec {
            input_shape: vec![1, 8, 8],
            ..spec2d()
        };
        assert!(matches!(
            build_model(&spec, 0),
            Err(ModelError::UnsupportedShape(_))
        ));
    }

    #[test]
    fn clone_is_independent_and_keeps_freeze_flag() {
        let spec = tiny_spec();
        let mut m = build_model(&spec, 4).unwrap();
        m.set_head_frozen(true);
        let c = clone_model(&m);
        assert!(c.head_frozen());
        for (a, b) in m.params().iter().zip(c.params().iter()) {
            assert_eq!(a.value, b.value);
        }
        // mutate the original; the clone must not move
        let before = c.params().entry(0).value.clone();
        m.param_value_mut(0).mapv_inplace(|v| v + 1.0);
        assert_eq!(c.params().entry(0).value, before);
    }

    fn train_steps(m: &mut ModelInstance, opt: &mut Adam, spec: &ModelSpec, steps: usize) {
        let x = batch(spec, 4, 77);
        let labels = vec![0usize, 1, 0, 1];
        for _ in 0..steps {
            let mut g = Graph::new();
            let out = m.forward_train(&mut g, &x, ParamBind::Trainable).unwrap();
            let loss = g.cross_entropy_mean(out.logits, &labels);
            g.backward(loss);
            let grads: Vec<(usize, ArrayD<f64>)> = out
                .bound
                .iter()
                .filter_map(|(idx, node)| g.grad(*node).map(|gr| (*idx, gr.clone())))
                .collect();
            opt.step(m, &grads);
        }
    }

    #[test]
    fn frozen_head_is_bit_identical_after_training() {
        let spec = tiny_spec();
        let mut m = build_model(&spec, 6).unwrap();
        m.set_head_frozen(true);
        let head_before = m.head_values();
        let mut opt = Adam::new(1e-2);
        train_steps(&mut m, &mut opt, &spec, 3);
        assert_eq!(m.head_values(), head_before, "frozen head must not move");

        // extractor must have moved
        let fresh = build_model(&spec, 6).unwrap();
        let moved = m
            .params()
            .iter()
            .zip(fresh.params().iter())
            .any(|(a, b)| a.part == ModelPart::Extractor && a.value != b.value);
        assert!(moved, "extractor should train while head is frozen");

        // unfreeze and train: the head moves now
        m.set_head_frozen(false);
        train_steps(&mut m, &mut opt, &spec, 3);
        assert_ne!(m.head_values(), head_before, "unfrozen head must train");
    }

    #[test]
    fn freeze_is_idempotent() {
        let spec = tiny_spec();
        let mut m = build_model(&spec, 6).unwrap();
        m.set_head_frozen(true);
        m.set_head_frozen(true);
        assert!(m.head_frozen());
        let head_before = m.head_values();
        let mut opt = Adam::new(1e-2);
        train_steps(&mut m, &mut opt, &spec, 2);
        assert_eq!(m.head_values(), head_before);
    }

    #[test]
    fn eval_forward_is_deterministic_and_stats_free() {
        let spec = tiny_spec();
        let m = build_model(&spec, 10).unwrap();
        let x = batch(&spec, 2, 12);
        let a = m.logits(&x).unwrap();
        let b = m.logits(&x).unwrap();
        assert_eq!(a, b);
    }
}
