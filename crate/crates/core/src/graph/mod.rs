//! Reverse-mode autodiff over dynamic-dimension f64 tensors.
//!
//! A [`Graph`] is a per-step arena: nodes are appended in topological order as
//! the forward pass runs, so the backward sweep is a single reverse walk. Leaf
//! nodes hold inputs or parameters; every other node records its parents and a
//! closure producing parent gradients from the output gradient. Nodes whose
//! parents all have `requires_grad == false` store no backward op at all.
//!
//! Graphs are cheap and short-lived: build one per training step, call
//! [`Graph::backward`] on the scalar loss, read gradients, drop it.

pub mod conv;
pub mod norm;
pub mod shape;
pub mod sim;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

pub(crate) struct BackArgs<'a> {
    pub values: &'a [ArrayD<f64>],
    pub parents: &'a [NodeId],
    /// Whether each parent actually needs its gradient; entries returned for
    /// parents with `needs == false` are ignored and may be empty arrays.
    pub needs: &'a [bool],
}

impl BackArgs<'_> {
    pub(crate) fn parent(&self, i: usize) -> &ArrayD<f64> {
        &self.values[self.parents[i].0]
    }
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &BackArgs<'_>) -> Vec<ArrayD<f64>>>;

struct OpRecord {
    parents: Vec<NodeId>,
    backward: BackwardFn,
}

#[derive(Default)]
pub struct Graph {
    values: Vec<ArrayD<f64>>,
    requires: Vec<bool>,
    ops: Vec<Option<OpRecord>>,
    grads: Vec<Option<ArrayD<f64>>>,
}

pub(crate) fn empty_grad() -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(&[0]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Add a leaf node. Parameters use `requires_grad = true`, data inputs
    /// `false`.
    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> NodeId {
        self.values.push(value);
        self.requires.push(requires_grad);
        self.ops.push(None);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.leaf(value, false)
    }

    /// 0-dimensional constant.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id.0].shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    /// Value of a scalar (single-element) node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.values[id.0];
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().expect("scalar node has one element")
    }

    /// Gradient of the last `backward` root w.r.t. this node, if it was
    /// reached by the sweep.
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<NodeId>,
        backward: BackwardFn,
    ) -> NodeId {
        let requires = parents.iter().any(|p| self.requires[p.0]);
        self.values.push(value);
        self.requires.push(requires);
        self.ops.push(if requires {
            Some(OpRecord { parents, backward })
        } else {
            None
        });
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    /// Reverse sweep from a scalar root. Gradients accumulate across all paths
    /// and are retrievable through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar node"
        );
        for g in &mut self.grads {
            *g = None;
        }
        let mut pending: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        pending[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            let Some(gout) = pending[id].take() else {
                continue;
            };
            if let Some(op) = &self.ops[id] {
                let needs: Vec<bool> = op.parents.iter().map(|p| self.requires[p.0]).collect();
                let args = BackArgs {
                    values: &self.values,
                    parents: &op.parents,
                    needs: &needs,
                };
                let pgrads = (op.backward)(&gout, &args);
                debug_assert_eq!(pgrads.len(), op.parents.len());
                for ((p, need), pg) in op.parents.iter().zip(&needs).zip(pgrads) {
                    if !need {
                        continue;
                    }
                    match &mut pending[p.0] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            self.grads[id] = Some(gout);
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.values[a.0] + &self.values[b.0];
        self.push(
            value,
            vec![a, b],
            Box::new(|g, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.values[a.0] - &self.values[b.0];
        self.push(
            value,
            vec![a, b],
            Box::new(|g, _| vec![g.clone(), g.mapv(|x| -x)]),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &self.values[a.0] * &self.values[b.0];
        self.push(
            value,
            vec![a, b],
            Box::new(|g, args| vec![g * args.parent(1), g * args.parent(0)]),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.values[a.0].mapv(|x| c * x);
        self.push(value, vec![a], Box::new(move |g, _| vec![g.mapv(|x| c * x)]))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(
            value,
            vec![a],
            Box::new(|g, args| {
                let x = args.parent(0);
                let mut gx = g.clone();
                gx.zip_mut_with(x, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                });
                vec![gx]
            }),
        )
    }

    /// Scalar combination `sum_i c_i * x_i` over scalar nodes.
    pub fn weighted_sum_scalars(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty());
        let total: f64 = terms
            .iter()
            .map(|(id, c)| c * self.scalar_value(*id))
            .sum();
        let coeffs: Vec<f64> = terms.iter().map(|(_, c)| *c).collect();
        let parents: Vec<NodeId> = terms.iter().map(|(id, _)| *id).collect();
        let shapes: Vec<Vec<usize>> = parents
            .iter()
            .map(|p| self.shape(*p).to_vec())
            .collect();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            parents,
            Box::new(move |g, _| {
                let gs = *g.iter().next().expect("scalar grad");
                coeffs
                    .iter()
                    .zip(&shapes)
                    .map(|(c, s)| ArrayD::from_elem(IxDyn(s), c * gs))
                    .collect()
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.values[a.0]);
        let bv = as2(&self.values[b.0]);
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dim mismatch");
        let value = av.dot(&bv).into_dyn();
        self.push(
            value,
            vec![a, b],
            Box::new(|g, args| {
                let g2 = as2(g);
                let av = as2(args.parent(0));
                let bv = as2(args.parent(1));
                let ga = if args.needs[0] {
                    g2.dot(&bv.t()).into_dyn()
                } else {
                    empty_grad()
                };
                let gb = if args.needs[1] {
                    av.t().dot(&g2).into_dyn()
                } else {
                    empty_grad()
                };
                vec![ga, gb]
            }),
        )
    }

    /// Fully-connected layer: `y = x · wᵀ + bias` with `x: (n, in)`,
    /// `w: (out, in)`, `bias: (out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> NodeId {
        let xv = as2(&self.values[x.0]);
        let wv = as2(&self.values[w.0]);
        assert_eq!(xv.ncols(), wv.ncols(), "linear: feature dim mismatch");
        let mut value = xv.dot(&wv.t());
        if let Some(b) = bias {
            let bv = as1(&self.values[b.0]);
            assert_eq!(bv.len(), wv.nrows(), "linear: bias dim mismatch");
            value += &bv.view().insert_axis(Axis(0));
        }
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.push(
            value.into_dyn(),
            parents,
            Box::new(move |g, args| {
                let g2 = as2(g);
                let xv = as2(args.parent(0));
                let wv = as2(args.parent(1));
                let gx = if args.needs[0] {
                    g2.dot(&wv).into_dyn()
                } else {
                    empty_grad()
                };
                let gw = if args.needs[1] {
                    g2.t().dot(&xv).into_dyn()
                } else {
                    empty_grad()
                };
                let mut out = vec![gx, gw];
                if has_bias {
                    out.push(g2.sum_axis(Axis(0)).into_dyn());
                }
                out
            }),
        )
    }

    /// Broadcast-add a per-channel bias `(c)` onto `x: (b, c, ...)` along
    /// axis 1.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        assert_eq!(self.shape(bias), [c], "channel bias dim mismatch");
        let mut value = self.values[x.0].clone();
        {
            let bv = as1(&self.values[bias.0]);
            for (ch, mut sub) in value.axis_iter_mut(Axis(1)).enumerate() {
                sub += bv[ch];
            }
        }
        self.push(
            value,
            vec![x, bias],
            Box::new(|g, args| {
                let gb = if args.needs[1] {
                    let c = g.shape()[1];
                    let mut acc = Array1::<f64>::zeros(c);
                    for (ch, sub) in g.axis_iter(Axis(1)).enumerate() {
                        acc[ch] = sub.sum();
                    }
                    acc.into_dyn()
                } else {
                    empty_grad()
                };
                vec![g.clone(), gb]
            }),
        )
    }

    // ---- reductions and losses ----

    /// Scalar `sum((a - b)^2)`, the squared Frobenius distance.
    pub fn frob_sq_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "frob_sq_diff: shape mismatch");
        let diff = &self.values[a.0] - &self.values[b.0];
        let value = diff.iter().map(|d| d * d).sum::<f64>();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            vec![a, b],
            Box::new(|g, args| {
                let gs = *g.iter().next().expect("scalar grad");
                let diff = args.parent(0) - args.parent(1);
                let ga = diff.mapv(|d| 2.0 * gs * d);
                let gb = ga.mapv(|x| -x);
                vec![ga, gb]
            }),
        )
    }

    /// Mean softmax cross-entropy over the batch. `logits: (n, k)`, one label
    /// index per row.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = as2(&self.values[logits.0]);
        let n = lv.nrows();
        let k = lv.ncols();
        assert_eq!(labels.len(), n, "cross_entropy: label count mismatch");
        assert!(labels.iter().all(|&y| y < k), "cross_entropy: label out of range");
        let mut probs = Array2::<f64>::zeros((n, k));
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                probs[(i, j)] = e;
                z += e;
            }
            for j in 0..k {
                probs[(i, j)] /= z;
            }
            loss += m + z.ln() - row[labels[i]];
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![logits],
            Box::new(move |g, _| {
                let gs = *g.iter().next().expect("scalar grad");
                let mut gl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gl[(i, y)] -= 1.0;
                }
                gl.mapv_inplace(|x| x * gs / labels.len() as f64);
                vec![gl.into_dyn()]
            }),
        )
    }

    /// Softmax probabilities computed outside the graph (inference helper).
    pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
        let mut out = logits.clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        out
    }
}

pub(crate) fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}

/// Copy a rank-2 dynamic array into a typed `Array2`.
pub fn to_array2(a: &ArrayD<f64>) -> Array2<f64> {
    as2(a).to_owned()
}

/// Copy a rank-1 dynamic view into a typed `Array1`.
pub fn node_vec1(a: ndarray::ArrayViewD<'_, f64>) -> Array1<f64> {
    a.into_dimensionality::<Ix1>()
        .expect("expected a rank-1 tensor")
        .to_owned()
}

pub(crate) fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected a rank-1 tensor")
}
