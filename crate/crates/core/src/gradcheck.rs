//! Central finite-difference verification of analytic gradients.

use ndarray::ArrayD;

use crate::graph::{Graph, NodeId};

/// Default perturbation step for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error with an absolute floor: values below 1e-6 in magnitude are
/// compared absolutely so that near-zero gradients do not inflate the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    let m = a.abs().max(b.abs());
    if m < 1e-6 {
        d
    } else {
        d / m
    }
}

/// Maximum elementwise [`rel_err`] between two gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

/// Compare the analytic gradient of a graph-built scalar against central
/// finite differences, returning the maximum relative error over every
/// element of every input.
///
/// `build` must construct the same scalar from the given leaves each call.
pub fn numeric_grad_nodes<F>(inputs: &[ArrayD<f64>], build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    numeric_grad_nodes_eps(inputs, DEFAULT_EPS, build)
}

pub fn numeric_grad_nodes_eps<F>(inputs: &[ArrayD<f64>], eps: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let root = build(&mut g, &ids);
    g.backward(root);
    let analytic: Vec<ArrayD<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, x)| {
            g.grad(*id)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()))
        })
        .collect();

    let eval = |pts: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pts.iter().map(|a| g.leaf(a.clone(), false)).collect();
        let root = build(&mut g, &ids);
        g.scalar_value(root)
    };

    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].as_slice().expect("standard layout")[j];
            work[i].as_slice_mut().unwrap()[j] = orig + eps;
            let fp = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = orig - eps;
            let fm = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let ana = analytic[i].as_slice().expect("standard layout")[j];
            max_err = max_err.max(rel_err(ana, numeric));
        }
    }
    max_err
}
