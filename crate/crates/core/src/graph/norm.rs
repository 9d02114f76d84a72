//! Batch normalization in training (batch statistics) and inference
//! (running statistics) modes.

use ndarray::{Array1, ArrayD, Axis};

use super::{as1, empty_grad, Graph, NodeId};

/// Per-channel batch statistics produced by a training-mode forward pass.
/// Variance is the biased estimator (divide by the element count), both for
/// normalization and for running-buffer updates.
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl Graph {
    /// Training-mode batch norm over `x: (b, c, s...)`, normalizing each
    /// channel by its batch statistics. Returns the output node and the batch
    /// statistics so the caller can update running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, BatchStats) {
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let m = (xs.iter().product::<usize>() / c) as f64;

        let xv = self.value(x);
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let lane = xv.index_axis(Axis(1), ch);
            let mu = lane.sum() / m;
            mean[ch] = mu;
            var[ch] = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
        }
        let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());

        let mut xhat = xv.clone();
        for (ch, mut lane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let mu = mean[ch];
            let is = inv_std[ch];
            lane.mapv_inplace(|v| (v - mu) * is);
        }
        let gv = as1(&self.values[gamma.0]).to_owned();
        let bv = as1(&self.values[beta.0]).to_owned();
        let mut value = xhat.clone();
        for (ch, mut lane) in value.axis_iter_mut(Axis(1)).enumerate() {
            let ga = gv[ch];
            let be = bv[ch];
            lane.mapv_inplace(|v| ga * v + be);
        }

        let stats = BatchStats {
            mean,
            var: var.clone(),
        };
        let inv_std_b = inv_std.clone();
        let xhat_b = xhat;
        let id = self.push(
            value,
            vec![x, gamma, beta],
            Box::new(move |g, args| {
                let c = g.shape()[1];
                let m = (g.len() / c) as f64;
                let gamma_v = as1(args.parent(1));
                // Per-channel sums of g and g * xhat.
                let mut sum_g = Array1::<f64>::zeros(c);
                let mut sum_gx = Array1::<f64>::zeros(c);
                for ch in 0..c {
                    let glane = g.index_axis(Axis(1), ch);
                    let xlane = xhat_b.index_axis(Axis(1), ch);
                    sum_g[ch] = glane.sum();
                    sum_gx[ch] = glane
                        .iter()
                        .zip(xlane.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                let gx = if args.needs[0] {
                    let mut gx = g.clone();
                    for (ch, mut lane) in gx.axis_iter_mut(Axis(1)).enumerate() {
                        let coef = gamma_v[ch] * inv_std_b[ch];
                        let mg = sum_g[ch] / m;
                        let mgx = sum_gx[ch] / m;
                        let xlane = xhat_b.index_axis(Axis(1), ch);
                        ndarray::Zip::from(&mut lane).and(&xlane).for_each(
                            |gi, &xh| {
                                *gi = coef * (*gi - mg - xh * mgx);
                            },
                        );
                    }
                    gx
                } else {
                    empty_grad()
                };
                let ggamma = if args.needs[1] {
                    sum_gx.clone().into_dyn()
                } else {
                    empty_grad()
                };
                let gbeta = if args.needs[2] {
                    sum_g.clone().into_dyn()
                } else {
                    empty_grad()
                };
                vec![gx, ggamma, gbeta]
            }),
        );
        (id, stats)
    }

    /// Inference-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> NodeId {
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        assert_eq!(running_mean.len(), c);
        assert_eq!(running_var.len(), c);
        let inv_std: Array1<f64> = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mean = running_mean.clone();
        let gv = as1(&self.values[gamma.0]).to_owned();
        let bv = as1(&self.values[beta.0]).to_owned();

        let mut value = self.value(x).clone();
        let mut xhat = ArrayD::<f64>::zeros(value.raw_dim());
        for (ch, (mut lane, mut hn)) in value
            .axis_iter_mut(Axis(1))
            .zip(xhat.axis_iter_mut(Axis(1)))
            .enumerate()
        {
            let mu = mean[ch];
            let is = inv_std[ch];
            let ga = gv[ch];
            let be = bv[ch];
            ndarray::Zip::from(&mut lane).and(&mut hn).for_each(|v, h| {
                *h = (*v - mu) * is;
                *v = ga * *h + be;
            });
        }

        let inv_std_b = inv_std;
        let xhat_b = xhat;
        self.push(
            value,
            vec![x, gamma, beta],
            Box::new(move |g, args| {
                let c = g.shape()[1];
                let gamma_v = as1(args.parent(1));
                let gx = if args.needs[0] {
                    let mut gx = g.clone();
                    for (ch, mut lane) in gx.axis_iter_mut(Axis(1)).enumerate() {
                        let coef = gamma_v[ch] * inv_std_b[ch];
                        lane.mapv_inplace(|v| v * coef);
                    }
                    gx
                } else {
                    empty_grad()
                };
                let mut ggamma = Array1::<f64>::zeros(c);
                let mut gbeta = Array1::<f64>::zeros(c);
                for ch in 0..c {
                    let glane = g.index_axis(Axis(1), ch);
                    let xlane = xhat_b.index_axis(Axis(1), ch);
                    gbeta[ch] = glane.sum();
                    ggamma[ch] = glane
                        .iter()
                        .zip(xlane.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                vec![
                    gx,
                    if args.needs[1] {
                        ggamma.into_dyn()
                    } else {
                        empty_grad()
                    },
                    if args.needs[2] {
                        gbeta.into_dyn()
                    } else {
                        empty_grad()
                    },
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::numeric_grad_nodes;
    use crate::seeding::SeededRng;
    use ndarray::IxDyn;

    fn randn(rng: &mut SeededRng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.normal())
    }

    #[test]
    fn train_mode_output_is_normalized() {
        let mut rng = SeededRng::new(41);
        let x = randn(&mut rng, &[4, 3, 5, 5]);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let ga = g.constant(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let be = g.constant(ArrayD::from_elem(IxDyn(&[3]), 0.0));
        let (y, stats) = g.batch_norm_train(xi, ga, be, 1e-5);
        for ch in 0..3 {
            let lane = g.value(y).index_axis(Axis(1), ch);
            let m = lane.sum() / lane.len() as f64;
            let v = lane.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / lane.len() as f64;
            assert!(m.abs() < 1e-10, "ch {ch} mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "ch {ch} var {v}");
            assert!(stats.var[ch] > 0.0);
        }
    }

    #[test]
    fn train_mode_grads_match_finite_differences() {
        let mut rng = SeededRng::new(42);
        let x = randn(&mut rng, &[3, 2, 2, 2]);
        let gamma = randn(&mut rng, &[2]).mapv(|v| v.abs() + 0.5);
        let beta = randn(&mut rng, &[2]);
        let t = randn(&mut rng, &[3, 2, 2, 2]);
        let err = numeric_grad_nodes(&[x, gamma, beta], |g, ids| {
            let (y, _) = g.batch_norm_train(ids[0], ids[1], ids[2], 1e-5);
            let tt = g.constant(t.clone());
            g.frob_sq_diff(y, tt)
        });
        assert!(err < 1e-5, "batchnorm train grad err {err}");
    }

    #[test]
    fn eval_mode_grads_match_finite_differences() {
        let mut rng = SeededRng::new(43);
        let x = randn(&mut rng, &[2, 2, 3, 3]);
        let gamma = randn(&mut rng, &[2]).mapv(|v| v.abs() + 0.5);
        let beta = randn(&mut rng, &[2]);
        let rm = Array1::from_vec(vec![0.1, -0.2]);
        let rv = Array1::from_vec(vec![0.9, 1.4]);
        let t = randn(&mut rng, &[2, 2, 3, 3]);
        let err = numeric_grad_nodes(&[x, gamma, beta], |g, ids| {
            let y = g.batch_norm_eval(ids[0], ids[1], ids[2], &rm, &rv, 1e-5);
            let tt = g.constant(t.clone());
            g.frob_sq_diff(y, tt)
        });
        assert!(err < 1e-6, "batchnorm eval grad err {err}");
    }
}
