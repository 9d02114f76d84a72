//! Strided zero-padded convolution (2D and 3D) and global average pooling.
//!
//! Convolutions run as im2col + matmul per batch item. The unfolded column
//! matrices are captured for the backward pass, which is the classic
//! `grad_w = g · colᵀ`, `grad_x = col2im(wᵀ · g)` pair.

use ndarray::{Array2, ArrayD, ArrayViewD, Axis, IxDyn};

use super::{as2, empty_grad, Graph, NodeId};

/// Output size of one spatial axis: floor((in + 2*pad - k) / stride) + 1.
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad).saturating_sub(k) / stride + 1
}

struct Unfolded {
    cols: Vec<Array2<f64>>, // one (cin * prod(k), positions) matrix per batch item
    out_spatial: Vec<usize>,
}

fn im2col(x: &ArrayViewD<'_, f64>, kernel: &[usize], stride: usize, pad: usize) -> Unfolded {
    let shape = x.shape();
    let b = shape[0];
    let cin = shape[1];
    let spatial = &shape[2..];
    let d = spatial.len();
    assert!(d == 2 || d == 3, "conv supports 2 or 3 spatial dims");
    assert_eq!(kernel.len(), d);
    let out_spatial: Vec<usize> = (0..d)
        .map(|a| conv_out_len(spatial[a], kernel[a], stride, pad))
        .collect();
    let positions: usize = out_spatial.iter().product();
    let ksize: usize = kernel.iter().product();
    let rows = cin * ksize;

    let mut cols = Vec::with_capacity(b);
    for bi in 0..b {
        let mut col = Array2::<f64>::zeros((rows, positions));
        if d == 2 {
            let (h, w) = (spatial[0], spatial[1]);
            let (kh, kw) = (kernel[0], kernel[1]);
            let (oh, ow) = (out_spatial[0], out_spatial[1]);
            for c in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row = (c * kh + ki) * kw + kj;
                        for oi in 0..oh {
                            let iy = (oi * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for oj in 0..ow {
                                let ix = (oj * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                col[(row, oi * ow + oj)] =
                                    x[[bi, c, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        } else {
            let (h, w, u) = (spatial[0], spatial[1], spatial[2]);
            let (kh, kw, ku) = (kernel[0], kernel[1], kernel[2]);
            let (oh, ow, ou) = (out_spatial[0], out_spatial[1], out_spatial[2]);
            for c in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        for kk in 0..ku {
                            let row = ((c * kh + ki) * kw + kj) * ku + kk;
                            for oi in 0..oh {
                                let iy = (oi * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for oj in 0..ow {
                                    let ix = (oj * stride + kj) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    for ok in 0..ou {
                                        let iz = (ok * stride + kk) as isize - pad as isize;
                                        if iz < 0 || iz >= u as isize {
                                            continue;
                                        }
                                        col[(row, (oi * ow + oj) * ou + ok)] = x[[
                                            bi,
                                            c,
                                            iy as usize,
                                            ix as usize,
                                            iz as usize,
                                        ]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        cols.push(col);
    }
    Unfolded { cols, out_spatial }
}

/// Scatter-add a column gradient back to input layout (transpose of im2col).
fn col2im(
    gcol: &Array2<f64>,
    input_shape: &[usize], // (cin, spatial...)
    kernel: &[usize],
    out_spatial: &[usize],
    stride: usize,
    pad: usize,
    gx: &mut ArrayViewMutD,
) {
    let cin = input_shape[0];
    let spatial = &input_shape[1..];
    let d = spatial.len();
    if d == 2 {
        let (h, w) = (spatial[0], spatial[1]);
        let (kh, kw) = (kernel[0], kernel[1]);
        let (oh, ow) = (out_spatial[0], out_spatial[1]);
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    for oi in 0..oh {
                        let iy = (oi * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let ix = (oj * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[[c, iy as usize, ix as usize]] += gcol[(row, oi * ow + oj)];
                        }
                    }
                }
            }
        }
    } else {
        let (h, w, u) = (spatial[0], spatial[1], spatial[2]);
        let (kh, kw, ku) = (kernel[0], kernel[1], kernel[2]);
        let (oh, ow, ou) = (out_spatial[0], out_spatial[1], out_spatial[2]);
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    for kk in 0..ku {
                        let row = ((c * kh + ki) * kw + kj) * ku + kk;
                        for oi in 0..oh {
                            let iy = (oi * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for oj in 0..ow {
                                let ix = (oj * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                for ok in 0..ou {
                                    let iz = (ok * stride + kk) as isize - pad as isize;
                                    if iz < 0 || iz >= u as isize {
                                        continue;
                                    }
                                    gx[[c, iy as usize, ix as usize, iz as usize]] +=
                                        gcol[(row, (oi * ow + oj) * ou + ok)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

type ArrayViewMutD<'a> = ndarray::ArrayViewMut<'a, f64, IxDyn>;

impl Graph {
    /// Convolution of `x: (b, cin, s...)` with `w: (cout, cin, k...)`.
    /// Same stride and zero padding on every spatial axis.
    pub fn conv(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d = xs.len() - 2;
        assert!(d == 2 || d == 3, "conv input must be (b, c, s...) with 2-3 spatial dims");
        assert_eq!(ws.len(), d + 2, "conv weight rank mismatch");
        assert_eq!(ws[1], xs[1], "conv channel mismatch");
        let b = xs[0];
        let cout = ws[0];
        let kernel: Vec<usize> = ws[2..].to_vec();

        let unf = im2col(&self.value(x).view(), &kernel, stride, pad);
        let positions: usize = unf.out_spatial.iter().product();
        let wv = self.value(w);
        let w_mat = Array2::from_shape_vec(
            (cout, ws[1..].iter().product::<usize>()),
            wv.iter().cloned().collect(),
        )
        .expect("weight reshape");

        let mut out_shape = vec![b, cout];
        out_shape.extend_from_slice(&unf.out_spatial);
        let mut value = ArrayD::<f64>::zeros(IxDyn(&out_shape));
        for bi in 0..b {
            let y = w_mat.dot(&unf.cols[bi]); // (cout, positions)
            let mut flat = value.index_axis_mut(Axis(0), bi);
            let dst = flat.as_slice_mut().expect("standard layout");
            dst.copy_from_slice(y.as_slice().expect("standard layout"));
            debug_assert_eq!(dst.len(), cout * positions);
        }

        let cols = unf.cols;
        let out_spatial = unf.out_spatial;
        let in_shape: Vec<usize> = xs[1..].to_vec(); // (cin, spatial...)
        let kernel_b = kernel.clone();
        self.push(
            value,
            vec![x, w],
            Box::new(move |g, args| {
                let b = g.shape()[0];
                let cout = g.shape()[1];
                let positions: usize = g.shape()[2..].iter().product();
                let wv = args.parent(1);
                let w_mat = Array2::from_shape_vec(
                    (cout, wv.len() / cout),
                    wv.iter().cloned().collect(),
                )
                .expect("weight reshape");
                let mut gw_mat = Array2::<f64>::zeros(w_mat.raw_dim());
                let mut gx = if args.needs[0] {
                    ArrayD::<f64>::zeros(args.parent(0).raw_dim())
                } else {
                    empty_grad()
                };
                for bi in 0..b {
                    let gslice = g.index_axis(Axis(0), bi);
                    let g_mat = Array2::from_shape_vec(
                        (cout, positions),
                        gslice.iter().cloned().collect(),
                    )
                    .expect("grad reshape");
                    if args.needs[1] {
                        gw_mat += &g_mat.dot(&cols[bi].t());
                    }
                    if args.needs[0] {
                        let gcol = w_mat.t().dot(&g_mat);
                        let mut gx_item = gx.index_axis_mut(Axis(0), bi);
                        col2im(
                            &gcol,
                            &in_shape,
                            &kernel_b,
                            &out_spatial,
                            stride,
                            pad,
                            &mut gx_item,
                        );
                    }
                }
                let gw = if args.needs[1] {
                    ArrayD::from_shape_vec(
                        args.parent(1).raw_dim(),
                        gw_mat.into_raw_vec_and_offset().0,
                    )
                    .expect("gw reshape")
                } else {
                    empty_grad()
                };
                vec![gx, gw]
            }),
        )
    }

    /// Mean over all spatial axes: `(b, c, s...) -> (b, c)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let b = xs[0];
        let c = xs[1];
        let spatial: usize = xs[2..].iter().product();
        let xv = self.value(x);
        let mut out = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ch in 0..c {
                let lane = xv
                    .index_axis(Axis(0), bi);
                let lane = lane.index_axis(Axis(0), ch);
                out[(bi, ch)] = lane.sum() / spatial as f64;
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, args| {
                let g2 = as2(g);
                let mut gx = ArrayD::<f64>::zeros(args.parent(0).raw_dim());
                for bi in 0..g2.nrows() {
                    for ch in 0..g2.ncols() {
                        let v = g2[(bi, ch)] / spatial as f64;
                        let mut lane = gx.index_axis_mut(Axis(0), bi);
                        let mut lane = lane.index_axis_mut(Axis(0), ch);
                        lane.mapv_inplace(|_| v);
                    }
                }
                vec![gx]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::numeric_grad_nodes;
    use crate::seeding::SeededRng;

    fn randn(rng: &mut SeededRng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.normal())
    }

    /// Direct (loop-based) convolution oracle, 2D.
    fn conv2d_naive(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(wd, kw, stride, pad);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, cout, oh, ow]));
        for bi in 0..b {
            for co in 0..cout {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oi * stride + ki) as isize - pad as isize;
                                    let ix = (oj * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize
                                    {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[bi, co, oi, oj]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        let mut rng = SeededRng::new(21);
        let x = randn(&mut rng, &[2, 3, 5, 5]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let expect = conv2d_naive(&x, &w, stride, pad);
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let wi = g.constant(w.clone());
            let y = g.conv(xi, wi, stride, pad);
            let got = g.value(y);
            assert_eq!(got.shape(), expect.shape());
            let max_diff = got
                .iter()
                .zip(expect.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-12, "stride={stride} pad={pad}: {max_diff}");
        }
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = SeededRng::new(22);
        let x = randn(&mut rng, &[2, 2, 4, 4]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let err = numeric_grad_nodes(&[x, w], |g, ids| {
            let y = g.conv(ids[0], ids[1], 2, 1);
            let z = g.constant(ArrayD::zeros(IxDyn(&[2, 3, 2, 2])));
            g.frob_sq_diff(y, z)
        });
        assert!(err < 1e-6, "conv2d grad err {err}");
    }

    #[test]
    fn conv3d_matches_finite_differences() {
        let mut rng = SeededRng::new(23);
        let x = randn(&mut rng, &[1, 2, 4, 4, 4]);
        let w = randn(&mut rng, &[2, 2, 3, 3, 3]);
        let err = numeric_grad_nodes(&[x, w], |g, ids| {
            let y = g.conv(ids[0], ids[1], 2, 1);
            let z = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 2, 2, 2])));
            g.frob_sq_diff(y, z)
        });
        assert!(err < 1e-6, "conv3d grad err {err}");
    }

    #[test]
    fn global_avg_pool_value_and_grad() {
        let mut rng = SeededRng::new(24);
        let x = randn(&mut rng, &[2, 3, 2, 2]);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = g.global_avg_pool(xi);
        for bi in 0..2 {
            for ch in 0..3 {
                let mut s = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        s += x[[bi, ch, i, j]];
                    }
                }
                assert!((g.value(y)[[bi, ch]] - s / 4.0).abs() < 1e-12);
            }
        }
        let err = numeric_grad_nodes(&[x], |g, ids| {
            let y = g.global_avg_pool(ids[0]);
            let z = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
            g.frob_sq_diff(y, z)
        });
        assert!(err < 1e-7, "gap grad err {err}");
    }
}
