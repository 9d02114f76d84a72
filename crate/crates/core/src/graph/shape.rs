//! Shape-changing ops: reshape, permute, and linear spatial resampling.

use ndarray::{ArrayD, IxDyn};

use super::{Graph, NodeId};

/// Per-axis interpolation table: for each output index, the two source
/// indices and their weights.
type AxisTable = Vec<(usize, usize, f64, f64)>;

/// Source coordinates for linear resampling without corner alignment:
/// `src = (dst + 0.5) * (in / out) - 0.5`, clamped to `[0, in-1]`. The sample
/// is the convex combination of `floor(src)` and `floor(src) + 1` (the latter
/// clamped), weighted by the fractional part. This matches the common
/// `align_corners = false` convention and is the fixed convention used for
/// every resampling in this crate.
fn axis_table(in_len: usize, out_len: usize) -> AxisTable {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

impl Graph {
    /// Reshape to a new shape with the same element count (row-major order).
    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> NodeId {
        let old_shape = self.shape(x).to_vec();
        assert_eq!(
            old_shape.iter().product::<usize>(),
            new_shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let value = ArrayD::from_shape_vec(
            IxDyn(new_shape),
            self.value(x).iter().cloned().collect(),
        )
        .expect("reshape");
        self.push(
            value,
            vec![x],
            Box::new(move |g, _| {
                vec![ArrayD::from_shape_vec(
                    IxDyn(&old_shape),
                    g.iter().cloned().collect(),
                )
                .expect("reshape grad")]
            }),
        )
    }

    /// Permute axes; the result is materialized in standard layout.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(
            value,
            vec![x],
            Box::new(move |g, _| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            }),
        )
    }

    /// Bilinear (2D) / trilinear (3D) resampling of `x: (b, c, s...)` to a new
    /// spatial shape. Returns `x` unchanged when the shape already matches.
    pub fn resize_linear(&mut self, x: NodeId, target: &[usize]) -> NodeId {
        let xs = self.shape(x).to_vec();
        let d = xs.len() - 2;
        assert_eq!(target.len(), d, "resize: spatial rank mismatch");
        assert!(d == 2 || d == 3, "resize supports 2 or 3 spatial dims");
        if &xs[2..] == target {
            return x;
        }
        let (b, c) = (xs[0], xs[1]);
        let tables: Vec<AxisTable> = (0..d).map(|a| axis_table(xs[2 + a], target[a])).collect();
        let mut out_shape = vec![b, c];
        out_shape.extend_from_slice(target);
        let xv = self.value(x);
        let mut value = ArrayD::<f64>::zeros(IxDyn(&out_shape));
        if d == 2 {
            for bi in 0..b {
                for ch in 0..c {
                    for (oy, &(y0, y1, wy0, wy1)) in tables[0].iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tables[1].iter().enumerate() {
                            value[[bi, ch, oy, ox]] = wy0 * wx0 * xv[[bi, ch, y0, x0]]
                                + wy0 * wx1 * xv[[bi, ch, y0, x1]]
                                + wy1 * wx0 * xv[[bi, ch, y1, x0]]
                                + wy1 * wx1 * xv[[bi, ch, y1, x1]];
                        }
                    }
                }
            }
        } else {
            for bi in 0..b {
                for ch in 0..c {
                    for (oy, &(y0, y1, wy0, wy1)) in tables[0].iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tables[1].iter().enumerate() {
                            for (oz, &(z0, z1, wz0, wz1)) in tables[2].iter().enumerate() {
                                value[[bi, ch, oy, ox, oz]] = wy0
                                    * (wx0
                                        * (wz0 * xv[[bi, ch, y0, x0, z0]]
                                            + wz1 * xv[[bi, ch, y0, x0, z1]])
                                        + wx1
                                            * (wz0 * xv[[bi, ch, y0, x1, z0]]
                                                + wz1 * xv[[bi, ch, y0, x1, z1]]))
                                    + wy1
                                        * (wx0
                                            * (wz0 * xv[[bi, ch, y1, x0, z0]]
                                                + wz1 * xv[[bi, ch, y1, x0, z1]])
                                            + wx1
                                                * (wz0 * xv[[bi, ch, y1, x1, z0]]
                                                    + wz1 * xv[[bi, ch, y1, x1, z1]]));
                            }
                        }
                    }
                }
            }
        }
        self.push(
            value,
            vec![x],
            Box::new(move |g, args| {
                let mut gx = ArrayD::<f64>::zeros(args.parent(0).raw_dim());
                let b = g.shape()[0];
                let c = g.shape()[1];
                if tables.len() == 2 {
                    for bi in 0..b {
                        for ch in 0..c {
                            for (oy, &(y0, y1, wy0, wy1)) in tables[0].iter().enumerate() {
                                for (ox, &(x0, x1, wx0, wx1)) in tables[1].iter().enumerate() {
                                    let gv = g[[bi, ch, oy, ox]];
                                    gx[[bi, ch, y0, x0]] += wy0 * wx0 * gv;
                                    gx[[bi, ch, y0, x1]] += wy0 * wx1 * gv;
                                    gx[[bi, ch, y1, x0]] += wy1 * wx0 * gv;
                                    gx[[bi, ch, y1, x1]] += wy1 * wx1 * gv;
                                }
                            }
                        }
                    }
                } else {
                    for bi in 0..b {
                        for ch in 0..c {
                            for (oy, &(y0, y1, wy0, wy1)) in tables[0].iter().enumerate() {
                                for (ox, &(x0, x1, wx0, wx1)) in tables[1].iter().enumerate() {
                                    for (oz, &(z0, z1, wz0, wz1)) in
                                        tables[2].iter().enumerate()
                                    {
                                        let gv = g[[bi, ch, oy, ox, oz]];
                                        gx[[bi, ch, y0, x0, z0]] += wy0 * wx0 * wz0 * gv;
                                        gx[[bi, ch, y0, x0, z1]] += wy0 * wx0 * wz1 * gv;
                                        gx[[bi, ch, y0, x1, z0]] += wy0 * wx1 * wz0 * gv;
                                        gx[[bi, ch, y0, x1, z1]] += wy0 * wx1 * wz1 * gv;
                                        gx[[bi, ch, y1, x0, z0]] += wy1 * wx0 * wz0 * gv;
                                        gx[[bi, ch, y1, x0, z1]] += wy1 * wx0 * wz1 * gv;
                                        gx[[bi, ch, y1, x1, z0]] += wy1 * wx1 * wz0 * gv;
                                        gx[[bi, ch, y1, x1, z1]] += wy1 * wx1 * wz1 * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx]
            }),
        )
    }
}

/// Nearest-neighbor index mapping with the same coordinate convention as
/// [`axis_table`]; used for resampling integer region masks.
pub fn nearest_axis_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            src.round().min((in_len - 1) as f64) as usize
        })
        .collect()
}
