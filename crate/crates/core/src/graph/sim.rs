//! Similarity-matrix building blocks: Gram products, scaled row
//! normalization, and region-averaged feature rows.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};

use super::{as2, Graph, NodeId};

impl Graph {
    /// Gram product `h · hᵀ` for `h: (n, m)`.
    pub fn gram(&mut self, h: NodeId) -> NodeId {
        let hv = as2(self.value(h));
        let value = hv.dot(&hv.t()).into_dyn();
        self.push(
            value,
            vec![h],
            Box::new(|g, args| {
                let g2 = as2(g);
                let hv = as2(args.parent(0));
                // d(sum G.grad ⊙ (h hᵀ))/dh = (G + Gᵀ) h
                let sym = &g2 + &g2.t();
                vec![sym.dot(&hv).into_dyn()]
            }),
        )
    }

    /// Scale-and-row-normalize: `y_i = sqrt(n) * g_i / (||g_i||_2 + row_eps)`
    /// for each row of a square matrix. With `row_eps = 0` the caller must
    /// have rejected zero rows beforehand.
    pub fn row_norm_scale(&mut self, gm: NodeId, row_eps: f64) -> NodeId {
        let gv = as2(self.value(gm));
        let n = gv.nrows();
        assert_eq!(gv.ncols(), n, "row_norm_scale expects a square matrix");
        let s = (n as f64).sqrt();
        let norms: Vec<f64> = (0..n)
            .map(|i| gv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        debug_assert!(
            row_eps > 0.0 || norms.iter().all(|&r| r > 0.0),
            "zero row reached row_norm_scale in strict mode"
        );
        let mut value = gv.to_owned();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let denom = norms[i] + row_eps;
            row.mapv_inplace(|v| s * v / denom);
        }
        self.push(
            value.into_dyn(),
            vec![gm],
            Box::new(move |g, args| {
                let g2 = as2(g);
                let gv = as2(args.parent(0));
                let n = gv.nrows();
                let s = (n as f64).sqrt();
                let mut out = Array2::<f64>::zeros((n, n));
                for i in 0..n {
                    let row = gv.row(i);
                    let grow = g2.row(i);
                    let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let denom = r + row_eps;
                    let dot: f64 = grow.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    // y = s*g/(r+e): dy/dg = s[I/(r+e) - g gᵀ/(r (r+e)^2)]
                    let c2 = if r > 1e-300 {
                        s * dot / (r * denom * denom)
                    } else {
                        0.0
                    };
                    for j in 0..n {
                        out[(i, j)] = s * grow[j] / denom - c2 * row[j];
                    }
                }
                vec![out.into_dyn()]
            }),
        )
    }

    /// Region-mean feature rows: average `x: (b, c, s...)` over each region's
    /// pixels and lay the means out as an `(r, b*c)` matrix whose row `k`
    /// flattens the (batch, channel) pairs batch-major.
    ///
    /// `regions[k]` holds flat row-major spatial indices; every region must be
    /// non-empty (enforced by the caller).
    pub fn region_pool_rows(&mut self, x: NodeId, regions: Arc<Vec<Vec<usize>>>) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let r = regions.len();
        let xv = self.value(x);
        let xdata = xv.as_slice().expect("standard layout");
        let mut value = Array2::<f64>::zeros((r, b * c));
        for (k, members) in regions.iter().enumerate() {
            let inv = 1.0 / members.len() as f64;
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * spatial;
                    let mut acc = 0.0;
                    for &idx in members {
                        acc += xdata[base + idx];
                    }
                    value[(k, bi * c + ch)] = acc * inv;
                }
            }
        }
        let regions_b = regions;
        self.push(
            value.into_dyn(),
            vec![x],
            Box::new(move |g, args| {
                let g2 = as2(g);
                let xshape = args.parent(0).shape();
                let (b, c) = (xshape[0], xshape[1]);
                let spatial: usize = xshape[2..].iter().product();
                let mut gx = ArrayD::<f64>::zeros(IxDyn(xshape));
                let gdata = gx.as_slice_mut().expect("standard layout");
                for (k, members) in regions_b.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    for bi in 0..b {
                        for ch in 0..c {
                            let gv = g2[(k, bi * c + ch)] * inv;
                            let base = (bi * c + ch) * spatial;
                            for &idx in members {
                                gdata[base + idx] += gv;
                            }
                        }
                    }
                }
                vec![gx]
            }),
        )
    }
}
