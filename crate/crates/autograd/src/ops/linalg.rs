use crate::graph::{Graph, Var};
use crate::tensor::{gemm, Tensor};

impl Graph {
    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&self, a: Var, w: Var) -> Var {
        let value = {
            let av = self.value(a);
            let wv = self.value(w);
            assert_eq!(wv.ndim(), 2, "matmul weight must be 2-D");
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            assert_eq!(av.last_dim(), k, "matmul inner dims: {:?} x {:?}", av.shape(), wv.shape());
            let m = av.numel() / k;
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, av.data(), false, wv.data(), false, &mut out, 0.0);
            let mut sh = av.shape().to_vec();
            *sh.last_mut().unwrap() = n;
            Tensor::new(&sh, out)
        };
        self.custom(
            &[a, w],
            value,
            Box::new(|ctx| {
                let (av, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = av.numel() / k;
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, wv.data(), true, &mut ga, 0.0);
                let mut gw = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g.data(), false, &mut gw, 0.0);
                vec![Some(Tensor::new(av.shape(), ga)), Some(Tensor::new(wv.shape(), gw))]
            }),
        )
    }

    /// Batched product: `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T`
    /// when `transpose_b` is set.
    pub fn bmm(&self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (value, dims) = {
            let av = self.value(a);
            let bv = self.value(b);
            assert_eq!(av.ndim(), 3, "bmm lhs must be 3-D");
            assert_eq!(bv.ndim(), 3, "bmm rhs must be 3-D");
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = if transpose_b { bv.shape()[1] } else { bv.shape()[2] };
            let kb = if transpose_b { bv.shape()[2] } else { bv.shape()[1] };
            assert_eq!(bv.shape()[0], batch, "bmm batch mismatch");
            assert_eq!(kb, k, "bmm inner mismatch: {:?} x {:?}", av.shape(), bv.shape());
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    transpose_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            (Tensor::new(&[batch, m, n], out), (batch, m, k, n))
        };
        self.custom(
            &[a, b],
            value,
            Box::new(move |ctx| {
                let (batch, m, k, n) = dims;
                let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                    let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                    if transpose_b {
                        // out = a b^T, b: [n, k]
                        gemm(m, n, k, gi, false, bi, false, ga_i, 0.0);
                        gemm(n, m, k, gi, true, ai, false, gb_i, 0.0);
                    } else {
                        gemm(m, n, k, gi, false, bi, true, ga_i, 0.0);
                        gemm(k, m, n, ai, true, gi, false, gb_i, 0.0);
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), ga)), Some(Tensor::new(ctx.inputs[1].shape(), gb))]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let value = {
            let av = self.value(a);
            let w = av.last_dim();
            let mut out = av.clone();
            for row in out.data_mut().chunks_mut(w) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            out
        };
        self.custom(
            &[a],
            value,
            Box::new(|ctx| {
                let w = ctx.output.last_dim();
                let mut out = ctx.grad.clone();
                for (grow, yrow) in out.data_mut().chunks_mut(w).zip(ctx.output.data().chunks(w)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (g, &y) in grow.iter_mut().zip(yrow) {
                        *g = y * (*g - dot);
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (value, xhat, inv_std) = {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            let w = xv.last_dim();
            assert_eq!(gv.numel(), w, "layer_norm gamma width");
            let rows = xv.numel() / w;
            let mut out = vec![0.0; xv.numel()];
            let mut xhat = vec![0.0; xv.numel()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &xv.data()[r * w..(r + 1) * w];
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..w {
                    let h = (row[j] - mean) * is;
                    xhat[r * w + j] = h;
                    out[r * w + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(xv.shape(), out), xhat, inv_std)
        };
        self.custom(
            &[x, gamma, beta],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gamma = ctx.inputs[1].data();
                let w = gamma.len();
                let rows = g.len() / w;
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; w];
                let mut gbeta = vec![0.0; w];
                for r in 0..rows {
                    let gr = &g[r * w..(r + 1) * w];
                    let hr = &xhat[r * w..(r + 1) * w];
                    let mut sum_gh = 0.0;
                    let mut sum_ghh = 0.0;
                    for j in 0..w {
                        let gh = gr[j] * gamma[j];
                        sum_gh += gh;
                        sum_ghh += gh * hr[j];
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    let inv_w = 1.0 / w as f64;
                    for j in 0..w {
                        let gh = gr[j] * gamma[j];
                        gx[r * w + j] = inv_std[r] * (gh - inv_w * sum_gh - hr[j] * inv_w * sum_ghh);
                    }
                }
                vec![
                    Some(Tensor::new(ctx.inputs[0].shape(), gx)),
                    Some(Tensor::new(ctx.inputs[1].shape(), ggamma)),
                    Some(Tensor::new(ctx.inputs[2].shape(), gbeta)),
                ]
            }),
        )
    }
}
