use crate::graph::{Graph, Var};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    cin: usize,
    len: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    lout: usize,
}

/// `col[(ci*K + k), t] = x[ci, t*stride - pad + k]` (zero outside the signal).
fn im2col(x: &[f64], cin: usize, len: usize, d: &ConvDims, col: &mut [f64]) {
    let (k, lout) = (d.kernel, d.lout);
    for ci in 0..cin {
        let xrow = &x[ci * len..(ci + 1) * len];
        for kk in 0..k {
            let crow = &mut col[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
            for (t, c) in crow.iter_mut().enumerate() {
                let pos = (t * d.stride + kk) as isize - d.pad as isize;
                *c = if pos >= 0 && (pos as usize) < len { xrow[pos as usize] } else { 0.0 };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im(col: &[f64], cin: usize, len: usize, d: &ConvDims, x: &mut [f64]) {
    let (k, lout) = (d.kernel, d.lout);
    for ci in 0..cin {
        for kk in 0..k {
            let crow = &col[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
            for (t, &c) in crow.iter().enumerate() {
                let pos = (t * d.stride + kk) as isize - d.pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    x[ci * len + pos as usize] += c;
                }
            }
        }
    }
}

impl Graph {
    /// 1-D convolution. `x: [B, Cin, L]`, `w: [Cout, Cin/groups, K]`, `bias: [Cout]`.
    pub fn conv1d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize, groups: usize) -> Var {
        let (value, d) = {
            let xv = self.value(x);
            let wv = self.value(w);
            assert_eq!(xv.ndim(), 3, "conv1d input must be [B, C, L]");
            let (batch, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (cout, cin_g, kernel) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
            assert!(cin % groups == 0 && cout % groups == 0, "conv1d groups must divide channels");
            assert_eq!(cin / groups, cin_g, "conv1d weight/input channel mismatch");
            assert!(len + 2 * pad >= kernel, "conv1d input shorter than kernel");
            let lout = (len + 2 * pad - kernel) / stride + 1;
            let d = ConvDims { batch, cin, len, cout, kernel, stride, pad, groups, lout };
            let cout_g = cout / groups;
            let mut out = vec![0.0; batch * cout * lout];
            let mut col = vec![0.0; cin_g * kernel * lout];
            for b in 0..batch {
                for g in 0..groups {
                    let xs = &xv.data()[(b * cin + g * cin_g) * len..(b * cin + (g + 1) * cin_g) * len];
                    im2col(xs, cin_g, len, &d, &mut col);
                    let wg = &wv.data()[g * cout_g * cin_g * kernel..(g + 1) * cout_g * cin_g * kernel];
                    let og = &mut out[(b * cout + g * cout_g) * lout..(b * cout + (g + 1) * cout_g) * lout];
                    gemm(cout_g, cin_g * kernel, lout, wg, false, &col, false, og, 0.0);
                }
            }
            if let Some(bias) = bias {
                let bv = self.value(bias);
                for b in 0..batch {
                    for co in 0..cout {
                        for o in &mut out[(b * cout + co) * lout..(b * cout + co + 1) * lout] {
                            *o += bv.data()[co];
                        }
                    }
                }
            }
            (Tensor::new(&[batch, cout, lout], out), d)
        };
        let inputs: Vec<Var> = match bias {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.custom(
            &inputs,
            value,
            Box::new(move |ctx| {
                let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let cin_g = d.cin / d.groups;
                let cout_g = d.cout / d.groups;
                let wsz = cout_g * cin_g * d.kernel;
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut col = vec![0.0; cin_g * d.kernel * d.lout];
                let mut gcol = vec![0.0; cin_g * d.kernel * d.lout];
                for b in 0..d.batch {
                    for grp in 0..d.groups {
                        let xoff = (b * d.cin + grp * cin_g) * d.len;
                        im2col(&xv[xoff..xoff + cin_g * d.len], cin_g, d.len, &d, &mut col);
                        let goff = (b * d.cout + grp * cout_g) * d.lout;
                        let gg = &g[goff..goff + cout_g * d.lout];
                        let wg = &wv[grp * wsz..(grp + 1) * wsz];
                        gemm(
                            cout_g,
                            d.lout,
                            cin_g * d.kernel,
                            gg,
                            false,
                            &col,
                            true,
                            &mut gw[grp * wsz..(grp + 1) * wsz],
                            1.0,
                        );
                        gemm(cin_g * d.kernel, cout_g, d.lout, wg, true, gg, false, &mut gcol, 0.0);
                        col2im(&gcol, cin_g, d.len, &d, &mut gx[xoff..xoff + cin_g * d.len]);
                    }
                }
                let mut grads =
                    vec![Some(Tensor::new(ctx.inputs[0].shape(), gx)), Some(Tensor::new(ctx.inputs[1].shape(), gw))];
                if ctx.inputs.len() == 3 {
                    let mut gb = vec![0.0; d.cout];
                    for b in 0..d.batch {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            *acc += g[(b * d.cout + co) * d.lout..(b * d.cout + co + 1) * d.lout].iter().sum::<f64>();
                        }
                    }
                    grads.push(Some(Tensor::new(ctx.inputs[2].shape(), gb)));
                }
                grads
            }),
        )
    }

    /// Transposed 1-D convolution. `x: [B, Cin, L]`, `w: [Cin, Cout, K]`, output
    /// length `(L-1)*stride - 2*pad + K + out_pad`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose1d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let (value, d) = {
            let xv = self.value(x);
            let wv = self.value(w);
            assert_eq!(xv.ndim(), 3, "conv_transpose1d input must be [B, C, L]");
            let (batch, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            assert_eq!(wv.shape()[0], cin, "conv_transpose1d weight/input mismatch");
            let (cout, kernel) = (wv.shape()[1], wv.shape()[2]);
            let lout = (len - 1) * stride + kernel + out_pad - 2 * pad;
            // `len` and `lout` swap roles relative to the forward convolution:
            // the gather view maps output positions (len here = lout) to input steps.
            let d = ConvDims { batch, cin: cout, len: lout, cout: cin, kernel, stride, pad, groups: 1, lout: len };
            let mut out = vec![0.0; batch * cout * lout];
            let mut cols = vec![0.0; cout * kernel * len];
            for b in 0..batch {
                let xb = &xv.data()[b * cin * len..(b + 1) * cin * len];
                gemm(cout * kernel, cin, len, wv.data(), true, xb, false, &mut cols, 0.0);
                col2im(&cols, cout, lout, &d, &mut out[b * cout * lout..(b + 1) * cout * lout]);
            }
            if let Some(bias) = bias {
                let bv = self.value(bias);
                for b in 0..batch {
                    for co in 0..cout {
                        for o in &mut out[(b * cout + co) * lout..(b * cout + co + 1) * lout] {
                            *o += bv.data()[co];
                        }
                    }
                }
            }
            (Tensor::new(&[batch, cout, lout], out), d)
        };
        let inputs: Vec<Var> = match bias {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.custom(
            &inputs,
            value,
            Box::new(move |ctx| {
                let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                // d.cin = Cout of this op, d.cout = Cin, d.len = output length, d.lout = input length
                let (cout, cin, lout, len, k) = (d.cin, d.cout, d.len, d.lout, d.kernel);
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gcols = vec![0.0; cout * k * len];
                for b in 0..d.batch {
                    im2col(&g[b * cout * lout..(b + 1) * cout * lout], cout, lout, &d, &mut gcols);
                    let xb = &xv[b * cin * len..(b + 1) * cin * len];
                    gemm(
                        cin,
                        cout * k,
                        len,
                        wv,
                        false,
                        &gcols,
                        false,
                        &mut gx[b * cin * len..(b + 1) * cin * len],
                        0.0,
                    );
                    gemm(cin, len, cout * k, xb, false, &gcols, true, &mut gw, 1.0);
                }
                let mut grads =
                    vec![Some(Tensor::new(ctx.inputs[0].shape(), gx)), Some(Tensor::new(ctx.inputs[1].shape(), gw))];
                if ctx.inputs.len() == 3 {
                    let mut gb = vec![0.0; cout];
                    for b in 0..d.batch {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            *acc += g[(b * cout + co) * lout..(b * cout + co + 1) * lout].iter().sum::<f64>();
                        }
                    }
                    grads.push(Some(Tensor::new(ctx.inputs[2].shape(), gb)));
                }
                grads
            }),
        )
    }

    /// Group normalization of `x: [B, Ch, L]` over `(Ch/groups, L)` blocks,
    /// with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let (value, xhat, inv_std, dims) = {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            assert_eq!(xv.ndim(), 3, "group_norm input must be [B, C, L]");
            let (batch, ch, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            assert_eq!(ch % groups, 0, "group_norm groups must divide channels");
            let cg = ch / groups;
            let block = cg * len;
            let mut out = vec![0.0; xv.numel()];
            let mut xhat = vec![0.0; xv.numel()];
            let mut inv_std = vec![0.0; batch * groups];
            for bg in 0..batch * groups {
                let base = bg * block;
                let xs = &xv.data()[base..base + block];
                let mean = xs.iter().sum::<f64>() / block as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[bg] = is;
                let grp = bg % groups;
                for (i, &v) in xs.iter().enumerate() {
                    let c = grp * cg + i / len;
                    let h = (v - mean) * is;
                    xhat[base + i] = h;
                    out[base + i] = h * gv.data()[c] + bv.data()[c];
                }
            }
            (Tensor::new(xv.shape(), out), xhat, inv_std, (batch, ch, len, groups))
        };
        self.custom(
            &[x, gamma, beta],
            value,
            Box::new(move |ctx| {
                let (batch, ch, len, groups) = dims;
                let cg = ch / groups;
                let block = cg * len;
                let g = ctx.grad.data();
                let gamma = ctx.inputs[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; ch];
                let mut gbeta = vec![0.0; ch];
                for bg in 0..batch * groups {
                    let base = bg * block;
                    let grp = bg % groups;
                    let mut sum_gh = 0.0;
                    let mut sum_ghh = 0.0;
                    for i in 0..block {
                        let c = grp * cg + i / len;
                        let gh = g[base + i] * gamma[c];
                        sum_gh += gh;
                        sum_ghh += gh * xhat[base + i];
                        ggamma[c] += g[base + i] * xhat[base + i];
                        gbeta[c] += g[base + i];
                    }
                    let inv_n = 1.0 / block as f64;
                    for i in 0..block {
                        let c = grp * cg + i / len;
                        let gh = g[base + i] * gamma[c];
                        gx[base + i] = inv_std[bg] * (gh - inv_n * sum_gh - xhat[base + i] * inv_n * sum_ghh);
                    }
                }
                let _ = batch;
                vec![
                    Some(Tensor::new(ctx.inputs[0].shape(), gx)),
                    Some(Tensor::new(ctx.inputs[1].shape(), ggamma)),
                    Some(Tensor::new(ctx.inputs[2].shape(), gbeta)),
                ]
            }),
        )
    }
}
