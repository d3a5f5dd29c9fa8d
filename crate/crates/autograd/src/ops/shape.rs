use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.custom(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))]))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let value = self.value(a).permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.custom(&[a], value, Box::new(move |ctx| vec![Some(ctx.grad.permute(&inverse))]))
    }

    /// Gathers `indices` along `axis` (indices may repeat).
    pub fn index_select(&self, a: Var, axis: usize, indices: &[usize]) -> Var {
        let (value, outer, len, inner) = {
            let av = self.value(a);
            let sh = av.shape();
            let outer: usize = sh[..axis].iter().product();
            let len = sh[axis];
            let inner: usize = sh[axis + 1..].iter().product();
            let d = av.data();
            let mut out = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &i in indices {
                    assert!(i < len, "index {i} out of range for axis of length {len}");
                    out.extend_from_slice(&d[(o * len + i) * inner..(o * len + i + 1) * inner]);
                }
            }
            let mut osh = sh.to_vec();
            osh[axis] = indices.len();
            (Tensor::new(&osh, out), outer, len, inner)
        };
        let indices = indices.to_vec();
        self.custom(
            &[a],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut out = vec![0.0; outer * len * inner];
                let k = indices.len();
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                        let dst = &mut out[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (x, &y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), out))]
            }),
        )
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(a, axis, &idx)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p)).collect();
        let base = &shapes[0];
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        for s in &shapes {
            assert_eq!(s.len(), base.len());
            assert_eq!(s[..axis], base[..axis]);
            assert_eq!(s[axis + 1..], base[axis + 1..]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let v = self.value(*p);
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut osh = base.clone();
        osh[axis] = total;
        let value = Tensor::new(&osh, out);
        self.custom(
            parts,
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().zip(&ctx.inputs).map(|(d, t)| Some(Tensor::new(t.shape(), d))).collect()
            }),
        )
    }

    /// Replaces the rows of `x` (viewed as `[rows, d]`) flagged in `mask`
    /// with the vector `token` of length `d`.
    pub fn replace_rows(&self, x: Var, mask: &[bool], token: Var) -> Var {
        let value = {
            let xv = self.value(x);
            let tv = self.value(token);
            let d = tv.numel();
            assert_eq!(xv.last_dim(), d, "replace_rows: token width mismatch");
            assert_eq!(xv.numel() / d, mask.len(), "replace_rows: mask length mismatch");
            let mut out = xv.clone();
            for (r, chunk) in out.data_mut().chunks_mut(d).enumerate() {
                if mask[r] {
                    chunk.copy_from_slice(tv.data());
                }
            }
            out
        };
        let mask = mask.to_vec();
        self.custom(
            &[x, token],
            value,
            Box::new(move |ctx| {
                let d = ctx.inputs[1].numel();
                let mut gx = ctx.grad.clone();
                let mut gt = vec![0.0; d];
                for (r, chunk) in gx.data_mut().chunks_mut(d).enumerate() {
                    if mask[r] {
                        for (acc, g) in gt.iter_mut().zip(chunk.iter_mut()) {
                            *acc += *g;
                            *g = 0.0;
                        }
                    }
                }
                vec![Some(gx), Some(Tensor::new(ctx.inputs[1].shape(), gt))]
            }),
        )
    }
}
