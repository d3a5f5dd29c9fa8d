//! Differentiable operations recorded on a [`Graph`](crate::Graph).

mod conv;
mod linalg;
mod loss;

pub use loss::{log_softmax_rows, softplus};
mod shape;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.custom(&[a, b], value, Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.custom(&[a, b], value, Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                    Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias, position tables).
    pub fn add_suffix(&self, a: Var, b: Var) -> Var {
        let (value, period) = {
            let av = self.value(a);
            let bv = self.value(b);
            let (ash, bsh) = (av.shape(), bv.shape());
            assert!(
                bsh.len() <= ash.len() && ash[ash.len() - bsh.len()..] == *bsh,
                "add_suffix: {bsh:?} is not a suffix of {ash:?}"
            );
            let period = bv.numel();
            let mut out = av.clone();
            for chunk in out.data_mut().chunks_mut(period) {
                for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                    *o += x;
                }
            }
            (out, period)
        };
        self.custom(
            &[a, b],
            value,
            Box::new(move |ctx| {
                let mut gb = vec![0.0; period];
                for chunk in ctx.grad.data().chunks(period) {
                    for (acc, &g) in gb.iter_mut().zip(chunk) {
                        *acc += g;
                    }
                }
                vec![Some(ctx.grad.clone()), Some(Tensor::new(ctx.inputs[1].shape(), gb))]
            }),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.custom(&[a], value, Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * s))]))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.custom(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    pub fn square(&self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.custom(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| 2.0 * g * x))]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.custom(
            &[a],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.custom(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| g * gelu_grad(x)))]))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.custom(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * (1.0 - y * y)))]))
    }

    /// Forward value of `replacement`, gradient routed to `a` unchanged.
    pub fn straight_through(&self, a: Var, replacement: &Tensor) -> Var {
        assert_eq!(self.shape(a), replacement.shape(), "straight_through shape mismatch");
        self.custom(&[a], replacement.clone(), Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    /// Copy of `a` with no gradient path.
    pub fn detach(&self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(&[a], value, Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let (value, outer, len, inner) = {
            let av = self.value(a);
            let sh = av.shape();
            let outer: usize = sh[..axis].iter().product();
            let len = sh[axis];
            let inner: usize = sh[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            let d = av.data();
            for o in 0..outer {
                for l in 0..len {
                    let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for (x, &y) in dst.iter_mut().zip(src) {
                        *x += y;
                    }
                }
            }
            let mut osh = sh.to_vec();
            osh.remove(axis);
            (Tensor::new(&osh, out), outer, len, inner)
        };
        self.custom(
            &[a],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        out[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), out))]
            }),
        )
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }
}
