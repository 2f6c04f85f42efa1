use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = x[at(0)];
                for j in 1..len {
                    m = m.max(x[at(j)]);
                }
                let mut s = T::ZERO;
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    out[at(j)] = e;
                    s += e;
                }
                let inv = T::ONE / s;
                for j in 0..len {
                    out[at(j)] *= inv;
                }
            }
        }
        Ok(Tensor::from_op("softmax", shape.to_vec(), out, vec![self.clone()], move |ctx| {
            let (y, g) = (ctx.output, ctx.grad);
            let mut dx = vec![T::ZERO; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}
