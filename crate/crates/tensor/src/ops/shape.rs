use crate::error::{invalid, mismatch, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gathers `src` (with `src_shape`) into permuted order.
fn permute_data<T: Scalar>(src: &[T], src_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = src_shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for k in 0..inner {
            out.push(src[base + k * inner_stride]);
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(invalid(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(self.share_with_shape(shape.to_vec()))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let src_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
        let data = permute_data(self.data(), &src_shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op("permute", out_shape, data, vec![self.clone()], move |ctx| {
            vec![Some(permute_data(ctx.grad, &grad_shape, &inverse))]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let rank = self.ndim();
        if rank < 2 {
            return Err(invalid("transpose_last", "need at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rank = first.ndim();
        if axis >= rank {
            return Err(invalid("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            if p.ndim() != rank {
                return Err(mismatch("concat", "rank", rank, p.ndim()));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(mismatch("concat", format!("dim {d}"), first.shape()[d], p.shape()[d]));
                }
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_axis: usize = widths.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                let chunk = w * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let parents: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op("concat", out_shape, data, parents, move |ctx| {
            let row = total_axis * inner;
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (i, &w) in widths.iter().enumerate() {
                let chunk = w * inner;
                if ctx.needs(i) {
                    let mut g = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let start = o * row + offset;
                        g.extend_from_slice(&ctx.grad[start..start + chunk]);
                    }
                    grads.push(Some(g));
                } else {
                    grads.push(None);
                }
                offset += chunk;
            }
            grads
        }))
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(invalid("narrow", format!("axis {axis} out of range")));
        }
        let extent = self.shape()[axis];
        if start + len > extent {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {extent}", start + len),
            ));
        }
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[s..s + len * inner]);
        }
        Ok(Tensor::from_op("narrow", out_shape, data, vec![self.clone()], move |ctx| {
            let mut g = vec![T::ZERO; outer * full * inner];
            for o in 0..outer {
                let s = (o * full + start) * inner;
                g[s..s + len * inner].copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }))
    }
}
