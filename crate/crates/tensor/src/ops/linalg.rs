use crate::error::{invalid, mismatch, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Matrix offsets for each broadcast batch entry.
fn batch_offsets(a_lead: &[usize], b_lead: &[usize], op: &'static str) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
    let rank = a_lead.len().max(b_lead.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (a, b) = (pad(a_lead), pad(b_lead));
    let mut lead = Vec::with_capacity(rank);
    for d in 0..rank {
        lead.push(match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => return Err(mismatch(op, format!("batch dim {d}"), x, y)),
        });
    }
    let total: usize = lead.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..rank {
            ia = ia * a[d] + if a[d] == 1 { 0 } else { idx[d] };
            ib = ib * b[d] + if b[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((ia, ib));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < lead[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((lead, pairs))
}

impl<T: Scalar> Tensor<T> {
    /// Batched product `[..., M, K] × [..., K, N] → [..., M, N]` with
    /// broadcasting over the leading axes.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(invalid("matmul", format!("operands need ≥2 axes, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch("matmul", "inner dimension", k, k2));
        }
        let (lead, pairs) = batch_offsets(&sa[..sa.len() - 2], &sb[..sb.len() - 2], "matmul")?;
        let mut out = vec![T::ZERO; pairs.len() * m * n];
        let (a, b) = (self.data(), other.data());
        for (bi, &(ia, ib)) in pairs.iter().enumerate() {
            T::gemm(
                m, k, n, T::ONE,
                &a[ia * m * k..][..m * k], k as isize, 1,
                &b[ib * k * n..][..k * n], n as isize, 1,
                T::ZERO, &mut out[bi * m * n..][..m * n], n as isize, 1,
            );
        }
        let mut shape = lead;
        shape.extend([m, n]);
        Ok(Tensor::from_op("matmul", shape, out, vec![self.clone(), other.clone()], move |ctx| {
            let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
            let g = ctx.grad;
            let mut da = ctx.needs(0).then(|| vec![T::ZERO; a.len()]);
            let mut db = ctx.needs(1).then(|| vec![T::ZERO; b.len()]);
            for (bi, &(ia, ib)) in pairs.iter().enumerate() {
                let gb = &g[bi * m * n..][..m * n];
                if let Some(da) = da.as_mut() {
                    // dA += dY · Bᵀ
                    T::gemm(
                        m, n, k, T::ONE, gb, n as isize, 1,
                        &b[ib * k * n..][..k * n], 1, n as isize,
                        T::ONE, &mut da[ia * m * k..][..m * k], k as isize, 1,
                    );
                }
                if let Some(db) = db.as_mut() {
                    // dB += Aᵀ · dY
                    T::gemm(
                        k, m, n, T::ONE, &a[ia * m * k..][..m * k], 1, k as isize,
                        gb, n as isize, 1,
                        T::ONE, &mut db[ib * k * n..][..k * n], n as isize, 1,
                    );
                }
            }
            vec![da, db]
        }))
    }
}
