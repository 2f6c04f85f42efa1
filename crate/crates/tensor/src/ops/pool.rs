use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Half-open source range of adaptive pooling bin `i` out of `out`.
fn bin(i: usize, input: usize, out: usize) -> (usize, usize) {
    let start = i * input / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end)
}

/// Source taps for one axis of a bilinear resize with pixel-center sampling
/// (`align_corners = false`): `(lo, hi, weight_lo, weight_hi)`.
fn bilinear_taps(input: usize, out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

impl<T: Scalar> Tensor<T> {
    /// Averages each NCHW plane down to `oh×ow` bins.
    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4_for("adaptive_avg_pool2d")?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(invalid(
                "adaptive_avg_pool2d",
                format!("target {oh}×{ow} must be within 1..={h}×{w}"),
            ));
        }
        let rows: Vec<_> = (0..oh).map(|i| bin(i, h, oh)).collect();
        let cols: Vec<_> = (0..ow).map(|j| bin(j, w, ow)).collect();
        let x = self.data();
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for p in 0..b * c {
            let src = &x[p * h * w..][..h * w];
            for (i, &(r0, r1)) in rows.iter().enumerate() {
                for (j, &(c0, c1)) in cols.iter().enumerate() {
                    let mut s = T::ZERO;
                    for r in r0..r1 {
                        s += src[r * w + c0..r * w + c1].iter().copied().sum::<T>();
                    }
                    out[(p * oh + i) * ow + j] = s / T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        Ok(Tensor::from_op(
            "adaptive_avg_pool2d",
            vec![b, c, oh, ow],
            out,
            vec![self.clone()],
            move |ctx| {
                let mut dx = vec![T::ZERO; b * c * h * w];
                for p in 0..b * c {
                    let dst = &mut dx[p * h * w..][..h * w];
                    for (i, &(r0, r1)) in rows.iter().enumerate() {
                        for (j, &(c0, c1)) in cols.iter().enumerate() {
                            let g = ctx.grad[(p * oh + i) * ow + j]
                                / T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                            for r in r0..r1 {
                                dst[r * w + c0..r * w + c1].iter_mut().for_each(|v| *v += g);
                            }
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Bilinear resize of an NCHW tensor, sampling at pixel centers.
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4_for("bilinear_resize")?;
        if oh == 0 || ow == 0 {
            return Err(invalid("bilinear_resize", format!("target {oh}×{ow} is empty")));
        }
        if (oh, ow) == (h, w) {
            return Ok(self.clone());
        }
        let conv = |taps: Vec<(usize, usize, f64, f64)>| -> Vec<(usize, usize, T, T)> {
            taps.into_iter()
                .map(|(a, b, wa, wb)| (a, b, T::from_f64(wa), T::from_f64(wb)))
                .collect()
        };
        let ty = conv(bilinear_taps(h, oh));
        let tx = conv(bilinear_taps(w, ow));
        let x = self.data();
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for p in 0..b * c {
            let src = &x[p * h * w..][..h * w];
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (r0, r1) = (&src[y0 * w..][..w], &src[y1 * w..][..w]);
                for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[i * ow + j] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                }
            }
        }
        Ok(Tensor::from_op(
            "bilinear_resize",
            vec![b, c, oh, ow],
            out,
            vec![self.clone()],
            move |ctx| {
                let mut dx = vec![T::ZERO; b * c * h * w];
                for p in 0..b * c {
                    let g = &ctx.grad[p * oh * ow..][..oh * ow];
                    let dst = &mut dx[p * h * w..][..h * w];
                    for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let gv = g[i * ow + j];
                            dst[y0 * w + x0] += gv * wy0 * wx0;
                            dst[y0 * w + x1] += gv * wy0 * wx1;
                            dst[y1 * w + x0] += gv * wy1 * wx0;
                            dst[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_pool_is_mean() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2, 2], vec![1., 2., 3., 4., 0., 0., 0., 8.]).unwrap();
        let y = x.adaptive_avg_pool2d(1, 1).unwrap();
        assert_eq!(y.data(), &[2.5, 2.0]);
    }

    #[test]
    fn uneven_bins_overlap_like_reference() {
        assert_eq!(bin(0, 5, 3), (0, 2));
        assert_eq!(bin(1, 5, 3), (1, 4));
        assert_eq!(bin(2, 5, 3), (3, 5));
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Tensor::<f64>::full(&[1, 1, 3, 5], 2.5);
        assert!(c.bilinear_resize(6, 10).unwrap().data().iter().all(|&v| v == 2.5));
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![0., 1., 2., 3.]).unwrap();
        assert_eq!(x.bilinear_resize(2, 2).unwrap().data(), x.data());
    }
}
