use crate::error::{mismatch, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Per-channel normalization of an NCHW tensor.
    ///
    /// Training mode normalizes by batch statistics and folds them into
    /// `stats` with momentum [`BN_MOMENTUM`] (unbiased variance); eval mode
    /// normalizes by `stats`.
    pub fn batch_norm2d(
        &self,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
        stats: &mut RunningStats<T>,
        training: bool,
    ) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4_for("batch_norm2d")?;
        for (name, t) in [("scale length", scale), ("shift length", shift)] {
            if t.numel() != c {
                return Err(mismatch("batch_norm2d", name, c, t.numel()));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(mismatch("batch_norm2d", "running stats length", c, stats.mean.len()));
        }
        let plane = h * w;
        let count = b * plane;
        let eps = T::from_f64(BN_EPSILON);
        let x = self.data();

        let (mean, var) = if training {
            let inv_n = T::from_f64(1.0 / count as f64);
            let mut mean = vec![T::ZERO; c];
            let mut var = vec![T::ZERO; c];
            for ch in 0..c {
                let mut s = T::ZERO;
                for n in 0..b {
                    s += x[(n * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                }
                let m = s * inv_n;
                let mut v = T::ZERO;
                for n in 0..b {
                    for &xv in &x[(n * c + ch) * plane..][..plane] {
                        let d = xv - m;
                        v += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = v * inv_n;
            }
            let mom = T::from_f64(BN_MOMENTUM);
            let keep = T::ONE - mom;
            let unbias = if count > 1 {
                T::from_f64(count as f64 / (count - 1) as f64)
            } else {
                T::ONE
            };
            for ch in 0..c {
                stats.mean[ch] = keep * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = keep * stats.var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();

        let (gamma, beta) = (scale.data(), shift.data());
        let mut out = vec![T::ZERO; x.len()];
        for n in 0..b {
            for ch in 0..c {
                let a = gamma[ch] * inv_std[ch];
                let off = beta[ch] - a * mean[ch];
                let base = (n * c + ch) * plane;
                for (o, &xv) in out[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                    *o = a * xv + off;
                }
            }
        }

        Ok(Tensor::from_op(
            "batch_norm2d",
            self.shape().to_vec(),
            out,
            vec![self.clone(), scale.clone(), shift.clone()],
            move |ctx| {
                let x = ctx.parents[0].data();
                let gamma = ctx.parents[1].data();
                let g = ctx.grad;
                let mut sum_g = vec![T::ZERO; c];
                let mut sum_gx = vec![T::ZERO; c];
                for n in 0..b {
                    for ch in 0..c {
                        let base = (n * c + ch) * plane;
                        let (m, is) = (mean[ch], inv_std[ch]);
                        for (&gv, &xv) in g[base..base + plane].iter().zip(&x[base..base + plane]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * (xv - m) * is;
                        }
                    }
                }
                let dx = ctx.needs(0).then(|| {
                    let mut dx = vec![T::ZERO; x.len()];
                    let inv_n = T::from_f64(1.0 / count as f64);
                    for n in 0..b {
                        for ch in 0..c {
                            let base = (n * c + ch) * plane;
                            let (m, is, gm) = (mean[ch], inv_std[ch], gamma[ch]);
                            let a = gm * is;
                            if training {
                                let mg = sum_g[ch] * inv_n;
                                let mgx = sum_gx[ch] * inv_n;
                                for i in base..base + plane {
                                    let xhat = (x[i] - m) * is;
                                    dx[i] = a * (g[i] - mg - xhat * mgx);
                                }
                            } else {
                                for i in base..base + plane {
                                    dx[i] = a * g[i];
                                }
                            }
                        }
                    }
                    dx
                });
                vec![dx, ctx.needs(1).then_some(sum_gx), ctx.needs(2).then_some(sum_g)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_maps_to_shift() {
        let x = Tensor::<f64>::full(&[2, 2, 3, 3], 5.0);
        let scale = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let shift = Tensor::from_vec(&[2], vec![-1.0, 0.5]).unwrap();
        let mut stats = RunningStats::new(2);
        let y = x.batch_norm2d(&scale, &shift, &mut stats, true).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let want = if (i / 9) % 2 == 0 { -1.0 } else { 0.5 };
            assert_eq!(*v, want);
        }
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert!((stats.var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![-2.0, 0.0, 3.5]).unwrap();
        let mut stats = RunningStats::new(1);
        let y = x
            .batch_norm2d(&Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut stats, false)
            .unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
        assert_eq!(stats, RunningStats::new(1));
    }
}
