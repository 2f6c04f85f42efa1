use crate::error::{invalid, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    /// Channel dropout: in training mode each `(batch, channel)` plane is
    /// zeroed with probability `p` and survivors are scaled by `1/(1-p)`.
    /// Eval mode, or `p == 0`, returns the input unchanged.
    pub fn dropout2d(&self, p: f64, training: bool, rng: &mut SeedRng) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout2d", format!("p must lie in [0, 1), got {p}")));
        }
        let (b, c, h, w) = self.dims4_for("dropout2d")?;
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..b * c)
            .map(|_| if rng.bernoulli(p) { T::ZERO } else { keep })
            .collect();
        let plane = h * w;
        let x = self.data();
        let mut out = vec![T::ZERO; x.len()];
        for (i, &m) in mask.iter().enumerate() {
            for (o, &v) in out[i * plane..][..plane].iter_mut().zip(&x[i * plane..][..plane]) {
                *o = v * m;
            }
        }
        Ok(Tensor::from_op("dropout2d", vec![b, c, h, w], out, vec![self.clone()], move |ctx| {
            let mut dx = vec![T::ZERO; ctx.grad.len()];
            for (i, &m) in mask.iter().enumerate() {
                for (d, &g) in dx[i * plane..][..plane].iter_mut().zip(&ctx.grad[i * plane..][..plane]) {
                    *d = g * m;
                }
            }
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_and_zero_rate_are_identity() {
        let mut rng = SeedRng::new(0);
        let x = Tensor::<f32>::from_vec(&[1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(x.dropout2d(0.2, false, &mut rng).unwrap().data(), x.data());
        assert_eq!(x.dropout2d(0.0, true, &mut rng).unwrap().data(), x.data());
    }

    #[test]
    fn survivor_fraction_near_half() {
        let mut rng = SeedRng::new(42);
        let x = Tensor::<f32>::ones(&[1, 10_000, 1, 1]);
        let y = x.dropout2d(0.5, true, &mut rng).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.5).abs() <= 0.02, "kept {kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn rejects_rate_of_one() {
        let mut rng = SeedRng::new(0);
        assert!(Tensor::<f32>::ones(&[1, 1, 1, 1]).dropout2d(1.0, true, &mut rng).is_err());
    }
}
