use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index mapping for numpy-style broadcasting of two equal-rank operands.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (a, b) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (i, (&x, &y)) in a.iter().zip(&b).enumerate() {
            out_shape.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(invalid(
                        op,
                        format!("cannot broadcast dim {i}: {a:?} vs {b:?}"),
                    ))
                }
            });
        }
        let strides_for = |s: &[usize]| {
            let full = contiguous_strides(s);
            s.iter()
                .zip(full)
                .map(|(&e, st)| if e == 1 { 0 } else { st })
                .collect::<Vec<_>>()
        };
        Ok(Broadcast {
            a_strides: strides_for(&a),
            b_strides: strides_for(&b),
            out_shape,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let total: usize = self.out_shape.iter().product();
        if total == 0 {
            return;
        }
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let inner = self.out_shape[rank - 1];
        let (sa, sb) = (self.a_strides[rank - 1], self.b_strides[rank - 1]);
        let mut idx = vec![0usize; rank];
        let (mut base_a, mut base_b) = (0usize, 0usize);
        let mut o = 0;
        loop {
            for k in 0..inner {
                f(o + k, base_a + k * sa, base_b + k * sb);
            }
            o += inner;
            // odometer over the leading dims
            let mut d = rank - 1;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                idx[d] += 1;
                base_a += self.a_strides[d];
                base_b += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                base_a -= self.a_strides[d] * idx[d];
                base_b -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
    let name = match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::Div => "div",
    };
    let apply = move |x: T, y: T| match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    };
    if a.shape() == b.shape() {
        let data: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| apply(x, y))
            .collect();
        return Ok(Tensor::from_op(
            name,
            a.shape().to_vec(),
            data,
            vec![a.clone(), b.clone()],
            move |ctx| {
                let (x, y) = (ctx.parents[0].data(), ctx.parents[1].data());
                let g = ctx.grad;
                let ga = ctx.needs(0).then(|| match op {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                    BinOp::Div => g.iter().zip(y).map(|(&g, &y)| g / y).collect(),
                });
                let gb = ctx.needs(1).then(|| match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|&g| -g).collect(),
                    BinOp::Mul => g.iter().zip(x).map(|(&g, &x)| g * x).collect(),
                    BinOp::Div => g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect(),
                });
                vec![ga, gb]
            },
        ));
    }

    let plan = Broadcast::new(name, a.shape(), b.shape())?;
    let total: usize = plan.out_shape.iter().product();
    let mut data = vec![T::ZERO; total];
    let (xa, xb) = (a.data(), b.data());
    plan.for_each(|o, i, j| data[o] = apply(xa[i], xb[j]));
    let out_shape = plan.out_shape.clone();
    Ok(Tensor::from_op(
        name,
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        move |ctx| {
            let (x, y) = (ctx.parents[0].data(), ctx.parents[1].data());
            let g = ctx.grad;
            let mut ga = ctx.needs(0).then(|| vec![T::ZERO; x.len()]);
            let mut gb = ctx.needs(1).then(|| vec![T::ZERO; y.len()]);
            plan.for_each(|o, i, j| {
                if let Some(ga) = ga.as_mut() {
                    ga[i] += match op {
                        BinOp::Add | BinOp::Sub => g[o],
                        BinOp::Mul => g[o] * y[j],
                        BinOp::Div => g[o] / y[j],
                    };
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += match op {
                        BinOp::Add => g[o],
                        BinOp::Sub => -g[o],
                        BinOp::Mul => g[o] * x[i],
                        BinOp::Div => -g[o] * x[i] / (y[j] * y[j]),
                    };
                }
            });
            vec![ga, gb]
        },
    ))
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
    HardSwish,
    HardSigmoid,
    Gelu,
    Sigmoid,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        let three = T::from_f64(3.0);
        let six = T::from_f64(6.0);
        match self {
            Activation::Relu => x.max(T::ZERO),
            Activation::Relu6 => x.max(T::ZERO).min(six),
            Activation::HardSigmoid => (x + three).max(T::ZERO).min(six) / six,
            Activation::HardSwish => x * (x + three).max(T::ZERO).min(six) / six,
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                half * x * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
            Activation::Sigmoid => sigmoid_scalar(x),
        }
    }

    /// Derivative at input `x` with forward output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let three = T::from_f64(3.0);
        match self {
            Activation::Relu => {
                if x > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            Activation::Relu6 => {
                if x > T::ZERO && x < T::from_f64(6.0) {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            Activation::HardSigmoid => {
                if x > -three && x < three {
                    T::from_f64(1.0 / 6.0)
                } else {
                    T::ZERO
                }
            }
            Activation::HardSwish => {
                if x <= -three {
                    T::ZERO
                } else if x >= three {
                    T::ONE
                } else {
                    (x + x + three) / T::from_f64(6.0)
                }
            }
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                let cdf = half * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
                cdf + x * pdf
            }
            Activation::Sigmoid => y * (T::ONE - y),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinOp::Div)
    }

    pub fn activation(&self, kind: Activation) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| kind.apply(x)).collect();
        Tensor::from_op(
            "activation",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |ctx| {
                let x = ctx.parents[0].data();
                let g = x
                    .iter()
                    .zip(ctx.output)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &g)| g * kind.derivative(x, y))
                    .collect();
                vec![Some(g)]
            },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.activation(Activation::Sigmoid)
    }

    pub fn gelu(&self) -> Tensor<T> {
        self.activation(Activation::Gelu)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        let data = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op("mul_scalar", self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        let data = self.data().iter().map(|&x| x + s).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    /// `s - self`.
    pub fn rsub_scalar(&self, s: f64) -> Tensor<T> {
        self.mul_scalar(-1.0).add_scalar(s)
    }

    pub fn square(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * x).collect();
        Tensor::from_op("square", self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            let x = ctx.parents[0].data();
            vec![Some(
                x.iter().zip(ctx.grad).map(|(&x, &g)| (x + x) * g).collect(),
            )]
        })
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        Tensor::from_op("sum", vec![], vec![total], vec![self.clone()], |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.parents[0].numel()])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        let inv = T::from_f64(1.0 / n as f64);
        let total: T = self.data().iter().copied().sum();
        Tensor::from_op("mean", vec![], vec![total * inv], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0] * inv; ctx.parents[0].numel()])]
        })
    }

    /// Weighted sum of scalar tensors, `Σ w_i · t_i`.
    pub fn weighted_sum(terms: &[(f64, &Tensor<T>)]) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for &(w, t) in terms {
            let scaled = if w == 1.0 { t.clone() } else { t.mul_scalar(w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => a.add(&scaled)?,
            });
        }
        acc.ok_or_else(|| invalid("weighted_sum", "no terms"))
    }
}
