//! Parameters, the module visitor and the handful of layers every block is
//! assembled from.

use std::cell::{RefCell, RefMut};

use roadfuse_tensor::{Activation, ConvSpec, RunningStats, Scalar, SeedRng, Tensor};

use crate::error::Result;

/// A named slot holding a leaf tensor.
///
/// Trainable parameters are leaves with `requires_grad`; buffers (batch-norm
/// running statistics) are plain leaves that are saved but never optimized.
pub struct Param<T: Scalar> {
    value: RefCell<Tensor<T>>,
    trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn trainable(shape: &[usize], data: Vec<T>) -> Self {
        Param {
            value: RefCell::new(Tensor::parameter(shape, data).expect("parameter shape")),
            trainable: true,
        }
    }

    pub fn buffer(shape: &[usize], data: Vec<T>) -> Self {
        Param {
            value: RefCell::new(Tensor::from_vec(shape, data).expect("buffer shape")),
            trainable: false,
        }
    }

    pub fn get(&self) -> Tensor<T> {
        self.value.borrow().clone()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.value.borrow().to_vec()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.value.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.value.borrow().zero_grad();
    }

    /// Replaces the values with a fresh leaf of the same shape.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let shape = self.shape();
        let t = if self.trainable {
            Tensor::parameter(&shape, data)?
        } else {
            Tensor::from_vec(&shape, data)?
        };
        *self.value.borrow_mut() = t;
        Ok(())
    }

    /// Swaps in an arbitrary tensor (used by gradient checks to route
    /// finite-difference probes through a module).
    pub fn replace(&self, t: Tensor<T>) {
        *self.value.borrow_mut() = t;
    }
}

/// Visitor callback: `(dotted name, parameter)`.
pub type Visitor<'a, T> = dyn FnMut(&str, &Param<T>) + 'a;

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    /// Calls `v` on every parameter and buffer, in a fixed order, with names
    /// prefixed by `prefix`.
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>);

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                n += p.numel();
            }
        });
        n
    }

    fn named_params(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }

    fn zero_grad(&self) {
        self.visit("", &mut |_, p| p.zero_grad());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), v);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        if let Some(m) = self {
            m.visit(prefix, v);
        }
    }
}

/// Per-forward state: train/eval switch and the generator used by dropout.
pub struct Ctx {
    pub training: bool,
    rng: RefCell<SeedRng>,
}

impl Ctx {
    pub fn train(seed: u64) -> Self {
        Ctx {
            training: true,
            rng: RefCell::new(SeedRng::new(seed)),
        }
    }

    pub fn eval() -> Self {
        Ctx {
            training: false,
            rng: RefCell::new(SeedRng::new(0)),
        }
    }

    pub fn rng(&self) -> RefMut<'_, SeedRng> {
        self.rng.borrow_mut()
    }
}

/// Kaiming-uniform (fan-in, ReLU gain) draw.
pub fn kaiming_uniform<T: Scalar>(rng: &mut SeedRng, fan_in: usize, n: usize) -> Vec<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::from_f64(rng.uniform_range(-bound, bound))).collect()
}

pub struct Conv2d<T: Scalar> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(spec: ConvSpec, rng: &mut SeedRng) -> Self {
        spec.validate().expect("conv spec");
        let shape = spec.weight_shape();
        let n = shape.iter().product();
        Conv2d {
            weight: Param::trainable(&shape, kaiming_uniform(rng, spec.fan_in(), n)),
            bias: spec
                .bias
                .then(|| Param::trainable(&[spec.out_channels], vec![T::ZERO; spec.out_channels])),
            spec,
        }
    }

    /// 1×1 convolution with bias.
    pub fn pointwise(cin: usize, cout: usize, rng: &mut SeedRng) -> Self {
        Self::new(ConvSpec::new(cin, cout, 1), rng)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let bias = self.bias.as_ref().map(Param::get);
        Ok(x.conv2d(&self.spec, &self.weight.get(), bias.as_ref())?)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        v(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            v(&join(prefix, "bias"), b);
        }
    }
}

pub struct BatchNorm2d<T: Scalar> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            scale: Param::trainable(&[channels], vec![T::ONE; channels]),
            shift: Param::trainable(&[channels], vec![T::ZERO; channels]),
            running_mean: Param::buffer(&[channels], vec![T::ZERO; channels]),
            running_var: Param::buffer(&[channels], vec![T::ONE; channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        let mut stats = RunningStats {
            mean: self.running_mean.to_vec(),
            var: self.running_var.to_vec(),
        };
        let y = x.batch_norm2d(&self.scale.get(), &self.shift.get(), &mut stats, ctx.training)?;
        if ctx.training {
            self.running_mean.set_data(stats.mean)?;
            self.running_var.set_data(stats.var)?;
        }
        Ok(y)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        v(&join(prefix, "scale"), &self.scale);
        v(&join(prefix, "shift"), &self.shift);
        v(&join(prefix, "running_mean"), &self.running_mean);
        v(&join(prefix, "running_var"), &self.running_var);
    }
}

/// Convolution (no bias) → batch norm → optional activation.
pub struct ConvBnAct<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: Option<Activation>,
}

impl<T: Scalar> ConvBnAct<T> {
    pub fn new(spec: ConvSpec, act: Option<Activation>, rng: &mut SeedRng) -> Self {
        let spec = spec.bias(false);
        ConvBnAct {
            bn: BatchNorm2d::new(spec.out_channels),
            conv: Conv2d::new(spec, rng),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        let y = self.bn.forward(&self.conv.forward(x)?, ctx)?;
        Ok(match self.act {
            Some(a) => y.activation(a),
            None => y,
        })
    }
}

impl<T: Scalar> Module<T> for ConvBnAct<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.conv.visit(&join(prefix, "conv"), v);
        self.bn.visit(&join(prefix, "bn"), v);
    }
}
