use crate::error::{invalid, mismatch, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hyper-parameters of a 2-d convolution.
///
/// `groups == in_channels` gives a depthwise convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, no padding, dense, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: (0, 0),
            groups: 1,
            bias: true,
        }
    }

    /// Depthwise `k×k` convolution that keeps extents at stride 1.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec::new(channels, channels, kernel)
            .groups(channels)
            .padding((kernel - 1) / 2)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, pad: usize) -> Self {
        self.padding = (pad, pad);
        self
    }

    /// Padding `(k-1)/2` on both axes.
    pub fn same_padding(mut self) -> Self {
        self.padding = ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2);
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels && self.groups > 1
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn fan_in(&self) -> usize {
        (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.stride == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(invalid("conv2d", format!("degenerate spec {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(invalid(
                "conv2d",
                format!(
                    "channels {}→{} not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    /// Output extents for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < self.kernel.0 || pw < self.kernel.1 {
            return Err(invalid(
                "conv2d",
                format!("input {h}×{w} smaller than kernel {:?} after padding", self.kernel),
            ));
        }
        Ok((
            (ph - self.kernel.0) / self.stride + 1,
            (pw - self.kernel.1) / self.stride + 1,
        ))
    }
}

#[derive(Clone, Copy)]
struct Geom {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
}

impl Geom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = o * stride + k;
        if p < pad || p - pad >= extent {
            None
        } else {
            Some(p - pad)
        }
    }
}

/// Unfolds `channels` planes of `x` into a `[channels·kh·kw, ho·wo]` matrix.
fn im2col<T: Scalar>(x: &[T], channels: usize, g: Geom, col: &mut [T]) {
    let plane = g.h * g.w;
    let npos = g.ho * g.wo;
    for c in 0..channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match Geom::src(oy, ki, g.stride, g.ph, g.h) {
                        None => line.fill(T::ZERO),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match Geom::src(ox, kj, g.stride, g.pw, g.w) {
                                    Some(ix) => src[iy * g.w + ix],
                                    None => T::ZERO,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto the planes of `dx`.
fn col2im<T: Scalar>(col: &[T], channels: usize, g: Geom, dx: &mut [T]) {
    let plane = g.h * g.w;
    let npos = g.ho * g.wo;
    for c in 0..channels {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let Some(iy) = Geom::src(oy, ki, g.stride, g.ph, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        if let Some(ix) = Geom::src(ox, kj, g.stride, g.pw, g.w) {
                            dst[iy * g.w + ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], b: usize, c: usize, g: Geom, out: &mut [T]) {
    let (plane, oplane, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for n in 0..b {
        for ch in 0..c {
            let src = &x[(n * c + ch) * plane..][..plane];
            let dst = &mut out[(n * c + ch) * oplane..][..oplane];
            let wk = &w[ch * kk..][..kk];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = wk[ki * g.kw + kj];
                    for oy in 0..g.ho {
                        let Some(iy) = Geom::src(oy, ki, g.stride, g.ph, g.h) else {
                            continue;
                        };
                        let srow = &src[iy * g.w..][..g.w];
                        let drow = &mut dst[oy * g.wo..][..g.wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(ix) = Geom::src(ox, kj, g.stride, g.pw, g.w) {
                                *d += wv * srow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    b: usize,
    c: usize,
    g: Geom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (plane, oplane, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..b {
        for ch in 0..c {
            let src = &x[(n * c + ch) * plane..][..plane];
            let go = &gout[(n * c + ch) * oplane..][..oplane];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let widx = ch * kk + ki * g.kw + kj;
                    let wv = w[widx];
                    let mut acc = T::ZERO;
                    for oy in 0..g.ho {
                        let Some(iy) = Geom::src(oy, ki, g.stride, g.ph, g.h) else {
                            continue;
                        };
                        for ox in 0..g.wo {
                            if let Some(ix) = Geom::src(ox, kj, g.stride, g.pw, g.w) {
                                let gv = go[oy * g.wo + ox];
                                acc += gv * src[iy * g.w + ix];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[(n * c + ch) * plane + iy * g.w + ix] += gv * wv;
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// 2-d cross-correlation over an NCHW input.
    pub fn conv2d(&self, spec: &ConvSpec, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        spec.validate()?;
        let (b, c, h, w) = self.dims4_for("conv2d")?;
        if c != spec.in_channels {
            return Err(mismatch("conv2d", "input channels", spec.in_channels, c));
        }
        let ws = spec.weight_shape();
        if weight.shape() != ws {
            let got = weight.shape();
            if got.len() != 4 {
                return Err(TensorError::Rank {
                    op: "conv2d",
                    expected: 4,
                    got: got.to_vec(),
                });
            }
            let names = ["weight out channels", "weight in channels per group", "kernel height", "kernel width"];
            let d = (0..4).find(|&i| got[i] != ws[i]).unwrap_or(0);
            return Err(mismatch("conv2d", names[d], ws[d], got[d]));
        }
        match (spec.bias, bias) {
            (true, Some(bt)) if bt.numel() != spec.out_channels => {
                return Err(mismatch("conv2d", "bias length", spec.out_channels, bt.numel()))
            }
            (true, None) => return Err(invalid("conv2d", "spec requires a bias tensor")),
            (false, Some(_)) => return Err(invalid("conv2d", "bias given for a bias-free spec")),
            _ => {}
        }
        let (ho, wo) = spec.output_hw(h, w)?;
        let g = Geom {
            h,
            w,
            ho,
            wo,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            stride: spec.stride,
            ph: spec.padding.0,
            pw: spec.padding.1,
        };
        let cout = spec.out_channels;
        let oplane = ho * wo;
        let mut out = vec![T::ZERO; b * cout * oplane];
        let x = self.data();
        let wd = weight.data();

        if spec.is_depthwise() {
            depthwise_forward(x, wd, b, c, g, &mut out);
        } else {
            let groups = spec.groups;
            let (cg_in, cg_out) = (c / groups, cout / groups);
            let krows = cg_in * g.kh * g.kw;
            let mut col = if g.pointwise() { Vec::new() } else { vec![T::ZERO; krows * oplane] };
            for n in 0..b {
                for gi in 0..groups {
                    let xin = &x[(n * c + gi * cg_in) * h * w..][..cg_in * h * w];
                    let cols: &[T] = if g.pointwise() {
                        xin
                    } else {
                        im2col(xin, cg_in, g, &mut col);
                        &col
                    };
                    let dst = &mut out[(n * cout + gi * cg_out) * oplane..][..cg_out * oplane];
                    let wg = &wd[gi * cg_out * krows..][..cg_out * krows];
                    T::gemm(
                        cg_out, krows, oplane, T::ONE, wg, krows as isize, 1, cols, oplane as isize, 1,
                        T::ZERO, dst, oplane as isize, 1,
                    );
                }
            }
        }
        if let Some(bt) = bias {
            let bd = bt.data();
            for n in 0..b {
                for (co, &bv) in bd.iter().enumerate() {
                    out[(n * cout + co) * oplane..][..oplane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }

        let spec = *spec;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        Ok(Tensor::from_op("conv2d", vec![b, cout, ho, wo], out, parents, move |ctx| {
            let x = ctx.parents[0].data();
            let wd = ctx.parents[1].data();
            let gout = ctx.grad;
            let mut dx = ctx.needs(0).then(|| vec![T::ZERO; x.len()]);
            let mut dw = ctx.needs(1).then(|| vec![T::ZERO; wd.len()]);
            if spec.is_depthwise() {
                depthwise_backward(x, wd, gout, b, c, g, dx.as_deref_mut(), dw.as_deref_mut());
            } else {
                let groups = spec.groups;
                let (cg_in, cg_out) = (c / groups, cout / groups);
                let krows = cg_in * g.kh * g.kw;
                let pointwise = g.pointwise();
                let mut col = if pointwise { Vec::new() } else { vec![T::ZERO; krows * oplane] };
                let mut dcol = if pointwise || dx.is_none() { Vec::new() } else { vec![T::ZERO; krows * oplane] };
                for n in 0..b {
                    for gi in 0..groups {
                        let go = &gout[(n * cout + gi * cg_out) * oplane..][..cg_out * oplane];
                        let wg = &wd[gi * cg_out * krows..][..cg_out * krows];
                        if let Some(dw) = dw.as_mut() {
                            let xin = &x[(n * c + gi * cg_in) * h * w..][..cg_in * h * w];
                            let cols: &[T] = if pointwise {
                                xin
                            } else {
                                im2col(xin, cg_in, g, &mut col);
                                &col
                            };
                            // dW_g += dY_g · colᵀ
                            T::gemm(
                                cg_out, oplane, krows, T::ONE, go, oplane as isize, 1, cols, 1, oplane as isize,
                                T::ONE, &mut dw[gi * cg_out * krows..][..cg_out * krows], krows as isize, 1,
                            );
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dxin = &mut dx[(n * c + gi * cg_in) * h * w..][..cg_in * h * w];
                            // dcol = W_gᵀ · dY_g
                            if pointwise {
                                T::gemm(
                                    krows, cg_out, oplane, T::ONE, wg, 1, krows as isize, go, oplane as isize, 1,
                                    T::ONE, dxin, oplane as isize, 1,
                                );
                            } else {
                                T::gemm(
                                    krows, cg_out, oplane, T::ONE, wg, 1, krows as isize, go, oplane as isize, 1,
                                    T::ZERO, &mut dcol, oplane as isize, 1,
                                );
                                col2im(&dcol, cg_in, g, dxin);
                            }
                        }
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if ctx.parents.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut db = vec![T::ZERO; cout];
                    for n in 0..b {
                        for (co, d) in db.iter_mut().enumerate() {
                            *d += gout[(n * cout + co) * oplane..][..oplane].iter().copied().sum::<T>();
                        }
                    }
                    db
                }));
            }
            grads
        }))
    }

    /// Zero-padded 1-d cross-correlation along the channel axis of a
    /// `[B, C, 1, 1]` (or `[B, C]`) descriptor, odd kernel length.
    pub fn channel_conv1d(&self, kernel: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c) = match self.shape() {
            &[b, c] | &[b, c, 1, 1] => (b, c),
            s => return Err(invalid("channel_conv1d", format!("expected [B,C,1,1], got {s:?}"))),
        };
        let k = kernel.numel();
        if k % 2 == 0 || kernel.ndim() != 1 {
            return Err(invalid("channel_conv1d", format!("kernel must be 1-d with odd length, got {:?}", kernel.shape())));
        }
        let pad = (k - 1) / 2;
        let tap = move |ch: usize, j: usize| -> Option<usize> {
            let p = ch + j;
            (p >= pad && p - pad < c).then(|| p - pad)
        };
        let x = self.data();
        let wk = kernel.data();
        let mut out = vec![T::ZERO; b * c];
        for n in 0..b {
            for ch in 0..c {
                let mut acc = T::ZERO;
                for (j, &wv) in wk.iter().enumerate() {
                    if let Some(src) = tap(ch, j) {
                        acc += wv * x[n * c + src];
                    }
                }
                out[n * c + ch] = acc;
            }
        }
        Ok(Tensor::from_op(
            "channel_conv1d",
            self.shape().to_vec(),
            out,
            vec![self.clone(), kernel.clone()],
            move |ctx| {
                let x = ctx.parents[0].data();
                let wk = ctx.parents[1].data();
                let mut dx = ctx.needs(0).then(|| vec![T::ZERO; x.len()]);
                let mut dw = ctx.needs(1).then(|| vec![T::ZERO; wk.len()]);
                for n in 0..b {
                    for ch in 0..c {
                        let gv = ctx.grad[n * c + ch];
                        for (j, &wv) in wk.iter().enumerate() {
                            if let Some(src) = tap(ch, j) {
                                if let Some(dx) = dx.as_mut() {
                                    dx[n * c + src] += wv * gv;
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[j] += x[n * c + src] * gv;
                                }
                            }
                        }
                    }
                }
                vec![dx, dw]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let spec = ConvSpec::new(1, 1, 3).padding(1).bias(false);
        let y = x.conv2d(&spec, &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
    }

    #[test]
    fn depthwise_7x7_preserves_extents() {
        let spec = ConvSpec::depthwise(128, 7).bias(true);
        let x = Tensor::<f32>::zeros(&[1, 128, 12, 39]);
        let w = Tensor::<f32>::zeros(&spec.weight_shape());
        let b = Tensor::<f32>::zeros(&[128]);
        let y = x.conv2d(&spec, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[1, 128, 12, 39]);
    }

    #[test]
    fn wrong_weight_shape_names_dimension() {
        let spec = ConvSpec::new(4, 8, 3).bias(false);
        let x = Tensor::<f32>::zeros(&[1, 4, 5, 5]);
        let w = Tensor::<f32>::zeros(&[8, 4, 3, 5]);
        let err = x.conv2d(&spec, &w, None).unwrap_err();
        assert!(err.to_string().contains("kernel width"), "{err}");
        let x = Tensor::<f32>::zeros(&[1, 3, 5, 5]);
        let err = x.conv2d(&spec, &Tensor::zeros(&spec.weight_shape()), None).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn output_extent_formula() {
        for (h, k, s, p) in [(7, 3, 2, 1), (8, 3, 2, 1), (12, 7, 1, 3), (5, 1, 1, 0), (9, 5, 2, 2)] {
            let spec = ConvSpec::new(1, 1, k).stride(s).padding(p);
            let (ho, wo) = spec.output_hw(h, h + 1).unwrap();
            assert_eq!(ho, (h + 2 * p - k) / s + 1);
            assert_eq!(wo, (h + 1 + 2 * p - k) / s + 1);
        }
    }

    #[test]
    fn channel_conv1d_zero_pads() {
        let x = Tensor::<f64>::from_vec(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::<f64>::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let y = x.channel_conv1d(&k).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
    }
}
