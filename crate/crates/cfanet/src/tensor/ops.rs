//! Differentiable operations. Each op validates shapes, computes its output
//! eagerly, and (when any input is tracked) records a backward rule that
//! maps the output gradient to per-parent contributions.

use std::sync::Arc;

use super::{Result, Scalar, Shape, Tape, Tensor, TensorError};

/// Spatial parameters of a convolution. Stride is fixed at 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, dilation: usize, padding: usize) -> Self {
        ConvSpec {
            kernel,
            dilation,
            padding,
        }
    }

    /// Same-size padding for odd kernels: `dilation * (kernel - 1) / 2`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            kernel,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    /// Output length along one spatial axis, or `None` if non-positive.
    fn out_len(&self, in_len: usize) -> Option<usize> {
        let reach = self.dilation * (self.kernel - 1);
        (in_len + 2 * self.padding).checked_sub(reach).filter(|&v| v > 0)
    }
}

/// Valid output range `[lo, hi)` for one kernel tap with input offset
/// `k_off`, so that `out + k_off` stays inside `[0, in_len)`.
fn tap_range(k_off: isize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = (-k_off).max(0) as usize;
    let hi = (in_len as isize - k_off).min(out_len as isize).max(lo as isize) as usize;
    (lo, hi)
}

fn conv_forward<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: &[T],
    spec: ConvSpec,
    os: Shape,
) -> Vec<T> {
    let (h, wid) = (xs.h, xs.w);
    let (oh, ow) = (os.h, os.w);
    let k = spec.kernel;
    let mut out = vec![T::zero(); os.numel()];
    for n in 0..xs.n {
        for o in 0..ws.n {
            let out_plane = &mut out[(n * ws.n + o) * oh * ow..][..oh * ow];
            out_plane.fill(bias[o]);
            for i in 0..ws.c {
                let in_plane = &x[(n * xs.c + i) * h * wid..][..h * wid];
                let w_base = (o * ws.c + i) * k * k;
                for ky in 0..k {
                    let y_off = (ky * spec.dilation) as isize - spec.padding as isize;
                    let (oy0, oy1) = tap_range(y_off, h, oh);
                    for kx in 0..k {
                        let x_off = (kx * spec.dilation) as isize - spec.padding as isize;
                        let (ox0, ox1) = tap_range(x_off, wid, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = w[w_base + ky * k + kx];
                        for oy in oy0..oy1 {
                            let iy = (oy as isize + y_off) as usize;
                            let ix0 = (ox0 as isize + x_off) as usize;
                            let orow = &mut out_plane[oy * ow + ox0..oy * ow + ox1];
                            let irow = &in_plane[iy * wid + ix0..iy * wid + ix0 + (ox1 - ox0)];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * *iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_grad_input<T: Scalar>(
    gout: &[T],
    os: Shape,
    w: &[T],
    ws: Shape,
    spec: ConvSpec,
    xs: Shape,
) -> Vec<T> {
    let (h, wid) = (xs.h, xs.w);
    let (oh, ow) = (os.h, os.w);
    let k = spec.kernel;
    let mut gin = vec![T::zero(); xs.numel()];
    for n in 0..xs.n {
        for o in 0..ws.n {
            let g_plane = &gout[(n * ws.n + o) * oh * ow..][..oh * ow];
            for i in 0..ws.c {
                let gin_plane = &mut gin[(n * xs.c + i) * h * wid..][..h * wid];
                let w_base = (o * ws.c + i) * k * k;
                for ky in 0..k {
                    let y_off = (ky * spec.dilation) as isize - spec.padding as isize;
                    let (oy0, oy1) = tap_range(y_off, h, oh);
                    for kx in 0..k {
                        let x_off = (kx * spec.dilation) as isize - spec.padding as isize;
                        let (ox0, ox1) = tap_range(x_off, wid, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = w[w_base + ky * k + kx];
                        for oy in oy0..oy1 {
                            let iy = (oy as isize + y_off) as usize;
                            let ix0 = (ox0 as isize + x_off) as usize;
                            let grow = &g_plane[oy * ow + ox0..oy * ow + ox1];
                            let girow =
                                &mut gin_plane[iy * wid + ix0..iy * wid + ix0 + (ox1 - ox0)];
                            for (gi, gv) in girow.iter_mut().zip(grow) {
                                *gi += wv * *gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

fn conv_grad_weight<T: Scalar>(
    gout: &[T],
    os: Shape,
    x: &[T],
    xs: Shape,
    ws: Shape,
    spec: ConvSpec,
) -> Vec<T> {
    let (h, wid) = (xs.h, xs.w);
    let (oh, ow) = (os.h, os.w);
    let k = spec.kernel;
    let mut gw = vec![T::zero(); ws.numel()];
    for n in 0..xs.n {
        for o in 0..ws.n {
            let g_plane = &gout[(n * ws.n + o) * oh * ow..][..oh * ow];
            for i in 0..ws.c {
                let in_plane = &x[(n * xs.c + i) * h * wid..][..h * wid];
                let w_base = (o * ws.c + i) * k * k;
                for ky in 0..k {
                    let y_off = (ky * spec.dilation) as isize - spec.padding as isize;
                    let (oy0, oy1) = tap_range(y_off, h, oh);
                    for kx in 0..k {
                        let x_off = (kx * spec.dilation) as isize - spec.padding as isize;
                        let (ox0, ox1) = tap_range(x_off, wid, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = (oy as isize + y_off) as usize;
                            let ix0 = (ox0 as isize + x_off) as usize;
                            let grow = &g_plane[oy * ow + ox0..oy * ow + ox1];
                            let irow = &in_plane[iy * wid + ix0..iy * wid + ix0 + (ox1 - ox0)];
                            for (gv, iv) in grow.iter().zip(irow) {
                                acc += *gv * *iv;
                            }
                        }
                        gw[w_base + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

fn conv_grad_bias<T: Scalar>(gout: &[T], os: Shape) -> Vec<T> {
    let plane = os.h * os.w;
    let mut gb = vec![T::zero(); os.c];
    for n in 0..os.n {
        for c in 0..os.c {
            let g_plane = &gout[(n * os.c + c) * plane..][..plane];
            gb[c] += g_plane.iter().copied().sum();
        }
    }
    gb
}

/// Interpolation table for one axis of 2x bilinear upsampling with the
/// half-pixel-center convention: `src = (dst + 0.5) / 2 - 0.5`, clamped.
fn upsample_axis(in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * in_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// How a binary op's second operand lines up with the first.
enum Align {
    Equal,
    /// `b` has a single channel broadcast across all channels of `a`.
    BroadcastC,
}

fn align(context: &'static str, a: Shape, b: Shape, broadcast: bool) -> Result<Align> {
    if a == b {
        return Ok(Align::Equal);
    }
    if broadcast && b.c == 1 && a.n == b.n && a.h == b.h && a.w == b.w {
        return Ok(Align::BroadcastC);
    }
    Err(TensorError::ShapeMismatch {
        context,
        lhs: a,
        rhs: b,
    })
}

/// Sums a gradient of shape `s` over channels, producing shape `(n,1,h,w)`.
fn reduce_channels<T: Scalar>(g: &[T], s: Shape) -> Vec<T> {
    let plane = s.h * s.w;
    let mut out = vec![T::zero(); s.n * plane];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &g[(n * s.c + c) * plane..][..plane];
            let dst = &mut out[n * plane..][..plane];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += *v;
            }
        }
    }
    out
}

fn tracked2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.node().is_some() || b.node().is_some()
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution (cross-correlation), stride 1, with dilation and
    /// zero padding. `weight` is `(out_c, in_c, k, k)`, `bias` `(1, out_c, 1, 1)`.
    pub fn conv2d(
        &mut self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        spec: ConvSpec,
    ) -> Result<Tensor<T>> {
        let xs = input.shape();
        let ws = weight.shape();
        if spec.kernel == 0 || spec.dilation == 0 {
            return Err(TensorError::InvalidArgument(
                "conv2d kernel and dilation must be positive".into(),
            ));
        }
        if ws.h != spec.kernel || ws.w != spec.kernel {
            return Err(TensorError::InvalidArgument(format!(
                "conv2d weight {} does not match kernel size {}",
                ws, spec.kernel
            )));
        }
        if ws.c != xs.c {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d input channels vs weight",
                lhs: xs,
                rhs: ws,
            });
        }
        if bias.shape() != Shape::new(1, ws.n, 1, 1) {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d bias",
                lhs: bias.shape(),
                rhs: Shape::new(1, ws.n, 1, 1),
            });
        }
        let (oh, ow) = match (spec.out_len(xs.h), spec.out_len(xs.w)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(TensorError::InvalidArgument(format!(
                    "conv2d produces zero-sized spatial output for input {} with {:?}",
                    xs, spec
                )))
            }
        };
        let os = Shape::new(xs.n, ws.n, oh, ow);
        let data = conv_forward(input.data(), xs, weight.data(), ws, bias.data(), spec, os);
        let out = Tensor::new(os, data)?;

        let tracked = input.node().is_some() || weight.node().is_some() || bias.node().is_some();
        Ok(self.record_if(out, tracked, || {
            let x = input.payload();
            let w = weight.payload();
            let nodes = (input.node(), weight.node(), bias.node());
            Box::new(move |g: &[T]| {
                let mut contributions = Vec::new();
                if let Some(id) = nodes.0 {
                    contributions.push((id, conv_grad_input(g, os, &w, ws, spec, xs)));
                }
                if let Some(id) = nodes.1 {
                    contributions.push((id, conv_grad_weight(g, os, &x, xs, ws, spec)));
                }
                if let Some(id) = nodes.2 {
                    contributions.push((id, conv_grad_bias(g, os)));
                }
                contributions
            })
        }))
    }

    /// Doubles both spatial dimensions by bilinear interpolation with
    /// half-pixel centers and edge clamping. Constant maps stay constant.
    pub fn upsample_bilinear2x(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.shape();
        if s.h == 0 || s.w == 0 {
            return Err(TensorError::InvalidArgument(
                "upsample_bilinear2x requires non-empty spatial dims".into(),
            ));
        }
        let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
        let ytab = upsample_axis(s.h);
        let xtab = upsample_axis(s.w);
        let x = input.data();
        let mut out = Vec::with_capacity(os.numel());
        for plane in 0..s.n * s.c {
            let src = &x[plane * s.h * s.w..][..s.h * s.w];
            for &(y0, y1, fy) in &ytab {
                let fy = T::from_f64(fy);
                let r0 = &src[y0 * s.w..][..s.w];
                let r1 = &src[y1 * s.w..][..s.w];
                for &(x0, x1, fx) in &xtab {
                    let fx = T::from_f64(fx);
                    let a = r0[x0] + fx * (r0[x1] - r0[x0]);
                    let b = r1[x0] + fx * (r1[x1] - r1[x0]);
                    out.push(a + fy * (b - a));
                }
            }
        }
        let out = Tensor::new(os, out)?;
        Ok(self.record_if(out, input.node().is_some(), || {
            let node = input.node().unwrap();
            Box::new(move |g: &[T]| {
                let ytab = upsample_axis(s.h);
                let xtab = upsample_axis(s.w);
                let mut gin = vec![T::zero(); s.numel()];
                for plane in 0..s.n * s.c {
                    let dst = plane * s.h * s.w;
                    let gsrc = &g[plane * os.h * os.w..][..os.h * os.w];
                    for (oy, &(y0, y1, fy)) in ytab.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xtab.iter().enumerate() {
                            let gv = gsrc[oy * os.w + ox].as_f64();
                            gin[dst + y0 * s.w + x0] += T::from_f64(gv * (1.0 - fy) * (1.0 - fx));
                            gin[dst + y0 * s.w + x1] += T::from_f64(gv * (1.0 - fy) * fx);
                            gin[dst + y1 * s.w + x0] += T::from_f64(gv * fy * (1.0 - fx));
                            gin[dst + y1 * s.w + x1] += T::from_f64(gv * fy * fx);
                        }
                    }
                }
                vec![(node, gin)]
            })
        }))
    }

    /// 2x2 average pooling with stride 2. Odd trailing rows/columns are
    /// handled by replicate padding, so output dims are `ceil(dim / 2)`.
    pub fn avgpool2(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.shape();
        if s.h == 0 || s.w == 0 {
            return Err(TensorError::InvalidArgument(
                "avgpool2 requires non-empty spatial dims".into(),
            ));
        }
        let os = Shape::new(s.n, s.c, s.h.div_ceil(2), s.w.div_ceil(2));
        let quarter = T::from_f64(0.25);
        let x = input.data();
        let mut out = Vec::with_capacity(os.numel());
        for plane in 0..s.n * s.c {
            let src = &x[plane * s.h * s.w..][..s.h * s.w];
            for oy in 0..os.h {
                let y0 = 2 * oy;
                let y1 = (2 * oy + 1).min(s.h - 1);
                for ox in 0..os.w {
                    let x0 = 2 * ox;
                    let x1 = (2 * ox + 1).min(s.w - 1);
                    let sum = src[y0 * s.w + x0]
                        + src[y0 * s.w + x1]
                        + src[y1 * s.w + x0]
                        + src[y1 * s.w + x1];
                    out.push(sum * quarter);
                }
            }
        }
        let out = Tensor::new(os, out)?;
        Ok(self.record_if(out, input.node().is_some(), || {
            let node = input.node().unwrap();
            Box::new(move |g: &[T]| {
                let quarter = T::from_f64(0.25);
                let mut gin = vec![T::zero(); s.numel()];
                for plane in 0..s.n * s.c {
                    let dst = plane * s.h * s.w;
                    let gsrc = &g[plane * os.h * os.w..][..os.h * os.w];
                    for oy in 0..os.h {
                        let y0 = 2 * oy;
                        let y1 = (2 * oy + 1).min(s.h - 1);
                        for ox in 0..os.w {
                            let x0 = 2 * ox;
                            let x1 = (2 * ox + 1).min(s.w - 1);
                            let share = gsrc[oy * os.w + ox] * quarter;
                            gin[dst + y0 * s.w + x0] += share;
                            gin[dst + y0 * s.w + x1] += share;
                            gin[dst + y1 * s.w + x0] += share;
                            gin[dst + y1 * s.w + x1] += share;
                        }
                    }
                }
                vec![(node, gin)]
            })
        }))
    }

    pub fn relu(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let data = input
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor::new(input.shape(), data)?;
        Ok(self.record_if(out, input.node().is_some(), || {
            let node = input.node().unwrap();
            let x = input.payload();
            Box::new(move |g: &[T]| {
                let gin = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(node, gin)]
            })
        }))
    }

    pub fn sigmoid(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let data: Vec<T> = input
            .data()
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let out = Tensor::new(input.shape(), data)?;
        let y = out.payload();
        Ok(self.record_if(out, input.node().is_some(), || {
            let node = input.node().unwrap();
            Box::new(move |g: &[T]| {
                let gin = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                vec![(node, gin)]
            })
        }))
    }

    /// Elementwise sum. `b` may have a single channel broadcast across `a`.
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let sa = a.shape();
        match align("add", sa, b.shape(), true)? {
            Align::Equal => {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&av, &bv)| av + bv)
                    .collect();
                let out = Tensor::new(sa, data)?;
                Ok(self.record_if(out, tracked2(a, b), || {
                    let nodes = (a.node(), b.node());
                    Box::new(move |g: &[T]| {
                        let mut contributions = Vec::new();
                        if let Some(id) = nodes.0 {
                            contributions.push((id, g.to_vec()));
                        }
                        if let Some(id) = nodes.1 {
                            contributions.push((id, g.to_vec()));
                        }
                        contributions
                    })
                }))
            }
            Align::BroadcastC => {
                let plane = sa.h * sa.w;
                let mut data = Vec::with_capacity(sa.numel());
                for n in 0..sa.n {
                    let brow = &b.data()[n * plane..][..plane];
                    for c in 0..sa.c {
                        let arow = &a.data()[(n * sa.c + c) * plane..][..plane];
                        data.extend(arow.iter().zip(brow).map(|(&av, &bv)| av + bv));
                    }
                }
                let out = Tensor::new(sa, data)?;
                Ok(self.record_if(out, tracked2(a, b), || {
                    let nodes = (a.node(), b.node());
                    Box::new(move |g: &[T]| {
                        let mut contributions = Vec::new();
                        if let Some(id) = nodes.0 {
                            contributions.push((id, g.to_vec()));
                        }
                        if let Some(id) = nodes.1 {
                            contributions.push((id, reduce_channels(g, sa)));
                        }
                        contributions
                    })
                }))
            }
        }
    }

    /// Elementwise difference of equal-shape tensors.
    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        align("sub", a.shape(), b.shape(), false)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&av, &bv)| av - bv)
            .collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.record_if(out, tracked2(a, b), || {
            let nodes = (a.node(), b.node());
            Box::new(move |g: &[T]| {
                let mut contributions = Vec::new();
                if let Some(id) = nodes.0 {
                    contributions.push((id, g.to_vec()));
                }
                if let Some(id) = nodes.1 {
                    contributions.push((id, g.iter().map(|&v| -v).collect()));
                }
                contributions
            })
        }))
    }

    /// Elementwise product. `b` may have a single channel broadcast across `a`.
    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let sa = a.shape();
        let broadcast = matches!(
            align("mul", sa, b.shape(), true)?,
            Align::BroadcastC
        );
        let plane = sa.h * sa.w;
        let mut data = Vec::with_capacity(sa.numel());
        if broadcast {
            for n in 0..sa.n {
                let brow = &b.data()[n * plane..][..plane];
                for c in 0..sa.c {
                    let arow = &a.data()[(n * sa.c + c) * plane..][..plane];
                    data.extend(arow.iter().zip(brow).map(|(&av, &bv)| av * bv));
                }
            }
        } else {
            data.extend(a.data().iter().zip(b.data()).map(|(&av, &bv)| av * bv));
        }
        let out = Tensor::new(sa, data)?;
        Ok(self.record_if(out, tracked2(a, b), || {
            let av = a.payload();
            let bv = b.payload();
            let nodes = (a.node(), b.node());
            Box::new(move |g: &[T]| {
                let mut contributions = Vec::new();
                if let Some(id) = nodes.0 {
                    let ga = if broadcast {
                        let mut ga = Vec::with_capacity(sa.numel());
                        for n in 0..sa.n {
                            let brow = &bv[n * plane..][..plane];
                            for c in 0..sa.c {
                                let grow = &g[(n * sa.c + c) * plane..][..plane];
                                ga.extend(grow.iter().zip(brow).map(|(&gv, &b1)| gv * b1));
                            }
                        }
                        ga
                    } else {
                        g.iter().zip(bv.iter()).map(|(&gv, &b1)| gv * b1).collect()
                    };
                    contributions.push((id, ga));
                }
                if let Some(id) = nodes.1 {
                    let prod: Vec<T> =
                        g.iter().zip(av.iter()).map(|(&gv, &a1)| gv * a1).collect();
                    let gb = if broadcast {
                        reduce_channels(&prod, sa)
                    } else {
                        prod
                    };
                    contributions.push((id, gb));
                }
                contributions
            })
        }))
    }

    /// Elementwise quotient of equal-shape tensors.
    pub fn div(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        align("div", a.shape(), b.shape(), false)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&av, &bv)| av / bv)
            .collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.record_if(out, tracked2(a, b), || {
            let av = a.payload();
            let bv = b.payload();
            let nodes = (a.node(), b.node());
            Box::new(move |g: &[T]| {
                let mut contributions = Vec::new();
                if let Some(id) = nodes.0 {
                    let ga = g.iter().zip(bv.iter()).map(|(&gv, &b1)| gv / b1).collect();
                    contributions.push((id, ga));
                }
                if let Some(id) = nodes.1 {
                    let gb = g
                        .iter()
                        .zip(av.iter().zip(bv.iter()))
                        .map(|(&gv, (&a1, &b1))| -gv * a1 / (b1 * b1))
                        .collect();
                    contributions.push((id, gb));
                }
                contributions
            })
        }))
    }

    /// Multiplication by a compile-time-constant scalar.
    pub fn scale(&mut self, input: &Tensor<T>, s: T) -> Result<Tensor<T>> {
        let data = input.data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(input.shape(), data)?;
        Ok(self.record_if(out, input.node().is_some(), || {
            let node = input.node().unwrap();
            Box::new(move |g: &[T]| vec![(node, g.iter().map(|&v| v * s).collect())])
        }))
    }

    /// Addition of a constant scalar to every element.
    pub fn add_scalar(&mut self, input: &Tensor<T>, s: T) -> Result<Tensor<T>> {
        let data = input.data().iter().map(|&v| v + s).collect();
        let out = Tensor::new(input.shape(), data)?;
        Ok(self.record_if(out, input.node().is_some(), || {
            let node = input.node().unwrap();
            Box::new(move |g: &[T]| vec![(node, g.to_vec())])
        }))
    }

    /// Softmax across the channel axis at every pixel, with max
    /// subtraction for numerical stability.
    pub fn channel_softmax(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.shape();
        let plane = s.h * s.w;
        let x = input.data();
        let mut data = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            for p in 0..plane {
                let base = n * s.c * plane + p;
                let mut m = x[base];
                for c in 1..s.c {
                    m = m.max(x[base + c * plane]);
                }
                let mut sum = T::zero();
                for c in 0..s.c {
                    let e = (x[base + c * plane] - m).exp();
                    data[base + c * plane] = e;
                    sum += e;
                }
                for c in 0..s.c {
                    data[base + c * plane] /= sum;
                }
            }
        }
        let out = Tensor::new(s, data)?;
        let y = out.payload();
        Ok(self.record_if(out, input.node().is_some(), || {
            let node = input.node().unwrap();
            Box::new(move |g: &[T]| {
                let mut gin = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    for p in 0..plane {
                        let base = n * s.c * plane + p;
                        let mut dot = T::zero();
                        for c in 0..s.c {
                            dot += g[base + c * plane] * y[base + c * plane];
                        }
                        for c in 0..s.c {
                            let i = base + c * plane;
                            gin[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                vec![(node, gin)]
            })
        }))
    }

    /// Per-pixel dot product of the channel axis with a constant weight
    /// vector, producing a single-channel map.
    pub fn channel_dot(&mut self, input: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
        let s = input.shape();
        if weights.len() != s.c {
            return Err(TensorError::InvalidArgument(format!(
                "channel_dot weights length {} does not match {} channels",
                weights.len(),
                s.c
            )));
        }
        let plane = s.h * s.w;
        let os = Shape::new(s.n, 1, s.h, s.w);
        let x = input.data();
        let mut data = vec![T::zero(); os.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let wv = weights[c];
                let src = &x[(n * s.c + c) * plane..][..plane];
                let dst = &mut data[n * plane..][..plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += wv * *v;
                }
            }
        }
        let out = Tensor::new(os, data)?;
        Ok(self.record_if(out, input.node().is_some(), || {
            let node = input.node().unwrap();
            let weights = weights.to_vec();
            Box::new(move |g: &[T]| {
                let mut gin = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    let grow = &g[n * plane..][..plane];
                    for c in 0..s.c {
                        let wv = weights[c];
                        let dst = &mut gin[(n * s.c + c) * plane..][..plane];
                        for (d, gv) in dst.iter_mut().zip(grow) {
                            *d = wv * *gv;
                        }
                    }
                }
                vec![(node, gin)]
            })
        }))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let total = input.data().iter().copied().sum();
        let out = Tensor::scalar(total);
        let s = input.shape();
        Ok(self.record_if(out, input.node().is_some(), || {
            let node = input.node().unwrap();
            Box::new(move |g: &[T]| vec![(node, vec![g[0]; s.numel()])])
        }))
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let n = T::from_f64(input.numel() as f64);
        let total: T = input.data().iter().copied().sum();
        let out = Tensor::scalar(total / n);
        let s = input.shape();
        Ok(self.record_if(out, input.node().is_some(), || {
            let node = input.node().unwrap();
            Box::new(move |g: &[T]| vec![(node, vec![g[0] / n; s.numel()])])
        }))
    }

    /// Mean binary cross-entropy between logits and 0/1 targets, computed
    /// in the numerically stable log-sum-exp form. Targets are constants.
    pub fn bce_with_logits(&mut self, logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
        align("bce_with_logits", logits.shape(), targets.shape(), false)?;
        let n = T::from_f64(logits.numel() as f64);
        let mut total = T::zero();
        for (&z, &t) in logits.data().iter().zip(targets.data()) {
            let pos = if z > T::zero() { z } else { T::zero() };
            total += pos - z * t + (T::one() + (-z.abs()).exp()).ln();
        }
        let out = Tensor::scalar(total / n);
        Ok(self.record_if(out, logits.node().is_some(), || {
            let node = logits.node().unwrap();
            let z = logits.payload();
            let t = targets.payload();
            Box::new(move |g: &[T]| {
                let scale = g[0] / n;
                let gin = z
                    .iter()
                    .zip(t.iter())
                    .map(|(&zv, &tv)| {
                        let s = if zv >= T::zero() {
                            T::one() / (T::one() + (-zv).exp())
                        } else {
                            let e = zv.exp();
                            e / (T::one() + e)
                        };
                        (s - tv) * scale
                    })
                    .collect();
                vec![(node, gin)]
            })
        }))
    }

    /// Mean pixelwise cross-entropy between `(n, k, h, w)` logits and a
    /// dense class-index target of length `n * h * w`. Softmax is taken
    /// over channels with max subtraction.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor<T>,
        classes: &[u8],
    ) -> Result<Tensor<T>> {
        let s = logits.shape();
        let plane = s.h * s.w;
        if classes.len() != s.n * plane {
            return Err(TensorError::InvalidArgument(format!(
                "class target length {} does not match {} pixels",
                classes.len(),
                s.n * plane
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| (c as usize) >= s.c) {
            return Err(TensorError::InvalidArgument(format!(
                "target class {} out of range for {} channels",
                bad, s.c
            )));
        }
        let x = logits.data();
        let npx = T::from_f64((s.n * plane) as f64);
        let mut total = T::zero();
        for n in 0..s.n {
            for p in 0..plane {
                let base = n * s.c * plane + p;
                let mut m = x[base];
                for c in 1..s.c {
                    m = m.max(x[base + c * plane]);
                }
                let mut sum = T::zero();
                for c in 0..s.c {
                    sum += (x[base + c * plane] - m).exp();
                }
                let cls = classes[n * plane + p] as usize;
                total += m + sum.ln() - x[base + cls * plane];
            }
        }
        let out = Tensor::scalar(total / npx);
        Ok(self.record_if(out, logits.node().is_some(), || {
            let node = logits.node().unwrap();
            let x = logits.payload();
            let classes: Arc<[u8]> = classes.into();
            Box::new(move |g: &[T]| {
                let scale = g[0] / npx;
                let mut gin = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    for p in 0..plane {
                        let base = n * s.c * plane + p;
                        let mut m = x[base];
                        for c in 1..s.c {
                            m = m.max(x[base + c * plane]);
                        }
                        let mut sum = T::zero();
                        for c in 0..s.c {
                            sum += (x[base + c * plane] - m).exp();
                        }
                        let cls = classes[n * plane + p] as usize;
                        for c in 0..s.c {
                            let i = base + c * plane;
                            let soft = (x[i] - m).exp() / sum;
                            let hot = if c == cls { T::one() } else { T::zero() };
                            gin[i] = (soft - hot) * scale;
                        }
                    }
                }
                vec![(node, gin)]
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, data).unwrap()
    }

    fn no_bias(oc: usize) -> Tensor<f32> {
        Tensor::zeros(Shape::new(1, oc, 1, 1))
    }

    /// Independent per-output-pixel convolution used to cross-check the
    /// range-optimized loops.
    fn naive_conv(
        x: &Tensor<f32>,
        w: &Tensor<f32>,
        b: &Tensor<f32>,
        spec: ConvSpec,
    ) -> Vec<f32> {
        let xs = x.shape();
        let ws = w.shape();
        let oh = xs.h + 2 * spec.padding - spec.dilation * (spec.kernel - 1);
        let ow = xs.w + 2 * spec.padding - spec.dilation * (spec.kernel - 1);
        let mut out = Vec::new();
        for n in 0..xs.n {
            for o in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        for i in 0..ws.c {
                            for ky in 0..spec.kernel {
                                for kx in 0..spec.kernel {
                                    let iy = oy as isize + (ky * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let ix = ox as isize + (kx * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize
                                    {
                                        continue;
                                    }
                                    acc += w.at(o, i, ky, kx)
                                        * x.at(n, i, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_ones_kernel_counts_neighborhood() {
        let mut tape = Tape::new();
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f32);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f32);
        let y = tape.conv2d(&x, &w, &no_bias(1), ConvSpec::same(3, 1)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(Shape::new(1, 1, 5, 5), |_, _, y, xx| {
            (y * 5 + xx) as f32 * 0.37 - 2.0
        });
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.data_mut()[4] = 1.0;
        let y = tape.conv2d(&x, &w, &no_bias(1), ConvSpec::same(3, 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_naive_oracle_across_specs() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(n, ic, oc, h, w, k, d) in &[
            (1, 1, 1, 4, 6, 3, 1),
            (2, 3, 2, 5, 5, 3, 1),
            (1, 2, 3, 7, 6, 3, 2),
            (1, 1, 2, 9, 9, 5, 1),
            (2, 2, 1, 6, 4, 1, 1),
        ] {
            for pad in 0..=2usize {
                let reach = d * (k - 1);
                if h + 2 * pad <= reach || w + 2 * pad <= reach {
                    continue;
                }
                let spec = ConvSpec::new(k, d, pad);
                let x = Tensor::from_fn(Shape::new(n, ic, h, w), |_, _, _, _| {
                    rng.gen_range(-1.0f32..1.0)
                });
                let wt = Tensor::from_fn(Shape::new(oc, ic, k, k), |_, _, _, _| {
                    rng.gen_range(-1.0f32..1.0)
                });
                let b = Tensor::from_fn(Shape::new(1, oc, 1, 1), |_, _, _, _| {
                    rng.gen_range(-1.0f32..1.0)
                });
                let mut tape = Tape::new();
                let y = tape.conv2d(&x, &wt, &b, spec).unwrap();
                let expect = naive_conv(&x, &wt, &b, spec);
                assert_eq!(y.data().len(), expect.len());
                for (a, e) in y.data().iter().zip(&expect) {
                    assert!((a - e).abs() <= 1e-5, "{} vs {} under {:?}", a, e, spec);
                }
            }
        }
    }

    #[test]
    fn conv_dilation_two_keeps_size_with_same_padding() {
        let mut tape = Tape::new();
        let x = Tensor::full(Shape::new(1, 1, 7, 7), 1.0f32);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f32);
        let y = tape.conv2d(&x, &w, &no_bias(1), ConvSpec::same(3, 2)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 7, 7));
        assert_eq!(y.at(0, 0, 3, 3), 9.0);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        assert!(matches!(
            tape.conv2d(&x, &w, &no_bias(1), ConvSpec::same(3, 1)),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let w = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let bad_bias = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 1));
        assert!(matches!(
            tape.conv2d(&x, &w, &bad_bias, ConvSpec::same(3, 1)),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_rejects_zero_sized_output() {
        let mut tape = Tape::new();
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        assert!(matches!(
            tape.conv2d(&x, &w, &no_bias(1), ConvSpec::new(3, 1, 0)),
            Err(TensorError::InvalidArgument(_))
        ));
    }

    /// Scalar reference for one upsampled coordinate.
    fn upsample_oracle(src: &[f32], len: usize, dst: usize) -> f32 {
        let s = ((dst as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        let f = (s - i0 as f64) as f32;
        src[i0] + f * (src[i1] - src[i0])
    }

    #[test]
    fn upsample_matches_scalar_oracle() {
        let mut tape = Tape::new();
        let x = t(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]);
        let y = tape.upsample_bilinear2x(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        for oy in 0..4 {
            let col0 = upsample_oracle(&[0.0, 2.0], 2, oy);
            let col1 = upsample_oracle(&[1.0, 3.0], 2, oy);
            for ox in 0..4 {
                let expect = upsample_oracle(&[col0, col1], 2, ox);
                assert!(
                    (y.at(0, 0, oy, ox) - expect).abs() < 1e-6,
                    "({}, {}): {} vs {}",
                    oy,
                    ox,
                    y.at(0, 0, oy, ox),
                    expect
                );
            }
        }
        let expect = [
            0.0, 0.25, 0.75, 1.0, 0.5, 0.75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2.0, 2.25, 2.75, 3.0,
        ];
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_preserves_constants_exactly() {
        let mut tape = Tape::new();
        let x = Tensor::full(Shape::new(1, 2, 3, 5), 0.7182817f32);
        let y = tape.upsample_bilinear2x(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7182817));
    }

    #[test]
    fn avgpool_examples() {
        let mut tape = Tape::new();
        let x = t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.avgpool2(&x).unwrap().data(), &[2.5]);

        let ramp = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| (y * 4 + x) as f32);
        assert_eq!(
            tape.avgpool2(&ramp).unwrap().data(),
            &[2.5, 4.5, 10.5, 12.5]
        );
    }

    #[test]
    fn avgpool_replicates_odd_edges() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, xx| (y * 3 + xx) as f32);
        let y = tape.avgpool2(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[2.0, 3.5, 6.5, 8.0]);
    }

    #[test]
    fn avgpool_conserves_mass_on_even_dims() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, _, _| rng.gen_range(0.0f32..1.0));
        let mut tape = Tape::new();
        let y = tape.avgpool2(&x).unwrap();
        let lhs = 4.0 * y.sum();
        let rhs = x.sum();
        assert!((lhs - rhs).abs() < 1e-6 * rhs.abs().max(1.0));
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::new();
        let x = t(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]);
        assert_eq!(tape.relu(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(tape.sigmoid(&Tensor::scalar(0.0f32)).unwrap().data(), &[0.5]);
        let s = tape.sigmoid(&Tensor::scalar(-30.0f32)).unwrap().data()[0];
        assert!(s > 0.0 && s < 1e-12);
        assert_eq!(tape.scale(&x, -2.0).unwrap().data(), &[2.0, 0.0, -4.0]);
        assert_eq!(tape.add_scalar(&x, 1.5).unwrap().data(), &[0.5, 1.5, 3.5]);
    }

    #[test]
    fn binary_ops_broadcast_single_channel() {
        let mut tape = Tape::new();
        let a = t(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(Shape::new(1, 1, 1, 2), vec![10.0, 20.0]);
        assert_eq!(tape.add(&a, &b).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(tape.mul(&a, &b).unwrap().data(), &[10.0, 40.0, 30.0, 80.0]);
        let c = t(Shape::new(1, 2, 1, 2), vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(tape.sub(&a, &c).unwrap().data(), &[0.0, 1.0, 1.0, 2.0]);
        assert_eq!(tape.div(&a, &c).unwrap().data(), &[1.0, 2.0, 1.5, 2.0]);
        assert!(matches!(
            tape.add(&a, &t(Shape::new(1, 1, 1, 3), vec![0.0; 3])),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            tape.div(&a, &b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_values_and_shift_invariance() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(Shape::new(1, 2, 1, 1), vec![0.3, 0.3]).unwrap();
        let y = tape.channel_softmax(&x).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);

        let x = Tensor::new(Shape::new(1, 2, 1, 1), vec![0.0, 3.0f64.ln()]).unwrap();
        let y = tape.channel_softmax(&x).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);

        let shifted = Tensor::new(Shape::new(1, 2, 1, 1), vec![7.5, 3.0f64.ln() + 7.5]).unwrap();
        let z = tape.channel_softmax(&shifted).unwrap();
        for (a, b) in y.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(Shape::new(2, 6, 3, 3), |_, _, _, _| rng.gen_range(-4.0f32..4.0));
        let mut tape = Tape::new();
        let y = tape.channel_softmax(&x).unwrap();
        let s = y.shape();
        for n in 0..s.n {
            for yy in 0..s.h {
                for xx in 0..s.w {
                    let sum: f32 = (0..s.c).map(|c| y.at(n, c, yy, xx)).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    assert!((0..s.c).all(|c| y.at(n, c, yy, xx) >= 0.0));
                }
            }
        }
    }

    #[test]
    fn channel_dot_weights_channels() {
        let mut tape = Tape::new();
        let x = t(Shape::new(1, 3, 1, 2), vec![1.0, 2.0, 10.0, 20.0, 100.0, 200.0]);
        let y = tape.channel_dot(&x, &[1.0, 0.5, 0.25]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 2));
        assert_eq!(y.data(), &[31.0, 62.0]);
        assert!(tape.channel_dot(&x, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.sum_all(&x).unwrap().item().unwrap(), 10.0);
        assert_eq!(tape.mean_all(&x).unwrap().item().unwrap(), 2.5);
    }

    #[test]
    fn bce_known_values() {
        let mut tape = Tape::<f64>::new();
        let z = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let t = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let loss = tape.bce_with_logits(&z, &t).unwrap().item().unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);

        let confident = Tensor::new(Shape::new(1, 1, 2, 2), vec![-20.0, 20.0, -20.0, 20.0]).unwrap();
        let loss = tape.bce_with_logits(&confident, &t).unwrap().item().unwrap();
        assert!(loss >= 0.0 && loss <= 1e-4);
    }

    #[test]
    fn softmax_ce_known_values() {
        let mut tape = Tape::<f64>::new();
        let z = Tensor::zeros(Shape::new(1, 6, 1, 2));
        let loss = tape.softmax_cross_entropy(&z, &[0, 3]).unwrap().item().unwrap();
        assert!((loss - 6.0f64.ln()).abs() < 1e-12);

        let mut sharp = Tensor::zeros(Shape::new(1, 6, 1, 1));
        sharp.data_mut()[2] = 25.0;
        let loss = tape.softmax_cross_entropy(&sharp, &[2]).unwrap().item().unwrap();
        assert!(loss >= 0.0 && loss <= 1e-4);

        assert!(matches!(
            tape.softmax_cross_entropy(&z, &[0, 6]),
            Err(TensorError::InvalidArgument(_))
        ));
        assert!(tape.softmax_cross_entropy(&z, &[0]).is_err());
    }

    #[test]
    fn backward_through_square_sum() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]), true);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[2.0, 4.0]);
    }
}
