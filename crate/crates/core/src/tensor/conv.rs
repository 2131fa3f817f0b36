//! Direct 2-D convolution kernels.
//!
//! Every output element is accumulated as `bias` followed by the kernel taps
//! in `(ky, kx)` order, input channels innermost within each tap. The order is
//! identical for all call sites, which keeps encoder and decoder entropy
//! parameters bit-identical.

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Static description of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            groups,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    /// Validates operand shapes and returns the output shape.
    pub fn output_shape(&self, input: Shape, weight: Shape, bias: Option<Shape>) -> Result<Shape> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: input,
            rhs: weight,
        };
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::Shape("conv2d needs stride ≥ 1 and groups ≥ 1".into()));
        }
        let (cout, cin_g, kh, kw) = (weight.n(), weight.c(), weight.h(), weight.w());
        if kh != kw || !input.c().is_multiple_of(self.groups) || cout % self.groups != 0 {
            return Err(mismatch());
        }
        if input.c() / self.groups != cin_g {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if b != Shape::new(1, cout, 1, 1) {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: weight,
                    rhs: b,
                });
            }
        }
        let oh = self.output_len(input.h(), kh).ok_or_else(mismatch)?;
        let ow = self.output_len(input.w(), kw).ok_or_else(mismatch)?;
        Ok(Shape::new(input.n(), cout, oh, ow))
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order; lets the compiler vectorise while staying deterministic.
#[inline]
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::ZERO; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = S::ZERO;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let quad = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (quad[0] + quad[2]) + (quad[1] + quad[3]) + tail
}

#[inline]
fn axpy<S: Real>(y: &mut [S], a: S, x: &[S]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Stride-1 convolution on a zero-padded copy of the input. Output rows are
/// laid out with the padded row pitch, so every tap is a single contiguous
/// `axpy`; the extra columns are discarded. Per output element the taps
/// are still summed in the documented order (padding taps add exact zeros).
struct Stride1 {
    n: usize,
    c: usize,
    ih: usize,
    iw: usize,
    ph: usize,
    pitch: usize,
    oh: usize,
    ow: usize,
    k: usize,
    pad: usize,
}

impl Stride1 {
    fn new(is: Shape, os: Shape, k: usize, pad: usize) -> Self {
        Stride1 {
            n: is.n(),
            c: is.c(),
            ih: is.h(),
            iw: is.w(),
            ph: is.h() + 2 * pad,
            pitch: is.w() + 2 * pad,
            oh: os.h(),
            ow: os.w(),
            k,
            pad,
        }
    }

    /// Span covering every valid output position in padded-pitch layout.
    fn span(&self) -> usize {
        (self.oh - 1) * self.pitch + self.ow
    }

    fn padded_plane(&self) -> usize {
        self.ph * self.pitch
    }

    fn pad_input<S: Real>(&self, idata: &[S], n: usize) -> Vec<S> {
        if self.pad == 0 {
            let len = self.c * self.ih * self.iw;
            return idata[n * len..(n + 1) * len].to_vec();
        }
        let pp = self.padded_plane();
        let mut xp = vec![S::ZERO; self.c * pp];
        for ci in 0..self.c {
            for y in 0..self.ih {
                let src = ((n * self.c + ci) * self.ih + y) * self.iw;
                let dst = ci * pp + (y + self.pad) * self.pitch + self.pad;
                xp[dst..dst + self.iw].copy_from_slice(&idata[src..src + self.iw]);
            }
        }
        xp
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<S: Real>(
        &self,
        idata: &[S],
        wdata: &[S],
        bias: Option<&[S]>,
        odata: &mut [S],
        cout: usize,
        cin_g: usize,
        groups: usize,
    ) {
        let (k, pp, span) = (self.k, self.padded_plane(), self.span());
        let cout_g = cout / groups;
        let mut acc = vec![S::ZERO; span];
        for n in 0..self.n {
            let xp = self.pad_input(idata, n);
            for co in 0..cout {
                let g = co / cout_g;
                acc.fill(bias.map_or(S::ZERO, |b| b[co]));
                for ky in 0..k {
                    for kx in 0..k {
                        let off = ky * self.pitch + kx;
                        for cl in 0..cin_g {
                            let ci = g * cin_g + cl;
                            let wv = wdata[((co * cin_g + cl) * k + ky) * k + kx];
                            axpy(&mut acc, wv, &xp[ci * pp + off..ci * pp + off + span]);
                        }
                    }
                }
                let obase = (n * cout + co) * self.oh * self.ow;
                for oy in 0..self.oh {
                    let row = &acc[oy * self.pitch..oy * self.pitch + self.ow];
                    odata[obase + oy * self.ow..obase + (oy + 1) * self.ow].copy_from_slice(row);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<S: Real>(
        &self,
        idata: &[S],
        wdata: &[S],
        gdata: &[S],
        mut gin: Option<&mut Tensor<S>>,
        mut gw: Option<&mut Tensor<S>>,
        cout: usize,
        cin_g: usize,
        groups: usize,
    ) {
        let (k, pp, span) = (self.k, self.padded_plane(), self.span());
        let cout_g = cout / groups;
        // output gradient in padded-pitch layout, zero in the extra columns
        let mut gpad = vec![S::ZERO; span];
        for n in 0..self.n {
            let xp = gw.is_some().then(|| self.pad_input(idata, n));
            let mut gxp = gin.is_some().then(|| vec![S::ZERO; self.c * pp]);
            for co in 0..cout {
                let g = co / cout_g;
                let gbase = (n * cout + co) * self.oh * self.ow;
                for oy in 0..self.oh {
                    gpad[oy * self.pitch..oy * self.pitch + self.ow]
                        .copy_from_slice(&gdata[gbase + oy * self.ow..gbase + (oy + 1) * self.ow]);
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let off = ky * self.pitch + kx;
                        for cl in 0..cin_g {
                            let ci = g * cin_g + cl;
                            let widx = ((co * cin_g + cl) * k + ky) * k + kx;
                            let range = ci * pp + off..ci * pp + off + span;
                            if let Some(gxp) = gxp.as_mut() {
                                axpy(&mut gxp[range.clone()], wdata[widx], &gpad);
                            }
                            if let (Some(gw), Some(xp)) = (gw.as_mut(), xp.as_ref()) {
                                gw.data_mut()[widx] += dot(&xp[range], &gpad);
                            }
                        }
                    }
                }
            }
            if let (Some(gin), Some(gxp)) = (gin.as_mut(), gxp) {
                let gd = gin.data_mut();
                for ci in 0..self.c {
                    for y in 0..self.ih {
                        let dst = ((n * self.c + ci) * self.ih + y) * self.iw;
                        let src = ci * pp + (y + self.pad) * self.pitch + self.pad;
                        axpy(&mut gd[dst..dst + self.iw], S::ONE, &gxp[src..src + self.iw]);
                    }
                }
            }
        }
    }
}

/// Range of output indices `o` for which `o*stride + tap - pad` is a valid
/// input index.
#[inline]
fn valid_range(out_len: usize, in_len: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + tap >= pad
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    // o*stride + tap - pad <= in_len - 1
    let limit = in_len + pad;
    let hi = if tap >= limit {
        0
    } else {
        ((limit - 1 - tap) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward<S: Real>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geo: ConvGeometry,
) -> Result<Tensor<S>> {
    let is = input.shape();
    let ws = weight.shape();
    let os = geo.output_shape(is, ws, bias.map(|b| b.shape()))?;
    let (cout, cin_g, k) = (ws.n(), ws.c(), ws.h());
    let cout_g = cout / geo.groups;
    let (ih, iw, oh, ow) = (is.h(), is.w(), os.h(), os.w());
    let (stride, pad) = (geo.stride, geo.padding);
    let mut out = Tensor::zeros(os);
    let idata = input.data();
    let wdata = weight.data();
    let odata = out.data_mut();
    if stride == 1 {
        let plan = Stride1::new(is, os, k, pad);
        plan.forward(idata, wdata, bias.map(|b| b.data()), odata, cout, cin_g, geo.groups);
        return Ok(out);
    }
    for n in 0..is.n() {
        for co in 0..cout {
            let g = co / cout_g;
            let obase = (n * cout + co) * oh * ow;
            let oplane = &mut odata[obase..obase + oh * ow];
            if let Some(b) = bias {
                let bv = b.data()[co];
                oplane.iter_mut().for_each(|v| *v = bv);
            }
            for ky in 0..k {
                let (oy0, oy1) = valid_range(oh, ih, ky, stride, pad);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(ow, iw, kx, stride, pad);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for cl in 0..cin_g {
                        let ci = g * cin_g + cl;
                        let wv = wdata[((co * cin_g + cl) * k + ky) * k + kx];
                        let ibase = (n * is.c() + ci) * ih * iw;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let irow = &idata[ibase + iy * iw..ibase + (iy + 1) * iw];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let off = ox0 + kx - pad;
                                let src = &irow[off..off + (ox1 - ox0)];
                                for (o, &x) in orow[ox0..ox1].iter_mut().zip(src) {
                                    *o += wv * x;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution. Each output slot is only computed when the
/// corresponding flag is set.
pub struct ConvGrads<S> {
    pub input: Option<Tensor<S>>,
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

pub fn conv2d_backward<S: Real>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    geo: ConvGeometry,
    want: [bool; 3],
) -> ConvGrads<S> {
    let is = input.shape();
    let ws = weight.shape();
    let os = grad_out.shape();
    let (cout, cin_g, k) = (ws.n(), ws.c(), ws.h());
    let cout_g = cout / geo.groups;
    let (ih, iw, oh, ow) = (is.h(), is.w(), os.h(), os.w());
    let (stride, pad) = (geo.stride, geo.padding);
    let idata = input.data();
    let wdata = weight.data();
    let gdata = grad_out.data();

    let mut gin = want[0].then(|| Tensor::zeros(is));
    let mut gw = want[1].then(|| Tensor::zeros(ws));
    let gb = want[2].then(|| {
        let mut b = Tensor::zeros(Shape::new(1, cout, 1, 1));
        for n in 0..is.n() {
            for co in 0..cout {
                let base = (n * cout + co) * oh * ow;
                let mut acc = S::ZERO;
                for &v in &gdata[base..base + oh * ow] {
                    acc += v;
                }
                b.data_mut()[co] += acc;
            }
        }
        b
    });

    if stride == 1 {
        let plan = Stride1::new(is, os, k, pad);
        plan.backward(idata, wdata, gdata, gin.as_mut(), gw.as_mut(), cout, cin_g, geo.groups);
        return ConvGrads {
            input: gin,
            weight: gw,
            bias: gb,
        };
    }

    for n in 0..is.n() {
        for co in 0..cout {
            let g = co / cout_g;
            let gbase = (n * cout + co) * oh * ow;
            let gplane = &gdata[gbase..gbase + oh * ow];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(oh, ih, ky, stride, pad);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(ow, iw, kx, stride, pad);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for cl in 0..cin_g {
                        let ci = g * cin_g + cl;
                        let widx = ((co * cin_g + cl) * k + ky) * k + kx;
                        let wv = wdata[widx];
                        let ibase = (n * is.c() + ci) * ih * iw;
                        let mut wacc = S::ZERO;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            if let Some(gin) = gin.as_mut() {
                                let irow = &mut gin.data_mut()[ibase + iy * iw..ibase + (iy + 1) * iw];
                                if stride == 1 {
                                    let off = ox0 + kx - pad;
                                    for (i, &gv) in irow[off..off + (ox1 - ox0)].iter_mut().zip(&grow[ox0..ox1]) {
                                        *i += wv * gv;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        irow[ox * stride + kx - pad] += wv * grow[ox];
                                    }
                                }
                            }
                            if gw.is_some() {
                                let irow = &idata[ibase + iy * iw..ibase + (iy + 1) * iw];
                                if stride == 1 {
                                    let off = ox0 + kx - pad;
                                    wacc += dot(&irow[off..off + (ox1 - ox0)], &grow[ox0..ox1]);
                                } else {
                                    for ox in ox0..ox1 {
                                        wacc += irow[ox * stride + kx - pad] * grow[ox];
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw.data_mut()[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    }
}
