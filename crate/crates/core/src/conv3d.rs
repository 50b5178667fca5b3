//! Direct-loop 3D convolutions over `N×C×D×H×W` volumes.
//!
//! "Convolution" here is cross-correlation (no kernel flip), the usual deep
//! learning convention: `y[o] = Σ_k w[k] · x[o + k − pad]`. The input
//! gradient is therefore a correlation of the upstream gradient with the
//! axis-reflected kernel. Padding is always zero fill.
//!
//! Loops run tap-major (kernel offset outermost, contiguous output rows
//! innermost). The order is fixed, so results are bitwise reproducible.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel kernel bank of shape `C×1×K×K×K` with odd `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseKernel {
    weights: Tensor,
    padding: [usize; 3],
}

impl DepthwiseKernel {
    /// Wraps `weights` with "same" padding `(K−1)/2` on every axis.
    pub fn new(weights: Tensor) -> Result<Self> {
        let k = kernel_size_of(&weights)?;
        let p = (k - 1) / 2;
        Ok(Self {
            weights,
            padding: [p; 3],
        })
    }

    pub fn with_padding(weights: Tensor, padding: [usize; 3]) -> Result<Self> {
        kernel_size_of(&weights)?;
        Ok(Self { weights, padding })
    }

    /// Kernel whose only nonzero tap is a 1 at the center of every channel.
    pub fn delta(channels: usize, k: usize) -> Result<Self> {
        check_odd(k)?;
        let mut w = Tensor::zeros(&[channels, 1, k, k, k]);
        let c = (k - 1) / 2;
        for ch in 0..channels {
            let off = w.offset(&[ch, 0, c, c, c]);
            w.data_mut()[off] = 1.0;
        }
        Self::new(w)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }

    pub fn padding(&self) -> [usize; 3] {
        self.padding
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn center(&self) -> usize {
        (self.kernel_size() - 1) / 2
    }
}

pub(crate) fn check_odd(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        Err(Error::EvenKernel(k))
    } else {
        Ok(())
    }
}

fn kernel_size_of(w: &Tensor) -> Result<usize> {
    let s = w.shape();
    if s.len() != 5 || s[1] != 1 || s[2] != s[3] || s[3] != s[4] {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "depthwise kernel must be C×1×K×K×K".into(),
        });
    }
    check_odd(s[2])?;
    Ok(s[2])
}

pub(crate) fn volume_dims(x: &Tensor) -> Result<[usize; 5]> {
    match *x.shape() {
        [n, c, d, h, w] => Ok([n, c, d, h, w]),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "volume must be N×C×D×H×W".into(),
        }),
    }
}

fn out_len(input: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::InvalidShape {
            shape: vec![input, k, pad],
            reason: "kernel larger than padded input".into(),
        });
    }
    Ok((padded - k) / stride + 1)
}

/// Output positions `o < out` whose source `o·stride + k − pad` lies in
/// `[0, input)`.
fn valid(k: usize, pad: usize, stride: usize, input: usize, out: usize) -> Range<usize> {
    let (k, pad, s, input) = (k as isize, pad as isize, stride as isize, input as isize);
    // o·s ≥ pad − k  and  o·s ≤ input − 1 + pad − k
    let lo = (pad - k).max(0);
    let lo = (lo + s - 1) / s;
    let hi_num = input - 1 + pad - k;
    if hi_num < 0 {
        return 0..0;
    }
    let hi = (hi_num / s + 1).min(out as isize);
    if lo >= hi {
        0..0
    } else {
        lo as usize..hi as usize
    }
}

/// Depthwise cross-correlation, `same` shape when padding is `(K−1)/2`.
pub fn dwconv3d(x: &Tensor, k: &DepthwiseKernel) -> Result<Tensor> {
    depthwise_forward(x, k.weights(), k.padding())
}

/// Returns `(dX, dW)` for upstream gradient `upstream = ∂L/∂y`.
pub fn dwconv3d_backward(x: &Tensor, k: &DepthwiseKernel, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let dx = depthwise_backward_input(x.shape(), k.weights(), k.padding(), upstream)?;
    let dw = depthwise_backward_kernel(x, k.weights().shape(), k.padding(), upstream)?;
    Ok((dx, dw))
}

struct DwGeom {
    n: usize,
    c: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: usize,
    pad: [usize; 3],
}

fn dw_geometry(x_shape: &[usize], w: &Tensor, pad: [usize; 3]) -> Result<DwGeom> {
    let x_shape: [usize; 5] = x_shape.try_into().map_err(|_| Error::InvalidShape {
        shape: x_shape.to_vec(),
        reason: "volume must be N×C×D×H×W".into(),
    })?;
    let [n, c, d, h, wd] = x_shape;
    let k = kernel_size_of(w)?;
    if w.shape()[0] != c {
        return Err(Error::ChannelMismatch {
            input: c,
            kernel: w.shape()[0],
        });
    }
    let out = [
        out_len(d, k, pad[0], 1)?,
        out_len(h, k, pad[1], 1)?,
        out_len(wd, k, pad[2], 1)?,
    ];
    Ok(DwGeom {
        n,
        c,
        inp: [d, h, wd],
        out,
        k,
        pad,
    })
}

pub(crate) fn depthwise_forward(x: &Tensor, w: &Tensor, pad: [usize; 3]) -> Result<Tensor> {
    let g = dw_geometry(x.shape(), w, pad)?;
    let [d, h, wd] = g.inp;
    let [od, oh, ow] = g.out;
    let (in_vol, out_vol, k3) = (d * h * wd, od * oh * ow, g.k * g.k * g.k);
    let mut out = vec![0.0; g.n * g.c * out_vol];
    let (xs, ws) = (x.data(), w.data());
    for b in 0..g.n {
        for ch in 0..g.c {
            let xv = &xs[(b * g.c + ch) * in_vol..][..in_vol];
            let ov = &mut out[(b * g.c + ch) * out_vol..][..out_vol];
            let wk = &ws[ch * k3..][..k3];
            for kd in 0..g.k {
                let rd = valid(kd, g.pad[0], 1, d, od);
                for kh in 0..g.k {
                    let rh = valid(kh, g.pad[1], 1, h, oh);
                    for kw in 0..g.k {
                        let rw = valid(kw, g.pad[2], 1, wd, ow);
                        let wv = wk[(kd * g.k + kh) * g.k + kw];
                        let shift = kw as isize - g.pad[2] as isize;
                        for o_d in rd.clone() {
                            let i_d = o_d + kd - g.pad[0];
                            for o_h in rh.clone() {
                                let i_h = o_h + kh - g.pad[1];
                                let orow = &mut ov[(o_d * oh + o_h) * ow..][..ow];
                                let xrow = &xv[(i_d * h + i_h) * wd..][..wd];
                                for o_w in rw.clone() {
                                    orow[o_w] += wv * xrow[(o_w as isize + shift) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.c, od, oh, ow], out)?.check_finite("dwconv3d")
}

pub(crate) fn depthwise_backward_input(
    x_shape: &[usize],
    w: &Tensor,
    pad: [usize; 3],
    upstream: &Tensor,
) -> Result<Tensor> {
    let g = dw_geometry(x_shape, w, pad)?;
    let [d, h, wd] = g.inp;
    let [od, oh, ow] = g.out;
    if upstream.shape() != [g.n, g.c, od, oh, ow] {
        return Err(Error::shape("dwconv3d_backward", upstream.shape(), &[g.n, g.c, od, oh, ow]));
    }
    let (in_vol, out_vol, k3) = (d * h * wd, od * oh * ow, g.k * g.k * g.k);
    let mut dx = vec![0.0; g.n * g.c * in_vol];
    let (us, ws) = (upstream.data(), w.data());
    for b in 0..g.n {
        for ch in 0..g.c {
            let uv = &us[(b * g.c + ch) * out_vol..][..out_vol];
            let dv = &mut dx[(b * g.c + ch) * in_vol..][..in_vol];
            let wk = &ws[ch * k3..][..k3];
            for kd in 0..g.k {
                let rd = valid(kd, g.pad[0], 1, d, od);
                for kh in 0..g.k {
                    let rh = valid(kh, g.pad[1], 1, h, oh);
                    for kw in 0..g.k {
                        let rw = valid(kw, g.pad[2], 1, wd, ow);
                        let wv = wk[(kd * g.k + kh) * g.k + kw];
                        let shift = kw as isize - g.pad[2] as isize;
                        for o_d in rd.clone() {
                            let i_d = o_d + kd - g.pad[0];
                            for o_h in rh.clone() {
                                let i_h = o_h + kh - g.pad[1];
                                let urow = &uv[(o_d * oh + o_h) * ow..][..ow];
                                let drow = &mut dv[(i_d * h + i_h) * wd..][..wd];
                                for o_w in rw.clone() {
                                    drow[(o_w as isize + shift) as usize] += wv * urow[o_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)?.check_finite("dwconv3d_backward")
}

pub(crate) fn depthwise_backward_kernel(
    x: &Tensor,
    w_shape: &[usize],
    pad: [usize; 3],
    upstream: &Tensor,
) -> Result<Tensor> {
    let proto = Tensor::zeros(w_shape);
    let g = dw_geometry(x.shape(), &proto, pad)?;
    let [d, h, wd] = g.inp;
    let [od, oh, ow] = g.out;
    if upstream.shape() != [g.n, g.c, od, oh, ow] {
        return Err(Error::shape("dwconv3d_backward", upstream.shape(), &[g.n, g.c, od, oh, ow]));
    }
    let (in_vol, out_vol, k3) = (d * h * wd, od * oh * ow, g.k * g.k * g.k);
    let mut dw = vec![0.0; g.c * k3];
    let (xs, us) = (x.data(), upstream.data());
    for b in 0..g.n {
        for ch in 0..g.c {
            let xv = &xs[(b * g.c + ch) * in_vol..][..in_vol];
            let uv = &us[(b * g.c + ch) * out_vol..][..out_vol];
            for kd in 0..g.k {
                let rd = valid(kd, g.pad[0], 1, d, od);
                for kh in 0..g.k {
                    let rh = valid(kh, g.pad[1], 1, h, oh);
                    for kw in 0..g.k {
                        let rw = valid(kw, g.pad[2], 1, wd, ow);
                        let shift = kw as isize - g.pad[2] as isize;
                        let mut acc = 0.0;
                        for o_d in rd.clone() {
                            let i_d = o_d + kd - g.pad[0];
                            for o_h in rh.clone() {
                                let i_h = o_h + kh - g.pad[1];
                                let urow = &uv[(o_d * oh + o_h) * ow..][..ow];
                                let xrow = &xv[(i_d * h + i_h) * wd..][..wd];
                                for o_w in rw.clone() {
                                    acc += urow[o_w] * xrow[(o_w as isize + shift) as usize];
                                }
                            }
                        }
                        dw[ch * k3 + (kd * g.k + kh) * g.k + kw] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(w_shape.to_vec(), dw)?.check_finite("dwconv3d_backward")
}

/// Centers a `K_S³` kernel inside a `K_L³` zero field.
pub fn embed_kernel(small: &DepthwiseKernel, target: usize) -> Result<DepthwiseKernel> {
    check_odd(target)?;
    let ks = small.kernel_size();
    if ks > target {
        return Err(Error::KernelTooLarge { small: ks, large: target });
    }
    let c = small.channels();
    let off = (target - ks) / 2;
    let mut out = Tensor::zeros(&[c, 1, target, target, target]);
    for ch in 0..c {
        for i in 0..ks {
            for j in 0..ks {
                for l in 0..ks {
                    let v = small.weights().at(&[ch, 0, i, j, l]);
                    let o = out.offset(&[ch, 0, i + off, j + off, l + off]);
                    out.data_mut()[o] = v;
                }
            }
        }
    }
    DepthwiseKernel::new(out)
}

/// Extracts the central `size³` block of a kernel; adjoint of [`embed_kernel`].
pub fn crop_kernel(large: &DepthwiseKernel, size: usize) -> Result<DepthwiseKernel> {
    check_odd(size)?;
    let kl = large.kernel_size();
    if size > kl {
        return Err(Error::KernelTooLarge { small: size, large: kl });
    }
    let c = large.channels();
    let off = (kl - size) / 2;
    let mut out = Tensor::zeros(&[c, 1, size, size, size]);
    for ch in 0..c {
        for i in 0..size {
            for j in 0..size {
                for l in 0..size {
                    let v = large.weights().at(&[ch, 0, i + off, j + off, l + off]);
                    let o = out.offset(&[ch, 0, i, j, l]);
                    out.data_mut()[o] = v;
                }
            }
        }
    }
    DepthwiseKernel::new(out)
}

/// Geometry of a dense (channel-mixing) strided convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSpec {
    pub stride: usize,
    pub padding: usize,
}

struct DenseGeom {
    n: usize,
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: usize,
}

fn dense_geometry(x_shape: &[usize], w_shape: &[usize], spec: DenseSpec) -> Result<DenseGeom> {
    let [n, cin, d, h, wd]: [usize; 5] = x_shape.try_into().map_err(|_| Error::InvalidShape {
        shape: x_shape.to_vec(),
        reason: "volume must be N×C×D×H×W".into(),
    })?;
    let [cout, wcin, k, k2, k3]: [usize; 5] = w_shape.try_into().map_err(|_| Error::InvalidShape {
        shape: w_shape.to_vec(),
        reason: "dense kernel must be Cout×Cin×K×K×K".into(),
    })?;
    if k != k2 || k2 != k3 || spec.stride == 0 {
        return Err(Error::InvalidShape {
            shape: w_shape.to_vec(),
            reason: "dense kernel must be cubic with positive stride".into(),
        });
    }
    if wcin != cin {
        return Err(Error::ChannelMismatch { input: cin, kernel: wcin });
    }
    let out = [
        out_len(d, k, spec.padding, spec.stride)?,
        out_len(h, k, spec.padding, spec.stride)?,
        out_len(wd, k, spec.padding, spec.stride)?,
    ];
    Ok(DenseGeom {
        n,
        cin,
        cout,
        inp: [d, h, wd],
        out,
        k,
    })
}

/// Calls `f(out_flat, in_flat)` for every valid (output, input) spatial pair
/// at one kernel offset.
#[inline]
fn for_each_tap(
    g: &DenseGeom,
    spec: DenseSpec,
    (kd, kh, kw): (usize, usize, usize),
    mut f: impl FnMut(usize, usize),
) {
    let [d, h, wd] = g.inp;
    let [od, oh, ow] = g.out;
    let (s, p) = (spec.stride, spec.padding);
    let rd = valid(kd, p, s, d, od);
    let rh = valid(kh, p, s, h, oh);
    let rw = valid(kw, p, s, wd, ow);
    for o_d in rd {
        let i_d = o_d * s + kd - p;
        for o_h in rh.clone() {
            let i_h = o_h * s + kh - p;
            for o_w in rw.clone() {
                let i_w = o_w * s + kw - p;
                f((o_d * oh + o_h) * ow + o_w, (i_d * h + i_h) * wd + i_w);
            }
        }
    }
}

pub(crate) fn dense_forward(x: &Tensor, w: &Tensor, spec: DenseSpec) -> Result<Tensor> {
    let g = dense_geometry(x.shape(), w.shape(), spec)?;
    let in_vol: usize = g.inp.iter().product();
    let out_vol: usize = g.out.iter().product();
    let k3 = g.k * g.k * g.k;
    let mut out = vec![0.0; g.n * g.cout * out_vol];
    for b in 0..g.n {
        for co in 0..g.cout {
            let ov = &mut out[(b * g.cout + co) * out_vol..][..out_vol];
            for ci in 0..g.cin {
                let xv = &x.data()[(b * g.cin + ci) * in_vol..][..in_vol];
                let wk = &w.data()[(co * g.cin + ci) * k3..][..k3];
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let wv = wk[(kd * g.k + kh) * g.k + kw];
                            for_each_tap(&g, spec, (kd, kh, kw), |o, i| ov[o] += wv * xv[i]);
                        }
                    }
                }
            }
        }
    }
    let [od, oh, ow] = g.out;
    Tensor::new(vec![g.n, g.cout, od, oh, ow], out)?.check_finite("conv3d")
}

pub(crate) fn dense_backward_input(x_shape: &[usize], w: &Tensor, spec: DenseSpec, upstream: &Tensor) -> Result<Tensor> {
    let g = dense_geometry(x_shape, w.shape(), spec)?;
    let in_vol: usize = g.inp.iter().product();
    let out_vol: usize = g.out.iter().product();
    let k3 = g.k * g.k * g.k;
    let [od, oh, ow] = g.out;
    if upstream.shape() != [g.n, g.cout, od, oh, ow] {
        return Err(Error::shape("conv3d_backward", upstream.shape(), &[g.n, g.cout, od, oh, ow]));
    }
    let mut dx = vec![0.0; g.n * g.cin * in_vol];
    for b in 0..g.n {
        for ci in 0..g.cin {
            let dv = &mut dx[(b * g.cin + ci) * in_vol..][..in_vol];
            for co in 0..g.cout {
                let uv = &upstream.data()[(b * g.cout + co) * out_vol..][..out_vol];
                let wk = &w.data()[(co * g.cin + ci) * k3..][..k3];
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let wv = wk[(kd * g.k + kh) * g.k + kw];
                            for_each_tap(&g, spec, (kd, kh, kw), |o, i| dv[i] += wv * uv[o]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)?.check_finite("conv3d_backward")
}

pub(crate) fn dense_backward_kernel(x: &Tensor, w_shape: &[usize], spec: DenseSpec, upstream: &Tensor) -> Result<Tensor> {
    let g = dense_geometry(x.shape(), w_shape, spec)?;
    let in_vol: usize = g.inp.iter().product();
    let out_vol: usize = g.out.iter().product();
    let k3 = g.k * g.k * g.k;
    let [od, oh, ow] = g.out;
    if upstream.shape() != [g.n, g.cout, od, oh, ow] {
        return Err(Error::shape("conv3d_backward", upstream.shape(), &[g.n, g.cout, od, oh, ow]));
    }
    let mut dw = vec![0.0; g.cout * g.cin * k3];
    for b in 0..g.n {
        for co in 0..g.cout {
            let uv = &upstream.data()[(b * g.cout + co) * out_vol..][..out_vol];
            for ci in 0..g.cin {
                let xv = &x.data()[(b * g.cin + ci) * in_vol..][..in_vol];
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let mut acc = 0.0;
                            for_each_tap(&g, spec, (kd, kh, kw), |o, i| acc += uv[o] * xv[i]);
                            dw[(co * g.cin + ci) * k3 + (kd * g.k + kh) * g.k + kw] += acc;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(w_shape.to_vec(), dw)?.check_finite("conv3d_backward")
}

/// Dense strided convolution (`Cout×Cin×K³` kernel), no bias.
pub fn conv3d(x: &Tensor, w: &Tensor, spec: DenseSpec) -> Result<Tensor> {
    dense_forward(x, w, spec)
}

/// Nearest-neighbour upsampling by an integer factor on every spatial axis.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, d, h, w] = volume_dims(x)?;
    if factor == 0 {
        return Err(Error::Config("upsample factor must be positive".into()));
    }
    let (ud, uh, uw) = (d * factor, h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * ud * uh * uw);
    for nc in 0..n * c {
        let src = &x.data()[nc * d * h * w..][..d * h * w];
        for i in 0..ud {
            for j in 0..uh {
                let row = &src[((i / factor) * h + j / factor) * w..][..w];
                out.extend((0..uw).map(|l| row[l / factor]));
            }
        }
    }
    Tensor::new(vec![n, c, ud, uh, uw], out)
}

pub(crate) fn upsample_nearest_backward(x_shape: &[usize], factor: usize, upstream: &Tensor) -> Result<Tensor> {
    let [n, c, d, h, w]: [usize; 5] = x_shape.try_into().map_err(|_| Error::shape("upsample", x_shape, upstream.shape()))?;
    let (ud, uh, uw) = (d * factor, h * factor, w * factor);
    if upstream.shape() != [n, c, ud, uh, uw] {
        return Err(Error::shape("upsample_backward", upstream.shape(), &[n, c, ud, uh, uw]));
    }
    let mut dx = vec![0.0; n * c * d * h * w];
    for nc in 0..n * c {
        let up = &upstream.data()[nc * ud * uh * uw..][..ud * uh * uw];
        let dst = &mut dx[nc * d * h * w..][..d * h * w];
        for i in 0..ud {
            for j in 0..uh {
                for l in 0..uw {
                    dst[((i / factor) * h + j / factor) * w + l / factor] += up[(i * uh + j) * uw + l];
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}
