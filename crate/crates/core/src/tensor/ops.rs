//! Layer primitives and their vector-Jacobian products.
//!
//! Convolutions use zero "same-odd" padding: a k×k kernel (k odd) is padded
//! by k/2 on every side, so stride 1 preserves extents and stride 2 yields
//! `ceil(n / 2)`. The transposed convolution is the adjoint of the strided
//! convolution with an output padding of `stride - 1`, which makes its
//! output exactly `stride` times the input extent.

use std::ops::Range;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Zero padding rule for odd square kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    /// `k / 2` zeros on all four sides.
    #[default]
    SameOdd,
}

impl Padding {
    fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::SameOdd => kernel / 2,
        }
    }
}

/// Index relation `big = small * stride + tap - pad` between the
/// full-resolution plane and the strided plane of a convolution.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    big: (usize, usize),
    small: (usize, usize),
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Small-plane positions whose partner along one axis is inside the big plane.
    fn valid(&self, small_len: usize, big_len: usize, tap: usize) -> Range<usize> {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // smallest i with i*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest i with i*s + off <= big_len - 1
        let hi_num = big_len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, small_len as isize) as usize;
        lo..hi.max(lo)
    }

    #[inline]
    fn big_index(&self, i: usize, tap: usize) -> usize {
        i * self.stride + tap - self.pad
    }

    /// `dst_small[oy, ox] += wv * src_big[big(oy), big(ox)]`
    fn gather<T: Real>(&self, dst: &mut [T], src: &[T], wv: T, ky: usize, kx: usize) {
        let (sh, sw) = self.small;
        let (bh, bw) = self.big;
        let rx = self.valid(sw, bw, kx);
        for oy in self.valid(sh, bh, ky) {
            let iy = self.big_index(oy, ky);
            let drow = &mut dst[oy * sw..(oy + 1) * sw];
            let srow = &src[iy * bw..(iy + 1) * bw];
            for ox in rx.clone() {
                drow[ox] += wv * srow[self.big_index(ox, kx)];
            }
        }
    }

    /// `dst_big[big(oy), big(ox)] += wv * src_small[oy, ox]`
    fn scatter<T: Real>(&self, dst: &mut [T], src: &[T], wv: T, ky: usize, kx: usize) {
        let (sh, sw) = self.small;
        let (bh, bw) = self.big;
        let rx = self.valid(sw, bw, kx);
        for oy in self.valid(sh, bh, ky) {
            let iy = self.big_index(oy, ky);
            let srow = &src[oy * sw..(oy + 1) * sw];
            let drow = &mut dst[iy * bw..(iy + 1) * bw];
            for ox in rx.clone() {
                drow[self.big_index(ox, kx)] += wv * srow[ox];
            }
        }
    }

    /// `sum big[big(oy), big(ox)] * small[oy, ox]`
    fn dot<T: Real>(&self, big: &[T], small: &[T], ky: usize, kx: usize) -> T {
        let (sh, sw) = self.small;
        let (bh, bw) = self.big;
        let rx = self.valid(sw, bw, kx);
        let mut acc = T::ZERO;
        for oy in self.valid(sh, bh, ky) {
            let iy = self.big_index(oy, ky);
            let srow = &small[oy * sw..(oy + 1) * sw];
            let brow = &big[iy * bw..(iy + 1) * bw];
            for ox in rx.clone() {
                acc += brow[self.big_index(ox, kx)] * srow[ox];
            }
        }
        acc
    }
}

fn check_kernel(w: &Tensor<impl Real>, op: &str) -> Result<[usize; 4]> {
    let dims = w.dims4()?;
    let [_, _, kh, kw] = dims;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::config(format!(
            "{op}: kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    Ok(dims)
}

fn check_bias(b: &Tensor<impl Real>, channels: usize, op: &str) -> Result<()> {
    if b.len() != channels {
        return Err(Error::config(format!(
            "{op}: bias has {} entries for {channels} output channels",
            b.len()
        )));
    }
    Ok(())
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.dims4()?;
    let [cout, wcin, k, _] = check_kernel(w, "conv2d")?;
    if wcin != cin {
        return Err(Error::config(format!(
            "conv2d: input has {cin} channels, kernel expects {wcin}"
        )));
    }
    check_bias(b, cout, "conv2d")?;
    if stride == 0 {
        return Err(Error::config("conv2d: stride must be positive"));
    }
    let p = pad.amount(k);
    let (oh, ow) = ((h + 2 * p - k) / stride + 1, (wd + 2 * p - k) / stride + 1);
    let geo = Geometry {
        big: (h, wd),
        small: (oh, ow),
        stride,
        pad: p,
    };
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![T::ZERO; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            let dst = &mut out[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
            dst.fill(b.data()[co]);
            for ci in 0..cin {
                let src = &xd[(bi * cin + ci) * h * wd..(bi * cin + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[((co * cin + ci) * k + ky) * k + kx];
                        geo.gather(dst, src, wv, ky, kx);
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

/// Returns `(dx, dw, db)` for [`conv2d`].
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: Padding,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, cin, h, wd] = x.dims4()?;
    let [cout, _, k, _] = check_kernel(w, "conv2d")?;
    let [_, _, oh, ow] = dy.dims4()?;
    let geo = Geometry {
        big: (h, wd),
        small: (oh, ow),
        stride,
        pad: pad.amount(k),
    };
    let (xd, wdat, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::ZERO; x.len()];
    let mut dw = vec![T::ZERO; w.len()];
    let mut db = vec![T::ZERO; cout];
    for bi in 0..n {
        for co in 0..cout {
            let g = &dyd[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
            db[co] += g.iter().copied().sum::<T>();
            for ci in 0..cin {
                let xo = (bi * cin + ci) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((co * cin + ci) * k + ky) * k + kx;
                        geo.scatter(&mut dx[xo..xo + h * wd], g, wdat[wi], ky, kx);
                        dw[wi] += geo.dot(&xd[xo..xo + h * wd], g, ky, kx);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(w.shape(), dw)?,
        Tensor::new(&[cout], db)?,
    ))
}

/// Transposed convolution with kernel layout `[Cin, Cout, k, k]`; output
/// extents are exactly `stride` times the input extents.
pub fn conv2d_transpose<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.dims4()?;
    let [wcin, cout, k, _] = check_kernel(w, "conv2d_transpose")?;
    if wcin != cin {
        return Err(Error::config(format!(
            "conv2d_transpose: input has {cin} channels, kernel expects {wcin}"
        )));
    }
    check_bias(b, cout, "conv2d_transpose")?;
    if stride == 0 {
        return Err(Error::config("conv2d_transpose: stride must be positive"));
    }
    let (oh, ow) = (h * stride, wd * stride);
    let geo = Geometry {
        big: (oh, ow),
        small: (h, wd),
        stride,
        pad: Padding::SameOdd.amount(k),
    };
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![T::ZERO; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            let dst = &mut out[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
            dst.fill(b.data()[co]);
            for ci in 0..cin {
                let src = &xd[(bi * cin + ci) * h * wd..(bi * cin + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[((ci * cout + co) * k + ky) * k + kx];
                        geo.scatter(dst, src, wv, ky, kx);
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

/// Returns `(dx, dw, db)` for [`conv2d_transpose`].
pub fn conv2d_transpose_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, cin, h, wd] = x.dims4()?;
    let [_, cout, k, _] = check_kernel(w, "conv2d_transpose")?;
    let (oh, ow) = (h * stride, wd * stride);
    let geo = Geometry {
        big: (oh, ow),
        small: (h, wd),
        stride,
        pad: Padding::SameOdd.amount(k),
    };
    let (xd, wdat, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::ZERO; x.len()];
    let mut dw = vec![T::ZERO; w.len()];
    let mut db = vec![T::ZERO; cout];
    for bi in 0..n {
        for co in 0..cout {
            let g = &dyd[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
            db[co] += g.iter().copied().sum::<T>();
            for ci in 0..cin {
                let xo = (bi * cin + ci) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((ci * cout + co) * k + ky) * k + kx;
                        geo.gather(&mut dx[xo..xo + h * wd], g, wdat[wi], ky, kx);
                        dw[wi] += geo.dot(g, &xd[xo..xo + h * wd], ky, kx);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(w.shape(), dw)?,
        Tensor::new(&[cout], db)?,
    ))
}

fn check_channel_params<T: Real>(x: &Tensor<T>, params: &[&Tensor<T>], op: &str) -> Result<usize> {
    let [_, c, _, _] = x.dims4()?;
    for p in params {
        if p.len() != c {
            return Err(Error::config(format!(
                "{op}: per-channel parameter has {} entries for {c} channels",
                p.len()
            )));
        }
    }
    Ok(c)
}

/// Applies `f(channel, value)` to every element of a 4-D tensor.
fn map_channels<T: Real>(x: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Tensor<T> {
    let [n, c, h, w] = x.dims4().expect("caller checked rank");
    let plane = h * w;
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            for v in &mut out.data_mut()[o..o + plane] {
                *v = f(ch, *v);
            }
        }
    }
    out
}

/// Per-channel sums of `f(channel, index)` over N, H, W, in a fixed order.
fn channel_sums<T: Real>(shape: [usize; 4], f: impl Fn(usize, usize) -> T) -> Vec<T> {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let mut acc = vec![T::ZERO; c];
    for b in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            let o = (b * c + ch) * plane;
            for i in o..o + plane {
                *a += f(ch, i);
            }
        }
    }
    acc
}

fn inv_std<T: Real>(var: &[T], eps: T) -> Result<Vec<T>> {
    if !(eps > T::ZERO) {
        return Err(Error::usage("batch norm eps must be > 0"));
    }
    var.iter()
        .map(|&v| {
            if v < T::ZERO || !v.is_finite() {
                Err(Error::data(format!("batch norm variance {v} is invalid")))
            } else {
                Ok(T::ONE / (v + eps).sqrt())
            }
        })
        .collect()
}

pub fn batchnorm_infer<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    check_channel_params(x, &[scale, shift, mean, var], "batchnorm")?;
    let is = inv_std(var.data(), eps)?;
    let (s, t, m) = (scale.data(), shift.data(), mean.data());
    Ok(map_channels(x, |c, v| s[c] * (v - m[c]) * is[c] + t[c]))
}

/// Returns `(dx, dscale, dshift)` for [`batchnorm_infer`].
pub fn batchnorm_infer_backward<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let dims = x.dims4()?;
    let is = inv_std(var.data(), eps)?;
    let (s, m) = (scale.data(), mean.data());
    let plane = dims[2] * dims[3];
    let chan = |i: usize| (i / plane) % dims[1];
    let dx = Tensor::new(
        x.shape(),
        dy.data()
            .iter()
            .enumerate()
            .map(|(i, &g)| g * s[chan(i)] * is[chan(i)])
            .collect(),
    )?;
    let (xd, dyd) = (x.data(), dy.data());
    let dscale = channel_sums(dims, |c, i| dyd[i] * (xd[i] - m[c]) * is[c]);
    let dshift = channel_sums(dims, |_, i| dyd[i]);
    Ok((dx, Tensor::new(&[dims[1]], dscale)?, Tensor::new(&[dims[1]], dshift)?))
}

/// Output of a training-mode batch norm: normalized tensor plus the batch
/// statistics (biased variance) used for it.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Real> {
    pub y: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<BatchStats<T>> {
    let dims = x.dims4()?;
    let c = check_channel_params(x, &[scale, shift], "batchnorm")?;
    let count = T::from_f64((dims[0] * dims[2] * dims[3]) as f64);
    let xd = x.data();
    let mean: Vec<T> = channel_sums(dims, |_, i| xd[i])
        .into_iter()
        .map(|s| s / count)
        .collect();
    let var: Vec<T> = channel_sums(dims, |ch, i| (xd[i] - mean[ch]) * (xd[i] - mean[ch]))
        .into_iter()
        .map(|s| s / count)
        .collect();
    let mean = Tensor::new(&[c], mean)?;
    let var = Tensor::new(&[c], var)?;
    let y = batchnorm_infer(x, scale, shift, &mean, &var, eps)?;
    Ok(BatchStats { y, mean, var })
}

/// Returns `(dx, dscale, dshift)` for [`batchnorm_train`], with gradients
/// flowing through the batch statistics.
pub fn batchnorm_train_backward<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    stats: &BatchStats<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let dims = x.dims4()?;
    let is = inv_std(stats.var.data(), eps)?;
    let (xd, dyd, m, s) = (x.data(), dy.data(), stats.mean.data(), scale.data());
    let count = T::from_f64((dims[0] * dims[2] * dims[3]) as f64);
    let xhat = |c: usize, i: usize| (xd[i] - m[c]) * is[c];
    let sum_dy = channel_sums(dims, |_, i| dyd[i]);
    let sum_dy_xhat = channel_sums(dims, |c, i| dyd[i] * xhat(c, i));
    let plane = dims[2] * dims[3];
    let dx: Vec<T> = (0..x.len())
        .map(|i| {
            let c = (i / plane) % dims[1];
            s[c] * is[c] / count * (count * dyd[i] - sum_dy[c] - xhat(c, i) * sum_dy_xhat[c])
        })
        .collect();
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(&[dims[1]], sum_dy_xhat)?,
        Tensor::new(&[dims[1]], sum_dy)?,
    ))
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::ZERO { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, slope: T, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v >= T::ZERO { g } else { slope * g })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape as x")
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::config(format!(
            "concat_channels: {:?} and {:?} differ outside the channel axis",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for bi in 0..n {
        data.extend_from_slice(&a.data()[bi * ca * plane..(bi + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    Tensor::new(&[n, ca + cb, h, w], data)
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::usage(format!(
            "mse: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let n = T::from_f64(a.len() as f64);
    let sum: T = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}
