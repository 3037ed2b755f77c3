//! Block-DCT lossy image codec.
//!
//! Pipeline per image: full-range BT.601 YCbCr with 4:2:0 box-averaged
//! chroma, 8x8 orthonormal DCT, uniform quantization by `q * WEIGHTS[v][u]`,
//! zigzag scan, run-length symbols and one DEFLATE stream per plane.
//!
//! Plane symbol stream, blocks in raster order:
//!
//! ```text
//! dc_delta: signed varint   (difference to the previous block's DC level)
//! { run: u8 (0..=62), level: signed varint }*   (nonzero AC in zigzag order)
//! 64: u8                    (end of block)
//! ```
//!
//! Signed varints are zigzag-mapped to unsigned and written as LEB128.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const MAGIC: &[u8; 4] = b"BCI1";
pub const VERSION: u8 = 1;
pub const Q_MIN: f64 = 0.1;
pub const Q_MAX: f64 = 512.0;
pub const MAX_BISECTION_STEPS: usize = 40;

/// Frequency weights, indexed `[v][u]`: `1 + (u + v) / 2`.
pub const WEIGHTS: [[f64; 8]; 8] = {
    let mut w = [[0.0; 8]; 8];
    let mut v = 0;
    while v < 8 {
        let mut u = 0;
        while u < 8 {
            w[v][u] = 1.0 + 0.5 * (u + v) as f64;
            u += 1;
        }
        v += 1;
    }
    w
};

/// Raster index of the n-th coefficient in zigzag order.
pub const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

const EOB: u8 = 64;

/// One 8-bit sample plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Full-resolution luma, half-resolution chroma.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Planes {
    pub y: Plane,
    pub cb: Plane,
    pub cr: Plane,
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_ycbcr420(img: &RgbImage) -> Result<Planes> {
    let (w, h) = (img.width(), img.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::usage(format!("4:2:0 conversion needs even dimensions, got {w}x{h}")));
    }
    let mut y = Vec::with_capacity(w * h);
    let mut cb = vec![0.0; w * h];
    let mut cr = vec![0.0; w * h];
    for py in 0..h {
        for px in 0..w {
            let [r, g, b] = img.pixel(px, py).map(f64::from);
            y.push(to_u8(0.299 * r + 0.587 * g + 0.114 * b));
            cb[py * w + px] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
            cr[py * w + px] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
        }
    }
    let (cw, ch) = (w / 2, h / 2);
    let subsample = |full: &[f64]| {
        let mut out = Vec::with_capacity(cw * ch);
        for cy in 0..ch {
            for cx in 0..cw {
                let o = 2 * cy * w + 2 * cx;
                out.push(to_u8(0.25 * (full[o] + full[o + 1] + full[o + w] + full[o + w + 1])));
            }
        }
        Plane { width: cw, height: ch, data: out }
    };
    Ok(Planes {
        y: Plane { width: w, height: h, data: y },
        cb: subsample(&cb),
        cr: subsample(&cr),
    })
}

pub fn ycbcr420_to_rgb(p: &Planes) -> Result<RgbImage> {
    let (w, h) = (p.y.width, p.y.height);
    for c in [&p.cb, &p.cr] {
        if c.width * 2 != w || c.height * 2 != h {
            return Err(Error::usage("chroma planes must be half the luma size"));
        }
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let ci = (y / 2) * (w / 2) + x / 2;
        let l = p.y.data[y * w + x] as f64;
        let cb = p.cb.data[ci] as f64 - 128.0;
        let cr = p.cr.data[ci] as f64 - 128.0;
        [
            to_u8(l + 1.402 * cr),
            to_u8(l - 0.344136 * cb - 0.714136 * cr),
            to_u8(l + 1.772 * cb),
        ]
    }))
}

fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: std::sync::OnceLock<[[f64; 8]; 8]> = std::sync::OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; 8]; 8];
        for (u, row) in c.iter_mut().enumerate() {
            let s = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = s * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        c
    })
}

/// Orthonormal 2-D type-II DCT of a row-major 8x8 block.
pub fn dct8(block: &[f64; 64]) -> [f64; 64] {
    let c = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| c[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| c[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub fn idct8(coef: &[f64; 64]) -> [f64; 64] {
    let c = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| c[v][y] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| c[u][x] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn put_varint(out: &mut Vec<u8>, v: i64) {
    let mut u = ((v << 1) ^ (v >> 63)) as u64;
    while u >= 0x80 {
        out.push((u as u8) | 0x80);
        u >>= 7;
    }
    out.push(u as u8);
}

fn get_varint(buf: &[u8], pos: &mut usize) -> std::result::Result<i64, &'static str> {
    let mut u = 0u64;
    for shift in (0..35).step_by(7) {
        let b = *buf.get(*pos).ok_or("symbol stream truncated")?;
        *pos += 1;
        u |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Ok(((u >> 1) as i64) ^ -((u & 1) as i64));
        }
    }
    Err("varint longer than 5 bytes")
}

fn step(q: f64, i: usize) -> f64 {
    q * WEIGHTS[i / 8][i % 8]
}

fn encode_plane(p: &Plane, q: f64) -> Vec<u8> {
    let mut symbols = Vec::new();
    let mut prev_dc = 0i64;
    for by in (0..p.height).step_by(8) {
        for bx in (0..p.width).step_by(8) {
            let mut block = [0.0; 64];
            for (i, v) in block.iter_mut().enumerate() {
                *v = p.data[(by + i / 8) * p.width + bx + i % 8] as f64 - 128.0;
            }
            let coef = dct8(&block);
            let level = |i: usize| (coef[i] / step(q, i)).round() as i64;
            let dc = level(0);
            put_varint(&mut symbols, dc - prev_dc);
            prev_dc = dc;
            let mut run = 0u8;
            for &zi in &ZIGZAG[1..] {
                let l = level(zi);
                if l == 0 {
                    run += 1;
                } else {
                    symbols.push(run);
                    put_varint(&mut symbols, l);
                    run = 0;
                }
            }
            symbols.push(EOB);
        }
    }
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(&symbols).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

fn decode_plane(stream: &[u8], width: usize, height: usize, q: f64, name: &str) -> Result<Plane> {
    let mut symbols = Vec::new();
    DeflateDecoder::new(stream)
        .read_to_end(&mut symbols)
        .map_err(|e| Error::codec(0, format!("{name} plane: corrupt DEFLATE data: {e}")))?;
    let mut data = vec![0u8; width * height];
    let mut pos = 0;
    let mut dc = 0i64;
    let err = |pos: usize, msg: &str| Error::codec(pos, format!("{name} plane: {msg}"));
    for by in (0..height).step_by(8) {
        for bx in (0..width).step_by(8) {
            let mut coef = [0.0; 64];
            let start = pos;
            dc = dc
                .checked_add(get_varint(&symbols, &mut pos).map_err(|m| err(start, m))?)
                .ok_or_else(|| err(start, "DC level overflow"))?;
            coef[0] = dc as f64 * step(q, 0);
            let mut zz = 1;
            loop {
                let at = pos;
                let run = *symbols.get(pos).ok_or_else(|| err(at, "symbol stream truncated"))?;
                pos += 1;
                if run == EOB {
                    break;
                }
                zz += run as usize;
                if zz >= 64 {
                    return Err(err(at, "run past end of block"));
                }
                let l = get_varint(&symbols, &mut pos).map_err(|m| err(at, m))?;
                coef[ZIGZAG[zz]] = l as f64 * step(q, ZIGZAG[zz]);
                zz += 1;
            }
            let px = idct8(&coef);
            for (i, v) in px.iter().enumerate() {
                data[(by + i / 8) * width + bx + i % 8] = to_u8(v + 128.0);
            }
        }
    }
    if pos != symbols.len() {
        return Err(err(pos, "trailing symbols after last block"));
    }
    Ok(Plane { width, height, data })
}

/// Parsed `.bci` file.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub width: u32,
    pub height: u32,
    pub q: f32,
    /// DEFLATE streams for Y, Cb, Cr.
    pub streams: [Vec<u8>; 3],
}

impl EncodedImage {
    const HEADER: usize = 4 + 1 + 4 + 4 + 4;

    pub fn byte_len(&self) -> usize {
        Self::HEADER + self.streams.iter().map(|s| 4 + s.len()).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.q.to_le_bytes());
        for s in &self.streams {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < Self::HEADER {
            return Err(Error::codec(bytes.len(), "header truncated"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::codec(0, "bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::codec(4, format!("unsupported version {}", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (width, height) = (u32_at(5), u32_at(9));
        let q = f32::from_le_bytes(bytes[13..17].try_into().unwrap());
        if width == 0 || height == 0 || width % 16 != 0 || height % 16 != 0 {
            return Err(Error::codec(5, format!("dimensions {width}x{height} not positive multiples of 16")));
        }
        if !(q as f64 >= Q_MIN && q as f64 <= Q_MAX) {
            return Err(Error::codec(13, format!("q {q} outside [{Q_MIN}, {Q_MAX}]")));
        }
        let mut pos = Self::HEADER;
        let mut streams: [Vec<u8>; 3] = Default::default();
        for s in &mut streams {
            if bytes.len() < pos + 4 {
                return Err(Error::codec(pos, "stream length truncated"));
            }
            let len = u32_at(pos) as usize;
            pos += 4;
            if bytes.len() - pos < len {
                return Err(Error::codec(pos, format!("stream of {len} bytes truncated")));
            }
            *s = bytes[pos..pos + len].to_vec();
            pos += len;
        }
        if pos != bytes.len() {
            return Err(Error::codec(pos, "trailing bytes"));
        }
        Ok(EncodedImage { width, height, q, streams })
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(Q_MIN..=Q_MAX).contains(&q) {
        return Err(Error::usage(format!("q {q} outside [{Q_MIN}, {Q_MAX}]")));
    }
    Ok(())
}

/// Encodes an image whose sides are multiples of 16.
pub fn encode(img: &RgbImage, q: f64) -> Result<EncodedImage> {
    check_q(q)?;
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 || w % 16 != 0 || h % 16 != 0 {
        return Err(Error::usage(format!("image {w}x{h} must be padded to multiples of 16")));
    }
    let qf = q as f32;
    let planes = rgb_to_ycbcr420(img)?;
    Ok(EncodedImage {
        width: w as u32,
        height: h as u32,
        q: qf,
        streams: [&planes.y, &planes.cb, &planes.cr].map(|p| encode_plane(p, qf as f64)),
    })
}

pub fn decode(enc: &EncodedImage) -> Result<RgbImage> {
    let (w, h) = (enc.width as usize, enc.height as usize);
    let q = enc.q as f64;
    let y = decode_plane(&enc.streams[0], w, h, q, "Y")?;
    let cb = decode_plane(&enc.streams[1], w / 2, h / 2, q, "Cb")?;
    let cr = decode_plane(&enc.streams[2], w / 2, h / 2, q, "Cr")?;
    ycbcr420_to_rgb(&Planes { y, cb, cr })
}

pub fn bpp(bytes: usize, pixels: usize) -> f64 {
    8.0 * bytes as f64 / pixels as f64
}

/// Result of per-image rate targeting.
#[derive(Clone, Debug)]
pub struct RateChoice {
    pub q: f64,
    pub bpp: f64,
    pub encoded: EncodedImage,
    /// The target is below the rate at the coarsest `q`; `bpp` exceeds it.
    pub unreachable: bool,
}

/// Geometric bisection on `q` for the finest encoding whose rate does not
/// exceed `target_bpp`. Stops once a feasible iterate is within `tol` or
/// after [`MAX_BISECTION_STEPS`] halvings of the bracket.
pub fn choose_q_for_bpp(img: &RgbImage, target_bpp: f64, tol: f64) -> Result<RateChoice> {
    let pixels = img.pixel_count();
    let trial = |q: f64| -> Result<RateChoice> {
        let encoded = encode(img, q)?;
        let bpp = bpp(encoded.byte_len(), pixels);
        Ok(RateChoice { q: encoded.q as f64, bpp, encoded, unreachable: false })
    };
    let finest = trial(Q_MIN)?;
    if finest.bpp <= target_bpp {
        return Ok(finest);
    }
    let coarsest = trial(Q_MAX)?;
    if coarsest.bpp > target_bpp {
        return Ok(RateChoice { unreachable: true, ..coarsest });
    }
    let (mut lo, mut hi) = (Q_MIN, Q_MAX);
    let mut best = coarsest;
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = (lo * hi).sqrt();
        let c = trial(mid)?;
        if c.bpp <= target_bpp {
            hi = mid;
            let close = target_bpp - c.bpp <= tol;
            if c.bpp > best.bpp {
                best = c;
            }
            if close {
                break;
            }
        } else {
            lo = mid;
        }
    }
    Ok(best)
}

/// Peak signal-to-noise ratio for 8-bit samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    /// Identical inputs.
    Lossless,
    Db(f64),
}

impl Psnr {
    /// Decibels, with `Lossless` as positive infinity.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Lossless => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }

    pub fn from_mse(mse: f64) -> Psnr {
        if mse == 0.0 {
            Psnr::Lossless
        } else {
            Psnr::Db(10.0 * (255.0f64 * 255.0 / mse).log10())
        }
    }
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<Psnr> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::usage(format!(
            "PSNR of {}x{} against {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let sq: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    Ok(Psnr::from_mse(sq as f64 / a.data().len().max(1) as f64))
}
