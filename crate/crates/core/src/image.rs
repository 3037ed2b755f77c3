//! 8-bit RGB images: binary PPM I/O, reflect padding, tensor conversion and
//! network filtering.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::{Real, Tensor};

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::usage(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// `[1, 3, H, W]` planar tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let scale = 1.0 / 255.0;
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let (c, p) = (i / (w * h), i % (w * h));
            T::from_f64(self.data[p * 3 + c] as f64 * scale)
        })
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding to nearest and clamping.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::usage(format!("expected a [1, 3, H, W] tensor, got {:?}", t.shape())));
        }
        let plane = w * h;
        let mut data = vec![0u8; plane * 3];
        for (i, v) in t.data().iter().enumerate() {
            let (ch, p) = (i / plane, i % plane);
            data[p * 3 + ch] = (v.to_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        Ok(RgbImage { width: w, height: h, data })
    }

    /// Extends right and bottom by mirror reflection (edge sample not
    /// repeated) up to the next multiple of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Result<RgbImage> {
        if m == 0 {
            return Err(Error::usage("padding multiple must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::usage("cannot pad an empty image"));
        }
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        Ok(RgbImage::from_fn(w, h, |x, y| {
            self.pixel(reflect(x, self.width), reflect(y, self.height))
        }))
    }

    /// Top-left `width` x `height` window.
    pub fn crop(&self, width: usize, height: usize) -> Result<RgbImage> {
        if width > self.width || height > self.height {
            return Err(Error::usage(format!(
                "cannot crop {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(RgbImage::from_fn(width, height, |x, y| self.pixel(x, y)))
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<RgbImage> {
        let mut pos = 0;
        if !bytes.starts_with(b"P6") {
            return Err(Error::format(0, "missing P6 magic"));
        }
        pos += 2;
        let width = header_field(bytes, &mut pos)?;
        let height = header_field(bytes, &mut pos)?;
        let maxval = header_field(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::format(pos, format!("maxval {maxval} unsupported, need 255")));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::format(pos, "expected one whitespace byte after maxval"));
        }
        pos += 1;
        let need = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| Error::format(pos, "image dimensions overflow"))?;
        let pixels = &bytes[pos..];
        if pixels.len() < need {
            return Err(Error::format(
                bytes.len(),
                format!("pixel data truncated: need {need} bytes, have {}", pixels.len()),
            ));
        }
        if pixels.len() > need {
            return Err(Error::format(pos + need, "trailing bytes after pixel data"));
        }
        Ok(RgbImage { width, height, data: pixels.to_vec() })
    }
}

/// Mirror index for a sample `i` past the end of an axis of length `n`.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn header_field(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(Error::format(*pos, "header truncated")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(start, "expected a decimal header field"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::format(start, "header field out of range"))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    RgbImage::from_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(image: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, image.to_ppm())?;
    Ok(())
}

/// Runs the network on `img` at a padded size and crops the result back to
/// `width` x `height`.
pub fn filter_image(net: &Network, img: &RgbImage, width: usize, height: usize) -> Result<RgbImage> {
    let padded = img.pad_to_multiple(net.config().size_multiple())?;
    let out = net.forward(&padded.to_tensor())?;
    RgbImage::from_tensor(&out)?.crop(width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| [x as u8, y as u8, (x * 7 + y * 3) as u8])
    }

    #[test]
    fn two_pixel_header_parses_in_order() {
        let mut bytes = b"P6 2 1 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = RgbImage::from_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixel(0, 0), [1, 2, 3]);
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        assert_eq!(RgbImage::from_ppm(&bytes).unwrap().pixel(0, 0), [9, 8, 7]);
    }

    #[test]
    fn malformed_ppm_is_rejected_with_offset() {
        let cases: [(&[u8], usize); 4] = [
            (b"P5 1 1 255\n\0", 0),
            (b"P6 1 1 65535\n\0\0\0\0\0\0", 12),
            (b"P6 2 1 255\n\0\0\0", 14),
            (b"P6 x 1 255\n", 3),
        ];
        for (bytes, offset) in cases {
            match RgbImage::from_ppm(bytes) {
                Err(Error::Format { offset: o, .. }) => assert_eq!(o, offset, "{bytes:?}"),
                other => panic!("{bytes:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn seventeen_pads_to_thirty_two_by_reflection() {
        let img = gradient(17, 17);
        let p = img.pad_to_multiple(16).unwrap();
        assert_eq!((p.width(), p.height()), (32, 32));
        // independent index map: column 17 + j mirrors column 15 - j
        for y in 0..32 {
            for x in 0..32 {
                let sx = if x < 17 { x } else { 32 - x };
                let sy = if y < 17 { y } else { 32 - y };
                assert_eq!(p.pixel(x, y), img.pixel(sx, sy), "({x},{y})");
            }
        }
        assert_eq!(p.crop(17, 17).unwrap(), img);
    }

    #[test]
    fn aligned_input_is_unchanged_and_tiny_inputs_pad() {
        let img = gradient(32, 16);
        assert_eq!(img.pad_to_multiple(16).unwrap(), img);
        let one = gradient(1, 3);
        let p = one.pad_to_multiple(8).unwrap();
        assert_eq!((p.width(), p.height()), (8, 8));
        assert_eq!(p.pixel(5, 4), one.pixel(0, 0));
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let img = gradient(9, 5);
        assert_eq!(RgbImage::from_tensor(&img.to_tensor::<f32>()).unwrap(), img);
    }

    proptest! {
        #[test]
        fn ppm_and_padding_round_trip(
            w in 1usize..20,
            h in 1usize..20,
            seed in any::<u64>(),
            m in prop::sample::select(vec![8usize, 16]),
        ) {
            let img = RgbImage::from_fn(w, h, |x, y| {
                let v = seed.wrapping_mul(31 + x as u64).wrapping_add(y as u64 * 977);
                [v as u8, (v >> 8) as u8, (v >> 16) as u8]
            });
            prop_assert_eq!(RgbImage::from_ppm(&img.to_ppm()).unwrap(), img.clone());
            let p = img.pad_to_multiple(m).unwrap();
            prop_assert_eq!(p.width() % m, 0);
            prop_assert_eq!(p.height() % m, 0);
            prop_assert_eq!(p.crop(w, h).unwrap(), img);
        }
    }
}
