//! `.ntb` bitstream bundle.
//!
//! ```text
//! "NTB1" version u8 = 1, image count u16 LE, flags u8 (bit 0: update present)
//! per image:  length u32 LE, then [width u32 LE, height u32 LE, .bci bytes]
//! if flagged: length u32 LE, then .wud bytes
//! ```
//!
//! Width and height are the original image size; the `.bci` payload holds
//! the padded image.

use crate::blockcodec::EncodedImage;
use crate::error::{Error, Result};
use crate::wucodec::WuContainer;

pub const MAGIC: &[u8; 4] = b"NTB1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 2 + 1;
/// Bytes added around each image payload.
pub const IMAGE_FRAMING: usize = 4 + 8;
/// Bytes added around the update payload.
pub const UPDATE_FRAMING: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BundleImage {
    pub width: u32,
    pub height: u32,
    pub encoded: EncodedImage,
}

impl BundleImage {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Bytes this image occupies in the bundle, framing included.
    pub fn framed_len(&self) -> usize {
        IMAGE_FRAMING + self.encoded.byte_len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub images: Vec<BundleImage>,
    /// Serialized `.wud` container.
    pub update: Option<Vec<u8>>,
}

impl Bundle {
    pub fn pixel_count(&self) -> usize {
        self.images.iter().map(BundleImage::pixel_count).sum()
    }

    pub fn byte_len(&self) -> usize {
        HEADER_LEN
            + self.images.iter().map(BundleImage::framed_len).sum::<usize>()
            + self.update.as_ref().map_or(0, |u| UPDATE_FRAMING + u.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.images.len() > u16::MAX as usize {
            return Err(Error::usage("a bundle holds at most 65535 images"));
        }
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.images.len() as u16).to_le_bytes());
        out.push(self.update.is_some() as u8);
        for img in &self.images {
            let payload = img.encoded.to_bytes();
            out.extend_from_slice(&((8 + payload.len()) as u32).to_le_bytes());
            out.extend_from_slice(&img.width.to_le_bytes());
            out.extend_from_slice(&img.height.to_le_bytes());
            out.extend_from_slice(&payload);
        }
        if let Some(u) = &self.update {
            out.extend_from_slice(&(u.len() as u32).to_le_bytes());
            out.extend_from_slice(u);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |pos: usize, msg: &str| Error::container(pos, format!("bundle: {msg}"));
        if bytes.len() < HEADER_LEN {
            return Err(err(bytes.len(), "header truncated"));
        }
        if &bytes[..4] != MAGIC {
            return Err(err(0, "bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(err(4, "unsupported version"));
        }
        let count = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
        let flags = bytes[7];
        if flags & !1 != 0 {
            return Err(err(7, "unknown flag bits"));
        }
        let mut pos = HEADER_LEN;
        let next = |pos: &mut usize| -> Result<&[u8]> {
            if bytes.len() - *pos < 4 {
                return Err(err(*pos, "payload length truncated"));
            }
            let len = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize;
            *pos += 4;
            if bytes.len() - *pos < len {
                return Err(err(*pos, "payload truncated"));
            }
            *pos += len;
            Ok(&bytes[*pos - len..*pos])
        };
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let start = pos + 4;
            let p = next(&mut pos)?;
            if p.len() < 8 {
                return Err(err(start, "image payload too short"));
            }
            let width = u32::from_le_bytes(p[0..4].try_into().unwrap());
            let height = u32::from_le_bytes(p[4..8].try_into().unwrap());
            let encoded = EncodedImage::from_bytes(&p[8..]).map_err(|e| err(start + 8, &e.to_string()))?;
            if width == 0 || height == 0 || width > encoded.width || height > encoded.height {
                return Err(err(start, "original size inconsistent with the coded image"));
            }
            images.push(BundleImage { width, height, encoded });
        }
        let update = if flags & 1 == 1 {
            let start = pos + 4;
            let u = next(&mut pos)?.to_vec();
            WuContainer::from_bytes(&u).map_err(|e| err(start, &e.to_string()))?;
            Some(u)
        } else {
            None
        };
        if pos != bytes.len() {
            return Err(err(pos, "trailing bytes"));
        }
        Ok(Bundle { images, update })
    }
}
