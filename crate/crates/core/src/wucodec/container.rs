//! `.wud` weight-update container.
//!
//! ```text
//! "WUD1"                              stored as is
//! DEFLATE(
//!   version u8 = 1
//!   n       u32 LE    total weight count
//!   nz      u32 LE    retained count
//!   k       u16 LE    codebook size
//!   mask    ceil(n / 8) bytes, bit i = entry i, LSB first
//!   labels  ceil(nz * b / 8) bytes, b = ceil(log2 k) bits each, LSB first
//!   codebook k x f32 LE, strictly increasing
//! )
//! ```
//!
//! Unused trailing bits are zero. An empty update has `nz = 0` and `k = 0`.
//! Error positions count the magic, then bytes of the decompressed body.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WUD1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 1 + 4 + 4 + 2;
pub const MAX_K: usize = u16::MAX as usize;

/// Sorted, distinct, finite centroids. Empty only for the empty update.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook(Vec<f32>);

impl Codebook {
    pub fn new(centroids: Vec<f32>) -> Result<Self> {
        if centroids.len() > MAX_K {
            return Err(Error::usage(format!("codebook of {} entries exceeds {MAX_K}", centroids.len())));
        }
        if centroids.iter().any(|c| !c.is_finite()) || centroids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::usage("codebook must be finite and strictly increasing"));
        }
        Ok(Codebook(centroids))
    }

    pub fn empty() -> Self {
        Codebook(Vec::new())
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn centroids(&self) -> &[f32] {
        &self.0
    }
}

/// Bits per label: `ceil(log2 k)`, zero for `k <= 1`.
pub fn label_width(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// Size of the body before DEFLATE.
pub fn body_len(n: usize, nz: usize, k: usize) -> usize {
    HEADER_LEN + n.div_ceil(8) + (nz * label_width(k) as usize).div_ceil(8) + 4 * k
}

/// Logical content of a `.wud` file.
#[derive(Clone, Debug, PartialEq)]
pub struct WuContainer {
    /// Retained flag per weight, in flattened weight order.
    pub mask: Vec<bool>,
    /// Codebook index per retained weight, in index order.
    pub labels: Vec<u32>,
    pub codebook: Codebook,
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { bytes: Vec::new(), bit: 0 }
    }

    fn put(&mut self, value: u32, width: u32) {
        for b in 0..width {
            if self.bit == 0 {
                self.bytes.push(0);
            }
            if value >> b & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << self.bit;
            }
            self.bit = (self.bit + 1) % 8;
        }
    }
}

fn get_bits(bytes: &[u8], first_bit: usize, width: u32) -> u32 {
    (0..width as usize).fold(0, |acc, b| {
        let i = first_bit + b;
        acc | ((bytes[i / 8] >> (i % 8) & 1) as u32) << b
    })
}

impl WuContainer {
    /// The no-op update for `n` weights.
    pub fn empty(n: usize) -> Self {
        WuContainer {
            mask: vec![false; n],
            labels: Vec::new(),
            codebook: Codebook::empty(),
        }
    }

    pub fn n(&self) -> usize {
        self.mask.len()
    }

    pub fn nz(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.codebook.k()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let popcount = self.mask.iter().filter(|&&b| b).count();
        if self.n() > u32::MAX as usize {
            return Err(Error::usage("weight count exceeds u32"));
        }
        if popcount != self.nz() {
            return Err(Error::usage(format!(
                "mask retains {popcount} entries but {} labels given",
                self.nz()
            )));
        }
        if (self.nz() == 0) != (self.k() == 0) {
            return Err(Error::usage("codebook must be empty exactly when no entry is retained"));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.k()) {
            return Err(Error::usage(format!("label {l} outside codebook of {}", self.k())));
        }
        Ok(())
    }

    /// Body before DEFLATE.
    pub fn body(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(body_len(self.n(), self.nz(), self.k()));
        out.push(VERSION);
        out.extend_from_slice(&(self.n() as u32).to_le_bytes());
        out.extend_from_slice(&(self.nz() as u32).to_le_bytes());
        out.extend_from_slice(&(self.k() as u16).to_le_bytes());
        let mut mask = BitWriter::new();
        for &b in &self.mask {
            mask.put(b as u32, 1);
        }
        out.extend_from_slice(&mask.bytes);
        let width = label_width(self.k());
        let mut labels = BitWriter::new();
        for &l in &self.labels {
            labels.put(l, width);
        }
        out.extend_from_slice(&labels.bytes);
        for c in self.codebook.centroids() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = self.body()?;
        let mut enc = DeflateEncoder::new(MAGIC.to_vec(), Compression::best());
        enc.write_all(&body)?;
        Ok(enc.finish()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::container(0, "bad magic"));
        }
        let mut body = Vec::new();
        DeflateDecoder::new(&bytes[4..])
            .read_to_end(&mut body)
            .map_err(|e| Error::container(4, format!("corrupt DEFLATE payload: {e}")))?;
        Self::from_body(&body)
    }

    /// Parses a decompressed body.
    pub fn from_body(body: &[u8]) -> Result<Self> {
        let err = |at: usize, msg: String| Error::container(MAGIC.len() + at, msg);
        if body.len() < HEADER_LEN {
            return Err(err(body.len(), "header truncated".into()));
        }
        if body[0] != VERSION {
            return Err(err(0, format!("unsupported version {}", body[0])));
        }
        let n = u32::from_le_bytes(body[1..5].try_into().unwrap()) as usize;
        let nz = u32::from_le_bytes(body[5..9].try_into().unwrap()) as usize;
        let k = u16::from_le_bytes(body[9..11].try_into().unwrap()) as usize;
        if nz > n {
            return Err(err(5, format!("nz {nz} exceeds n {n}")));
        }
        if (nz == 0) != (k == 0) {
            return Err(err(9, format!("k {k} inconsistent with nz {nz}")));
        }
        let expect = body_len(n, nz, k);
        if body.len() != expect {
            return Err(err(
                body.len().min(expect),
                format!("body is {} bytes, layout needs {expect}", body.len()),
            ));
        }
        let mut pos = HEADER_LEN;
        let mask_bytes = &body[pos..pos + n.div_ceil(8)];
        let mask: Vec<bool> = (0..n).map(|i| mask_bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        if !n.is_multiple_of(8) && mask_bytes[n / 8] >> (n % 8) != 0 {
            return Err(err(pos + n / 8, "nonzero mask padding bits".into()));
        }
        let popcount = mask.iter().filter(|&&b| b).count();
        if popcount != nz {
            return Err(err(pos, format!("mask retains {popcount} entries, header says {nz}")));
        }
        pos += mask_bytes.len();

        let width = label_width(k);
        let total_bits = nz * width as usize;
        let label_bytes = &body[pos..pos + total_bits.div_ceil(8)];
        let mut labels = Vec::with_capacity(nz);
        for i in 0..nz {
            let l = get_bits(label_bytes, i * width as usize, width);
            if l as usize >= k {
                return Err(err(pos + i * width as usize / 8, format!("label {l} outside codebook of {k}")));
            }
            labels.push(l);
        }
        if !total_bits.is_multiple_of(8) && label_bytes[total_bits / 8] >> (total_bits % 8) != 0 {
            return Err(err(pos + total_bits / 8, "nonzero label padding bits".into()));
        }
        pos += label_bytes.len();

        let centroids: Vec<f32> = body[pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let codebook = Codebook::new(centroids).map_err(|_| err(pos, "codebook not finite and strictly increasing".into()))?;
        Ok(WuContainer { mask, labels, codebook })
    }
}
