//! Pre-trained weight file.
//!
//! ```text
//! "WTS1" version u8 = 1
//! depth u8, contracting depth x u32 LE, expansive depth x u32 LE
//! kernel u32 LE, stride u32 LE, leaky_slope f64 LE, bn_eps f64 LE,
//! residual u8
//! param count u32 LE, params f32 LE (flattened order)
//! stat count u32 LE, running means then variances f32 LE (block order)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{NetConfig, Network, WeightVector};

pub const MAGIC: &[u8; 4] = b"WTS1";
pub const VERSION: u8 = 1;

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let c = net.config();
    let mut out = MAGIC.to_vec();
    out.push(VERSION);
    out.push(c.depth() as u8);
    for &ch in c.contracting.iter().chain(&c.expansive) {
        out.extend_from_slice(&(ch as u32).to_le_bytes());
    }
    out.extend_from_slice(&(c.kernel as u32).to_le_bytes());
    out.extend_from_slice(&(c.stride as u32).to_le_bytes());
    out.extend_from_slice(&c.leaky_slope.to_le_bytes());
    out.extend_from_slice(&c.bn_eps.to_le_bytes());
    out.push(c.residual as u8);
    let w = net.flatten_weights();
    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
    w.0.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    let stats = net.running_stats();
    out.extend_from_slice(&(stats.len() as u32).to_le_bytes());
    stats.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, "weight file truncated"));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.pos, "length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != &MAGIC[..] {
        return Err(Error::format(0, "bad weight file magic"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported weight file version {version}")));
    }
    let depth = r.u8()? as usize;
    let contracting = (0..depth).map(|_| r.u32()).collect::<Result<_>>()?;
    let expansive = (0..depth).map(|_| r.u32()).collect::<Result<_>>()?;
    let config = NetConfig {
        contracting,
        expansive,
        kernel: r.u32()?,
        stride: r.u32()?,
        leaky_slope: r.f64()?,
        bn_eps: r.f64()?,
        residual: r.u8()? != 0,
    };
    let at = r.pos;
    config
        .validate()
        .map_err(|e| Error::format(at, format!("invalid network configuration: {e}")))?;
    let mut net = Network::build(&config, 0)?;
    let at = r.pos;
    let n = r.u32()?;
    if n != net.param_count() {
        return Err(Error::format(at, format!("{n} parameters, configuration needs {}", net.param_count())));
    }
    net.unflatten_weights(&WeightVector(r.f32s(n)?))?;
    let at = r.pos;
    let s = r.u32()?;
    let stats = r.f32s(s)?;
    net.set_running_stats(&stats)
        .map_err(|e| Error::format(at, format!("running statistics: {e}")))?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes in weight file"));
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let cfg = NetConfig {
            contracting: vec![4, 6],
            expansive: vec![5, 3],
            residual: false,
            ..NetConfig::desk()
        };
        let mut net = Network::build(&cfg, 9).unwrap();
        let stats: Vec<f32> = (0..net.running_stats().len()).map(|i| 0.5 + i as f32).collect();
        net.set_running_stats(&stats).unwrap();
        let back = from_bytes(&to_bytes(&net)).unwrap();
        assert_eq!(back.config(), net.config());
        assert_eq!(back.flatten_weights(), net.flatten_weights());
        assert_eq!(back.running_stats(), stats);
    }

    #[test]
    fn damaged_files_are_format_errors() {
        let net = Network::build(&NetConfig::desk(), 1).unwrap();
        let bytes = to_bytes(&net);
        for bad in [&bytes[..3], &bytes[..bytes.len() - 1], &b"WTS2\x01"[..]] {
            assert!(matches!(from_bytes(bad), Err(Error::Format { .. })));
        }
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Format { .. })));
    }
}
