use std::cmp::Ordering;

use rayon::prelude::*;

use super::{apply_update, encode_update, WuContainer};
use crate::blockcodec::{self, psnr};
use crate::error::{Error, Result};
use crate::image::{filter_image, RgbImage};
use crate::net::{Network, WeightVector};

/// Codec output paired with the original it should approximate.
#[derive(Clone, Debug)]
pub struct EvalImage {
    /// Decoded image, possibly padded beyond the original size.
    pub decoded: RgbImage,
    pub original: RgbImage,
}

/// Mean per-image PSNR in dB of the filtered images at original size.
pub fn mean_filtered_psnr(net: &Network, eval: &[EvalImage]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let per_image: Vec<f64> = eval
        .par_iter()
        .map(|e| {
            let out = filter_image(net, &e.decoded, e.original.width(), e.original.height())?;
            Ok(psnr(&e.original, &out)?.db())
        })
        .collect::<Result<_>>()?;
    Ok(per_image.iter().sum::<f64>() / per_image.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub taus: Vec<f64>,
    pub ks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub tau: f64,
    pub k: usize,
    /// Container size on disk.
    pub bytes: usize,
    pub bpp: f64,
    /// Mean filtered PSNR; `None` when the candidate exceeds the budget and
    /// was not evaluated.
    pub psnr: Option<f64>,
}

impl Candidate {
    /// Orders by PSNR, then smaller rate, smaller k, larger tau.
    fn preference(&self, other: &Candidate) -> Ordering {
        let (a, b) = (self.psnr.unwrap_or(f64::NEG_INFINITY), other.psnr.unwrap_or(f64::NEG_INFINITY));
        a.total_cmp(&b)
            .then(other.bpp.total_cmp(&self.bpp))
            .then(other.k.cmp(&self.k))
            .then(self.tau.total_cmp(&other.tau))
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    /// Winning grid point, `None` for the empty-update fallback.
    pub selected: Option<Candidate>,
    pub container: WuContainer,
    pub container_bytes: Vec<u8>,
    /// Mean filtered PSNR of the selection.
    pub psnr: f64,
    /// Mean filtered PSNR with the unmodified pre-trained weights.
    pub baseline_psnr: f64,
    /// No grid point met the budget.
    pub fallback: bool,
    /// Every grid point in `tau`-major order.
    pub candidates: Vec<Candidate>,
}

/// Compresses `delta` at every `(tau, k)` grid point and keeps the
/// candidate with the best filtered PSNR whose container rate, measured as
/// `8 * bytes / pixel_count`, does not exceed `budget_bpp`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    delta: &WeightVector,
    w0: &WeightVector,
    net: &Network,
    eval: &[EvalImage],
    grid: &SweepGrid,
    budget_bpp: f64,
    pixel_count: usize,
) -> Result<SweepOutcome> {
    if grid.taus.is_empty() || grid.ks.is_empty() {
        return Err(Error::usage("sweep grids must be nonempty"));
    }
    if pixel_count == 0 {
        return Err(Error::usage("pixel count must be positive"));
    }
    let points: Vec<(f64, usize)> = grid
        .taus
        .iter()
        .flat_map(|&t| grid.ks.iter().map(move |&k| (t, k)))
        .collect();
    let score = |weights: &WeightVector| -> Result<f64> {
        let mut n = net.clone();
        n.unflatten_weights(weights)?;
        mean_filtered_psnr(&n, eval)
    };
    let evaluated: Vec<(Candidate, WuContainer, Vec<u8>)> = points
        .par_iter()
        .map(|&(tau, k)| {
            let c = encode_update(delta, tau, k)?;
            let bytes = c.to_bytes()?;
            let bpp = blockcodec::bpp(bytes.len(), pixel_count);
            let psnr = if bpp <= budget_bpp {
                Some(score(&apply_update(w0, &c)?)?)
            } else {
                None
            };
            Ok((Candidate { tau, k, bytes: bytes.len(), bpp, psnr }, c, bytes))
        })
        .collect::<Result<_>>()?;
    let baseline_psnr = score(w0)?;

    let mut best: Option<usize> = None;
    for (i, (cand, _, _)) in evaluated.iter().enumerate() {
        if cand.psnr.is_none() {
            continue;
        }
        if best.is_none_or(|b| cand.preference(&evaluated[b].0) == Ordering::Greater) {
            best = Some(i);
        }
    }
    let candidates: Vec<Candidate> = evaluated.iter().map(|e| e.0.clone()).collect();
    Ok(match best {
        Some(i) => {
            let (cand, container, container_bytes) = evaluated.into_iter().nth(i).unwrap();
            SweepOutcome {
                psnr: cand.psnr.unwrap(),
                selected: Some(cand),
                container,
                container_bytes,
                baseline_psnr,
                fallback: false,
                candidates,
            }
        }
        None => SweepOutcome {
            selected: None,
            container: WuContainer::empty(w0.len()),
            container_bytes: Vec::new(),
            psnr: baseline_psnr,
            baseline_psnr,
            fallback: true,
            candidates,
        },
    })
}
