//! Compression of a fine-tuning weight update: magnitude pruning, optimal
//! scalar k-means on the survivors, and the `.wud` container.

pub mod container;
pub mod kmeans;
mod sweep;

pub use container::{body_len, label_width, Codebook, WuContainer};
pub use kmeans::{kmeans1d_exact, partition_sse, Clustering};
pub use sweep::{mean_filtered_psnr, sweep, Candidate, EvalImage, SweepGrid, SweepOutcome};

use crate::error::{Error, Result};
use crate::net::WeightVector;

/// Update with entries below the threshold removed.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedUpdate {
    pub mask: Vec<bool>,
    /// Retained entries in index order.
    pub values: Vec<f32>,
    pub tau: f64,
}

impl PrunedUpdate {
    /// Fraction of entries removed.
    pub fn sparsity(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        1.0 - self.values.len() as f64 / self.mask.len() as f64
    }
}

/// Drops every entry with `|v| < tau`; entries at exactly `tau` survive.
pub fn prune(delta: &WeightVector, tau: f64) -> Result<PrunedUpdate> {
    if !(tau >= 0.0) {
        return Err(Error::usage(format!("threshold {tau} must be >= 0")));
    }
    let mask: Vec<bool> = delta.0.iter().map(|&v| (v.abs() as f64) >= tau).collect();
    let values = delta
        .0
        .iter()
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|(&v, _)| v)
        .collect();
    Ok(PrunedUpdate { mask, values, tau })
}

/// Optimal k-means with centroids rounded to f32. Centroids that collide
/// after rounding are merged.
pub fn kmeans1d(values: &[f32], k: usize) -> Result<(Vec<u32>, Codebook)> {
    let wide: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let c = kmeans1d_exact(&wide, k)?;
    let mut centroids: Vec<f32> = Vec::with_capacity(c.centroids.len());
    let mut remap = Vec::with_capacity(c.centroids.len());
    for &m in &c.centroids {
        let r = m as f32;
        if centroids.last() != Some(&r) {
            centroids.push(r);
        }
        remap.push(centroids.len() as u32 - 1);
    }
    let labels = c.labels.iter().map(|&l| remap[l]).collect();
    Ok((labels, Codebook::new(centroids)?))
}

/// Quantizes the retained values; the empty set maps to an empty codebook.
pub fn quantize(p: &PrunedUpdate, k: usize) -> Result<(Vec<u32>, Codebook)> {
    if k < 1 {
        return Err(Error::usage("k must be >= 1"));
    }
    if k > container::MAX_K {
        return Err(Error::usage(format!("k {k} exceeds {}", container::MAX_K)));
    }
    if p.values.is_empty() {
        return Ok((Vec::new(), Codebook::empty()));
    }
    kmeans1d(&p.values, k)
}

/// Prune at `tau`, quantize with `k` clusters and assemble the container.
pub fn encode_update(delta: &WeightVector, tau: f64, k: usize) -> Result<WuContainer> {
    let p = prune(delta, tau)?;
    let (labels, codebook) = quantize(&p, k)?;
    Ok(WuContainer {
        mask: p.mask,
        labels,
        codebook,
    })
}

/// Decoded update as a dense vector.
pub fn dense_update(c: &WuContainer) -> WeightVector {
    let mut labels = c.labels.iter();
    let cb = c.codebook.centroids();
    WeightVector(
        c.mask
            .iter()
            .map(|&keep| if keep { cb[*labels.next().unwrap() as usize] } else { 0.0 })
            .collect(),
    )
}

/// `w0 + update`. `w0` is left untouched so the caller can always return to
/// the pre-trained weights.
pub fn apply_update(w0: &WeightVector, c: &WuContainer) -> Result<WeightVector> {
    if c.n() != w0.len() {
        return Err(Error::container(
            0,
            format!("update covers {} weights, network has {}", c.n(), w0.len()),
        ));
    }
    c.validate()?;
    let cb = c.codebook.centroids();
    let mut labels = c.labels.iter();
    Ok(WeightVector(
        w0.0.iter()
            .zip(&c.mask)
            .map(|(&w, &keep)| if keep { w + cb[*labels.next().unwrap() as usize] } else { w })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prune_examples() {
        let d = WeightVector(vec![0.1, -0.0005, 0.3]);
        let p = prune(&d, 0.001).unwrap();
        assert_eq!(p.mask, vec![true, false, true]);
        assert_eq!(p.values, vec![0.1, 0.3]);
        let all = prune(&d, 0.0).unwrap();
        assert_eq!(all.values.len(), 3);
        // boundary value survives
        let edge = prune(&WeightVector(vec![0.5, 0.25]), 0.5).unwrap();
        assert_eq!(edge.mask, vec![true, false]);
        assert!(matches!(prune(&d, -1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn quantize_examples() {
        let p = PrunedUpdate { mask: vec![true, true], values: vec![-0.5, 0.5], tau: 0.0 };
        let (labels, cb) = quantize(&p, 2).unwrap();
        assert_eq!(cb.centroids(), &[-0.5, 0.5]);
        assert_eq!(labels, vec![0, 1]);
        let same = PrunedUpdate { mask: vec![true; 4], values: vec![0.125; 4], tau: 0.0 };
        assert_eq!(quantize(&same, 8).unwrap().1.k(), 1);
        let none = PrunedUpdate { mask: vec![false; 4], values: vec![], tau: 1.0 };
        let (l, cb) = quantize(&none, 4).unwrap();
        assert!(l.is_empty() && cb.k() == 0);
        assert!(matches!(quantize(&same, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_and_single_entry_updates() {
        let w0 = WeightVector(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(apply_update(&w0, &WuContainer::empty(5)).unwrap(), w0);

        let mut d = WeightVector::zeros(5);
        d.0[3] = 0.25;
        let c = encode_update(&d, 1e-6, 4).unwrap();
        let w = apply_update(&w0, &c).unwrap();
        for i in 0..5 {
            if i == 3 {
                assert_eq!(w.0[i] - w0.0[i], 0.25);
            } else {
                assert_eq!(w.0[i], w0.0[i]);
            }
        }
        assert!(matches!(
            apply_update(&WeightVector::zeros(4), &c),
            Err(Error::Container { .. })
        ));
    }

    proptest! {
        #[test]
        fn lossless_setting_reproduces_direct_addition(
            d in prop::collection::vec(-0.1f32..0.1, 1..200),
            w in prop::collection::vec(-1.0f32..1.0, 200),
        ) {
            let delta = WeightVector(d.clone());
            let w0 = WeightVector(w[..d.len()].to_vec());
            let mut distinct = d.clone();
            distinct.sort_by(f32::total_cmp);
            distinct.dedup();
            let c = encode_update(&delta, 0.0, distinct.len()).unwrap();
            prop_assert_eq!(dense_update(&c), delta.clone());
            prop_assert_eq!(apply_update(&w0, &c).unwrap(), w0.add(&delta).unwrap());
        }

        #[test]
        fn support_and_codebook_membership(
            d in prop::collection::vec(prop_oneof![Just(0.0f32), -0.05f32..0.05], 1..300),
            tau in 0.0f64..0.04,
            k in 1usize..20,
        ) {
            let delta = WeightVector(d);
            let c = encode_update(&delta, tau, k).unwrap();
            let q = dense_update(&c);
            for (qi, di) in q.0.iter().zip(&delta.0) {
                if *qi != 0.0 {
                    prop_assert!(*di != 0.0);
                    prop_assert!(c.codebook.centroids().contains(qi));
                }
            }
            let coarser = prune(&delta, tau * 1.5 + 1e-4).unwrap();
            prop_assert!(coarser.sparsity() >= prune(&delta, tau).unwrap().sparsity());
        }
    }
}
