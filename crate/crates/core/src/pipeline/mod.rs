//! End-to-end flow: code images, pre-train the filter, fine-tune it on the
//! images being sent, compress the weight update into the remaining rate
//! margin, and decode or evaluate the resulting bundle.
//!
//! Rate split for a set of images with budget `B` and margin `M`: every
//! image is coded at no more than `B - M - framing`, where `framing` is the
//! bundle's fixed overhead spread over all pixels. The update may then use
//! whatever is left below `B`, capped at `M`.

pub mod bundle;
pub mod config;
pub mod corpus;
pub mod report;
pub mod weights;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::blockcodec::{self, choose_q_for_bpp, psnr, RateChoice};
use crate::error::{Error, Result};
use crate::image::{filter_image, read_ppm, write_ppm, RgbImage};
use crate::net::{Network, WeightVector};
use crate::trainer::{finetune, pretrain, FinetuneConfig, LossReport, PretrainReport, TrainPair};
use crate::wucodec::{apply_update, sweep, EvalImage, SweepOutcome, WuContainer};

pub use bundle::{Bundle, BundleImage};
pub use config::Config;
pub use report::{ImageRow, RateReport};

/// Block alignment required by the image codec.
pub const CODEC_ALIGN: usize = 16;

/// An original with its coded and decoded versions.
#[derive(Clone, Debug)]
pub struct CodedImage {
    pub original: RgbImage,
    pub choice: RateChoice,
    /// Decoded at padded size.
    pub decoded: RgbImage,
}

impl CodedImage {
    fn bundle_image(&self) -> BundleImage {
        BundleImage {
            width: self.original.width() as u32,
            height: self.original.height() as u32,
            encoded: self.choice.encoded.clone(),
        }
    }

    fn eval_image(&self) -> EvalImage {
        EvalImage { decoded: self.decoded.clone(), original: self.original.clone() }
    }

    /// Network input and target at padded size.
    fn train_pair(&self) -> Result<TrainPair> {
        let padded = self.original.pad_to_multiple(CODEC_ALIGN)?;
        Ok(TrainPair { input: self.decoded.to_tensor(), target: padded.to_tensor() })
    }
}

fn total_pixels(images: &[RgbImage]) -> usize {
    images.iter().map(RgbImage::pixel_count).sum()
}

/// Per-image rate target that leaves room for the margin and all framing.
pub fn image_target_bpp(cfg: &Config, images: &[RgbImage]) -> f64 {
    let framing = bundle::HEADER_LEN + images.len() * bundle::IMAGE_FRAMING + bundle::UPDATE_FRAMING;
    cfg.budget_bpp - cfg.margin_bpp - blockcodec::bpp(framing, total_pixels(images))
}

fn code_one(img: &RgbImage, q: Option<f64>, target_bpp: f64, tol: f64) -> Result<CodedImage> {
    let padded = img.pad_to_multiple(CODEC_ALIGN)?;
    let choice = match q {
        Some(q) => {
            let encoded = blockcodec::encode(&padded, q)?;
            let bpp = blockcodec::bpp(encoded.byte_len(), img.pixel_count());
            RateChoice { q: encoded.q as f64, bpp, encoded, unreachable: false }
        }
        None => {
            // rate over the padded area that matches the target on the original
            let scale = img.pixel_count() as f64 / padded.pixel_count() as f64;
            let mut c = choose_q_for_bpp(&padded, target_bpp * scale, tol * scale)?;
            c.bpp /= scale;
            c
        }
    };
    let decoded = blockcodec::decode(&choice.encoded)?;
    Ok(CodedImage { original: img.clone(), choice, decoded })
}

/// Codes every image at its target rate (or at a fixed `q`).
pub fn code_images(cfg: &Config, images: &[RgbImage], q: Option<f64>) -> Result<Vec<CodedImage>> {
    if images.is_empty() {
        return Err(Error::usage("no images given"));
    }
    let target = image_target_bpp(cfg, images);
    images
        .par_iter()
        .map(|img| code_one(img, q, target, cfg.rate_tol))
        .collect()
}

/// Builds a network from `seed` and pre-trains it on coded versions of
/// `images`.
pub fn pretrain_network(cfg: &Config, images: &[RgbImage], seed: u64) -> Result<(Network, PretrainReport)> {
    let coded = code_images(cfg, images, cfg.pretrain_q)?;
    let pairs: Vec<TrainPair> = coded.iter().map(CodedImage::train_pair).collect::<Result<_>>()?;
    let mut net = Network::build(&cfg.net, seed)?;
    let report = pretrain(&mut net, &pairs, &cfg.pretrain, seed.wrapping_add(1))?;
    Ok((net, report))
}

/// Fine-tunes `net` on coded images and returns the raw weight update.
pub fn finetune_on(net: &Network, coded: &[CodedImage], ft: &FinetuneConfig) -> Result<(WeightVector, LossReport)> {
    let pairs: Vec<TrainPair> = coded.iter().map(CodedImage::train_pair).collect::<Result<_>>()?;
    let out = finetune(net, &net.flatten_weights(), &pairs, ft)?;
    Ok((out.delta, out.report))
}

#[derive(Clone, Debug)]
pub struct EncodeOutcome {
    pub bundle: Bundle,
    pub bundle_bytes: Vec<u8>,
    pub report: RateReport,
    pub loss: LossReport,
    pub sweep: SweepOutcome,
    /// Raw fine-tuning update before compression.
    pub delta: WeightVector,
    /// Rate available to the update.
    pub update_budget_bpp: f64,
    /// The sweep's choice beat the pre-trained filter and was shipped.
    pub update_included: bool,
}

/// Full encoder: code, fine-tune, compress the update, bundle, report.
pub fn encode_set(cfg: &Config, net: &Network, images: &[RgbImage]) -> Result<EncodeOutcome> {
    cfg.validate()?;
    let coded = code_images(cfg, images, None)?;
    let pixels = total_pixels(images);
    let mut bundle = Bundle { images: coded.iter().map(CodedImage::bundle_image).collect(), update: None };
    let floor = blockcodec::bpp(bundle.byte_len(), pixels);
    if floor > cfg.budget_bpp {
        return Err(Error::data(format!(
            "images need {floor:.4} bpp at the coarsest quantizer, over the {} bpp budget",
            cfg.budget_bpp
        )));
    }
    let (delta, loss) = finetune_on(net, &coded, &cfg.finetune)?;
    let w0 = net.flatten_weights();
    let spare = cfg.budget_bpp - blockcodec::bpp(bundle.byte_len() + bundle::UPDATE_FRAMING, pixels);
    let update_budget_bpp = cfg.margin_bpp.min(spare);
    let eval: Vec<EvalImage> = coded.iter().map(CodedImage::eval_image).collect();
    let sw = sweep(&delta, &w0, net, &eval, &cfg.grid, update_budget_bpp, pixels)?;

    let update_included = !sw.fallback && sw.psnr > sw.baseline_psnr;
    if update_included {
        bundle.update = Some(sw.container_bytes.clone());
    }
    let bundle_bytes = bundle.to_bytes()?;
    let mut report = evaluate_bundle(images, &bundle, net)?;
    for (row, c) in report.rows.iter_mut().zip(&coded) {
        row.unreachable = c.choice.unreachable;
    }
    Ok(EncodeOutcome {
        bundle,
        bundle_bytes,
        report,
        loss,
        sweep: sw,
        delta,
        update_budget_bpp,
        update_included,
    })
}

/// Network carrying the bundle's update, or a copy of `net` without one.
fn updated_network(bundle: &Bundle, net: &Network) -> Result<Network> {
    let mut n = net.clone();
    if let Some(bytes) = &bundle.update {
        let c = WuContainer::from_bytes(bytes)?;
        n.unflatten_weights(&apply_update(&net.flatten_weights(), &c)?)?;
    }
    Ok(n)
}

/// Decoded and filtered images at original size. `net` keeps the
/// pre-trained weights throughout.
pub fn decode_bundle(bundle: &Bundle, net: &Network) -> Result<Vec<RgbImage>> {
    let updated = updated_network(bundle, net)?;
    bundle
        .images
        .par_iter()
        .map(|img| {
            let decoded = blockcodec::decode(&img.encoded)?;
            filter_image(&updated, &decoded, img.width as usize, img.height as usize)
        })
        .collect()
}

/// Three-stage quality and rate table for a bundle against its originals.
pub fn evaluate_bundle(originals: &[RgbImage], bundle: &Bundle, net: &Network) -> Result<RateReport> {
    if originals.len() != bundle.images.len() {
        return Err(Error::usage(format!(
            "{} originals for a bundle of {} images",
            originals.len(),
            bundle.images.len()
        )));
    }
    let updated = updated_network(bundle, net)?;
    let rows = originals
        .par_iter()
        .zip(&bundle.images)
        .map(|(orig, img)| {
            let (w, h) = (img.width as usize, img.height as usize);
            if (orig.width(), orig.height()) != (w, h) {
                return Err(Error::usage(format!(
                    "original is {}x{}, bundle image is {w}x{h}",
                    orig.width(),
                    orig.height()
                )));
            }
            let decoded = blockcodec::decode(&img.encoded)?;
            let codec = psnr(orig, &decoded.crop(w, h)?)?.db();
            let pre = psnr(orig, &filter_image(net, &decoded, w, h)?)?.db();
            let fine = if bundle.update.is_some() {
                psnr(orig, &filter_image(&updated, &decoded, w, h)?)?.db()
            } else {
                pre
            };
            Ok(ImageRow {
                width: w,
                height: h,
                q: img.encoded.q as f64,
                bpp: blockcodec::bpp(img.framed_len(), w * h),
                psnr_codec: codec,
                psnr_pretrained: pre,
                psnr_finetuned: fine,
                unreachable: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let update_bits = bundle.update.as_ref().map_or(0, |u| 8 * (bundle::UPDATE_FRAMING + u.len()));
    Ok(RateReport {
        rows,
        pixels: bundle.pixel_count(),
        image_bits: 8 * bundle.byte_len() - update_bits,
        update_bits,
    })
}

pub fn sweep_csv(s: &SweepOutcome) -> String {
    let mut out = String::from("tau,k,bytes,bpp,psnr,selected\n");
    for c in &s.candidates {
        let selected = s.selected.as_ref().is_some_and(|x| x.tau == c.tau && x.k == c.k);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.tau,
            c.k,
            c.bytes,
            c.bpp,
            c.psnr.map_or(String::new(), |p| p.to_string()),
            selected as u8
        );
    }
    out
}

/// All `.ppm` files in `dir`, sorted by file name.
pub fn read_image_dir(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::usage(format!("no .ppm images in {}", dir.display())));
    }
    paths.iter().map(|p| read_ppm(p)).collect()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_images(dir: &Path, images: &[RgbImage]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, img) in images.iter().enumerate() {
        write_ppm(img, &dir.join(format!("image_{i:03}.ppm")))?;
    }
    Ok(())
}

/// Writes `count` synthetic images to `dir`.
pub fn cmd_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    if count == 0 || size == 0 {
        return Err(Error::usage("count and size must be positive"));
    }
    write_images(dir, &corpus::synthetic_corpus(count, size, size, seed))
}

/// Pre-trains on the images in `train_dir` and writes the weight file.
pub fn cmd_pretrain(cfg: &Config, train_dir: &Path, out: &Path) -> Result<PretrainReport> {
    let images = read_image_dir(train_dir)?;
    let (net, report) = pretrain_network(cfg, &images, cfg.seed)?;
    weights::save(&net, out)?;
    let mut log = String::from("step,L_mse\n");
    for (i, l) in report.step_losses.iter().enumerate() {
        let _ = writeln!(log, "{i},{l:e}");
    }
    std::fs::write(sibling(out, ".loss.csv"), log)?;
    Ok(report)
}

/// Encodes `image_dir` into a bundle at `out`, with report, loss and sweep
/// tables written next to it.
pub fn cmd_encode(cfg: &Config, image_dir: &Path, weights_path: &Path, out: &Path) -> Result<EncodeOutcome> {
    let images = read_image_dir(image_dir)?;
    let net = weights::load(weights_path)?;
    let outcome = encode_set(cfg, &net, &images)?;
    std::fs::write(out, &outcome.bundle_bytes)?;
    std::fs::write(sibling(out, ".report.csv"), outcome.report.to_csv())?;
    std::fs::write(sibling(out, ".loss.csv"), outcome.loss.to_csv())?;
    std::fs::write(sibling(out, ".sweep.csv"), sweep_csv(&outcome.sweep))?;
    Ok(outcome)
}

pub fn cmd_decode(bundle_path: &Path, weights_path: &Path, out_dir: &Path) -> Result<Vec<RgbImage>> {
    let bundle = Bundle::from_bytes(&std::fs::read(bundle_path)?)?;
    let net = weights::load(weights_path)?;
    let images = decode_bundle(&bundle, &net)?;
    write_images(out_dir, &images)?;
    Ok(images)
}

pub fn cmd_evaluate(image_dir: &Path, bundle_path: &Path, weights_path: &Path, out: &Path) -> Result<RateReport> {
    let originals = read_image_dir(image_dir)?;
    let bundle = Bundle::from_bytes(&std::fs::read(bundle_path)?)?;
    let net = weights::load(weights_path)?;
    let report = evaluate_bundle(&originals, &bundle, &net)?;
    std::fs::write(out, report.to_csv())?;
    Ok(report)
}

/// Fine-tunes and sweeps without writing a bundle; the sweep table goes to
/// `out`.
pub fn cmd_sweep(cfg: &Config, image_dir: &Path, weights_path: &Path, out: &Path) -> Result<SweepOutcome> {
    let images = read_image_dir(image_dir)?;
    let net = weights::load(weights_path)?;
    let outcome = encode_set(cfg, &net, &images)?;
    std::fs::write(out, sweep_csv(&outcome.sweep))?;
    Ok(outcome.sweep)
}
