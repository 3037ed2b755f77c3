//! Offline pre-training and compression-aware fine-tuning.
//!
//! Fine-tuning optimizes the accumulated update `delta = w - w0` directly:
//! the network always runs with `w0 + delta`, so the returned update
//! reconstructs the final weights exactly.

pub mod adam;
pub mod loss;

use std::fmt::Write as _;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{BnMode, Network, WeightVector};
use crate::tensor::{Real, Tape, Tensor};

pub use adam::AdamState;
pub use loss::{alpha_rule, comp_loss, comp_loss_grad, gamma_rule, mse_loss, norms, total_loss};

/// Codec-decoded input and its original, both `[1, 3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct TrainPair<T: Real = f32> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Square crop size; a multiple of 16 so crops stay aligned with the
    /// codec's block grid.
    pub patch: usize,
    pub bn_momentum: f64,
    /// Apply a random flip or transpose to each crop.
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            lr: 1e-3,
            batch: 8,
            patch: 32,
            bn_momentum: 0.1,
            augment: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub w0: WeightVector,
    /// Loss on the first sampled batch before any update.
    pub initial_mse: f64,
    /// Loss on that same batch with the final weights.
    pub final_mse: f64,
    pub step_losses: Vec<f64>,
}

/// Square window at `(y, x)` under one of the 8 symmetries of the square:
/// bit 0 flips rows, bit 1 flips columns, bit 2 transposes.
fn crop<T: Real>(t: &Tensor<T>, y: usize, x: usize, size: usize, orient: u8) -> Tensor<T> {
    let [_, c, h, w] = t.dims4().expect("4-D image");
    debug_assert!(y + size <= h && x + size <= w);
    let last = size - 1;
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in 0..size {
            for col in 0..size {
                let (mut sr, mut sc) = if orient & 4 != 0 { (col, r) } else { (r, col) };
                if orient & 1 != 0 {
                    sr = last - sr;
                }
                if orient & 2 != 0 {
                    sc = last - sc;
                }
                data.push(t.data()[(ch * h + y + sr) * w + x + sc]);
            }
        }
    }
    Tensor::new(&[1, c, size, size], data).expect("crop shape")
}

fn sample_batch(data: &[TrainPair], cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainPair> {
    let patch = cfg.patch;
    let mut inputs = Vec::with_capacity(cfg.batch);
    let mut targets = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let pair = &data[rng.random_range(0..data.len())];
        let [_, _, h, w] = pair.input.dims4()?;
        let y = 16 * rng.random_range(0..=(h - patch) / 16);
        let x = 16 * rng.random_range(0..=(w - patch) / 16);
        let orient = if cfg.augment { rng.random_range(0..8) } else { 0 };
        inputs.push(crop(&pair.input, y, x, patch, orient));
        targets.push(crop(&pair.target, y, x, patch, orient));
    }
    Ok(TrainPair {
        input: Tensor::stack(&inputs)?,
        target: Tensor::stack(&targets)?,
    })
}

fn batch_loss(net: &Network, batch: &TrainPair, mode: BnMode) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.input.clone());
    let fwd = net.forward_tape(&mut tape, x, mode)?;
    let t = tape.constant(batch.target.clone());
    let loss = tape.mse(fwd.output, t)?;
    Ok(tape.value(loss).data()[0] as f64)
}

/// Minimizes reconstruction MSE on random aligned crops with batch-statistics
/// normalization, accumulating running statistics that are frozen into the
/// returned network.
pub fn pretrain(
    net: &mut Network,
    data: &[TrainPair],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::usage("pre-training needs at least one image pair"));
    }
    if cfg.batch == 0 || cfg.patch == 0 || !cfg.patch.is_multiple_of(16) {
        return Err(Error::usage("batch must be positive and patch a positive multiple of 16"));
    }
    for p in data {
        let [_, _, h, w] = p.input.dims4()?;
        if h < cfg.patch || w < cfg.patch || p.target.shape() != p.input.shape() {
            return Err(Error::usage(format!(
                "training pair {h}x{w} is smaller than the {0}x{0} patch or mismatched",
                cfg.patch
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = sample_batch(data, cfg, &mut rng)?;
    let initial_mse = batch_loss(net, &probe, BnMode::Train)?;

    let mut weights = net.flatten_weights();
    let mut adam = AdamState::new(weights.len(), cfg.lr);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mom = cfg.bn_momentum as f32;
    for step in 0..cfg.steps {
        let batch = if step == 0 {
            probe.clone()
        } else {
            sample_batch(data, cfg, &mut rng)?
        };
        let mut tape = Tape::new();
        let x = tape.constant(batch.input);
        let fwd = net.forward_tape(&mut tape, x, BnMode::Train)?;
        let t = tape.constant(batch.target);
        let loss = tape.mse(fwd.output, t)?;
        step_losses.push(tape.value(loss).data()[0] as f64);
        let grad = fwd.flat_gradient(&tape.backward(loss)?);
        adam.step(&mut weights.0, &grad.0)?;
        net.unflatten_weights(&weights)?;
        for (block, (mean, var)) in net.blocks_mut().iter_mut().zip(&fwd.batch_stats) {
            for (r, &b) in block.running_mean.data_mut().iter_mut().zip(mean.data()) {
                *r = (1.0 - mom) * *r + mom * b;
            }
            for (r, &b) in block.running_var.data_mut().iter_mut().zip(var.data()) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        }
    }
    let final_mse = batch_loss(net, &probe, BnMode::Train)?;
    Ok(PretrainReport {
        w0: net.flatten_weights(),
        initial_mse,
        final_mse,
        step_losses,
    })
}

/// Mean per-pair reconstruction MSE and its gradient, frozen batch norm.
/// Pairs are evaluated independently and reduced in input order.
pub fn reconstruction_gradient<T: Real>(
    net: &Network<T>,
    pairs: &[TrainPair<T>],
) -> Result<(f64, WeightVector<T>)> {
    if pairs.is_empty() {
        return Err(Error::usage("need at least one image pair"));
    }
    let per_pair: Vec<(f64, WeightVector<T>)> = pairs
        .par_iter()
        .map(|p| {
            let mut tape = Tape::new();
            let x = tape.constant(p.input.clone());
            let fwd = net.forward_tape(&mut tape, x, BnMode::Infer)?;
            let t = tape.constant(p.target.clone());
            let loss = tape.mse(fwd.output, t)?;
            let g = fwd.flat_gradient(&tape.backward(loss)?);
            Ok((tape.value(loss).data()[0].to_f64(), g))
        })
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    let scale = T::from_f64(1.0 / n);
    let mut grad = WeightVector::zeros(net.param_count());
    let mut loss = 0.0;
    for (l, g) in &per_pair {
        loss += l;
        for (a, &b) in grad.0.iter_mut().zip(&g.0) {
            *a += b;
        }
    }
    for a in &mut grad.0 {
        *a *= scale;
    }
    Ok((loss / n, grad))
}

/// When fine-tuning moves from reconstruction-only to the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseSwitch {
    /// Switch once `L_mse <= ratio * L_mse(step 0)`.
    pub mse_drop_ratio: Option<f64>,
    /// Hard cap on reconstruction-only steps.
    pub phase1_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    /// Multiplier in `gamma = m * L_mse / L_comp`.
    pub m: f64,
    pub switch: PhaseSwitch,
    pub total_steps: usize,
    pub lr: f64,
    /// Magnitude-term share of the compressibility objective.
    pub alpha_ratio: f64,
    /// Entries with `|delta| < report_tau` count as zero in telemetry.
    pub report_tau: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            m: 1.0,
            switch: PhaseSwitch {
                mse_drop_ratio: Some(0.9),
                phase1_steps: 50,
            },
            total_steps: 150,
            lr: 1e-3,
            alpha_ratio: 1.0 / 3.0,
            report_tau: 1e-4,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m >= 0.0) {
            return Err(Error::config("m must be >= 0"));
        }
        if self.switch.phase1_steps > self.total_steps {
            return Err(Error::config("phase1_steps cannot exceed total_steps"));
        }
        if !(self.lr >= 0.0) || !(self.alpha_ratio >= 0.0) {
            return Err(Error::config("learning rate and alpha ratio must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub phase: u8,
    pub l_mse: f64,
    pub l_comp: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub l1: f64,
    pub l2: f64,
    pub sparsity_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub rows: Vec<LossRow>,
    /// First step optimized with the combined objective.
    pub phase2_start: Option<usize>,
    /// The drop ratio was never reached and the step cap forced the switch.
    pub switch_fallback: bool,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,L_mse,L_comp,gamma,alpha,l1,l2,sparsity_fraction";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                r.step, r.l_mse, r.l_comp, r.gamma, r.alpha, r.l1, r.l2, r.sparsity_fraction
            );
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub delta: WeightVector,
    pub report: LossReport,
}

/// Two-phase fine-tuning of `net` (whose weights are ignored) starting from
/// `w0`. Phase 1 minimizes `L_mse`; phase 2 minimizes
/// `L_mse + gamma * comp(delta, alpha)` with `alpha` and `gamma` recomputed
/// each step and excluded from differentiation.
pub fn finetune(
    net: &Network,
    w0: &WeightVector,
    targets: &[TrainPair],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if w0.len() != net.param_count() {
        return Err(Error::usage(format!(
            "w0 has {} entries, network has {} parameters",
            w0.len(),
            net.param_count()
        )));
    }
    let mut delta = WeightVector::zeros(w0.len());
    let mut report = LossReport::default();
    if cfg.total_steps == 0 {
        return Ok(FinetuneOutcome { delta, report });
    }
    if targets.is_empty() {
        return Err(Error::usage("fine-tuning needs at least one target pair"));
    }
    let mut work = net.clone();
    let mut adam = AdamState::new(w0.len(), cfg.lr);
    let mut phase2 = false;
    let mut first_mse = None;

    for step in 0..cfg.total_steps {
        work.unflatten_weights(&w0.add(&delta)?)?;
        let (l_mse, mut grad) = reconstruction_gradient(&work, targets)?;
        let mse0 = *first_mse.get_or_insert(l_mse);

        let alpha = alpha_rule(&delta.0, cfg.alpha_ratio);
        let l_comp = comp_loss(&delta.0, alpha);
        let gamma = if phase2 {
            gamma_rule(l_mse, l_comp, cfg.m)
        } else {
            0.0
        };
        if gamma != 0.0 {
            let g = gamma as f32;
            for (a, b) in grad.0.iter_mut().zip(comp_loss_grad::<f32>(&delta.0, alpha)) {
                *a += g * b;
            }
        }
        let (l1, l2) = norms(&delta.0);
        let zeros = delta.0.iter().filter(|v| (v.abs() as f64) < cfg.report_tau).count();
        report.rows.push(LossRow {
            step,
            phase: if phase2 { 2 } else { 1 },
            l_mse,
            l_comp,
            gamma,
            alpha,
            l1,
            l2,
            sparsity_fraction: zeros as f64 / delta.len() as f64,
        });

        adam.step(&mut delta.0, &grad.0)?;

        if !phase2 {
            let dropped = cfg
                .switch
                .mse_drop_ratio
                .is_some_and(|r| l_mse <= r * mse0);
            let capped = step + 1 >= cfg.switch.phase1_steps;
            if dropped || capped {
                phase2 = true;
                report.phase2_start = Some(step + 1);
                report.switch_fallback = !dropped && cfg.switch.mse_drop_ratio.is_some();
            }
        }
    }
    Ok(FinetuneOutcome { delta, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::tensor::gradcheck::{central_differences, max_relative_error, FD_STEP};
    use crate::tensor::random_tensor;

    fn tiny_config() -> NetConfig {
        NetConfig {
            contracting: vec![2, 3, 4],
            expansive: vec![3, 2, 3],
            ..NetConfig::desk()
        }
    }

    fn pairs<T: Real>(n: usize, size: usize, seed: u64) -> Vec<TrainPair<T>> {
        (0..n)
            .map(|i| {
                let target = random_tensor(&[1, 3, size, size], seed + 2 * i as u64)
                    .map(|v| 0.5 + 0.3 * v);
                let noise = random_tensor(&[1, 3, size, size], seed + 2 * i as u64 + 1);
                let input = Tensor::new(
                    target.shape(),
                    target.data().iter().zip(noise.data()).map(|(t, e)| t + 0.05 * e).collect(),
                )
                .unwrap();
                TrainPair {
                    input: input.cast(),
                    target: target.cast(),
                }
            })
            .collect()
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let mut net: Network<f64> = Network::build(&cfg, 1).unwrap();
        let w0 = net.flatten_weights();
        let delta: Vec<f64> = random_tensor(&[w0.len()], 2).map(|v| 0.05 * v).into_data();
        let w = w0.add(&WeightVector(delta.clone())).unwrap();
        let data = pairs::<f64>(2, 8, 3);

        net.unflatten_weights(&w).unwrap();
        let (l_mse, g_mse) = reconstruction_gradient(&net, &data).unwrap();
        let alpha = alpha_rule(&delta, 1.0 / 3.0);
        let l_comp = comp_loss(&delta, alpha);
        let gamma = gamma_rule(l_mse, l_comp, 1.0);
        let analytic: Vec<f64> = g_mse
            .0
            .iter()
            .zip(comp_loss_grad(&delta, alpha))
            .map(|(a, b)| a + gamma * b)
            .collect();

        let objective = |wv: &[f64]| {
            let mut n = net.clone();
            n.unflatten_weights(&WeightVector(wv.to_vec())).unwrap();
            let (mse, _) = reconstruction_gradient(&n, &data).unwrap();
            let d: Vec<f64> = wv.iter().zip(&w0.0).map(|(a, b)| a - b).collect();
            total_loss(mse, comp_loss(&d, alpha), gamma)
        };
        let numeric = central_differences(objective, &w.0, FD_STEP);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn pretrain_zero_lr_keeps_initial_weights() {
        let mut net: Network = Network::build(&NetConfig::desk(), 4).unwrap();
        let init = net.flatten_weights();
        let cfg = PretrainConfig {
            steps: 1,
            lr: 0.0,
            ..PretrainConfig::default()
        };
        let report = pretrain(&mut net, &pairs(2, 32, 5), &cfg, 6).unwrap();
        assert_eq!(report.w0, init);
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let mut net: Network = Network::build(&NetConfig::desk(), 4).unwrap();
        let err = pretrain(&mut net, &[], &PretrainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn pretrain_is_deterministic_and_improves() {
        let data = pairs(3, 32, 7);
        let cfg = PretrainConfig {
            steps: 30,
            batch: 4,
            ..PretrainConfig::default()
        };
        let run = || {
            let mut net: Network = Network::build(&NetConfig::desk(), 8).unwrap();
            let r = pretrain(&mut net, &data, &cfg, 9).unwrap();
            (r, net.running_stats())
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.w0, b.w0);
        assert_eq!(sa, sb);
        assert!(a.final_mse <= a.initial_mse, "{} > {}", a.final_mse, a.initial_mse);
    }

    #[test]
    fn zero_steps_give_zero_update() {
        let net: Network = Network::build(&NetConfig::desk(), 1).unwrap();
        let w0 = net.flatten_weights();
        let cfg = FinetuneConfig {
            total_steps: 0,
            switch: PhaseSwitch {
                mse_drop_ratio: Some(0.9),
                phase1_steps: 0,
            },
            ..FinetuneConfig::default()
        };
        let out = finetune(&net, &w0, &pairs(1, 16, 1), &cfg).unwrap();
        assert!(out.delta.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn m_zero_equals_pure_mse_run() {
        let net: Network = Network::build(&tiny_config(), 2).unwrap();
        let w0 = net.flatten_weights();
        let data = pairs(2, 16, 3);
        let base = FinetuneConfig {
            m: 0.0,
            total_steps: 12,
            switch: PhaseSwitch {
                mse_drop_ratio: None,
                phase1_steps: 4,
            },
            ..FinetuneConfig::default()
        };
        let pure = FinetuneConfig {
            switch: PhaseSwitch {
                mse_drop_ratio: None,
                phase1_steps: 12,
            },
            ..base.clone()
        };
        let a = finetune(&net, &w0, &data, &base).unwrap();
        let b = finetune(&net, &w0, &data, &pure).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.report.phase2_start, Some(4));
        assert!(a.report.rows[4..].iter().all(|r| r.gamma == 0.0));
    }

    #[test]
    fn finetune_is_deterministic_and_phase_rules_hold() {
        let net: Network = Network::build(&tiny_config(), 2).unwrap();
        let w0 = net.flatten_weights();
        let data = pairs(3, 16, 5);
        let cfg = FinetuneConfig {
            total_steps: 20,
            switch: PhaseSwitch {
                mse_drop_ratio: Some(1e-9),
                phase1_steps: 6,
            },
            ..FinetuneConfig::default()
        };
        let a = finetune(&net, &w0, &data, &cfg).unwrap();
        let b = finetune(&net, &w0, &data, &cfg).unwrap();
        assert_eq!(a.delta, b.delta);
        // an unreachable ratio falls back to the cap
        assert_eq!(a.report.phase2_start, Some(6));
        assert!(a.report.switch_fallback);
        for r in &a.report.rows {
            assert!(r.l1 >= 0.0 && r.l2 >= 0.0 && r.gamma >= 0.0);
            if r.phase == 2 && r.l_comp > 0.0 {
                // gamma * L_comp == m * L_mse and alpha keeps the 1/3 balance
                assert!((r.gamma * r.l_comp - cfg.m * r.l_mse).abs() <= 1e-12 * r.l_mse.max(1e-30));
                assert!((r.l_comp - 4.0 / 3.0 * r.l1 / r.l2).abs() < 1e-9 * r.l_comp);
            }
        }
        // reconstruction is exact by construction
        let wf = w0.add(&a.delta).unwrap();
        assert_eq!(wf.sub(&w0).unwrap().len(), a.delta.len());
        let csv = a.report.to_csv();
        assert!(csv.starts_with(LossReport::CSV_HEADER));
        assert_eq!(csv.lines().count(), 21);
    }
}
