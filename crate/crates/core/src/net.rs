//! Contracting/expansive artifact-removal filter with lateral skips.
//!
//! With `L` blocks per path, contracting block `i` is
//! `conv(stride 2) -> batchnorm -> leaky ReLU` and expansive block `j` is
//! `transpose conv(stride 2) -> batchnorm -> leaky ReLU`. The input of
//! contracting block `i` (for `i >= 1`) is concatenated onto the output of
//! expansive block `L - 1 - i`, which widens the input of the next
//! expansive block. The network input itself is not concatenated anywhere,
//! so the last expansive block emits the image channels directly.
//!
//! # Parameter layout
//!
//! [`WeightVector`] walks the blocks in forward order (contracting blocks
//! first, then expansive), and within each block stores
//!
//! | slot  | shape                         | count                 |
//! |-------|-------------------------------|-----------------------|
//! | weight| `[Cout,Cin,k,k]` / `[Cin,Cout,k,k]` | `k*k*Cin*Cout`  |
//! | bias  | `[Cout]`                      | `Cout`                |
//! | scale | `[Cout]`                      | `Cout`                |
//! | shift | `[Cout]`                      | `Cout`                |
//!
//! so a block contributes `k*k*Cin*Cout + 3*Cout` values. Batch norm
//! running statistics are not part of the vector.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, Padding};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

/// Colour channels of the images the filter consumes and produces.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub contracting: Vec<usize>,
    pub expansive: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    /// Add the network input to the last block's output before clamping.
    pub residual: bool,
}

impl NetConfig {
    /// Small configuration that trains in seconds on 64x64 images.
    pub fn desk() -> Self {
        NetConfig {
            contracting: vec![8, 16, 32],
            expansive: vec![16, 8, 3],
            kernel: 3,
            stride: 2,
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            residual: true,
        }
    }

    /// Channel widths of the full-size filter.
    pub fn full_size() -> Self {
        NetConfig {
            contracting: vec![128, 256, 512],
            expansive: vec![256, 128, 3],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.contracting.len();
        if l == 0 || self.expansive.len() != l {
            return Err(Error::config(format!(
                "contracting ({}) and expansive ({}) paths need the same nonzero depth",
                l,
                self.expansive.len()
            )));
        }
        if self.expansive[l - 1] != IMAGE_CHANNELS {
            return Err(Error::config(format!(
                "last expansive block must emit {IMAGE_CHANNELS} channels, got {}",
                self.expansive[l - 1]
            )));
        }
        if self.contracting.iter().chain(&self.expansive).any(|&c| c == 0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config("kernel size must be odd"));
        }
        if self.stride != 2 {
            return Err(Error::config("only stride 2 is supported"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::config("leaky slope must be in [0, 1)"));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_eps must be > 0"));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.contracting.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.stride.pow(self.depth() as u32)
    }

    /// `(kind, in_channels, out_channels)` for every block in forward order.
    pub fn block_channels(&self) -> Vec<(BlockKind, usize, usize)> {
        let l = self.depth();
        let mut out = Vec::with_capacity(2 * l);
        let mut cin = IMAGE_CHANNELS;
        for &c in &self.contracting {
            out.push((BlockKind::Contracting, cin, c));
            cin = c;
        }
        for (j, &c) in self.expansive.iter().enumerate() {
            out.push((BlockKind::Expansive, cin, c));
            cin = c + self.skip_channels(j);
        }
        out
    }

    /// Channels concatenated onto expansive block `j`'s output.
    fn skip_channels(&self, j: usize) -> usize {
        let l = self.depth();
        // partner contracting block is l-1-j; its input is contracting[l-2-j]
        if j + 1 < l {
            self.contracting[l - 2 - j]
        } else {
            0
        }
    }

    pub fn param_count(&self) -> usize {
        let kk = self.kernel * self.kernel;
        self.block_channels()
            .iter()
            .map(|&(_, cin, cout)| kk * cin * cout + 3 * cout)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Contracting,
    Expansive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the frozen running statistics.
    Infer,
}

#[derive(Clone, Debug)]
pub struct Block<T: Real> {
    pub kind: BlockKind,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> Block<T> {
    fn params(&self) -> [&Tensor<T>; 4] {
        [&self.weight, &self.bias, &self.scale, &self.shift]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [
            &mut self.weight,
            &mut self.bias,
            &mut self.scale,
            &mut self.shift,
        ]
    }
}

/// Flat view of every trainable parameter in [`Network`] layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector<T: Real = f32>(pub Vec<T>);

impl<T: Real> WeightVector<T> {
    pub fn zeros(len: usize) -> Self {
        WeightVector(vec![T::ZERO; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn cast<U: Real>(&self) -> WeightVector<U> {
        WeightVector(self.0.iter().map(|v| U::from_f64(v.to_f64())).collect())
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &WeightVector<T>) -> Result<WeightVector<T>> {
        if self.len() != other.len() {
            return Err(Error::usage(format!(
                "weight vectors differ in length: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(WeightVector(
            self.0.iter().zip(&other.0).map(|(&a, &b)| a + b).collect(),
        ))
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &WeightVector<T>) -> Result<WeightVector<T>> {
        if self.len() != other.len() {
            return Err(Error::usage(format!(
                "weight vectors differ in length: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(WeightVector(
            self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect(),
        ))
    }
}

/// One named slice of the [`WeightVector`] layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub block: usize,
    pub name: &'static str,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const SLOT_NAMES: [&str; 4] = ["weight", "bias", "scale", "shift"];

/// Handles of one forward pass recorded on a tape.
#[derive(Debug)]
pub struct TapeForward<T: Real> {
    pub output: Var,
    /// `[weight, bias, scale, shift]` per block, in layout order.
    pub params: Vec<[Var; 4]>,
    /// Batch `(mean, var)` per block; empty in [`BnMode::Infer`].
    pub batch_stats: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> TapeForward<T> {
    /// Gradient of every parameter, flattened in layout order.
    pub fn flat_gradient(&self, grads: &Gradients<T>) -> WeightVector<T> {
        let mut out = Vec::new();
        for block in &self.params {
            for v in block {
                out.extend_from_slice(grads.get(*v).expect("parameters are trainable").data());
            }
        }
        WeightVector(out)
    }
}

#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    config: NetConfig,
    blocks: Vec<Block<T>>,
}

impl<T: Real> Network<T> {
    /// Fan-in scaled uniform weights in `±sqrt(6 / (Cin*k*k))`, zero biases,
    /// identity batch norm. With a residual output the last block's scale
    /// starts at zero.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let mut blocks = config
            .block_channels()
            .into_iter()
            .map(|(kind, cin, cout)| {
                let shape = match kind {
                    BlockKind::Contracting => [cout, cin, k, k],
                    BlockKind::Expansive => [cin, cout, k, k],
                };
                let bound = (6.0 / (cin * k * k) as f64).sqrt();
                let weight =
                    Tensor::from_fn(&shape, |_| T::from_f64(rng.random_range(-bound..bound)));
                Block {
                    kind,
                    weight,
                    bias: Tensor::zeros(&[cout]),
                    scale: Tensor::full(&[cout], T::ONE),
                    shift: Tensor::zeros(&[cout]),
                    running_mean: Tensor::zeros(&[cout]),
                    running_var: Tensor::full(&[cout], T::ONE),
                }
            })
            .collect::<Vec<_>>();
        if config.residual {
            // residual nets start as the identity map
            let last = blocks.last_mut().expect("validated depth");
            last.scale = Tensor::zeros(&[IMAGE_CHANNELS]);
        }
        Ok(Network {
            config: config.clone(),
            blocks,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.params().iter().map(|t| t.len()).sum::<usize>())
            .sum()
    }

    /// Offset table of the flat layout.
    pub fn layout(&self) -> Vec<ParamSlot> {
        let mut offset = 0;
        let mut slots = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (name, t) in SLOT_NAMES.iter().zip(block.params()) {
                slots.push(ParamSlot {
                    block: bi,
                    name,
                    offset,
                    shape: t.shape().to_vec(),
                });
                offset += t.len();
            }
        }
        slots
    }

    pub fn flatten_weights(&self) -> WeightVector<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for block in &self.blocks {
            for t in block.params() {
                out.extend_from_slice(t.data());
            }
        }
        WeightVector(out)
    }

    pub fn unflatten_weights(&mut self, v: &WeightVector<T>) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::usage(format!(
                "weight vector has {} entries, network has {} parameters",
                v.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for block in &mut self.blocks {
            for t in block.params_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&v.0[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Running statistics `(mean, var)` of every block, concatenated.
    pub fn running_stats(&self) -> Vec<T> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(b.running_mean.data());
            out.extend_from_slice(b.running_var.data());
        }
        out
    }

    pub fn set_running_stats(&mut self, stats: &[T]) -> Result<()> {
        let needed: usize = self.blocks.iter().map(|b| 2 * b.running_mean.len()).sum();
        if stats.len() != needed {
            return Err(Error::usage(format!(
                "expected {needed} running statistics, got {}",
                stats.len()
            )));
        }
        let mut off = 0;
        for b in &mut self.blocks {
            let c = b.running_mean.len();
            b.running_mean.data_mut().copy_from_slice(&stats[off..off + c]);
            b.running_var.data_mut().copy_from_slice(&stats[off + c..off + 2 * c]);
            off += 2 * c;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    kind: b.kind,
                    weight: b.weight.cast(),
                    bias: b.bias.cast(),
                    scale: b.scale.cast(),
                    shift: b.shift.cast(),
                    running_mean: b.running_mean.cast(),
                    running_var: b.running_var.cast(),
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        let m = self.config.size_multiple();
        if c != IMAGE_CHANNELS {
            return Err(Error::usage(format!(
                "filter expects {IMAGE_CHANNELS} channels, got {c}"
            )));
        }
        if h % m != 0 || w % m != 0 {
            return Err(Error::usage(format!(
                "image extents {h}x{w} must be multiples of {m}; pad first"
            )));
        }
        Ok(())
    }

    /// Inference: frozen batch norm statistics, output clamped to `[0, 1]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let cfg = &self.config;
        let (slope, eps) = (T::from_f64(cfg.leaky_slope), T::from_f64(cfg.bn_eps));
        let l = cfg.depth();
        let mut skips = Vec::with_capacity(l);
        let mut h = x.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            let y = match b.kind {
                BlockKind::Contracting => {
                    skips.push(h.clone());
                    ops::conv2d(&h, &b.weight, &b.bias, cfg.stride, Padding::SameOdd)?
                }
                BlockKind::Expansive => ops::conv2d_transpose(&h, &b.weight, &b.bias, cfg.stride)?,
            };
            let y = ops::batchnorm_infer(&y, &b.scale, &b.shift, &b.running_mean, &b.running_var, eps)?;
            h = ops::leaky_relu(&y, slope);
            if b.kind == BlockKind::Expansive {
                let j = i - l;
                if j + 1 < l {
                    h = ops::concat_channels(&h, &skips[l - 1 - j])?;
                }
            }
        }
        if cfg.residual {
            for (o, &v) in h.data_mut().iter_mut().zip(x.data()) {
                *o += v;
            }
        }
        Ok(h.map(|v| {
            if v < T::ZERO {
                T::ZERO
            } else if v > T::ONE {
                T::ONE
            } else {
                v
            }
        }))
    }

    /// Records a forward pass on `tape`, registering every parameter as a
    /// trainable leaf.
    pub fn forward_tape(&self, tape: &mut Tape<T>, x: Var, mode: BnMode) -> Result<TapeForward<T>> {
        self.check_input(tape.value(x))?;
        let cfg = &self.config;
        let (slope, eps) = (T::from_f64(cfg.leaky_slope), T::from_f64(cfg.bn_eps));
        let l = cfg.depth();
        let mut skips = Vec::with_capacity(l);
        let mut params = Vec::with_capacity(self.blocks.len());
        let mut batch_stats = Vec::new();
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            let vars = b.params().map(|t| tape.param(t.clone()));
            let [w, bias, scale, shift] = vars;
            params.push(vars);
            let y = match b.kind {
                BlockKind::Contracting => {
                    skips.push(h);
                    tape.conv2d(h, w, bias, cfg.stride, Padding::SameOdd)?
                }
                BlockKind::Expansive => tape.conv2d_transpose(h, w, bias, cfg.stride)?,
            };
            let y = match mode {
                BnMode::Train => {
                    let (y, mean, var) = tape.batchnorm_train(y, scale, shift, eps)?;
                    batch_stats.push((mean, var));
                    y
                }
                BnMode::Infer => {
                    tape.batchnorm_infer(y, scale, shift, &b.running_mean, &b.running_var, eps)?
                }
            };
            h = tape.leaky_relu(y, slope);
            if b.kind == BlockKind::Expansive {
                let j = i - l;
                if j + 1 < l {
                    h = tape.concat_channels(h, skips[l - 1 - j])?;
                }
            }
        }
        if cfg.residual {
            h = tape.add(h, x)?;
        }
        let output = tape.clamp(h, T::ZERO, T::ONE);
        Ok(TapeForward {
            output,
            params,
            batch_stats,
        })
    }
}
