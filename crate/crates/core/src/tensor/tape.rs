//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Nodes are appended in evaluation order, so the record is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use super::ops::{self, BatchStats, Padding};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf {
        trainable: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: Padding,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    BatchNormTrain {
        x: Var,
        scale: Var,
        shift: Var,
        eps: T,
        stats: BatchStats<T>,
    },
    BatchNormInfer {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: T,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Sum {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// One forward evaluation recorded for differentiation. Single-writer:
/// build it, call [`Tape::backward`], drop it.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` only for handles that are not trainable leaves.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf { trainable: true })
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf { trainable: false })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: Padding) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let y = ops::conv2d_transpose(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b, stride }))
    }

    /// Batch-statistics normalization; returns the output handle plus the
    /// batch mean and biased variance.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: T,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let stats = ops::batchnorm_train(self.value(x), self.value(scale), self.value(shift), eps)?;
        let (mean, var) = (stats.mean.clone(), stats.var.clone());
        let y = stats.y.clone();
        let v = self.push(
            y,
            Op::BatchNormTrain {
                x,
                scale,
                shift,
                eps,
                stats,
            },
        );
        Ok((v, mean, var))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let y = ops::batchnorm_infer(
            self.value(x),
            self.value(scale),
            self.value(shift),
            mean,
            var,
            eps,
        )?;
        Ok(self.push(
            y,
            Op::BatchNormInfer {
                x,
                scale,
                shift,
                mean: mean.clone(),
                var: var.clone(),
                eps,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = ops::leaky_relu(self.value(x), slope);
        self.push(y, Op::LeakyRelu { x, slope })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::usage(format!(
                "add: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(ta.shape(), data)?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let y = self
            .value(x)
            .map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        self.push(y, Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = Tensor::scalar(ops::mse(self.value(a), self.value(b))?);
        Ok(self.push(y, Op::Mse { a, b }))
    }

    /// Reverse sweep from a scalar `loss`. Trainable leaves the loss does
    /// not depend on receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &g)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::ConvTranspose2d { x, w, b, stride } => {
                    let (dx, dw, db) =
                        ops::conv2d_transpose_backward(self.value(*x), self.value(*w), *stride, &g)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::BatchNormTrain {
                    x,
                    scale,
                    shift,
                    eps,
                    stats,
                } => {
                    let (dx, ds, dt) = ops::batchnorm_train_backward(
                        self.value(*x),
                        self.value(*scale),
                        stats,
                        *eps,
                        &g,
                    )?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *scale, ds);
                    accumulate(&mut grads, *shift, dt);
                }
                Op::BatchNormInfer {
                    x,
                    scale,
                    shift,
                    mean,
                    var,
                    eps,
                } => {
                    let (dx, ds, dt) = ops::batchnorm_infer_backward(
                        self.value(*x),
                        self.value(*scale),
                        mean,
                        var,
                        *eps,
                        &g,
                    )?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *scale, ds);
                    accumulate(&mut grads, *shift, dt);
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = ops::leaky_relu_backward(self.value(*x), *slope, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).dims4()?[1];
                    let c = node.value.dims4()?[1];
                    accumulate(&mut grads, *a, g.slice_channels(0, ca)?);
                    accumulate(&mut grads, *b, g.slice_channels(ca, c)?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Clamp { x, lo, hi } => {
                    let data = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &d)| if v < *lo || v > *hi { T::ZERO } else { d })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(g.shape(), data)?);
                }
                Op::Sum { x } => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), g.data()[0]));
                }
                Op::Mse { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let k = T::from_f64(2.0) * g.data()[0] / T::from_f64(ta.len() as f64);
                    let da: Vec<T> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| k * (x - y))
                        .collect();
                    let db = da.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, *a, Tensor::new(ta.shape(), da)?);
                    accumulate(&mut grads, *b, Tensor::new(tb.shape(), db)?);
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf { trainable: true } => {
                    Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
