//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Forward calls through [`GradTape`] execute the kernels in `conv`/`ops` and
//! record enough context to replay the chain rule. `backward` walks the
//! recorded operations exactly once, in reverse recording order, accumulating
//! gradients into per-value slots.

use crate::conv::{conv3d_backward, conv3d_forward, ConvKernel3D};
use crate::ops::{self, BnRunningStats, BnSaved};
use crate::tensor::{Tensor, TensorError};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

enum TapeOp {
    Leaf,
    Conv3d {
        input: usize,
        weights: usize,
        bias: usize,
        stride: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        saved: BnSaved,
    },
    Relu {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Gap {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    ProjConv {
        input: usize,
        weight: usize,
        stride: usize,
    },
    PairConcat {
        input: usize,
    },
    MseLoss {
        pred: usize,
        target: usize,
    },
}

/// Wengert-style tape: one value and one producing operation per recorded step.
#[derive(Default)]
pub struct GradTape {
    values: Vec<Tensor>,
    ops: Vec<TapeOp>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    fn push(&mut self, value: Tensor, op: TapeOp) -> ValueId {
        self.values.push(value);
        self.ops.push(op);
        ValueId(self.values.len() - 1)
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, TapeOp::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn conv3d(
        &mut self,
        input: ValueId,
        weights: ValueId,
        bias: ValueId,
        stride: usize,
    ) -> Result<ValueId, TensorError> {
        let kernel = ConvKernel3D::new(
            self.values[weights.0].clone(),
            self.values[bias.0].clone(),
            stride,
        )?;
        let out = conv3d_forward(&self.values[input.0], &kernel)?;
        Ok(self.push(
            out,
            TapeOp::Conv3d {
                input: input.0,
                weights: weights.0,
                bias: bias.0,
                stride,
            },
        ))
    }

    /// Train-mode batchnorm; updates `running` as a side effect.
    pub fn batchnorm3d(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running: &mut BnRunningStats,
    ) -> Result<ValueId, TensorError> {
        let (out, saved) = ops::batchnorm3d_train(
            &self.values[input.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            running,
        )?;
        Ok(self.push(
            out,
            TapeOp::BatchNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                saved,
            },
        ))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = ops::relu(&self.values[input.0]);
        self.push(out, TapeOp::Relu { input: input.0 })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let out = ops::add(&self.values[a.0], &self.values[b.0])?;
        Ok(self.push(out, TapeOp::Add { a: a.0, b: b.0 }))
    }

    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let out = ops::global_avg_pool(&self.values[input.0])?;
        Ok(self.push(out, TapeOp::Gap { input: input.0 }))
    }

    pub fn linear(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    ) -> Result<ValueId, TensorError> {
        let out = ops::linear(
            &self.values[input.0],
            &self.values[weight.0],
            &self.values[bias.0],
        )?;
        Ok(self.push(
            out,
            TapeOp::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
        ))
    }

    pub fn proj_conv3d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        stride: usize,
    ) -> Result<ValueId, TensorError> {
        let out = ops::proj_conv3d(&self.values[input.0], &self.values[weight.0], stride)?;
        Ok(self.push(
            out,
            TapeOp::ProjConv {
                input: input.0,
                weight: weight.0,
                stride,
            },
        ))
    }

    pub fn pair_concat(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let out = ops::pair_concat(&self.values[input.0])?;
        Ok(self.push(out, TapeOp::PairConcat { input: input.0 }))
    }

    pub fn mse_loss(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId, TensorError> {
        let loss = ops::mse_loss(&self.values[pred.0], &self.values[target.0])?;
        Ok(self.push(
            Tensor::scalar(loss),
            TapeOp::MseLoss {
                pred: pred.0,
                target: target.0,
            },
        ))
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per value;
    /// values not on a path to the root stay `None`.
    pub fn backward(&self, root: ValueId) -> Result<Gradients, TensorError> {
        let root_val = &self.values.get(root.0).ok_or(TensorError::EmptyTape)?;
        if root_val.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_val.len()));
        }
        self.backward_seeded(root, Tensor::scalar(1.0))
    }

    /// Reverse sweep with an explicit upstream gradient at `root` (the
    /// gradient of a scalar projection of that value).
    pub fn backward_seeded(&self, root: ValueId, seed: Tensor) -> Result<Gradients, TensorError> {
        if self.ops.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        seed.expect_shape(self.values[root.0].shape(), "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[root.0] = Some(seed);

        for (out, op) in self.ops.iter().enumerate().rev() {
            if matches!(op, TapeOp::Leaf) {
                continue; // leaves keep their accumulated gradients
            }
            let Some(upstream) = grads[out].take() else {
                continue;
            };
            match op {
                TapeOp::Leaf => unreachable!(),
                TapeOp::Conv3d {
                    input,
                    weights,
                    bias,
                    stride,
                } => {
                    let kernel = ConvKernel3D::new(
                        self.values[*weights].clone(),
                        self.values[*bias].clone(),
                        *stride,
                    )?;
                    let g = conv3d_backward(&self.values[*input], &kernel, &upstream)?;
                    accumulate(&mut grads[*input], g.input);
                    accumulate(&mut grads[*weights], g.weights);
                    accumulate(&mut grads[*bias], g.bias);
                }
                TapeOp::BatchNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm3d_backward(
                        &self.values[*input],
                        &self.values[*gamma],
                        saved,
                        &upstream,
                    )?;
                    accumulate(&mut grads[*input], dx);
                    accumulate(&mut grads[*gamma], dgamma);
                    accumulate(&mut grads[*beta], dbeta);
                }
                TapeOp::Relu { input } => {
                    let dx = ops::relu_backward(&self.values[out], &upstream)?;
                    accumulate(&mut grads[*input], dx);
                }
                TapeOp::Add { a, b } => {
                    accumulate(&mut grads[*a], upstream.clone());
                    accumulate(&mut grads[*b], upstream);
                }
                TapeOp::Gap { input } => {
                    let dx =
                        ops::global_avg_pool_backward(self.values[*input].shape(), &upstream)?;
                    accumulate(&mut grads[*input], dx);
                }
                TapeOp::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (dx, dw, db) = ops::linear_backward(
                        &self.values[*input],
                        &self.values[*weight],
                        &upstream,
                    )?;
                    accumulate(&mut grads[*input], dx);
                    accumulate(&mut grads[*weight], dw);
                    accumulate(&mut grads[*bias], db);
                }
                TapeOp::ProjConv {
                    input,
                    weight,
                    stride,
                } => {
                    let (dx, dw) = ops::proj_conv3d_backward(
                        &self.values[*input],
                        &self.values[*weight],
                        *stride,
                        &upstream,
                    )?;
                    accumulate(&mut grads[*input], dx);
                    accumulate(&mut grads[*weight], dw);
                }
                TapeOp::PairConcat { input } => {
                    let dx = ops::pair_concat_backward(&upstream)?;
                    accumulate(&mut grads[*input], dx);
                }
                TapeOp::MseLoss { pred, target } => {
                    let dpred = ops::mse_loss_backward(
                        &self.values[*pred],
                        &self.values[*target],
                        upstream.data()[0],
                    )?;
                    accumulate(&mut grads[*pred], dpred);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
}

/// Gradient slots produced by a backward sweep, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}
