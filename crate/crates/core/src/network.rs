//! Two-path 3D CNN for motor-delta regression.
//!
//! Both input volumes pass through one shared-weight stack (stem + residual
//! blocks), are concatenated along the feature-map dimension, processed by a
//! joint residual trunk, pooled, and mapped to the 3-vector of motor steps.
//! Width scales with the base feature-map count `F`; the reduced variant
//! drops the three identity blocks marked `omit_reduced` in the schedule.

use crate::conv::{conv3d_forward, ConvKernel3D};
use crate::ops::{self, BnRunningStats, Mode};
use crate::tape::{GradTape, Gradients, ValueId};
use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Product of the stride-2 stages (one per path, two in the trunk).
pub const DOWNSAMPLE_FACTOR: usize = 8;
pub const DEFAULT_INPUT_EXTENT: usize = 32;
/// Width variants reported by the latency benchmark, largest first.
pub const WIDTH_VARIANTS: [usize; 4] = [60, 45, 30, 15];

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite activations in layer '{0}'")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture descriptor: base width, reduced flag, cube extent per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub base_width: usize,
    pub reduced: bool,
    pub input_extent: usize,
}

impl NetworkSpec {
    pub fn new(base_width: usize, reduced: bool) -> Self {
        NetworkSpec {
            base_width,
            reduced,
            input_extent: DEFAULT_INPUT_EXTENT,
        }
    }

    pub fn with_extent(mut self, extent: usize) -> Self {
        self.input_extent = extent;
        self
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.base_width < 1 {
            return Err(NetworkError::InvalidSpec("base width must be >= 1".into()));
        }
        if self.input_extent < 16 {
            return Err(NetworkError::InvalidSpec(format!(
                "input extent {} must be >= 16",
                self.input_extent
            )));
        }
        if self.input_extent % DOWNSAMPLE_FACTOR != 0 {
            return Err(NetworkError::InvalidSpec(format!(
                "input extent {} must be divisible by {}",
                self.input_extent, DOWNSAMPLE_FACTOR
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockDef {
    name: &'static str,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    omit_reduced: bool,
}

impl BlockDef {
    fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_ch != self.out_ch
    }
}

/// Residual-block schedule for one spec: per-path blocks (weights shared by
/// both volumes) and joint-trunk blocks after concatenation.
fn schedule(spec: &NetworkSpec) -> (Vec<BlockDef>, Vec<BlockDef>) {
    let f = spec.base_width;
    let path = vec![
        BlockDef { name: "path.rb1", in_ch: f, out_ch: f, stride: 1, omit_reduced: false },
        BlockDef { name: "path.rb2", in_ch: f, out_ch: f, stride: 1, omit_reduced: true },
        BlockDef { name: "path.rb3", in_ch: f, out_ch: 2 * f, stride: 2, omit_reduced: false },
    ];
    let trunk = vec![
        BlockDef { name: "trunk.rb4", in_ch: 4 * f, out_ch: 4 * f, stride: 2, omit_reduced: false },
        BlockDef { name: "trunk.rb5", in_ch: 4 * f, out_ch: 4 * f, stride: 1, omit_reduced: true },
        BlockDef { name: "trunk.rb6", in_ch: 4 * f, out_ch: 8 * f, stride: 2, omit_reduced: false },
        BlockDef { name: "trunk.rb7", in_ch: 8 * f, out_ch: 8 * f, stride: 1, omit_reduced: true },
    ];
    let keep = |blocks: Vec<BlockDef>| -> Vec<BlockDef> {
        blocks
            .into_iter()
            .filter(|b| !(spec.reduced && b.omit_reduced))
            .collect()
    };
    (keep(path), keep(trunk))
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: BnRunningStats,
}

impl BnParams {
    fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running: BnRunningStats::new(channels),
        }
    }
}

#[derive(Debug, Clone)]
struct BlockParams {
    def: BlockDef,
    conv1: ConvParams,
    bn1: BnParams,
    conv2: ConvParams,
    bn2: BnParams,
    proj: Option<(Tensor, BnParams)>,
}

/// The trainable weights and BN buffers of one network instance. Parameters
/// for the two input paths exist exactly once; both volumes share them.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    spec: NetworkSpec,
    stem: ConvParams,
    stem_bn: BnParams,
    path: Vec<BlockParams>,
    trunk: Vec<BlockParams>,
    head_weight: Tensor,
    head_bias: Tensor,
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

fn build_block(def: &BlockDef, rng: &mut ChaCha8Rng) -> BlockParams {
    let conv1 = ConvParams {
        weight: fan_in_uniform(rng, &[def.out_ch, def.in_ch, 3, 3, 3], def.in_ch * 27),
        bias: Tensor::zeros(&[def.out_ch]),
    };
    let conv2 = ConvParams {
        weight: fan_in_uniform(rng, &[def.out_ch, def.out_ch, 3, 3, 3], def.out_ch * 27),
        bias: Tensor::zeros(&[def.out_ch]),
    };
    let proj = def.needs_projection().then(|| {
        (
            fan_in_uniform(rng, &[def.out_ch, def.in_ch], def.in_ch),
            BnParams::new(def.out_ch),
        )
    });
    BlockParams {
        def: def.clone(),
        conv1,
        bn1: BnParams::new(def.out_ch),
        conv2,
        bn2: BnParams::new(def.out_ch),
        proj,
    }
}

/// Deterministically instantiate parameters for `spec` from `seed`.
pub fn build(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams, NetworkError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = spec.base_width;
    let (path_defs, trunk_defs) = schedule(spec);
    let stem = ConvParams {
        weight: fan_in_uniform(&mut rng, &[f, 1, 3, 3, 3], 27),
        bias: Tensor::zeros(&[f]),
    };
    let stem_bn = BnParams::new(f);
    let path = path_defs.iter().map(|d| build_block(d, &mut rng)).collect();
    let trunk = trunk_defs.iter().map(|d| build_block(d, &mut rng)).collect();
    let head_weight = fan_in_uniform(&mut rng, &[3, 8 * f], 8 * f);
    let head_bias = Tensor::zeros(&[3]);
    Ok(NetworkParams {
        spec: *spec,
        stem,
        stem_bn,
        path,
        trunk,
        head_weight,
        head_bias,
    })
}

/// Role of a named tensor inside [`NetworkParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Trainable,
    RunningStat,
}

impl NetworkParams {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Visit every named tensor (trainable weights first within each unit,
    /// then BN buffers) in a fixed order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor, TensorRole)) {
        fn bn(prefix: &str, p: &BnParams, f: &mut impl FnMut(&str, &Tensor, TensorRole)) {
            f(&format!("{prefix}.gamma"), &p.gamma, TensorRole::Trainable);
            f(&format!("{prefix}.beta"), &p.beta, TensorRole::Trainable);
            f(&format!("{prefix}.running_mean"), &p.running.mean, TensorRole::RunningStat);
            f(&format!("{prefix}.running_var"), &p.running.var, TensorRole::RunningStat);
        }
        fn block(b: &BlockParams, f: &mut impl FnMut(&str, &Tensor, TensorRole)) {
            let n = b.def.name;
            f(&format!("{n}.conv1.weight"), &b.conv1.weight, TensorRole::Trainable);
            f(&format!("{n}.conv1.bias"), &b.conv1.bias, TensorRole::Trainable);
            bn(&format!("{n}.bn1"), &b.bn1, f);
            f(&format!("{n}.conv2.weight"), &b.conv2.weight, TensorRole::Trainable);
            f(&format!("{n}.conv2.bias"), &b.conv2.bias, TensorRole::Trainable);
            bn(&format!("{n}.bn2"), &b.bn2, f);
            if let Some((w, pbn)) = &b.proj {
                f(&format!("{n}.proj.weight"), w, TensorRole::Trainable);
                bn(&format!("{n}.projbn"), pbn, f);
            }
        }
        f("stem.weight", &self.stem.weight, TensorRole::Trainable);
        f("stem.bias", &self.stem.bias, TensorRole::Trainable);
        bn("stem.bn", &self.stem_bn, f);
        for b in &self.path {
            block(b, f);
        }
        for b in &self.trunk {
            block(b, f);
        }
        f("head.weight", &self.head_weight, TensorRole::Trainable);
        f("head.bias", &self.head_bias, TensorRole::Trainable);
    }

    /// Mutable references to all trainable tensors, in visit order.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn bn<'a>(prefix: &str, p: &'a mut BnParams, out: &mut Vec<(String, &'a mut Tensor)>) {
            out.push((format!("{prefix}.gamma"), &mut p.gamma));
            out.push((format!("{prefix}.beta"), &mut p.beta));
        }
        fn block<'a>(b: &'a mut BlockParams, out: &mut Vec<(String, &'a mut Tensor)>) {
            let n = b.def.name;
            out.push((format!("{n}.conv1.weight"), &mut b.conv1.weight));
            out.push((format!("{n}.conv1.bias"), &mut b.conv1.bias));
            bn(&format!("{n}.bn1"), &mut b.bn1, out);
            out.push((format!("{n}.conv2.weight"), &mut b.conv2.weight));
            out.push((format!("{n}.conv2.bias"), &mut b.conv2.bias));
            bn(&format!("{n}.bn2"), &mut b.bn2, out);
            if let Some((w, pbn)) = &mut b.proj {
                out.push((format!("{n}.proj.weight"), w));
                bn(&format!("{n}.projbn"), pbn, out);
            }
        }
        let mut out = Vec::new();
        out.push(("stem.weight".to_string(), &mut self.stem.weight));
        out.push(("stem.bias".to_string(), &mut self.stem.bias));
        bn("stem.bn", &mut self.stem_bn, &mut out);
        for b in &mut self.path {
            block(b, &mut out);
        }
        for b in &mut self.trunk {
            block(b, &mut out);
        }
        out.push(("head.weight".to_string(), &mut self.head_weight));
        out.push(("head.bias".to_string(), &mut self.head_bias));
        out
    }

    /// Mutable references to every named tensor (weights and BN buffers), in
    /// visit order.
    fn all_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn bn<'a>(prefix: &str, p: &'a mut BnParams, out: &mut Vec<(String, &'a mut Tensor)>) {
            out.push((format!("{prefix}.gamma"), &mut p.gamma));
            out.push((format!("{prefix}.beta"), &mut p.beta));
            out.push((format!("{prefix}.running_mean"), &mut p.running.mean));
            out.push((format!("{prefix}.running_var"), &mut p.running.var));
        }
        fn block<'a>(b: &'a mut BlockParams, out: &mut Vec<(String, &'a mut Tensor)>) {
            let n = b.def.name;
            out.push((format!("{n}.conv1.weight"), &mut b.conv1.weight));
            out.push((format!("{n}.conv1.bias"), &mut b.conv1.bias));
            bn(&format!("{n}.bn1"), &mut b.bn1, out);
            out.push((format!("{n}.conv2.weight"), &mut b.conv2.weight));
            out.push((format!("{n}.conv2.bias"), &mut b.conv2.bias));
            bn(&format!("{n}.bn2"), &mut b.bn2, out);
            if let Some((w, pbn)) = &mut b.proj {
                out.push((format!("{n}.proj.weight"), w));
                bn(&format!("{n}.projbn"), pbn, out);
            }
        }
        let mut out = Vec::new();
        out.push(("stem.weight".to_string(), &mut self.stem.weight));
        out.push(("stem.bias".to_string(), &mut self.stem.bias));
        bn("stem.bn", &mut self.stem_bn, &mut out);
        for b in &mut self.path {
            block(b, &mut out);
        }
        for b in &mut self.trunk {
            block(b, &mut out);
        }
        out.push(("head.weight".to_string(), &mut self.head_weight));
        out.push(("head.bias".to_string(), &mut self.head_bias));
        out
    }

    /// Overwrite every named tensor from `entries` (which must agree on
    /// names, order and shapes) and restore the BN update counter.
    pub fn load_named_tensors(
        &mut self,
        entries: &[(String, Tensor)],
        batches_tracked: u64,
    ) -> Result<(), String> {
        let mut slots = self.all_tensors_mut();
        if slots.len() != entries.len() {
            return Err(format!(
                "tensor count mismatch: expected {}, found {}",
                slots.len(),
                entries.len()
            ));
        }
        for ((name, slot), (got_name, got)) in slots.iter_mut().zip(entries) {
            if name != got_name {
                return Err(format!("tensor name mismatch: expected {name}, found {got_name}"));
            }
            if slot.shape() != got.shape() {
                return Err(format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    slot.shape(),
                    got.shape()
                ));
            }
            slot.data_mut().copy_from_slice(got.data());
        }
        self.set_bn_updates(batches_tracked);
        Ok(())
    }

    fn set_bn_updates(&mut self, count: u64) {
        let mut set = |bn: &mut BnParams| bn.running.batches_tracked = count;
        set(&mut self.stem_bn);
        for b in self.path.iter_mut().chain(self.trunk.iter_mut()) {
            set(&mut b.bn1);
            set(&mut b.bn2);
            if let Some((_, pbn)) = &mut b.proj {
                set(pbn);
            }
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor, TensorRole)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t, role| out.push((name.to_string(), t.clone(), role)));
        out
    }

    /// Number of trainable scalars; a pure function of (F, reduced).
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |_, t, role| {
            if role == TensorRole::Trainable {
                count += t.len();
            }
        });
        count
    }

    /// Counter of train-mode BN updates; zero means eval would fail.
    pub fn bn_updates(&self) -> u64 {
        self.stem_bn.running.batches_tracked
    }
}

/// Trainable parameter count for a spec without instantiating weights.
pub fn param_count(spec: &NetworkSpec) -> Result<usize, NetworkError> {
    Ok(build(spec, 0)?.param_count())
}

// ── forward passes ──────────────────────────────────────────────────

/// Stack per-pair volumes `[N,1,E,E,E]` + `[N,1,E,E,E]` into the two-path
/// batch layout `[2N,1,E,E,E]` (all A volumes, then all B volumes).
pub fn stack_pairs(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    a.expect_rank(5, "pair volumes A")?;
    b.expect_shape(a.shape(), "pair volumes B")?;
    let mut shape = a.shape().to_vec();
    shape[0] *= 2;
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&shape, data)
}

fn check_stacked(spec: &NetworkSpec, stacked: &Tensor) -> Result<(), NetworkError> {
    stacked.expect_rank(5, "network input")?;
    stacked.expect_extent(1, 1, "network input channels")?;
    for axis in 2..5 {
        stacked.expect_extent(axis, spec.input_extent, "network input extent")?;
    }
    if stacked.extent(0) % 2 != 0 {
        return Err(NetworkError::InvalidSpec(
            "stacked batch must hold an even number of volumes".into(),
        ));
    }
    stacked.check_finite("input volumes")?;
    Ok(())
}

fn kernel(conv: &ConvParams, stride: usize) -> Result<ConvKernel3D, TensorError> {
    ConvKernel3D::new(conv.weight.clone(), conv.bias.clone(), stride)
}

fn eval_bn(x: &Tensor, bn: &BnParams) -> Result<Tensor, TensorError> {
    ops::batchnorm3d_eval(x, &bn.gamma, &bn.beta, &bn.running)
}

fn eval_block(x: Tensor, b: &BlockParams) -> Result<Tensor, NetworkError> {
    let main = conv3d_forward(&x, &kernel(&b.conv1, b.def.stride)?)?;
    let main = eval_bn(&main, &b.bn1)?;
    let main = ops::relu(&main);
    let main = conv3d_forward(&main, &kernel(&b.conv2, 1)?)?;
    let main = eval_bn(&main, &b.bn2)?;
    let skip = match &b.proj {
        Some((w, pbn)) => eval_bn(&ops::proj_conv3d(&x, w, b.def.stride)?, pbn)?,
        None => x,
    };
    let out = ops::relu(&ops::add(&main, &skip)?);
    out.check_finite(b.def.name)
        .map_err(|_| NetworkError::NonFinite(b.def.name.to_string()))?;
    Ok(out)
}

/// Eval-mode inference on a stacked batch; returns `[N, 3]` predictions.
/// Running statistics are read, never written, so repeated calls with the
/// same inputs are bitwise identical.
pub fn forward_batch(params: &NetworkParams, stacked: &Tensor) -> Result<Tensor, NetworkError> {
    check_stacked(&params.spec, stacked)?;
    let mut x = conv3d_forward(stacked, &kernel(&params.stem, 1)?)?;
    x = eval_bn(&x, &params.stem_bn)?;
    x = ops::relu(&x);
    x.check_finite("stem")
        .map_err(|_| NetworkError::NonFinite("stem".into()))?;
    for b in &params.path {
        x = eval_block(x, b)?;
    }
    x = ops::pair_concat(&x)?;
    for b in &params.trunk {
        x = eval_block(x, b)?;
    }
    let pooled = ops::global_avg_pool(&x)?;
    let pred = ops::linear(&pooled, &params.head_weight, &params.head_bias)?;
    pred.check_finite("head")
        .map_err(|_| NetworkError::NonFinite("head".into()))?;
    Ok(pred)
}

/// Eval-mode inference for one volume pair, each `[E, E, E]`.
pub fn forward_single(
    params: &NetworkParams,
    vol_a: &Tensor,
    vol_b: &Tensor,
) -> Result<[f32; 3], NetworkError> {
    let e = params.spec.input_extent;
    vol_a.expect_shape(&[e, e, e], "volume A")?;
    vol_b.expect_shape(&[e, e, e], "volume B")?;
    let a = Tensor::from_vec(&[1, 1, e, e, e], vol_a.data().to_vec())?;
    let b = Tensor::from_vec(&[1, 1, e, e, e], vol_b.data().to_vec())?;
    let pred = forward_batch(params, &stack_pairs(&a, &b)?)?;
    Ok([pred.data()[0], pred.data()[1], pred.data()[2]])
}

/// Mode-dispatching forward. Train mode records (and discards) a tape and
/// updates BN running statistics; eval mode leaves `params` untouched.
pub fn forward(
    params: &mut NetworkParams,
    stacked: &Tensor,
    mode: Mode,
) -> Result<Tensor, NetworkError> {
    match mode {
        Mode::Eval => forward_batch(params, stacked),
        Mode::Train => {
            let taped = forward_with_tape(params, stacked)?;
            Ok(taped.tape.value(taped.prediction).clone())
        } // tape dropped: plain train-mode inference still updates BN stats
    }
}

/// A recorded train-mode forward pass, ready for backpropagation.
pub struct TapedForward {
    tape: GradTape,
    prediction: ValueId,
    param_ids: Vec<(String, ValueId)>,
}

impl TapedForward {
    pub fn tape(&self) -> &GradTape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut GradTape {
        &mut self.tape
    }

    pub fn prediction(&self) -> ValueId {
        self.prediction
    }

    /// Extract gradients for every trainable parameter in visit order.
    /// Parameters that did not influence the root get zero gradients.
    pub fn parameter_grads(&self, grads: &mut Gradients) -> Vec<(String, Tensor)> {
        self.param_ids
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .take(*id)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(*id).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

struct TapeWalk {
    tape: GradTape,
    param_ids: Vec<(String, ValueId)>,
}

impl TapeWalk {
    fn param(&mut self, name: String, t: &Tensor) -> ValueId {
        let id = self.tape.leaf(t.clone());
        self.param_ids.push((name, id));
        id
    }

    fn bn(&mut self, prefix: &str, x: ValueId, bn: &mut BnParams) -> Result<ValueId, TensorError> {
        let gamma = self.param(format!("{prefix}.gamma"), &bn.gamma);
        let beta = self.param(format!("{prefix}.beta"), &bn.beta);
        self.tape.batchnorm3d(x, gamma, beta, &mut bn.running)
    }

    fn block(&mut self, x: ValueId, b: &mut BlockParams) -> Result<ValueId, TensorError> {
        let n = b.def.name;
        let w1 = self.param(format!("{n}.conv1.weight"), &b.conv1.weight);
        let b1 = self.param(format!("{n}.conv1.bias"), &b.conv1.bias);
        let mut main = self.tape.conv3d(x, w1, b1, b.def.stride)?;
        main = self.bn(&format!("{n}.bn1"), main, &mut b.bn1)?;
        main = self.tape.relu(main);
        let w2 = self.param(format!("{n}.conv2.weight"), &b.conv2.weight);
        let b2 = self.param(format!("{n}.conv2.bias"), &b.conv2.bias);
        main = self.tape.conv3d(main, w2, b2, 1)?;
        main = self.bn(&format!("{n}.bn2"), main, &mut b.bn2)?;
        let skip = match &mut b.proj {
            Some((w, pbn)) => {
                let wid = {
                    let id = self.tape.leaf(w.clone());
                    self.param_ids.push((format!("{n}.proj.weight"), id));
                    id
                };
                let projected = self.tape.proj_conv3d(x, wid, b.def.stride)?;
                let gamma = self.param(format!("{n}.projbn.gamma"), &pbn.gamma);
                let beta = self.param(format!("{n}.projbn.beta"), &pbn.beta);
                self.tape.batchnorm3d(projected, gamma, beta, &mut pbn.running)?
            }
            None => x,
        };
        let sum = self.tape.add(main, skip)?;
        Ok(self.tape.relu(sum))
    }
}

/// Train-mode forward with gradient recording. Updates BN running statistics.
pub fn forward_with_tape(
    params: &mut NetworkParams,
    stacked: &Tensor,
) -> Result<TapedForward, NetworkError> {
    check_stacked(&params.spec, stacked)?;
    let mut walk = TapeWalk {
        tape: GradTape::new(),
        param_ids: Vec::new(),
    };
    let input = walk.tape.leaf(stacked.clone());
    let sw = walk.param("stem.weight".into(), &params.stem.weight);
    let sb = walk.param("stem.bias".into(), &params.stem.bias);
    let mut x = walk.tape.conv3d(input, sw, sb, 1)?;
    x = walk.bn("stem.bn", x, &mut params.stem_bn)?;
    x = walk.tape.relu(x);
    for b in &mut params.path {
        x = walk.block(x, b)?;
    }
    x = walk.tape.pair_concat(x)?;
    for b in &mut params.trunk {
        x = walk.block(x, b)?;
    }
    let pooled = walk.tape.global_avg_pool(x)?;
    let hw = walk.param("head.weight".into(), &params.head_weight);
    let hb = walk.param("head.bias".into(), &params.head_bias);
    let pred = walk.tape.linear(pooled, hw, hb)?;
    walk.tape
        .value(pred)
        .check_finite("head")
        .map_err(|_| NetworkError::NonFinite("head".into()))?;
    Ok(TapedForward {
        tape: walk.tape,
        prediction: pred,
        param_ids: walk.param_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(2, false).with_extent(16)
    }

    fn rand_vols(n: usize, extent: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * extent * extent * extent;
        Tensor::from_vec(
            &[n, 1, extent, extent, extent],
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = tiny_spec();
        let a = build(&spec, 42).unwrap();
        let b = build(&spec, 42).unwrap();
        let mut equal = true;
        let bt = b.named_tensors();
        let mut i = 0;
        a.visit(&mut |name, t, _| {
            equal &= bt[i].0 == name && bt[i].1.data() == t.data();
            i += 1;
        });
        assert!(equal);
        let c = build(&spec, 43).unwrap();
        assert_ne!(
            a.named_tensors()[0].1.data(),
            c.named_tensors()[0].1.data()
        );
    }

    #[test]
    fn capacity_ordering_over_width_and_reduction() {
        let count = |f: usize, reduced: bool| {
            param_count(&NetworkSpec::new(f, reduced).with_extent(16)).unwrap()
        };
        assert!(count(30, false) < count(60, false));
        assert!(count(15, true) < count(15, false));
        let mut prev = 0;
        for f in WIDTH_VARIANTS.iter().rev() {
            let c = count(*f, false);
            assert!(c > prev);
            prev = c;
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(build(&NetworkSpec::new(0, false), 1).is_err());
        assert!(build(&NetworkSpec::new(2, false).with_extent(12), 1).is_err());
        assert!(build(&NetworkSpec::new(2, false).with_extent(20), 1).is_err());
    }

    #[test]
    fn fresh_network_produces_finite_predictions() {
        let spec = tiny_spec();
        let mut params = build(&spec, 1).unwrap();
        let stacked = rand_vols(4, 16, 5);
        // train once so eval-mode BN has statistics
        forward(&mut params, &stacked, Mode::Train).unwrap();
        let pred = forward_batch(&params, &stacked).unwrap();
        assert_eq!(pred.shape(), &[2, 3]);
        assert!(pred.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_pairs_produce_identical_rows() {
        let spec = tiny_spec();
        let mut params = build(&spec, 2).unwrap();
        forward(&mut params, &rand_vols(4, 16, 6), Mode::Train).unwrap();
        let one = rand_vols(1, 16, 7);
        let a = Tensor::from_vec(
            &[3, 1, 16, 16, 16],
            one.data().iter().cycle().take(3 * one.len()).copied().collect(),
        )
        .unwrap();
        let b = rand_vols(1, 16, 8);
        let bs = Tensor::from_vec(
            &[3, 1, 16, 16, 16],
            b.data().iter().cycle().take(3 * b.len()).copied().collect(),
        )
        .unwrap();
        let pred = forward_batch(&params, &stack_pairs(&a, &bs).unwrap()).unwrap();
        let rows: Vec<&[f32]> = pred.data().chunks_exact(3).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[0], rows[2]);
    }

    #[test]
    fn eval_mode_is_pure_and_bitwise_repeatable() {
        let spec = tiny_spec();
        let mut params = build(&spec, 3).unwrap();
        forward(&mut params, &rand_vols(4, 16, 9), Mode::Train).unwrap();
        let stacked = rand_vols(2, 16, 10);
        let before = params.named_tensors();
        let p1 = forward_batch(&params, &stacked).unwrap();
        let p2 = forward_batch(&params, &stacked).unwrap();
        assert_eq!(p1.data(), p2.data());
        let after = params.named_tensors();
        for (x, y) in before.iter().zip(after.iter()) {
            assert_eq!(x.1.data(), y.1.data(), "{} mutated in eval", x.0);
        }
    }

    #[test]
    fn zeroed_stem_collapses_both_paths() {
        let spec = tiny_spec();
        let mut params = build(&spec, 4).unwrap();
        forward(&mut params, &rand_vols(4, 16, 11), Mode::Train).unwrap();
        for (name, t) in params.trainable_mut() {
            if name.starts_with("stem.") {
                t.data_mut().fill(0.0);
            }
        }
        let a = rand_vols(1, 16, 12);
        let b = rand_vols(1, 16, 13);
        let ab = forward_batch(&params, &stack_pairs(&a, &b).unwrap()).unwrap();
        let ba = forward_batch(&params, &stack_pairs(&b, &a).unwrap()).unwrap();
        let aa = forward_batch(&params, &stack_pairs(&a, &a).unwrap()).unwrap();
        assert_eq!(ab.data(), ba.data());
        assert_eq!(ab.data(), aa.data());
    }

    #[test]
    fn tape_gradients_are_deterministic() {
        let spec = tiny_spec();
        let stacked = rand_vols(4, 16, 14);
        let target = Tensor::from_vec(&[2, 3], vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4]).unwrap();
        let run = || {
            let mut params = build(&spec, 5).unwrap();
            let mut taped = forward_with_tape(&mut params, &stacked).unwrap();
            let tgt = taped.tape_mut().leaf(target.clone());
            let pred_id = taped.prediction();
            let loss = taped.tape_mut().mse_loss(pred_id, tgt).unwrap();
            let mut grads = taped.tape().backward(loss).unwrap();
            taped.parameter_grads(&mut grads)
        };
        let g1 = run();
        let g2 = run();
        for ((n1, t1), (n2, t2)) in g1.iter().zip(g2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "gradient {n1} not deterministic");
        }
    }

    #[test]
    fn zero_residual_at_optimum() {
        // pred == target gives zero parameter gradients
        let spec = tiny_spec();
        let mut params = build(&spec, 6).unwrap();
        let stacked = rand_vols(2, 16, 15);
        let mut taped = forward_with_tape(&mut params, &stacked).unwrap();
        let pred = taped.tape().value(taped.prediction()).clone();
        let tgt = taped.tape_mut().leaf(pred);
        let pred_id = taped.prediction();
            let loss = taped.tape_mut().mse_loss(pred_id, tgt).unwrap();
        assert_eq!(taped.tape().value(loss).data()[0], 0.0);
        let mut grads = taped.tape().backward(loss).unwrap();
        for (name, g) in taped.parameter_grads(&mut grads) {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name} grad nonzero");
        }
    }
}
