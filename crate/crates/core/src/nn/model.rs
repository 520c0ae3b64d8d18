//! Layered classifier graphs with BN feature taps and explicit backprop.
//!
//! A model is a list of blocks; a block is either a single layer or a
//! residual branch computing `x + f(x)`. The forward pass can optionally
//! run under a fake-quantization context (low-bit weights and
//! activations with straight-through gradients).

use crate::error::{DfqError, Result};
use crate::nn::init::ParamInit;
use crate::nn::layers::*;
use crate::quantizer::{self, RangeTracker};
use crate::scalar::Scalar;
use ndarray::{Array1, ArrayD, IxDyn};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub w: ArrayD<F>,
    pub b: Array1<F>,
    pub dw: ArrayD<F>,
    pub db: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: &mut ParamInit,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = init.he_normal::<F>(&[cout, cin, kernel, kernel], fan_in);
        Conv2d {
            dw: ArrayD::zeros(w.raw_dim()),
            w,
            b: Array1::zeros(cout),
            db: Array1::zeros(cout),
            stride,
            pad,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub w: ArrayD<F>, // (out, in)
    pub b: Array1<F>,
    pub dw: ArrayD<F>,
    pub db: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(inp: usize, out: usize, init: &mut ParamInit) -> Self {
        let w = init.he_normal::<F>(&[out, inp], inp);
        Linear {
            dw: ArrayD::zeros(w.raw_dim()),
            w,
            b: Array1::zeros(out),
            db: Array1::zeros(out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mu: Array1<F>,
    pub running_sigma: Array1<F>,
    pub dgamma: Array1<F>,
    pub dbeta: Array1<F>,
    pub eps: F,
    pub momentum: F,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mu: Array1::zeros(channels),
            running_sigma: Array1::ones(channels),
            dgamma: Array1::zeros(channels),
            dbeta: Array1::zeros(channels),
            eps: F::from_real(1e-5),
            momentum: F::from_real(0.1),
        }
    }

    pub fn params(&self) -> BnParams<'_, F> {
        BnParams {
            gamma: &self.gamma,
            beta: &self.beta,
            running_mu: &self.running_mu,
            running_sigma: &self.running_sigma,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<F: Scalar> {
    Conv(Conv2d<F>),
    Bn(BatchNorm<F>),
    Relu,
    LeakyRelu(F),
    Tanh,
    GlobalAvgPool,
    Reshape(Vec<usize>), // target shape without the batch dim
    Upsample(usize),
    Linear(Linear<F>),
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Block<F: Scalar> {
    Plain(Layer<F>),
    /// `x + branch(x)`; branch must preserve shape.
    Residual(Vec<Layer<F>>),
}

pub enum LayerCache<F: Scalar> {
    Conv {
        conv: ConvCache<F>,
        /// Quantized weight actually used, plus its STE mask.
        wq: Option<(ArrayD<F>, ArrayD<F>)>,
    },
    Bn(BnCache<F>),
    Relu {
        input: ArrayD<F>,
        act_mask: Option<ArrayD<F>>,
    },
    LeakyRelu {
        input: ArrayD<F>,
    },
    Tanh {
        output: ArrayD<F>,
    },
    Pool {
        input_shape: Vec<usize>,
    },
    Reshape {
        input_shape: Vec<usize>,
    },
    Upsample {
        input_shape: Vec<usize>,
    },
    Linear {
        input: ArrayD<F>,
        wq: Option<(ArrayD<F>, ArrayD<F>)>,
    },
}

#[allow(clippy::large_enum_variant)]
pub enum BlockCache<F: Scalar> {
    Plain(LayerCache<F>),
    Residual(Vec<LayerCache<F>>),
}

pub struct ModelCache<F: Scalar> {
    pub blocks: Vec<BlockCache<F>>,
}

impl<F: Scalar> ModelCache<F> {
    /// Pre-normalization inputs of every BN layer, in declaration order.
    pub fn bn_inputs(&self) -> Vec<&ArrayD<F>> {
        let mut taps = Vec::new();
        for b in &self.blocks {
            match b {
                BlockCache::Plain(l) => collect_bn(l, &mut taps),
                BlockCache::Residual(ls) => {
                    for l in ls {
                        collect_bn(l, &mut taps);
                    }
                }
            }
        }
        taps
    }
}

fn collect_bn<'a, F: Scalar>(l: &'a LayerCache<F>, taps: &mut Vec<&'a ArrayD<F>>) {
    if let LayerCache::Bn(c) = l {
        taps.push(&c.input);
    }
}

/// Fake-quantization context threaded through a forward pass.
pub struct QuantPass<'a> {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Clip range per weight-bearing layer, keyed by global layer index.
    pub weight_alphas: &'a BTreeMap<usize, f64>,
    /// Activation range trackers, keyed by global layer index of the
    /// activation layer.
    pub trackers: &'a mut BTreeMap<usize, RangeTracker>,
    /// Observe activation ranges during this pass (training time).
    pub observe: bool,
}

#[derive(Debug, Clone)]
pub struct ModelGraph<F: Scalar> {
    pub blocks: Vec<Block<F>>,
    pub num_classes: usize,
    pub arch: String,
    pub input_shape: Vec<usize>, // (C, H, W)
}

pub struct ParamView<'a, F> {
    pub name: String,
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
    pub shape: Vec<usize>,
}

pub struct StateView<'a, F> {
    pub name: String,
    pub value: &'a mut [F],
    pub shape: Vec<usize>,
}

impl<F: Scalar> ModelGraph<F> {
    pub fn new(
        blocks: Vec<Block<F>>,
        num_classes: usize,
        arch: impl Into<String>,
        input_shape: Vec<usize>,
    ) -> Self {
        ModelGraph {
            blocks,
            num_classes,
            arch: arch.into(),
            input_shape,
        }
    }

    /// Indices (into the flattened layer list) of BN layers.
    pub fn bn_layer_ids(&self) -> Vec<usize> {
        let mut ids = Vec::new();
        let mut idx = 0usize;
        self.for_each_layer(|l| {
            if matches!(l, Layer::Bn(_)) {
                ids.push(idx);
            }
            idx += 1;
        });
        ids
    }

    pub fn num_bn_layers(&self) -> usize {
        self.bn_layer_ids().len()
    }

    fn for_each_layer(&self, mut f: impl FnMut(&Layer<F>)) {
        for b in &self.blocks {
            match b {
                Block::Plain(l) => f(l),
                Block::Residual(ls) => ls.iter().for_each(&mut f),
            }
        }
    }

    /// BN layers in declaration order (for statistic targets).
    pub fn bn_layers(&self) -> Vec<&BatchNorm<F>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Plain(Layer::Bn(bn)) => out.push(bn),
                Block::Plain(_) => {}
                Block::Residual(ls) => {
                    for l in ls {
                        if let Layer::Bn(bn) = l {
                            out.push(bn);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward_full(
        &mut self,
        x: &ArrayD<F>,
        mode: BnMode,
        update_running: bool,
        mut quant: Option<&mut QuantPass>,
    ) -> Result<(ArrayD<F>, ModelCache<F>)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut layer_idx = 0usize;
        for block in &mut self.blocks {
            match block {
                Block::Plain(layer) => {
                    let (y, c) = layer_forward(
                        layer,
                        &cur,
                        mode,
                        update_running,
                        layer_idx,
                        quant.as_deref_mut(),
                    )?;
                    cur = y;
                    caches.push(BlockCache::Plain(c));
                    layer_idx += 1;
                }
                Block::Residual(layers) => {
                    let skip = cur.clone();
                    let mut branch_caches = Vec::with_capacity(layers.len());
                    for layer in layers.iter_mut() {
                        let (y, c) = layer_forward(
                            layer,
                            &cur,
                            mode,
                            update_running,
                            layer_idx,
                            quant.as_deref_mut(),
                        )?;
                        cur = y;
                        branch_caches.push(c);
                        layer_idx += 1;
                    }
                    if cur.shape() != skip.shape() {
                        return Err(DfqError::ShapeMismatch(
                            "residual branch must preserve shape".into(),
                        ));
                    }
                    cur = &cur + &skip;
                    caches.push(BlockCache::Residual(branch_caches));
                }
            }
        }
        Ok((cur, ModelCache { blocks: caches }))
    }

    pub fn forward(&mut self, x: &ArrayD<F>, mode: BnMode) -> Result<(ArrayD<F>, ModelCache<F>)> {
        self.forward_full(x, mode, mode == BnMode::Train, None)
    }

    /// Plain eval forward plus the pre-BN feature tap of every BN layer.
    /// The returned cache owns the taps; use [`ModelCache::bn_inputs`].
    pub fn forward_with_taps(&mut self, x: &ArrayD<F>) -> Result<(ArrayD<F>, ModelCache<F>)> {
        self.forward_full(x, BnMode::Eval, false, None)
    }

    /// Backpropagate `d_logits`, accumulating parameter gradients.
    /// `tap_grads` (keyed by BN layer position, 0-based in declaration
    /// order) are added to the gradient flowing into that BN layer's
    /// input. Returns the gradient with respect to the model input.
    pub fn backward(
        &mut self,
        cache: &ModelCache<F>,
        d_logits: &ArrayD<F>,
        tap_grads: Option<&BTreeMap<usize, ArrayD<F>>>,
    ) -> ArrayD<F> {
        // Walk blocks in reverse, tracking the BN counter backwards.
        let total_bn = self.num_bn_layers();
        let mut bn_seen_rev = 0usize;
        let mut dy = d_logits.clone();
        for (block, bcache) in self.blocks.iter_mut().rev().zip(cache.blocks.iter().rev()) {
            match (block, bcache) {
                (Block::Plain(layer), BlockCache::Plain(lc)) => {
                    dy = layer_backward(
                        layer,
                        lc,
                        &dy,
                        tap_grads,
                        total_bn,
                        &mut bn_seen_rev,
                    );
                }
                (Block::Residual(layers), BlockCache::Residual(lcs)) => {
                    let d_skip = dy.clone();
                    let mut d = dy;
                    for (layer, lc) in layers.iter_mut().rev().zip(lcs.iter().rev()) {
                        d = layer_backward(layer, lc, &d, tap_grads, total_bn, &mut bn_seen_rev);
                    }
                    dy = &d + &d_skip;
                }
                _ => unreachable!("cache shape mismatch"),
            }
        }
        dy
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p: ParamView<F>| {
            for g in p.grad.iter_mut() {
                *g = F::zero();
            }
        });
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<F>)) {
        let mut idx = 0usize;
        for block in &mut self.blocks {
            match block {
                Block::Plain(l) => visit_layer_params(l, &mut idx, f),
                Block::Residual(ls) => {
                    for l in ls {
                        visit_layer_params(l, &mut idx, f);
                    }
                }
            }
        }
    }

    /// Non-trainable state (BN running statistics).
    pub fn visit_state(&mut self, f: &mut dyn FnMut(StateView<F>)) {
        let mut idx = 0usize;
        for block in &mut self.blocks {
            match block {
                Block::Plain(l) => visit_layer_state(l, &mut idx, f),
                Block::Residual(ls) => {
                    for l in ls {
                        visit_layer_state(l, &mut idx, f);
                    }
                }
            }
        }
    }

    /// SHA-256 over all parameters and state, for immutability checks.
    pub fn content_hash(&mut self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit_params(&mut |p: ParamView<F>| {
            for v in p.value.iter() {
                hasher.update(v.to_real().to_le_bytes());
            }
        });
        self.visit_state(&mut |s: StateView<F>| {
            for v in s.value.iter() {
                hasher.update(v.to_real().to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }
}

fn visit_layer_params<F: Scalar>(
    l: &mut Layer<F>,
    idx: &mut usize,
    f: &mut dyn FnMut(ParamView<F>),
) {
    let i = *idx;
    match l {
        Layer::Conv(c) => {
            let shape = c.w.shape().to_vec();
            f(ParamView {
                name: format!("layer{i}.conv.w"),
                value: c.w.as_slice_mut().unwrap(),
                grad: c.dw.as_slice_mut().unwrap(),
                shape,
            });
            let blen = c.b.len();
            f(ParamView {
                name: format!("layer{i}.conv.b"),
                value: c.b.as_slice_mut().unwrap(),
                grad: c.db.as_slice_mut().unwrap(),
                shape: vec![blen],
            });
        }
        Layer::Linear(lin) => {
            let shape = lin.w.shape().to_vec();
            f(ParamView {
                name: format!("layer{i}.linear.w"),
                value: lin.w.as_slice_mut().unwrap(),
                grad: lin.dw.as_slice_mut().unwrap(),
                shape,
            });
            let blen = lin.b.len();
            f(ParamView {
                name: format!("layer{i}.linear.b"),
                value: lin.b.as_slice_mut().unwrap(),
                grad: lin.db.as_slice_mut().unwrap(),
                shape: vec![blen],
            });
        }
        Layer::Bn(bn) => {
            let ch = bn.gamma.len();
            f(ParamView {
                name: format!("layer{i}.bn.gamma"),
                value: bn.gamma.as_slice_mut().unwrap(),
                grad: bn.dgamma.as_slice_mut().unwrap(),
                shape: vec![ch],
            });
            f(ParamView {
                name: format!("layer{i}.bn.beta"),
                value: bn.beta.as_slice_mut().unwrap(),
                grad: bn.dbeta.as_slice_mut().unwrap(),
                shape: vec![ch],
            });
        }
        _ => {}
    }
    *idx += 1;
}

fn visit_layer_state<F: Scalar>(
    l: &mut Layer<F>,
    idx: &mut usize,
    f: &mut dyn FnMut(StateView<F>),
) {
    let i = *idx;
    if let Layer::Bn(bn) = l {
        let ch = bn.running_mu.len();
        f(StateView {
            name: format!("layer{i}.bn.running_mu"),
            value: bn.running_mu.as_slice_mut().unwrap(),
            shape: vec![ch],
        });
        f(StateView {
            name: format!("layer{i}.bn.running_sigma"),
            value: bn.running_sigma.as_slice_mut().unwrap(),
            shape: vec![ch],
        });
    }
    *idx += 1;
}

fn maybe_quant_weight<F: Scalar>(
    w: &ArrayD<F>,
    layer_idx: usize,
    quant: Option<&mut QuantPass>,
) -> Result<Option<(ArrayD<F>, ArrayD<F>)>> {
    if let Some(q) = quant {
        let alpha = *q
            .weight_alphas
            .get(&layer_idx)
            .ok_or_else(|| DfqError::Checkpoint(format!("no weight scale for layer {layer_idx}")))?;
        let alpha_f = F::from_real(alpha);
        let wq = quantizer::fake_quantize(w, alpha_f, q.weight_bits)?;
        let mask = quantizer::ste_mask(w, alpha_f);
        Ok(Some((wq, mask)))
    } else {
        Ok(None)
    }
}

fn layer_forward<F: Scalar>(
    layer: &mut Layer<F>,
    x: &ArrayD<F>,
    mode: BnMode,
    update_running: bool,
    layer_idx: usize,
    quant: Option<&mut QuantPass>,
) -> Result<(ArrayD<F>, LayerCache<F>)> {
    match layer {
        Layer::Conv(c) => {
            let wq = maybe_quant_weight(&c.w, layer_idx, quant)?;
            let w_used = wq.as_ref().map(|(w, _)| w).unwrap_or(&c.w);
            let (y, cache) = conv2d_forward(w_used, &c.b, x, c.stride, c.pad)?;
            Ok((y, LayerCache::Conv { conv: cache, wq }))
        }
        Layer::Linear(lin) => {
            let wq = maybe_quant_weight(&lin.w, layer_idx, quant)?;
            let w_used = wq.as_ref().map(|(w, _)| w).unwrap_or(&lin.w);
            let y = linear_forward(w_used, &lin.b, x)?;
            Ok((
                y,
                LayerCache::Linear {
                    input: x.clone(),
                    wq,
                },
            ))
        }
        Layer::Bn(bn) => {
            let (y, cache) = bn_forward(x, &bn.params(), mode)?;
            if mode == BnMode::Train && update_running {
                let m = bn.momentum;
                let one_m = F::one() - m;
                for i in 0..bn.running_mu.len() {
                    bn.running_mu[i] = one_m * bn.running_mu[i] + m * cache.batch_mean[i];
                    bn.running_sigma[i] = one_m * bn.running_sigma[i] + m * cache.batch_std[i];
                }
            }
            Ok((y, LayerCache::Bn(cache)))
        }
        Layer::Relu => {
            let mut y = relu_forward(x);
            let mut act_mask = None;
            if let Some(q) = quant {
                let tracker = q
                    .trackers
                    .get_mut(&layer_idx)
                    .expect("tracker for activation layer");
                if q.observe && !tracker.frozen {
                    tracker.observe(&y)?;
                }
                let alpha = tracker.alpha();
                if alpha > 0.0 {
                    let alpha_f = F::from_real(alpha);
                    act_mask = Some(quantizer::ste_mask(&y, alpha_f));
                    y = quantizer::fake_quantize(&y, alpha_f, q.act_bits)?;
                }
            }
            Ok((
                y,
                LayerCache::Relu {
                    input: x.clone(),
                    act_mask,
                },
            ))
        }
        Layer::LeakyRelu(slope) => {
            let y = leaky_relu_forward(x, *slope);
            Ok((y, LayerCache::LeakyRelu { input: x.clone() }))
        }
        Layer::Tanh => {
            let y = tanh_forward(x);
            Ok((
                y.clone(),
                LayerCache::Tanh { output: y },
            ))
        }
        Layer::GlobalAvgPool => {
            let y = global_avg_pool_forward(x)?;
            Ok((
                y,
                LayerCache::Pool {
                    input_shape: x.shape().to_vec(),
                },
            ))
        }
        Layer::Reshape(target) => {
            let n = x.shape()[0];
            let mut shape = vec![n];
            shape.extend_from_slice(target);
            let y = x
                .clone()
                .into_shape(IxDyn(&shape))
                .map_err(|_| DfqError::ShapeMismatch("reshape size mismatch".into()))?;
            Ok((
                y,
                LayerCache::Reshape {
                    input_shape: x.shape().to_vec(),
                },
            ))
        }
        Layer::Upsample(f) => {
            let y = upsample_nearest_forward(x, *f)?;
            Ok((
                y,
                LayerCache::Upsample {
                    input_shape: x.shape().to_vec(),
                },
            ))
        }
    }
}

fn layer_backward<F: Scalar>(
    layer: &mut Layer<F>,
    cache: &LayerCache<F>,
    dy: &ArrayD<F>,
    tap_grads: Option<&BTreeMap<usize, ArrayD<F>>>,
    total_bn: usize,
    bn_seen_rev: &mut usize,
) -> ArrayD<F> {
    match (layer, cache) {
        (Layer::Conv(c), LayerCache::Conv { conv, wq }) => {
            let w_used = wq.as_ref().map(|(w, _)| w).unwrap_or(&c.w);
            let (dx, mut dw, db) = conv2d_backward(w_used, conv, dy, c.stride, c.pad);
            if let Some((_, mask)) = wq {
                dw = &dw * mask;
            }
            c.dw += &dw;
            c.db += &db;
            dx
        }
        (Layer::Linear(lin), LayerCache::Linear { input, wq }) => {
            let w_used = wq.as_ref().map(|(w, _)| w).unwrap_or(&lin.w);
            let (dx, mut dw, db) = linear_backward(w_used, input, dy);
            if let Some((_, mask)) = wq {
                dw = &dw * mask;
            }
            lin.dw += &dw;
            lin.db += &db;
            dx
        }
        (Layer::Bn(bn), LayerCache::Bn(bc)) => {
            let (mut dx, dgamma, dbeta) = bn_backward(bc, &bn.gamma, dy);
            bn.dgamma += &dgamma;
            bn.dbeta += &dbeta;
            *bn_seen_rev += 1;
            if let Some(tg) = tap_grads {
                let bn_idx = total_bn - *bn_seen_rev;
                if let Some(g) = tg.get(&bn_idx) {
                    dx += g;
                }
            }
            dx
        }
        (Layer::Relu, LayerCache::Relu { input, act_mask }) => {
            let d = match act_mask {
                Some(mask) => dy * mask,
                None => dy.clone(),
            };
            relu_backward(input, &d)
        }
        (Layer::LeakyRelu(slope), LayerCache::LeakyRelu { input }) => {
            leaky_relu_backward(input, dy, *slope)
        }
        (Layer::Tanh, LayerCache::Tanh { output }) => tanh_backward(output, dy),
        (Layer::GlobalAvgPool, LayerCache::Pool { input_shape }) => {
            global_avg_pool_backward(input_shape, dy)
        }
        (Layer::Reshape(_), LayerCache::Reshape { input_shape }) => {
            dy.clone().into_shape(IxDyn(input_shape)).unwrap()
        }
        (Layer::Upsample(f), LayerCache::Upsample { input_shape }) => {
            upsample_nearest_backward(input_shape, dy, *f)
        }
        _ => unreachable!("layer/cache mismatch"),
    }
}

pub const ARCH_TINY_CNN_6: &str = "tiny-cnn-6";
pub const ARCH_TINY_RESNET_8: &str = "tiny-resnet-8";

/// Deterministically build a registered classifier architecture.
pub fn build_classifier<F: Scalar>(
    spec: &str,
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph<F>> {
    let mut init = ParamInit::new(seed);
    let conv = |cin, cout, stride, init: &mut ParamInit| {
        Block::Plain(Layer::Conv(Conv2d::new(cin, cout, 3, stride, 1, init)))
    };
    let bn = |ch| Block::Plain(Layer::Bn(BatchNorm::new(ch)));
    let relu = || Block::Plain(Layer::<F>::Relu);
    match spec {
        ARCH_TINY_CNN_6 => {
            let mut blocks = Vec::new();
            for (cin, cout, stride) in [
                (3, 8, 1),
                (8, 16, 2),
                (16, 16, 1),
                (16, 32, 2),
                (32, 32, 1),
                (32, 48, 2),
            ] {
                blocks.push(conv(cin, cout, stride, &mut init));
                blocks.push(bn(cout));
                blocks.push(relu());
            }
            blocks.push(Block::Plain(Layer::GlobalAvgPool));
            blocks.push(Block::Plain(Layer::Linear(Linear::new(
                48,
                num_classes,
                &mut init,
            ))));
            Ok(ModelGraph::new(blocks, num_classes, spec, vec![3, 32, 32]))
        }
        ARCH_TINY_RESNET_8 => {
            let mut blocks = Vec::new();
            let res_block = |ch, init: &mut ParamInit| {
                Block::Residual(vec![
                    Layer::Conv(Conv2d::new(ch, ch, 3, 1, 1, init)),
                    Layer::Bn(BatchNorm::new(ch)),
                    Layer::Relu,
                    Layer::Conv(Conv2d::new(ch, ch, 3, 1, 1, init)),
                    Layer::Bn(BatchNorm::new(ch)),
                ])
            };
            blocks.push(conv(3, 8, 1, &mut init));
            blocks.push(bn(8));
            blocks.push(relu());
            blocks.push(res_block(8, &mut init));
            blocks.push(relu());
            blocks.push(conv(8, 16, 2, &mut init));
            blocks.push(bn(16));
            blocks.push(relu());
            blocks.push(res_block(16, &mut init));
            blocks.push(relu());
            blocks.push(conv(16, 32, 2, &mut init));
            blocks.push(bn(32));
            blocks.push(relu());
            blocks.push(Block::Plain(Layer::GlobalAvgPool));
            blocks.push(Block::Plain(Layer::Linear(Linear::new(
                32,
                num_classes,
                &mut init,
            ))));
            Ok(ModelGraph::new(blocks, num_classes, spec, vec![3, 32, 32]))
        }
        other => Err(DfqError::UnknownArchitecture(other.to_string())),
    }
}
