//! Backbone/neck/head network: blocks of stride-T convolutions, upsampling
//! necks whose outputs concatenate at the input resolution, and five
//! prediction heads. Includes analytic parameter/MAC counting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::layers::{
    batchnorm2d_backward, batchnorm2d_forward, batchnorm2d_infer, conv2d_backward, conv2d_forward,
    conv_out_dim, relu_backward, relu_forward, tconv2d_backward, tconv2d_forward,
    BnCache,
};
use crate::net::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Output channel counts of the five heads, in fixed order
/// (heatmap is `num_classes` wide).
pub const HEAD_NAMES: [&str; 5] = ["heat", "offset", "z", "size", "ori"];

/// A block B(T, E, A): E stride-preserving convolutions with A output
/// channels (the first carries the block's downsampling stride T), each
/// followed by BatchNorm and ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub stride: usize,
    pub layers: usize,
    pub channels: usize,
}

/// An upsampling neck V(T, A): one transposed convolution with A output
/// channels and upsampling stride T, followed by BatchNorm and ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeckSpec {
    pub stride: usize,
    pub channels: usize,
}

/// Five heads, each two convolutions: 3x3 to `hidden` channels, ReLU,
/// then 1x1 to the head's output width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub hidden: usize,
    pub num_classes: usize,
}

impl HeadSpec {
    pub fn output_channels(&self) -> [usize; 5] {
        [self.num_classes, 2, 1, 3, 8]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub necks: Vec<NeckSpec>,
    pub heads: HeadSpec,
}

impl NetworkSpec {
    /// The default car-detection configuration: B(1,7,32) + B(2,8,64),
    /// necks V(1,64) + V(2,64), head hidden width 32.
    pub fn kitti(input_channels: usize, num_classes: usize) -> Self {
        Self {
            input_channels,
            blocks: vec![
                BlockSpec { stride: 1, layers: 7, channels: 32 },
                BlockSpec { stride: 2, layers: 8, channels: 64 },
            ],
            necks: vec![
                NeckSpec { stride: 1, channels: 64 },
                NeckSpec { stride: 2, channels: 64 },
            ],
            heads: HeadSpec { hidden: 32, num_classes },
        }
    }

    /// Channels entering the heads: the sum of neck output widths.
    pub fn head_input_channels(&self) -> usize {
        self.necks.iter().map(|n| n.channels).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        if self.blocks.is_empty() || self.blocks.len() != self.necks.len() {
            return Err(Error::Config(format!(
                "need matching non-empty blocks/necks, got {} blocks and {} necks",
                self.blocks.len(),
                self.necks.len()
            )));
        }
        for b in &self.blocks {
            if !(b.stride == 1 || b.stride == 2) || b.layers < 1 || b.channels < 1 {
                return Err(Error::Config(format!("invalid block spec {b:?}")));
            }
        }
        let mut cumulative = 1usize;
        for (b, v) in self.blocks.iter().zip(&self.necks) {
            cumulative *= b.stride;
            if !(v.stride == 1 || v.stride == 2) || v.channels < 1 {
                return Err(Error::Config(format!("invalid neck spec {v:?}")));
            }
            if v.stride != cumulative {
                return Err(Error::Config(format!(
                    "incompatible stride composition: neck stride {} cannot restore \
                     cumulative downsampling {cumulative}",
                    v.stride
                )));
            }
        }
        if self.heads.hidden < 1 || self.heads.num_classes < 1 {
            return Err(Error::Config("head hidden/num_classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text form, hashed into checkpoint digests.
    pub fn canonical_string(&self) -> String {
        let blocks: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("B({},{},{})", b.stride, b.layers, b.channels))
            .collect();
        let necks: Vec<String> = self
            .necks
            .iter()
            .map(|v| format!("V({},{})", v.stride, v.channels))
            .collect();
        format!(
            "in={};blocks={};necks={};head_hidden={};classes={}",
            self.input_channels,
            blocks.join("+"),
            necks.join("+"),
            self.heads.hidden,
            self.heads.num_classes
        )
    }
}

/// A named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    fn new(name: String, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name, value, grad }
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache_x: Option<Tensor>,
}

impl Conv2d {
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            he_normal(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel),
        );
        let bias = Param::new(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            kernel,
            stride,
            padding: kernel / 2,
            cache_x: None,
        }
    }

    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = conv2d_forward(x, &self.weight.value, &self.bias.value, self.stride, self.padding)?;
        self.cache_x = training.then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("conv backward without cache");
        let (dx, dw, db) = conv2d_backward(x, &self.weight.value, self.stride, self.padding, dy);
        self.weight.grad.add_assign(&dw);
        self.bias.grad.add_assign(&db);
        dx
    }
}

#[derive(Debug, Clone)]
pub struct TConv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    cache_x: Option<Tensor>,
}

impl TConv2d {
    /// Stride 1 keeps dims (k3, p1); stride 2 exactly doubles them
    /// (k3, p1, output padding 1).
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let kernel = 3;
        let weight = Param::new(
            format!("{name}.weight"),
            he_normal(rng, &[cin, cout, kernel, kernel], cin * kernel * kernel),
        );
        let bias = Param::new(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            kernel,
            stride,
            padding: 1,
            output_padding: stride - 1,
            cache_x: None,
        }
    }

    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = tconv2d_forward(
            x,
            &self.weight.value,
            &self.bias.value,
            self.stride,
            self.padding,
            self.output_padding,
        )?;
        self.cache_x = training.then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("tconv backward without cache");
        let (dx, dw, db) = tconv2d_backward(x, &self.weight.value, self.stride, self.padding, dy);
        self.weight.grad.add_assign(&dw);
        self.bias.grad.add_assign(&db);
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    name: String,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            name: name.to_string(),
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        if training {
            let (y, cache) = batchnorm2d_forward(x, self.gamma.value.data(), self.beta.value.data(), BN_EPS)?;
            for c in 0..self.running_mean.len() {
                self.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * cache.mean[c];
                self.running_var[c] =
                    (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * cache.var[c];
            }
            self.cache = Some(cache);
            Ok(y)
        } else {
            batchnorm2d_infer(
                x,
                self.gamma.value.data(),
                self.beta.value.data(),
                &self.running_mean,
                &self.running_var,
                BN_EPS,
            )
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("batchnorm backward without cache");
        let (dx, dgamma, dbeta) = batchnorm2d_backward(cache, self.gamma.value.data(), dy);
        for (g, d) in self.gamma.grad.data_mut().iter_mut().zip(&dgamma) {
            *g += d;
        }
        for (b, d) in self.beta.grad.data_mut().iter_mut().zip(&dbeta) {
            *b += d;
        }
        dx
    }
}

/// Conv -> BatchNorm -> ReLU.
#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu_in: Option<Tensor>,
}

impl ConvBnRelu {
    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let a = self.conv.forward(x, training)?;
        let b = self.bn.forward(&a, training)?;
        let y = relu_forward(&b);
        self.relu_in = training.then_some(b);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let b = self.relu_in.as_ref().expect("relu backward without cache");
        let db = relu_backward(b, dy);
        let da = self.bn.backward(&db);
        self.conv.backward(&da)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.conv.weight);
        f(&mut self.conv.bias);
        f(&mut self.bn.gamma);
        f(&mut self.bn.beta);
    }
}

/// TConv -> BatchNorm -> ReLU.
#[derive(Debug, Clone)]
struct TConvBnRelu {
    tconv: TConv2d,
    bn: BatchNorm2d,
    relu_in: Option<Tensor>,
}

impl TConvBnRelu {
    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let a = self.tconv.forward(x, training)?;
        let b = self.bn.forward(&a, training)?;
        let y = relu_forward(&b);
        self.relu_in = training.then_some(b);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let b = self.relu_in.as_ref().expect("relu backward without cache");
        let db = relu_backward(b, dy);
        let da = self.bn.backward(&db);
        self.tconv.backward(&da)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.tconv.weight);
        f(&mut self.tconv.bias);
        f(&mut self.bn.gamma);
        f(&mut self.bn.beta);
    }
}

/// 3x3 conv -> ReLU -> 1x1 conv.
#[derive(Debug, Clone)]
struct HeadBranch {
    conv1: Conv2d,
    conv2: Conv2d,
    relu_in: Option<Tensor>,
}

impl HeadBranch {
    fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let a = self.conv1.forward(x, training)?;
        let r = relu_forward(&a);
        let y = self.conv2.forward(&r, training)?;
        self.relu_in = training.then_some(a);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let dr = self.conv2.backward(dy);
        let a = self.relu_in.as_ref().expect("relu backward without cache");
        let da = relu_backward(a, &dr);
        self.conv1.backward(&da)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.conv1.weight);
        f(&mut self.conv1.bias);
        f(&mut self.conv2.weight);
        f(&mut self.conv2.bias);
    }
}

/// The five raw head outputs (pre-sigmoid heatmap logits; orientation is
/// 8 channels: bin-1 logits, bin-2 logits, bin-1 sin/cos, bin-2 sin/cos).
#[derive(Debug, Clone)]
pub struct HeadMaps {
    pub heat: Tensor,
    pub offset: Tensor,
    pub z: Tensor,
    pub size: Tensor,
    pub ori: Tensor,
}

impl HeadMaps {
    pub fn as_array(&self) -> [&Tensor; 5] {
        [&self.heat, &self.offset, &self.z, &self.size, &self.ori]
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    blocks: Vec<Vec<ConvBnRelu>>,
    necks: Vec<TConvBnRelu>,
    heads: Vec<HeadBranch>,
    /// Channel split of the head input, one entry per neck.
    neck_channels: Vec<usize>,
}

/// Deterministically seeded network construction.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    let mut cin = spec.input_channels;
    for (bi, b) in spec.blocks.iter().enumerate() {
        let mut layers = Vec::new();
        for li in 0..b.layers {
            let stride = if li == 0 { b.stride } else { 1 };
            let name = format!("block{bi}.{li}");
            layers.push(ConvBnRelu {
                conv: Conv2d::new(&format!("{name}.conv"), cin, b.channels, 3, stride, &mut rng),
                bn: BatchNorm2d::new(&format!("{name}.bn"), b.channels),
                relu_in: None,
            });
            cin = b.channels;
        }
        blocks.push(layers);
    }
    let mut necks = Vec::new();
    for (vi, v) in spec.necks.iter().enumerate() {
        let src_channels = spec.blocks[vi].channels;
        let name = format!("neck{vi}");
        necks.push(TConvBnRelu {
            tconv: TConv2d::new(&format!("{name}.tconv"), src_channels, v.channels, v.stride, &mut rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), v.channels),
            relu_in: None,
        });
    }
    let feat_channels = spec.head_input_channels();
    let mut heads = Vec::new();
    for (hi, out_ch) in spec.heads.output_channels().iter().enumerate() {
        let name = format!("head.{}", HEAD_NAMES[hi]);
        heads.push(HeadBranch {
            conv1: Conv2d::new(&format!("{name}.conv1"), feat_channels, spec.heads.hidden, 3, 1, &mut rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), spec.heads.hidden, *out_ch, 1, 1, &mut rng),
            relu_in: None,
        });
    }
    let neck_channels = spec.necks.iter().map(|v| v.channels).collect();
    Ok(Network {
        spec: spec.clone(),
        blocks,
        necks,
        heads,
        neck_channels,
    })
}

impl Network {
    /// Forward pass over a `[N, F, H, W]` pseudo-image batch.
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<HeadMaps> {
        if x.shape().len() != 4 || x.shape()[1] != self.spec.input_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("[N, {}, H, W]", self.spec.input_channels),
                got: format!("{:?}", x.shape()),
            });
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let mut cumulative = 1usize;
        for b in &self.spec.blocks {
            cumulative *= b.stride;
        }
        if h % cumulative != 0 || w % cumulative != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("spatial dims divisible by {cumulative}"),
                got: format!("{h}x{w}"),
            });
        }
        let mut block_outputs: Vec<Tensor> = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &mut self.blocks {
            for layer in block.iter_mut() {
                cur = layer.forward(&cur, training)?;
            }
            block_outputs.push(cur.clone());
        }
        let mut neck_outs: Vec<Tensor> = Vec::with_capacity(self.necks.len());
        for (neck, src) in self.necks.iter_mut().zip(&block_outputs) {
            let out = neck.forward(src, training)?;
            if out.shape()[2] != h || out.shape()[3] != w {
                return Err(Error::ShapeMismatch {
                    expected: format!("neck output {h}x{w}"),
                    got: format!("{}x{}", out.shape()[2], out.shape()[3]),
                });
            }
            neck_outs.push(out);
        }
        let feat = concat_channels(&neck_outs);
        let mut outs = Vec::with_capacity(5);
        for head in &mut self.heads {
            outs.push(head.forward(&feat, training)?);
        }
        let mut it = outs.into_iter();
        Ok(HeadMaps {
            heat: it.next().unwrap(),
            offset: it.next().unwrap(),
            z: it.next().unwrap(),
            size: it.next().unwrap(),
            ori: it.next().unwrap(),
        })
    }

    /// Backward pass from head-output gradients; accumulates parameter
    /// gradients and returns the gradient w.r.t. the network input.
    pub fn backward(&mut self, grads: &HeadMaps) -> Result<Tensor> {
        let mut d_feat: Option<Tensor> = None;
        for (head, g) in self.heads.iter_mut().zip(grads.as_array()) {
            let d = head.backward(g);
            match &mut d_feat {
                None => d_feat = Some(d),
                Some(acc) => acc.add_assign(&d),
            }
        }
        let d_feat = d_feat.expect("five heads");
        let pieces = split_channels(&d_feat, &self.neck_channels);
        let mut d_block_out: Vec<Tensor> = Vec::with_capacity(self.necks.len());
        for (neck, piece) in self.necks.iter_mut().zip(pieces.iter()) {
            d_block_out.push(neck.backward(piece));
        }
        let mut carry: Option<Tensor> = None;
        for bi in (0..self.blocks.len()).rev() {
            let mut g = d_block_out[bi].clone();
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            let mut cur = g;
            for layer in self.blocks[bi].iter_mut().rev() {
                cur = layer.backward(&cur);
            }
            carry = Some(cur);
        }
        Ok(carry.expect("at least one block"))
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(0.0));
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for block in &mut self.blocks {
            for layer in block.iter_mut() {
                layer.visit_params(f);
            }
        }
        for neck in &mut self.necks {
            neck.visit_params(f);
        }
        for head in &mut self.heads {
            head.visit_params(f);
        }
    }

    /// Named state arrays (parameters plus batch-norm running statistics)
    /// in a fixed order, for checkpointing.
    pub fn state_entries(&mut self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut entries = Vec::new();
        self.visit_params(&mut |p| {
            entries.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        });
        for block in &mut self.blocks {
            for layer in block.iter_mut() {
                entries.push((
                    format!("{}.running_mean", layer.bn.name),
                    vec![layer.bn.running_mean.len()],
                    layer.bn.running_mean.clone(),
                ));
                entries.push((
                    format!("{}.running_var", layer.bn.name),
                    vec![layer.bn.running_var.len()],
                    layer.bn.running_var.clone(),
                ));
            }
        }
        for neck in &mut self.necks {
            entries.push((
                format!("{}.running_mean", neck.bn.name),
                vec![neck.bn.running_mean.len()],
                neck.bn.running_mean.clone(),
            ));
            entries.push((
                format!("{}.running_var", neck.bn.name),
                vec![neck.bn.running_var.len()],
                neck.bn.running_var.clone(),
            ));
        }
        entries
    }

    /// Restore state written by `state_entries`.
    pub fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        use std::collections::HashMap;
        let map: HashMap<&str, (&Vec<usize>, &Vec<f64>)> = entries
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        let mut missing: Vec<String> = Vec::new();
        self.visit_params(&mut |p| {
            match map.get(p.name.as_str()) {
                Some((shape, data)) if shape.as_slice() == p.value.shape() => {
                    p.value.data_mut().copy_from_slice(data);
                }
                _ => missing.push(p.name.clone()),
            }
        });
        let mut load_bn = |bn: &mut BatchNorm2d| {
            for (suffix, target) in [
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                let key = format!("{}.{}", bn.name, suffix);
                match map.get(key.as_str()) {
                    Some((_, data)) if data.len() == target.len() => {
                        target.copy_from_slice(data);
                    }
                    _ => missing.push(key),
                }
            }
        };
        for block in &mut self.blocks {
            for layer in block.iter_mut() {
                load_bn(&mut layer.bn);
            }
        }
        for neck in &mut self.necks {
            load_bn(&mut neck.bn);
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing or mis-shaped state entries: {missing:?}"
            )));
        }
        Ok(())
    }

    /// Analytic parameter and MAC counts at the given input resolution.
    /// MACs are conv/tconv weight elements times output positions; biases
    /// and batch-norm work are excluded from MACs, while parameter counts
    /// include biases and batch-norm affine pairs.
    pub fn count_params_macs(&self, width: usize, height: usize) -> (u64, u64) {
        sum_layer_costs(&self.layer_costs(width, height))
    }

    /// Per-layer cost descriptors in forward order.
    pub fn layer_costs(&self, width: usize, height: usize) -> Vec<LayerCost> {
        let mut costs = Vec::new();
        let (mut h, mut w) = (height, width);
        for block in &self.blocks {
            for layer in block.iter() {
                let c = &layer.conv;
                let (cout, cin, k) =
                    (c.weight.value.shape()[0], c.weight.value.shape()[1], c.kernel);
                h = conv_out_dim(h, k, c.stride, c.padding);
                w = conv_out_dim(w, k, c.stride, c.padding);
                costs.push(LayerCost::conv_bn(cin, cout, k, h, w));
            }
        }
        let (full_h, full_w) = (height, width);
        for neck in &self.necks {
            let t = &neck.tconv;
            let (cin, cout, k) =
                (t.weight.value.shape()[0], t.weight.value.shape()[1], t.kernel);
            costs.push(LayerCost::tconv_bn(cin, cout, k, full_h, full_w));
        }
        for head in &self.heads {
            for conv in [&head.conv1, &head.conv2] {
                let (cout, cin, k) = (
                    conv.weight.value.shape()[0],
                    conv.weight.value.shape()[1],
                    conv.kernel,
                );
                costs.push(LayerCost::conv(cin, cout, k, full_h, full_w));
            }
        }
        costs
    }
}

/// Parameter and MAC cost of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerCost {
    pub params: u64,
    pub macs: u64,
}

impl LayerCost {
    /// Convolution with bias, no batch norm (head convolutions).
    pub fn conv(cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize) -> Self {
        let weights = (cin * cout * k * k) as u64;
        Self {
            params: weights + cout as u64,
            macs: weights * (out_h * out_w) as u64,
        }
    }

    /// Convolution with bias followed by affine batch norm.
    pub fn conv_bn(cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize) -> Self {
        let base = Self::conv(cin, cout, k, out_h, out_w);
        Self {
            params: base.params + 2 * cout as u64,
            macs: base.macs,
        }
    }

    /// Transposed convolution with bias followed by affine batch norm;
    /// MACs counted at output positions.
    pub fn tconv_bn(cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize) -> Self {
        Self::conv_bn(cin, cout, k, out_h, out_w)
    }
}

/// Total (params, MACs) over a layer list; an empty list counts (0, 0).
pub fn sum_layer_costs(costs: &[LayerCost]) -> (u64, u64) {
    costs.iter().fold((0, 0), |(p, m), c| (p + c.params, m + c.macs))
}

fn concat_channels(parts: &[Tensor]) -> Tensor {
    let n = parts[0].shape()[0];
    let (h, w) = (parts[0].shape()[2], parts[0].shape()[3]);
    let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Tensor::zeros(&[n, total_c, h, w]);
    let plane = h * w;
    let out_d = out.data_mut();
    for ni in 0..n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = &p.data()[ni * pc * plane..(ni + 1) * pc * plane];
            let dst_start = (ni * total_c + c_off) * plane;
            out_d[dst_start..dst_start + pc * plane].copy_from_slice(src);
            c_off += pc;
        }
    }
    out
}

fn split_channels(x: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let n = x.shape()[0];
    let total_c = x.shape()[1];
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let mut outs: Vec<Tensor> = channels.iter().map(|&c| Tensor::zeros(&[n, c, h, w])).collect();
    for ni in 0..n {
        let mut c_off = 0;
        for (oi, &c) in channels.iter().enumerate() {
            let src_start = (ni * total_c + c_off) * plane;
            let dst_start = ni * c * plane;
            outs[oi].data_mut()[dst_start..dst_start + c * plane]
                .copy_from_slice(&x.data()[src_start..src_start + c * plane]);
            c_off += c;
        }
    }
    outs
}
