//! The siamese parsing network: a shared convolutional encoder feeding a
//! segmentation head and a separately parameterised propagation head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Tape, Tensor, Var};
use crate::error::{shape_err, Result, SpnError};
use crate::scalar::Scalar;

pub const NUM_CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub encoder_blocks: usize,
    /// Total downsampling of the encoder; a power of two realised by stride-2 blocks.
    pub output_stride: usize,
    /// Width of the two 3x3 layers in each head.
    pub head_width: usize,
    pub prop_feature_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            num_classes: NUM_CLASSES,
            base_width: 16,
            encoder_blocks: 3,
            output_stride: 4,
            head_width: 32,
            prop_feature_dim: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpnError::InvalidArgument(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} (need >= 2)", self.num_classes));
        }
        if self.input_channels == 0 || self.base_width == 0 || self.head_width == 0 || self.prop_feature_dim == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.encoder_blocks == 0 {
            return bad("encoder_blocks must be >= 1".into());
        }
        if !self.output_stride.is_power_of_two() {
            return bad(format!("output_stride {} is not a power of two", self.output_stride));
        }
        if self.stride2_blocks() > self.encoder_blocks {
            return bad(format!(
                "output_stride {} needs {} stride-2 blocks but only {} exist",
                self.output_stride,
                self.stride2_blocks(),
                self.encoder_blocks
            ));
        }
        Ok(())
    }

    fn stride2_blocks(&self) -> usize {
        self.output_stride.trailing_zeros() as usize
    }

    /// Channel count of the shared feature map.
    pub fn feature_width(&self) -> usize {
        self.base_width << (self.encoder_blocks - 1)
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Encoder,
    Segmentation,
    Propagation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub branch: Branch,
    pub tensor: Tensor<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
    relu: bool,
}

/// Parameters of the whole network. Segmentation and propagation heads own
/// disjoint parameter sets; the encoder is applied to both frames of a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SpnModel<S> {
    config: ModelConfig,
    params: Vec<Param<S>>,
    encoder: Vec<ConvLayer>,
    seg_head: Vec<ConvLayer>,
    prop_head: Vec<ConvLayer>,
}

/// Model parameters recorded on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct LayerPlan {
    name: String,
    branch: Branch,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    relu: bool,
}

fn plan(cfg: &ModelConfig) -> Vec<LayerPlan> {
    let mut layers = Vec::new();
    let s2 = cfg.stride2_blocks();
    let mut in_ch = cfg.input_channels;
    for b in 0..cfg.encoder_blocks {
        let width = cfg.base_width << b;
        let stride = if b < s2 { 2 } else { 1 };
        layers.push(LayerPlan { name: format!("enc.{b}.a"), branch: Branch::Encoder, in_ch, out_ch: width, kernel: 3, stride: 1, relu: true });
        layers.push(LayerPlan { name: format!("enc.{b}.b"), branch: Branch::Encoder, in_ch: width, out_ch: width, kernel: 3, stride, relu: true });
        in_ch = width;
    }
    let f = cfg.feature_width();
    let hw = cfg.head_width;
    for (prefix, branch, out, relu_last) in [
        ("seg", Branch::Segmentation, cfg.num_classes, false),
        ("prop", Branch::Propagation, cfg.prop_feature_dim, false),
    ] {
        layers.push(LayerPlan { name: format!("{prefix}.0"), branch, in_ch: f, out_ch: hw, kernel: 3, stride: 1, relu: true });
        layers.push(LayerPlan { name: format!("{prefix}.1"), branch, in_ch: hw, out_ch: hw, kernel: 3, stride: 1, relu: true });
        layers.push(LayerPlan { name: format!("{prefix}.2"), branch, in_ch: hw, out_ch: out, kernel: 1, stride: 1, relu: relu_last });
    }
    layers
}

impl<S: Scalar> SpnModel<S> {
    /// Seeded He-uniform weights, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::build(config, |shape, is_bias| {
            if is_bias {
                return Tensor::zeros(shape);
            }
            let fan_in: usize = shape[1..].iter().product();
            let a = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-a..=a)))
        })
    }

    /// All weights and biases zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::build(config, |shape, _| Tensor::zeros(shape))
    }

    fn build(config: ModelConfig, mut init: impl FnMut(&[usize], bool) -> Tensor<S>) -> Result<Self> {
        let mut params = Vec::new();
        let (mut encoder, mut seg_head, mut prop_head) = (Vec::new(), Vec::new(), Vec::new());
        for l in plan(&config) {
            let weight = params.len();
            params.push(Param {
                name: format!("{}.weight", l.name),
                branch: l.branch,
                tensor: init(&[l.out_ch, l.in_ch, l.kernel, l.kernel], false),
            });
            params.push(Param { name: format!("{}.bias", l.name), branch: l.branch, tensor: init(&[l.out_ch], true) });
            let layer = ConvLayer { weight, bias: weight + 1, stride: l.stride, padding: l.kernel / 2, relu: l.relu };
            match l.branch {
                Branch::Encoder => encoder.push(layer),
                Branch::Segmentation => seg_head.push(layer),
                Branch::Propagation => prop_head.push(layer),
            }
        }
        Ok(SpnModel { config, params, encoder, seg_head, prop_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replaces parameter tensors by name-ordered position, checking shapes.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor<S>>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(shape_err!("expected {} tensors, got {}", self.params.len(), tensors.len()));
        }
        for (p, t) in self.params.iter().zip(&tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(shape_err!("{}: shape {:?}, got {:?}", p.name, p.tensor.shape(), t.shape()));
            }
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            p.tensor = t;
        }
        Ok(())
    }

    /// Records every parameter on `tape`; only branches for which `trainable`
    /// returns true are marked as requiring gradients.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: impl Fn(Branch) -> bool) -> BoundParams {
        let vars = self.params.iter().map(|p| tape.leaf(p.tensor.clone(), trainable(p.branch))).collect();
        BoundParams { vars }
    }

    /// Records all parameters as constants (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> BoundParams {
        self.bind(tape, |_| false)
    }

    fn run(&self, tape: &mut Tape<S>, bound: &BoundParams, layers: &[ConvLayer], mut x: Var) -> Result<Var> {
        for l in layers {
            x = tape.conv2d(x, bound.vars[l.weight], bound.vars[l.bias], l.stride, l.padding)?;
            if l.relu {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Shared encoder: `1 x 3 x H x W` frame to `1 x F x H/s x W/s` features.
    pub fn encode(&self, tape: &mut Tape<S>, bound: &BoundParams, frame: Var) -> Result<Var> {
        let shape = tape.value(frame).shape().to_vec();
        let frame = match shape[..] {
            [c, h, w] => tape.reshape(frame, &[1, c, h, w])?,
            [1, _, _, _] => frame,
            _ => return Err(shape_err!("frame must be 3xHxW or 1x3xHxW, got {:?}", shape)),
        };
        let [_, c, h, w] = tape.value(frame).nchw()?;
        if c != self.config.input_channels {
            return Err(shape_err!("frame has {c} channels, model expects {}", self.config.input_channels));
        }
        let s = self.config.output_stride;
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(shape_err!("frame {h}x{w} not divisible by output stride {s}"));
        }
        self.run(tape, bound, &self.encoder, frame)
    }

    /// Segmentation head: per-class logits at feature resolution.
    pub fn seg_logits(&self, tape: &mut Tape<S>, bound: &BoundParams, features: Var) -> Result<Var> {
        self.run(tape, bound, &self.seg_head, features)
    }

    /// Segmentation head: full-resolution `1 x C x H x W` class probabilities.
    pub fn seg_forward(&self, tape: &mut Tape<S>, bound: &BoundParams, features: Var) -> Result<Var> {
        let logits = self.seg_logits(tape, bound, features)?;
        let probs = tape.softmax_channel(logits)?;
        let up = tape.upsample_bilinear(probs, self.config.output_stride)?;
        tape.normalize_channel(up)
    }

    /// Propagation head: `1 x D x H/s x W/s` matching features.
    pub fn prop_features(&self, tape: &mut Tape<S>, bound: &BoundParams, features: Var) -> Result<Var> {
        self.run(tape, bound, &self.prop_head, features)
    }

    /// Frozen-model convenience: segmentation probabilities for one frame.
    pub fn segment(&self, frame: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(frame.clone());
        let f = self.encode(&mut tape, &bound, x)?;
        let o = self.seg_forward(&mut tape, &bound, f)?;
        Ok(tape.value(o).clone())
    }

    /// Frozen-model convenience: shared features and propagation features.
    pub fn features(&self, frame: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(frame.clone());
        let f = self.encode(&mut tape, &bound, x)?;
        let p = self.prop_features(&mut tape, &bound, f)?;
        Ok((tape.value(f).clone(), tape.value(p).clone()))
    }
}
