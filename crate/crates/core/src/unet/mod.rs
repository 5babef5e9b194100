//! Encoder/decoder segmentation network with channel-concatenating skips.
//!
//! Every resolution level holds two 3×3 same-padded convolutions with ReLU. The
//! encoder halves resolution with 2×2 max pooling and doubles channels; the decoder
//! up-samples with a 2×2 stride-2 transposed convolution, concatenates the matching
//! encoder output and applies its own double convolution. A 1×1 convolution and a
//! sigmoid produce per-pixel probabilities.

mod checkpoint;

pub use checkpoint::{load, load_bytes, save, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::keyed_rng;
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, kink_signature, maxpool2x2,
    maxpool2x2_backward, relu, relu_backward, sigmoid, sigmoid_backward, split_channels, AdamConfig, Parameter,
    PoolIndices, Real, Shape, Tensor, TensorError,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid U-Net config: {0}")]
    InvalidConfig(String),
    #[error("input {h}x{w} is not divisible by {divisor} (2^(levels-1))")]
    Indivisible { h: usize, w: usize, divisor: usize },
    #[error("expected {expected} input channels, got {found}")]
    InputChannels { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint config {found:?} does not match expected {expected:?}")]
    ConfigMismatch { expected: UNetConfig, found: UNetConfig },
    #[error("checkpoint parameter {name}: {detail}")]
    ParameterMismatch { name: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { levels: 5, base_channels: 64, in_channels: 1, out_channels: 1 }
    }
}

impl UNetConfig {
    pub fn new(levels: usize, base_channels: usize) -> Self {
        Self { levels, base_channels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.levels < 2 {
            return Err(ModelError::InvalidConfig(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(ModelError::InvalidConfig("channel counts must be >= 1".into()));
        }
        if self.levels > 16 {
            return Err(ModelError::InvalidConfig(format!("levels {} is unreasonably deep", self.levels)));
        }
        Ok(())
    }

    /// Feature maps at resolution level `i`: `base · 2^i`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of H and W.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    weight: usize,
}

impl ConvIdx {
    fn bias(&self) -> usize {
        self.weight + 1
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv1: ConvIdx,
    conv2: ConvIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<Block>,
    /// Indexed by the decoder's resolution level, `0..levels-1`.
    up: Vec<ConvIdx>,
    dec: Vec<Block>,
    head: ConvIdx,
}

/// Parameter specs in storage order: (name, shape, fan_in).
fn parameter_specs(cfg: &UNetConfig) -> (Vec<(String, Shape, usize)>, Layout) {
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<(String, Shape, usize)>, name: String, cout: usize, cin: usize, k: usize| {
        let idx = ConvIdx { weight: specs.len() };
        specs.push((format!("{name}.weight"), Shape::new(cout, cin, k, k), cin * k * k));
        specs.push((format!("{name}.bias"), Shape::new(1, cout, 1, 1), cin * k * k));
        idx
    };
    let mut enc = Vec::new();
    for i in 0..cfg.levels {
        let cin = if i == 0 { cfg.in_channels } else { cfg.channels(i - 1) };
        let c = cfg.channels(i);
        let conv1 = conv(&mut specs, format!("enc{i}.conv1"), c, cin, 3);
        let conv2 = conv(&mut specs, format!("enc{i}.conv2"), c, c, 3);
        enc.push(Block { conv1, conv2 });
    }
    let mut up = vec![ConvIdx { weight: 0 }; cfg.levels - 1];
    let mut dec = vec![Block { conv1: ConvIdx { weight: 0 }, conv2: ConvIdx { weight: 0 } }; cfg.levels - 1];
    for i in (0..cfg.levels - 1).rev() {
        let (c, below) = (cfg.channels(i), cfg.channels(i + 1));
        let w = specs.len();
        // Transposed-conv weight is (Cin, Cout, 2, 2); every output sums Cin inputs.
        specs.push((format!("dec{i}.up.weight"), Shape::new(below, c, 2, 2), below));
        specs.push((format!("dec{i}.up.bias"), Shape::new(1, c, 1, 1), below));
        up[i] = ConvIdx { weight: w };
        let conv1 = conv(&mut specs, format!("dec{i}.conv1"), c, 2 * c, 3);
        let conv2 = conv(&mut specs, format!("dec{i}.conv2"), c, c, 3);
        dec[i] = Block { conv1, conv2 };
    }
    let head = conv(&mut specs, "head".into(), cfg.out_channels, cfg.channels(0), 1);
    (specs, Layout { enc, up, dec, head })
}

/// The network: config plus named parameters in a stable order.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: UNetConfig,
    parameters: Vec<Parameter<T>>,
    layout: Layout,
}

impl<T: Real> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.parameters.len() == other.parameters.len()
            && self.parameters.iter().zip(&other.parameters).all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Real> {
    input: Tensor<T>,
    /// Per encoder level: block input, conv1 output, conv2 output (post-ReLU).
    enc: Vec<[Tensor<T>; 3]>,
    pools: Vec<PoolIndices>,
    /// Per decoder level: up-conv input, concatenation, conv1 output, conv2 output.
    dec: Vec<Option<[Tensor<T>; 4]>>,
    pub probs: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Fingerprint of every ReLU pattern and pooling choice taken.
    pub fn kink_signature(&self) -> u64 {
        let mut relus: Vec<&Tensor<T>> = Vec::new();
        for e in &self.enc {
            relus.push(&e[1]);
            relus.push(&e[2]);
        }
        for d in self.dec.iter().flatten() {
            relus.push(&d[2]);
            relus.push(&d[3]);
        }
        let pools: Vec<&PoolIndices> = self.pools.iter().collect();
        kink_signature(&relus, &pools)
    }
}

impl<T: Real> Model<T> {
    /// Seeded fan-in scaled uniform initialisation (`U(±√(6/fan_in))`), zero biases.
    pub fn build(cfg: UNetConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (specs, layout) = parameter_specs(&cfg);
        let parameters = specs
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape, fan_in))| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut rng = keyed_rng(&[seed, i as u64]);
                    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
                };
                Parameter::new(name, value)
            })
            .collect();
        Ok(Self { config: cfg, parameters, layout })
    }

    /// All-zero parameters with the layout of `cfg`.
    pub fn zeros(cfg: UNetConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (specs, layout) = parameter_specs(&cfg);
        let parameters = specs.into_iter().map(|(name, shape, _)| Parameter::new(name, Tensor::zeros(shape))).collect();
        Ok(Self { config: cfg, parameters, layout })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.parameters
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// Total scalar count over all parameters.
    pub fn parameter_count(&self) -> usize {
        self.parameters.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.parameters.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn reset_optimizer(&mut self) {
        self.parameters.iter_mut().for_each(Parameter::reset_optimizer);
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), TensorError> {
        self.parameters.iter_mut().try_for_each(|p| p.adam_step(cfg))
    }

    /// Converts parameter values to another element type (optimizer state is dropped).
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            parameters: self.parameters.iter().map(|p| Parameter::new(p.name.clone(), p.value.cast())).collect(),
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        let s = x.shape();
        if s.c != self.config.in_channels {
            return Err(ModelError::InputChannels { expected: self.config.in_channels, found: s.c });
        }
        let d = self.config.divisor();
        if s.h % d != 0 || s.w % d != 0 || s.h == 0 || s.w == 0 {
            return Err(ModelError::Indivisible { h: s.h, w: s.w, divisor: d });
        }
        Ok(())
    }

    fn conv(&self, x: &Tensor<T>, c: ConvIdx) -> Result<Tensor<T>, TensorError> {
        conv2d(x, &self.parameters[c.weight].value, &self.parameters[c.bias()].value)
    }

    fn block(&self, x: &Tensor<T>, b: Block) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
        let a1 = relu(&self.conv(x, b.conv1)?);
        let a2 = relu(&self.conv(&a1, b.conv2)?);
        Ok((a1, a2))
    }

    fn up(&self, x: &Tensor<T>, c: ConvIdx) -> Result<Tensor<T>, TensorError> {
        conv_transpose2d(x, &self.parameters[c.weight].value, &self.parameters[c.bias()].value)
    }

    /// Probabilities `(N, out_channels, H, W)`, strictly inside (0, 1) up to rounding.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(x)?;
        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels - 1);
        let mut h = x.clone();
        for i in 0..levels {
            let (_, a2) = self.block(&h, self.layout.enc[i])?;
            if i + 1 < levels {
                h = maxpool2x2(&a2)?.0;
                skips.push(a2);
            } else {
                h = a2;
            }
        }
        for i in (0..levels - 1).rev() {
            let up = self.up(&h, self.layout.up[i])?;
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = concat_channels(&skip, &up)?;
            h = self.block(&cat, self.layout.dec[i])?.1;
        }
        Ok(sigmoid(&self.conv(&h, self.layout.head)?))
    }

    /// Forward pass that keeps every activation needed by [`Model::backward`].
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<ForwardCache<T>, ModelError> {
        self.check_input(x)?;
        let levels = self.config.levels;
        let mut enc = Vec::with_capacity(levels);
        let mut pools = Vec::with_capacity(levels - 1);
        let mut h = x.clone();
        for i in 0..levels {
            let (a1, a2) = self.block(&h, self.layout.enc[i])?;
            let next = if i + 1 < levels {
                let (p, idx) = maxpool2x2(&a2)?;
                pools.push(idx);
                Some(p)
            } else {
                None
            };
            enc.push([h, a1, a2]);
            if let Some(p) = next {
                h = p;
            } else {
                h = enc[i][2].clone();
            }
        }
        let mut dec: Vec<Option<[Tensor<T>; 4]>> = vec![None; levels - 1];
        for i in (0..levels - 1).rev() {
            let up = self.up(&h, self.layout.up[i])?;
            let skip = &enc[i][2];
            debug_assert_eq!((skip.shape().h, skip.shape().w), (up.shape().h, up.shape().w));
            let cat = concat_channels(skip, &up)?;
            let (a1, a2) = self.block(&cat, self.layout.dec[i])?;
            dec[i] = Some([h, cat, a1, a2.clone()]);
            h = a2;
        }
        let probs = sigmoid(&self.conv(&h, self.layout.head)?);
        Ok(ForwardCache { input: x.clone(), enc, pools, dec, probs })
    }

    fn conv_back(&mut self, x: &Tensor<T>, c: ConvIdx, g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let grads = conv2d_backward(x, &self.parameters[c.weight].value, g)?;
        self.parameters[c.weight].grad.add_assign(&grads.weight)?;
        self.parameters[c.bias()].grad.add_assign(&grads.bias)?;
        Ok(grads.input)
    }

    /// Gradient through a double-conv block given d(loss)/d(a2).
    fn block_back(&mut self, x: &Tensor<T>, a1: &Tensor<T>, a2: &Tensor<T>, b: Block, g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let g = relu_backward(a2, g)?;
        let g = self.conv_back(a1, b.conv2, &g)?;
        let g = relu_backward(a1, &g)?;
        self.conv_back(x, b.conv1, &g)
    }

    /// Accumulates parameter gradients for upstream `grad_probs = dL/dprobs` and
    /// returns dL/dinput.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let levels = self.config.levels;
        let layout = self.layout.clone();
        let g = sigmoid_backward(&cache.probs, grad_probs)?;
        let head_in = &cache.dec[0].as_ref().expect("decoder level 0")[3];
        let mut g = self.conv_back(head_in, layout.head, &g)?;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; levels - 1];
        for i in 0..levels - 1 {
            let [up_in, cat, a1, a2] = cache.dec[i].as_ref().expect("decoder cache");
            let g_cat = self.block_back(cat, a1, a2, layout.dec[i], &g)?;
            let (g_skip, g_up) = split_channels(&g_cat, self.config.channels(i))?;
            skip_grads[i] = Some(g_skip);
            let up = layout.up[i];
            let grads = conv_transpose2d_backward(up_in, &self.parameters[up.weight].value, &g_up)?;
            self.parameters[up.weight].grad.add_assign(&grads.weight)?;
            self.parameters[up.bias()].grad.add_assign(&grads.bias)?;
            g = grads.input;
        }
        // `g` is now d(loss)/d(bottleneck output).
        for i in (0..levels).rev() {
            if i + 1 < levels {
                let mut from_pool = maxpool2x2_backward(&g, &cache.pools[i])?;
                from_pool.add_assign(skip_grads[i].as_ref().expect("skip gradient"))?;
                g = from_pool;
            }
            let [x, a1, a2] = &cache.enc[i];
            g = self.block_back(x, a1, a2, layout.enc[i], &g)?;
        }
        debug_assert_eq!(g.shape(), cache.input.shape());
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_doubling_and_bottleneck() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.channels(4), 1024);
        let m = Model::<f32>::build(UNetConfig::new(5, 2), 0).unwrap();
        for i in 0..4 {
            let a = m.parameter(&format!("enc{i}.conv2.weight")).unwrap().shape().n;
            let b = m.parameter(&format!("enc{}.conv2.weight", i + 1)).unwrap().shape().n;
            assert_eq!(b, 2 * a);
        }
    }

    #[test]
    fn small_config_parameter_count() {
        // enc0 40+148, enc1 296+584, dec0.up 132, dec0 292+148, head 5
        let m = Model::<f32>::build(UNetConfig::new(2, 4), 1).unwrap();
        assert_eq!(m.parameter_count(), 1645);
        assert_eq!(m.parameters().len(), 16);
        assert_eq!(m.parameters()[0].name, "enc0.conv1.weight");
        assert_eq!(m.parameters().last().unwrap().name, "head.bias");
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let cfg = UNetConfig::new(3, 4);
        assert_eq!(Model::<f32>::build(cfg, 9).unwrap(), Model::<f32>::build(cfg, 9).unwrap());
        assert_ne!(Model::<f32>::build(cfg, 9).unwrap(), Model::<f32>::build(cfg, 10).unwrap());
    }

    #[test]
    fn rejects_indivisible_input() {
        let m = Model::<f32>::build(UNetConfig::new(3, 2), 0).unwrap();
        let err = m.forward(&Tensor::zeros(Shape::new(1, 1, 12, 10))).unwrap_err();
        assert!(matches!(err, ModelError::Indivisible { divisor: 4, .. }));
        assert!(UNetConfig::new(1, 4).validate().is_err());
    }

    #[test]
    fn train_forward_matches_plain_forward() {
        let m = Model::<f64>::build(UNetConfig::new(3, 2), 4).unwrap();
        let x = Tensor::from_fn(Shape::new(2, 1, 8, 8), |i| ((i * 37) % 11) as f64 / 11.0);
        let a = m.forward(&x).unwrap();
        let b = m.forward_train(&x).unwrap().probs;
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
