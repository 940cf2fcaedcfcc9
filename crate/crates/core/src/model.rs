//! The three networks: feature extractor F, meta learner M and depth
//! estimator D. Networks hold architecture only; parameters live in
//! [`ParamSet`]s so M can be evaluated at any supplied parameter point.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("architecture: {0}")]
    Architecture(String),
    #[error("parameter set mismatch: {0}")]
    Params(String),
    #[error("expected {expected} input channels, got {got}")]
    Channels { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Ordered, uniquely named tensors for one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(ModelError::Params(format!("duplicate name {name}")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(ModelError::Params(format!(
                "{} tensors vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(ModelError::Params(format!(
                    "{na}{:?} vs {nb}{:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// New set with `out[k] = self[k] + scale * delta[k]`.
    pub fn axpy(&self, delta: &ParamSet, scale: f64) -> Result<ParamSet> {
        self.check_compatible(delta)?;
        let entries = self
            .entries
            .iter()
            .zip(&delta.entries)
            .map(|((n, t), (_, d))| {
                let data = t.data().iter().zip(d.data()).map(|(a, b)| a + scale * b).collect();
                (n.clone(), Tensor::new(t.shape(), data).expect("same shape"))
            })
            .collect();
        Ok(ParamSet { entries })
    }

    /// In-place `self += scale * delta`.
    pub fn scaled(&self, k: f64) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    let data = t.data().iter().map(|v| v * k).collect();
                    (n.clone(), Tensor::new(t.shape(), data).expect("shape"))
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, delta: &ParamSet, scale: f64) -> Result<()> {
        self.check_compatible(delta)?;
        for ((_, t), (_, d)) in self.entries.iter_mut().zip(&delta.entries) {
            for (a, b) in t.data_mut().iter_mut().zip(d.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Same structure as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return Err(ModelError::Params(format!(
                "flat length {} vs {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let data = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                (n.clone(), Tensor::new(t.shape(), data).expect("same shape"))
            })
            .collect();
        Ok(ParamSet { entries })
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).expect("self-compatible").sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in &self.entries {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Result<Bound<'t>> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars,
        })
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::Params(format!("missing parameter {name}")))
    }

    /// Collects gradients back into a [`ParamSet`]; unreachable leaves get zeros.
    pub fn grads(&self, g: &Gradients) -> ParamSet {
        ParamSet {
            entries: self
                .names
                .iter()
                .zip(&self.vars)
                .map(|(n, v)| (n.clone(), g.get_or_zeros(*v)))
                .collect(),
        }
    }
}

/// Shape hyperparameters for all three networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub image_size: usize,
    pub conv_layers: usize,
    pub base_width: usize,
    pub taps: Vec<usize>,
    pub head_hidden: usize,
    pub depth_size: usize,
    pub depth_width: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 6,
            image_size: 32,
            conv_layers: 9,
            base_width: 16,
            taps: vec![5, 9],
            head_hidden: 32,
            depth_size: 16,
            depth_width: 16,
        }
    }
}

const LAYERS_PER_STAGE: usize = 3;

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Architecture(m));
        if self.conv_layers < 9 || self.conv_layers > 12 {
            return bad(format!("conv_layers must be in 9..=12, got {}", self.conv_layers));
        }
        if self.taps.is_empty() || self.taps.iter().any(|&t| t == 0 || t > self.conv_layers) {
            return bad(format!("tap layers {:?} outside 1..={}", self.taps, self.conv_layers));
        }
        let pools = self.conv_layers / LAYERS_PER_STAGE;
        let f = self.feature_size();
        if self.image_size % (1 << pools) != 0 || f == 0 {
            return bad(format!(
                "image size {} not divisible by 2^{pools}",
                self.image_size
            ));
        }
        if self.depth_size < f || self.depth_size % f != 0 || !(self.depth_size / f).is_power_of_two() {
            return bad(format!(
                "depth size {} must be feature size {f} times a power of two",
                self.depth_size
            ));
        }
        if self.base_width == 0 || self.head_hidden == 0 || self.depth_width == 0 {
            return bad("widths must be positive".into());
        }
        Ok(())
    }

    pub fn layer_width(&self, layer: usize) -> usize {
        let stage = (layer - 1) / LAYERS_PER_STAGE;
        self.base_width << stage.min(2)
    }

    /// Spatial side of F's output.
    pub fn feature_size(&self) -> usize {
        self.image_size >> (self.conv_layers / LAYERS_PER_STAGE)
    }

    pub fn feature_channels(&self) -> usize {
        self.layer_width(self.conv_layers)
    }

    /// Style-vector length: 2 statistics per channel of every F tap plus D's last layer.
    pub fn style_dim(&self) -> usize {
        2 * (self.taps.iter().map(|&t| self.layer_width(t)).sum::<usize>() + 1)
    }

    /// Short hex digest identifying the architecture.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

fn conv_params(set: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize) -> Result<()> {
    set.push(format!("{name}.weight"), he_uniform(rng, &[c_out, c_in, 3, 3], c_in * 9))?;
    set.push(format!("{name}.bias"), Tensor::zeros(&[c_out]))
}

fn conv3x3<'t>(tape: &'t Tape, p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    Ok(tape.conv2d(x, w, b, 1, 1)?)
}

/// Output of F: the feature map plus the tapped conv activations (post-ReLU).
pub struct FeatureOutput<'t> {
    pub features: Var<'t>,
    pub taps: BTreeMap<usize, Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    arch: Architecture,
}

impl FeatureExtractor {
    pub fn new(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch: arch.clone() })
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let mut c_in = self.arch.in_channels;
        for l in 1..=self.arch.conv_layers {
            let c_out = self.arch.layer_width(l);
            conv_params(&mut set, &mut rng, &format!("conv{l}"), c_out, c_in)?;
            c_in = c_out;
        }
        Ok(set)
    }

    /// `x: [B, 6, H, W]` through conv->relu blocks with a 2x2 max-pool after every third layer.
    pub fn forward<'t>(&self, tape: &'t Tape, params: &Bound<'t>, x: Var<'t>) -> Result<FeatureOutput<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.arch.in_channels {
            return Err(ModelError::Channels {
                expected: self.arch.in_channels,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let mut h = x;
        let mut taps = BTreeMap::new();
        for l in 1..=self.arch.conv_layers {
            h = conv3x3(tape, params, &format!("conv{l}"), h)?;
            h = tape.relu(h)?;
            if self.arch.taps.contains(&l) {
                taps.insert(l, h);
            }
            if l % LAYERS_PER_STAGE == 0 {
                h = tape.max_pool2d(h)?;
            }
        }
        Ok(FeatureOutput { features: h, taps })
    }
}

/// Fully-connected binary head on flattened features.
#[derive(Clone, Debug)]
pub struct MetaLearner {
    arch: Architecture,
}

impl MetaLearner {
    pub fn new(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch: arch.clone() })
    }

    fn in_dim(&self) -> usize {
        let f = self.arch.feature_size();
        self.arch.feature_channels() * f * f
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inp, hid) = (self.in_dim(), self.arch.head_hidden);
        let mut set = ParamSet::new();
        set.push("fc1.weight", he_uniform(&mut rng, &[hid, inp], inp))?;
        set.push("fc1.bias", Tensor::zeros(&[hid]))?;
        set.push("fc2.weight", he_uniform(&mut rng, &[1, hid], hid))?;
        set.push("fc2.bias", Tensor::zeros(&[1]))?;
        Ok(set)
    }

    /// Pre-sigmoid scores, shape `[B]`.
    pub fn logits<'t>(&self, tape: &'t Tape, params: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let flat = tape.flatten(features)?;
        if flat.shape()[1] != self.in_dim() {
            return Err(ModelError::Params(format!(
                "meta learner expects {} features, got {}",
                self.in_dim(),
                flat.shape()[1]
            )));
        }
        let h = tape.linear(flat, params.var("fc1.weight")?, params.var("fc1.bias")?)?;
        let h = tape.relu(h)?;
        let z = tape.linear(h, params.var("fc2.weight")?, params.var("fc2.bias")?)?;
        let b = z.shape()[0];
        Ok(tape.reshape(z, &[b])?)
    }

    /// Probabilities `M(F(x))` in (0, 1), evaluated at the supplied parameters.
    pub fn classify<'t>(&self, tape: &'t Tape, params: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let z = self.logits(tape, params, features)?;
        Ok(tape.sigmoid(z)?)
    }
}

/// Convolutional decoder from F's features to a `d x d` depth map.
#[derive(Clone, Debug)]
pub struct DepthEstimator {
    arch: Architecture,
}

impl DepthEstimator {
    pub fn new(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch: arch.clone() })
    }

    fn upsamples(&self) -> usize {
        (self.arch.depth_size / self.arch.feature_size()).trailing_zeros() as usize
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dw = self.arch.depth_width;
        let mut set = ParamSet::new();
        conv_params(&mut set, &mut rng, "dconv0", dw, self.arch.feature_channels())?;
        for u in 1..=self.upsamples() {
            conv_params(&mut set, &mut rng, &format!("dconv{u}"), dw, dw)?;
        }
        conv_params(&mut set, &mut rng, "dout", 1, dw)?;
        Ok(set)
    }

    /// Depth map `[B, 1, d, d]`; the final conv output doubles as D's style tap.
    pub fn estimate_depth<'t>(&self, tape: &'t Tape, params: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let mut h = conv3x3(tape, params, "dconv0", features)?;
        h = tape.relu(h)?;
        for u in 1..=self.upsamples() {
            h = tape.upsample2x(h)?;
            h = conv3x3(tape, params, &format!("dconv{u}"), h)?;
            h = tape.relu(h)?;
        }
        let out = conv3x3(tape, params, "dout", h)?;
        let shape = out.shape();
        if shape[2] != self.arch.depth_size || shape[3] != self.arch.depth_size {
            return Err(ModelError::Architecture(format!(
                "depth output {shape:?} does not match target size {}",
                self.arch.depth_size
            )));
        }
        Ok(out)
    }
}

/// F, M and D built from one architecture.
#[derive(Clone, Debug)]
pub struct Networks {
    pub arch: Architecture,
    pub f: FeatureExtractor,
    pub m: MetaLearner,
    pub d: DepthEstimator,
}

/// θ_F, θ_M, θ_D.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub f: ParamSet,
    pub m: ParamSet,
    pub d: ParamSet,
}

impl ModelParams {
    pub fn checksum(&self) -> String {
        format!("{}:{}:{}", self.f.checksum(), self.m.checksum(), self.d.checksum())
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            f: self.f.zeros_like(),
            m: self.m.zeros_like(),
            d: self.d.zeros_like(),
        }
    }
}

impl Networks {
    pub fn new(arch: &Architecture) -> Result<Self> {
        Ok(Self {
            arch: arch.clone(),
            f: FeatureExtractor::new(arch)?,
            m: MetaLearner::new(arch)?,
            d: DepthEstimator::new(arch)?,
        })
    }

    /// He-uniform weights and zero biases; each network gets its own stream.
    pub fn init(&self, seed: u64) -> Result<ModelParams> {
        Ok(ModelParams {
            f: self.f.init(seed.wrapping_mul(3).wrapping_add(1))?,
            m: self.m.init(seed.wrapping_mul(3).wrapping_add(2))?,
            d: self.d.init(seed.wrapping_mul(3).wrapping_add(3))?,
        })
    }

    /// Probabilities for a batch of images with no gradient tracking.
    pub fn score_batch(&self, params: &ModelParams, images: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bf = params.f.bind(&tape, false)?;
        let bm = params.m.bind(&tape, false)?;
        let x = tape.constant(images.clone())?;
        let out = self.f.forward(&tape, &bf, x)?;
        let p = self.m.classify(&tape, &bm, out.features)?;
        let probs = p.value().data().to_vec();
        Ok(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Architecture {
        Architecture {
            image_size: 16,
            base_width: 2,
            head_hidden: 3,
            depth_size: 4,
            depth_width: 2,
            ..Architecture::default()
        }
    }

    #[test]
    fn default_architecture_shapes() {
        let arch = Architecture::default();
        arch.validate().unwrap();
        assert_eq!(arch.feature_size(), 4);
        assert_eq!(arch.feature_channels(), 64);
        assert_eq!(arch.layer_width(5), 32);
        assert_eq!(arch.layer_width(9), 64);
        assert_eq!(arch.style_dim(), 2 * (32 + 64 + 1));
    }

    #[test]
    fn architecture_rejects_bad_taps_and_depth() {
        let mut a = Architecture::default();
        a.taps = vec![5, 10];
        assert!(a.validate().is_err());
        let mut a = Architecture::default();
        a.depth_size = 12;
        assert!(a.validate().is_err());
        let mut a = Architecture::default();
        a.conv_layers = 8;
        assert!(a.validate().is_err());
    }

    #[test]
    fn zero_params_give_zero_taps_and_half_probability() {
        let arch = tiny_arch();
        let nets = Networks::new(&arch).unwrap();
        let params = nets.init(1).unwrap().zeros_like();
        let tape = Tape::new();
        let bf = params.f.bind(&tape, false).unwrap();
        let bm = params.m.bind(&tape, false).unwrap();
        let bd = params.d.bind(&tape, false).unwrap();
        let x = tape.constant(Tensor::zeros(&[7, 6, 16, 16])).unwrap();
        let out = nets.f.forward(&tape, &bf, x).unwrap();
        assert_eq!(out.taps.keys().copied().collect::<Vec<_>>(), vec![5, 9]);
        for v in out.taps.values() {
            assert_eq!(v.shape()[0], 7);
            assert!(v.value().data().iter().all(|&a| a == 0.0));
        }
        let p = nets.m.classify(&tape, &bm, out.features).unwrap();
        assert!(p.value().data().iter().all(|&v| v == 0.5));
        let depth = nets.d.estimate_depth(&tape, &bd, out.features).unwrap();
        assert_eq!(depth.shape(), vec![7, 1, 4, 4]);
        assert!(depth.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_depth_shape_for_batch_of_seven() {
        let nets = Networks::new(&Architecture::default()).unwrap();
        let params = nets.init(5).unwrap();
        let tape = Tape::new();
        let bf = params.f.bind(&tape, false).unwrap();
        let bd = params.d.bind(&tape, false).unwrap();
        let x = tape.constant(Tensor::full(&[7, 6, 32, 32], 0.3)).unwrap();
        let out = nets.f.forward(&tape, &bf, x).unwrap();
        let depth = nets.d.estimate_depth(&tape, &bd, out.features).unwrap();
        assert_eq!(depth.shape(), vec![7, 1, 16, 16]);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let nets = Networks::new(&tiny_arch()).unwrap();
        let params = nets.init(1).unwrap();
        let tape = Tape::new();
        let bf = params.f.bind(&tape, false).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        assert!(matches!(
            nets.f.forward(&tape, &bf, x),
            Err(ModelError::Channels { expected: 6, got: 3 })
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let nets = Networks::new(&tiny_arch()).unwrap();
        let params = nets.init(9).unwrap();
        let img = Tensor::new(&[2, 6, 16, 16], (0..2 * 6 * 256).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let run = || {
            let tape = Tape::new();
            let bf = params.f.bind(&tape, false).unwrap();
            let x = tape.constant(img.clone()).unwrap();
            let out = nets.f.forward(&tape, &bf, x).unwrap();
            out.taps.values().map(|v| v.value().data().to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn axpy_identity_arithmetic_and_isolation() {
        let mut base = ParamSet::new();
        base.push("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let mut g = ParamSet::new();
        g.push("w", Tensor::from_vec(vec![10.0, 10.0])).unwrap();
        assert_eq!(base.axpy(&g, 0.0).unwrap(), base);
        let mut out = base.axpy(&g, -0.1).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[0.0, 1.0]);
        out.tensors_mut().for_each(|t| t.data_mut()[0] = 99.0);
        assert_eq!(base.get("w").unwrap().data(), &[1.0, 2.0]);

        let mut other = ParamSet::new();
        other.push("v", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(base.axpy(&other, 1.0).is_err());
        assert!(base.push("w", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn classify_uses_supplied_params() {
        let arch = tiny_arch();
        let nets = Networks::new(&arch).unwrap();
        let params = nets.init(2).unwrap();
        let feats = Tensor::full(&[3, arch.feature_channels(), 2, 2], 0.5);
        let eval = |m: &ParamSet| {
            let tape = Tape::new();
            let bm = m.bind(&tape, false).unwrap();
            let x = tape.constant(feats.clone()).unwrap();
            nets.m.classify(&tape, &bm, x).unwrap().value().data().to_vec()
        };
        let clone = params.m.clone();
        assert_eq!(eval(&params.m), eval(&clone));
        let mut bias = params.m.zeros_like();
        bias.tensors_mut().last().unwrap().data_mut()[0] = 1.0;
        let shifted = params.m.axpy(&bias, -0.5).unwrap();
        assert_ne!(eval(&params.m), eval(&shifted));
    }
}
