//! SimpleCNN and ResNet-18 with named observation points for Grad-CAM.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::conv::conv_macs;
use crate::ops::{BnMode, RunningStats};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    SimpleCnn,
    ResNet18,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::SimpleCnn => "simplecnn",
            Arch::ResNet18 => "resnet18",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simplecnn" | "cnn" => Some(Arch::SimpleCnn),
            "resnet18" | "resnet" => Some(Arch::ResNet18),
            _ => None,
        }
    }

    /// Layer identifiers that can serve as the CAM target, shallow to deep.
    pub fn layers(self) -> &'static [&'static str] {
        match self {
            Arch::SimpleCnn => &["conv1", "conv2", "pool"],
            Arch::ResNet18 => &["stem", "layer1", "layer2", "layer3", "layer4"],
        }
    }

    /// The final convolutional stage, after its spatial reduction.
    pub fn default_target(self) -> &'static str {
        match self {
            Arch::SimpleCnn => "pool",
            Arch::ResNet18 => "layer4",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_side: usize,
    pub num_classes: usize,
    pub target_layer: String,
}

impl ModelSpec {
    pub fn new(arch: Arch, input_side: usize) -> Self {
        ModelSpec {
            arch,
            input_side,
            num_classes: NUM_CLASSES,
            target_layer: arch.default_target().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Invalid(format!("num_classes must be {NUM_CLASSES}")));
        }
        let sides: &[usize] = match self.arch {
            Arch::SimpleCnn => &[28],
            Arch::ResNet18 => &[28, 112],
        };
        if !sides.contains(&self.input_side) {
            return Err(Error::Invalid(format!(
                "{} does not support input side {} (supported: {sides:?})",
                self.arch, self.input_side
            )));
        }
        if !self.arch.layers().contains(&self.target_layer.as_str()) {
            return Err(Error::Invalid(format!(
                "unknown target layer {:?} for {}; valid: {}",
                self.target_layer,
                self.arch,
                self.arch.layers().join(", ")
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics, nothing mutated.
    Eval,
}

type ForwardHook<'a> = Box<dyn FnMut(&mut Graph, Var) + 'a>;

/// Observation points at named layer outputs of one forward pass.
#[derive(Default)]
pub struct Taps<'a> {
    retain: Option<String>,
    hooks: Vec<(String, ForwardHook<'a>)>,
    captured: Option<Var>,
}

impl<'a> Taps<'a> {
    pub fn none() -> Self {
        Taps::default()
    }

    /// Retain `layer` for gradient queries and remember its variable.
    pub fn retain(layer: &str) -> Self {
        Taps {
            retain: Some(layer.to_string()),
            ..Taps::default()
        }
    }

    /// Call `hook` with the output of `layer` as soon as it is produced.
    pub fn on_forward(&mut self, layer: &str, hook: impl FnMut(&mut Graph, Var) + 'a) {
        self.hooks.push((layer.to_string(), Box::new(hook)));
    }

    pub fn captured(&self) -> Option<Var> {
        self.captured
    }

    fn visit(&mut self, g: &mut Graph, layer: &str, v: Var) {
        if self.retain.as_deref() == Some(layer) {
            g.retain(v);
            self.captured = Some(v);
        }
        for (name, hook) in &mut self.hooks {
            if name == layer {
                hook(g, v);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    kernel: [usize; 4],
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layout {
    Simple {
        conv1: (usize, usize),
        conv2: (usize, usize),
        fc1: (usize, usize),
        fc2: (usize, usize),
    },
    ResNet {
        stem: ConvBn,
        stages: Vec<Vec<Block>>,
        fc: (usize, usize),
    },
}

/// A network: its parameters, batchnorm running statistics, and topology.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
    bn: Vec<RunningStats>,
    bn_names: Vec<String>,
    layout: Layout,
}

struct Builder {
    params: ParamSet,
    bn: Vec<RunningStats>,
    bn_names: Vec<String>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn he_uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.add(name, Tensor::new(shape, data).expect("shape matches"))
    }

    fn zeros(&mut self, name: String, len: usize) -> usize {
        self.params.add(name, Tensor::zeros(vec![len]))
    }

    fn conv(&mut self, name: &str, o: usize, c: usize, k: usize) -> usize {
        self.he_uniform(format!("{name}.weight"), vec![o, c, k, k], c * k * k)
    }

    fn linear(&mut self, name: &str, f: usize, o: usize) -> (usize, usize) {
        let w = self.he_uniform(format!("{name}.weight"), vec![f, o], f);
        (w, self.zeros(format!("{name}.bias"), o))
    }

    fn conv_bn(&mut self, conv: &str, bn: &str, o: usize, c: usize, k: usize, stride: usize, padding: usize) -> ConvBn {
        let weight = self.conv(conv, o, c, k);
        let gamma = self.params.add(format!("{bn}.weight"), Tensor::full(vec![o], 1.0));
        let beta = self.zeros(format!("{bn}.bias"), o);
        self.bn.push(RunningStats::new(o));
        self.bn_names.push(bn.to_string());
        ConvBn {
            weight,
            gamma,
            beta,
            bn: self.bn.len() - 1,
            kernel: [o, c, k, k],
            stride,
            padding,
        }
    }
}

fn conv_bn_forward(
    g: &mut Graph,
    vars: &[Var],
    bn: &mut [RunningStats],
    mode: Mode,
    layer: &ConvBn,
    x: Var,
) -> Result<Var> {
    let y = g.conv2d(x, vars[layer.weight], None, layer.stride, layer.padding)?;
    let stats = &mut bn[layer.bn];
    let bn_mode = match mode {
        Mode::Train => BnMode::Train(stats),
        Mode::Eval => BnMode::Eval(stats),
    };
    g.batchnorm2d(y, vars[layer.gamma], vars[layer.beta], bn_mode)
}

fn conv_side(side: usize, k: usize, stride: usize, padding: usize) -> usize {
    (side + 2 * padding - k) / stride + 1
}

/// Output of [`Model::forward`].
pub struct Forward {
    pub logits: Var,
    /// Graph variables of the parameters, indexed by parameter id.
    pub params: Vec<Var>,
    /// The retained target layer, when requested through [`Taps::retain`].
    pub capture: Option<Var>,
}

impl Model {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        match spec.arch {
            Arch::SimpleCnn => Ok(Self::build_simplecnn(spec, seed)),
            Arch::ResNet18 => Ok(Self::build_resnet18(spec, seed)),
        }
    }

    fn builder(seed: u64) -> Builder {
        Builder {
            params: ParamSet::new(),
            bn: Vec::new(),
            bn_names: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn build_simplecnn(spec: ModelSpec, seed: u64) -> Self {
        let mut b = Self::builder(seed);
        let c1w = b.conv("conv1", 32, 1, 3);
        let c1b = b.zeros("conv1.bias".into(), 32);
        let c2w = b.conv("conv2", 64, 32, 3);
        let c2b = b.zeros("conv2.bias".into(), 64);
        let side = spec.input_side / 2;
        let fc1 = b.linear("fc1", 64 * side * side, 32);
        let fc2 = b.linear("fc2", 32, spec.num_classes);
        Model {
            spec,
            params: b.params,
            bn: b.bn,
            bn_names: b.bn_names,
            layout: Layout::Simple {
                conv1: (c1w, c1b),
                conv2: (c2w, c2b),
                fc1,
                fc2,
            },
        }
    }

    fn build_resnet18(spec: ModelSpec, seed: u64) -> Self {
        let mut b = Self::builder(seed);
        let stem = b.conv_bn("conv1", "bn1", 64, 1, 7, 2, 3);
        let mut stages = Vec::new();
        let mut in_ch = 64;
        for (si, &out_ch) in [64usize, 128, 256, 512].iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..2 {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let p = format!("layer{}.{bi}", si + 1);
                let conv1 = b.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), out_ch, in_ch, 3, stride, 1);
                let conv2 = b.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), out_ch, out_ch, 3, 1, 1);
                let downsample = (stride != 1 || in_ch != out_ch).then(|| {
                    b.conv_bn(
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        out_ch,
                        in_ch,
                        1,
                        stride,
                        0,
                    )
                });
                blocks.push(Block {
                    conv1,
                    conv2,
                    downsample,
                });
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        let fc = b.linear("fc", 512, spec.num_classes);
        Model {
            spec,
            params: b.params,
            bn: b.bn,
            bn_names: b.bn_names,
            layout: Layout::ResNet { stem, stages, fc },
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Batchnorm layer names with their running statistics.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.bn_names.iter().map(String::as_str).zip(&self.bn)
    }

    pub(crate) fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.bn
    }

    pub fn has_batchnorm(&self) -> bool {
        !self.bn.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Change the layer used as CAM target.
    pub fn set_target_layer(&mut self, layer: &str) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.target_layer = layer.to_string();
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    /// Hash of parameters, optimizer state, and running statistics.
    pub fn fingerprint(&self) -> u64 {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut h = DefaultHasher::new();
        self.params.fingerprint().hash(&mut h);
        for s in &self.bn {
            for v in s.mean.iter().chain(&s.var) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Forward an N×1×S×S batch. Every named layer output passes through `taps`.
    pub fn forward(&mut self, g: &mut Graph, images: &Tensor, mode: Mode, taps: &mut Taps<'_>) -> Result<Forward> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.spec.input_side || s[3] != self.spec.input_side {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected N×1×{0}×{0} input, got {s:?}",
                    self.spec.input_side
                ),
            ));
        }
        let vars = self.params.bind(g);
        let x = g.constant(images.clone());
        let Model { bn, layout, .. } = self;
        let logits = match layout {
            Layout::Simple { conv1, conv2, fc1, fc2 } => {
                let h = g.conv2d(x, vars[conv1.0], Some(vars[conv1.1]), 1, 1)?;
                let h = g.relu(h)?;
                taps.visit(g, "conv1", h);
                let h = g.conv2d(h, vars[conv2.0], Some(vars[conv2.1]), 1, 1)?;
                let h = g.relu(h)?;
                taps.visit(g, "conv2", h);
                let h = g.maxpool2(h)?;
                taps.visit(g, "pool", h);
                let h = g.flatten(h)?;
                let h = g.linear(h, vars[fc1.0], Some(vars[fc1.1]))?;
                let h = g.relu(h)?;
                g.linear(h, vars[fc2.0], Some(vars[fc2.1]))?
            }
            Layout::ResNet { stem, stages, fc } => {
                let h = conv_bn_forward(g, &vars, bn, mode, stem, x)?;
                let h = g.relu(h)?;
                let mut h = g.max_pool2d(h, 3, 2, 1)?;
                taps.visit(g, "stem", h);
                for (si, blocks) in stages.iter().enumerate() {
                    for block in blocks {
                        let y = conv_bn_forward(g, &vars, bn, mode, &block.conv1, h)?;
                        let y = g.relu(y)?;
                        let y = conv_bn_forward(g, &vars, bn, mode, &block.conv2, y)?;
                        let shortcut = match &block.downsample {
                            Some(d) => conv_bn_forward(g, &vars, bn, mode, d, h)?,
                            None => h,
                        };
                        let y = g.add(y, shortcut)?;
                        h = g.relu(y)?;
                    }
                    taps.visit(g, Arch::ResNet18.layers()[si + 1], h);
                }
                let pooled = g.global_avg_pool(h)?;
                g.linear(pooled, vars[fc.0], Some(vars[fc.1]))?
            }
        };
        Ok(Forward {
            logits,
            params: vars,
            capture: taps.captured(),
        })
    }

    /// Forward with the configured target layer retained.
    pub fn forward_capture(&mut self, g: &mut Graph, images: &Tensor, mode: Mode) -> Result<(Var, Var)> {
        let mut taps = Taps::retain(&self.spec.target_layer);
        let out = self.forward(g, images, mode, &mut taps)?;
        Ok((out.logits, out.capture.expect("target layer is validated")))
    }

    /// Multiply-accumulate count of one forward pass at `input_side`, over
    /// convolutions and linear layers.
    pub fn macs(&self, input_side: usize) -> Result<u64> {
        let one = |side: usize, k: [usize; 4], stride: usize, pad: usize| conv_macs([1, k[1], side, side], k, stride, pad);
        let mut total = 0u64;
        match &self.layout {
            Layout::Simple { fc1, fc2, .. } => {
                total += one(input_side, [32, 1, 3, 3], 1, 1)?;
                total += one(input_side, [64, 32, 3, 3], 1, 1)?;
                for &(w, _) in [fc1, fc2] {
                    total += self.params.get(w).value.numel() as u64;
                }
            }
            Layout::ResNet { stem, stages, fc } => {
                let mut side = input_side;
                total += one(side, stem.kernel, stem.stride, stem.padding)?;
                side = conv_side(side, 7, 2, 3);
                side = conv_side(side, 3, 2, 1);
                for block in stages.iter().flatten() {
                    let c1 = &block.conv1;
                    total += one(side, c1.kernel, c1.stride, c1.padding)?;
                    if let Some(d) = &block.downsample {
                        total += one(side, d.kernel, d.stride, d.padding)?;
                    }
                    side = conv_side(side, 3, c1.stride, 1);
                    total += one(side, block.conv2.kernel, 1, 1)?;
                }
                total += self.params.get(fc.0).value.numel() as u64;
            }
        }
        Ok(total)
    }

    /// Forward-pass GFLOPs as 2·MACs.
    pub fn flop_estimate(&self, input_side: usize) -> Result<f64> {
        Ok(2.0 * self.macs(input_side)? as f64 / 1e9)
    }

    /// Spatial side of the target layer for this model's input side.
    pub fn target_side(&self) -> usize {
        let s = self.spec.input_side;
        match (self.spec.arch, self.spec.target_layer.as_str()) {
            (Arch::SimpleCnn, "pool") => s / 2,
            (Arch::SimpleCnn, _) => s,
            (Arch::ResNet18, layer) => {
                let mut side = conv_side(conv_side(s, 7, 2, 3), 3, 2, 1);
                let depth = Arch::ResNet18.layers().iter().position(|&l| l == layer).unwrap_or(0);
                for _ in 1..depth.max(1) {
                    side = conv_side(side, 3, 2, 1);
                }
                side
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple() -> Model {
        Model::build(ModelSpec::new(Arch::SimpleCnn, 28), 0).unwrap()
    }

    #[test]
    fn simplecnn_shapes_and_count() {
        let mut m = simple();
        assert_eq!(m.param_count(), 420_586);
        let mut g = Graph::new();
        let x = Tensor::zeros(vec![5, 1, 28, 28]);
        let (logits, cap) = m.forward_capture(&mut g, &x, Mode::Eval).unwrap();
        assert_eq!(g.shape(logits), &[5, 10]);
        assert_eq!(g.shape(cap), &[5, 64, 14, 14]);
        assert!(g.is_retained(cap));
        assert_eq!(m.target_side(), 14);
    }

    #[test]
    fn simplecnn_rejects_other_sides() {
        assert!(Model::build(ModelSpec::new(Arch::SimpleCnn, 112), 0).is_err());
        let mut spec = ModelSpec::new(Arch::SimpleCnn, 28);
        spec.target_layer = "layer4".into();
        assert!(Model::build(spec, 0).is_err());
    }

    #[test]
    fn simplecnn_macs() {
        // conv1 28²·32·9, conv2 28²·64·32·9, fc1 12544·32, fc2 32·10
        let m = simple();
        assert_eq!(m.macs(28).unwrap(), 225_792 + 14_450_688 + 401_408 + 320);
    }

    #[test]
    fn resnet_count_and_sides() {
        let m = Model::build(ModelSpec::new(Arch::ResNet18, 112), 0).unwrap();
        assert_eq!(m.param_count(), 11_175_370);
        assert_eq!(m.target_side(), 4);
        let m28 = Model::build(ModelSpec::new(Arch::ResNet18, 28), 0).unwrap();
        assert_eq!(m28.target_side(), 1);
        assert_eq!(m.running_stats().count(), 20);
    }

    #[test]
    fn resnet_forward_shapes() {
        let mut m = Model::build(ModelSpec::new(Arch::ResNet18, 28), 1).unwrap();
        for (layer, side) in [("stem", 7), ("layer1", 7), ("layer2", 4), ("layer3", 2), ("layer4", 1)] {
            m.set_target_layer(layer).unwrap();
            assert_eq!(m.target_side(), side, "{layer}");
            let mut g = Graph::new();
            let (logits, cap) = m.forward_capture(&mut g, &Tensor::zeros(vec![3, 1, 28, 28]), Mode::Eval).unwrap();
            assert_eq!(g.shape(logits), &[3, 10]);
            assert_eq!(g.shape(cap)[2], side, "{layer}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::build(ModelSpec::new(Arch::SimpleCnn, 28), 7).unwrap();
        let b = Model::build(ModelSpec::new(Arch::SimpleCnn, 28), 7).unwrap();
        let c = Model::build(ModelSpec::new(Arch::SimpleCnn, 28), 8).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        let w = &a.params().get(0).value;
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.params().get(1).value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_hooks_see_layers() {
        use std::cell::RefCell;
        let seen = RefCell::new(Vec::new());
        let mut m = simple();
        let mut taps = Taps::none();
        taps.on_forward("conv2", |g, v| seen.borrow_mut().push(g.shape(v).to_vec()));
        let mut g = Graph::new();
        m.forward(&mut g, &Tensor::zeros(vec![2, 1, 28, 28]), Mode::Eval, &mut taps).unwrap();
        drop(taps);
        assert_eq!(seen.into_inner(), vec![vec![2, 64, 28, 28]]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = Model::build(ModelSpec::new(Arch::ResNet18, 28), 3).unwrap();
        let x = Tensor::new(vec![2, 1, 28, 28], (0..1568).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap();
        let run = |m: &mut Model| {
            let mut g = Graph::new();
            let out = m.forward(&mut g, &x, Mode::Eval, &mut Taps::none()).unwrap();
            g.value(out.logits).clone()
        };
        let before = m.fingerprint();
        assert_eq!(run(&mut m), run(&mut m));
        assert_eq!(m.fingerprint(), before);
    }
}
