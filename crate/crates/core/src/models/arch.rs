use aikd_autograd::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, BatchNorm, Conv2d, Linear};
use super::params::{Forward, NormMode, ParamStore};
use crate::error::{Error, Result};

pub const INPUT_CHANNELS: usize = 3;
/// Resolutions the named architectures are built for.
pub const CANONICAL_RESOLUTIONS: [usize; 3] = [32, 64, 224];
pub const TINY_MIN_RESOLUTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet18,
    Resnet50,
    PreactResnet18,
    PreactResnet50,
    Densenet121,
    TinyCnn,
}

impl Architecture {
    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown architecture `{name}`")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Resnet18 => "resnet18",
            Architecture::Resnet50 => "resnet50",
            Architecture::PreactResnet18 => "preact_resnet18",
            Architecture::PreactResnet50 => "preact_resnet50",
            Architecture::Densenet121 => "densenet121",
            Architecture::TinyCnn => "tiny_cnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
    pub input_resolution: usize,
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        let r = self.input_resolution;
        let ok = match self.architecture {
            Architecture::TinyCnn => r >= TINY_MIN_RESOLUTION,
            _ => CANONICAL_RESOLUTIONS.contains(&r),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "{} does not support input resolution {r}",
                self.architecture.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(s: &mut ParamStore, name: &str, inp: usize, out: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBn {
            conv: Conv2d::new(s, &format!("{name}.conv"), inp, out, k, stride, pad, rng),
            bn: BatchNorm::new(s, &format!("{name}.bn"), out),
        }
    }

    fn forward(&self, f: &Forward, x: &Tensor, mode: NormMode) -> Tensor {
        self.bn.forward(f, &self.conv.forward(f, x), mode)
    }
}

#[derive(Debug, Clone)]
struct TinyCnn {
    blocks: [ConvBn; 3],
    fc: Linear,
}

impl TinyCnn {
    fn new(s: &mut ParamStore, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let blocks = [
            ConvBn::new(s, "block1", INPUT_CHANNELS, 8, 3, 1, 1, rng),
            ConvBn::new(s, "block2", 8, 16, 3, 1, 1, rng),
            ConvBn::new(s, "block3", 16, 32, 3, 1, 1, rng),
        ];
        let fc = Linear::new(s, "fc", 32, classes, rng);
        TinyCnn { blocks, fc }
    }

    fn forward(&self, f: &Forward, x: &Tensor, mode: NormMode) -> Tensor {
        let mut h = x.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(f, &h, mode).relu();
            if i < 2 {
                h = h.max_pool2d(2, 2, 0);
            }
        }
        self.fc.forward(f, &global_avg_pool(&h))
    }
}

#[derive(Debug, Clone, Copy)]
enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// One residual block; post-activation or pre-activation ordering.
#[derive(Debug, Clone)]
struct ResBlock {
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm>,
    shortcut: Option<(Conv2d, Option<BatchNorm>)>,
    preact: bool,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        s: &mut ParamStore,
        name: &str,
        kind: BlockKind,
        inp: usize,
        planes: usize,
        stride: usize,
        preact: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let out = planes * kind.expansion();
        // (in, out, kernel, stride, pad) per convolution
        let layout: Vec<(usize, usize, usize, usize, usize)> = match kind {
            BlockKind::Basic => vec![(inp, planes, 3, stride, 1), (planes, planes, 3, 1, 1)],
            BlockKind::Bottleneck => vec![(inp, planes, 1, 1, 0), (planes, planes, 3, stride, 1), (planes, out, 1, 1, 0)],
        };
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for (i, &(ci, co, k, st, p)) in layout.iter().enumerate() {
            convs.push(Conv2d::new(s, &format!("{name}.conv{}", i + 1), ci, co, k, st, p, rng));
            let bn_channels = if preact { ci } else { co };
            bns.push(BatchNorm::new(s, &format!("{name}.bn{}", i + 1), bn_channels));
        }
        let shortcut = (stride != 1 || inp != out).then(|| {
            let conv = Conv2d::new(s, &format!("{name}.shortcut.conv"), inp, out, 1, stride, 0, rng);
            let bn = (!preact).then(|| BatchNorm::new(s, &format!("{name}.shortcut.bn"), out));
            (conv, bn)
        });
        ResBlock { convs, bns, shortcut, preact }
    }

    fn forward(&self, f: &Forward, x: &Tensor, mode: NormMode) -> Tensor {
        if self.preact {
            let first = self.bns[0].forward(f, x, mode).relu();
            let skip = match &self.shortcut {
                Some((conv, _)) => conv.forward(f, &first),
                None => x.clone(),
            };
            let mut h = self.convs[0].forward(f, &first);
            for (conv, bn) in self.convs.iter().zip(&self.bns).skip(1) {
                h = conv.forward(f, &bn.forward(f, &h, mode).relu());
            }
            h.add(&skip)
        } else {
            let last = self.convs.len() - 1;
            let mut h = x.clone();
            for (i, (conv, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
                h = bn.forward(f, &conv.forward(f, &h), mode);
                if i < last {
                    h = h.relu();
                }
            }
            let skip = match &self.shortcut {
                Some((conv, Some(bn))) => bn.forward(f, &conv.forward(f, x), mode),
                Some((conv, None)) => conv.forward(f, x),
                None => x.clone(),
            };
            h.add(&skip).relu()
        }
    }
}

/// Stem convolution: 7x7 stride 2 plus max pooling at 224 pixels, 3x3 stride 1
/// otherwise.
#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    bn: Option<BatchNorm>,
    pool: bool,
}

impl Stem {
    fn new(s: &mut ParamStore, out: usize, resolution: usize, with_bn: bool, rng: &mut ChaCha8Rng) -> Self {
        let large = resolution >= 224;
        let conv = if large {
            Conv2d::new(s, "stem.conv", INPUT_CHANNELS, out, 7, 2, 3, rng)
        } else {
            Conv2d::new(s, "stem.conv", INPUT_CHANNELS, out, 3, 1, 1, rng)
        };
        let bn = (with_bn || large).then(|| BatchNorm::new(s, "stem.bn", out));
        Stem { conv, bn, pool: large }
    }

    fn forward(&self, f: &Forward, x: &Tensor, mode: NormMode) -> Tensor {
        let mut h = self.conv.forward(f, x);
        if let Some(bn) = &self.bn {
            h = bn.forward(f, &h, mode).relu();
        }
        if self.pool {
            h = h.max_pool2d(3, 2, 1);
        }
        h
    }
}

#[derive(Debug, Clone)]
struct ResNet {
    stem: Stem,
    blocks: Vec<ResBlock>,
    final_bn: Option<BatchNorm>,
    fc: Linear,
}

impl ResNet {
    fn new(s: &mut ParamStore, kind: BlockKind, depths: [usize; 4], preact: bool, spec: &ClassifierSpec, rng: &mut ChaCha8Rng) -> Self {
        // pre-activation stems at low resolution end in a bare convolution
        let stem = Stem::new(s, 64, spec.input_resolution, !preact, rng);
        let mut blocks = Vec::new();
        let mut inp = 64;
        for (stage, (&depth, planes)) in depths.iter().zip([64, 128, 256, 512]).enumerate() {
            for i in 0..depth {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let name = format!("layer{}.{i}", stage + 1);
                blocks.push(ResBlock::new(s, &name, kind, inp, planes, stride, preact, rng));
                inp = planes * kind.expansion();
            }
        }
        let final_bn = preact.then(|| BatchNorm::new(s, "final_bn", inp));
        let fc = Linear::new(s, "fc", inp, spec.num_classes, rng);
        ResNet { stem, blocks, final_bn, fc }
    }

    fn forward(&self, f: &Forward, x: &Tensor, mode: NormMode) -> Tensor {
        let mut h = self.stem.forward(f, x, mode);
        for b in &self.blocks {
            h = b.forward(f, &h, mode);
        }
        if let Some(bn) = &self.final_bn {
            h = bn.forward(f, &h, mode).relu();
        }
        self.fc.forward(f, &global_avg_pool(&h))
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
}

#[derive(Debug, Clone)]
struct Transition {
    bn: BatchNorm,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
struct DenseNet {
    stem: Stem,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm,
    fc: Linear,
}

const DENSE_GROWTH: usize = 32;
const DENSE_BN_SIZE: usize = 4;
const DENSE_BLOCKS: [usize; 4] = [6, 12, 24, 16];

impl DenseNet {
    fn new(s: &mut ParamStore, spec: &ClassifierSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut channels = 2 * DENSE_GROWTH;
        let stem = Stem::new(s, channels, spec.input_resolution, false, rng);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &n) in DENSE_BLOCKS.iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0..n {
                let name = format!("dense{}.{li}", bi + 1);
                let mid = DENSE_BN_SIZE * DENSE_GROWTH;
                layers.push(DenseLayer {
                    bn1: BatchNorm::new(s, &format!("{name}.bn1"), channels),
                    conv1: Conv2d::new(s, &format!("{name}.conv1"), channels, mid, 1, 1, 0, rng),
                    bn2: BatchNorm::new(s, &format!("{name}.bn2"), mid),
                    conv2: Conv2d::new(s, &format!("{name}.conv2"), mid, DENSE_GROWTH, 3, 1, 1, rng),
                });
                channels += DENSE_GROWTH;
            }
            blocks.push(layers);
            if bi + 1 < DENSE_BLOCKS.len() {
                let out = channels / 2;
                let name = format!("trans{}", bi + 1);
                transitions.push(Transition {
                    bn: BatchNorm::new(s, &format!("{name}.bn"), channels),
                    conv: Conv2d::new(s, &format!("{name}.conv"), channels, out, 1, 1, 0, rng),
                });
                channels = out;
            }
        }
        let final_bn = BatchNorm::new(s, "final_bn", channels);
        let fc = Linear::new(s, "fc", channels, spec.num_classes, rng);
        DenseNet { stem, blocks, transitions, final_bn, fc }
    }

    fn forward(&self, f: &Forward, x: &Tensor, mode: NormMode) -> Tensor {
        let mut h = self.stem.forward(f, x, mode);
        for (bi, layers) in self.blocks.iter().enumerate() {
            for l in layers {
                let y = l.conv1.forward(f, &l.bn1.forward(f, &h, mode).relu());
                let y = l.conv2.forward(f, &l.bn2.forward(f, &y, mode).relu());
                h = Tensor::concat(&[h, y], 1);
            }
            if let Some(t) = self.transitions.get(bi) {
                h = t.conv.forward(f, &t.bn.forward(f, &h, mode).relu()).avg_pool2d(2, 2);
            }
        }
        let h = self.final_bn.forward(f, &h, mode).relu();
        self.fc.forward(f, &global_avg_pool(&h))
    }
}

#[derive(Debug, Clone)]
enum Body {
    Tiny(TinyCnn),
    ResNet(ResNet),
    DenseNet(DenseNet),
}

/// Layer graph of a classifier; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    body: Body,
    classifier: Linear,
}

impl Network {
    pub fn build(spec: &ClassifierSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let body = match spec.architecture {
            Architecture::TinyCnn => Body::Tiny(TinyCnn::new(store, spec.num_classes, rng)),
            Architecture::Resnet18 => Body::ResNet(ResNet::new(store, BlockKind::Basic, [2, 2, 2, 2], false, spec, rng)),
            Architecture::Resnet50 => Body::ResNet(ResNet::new(store, BlockKind::Bottleneck, [3, 4, 6, 3], false, spec, rng)),
            Architecture::PreactResnet18 => Body::ResNet(ResNet::new(store, BlockKind::Basic, [2, 2, 2, 2], true, spec, rng)),
            Architecture::PreactResnet50 => Body::ResNet(ResNet::new(store, BlockKind::Bottleneck, [3, 4, 6, 3], true, spec, rng)),
            Architecture::Densenet121 => Body::DenseNet(DenseNet::new(store, spec, rng)),
        };
        let classifier = match &body {
            Body::Tiny(n) => n.fc.clone(),
            Body::ResNet(n) => n.fc.clone(),
            Body::DenseNet(n) => n.fc.clone(),
        };
        Ok(Network { body, classifier })
    }

    /// The final fully-connected layer.
    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// `(B, 3, H, W)` normalized images to `(B, C)` logits.
    pub fn forward(&self, f: &Forward, x: &Tensor, mode: NormMode) -> Tensor {
        match &self.body {
            Body::Tiny(n) => n.forward(f, x, mode),
            Body::ResNet(n) => n.forward(f, x, mode),
            Body::DenseNet(n) => n.forward(f, x, mode),
        }
    }
}
