use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, Init, NetState};
use crate::ops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderArch {
    /// Stacked `conv3x3 -> bn -> relu -> maxpool` blocks, global average pooled.
    ConvNet,
    #[serde(rename = "resnet50")]
    ResNet50,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub arch: EncoderArch,
    /// Channel width per conv block (conv-net only).
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
}

fn default_channels() -> usize {
    3
}

impl EncoderSpec {
    pub fn conv_net(widths: &[usize]) -> Self {
        EncoderSpec { arch: EncoderArch::ConvNet, widths: widths.to_vec(), in_channels: 3 }
    }

    pub fn resnet50() -> Self {
        EncoderSpec { arch: EncoderArch::ResNet50, widths: vec![], in_channels: 3 }
    }

    /// Representation dimension `d`.
    pub fn output_dim(&self) -> usize {
        match self.arch {
            EncoderArch::ConvNet => self.widths.last().copied().unwrap_or(0),
            EncoderArch::ResNet50 => 2048,
        }
    }

    /// Smallest input resolution the architecture accepts.
    pub fn min_resolution(&self) -> usize {
        match self.arch {
            EncoderArch::ConvNet => 1 << self.widths.len().saturating_sub(1),
            EncoderArch::ResNet50 => 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("encoder needs at least one input channel"));
        }
        if self.arch == EncoderArch::ConvNet && (self.widths.is_empty() || self.widths.contains(&0)) {
            return Err(Error::config("conv-net encoder needs non-empty, positive widths"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    fn new<R: Rng>(state: &mut NetState, init: &mut Init<'_, R>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvBlock {
            conv: Conv2d::new(&mut state.params, init, &format!("{name}.conv"), cin, cout, k, stride, pad),
            bn: BatchNorm::new(state, &format!("{name}.bn"), cout),
        }
    }

    fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        let y = self.conv.forward(ctx, x);
        self.bn.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: ConvBlock,
    spatial: ConvBlock,
    expand: ConvBlock,
    shortcut: Option<ConvBlock>,
}

impl Bottleneck {
    fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        let h = ops::relu(self.reduce.forward(ctx, x));
        let h = ops::relu(self.spatial.forward(ctx, h));
        let h = self.expand.forward(ctx, h);
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x),
            None => x,
        };
        ops::relu(ops::add(h, skip))
    }
}

#[derive(Clone, Debug)]
enum Body {
    ConvNet(Vec<ConvBlock>),
    ResNet { stem: ConvBlock, blocks: Vec<Bottleneck> },
}

/// The backbone `f`: images `(n, c, h, w)` to representations `(n, d)`.
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    body: Body,
}

impl Encoder {
    pub fn new<R: Rng>(spec: &EncoderSpec, state: &mut NetState, init: &mut Init<'_, R>) -> Result<Self> {
        spec.validate()?;
        let body = match spec.arch {
            EncoderArch::ConvNet => {
                let mut cin = spec.in_channels;
                let blocks = spec
                    .widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let b = ConvBlock::new(state, init, &format!("encoder.block{i}"), cin, w, 3, 1, 1);
                        cin = w;
                        b
                    })
                    .collect();
                Body::ConvNet(blocks)
            }
            EncoderArch::ResNet50 => {
                let stem = ConvBlock::new(state, init, "encoder.stem", spec.in_channels, 64, 7, 2, 3);
                let mut blocks = Vec::new();
                let mut cin = 64;
                for (stage, (&depth, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
                    for i in 0..depth {
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        let name = format!("encoder.layer{}.{i}", stage + 1);
                        let cout = width * 4;
                        let shortcut = (stride != 1 || cin != cout)
                            .then(|| ConvBlock::new(state, init, &format!("{name}.shortcut"), cin, cout, 1, stride, 0));
                        blocks.push(Bottleneck {
                            reduce: ConvBlock::new(state, init, &format!("{name}.reduce"), cin, width, 1, 1, 0),
                            spatial: ConvBlock::new(state, init, &format!("{name}.spatial"), width, width, 3, stride, 1),
                            expand: ConvBlock::new(state, init, &format!("{name}.expand"), width, cout, 1, 1, 0),
                            shortcut,
                        });
                        cin = cout;
                    }
                }
                Body::ResNet { stem, blocks }
            }
        };
        Ok(Encoder { spec: spec.clone(), body })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        match &self.body {
            Body::ConvNet(blocks) => {
                let mut h = x;
                for (i, b) in blocks.iter().enumerate() {
                    h = ops::relu(b.forward(ctx, h));
                    if i + 1 < blocks.len() {
                        h = ops::max_pool2d(h, 2, 2, 0);
                    }
                }
                ops::global_avg_pool(h)
            }
            Body::ResNet { stem, blocks } => {
                let mut h = ops::max_pool2d(ops::relu(stem.forward(ctx, x)), 3, 2, 1);
                for b in blocks {
                    h = b.forward(ctx, h);
                }
                ops::global_avg_pool(h)
            }
        }
    }
}
