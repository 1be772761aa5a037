//! Single-stream encoder, FPN-style neck and upsampling decoder.
//!
//! Every convolution is named; its parameters live in a [`ParamSet`] as
//! `<name>.w` (`[out, in, k, k]`) and `<name>.b` (`[out]`). Blocks are looked
//! up by name on each call, so invoking a stage twice reuses the same weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::fusion::ConvShape;
use crate::rng::keyed_rng;
use crate::tensor::{Graph, OpCost, ParamSet, Tensor, Var};

/// Channels of the final 1x1 head, rearranged into a 2x upsampled map.
const HEAD_SUBPIXELS: usize = 4;
/// Encoder downsampling is a non-overlapping `2x2`, stride-2 convolution.
const DOWN_KERNEL: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backbone {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub levels: usize,
    /// Encoder width per level, finest first.
    pub channels: Vec<usize>,
    pub neck_channels: usize,
    /// Residual bottleneck repetitions per encoder and decoder level.
    pub blocks: usize,
}

impl Default for Backbone {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            in_channels: 3,
            levels: 3,
            channels: vec![8, 16, 32],
            neck_channels: 16,
            blocks: 1,
        }
    }
}

fn bottleneck_convs(prefix: &str, c: usize) -> Vec<ConvShape> {
    let mid = (c / 2).max(1);
    vec![
        (format!("{prefix}.reduce"), c, mid, 1),
        (format!("{prefix}.conv"), mid, mid, 3),
        (format!("{prefix}.expand"), mid, c, 1),
    ]
}

fn bottleneck_cost(c: usize, h: usize, w: usize) -> OpCost {
    bottleneck_convs("", c)
        .into_iter()
        .fold(OpCost::ZERO, |acc, (_, cin, cout, k)| {
            acc + OpCost::conv2d(cin, cout, k, k, h, w)
        })
}

impl Backbone {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("need at least 2 levels, got {}", self.levels)));
        }
        if self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "{} channel widths given for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.neck_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let stride = 1usize << self.levels;
        if self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^{}",
                self.height, self.width, self.levels
            )));
        }
        Ok(())
    }

    /// Feature shapes `[C, H, W]` produced by the encoder, finest first.
    pub fn level_shapes(&self) -> Vec<[usize; 3]> {
        (0..self.levels)
            .map(|l| {
                let f = 2usize << l;
                [self.channels[l], self.height / f, self.width / f]
            })
            .collect()
    }

    pub fn encoder_convs(&self) -> Vec<ConvShape> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (l, &c) in self.channels.iter().enumerate() {
            out.push((format!("enc.{l}.down"), cin, c, DOWN_KERNEL));
            for j in 0..self.blocks {
                out.extend(bottleneck_convs(&format!("enc.{l}.b{j}"), c));
            }
            cin = c;
        }
        out
    }

    pub fn neck_convs(&self) -> Vec<ConvShape> {
        self.channels
            .iter()
            .enumerate()
            .map(|(l, &c)| (format!("neck.{l}.lat"), c, self.neck_channels, 1))
            .collect()
    }

    pub fn decoder_convs(&self) -> Vec<ConvShape> {
        let mut out = Vec::new();
        for l in 0..self.levels {
            for j in 0..self.blocks {
                out.extend(bottleneck_convs(&format!("dec.{l}.b{j}"), self.neck_channels));
            }
        }
        out.push(("dec.head".into(), self.neck_channels, HEAD_SUBPIXELS, 1));
        out
    }

    pub fn convs(&self) -> Vec<ConvShape> {
        let mut all = self.encoder_convs();
        all.extend(self.neck_convs());
        all.extend(self.decoder_convs());
        all
    }

    pub fn encoder_cost(&self) -> OpCost {
        let mut cin = self.in_channels;
        let mut cost = OpCost::ZERO;
        for [c, h, w] in self.level_shapes() {
            cost += OpCost::conv2d(cin, c, DOWN_KERNEL, DOWN_KERNEL, h, w);
            for _ in 0..self.blocks {
                cost += bottleneck_cost(c, h, w);
            }
            cin = c;
        }
        cost
    }

    pub fn neck_cost(&self) -> OpCost {
        self.level_shapes()
            .into_iter()
            .fold(OpCost::ZERO, |acc, [c, h, w]| {
                acc + OpCost::conv2d(c, self.neck_channels, 1, 1, h, w)
            })
    }

    pub fn decoder_cost(&self) -> OpCost {
        let shapes = self.level_shapes();
        let mut cost = OpCost::ZERO;
        for &[_, h, w] in &shapes {
            for _ in 0..self.blocks {
                cost += bottleneck_cost(self.neck_channels, h, w);
            }
        }
        let [_, h0, w0] = shapes[0];
        cost + OpCost::conv2d(self.neck_channels, HEAD_SUBPIXELS, 1, 1, h0, w0)
    }

    /// Fan-in scaled uniform weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, and zero biases.
    pub fn init_params(convs: &[ConvShape], seed: u64) -> Result<ParamSet> {
        let mut rng = keyed_rng(&[seed, 0x1417]);
        let mut params = ParamSet::new();
        for (name, cin, cout, k) in convs {
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            let w = Tensor::from_fn(&[*cout, *cin, *k, *k], |_| rng.random_range(-bound..bound));
            params.insert(format!("{name}.w"), w)?;
            params.insert(format!("{name}.b"), Tensor::zeros(&[*cout]))?;
        }
        Ok(params)
    }

    pub fn conv(g: &mut Graph, params: &ParamSet, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = g.param(params, &format!("{name}.w"))?;
        let b = g.param(params, &format!("{name}.b"))?;
        g.conv2d(x, w, b, stride, pad)
    }

    /// `relu(x + expand(relu(conv3x3(relu(reduce(x))))))`.
    fn bottleneck(g: &mut Graph, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
        let r = Self::conv(g, params, &format!("{prefix}.reduce"), x, 1, 0)?;
        let r = g.relu(r)?;
        let m = Self::conv(g, params, &format!("{prefix}.conv"), r, 1, 1)?;
        let m = g.relu(m)?;
        let e = Self::conv(g, params, &format!("{prefix}.expand"), m, 1, 0)?;
        let s = g.add(x, e)?;
        g.relu(s)
    }

    pub fn encode(&self, g: &mut Graph, params: &ParamSet, image: Var) -> Result<Vec<Var>> {
        let want = [self.in_channels, self.height, self.width];
        if g.shape(image) != want {
            return Err(Error::Contract(format!(
                "image shape {:?} does not match configured {want:?}",
                g.shape(image)
            )));
        }
        let mut x = image;
        let mut pyramid = Vec::with_capacity(self.levels);
        for l in 0..self.levels {
            x = Self::conv(g, params, &format!("enc.{l}.down"), x, DOWN_KERNEL, 0)?;
            x = g.relu(x)?;
            for j in 0..self.blocks {
                x = Self::bottleneck(g, params, &format!("enc.{l}.b{j}"), x)?;
            }
            pyramid.push(x);
        }
        Ok(pyramid)
    }

    /// Lateral 1x1 projections merged top-down by nearest upsampling and addition.
    pub fn neck(&self, g: &mut Graph, params: &ParamSet, pyramid: &[Var]) -> Result<Vec<Var>> {
        if pyramid.len() != self.levels {
            return Err(Error::Contract(format!(
                "neck expects {} levels, got {}",
                self.levels,
                pyramid.len()
            )));
        }
        let mut out = vec![None; self.levels];
        let mut above: Option<Var> = None;
        for l in (0..self.levels).rev() {
            let mut p = Self::conv(g, params, &format!("neck.{l}.lat"), pyramid[l], 1, 0)?;
            if let Some(top) = above {
                let up = g.upsample(top, 2)?;
                p = g.add(p, up)?;
            }
            out[l] = Some(p);
            above = Some(p);
        }
        Ok(out.into_iter().map(|p| p.expect("every level filled")).collect())
    }

    /// Coarse-to-fine refinement, then a 1x1 head whose four channels become a
    /// 2x sub-pixel upsampling to input resolution.
    pub fn decode(&self, g: &mut Graph, params: &ParamSet, pyramid: &[Var]) -> Result<Var> {
        let top = self.levels - 1;
        let mut d = pyramid[top];
        for l in (0..self.levels).rev() {
            if l < top {
                let up = g.upsample(d, 2)?;
                d = g.add(up, pyramid[l])?;
            }
            for j in 0..self.blocks {
                d = Self::bottleneck(g, params, &format!("dec.{l}.b{j}"), d)?;
            }
        }
        let head = Self::conv(g, params, "dec.head", d, 1, 0)?;
        g.depth_to_space(head, 2)
    }
}

/// A plain single-input segmentation network built from a [`Backbone`].
#[derive(Debug, Clone)]
pub struct SegModel {
    pub backbone: Backbone,
    pub params: ParamSet,
}

impl SegModel {
    pub fn new(backbone: Backbone, seed: u64) -> Result<Self> {
        backbone.validate()?;
        let params = Backbone::init_params(&backbone.convs(), seed)?;
        Ok(Self { backbone, params })
    }

    pub fn param_count(&self) -> u64 {
        self.params.count()
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let pyr = self.backbone.encode(g, &self.params, image)?;
        let pyr = self.backbone.neck(g, &self.params, &pyr)?;
        self.backbone.decode(g, &self.params, &pyr)
    }
}
