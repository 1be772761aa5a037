//! Paired geometric and per-image photometric augmentation.

use rand::Rng;

use super::BitemporalSample;
use crate::rng::keyed_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    FlipHorizontal,
    /// Clockwise quarter turns, 1..=3.
    Rotate90(u8),
    /// `v -> clamp((v - 0.5) * contrast + 0.5 + brightness)` on both images,
    /// each with its own draw.
    Photometric {
        brightness: (f64, f64),
        contrast: (f64, f64),
    },
}

impl Augmentation {
    pub fn label(&self) -> String {
        match self {
            Augmentation::FlipHorizontal => "hflip".into(),
            Augmentation::Rotate90(k) => format!("rot90x{k}"),
            Augmentation::Photometric {
                brightness,
                contrast,
            } => format!(
                "photo(a:{:+.3}/{:.3},b:{:+.3}/{:.3})",
                brightness.0, contrast.0, brightness.1, contrast.1
            ),
        }
    }
}

/// Mirrors each `[C, H, W]` plane left-right.
pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = t.clone();
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out.set3(ch, r, col, t.at3(ch, r, w - 1 - col));
            }
        }
    }
    out
}

/// One clockwise quarter turn: `(r, c) -> (c, H - 1 - r)`. Square planes only.
pub fn rotate90(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert_eq!(h, w, "rotate90 needs square planes");
    let mut out = t.clone();
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out.set3(ch, col, h - 1 - r, t.at3(ch, r, col));
            }
        }
    }
    out
}

fn photometric(t: &Tensor, brightness: f64, contrast: f64) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
    }
    out
}

pub fn apply(sample: &BitemporalSample, aug: &Augmentation) -> BitemporalSample {
    let mut out = sample.clone();
    match *aug {
        Augmentation::FlipHorizontal => {
            out.image_a = flip_horizontal(&sample.image_a);
            out.image_b = flip_horizontal(&sample.image_b);
            out.mask = flip_horizontal(&sample.mask);
        }
        Augmentation::Rotate90(k) => {
            for _ in 0..k % 4 {
                out.image_a = rotate90(&out.image_a);
                out.image_b = rotate90(&out.image_b);
                out.mask = rotate90(&out.mask);
            }
        }
        Augmentation::Photometric {
            brightness,
            contrast,
        } => {
            out.image_a = photometric(&sample.image_a, brightness.0, contrast.0);
            out.image_b = photometric(&sample.image_b, brightness.1, contrast.1);
        }
    }
    out.meta.augmentations.push(aug.label());
    out
}

/// Draws a random augmentation chain from `(seed, key)` and applies it.
pub fn augment(sample: &BitemporalSample, seed: u64, key: u64) -> BitemporalSample {
    let mut rng = keyed_rng(&[seed, key, 0xA06]);
    let mut chain = Vec::new();
    if rng.random_bool(0.5) {
        chain.push(Augmentation::FlipHorizontal);
    }
    if sample.height() == sample.width() {
        let k: u8 = rng.random_range(0..4);
        if k > 0 {
            chain.push(Augmentation::Rotate90(k));
        }
    }
    chain.push(Augmentation::Photometric {
        brightness: (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        contrast: (rng.random_range(0.9..1.1), rng.random_range(0.9..1.1)),
    });
    chain.iter().fold(sample.clone(), |s, a| apply(&s, a))
}
