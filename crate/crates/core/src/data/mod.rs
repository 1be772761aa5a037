//! Synthetic bi-temporal change-detection samples.
//!
//! A scene is a smooth background shared by both times plus a set of
//! non-overlapping target shapes. Shapes of time A either persist into B or
//! disappear; new shapes may appear in B. The change mask is the set of pixels
//! whose target occupancy differs between the two times.

mod augment;
mod store;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor::Tensor;

pub use augment::{apply as apply_augmentation, augment, flip_horizontal, rotate90, Augmentation};
pub use store::{load_sample, load_split, save_sample, save_split};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7472,
            Split::Val => 0x7661,
            Split::Test => 0x7465,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of shapes placed at time A.
    pub shape_count: (usize, usize),
    /// Std-dev of independent per-image pixel noise.
    pub noise_level: f64,
    /// Probability that a time-A shape is gone at time B.
    pub p_disappear: f64,
    /// Up to this many new shapes appear at time B.
    pub max_appear: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_val: 128,
            n_test: 128,
            height: 32,
            width: 32,
            shape_count: (2, 4),
            noise_level: 0.02,
            p_disappear: 0.3,
            max_appear: 2,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("dataset split sizes must be positive".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "images must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.shape_count.0 > self.shape_count.1 {
            return Err(Error::Config("shape_count range is inverted".into()));
        }
        if !(0.0..=1.0).contains(&self.p_disappear) || self.noise_level < 0.0 {
            return Err(Error::Config("invalid change probability or noise level".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SampleMeta {
    pub seed: u64,
    pub split: Option<Split>,
    pub index: u64,
    pub shift_px: usize,
    pub augmentations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitemporalSample {
    pub image_a: Tensor,
    pub image_b: Tensor,
    /// `[1, H, W]` with values in {0, 1}.
    pub mask: Tensor,
    pub meta: SampleMeta,
}

impl BitemporalSample {
    pub fn height(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[2]
    }

    pub fn changed_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.numel() as f64
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.image_a.bit_eq(&other.image_a)
            && self.image_b.bit_eq(&other.image_b)
            && self.mask.bit_eq(&other.mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Disk {
        cy: f64,
        cx: f64,
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: [f64; 3],
}

impl Shape {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        match self.kind {
            ShapeKind::Rect {
                top,
                left,
                height,
                width,
            } => (top..top + height).contains(&r) && (left..left + width).contains(&c),
            ShapeKind::Disk { cy, cx, radius } => {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                dy * dy + dx * dx <= radius * radius
            }
        }
    }

    /// Pixel bounding box `(r0, c0, r1, c1)`, exclusive end.
    fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        match self.kind {
            ShapeKind::Rect {
                top,
                left,
                height,
                width,
            } => (top, left, (top + height).min(h), (left + width).min(w)),
            ShapeKind::Disk { cy, cx, radius } => (
                (cy - radius).floor().max(0.0) as usize,
                (cx - radius).floor().max(0.0) as usize,
                ((cy + radius).ceil() as usize + 1).min(h),
                ((cx + radius).ceil() as usize + 1).min(w),
            ),
        }
    }

    fn pixels(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (r0, c0, r1, c1) = self.bounds(h, w);
        (r0..r1)
            .flat_map(move |r| (c0..c1).map(move |c| (r, c)))
            .filter(move |&(r, c)| self.contains(r, c))
    }
}

/// Everything needed to render one sample deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub background: Tensor,
    pub shapes_a: Vec<Shape>,
    pub shapes_b: Vec<Shape>,
}

pub fn occupancy(shapes: &[Shape], h: usize, w: usize) -> Vec<bool> {
    let mut occ = vec![false; h * w];
    for s in shapes {
        for (r, c) in s.pixels(h, w) {
            occ[r * w + c] = true;
        }
    }
    occ
}

fn smooth_background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    const GRID: usize = 5;
    let base = [0.30, 0.38, 0.22];
    let mut bg = Tensor::zeros(&[CHANNELS, h, w]);
    for (ch, &level) in base.iter().enumerate() {
        let knots: Vec<f64> = (0..GRID * GRID)
            .map(|_| level + rng.random_range(-0.12..0.12))
            .collect();
        for r in 0..h {
            let gy = r as f64 / (h - 1) as f64 * (GRID - 1) as f64;
            let (y0, fy) = (gy.floor() as usize, gy.fract());
            let y1 = (y0 + 1).min(GRID - 1);
            for c in 0..w {
                let gx = c as f64 / (w - 1) as f64 * (GRID - 1) as f64;
                let (x0, fx) = (gx.floor() as usize, gx.fract());
                let x1 = (x0 + 1).min(GRID - 1);
                let v = knots[y0 * GRID + x0] * (1.0 - fy) * (1.0 - fx)
                    + knots[y0 * GRID + x1] * (1.0 - fy) * fx
                    + knots[y1 * GRID + x0] * fy * (1.0 - fx)
                    + knots[y1 * GRID + x1] * fy * fx;
                bg.set3(ch, r, c, v);
            }
        }
    }
    bg
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Shape {
    let kind = if rng.random_bool(0.5) {
        let height = rng.random_range(4..=9.min(h - 2));
        let width = rng.random_range(4..=9.min(w - 2));
        ShapeKind::Rect {
            top: rng.random_range(0..=h - height),
            left: rng.random_range(0..=w - width),
            height,
            width,
        }
    } else {
        let radius = rng.random_range(2.5..5.0);
        ShapeKind::Disk {
            cy: rng.random_range(radius..h as f64 - radius),
            cx: rng.random_range(radius..w as f64 - radius),
            radius,
        }
    };
    let color = [
        0.88 + rng.random_range(-0.06..0.06),
        0.80 + rng.random_range(-0.06..0.06),
        0.70 + rng.random_range(-0.06..0.06),
    ];
    Shape { kind, color }
}

/// Places a shape that keeps a one-pixel gap to every occupied pixel, or gives up.
fn place_shape(rng: &mut ChaCha8Rng, taken: &mut [bool], h: usize, w: usize) -> Option<Shape> {
    for _ in 0..40 {
        let s = random_shape(rng, h, w);
        let clear = s.pixels(h, w).all(|(r, c)| {
            (r.saturating_sub(1)..=(r + 1).min(h - 1))
                .all(|rr| (c.saturating_sub(1)..=(c + 1).min(w - 1)).all(|cc| !taken[rr * w + cc]))
        });
        if clear {
            for (r, c) in s.pixels(h, w) {
                taken[r * w + c] = true;
            }
            return Some(s);
        }
    }
    None
}

fn sample_rng(cfg: &DatasetConfig, split: Split, index: u64) -> ChaCha8Rng {
    keyed_rng(&[cfg.seed, split.stream(), index])
}

pub fn sample_scene(cfg: &DatasetConfig, split: Split, index: u64) -> Scene {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = sample_rng(cfg, split, index);
    let background = smooth_background(&mut rng, h, w);
    let mut taken = vec![false; h * w];
    let n_a = rng.random_range(cfg.shape_count.0..=cfg.shape_count.1);
    let shapes_a: Vec<Shape> = (0..n_a)
        .filter_map(|_| place_shape(&mut rng, &mut taken, h, w))
        .collect();
    let mut shapes_b: Vec<Shape> = shapes_a
        .iter()
        .filter(|_| !rng.random_bool(cfg.p_disappear))
        .copied()
        .collect();
    let n_new = if cfg.max_appear == 0 {
        0
    } else {
        rng.random_range(0..=cfg.max_appear)
    };
    for _ in 0..n_new {
        if let Some(s) = place_shape(&mut rng, &mut taken, h, w) {
            shapes_b.push(s);
        }
    }
    Scene {
        background,
        shapes_a,
        shapes_b,
    }
}

fn render_time(scene: &Scene, shapes: &[Shape], noise: Option<(&mut ChaCha8Rng, f64)>) -> Tensor {
    let [_, h, w] = [CHANNELS, scene.background.shape()[1], scene.background.shape()[2]];
    let mut img = scene.background.clone();
    for s in shapes {
        for (r, c) in s.pixels(h, w) {
            for ch in 0..CHANNELS {
                img.set3(ch, r, c, s.color[ch]);
            }
        }
    }
    if let Some((rng, sigma)) = noise {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            for v in img.data_mut() {
                *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Renders a scene. Noise, when enabled, is drawn independently for each time.
pub fn render_scene(scene: &Scene, noise_level: f64, noise_key: &[u64]) -> (Tensor, Tensor, Tensor) {
    let (h, w) = (scene.background.shape()[1], scene.background.shape()[2]);
    let mut key_a = noise_key.to_vec();
    key_a.push(0xA);
    let mut key_b = noise_key.to_vec();
    key_b.push(0xB);
    let mut rng_a = keyed_rng(&key_a);
    let mut rng_b = keyed_rng(&key_b);
    let image_a = render_time(scene, &scene.shapes_a, Some((&mut rng_a, noise_level)));
    let image_b = render_time(scene, &scene.shapes_b, Some((&mut rng_b, noise_level)));
    let occ_a = occupancy(&scene.shapes_a, h, w);
    let occ_b = occupancy(&scene.shapes_b, h, w);
    let mask = Tensor::new(
        vec![1, h, w],
        occ_a
            .iter()
            .zip(&occ_b)
            .map(|(a, b)| f64::from(u8::from(a != b)))
            .collect(),
    )
    .expect("mask shape");
    (image_a, image_b, mask)
}

pub fn generate_pair(cfg: &DatasetConfig, split: Split, index: u64) -> Result<BitemporalSample> {
    if index as usize >= cfg.split_len(split) {
        return Err(Error::Contract(format!(
            "index {index} outside {split} split of size {}",
            cfg.split_len(split)
        )));
    }
    let scene = sample_scene(cfg, split, index);
    let (image_a, image_b, mask) =
        render_scene(&scene, cfg.noise_level, &[cfg.seed, split.stream(), index, 0x401E]);
    Ok(BitemporalSample {
        image_a,
        image_b,
        mask,
        meta: SampleMeta {
            seed: cfg.seed,
            split: Some(split),
            index,
            shift_px: 0,
            augmentations: Vec::new(),
        },
    })
}

pub fn generate_split(cfg: &DatasetConfig, split: Split) -> Result<Vec<BitemporalSample>> {
    cfg.validate()?;
    (0..cfg.split_len(split) as u64)
        .into_par_iter()
        .map(|i| generate_pair(cfg, split, i))
        .collect()
}

/// Translates image B right by `n_px` columns with edge replication.
/// The mask stays in A's frame.
pub fn shift_second(sample: &BitemporalSample, n_px: usize) -> Result<BitemporalSample> {
    let w = sample.width();
    if n_px >= w {
        return Err(Error::Config(format!(
            "shift of {n_px}px must be below image width {w}"
        )));
    }
    let mut out = sample.clone();
    if n_px == 0 {
        return Ok(out);
    }
    let [c, h, _] = [CHANNELS, sample.height(), w];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let src = col.saturating_sub(n_px);
                out.image_b.set3(ch, r, col, sample.image_b.at3(ch, r, src));
            }
        }
    }
    out.meta.shift_px = sample.meta.shift_px + n_px;
    Ok(out)
}

/// Misregistration magnitudes of the shift-robustness protocol.
pub const SHIFT_GRID: [usize; 5] = [0, 2, 4, 6, 8];

/// All three splits, with image B shifted by `shift_px` everywhere.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<BitemporalSample>,
    pub val: Vec<BitemporalSample>,
    pub test: Vec<BitemporalSample>,
}

impl Dataset {
    pub fn generate(cfg: &DatasetConfig, shift_px: usize) -> Result<Self> {
        let make = |split| -> Result<Vec<BitemporalSample>> {
            generate_split(cfg, split)?
                .iter()
                .map(|s| shift_second(s, shift_px))
                .collect()
        };
        Ok(Self {
            train: make(Split::Train)?,
            val: make(Split::Val)?,
            test: make(Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[BitemporalSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            n_train: 8,
            n_val: 4,
            n_test: 4,
            ..Default::default()
        }
    }

    #[test]
    fn no_change_no_noise_gives_identical_images() {
        let cfg = DatasetConfig {
            noise_level: 0.0,
            p_disappear: 0.0,
            max_appear: 0,
            ..small()
        };
        for i in 0..4 {
            let s = generate_pair(&cfg, Split::Train, i).unwrap();
            assert_eq!(s.mask.sum(), 0.0);
            assert!(s.image_a.bit_eq(&s.image_b));
        }
    }

    #[test]
    fn added_disk_is_exactly_the_mask() {
        let cfg = small();
        let mut scene = sample_scene(&cfg, Split::Train, 0);
        scene.shapes_b = scene.shapes_a.clone();
        let disk = Shape {
            kind: ShapeKind::Disk {
                cy: 16.0,
                cx: 16.0,
                radius: 3.0,
            },
            color: [0.9, 0.8, 0.7],
        };
        scene.shapes_a.clear();
        scene.shapes_b = vec![disk];
        let (_, _, mask) = render_scene(&scene, 0.0, &[1]);
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(mask.at3(0, r, c) == 1.0, disk.contains(r, c));
            }
        }
        assert_eq!(mask.sum(), 29.0); // lattice points with dy^2 + dx^2 <= 9
    }

    #[test]
    fn deterministic_per_index() {
        let cfg = small();
        let a = generate_pair(&cfg, Split::Val, 3).unwrap();
        let b = generate_pair(&cfg, Split::Val, 3).unwrap();
        let c = generate_pair(&cfg, Split::Test, 3).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        assert!(generate_pair(&cfg, Split::Val, 4).is_err());
    }

    #[test]
    fn mask_matches_shape_symmetric_difference() {
        let cfg = small();
        for i in 0..8 {
            let s = generate_pair(&cfg, Split::Train, i).unwrap();
            let scene = sample_scene(&cfg, Split::Train, i);
            for r in 0..32 {
                for c in 0..32 {
                    let in_a = scene.shapes_a.iter().any(|s| s.contains(r, c));
                    let in_b = scene.shapes_b.iter().any(|s| s.contains(r, c));
                    assert_eq!(s.mask.at3(0, r, c) == 1.0, in_a != in_b);
                }
            }
        }
    }

    #[test]
    fn shift_replicates_left_edge() {
        let s = generate_pair(&small(), Split::Train, 1).unwrap();
        assert!(shift_second(&s, 0).unwrap().bit_eq(&s));
        let t = shift_second(&s, 2).unwrap();
        for ch in 0..3 {
            for r in 0..32 {
                for j in 0..32usize {
                    let src = j.saturating_sub(2);
                    assert_eq!(t.image_b.at3(ch, r, j), s.image_b.at3(ch, r, src));
                }
            }
        }
        assert!(t.mask.bit_eq(&s.mask) && t.image_a.bit_eq(&s.image_a));
        assert_eq!(t.meta.shift_px, 2);
        assert!(matches!(shift_second(&s, 32), Err(Error::Config(_))));
        assert_eq!(SHIFT_GRID, [0, 2, 4, 6, 8]);
    }

    #[test]
    fn images_stay_in_unit_range() {
        let cfg = DatasetConfig {
            noise_level: 0.2,
            ..small()
        };
        let s = generate_pair(&cfg, Split::Train, 0).unwrap();
        assert!(s
            .image_a
            .data()
            .iter()
            .chain(s.image_b.data())
            .all(|v| (0.0..=1.0).contains(v)));
    }
}
