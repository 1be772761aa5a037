//! Binary change-detection confusion metrics and error-map rendering.
//!
//! Counts are micro-averaged: callers accumulate one [`Confusion`] over every
//! pixel of a split and compute scores once.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    /// Counts from binary prediction and target maps of equal shape.
    pub fn from_maps(pred: &Tensor, target: &Tensor) -> Result<Self> {
        if pred.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                lhs: pred.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let mut c = Self::default();
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            c.record(binary(p, "prediction")?, binary(t, "target")?);
        }
        Ok(c)
    }

    pub fn record(&mut self, pred: bool, target: bool) {
        match (pred, target) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn scores(&self) -> Scores {
        let (tp, tn, fp, fn_) = (
            self.tp as f64,
            self.tn as f64,
            self.fp as f64,
            self.fn_ as f64,
        );
        // With no positives anywhere the empty prediction is perfect.
        let nothing_to_find = self.tp + self.fp + self.fn_ == 0;
        let ratio = |num: f64, den: f64| {
            if nothing_to_find {
                1.0
            } else if den == 0.0 {
                0.0
            } else {
                num / den
            }
        };
        let iou = ratio(tp, tp + fn_ + fp);
        let prec = ratio(tp, tp + fp);
        let rec = ratio(tp, tp + fn_);
        let f1 = if nothing_to_find {
            1.0
        } else if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        };
        let total = tp + tn + fp + fn_;
        let oa = if total == 0.0 { 1.0 } else { (tp + tn) / total };
        Scores {
            oa,
            iou,
            f1,
            prec,
            rec,
        }
    }
}

impl std::ops::AddAssign for Confusion {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

impl std::ops::Add for Confusion {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

fn binary(v: f64, what: &str) -> Result<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(Error::Contract(format!("{what} value {v} is not binary")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub oa: f64,
    pub iou: f64,
    pub f1: f64,
    pub prec: f64,
    pub rec: f64,
}

pub const COLOR_TP: [u8; 3] = [255, 255, 255];
pub const COLOR_TN: [u8; 3] = [0, 0, 0];
pub const COLOR_FP: [u8; 3] = [0, 255, 0];
pub const COLOR_FN: [u8; 3] = [255, 0, 0];

/// RGB error map: TP white, TN black, FP green, FN red.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMap {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

impl ErrorMap {
    pub fn render(pred: &Tensor, target: &Tensor) -> Result<Self> {
        Confusion::from_maps(pred, target)?;
        let s = target.shape();
        let (height, width) = (s[s.len() - 2], s[s.len() - 1]);
        if target.numel() != height * width {
            return Err(Error::Contract(format!(
                "error maps need a single plane, got shape {s:?}"
            )));
        }
        let mut rgb = Vec::with_capacity(height * width * 3);
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            let color = match (p == 1.0, t == 1.0) {
                (true, true) => COLOR_TP,
                (false, false) => COLOR_TN,
                (true, false) => COLOR_FP,
                (false, true) => COLOR_FN,
            };
            rgb.extend_from_slice(&color);
        }
        Ok(Self { height, width, rgb })
    }

    /// Counts pixels per color back into a confusion matrix.
    pub fn histogram(&self) -> Result<Confusion> {
        let mut c = Confusion::default();
        for px in self.rgb.chunks_exact(3) {
            match [px[0], px[1], px[2]] {
                COLOR_TP => c.tp += 1,
                COLOR_TN => c.tn += 1,
                COLOR_FP => c.fp += 1,
                COLOR_FN => c.fn_ += 1,
                other => {
                    return Err(Error::Contract(format!(
                        "unexpected error-map color {other:?}"
                    )))
                }
            }
        }
        Ok(c)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected binary P6 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let rgb = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixels"))?.to_vec();
        if rgb.len() != width * height * 3 {
            return Err(bad("pixel payload has the wrong length"));
        }
        Ok(Self { height, width, rgb })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Tensor {
        Tensor::from_fn(&[1, h, w], |i| f64::from(u8::from(f(i / w, i % w))))
    }

    #[test]
    fn all_ones_against_checkerboard() {
        let pred = plane(4, 4, |_, _| true);
        let target = plane(4, 4, |r, c| (r + c) % 2 == 0);
        let c = Confusion::from_maps(&pred, &target).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (8, 8, 0, 0));
    }

    #[test]
    fn checkerboard_against_all_ones() {
        let pred = plane(4, 4, |r, c| (r + c) % 2 == 0);
        let target = plane(4, 4, |_, _| true);
        let c = Confusion::from_maps(&pred, &target).unwrap();
        assert_eq!((c.tp, c.fn_, c.fp, c.tn), (8, 8, 0, 0));
    }

    #[test]
    fn reference_scores() {
        let s = Confusion::new(50, 30, 10, 10).scores();
        assert!((s.iou - 50.0 / 70.0).abs() < 1e-12);
        assert!((s.prec - 50.0 / 60.0).abs() < 1e-12);
        assert!((s.rec - 50.0 / 60.0).abs() < 1e-12);
        assert!((s.f1 - 50.0 / 60.0).abs() < 1e-12);
        assert!((s.oa - 0.8).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        let empty = Confusion::new(0, 16, 0, 0).scores();
        assert_eq!((empty.iou, empty.prec, empty.rec, empty.f1), (1.0, 1.0, 1.0, 1.0));
        let missed = Confusion::new(0, 10, 0, 6).scores();
        assert_eq!((missed.iou, missed.prec, missed.rec, missed.f1), (0.0, 0.0, 0.0, 0.0));
        assert!(Confusion::from_maps(&Tensor::full(&[1, 1, 1], 0.5), &Tensor::zeros(&[1, 1, 1])).is_err());
    }

    #[test]
    fn error_map_round_trips_through_ppm() {
        let pred = plane(5, 7, |r, c| (r * c) % 3 == 0);
        let target = plane(5, 7, |r, c| (r + 2 * c) % 4 == 0);
        let map = ErrorMap::render(&pred, &target).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ppm");
        map.write_ppm(&path).unwrap();
        let back = ErrorMap::read_ppm(&path).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.histogram().unwrap(), Confusion::from_maps(&pred, &target).unwrap());
    }
}
