//! Elementwise exchange on concrete tensors.
//!
//! For a binary mask `m` broadcast over `[C,H,W]`, the exchanged pair is
//! `a' = m*b + (1-m)*a` and `b' = m*a + (1-m)*b`. With `m` in {0, 1} this is a
//! pure selection, which is how it is evaluated here so values are relocated
//! bit-for-bit and never recomputed.

use crate::error::{Error, Result};
use crate::exchange::{Axis, ExchangeMask};
use crate::tensor::Tensor;

/// Broadcasts an axis mask to a per-element selection over a `[C,H,W]` shape.
pub fn element_mask(mask: &ExchangeMask, shape: &[usize]) -> Result<Vec<bool>> {
    let &[c, h, w] = shape else {
        return Err(Error::Contract(format!(
            "exchange expects [C,H,W] features, got {shape:?}"
        )));
    };
    let want = match mask.axis {
        Axis::Channel => c,
        Axis::SpatialCol => w,
        Axis::SpatialRow => h,
        Axis::Layer => {
            return Err(Error::Contract(
                "layer masks select whole levels, not elements".into(),
            ))
        }
    };
    if mask.len() != want {
        return Err(Error::Contract(format!(
            "{} mask has length {}, feature axis has {want}",
            mask.axis,
            mask.len()
        )));
    }
    let mut sel = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                sel.push(match mask.axis {
                    Axis::Channel => mask.epsilon[ci],
                    Axis::SpatialCol => mask.epsilon[wi],
                    Axis::SpatialRow => mask.epsilon[hi],
                    Axis::Layer => unreachable!(),
                });
            }
        }
    }
    Ok(sel)
}

fn masked_swap(a: &Tensor, b: &Tensor, mask: &ExchangeMask) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "exchange",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let sel = element_mask(mask, a.shape())?;
    let mut out_a = a.data().to_vec();
    let mut out_b = b.data().to_vec();
    for (i, &s) in sel.iter().enumerate() {
        if s {
            out_a[i] = b.data()[i];
            out_b[i] = a.data()[i];
        }
    }
    Ok((
        Tensor::new(a.shape().to_vec(), out_a)?,
        Tensor::new(b.shape().to_vec(), out_b)?,
    ))
}

/// Swaps whole pyramid levels where the mask is set.
pub fn layer_exchange(
    a: &[Tensor],
    b: &[Tensor],
    mask: &ExchangeMask,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if a.len() != b.len() || mask.len() != a.len() {
        return Err(Error::Contract(format!(
            "layer exchange needs equal pyramid and mask lengths, got {} / {} / {}",
            a.len(),
            b.len(),
            mask.len()
        )));
    }
    let mut out_a = Vec::with_capacity(a.len());
    let mut out_b = Vec::with_capacity(b.len());
    for ((xa, xb), &swap) in a.iter().zip(b).zip(&mask.epsilon) {
        if xa.shape() != xb.shape() {
            return Err(Error::ShapeMismatch {
                op: "layer_exchange",
                lhs: xa.shape().to_vec(),
                rhs: xb.shape().to_vec(),
            });
        }
        if swap {
            out_a.push(xb.clone());
            out_b.push(xa.clone());
        } else {
            out_a.push(xa.clone());
            out_b.push(xb.clone());
        }
    }
    Ok((out_a, out_b))
}

/// Swaps the channels selected by a length-`C` mask.
pub fn channel_exchange(a: &Tensor, b: &Tensor, mask: &ExchangeMask) -> Result<(Tensor, Tensor)> {
    if mask.axis != Axis::Channel {
        return Err(Error::Contract(format!(
            "channel exchange given a {} mask",
            mask.axis
        )));
    }
    masked_swap(a, b, mask)
}

/// Swaps the columns (or rows, for a row mask) selected by the mask.
pub fn spatial_exchange(a: &Tensor, b: &Tensor, mask: &ExchangeMask) -> Result<(Tensor, Tensor)> {
    if !matches!(mask.axis, Axis::SpatialCol | Axis::SpatialRow) {
        return Err(Error::Contract(format!(
            "spatial exchange given a {} mask",
            mask.axis
        )));
    }
    masked_swap(a, b, mask)
}
