//! Parameter-free feature exchange between two temporal branches.
//!
//! Each exchange axis is an [`Exchange`] strategy; [`ExchangeRegistry`] maps
//! axis names to strategies so configs can select them at runtime. Every
//! strategy is driven by a binary [`ExchangeMask`]: position `i` is swapped
//! across time when `epsilon[i]` is set and kept otherwise.

mod ops;
mod permutation;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor::{Graph, OpCost, Tensor, Var};

pub use ops::{channel_exchange, element_mask, layer_exchange, spatial_exchange};
pub use permutation::{
    build_permutation, verify_orthogonality, OrthogonalityReport, PermutationOperator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Layer,
    Channel,
    SpatialCol,
    SpatialRow,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Layer, Axis::Channel, Axis::SpatialCol, Axis::SpatialRow];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Layer => "layer",
            Axis::Channel => "channel",
            Axis::SpatialCol => "spatial_col",
            Axis::SpatialRow => "spatial_row",
        }
    }

    /// Short tag used in experiment ids (LE / CE / SE).
    pub fn tag(self) -> &'static str {
        match self {
            Axis::Layer => "LE",
            Axis::Channel => "CE",
            Axis::SpatialCol => "SE",
            Axis::SpatialRow => "SE-row",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" | "le" => Ok(Axis::Layer),
            "channel" | "ce" => Ok(Axis::Channel),
            "spatial_col" | "spatial" | "se" => Ok(Axis::SpatialCol),
            "spatial_row" => Ok(Axis::SpatialRow),
            other => Err(Error::Config(format!("unknown exchange axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// `epsilon_i = 1` iff `(i - offset) mod step == 0`.
    Deterministic,
    /// i.i.d. Bernoulli(p) draws, resampled every training iteration.
    Bernoulli,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Policy::Deterministic),
            "bernoulli" | "random" => Ok(Policy::Bernoulli),
            other => Err(Error::Config(format!("unknown exchange policy {other:?}"))),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Deterministic => "deterministic",
            Policy::Bernoulli => "bernoulli",
        })
    }
}

/// Whether masks may be random (training) or must be the fixed rule (val/test).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Exchange configuration. `step`/`offset` always define the deterministic
/// rule, which Bernoulli specs fall back to outside training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExchangeSpec {
    pub axis: Axis,
    pub policy: Policy,
    pub step: usize,
    pub offset: usize,
    pub p: f64,
    pub seed: u64,
}

impl ExchangeSpec {
    pub fn deterministic(axis: Axis, step: usize, offset: usize) -> Self {
        Self {
            axis,
            policy: Policy::Deterministic,
            step,
            offset,
            p: 0.5,
            seed: 0,
        }
    }

    pub fn bernoulli(axis: Axis, p: f64, seed: u64) -> Self {
        Self {
            axis,
            policy: Policy::Bernoulli,
            step: 2,
            offset: 0,
            p,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Config("exchange step must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!(
                "exchange probability {} outside [0, 1]",
                self.p
            )));
        }
        Ok(())
    }

    /// Mask for `m` positions at pyramid `level`, honouring the phase.
    pub fn mask(&self, m: usize, iteration: u64, level: usize, phase: Phase) -> ExchangeMask {
        match phase {
            Phase::Train => sample_mask(self, m, iteration, level),
            Phase::Eval => deterministic_mask(self, m, level),
        }
    }
}

/// Binary selection over one exchange axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeMask {
    pub epsilon: Vec<bool>,
    pub axis: Axis,
    pub level: usize,
}

impl ExchangeMask {
    pub fn new(epsilon: Vec<bool>, axis: Axis, level: usize) -> Self {
        Self {
            epsilon,
            axis,
            level,
        }
    }

    pub fn zeros(m: usize, axis: Axis, level: usize) -> Self {
        Self::new(vec![false; m], axis, level)
    }

    pub fn ones(m: usize, axis: Axis, level: usize) -> Self {
        Self::new(vec![true; m], axis, level)
    }

    pub fn len(&self) -> usize {
        self.epsilon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epsilon.is_empty()
    }

    /// `|S|`, the number of swapped positions.
    pub fn swapped(&self) -> usize {
        self.epsilon.iter().filter(|&&e| e).count()
    }
}

pub fn deterministic_mask(spec: &ExchangeSpec, m: usize, level: usize) -> ExchangeMask {
    let step = spec.step.max(1);
    let epsilon = (0..m)
        .map(|i| i >= spec.offset && (i - spec.offset) % step == 0)
        .collect();
    ExchangeMask::new(epsilon, spec.axis, level)
}

/// Training-time mask. Bernoulli draws come from a stream keyed by
/// `(seed, iteration, level)`.
pub fn sample_mask(spec: &ExchangeSpec, m: usize, iteration: u64, level: usize) -> ExchangeMask {
    match spec.policy {
        Policy::Deterministic => deterministic_mask(spec, m, level),
        Policy::Bernoulli => {
            let mut rng = keyed_rng(&[spec.seed, iteration, level as u64]);
            let epsilon = (0..m).map(|_| rng.random_bool(spec.p)).collect();
            ExchangeMask::new(epsilon, spec.axis, level)
        }
    }
}

/// One exchange axis applied to a pair of feature pyramids (`[C,H,W]` per level).
pub trait Exchange: Send + Sync {
    fn axis(&self) -> Axis;

    fn name(&self) -> &'static str {
        self.axis().name()
    }

    /// Exchange is a pure selection: no parameters and no multiply-accumulates.
    fn cost(&self, _level_shapes: &[[usize; 3]]) -> OpCost {
        OpCost::ZERO
    }

    /// Mask lengths required for pyramids with these per-level shapes.
    fn mask_lengths(&self, level_shapes: &[[usize; 3]]) -> Vec<usize>;

    fn apply(
        &self,
        a: &[Tensor],
        b: &[Tensor],
        masks: &[ExchangeMask],
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)>;

    /// Same exchange recorded on a graph so gradients flow through the permutation.
    fn record(
        &self,
        g: &mut Graph,
        a: &[Var],
        b: &[Var],
        masks: &[ExchangeMask],
    ) -> Result<(Vec<Var>, Vec<Var>)>;

    /// Masks for every level under `spec` at this iteration and phase.
    fn plan(
        &self,
        spec: &ExchangeSpec,
        level_shapes: &[[usize; 3]],
        iteration: u64,
        phase: Phase,
    ) -> Vec<ExchangeMask> {
        self.mask_lengths(level_shapes)
            .into_iter()
            .enumerate()
            .map(|(level, m)| spec.mask(m, iteration, level, phase))
            .collect()
    }
}

fn check_pyramids(a_len: usize, b_len: usize, masks: usize, want_masks: usize) -> Result<()> {
    if a_len != b_len {
        return Err(Error::Contract(format!(
            "pyramid lengths differ: {a_len} vs {b_len}"
        )));
    }
    if masks != want_masks {
        return Err(Error::Contract(format!(
            "expected {want_masks} masks, got {masks}"
        )));
    }
    Ok(())
}

struct LayerExchange;

impl Exchange for LayerExchange {
    fn axis(&self) -> Axis {
        Axis::Layer
    }

    fn mask_lengths(&self, level_shapes: &[[usize; 3]]) -> Vec<usize> {
        vec![level_shapes.len()]
    }

    fn apply(
        &self,
        a: &[Tensor],
        b: &[Tensor],
        masks: &[ExchangeMask],
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        check_pyramids(a.len(), b.len(), masks.len(), 1)?;
        layer_exchange(a, b, &masks[0])
    }

    fn record(
        &self,
        g: &mut Graph,
        a: &[Var],
        b: &[Var],
        masks: &[ExchangeMask],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        check_pyramids(a.len(), b.len(), masks.len(), 1)?;
        let mask = &masks[0];
        if mask.len() != a.len() {
            return Err(Error::Contract(format!(
                "layer mask length {} for {} levels",
                mask.len(),
                a.len()
            )));
        }
        let mut out_a = Vec::with_capacity(a.len());
        let mut out_b = Vec::with_capacity(b.len());
        for (i, (&xa, &xb)) in a.iter().zip(b).enumerate() {
            if g.shape(xa) != g.shape(xb) {
                return Err(Error::ShapeMismatch {
                    op: "layer_exchange",
                    lhs: g.shape(xa).to_vec(),
                    rhs: g.shape(xb).to_vec(),
                });
            }
            let (na, nb) = if mask.epsilon[i] { (xb, xa) } else { (xa, xb) };
            out_a.push(na);
            out_b.push(nb);
        }
        Ok((out_a, out_b))
    }
}

struct MaskedExchange(Axis);

impl Exchange for MaskedExchange {
    fn axis(&self) -> Axis {
        self.0
    }

    fn mask_lengths(&self, level_shapes: &[[usize; 3]]) -> Vec<usize> {
        level_shapes
            .iter()
            .map(|&[c, h, w]| match self.0 {
                Axis::Channel => c,
                Axis::SpatialCol => w,
                Axis::SpatialRow => h,
                Axis::Layer => unreachable!("layer axis handled by LayerExchange"),
            })
            .collect()
    }

    fn apply(
        &self,
        a: &[Tensor],
        b: &[Tensor],
        masks: &[ExchangeMask],
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        check_pyramids(a.len(), b.len(), masks.len(), a.len())?;
        let mut out_a = Vec::with_capacity(a.len());
        let mut out_b = Vec::with_capacity(b.len());
        for ((xa, xb), mask) in a.iter().zip(b).zip(masks) {
            let (na, nb) = match self.0 {
                Axis::Channel => channel_exchange(xa, xb, mask)?,
                _ => spatial_exchange(xa, xb, mask)?,
            };
            out_a.push(na);
            out_b.push(nb);
        }
        Ok((out_a, out_b))
    }

    fn record(
        &self,
        g: &mut Graph,
        a: &[Var],
        b: &[Var],
        masks: &[ExchangeMask],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        check_pyramids(a.len(), b.len(), masks.len(), a.len())?;
        let mut out_a = Vec::with_capacity(a.len());
        let mut out_b = Vec::with_capacity(b.len());
        for ((&xa, &xb), mask) in a.iter().zip(b).zip(masks) {
            let shape = g.shape(xa).to_vec();
            if mask.axis != self.0 {
                return Err(Error::Contract(format!(
                    "{} exchange given a {} mask",
                    self.0, mask.axis
                )));
            }
            let sel = std::rc::Rc::new(element_mask(mask, &shape)?);
            out_a.push(g.mix(xa, xb, sel.clone())?);
            out_b.push(g.mix(xb, xa, sel)?);
        }
        Ok((out_a, out_b))
    }
}

/// Name-indexed set of exchange strategies.
pub struct ExchangeRegistry {
    entries: Vec<Box<dyn Exchange>>,
}

impl ExchangeRegistry {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Layer, channel, spatial-column and spatial-row exchange.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(LayerExchange)).expect("unique");
        for axis in [Axis::Channel, Axis::SpatialCol, Axis::SpatialRow] {
            r.register(Box::new(MaskedExchange(axis))).expect("unique");
        }
        r
    }

    pub fn register(&mut self, strategy: Box<dyn Exchange>) -> Result<()> {
        if self.get(strategy.name()).is_some() {
            return Err(Error::Config(format!(
                "exchange {} already registered",
                strategy.name()
            )));
        }
        self.entries.push(strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&dyn Exchange> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .map(|e| e.as_ref())
    }

    pub fn for_axis(&self, axis: Axis) -> &dyn Exchange {
        self.get(axis.name())
            .expect("builtin registry covers every axis")
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }
}

/// Process-wide builtin registry.
pub fn registry() -> &'static ExchangeRegistry {
    static REGISTRY: std::sync::OnceLock<ExchangeRegistry> = std::sync::OnceLock::new();
    REGISTRY.get_or_init(ExchangeRegistry::builtin)
}
