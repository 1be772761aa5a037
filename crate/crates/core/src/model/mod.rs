//! Bi-temporal change-detection models on a shared [`Backbone`].
//!
//! With head `"none"` the model is a Siamese encoder-exchange-decoder: both
//! images go through the same encoder, the pyramids exchange features, and
//! each branch runs the same neck and decoder to produce its own logits.
//! Any other head names a [`Fusion`] strategy that merges the pyramids into a
//! single stream before one neck and one decoder.

mod backbone;
mod checkpoint;
mod fusion;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exchange::{registry, Axis, Exchange, ExchangeMask, ExchangeSpec, Phase};
use crate::tensor::{sigmoid, Graph, OpCost, ParamSet, Tensor, Var};

pub use backbone::{Backbone, SegModel};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use fusion::{fusion_registry, ConvShape, Fusion, FusionRegistry};

/// Head name of the exchange (dual-decoder) architecture.
pub const HEAD_SEED: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub backbone: Backbone,
    /// `"none"` for exchange, otherwise a registered fusion name.
    pub head: String,
    /// Exchange between branches. `None` on a Siamese head keeps the branches
    /// independent (the no-exchange ablation).
    pub exchange: Option<ExchangeSpec>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::seed(ExchangeSpec::deterministic(Axis::Layer, 2, 0))
    }
}

impl ArchConfig {
    pub fn seed(spec: ExchangeSpec) -> Self {
        Self {
            backbone: Backbone::default(),
            head: HEAD_SEED.into(),
            exchange: Some(spec),
        }
    }

    pub fn fusion(name: &str) -> Self {
        Self {
            backbone: Backbone::default(),
            head: name.into(),
            exchange: None,
        }
    }

    pub fn is_siamese(&self) -> bool {
        self.head == HEAD_SEED
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.is_siamese() {
            if let Some(spec) = &self.exchange {
                spec.validate()?;
            }
        } else {
            if fusion_registry().get(&self.head).is_none() {
                return Err(Error::Config(format!(
                    "unknown head {:?}; expected none or one of {:?}",
                    self.head,
                    fusion_registry().names()
                )));
            }
            if self.exchange.is_some() {
                return Err(Error::Config(format!(
                    "fusion head {} cannot also use an exchange",
                    self.head
                )));
            }
        }
        Ok(())
    }

    fn fusion_strategy(&self) -> Option<&'static dyn Fusion> {
        (!self.is_siamese()).then(|| fusion_registry().get(&self.head).expect("validated head"))
    }

    fn exchange_strategy(&self) -> Option<&'static dyn Exchange> {
        self.exchange.map(|s| registry().for_axis(s.axis))
    }

    pub fn convs(&self) -> Vec<ConvShape> {
        let mut all = self.backbone.convs();
        if let Some(f) = self.fusion_strategy() {
            for (l, &c) in self.backbone.channels.iter().enumerate() {
                all.extend(f.convs(l, c));
            }
        }
        all
    }

    /// Short label such as `SEED(LE)`, `SEED(RCE)` or `fusion(concat)`.
    pub fn label(&self) -> String {
        match (self.fusion_strategy(), &self.exchange) {
            (Some(f), _) => format!("fusion({})", f.name()),
            (None, None) => "siamese(no-exchange)".into(),
            (None, Some(spec)) => {
                let r = if spec.policy == crate::exchange::Policy::Bernoulli { "R" } else { "" };
                format!("SEED({r}{})", spec.axis.tag())
            }
        }
    }
}

/// Turns a segmentation backbone into a layer-exchange change detector. The
/// blocks are reused unchanged and the exchange adds no parameters.
pub fn seg2cd(seg: &Backbone) -> ArchConfig {
    ArchConfig {
        backbone: seg.clone(),
        head: HEAD_SEED.into(),
        exchange: Some(ExchangeSpec::deterministic(Axis::Layer, 2, 0)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    Siamese,
    BranchA,
    BranchB,
}

impl InferMode {
    pub const ALL: [InferMode; 3] = [InferMode::Siamese, InferMode::BranchA, InferMode::BranchB];

    pub fn name(self) -> &'static str {
        match self {
            InferMode::Siamese => "siamese",
            InferMode::BranchA => "branch_a",
            InferMode::BranchB => "branch_b",
        }
    }
}

impl fmt::Display for InferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "siamese" => Ok(InferMode::Siamese),
            "branch_a" | "a" => Ok(InferMode::BranchA),
            "branch_b" | "b" => Ok(InferMode::BranchB),
            other => Err(Error::Usage(format!("unknown inference mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Logits {
    Pair { a: Var, b: Var },
    BranchA(Var),
    BranchB(Var),
    Fused(Var),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Logits,
    /// Encoder outputs before any exchange.
    pub pyramid_a: Vec<Var>,
    pub pyramid_b: Vec<Var>,
    /// Pyramids after exchange (Siamese) or the fused pyramid (fusion heads).
    pub mixed_a: Vec<Var>,
    pub mixed_b: Vec<Var>,
    pub masks: Vec<ExchangeMask>,
}

/// How a forward pass draws masks and which branches it decodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    pub iteration: u64,
    pub phase: Phase,
    pub mode: InferMode,
}

impl Pass {
    pub fn train(iteration: u64) -> Self {
        Self {
            iteration,
            phase: Phase::Train,
            mode: InferMode::Siamese,
        }
    }

    pub fn eval(mode: InferMode) -> Self {
        Self {
            iteration: 0,
            phase: Phase::Eval,
            mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Account {
    pub params: u64,
    /// Both branches.
    pub encoder_macs: u64,
    pub exchange: OpCost,
    pub fusion_macs: u64,
    pub neck_macs: u64,
    pub decoder_macs: u64,
    /// Full forward in the default mode (both decoders for Siamese heads).
    pub forward_macs: u64,
    /// Forward with one decoded branch; Siamese heads only.
    pub single_decoder_macs: Option<u64>,
}

/// Static parameter and MAC count; no data is run.
pub fn account(cfg: &ArchConfig) -> Result<Account> {
    cfg.validate()?;
    let bb = &cfg.backbone;
    let shapes = bb.level_shapes();
    let params: u64 = cfg
        .convs()
        .iter()
        .map(|(_, cin, cout, k)| (cout * cin * k * k + cout) as u64)
        .sum();
    let encoder = bb.encoder_cost().multiply_accumulates * 2;
    let neck = bb.neck_cost().multiply_accumulates;
    let decoder = bb.decoder_cost().multiply_accumulates;
    let exchange = cfg
        .exchange_strategy()
        .map_or(OpCost::ZERO, |e| e.cost(&shapes));
    Ok(match cfg.fusion_strategy() {
        Some(f) => {
            let fusion: u64 = shapes
                .iter()
                .enumerate()
                .map(|(l, &s)| f.cost(l, s).multiply_accumulates)
                .sum();
            Account {
                params,
                encoder_macs: encoder,
                exchange,
                fusion_macs: fusion,
                neck_macs: neck,
                decoder_macs: decoder,
                forward_macs: encoder + fusion + neck + decoder,
                single_decoder_macs: None,
            }
        }
        None => {
            let shared = encoder + exchange.multiply_accumulates;
            Account {
                params,
                encoder_macs: encoder,
                exchange,
                fusion_macs: 0,
                neck_macs: 2 * neck,
                decoder_macs: 2 * decoder,
                forward_macs: shared + 2 * (neck + decoder),
                single_decoder_macs: Some(shared + neck + decoder),
            }
        }
    })
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ArchConfig,
    params: ParamSet,
}

impl Model {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Backbone::init_params(&config.convs(), seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against the config.
    pub fn from_parts(config: ArchConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let convs = config.convs();
        if params.len() != 2 * convs.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                2 * convs.len(),
                params.len()
            )));
        }
        for (name, cin, cout, k) in &convs {
            for (suffix, shape) in [("w", vec![*cout, *cin, *k, *k]), ("b", vec![*cout])] {
                let key = format!("{name}.{suffix}");
                match params.get(&key) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::ShapeMismatch {
                            op: "load parameter",
                            lhs: t.shape().to_vec(),
                            rhs: shape,
                        })
                    }
                    None => return Err(Error::Contract(format!("missing parameter {key}"))),
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> u64 {
        self.params.count()
    }

    pub fn encode(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        self.config.backbone.encode(g, &self.params, image)
    }

    pub fn neck(&self, g: &mut Graph, pyramid: &[Var]) -> Result<Vec<Var>> {
        self.config.backbone.neck(g, &self.params, pyramid)
    }

    pub fn decode(&self, g: &mut Graph, pyramid: &[Var]) -> Result<Var> {
        self.config.backbone.decode(g, &self.params, pyramid)
    }

    /// Exchange masks for one forward pass; empty without an exchange.
    pub fn plan_masks(&self, iteration: u64, phase: Phase) -> Vec<ExchangeMask> {
        match (self.config.exchange, self.config.exchange_strategy()) {
            (Some(spec), Some(ex)) => {
                ex.plan(&spec, &self.config.backbone.level_shapes(), iteration, phase)
            }
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, g: &mut Graph, a: &Tensor, b: &Tensor, pass: Pass) -> Result<ForwardOutput> {
        let masks = self.plan_masks(pass.iteration, pass.phase);
        let (va, vb) = (g.input(a), g.input(b));
        self.forward_vars(g, va, vb, &masks, pass.mode)
    }

    /// Forward with explicit masks. Siamese heads treat an empty mask list as
    /// no exchange.
    pub fn forward_vars(
        &self,
        g: &mut Graph,
        a: Var,
        b: Var,
        masks: &[ExchangeMask],
        mode: InferMode,
    ) -> Result<ForwardOutput> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: g.shape(a).to_vec(),
                rhs: g.shape(b).to_vec(),
            });
        }
        let pyramid_a = self.encode(g, a)?;
        let pyramid_b = self.encode(g, b)?;
        if let Some(fusion) = self.config.fusion_strategy() {
            if mode != InferMode::Siamese {
                return Err(Error::Usage(format!(
                    "{mode} inference needs two decoders; head {} has one",
                    fusion.name()
                )));
            }
            let fused = pyramid_a
                .iter()
                .zip(&pyramid_b)
                .enumerate()
                .map(|(l, (&xa, &xb))| fusion.record(g, &self.params, l, xa, xb))
                .collect::<Result<Vec<_>>>()?;
            let neck = self.neck(g, &fused)?;
            let z = self.decode(g, &neck)?;
            return Ok(ForwardOutput {
                logits: Logits::Fused(z),
                pyramid_a,
                pyramid_b,
                mixed_a: fused.clone(),
                mixed_b: fused,
                masks: Vec::new(),
            });
        }
        let (mixed_a, mixed_b) = match self.config.exchange_strategy() {
            Some(ex) if !masks.is_empty() => ex.record(g, &pyramid_a, &pyramid_b, masks)?,
            _ => (pyramid_a.clone(), pyramid_b.clone()),
        };
        let branch = |g: &mut Graph, pyr: &[Var]| -> Result<Var> {
            let n = self.neck(g, pyr)?;
            self.decode(g, &n)
        };
        let logits = match mode {
            InferMode::Siamese => {
                let za = branch(g, &mixed_a)?;
                let zb = branch(g, &mixed_b)?;
                Logits::Pair { a: za, b: zb }
            }
            InferMode::BranchA => Logits::BranchA(branch(g, &mixed_a)?),
            InferMode::BranchB => Logits::BranchB(branch(g, &mixed_b)?),
        };
        Ok(ForwardOutput {
            logits,
            pyramid_a,
            pyramid_b,
            mixed_a,
            mixed_b,
            masks: masks.to_vec(),
        })
    }

    /// Sum of per-branch mean BCE for pairs, plain mean BCE otherwise.
    pub fn loss(&self, g: &mut Graph, out: &ForwardOutput, mask: &Tensor) -> Result<Var> {
        match out.logits {
            Logits::Pair { a, b } => {
                let la = g.bce_with_logits(a, mask)?;
                let lb = g.bce_with_logits(b, mask)?;
                g.add(la, lb)
            }
            Logits::BranchA(z) | Logits::BranchB(z) | Logits::Fused(z) => g.bce_with_logits(z, mask),
        }
    }

    /// Change probabilities; pairs average logits before the sigmoid.
    pub fn probabilities(&self, g: &Graph, out: &ForwardOutput) -> Tensor {
        match out.logits {
            Logits::Pair { a, b } => {
                let mut t = g.tensor(a);
                for (v, &zb) in t.data_mut().iter_mut().zip(g.value(b)) {
                    *v = sigmoid(0.5 * (*v + zb));
                }
                t
            }
            Logits::BranchA(z) | Logits::BranchB(z) | Logits::Fused(z) => {
                let mut t = g.tensor(z);
                t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
                t
            }
        }
    }

    /// Binary change map with the `p >= threshold` convention, plus the MACs spent.
    pub fn infer(&self, a: &Tensor, b: &Tensor, mode: InferMode, threshold: f64) -> Result<(Tensor, u64)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, a, b, Pass::eval(mode))?;
        let mut p = self.probabilities(&g, &out);
        p.data_mut()
            .iter_mut()
            .for_each(|v| *v = f64::from(u8::from(*v >= threshold)));
        Ok((p, g.macs()))
    }
}
