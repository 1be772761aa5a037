//! Single-stream fusion heads: the two temporal pyramids are merged level by
//! level before one neck and one decoder.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::{Graph, OpCost, ParamSet, Var};

/// A named convolution owned by a strategy: `(name, in, out, kernel)`.
pub type ConvShape = (String, usize, usize, usize);

pub trait Fusion: Send + Sync {
    fn name(&self) -> &'static str;

    /// Convolutions this head adds at `level`, whose features have `c` channels.
    fn convs(&self, level: usize, c: usize) -> Vec<ConvShape>;

    fn record(&self, g: &mut Graph, params: &ParamSet, level: usize, a: Var, b: Var) -> Result<Var>;

    /// Forward cost at one level of shape `[c, h, w]`.
    fn cost(&self, level: usize, shape: [usize; 3]) -> OpCost {
        let [c, h, w] = shape;
        self.convs(level, c)
            .into_iter()
            .fold(OpCost::ZERO, |acc, (_, cin, cout, k)| {
                acc + OpCost::conv2d(cin, cout, k, k, h, w)
            })
    }
}

/// Channel concatenation followed by a 1x1 projection back to `c` channels.
struct ConcatFusion;

impl Fusion for ConcatFusion {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn convs(&self, level: usize, c: usize) -> Vec<ConvShape> {
        vec![(format!("fuse.{level}.reduce"), 2 * c, c, 1)]
    }

    fn record(&self, g: &mut Graph, params: &ParamSet, level: usize, a: Var, b: Var) -> Result<Var> {
        let cat = g.concat_channels(a, b)?;
        let name = format!("fuse.{level}.reduce");
        let w = g.param(params, &format!("{name}.w"))?;
        let bias = g.param(params, &format!("{name}.b"))?;
        g.conv2d(cat, w, bias, 1, 0)
    }
}

struct AddFusion;

impl Fusion for AddFusion {
    fn name(&self) -> &'static str {
        "add"
    }

    fn convs(&self, _level: usize, _c: usize) -> Vec<ConvShape> {
        Vec::new()
    }

    fn record(&self, g: &mut Graph, _params: &ParamSet, _level: usize, a: Var, b: Var) -> Result<Var> {
        g.add(a, b)
    }
}

struct SubtractFusion;

impl Fusion for SubtractFusion {
    fn name(&self) -> &'static str {
        "subtract"
    }

    fn convs(&self, _level: usize, _c: usize) -> Vec<ConvShape> {
        Vec::new()
    }

    fn record(&self, g: &mut Graph, _params: &ParamSet, _level: usize, a: Var, b: Var) -> Result<Var> {
        g.sub(a, b)
    }
}

pub struct FusionRegistry {
    entries: Vec<Box<dyn Fusion>>,
}

impl FusionRegistry {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(ConcatFusion)).expect("unique");
        r.register(Box::new(AddFusion)).expect("unique");
        r.register(Box::new(SubtractFusion)).expect("unique");
        r
    }

    pub fn register(&mut self, strategy: Box<dyn Fusion>) -> Result<()> {
        if self.get(strategy.name()).is_some() {
            return Err(Error::Config(format!(
                "fusion {} already registered",
                strategy.name()
            )));
        }
        self.entries.push(strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&dyn Fusion> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .map(|e| e.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }
}

pub fn fusion_registry() -> &'static FusionRegistry {
    static REGISTRY: OnceLock<FusionRegistry> = OnceLock::new();
    REGISTRY.get_or_init(FusionRegistry::builtin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names() {
        assert_eq!(fusion_registry().names(), vec!["concat", "add", "subtract"]);
        assert!(fusion_registry().get("none").is_none());
        let mut r = FusionRegistry::builtin();
        assert!(matches!(r.register(Box::new(AddFusion)), Err(Error::Config(_))));
    }

    #[test]
    fn concat_reduction_halves_channels() {
        let convs = fusion_registry().get("concat").unwrap().convs(1, 16);
        assert_eq!(convs, vec![("fuse.1.reduce".to_string(), 32, 16, 1)]);
        let cost = fusion_registry().get("concat").unwrap().cost(1, [16, 8, 8]);
        assert_eq!(cost.multiply_accumulates, 32 * 16 * 64);
        assert_eq!(fusion_registry().get("add").unwrap().cost(0, [8, 4, 4]), OpCost::ZERO);
    }
}
