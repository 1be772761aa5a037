//! Experiment configuration files: UTF-8 lines of `key = value` grouped under
//! `[section]` headers. `#` and `;` start comment lines. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::exchange::{Axis, ExchangeSpec, Policy};
use crate::model::{ArchConfig, Backbone, InferMode, HEAD_SEED};
use crate::tensor::AdamWConfig;

/// Parsed sections; keys outside any section live under `""`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ini {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header", no + 1))
                })?;
                section = name.trim().to_string();
                ini.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {line:?}", no + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            let entries = ini.sections.entry(section.clone()).or_default();
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key} in [{section}]",
                    no + 1
                )));
            }
        }
        Ok(ini)
    }

    /// Sections and keys in sorted order, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            if !name.is_empty() {
                let _ = writeln!(out, "[{name}]");
            }
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }
}

/// Reads typed values out of one section, remembering which keys were used.
struct Reader<'a> {
    name: &'a str,
    entries: BTreeMap<String, String>,
}

impl<'a> Reader<'a> {
    fn new(ini: &Ini, name: &'a str) -> Self {
        Self {
            name,
            entries: ini.sections.get(name).cloned().unwrap_or_default(),
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::Config(format!("[{}] {key}: cannot parse {v:?}", self.name))
            }),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| {
                        Error::Config(format!("[{}] {key}: cannot parse {s:?}", self.name))
                    })
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("[{}] unknown key {k}", self.name))),
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Paired flips and rotations plus per-image photometric jitter on training samples.
    pub augment: bool,
    pub eval_modes: Vec<InferMode>,
    /// Right shift applied to image B in every split.
    pub shift_px: usize,
    pub data: DatasetConfig,
    pub arch: ArchConfig,
    pub optim: AdamWConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "seed_le".into(),
            seed: 0,
            epochs: 30,
            batch_size: 16,
            augment: false,
            eval_modes: vec![InferMode::Siamese],
            shift_px: 0,
            data: DatasetConfig::default(),
            arch: ArchConfig::default(),
            optim: AdamWConfig::default(),
        }
    }
}

const SECTIONS: [&str; 6] = ["experiment", "data", "model", "exchange", "optim", ""];

impl ExperimentConfig {
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        if let Some(extra) = ini.sections.keys().find(|s| !SECTIONS.contains(&s.as_str())) {
            return Err(Error::Config(format!("unknown section [{extra}]")));
        }
        if ini.sections.get("").is_some_and(|s| !s.is_empty()) {
            return Err(Error::Config("keys must appear under a section header".into()));
        }
        let d = ExperimentConfig::default();

        let mut r = Reader::new(ini, "experiment");
        let name = r.get("name", d.name)?;
        let seed = r.get("seed", d.seed)?;
        let epochs = r.get("epochs", d.epochs)?;
        let batch_size = r.get("batch_size", d.batch_size)?;
        let augment = r.get("augment", d.augment)?;
        let eval_modes = r.list("eval_modes", d.eval_modes)?;
        let shift_px = r.get("shift_px", d.shift_px)?;
        r.finish()?;

        let dd = d.data;
        let mut r = Reader::new(ini, "data");
        let shape_count = r.list("shape_count", vec![dd.shape_count.0, dd.shape_count.1])?;
        let data = DatasetConfig {
            n_train: r.get("n_train", dd.n_train)?,
            n_val: r.get("n_val", dd.n_val)?,
            n_test: r.get("n_test", dd.n_test)?,
            height: r.get("height", dd.height)?,
            width: r.get("width", dd.width)?,
            shape_count: match shape_count.as_slice() {
                [lo, hi] => (*lo, *hi),
                _ => return Err(Error::Config("[data] shape_count needs two values".into())),
            },
            noise_level: r.get("noise_level", dd.noise_level)?,
            p_disappear: r.get("p_disappear", dd.p_disappear)?,
            max_appear: r.get("max_appear", dd.max_appear)?,
            seed: r.get("seed", dd.seed)?,
        };
        r.finish()?;

        let db = Backbone::default();
        let mut r = Reader::new(ini, "model");
        let backbone = Backbone {
            height: data.height,
            width: data.width,
            in_channels: r.get("in_channels", db.in_channels)?,
            levels: r.get("levels", db.levels)?,
            channels: r.list("channels", db.channels)?,
            neck_channels: r.get("neck_channels", db.neck_channels)?,
            blocks: r.get("blocks", db.blocks)?,
        };
        let head: String = r.get("head", HEAD_SEED.to_string())?;
        r.finish()?;

        let mut r = Reader::new(ini, "exchange");
        let axis: String = r.get("axis", "layer".to_string())?;
        let policy: Policy = r.get("policy", Policy::Deterministic)?;
        let step = r.get("step", 2usize)?;
        let offset = r.get("offset", 0usize)?;
        let p = r.get("p", 0.5f64)?;
        let ex_seed = r.get("seed", seed)?;
        r.finish()?;
        let exchange = if head != HEAD_SEED || axis == "none" {
            None
        } else {
            Some(ExchangeSpec {
                axis: axis.parse::<Axis>()?,
                policy,
                step,
                offset,
                p,
                seed: ex_seed,
            })
        };

        let od = AdamWConfig::default();
        let mut r = Reader::new(ini, "optim");
        let optim = AdamWConfig {
            lr: r.get("lr", od.lr)?,
            beta1: r.get("beta1", od.beta1)?,
            beta2: r.get("beta2", od.beta2)?,
            eps: r.get("eps", od.eps)?,
            weight_decay: r.get("weight_decay", od.weight_decay)?,
        };
        r.finish()?;

        let cfg = Self {
            name,
            seed,
            epochs,
            batch_size,
            augment,
            eval_modes,
            shift_px,
            data,
            arch: ArchConfig {
                backbone,
                head,
                exchange,
            },
            optim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_ini(&Ini::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.arch.validate()?;
        self.optim.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.eval_modes.is_empty() {
            return Err(Error::Config("at least one eval mode is required".into()));
        }
        if !self.arch.is_siamese() && self.eval_modes.iter().any(|&m| m != InferMode::Siamese) {
            return Err(Error::Config(format!(
                "head {} only supports siamese evaluation",
                self.arch.head
            )));
        }
        if self.shift_px >= self.data.width {
            return Err(Error::Config(format!(
                "shift of {}px must be below width {}",
                self.shift_px, self.data.width
            )));
        }
        Ok(())
    }

    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::default();
        ini.set("experiment", "name", &self.name);
        ini.set("experiment", "seed", self.seed);
        ini.set("experiment", "epochs", self.epochs);
        ini.set("experiment", "batch_size", self.batch_size);
        ini.set("experiment", "augment", self.augment);
        ini.set("experiment", "eval_modes", join(&self.eval_modes));
        ini.set("experiment", "shift_px", self.shift_px);
        let d = &self.data;
        ini.set("data", "n_train", d.n_train);
        ini.set("data", "n_val", d.n_val);
        ini.set("data", "n_test", d.n_test);
        ini.set("data", "height", d.height);
        ini.set("data", "width", d.width);
        ini.set("data", "shape_count", join(&[d.shape_count.0, d.shape_count.1]));
        ini.set("data", "noise_level", d.noise_level);
        ini.set("data", "p_disappear", d.p_disappear);
        ini.set("data", "max_appear", d.max_appear);
        ini.set("data", "seed", d.seed);
        let b = &self.arch.backbone;
        ini.set("model", "in_channels", b.in_channels);
        ini.set("model", "levels", b.levels);
        ini.set("model", "channels", join(&b.channels));
        ini.set("model", "neck_channels", b.neck_channels);
        ini.set("model", "blocks", b.blocks);
        ini.set("model", "head", &self.arch.head);
        if self.arch.is_siamese() {
            match &self.arch.exchange {
                None => ini.set("exchange", "axis", "none"),
                Some(s) => {
                    ini.set("exchange", "axis", s.axis.name());
                    ini.set("exchange", "policy", s.policy);
                    ini.set("exchange", "step", s.step);
                    ini.set("exchange", "offset", s.offset);
                    ini.set("exchange", "p", s.p);
                    ini.set("exchange", "seed", s.seed);
                }
            }
        }
        let o = &self.optim;
        ini.set("optim", "lr", o.lr);
        ini.set("optim", "beta1", o.beta1);
        ini.set("optim", "beta2", o.beta2);
        ini.set("optim", "eps", o.eps);
        ini.set("optim", "weight_decay", o.weight_decay);
        ini
    }

    /// Canonical text of the fully resolved config.
    pub fn canonical(&self) -> String {
        self.to_ini().render()
    }

    /// First 16 hex digits of SHA-256 over the canonical text; independent of
    /// key order and of whether defaults were written out. The experiment name
    /// is a label and does not take part.
    pub fn hash(&self) -> String {
        let mut ini = self.to_ini();
        if let Some(exp) = ini.sections.get_mut("experiment") {
            exp.remove("name");
        }
        let digest = Sha256::digest(ini.render().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Sets the run seed everywhere it feeds randomness except the dataset.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let Some(spec) = self.arch.exchange.as_mut() {
            spec.seed = seed;
        }
        self
    }
}
