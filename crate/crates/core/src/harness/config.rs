//! Flat `key = value` run configuration with dotted keys.
//!
//! Every key has a default; a file only lists what it changes. Unknown keys,
//! repeated keys and unparsable values are hard errors. [`RunConfig::to_text`]
//! writes every key in a fixed order, and that text is what checkpoints hash.

use super::phantom::PhantomSpec;
use crate::backbone::PyramidSpec;
use crate::error::{Error, Result};
use crate::fsad::{FusionMode, SamplingSpec};
use crate::heads::HeadVariant;
use crate::matchloss::LossWeights;
use crate::model::ModelConfig;
use crate::msshead::HeadOptions;
use crate::optim::{OptimConfig, Schedule};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// seeds both the initial weights and the stream of training phantoms
    pub seed: u64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    /// checkpoint every this many epochs (the final epoch is always saved)
    pub save_every: usize,
    /// held-out phantoms for evaluation
    pub eval_cases: usize,
    /// seed of the first held-out phantom; case i uses `eval_seed + i`
    pub eval_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { seed: 0, epochs: 100, iters_per_epoch: 20, save_every: 10, eval_cases: 8, eval_seed: 1_000_000 }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainOptions,
    pub phantom: PhantomSpec,
}

impl Default for RunConfig {
    /// The desk-scale benchmark: 32³ phantoms with four foreground classes,
    /// decoupled head with four shared queries, full-scale fusion.
    fn default() -> Self {
        let phantom = PhantomSpec::default();
        let classes = phantom.classes;
        RunConfig {
            model: ModelConfig {
                pyramid: PyramidSpec { base_channels: 8, ..PyramidSpec::default() },
                fusion: FusionMode::FullScale,
                sampling: SamplingSpec::default(),
                head: HeadOptions {
                    variant: HeadVariant::Decoupled,
                    classes,
                    queries: classes,
                    width: 64,
                    heads: 4,
                    shared_queries: true,
                    masked_attention: true,
                },
                stages: 3,
            },
            loss: LossWeights::default(),
            optim: OptimConfig { schedule: Schedule { max_epoch: 100, ..Schedule::default() }, ..OptimConfig::default() },
            train: TrainOptions::default(),
            phantom,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!("line {}: key '{k}' given twice", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parse state that is resolved only once every key is known.
struct Pending {
    fsad_enabled: bool,
    fsad_mode: FusionMode,
    queries: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut pending = Pending { fsad_enabled: true, fsad_mode: FusionMode::FullScale, queries: None };
        for (k, v) in parse_pairs(text)? {
            c.set(&mut pending, &k, &v)?;
        }
        if !pending.fsad_enabled && pending.fsad_mode == FusionMode::Off {
            pending.fsad_mode = FusionMode::FullScale;
        }
        c.model.fusion = if pending.fsad_enabled { pending.fsad_mode } else { FusionMode::Off };
        c.model.head.classes = c.phantom.classes;
        let k = c.phantom.classes;
        c.model.head.queries = pending.queries.unwrap_or(if c.model.head.variant.is_decoupled() { k } else { k + 1 });
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, pending: &mut Pending, k: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match k {
            "model.stages" => m.pyramid.stages = parse(k, v)?,
            "model.base_channels" => m.pyramid.base_channels = parse(k, v)?,
            "model.channel_multiplier" => m.pyramid.multiplier = parse(k, v)?,
            "model.channel_cap" => m.pyramid.channel_cap = parse(k, v)?,
            "head.variant" => m.head.variant = v.parse()?,
            "head.queries" => pending.queries = if v == "auto" { None } else { Some(parse(k, v)?) },
            "head.width" => m.head.width = parse(k, v)?,
            "head.heads" => m.head.heads = parse(k, v)?,
            "head.shared_queries" => m.head.shared_queries = parse_bool(k, v)?,
            "head.masked_attention" => m.head.masked_attention = parse_bool(k, v)?,
            "fsad.enabled" => pending.fsad_enabled = parse_bool(k, v)?,
            "fsad.mode" => pending.fsad_mode = v.parse()?,
            "fsad.query_levels" => m.sampling.query_levels = parse(k, v)?,
            "fsad.points_k" => m.sampling.points = parse(k, v)?,
            "fsad.heads" => m.sampling.heads = parse(k, v)?,
            "fsad.width" => m.sampling.width = parse(k, v)?,
            "loss.lambda_class" => self.loss.class = parse(k, v)?,
            "loss.lambda_bce" => self.loss.bce = parse(k, v)?,
            "loss.lambda_dice" => self.loss.dice = parse(k, v)?,
            "loss.no_object_weight" => self.loss.no_object = parse(k, v)?,
            "loss.dice_eps" => self.loss.dice_eps = parse(k, v)?,
            "loss.stages" => m.stages = parse(k, v)?,
            "optim.init_lr" => self.optim.schedule.init_lr = parse(k, v)?,
            "optim.power" => self.optim.schedule.power = parse(k, v)?,
            "optim.max_epoch" => self.optim.schedule.max_epoch = parse(k, v)?,
            "optim.lambda_cnn" => self.optim.lambda_cnn = parse(k, v)?,
            "optim.lambda_trans" => self.optim.lambda_trans = parse(k, v)?,
            "optim.momentum" => self.optim.momentum = parse(k, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(k, v)?,
            "optim.nesterov" => self.optim.nesterov = parse_bool(k, v)?,
            "train.seed" => self.train.seed = parse(k, v)?,
            "train.epochs" => self.train.epochs = parse(k, v)?,
            "train.iters_per_epoch" => self.train.iters_per_epoch = parse(k, v)?,
            "train.save_every" => self.train.save_every = parse(k, v)?,
            "train.eval_cases" => self.train.eval_cases = parse(k, v)?,
            "train.eval_seed" => self.train.eval_seed = parse(k, v)?,
            _ if k.starts_with("phantom.") => self.phantom.set(k, v)?,
            _ => return Err(Error::Config(format!("unknown key '{k}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.phantom.validate()?;
        self.model.pyramid.extents(self.phantom.extent)?;
        let o = &self.optim;
        if !(o.schedule.init_lr >= 0.0 && o.lambda_cnn >= 0.0 && o.lambda_trans >= 0.0 && (0.0..1.0).contains(&o.momentum) && o.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if o.schedule.max_epoch == 0 || self.train.epochs > o.schedule.max_epoch {
            return Err(Error::Config(format!("train.epochs {} exceeds optim.max_epoch {}", self.train.epochs, o.schedule.max_epoch)));
        }
        if self.train.iters_per_epoch == 0 || self.train.save_every == 0 {
            return Err(Error::Config("train.iters_per_epoch and train.save_every must be positive".into()));
        }
        if self.model.pyramid.in_channels != 1 {
            return Err(Error::Config("phantoms have a single intensity channel".into()));
        }
        Ok(())
    }

    /// Every key in canonical order; parses back to an identical config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("model.stages", m.pyramid.stages.to_string());
        kv("model.base_channels", m.pyramid.base_channels.to_string());
        kv("model.channel_multiplier", m.pyramid.multiplier.to_string());
        kv("model.channel_cap", m.pyramid.channel_cap.to_string());
        kv("head.variant", m.head.variant.to_string());
        kv("head.queries", m.head.queries.to_string());
        kv("head.width", m.head.width.to_string());
        kv("head.heads", m.head.heads.to_string());
        kv("head.shared_queries", m.head.shared_queries.to_string());
        kv("head.masked_attention", m.head.masked_attention.to_string());
        kv("fsad.enabled", (m.fusion != FusionMode::Off).to_string());
        kv("fsad.mode", if m.fusion == FusionMode::Off { FusionMode::FullScale } else { m.fusion }.to_string());
        kv("fsad.query_levels", m.sampling.query_levels.to_string());
        kv("fsad.points_k", m.sampling.points.to_string());
        kv("fsad.heads", m.sampling.heads.to_string());
        kv("fsad.width", m.sampling.width.to_string());
        kv("loss.lambda_class", self.loss.class.to_string());
        kv("loss.lambda_bce", self.loss.bce.to_string());
        kv("loss.lambda_dice", self.loss.dice.to_string());
        kv("loss.no_object_weight", self.loss.no_object.to_string());
        kv("loss.dice_eps", self.loss.dice_eps.to_string());
        kv("loss.stages", m.stages.to_string());
        let o = &self.optim;
        kv("optim.init_lr", o.schedule.init_lr.to_string());
        kv("optim.power", o.schedule.power.to_string());
        kv("optim.max_epoch", o.schedule.max_epoch.to_string());
        kv("optim.lambda_cnn", o.lambda_cnn.to_string());
        kv("optim.lambda_trans", o.lambda_trans.to_string());
        kv("optim.momentum", o.momentum.to_string());
        kv("optim.weight_decay", o.weight_decay.to_string());
        kv("optim.nesterov", o.nesterov.to_string());
        let t = &self.train;
        kv("train.seed", t.seed.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.iters_per_epoch", t.iters_per_epoch.to_string());
        kv("train.save_every", t.save_every.to_string());
        kv("train.eval_cases", t.eval_cases.to_string());
        kv("train.eval_seed", t.eval_seed.to_string());
        for (k, v) in self.phantom.pairs() {
            kv(&k, v);
        }
        s
    }
}
