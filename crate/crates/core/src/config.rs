//! Run configuration: namespaced `key: value` lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{MccError, Result};
use crate::kv;

/// Which backbone stages feed the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageSelection {
    /// The deepest `n` stages.
    Last(usize),
    /// Explicit indices, shallow to deep.
    Indices(Vec<usize>),
}

impl StageSelection {
    pub fn parse(value: &str) -> Result<Self> {
        let v = value.trim();
        if let Some(n) = v.strip_prefix("last:") {
            let n: usize = kv::parse_num("model.stages", n.trim())?;
            if n == 0 {
                return Err(MccError::config("model.stages needs at least one stage"));
            }
            return Ok(StageSelection::Last(n));
        }
        let idx: Vec<usize> = kv::parse_list("model.stages", v)?;
        if idx.is_empty() {
            return Err(MccError::config("model.stages needs at least one stage"));
        }
        if idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MccError::config("model.stages indices must be strictly increasing"));
        }
        Ok(StageSelection::Indices(idx))
    }

    /// Resolves against a backbone with `available` stages.
    pub fn resolve(&self, available: usize) -> Result<Vec<usize>> {
        match self {
            StageSelection::Last(n) if *n <= available => Ok((available - n..available).collect()),
            StageSelection::Indices(v) if v.iter().all(|&i| i < available) => Ok(v.clone()),
            _ => Err(MccError::config(format!(
                "stages `{self}` requested but the backbone has {available}"
            ))),
        }
    }
}

impl std::fmt::Display for StageSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageSelection::Last(n) => write!(f, "last:{n}"),
            StageSelection::Indices(v) => {
                let s: Vec<String> = v.iter().map(|i| i.to_string()).collect();
                write!(f, "{}", s.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneMode {
    /// Dataset stages are used verbatim.
    Passthrough,
    /// Strided convolutions over the dataset's first stage.
    Conv,
}

impl BackboneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneMode::Passthrough => "passthrough",
            BackboneMode::Conv => "conv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub kmeans_iters: usize,
    pub kmeans_batch: usize,

    pub tau: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub mass_floor: f64,

    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub decoder_layers: usize,
    pub stages: StageSelection,
    pub share_branches: bool,
    pub use_reconstruction: bool,

    pub backbone_mode: BackboneMode,
    pub backbone_widths: Vec<usize>,
    pub backbone_downsample: Vec<usize>,

    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub pct_start: f64,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub seed: u64,
    pub threshold: f64,

    pub gamma_pos: f64,
    pub gamma_neg: f64,

    pub label_embeddings: Option<PathBuf>,
    pub label_dim: usize,

    /// Dataset root, for commands that take no `--data` flag.
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 256,
            kmeans_iters: 100,
            kmeans_batch: 1024,
            tau: 0.1,
            lambda: 0.99999,
            epsilon: crate::cpi::DEFAULT_EPSILON,
            mass_floor: crate::mcc::DEFAULT_MASS_FLOOR,
            d_model: 128,
            heads: 4,
            ffn_mult: 4,
            decoder_layers: 2,
            stages: StageSelection::Last(2),
            share_branches: false,
            use_reconstruction: true,
            backbone_mode: BackboneMode::Passthrough,
            backbone_widths: vec![32, 64],
            backbone_downsample: vec![2, 2],
            epochs: 20,
            batch_size: 32,
            max_lr: 1e-4,
            weight_decay: 1e-2,
            pct_start: 0.3,
            ema_decay: 0.9997,
            ema_warmup: false,
            seed: 0,
            threshold: crate::metrics::DEFAULT_THRESHOLD,
            gamma_pos: 0.0,
            gamma_neg: 2.0,
            label_embeddings: None,
            label_dim: 64,
            data_dir: None,
        }
    }
}

impl RunConfig {
    /// Paper-scale prototype count.
    pub const PAPER_K: usize = 2048;

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MccError::io(path, e))?;
        let mut cfg = Self::from_text(&text, path)?;
        // Relative paths are taken from the config's directory.
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.label_embeddings, &mut cfg.data_dir].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let entries = kv::parse(text, origin).map_err(|e| MccError::Config(e.to_string()))?;
        for e in entries {
            cfg.set(&e.key, &e.value).map_err(|err| match err {
                MccError::Config(m) => MccError::Config(format!("{}:{}: {m}", origin.display(), e.line)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Short sweep aliases `K`, `lambda`, `tau` and `stages`
    /// are accepted alongside the namespaced names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "cpi.k" | "K" | "k" => self.k = kv::parse_num(key, v)?,
            "cpi.kmeans_iters" => self.kmeans_iters = kv::parse_num(key, v)?,
            "cpi.kmeans_batch" => self.kmeans_batch = kv::parse_num(key, v)?,
            "mcc.tau" | "tau" => self.tau = kv::parse_num(key, v)?,
            "mcc.lambda" | "lambda" => self.lambda = kv::parse_num(key, v)?,
            "mcc.epsilon" => self.epsilon = kv::parse_num(key, v)?,
            "mcc.mass_floor" => self.mass_floor = kv::parse_num(key, v)?,
            "model.d_model" => self.d_model = kv::parse_num(key, v)?,
            "model.heads" => self.heads = kv::parse_num(key, v)?,
            "model.ffn_mult" => self.ffn_mult = kv::parse_num(key, v)?,
            "model.decoder_layers" => self.decoder_layers = kv::parse_num(key, v)?,
            "model.stages" | "stages" => self.stages = StageSelection::parse(v)?,
            "model.share_branches" => self.share_branches = kv::parse_bool(key, v)?,
            "model.use_reconstruction" => self.use_reconstruction = kv::parse_bool(key, v)?,
            "backbone.mode" => {
                self.backbone_mode = match v {
                    "passthrough" => BackboneMode::Passthrough,
                    "conv" => BackboneMode::Conv,
                    other => return Err(MccError::config(format!("unknown backbone.mode `{other}`"))),
                }
            }
            "backbone.widths" => self.backbone_widths = kv::parse_list(key, v)?,
            "backbone.downsample" => self.backbone_downsample = kv::parse_list(key, v)?,
            "train.epochs" => self.epochs = kv::parse_num(key, v)?,
            "train.batch_size" => self.batch_size = kv::parse_num(key, v)?,
            "train.max_lr" => self.max_lr = kv::parse_num(key, v)?,
            "train.weight_decay" => self.weight_decay = kv::parse_num(key, v)?,
            "train.pct_start" => self.pct_start = kv::parse_num(key, v)?,
            "train.ema_decay" => self.ema_decay = kv::parse_num(key, v)?,
            "train.ema_warmup" => self.ema_warmup = kv::parse_bool(key, v)?,
            "train.seed" => self.seed = kv::parse_num(key, v)?,
            "train.threshold" => self.threshold = kv::parse_num(key, v)?,
            "loss.gamma_pos" => self.gamma_pos = kv::parse_num(key, v)?,
            "loss.gamma_neg" => self.gamma_neg = kv::parse_num(key, v)?,
            "labels.embeddings" => {
                self.label_embeddings = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "labels.dim" => self.label_dim = kv::parse_num(key, v)?,
            "data.dir" => self.data_dir = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            other => return Err(MccError::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MccError::Config(m));
        if self.k == 0 {
            return fail("cpi.k must be positive".into());
        }
        if self.kmeans_iters == 0 || self.kmeans_batch == 0 {
            return fail("cpi.kmeans_iters and cpi.kmeans_batch must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("mcc.tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("mcc.lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.epsilon > 0.0) || !(self.mass_floor >= 0.0) {
            return fail("mcc.epsilon must be positive and mcc.mass_floor non-negative".into());
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "model.d_model ({}) must be a positive multiple of model.heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.ffn_mult == 0 || self.decoder_layers == 0 {
            return fail("model.ffn_mult and model.decoder_layers must be positive".into());
        }
        if self.backbone_mode == BackboneMode::Conv {
            if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
                return fail("backbone.widths must be non-empty and positive".into());
            }
            if self.backbone_downsample.len() != self.backbone_widths.len()
                || self.backbone_downsample.contains(&0)
            {
                return fail("backbone.downsample needs one positive factor per width".into());
            }
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be positive".into());
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return fail("train.max_lr must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail("train.weight_decay must be non-negative".into());
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return fail("train.pct_start must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail("train.ema_decay must lie in [0, 1]".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("train.threshold must lie in (0, 1)".into());
        }
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return fail("loss focusing parameters must be non-negative".into());
        }
        if self.label_dim == 0 {
            return fail("labels.dim must be positive".into());
        }
        Ok(())
    }

    /// Every key, in a form [`RunConfig::from_text`] reads back exactly.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        put("cpi.k", self.k.to_string());
        put("cpi.kmeans_iters", self.kmeans_iters.to_string());
        put("cpi.kmeans_batch", self.kmeans_batch.to_string());
        put("mcc.tau", self.tau.to_string());
        put("mcc.lambda", self.lambda.to_string());
        put("mcc.epsilon", self.epsilon.to_string());
        put("mcc.mass_floor", self.mass_floor.to_string());
        put("model.d_model", self.d_model.to_string());
        put("model.heads", self.heads.to_string());
        put("model.ffn_mult", self.ffn_mult.to_string());
        put("model.decoder_layers", self.decoder_layers.to_string());
        put("model.stages", self.stages.to_string());
        put("model.share_branches", self.share_branches.to_string());
        put("model.use_reconstruction", self.use_reconstruction.to_string());
        put("backbone.mode", self.backbone_mode.as_str().to_string());
        put("backbone.widths", list(&self.backbone_widths));
        put("backbone.downsample", list(&self.backbone_downsample));
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.max_lr", self.max_lr.to_string());
        put("train.weight_decay", self.weight_decay.to_string());
        put("train.pct_start", self.pct_start.to_string());
        put("train.ema_decay", self.ema_decay.to_string());
        put("train.ema_warmup", self.ema_warmup.to_string());
        put("train.seed", self.seed.to_string());
        put("train.threshold", self.threshold.to_string());
        put("loss.gamma_pos", self.gamma_pos.to_string());
        put("loss.gamma_neg", self.gamma_neg.to_string());
        put(
            "labels.embeddings",
            self.label_embeddings
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
        );
        put("labels.dim", self.label_dim.to_string());
        put(
            "data.dir",
            self.data_dir.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string()),
        );
        s
    }
}
