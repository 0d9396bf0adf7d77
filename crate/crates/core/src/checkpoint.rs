//! Complete training state and its on-disk form.
//!
//! File layout: the line `MCCL-CHECKPOINT 1`, `key: value` header lines,
//! one `tensor: NAME ROWS COLS` line per stored matrix, the line `end`,
//! then every tensor as raw little-endian `f64` in header order. Floats in
//! the header use Rust's shortest round-trip formatting, so a save/load
//! cycle is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::cpi::PrototypeBank;
use crate::data::{LabelMode, StageShape};
use crate::error::{MccError, Result};
use crate::model::{MccModel, ModelSignature};
use crate::optim::{AdamW, Ema};
use crate::params::ParamStore;
use crate::pki::LabelPrior;

const MAGIC: &str = "MCCL-CHECKPOINT 1";

/// Stream of the ChaCha generator used for batch shuffling.
pub const SHUFFLE_STREAM: u64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MccModel,
    pub bank: PrototypeBank,
    pub ema: Ema,
    pub optimizer: AdamW,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    /// Fresh state for `model` and `bank`.
    pub fn initial(model: MccModel, bank: PrototypeBank) -> Self {
        let cfg = &model.config;
        let ema = Ema::new(&model.store, cfg.ema_decay, cfg.ema_warmup);
        let optimizer = AdamW::new(&model.store, cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Checkpoint {
            model,
            bank,
            ema,
            optimizer,
            step: 0,
            epoch: 0,
            rng,
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.model.config
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MccError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MccError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut h = String::new();
        let mut put = |k: &str, v: String| {
            h.push_str(k);
            h.push_str(": ");
            h.push_str(&v);
            h.push('\n');
        };
        put("step", self.step.to_string());
        put("epoch", self.epoch.to_string());
        put("ema_updates", self.ema.updates.to_string());
        put("adam_step", self.optimizer.step.to_string());
        put("bank_version", self.bank.version().to_string());
        put("bank_epsilon", self.bank.epsilon().to_string());
        put("bank_momentum", self.bank.momentum().to_string());
        put(
            "bank_owner",
            self.bank.owner().iter().map(|o| o.to_string()).collect::<Vec<_>>().join(" "),
        );
        put("rng_seed", m.config.seed.to_string());
        put("rng_stream", self.rng.get_stream().to_string());
        put("rng_word_pos", self.rng.get_word_pos().to_string());
        put("mode", m.signature.mode.as_str().to_string());
        for s in &m.signature.input_shapes {
            put("stage", format!("{} {} {}", s.height, s.width, s.dim));
        }
        for l in &m.signature.label_names {
            put("label", l.clone());
        }
        for line in m.config.to_text().lines() {
            put("config", line.to_string());
        }

        let mut tensors: Vec<(String, &Array2<f64>)> = Vec::new();
        tensors.push(("prior".into(), &m.prior.raw_embeddings));
        for (i, t) in self.bank.stages().iter().enumerate() {
            tensors.push((format!("bank/{i}"), t));
        }
        for (name, v) in m.store.names().iter().zip(m.store.values()) {
            tensors.push((format!("param/{name}"), v));
        }
        for (name, v) in self.ema.shadow.names().iter().zip(self.ema.shadow.values()) {
            tensors.push((format!("ema/{name}"), v));
        }
        for (name, v) in m.store.names().iter().zip(&self.optimizer.m) {
            tensors.push((format!("adam_m/{name}"), v));
        }
        for (name, v) in m.store.names().iter().zip(&self.optimizer.v) {
            tensors.push((format!("adam_v/{name}"), v));
        }
        for (name, t) in &tensors {
            h.push_str(&format!("tensor: {name} {} {}\n", t.nrows(), t.ncols()));
        }
        let mut out = format!("{MAGIC}\n{h}end\n").into_bytes();
        for (_, t) in &tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let perr = |line: usize, m: String| MccError::Parse {
            path: origin.to_path_buf(),
            line,
            message: m,
        };
        let mut pos = 0;
        let mut lines: Vec<String> = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| perr(lines.len() + 1, "unterminated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| perr(lines.len() + 1, "header is not UTF-8".into()))?;
            pos += end + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(perr(1, "not a checkpoint file".into()));
        }

        let mut h = Header::default();
        for (i, line) in lines.iter().enumerate().skip(1) {
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| perr(i + 1, "expected `key: value`".into()))?;
            h.absorb(k, v).map_err(|m| perr(i + 1, m))?;
        }

        let mut tensors = std::collections::HashMap::new();
        for (name, r, c) in &h.tensors {
            let len = r * c * 8;
            if pos + len > bytes.len() {
                return Err(MccError::Data(format!("{} is truncated", origin.display())));
            }
            let vals: Vec<f64> = bytes[pos..pos + len]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            pos += len;
            tensors.insert(name.clone(), Array2::from_shape_vec((*r, *c), vals).expect("sized"));
        }
        if pos != bytes.len() {
            return Err(MccError::Data(format!("{} has trailing bytes", origin.display())));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| MccError::Data(format!("checkpoint lacks tensor `{name}`")))
        };

        let config = RunConfig::from_text(&h.config, origin)?;
        let signature = ModelSignature {
            mode: h.mode.ok_or_else(|| perr(0, "missing mode".into()))?,
            label_names: h.labels,
            input_shapes: h.stages,
        };
        let prior = LabelPrior::new(signature.label_names.clone(), take("prior")?)?;
        let mut model = MccModel::new(&config, signature, prior)?;

        let names: Vec<String> = model.store.names().to_vec();
        let restore = |prefix: &str, take: &mut dyn FnMut(&str) -> Result<Array2<f64>>| -> Result<ParamStore> {
            let mut store = ParamStore::new();
            for n in &names {
                store.add(n.clone(), take(&format!("{prefix}/{n}"))?);
            }
            Ok(store)
        };
        let params = restore("param", &mut take)?;
        model.store.load_from(&params)?;
        let mut ema = Ema::new(&model.store, config.ema_decay, config.ema_warmup);
        ema.shadow.load_from(&restore("ema", &mut take)?)?;
        ema.updates = h.ema_updates;
        let mut optimizer = AdamW::new(&model.store, config.weight_decay);
        optimizer.m = restore("adam_m", &mut take)?.values().to_vec();
        optimizer.v = restore("adam_v", &mut take)?.values().to_vec();
        optimizer.step = h.adam_step;

        let mut bank_stages = Vec::new();
        for i in 0.. {
            match take(&format!("bank/{i}")) {
                Ok(t) => bank_stages.push(t),
                Err(_) => break,
            }
        }
        let mut bank = PrototypeBank::new(
            bank_stages,
            h.bank_owner,
            h.bank_epsilon.ok_or_else(|| perr(0, "missing bank_epsilon".into()))?,
            h.bank_momentum.ok_or_else(|| perr(0, "missing bank_momentum".into()))?,
        )?;
        bank.set_version(h.bank_version);
        model.check_bank(&bank)?;

        let mut rng = ChaCha8Rng::seed_from_u64(h.rng_seed);
        rng.set_stream(h.rng_stream);
        rng.set_word_pos(h.rng_word_pos);
        Ok(Checkpoint {
            model,
            bank,
            ema,
            optimizer,
            step: h.step,
            epoch: h.epoch,
            rng,
        })
    }
}

#[derive(Default)]
struct Header {
    step: u64,
    epoch: usize,
    ema_updates: u64,
    adam_step: u64,
    bank_version: u64,
    bank_epsilon: Option<f64>,
    bank_momentum: Option<f64>,
    bank_owner: Vec<usize>,
    rng_seed: u64,
    rng_stream: u64,
    rng_word_pos: u128,
    mode: Option<LabelMode>,
    stages: Vec<StageShape>,
    labels: Vec<String>,
    config: String,
    tensors: Vec<(String, usize, usize)>,
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.trim().parse().map_err(|_| format!("malformed value `{v}`"))
}

impl Header {
    fn absorb(&mut self, k: &str, v: &str) -> std::result::Result<(), String> {
        match k {
            "step" => self.step = num(v)?,
            "epoch" => self.epoch = num(v)?,
            "ema_updates" => self.ema_updates = num(v)?,
            "adam_step" => self.adam_step = num(v)?,
            "bank_version" => self.bank_version = num(v)?,
            "bank_epsilon" => self.bank_epsilon = Some(num(v)?),
            "bank_momentum" => self.bank_momentum = Some(num(v)?),
            "bank_owner" => self.bank_owner = v.split_whitespace().map(num).collect::<std::result::Result<_, _>>()?,
            "rng_seed" => self.rng_seed = num(v)?,
            "rng_stream" => self.rng_stream = num(v)?,
            "rng_word_pos" => self.rng_word_pos = num(v)?,
            "mode" => self.mode = Some(LabelMode::parse(v).ok_or_else(|| format!("unknown mode `{v}`"))?),
            "stage" => {
                let d: Vec<usize> = v.split_whitespace().map(num).collect::<std::result::Result<_, _>>()?;
                let [hh, ww, dd] = d[..] else {
                    return Err("stage needs H W D".into());
                };
                self.stages.push(StageShape::new(hh, ww, dd));
            }
            "label" => self.labels.push(v.to_string()),
            "config" => {
                self.config.push_str(v);
                self.config.push('\n');
            }
            "tensor" => {
                let parts: Vec<&str> = v.split_whitespace().collect();
                let [name, r, c] = parts[..] else {
                    return Err("tensor needs NAME ROWS COLS".into());
                };
                self.tensors.push((name.to_string(), num(r)?, num(c)?));
            }
            other => return Err(format!("unknown header key `{other}`")),
        }
        Ok(())
    }
}
