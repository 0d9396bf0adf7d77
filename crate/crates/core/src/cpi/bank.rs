use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::allocation::AllocationPlan;
use super::kmeans::{mini_batch_kmeans, KMeansOptions};
use crate::data::Dataset;
use crate::error::{MccError, Result};

/// Default `ε` added to the norm product of the cosine similarity.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Per-stage prototype matrices plus class-ownership bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    stages: Vec<Array2<f64>>,
    owner: Vec<usize>,
    epsilon: f64,
    momentum: f64,
    version: u64,
}

impl PrototypeBank {
    pub fn new(
        stages: Vec<Array2<f64>>,
        owner: Vec<usize>,
        epsilon: f64,
        momentum: f64,
    ) -> Result<Self> {
        let bank = PrototypeBank {
            stages,
            owner,
            epsilon,
            momentum,
            version: 0,
        };
        bank.validate()?;
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(MccError::shape("prototype bank without stages"));
        }
        let k = self.owner.len();
        for (s, m) in self.stages.iter().enumerate() {
            if m.nrows() != k {
                return Err(MccError::shape(format!(
                    "stage {s} holds {} prototypes, owner vector has {k}",
                    m.nrows()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(MccError::Numerical(format!("stage {s} has non-finite prototypes")));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(MccError::config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if !(self.epsilon > 0.0) {
            return Err(MccError::config("epsilon must be positive"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_prototypes(&self) -> usize {
        self.owner.len()
    }

    pub fn stage(&self, s: usize) -> &Array2<f64> {
        &self.stages[s]
    }

    pub(crate) fn stage_mut(&mut self, s: usize) -> &mut Array2<f64> {
        &mut self.stages[s]
    }

    pub fn stages(&self) -> &[Array2<f64>] {
        &self.stages
    }

    pub fn dims(&self) -> Vec<usize> {
        self.stages.iter().map(|m| m.ncols()).collect()
    }

    pub fn owner(&self) -> &[usize] {
        &self.owner
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_momentum(&mut self, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(MccError::config(format!("momentum {momentum} outside [0, 1]")));
        }
        self.momentum = momentum;
        Ok(())
    }

    /// Number of momentum updates applied since initialisation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    /// Number of prototypes owned by each of `num_classes` classes.
    pub fn owned_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut out = vec![0; num_classes];
        for &c in &self.owner {
            if c < num_classes {
                out[c] += 1;
            }
        }
        out
    }

    /// Writes the bank file: a text header followed by raw little-endian
    /// `f32` prototype matrices, stage after stage.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = String::from("MCCL-PROTOTYPES 1\n");
        header.push_str(&format!("stages: {}\n", self.stages.len()));
        header.push_str(&format!("k: {}\n", self.num_prototypes()));
        let dims: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("dims: {}\n", dims.join(" ")));
        header.push_str(&format!("momentum: {}\n", self.momentum));
        header.push_str(&format!("epsilon: {}\n", self.epsilon));
        let owner: Vec<String> = self.owner.iter().map(|o| o.to_string()).collect();
        header.push_str(&format!("owner: {}\n", owner.join(" ")));
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        for m in &self.stages {
            for v in m.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| MccError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| MccError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MccError::io(path, e))?;
        let perr = |line: usize, m: &str| MccError::Parse {
            path: path.to_path_buf(),
            line,
            message: m.to_string(),
        };
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| perr(lines.len() + 1, "unterminated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| perr(lines.len() + 1, "header is not UTF-8"))?
                .to_string();
            pos += end + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        if lines.first().map(String::as_str) != Some("MCCL-PROTOTYPES 1") {
            return Err(perr(1, "not a prototype bank file"));
        }
        let mut k = None;
        let mut dims = Vec::new();
        let mut momentum = None;
        let mut epsilon = None;
        let mut owner = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(1) {
            let (key, value) = line.split_once(':').ok_or_else(|| perr(i + 1, "expected key: value"))?;
            let value = value.trim();
            let bad = || perr(i + 1, "malformed value");
            match key {
                "stages" => {}
                "k" => k = Some(value.parse::<usize>().map_err(|_| bad())?),
                "dims" => {
                    dims = value
                        .split_whitespace()
                        .map(|d| d.parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<_>>()?
                }
                "momentum" => momentum = Some(value.parse::<f64>().map_err(|_| bad())?),
                "epsilon" => epsilon = Some(value.parse::<f64>().map_err(|_| bad())?),
                "owner" => {
                    owner = value
                        .split_whitespace()
                        .map(|d| d.parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<_>>()?
                }
                _ => return Err(perr(i + 1, "unknown header key")),
            }
        }
        let k = k.ok_or_else(|| perr(0, "missing k"))?;
        let mut stages = Vec::with_capacity(dims.len());
        for &d in &dims {
            let len = k * d * 4;
            if pos + len > bytes.len() {
                return Err(MccError::Data(format!("{} is truncated", path.display())));
            }
            let values: Vec<f64> = bytes[pos..pos + len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            pos += len;
            stages.push(Array2::from_shape_vec((k, d), values).map_err(|e| MccError::shape(e.to_string()))?);
        }
        PrototypeBank::new(
            stages,
            owner,
            epsilon.ok_or_else(|| perr(0, "missing epsilon"))?,
            momentum.ok_or_else(|| perr(0, "missing momentum"))?,
        )
    }
}

/// Settings for per-class clustering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankOptions {
    pub kmeans: KMeansOptions,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BankOptions {
    fn default() -> Self {
        BankOptions {
            kmeans: KMeansOptions::default(),
            epsilon: DEFAULT_EPSILON,
            momentum: 0.99999,
        }
    }
}

fn stream_id(stage: usize, class: usize) -> u64 {
    ((stage as u64) << 32) | class as u64
}

/// Clusters the patches of every class's positive samples into that class's
/// budget of prototypes, stage by stage.
///
/// Prototypes are concatenated in class-index order and rounded to `f32`
/// precision so that the bank file reproduces them exactly.
pub fn build_prototype_bank(
    dataset: &Dataset,
    plan: &AllocationPlan,
    stages: &[usize],
    opts: &BankOptions,
) -> Result<PrototypeBank> {
    let c = dataset.num_classes();
    if plan.num_classes() != c {
        return Err(MccError::config(format!(
            "allocation plan covers {} classes, dataset has {c}",
            plan.num_classes()
        )));
    }
    if dataset.is_empty() {
        return Err(MccError::Data("cannot initialise prototypes from an empty dataset".into()));
    }
    if stages.is_empty() {
        return Err(MccError::config("no stages selected for prototypes"));
    }
    let num_stages = dataset.manifest.stage_shapes.len();
    if let Some(&bad) = stages.iter().find(|&&s| s >= num_stages) {
        return Err(MccError::config(format!(
            "stage {bad} requested but the data has {num_stages} stages"
        )));
    }

    let mut matrices = Vec::with_capacity(stages.len());
    for (slot, &s) in stages.iter().enumerate() {
        let dim = dataset.manifest.stage_shapes[s].dim;
        let per_class: Vec<Result<Array2<f64>>> = (0..c)
            .into_par_iter()
            .map(|class| {
                let k = plan.budgets()[class];
                let mut pool: Vec<f64> = Vec::new();
                for sample in dataset.samples.iter().filter(|x| x.labels[class]) {
                    pool.extend(sample.features_by_stage[s].patches().iter());
                }
                let mut rng = ChaCha8Rng::seed_from_u64(opts.kmeans.seed);
                rng.set_stream(stream_id(slot, class) + (1 << 62));
                if pool.len() / dim < k {
                    warn!(
                        "class {class} has {} patches at stage {s} for {k} prototypes; resampling with replacement",
                        pool.len() / dim
                    );
                    let source: Vec<f64> = if pool.is_empty() {
                        dataset
                            .samples
                            .iter()
                            .flat_map(|x| x.features_by_stage[s].patches().iter().copied())
                            .collect()
                    } else {
                        pool.clone()
                    };
                    let n = source.len() / dim;
                    while pool.len() / dim < k {
                        let i = rng.random_range(0..n);
                        pool.extend_from_slice(&source[i * dim..(i + 1) * dim]);
                    }
                }
                let points = Array2::from_shape_vec((pool.len() / dim, dim), pool)
                    .map_err(|e| MccError::shape(e.to_string()))?;
                let kopts = KMeansOptions {
                    seed: opts.kmeans.seed ^ stream_id(slot, class).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    ..opts.kmeans
                };
                let result = mini_batch_kmeans(points.view(), k, &kopts)?;
                Ok(result.centroids.mapv(|v| v as f32 as f64))
            })
            .collect();
        let blocks = per_class.into_iter().collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        matrices.push(
            ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| MccError::shape(e.to_string()))?,
        );
    }
    PrototypeBank::new(matrices, plan.owners(), opts.epsilon, opts.momentum)
}
