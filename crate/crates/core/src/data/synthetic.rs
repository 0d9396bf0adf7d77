//! Synthetic compositional-clue data.
//!
//! Each class owns a fixed set of one to three clue vectors per stage. The
//! first clue of class `c` is clue `c` itself and is used by no other class;
//! the remaining clues are drawn from a shared pool. A sample positive for a
//! class carries one patch per clue of that class (clue vector plus Gaussian
//! noise); every other patch is a background vector plus noise. Class label
//! frequencies follow `prior(c) ∝ (c+1)^(-exponent)` exactly, up to integer
//! rounding.

use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{
    Dataset, DatasetManifest, LabelMode, MultiLabelSample, PatchFeatureMap, StageShape,
    MANIFEST_VERSION,
};
use crate::apportion::largest_remainder;
use crate::error::{MccError, Result};
use crate::kv;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_clues: usize,
    pub stage_shapes: Vec<StageShape>,
    /// Train, validation and test sizes.
    pub samples_per_split: [usize; 3],
    pub imbalance_exponent: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub mode: LabelMode,
    /// Inclusive range of clue-set sizes, within `1..=3`.
    pub clues_per_class: (usize, usize),
    pub max_labels: usize,
    /// Extra label slots per sample on average (multi-label mode).
    pub extra_label_rate: f64,
    pub background_vectors: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 6,
            num_clues: 12,
            stage_shapes: vec![StageShape::new(4, 4, 16), StageShape::new(2, 2, 32)],
            samples_per_split: [600, 200, 200],
            imbalance_exponent: 1.0,
            noise_std: 0.0,
            seed: 0,
            mode: LabelMode::MultiLabel,
            clues_per_class: (1, 2),
            max_labels: 2,
            extra_label_rate: 0.3,
            background_vectors: 2,
        }
    }
}

impl SyntheticSpec {
    /// Reads a `key: value` spec file; unspecified keys keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MccError::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        let mut stages = Vec::new();
        for e in kv::parse(text, origin)? {
            let (k, v) = (e.key.as_str(), e.value.as_str());
            match k {
                "num_classes" => spec.num_classes = kv::parse_num(k, v)?,
                "num_clues" => spec.num_clues = kv::parse_num(k, v)?,
                "stage" => {
                    let d: Vec<usize> = kv::parse_list(k, v)?;
                    if d.len() != 3 {
                        return Err(MccError::config("`stage` needs H W D"));
                    }
                    stages.push(StageShape::new(d[0], d[1], d[2]));
                }
                "samples" => {
                    let d: Vec<usize> = kv::parse_list(k, v)?;
                    if d.len() != 3 {
                        return Err(MccError::config("`samples` needs train val test"));
                    }
                    spec.samples_per_split = [d[0], d[1], d[2]];
                }
                "imbalance_exponent" => spec.imbalance_exponent = kv::parse_num(k, v)?,
                "noise_std" => spec.noise_std = kv::parse_num(k, v)?,
                "seed" => spec.seed = kv::parse_num(k, v)?,
                "mode" => {
                    spec.mode = LabelMode::parse(v)
                        .ok_or_else(|| MccError::config(format!("unknown mode `{v}`")))?
                }
                "clues_per_class" => {
                    let d: Vec<usize> = kv::parse_list(k, v)?;
                    match d.as_slice() {
                        [a] => spec.clues_per_class = (*a, *a),
                        [a, b] => spec.clues_per_class = (*a, *b),
                        _ => return Err(MccError::config("`clues_per_class` needs MIN [MAX]")),
                    }
                }
                "max_labels" => spec.max_labels = kv::parse_num(k, v)?,
                "extra_label_rate" => spec.extra_label_rate = kv::parse_num(k, v)?,
                "background_vectors" => spec.background_vectors = kv::parse_num(k, v)?,
                other => return Err(MccError::config(format!("unknown generator key `{other}`"))),
            }
        }
        if !stages.is_empty() {
            spec.stage_shapes = stages;
        }
        Ok(spec)
    }

    fn labels_per_sample(&self) -> usize {
        match self.mode {
            LabelMode::MultiClass => 1,
            LabelMode::MultiLabel => self.max_labels.min(self.num_classes),
        }
    }

    fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(MccError::config(m.to_string()));
        if self.num_classes < 2 {
            return err("generator needs at least two classes");
        }
        if self.num_clues < self.num_classes {
            return err("num_clues must be at least num_classes");
        }
        let (lo, hi) = self.clues_per_class;
        if lo < 1 || hi > 3 || lo > hi {
            return err("clues_per_class must satisfy 1 <= min <= max <= 3");
        }
        if self.max_labels < 1 {
            return err("max_labels must be at least 1");
        }
        if self.stage_shapes.is_empty() || self.stage_shapes.iter().any(|s| s.floats() == 0) {
            return err("every stage needs a non-empty grid and width");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err("noise_std must be finite and non-negative");
        }
        if !(self.imbalance_exponent >= 0.0 && self.imbalance_exponent.is_finite()) {
            return err("imbalance_exponent must be finite and non-negative");
        }
        if !(self.extra_label_rate >= 0.0 && self.extra_label_rate.is_finite()) {
            return err("extra_label_rate must be finite and non-negative");
        }
        if self.background_vectors < 1 {
            return err("background_vectors must be at least 1");
        }
        Ok(())
    }

    pub fn class_prior(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.num_classes)
            .map(|c| ((c + 1) as f64).powf(-self.imbalance_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|r| r / total).collect()
    }
}

/// The ground-truth clue vectors behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClueDictionary {
    /// Per stage, `num_clues × D_s`.
    pub clues: Vec<Array2<f64>>,
    /// Per stage, `background_vectors × D_s`.
    pub background: Vec<Array2<f64>>,
    /// Clue indices required by each class; entry 0 is the class's own clue.
    pub class_clues: Vec<Vec<usize>>,
}

impl ClueDictionary {
    /// Writes a human-readable summary of the class/clue map.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (c, clues) in self.class_clues.iter().enumerate() {
            let list: Vec<String> = clues.iter().map(|k| k.to_string()).collect();
            out.push_str(&format!("class {c}: {}\n", list.join(" ")));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub dictionary: ClueDictionary,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Unit directions, orthonormal whenever there are no more than `dim` of them.
fn random_directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((count, dim));
    for i in 0..count {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            if count <= dim {
                for j in 0..i {
                    let prev = out.row(j);
                    let d: f64 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
                    for (x, p) in v.iter_mut().zip(prev.iter()) {
                        *x -= d * p;
                    }
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                for (x, o) in v.iter().zip(out.row_mut(i).iter_mut()) {
                    *o = x / n;
                }
                break;
            }
        }
    }
    out
}

fn build_dictionary(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> ClueDictionary {
    let mut clues = Vec::new();
    let mut background = Vec::new();
    for shape in &spec.stage_shapes {
        let dirs = random_directions(rng, spec.num_clues + spec.background_vectors, shape.dim);
        clues.push(dirs.slice(ndarray::s![..spec.num_clues, ..]).to_owned());
        background.push(dirs.slice(ndarray::s![spec.num_clues.., ..]).to_owned());
    }
    let pool: Vec<usize> = (spec.num_classes..spec.num_clues).collect();
    let (lo, hi) = spec.clues_per_class;
    let class_clues = (0..spec.num_classes)
        .map(|c| {
            let n = rng.random_range(lo..=hi);
            let mut set = vec![c];
            let extra: Vec<usize> = pool
                .choose_multiple(rng, (n - 1).min(pool.len()))
                .copied()
                .collect();
            set.extend(extra);
            set
        })
        .collect();
    ClueDictionary {
        clues,
        background,
        class_clues,
    }
}

/// Label sets for `n` samples with per-class counts fixed by the prior.
fn deal_labels(spec: &SyntheticSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let per_sample = spec.labels_per_sample();
    let mut slots = match spec.mode {
        LabelMode::MultiClass => n,
        LabelMode::MultiLabel => {
            let extra = (n as f64 * spec.extra_label_rate).round() as usize;
            (n + extra).min(per_sample * n)
        }
    };
    let prior = spec.class_prior();
    let quotas = loop {
        let real: Vec<f64> = prior.iter().map(|p| p * slots as f64).collect();
        let q = largest_remainder(&real, slots);
        // a class run longer than n would put the same label twice on a sample
        if q.iter().all(|&x| x <= n) || slots <= n {
            break q;
        }
        slots -= 1;
    };
    let tokens: Vec<usize> = quotas
        .iter()
        .enumerate()
        .flat_map(|(c, &q)| std::iter::repeat_n(c, q))
        .collect();
    let mut sets = vec![Vec::new(); n];
    for (j, &c) in tokens.iter().enumerate() {
        sets[j % n].push(c);
    }
    for s in sets.iter_mut() {
        s.sort_unstable();
    }
    sets.shuffle(rng);
    sets
}

fn make_split(
    spec: &SyntheticSpec,
    dict: &ClueDictionary,
    name: &str,
    n: usize,
    stream: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| MccError::config(e.to_string()))?;
    let label_sets = deal_labels(spec, n, &mut rng);

    let mut samples = Vec::with_capacity(n);
    for (i, labels) in label_sets.into_iter().enumerate() {
        let needed: Vec<usize> = labels
            .iter()
            .flat_map(|&c| dict.class_clues[c].iter().copied())
            .collect();
        let mut features = Vec::with_capacity(spec.stage_shapes.len());
        for (s, shape) in spec.stage_shapes.iter().enumerate() {
            let p = shape.patches();
            let mut positions: Vec<usize> = (0..p).collect();
            positions.shuffle(&mut rng);
            let mut source: Vec<Option<usize>> = vec![None; p];
            for (&pos, &clue) in positions.iter().zip(&needed) {
                source[pos] = Some(clue);
            }
            let mut patches = Array2::zeros((p, shape.dim));
            for (row, src) in source.iter().enumerate() {
                let base = match src {
                    Some(k) => dict.clues[s].row(*k),
                    None => {
                        let b = rng.random_range(0..spec.background_vectors);
                        dict.background[s].row(b)
                    }
                };
                for (d, &v) in base.iter().enumerate() {
                    let x: f64 = noise.sample(&mut rng);
                    patches[[row, d]] = round_f32(v + x);
                }
            }
            features.push(PatchFeatureMap::new(patches, (shape.height, shape.width))?);
        }
        let mut y = vec![false; spec.num_classes];
        for c in labels {
            y[c] = true;
        }
        samples.push(MultiLabelSample {
            sample_id: format!("{name}-{i:06}"),
            features_by_stage: features,
            labels: y,
        });
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        mode: spec.mode,
        num_classes: spec.num_classes,
        label_names: (0..spec.num_classes).map(|c| format!("intent_{c:02}")).collect(),
        stage_shapes: spec.stage_shapes.clone(),
        counts: vec![0; spec.num_classes],
    };
    Dataset::new(manifest, samples)
}

/// Generates train/validation/test splits; deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dictionary = build_dictionary(spec, &mut rng);

    let mut sizes: Vec<usize> = dictionary.class_clues.iter().map(Vec::len).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let worst: usize = sizes.iter().take(spec.labels_per_sample()).sum();
    let fewest = spec.stage_shapes.iter().map(StageShape::patches).min().unwrap_or(0);
    if worst > fewest {
        return Err(MccError::config(format!(
            "a sample may need {worst} clue patches but the smallest stage has {fewest}"
        )));
    }

    let [n_train, n_val, n_test] = spec.samples_per_split;
    Ok(SyntheticData {
        train: make_split(spec, &dictionary, "train", n_train, 1)?,
        val: make_split(spec, &dictionary, "val", n_val, 2)?,
        test: make_split(spec, &dictionary, "test", n_test, 3)?,
        dictionary,
    })
}
