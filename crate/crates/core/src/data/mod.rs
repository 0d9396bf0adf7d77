//! Dataset contract: samples, manifests, on-disk format and the synthetic
//! compositional-clue generator.

mod io;
mod synthetic;

use ndarray::Array2;

use crate::error::{MccError, Result};

pub use io::{load_dataset, open_dataset, resolve_split, write_dataset, RecordStream};
pub use synthetic::{generate_synthetic, ClueDictionary, SyntheticData, SyntheticSpec};

/// Grid of patch embeddings produced by one backbone stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    patches: Array2<f64>,
    grid: (usize, usize),
}

impl PatchFeatureMap {
    pub fn new(patches: Array2<f64>, grid: (usize, usize)) -> Result<Self> {
        if grid.0 * grid.1 != patches.nrows() {
            return Err(MccError::shape(format!(
                "grid {}x{} does not match {} patches",
                grid.0,
                grid.1,
                patches.nrows()
            )));
        }
        if patches.iter().any(|v| !v.is_finite()) {
            return Err(MccError::shape("non-finite patch embedding"));
        }
        Ok(PatchFeatureMap { patches, grid })
    }

    pub fn patches(&self) -> &Array2<f64> {
        &self.patches
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }

    pub fn shape(&self) -> StageShape {
        StageShape {
            height: self.grid.0,
            width: self.grid.1,
            dim: self.dim(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageShape {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl StageShape {
    pub fn new(height: usize, width: usize, dim: usize) -> Self {
        StageShape { height, width, dim }
    }

    pub fn patches(&self) -> usize {
        self.height * self.width
    }

    pub fn floats(&self) -> usize {
        self.patches() * self.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    MultiLabel,
    MultiClass,
}

impl LabelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelMode::MultiLabel => "multi-label",
            LabelMode::MultiClass => "multi-class",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "multi-label" => Some(LabelMode::MultiLabel),
            "multi-class" => Some(LabelMode::MultiClass),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelSample {
    pub sample_id: String,
    /// Ordered shallow to deep.
    pub features_by_stage: Vec<PatchFeatureMap>,
    pub labels: Vec<bool>,
}

impl MultiLabelSample {
    pub fn label_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| y.then_some(i))
            .collect()
    }

    pub fn label_row(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect()
    }

    /// Checks the invariants against a manifest.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let fail = |message: String| MccError::SampleShape {
            sample_id: self.sample_id.clone(),
            message,
        };
        if self.labels.len() != manifest.num_classes {
            return Err(fail(format!(
                "{} labels, expected {}",
                self.labels.len(),
                manifest.num_classes
            )));
        }
        let positives = self.labels.iter().filter(|&&y| y).count();
        match manifest.mode {
            LabelMode::MultiLabel if positives == 0 => {
                return Err(fail("multi-label sample without a positive label".into()))
            }
            LabelMode::MultiClass if positives != 1 => {
                return Err(fail(format!("multi-class sample with {positives} labels")))
            }
            _ => {}
        }
        if self.features_by_stage.len() != manifest.stage_shapes.len() {
            return Err(fail(format!(
                "{} stages, expected {}",
                self.features_by_stage.len(),
                manifest.stage_shapes.len()
            )));
        }
        for (s, (fmap, shape)) in self
            .features_by_stage
            .iter()
            .zip(&manifest.stage_shapes)
            .enumerate()
        {
            if fmap.shape() != *shape {
                return Err(fail(format!(
                    "stage {s} is {:?}, expected {:?}",
                    fmap.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub mode: LabelMode,
    pub num_classes: usize,
    pub label_names: Vec<String>,
    pub stage_shapes: Vec<StageShape>,
    pub counts: Vec<usize>,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<MultiLabelSample>,
}

impl Dataset {
    /// Builds a dataset and fills in the manifest counts.
    pub fn new(mut manifest: DatasetManifest, samples: Vec<MultiLabelSample>) -> Result<Self> {
        for s in &samples {
            s.validate(&manifest)?;
        }
        manifest.counts = tally(manifest.num_classes, &samples);
        Ok(Dataset { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    /// `N × C` matrix of 0/1 ground truth.
    pub fn truth_matrix(&self) -> Array2<f64> {
        let c = self.num_classes();
        let mut out = Array2::zeros((self.len(), c));
        for (i, s) in self.samples.iter().enumerate() {
            for j in s.label_indices() {
                out[[i, j]] = 1.0;
            }
        }
        out
    }
}

fn tally(num_classes: usize, samples: &[MultiLabelSample]) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in samples {
        for (c, &y) in s.labels.iter().enumerate() {
            if y {
                counts[c] += 1;
            }
        }
    }
    counts
}

/// Number of samples positive for each class.
pub fn class_counts(dataset: &Dataset) -> Vec<usize> {
    tally(dataset.num_classes(), &dataset.samples)
}
