//! Dataset directory layout:
//!
//! * `manifest` - UTF-8 `key: value` lines (`version`, `mode`, `num_classes`,
//!   one `label` line per class, one `stage: H W D` line per stage, `counts`).
//! * `records` - one JSON object per line with `sample_id`, `labels`
//!   (positive class indices) and `offsets` (byte offset of every stage block
//!   inside `features.bin`).
//! * `features.bin` - raw little-endian `f32`, each stage block stored as
//!   `H*W` rows of `D` values.

use std::fs;
use std::io::{BufRead, BufReader, Lines, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, LabelMode, MultiLabelSample, PatchFeatureMap, StageShape};
use crate::error::{MccError, Result};

pub const MANIFEST_FILE: &str = "manifest";
pub const RECORDS_FILE: &str = "records";
pub const FEATURES_FILE: &str = "features.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    sample_id: String,
    labels: Vec<usize>,
    offsets: Vec<u64>,
}

/// Picks `dir/<split>` when `dir` is a parent of split directories,
/// otherwise `dir` itself.
pub fn resolve_split(dir: &Path, split: &str) -> PathBuf {
    if dir.join(MANIFEST_FILE).is_file() {
        dir.to_path_buf()
    } else {
        dir.join(split)
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> MccError {
    MccError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| MccError::io(path, e))?;
    let mut version = None;
    let mut mode = None;
    let mut num_classes = None;
    let mut label_names = Vec::new();
    let mut stage_shapes = Vec::new();
    let mut counts = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| parse_err(path, line_no, "expected `key: value`"))?;
        let value = value.trim();
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| parse_err(path, line_no, format!("`{v}` is not a non-negative integer")))
        };
        match key.trim() {
            "version" => version = Some(num(value)? as u32),
            "mode" => {
                mode = Some(
                    LabelMode::parse(value)
                        .ok_or_else(|| parse_err(path, line_no, format!("unknown mode `{value}`")))?,
                )
            }
            "num_classes" => num_classes = Some(num(value)?),
            "label" => label_names.push(value.to_string()),
            "stage" => {
                let dims = value.split_whitespace().map(num).collect::<Result<Vec<_>>>()?;
                if dims.len() != 3 || dims.contains(&0) {
                    return Err(parse_err(path, line_no, "stage needs three positive integers H W D"));
                }
                stage_shapes.push(StageShape::new(dims[0], dims[1], dims[2]));
            }
            "counts" => counts = Some(value.split_whitespace().map(num).collect::<Result<Vec<_>>>()?),
            other => return Err(parse_err(path, line_no, format!("unknown key `{other}`"))),
        }
    }

    let missing = |what: &str| parse_err(path, 0, format!("manifest is missing `{what}`"));
    let version = version.ok_or_else(|| missing("version"))?;
    if version != super::MANIFEST_VERSION {
        return Err(parse_err(path, 0, format!("unsupported manifest version {version}")));
    }
    let num_classes = num_classes.ok_or_else(|| missing("num_classes"))?;
    if label_names.len() != num_classes {
        return Err(parse_err(
            path,
            0,
            format!("{} label lines for {num_classes} classes", label_names.len()),
        ));
    }
    if stage_shapes.is_empty() {
        return Err(missing("stage"));
    }
    let counts = counts.unwrap_or_else(|| vec![0; num_classes]);
    if counts.len() != num_classes {
        return Err(parse_err(path, 0, "counts length differs from num_classes"));
    }
    Ok(DatasetManifest {
        version,
        mode: mode.ok_or_else(|| missing("mode"))?,
        num_classes,
        label_names,
        stage_shapes,
        counts,
    })
}

fn render_manifest(m: &DatasetManifest) -> String {
    let mut out = String::new();
    out.push_str(&format!("version: {}\n", m.version));
    out.push_str(&format!("mode: {}\n", m.mode.as_str()));
    out.push_str(&format!("num_classes: {}\n", m.num_classes));
    for name in &m.label_names {
        out.push_str(&format!("label: {name}\n"));
    }
    for s in &m.stage_shapes {
        out.push_str(&format!("stage: {} {} {}\n", s.height, s.width, s.dim));
    }
    let counts: Vec<String> = m.counts.iter().map(|c| c.to_string()).collect();
    out.push_str(&format!("counts: {}\n", counts.join(" ")));
    out
}

/// Streaming reader over the records of a dataset directory.
pub struct RecordStream {
    manifest: DatasetManifest,
    records_path: PathBuf,
    lines: Lines<BufReader<fs::File>>,
    blob: Vec<u8>,
    line_no: usize,
}

impl RecordStream {
    fn decode(&self, line: &str) -> Result<MultiLabelSample> {
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| parse_err(&self.records_path, self.line_no, e.to_string()))?;
        let fail = |message: String| MccError::SampleShape {
            sample_id: rec.sample_id.clone(),
            message,
        };
        let m = &self.manifest;
        if rec.offsets.len() != m.stage_shapes.len() {
            return Err(fail(format!(
                "{} offsets for {} stages",
                rec.offsets.len(),
                m.stage_shapes.len()
            )));
        }
        let mut labels = vec![false; m.num_classes];
        for &l in &rec.labels {
            if l >= m.num_classes {
                return Err(fail(format!("label index {l} out of range")));
            }
            labels[l] = true;
        }
        let mut features = Vec::with_capacity(rec.offsets.len());
        for (&offset, shape) in rec.offsets.iter().zip(&m.stage_shapes) {
            let start = offset as usize;
            let len = shape.floats() * 4;
            if start % 4 != 0 || start + len > self.blob.len() {
                return Err(fail(format!("stage block at byte {start} exceeds feature blob")));
            }
            let values: Vec<f64> = self.blob[start..start + len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let patches = Array2::from_shape_vec((shape.patches(), shape.dim), values)
                .map_err(|e| fail(e.to_string()))?;
            let fmap = PatchFeatureMap::new(patches, (shape.height, shape.width))
                .map_err(|e| fail(e.to_string()))?;
            features.push(fmap);
        }
        let sample = MultiLabelSample {
            sample_id: rec.sample_id.clone(),
            features_by_stage: features,
            labels,
        };
        sample.validate(m)?;
        Ok(sample)
    }
}

impl Iterator for RecordStream {
    type Item = Result<MultiLabelSample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(MccError::io(&self.records_path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.decode(&line));
        }
    }
}

/// Opens a dataset directory. The manifest counts are those stored on disk.
pub fn open_dataset(dir: &Path) -> Result<(DatasetManifest, RecordStream)> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let records_path = dir.join(RECORDS_FILE);
    let file = fs::File::open(&records_path).map_err(|e| MccError::io(&records_path, e))?;
    let features_path = dir.join(FEATURES_FILE);
    let blob = if features_path.exists() {
        fs::read(&features_path).map_err(|e| MccError::io(&features_path, e))?
    } else {
        Vec::new()
    };
    let stream = RecordStream {
        manifest: manifest.clone(),
        records_path,
        lines: BufReader::new(file).lines(),
        blob,
        line_no: 0,
    };
    Ok((manifest, stream))
}

/// Loads a whole dataset; the returned counts are recomputed from records.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (manifest, stream) = open_dataset(dir)?;
    let samples = stream.collect::<Result<Vec<_>>>()?;
    let stored = manifest.counts.clone();
    let ds = Dataset::new(manifest, samples)?;
    if stored != ds.manifest.counts {
        return Err(MccError::Data(format!(
            "manifest counts {:?} disagree with records {:?}",
            stored, ds.manifest.counts
        )));
    }
    Ok(ds)
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MccError::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, render_manifest(&dataset.manifest))
        .map_err(|e| MccError::io(&manifest_path, e))?;

    let mut blob: Vec<u8> = Vec::new();
    let mut records = String::new();
    for s in &dataset.samples {
        let mut offsets = Vec::with_capacity(s.features_by_stage.len());
        for fmap in &s.features_by_stage {
            offsets.push(blob.len() as u64);
            for v in fmap.patches().iter() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let rec = Record {
            sample_id: s.sample_id.clone(),
            labels: s.label_indices(),
            offsets,
        };
        records.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        records.push('\n');
    }
    let records_path = dir.join(RECORDS_FILE);
    let features_path = dir.join(FEATURES_FILE);
    fs::write(&records_path, records).map_err(|e| MccError::io(&records_path, e))?;
    let mut f = fs::File::create(&features_path).map_err(|e| MccError::io(&features_path, e))?;
    f.write_all(&blob).map_err(|e| MccError::io(&features_path, e))?;
    Ok(())
}
