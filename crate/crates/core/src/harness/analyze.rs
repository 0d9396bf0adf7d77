use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{MccError, Result};

/// A prototype whose share of the total assignment mass is below this
/// fraction of the uniform share `1/K` is reported as dead.
pub const DEAD_FRACTION: f64 = 0.01;

/// Prototype–class correlation for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeAnalysis {
    pub stage: usize,
    /// `C × K`; row `c` is the mean assignment mass over patches of samples
    /// positive for `c`, normalised to sum to one. Rows of classes without
    /// positive samples are zero.
    pub correlation: Array2<f64>,
    /// Total assignment mass received by each prototype.
    pub usage: Vec<f64>,
    pub dead: Vec<usize>,
    /// Owning class of every prototype.
    pub owner: Vec<usize>,
}

impl PrototypeAnalysis {
    /// For each class: whether its largest correlation falls on a prototype
    /// it owns. `None` for classes without samples.
    pub fn owner_dominance(&self) -> Vec<Option<bool>> {
        self.correlation
            .rows()
            .into_iter()
            .enumerate()
            .map(|(c, row)| {
                if row.sum() == 0.0 {
                    return None;
                }
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                Some(self.owner[best] == c)
            })
            .collect()
    }

    /// Column order grouping prototypes by owning class.
    pub fn owner_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.owner.len()).collect();
        idx.sort_by_key(|&k| (self.owner[k], k));
        idx
    }
}

/// Correlation matrix and usage histogram for every stage the model uses,
/// computed with the EMA parameters.
pub fn analyze_prototypes(ckpt: &Checkpoint, data: &Dataset) -> Result<Vec<PrototypeAnalysis>> {
    if data.is_empty() {
        return Err(MccError::Data("cannot analyse prototypes on an empty dataset".into()));
    }
    let model = &ckpt.model;
    model.signature.check(&data.manifest)?;
    let c = model.num_classes();
    let k = ckpt.bank.num_prototypes();
    let per_sample: Vec<Vec<Array2<f64>>> = data
        .samples
        .par_iter()
        .map(|s| model.assignments(&ckpt.ema.shadow, &ckpt.bank, s))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(model.stages.len());
    for (slot, &stage) in model.stages.iter().enumerate() {
        let mut corr = Array2::<f64>::zeros((c, k));
        let mut usage = vec![0.0; k];
        for (sample, w) in data.samples.iter().zip(&per_sample) {
            let w = &w[slot];
            let mean = w.mean_axis(ndarray::Axis(0)).expect("non-empty grid");
            for (u, col) in usage.iter_mut().zip(w.columns()) {
                *u += col.sum();
            }
            for cls in sample.label_indices() {
                let mut row = corr.row_mut(cls);
                row += &mean;
            }
        }
        for mut row in corr.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
        let total: f64 = usage.iter().sum();
        let dead = (0..k)
            .filter(|&j| usage[j] < DEAD_FRACTION * total / k as f64)
            .collect();
        out.push(PrototypeAnalysis {
            stage,
            correlation: corr,
            usage,
            dead,
            owner: ckpt.bank.owner().to_vec(),
        });
    }
    Ok(out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| MccError::io(path, e))
}

fn heat_color(v: f64) -> [u8; 3] {
    let t = v.clamp(0.0, 1.0);
    // Black to red to yellow to white.
    let r = (3.0 * t).min(1.0);
    let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Heat map of a matrix with columns in `order`, each cell `cell` pixels,
/// colours scaled to the matrix maximum.
pub fn render_heatmap(m: &Array2<f64>, order: &[usize], cell: u32) -> image::RgbImage {
    let (rows, cols) = (m.nrows() as u32, order.len() as u32);
    let max = m.iter().copied().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    image::RgbImage::from_fn(cols * cell, rows * cell, |x, y| {
        let v = m[[(y / cell) as usize, order[(x / cell) as usize]]];
        image::Rgb(heat_color(v * scale))
    })
}

/// Writes `correlation_stage{s}.csv`, `usage_stage{s}.csv`,
/// `heatmap_stage{s}.png` and a `summary` file into `dir`.
pub fn write_analysis(analyses: &[PrototypeAnalysis], label_names: &[String], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| MccError::io(dir, e))?;
    let mut written = Vec::new();
    let mut summary = String::new();
    for a in analyses {
        let s = a.stage;
        let k = a.owner.len();
        let mut csv = String::from("class");
        for j in 0..k {
            csv.push_str(&format!(",p{j}_c{}", a.owner[j]));
        }
        csv.push('\n');
        for (c, row) in a.correlation.rows().into_iter().enumerate() {
            csv.push_str(label_names.get(c).map_or("?", String::as_str));
            for v in row {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        let p = dir.join(format!("correlation_stage{s}.csv"));
        write(&p, csv)?;
        written.push(p);

        let mut usage = String::from("prototype,owner,mass,dead\n");
        for j in 0..k {
            usage.push_str(&format!("{j},{},{},{}\n", a.owner[j], a.usage[j], a.dead.contains(&j)));
        }
        let p = dir.join(format!("usage_stage{s}.csv"));
        write(&p, usage)?;
        written.push(p);

        let cell = if k > 256 { 1 } else if k > 64 { 4 } else { 12 };
        let img = render_heatmap(&a.correlation, &a.owner_order(), cell);
        let p = dir.join(format!("heatmap_stage{s}.png"));
        img.save(&p).map_err(|e| MccError::Data(format!("writing {}: {e}", p.display())))?;
        written.push(p);

        let dom = a.owner_dominance();
        let hits = dom.iter().filter(|d| **d == Some(true)).count();
        let rated = dom.iter().filter(|d| d.is_some()).count();
        summary.push_str(&format!(
            "stage {s}: {hits}/{rated} classes peak on an owned prototype; {} of {k} prototypes dead\n",
            a.dead.len()
        ));
    }
    let p = dir.join("summary");
    write(&p, summary)?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dominance_and_order() {
        let a = PrototypeAnalysis {
            stage: 0,
            correlation: array![[0.1, 0.2, 0.7], [0.6, 0.3, 0.1], [0.0, 0.0, 0.0]],
            usage: vec![1.0, 1.0, 1.0],
            dead: vec![],
            owner: vec![1, 2, 0],
        };
        assert_eq!(a.owner_dominance(), vec![Some(true), Some(true), None]);
        assert_eq!(a.owner_order(), vec![2, 0, 1]);
    }

    #[test]
    fn heatmap_size() {
        let m = array![[0.0, 1.0], [0.5, 0.25]];
        let img = render_heatmap(&m, &[1, 0], 3);
        assert_eq!(img.dimensions(), (6, 6));
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
    }
}
