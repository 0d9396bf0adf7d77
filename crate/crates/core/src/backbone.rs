//! Multi-stage feature extractor.
//!
//! In passthrough mode the dataset's precomputed stages are returned as
//! they are. In conv mode the dataset's first stage is treated as a raw
//! `H × W × D` grid and run through a stack of 3×3 stride-`s` convolutions
//! (padding 1, ReLU), one per configured width; each output is a stage.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::config::{BackboneMode, RunConfig};
use crate::data::{MultiLabelSample, PatchFeatureMap, StageShape};
use crate::error::{MccError, Result};
use crate::graph::{Graph, Var};
use crate::params::{xavier, Bound, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    pub widths: Vec<usize>,
    pub downsample: Vec<usize>,
}

impl BackboneConfig {
    pub fn passthrough() -> Self {
        BackboneConfig {
            mode: BackboneMode::Passthrough,
            widths: Vec::new(),
            downsample: Vec::new(),
        }
    }

    pub fn from_run(cfg: &RunConfig) -> Self {
        BackboneConfig {
            mode: cfg.backbone_mode,
            widths: cfg.backbone_widths.clone(),
            downsample: cfg.backbone_downsample.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    /// `9·D_in × D_out`, rows ordered by kernel offset then input channel.
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

/// A backbone bound to the input stage shapes of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    input_shapes: Vec<StageShape>,
    output_shapes: Vec<StageShape>,
    layers: Vec<ConvLayer>,
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl Backbone {
    /// Registers conv parameters (if any) in `store`.
    pub fn new(
        config: BackboneConfig,
        input_shapes: &[StageShape],
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_shapes.is_empty() {
            return Err(MccError::config("backbone needs at least one input stage"));
        }
        let mut layers = Vec::new();
        let output_shapes = match config.mode {
            BackboneMode::Passthrough => input_shapes.to_vec(),
            BackboneMode::Conv => {
                if config.widths.is_empty() || config.widths.len() != config.downsample.len() {
                    return Err(MccError::config("conv backbone needs one downsample factor per width"));
                }
                let mut shape = input_shapes[0];
                let mut out = Vec::new();
                for (i, (&w, &s)) in config.widths.iter().zip(&config.downsample).enumerate() {
                    if w == 0 || s == 0 {
                        return Err(MccError::config("backbone widths and strides must be positive"));
                    }
                    layers.push(ConvLayer {
                        weight: store.add(format!("backbone.{i}.weight"), xavier(rng, 9 * shape.dim, w)),
                        bias: store.add(format!("backbone.{i}.bias"), Array2::zeros((1, w))),
                        stride: s,
                    });
                    shape = StageShape::new(conv_out(shape.height, s), conv_out(shape.width, s), w);
                    out.push(shape);
                }
                out
            }
        };
        Ok(Backbone {
            config,
            input_shapes: input_shapes.to_vec(),
            output_shapes,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_stages(&self) -> usize {
        self.output_shapes.len()
    }

    /// Output stage shapes, shallow to deep.
    pub fn stage_shapes(&self) -> &[StageShape] {
        &self.output_shapes
    }

    fn check_sample(&self, sample: &MultiLabelSample) -> Result<()> {
        let needed = match self.config.mode {
            BackboneMode::Passthrough => self.input_shapes.len(),
            BackboneMode::Conv => 1,
        };
        if sample.features_by_stage.len() < needed {
            return Err(MccError::SampleShape {
                sample_id: sample.sample_id.clone(),
                message: format!("{} stages, backbone needs {needed}", sample.features_by_stage.len()),
            });
        }
        for (s, shape) in self.input_shapes.iter().take(needed).enumerate() {
            if sample.features_by_stage[s].shape() != *shape {
                return Err(MccError::SampleShape {
                    sample_id: sample.sample_id.clone(),
                    message: format!("stage {s} is {:?}, backbone expects {shape:?}", sample.features_by_stage[s].shape()),
                });
            }
        }
        Ok(())
    }

    /// Graph nodes for the requested stages, each `P_s × D_s`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, sample: &MultiLabelSample, stages: &[usize]) -> Result<Vec<Var>> {
        if let Some(&bad) = stages.iter().find(|&&s| s >= self.num_stages()) {
            return Err(MccError::config(format!(
                "stage {bad} requested but the backbone has {}",
                self.num_stages()
            )));
        }
        self.check_sample(sample)?;
        match self.config.mode {
            BackboneMode::Passthrough => Ok(stages
                .iter()
                .map(|&s| g.constant(sample.features_by_stage[s].patches().clone()))
                .collect()),
            BackboneMode::Conv => {
                let deepest = stages.iter().copied().max().unwrap_or(0);
                let mut x = g.constant(sample.features_by_stage[0].patches().clone());
                let mut shape = self.input_shapes[0];
                let mut outs = Vec::with_capacity(deepest + 1);
                for layer in &self.layers[..=deepest] {
                    let cols = im2col(g, x, shape, layer.stride);
                    let y = g.linear(cols, p.var(layer.weight), p.var(layer.bias));
                    x = g.relu(y);
                    let d = g.shape(x).1;
                    shape = StageShape::new(conv_out(shape.height, layer.stride), conv_out(shape.width, layer.stride), d);
                    outs.push(x);
                }
                Ok(stages.iter().map(|&s| outs[s]).collect())
            }
        }
    }

    /// Stage feature maps as plain values.
    pub fn extract_stages(
        &self,
        store: &ParamStore,
        sample: &MultiLabelSample,
        stages: &[usize],
    ) -> Result<Vec<PatchFeatureMap>> {
        let mut g = Graph::no_grad();
        let p = store.bind(&mut g);
        let vars = self.forward(&mut g, &p, sample, stages)?;
        vars.iter()
            .zip(stages)
            .map(|(&v, &s)| {
                let sh = self.output_shapes[s];
                PatchFeatureMap::new(g.value(v).clone(), (sh.height, sh.width))
            })
            .collect()
    }
}

/// `P_out × 9·D` patch matrix for a 3×3 kernel with padding 1.
fn im2col(g: &mut Graph, x: Var, shape: StageShape, stride: usize) -> Var {
    let (h, w) = (shape.height, shape.width);
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let mut blocks = Vec::with_capacity(9);
    for ky in 0..3 {
        for kx in 0..3 {
            let rows: Vec<Option<usize>> = (0..ho * wo)
                .map(|o| {
                    let iy = (o / wo * stride + ky) as isize - 1;
                    let ix = (o % wo * stride + kx) as isize - 1;
                    (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w)
                        .then(|| iy as usize * w + ix as usize)
                })
                .collect();
            blocks.push(g.gather_rows(x, rows));
        }
    }
    g.concat_cols(&blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(shapes: &[StageShape], fill: impl Fn(usize, usize) -> f64) -> MultiLabelSample {
        MultiLabelSample {
            sample_id: "s".into(),
            features_by_stage: shapes
                .iter()
                .map(|sh| {
                    PatchFeatureMap::new(Array2::from_shape_fn((sh.patches(), sh.dim), |(i, j)| fill(i, j)), (sh.height, sh.width))
                        .unwrap()
                })
                .collect(),
            labels: vec![true],
        }
    }

    fn conv(widths: Vec<usize>, down: Vec<usize>) -> BackboneConfig {
        BackboneConfig {
            mode: BackboneMode::Conv,
            widths,
            downsample: down,
        }
    }

    #[test]
    fn passthrough_single_vector() {
        let shapes = [StageShape::new(1, 1, 5)];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(BackboneConfig::passthrough(), &shapes, &mut store, &mut rng).unwrap();
        let s = sample(&shapes, |_, j| j as f64 * 0.1);
        let out = bb.extract_stages(&store, &s, &[0]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], s.features_by_stage[0]);
    }

    #[test]
    fn conv_grids_halve() {
        let shapes = [StageShape::new(8, 8, 3)];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(conv(vec![32, 64], vec![2, 2]), &shapes, &mut store, &mut rng).unwrap();
        assert_eq!(bb.stage_shapes(), &[StageShape::new(4, 4, 32), StageShape::new(2, 2, 64)]);
        let s = sample(&shapes, |i, j| ((i * 3 + j) % 7) as f64 - 3.0);
        let out = bb.extract_stages(&store, &s, &[0, 1]).unwrap();
        assert_eq!(out[0].grid(), (4, 4));
        assert_eq!(out[1].grid(), (2, 2));
        assert!(bb.extract_stages(&store, &s, &[2]).is_err());
    }

    #[test]
    fn zero_input_gives_zero_maps() {
        let shapes = [StageShape::new(5, 3, 2)];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(conv(vec![4, 6], vec![2, 1]), &shapes, &mut store, &mut rng).unwrap();
        let s = sample(&shapes, |_, _| 0.0);
        for m in bb.extract_stages(&store, &s, &[0, 1]).unwrap() {
            assert!(m.patches().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let shapes = [StageShape::new(3, 4, 2)];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::new(conv(vec![3], vec![2]), &shapes, &mut store, &mut rng).unwrap();
        let s = sample(&shapes, |i, j| (i as f64 * 0.37 + j as f64 * 1.1).sin());
        let out = bb.extract_stages(&store, &s, &[0]).unwrap();
        let w = store.get(bb.layers[0].weight);
        let x = s.features_by_stage[0].patches();
        for oy in 0..2 {
            for ox in 0..2 {
                for co in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 3 || ix >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x[[iy as usize * 4 + ix as usize, ci]] * w[[(ky * 3 + kx) * 2 + ci, co]];
                            }
                        }
                    }
                    let got = out[0].patches()[[oy * 2 + ox, co]];
                    assert!((got - acc.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }
}
