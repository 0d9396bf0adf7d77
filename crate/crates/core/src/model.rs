//! The full network: backbone stages, per-stage clustering layer, label
//! queries from the GCN, a decoder stack per (stage, branch), and the
//! classifier head.
//!
//! Branch 0 decodes against the pooled reconstructed feature, branch 1
//! against the projected original patches. The head reads the final
//! queries concatenated as `[Q̂_1, Q_1, Q̂_2, Q_2, ...]`.

use std::borrow::Cow;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::RunConfig;
use crate::cpi::PrototypeBank;
use crate::data::{Dataset, DatasetManifest, LabelMode, MultiLabelSample, StageShape};
use crate::error::{MccError, Result};
use crate::graph::{Graph, Var};
use crate::mcc::stage_on_graph;
use crate::params::{normal, xavier, Bound, ParamId, ParamStore};
use crate::pki::{gcn_on_graph, ClassifierHead, DecoderLayer, LabelPrior};

const BRANCH_RECONSTRUCTED: usize = 0;

/// Independent graphs a prediction pass is split into.
const PREDICT_SHARDS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    kind: usize,
    /// `C × D_model` learned offset added to the GCN queries.
    offset: ParamId,
    layers: Vec<DecoderLayer>,
}

#[derive(Debug, Clone, PartialEq)]
struct StageParams {
    proj_w: ParamId,
    proj_b: ParamId,
    /// `P_s × D_model` positional embedding of the patch memory.
    mem_pos: ParamId,
    branches: Vec<Branch>,
}

/// Dataset facts a model is tied to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSignature {
    pub mode: LabelMode,
    pub label_names: Vec<String>,
    pub input_shapes: Vec<StageShape>,
}

impl ModelSignature {
    pub fn of(manifest: &DatasetManifest) -> Self {
        ModelSignature {
            mode: manifest.mode,
            label_names: manifest.label_names.clone(),
            input_shapes: manifest.stage_shapes.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Errors if `manifest` describes data this model cannot consume.
    pub fn check(&self, manifest: &DatasetManifest) -> Result<()> {
        if manifest.num_classes != self.num_classes() {
            return Err(MccError::Data(format!(
                "dataset has {} classes, model was built for {}",
                manifest.num_classes,
                self.num_classes()
            )));
        }
        if manifest.stage_shapes != self.input_shapes {
            return Err(MccError::Data(format!(
                "dataset stages {:?} differ from the model's {:?}",
                manifest.stage_shapes, self.input_shapes
            )));
        }
        Ok(())
    }
}

/// Graph outputs for one sample.
#[derive(Debug, Clone)]
pub struct SampleOutputs {
    /// `1 × C`.
    pub logits: Var,
    pub probs: Var,
    /// Per used stage, `P_s × D_s` features fed to the clustering layer.
    pub patches: Vec<Var>,
    /// Per used stage, `P_s × K` assignment weights (absent without the
    /// reconstructed branch).
    pub weights: Vec<Option<Var>>,
}

/// Loss, gradients and clustering inputs of a group of training samples.
#[derive(Debug, Clone)]
pub struct ChunkGradients {
    pub loss: f64,
    pub grads: Vec<Array2<f64>>,
    /// `[sample][stage]` clustering-layer inputs.
    pub patches: Vec<Vec<Array2<f64>>>,
    pub weights: Vec<Vec<Option<Array2<f64>>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MccModel {
    pub config: RunConfig,
    pub signature: ModelSignature,
    pub prior: LabelPrior,
    pub store: ParamStore,
    /// Backbone stage indices feeding the decoders.
    pub stages: Vec<usize>,
    backbone: Backbone,
    gcn_w1: ParamId,
    gcn_w2: ParamId,
    stage_params: Vec<StageParams>,
    head: ClassifierHead,
}

impl MccModel {
    /// Builds and initialises a model. Initialisation depends only on the
    /// configuration (including its seed) and the signature.
    pub fn new(config: &RunConfig, signature: ModelSignature, prior: LabelPrior) -> Result<Self> {
        config.validate()?;
        let c = signature.num_classes();
        if prior.num_classes() != c {
            return Err(MccError::Data(format!(
                "label prior covers {} classes, data has {c}",
                prior.num_classes()
            )));
        }
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(
            BackboneConfig::from_run(config),
            &signature.input_shapes,
            &mut store,
            &mut rng,
        )?;
        let stages = config.stages.resolve(backbone.num_stages())?;

        let gcn_w1 = store.add("gcn.w1", xavier(&mut rng, prior.dim(), d));
        let gcn_w2 = store.add("gcn.w2", xavier(&mut rng, d, d));

        let branch_kinds: Vec<usize> = if config.use_reconstruction { vec![0, 1] } else { vec![1] };
        let mut stage_params = Vec::with_capacity(stages.len());
        for &s in &stages {
            let shape = backbone.stage_shapes()[s];
            let pre = format!("stage{s}");
            let proj_w = store.add(format!("{pre}.proj.w"), xavier(&mut rng, shape.dim, d));
            let proj_b = store.add(format!("{pre}.proj.b"), Array2::zeros((1, d)));
            let mem_pos = store.add(format!("{pre}.mem_pos"), normal(&mut rng, shape.patches(), d, 0.02));
            let mut branches: Vec<Branch> = Vec::new();
            for &kind in &branch_kinds {
                let bpre = format!("{pre}.branch{kind}");
                let offset = store.add(format!("{bpre}.query_offset"), Array2::zeros((c, d)));
                let layers = match branches.first() {
                    Some(first) if config.share_branches => first.layers.clone(),
                    _ => (0..config.decoder_layers)
                        .map(|l| {
                            DecoderLayer::new(
                                &mut store,
                                &mut rng,
                                &format!("{bpre}.layer{l}"),
                                d,
                                config.heads,
                                config.ffn_mult,
                            )
                        })
                        .collect(),
                };
                branches.push(Branch { kind, offset, layers });
            }
            stage_params.push(StageParams {
                proj_w,
                proj_b,
                mem_pos,
                branches,
            });
        }
        let width = stages.len() * branch_kinds.len() * d;
        let head = ClassifierHead::new(&mut store, &mut rng, c, width);

        Ok(MccModel {
            config: config.clone(),
            signature,
            prior,
            store,
            stages,
            backbone,
            gcn_w1,
            gcn_w2,
            stage_params,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.signature.num_classes()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    /// Errors unless `bank` has one matrix per backbone stage with matching
    /// widths.
    pub fn check_bank(&self, bank: &PrototypeBank) -> Result<()> {
        let dims: Vec<usize> = self.backbone.stage_shapes().iter().map(|s| s.dim).collect();
        if bank.dims() != dims {
            return Err(MccError::Data(format!(
                "prototype bank widths {:?} do not match backbone stages {:?}",
                bank.dims(),
                dims
            )));
        }
        Ok(())
    }

    /// Stage features for every backbone stage, as a dataset with the
    /// original labels. Borrowed when the backbone is a passthrough.
    pub fn feature_dataset<'a>(&self, params: &ParamStore, data: &'a Dataset) -> Result<Cow<'a, Dataset>> {
        if self.backbone.config().mode == crate::config::BackboneMode::Passthrough {
            return Ok(Cow::Borrowed(data));
        }
        let all: Vec<usize> = (0..self.backbone.num_stages()).collect();
        let samples: Vec<MultiLabelSample> = data
            .samples
            .par_iter()
            .map(|s| {
                Ok(MultiLabelSample {
                    sample_id: s.sample_id.clone(),
                    features_by_stage: self.backbone.extract_stages(params, s, &all)?,
                    labels: s.labels.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let mut manifest = data.manifest.clone();
        manifest.stage_shapes = self.backbone.stage_shapes().to_vec();
        Ok(Cow::Owned(Dataset::new(manifest, samples)?))
    }

    /// Label queries `C × D_model` from the GCN; shared by every sample on
    /// a graph.
    pub fn queries(&self, g: &mut Graph, p: &Bound) -> Var {
        let e = g.constant(self.prior.raw_embeddings.clone());
        let a = g.constant(self.prior.adjacency.clone());
        gcn_on_graph(g, a, e, p.var(self.gcn_w1), p.var(self.gcn_w2))
    }

    /// Forward pass of one sample on `g`, with parameters bound as `p`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, bank: &PrototypeBank, sample: &MultiLabelSample) -> Result<SampleOutputs> {
        let queries = self.queries(g, p);
        self.forward_with(g, p, queries, bank, sample)
    }

    /// As [`MccModel::forward`], reusing precomputed `queries`.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Var,
        bank: &PrototypeBank,
        sample: &MultiLabelSample,
    ) -> Result<SampleOutputs> {
        let feats = self.backbone.forward(g, p, sample, &self.stages)?;
        let c = self.num_classes();
        let d = self.config.d_model;
        let zero_qpos = g.constant(Array2::zeros((c, d)));
        let zero_mpos = g.constant(Array2::zeros((1, d)));

        let mut blocks = Vec::new();
        let mut weights = Vec::with_capacity(self.stages.len());
        for ((&s, sp), &x) in self.stages.iter().zip(&self.stage_params).zip(&feats) {
            let mut w_out = None;
            for br in &sp.branches {
                let (memory, mem_pos) = if br.kind == BRANCH_RECONSTRUCTED {
                    let nodes = stage_on_graph(g, x, bank.stage(s), bank.epsilon(), self.config.tau);
                    w_out = Some(nodes.weights);
                    let pooled = g.linear(nodes.pooled, p.var(sp.proj_w), p.var(sp.proj_b));
                    (pooled, zero_mpos)
                } else {
                    let mem = g.linear(x, p.var(sp.proj_w), p.var(sp.proj_b));
                    (mem, p.var(sp.mem_pos))
                };
                let mut q = g.add(queries, p.var(br.offset));
                for layer in &br.layers {
                    q = layer.forward(g, p, q, zero_qpos, memory, mem_pos)?;
                }
                blocks.push(q);
            }
            weights.push(w_out);
        }
        let logits = self.head.logits(g, p, &blocks)?;
        let probs = g.sigmoid(logits);
        Ok(SampleOutputs {
            logits,
            probs,
            patches: feats,
            weights,
        })
    }

    /// Summed loss and gradients over `samples`, each sample's class-mean
    /// loss scaled by `scale`, computed on a single graph.
    pub fn chunk_gradients(&self, bank: &PrototypeBank, samples: &[&MultiLabelSample], scale: f64) -> Result<ChunkGradients> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let queries = self.queries(&mut g, &p);
        let mut total: Option<Var> = None;
        let mut outs = Vec::with_capacity(samples.len());
        for sample in samples {
            let out = self.forward_with(&mut g, &p, queries, bank, sample)?;
            let y = Array2::from_shape_vec((1, sample.labels.len()), sample.label_row())
                .map_err(|e| MccError::shape(e.to_string()))?;
            let loss = g.asymmetric_loss(out.probs, y, self.config.gamma_pos, self.config.gamma_neg);
            total = Some(match total {
                Some(t) => g.add(t, loss),
                None => loss,
            });
            outs.push(out);
        }
        let total = total.ok_or_else(|| MccError::Data("empty gradient chunk".into()))?;
        let total = g.scale(total, scale);
        let loss = g.scalar(total);
        g.backward(total);
        let grads = p
            .vars()
            .iter()
            .zip(self.store.values())
            .map(|(&v, val)| g.grad(v).cloned().unwrap_or_else(|| Array2::zeros(val.dim())))
            .collect();
        Ok(ChunkGradients {
            loss,
            grads,
            patches: outs.iter().map(|o| o.patches.iter().map(|&v| g.value(v).clone()).collect()).collect(),
            weights: outs
                .iter()
                .map(|o| o.weights.iter().map(|w| w.map(|v| g.value(v).clone())).collect())
                .collect(),
        })
    }

    /// `N × C` probabilities under `params` (e.g. the EMA shadow).
    pub fn predict(&self, params: &ParamStore, bank: &PrototypeBank, data: &Dataset) -> Result<Array2<f64>> {
        self.signature.check(&data.manifest)?;
        let c = self.num_classes();
        let refs: Vec<&MultiLabelSample> = data.samples.iter().collect();
        let chunk = refs.len().div_ceil(PREDICT_SHARDS).max(1);
        let rows: Vec<Vec<f64>> = refs
            .par_chunks(chunk)
            .map(|part| {
                let mut g = Graph::no_grad();
                let p = params.bind(&mut g);
                let queries = self.queries(&mut g, &p);
                part.iter()
                    .map(|s| {
                        let out = self.forward_with(&mut g, &p, queries, bank, s)?;
                        Ok(g.value(out.probs).iter().copied().collect())
                    })
                    .collect::<Result<Vec<Vec<f64>>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let mut out = Array2::zeros((rows.len(), c));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(MccError::Numerical("non-finite prediction".into()));
        }
        Ok(out)
    }

    /// Assignment weights of every used stage for one sample.
    pub fn assignments(&self, params: &ParamStore, bank: &PrototypeBank, sample: &MultiLabelSample) -> Result<Vec<Array2<f64>>> {
        let feats = self.backbone.extract_stages(params, sample, &self.stages)?;
        feats
            .iter()
            .zip(&self.stages)
            .map(|(f, &s)| Ok(crate::mcc::soft_assignment(f, bank, s, self.config.tau)?.weights))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpi::{allocate_prototypes, build_prototype_bank, BankOptions};
    use crate::data::{class_counts, generate_synthetic, SyntheticSpec};
    use crate::pki::fallback_label_embeddings;

    fn tiny() -> (RunConfig, Dataset) {
        let spec = SyntheticSpec {
            samples_per_split: [24, 4, 4],
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let cfg = RunConfig {
            k: 12,
            d_model: 16,
            decoder_layers: 1,
            ..RunConfig::default()
        };
        (cfg, data.train)
    }

    fn build(cfg: &RunConfig, data: &Dataset) -> (MccModel, PrototypeBank) {
        let emb = fallback_label_embeddings(&data.manifest.label_names, cfg.label_dim);
        let prior = LabelPrior::new(data.manifest.label_names.clone(), emb).unwrap();
        let model = MccModel::new(cfg, ModelSignature::of(&data.manifest), prior).unwrap();
        let plan = allocate_prototypes(&class_counts(data), cfg.k).unwrap();
        let bank = build_prototype_bank(data, &plan, &[0, 1], &BankOptions::default()).unwrap();
        (model, bank)
    }

    #[test]
    fn forward_shapes_and_range() {
        let (cfg, data) = tiny();
        let (model, bank) = build(&cfg, &data);
        let probs = model.predict(&model.store, &bank, &data).unwrap();
        assert_eq!(probs.dim(), (24, 6));
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(model.head().width, 2 * 2 * 16);
    }

    #[test]
    fn ablation_drops_the_reconstructed_branch() {
        let (mut cfg, data) = tiny();
        cfg.use_reconstruction = false;
        let (model, bank) = build(&cfg, &data);
        assert_eq!(model.head().width, 2 * 16);
        let g = model.chunk_gradients(&bank, &[&data.samples[0]], 1.0).unwrap();
        assert!(g.weights[0].iter().all(|w| w.is_none()));
    }

    #[test]
    fn sharing_reduces_parameters() {
        let (mut cfg, data) = tiny();
        let separate = build(&cfg, &data).0.store.num_scalars();
        cfg.share_branches = true;
        let shared = build(&cfg, &data).0.store.num_scalars();
        assert!(shared < separate);
    }

    #[test]
    fn initialisation_is_seeded() {
        let (cfg, data) = tiny();
        assert_eq!(build(&cfg, &data).0.store, build(&cfg, &data).0.store);
    }

    #[test]
    fn gradients_reach_decoders_and_head() {
        let (cfg, data) = tiny();
        let (model, bank) = build(&cfg, &data);
        let g = model.chunk_gradients(&bank, &[&data.samples[0]], 1.0).unwrap();
        assert!(g.loss.is_finite() && g.loss > 0.0);
        let names = model.store.names();
        for key in ["head.weight", "gcn.w1", "stage1.branch0.layer0.cross_attn.wv", "stage0.branch1.layer0.ff1.w"] {
            let i = names.iter().position(|n| n == key).unwrap();
            assert!(g.grads[i].iter().any(|&v| v != 0.0), "{key}");
        }
    }
}
