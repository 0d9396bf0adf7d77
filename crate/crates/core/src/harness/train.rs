use log::{info, warn};
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::cpi::{allocate_prototypes, build_prototype_bank, BankOptions, KMeansOptions, PrototypeBank};
use crate::data::{class_counts, Dataset, MultiLabelSample};
use crate::error::{MccError, Result};
use crate::mcc::momentum_update_batch;
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{MccModel, ModelSignature};
use crate::optim::OneCycle;
use crate::pki::{fallback_label_embeddings, load_label_embeddings, LabelPrior};

/// Gradient shards per batch. Fixed, so that the summation order and hence
/// the result do not depend on the thread count.
const GRAD_SHARDS: usize = 4;

/// Label prior from the configured embedding file, or the deterministic
/// text-hash fallback when none is configured.
pub fn load_label_prior(config: &RunConfig, label_names: &[String]) -> Result<LabelPrior> {
    let emb = match &config.label_embeddings {
        Some(path) => load_label_embeddings(path, label_names.len())?,
        None => fallback_label_embeddings(label_names, config.label_dim),
    };
    LabelPrior::new(label_names.to_vec(), emb)
}

pub fn bank_options(config: &RunConfig) -> BankOptions {
    BankOptions {
        kmeans: KMeansOptions {
            batch_size: config.kmeans_batch,
            iters: config.kmeans_iters,
            seed: config.seed,
        },
        epsilon: config.epsilon,
        momentum: config.lambda,
    }
}

/// Frequency-aware allocation and per-class clustering over the model's
/// stage features under its current parameters.
pub fn initialise_bank(model: &MccModel, data: &Dataset) -> Result<PrototypeBank> {
    let plan = allocate_prototypes(&class_counts(data), model.config.k)?;
    let feats = model.feature_dataset(&model.store, data)?;
    let all: Vec<usize> = (0..model.backbone().num_stages()).collect();
    build_prototype_bank(&feats, &plan, &all, &bank_options(&model.config))
}

/// Model and bank ready for step 0.
pub fn initial_checkpoint(config: &RunConfig, train: &Dataset, bank: Option<PrototypeBank>) -> Result<Checkpoint> {
    let prior = load_label_prior(config, &train.manifest.label_names)?;
    let model = MccModel::new(config, ModelSignature::of(&train.manifest), prior)?;
    let mut bank = match bank {
        Some(b) => b,
        None => initialise_bank(&model, train)?,
    };
    model.check_bank(&bank)?;
    bank.set_momentum(config.lambda)?;
    Ok(Checkpoint::initial(model, bank))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub last_lr: f64,
    pub val: Option<MetricsReport>,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let mut s = format!("epoch {} loss {} lr {}", self.epoch, self.mean_loss, self.last_lr);
        if let Some(r) = &self.val {
            s.push_str(&format!(
                " val_macro_f1 {} val_samples_f1 {} val_map {}",
                r.macro_f1, r.samples_f1, r.map
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    /// Learning rate used at every optimisation step.
    pub lr_log: Vec<f64>,
}

/// Evaluates with the EMA parameters; the bank is read, never updated.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, threshold: f64) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(MccError::Data("cannot evaluate on an empty dataset".into()));
    }
    let scores = ckpt.model.predict(&ckpt.ema.shadow, &ckpt.bank, data)?;
    compute_metrics(&scores, &data.truth_matrix(), data.manifest.mode, threshold)
}

fn grad_norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Trains from scratch: builds the model (and bank, unless given), then
/// runs `config.epochs` epochs.
pub fn train(config: &RunConfig, train: &Dataset, val: Option<&Dataset>, bank: Option<PrototypeBank>) -> Result<TrainOutcome> {
    let ckpt = initial_checkpoint(config, train, bank)?;
    train_from(ckpt, train, val)
}

/// Continues training `ckpt` until `config.epochs` epochs are done.
pub fn train_from(ckpt: Checkpoint, train: &Dataset, val: Option<&Dataset>) -> Result<TrainOutcome> {
    train_epochs(ckpt, train, val, usize::MAX)
}

/// Like [`train_from`] but stops after at most `max_epochs` further epochs.
/// The schedule always spans the configured run, so stopping and resuming
/// reproduces an uninterrupted run.
pub fn train_epochs(mut ckpt: Checkpoint, train: &Dataset, val: Option<&Dataset>, max_epochs: usize) -> Result<TrainOutcome> {
    let cfg = ckpt.model.config.clone();
    ckpt.model.signature.check(&train.manifest)?;
    if train.is_empty() {
        return Err(MccError::Data("training set is empty".into()));
    }
    if let Some(v) = val {
        ckpt.model.signature.check(&v.manifest)?;
    }
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = OneCycle::new(cfg.max_lr, (cfg.epochs * steps_per_epoch).max(1), cfg.pct_start);
    let mut records = Vec::new();
    let mut lr_log = Vec::new();

    let stop = cfg.epochs.min(ckpt.epoch.saturating_add(max_epochs));
    while ckpt.epoch < stop {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ckpt.rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            lr = schedule.lr(ckpt.step as usize);
            let scale = 1.0 / batch.len() as f64;
            let (model, bank) = (&ckpt.model, &ckpt.bank);
            let members: Vec<&MultiLabelSample> = batch.iter().map(|&i| &train.samples[i]).collect();
            let shard = members.len().div_ceil(GRAD_SHARDS);
            let shards = members
                .par_chunks(shard)
                .map(|part| model.chunk_gradients(bank, part, scale))
                .collect::<Result<Vec<_>>>()?;

            let mut grads: Vec<Array2<f64>> = shards[0].grads.clone();
            let mut loss = shards[0].loss;
            for s in &shards[1..] {
                loss += s.loss;
                for (a, b) in grads.iter_mut().zip(&s.grads) {
                    *a += b;
                }
            }
            let gnorm = grad_norm(&grads);
            if !loss.is_finite() || !gnorm.is_finite() {
                return Err(MccError::Numerical(format!(
                    "non-finite training state at step {} (epoch {}): loss {loss}, lr {lr}, grad norm {gnorm}",
                    ckpt.step, ckpt.epoch
                )));
            }
            loss_sum += loss / scale;

            ckpt.optimizer.update(&mut ckpt.model.store, &grads, lr);
            ckpt.ema.update(&ckpt.model.store);
            if cfg.use_reconstruction {
                for (slot, &s) in ckpt.model.stages.iter().enumerate() {
                    let patches: Vec<ArrayView2<f64>> = shards
                        .iter()
                        .flat_map(|c| c.patches.iter().map(|p| p[slot].view()))
                        .collect();
                    let weights: Vec<ArrayView2<f64>> = shards
                        .iter()
                        .flat_map(|c| c.weights.iter())
                        .map(|w| w[slot].as_ref().expect("reconstructed branch present").view())
                        .collect();
                    let x = concatenate(Axis(0), &patches).map_err(|e| MccError::shape(e.to_string()))?;
                    let w = concatenate(Axis(0), &weights).map_err(|e| MccError::shape(e.to_string()))?;
                    momentum_update_batch(&mut ckpt.bank, s, x.view(), w.view(), cfg.lambda, cfg.mass_floor)?;
                }
            }
            lr_log.push(lr);
            ckpt.step += 1;
        }
        ckpt.epoch += 1;
        let report = match val {
            Some(v) => match evaluate(&ckpt, v, cfg.threshold) {
                Ok(r) => Some(r),
                Err(MccError::Data(m)) => {
                    warn!("validation skipped: {m}");
                    None
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        let rec = EpochRecord {
            epoch: ckpt.epoch,
            mean_loss: loss_sum / n as f64,
            last_lr: lr,
            val: report,
        };
        info!("{}", rec.log_line());
        records.push(rec);
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        epochs: records,
        lr_log,
    })
}
