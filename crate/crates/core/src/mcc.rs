//! Differentiable online clustering layer.
//!
//! Patches are softly assigned to the prototypes of their stage
//! (`softmax(cos / τ)`), re-expressed as the assignment-weighted combination
//! of prototypes, L2-normalised and mean-pooled. Prototypes are constants in
//! the backward pass; they move only through [`momentum_update`].

use ndarray::{Array2, ArrayView2, Axis};

use crate::cpi::PrototypeBank;
use crate::data::PatchFeatureMap;
use crate::error::{MccError, Result};
use crate::graph::{Graph, Var};

/// Prototypes whose batch assignment mass is at or below this are left alone.
pub const DEFAULT_MASS_FLOOR: f64 = 1e-4;

/// Floor used when L2-normalising reconstructed patches.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `P × K`, rows on the simplex.
    pub weights: Array2<f64>,
    /// `P × K` cosine similarities.
    pub similarities: Array2<f64>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedFeature {
    /// `P × D` convex combinations of prototypes, before normalisation.
    pub patches: Array2<f64>,
    /// Mean of the L2-normalised patches.
    pub pooled: Array2<f64>,
}

/// Graph nodes produced by [`assign_on_graph`] and [`reconstruct_on_graph`].
#[derive(Debug, Clone, Copy)]
pub struct StageNodes {
    pub similarities: Var,
    pub weights: Var,
    pub reconstructed: Var,
    pub pooled: Var,
}

/// `(similarities, weights)` for patch rows `patches` against `prototypes`.
pub fn assign_on_graph(g: &mut Graph, patches: Var, prototypes: Var, eps: f64, tau: f64) -> (Var, Var) {
    let sims = g.cosine_similarity(patches, prototypes, eps);
    let logits = g.scale(sims, 1.0 / tau);
    let weights = g.softmax_rows(logits);
    (sims, weights)
}

/// `(reconstructed patches, pooled vector)`.
pub fn reconstruct_on_graph(g: &mut Graph, weights: Var, prototypes: Var) -> (Var, Var) {
    let recon = g.matmul(weights, prototypes);
    let unit = g.normalize_rows(recon, NORMALIZE_EPS);
    let pooled = g.mean_rows(unit);
    (recon, pooled)
}

/// Full clustering-layer forward for one stage on a graph.
pub fn stage_on_graph(g: &mut Graph, patches: Var, prototypes: &Array2<f64>, eps: f64, tau: f64) -> StageNodes {
    let protos = g.constant(prototypes.clone());
    let (similarities, weights) = assign_on_graph(g, patches, protos, eps, tau);
    let (reconstructed, pooled) = reconstruct_on_graph(g, weights, protos);
    StageNodes {
        similarities,
        weights,
        reconstructed,
        pooled,
    }
}

fn check_stage(bank: &PrototypeBank, stage: usize, dim: usize) -> Result<()> {
    if stage >= bank.num_stages() {
        return Err(MccError::shape(format!(
            "stage {stage} requested, bank has {}",
            bank.num_stages()
        )));
    }
    let width = bank.stage(stage).ncols();
    if width != dim {
        return Err(MccError::shape(format!(
            "patch width {dim} does not match prototype width {width} at stage {stage}"
        )));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(MccError::config(format!("temperature must be positive, got {tau}")))
    }
}

pub fn soft_assignment(
    features: &PatchFeatureMap,
    bank: &PrototypeBank,
    stage: usize,
    tau: f64,
) -> Result<AssignmentResult> {
    check_tau(tau)?;
    check_stage(bank, stage, features.dim())?;
    let mut g = Graph::no_grad();
    let x = g.constant(features.patches().clone());
    let p = g.constant(bank.stage(stage).clone());
    let (sims, weights) = assign_on_graph(&mut g, x, p, bank.epsilon(), tau);
    Ok(AssignmentResult {
        weights: g.value(weights).clone(),
        similarities: g.value(sims).clone(),
        temperature: tau,
    })
}

pub fn reconstruct_feature_map(
    features: &PatchFeatureMap,
    assignment: &AssignmentResult,
    bank: &PrototypeBank,
    stage: usize,
) -> Result<ReconstructedFeature> {
    check_stage(bank, stage, features.dim())?;
    let (p, k) = assignment.weights.dim();
    if p != features.num_patches() || k != bank.num_prototypes() {
        return Err(MccError::shape(format!(
            "assignment is {p}x{k}, expected {}x{}",
            features.num_patches(),
            bank.num_prototypes()
        )));
    }
    let mut g = Graph::no_grad();
    let w = g.constant(assignment.weights.clone());
    let protos = g.constant(bank.stage(stage).clone());
    let (recon, pooled) = reconstruct_on_graph(&mut g, w, protos);
    Ok(ReconstructedFeature {
        patches: g.value(recon).clone(),
        pooled: g.value(pooled).clone(),
    })
}

/// Moves every prototype with enough assignment mass toward the
/// weight-averaged patch features assigned to it:
/// `Ê_k ← λ·Ê_k + (1−λ)·Σ_i W[i,k]·E_i / Σ_i W[i,k]`.
pub fn momentum_update_batch(
    bank: &mut PrototypeBank,
    stage: usize,
    patches: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    lambda: f64,
    mass_floor: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MccError::config(format!("momentum {lambda} outside [0, 1]")));
    }
    check_stage(bank, stage, patches.ncols())?;
    if weights.nrows() != patches.nrows() || weights.ncols() != bank.num_prototypes() {
        return Err(MccError::shape("assignment weights do not match patches and prototypes"));
    }
    bank.bump_version();
    if lambda == 1.0 {
        return Ok(());
    }
    let mass = weights.sum_axis(Axis(0));
    let weighted = weights.t().dot(&patches);
    let protos = bank.stage_mut(stage);
    for (k, mut row) in protos.rows_mut().into_iter().enumerate() {
        let m = mass[k];
        if m <= mass_floor {
            continue;
        }
        let target = weighted.row(k);
        row.zip_mut_with(&target, |e, &t| *e = lambda * *e + (1.0 - lambda) * (t / m));
    }
    Ok(())
}

pub fn momentum_update(
    bank: &mut PrototypeBank,
    stage: usize,
    features: &PatchFeatureMap,
    assignment: &AssignmentResult,
    lambda: f64,
) -> Result<()> {
    momentum_update_batch(
        bank,
        stage,
        features.patches().view(),
        assignment.weights.view(),
        lambda,
        DEFAULT_MASS_FLOOR,
    )
}

/// Assignment plus reconstruction; in training mode the bank is updated
/// after the outputs have been computed from its current state.
pub fn forward_stage(
    features: &PatchFeatureMap,
    bank: &mut PrototypeBank,
    stage: usize,
    tau: f64,
    lambda: f64,
    training: bool,
) -> Result<(ReconstructedFeature, AssignmentResult)> {
    let assignment = soft_assignment(features, bank, stage, tau)?;
    let recon = reconstruct_feature_map(features, &assignment, bank, stage)?;
    if training {
        momentum_update(bank, stage, features, &assignment, lambda)?;
    }
    Ok((recon, assignment))
}
