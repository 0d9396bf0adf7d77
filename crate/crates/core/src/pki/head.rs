//! Per-class linear read-out over the concatenated decoder outputs.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{MccError, Result};
use crate::graph::{Graph, Var};
use crate::params::{normal, Bound, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub num_classes: usize,
    pub width: usize,
    /// `C × width`, one weight vector per class.
    pub weight: ParamId,
    /// `1 × C`.
    pub bias: ParamId,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, num_classes: usize, width: usize) -> Self {
        let std = (1.0 / width as f64).sqrt();
        ClassifierHead {
            num_classes,
            width,
            weight: store.add("head.weight", normal(rng, num_classes, width, std)),
            bias: store.add("head.bias", Array2::zeros((1, num_classes))),
        }
    }

    /// Logits `1 × C` from query blocks, each `C × D`, joined along columns
    /// in the order given.
    pub fn logits(&self, g: &mut Graph, p: &Bound, blocks: &[Var]) -> Result<Var> {
        if blocks.is_empty() {
            return Err(MccError::shape("classifier needs at least one query block"));
        }
        let mut width = 0;
        for &b in blocks {
            let (c, d) = g.shape(b);
            if c != self.num_classes {
                return Err(MccError::shape(format!(
                    "query block has {c} rows, head has {} classes",
                    self.num_classes
                )));
            }
            width += d;
        }
        if width != self.width {
            return Err(MccError::shape(format!(
                "concatenated queries are {width} wide, head expects {}",
                self.width
            )));
        }
        let joined = if blocks.len() == 1 { blocks[0] } else { g.concat_cols(blocks) };
        let prod = g.mul(joined, p.var(self.weight));
        let per_class = g.sum_cols(prod);
        let row = g.transpose(per_class);
        Ok(g.add(row, p.var(self.bias)))
    }

    pub fn probabilities(&self, g: &mut Graph, p: &Bound, blocks: &[Var]) -> Result<Var> {
        let z = self.logits(g, p, blocks)?;
        Ok(g.sigmoid(z))
    }
}

/// Stand-alone scoring with explicit weights, for inspection.
pub fn classify(
    weight: &Array2<f64>,
    bias: &[f64],
    blocks: &[Array2<f64>],
) -> Result<Vec<f64>> {
    let mut store = ParamStore::new();
    let head = ClassifierHead {
        num_classes: weight.nrows(),
        width: weight.ncols(),
        weight: store.add("head.weight", weight.clone()),
        bias: store.add(
            "head.bias",
            Array2::from_shape_vec((1, bias.len()), bias.to_vec())
                .map_err(|e| MccError::shape(e.to_string()))?,
        ),
    };
    if bias.len() != head.num_classes {
        return Err(MccError::shape("bias length differs from class count"));
    }
    let mut g = Graph::no_grad();
    let p = store.bind(&mut g);
    let vars: Vec<Var> = blocks.iter().map(|b| g.constant(b.clone())).collect();
    let out = head.probabilities(&mut g, &p, &vars)?;
    Ok(g.value(out).iter().copied().collect())
}
