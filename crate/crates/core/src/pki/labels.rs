//! Label embeddings and the label correlation graph.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{MccError, Result};
use crate::graph::Graph;

/// Label semantics: raw embeddings and the row-stochastic adjacency built
/// from their correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPrior {
    pub descriptions: Vec<String>,
    /// `C × D_e`.
    pub raw_embeddings: Array2<f64>,
    /// `C × C`, rows sum to one.
    pub adjacency: Array2<f64>,
}

impl LabelPrior {
    pub fn new(descriptions: Vec<String>, raw_embeddings: Array2<f64>) -> Result<Self> {
        if descriptions.len() != raw_embeddings.nrows() {
            return Err(MccError::shape(format!(
                "{} descriptions for {} embeddings",
                descriptions.len(),
                raw_embeddings.nrows()
            )));
        }
        let adjacency = build_adjacency(&raw_embeddings)?;
        Ok(LabelPrior {
            descriptions,
            raw_embeddings,
            adjacency,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.raw_embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.raw_embeddings.ncols()
    }
}

/// Reads a label embedding file: a header line `C D_e`, then one
/// whitespace-separated row per label in manifest order.
pub fn load_label_embeddings(path: &Path, num_classes: usize) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| MccError::io(path, e))?;
    parse_label_embeddings(&text, path, num_classes)
}

pub fn parse_label_embeddings(text: &str, origin: &Path, num_classes: usize) -> Result<Array2<f64>> {
    let perr = |line: usize, m: String| MccError::Parse {
        path: origin.to_path_buf(),
        line,
        message: m,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| perr(1, "empty embedding file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| perr(hl + 1, format!("bad header token `{t}`"))))
        .collect::<Result<_>>()?;
    let [c, d] = dims[..] else {
        return Err(perr(hl + 1, "header must be `C D_e`".into()));
    };
    if c != num_classes {
        return Err(MccError::Data(format!(
            "embedding file has {c} rows, dataset has {num_classes} classes"
        )));
    }
    let mut out = Array2::zeros((c, d));
    let mut rows = 0;
    for (i, line) in lines {
        if rows == c {
            return Err(MccError::Data(format!("embedding file has more than {c} rows")));
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| perr(i + 1, format!("bad value `{t}`"))))
            .collect::<Result<_>>()?;
        if values.len() != d {
            return Err(perr(i + 1, format!("{} values, expected {d}", values.len())));
        }
        if values.iter().any(|v: &f64| !v.is_finite()) {
            return Err(perr(i + 1, "non-finite embedding value".into()));
        }
        out.row_mut(rows).assign(&ndarray::Array1::from(values));
        rows += 1;
    }
    if rows != c {
        return Err(MccError::Data(format!("embedding file has {rows} rows, expected {c}")));
    }
    Ok(out)
}

pub fn render_label_embeddings(embeddings: &Array2<f64>) -> String {
    let mut out = format!("{} {}\n", embeddings.nrows(), embeddings.ncols());
    for row in embeddings.rows() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

/// Deterministic unit vector derived from the label text alone.
pub fn fallback_embedding(label: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(label.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / n).collect()
}

pub fn fallback_label_embeddings(labels: &[String], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), dim));
    for (i, l) in labels.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::Array1::from(fallback_embedding(l, dim)));
    }
    out
}

/// Cosine similarities clipped below at zero, unit diagonal, rows normalised
/// to sum to one.
pub fn build_adjacency(embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    let c = embeddings.nrows();
    if c < 2 {
        return Err(MccError::config("label graph needs at least two labels"));
    }
    let norms: Vec<f64> = embeddings.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(MccError::Data(format!("label embedding {i} has zero norm")));
    }
    let mut a = Array2::zeros((c, c));
    for i in 0..c {
        for j in 0..c {
            a[[i, j]] = if i == j {
                1.0
            } else {
                (embeddings.row(i).dot(&embeddings.row(j)) / (norms[i] * norms[j])).max(0.0)
            };
        }
    }
    for mut row in a.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(a)
}

/// Two stacked graph convolutions: `A·leaky(A·E·W1)·W2`, slope 0.2.
pub fn gcn_forward(
    embeddings: &Array2<f64>,
    adjacency: &Array2<f64>,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
) -> Result<Array2<f64>> {
    let c = embeddings.nrows();
    if adjacency.dim() != (c, c) || w1.nrows() != embeddings.ncols() || w2.nrows() != w1.ncols() {
        return Err(MccError::shape("GCN operand shapes are incompatible"));
    }
    let mut g = Graph::no_grad();
    let e = g.constant(embeddings.clone());
    let a = g.constant(adjacency.clone());
    let w1 = g.constant(w1.clone());
    let w2 = g.constant(w2.clone());
    let out = gcn_on_graph(&mut g, a, e, w1, w2);
    Ok(g.value(out).clone())
}

pub const GCN_SLOPE: f64 = 0.2;

pub fn gcn_on_graph(
    g: &mut Graph,
    adjacency: crate::graph::Var,
    embeddings: crate::graph::Var,
    w1: crate::graph::Var,
    w2: crate::graph::Var,
) -> crate::graph::Var {
    let ae = g.matmul(adjacency, embeddings);
    let h = g.matmul(ae, w1);
    let h = g.leaky_relu(h, GCN_SLOPE);
    let ah = g.matmul(adjacency, h);
    g.matmul(ah, w2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn orthogonal_labels_give_identity() {
        let e = Array2::<f64>::eye(3);
        assert_eq!(build_adjacency(&e).unwrap(), Array2::<f64>::eye(3));
    }

    #[test]
    fn identical_labels_average() {
        let e = array![[1.0, 2.0], [1.0, 2.0]];
        let a = build_adjacency(&e).unwrap();
        for &v in a.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacency_errors() {
        assert!(build_adjacency(&array![[1.0, 0.0]]).is_err());
        assert!(build_adjacency(&array![[1.0, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn identity_gcn_pipeline() {
        let e = array![[0.5, 1.0, 0.0], [2.0, 0.0, 3.0], [0.0, 0.1, 0.2]];
        let i = Array2::<f64>::eye(3);
        assert_eq!(gcn_forward(&e, &i, &i, &i).unwrap(), e);
    }

    #[test]
    fn uniform_adjacency_collapses_rows() {
        let e = array![[0.5, -1.0], [2.0, 0.0], [0.0, 0.1]];
        let a = Array2::from_elem((3, 3), 1.0 / 3.0);
        let w1 = array![[1.0, -2.0, 0.5], [0.3, 0.2, -1.0]];
        let w2 = array![[1.0, 0.0], [0.5, 0.5], [-1.0, 2.0]];
        let out = gcn_forward(&e, &a, &w1, &w2).unwrap();
        for r in 1..3 {
            for d in 0..2 {
                assert!((out[[r, d]] - out[[0, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fallback_is_deterministic_unit_length() {
        let a = fallback_embedding("EnjoyLife", 64);
        let b = fallback_embedding("EnjoyLife", 64);
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_ne!(a, fallback_embedding("Happy", 64));
    }

    #[test]
    fn embedding_file_round_trip_and_errors() {
        let e = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let text = render_label_embeddings(&e);
        let p = Path::new("emb");
        assert_eq!(parse_label_embeddings(&text, p, 3).unwrap(), e);
        assert!(parse_label_embeddings(&text, p, 4).is_err());
        assert!(parse_label_embeddings("3 2\n1 0\n0 1\n", p, 3).is_err());
        assert!(parse_label_embeddings("2 2\n1 0\nNaN 1\n", p, 2).is_err());
    }
}
