//! Label-side knowledge: embeddings, the correlation graph, query decoding
//! and the classifier head.

mod decoder;
mod head;
mod labels;

pub use decoder::{Attention, DecoderLayer, LayerNorm, LAYER_NORM_EPS};
pub use head::{classify, ClassifierHead};
pub use labels::{
    build_adjacency, fallback_embedding, fallback_label_embeddings, gcn_forward, gcn_on_graph,
    load_label_embeddings, parse_label_embeddings, render_label_embeddings, LabelPrior, GCN_SLOPE,
};
