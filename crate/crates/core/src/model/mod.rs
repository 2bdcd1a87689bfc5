//! The graph network: structure learner, graph convolutions, pooling and
//! the regression head.

mod checkpoint;
mod config;
mod state;

pub use config::{EdgeMode, GcnConfig, ModelConfig, Pooling, Preset, StructureConfig};
pub use state::{
    gcn_layer, jumping_knowledge_concat, mlp_head, pool_graph, EdgeInit, Edges, Forward, GcnLayer, LayerNorm, MlpHead,
    MlpVars, ModelState,
};
