use serde::{Deserialize, Serialize};

use crate::data::StaticFeatureKind;
use crate::error::{Error, Result};
use crate::tensor::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    SumAndMean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    #[default]
    Learned,
    Local,
}

impl std::str::FromStr for EdgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(EdgeMode::Learned),
            "local" => Ok(EdgeMode::Local),
            other => Err(Error::Config(format!(
                "edges must be 'learned' or 'local', got {other:?}"
            ))),
        }
    }
}

/// Graph convolution stack and readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub layer_dims: Vec<usize>,
    pub pooling: Pooling,
    /// Hidden width of the MLP head; defaults to the pooled width.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub use_residual: bool,
    #[serde(default = "yes")]
    pub use_jumping_knowledge: bool,
    pub window: usize,
    pub features_per_node: usize,
    pub lead: usize,
}

fn default_activation() -> Activation {
    Activation::Elu
}

fn yes() -> bool {
    true
}

impl GcnConfig {
    pub fn input_dim(&self) -> usize {
        self.window * self.features_per_node
    }

    /// Width of the per-node representation handed to pooling.
    pub fn node_repr_dim(&self) -> usize {
        if self.use_jumping_knowledge {
            self.layer_dims.iter().sum()
        } else {
            *self.layer_dims.last().unwrap_or(&0)
        }
    }

    pub fn pooled_dim(&self) -> usize {
        match self.pooling {
            Pooling::Mean => self.node_repr_dim(),
            Pooling::SumAndMean => 2 * self.node_repr_dim(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_hidden.unwrap_or_else(|| self.pooled_dim())
    }

    /// Whether layer `l` adds its input back (equal widths only).
    pub fn residual_at(&self, l: usize) -> bool {
        let d_in = if l == 0 {
            self.input_dim()
        } else {
            self.layer_dims[l - 1]
        };
        self.use_residual && d_in == self.layer_dims[l]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() {
            return Err(Error::Config("at least one graph convolution layer is required".into()));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {:?}",
                self.layer_dims
            )));
        }
        if self.window == 0 || self.features_per_node == 0 || self.lead == 0 {
            return Err(Error::Config(format!(
                "window, features per node and lead must be >= 1 (got {}, {}, {})",
                self.window, self.features_per_node, self.lead
            )));
        }
        if self.mlp_hidden == Some(0) {
            return Err(Error::Config("MLP hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Structure learner settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureConfig {
    #[serde(default = "default_alpha1")]
    pub alpha1: f64,
    #[serde(default = "default_alpha2")]
    pub alpha2: f64,
    /// Width of the static-feature embeddings.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Edge budget per node; the total budget is this times N.
    #[serde(default = "default_edges_per_node")]
    pub edges_per_node: usize,
    #[serde(default)]
    pub edges: EdgeMode,
    #[serde(default)]
    pub static_features: StaticFeatureKind,
}

fn default_alpha1() -> f64 {
    0.1
}
fn default_alpha2() -> f64 {
    2.0
}
fn default_embed_dim() -> usize {
    32
}
fn default_edges_per_node() -> usize {
    8
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig {
            alpha1: default_alpha1(),
            alpha2: default_alpha2(),
            embed_dim: default_embed_dim(),
            edges_per_node: default_edges_per_node(),
            edges: EdgeMode::Learned,
            static_features: StaticFeatureKind::TemporalMean,
        }
    }
}

impl StructureConfig {
    /// Total edge budget for `n` nodes, capped at `n(n-1)`.
    pub fn max_edges(&self, n: usize) -> usize {
        (self.edges_per_node * n).min(n * n.saturating_sub(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub gcn: GcnConfig,
    #[serde(default)]
    pub structure: StructureConfig,
}

/// One of the four ensemble members.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Gcn2a,
    Gcn2b,
    Gcn3a,
    Gcn3b,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Gcn2a, Preset::Gcn2b, Preset::Gcn3a, Preset::Gcn3b];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Gcn2a => "gcn2a",
            Preset::Gcn2b => "gcn2b",
            Preset::Gcn3a => "gcn3a",
            Preset::Gcn3b => "gcn3b",
        }
    }

    pub fn layer_dims(self) -> Vec<usize> {
        match self {
            Preset::Gcn2a => vec![250, 100],
            Preset::Gcn2b => vec![250, 250],
            Preset::Gcn3a => vec![200, 200, 200],
            Preset::Gcn3b => vec![250, 250, 250],
        }
    }

    pub fn pooling(self) -> Pooling {
        match self {
            Preset::Gcn2a | Preset::Gcn2b => Pooling::Mean,
            Preset::Gcn3a | Preset::Gcn3b => Pooling::SumAndMean,
        }
    }

    pub fn weight_decay(self) -> f64 {
        match self {
            Preset::Gcn2a | Preset::Gcn2b => 1e-6,
            Preset::Gcn3a => 1e-4,
            Preset::Gcn3b => 1e-3,
        }
    }

    pub fn gcn_config(self, window: usize, features_per_node: usize, lead: usize) -> GcnConfig {
        GcnConfig {
            layer_dims: self.layer_dims(),
            pooling: self.pooling(),
            mlp_hidden: None,
            activation: Activation::Elu,
            use_residual: true,
            use_jumping_knowledge: true,
            window,
            features_per_node,
            lead,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}; expected gcn2a, gcn2b, gcn3a or gcn3b")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_shapes() {
        let c = Preset::Gcn3a.gcn_config(3, 2, 1);
        assert_eq!(c.node_repr_dim(), 600);
        assert_eq!(c.pooled_dim(), 1200);
        assert_eq!(c.hidden_dim(), 1200);
        assert!(!c.residual_at(0));
        assert!(c.residual_at(1) && c.residual_at(2));
        let c = Preset::Gcn2a.gcn_config(3, 2, 1);
        assert!(!c.residual_at(1));
        assert_eq!("gcn2b".parse::<Preset>().unwrap(), Preset::Gcn2b);
        assert!("gcn4".parse::<Preset>().is_err());
    }

    #[test]
    fn jumping_knowledge_widths() {
        let mut c = Preset::Gcn2a.gcn_config(3, 2, 1);
        assert_eq!(c.node_repr_dim(), 350);
        c.use_jumping_knowledge = false;
        assert_eq!(c.node_repr_dim(), 100);
    }

    #[test]
    fn edge_budget_is_capped() {
        let s = StructureConfig::default();
        assert_eq!(s.max_edges(62), 8 * 62);
        assert_eq!(s.max_edges(5), 20);
    }

    #[test]
    fn config_json_defaults() {
        let c: ModelConfig = serde_json::from_str(
            r#"{"gcn":{"layer_dims":[4],"pooling":"sum_and_mean","window":3,"features_per_node":2,"lead":1}}"#,
        )
        .unwrap();
        assert_eq!(c.structure, StructureConfig::default());
        assert!(c.gcn.use_residual && c.gcn.use_jumping_knowledge);
        assert_eq!(c.gcn.activation, Activation::Elu);
    }
}
