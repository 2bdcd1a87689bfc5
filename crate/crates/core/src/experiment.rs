//! End-to-end plumbing from a grid to trained models: sample preparation,
//! model construction and the learned-vs-local edge ablation.

use serde::{Deserialize, Serialize};

use crate::data::{
    build_samples, compute_oni_series, land_filter_nodes, local_adjacency, split_boundary, static_node_features,
    GridSet, NodeIndex, SampleSet,
};
use crate::error::{Error, Result};
use crate::model::{EdgeInit, EdgeMode, GcnConfig, ModelConfig, ModelState, Pooling, StructureConfig};
use crate::tensor::Activation;
use crate::train::{evaluate, train_parallel, EvalReport, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub window: usize,
    pub lead: usize,
    /// Fraction of months used for training; the rest is the test period.
    pub train_fraction: f64,
    pub oni_node: bool,
    /// Running-mean length for the ONI.
    pub oni_months: usize,
    pub local_radius_deg: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            window: 3,
            lead: 1,
            train_fraction: 0.7,
            oni_node: true,
            oni_months: 3,
            local_radius_deg: 5.0,
        }
    }
}

/// Overrides for the graph network; unset fields come from the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub layer_dims: Option<Vec<usize>>,
    pub pooling: Option<Pooling>,
    pub mlp_hidden: Option<usize>,
    pub use_residual: Option<bool>,
    pub use_jumping_knowledge: Option<bool>,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub structure: StructureConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn model_config(&self, features_per_node: usize) -> ModelConfig {
        let preset = self.train.preset;
        let m = &self.model;
        ModelConfig {
            gcn: GcnConfig {
                layer_dims: m.layer_dims.clone().unwrap_or_else(|| preset.layer_dims()),
                pooling: m.pooling.unwrap_or_else(|| preset.pooling()),
                mlp_hidden: m.mlp_hidden,
                activation: Activation::Elu,
                use_residual: m.use_residual.unwrap_or(true),
                use_jumping_knowledge: m.use_jumping_knowledge.unwrap_or(true),
                window: self.data.window,
                features_per_node,
                lead: self.data.lead,
            },
            structure: self.structure.clone(),
        }
    }
}

/// Samples and graph nodes derived from one grid.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub nodes: NodeIndex,
    pub train: SampleSet,
    pub test: SampleSet,
    /// First month of the test period.
    pub boundary: usize,
    pub local_radius_deg: f64,
}

pub fn prepare(g: &GridSet, cfg: &DataConfig) -> Result<Prepared> {
    let mut nodes = land_filter_nodes(g)?;
    if cfg.oni_node {
        nodes = nodes.with_oni_node();
    }
    let oni = compute_oni_series(g, cfg.oni_months)?;
    let all = build_samples(g, &nodes, cfg.window, cfg.lead, &oni)?;
    let boundary = split_boundary(g.n_time, cfg.train_fraction)?;
    let (train, test) = all.split_at(boundary);
    if train.len() < 2 || test.len() < 2 {
        return Err(Error::Data(format!(
            "split at month {boundary} leaves {} training and {} test samples; need at least 2 each",
            train.len(),
            test.len()
        )));
    }
    Ok(Prepared {
        nodes,
        train,
        test,
        boundary,
        local_radius_deg: cfg.local_radius_deg,
    })
}

/// Fresh model for `prep`. Learned edges take their static features from
/// the training months only.
pub fn build_model(g: &GridSet, prep: &Prepared, config: ModelConfig, seed: u64) -> Result<ModelState> {
    let edges = match config.structure.edges {
        EdgeMode::Learned => EdgeInit::Learned {
            static_features: static_node_features(g, &prep.nodes, 0..prep.boundary, config.structure.static_features)?,
        },
        EdgeMode::Local => EdgeInit::Fixed(local_adjacency(&prep.nodes, prep.local_radius_deg)),
    };
    let mut model = ModelState::init(config, edges, seed)?;
    model.nodes = Some(prep.nodes.clone());
    Ok(model)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub learned_r: f64,
    pub local_r: f64,
    pub learned_rmse: f64,
    pub local_rmse: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub lead: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn mean_learned_r(&self) -> f64 {
        self.rows.iter().map(|r| r.learned_r).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_local_r(&self) -> f64 {
        self.rows.iter().map(|r| r.local_r).sum::<f64>() / self.rows.len() as f64
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "lead {}\nseed  learned_r  local_r  learned_rmse  local_rmse\n",
            self.lead
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<4}  {:>9.4}  {:>7.4}  {:>12.4}  {:>10.4}\n",
                r.seed, r.learned_r, r.local_r, r.learned_rmse, r.local_rmse
            ));
        }
        s.push_str(&format!(
            "mean  {:>9.4}  {:>7.4}\n",
            self.mean_learned_r(),
            self.mean_local_r()
        ));
        s
    }
}

/// Models trained by [`run_ablation`], kept for inspection.
pub struct AblationRun {
    pub report: AblationReport,
    /// Trained learned-edge models, one per seed.
    pub learned: Vec<ModelState>,
    pub learned_eval: Vec<EvalReport>,
}

/// Trains the same network with learned and with local edges for every
/// seed (all runs in parallel) and compares test correlation.
pub fn run_ablation(g: &GridSet, cfg: &RunConfig, seeds: &[u64]) -> Result<AblationRun> {
    let prep = prepare(g, &cfg.data)?;
    let mut jobs = Vec::new();
    for &seed in seeds {
        for edges in [EdgeMode::Learned, EdgeMode::Local] {
            let mut mc = cfg.model_config(g.n_vars());
            mc.structure.edges = edges;
            let model = build_model(g, &prep, mc, seed)?;
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            jobs.push((model, tc));
        }
    }
    let trained = train_parallel(jobs, &prep.train)?;
    let mut rows = Vec::new();
    let mut learned = Vec::new();
    let mut learned_eval = Vec::new();
    for (pair, &seed) in trained.chunks(2).zip(seeds) {
        let a = evaluate(&pair[0].0, &prep.test)?;
        let b = evaluate(&pair[1].0, &prep.test)?;
        rows.push(AblationRow {
            seed,
            learned_r: a.r,
            local_r: b.r,
            learned_rmse: a.rmse,
            local_rmse: b.rmse,
        });
        learned.push(pair[0].0.clone());
        learned_eval.push(a);
    }
    Ok(AblationRun {
        report: AblationReport {
            lead: cfg.data.lead,
            rows,
        },
        learned,
        learned_eval,
    })
}
