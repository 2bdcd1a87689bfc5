use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{GcnConfig, ModelConfig, Pooling};
use crate::data::NodeIndex;
use crate::error::{Error, Result};
use crate::structure::{build_adjacency, build_adjacency_on_tape, Adjacency, StructureParams};
use crate::tensor::{Activation, BatchNorm, BatchStats, Gradients, Mode, Reduce, Sgd, Shape, Tape, Tensor, Var};

/// Rows evaluated per tape during inference.
const PREDICT_CHUNK: usize = 64;

/// Where the adjacency comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Edges {
    Learned(StructureParams),
    /// Fixed matrix, e.g. the geographic neighbourhood graph.
    Fixed(Tensor),
}

/// Input to [`ModelState::init`] describing the graph.
#[derive(Clone, Debug)]
pub enum EdgeInit {
    /// Static node representations `X̃` for the structure learner.
    Learned {
        static_features: Tensor,
    },
    Fixed(Adjacency),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub weight: Tensor,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    pub bn: BatchNorm,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

/// Complete trainable model plus the metadata needed to reload it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub seed: u64,
    pub edges: Edges,
    pub layers: Vec<GcnLayer>,
    pub mlp: MlpHead,
    pub optimizer: Option<Sgd>,
    /// Grid placement of the nodes, kept for maps.
    pub nodes: Option<NodeIndex>,
}

/// Handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `B×1` predictions.
    pub prediction: Var,
    pub adjacency: Var,
    /// Train-mode statistics of every batchnorm in parameter order (layers,
    /// then the MLP); `None` entries in eval mode.
    pub stats: Vec<Option<BatchStats>>,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(fan_in, fan_out, data)
        .expect("sized by construction")
        .into_param()
}

fn zeros_param(n: usize) -> Tensor {
    Tensor::zeros(Shape::Vector(n)).into_param()
}

/// Batchnorm settings for one [`gcn_layer`] call.
pub struct LayerNorm<'a> {
    pub gamma: Var,
    pub beta: Var,
    pub bn: &'a BatchNorm,
    pub mode: Mode,
}

/// One graph convolution: `A·Z·W`, optional batchnorm, activation, then
/// the optional residual `+ Z`.
pub fn gcn_layer(
    tape: &mut Tape,
    adj: Var,
    z: Var,
    w: Var,
    norm: Option<LayerNorm<'_>>,
    activation: Activation,
    residual: bool,
) -> Result<(Var, Option<BatchStats>)> {
    let (din, dout) = tape.shape(w).dims();
    if residual && din != dout {
        return Err(Error::Config(format!(
            "residual connection needs equal widths, layer maps {din} -> {dout}"
        )));
    }
    let zw = tape.matmul(z, w)?;
    let mut h = tape.graph_matmul(adj, zw)?;
    let mut stats = None;
    if let Some(n) = norm {
        let (out, s) = tape.batchnorm(h, n.gamma, n.beta, n.bn, n.mode)?;
        h = out;
        stats = s;
    }
    let mut out = tape.activation(h, activation);
    if residual {
        out = tape.add(out, z)?;
    }
    Ok((out, stats))
}

pub fn jumping_knowledge_concat(tape: &mut Tape, layers: &[Var]) -> Result<Var> {
    tape.concat_cols(layers)
}

/// Pools each of `graphs` consecutive node blocks into one row.
pub fn pool_graph(tape: &mut Tape, z: Var, graphs: usize, kind: Pooling) -> Result<Var> {
    match kind {
        Pooling::Mean => tape.reduce_segments(z, graphs, Reduce::Mean),
        Pooling::SumAndMean => {
            let s = tape.reduce_segments(z, graphs, Reduce::Sum)?;
            let m = tape.reduce_segments(z, graphs, Reduce::Mean)?;
            tape.concat_cols(&[s, m])
        }
    }
}

/// Parameter handles of the MLP head, in parameter order.
pub struct MlpVars {
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub gamma: Var,
    pub beta: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

/// Affine → batchnorm → ELU → affine to one output per row of `g`.
pub fn mlp_head(tape: &mut Tape, g: Var, v: &MlpVars, bn: &BatchNorm, mode: Mode) -> Result<(Var, Option<BatchStats>)> {
    let h = tape.matmul(g, v.hidden_weight)?;
    let h = tape.add_row_bias(h, v.hidden_bias)?;
    let (h, stats) = tape.batchnorm(h, v.gamma, v.beta, bn, mode)?;
    let h = tape.activation(h, Activation::Elu);
    let y = tape.matmul(h, v.out_weight)?;
    Ok((tape.add_row_bias(y, v.out_bias)?, stats))
}

impl ModelState {
    /// Fresh model with Glorot-uniform weights, zero biases and identity
    /// batchnorm, all drawn from `seed`.
    pub fn init(config: ModelConfig, edges: EdgeInit, seed: u64) -> Result<Self> {
        config.gcn.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = &config.structure;
        let edges = match edges {
            EdgeInit::Learned { static_features } => {
                let (n, d1) = static_features.shape().dims();
                if s.embed_dim == 0 {
                    return Err(Error::Config("structure embedding width must be positive".into()));
                }
                let w1 = glorot(&mut rng, d1, s.embed_dim);
                let w2 = glorot(&mut rng, d1, s.embed_dim);
                Edges::Learned(StructureParams::new(
                    static_features,
                    w1,
                    w2,
                    s.alpha1,
                    s.alpha2,
                    s.max_edges(n),
                )?)
            }
            EdgeInit::Fixed(a) => Edges::Fixed(a.matrix),
        };
        let g = &config.gcn;
        let mut layers = Vec::with_capacity(g.layer_dims.len());
        let mut din = g.input_dim();
        for &dout in &g.layer_dims {
            layers.push(GcnLayer {
                weight: glorot(&mut rng, din, dout),
                bn: BatchNorm::new(dout),
            });
            din = dout;
        }
        let (pooled, hidden) = (g.pooled_dim(), g.hidden_dim());
        let mlp = MlpHead {
            hidden_weight: glorot(&mut rng, pooled, hidden),
            hidden_bias: zeros_param(hidden),
            bn: BatchNorm::new(hidden),
            out_weight: glorot(&mut rng, hidden, 1),
            out_bias: zeros_param(1),
        };
        let state = ModelState {
            config,
            seed,
            edges,
            layers,
            mlp,
            optimizer: None,
            nodes: None,
        };
        state.check_shapes()?;
        Ok(state)
    }

    pub fn gcn(&self) -> &GcnConfig {
        &self.config.gcn
    }

    pub fn n_nodes(&self) -> usize {
        match &self.edges {
            Edges::Learned(p) => p.n_nodes(),
            Edges::Fixed(m) => m.rows(),
        }
    }

    /// Verifies that every tensor agrees with the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        let g = &self.config.gcn;
        g.validate()?;
        if let Edges::Learned(p) = &self.edges {
            p.validate()?;
        }
        if let Edges::Fixed(m) = &self.edges {
            Adjacency::fixed(m.clone())?;
        }
        if self.layers.len() != g.layer_dims.len() {
            return Err(Error::Config(format!(
                "config lists {} layers, state holds {}",
                g.layer_dims.len(),
                self.layers.len()
            )));
        }
        let mut din = g.input_dim();
        let check = |t: &Tensor, want: Shape| -> Result<()> {
            if t.shape() == want {
                Ok(())
            } else {
                Err(Error::Dimension {
                    op: "model parameters",
                    lhs: want,
                    rhs: t.shape(),
                })
            }
        };
        for (layer, &dout) in self.layers.iter().zip(&g.layer_dims) {
            check(&layer.weight, Shape::Matrix(din, dout))?;
            check(&layer.bn.gamma, Shape::Vector(dout))?;
            check(&layer.bn.beta, Shape::Vector(dout))?;
            din = dout;
        }
        let (pooled, hidden) = (g.pooled_dim(), g.hidden_dim());
        check(&self.mlp.hidden_weight, Shape::Matrix(pooled, hidden))?;
        check(&self.mlp.hidden_bias, Shape::Vector(hidden))?;
        check(&self.mlp.bn.gamma, Shape::Vector(hidden))?;
        check(&self.mlp.out_weight, Shape::Matrix(hidden, 1))?;
        check(&self.mlp.out_bias, Shape::Vector(1))
    }

    /// Trainable tensors in canonical order with their checkpoint names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Edges::Learned(p) = &self.edges {
            out.push(("structure/w1".to_string(), &p.w1));
            out.push(("structure/w2".to_string(), &p.w2));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("gcn/{l}/weight"), &layer.weight));
            out.push((format!("gcn/{l}/bn/gamma"), &layer.bn.gamma));
            out.push((format!("gcn/{l}/bn/beta"), &layer.bn.beta));
        }
        let m = &self.mlp;
        out.push(("mlp/hidden/weight".into(), &m.hidden_weight));
        out.push(("mlp/hidden/bias".into(), &m.hidden_bias));
        out.push(("mlp/bn/gamma".into(), &m.bn.gamma));
        out.push(("mlp/bn/beta".into(), &m.bn.beta));
        out.push(("mlp/out/weight".into(), &m.out_weight));
        out.push(("mlp/out/bias".into(), &m.out_bias));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable view in the same order as [`ModelState::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Edges::Learned(p) = &mut self.edges {
            out.push(&mut p.w1);
            out.push(&mut p.w2);
        }
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bn.gamma);
            out.push(&mut layer.bn.beta);
        }
        let m = &mut self.mlp;
        out.extend([
            &mut m.hidden_weight,
            &mut m.hidden_bias,
            &mut m.bn.gamma,
            &mut m.bn.beta,
            &mut m.out_weight,
            &mut m.out_bias,
        ]);
        out
    }

    /// Copies of the trainable tensors, for gradient checks.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().cloned().collect()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter as a tape leaf, in canonical order.
    pub fn register_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p)).collect()
    }

    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &[Var]) {
        for (p, &v) in self.params_mut().into_iter().zip(vars) {
            grads.accumulate_into(v, p);
        }
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out: Vec<&mut BatchNorm> = self.layers.iter_mut().map(|l| &mut l.bn).collect();
        out.push(&mut self.mlp.bn);
        out
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[Option<BatchStats>]) {
        for (bn, s) in self.batchnorms_mut().into_iter().zip(stats) {
            if let Some(s) = s {
                bn.update_running(s);
            }
        }
    }

    /// The adjacency used by the graph convolutions (sparsified, self-looped).
    pub fn adjacency(&self) -> Result<Adjacency> {
        match &self.edges {
            Edges::Learned(p) => build_adjacency(p),
            Edges::Fixed(m) => Adjacency::fixed(m.clone()),
        }
    }

    fn stack_inputs(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let n = self.n_nodes();
        let d0 = self.gcn().input_dim();
        if inputs.is_empty() {
            return Err(Error::Data("forward pass needs at least one sample".into()));
        }
        let mut data = Vec::with_capacity(inputs.len() * n * d0);
        for x in inputs {
            if x.shape() != Shape::Matrix(n, d0) {
                return Err(Error::Dimension {
                    op: "model input",
                    lhs: Shape::Matrix(n, d0),
                    rhs: x.shape(),
                });
            }
            data.extend_from_slice(x.data());
        }
        Tensor::matrix(inputs.len() * n, d0, data)
    }

    /// Records the full model on `tape` for a batch of `N×wD` inputs.
    ///
    /// `params` must come from [`ModelState::register_params`] (or leaves of
    /// equally shaped tensors). `fixed_mask` pins the learned edge set.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        inputs: &[&Tensor],
        mode: Mode,
        fixed_mask: Option<&[bool]>,
    ) -> Result<Forward> {
        let expected = self.params().len();
        if params.len() != expected {
            return Err(Error::Config(format!(
                "forward expects {expected} parameter handles, got {}",
                params.len()
            )));
        }
        let g = self.gcn();
        let mut next = 0;
        let mut take = || {
            let v = params[next];
            next += 1;
            v
        };
        let adjacency = match &self.edges {
            Edges::Learned(p) => {
                let (w1, w2) = (take(), take());
                build_adjacency_on_tape(tape, p, w1, w2, fixed_mask)?.0
            }
            Edges::Fixed(m) => tape.constant(m.clone()),
        };
        let mut z = tape.constant(self.stack_inputs(inputs)?);
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len() + 1);
        for (l, layer) in self.layers.iter().enumerate() {
            let w = take();
            let norm = LayerNorm {
                gamma: take(),
                beta: take(),
                bn: &layer.bn,
                mode,
            };
            let (out, s) = gcn_layer(tape, adjacency, z, w, Some(norm), g.activation, g.residual_at(l))?;
            stats.push(s);
            outs.push(out);
            z = out;
        }
        let repr = if g.use_jumping_knowledge {
            jumping_knowledge_concat(tape, &outs)?
        } else {
            z
        };
        let pooled = pool_graph(tape, repr, inputs.len(), g.pooling)?;
        let vars = MlpVars {
            hidden_weight: take(),
            hidden_bias: take(),
            gamma: take(),
            beta: take(),
            out_weight: take(),
            out_bias: take(),
        };
        let (prediction, s) = mlp_head(tape, pooled, &vars, &self.mlp.bn, mode)?;
        stats.push(s);
        Ok(Forward {
            prediction,
            adjacency,
            stats,
        })
    }

    /// Eval-mode predictions, one per input.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = self.params().into_iter().map(|p| tape.constant(p.clone())).collect();
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let f = self.forward(&mut tape, &vars, &refs, Mode::Eval, None)?;
            out.extend_from_slice(tape.value(f.prediction).data());
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("model produced a non-finite prediction".into()));
        }
        Ok(out)
    }
}
