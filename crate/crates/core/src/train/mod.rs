//! Mini-batch training, evaluation metrics and ensembles.

mod metrics;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::model::{ModelState, Preset};
use crate::tensor::{Mode, Sgd, Tape, Tensor};

pub use metrics::{pearson, rmse, EvalReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// L2 weight decay; `None` takes the preset's value.
    pub weight_decay: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub preset: Preset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: None,
            epochs: 50,
            seed: 0,
            preset: Preset::Gcn2a,
        }
    }
}

impl TrainConfig {
    pub fn resolved_weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or_else(|| self.preset.weight_decay())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be >= 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Sgd::new(self.lr, self.momentum, self.resolved_weight_decay()).map(|_| ())
    }
}

/// Per-epoch shuffling seed.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Consecutive batches of a shuffled order. A trailing batch of one sample
/// is folded into the previous batch, since batch statistics need two rows.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

/// Trains `model` in place and returns the mean training loss of every
/// epoch. The optimizer state lives in `model.optimizer` and is created on
/// first use.
pub fn train(model: &mut ModelState, data: &SampleSet, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 samples, got {}",
            data.len()
        )));
    }
    let mut opt = match model.optimizer.take() {
        Some(opt) => opt,
        None => Sgd::new(cfg.lr, cfg.momentum, cfg.resolved_weight_decay())?,
    };
    let result = run_epochs(model, &mut opt, data, cfg);
    model.optimizer = Some(opt);
    result
}

fn run_epochs(model: &mut ModelState, opt: &mut Sgd, data: &SampleSet, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        let mut total = 0.0;
        for (b, batch) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let loss = train_step(model, opt, data, batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss {loss} at epoch {epoch}, batch {b}"
                )));
            }
            total += loss * batch.len() as f64;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}

fn train_step(model: &mut ModelState, opt: &mut Sgd, data: &SampleSet, batch: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.register_params(&mut tape);
    let inputs: Vec<&Tensor> = batch.iter().map(|&i| &data.inputs[i]).collect();
    let f = model.forward(&mut tape, &vars, &inputs, Mode::Train, None)?;
    let targets = Tensor::matrix(batch.len(), 1, batch.iter().map(|&i| data.targets[i]).collect())?;
    let target = tape.constant(targets);
    let loss_var = tape.mse_loss(f.prediction, target)?;
    let loss = tape.scalar(loss_var);
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = tape.backward(loss_var)?;
    model.accumulate_grads(&grads, &vars);
    model.apply_batch_stats(&f.stats);
    opt.step(model.params_mut())?;
    Ok(loss)
}

/// Trains several independent models, one thread each.
pub fn train_parallel(jobs: Vec<(ModelState, TrainConfig)>, data: &SampleSet) -> Result<Vec<(ModelState, Vec<f64>)>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(mut model, cfg)| {
                scope.spawn(move || {
                    let history = train(&mut model, data, &cfg)?;
                    Ok((model, history))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

/// Correlation skill and RMSE of `model` on `data`, in eval mode.
pub fn evaluate(model: &ModelState, data: &SampleSet) -> Result<EvalReport> {
    let predictions = model.predict(&data.inputs)?;
    EvalReport::new(data.lead, predictions, data.targets.clone())
}

/// Unweighted mean of the members' predictions for every input.
pub fn ensemble_predict_batch(members: &[ModelState], inputs: &[Tensor]) -> Result<Vec<f64>> {
    let Some(first) = members.first() else {
        return Err(Error::Config("ensemble has no members".into()));
    };
    for m in members {
        if m.n_nodes() != first.n_nodes() || m.gcn().input_dim() != first.gcn().input_dim() {
            return Err(Error::Config(
                "ensemble members disagree on node count or input width".into(),
            ));
        }
    }
    let mut sum = vec![0.0; inputs.len()];
    for m in members {
        for (s, p) in sum.iter_mut().zip(m.predict(inputs)?) {
            *s += p;
        }
    }
    Ok(sum.into_iter().map(|s| s / members.len() as f64).collect())
}

pub fn ensemble_predict(members: &[ModelState], x: &Tensor) -> Result<f64> {
    Ok(ensemble_predict_batch(members, std::slice::from_ref(x))?[0])
}

pub fn evaluate_ensemble(members: &[ModelState], data: &SampleSet) -> Result<EvalReport> {
    let predictions = ensemble_predict_batch(members, &data.inputs)?;
    EvalReport::new(data.lead, predictions, data.targets.clone())
}

/// Writes `epoch,loss` rows.
pub fn write_loss_history(history: &[f64], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        text.push_str(&format!("{e},{l}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
