use serde::{Deserialize, Serialize};

use super::grid::GridSet;
use super::nodes::NodeIndex;
use super::oni::add_oni_node;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

/// Windowed model inputs with their ONI targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    /// One `N×wD` tensor per sample, columns time-major (`m·D + v`).
    pub inputs: Vec<Tensor>,
    pub targets: Vec<f64>,
    /// Index of the last input month of each sample.
    pub window_end: Vec<usize>,
    pub window: usize,
    pub lead: usize,
    pub split: Split,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn target_month(&self, i: usize) -> usize {
        self.window_end[i] + self.lead
    }

    pub fn window_start(&self, i: usize) -> usize {
        self.window_end[i] + 1 - self.window
    }

    fn subset(&self, keep: impl Fn(usize) -> bool, split: Split) -> SampleSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        SampleSet {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            window_end: idx.iter().map(|&i| self.window_end[i]).collect(),
            window: self.window,
            lead: self.lead,
            split,
        }
    }

    /// Chronological split at month `boundary`: training samples have their
    /// target before it, test samples start their window at or after it.
    /// Samples straddling the boundary are dropped.
    pub fn split_at(&self, boundary: usize) -> (SampleSet, SampleSet) {
        (
            self.subset(|i| self.target_month(i) < boundary, Split::Train),
            self.subset(|i| self.window_start(i) >= boundary, Split::Test),
        )
    }
}

/// Month index separating the training and test periods.
pub fn split_boundary(n_time: usize, train_fraction: f64) -> Result<usize> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    Ok((n_time as f64 * train_fraction).round() as usize)
}

/// One sample per window `[t, t+w-1]` whose target `ONI(t+w-1+h)` is
/// defined. With an ONI node in `nodes`, its regional-mean row is appended.
pub fn build_samples(g: &GridSet, nodes: &NodeIndex, w: usize, h: usize, oni: &[Option<f64>]) -> Result<SampleSet> {
    if w == 0 || h == 0 {
        return Err(Error::Config(format!("window and lead must be >= 1, got w={w}, h={h}")));
    }
    if oni.len() != g.n_time {
        return Err(Error::Data(format!(
            "ONI series has {} months, grid has {}",
            oni.len(),
            g.n_time
        )));
    }
    let mut set = SampleSet {
        inputs: Vec::new(),
        targets: Vec::new(),
        window_end: Vec::new(),
        window: w,
        lead: h,
        split: Split::All,
    };
    for t in 0..g.n_time.saturating_sub(w - 1) {
        let end = t + w - 1;
        let Some(Some(target)) = oni.get(end + h).copied() else {
            continue;
        };
        let x = window_tensor(g, nodes, t, w)?;
        set.inputs.push(x);
        set.targets.push(target);
        set.window_end.push(end);
    }
    if set.is_empty() {
        return Err(Error::Data(format!(
            "no valid samples for {} months with w={w}, h={h}",
            g.n_time
        )));
    }
    Ok(set)
}

fn window_tensor(g: &GridSet, nodes: &NodeIndex, start: usize, w: usize) -> Result<Tensor> {
    let d = g.n_vars();
    let mut data = Vec::with_capacity(nodes.n_ocean() * w * d);
    for i in 0..nodes.n_ocean() {
        let cell = nodes.flat_cell(i);
        for m in start..start + w {
            for v in 0..d {
                data.push(g.value(m, v, cell));
            }
        }
    }
    let x = Tensor::matrix(nodes.n_ocean(), w * d, data)?;
    if nodes.oni_node {
        add_oni_node(&x, g, start)
    } else {
        Ok(x)
    }
}

/// Every complete input window, target or not, as `(window_end, input)`.
pub fn window_inputs(g: &GridSet, nodes: &NodeIndex, w: usize) -> Result<Vec<(usize, Tensor)>> {
    if w == 0 || w > g.n_time {
        return Err(Error::Config(format!("window {w} does not fit {} months", g.n_time)));
    }
    (0..=g.n_time - w)
        .map(|t| Ok((t + w - 1, window_tensor(g, nodes, t, w)?)))
        .collect()
}
