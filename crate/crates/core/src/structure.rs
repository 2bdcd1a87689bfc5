//! Learned graph structure.
//!
//! Static node representations are embedded twice,
//! `M1 = tanh(α1·X̃·W̃1)` and `M2 = tanh(α1·X̃·W̃2)`, and the directed edge
//! scores are `sigmoid(α2·M1·M2ᵀ)`. All but the `e` largest off-diagonal
//! scores are zeroed and the diagonal is set to one.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{Activation, Shape, Tape, Tensor, Var};

/// Inputs and trainable weights of the structure learner.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureParams {
    /// `N×d̃1` static node representations (not trained).
    pub static_features: Tensor,
    /// `d̃1×d̃2` source-side embedding weights.
    pub w1: Tensor,
    /// `d̃1×d̃2` target-side embedding weights.
    pub w2: Tensor,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Maximum number of off-diagonal edges kept.
    pub max_edges: usize,
}

impl StructureParams {
    pub fn new(
        static_features: Tensor,
        w1: Tensor,
        w2: Tensor,
        alpha1: f64,
        alpha2: f64,
        max_edges: usize,
    ) -> Result<Self> {
        let p = StructureParams {
            static_features,
            w1,
            w2,
            alpha1,
            alpha2,
            max_edges,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Shape::Matrix(n, d1) = self.static_features.shape() else {
            return Err(Error::Config("static node features must be a matrix".into()));
        };
        for w in [&self.w1, &self.w2] {
            match w.shape() {
                Shape::Matrix(r, _) if r == d1 => {}
                other => {
                    return Err(Error::Dimension {
                        op: "structure weights",
                        lhs: self.static_features.shape(),
                        rhs: other,
                    })
                }
            }
        }
        if self.w1.shape() != self.w2.shape() {
            return Err(Error::Dimension {
                op: "structure weights",
                lhs: self.w1.shape(),
                rhs: self.w2.shape(),
            });
        }
        if !(self.alpha1 > 0.0 && self.alpha1.is_finite() && self.alpha2 > 0.0 && self.alpha2.is_finite()) {
            return Err(Error::Config(format!(
                "alpha1 and alpha2 must be positive, got {} and {}",
                self.alpha1, self.alpha2
            )));
        }
        if self.max_edges > n * n.saturating_sub(1) {
            return Err(Error::Config(format!(
                "edge budget {} exceeds N(N-1) = {} for N = {n}",
                self.max_edges,
                n * n.saturating_sub(1)
            )));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.static_features.rows()
    }
}

/// Dense adjacency with the mask of surviving entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub matrix: Tensor,
    pub kept_mask: Vec<bool>,
}

impl Adjacency {
    pub fn n_nodes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn off_diagonal_nonzeros(&self) -> usize {
        let n = self.n_nodes();
        let d = self.matrix.data();
        (0..n * n).filter(|&k| k / n != k % n && d[k] != 0.0).count()
    }

    /// Wraps a fixed matrix (e.g. a geographic neighborhood graph).
    pub fn fixed(matrix: Tensor) -> Result<Self> {
        let Shape::Matrix(r, c) = matrix.shape() else {
            return Err(Error::Config("adjacency must be square".into()));
        };
        if r != c {
            return Err(Error::Config(format!("adjacency must be square, got {r}x{c}")));
        }
        let kept_mask = matrix.data().iter().map(|&v| v != 0.0).collect();
        Ok(Adjacency { matrix, kept_mask })
    }
}

/// Strict ranking used for top-e selection: larger value first, ties by
/// smaller flat (row, col) index.
fn rank_cmp(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// Mask of the `e` largest off-diagonal entries of a row-major `n×n`
/// matrix. The diagonal is never selected.
pub fn top_e_mask(values: &[f64], n: usize, e: usize) -> Vec<bool> {
    assert_eq!(values.len(), n * n, "score matrix must be n×n");
    let mut candidates: Vec<usize> = (0..n * n).filter(|&k| k / n != k % n).collect();
    let mut mask = vec![false; n * n];
    if e >= candidates.len() {
        candidates.iter().for_each(|&k| mask[k] = true);
        return mask;
    }
    if e == 0 {
        return mask;
    }
    candidates.select_nth_unstable_by(e - 1, |&a, &b| rank_cmp(values, a, b));
    candidates[..e].iter().for_each(|&k| mask[k] = true);
    mask
}

/// Untracked edge scores `sigmoid(α2·M1·M2ᵀ)`.
pub fn compute_scores(p: &StructureParams) -> Result<Tensor> {
    p.validate()?;
    let mut tape = Tape::new();
    let w1 = tape.constant(p.w1.clone());
    let w2 = tape.constant(p.w2.clone());
    let scores = scores_on_tape(&mut tape, p, w1, w2)?.scores;
    Ok(tape.value(scores).clone())
}

struct ScoreVars {
    /// `M1·M2ᵀ` before scaling; ranking by it is equivalent to ranking by
    /// the sigmoid scores and is independent of `α2`.
    affinity: Var,
    scores: Var,
}

fn scores_on_tape(tape: &mut Tape, p: &StructureParams, w1: Var, w2: Var) -> Result<ScoreVars> {
    let x = tape.constant(p.static_features.clone());
    let mut embed = |w: Var| -> Result<Var> {
        let h = tape.matmul(x, w)?;
        let h = tape.scale(h, p.alpha1);
        Ok(tape.activation(h, Activation::Tanh))
    };
    let m1 = embed(w1)?;
    let m2 = embed(w2)?;
    let m2t = tape.transpose(m2);
    let affinity = tape.matmul(m1, m2t)?;
    let logits = tape.scale(affinity, p.alpha2);
    let scores = tape.activation(logits, Activation::Sigmoid);
    Ok(ScoreVars { affinity, scores })
}

/// Keeps the `e` largest off-diagonal scores (ties by lexicographic index)
/// and zeroes everything else, including the diagonal.
pub fn sparsify_top_e(scores: &Tensor, e: usize) -> Result<Adjacency> {
    let (n, c) = scores.shape().dims();
    if n != c || !matches!(scores.shape(), Shape::Matrix(..)) {
        return Err(Error::Config(format!(
            "score matrix must be square, got {}",
            scores.shape()
        )));
    }
    let kept_mask = top_e_mask(scores.data(), n, e);
    let data = scores
        .data()
        .iter()
        .zip(&kept_mask)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    Ok(Adjacency {
        matrix: Tensor::matrix(n, n, data)?,
        kept_mask,
    })
}

/// Sets every diagonal entry to 1; off-diagonal entries are untouched.
pub fn add_self_loops(mut a: Adjacency) -> Adjacency {
    let n = a.n_nodes();
    for i in 0..n {
        a.matrix.set(i, i, 1.0);
        a.kept_mask[i * n + i] = true;
    }
    a
}

/// Full untracked construction: scores, top-e sparsification, self-loops.
pub fn build_adjacency(p: &StructureParams) -> Result<Adjacency> {
    p.validate()?;
    let mut tape = Tape::new();
    let w1 = tape.constant(p.w1.clone());
    let w2 = tape.constant(p.w2.clone());
    let (a, mask) = build_adjacency_on_tape(&mut tape, p, w1, w2, None)?;
    Ok(Adjacency {
        matrix: tape.value(a).clone(),
        kept_mask: mask,
    })
}

/// Records the adjacency construction on `tape` so gradients reach the
/// structure weights through the kept entries.
///
/// With `fixed_mask` the selection step is replaced by the given mask
/// (diagonal bits are ignored); used to hold the edge set constant while
/// probing gradients numerically. Returns the adjacency handle and the
/// surviving-entry mask including the diagonal.
pub fn build_adjacency_on_tape(
    tape: &mut Tape,
    p: &StructureParams,
    w1: Var,
    w2: Var,
    fixed_mask: Option<&[bool]>,
) -> Result<(Var, Vec<bool>)> {
    let n = p.n_nodes();
    let sv = scores_on_tape(tape, p, w1, w2)?;
    let mut mask = match fixed_mask {
        Some(m) => {
            if m.len() != n * n {
                return Err(Error::Dimension {
                    op: "fixed edge mask",
                    lhs: Shape::Matrix(n, n),
                    rhs: Shape::Vector(m.len()),
                });
            }
            let mut m = m.to_vec();
            (0..n).for_each(|i| m[i * n + i] = false);
            m
        }
        None => top_e_mask(tape.value(sv.affinity).data(), n, p.max_edges),
    };
    let sparse = tape.mask(sv.scores, mask.clone())?;
    let a = tape.add_constant(sparse, &Tensor::identity(n))?;
    (0..n).for_each(|i| mask[i * n + i] = true);
    Ok((a, mask))
}
