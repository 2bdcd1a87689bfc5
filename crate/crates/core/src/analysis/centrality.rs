use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Shape, Tensor};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Dominant right eigenvector of a non-negative adjacency.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CentralityScores {
    /// Unit-norm, non-negative scores, one per node.
    pub v: Vec<f64>,
    pub lambda_max: f64,
    /// `‖Av − λv‖₂` at the returned vector.
    pub residual: f64,
    pub iterations: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn apply(a: &Tensor, v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    kernels::matmul(a.data(), v, &mut out, n, n, 1);
    out
}

fn residual(a: &Tensor, v: &[f64]) -> (f64, f64) {
    let av = apply(a, v);
    let lambda: f64 = av.iter().zip(v).map(|(x, y)| x * y).sum();
    let r = av
        .iter()
        .zip(v)
        .map(|(x, y)| (x - lambda * y).powi(2))
        .sum::<f64>()
        .sqrt();
    (lambda, r)
}

/// Power iteration from the uniform vector, normalizing every step, until
/// successive iterates differ by less than `tol` in L2 norm.
pub fn eigenvector_centrality(a: &Tensor, tol: f64, max_iter: usize) -> Result<CentralityScores> {
    let Shape::Matrix(n, c) = a.shape() else {
        return Err(Error::Config(format!(
            "centrality needs a square matrix, got {}",
            a.shape()
        )));
    };
    if n != c || n == 0 {
        return Err(Error::Config(format!(
            "centrality needs a non-empty square matrix, got {}",
            a.shape()
        )));
    }
    if a.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Numeric("centrality needs a finite non-negative matrix".into()));
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    for k in 1..=max_iter {
        let w = apply(a, &v);
        let len = norm(&w);
        if len == 0.0 {
            return Err(Error::Numeric("power iteration collapsed to the zero vector".into()));
        }
        let next: Vec<f64> = w.iter().map(|x| x / len).collect();
        let delta = norm(&next.iter().zip(&v).map(|(x, y)| x - y).collect::<Vec<_>>());
        v = next;
        if delta < tol {
            let (lambda_max, residual) = residual(a, &v);
            return Ok(CentralityScores {
                v,
                lambda_max,
                residual,
                iterations: k,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual: residual(a, &v).1,
    })
}

/// Rank of every node by descending score (0 = most central); ties keep
/// node order.
pub fn centrality_ranks(v: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut rank = vec![0; v.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}
