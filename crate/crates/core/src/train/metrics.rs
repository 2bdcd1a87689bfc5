use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Pearson correlation. A constant series has no defined correlation; it is
/// reported as 0.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Data(format!(
            "correlation needs two equally long series of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() || pred.is_empty() {
        return Err(Error::Data(format!(
            "RMSE needs two equally long non-empty series, got {} and {}",
            pred.len(),
            obs.len()
        )));
    }
    let s: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Forecast skill over one sample set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub lead: usize,
    pub r: f64,
    pub rmse: f64,
    pub n: usize,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
}

impl EvalReport {
    pub fn new(lead: usize, predictions: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if predictions.len() < 2 {
            return Err(Error::Data(format!(
                "evaluation needs at least 2 samples, got {}",
                predictions.len()
            )));
        }
        Ok(EvalReport {
            lead,
            r: pearson(&predictions, &targets)?,
            rmse: rmse(&predictions, &targets)?,
            n: predictions.len(),
            predictions,
            targets,
        })
    }

    /// `lead,r,rmse,n` with a single data row.
    pub fn summary_csv(&self) -> String {
        format!("lead,r,rmse,n\n{},{},{},{}\n", self.lead, self.r, self.rmse, self.n)
    }

    /// `index,target,prediction`, one row per sample.
    pub fn predictions_csv(&self) -> String {
        let mut text = String::from("index,target,prediction\n");
        for (i, (t, p)) in self.targets.iter().zip(&self.predictions).enumerate() {
            text.push_str(&format!("{i},{t},{p}\n"));
        }
        text
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.summary_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_predictions_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.predictions_csv()).map_err(|e| Error::io(path, e))
    }
}
