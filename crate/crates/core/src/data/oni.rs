use super::grid::{GridSet, SST};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Niño 3.4 box, bounds inclusive; longitudes in degrees east.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OniRegion {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Default for OniRegion {
    fn default() -> Self {
        OniRegion {
            lat_min: -5.0,
            lat_max: 5.0,
            lon_min: 190.0,
            lon_max: 240.0,
        }
    }
}

impl OniRegion {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        const EPS: f64 = 1e-9;
        let lon = lon.rem_euclid(360.0);
        lat >= self.lat_min - EPS && lat <= self.lat_max + EPS && lon >= self.lon_min - EPS && lon <= self.lon_max + EPS
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.lat_min + self.lat_max) / 2.0, (self.lon_min + self.lon_max) / 2.0)
    }
}

/// Flat indices of ocean cells inside the ONI region.
pub fn region_cells(g: &GridSet) -> Result<Vec<usize>> {
    let region = OniRegion::default();
    let geo = g.geometry;
    let cells: Vec<usize> = (0..geo.n_cells())
        .filter(|&c| !g.is_land(c) && region.contains(geo.lat(c / geo.n_lon), geo.lon(c % geo.n_lon)))
        .collect();
    if cells.is_empty() {
        return Err(Error::Data(
            "ONI region (5S-5N, 190-240E) contains no ocean cell".into(),
        ));
    }
    Ok(cells)
}

/// Unweighted regional mean of every variable per month, laid out
/// `[t * n_vars + v]`.
pub fn region_means(g: &GridSet) -> Result<Vec<f64>> {
    let cells = region_cells(g)?;
    let d = g.n_vars();
    let mut out = vec![0.0; g.n_time * d];
    for t in 0..g.n_time {
        for v in 0..d {
            let s: f64 = cells.iter().map(|&c| g.value(t, v, c)).sum();
            out[t * d + v] = s / cells.len() as f64;
        }
    }
    Ok(out)
}

/// Centered `k`-month running mean of `series`; edges without a full window
/// are `None`.
pub fn centered_running_mean(series: &[f64], k: usize) -> Result<Vec<Option<f64>>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Config(format!("running-mean window must be odd, got {k}")));
    }
    let half = k / 2;
    Ok((0..series.len())
        .map(|t| {
            (t >= half && t + half < series.len()).then(|| series[t - half..=t + half].iter().sum::<f64>() / k as f64)
        })
        .collect())
}

/// Oceanic Niño index per month: running mean of the regional SST anomaly.
pub fn compute_oni_series(g: &GridSet, k: usize) -> Result<Vec<Option<f64>>> {
    let v = g
        .variable_index(SST)
        .ok_or_else(|| Error::Data(format!("grid has no {SST} variable")))?;
    let d = g.n_vars();
    let means = region_means(g)?;
    let sst: Vec<f64> = (0..g.n_time).map(|t| means[t * d + v]).collect();
    centered_running_mean(&sst, k)
}

/// Appends the ONI node row (regional means, same time-major column layout)
/// to a window input that starts at month `start`.
pub fn add_oni_node(x: &Tensor, g: &GridSet, start: usize) -> Result<Tensor> {
    let d = g.n_vars();
    let width = x.cols();
    if !width.is_multiple_of(d) || start + width / d > g.n_time {
        return Err(Error::Data(format!(
            "window of width {width} at month {start} does not fit {d} variables and {} months",
            g.n_time
        )));
    }
    let means = region_means(g)?;
    let mut data = x.data().to_vec();
    data.extend_from_slice(&means[start * d..start * d + width]);
    Tensor::matrix(x.rows() + 1, width, data)
}
