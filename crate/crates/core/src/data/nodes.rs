use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::grid::{GridGeometry, GridSet};
use super::oni::{region_means, OniRegion};
use crate::error::{Error, Result};
use crate::structure::Adjacency;
use crate::tensor::{Shape, Tensor};

/// Graph nodes: ocean cells in lat-major scan order, optionally followed
/// by one synthetic ONI node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeIndex {
    pub geometry: GridGeometry,
    /// `(lat_idx, lon_idx)` per ocean node.
    pub cells: Vec<(usize, usize)>,
    pub oni_node: bool,
}

impl NodeIndex {
    /// Total node count including the ONI node.
    pub fn len(&self) -> usize {
        self.cells.len() + self.oni_node as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_ocean(&self) -> usize {
        self.cells.len()
    }

    pub fn with_oni_node(mut self) -> Self {
        self.oni_node = true;
        self
    }

    /// `(lat, lon)` in degrees for node `i`; the ONI node sits at the
    /// region centre.
    pub fn coords(&self, i: usize) -> (f64, f64) {
        match self.cells.get(i) {
            Some(&(a, b)) => (self.geometry.lat(a), self.geometry.lon(b)),
            None => OniRegion::default().center(),
        }
    }

    /// Node id of a grid cell, if it is ocean.
    pub fn node_of(&self, lat_idx: usize, lon_idx: usize) -> Option<usize> {
        self.cells.iter().position(|&c| c == (lat_idx, lon_idx))
    }

    pub fn flat_cell(&self, i: usize) -> usize {
        let (a, b) = self.cells[i];
        a * self.geometry.n_lon + b
    }
}

pub fn land_filter_nodes(g: &GridSet) -> Result<NodeIndex> {
    let geo = g.geometry;
    let cells: Vec<(usize, usize)> = (0..geo.n_lat)
        .flat_map(|a| (0..geo.n_lon).map(move |b| (a, b)))
        .filter(|&(a, b)| !g.is_land(a * geo.n_lon + b))
        .collect();
    if cells.is_empty() {
        return Err(Error::Data("grid has no ocean cells; graph would be empty".into()));
    }
    Ok(NodeIndex {
        geometry: geo,
        cells,
        oni_node: false,
    })
}

/// Shortest longitude separation in degrees, wrapping across 0°/360°.
fn lon_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Fixed 0/1 neighbourhood graph: ocean nodes within `radius_deg` in both
/// latitude and (wrapped) longitude are linked, every node has a self-loop,
/// and the ONI node is linked both ways to the ocean nodes inside the ONI
/// region.
pub fn local_adjacency(nodes: &NodeIndex, radius_deg: f64) -> Adjacency {
    let n = nodes.len();
    let tol = 1e-9 * radius_deg.abs().max(1.0);
    let region = OniRegion::default();
    let mut m = Tensor::zeros(Shape::Matrix(n, n));
    for i in 0..nodes.n_ocean() {
        let (lat_i, lon_i) = nodes.coords(i);
        for j in 0..nodes.n_ocean() {
            let (lat_j, lon_j) = nodes.coords(j);
            if (lat_i - lat_j).abs() <= radius_deg + tol && lon_distance(lon_i, lon_j) <= radius_deg + tol {
                m.set(i, j, 1.0);
            }
        }
        if nodes.oni_node && region.contains(lat_i, lon_i) {
            m.set(i, n - 1, 1.0);
            m.set(n - 1, i, 1.0);
        }
    }
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    Adjacency::fixed(m).expect("square by construction")
}

/// How static node representations are assembled from the training months.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticFeatureKind {
    /// Per-variable temporal mean, then lat/90 and lon/180.
    #[default]
    TemporalMean,
    /// Every training month of every variable, then lat/90 and lon/180.
    FullSeries,
}

/// Width of each static node representation.
pub fn static_feature_width(kind: StaticFeatureKind, n_vars: usize, n_months: usize) -> usize {
    match kind {
        StaticFeatureKind::TemporalMean => n_vars + 2,
        StaticFeatureKind::FullSeries => n_vars * n_months + 2,
    }
}

/// Builds `X̃` (one row per node) from the months in `months`, which should
/// lie entirely in the training period.
pub fn static_node_features(
    g: &GridSet,
    nodes: &NodeIndex,
    months: Range<usize>,
    kind: StaticFeatureKind,
) -> Result<Tensor> {
    if months.is_empty() || months.end > g.n_time {
        return Err(Error::Config(format!(
            "static feature months {months:?} must be non-empty and within 0..{}",
            g.n_time
        )));
    }
    let d = g.n_vars();
    let width = static_feature_width(kind, d, months.len());
    let oni_means = if nodes.oni_node { Some(region_means(g)?) } else { None };
    let mut out = Vec::with_capacity(nodes.len() * width);
    for i in 0..nodes.len() {
        let series = |t: usize, v: usize| match &oni_means {
            Some(means) if i == nodes.n_ocean() => means[t * d + v],
            _ => g.value(t, v, nodes.flat_cell(i)),
        };
        match kind {
            StaticFeatureKind::TemporalMean => {
                for v in 0..d {
                    let s: f64 = months.clone().map(|t| series(t, v)).sum();
                    out.push(s / months.len() as f64);
                }
            }
            StaticFeatureKind::FullSeries => {
                for v in 0..d {
                    out.extend(months.clone().map(|t| series(t, v)));
                }
            }
        }
        let (lat, lon) = nodes.coords(i);
        out.push(lat / 90.0);
        out.push(lon / 180.0);
    }
    Tensor::matrix(nodes.len(), width, out)
}
