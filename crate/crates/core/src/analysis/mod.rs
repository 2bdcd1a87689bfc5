//! Eigenvector centrality of the learned graph and chart/CSV exports.

mod centrality;
mod export;

pub use centrality::{centrality_ranks, eigenvector_centrality, CentralityScores, DEFAULT_MAX_ITER, DEFAULT_TOL};
pub use export::{
    centrality_csv, centrality_svg, export_centrality_heatmap, export_forecast_timeseries, forecast_svg, with_suffix,
};
