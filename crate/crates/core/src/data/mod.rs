//! Gridded anomaly data, graph nodes, ONI labels and training samples.

mod grid;
mod nodes;
mod oni;
mod samples;
mod synth;

pub use grid::{GridGeometry, GridSet, YearMonth, HEAT_CONTENT, KNOWN_VARIABLES, SST};
pub use nodes::{
    land_filter_nodes, local_adjacency, static_feature_width, static_node_features, NodeIndex, StaticFeatureKind,
};
pub use oni::{add_oni_node, centered_running_mean, compute_oni_series, region_cells, region_means, OniRegion};
pub use samples::{build_samples, split_boundary, window_inputs, SampleSet, Split};
pub use synth::{synth_teleconnection_dataset, SynthConfig, SynthTruth};
