use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::grid::{GridGeometry, GridSet, YearMonth, HEAT_CONTENT, SST};
use crate::error::{Error, Result};

const AR_COEF: f64 = 0.8;
const DLAT: f64 = 5.0;
const DLON: f64 = 5.0;
const LON0: f64 = 232.5;

/// Parameters of the synthetic teleconnection dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub n_time: usize,
    /// Months by which the driver block leads the ONI region.
    pub lead: usize,
    pub seed: u64,
    /// Noise added to driver and ONI cells and to heat content.
    pub noise_sd: f64,
    /// Standard deviation of the white noise in all other cells.
    #[serde(default = "default_background_sd")]
    pub background_sd: f64,
}

fn default_background_sd() -> f64 {
    1.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_lat: 8,
            n_lon: 8,
            n_time: 120,
            lead: 1,
            seed: 0,
            noise_sd: 0.1,
            background_sd: default_background_sd(),
        }
    }
}

/// Ground truth recorded by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// `(lat_idx, lon_idx)` of the driver block.
    pub driver_cells: Vec<(usize, usize)>,
    /// Equatorial cells that fall inside the ONI region.
    pub oni_cells: Vec<(usize, usize)>,
    pub land_cells: Vec<(usize, usize)>,
    /// Latent signal `s_t` for `t = 0..n_time`.
    pub signal: Vec<f64>,
}

/// Generates a 5° grid where a 2×2 driver block on the equator, east of the
/// ONI region, carries an AR(1) signal `s_t`, and the ONI-region cells carry
/// the same signal `lead` months later.
///
/// Layout: the two rows nearest the equator hold both blocks; longitude
/// columns 0 and 1 lie in the ONI region and the driver occupies the last
/// two columns, at least four steps away. A three-cell land patch sits in
/// the top row when the grid has at least four rows. Values are rounded to
/// 32-bit floats so the grid survives a save/load round trip unchanged.
pub fn synth_teleconnection_dataset(cfg: &SynthConfig) -> Result<(GridSet, SynthTruth)> {
    if cfg.n_lat < 2 {
        return Err(Error::Config(format!(
            "synthetic grid needs at least 2 latitude rows, got {}",
            cfg.n_lat
        )));
    }
    if cfg.n_lon < 7 {
        return Err(Error::Config(format!(
            "synthetic grid needs at least 7 longitude columns to separate driver and ONI blocks, got {}",
            cfg.n_lon
        )));
    }
    if cfg.n_time < 40 {
        return Err(Error::Config(format!(
            "synthetic series needs at least 40 months, got {}",
            cfg.n_time
        )));
    }
    if cfg.lead == 0 {
        return Err(Error::Config("synthetic lead must be >= 1".into()));
    }
    for (name, sd) in [("noise_sd", cfg.noise_sd), ("background_sd", cfg.background_sd)] {
        if !(sd.is_finite() && sd >= 0.0) {
            return Err(Error::Config(format!("{name} must be finite and >= 0, got {sd}")));
        }
    }

    let r0 = (cfg.n_lat - 1) / 2;
    let geometry = GridGeometry {
        n_lat: cfg.n_lat,
        n_lon: cfg.n_lon,
        lat0: -2.5 - DLAT * r0 as f64,
        dlat: DLAT,
        lon0: LON0,
        dlon: DLON,
    };
    let oni_cells = vec![(r0, 0), (r0, 1), (r0 + 1, 0), (r0 + 1, 1)];
    let driver_cells = vec![
        (r0, cfg.n_lon - 2),
        (r0, cfg.n_lon - 1),
        (r0 + 1, cfg.n_lon - 2),
        (r0 + 1, cfg.n_lon - 1),
    ];
    let land_cells: Vec<(usize, usize)> = if cfg.n_lat >= 4 {
        (2..5).map(|b| (cfg.n_lat - 1, b)).collect()
    } else {
        Vec::new()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut gauss = |sd: f64| sd * std_normal.sample(&mut rng);

    // stationary AR(1) with unit variance; index k holds s_{k - lead}
    let innov_sd = (1.0 - AR_COEF * AR_COEF).sqrt();
    let mut s = Vec::with_capacity(cfg.n_time + cfg.lead);
    s.push(gauss(1.0));
    for _ in 1..cfg.n_time + cfg.lead {
        let prev = *s.last().expect("non-empty");
        s.push(AR_COEF * prev + gauss(innov_sd));
    }
    let sig = |t: usize| s[t + cfg.lead];
    let lagged = |t: usize| s[t];

    let cells = geometry.n_cells();
    let mut land_mask = vec![false; cells];
    for &(a, b) in &land_cells {
        land_mask[a * cfg.n_lon + b] = true;
    }
    let round = |v: f64| v as f32 as f64;
    let mut data = vec![0.0; cfg.n_time * 2 * cells];
    for t in 0..cfg.n_time {
        for a in 0..cfg.n_lat {
            for b in 0..cfg.n_lon {
                let c = a * cfg.n_lon + b;
                if land_mask[c] {
                    continue;
                }
                let sst = if driver_cells.contains(&(a, b)) {
                    sig(t) + gauss(cfg.noise_sd)
                } else if oni_cells.contains(&(a, b)) {
                    lagged(t) + gauss(cfg.noise_sd)
                } else {
                    gauss(cfg.background_sd)
                };
                let sst = round(sst);
                let hc = round(0.5 * sst + gauss(cfg.noise_sd));
                data[(t * 2) * cells + c] = sst;
                data[(t * 2 + 1) * cells + c] = hc;
            }
        }
    }
    let grid = GridSet::new(
        geometry,
        YearMonth::new(1980, 1)?,
        cfg.n_time,
        vec![SST.into(), HEAT_CONTENT.into()],
        land_mask,
        data,
    )?;
    let truth = SynthTruth {
        driver_cells,
        oni_cells,
        land_cells,
        signal: (0..cfg.n_time).map(sig).collect(),
    };
    Ok((grid, truth))
}
