use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SST: &str = "sst_anomaly";
pub const HEAT_CONTENT: &str = "heat_content_anomaly";
pub const KNOWN_VARIABLES: [&str; 2] = [SST, HEAT_CONTENT];

const MANIFEST: &str = "manifest.json";
const MASK_FILE: &str = "mask.bin";
const DATA_FILE: &str = "data.bin";

/// Calendar month, serialized as `YYYY-MM`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct YearMonth {
    pub year: i32,
    /// 1-based month.
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Format(format!("month must be 1..=12, got {month}")));
        }
        Ok(YearMonth { year, month })
    }

    pub fn plus_months(self, k: usize) -> YearMonth {
        let idx = self.year as i64 * 12 + (self.month as i64 - 1) + k as i64;
        YearMonth {
            year: idx.div_euclid(12) as i32,
            month: idx.rem_euclid(12) as u32 + 1,
        }
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("expected YYYY-MM, got {s:?}"));
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        YearMonth::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }
}

/// Regular lat/lon grid description. Longitudes are degrees east.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat0: f64,
    pub dlat: f64,
    pub lon0: f64,
    pub dlon: f64,
}

impl GridGeometry {
    pub fn n_cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn lat(&self, i: usize) -> f64 {
        self.lat0 + i as f64 * self.dlat
    }

    /// Cell-center longitude normalized to [0, 360).
    pub fn lon(&self, j: usize) -> f64 {
        (self.lon0 + j as f64 * self.dlon).rem_euclid(360.0)
    }
}

/// Gridded monthly anomaly fields with a land mask.
///
/// Values are laid out `[time][variable][lat][lon]`, row-major. Land cells
/// hold 0.0 in every variable and month.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSet {
    pub geometry: GridGeometry,
    pub start_month: YearMonth,
    pub n_time: usize,
    pub variables: Vec<String>,
    /// `true` marks land, lat-major.
    pub land_mask: Vec<bool>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n_lat: usize,
    n_lon: usize,
    lat0: f64,
    dlat: f64,
    lon0: f64,
    dlon: f64,
    start_month: String,
    n_time: usize,
    variables: Vec<String>,
    mask_file: String,
    data_file: String,
}

fn check_variables(variables: &[String]) -> Result<()> {
    if variables.is_empty() {
        return Err(Error::Format("grid has no variables".into()));
    }
    for v in variables {
        if !KNOWN_VARIABLES.contains(&v.as_str()) {
            return Err(Error::Format(format!(
                "unknown variable {v:?}; expected one of {KNOWN_VARIABLES:?}"
            )));
        }
    }
    let unique: BTreeSet<_> = variables.iter().collect();
    if unique.len() != variables.len() {
        return Err(Error::Format(format!("duplicate variable names in {variables:?}")));
    }
    Ok(())
}

impl GridSet {
    pub fn new(
        geometry: GridGeometry,
        start_month: YearMonth,
        n_time: usize,
        variables: Vec<String>,
        land_mask: Vec<bool>,
        data: Vec<f64>,
    ) -> Result<Self> {
        check_variables(&variables)?;
        let cells = geometry.n_cells();
        if cells == 0 {
            return Err(Error::Format("grid has zero cells".into()));
        }
        if land_mask.len() != cells {
            return Err(Error::Format(format!(
                "land mask has {} cells, grid has {cells}",
                land_mask.len()
            )));
        }
        let expected = n_time * variables.len() * cells;
        if data.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} values for {n_time} months x {} variables x {cells} cells, got {}",
                variables.len(),
                data.len()
            )));
        }
        let g = GridSet {
            geometry,
            start_month,
            n_time,
            variables,
            land_mask,
            data,
        };
        for t in 0..g.n_time {
            for v in 0..g.n_vars() {
                for (c, &land) in g.land_mask.iter().enumerate() {
                    if land && g.data[g.offset(t, v, c)] != 0.0 {
                        return Err(Error::Format(format!(
                            "land cell {c} holds a non-zero value at month {t}, variable {}",
                            g.variables[v]
                        )));
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }

    fn offset(&self, t: usize, v: usize, cell: usize) -> usize {
        (t * self.n_vars() + v) * self.geometry.n_cells() + cell
    }

    /// Value at month `t`, variable `v`, flat cell index `cell` (lat-major).
    pub fn value(&self, t: usize, v: usize, cell: usize) -> f64 {
        self.data[self.offset(t, v, cell)]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, lat_idx: usize, lon_idx: usize) -> usize {
        lat_idx * self.geometry.n_lon + lon_idx
    }

    pub fn is_land(&self, cell: usize) -> bool {
        self.land_mask[cell]
    }

    /// Writes `manifest.json`, `mask.bin` and `data.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let g = &self.geometry;
        let manifest = Manifest {
            n_lat: g.n_lat,
            n_lon: g.n_lon,
            lat0: g.lat0,
            dlat: g.dlat,
            lon0: g.lon0,
            dlon: g.dlon,
            start_month: self.start_month.to_string(),
            n_time: self.n_time,
            variables: self.variables.clone(),
            mask_file: MASK_FILE.into(),
            data_file: DATA_FILE.into(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
        let mask: Vec<u8> = self.land_mask.iter().map(|&l| l as u8).collect();
        let kpath = dir.join(MASK_FILE);
        fs::write(&kpath, mask).map_err(|e| Error::io(&kpath, e))?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let dpath = dir.join(DATA_FILE);
        fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        check_variables(&m.variables)?;
        let geometry = GridGeometry {
            n_lat: m.n_lat,
            n_lon: m.n_lon,
            lat0: m.lat0,
            dlat: m.dlat,
            lon0: m.lon0,
            dlon: m.dlon,
        };
        let cells = geometry.n_cells();

        let kpath = dir.join(&m.mask_file);
        let mask_bytes = fs::read(&kpath).map_err(|e| Error::io(&kpath, e))?;
        if mask_bytes.len() != cells {
            return Err(Error::Format(format!(
                "{}: expected {cells} bytes, found {}",
                kpath.display(),
                mask_bytes.len()
            )));
        }
        let land_mask = mask_bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("mask byte must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;

        let dpath = dir.join(&m.data_file);
        let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
        let expected = m.n_time * m.variables.len() * cells * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "{}: expected {expected} bytes, found {}",
                dpath.display(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        GridSet::new(geometry, m.start_month.parse()?, m.n_time, m.variables, land_mask, data)
    }

    /// Imports a small grid from `time,lat,lon,var,value` rows.
    ///
    /// The lat/lon axes are the sorted distinct coordinates, which must be
    /// evenly spaced. Cells never mentioned are land; missing entries of
    /// mentioned cells are 0.0.
    pub fn from_csv(path: &Path, start_month: YearMonth) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        struct Row {
            t: usize,
            lat: f64,
            lon: f64,
            var: String,
            value: f64,
        }
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("time")) {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |what: &str| Error::Format(format!("line {}: {what}: {line:?}", lineno + 1));
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            rows.push(Row {
                t: f[0].parse().map_err(|_| bad("bad time index"))?,
                lat: f[1].parse().map_err(|_| bad("bad latitude"))?,
                lon: f[2].parse().map_err(|_| bad("bad longitude"))?,
                var: f[3].to_string(),
                value: f[4].parse().map_err(|_| bad("bad value"))?,
            });
        }
        if rows.is_empty() {
            return Err(Error::Format(format!("{}: no data rows", path.display())));
        }
        let axis = |vals: Vec<f64>, name: &str| -> Result<(f64, f64, usize)> {
            let mut v = vals;
            v.sort_by(f64::total_cmp);
            v.dedup();
            let step = if v.len() > 1 { v[1] - v[0] } else { 1.0 };
            for w in v.windows(2) {
                if ((w[1] - w[0]) - step).abs() > 1e-6 * step.abs().max(1.0) {
                    return Err(Error::Format(format!("{name} axis is not evenly spaced")));
                }
            }
            Ok((v[0], step, v.len()))
        };
        let (lat0, dlat, n_lat) = axis(rows.iter().map(|r| r.lat).collect(), "latitude")?;
        let (lon0, dlon, n_lon) = axis(rows.iter().map(|r| r.lon).collect(), "longitude")?;
        let variables: Vec<String> = KNOWN_VARIABLES
            .iter()
            .filter(|k| rows.iter().any(|r| r.var == **k))
            .map(|k| k.to_string())
            .collect();
        if let Some(r) = rows.iter().find(|r| !KNOWN_VARIABLES.contains(&r.var.as_str())) {
            return Err(Error::Format(format!("unknown variable {:?}", r.var)));
        }
        let n_time = rows.iter().map(|r| r.t).max().unwrap_or(0) + 1;
        let geometry = GridGeometry {
            n_lat,
            n_lon,
            lat0,
            dlat,
            lon0,
            dlon,
        };
        let cells = geometry.n_cells();
        let mut land_mask = vec![true; cells];
        let mut data = vec![0.0; n_time * variables.len() * cells];
        for r in &rows {
            let i = ((r.lat - lat0) / dlat).round() as usize;
            let j = ((r.lon - lon0) / dlon).round() as usize;
            let cell = i * n_lon + j;
            let v = variables.iter().position(|k| *k == r.var).expect("filtered above");
            land_mask[cell] = false;
            data[(r.t * variables.len() + v) * cells + cell] = r.value;
        }
        GridSet::new(geometry, start_month, n_time, variables, land_mask, data)
    }
}
