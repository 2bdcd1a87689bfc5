use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::centrality::CentralityScores;
use crate::data::NodeIndex;
use crate::error::{Error, Result};
use crate::train::EvalReport;

const CELL_PX: usize = 14;
const MARGIN: usize = 30;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `<stem>.<ext>`, keeping any dots already in the stem.
pub fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Light gray through red to yellow for `t` in [0, 1].
fn ramp(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, u: f64| (a + (b - a) * u).round() as u8;
    if t < 0.5 {
        let u = t / 0.5;
        (lerp(210.0, 215.0, u), lerp(210.0, 40.0, u), lerp(210.0, 30.0, u))
    } else {
        let u = (t - 0.5) / 0.5;
        (lerp(215.0, 255.0, u), lerp(40.0, 225.0, u), lerp(30.0, 20.0, u))
    }
}

/// Writes `<stem>.csv` (`lat,lon,centrality`, ocean nodes only) and
/// `<stem>.svg`, an equirectangular cell map with land left blank.
pub fn export_centrality_heatmap(scores: &CentralityScores, nodes: &NodeIndex, stem: &Path) -> Result<()> {
    if scores.v.len() != nodes.len() {
        return Err(Error::Data(format!(
            "{} centrality scores for {} nodes",
            scores.v.len(),
            nodes.len()
        )));
    }
    write(&with_suffix(stem, "csv"), &centrality_csv(scores, nodes))?;
    write(&with_suffix(stem, "svg"), &centrality_svg(scores, nodes))
}

pub fn centrality_csv(scores: &CentralityScores, nodes: &NodeIndex) -> String {
    let mut text = String::from("lat,lon,centrality\n");
    for i in 0..nodes.n_ocean() {
        let (lat, lon) = nodes.coords(i);
        let _ = writeln!(text, "{lat},{lon},{}", scores.v[i]);
    }
    text
}

pub fn centrality_svg(scores: &CentralityScores, nodes: &NodeIndex) -> String {
    let geo = nodes.geometry;
    let ocean = &scores.v[..nodes.n_ocean()];
    let lo = ocean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ocean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let width = geo.n_lon * CELL_PX + 2 * MARGIN;
    let height = geo.n_lat * CELL_PX + 2 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(s, r##"<?xml version="1.0" encoding="UTF-8"?>"##);
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"##
    );
    let _ = writeln!(
        s,
        r##"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="12">eigenvector centrality (lambda = {:.6})</text>"##,
        MARGIN - 10,
        scores.lambda_max
    );
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"##,
        geo.n_lon * CELL_PX,
        geo.n_lat * CELL_PX
    );
    for (i, &(a, b)) in nodes.cells.iter().enumerate() {
        let t = if span > 0.0 { (scores.v[i] - lo) / span } else { 0.0 };
        let (r, g, bl) = ramp(t);
        // north up: the last latitude row is drawn first
        let x = MARGIN + b * CELL_PX;
        let y = MARGIN + (geo.n_lat - 1 - a) * CELL_PX;
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{y}" width="{CELL_PX}" height="{CELL_PX}" fill="#{r:02x}{g:02x}{bl:02x}"/>"##
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` (`index,target,prediction`) and `<stem>.svg`, a line
/// chart of both series titled with r and RMSE.
pub fn export_forecast_timeseries(report: &EvalReport, stem: &Path) -> Result<()> {
    if report.predictions.is_empty() {
        return Err(Error::Data("forecast report is empty".into()));
    }
    write(&with_suffix(stem, "csv"), &report.predictions_csv())?;
    write(&with_suffix(stem, "svg"), &forecast_svg(report))
}

pub fn forecast_svg(report: &EvalReport) -> String {
    const W: f64 = 720.0;
    const H: f64 = 320.0;
    const M: f64 = 40.0;
    let all = report.targets.iter().chain(&report.predictions);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    let n = report.targets.len();
    let x = |i: usize| M + (W - 2.0 * M) * if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let y = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);
    let line = |vals: &[f64]| {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(s, r##"<?xml version="1.0" encoding="UTF-8"?>"##);
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"##
    );
    let _ = writeln!(
        s,
        r##"<text x="{M}" y="{}" font-family="sans-serif" font-size="13">ONI forecast, lead {} (r = {:.3}, RMSE = {:.3})</text>"##,
        M - 15.0,
        report.lead,
        report.r,
        report.rmse
    );
    let _ = writeln!(
        s,
        r##"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - 2.0 * M,
        H - 2.0 * M
    );
    if lo < 0.0 && hi > 0.0 {
        let _ = writeln!(
            s,
            r##"<line x1="{M}" y1="{y0:.2}" x2="{}" y2="{y0:.2}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
            W - M,
            y0 = y(0.0)
        );
    }
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="black" stroke-width="1.5" points="{}"/>"##,
        line(&report.targets)
    );
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#d62728" stroke-width="1.5" points="{}"/>"##,
        line(&report.predictions)
    );
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="11">black: observed, red: predicted</text>"##,
        M,
        H - 12.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GridGeometry;

    fn nodes() -> NodeIndex {
        NodeIndex {
            geometry: GridGeometry {
                n_lat: 2,
                n_lon: 3,
                lat0: -2.5,
                dlat: 5.0,
                lon0: 190.0,
                dlon: 5.0,
            },
            cells: vec![(0, 0), (0, 1), (1, 0), (1, 2)],
            oni_node: true,
        }
    }

    fn scores(v: Vec<f64>) -> CentralityScores {
        CentralityScores {
            v,
            lambda_max: 1.0,
            residual: 0.0,
            iterations: 1,
        }
    }

    #[test]
    fn csv_has_one_row_per_ocean_node() {
        let csv = centrality_csv(&scores(vec![0.1, 0.2, 0.3, 0.4, 0.5]), &nodes());
        assert_eq!(csv.lines().count(), 1 + 4);
        assert_eq!(csv.lines().nth(4).unwrap(), "2.5,200,0.4");
    }

    #[test]
    fn uniform_scores_give_one_colour() {
        let svg = centrality_svg(&scores(vec![0.5; 5]), &nodes());
        let fills: std::collections::BTreeSet<&str> = svg
            .lines()
            .filter_map(|l| l.split("fill=\"#").nth(1))
            .map(|f| &f[..6])
            .collect();
        assert_eq!(fills.len(), 1);
        assert_eq!(svg.matches("<rect").count(), 1 + 4);
    }

    #[test]
    fn forecast_svg_is_deterministic() {
        let rep = EvalReport::new(1, vec![0.1, 0.5, -0.2], vec![0.0, 0.4, -0.1]).unwrap();
        assert_eq!(forecast_svg(&rep), forecast_svg(&rep.clone()));
        assert!(forecast_svg(&rep).contains("RMSE = "));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), (210, 210, 210));
        assert_eq!(ramp(1.0), (255, 225, 20));
    }
}
