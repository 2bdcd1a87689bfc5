use graphino::analysis::{
    centrality_csv, centrality_ranks, centrality_svg, eigenvector_centrality, export_centrality_heatmap,
    export_forecast_timeseries, forecast_svg, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use graphino::data::{land_filter_nodes, synth_teleconnection_dataset, SynthConfig};
use graphino::tensor::Tensor;
use graphino::train::EvalReport;
use proptest::prelude::*;

fn positive_matrix(n: usize, raw: &[f64]) -> Tensor {
    Tensor::matrix(
        n,
        n,
        (0..n * n).map(|k| raw[k % raw.len()] + 1e-3 * (k % 7) as f64).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_scores_satisfy_the_eigen_equation(
        n in 1usize..40,
        raw in prop::collection::vec(0.0f64..1.0, 1..200),
    ) {
        let a = positive_matrix(n, &raw);
        let c = eigenvector_centrality(&a, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        prop_assert!(c.residual <= 1e-8 * a.frobenius_norm());
        prop_assert!(c.v.iter().all(|&x| x >= 0.0));
        let norm: f64 = c.v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relabelling_nodes_relabels_scores(
        n in 2usize..20,
        raw in prop::collection::vec(0.0f64..1.0, 1..200),
        shift in 1usize..19,
    ) {
        let a = positive_matrix(n, &raw);
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let mut b = a.clone();
        for i in 0..n {
            for j in 0..n {
                b.set(i, j, a.get(perm[i], perm[j]));
            }
        }
        let ca = eigenvector_centrality(&a, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let cb = eigenvector_centrality(&b, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((cb.v[i] - ca.v[p]).abs() < 1e-8);
        }
        let ranks = centrality_ranks(&ca.v);
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn heatmap_svg_is_well_formed_and_skips_land() {
    let (g, truth) = synth_teleconnection_dataset(&SynthConfig::default()).unwrap();
    let nodes = land_filter_nodes(&g).unwrap().with_oni_node();
    let n = nodes.len();
    let v: Vec<f64> = (0..n).map(|i| (i + 1) as f64 / n as f64).collect();
    let a = Tensor::matrix(
        n,
        n,
        (0..n * n)
            .map(|k| if k % (n + 1) == 0 { 2.0 } else { 0.1 * v[k % n] })
            .collect(),
    )
    .unwrap();
    let scores = eigenvector_centrality(&a, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let svg = centrality_svg(&scores, &nodes);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let cells = doc
        .descendants()
        .filter(|e| e.has_tag_name("rect") && e.attribute("fill").is_some_and(|f| f.starts_with('#')))
        .count();
    assert_eq!(cells, 64 - truth.land_cells.len());
    assert_eq!(centrality_csv(&scores, &nodes).lines().count(), 1 + nodes.n_ocean());

    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("maps").join("lead.1");
    export_centrality_heatmap(&scores, &nodes, &stem).unwrap();
    assert!(dir.path().join("maps/lead.1.csv").exists());
    assert!(dir.path().join("maps/lead.1.svg").exists());
}

#[test]
fn forecast_export_is_deterministic_and_parses() {
    let targets: Vec<f64> = (0..30).map(|t| (t as f64 * 0.4).sin()).collect();
    let preds: Vec<f64> = targets.iter().map(|y| 0.8 * y + 0.05).collect();
    let rep = EvalReport::new(3, preds, targets).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    export_forecast_timeseries(&rep, &a).unwrap();
    export_forecast_timeseries(&rep, &b).unwrap();
    let read = |p: &std::path::Path, ext: &str| std::fs::read(format!("{}.{ext}", p.display())).unwrap();
    assert_eq!(read(&a, "svg"), read(&b, "svg"));
    assert_eq!(read(&a, "csv"), read(&b, "csv"));
    let svg = forecast_svg(&rep);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let title = doc
        .descendants()
        .find(|e| e.has_tag_name("text"))
        .unwrap()
        .text()
        .unwrap();
    assert!(title.contains("r = 1.000") && title.contains("RMSE = "), "{title}");
    assert_eq!(doc.descendants().filter(|e| e.has_tag_name("polyline")).count(), 2);
}
