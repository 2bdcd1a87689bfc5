//! End-to-end acceptance criteria. Every test writes one `criterion N: PASS|FAIL`
//! line straight to stdout (bypassing the harness capture) before asserting.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use graphino::analysis::{centrality_ranks, eigenvector_centrality, DEFAULT_MAX_ITER, DEFAULT_TOL};
use graphino::cli::end_to_end_grad_check;
use graphino::data::{
    build_samples, compute_oni_series, land_filter_nodes, synth_teleconnection_dataset, GridGeometry, GridSet,
    StaticFeatureKind, SynthConfig, SynthTruth, YearMonth, HEAT_CONTENT, SST,
};
use graphino::experiment::{build_model, prepare, run_ablation, AblationRun, RunConfig};
use graphino::model::{EdgeInit, GcnConfig, ModelConfig, ModelState, Pooling, StructureConfig};
use graphino::structure::{build_adjacency, sparsify_top_e, StructureParams};
use graphino::tensor::{Activation, Tensor};
use graphino::train::{evaluate, train, write_loss_history};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[test]
fn criterion_01_end_to_end_gradients() {
    let t = Instant::now();
    let err = end_to_end_grad_check(0).unwrap();
    let elapsed = t.elapsed();
    let pass = err <= 1e-4 && elapsed < Duration::from_secs(30);
    report(1, pass, &format!("max relative error {err:.2e}, {elapsed:.1?}"));
    assert!(pass);
}

fn top_e_oracle(values: &[f64], n: usize, e: usize) -> (Vec<f64>, Vec<bool>) {
    let mut entries: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .collect();
    entries.sort_by(|a, b| {
        values[b.0 * n + b.1]
            .partial_cmp(&values[a.0 * n + a.1])
            .unwrap()
            .then(a.cmp(b))
    });
    let mut out = vec![0.0; n * n];
    let mut kept = vec![false; n * n];
    for &(i, j) in entries.iter().take(e) {
        out[i * n + j] = values[i * n + j];
        kept[i * n + j] = true;
    }
    (out, kept)
}

#[test]
fn criterion_02_sparsification_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for case in 0..200 {
        let n = rng.gen_range(1..=20);
        let values: Vec<f64> = if case % 2 == 0 {
            uniform(&mut rng, n * n, 0.0, 1.0)
        } else {
            // coarse values force many ties
            (0..n * n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect()
        };
        let e = rng.gen_range(0..=n * (n - 1) + 2);
        let scores = Tensor::matrix(n, n, values.clone()).unwrap();
        let got = sparsify_top_e(&scores, e).unwrap();
        let (want, kept) = top_e_oracle(&values, n, e);
        if got.matrix.data() != want.as_slice() || got.kept_mask != kept {
            mismatches += 1;
        }
    }
    let elapsed = t.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(5);
    report(2, pass, &format!("{mismatches} of 200 mismatches, {elapsed:.1?}"));
    assert!(pass);
}

/// Perron vector from a dense eigendecomposition: the spectral radius from
/// the complex eigenvalues, then the null vector of `A − λI` from an SVD.
fn dense_perron(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let lambda = a
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    let shifted = a - DMatrix::identity(n, n) * lambda;
    let svd = shifted.svd(false, true);
    let vt = svd.v_t.unwrap();
    let k = (0..n)
        .min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
        .unwrap();
    let mut v: Vec<f64> = vt.row(k).iter().copied().collect();
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

#[test]
fn criterion_03_centrality_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_cos, mut worst_res) = (1.0f64, 0.0f64);
    let mut failures = 0;
    for case in 0..100 {
        let n = rng.gen_range(1..=64);
        let mut data = vec![0.0; n * n];
        if case % 2 == 0 {
            data.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
        } else {
            // sparse learned-graph shape: self-loops, a ring for irreducibility,
            // and random extra weighted edges
            for i in 0..n {
                data[i * n + i] = 1.0;
                data[i * n + (i + 1) % n] = rng.gen_range(0.1..1.0);
                for j in 0..n {
                    if i != j && rng.gen_bool(0.1) {
                        data[i * n + j] = rng.gen_range(0.0..1.0);
                    }
                }
            }
        }
        let a = Tensor::matrix(n, n, data.clone()).unwrap();
        let c = eigenvector_centrality(&a, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let oracle = dense_perron(&DMatrix::from_row_slice(n, n, &data));
        let cos: f64 = c.v.iter().zip(&oracle).map(|(x, y)| x * y).sum();
        let tol = 1e-8 * a.frobenius_norm();
        worst_cos = worst_cos.min(cos);
        worst_res = worst_res.max(c.residual / a.frobenius_norm());
        if cos < 1.0 - 1e-8 || c.residual > tol {
            failures += 1;
        }
    }
    let elapsed = t.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(10);
    report(
        3,
        pass,
        &format!(
            "{failures} of 100 failed; min cosine 1 - {:.1e}, max residual/|A|_F {worst_res:.1e}, {elapsed:.1?}",
            1.0 - worst_cos
        ),
    );
    assert!(pass);
}

fn permuted_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let c = x.cols();
    let data = perm.iter().flat_map(|&p| x.row(p).to_vec()).collect();
    Tensor::matrix(perm.len(), c, data).unwrap()
}

#[test]
fn criterion_04_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let n = rng.gen_range(4..=14);
        let window = rng.gen_range(1..=3);
        let width = rng.gen_range(2..=6);
        let layers = rng.gen_range(1..=3);
        let config = ModelConfig {
            gcn: GcnConfig {
                layer_dims: vec![width; layers],
                pooling: if case % 2 == 0 {
                    Pooling::Mean
                } else {
                    Pooling::SumAndMean
                },
                mlp_hidden: Some(rng.gen_range(2..=5)),
                activation: Activation::Elu,
                use_residual: true,
                use_jumping_knowledge: rng.gen_bool(0.5),
                window,
                features_per_node: 2,
                lead: 1,
            },
            structure: StructureConfig {
                alpha1: 1.0,
                embed_dim: rng.gen_range(2..=5),
                edges_per_node: rng.gen_range(1..=3),
                ..StructureConfig::default()
            },
        };
        let d_static = rng.gen_range(2..=5);
        let xs = Tensor::matrix(n, d_static, uniform(&mut rng, n * d_static, -1.0, 1.0)).unwrap();
        let mut model = ModelState::init(
            config.clone(),
            EdgeInit::Learned {
                static_features: xs.clone(),
            },
            case,
        )
        .unwrap();
        for bn in model.batchnorms_mut() {
            let k = bn.running_mean.len();
            bn.running_mean = uniform(&mut rng, k, -0.5, 0.5);
            bn.running_var = uniform(&mut rng, k, 0.5, 2.0);
        }
        let inputs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::matrix(n, 2 * window, uniform(&mut rng, n * 2 * window, -2.0, 2.0)).unwrap())
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut permuted = model.clone();
        if let graphino::model::Edges::Learned(p) = &mut permuted.edges {
            p.static_features = permuted_rows(&xs, &perm);
        }
        let moved: Vec<Tensor> = inputs.iter().map(|x| permuted_rows(x, &perm)).collect();
        let a = model.predict(&inputs).unwrap();
        let b = permuted.predict(&moved).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    let pass = worst <= 1e-9;
    report(4, pass, &format!("max prediction change {worst:.2e} over 20 models"));
    assert!(pass);
}

struct OverfitRun {
    mse: f64,
    target_var: f64,
    elapsed: Duration,
    checkpoint: Vec<u8>,
    blob: Vec<u8>,
    history: Vec<u8>,
}

fn overfit_once() -> OverfitRun {
    let (g, _) = synth_teleconnection_dataset(&SynthConfig::default()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.layer_dims = Some(vec![32, 16]);
    cfg.data.lead = 1;
    cfg.train.epochs = 200;
    let t = Instant::now();
    let prep = prepare(&g, &cfg.data).unwrap();
    let mut model = build_model(&g, &prep, cfg.model_config(g.n_vars()), 0).unwrap();
    let history = train(&mut model, &prep.train, &cfg.train).unwrap();
    let rep = evaluate(&model, &prep.train).unwrap();
    let elapsed = t.elapsed();
    let targets = &prep.train.targets;
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let target_var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / targets.len() as f64;
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    model.save(&ckpt).unwrap();
    let hist = dir.path().join("loss.csv");
    write_loss_history(&history, &hist).unwrap();
    OverfitRun {
        mse: rep.rmse * rep.rmse,
        target_var,
        elapsed,
        checkpoint: std::fs::read(&ckpt).unwrap(),
        blob: std::fs::read(dir.path().join("model.ckpt.bin")).unwrap(),
        history: std::fs::read(&hist).unwrap(),
    }
}

fn overfit_runs() -> &'static (OverfitRun, OverfitRun) {
    static RUNS: OnceLock<(OverfitRun, OverfitRun)> = OnceLock::new();
    RUNS.get_or_init(|| (overfit_once(), overfit_once()))
}

#[test]
fn criterion_05_overfit() {
    let run = &overfit_runs().0;
    let ratio = run.mse / run.target_var;
    let pass = ratio <= 0.05 && run.elapsed < Duration::from_secs(300);
    report(
        5,
        pass,
        &format!(
            "training MSE {:.4} = {ratio:.3} x target variance {:.4}, {:.1?}",
            run.mse, run.target_var, run.elapsed
        ),
    );
    assert!(pass);
}

const ABLATION_LEAD: usize = 3;

struct Ablation {
    truth: SynthTruth,
    run: AblationRun,
    elapsed: Duration,
}

fn ablation() -> &'static Ablation {
    static RUN: OnceLock<Ablation> = OnceLock::new();
    RUN.get_or_init(|| {
        let synth = SynthConfig {
            lead: ABLATION_LEAD,
            n_time: 240,
            ..SynthConfig::default()
        };
        let (g, truth) = synth_teleconnection_dataset(&synth).unwrap();
        let mut cfg = RunConfig::default();
        cfg.model.layer_dims = Some(vec![32, 16]);
        cfg.data.lead = ABLATION_LEAD;
        cfg.train.epochs = 100;
        cfg.structure.static_features = StaticFeatureKind::FullSeries;
        let t = Instant::now();
        let run = run_ablation(&g, &cfg, &[0, 1, 2]).unwrap();
        Ablation {
            truth,
            run,
            elapsed: t.elapsed(),
        }
    })
}

#[test]
fn criterion_06_ablation_direction() {
    let ab = ablation();
    let gap = ab
        .truth
        .driver_cells
        .iter()
        .flat_map(|d| {
            ab.truth
                .oni_cells
                .iter()
                .map(move |o| d.1.abs_diff(o.1).max(d.0.abs_diff(o.0)))
        })
        .min()
        .unwrap();
    let rep = &ab.run.report;
    let (learned, local) = (rep.mean_learned_r(), rep.mean_local_r());
    let pass = gap >= 4 && learned >= 0.85 && learned - local >= 0.15 && ab.elapsed < Duration::from_secs(900);
    report(
        6,
        pass,
        &format!(
            "lead {ABLATION_LEAD}, driver gap {gap} cells: learned r {learned:.3}, local r {local:.3}, {:.1?}",
            ab.elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_driver_centrality() {
    let ab = ablation();
    let mut hits = 0;
    let mut per_seed = Vec::new();
    let mut transposed = Vec::new();
    for model in &ab.run.learned {
        let nodes = model.nodes.as_ref().unwrap();
        let a = model.adjacency().unwrap().matrix;
        let mean_rank = |v: &[f64]| {
            let ranks = centrality_ranks(v);
            ab.truth
                .driver_cells
                .iter()
                .map(|&(r, c)| ranks[nodes.node_of(r, c).unwrap()] as f64)
                .sum::<f64>()
                / ab.truth.driver_cells.len() as f64
        };
        let c = eigenvector_centrality(&a, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let rank = mean_rank(&c.v);
        if rank < nodes.len() as f64 / 10.0 {
            hits += 1;
        }
        per_seed.push(rank);
        // diagnostic only: the same score on Aᵀ, where a node scores by the
        // nodes that aggregate from it
        transposed.push(mean_rank(
            &eigenvector_centrality(&a.transpose(), DEFAULT_TOL, DEFAULT_MAX_ITER)
                .unwrap()
                .v,
        ));
    }
    let n = ab.run.learned[0].n_nodes();
    let pass = hits >= 2;
    report(
        7,
        pass,
        &format!(
            "mean driver rank per seed {per_seed:.1?} of {n} nodes (top decile < {:.1}); {hits} of 3 seeds in top decile; on the transposed matrix {transposed:.1?}",
            n as f64 / 10.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_determinism() {
    let (a, b) = overfit_runs();
    let pass = a.checkpoint == b.checkpoint && a.blob == b.blob && a.history == b.history;
    report(
        8,
        pass,
        &format!(
            "manifest {} B, tensors {} B, loss history {} B; identical: {}",
            a.checkpoint.len(),
            a.blob.len(),
            a.history.len(),
            pass
        ),
    );
    assert!(pass);
}

fn oni_grid(values: &[f64]) -> GridSet {
    // one ocean cell inside the ONI region and one outside
    let geometry = GridGeometry {
        n_lat: 1,
        n_lon: 2,
        lat0: 0.0,
        dlat: 5.0,
        lon0: 215.0,
        dlon: 60.0,
    };
    let n_time = values.len();
    let mut data = Vec::with_capacity(n_time * 4);
    for (t, &v) in values.iter().enumerate() {
        data.extend_from_slice(&[v, (t as f64) * 0.25, v * 0.5, 1.0 - t as f64]);
    }
    GridSet::new(
        geometry,
        YearMonth::new(2000, 1).unwrap(),
        n_time,
        vec![SST.into(), HEAT_CONTENT.into()],
        vec![false, false],
        data,
    )
    .unwrap()
}

#[test]
fn criterion_09_data_layer() {
    let mut problems = Vec::new();

    // sample counts against enumeration of (window start, target month)
    let mut cases = 0;
    for t_len in 1..=20 {
        let g = oni_grid(&(0..t_len).map(|t| (t as f64 * 0.7).sin()).collect::<Vec<_>>());
        let nodes = land_filter_nodes(&g).unwrap();
        let oni = compute_oni_series(&g, 3).unwrap();
        for w in 1..=4 {
            for h in 1..=3 {
                cases += 1;
                let expected = (0..t_len)
                    .filter(|&s| s + w <= t_len)
                    .filter(|&s| {
                        let target = s + w - 1 + h;
                        target >= 1 && target + 1 < t_len
                    })
                    .count();
                match (build_samples(&g, &nodes, w, h, &oni), expected) {
                    (Ok(s), e) if s.len() == e => {}
                    (Err(_), 0) => {}
                    (got, e) => problems.push(format!(
                        "T={t_len} w={w} h={h}: expected {e}, got {:?}",
                        got.map(|s| s.len())
                    )),
                }
            }
        }
    }

    // leakage: corrupting every month after a window end leaves that input alone
    let (g, _) = synth_teleconnection_dataset(&SynthConfig {
        n_time: 48,
        ..SynthConfig::default()
    })
    .unwrap();
    let nodes = land_filter_nodes(&g).unwrap().with_oni_node();
    let oni = compute_oni_series(&g, 3).unwrap();
    let clean = build_samples(&g, &nodes, 3, 2, &oni).unwrap();
    let per_month = g.n_vars() * g.geometry.n_cells();
    for (k, &end) in clean.window_end.iter().enumerate() {
        let mut values = g.values().to_vec();
        for (idx, v) in values.iter_mut().enumerate().skip((end + 1) * per_month) {
            if !g.is_land(idx % g.geometry.n_cells()) {
                *v = 1.0e6 + idx as f64;
            }
        }
        let corrupted = GridSet::new(
            g.geometry,
            g.start_month,
            g.n_time,
            g.variables.clone(),
            g.land_mask.clone(),
            values,
        )
        .unwrap();
        let mutated = build_samples(&corrupted, &nodes, 3, 2, &oni).unwrap();
        if mutated.inputs[k] != clean.inputs[k] {
            problems.push(format!("sample ending at month {end} reads later months"));
        }
    }

    // container round trip
    let dir = tempfile::tempdir().unwrap();
    g.save(dir.path()).unwrap();
    let back = GridSet::load(dir.path()).unwrap();
    let bits = |s: &GridSet| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if bits(&back) != bits(&g) || back.land_mask != g.land_mask || back.geometry != g.geometry {
        problems.push("grid round trip is not bit-exact".into());
    }

    // regional means 0, 3, 6 give an ONI of 3 at the middle month
    let oni = compute_oni_series(&oni_grid(&[0.0, 3.0, 6.0]), 3).unwrap();
    if oni != vec![None, Some(3.0), None] {
        problems.push(format!("hand ONI fixture gave {oni:?}"));
    }

    let pass = problems.is_empty();
    report(
        9,
        pass,
        &format!(
            "{cases} count cases, {} leakage windows, round trip, ONI fixture; problems: {problems:?}",
            clean.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_edge_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut problems = Vec::new();
    for case in 0..100 {
        let n = rng.gen_range(2..=16);
        let d1 = rng.gen_range(1..=6);
        let d2 = rng.gen_range(1..=6);
        let e = rng.gen_range(0..=n * (n - 1));
        let alpha1 = rng.gen_range(0.05..2.0);
        let xs = Tensor::matrix(n, d1, uniform(&mut rng, n * d1, -2.0, 2.0)).unwrap();
        let w1 = Tensor::matrix(d1, d2, uniform(&mut rng, d1 * d2, -1.0, 1.0)).unwrap();
        let w2 = Tensor::matrix(d1, d2, uniform(&mut rng, d1 * d2, -1.0, 1.0)).unwrap();
        let mut masks = Vec::new();
        for alpha2 in [0.5, 2.0, 8.0] {
            let p = StructureParams::new(xs.clone(), w1.clone(), w2.clone(), alpha1, alpha2, e).unwrap();
            let a = build_adjacency(&p).unwrap();
            if a.off_diagonal_nonzeros() > e {
                problems.push(format!("case {case}: {} edges > e={e}", a.off_diagonal_nonzeros()));
            }
            if (0..n).any(|i| a.matrix.get(i, i) != 1.0) {
                problems.push(format!("case {case}: diagonal not 1"));
            }
            masks.push(a.kept_mask);
        }
        if masks[0] != masks[1] || masks[1] != masks[2] {
            problems.push(format!("case {case}: kept edges depend on alpha2"));
        }
    }
    let pass = problems.is_empty();
    report(
        10,
        pass,
        &format!("100 parameter sets x 3 alpha2; problems: {problems:?}"),
    );
    assert!(pass);
}
