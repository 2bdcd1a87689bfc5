//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    eigenvector_centrality, export_centrality_heatmap, export_forecast_timeseries, with_suffix, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use crate::data::{land_filter_nodes, synth_teleconnection_dataset, window_inputs, GridSet, SynthConfig};
use crate::error::{Error, Result};
use crate::experiment::{build_model, prepare, run_ablation, RunConfig};
use crate::model::{EdgeInit, EdgeMode, GcnConfig, ModelConfig, ModelState, Pooling, Preset, StructureConfig};
use crate::tensor::{grad_check, Activation, Mode, Tensor};
use crate::train::{evaluate, train, write_loss_history};

#[derive(Debug, Parser)]
#[command(
    name = "graphino",
    version,
    about = "Graph network ONI forecasting with a learned adjacency"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON file with `model`, `train`, `structure` and `data` sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid directory (manifest.json, mask.bin, data.bin)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Forecast lead in months
    #[arg(long)]
    lead: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// gcn2a, gcn2b, gcn3a or gcn3b
    #[arg(long)]
    preset: Option<Preset>,
    /// learned or local
    #[arg(long)]
    edges: Option<EdgeMode>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic teleconnection grid
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        n_lat: usize,
        #[arg(long, default_value_t = 8)]
        n_lon: usize,
        #[arg(long, default_value_t = 120)]
        months: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_sd: f64,
    },
    /// Train one model and write a checkpoint plus loss history
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the test period
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Forecast every complete input window of a grid
    Predict {
        #[command(flatten)]
        common: Common,
    },
    /// Eigenvector centrality map of a checkpoint's adjacency
    Centrality {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of a small end-to-end model
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Learned versus local edges on the same data
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(h) = common.lead {
        cfg.data.lead = h;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = common.preset {
        cfg.train.preset = p;
    }
    if let Some(e) = common.edges {
        cfg.structure.edges = e;
    }
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn load_grid(common: &Common) -> Result<GridSet> {
    GridSet::load(require(&common.data, "data")?)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData {
            common,
            n_lat,
            n_lon,
            months,
            noise_sd,
        } => {
            let out = require(&common.out, "out")?;
            let cfg = SynthConfig {
                n_lat,
                n_lon,
                n_time: months,
                lead: common.lead.unwrap_or(1),
                seed: common.seed.unwrap_or(0),
                noise_sd,
                ..SynthConfig::default()
            };
            let (g, truth) = synth_teleconnection_dataset(&cfg)?;
            g.save(out)?;
            let path = out.join("truth.json");
            let text = serde_json::to_string_pretty(&truth).expect("truth serializes");
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            println!(
                "wrote {}x{} grid, {} months, driver cells {:?} to {}",
                n_lat,
                n_lon,
                months,
                truth.driver_cells,
                out.display()
            );
            Ok(())
        }
        Command::Train { common, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let g = load_grid(&common)?;
            let prep = prepare(&g, &cfg.data)?;
            let mut model = build_model(&g, &prep, cfg.model_config(g.n_vars()), cfg.train.seed)?;
            let history = train(&mut model, &prep.train, &cfg.train)?;
            let out_dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let ckpt = common.checkpoint.clone().unwrap_or_else(|| out_dir.join("model.ckpt"));
            model.save(&ckpt)?;
            write_loss_history(&history, &out_dir.join("loss_history.csv"))?;
            let rep = evaluate(&model, &prep.test)?;
            println!(
                "trained {} epochs on {} samples; final loss {:.6}; test r {:.4} rmse {:.4} (n={})",
                history.len(),
                prep.train.len(),
                history.last().copied().unwrap_or(f64::NAN),
                rep.r,
                rep.rmse,
                rep.n
            );
            println!("checkpoint: {}", ckpt.display());
            Ok(())
        }
        Command::Evaluate { common } => {
            let cfg = load_config(&common)?;
            let model = ModelState::load(require(&common.checkpoint, "checkpoint")?)?;
            let g = load_grid(&common)?;
            let mut data = cfg.data.clone();
            data.window = model.gcn().window;
            data.lead = model.gcn().lead;
            data.oni_node = model.nodes.as_ref().map_or(data.oni_node, |n| n.oni_node);
            let prep = prepare(&g, &data)?;
            if prep.nodes.len() != model.n_nodes() {
                return Err(Error::Data(format!(
                    "grid yields {} nodes, checkpoint expects {}",
                    prep.nodes.len(),
                    model.n_nodes()
                )));
            }
            let rep = evaluate(&model, &prep.test)?;
            print!("{}", rep.summary_csv());
            if let Some(stem) = &common.out {
                rep.write_summary_csv(&with_suffix(stem, "summary.csv"))?;
                export_forecast_timeseries(&rep, stem)?;
            }
            Ok(())
        }
        Command::Predict { common } => {
            let model = ModelState::load(require(&common.checkpoint, "checkpoint")?)?;
            let g = load_grid(&common)?;
            let mut nodes = land_filter_nodes(&g)?;
            nodes.oni_node = model.nodes.as_ref().is_some_and(|n| n.oni_node);
            let w = model.gcn().window;
            let h = model.gcn().lead;
            let (ends, inputs): (Vec<usize>, Vec<Tensor>) = window_inputs(&g, &nodes, w)?.into_iter().unzip();
            let preds = model.predict(&inputs)?;
            let mut text = String::from("window_end,target_month,prediction\n");
            for (end, p) in ends.iter().zip(&preds) {
                text.push_str(&format!(
                    "{},{},{p}\n",
                    g.start_month.plus_months(*end),
                    g.start_month.plus_months(end + h)
                ));
            }
            match &common.out {
                Some(path) => fs::write(path, &text).map_err(|e| Error::io(path, e))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Centrality { common } => {
            let model = ModelState::load(require(&common.checkpoint, "checkpoint")?)?;
            let stem = require(&common.out, "out")?;
            let nodes = model
                .nodes
                .clone()
                .ok_or_else(|| Error::Format("checkpoint carries no node coordinates".into()))?;
            let a = model.adjacency()?;
            let c = eigenvector_centrality(&a.matrix, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            export_centrality_heatmap(&c, &nodes, stem)?;
            println!(
                "lambda_max {:.6} residual {:.3e} after {} iterations; wrote {} and {}",
                c.lambda_max,
                c.residual,
                c.iterations,
                with_suffix(stem, "csv").display(),
                with_suffix(stem, "svg").display()
            );
            Ok(())
        }
        Command::Gradcheck { common } => {
            let err = end_to_end_grad_check(common.seed.unwrap_or(0))?;
            println!("max relative error {err:.3e}");
            if err > 1e-4 {
                return Err(Error::Numeric(format!("gradient check failed: {err:.3e} > 1e-4")));
            }
            Ok(())
        }
        Command::Ablation { common, seeds, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if seeds.is_empty() {
                return Err(Error::Config("--seeds needs at least one seed".into()));
            }
            let g = load_grid(&common)?;
            let run = run_ablation(&g, &cfg, &seeds)?;
            print!("{}", run.report.table());
            if let Some(path) = &common.out {
                let text = serde_json::to_string_pretty(&run.report).expect("report serializes");
                fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        }
    }
}

/// Finite-difference check of structure learner, two graph convolutions and
/// the MLP head on a six-node graph with four input features.
pub fn end_to_end_grad_check(seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let n = 6;
    let config = ModelConfig {
        gcn: GcnConfig {
            layer_dims: vec![4, 4],
            pooling: Pooling::SumAndMean,
            mlp_hidden: Some(3),
            activation: Activation::Elu,
            use_residual: true,
            use_jumping_knowledge: true,
            window: 2,
            features_per_node: 2,
            lead: 1,
        },
        structure: StructureConfig {
            // larger alpha1 keeps the structure gradients well above the
            // finite-difference noise floor
            alpha1: 1.0,
            embed_dim: 3,
            edges_per_node: 2,
            ..StructureConfig::default()
        },
    };
    let xs = Tensor::matrix(n, 3, uniform(n * 3))?;
    let model = ModelState::init(config, EdgeInit::Learned { static_features: xs }, seed)?;
    let inputs: Vec<Tensor> = (0..3)
        .map(|_| Tensor::matrix(n, 4, uniform(n * 4)))
        .collect::<Result<_>>()?;
    let targets = Tensor::matrix(3, 1, uniform(3))?;
    let mask = model.adjacency()?.kept_mask;
    let refs: Vec<&Tensor> = inputs.iter().collect();
    grad_check(
        |tape, vars| {
            let f = model.forward(tape, vars, &refs, Mode::Train, Some(&mask))?;
            let t = tape.constant(targets.clone());
            tape.mse_loss(f.prediction, t)
        },
        &model.param_tensors(),
        1e-5,
    )
}
