//! `morphfit`: fit a face model to an image, transfer expressions, train and
//! evaluate the shape branch, synthesize data, and print loss breakdowns.
//!
//! Exit codes: 0 ok, 1 output write failure, 2 bad arguments, 3 missing
//! input, 4 malformed input, 5 numerical failure, 6 size mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use morphfit::ganmath::AttentionOrientation;
use morphfit::io;
use morphfit::pipeline::{self, ErrorKind, PipelineConfig, PipelineError};

#[derive(Parser, Debug)]
#[command(name = "morphfit", version, about = "3D-guided face expression manipulation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Model file (default: the built-in synthetic model)
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// JSON file mirroring the pipeline configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for noise planes, training and synthesis
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Texture and conditioning resolution
    #[arg(long, global = true)]
    resolution: Option<usize>,
    /// Spectral basis size of the shape branch
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Skip depth refinement even when depth is given
    #[arg(long, global = true)]
    no_depth_refine: bool,
    /// Blend falloff sigma^2 in mm^2
    #[arg(long, global = true)]
    blend_sigma2: Option<f64>,
    /// Which input an attention value of 1 selects
    #[arg(long, global = true, value_enum)]
    attention_orientation: Option<Orientation>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Orientation {
    Source,
    Color,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model to landmarks and extract the texture
    Fit {
        /// RGB image (PNG)
        image: PathBuf,
        /// Landmarks JSON: [[x, y], ...] in pixels
        landmarks: PathBuf,
        /// Depth JSON: {"frame": "camera"|"model", "points": [[x, y, z], ...]}
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Re-render a fitted face with a new expression and blend it back
    Transfer {
        /// fit.json written by `fit`
        fit: PathBuf,
        /// Expression JSON: {"expression": [...]} or a bare array
        #[arg(long)]
        target_expression: PathBuf,
        /// Source image (default: input.png next to fit.json)
        #[arg(long)]
        image: Option<PathBuf>,
        /// Trained shape-branch directory
        #[arg(long)]
        shapenet: Option<PathBuf>,
        /// UV-space attention map (3-channel PFM) from an external generator
        #[arg(long, requires = "color")]
        attention: Option<PathBuf>,
        /// UV-space color map (3-channel PFM) from an external generator
        #[arg(long, requires = "attention")]
        color: Option<PathBuf>,
    },
    /// Train the shape branch on synthetic data
    TrainShape,
    /// Compare held-out RMSE with and without the shape branch
    Eval {
        /// Evaluate seeds 0..N instead of the configured list
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Write a synthetic model and rendered scenes
    Synth {
        /// Number of scenes
        #[arg(long)]
        scenes: Option<usize>,
        /// Add a smooth nonlinear field to the scene shapes
        #[arg(long)]
        nonlinear: bool,
        /// Also write depth point clouds
        #[arg(long)]
        with_depth: bool,
    },
    /// Print adversarial loss terms for a JSON file of discriminator outputs
    Losses {
        input: PathBuf,
    },
}

fn build_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = &g.model {
        cfg.model = Some(m.clone());
    }
    if let Some(s) = g.seed {
        cfg.conditioning.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = Some(o.clone());
    }
    if let Some(r) = g.resolution {
        cfg.resolution = r;
    }
    if let Some(k) = g.k {
        cfg.k = k;
    }
    if g.no_depth_refine {
        cfg.depth_refine = false;
    }
    if let Some(s) = g.blend_sigma2 {
        cfg.blend.sigma2 = s;
    }
    if let Some(o) = g.attention_orientation {
        cfg.attention_orientation = match o {
            Orientation::Source => AttentionOrientation::Source,
            Orientation::Color => AttentionOrientation::Color,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| PipelineError::new(ErrorKind::BadArgs, "--out is required for this command").into())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.global)?;
    match cli.command {
        Command::Fit { image, landmarks, depth } => {
            let out = out_dir(&cfg)?;
            let img = io::read_png(&image).map_err(PipelineError::from)?;
            let lm = pipeline::read_landmarks(&landmarks)?;
            let depth = depth.as_deref().map(pipeline::read_depth).transpose()?;
            let model = pipeline::load_configured_model(&cfg)?;
            let fit = pipeline::run_fit(&model, &img, &lm, depth.as_ref(), &cfg)?;
            pipeline::write_fit_outputs(&out, &model, &fit)?;
            io::write_png(&out.join("input.png"), &img).map_err(PipelineError::from)?;
            log::info!("fit written to {}", out.display());
            print_json(&serde_json::json!({
                "landmark_rmse": fit.record.landmark_rmse,
                "iterations": fit.record.iterations,
                "converged": fit.record.converged,
                "refinement": fit.record.refinement.as_ref().map(|r| &r.kind),
            }))
        }
        Command::Transfer {
            fit,
            target_expression,
            image,
            shapenet,
            attention,
            color,
        } => {
            let out = out_dir(&cfg)?;
            let record: pipeline::FitRecord = io::read_json(&fit).map_err(PipelineError::from)?;
            let image = image.unwrap_or_else(|| fit.parent().unwrap_or(Path::new(".")).join("input.png"));
            let img = io::read_png(&image).map_err(PipelineError::from)?;
            let e = pipeline::read_expression(&target_expression)?;
            let model = pipeline::load_configured_model(&cfg)?;
            let branch = shapenet
                .or_else(|| cfg.shapenet.clone())
                .map(|p| pipeline::load_shape_branch(&model, &p))
                .transpose()?;
            let generated = match (attention, color) {
                (Some(a), Some(c)) => Some(pipeline::GeneratedTexture {
                    attention: io::read_pfm(&a).map_err(PipelineError::from)?,
                    color: io::read_pfm(&c).map_err(PipelineError::from)?,
                }),
                _ => None,
            };
            let source = pipeline::prepare_source(&model, &record, &img, &cfg)?;
            let result = pipeline::run_transfer(&model, &source, &e, branch.as_ref(), generated.as_ref(), &cfg)?;
            pipeline::write_transfer_outputs(&out, &model, &result, &cfg)?;
            print_json(&result.metrics)
        }
        Command::TrainShape => {
            let out = out_dir(&cfg)?;
            let seed = cli.global.seed.unwrap_or(0);
            let model = pipeline::load_configured_model(&cfg)?;
            let (trained, report) = pipeline::run_train_shape(&model, &cfg, seed)?;
            pipeline::write_train_outputs(&out, &model, &trained, &report, &cfg)?;
            print_json(&serde_json::json!({
                "seed": report.seed,
                "initial_loss": report.initial_loss,
                "final_loss": report.epoch_losses.last(),
            }))
        }
        Command::Eval { seeds } => {
            let mut cfg = cfg;
            if let Some(n) = seeds {
                cfg.benchmark.seeds = (0..n).collect();
            }
            let model = pipeline::load_configured_model(&cfg)?;
            let report = pipeline::run_eval(&model, &cfg)?;
            if let Some(out) = &cfg.out {
                std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
                io::write_json(&out.join("eval_report.json"), &report).map_err(PipelineError::from)?;
            }
            print_json(&report)
        }
        Command::Synth {
            scenes,
            nonlinear,
            with_depth,
        } => {
            let out = out_dir(&cfg)?;
            let mut cfg = cfg;
            if let Some(n) = scenes {
                cfg.n_scenes = n;
            }
            cfg.nonlinear_scenes |= nonlinear;
            cfg.scenes.with_depth |= with_depth;
            let model = pipeline::run_synth(&out, &cfg, cli.global.seed.unwrap_or(0))?;
            print_json(&serde_json::json!({
                "model": out.join("model.mfit"),
                "mesh_hash": model.mesh_hash(),
                "scenes": cfg.n_scenes,
            }))
        }
        Command::Losses { input } => {
            let parsed: pipeline::LossInput = io::read_json(&input).map_err(PipelineError::from)?;
            let report = pipeline::run_losses(&parsed)?;
            print_json(&report)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<PipelineError>().map_or(1, |e| e.kind.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
