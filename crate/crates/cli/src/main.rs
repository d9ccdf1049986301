//! Command-line surface: train the benchmark model, evaluate explanation
//! quality, explain a pair of inputs, render an explanation to SVG, and
//! compute the invariance score of a model.

mod files;

use anyhow::{anyhow, bail, Context, Result};
use bilrp::benchmark::{
    self, eval_seed_for, evaluate_model, train_toy_model, DEFAULT_ALPHA, GAMMA_GRID,
};
use bilrp::explain::{
    bilrp as bilrp_explain, curvature, hessian_product, saliency, save_explanation, Method,
};
use bilrp::lrp::InputRule;
use bilrp::network::{load_model_with_meta, save_model_with_meta, TrainConfig};
use bilrp::render::{emit_svg, render, RenderLayout, RenderParams};
use bilrp::SimilarityModel;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bilrp",
    version,
    about = "Build, train, explain and render dot-product similarity models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the digit-matching benchmark model and write a model file.
    ToyTrain {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate explanation methods on held-out pairs and write a report.
    ToyEval {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated gamma grid for the sweep.
        #[arg(long)]
        gammas: Option<String>,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain the similarity of one input pair.
    Explain {
        #[arg(long)]
        model: PathBuf,
        /// One of: bilrp, hp, saliency, curvature.
        #[arg(long)]
        method: String,
        /// Uniform gamma (`0.09`) or per-layer `index:gamma` pairs
        /// (`0:0.5,2:0.25`); ignored by the baselines.
        #[arg(long, default_value = "0")]
        gamma_schedule: String,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        xprime: PathBuf,
        /// Tensor file with per-feature lower bounds (box input rule).
        #[arg(long)]
        zb_lower: Option<PathBuf>,
        /// Tensor file with per-feature upper bounds (box input rule).
        #[arg(long)]
        zb_upper: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an explanation over its two input images as SVG.
    Render {
        #[arg(long)]
        explanation: PathBuf,
        /// Rendering parameters `pool,l,h,p`.
        #[arg(long)]
        params: String,
        /// The two input rasters, comma-separated (`a.png,b.png`).
        #[arg(long)]
        images: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ratio of mean similarity over related pairs to the mean over all pairs.
    Invariance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        global: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::ToyTrain {
            seed,
            iterations,
            lr,
            out,
        } => toy_train(seed, iterations, lr, &out),
        Command::ToyEval {
            model,
            gammas,
            pairs,
            out,
        } => toy_eval(&model, gammas.as_deref(), pairs, &out),
        Command::Explain {
            model,
            method,
            gamma_schedule,
            x,
            xprime,
            zb_lower,
            zb_upper,
            out,
        } => explain(
            &model,
            &method,
            &gamma_schedule,
            &x,
            &xprime,
            zb_lower.as_deref(),
            zb_upper.as_deref(),
            &out,
        ),
        Command::Render {
            explanation,
            params,
            images,
            out,
        } => render_cmd(&explanation, &params, &images, &out),
        Command::Invariance {
            model,
            local,
            global,
        } => invariance(&model, &local, &global),
    }
}

fn toy_train(seed: u64, iterations: usize, lr: f64, out: &Path) -> Result<()> {
    let cfg = TrainConfig {
        iterations,
        learning_rate: lr,
        seed,
        ..TrainConfig::default()
    };
    let (net, _, final_mse) = train_toy_model(&cfg, DEFAULT_ALPHA)?;
    let meta = serde_json::json!({
        "toy": {
            "seed": seed,
            "alpha": DEFAULT_ALPHA,
            "iterations": iterations,
            "learning_rate": lr,
            "batch_size": cfg.batch_size,
            "final_mse": final_mse,
        }
    });
    std::fs::write(out, save_model_with_meta(&net, Some(meta)))
        .with_context(|| format!("writing {}", out.display()))?;
    println!("final training mse: {final_mse:.6}");
    println!("model written to {}", out.display());
    Ok(())
}

fn toy_eval(model_path: &Path, gammas: Option<&str>, pairs: usize, out: &Path) -> Result<()> {
    let bytes = read(model_path)?;
    let (net, meta) = load_model_with_meta(&bytes)?;
    let toy = meta
        .as_ref()
        .and_then(|m| m.get("toy"))
        .ok_or_else(|| anyhow!("model file carries no benchmark metadata; train it with `bilrp toy-train`"))?;
    let seed = toy
        .get("seed")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| anyhow!("benchmark metadata is missing `seed`"))?;
    let alpha = toy
        .get("alpha")
        .and_then(|v| v.as_f64())
        .unwrap_or(DEFAULT_ALPHA);
    let final_mse = toy
        .get("final_mse")
        .and_then(|v| v.as_f64())
        .unwrap_or(f64::NAN);
    let grid: Vec<f64> = match gammas {
        None => GAMMA_GRID.to_vec(),
        Some(s) => s
            .split(',')
            .map(|g| {
                g.trim()
                    .parse::<f64>()
                    .map_err(|e| anyhow!("bad gamma `{g}`: {e}"))
            })
            .collect::<Result<_>>()?,
    };
    let emb = benchmark::make_embedding(seed, alpha)?;
    let report = evaluate_model(&net, &emb, &grid, pairs, eval_seed_for(seed), final_mse, seed)?;
    print!("{}", report.acs_table());
    std::fs::write(out, report.to_json())
        .with_context(|| format!("writing {}", out.display()))?;
    println!("report written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn explain(
    model_path: &Path,
    method: &str,
    gamma_schedule: &str,
    x_path: &Path,
    xp_path: &Path,
    zb_lower: Option<&Path>,
    zb_upper: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (net, _) = load_model_with_meta(&read(model_path)?)?;
    let model = SimilarityModel::new(net);
    let x = files::load_input(x_path, model.graph().input_shape())?;
    let xp = files::load_input(xp_path, model.graph().input_shape())?;

    let method = Method::from_tag(method)
        .map_err(|_| anyhow!("unknown method `{method}`; use bilrp, hp, saliency or curvature"))?;
    let mut expl = match method {
        Method::BiLrp => {
            let mut schedule = files::parse_gamma_schedule(gamma_schedule)?;
            match (zb_lower, zb_upper) {
                (Some(lo), Some(hi)) => {
                    schedule = schedule.with_input_rule(InputRule::ZB {
                        lower: files::load_input(lo, model.graph().input_shape())?,
                        upper: files::load_input(hi, model.graph().input_shape())?,
                    });
                }
                (None, None) => {}
                _ => bail!("--zb-lower and --zb-upper must be given together"),
            }
            bilrp_explain(&model, &x, &xp, &schedule)?
        }
        Method::HessianProduct => hessian_product(&model, &x, &xp)?,
        Method::Saliency => {
            let mut s = saliency(&x, &xp);
            s.meta_mut().similarity = Some(model.similarity(&x, &xp)?);
            s
        }
        Method::Curvature => curvature(&model, &x, &xp)?,
    };
    expl.meta_mut().input_ids = Some((
        x_path.display().to_string(),
        xp_path.display().to_string(),
    ));
    std::fs::write(out, save_explanation(&expl))
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "explanation ({}) written to {}",
        expl.meta().method.tag(),
        out.display()
    );
    Ok(())
}

fn render_cmd(expl_path: &Path, params: &str, images: &str, out: &Path) -> Result<()> {
    let expl = bilrp::explain::load_explanation(&read(expl_path)?)?;
    let params = RenderParams::parse_tuple(params)?;
    let (path_a, path_b) = images
        .split_once(',')
        .ok_or_else(|| anyhow!("--images expects two comma-separated paths"))?;
    let raster_a = files::load_raster(Path::new(path_a.trim()))?;
    let raster_b = files::load_raster(Path::new(path_b.trim()))?;
    let shape_a = raster_a.dims()?;
    let shape_b = raster_b.dims()?;
    let list = render(&expl, &params, shape_a, shape_b)?;
    let layout = RenderLayout {
        shape_a,
        shape_b,
        pool: params.pool,
    };
    let svg = emit_svg(&list, &raster_a, &raster_b, &layout)?;
    std::fs::write(out, svg).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "rendered {} connections to {}",
        list.entries.len(),
        out.display()
    );
    Ok(())
}

fn invariance(model_path: &Path, local: &Path, global: &Path) -> Result<()> {
    let (net, _) = load_model_with_meta(&read(model_path)?)?;
    let model = SimilarityModel::new(net);
    let local_pairs = files::load_pairs(local, model.graph().input_shape())?;
    let global_pairs = files::load_pairs(global, model.graph().input_shape())?;
    let score = benchmark::invariance_score(&model, &local_pairs, &global_pairs)?;
    println!("{score}");
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}
