use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Parser;
use morphfit::pipeline::{self, PipelineConfig};
use morphfit_studio::{router, AppState, ModelEntry, DEFAULT_MODEL};

#[derive(Parser, Debug)]
#[command(name = "morphfit-studio", version, about = "Expression studio HTTP service")]
struct Args {
    /// Listening port
    #[arg(long, env = "MORPHFIT_PORT", default_value_t = 8080)]
    port: u16,
    /// Bind address
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Pipeline configuration JSON (model, shape branch, blend defaults)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra models as ID=PATH
    #[arg(long = "model", value_parser = parse_model_arg)]
    models: Vec<(String, PathBuf)>,
}

fn parse_model_arg(s: &str) -> Result<(String, PathBuf), String> {
    let (id, path) = s.split_once('=').ok_or("expected ID=PATH")?;
    if id.is_empty() {
        return Err("empty model id".into());
    }
    Ok((id.to_string(), PathBuf::from(path)))
}

#[tokio::main]
async fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = match &args.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    config.validate()?;
    let mut models = BTreeMap::new();
    let model = pipeline::load_configured_model(&config)?;
    let branch = config.shapenet.as_deref().map(|d| pipeline::load_shape_branch(&model, d)).transpose()?;
    models.insert(DEFAULT_MODEL.to_string(), ModelEntry { model, branch });
    for (id, path) in &args.models {
        let model = morphfit::model::load_model(path).with_context(|| format!("loading model {}", path.display()))?;
        models.insert(id.clone(), ModelEntry { model, branch: None });
    }
    let app = router(Arc::new(AppState::new(models, config)));
    let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
