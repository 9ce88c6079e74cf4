//! Command-line entry points.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use hairmap_core::conditions::{condition_from_text, ConditionPair};
use hairmap_core::config::Config;
use hairmap_core::editing::edit_latent;
use hairmap_core::latent::LatentCode;
use hairmap_core::metrics::evaluate_batch;
use hairmap_core::training;
use hairmap_core::PromptCorpus;

use crate::error::{AppError, AppResult};
use crate::pipeline::{self, EditInputs, EditSidecar, Model};
use crate::{png, service};

#[derive(Debug, Parser)]
#[command(name = "hairmap", version, about = "Text- and reference-driven hair editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a mapper as described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Edit one image.
    Edit {
        image: PathBuf,
        #[arg(long)]
        style_text: Option<String>,
        #[arg(long)]
        color_text: Option<String>,
        #[arg(long)]
        style_ref: Option<PathBuf>,
        #[arg(long)]
        color_ref: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output PNG; the sidecar is written next to it with a `.json` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render frames blending two edits given by their sidecars.
    Interpolate {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute metrics over a manifest of before/after image pairs.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path; a CSV table is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config supplying the service section; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render text-driven edits of prior samples into a reference directory.
    Augment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path) -> AppResult<Config> {
    if !path.exists() {
        return Err(AppError::Input(format!("config {} does not exist", path.display())));
    }
    let mut config = Config::load(path).map_err(|e| match e {
        hairmap_core::Error::Json(j) => AppError::Input(format!("{}: {j}", path.display())),
        other => other.into(),
    })?;
    config.apply_env()?;
    Ok(config)
}

fn write(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).map_err(|e| AppError::Input(format!("{}: {e}", path.display())))
}

fn train(config: &Path, resume: bool) -> AppResult<()> {
    let config = load_config(config)?;
    let backends = config.backends()?;
    let sampler = pipeline::build_sampler(&config, &backends)?;
    let outcome = training::train(&config, &backends, &sampler, resume)?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!(
            "iterations {}..{}: smoothed loss {:.4} -> {:.4}",
            first.iteration, last.iteration, first.smoothed_total, last.smoothed_total
        );
    }
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn edit(
    image: &Path,
    style_text: Option<String>,
    color_text: Option<String>,
    style_ref: Option<&Path>,
    color_ref: Option<&Path>,
    checkpoint: &Path,
    out: &Path,
) -> AppResult<()> {
    if style_text.is_none() && color_text.is_none() && style_ref.is_none() && color_ref.is_none() {
        return Err(AppError::Usage(
            "give at least one of --style-text, --color-text, --style-ref, --color-ref".into(),
        ));
    }
    let inputs = EditInputs {
        image: png::read_file(image)?,
        style_text,
        color_text,
        style_ref: style_ref.map(png::read_file).transpose()?,
        color_ref: color_ref.map(png::read_file).transpose()?,
    };
    let model = Model::load(checkpoint)?;
    let output = pipeline::run_edit(&model, &inputs)?;
    if output.result.untrained {
        eprintln!("warning: checkpoint has not been trained");
    }
    write(out, &output.png)?;
    let sidecar = serde_json::to_vec_pretty(&output.sidecar(&model.checkpoint_hash))?;
    write(&out.with_extension("json"), &sidecar)?;
    println!("{} {}", output.edit_id, out.display());
    Ok(())
}

fn read_sidecar(path: &Path) -> AppResult<EditSidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| AppError::Input(format!("{}: {e}", path.display())))
}

fn interpolate(from: &Path, to: &Path, steps: usize, checkpoint: &Path, out_dir: &Path) -> AppResult<()> {
    if steps < 2 {
        return Err(AppError::Usage("--steps must be at least 2".into()));
    }
    let a = read_sidecar(from)?;
    let b = read_sidecar(to)?;
    let model = Model::load(checkpoint)?;
    std::fs::create_dir_all(out_dir)?;
    for k in 0..steps {
        let lambda = k as f64 / (steps - 1) as f64;
        let bytes = pipeline::blend(&model, &a.edited_latent, &b.edited_latent, lambda)?;
        let path = out_dir.join(format!("frame-{k:03}.png"));
        write(&path, &bytes)?;
        println!("{lambda:.4} {}", path.display());
    }
    Ok(())
}

/// One manifest entry; paths are relative to the manifest's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestItem {
    #[serde(default)]
    id: Option<String>,
    before: PathBuf,
    after: PathBuf,
}

fn eval(manifest: &Path, checkpoint: &Path, out: &Path) -> AppResult<()> {
    let text = std::fs::read_to_string(manifest).map_err(|e| AppError::Input(format!("{}: {e}", manifest.display())))?;
    let items: Vec<ManifestItem> = serde_json::from_str(&text)
        .map_err(|e| AppError::Input(format!("{}: malformed manifest: {e}", manifest.display())))?;
    if items.is_empty() {
        return Err(AppError::Input(format!("{}: manifest is empty", manifest.display())));
    }
    let model = Model::load(checkpoint)?;
    let (h, w) = model.resolution();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let pairs = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            Ok((
                item.id.clone().unwrap_or_else(|| format!("{i}")),
                png::load(&base.join(&item.before), h, w)?,
                png::load(&base.join(&item.after), h, w)?,
            ))
        })
        .collect::<AppResult<Vec<_>>>()?;
    let report = evaluate_batch(&pairs, &model.backends)?;
    write(out, &serde_json::to_vec_pretty(&report)?)?;
    write(&out.with_extension("csv"), report.to_csv().as_bytes())?;
    print!("{}", report.to_table());
    Ok(())
}

fn serve(checkpoint: PathBuf, config: Option<&Path>) -> AppResult<()> {
    let config = match config {
        Some(p) => load_config(p)?,
        None => {
            let mut c = Config::default();
            c.apply_env()?;
            c
        }
    };
    if !checkpoint.exists() {
        return Err(AppError::Input(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let s = config.service;
    tokio::runtime::Runtime::new()?.block_on(service::serve(checkpoint, s.port, s.cache_capacity, s.ui_dir))
}

fn augment(checkpoint: &Path, out_dir: &Path, count: usize, seed: u64) -> AppResult<()> {
    let model = Model::load(checkpoint)?;
    let corpus = match &model.config.train.prompts {
        Some(p) => PromptCorpus::parse(&std::fs::read_to_string(p)?)?,
        None => PromptCorpus::bundled(),
    };
    let (layers, dim) = model.backends.latent_shape();
    let te = model.backends.text_encoder.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(out_dir)?;
    for i in 0..count {
        let data = (0..layers * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w = LatentCode::new(layers, dim, data)?;
        let style = &corpus.hairstyles[rng.random_range(0..corpus.hairstyles.len())];
        let color = &corpus.colors[rng.random_range(0..corpus.colors.len())];
        let pair = ConditionPair::new(condition_from_text(style, te)?, condition_from_text(color, te)?);
        let result = edit_latent(&w, &pair, &model.params, &model.backends, &model.config.losses)?;
        let path = out_dir.join(format!("aug-{i:04}.png"));
        write(&path, &png::encode(&result.image)?)?;
        println!("{} {style} / {color}", path.display());
    }
    Ok(())
}

pub fn dispatch(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Train { config, resume } => train(&config, resume),
        Command::Edit {
            image,
            style_text,
            color_text,
            style_ref,
            color_ref,
            checkpoint,
            out,
        } => edit(
            &image,
            style_text,
            color_text,
            style_ref.as_deref(),
            color_ref.as_deref(),
            &checkpoint,
            &out,
        ),
        Command::Interpolate {
            from,
            to,
            steps,
            checkpoint,
            out_dir,
        } => interpolate(&from, &to, steps, &checkpoint, &out_dir),
        Command::Eval { manifest, checkpoint, out } => eval(&manifest, &checkpoint, &out),
        Command::Serve { checkpoint, config } => serve(checkpoint, config.as_deref()),
        Command::Augment {
            checkpoint,
            out_dir,
            count,
            seed,
        } => augment(&checkpoint, &out_dir, count, seed),
    }
}

/// Parses `args` and runs the command; usage errors exit with 2.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
