use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adsrnet_core::checkpoint::Checkpoint;
use adsrnet_core::data::{self, DatasetIndex, ImagePair};
use adsrnet_core::gradcheck::{self, GradcheckOptions};
use adsrnet_core::metrics::{self, Channel, EvalProtocol};
use adsrnet_core::model::{conv_layer_count, count_parameters, estimate_flops, Model};
use adsrnet_core::train::Trainer;
use adsrnet_core::RunConfig;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adsrnet", version, about = "Heterogeneous parallel CNN for image super-resolution")]
struct Cli {
    /// Worker threads; 1 forces fully sequential execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate bicubic LR images from a directory of HR PNGs.
    Degrade {
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints, the log and the resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config overrides; they must come after the named flags.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint or a built-in baseline on a dataset split.
    Eval {
        #[arg(long, conflicts_with_all = ["baseline", "identity"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Score HR against itself (self-test of the metric path).
        #[arg(long)]
        identity: bool,
        /// Split directory holding `HR/` and optionally `LR_x{s}/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long, default_value = "y")]
        channel: String,
        /// Border crop in pixels; defaults to the scale.
        #[arg(long)]
        border: Option<usize>,
        /// Optional config the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Upscale one PNG.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print analytic and live parameter counts and a FLOP estimate.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output height for the FLOP estimate.
        #[arg(long, default_value_t = 1024)]
        height: usize,
        /// Output width for the FLOP estimate.
        #[arg(long, default_value_t = 1024)]
        width: usize,
        /// Config overrides; they must come after the named flags.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every op and the configured network in f64.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        /// Coordinates sampled per tensor.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Config overrides; they must come after the named flags.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Bicubic,
}

/// Applies `--key value` / `--key=value` pairs on top of a config file.
fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut it = overrides.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            bail!("unexpected argument `{arg}` (overrides are `--key value`)");
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().with_context(|| format!("missing value for --{key}"))?;
                (key.to_string(), v.clone())
            }
        };
        config.set(&key, &value)?;
    }
    config.validate()?;
    Ok(config)
}

fn write_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn cmd_degrade(hr: &Path, scale: usize, out: &Path) -> Result<()> {
    let report = data::degrade(hr, scale, out)?;
    for p in &report.written {
        log::info!("wrote {}", p.display());
    }
    if !report.skipped.is_empty() {
        bail!("{} of {} images could not be degraded", report.skipped.len(), report.skipped.len() + report.written.len());
    }
    Ok(())
}

fn load_split(root: &Path, split: &str, scale: usize) -> Result<Vec<ImagePair>> {
    let dir = root.join(split);
    let index = DatasetIndex::open(&dir, scale).with_context(|| format!("opening dataset split {}", dir.display()))?;
    if index.is_empty() {
        bail!("no PNG images under {}", DatasetIndex::hr_dir(&dir).display());
    }
    (0..index.len()).map(|i| index.load(i).map_err(Into::into)).collect()
}

fn cmd_train(config: Option<&Path>, out: &Path, resume: Option<&Path>, overrides: &[String]) -> Result<()> {
    let run = resolve_config(config, overrides)?;
    let root = run.data.root.clone().context("data.root is not set")?;
    if !root.is_dir() {
        bail!("dataset root {} does not exist", root.display());
    }
    let pairs = load_split(&root, &run.data.train_split, run.model.scale)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = run.to_text();
    fs::write(out.join("config.txt"), &text).with_context(|| format!("writing {}", out.join("config.txt").display()))?;
    write_stdout(&text)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, &run.model, run.train.clone(), pairs)?,
        None => Trainer::new(Model::new(run.model, run.seed)?, run.train.clone(), pairs)?,
    };
    let every = (run.train.total_steps / 20).max(1);
    trainer.run(Some(out), |r| {
        if r.step % every == 0 {
            log::info!("step {} loss {:.6} lr {:e} tau {:.3}", r.step, r.loss, r.lr, r.tau);
        }
    })?;
    log::info!("wrote {}", adsrnet_core::train::checkpoint_path(out, None).display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    baseline: Option<Baseline>,
    identity: bool,
    data_dir: &Path,
    scale: usize,
    channel: &str,
    border: Option<usize>,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let protocol = EvalProtocol { channel: channel.parse::<Channel>()?, border, ..EvalProtocol::default() };
    let index = DatasetIndex::open(data_dir, scale)?;
    if index.is_empty() {
        bail!("no PNG images under {}", DatasetIndex::hr_dir(data_dir).display());
    }
    let report = if identity {
        metrics::evaluate(&index, &protocol, |_, hr| Ok(hr.clone()))
    } else if baseline.is_some() {
        metrics::evaluate(&index, &protocol, |lr, _| data::upscale_bicubic(lr, scale))
    } else {
        let path = checkpoint.context("one of --checkpoint, --baseline or --identity is required")?;
        let expected = config.map(|c| RunConfig::from_file(c).map(|r| r.model)).transpose()?;
        let model = Checkpoint::load(path)?.into_model(expected.as_ref())?;
        if model.config.scale != scale {
            bail!("checkpoint is a x{} model but --scale is {scale}", model.config.scale);
        }
        metrics::evaluate(&index, &protocol, |lr, _| {
            let x = data::image_to_tensor::<f32>(lr);
            data::tensor_to_image(&model.predict(&x)?, 0)
        })
    };
    if report.rows.is_empty() {
        bail!("every pair was skipped:\n{}", report.to_table());
    }
    let table = report.to_table();
    write_stdout(&table)?;
    if let Some(p) = out {
        fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_infer(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.into_model(None)?;
    let lr = data::read_png(input)?;
    let sr = model.predict(&data::image_to_tensor::<f32>(&lr))?;
    data::write_png(out, &data::tensor_to_image(&sr, 0)?)?;
    Ok(())
}

fn cmd_params(config: Option<&Path>, height: usize, width: usize, overrides: &[String]) -> Result<()> {
    let run = resolve_config(config, overrides)?;
    let analytic = count_parameters(&run.model)?;
    let live = Model::<f32>::new(run.model, run.seed)?.param_count();
    let flops = estimate_flops(&run.model, height, width)?;
    let mut s = String::from("variant\tscale\tk\tfusion\tanalytic\tlive\tconv_layers\tflops\toutput\n");
    s.push_str(&format!(
        "{}\t{}\t{}\t{}\t{analytic}\t{live}\t{}\t{flops}\t{height}x{width}\n",
        run.model.variant,
        run.model.scale,
        run.model.kernels,
        run.model.fusion,
        conv_layer_count(&run.model)?
    ));
    write_stdout(&s)?;
    if analytic != live {
        bail!("live parameter count {live} differs from the analytic count {analytic}");
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, threshold: f64, samples: usize, overrides: &[String]) -> Result<()> {
    let run = resolve_config(config, overrides)?;
    let opts = GradcheckOptions { threshold, samples, seed: run.seed, ..GradcheckOptions::default() };
    let results = gradcheck::full_suite(&run.model, &opts)?;
    write_stdout(&gradcheck::report(&results, threshold))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed(threshold)).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().context("configuring threads")?;
    }
    match cli.command {
        Command::Degrade { hr, scale, out } => cmd_degrade(&hr, scale, &out),
        Command::Train { config, out, resume, overrides } => {
            cmd_train(config.as_deref(), &out, resume.as_deref(), &overrides)
        }
        Command::Eval { checkpoint, baseline, identity, data, scale, channel, border, config, out } => cmd_eval(
            checkpoint.as_deref(),
            baseline,
            identity,
            &data,
            scale,
            &channel,
            border,
            config.as_deref(),
            out.as_deref(),
        ),
        Command::Infer { checkpoint, input, out } => cmd_infer(&checkpoint, &input, &out),
        Command::Params { config, height, width, overrides } => cmd_params(config.as_deref(), height, width, &overrides),
        Command::Gradcheck { config, threshold, samples, overrides } => {
            cmd_gradcheck(config.as_deref(), threshold, samples, &overrides)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
