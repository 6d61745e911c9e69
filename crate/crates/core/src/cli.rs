//! Command-line front end. [`run`] returns the process exit code:
//! 0 on success, 1 on usage errors, 2 on runtime failures.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data;
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions};
use crate::prior::{iid_prior_moments, ChainGaussian, PriorMode, SpacingParams};
use crate::selftest;
use crate::trainer::{self, Checkpoint, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "olvae", version, about = "Ordinal-content variational autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset of squares whose size is the content level.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and CSV log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metrics, distance maps and a swap grid.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training split, used for classifier centroids.
        #[arg(long)]
        data: PathBuf,
        /// Test split.
        #[arg(long)]
        test: PathBuf,
        /// Comma-separated group sizes.
        #[arg(long = "m", value_delimiter = ',', default_values_t = vec![1usize, 5, 10, 20])]
        ms: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        swap_rows: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw ancestral prior samples and compare their moments to the closed form.
    SamplePrior {
        /// Use the prior stored in a checkpoint.
        #[arg(long, conflicts_with_all = ["d", "k"])]
        checkpoint: Option<PathBuf>,
        /// Latent dimension for a default-initialized prior.
        #[arg(long, required_unless_present = "checkpoint")]
        d: Option<usize>,
        /// Level count for a default-initialized prior.
        #[arg(long, required_unless_present = "checkpoint")]
        k: Option<usize>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample CSV; the moment report goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a content/style swap grid.
    Swap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images supplying styles and level vectors.
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "m", default_value_t = 20)]
        m: usize,
        #[arg(long, default_value_t = 6)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the Monte-Carlo, finite-difference and closed-form oracle suites.
    Selftest,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Line-oriented key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for model.ckpt and train_log.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    d_c: Option<usize>,
    #[arg(long)]
    d_s: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["ordinal", "iid"])]
    prior_mode: Option<String>,
}

/// Parse `args` (without the program name), execute, and print to the
/// process's stdout and stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = std::iter::once("olvae".to_string())
        .chain(args.into_iter().map(Into::into))
        .collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let code = if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(Error::Config(msg)) => {
            let _ = writeln!(err, "error: invalid configuration: {msg}\n");
            let _ = write!(err, "{}", Cli::command().render_usage());
            1
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<bool> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match command {
        Command::GenData { seed, n, k, out: path } => {
            let ds = data::generate(seed, n, k)?;
            data::save(&path, &ds)?;
            writeln!(out, "wrote {} instances (K = {k}) to {}", ds.len(), path.display()).map_err(io)?;
        }
        Command::Train(args) => {
            let dataset = data::load(&args.data)?;
            let config = train_config(&args, dataset.k)?;
            let ckpt = trainer::train_with(&config, &dataset, |r| {
                let _ = writeln!(out, "{}", r.csv_row());
            })?;
            writeln!(
                out,
                "trained {} epochs; checkpoint {}, log {}",
                ckpt.epochs_done,
                config.checkpoint_path.display(),
                config.log_path.display()
            )
            .map_err(io)?;
        }
        Command::Eval {
            checkpoint,
            data: train_path,
            test,
            ms,
            seed,
            swap_rows,
            out: dir,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let train = data::load(&train_path)?;
            let test = data::load(&test)?;
            let opts = EvalOptions { ms, seed, swap_rows };
            let report = eval::evaluate(&ckpt.model, &train, &test, &opts, &dir)?;
            write!(out, "{}", report.metrics_csv()).map_err(io)?;
        }
        Command::SamplePrior {
            checkpoint,
            d,
            k,
            count,
            seed,
            out: path,
        } => {
            let summary = sample_prior(checkpoint.as_deref(), d, k, count, seed, &path)?;
            writeln!(out, "{summary}").map_err(io)?;
        }
        Command::Swap {
            checkpoint,
            data: path,
            m,
            rows,
            seed,
            out: target,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = data::load(&path)?;
            let vectors = eval::infer_group_vectors(&ckpt.model, &ds, m, seed)?;
            let by = ds.indices_by_level();
            let references: Vec<&[f64]> = by.iter().map(|g| ds.instances[g[0]].x.as_slice()).collect();
            let styles: Vec<&[f64]> = ds.instances.iter().take(rows).map(|i| i.x.as_slice()).collect();
            let grid = eval::swap_grid(&ckpt.model, &styles, &vectors, &references)?;
            grid.save_pgm(&target)?;
            writeln!(out, "wrote {}x{} swap grid to {}", grid.width, grid.height, target.display()).map_err(io)?;
        }
        Command::Selftest => return selftest::run_all(out).map_err(io),
    }
    Ok(true)
}

fn train_config(args: &TrainArgs, dataset_k: usize) -> Result<TrainConfig> {
    let mut config = TrainConfig {
        k: dataset_k,
        ..TrainConfig::default()
    };
    if let Some(dir) = &args.out {
        config.checkpoint_path = dir.join("model.ckpt");
        config.log_path = dir.join("train_log.csv");
    }
    if let Some(path) = &args.config {
        config.apply_file(path).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.d_c {
        config.content_dim = v;
    }
    if let Some(v) = args.d_s {
        config.style_dim = v;
    }
    if let Some(v) = args.k {
        config.k = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = &args.prior_mode {
        config.set("prior_mode", v)?;
    }
    if let Some(p) = &args.checkpoint {
        config.checkpoint_path = p.clone();
    }
    if let Some(p) = &args.log {
        config.log_path = p.clone();
    }
    config.validate()?;
    Ok(config)
}

fn sample_prior(
    checkpoint: Option<&Path>,
    d: Option<usize>,
    k: Option<usize>,
    count: usize,
    seed: u64,
    path: &Path,
) -> Result<String> {
    if count < 2 {
        return Err(Error::Config("count must be at least 2".into()));
    }
    let joint: ChainGaussian = match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            match (&ckpt.model.prior, ckpt.config.prior_mode) {
                (Some(prior), _) => prior.joint_moments(),
                (None, PriorMode::Iid) => iid_prior_moments(ckpt.config.content_dim, ckpt.config.k)?,
                (None, PriorMode::Ordinal) => return Err(Error::Contract("ordinal checkpoint without prior".into())),
            }
        }
        None => {
            let (d, k) = (d.expect("clap enforces d"), k.expect("clap enforces k"));
            SpacingParams::init(d, k).map_err(|e| Error::Config(e.to_string()))?.joint_moments()
        }
    };
    let (d, k) = (joint.d, joint.k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("sample,dim");
    for i in 1..=k {
        write!(csv, ",v{i}").unwrap();
    }
    csv.push('\n');
    let mut sum = vec![0.0; d * k];
    let mut cross = vec![0.0; d * k * k];
    for n in 0..count {
        let v = joint.sample(&mut rng)?;
        for l in 0..d {
            let row = &v[l * k..(l + 1) * k];
            write!(csv, "{n},{}", l + 1).unwrap();
            for (i, x) in row.iter().enumerate() {
                write!(csv, ",{x}").unwrap();
                sum[l * k + i] += x;
                for (j, y) in row.iter().enumerate() {
                    cross[(l * k + i) * k + j] += x * y;
                }
            }
            csv.push('\n');
        }
    }
    let nf = count as f64;
    let mut report = String::from("moment,dim,i,j,analytic,empirical\n");
    let (mut mean_err, mut cov_err) = (0.0f64, 0.0f64);
    for l in 0..d {
        for i in 0..k {
            let mi = sum[l * k + i] / nf;
            mean_err = mean_err.max((mi - joint.mean(l)[i]).abs());
            writeln!(report, "mean,{},{},{},{},{mi}", l + 1, i + 1, i + 1, joint.mean(l)[i]).unwrap();
        }
        for i in 0..k {
            for j in 0..k {
                let (mi, mj) = (sum[l * k + i] / nf, sum[l * k + j] / nf);
                let cov = cross[(l * k + i) * k + j] / nf - mi * mj;
                cov_err = cov_err.max((cov - joint.covs[l].at(i, j)).abs());
                writeln!(report, "cov,{},{},{},{},{cov}", l + 1, i + 1, j + 1, joint.covs[l].at(i, j)).unwrap();
            }
        }
    }
    let report_path = path.with_extension("moments.csv");
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    fs::write(&report_path, report).map_err(|e| Error::io(&report_path, e))?;
    Ok(format!(
        "wrote {count} samples to {}; moment report {} (max mean error {mean_err:.4}, max cov error {cov_err:.4})",
        path.display(),
        report_path.display()
    ))
}
