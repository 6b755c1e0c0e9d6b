//! `duplex` command-line front end: synthetic data, training, evaluation, retrieval
//! and gradient checking.
//!
//! Failures print a single `error=<kind> detail=<msg>` line on stderr and exit with 1.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use duplex_core::data::{generate_synthetic, load_dataset, write_dataset, LoadedDataset, Split, SyntheticConfig, World};
use duplex_core::model::{check_gradients, Branch, DuplexModel, ModelConfig};
use duplex_core::objective::ScoreMode;
use duplex_core::train::{check_compatible, evaluate, retrieve, train, Direction, TrainConfig};
use duplex_core::{Checkpoint, DuplexError};

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "duplex", version, about = "Dual-prototype compositional zero-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and print its manifest path.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        states: usize,
        #[arg(long, default_value_t = 10)]
        objects: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0.7)]
        seen_fraction: f64,
        #[arg(long, default_value_t = 50)]
        train_per_pair: usize,
        #[arg(long, default_value_t = 10)]
        val_per_pair: usize,
        #[arg(long, default_value_t = 10)]
        test_per_pair: usize,
    },
    /// Train a model; writes best.dupc, last.dupc, train.log and config.txt under --out.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        branch: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint; prints the report and optionally writes report.txt and curve.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "closed")]
        world: String,
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k retrieval between images and composition prototypes.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `image` (query is a row index) or `prototype` (query is an index or "state object").
        #[arg(long, default_value = "image")]
        direction: String,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Finite-difference check of every parameter group on a small synthetic problem.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Softmax temperature; small values saturate and hide gradients below the comparison floor.
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        branch: Option<String>,
    },
}

#[derive(Debug)]
struct CliError {
    kind: String,
    detail: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep the error on one line whatever the message contains
        write!(f, "error={} detail={}", self.kind, self.detail.replace('\n', " "))
    }
}

impl From<DuplexError> for CliError {
    fn from(e: DuplexError) -> Self {
        CliError {
            kind: e.kind().to_string(),
            detail: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        DuplexError::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error=usage detail={first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen {
            out,
            seed,
            states,
            objects,
            dim,
            noise,
            seen_fraction,
            train_per_pair,
            val_per_pair,
            test_per_pair,
        } => {
            let syn = generate_synthetic(&SyntheticConfig {
                states,
                objects,
                dim,
                noise,
                seen_fraction,
                train_per_pair,
                val_per_pair,
                test_per_pair,
                seed,
            })?;
            let data = LoadedDataset {
                dataset: syn.dataset,
                space: syn.space,
                state_tokens: None,
                object_tokens: None,
            };
            let manifest = write_dataset(&out, "manifest.txt", &data)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train {
            manifest,
            config,
            out,
            seed,
            lambda,
            gamma,
            branch,
            epochs,
            lr,
        } => {
            let mut cfg = TrainConfig::default();
            let (mut dim_given, mut token_dim_given) = (false, false);
            if let Some(path) = &config {
                let text = read_text(path)?;
                let entries = duplex_core::kv::parse(&text, &path.display().to_string())?;
                dim_given = entries.contains_key("dim");
                token_dim_given = entries.contains_key("token_dim");
                cfg.apply(&entries)?;
                // a relative manifest in a config file is relative to that file
                if let Some(m) = cfg.manifest.as_mut().filter(|m| m.is_relative()) {
                    *m = path.parent().unwrap_or(Path::new("")).join(&*m);
                }
            }
            let mut overrides = BTreeMap::new();
            let mut set = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    overrides.insert(k.to_string(), v);
                }
            };
            set("seed", seed.map(|v| v.to_string()));
            set("lambda", lambda.map(|v| v.to_string()));
            set("gamma", gamma.map(|v| v.to_string()));
            set("branch", branch);
            set("epochs", epochs.map(|v| v.to_string()));
            set("lr", lr.map(|v| v.to_string()));
            cfg.apply(&overrides)?;
            if let Some(m) = manifest {
                cfg.manifest = Some(m);
            }
            cfg.validate()?;
            let manifest = cfg.manifest.clone().ok_or_else(|| CliError {
                kind: "config".into(),
                detail: "no manifest given (--manifest or manifest= in --config)".into(),
            })?;
            let data = load_dataset(&manifest)?;
            if !dim_given {
                // unless pinned by the config, the embedding width comes from the data
                cfg.dim = data.dataset.dim();
            }
            if let (false, Some(tokens)) = (token_dim_given, &data.state_tokens) {
                cfg.token_dim = tokens.cols();
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.to_kv())?;
            let mut log = String::new();
            let outcome = train(cfg, &data, |entry| {
                println!("{entry}");
                log.push_str(&format!("{entry}\n"));
            })?;
            fs::write(out.join("train.log"), log)?;
            outcome.best.save(&out.join("best.dupc"))?;
            outcome.last.save(&out.join("last.dupc"))?;
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            world,
            mode,
            split,
            out,
        } => {
            let world: World = world.parse()?;
            let mode: ScoreMode = mode.parse()?;
            let split: Split = split.parse()?;
            let (ckpt, data) = load_pair(&checkpoint, &manifest)?;
            let report = evaluate(&ckpt.model, &data, split, world, mode)?;
            let text = format!("mode={mode}\n{}", report.to_text());
            print!("{text}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.txt"), &text)?;
                fs::write(dir.join("curve.csv"), report.curve.to_csv())?;
            }
            Ok(())
        }
        Command::Retrieve {
            checkpoint,
            manifest,
            direction,
            query,
            k,
        } => {
            let direction: Direction = direction.parse()?;
            let (ckpt, data) = load_pair(&checkpoint, &manifest)?;
            for (rank, hit) in retrieve(&ckpt.model, &data, direction, &query, k)?.iter().enumerate() {
                println!("rank={} id={} name={} score={}", rank + 1, hit.id, hit.name, hit.score);
            }
            Ok(())
        }
        Command::Gradcheck { seed, eps, tau, branch } => {
            let branches = match branch {
                Some(b) => vec![b.parse::<Branch>()?],
                None => vec![Branch::Full, Branch::Semantic, Branch::Visual],
            };
            let worst = gradcheck(seed, eps, tau, &branches)?;
            if worst > GRADCHECK_TOL {
                return Err(CliError {
                    kind: "gradcheck".into(),
                    detail: format!("max relative error {worst:e} exceeds {GRADCHECK_TOL:e}"),
                });
            }
            println!("max_rel_err={worst:e}");
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    if !path.exists() {
        return Err(DuplexError::MissingFile(path.to_path_buf()).into());
    }
    Ok(fs::read_to_string(path)?)
}

fn load_pair(checkpoint: &Path, manifest: &Path) -> CliResult<(Checkpoint, LoadedDataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = load_dataset(manifest)?;
    check_compatible(&ckpt, &data)?;
    Ok((ckpt, data))
}

fn gradcheck(seed: u64, eps: f64, tau: f64, branches: &[Branch]) -> CliResult<f64> {
    let syn = generate_synthetic(&SyntheticConfig {
        states: 2,
        objects: 2,
        dim: 8,
        noise: 0.05,
        seen_fraction: 0.75,
        train_per_pair: 2,
        val_per_pair: 0,
        test_per_pair: 0,
        seed,
    })?;
    let idx = syn.dataset.indices(Split::Train);
    let z: Vec<&[f64]> = idx.iter().map(|&i| syn.dataset.embedding(i)).collect();
    let labels: Vec<(usize, usize)> = idx.iter().map(|&i| syn.dataset.label(i)).collect();
    let mut worst: f64 = 0.0;
    for &branch in branches {
        let cfg = ModelConfig {
            prompt_len: 2,
            token_dim: 8,
            hidden: 16,
            lambda: 0.9,
            gamma: 0.3,
            tau,
            branch,
            seed,
        };
        let model = DuplexModel::init(&cfg, &syn.dataset, &syn.space, None, None)?;
        for (name, err) in check_gradients(&model, &syn.space, &z, &labels, eps)? {
            println!("branch={branch} param={name} rel_err={err:e}");
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
