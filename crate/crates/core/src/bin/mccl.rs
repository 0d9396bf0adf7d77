use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use mccl::checkpoint::Checkpoint;
use mccl::config::RunConfig;
use mccl::cpi::{allocate_prototypes, build_prototype_bank, PrototypeBank};
use mccl::data::{class_counts, generate_synthetic, load_dataset, resolve_split, write_dataset, Dataset, SyntheticSpec};
use mccl::harness::{analyze_prototypes, bank_options, evaluate, render_table, split_values, sweep, train, write_analysis};
use mccl::{MccError, Result};

#[derive(Parser)]
#[command(name = "mccl", version, about = "Prototype-based multi-label intent recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster the training patches into a class-allocated prototype bank.
    InitPrototypes {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional run config for k-means and bank settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model; writes `checkpoint`, `train.log` and `lr.log` to OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bank from `init-prototypes`; built from the training split if absent.
        #[arg(long)]
        prototypes: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = mccl::metrics::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Prototype-class correlation, usage and heat maps.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain once per value of K, lambda, tau or stages.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long)]
        values: String,
        /// Overrides `data.dir` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate a synthetic clue-composition dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    load_dataset(&resolve_split(dir, split))
}

/// The validation split if present; otherwise none.
fn load_optional(dir: &Path, split: &str) -> Result<Option<Dataset>> {
    let p = resolve_split(dir, split);
    if p == dir || !p.exists() {
        return Ok(None);
    }
    load_dataset(&p).map(Some)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MccError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MccError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitPrototypes {
            data,
            k,
            out,
            seed,
            config,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::from_file(&p)?,
                None => RunConfig::default(),
            };
            cfg.k = k;
            cfg.seed = seed;
            cfg.validate()?;
            let train_set = load_split(&data, "train")?;
            let plan = allocate_prototypes(&class_counts(&train_set), k)?;
            let stages: Vec<usize> = (0..train_set.manifest.stage_shapes.len()).collect();
            let bank = build_prototype_bank(&train_set, &plan, &stages, &bank_options(&cfg))?;
            bank.save(&out)?;
            println!("budgets: {:?}", plan.budgets());
            println!("wrote {} prototypes over {} stages to {}", k, stages.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            prototypes,
        } => {
            let cfg = RunConfig::from_file(&config)?;
            cfg.validate()?;
            let train_set = load_split(&data, "train")?;
            let val = load_optional(&data, "val")?;
            let bank = prototypes.as_deref().map(PrototypeBank::load).transpose()?;
            let outcome = train(&cfg, &train_set, val.as_ref(), bank)?;
            create_dir(&out)?;
            outcome.checkpoint.save(&out.join("checkpoint"))?;
            let log: String = outcome.epochs.iter().map(|r| r.log_line() + "\n").collect();
            write_text(&out.join("train.log"), &log)?;
            let lrs: String = outcome.lr_log.iter().map(|l| format!("{l}\n")).collect();
            write_text(&out.join("lr.log"), &lrs)?;
            write_text(&out.join("config"), &cfg.to_text())?;
            println!("checkpoint written to {}", out.join("checkpoint").display());
        }
        Command::Eval { ckpt, data, threshold } => {
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(MccError::Config(format!("threshold must lie in (0, 1), got {threshold}")));
            }
            let ckpt = Checkpoint::load(&ckpt)?;
            let test = load_split(&data, "test")?;
            let report = evaluate(&ckpt, &test, threshold)?;
            println!("{report}");
            print!("{}", report.to_kv());
        }
        Command::Analyze { ckpt, data, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let test = load_split(&data, "test")?;
            let analyses = analyze_prototypes(&ckpt, &test)?;
            let written = write_analysis(&analyses, &ckpt.model.signature.label_names, &out)?;
            print!("{}", fs::read_to_string(out.join("summary")).unwrap_or_default());
            info!("wrote {} files", written.len());
        }
        Command::Sweep {
            config,
            param,
            values,
            data,
        } => {
            let base = RunConfig::from_file(&config)?;
            let dir = data
                .or_else(|| base.data_dir.clone())
                .ok_or_else(|| MccError::Config("sweep needs --data or `data.dir` in the config".into()))?;
            let train_set = load_split(&dir, "train")?;
            let eval_set = match load_optional(&dir, "val")? {
                Some(v) => v,
                None => load_split(&dir, "test")?,
            };
            let rows = sweep(&base, &param, &split_values(&param, &values), &train_set, &eval_set)?;
            print!("{}", render_table(&param, &rows));
        }
        Command::GenData { spec, out } => {
            let spec = SyntheticSpec::from_file(&spec)?;
            let generated = generate_synthetic(&spec)?;
            for (name, split) in [("train", &generated.train), ("val", &generated.val), ("test", &generated.test)] {
                write_dataset(&out.join(name), split)?;
            }
            write_text(&out.join("clues"), &generated.dictionary.describe())?;
            println!(
                "wrote {}/{}/{} samples to {}",
                generated.train.len(),
                generated.val.len(),
                generated.test.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
