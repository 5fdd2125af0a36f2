//! Command-line front end: data generation, training, evaluation,
//! ablations, folding, scoring and gradient checking.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric or check failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use star_ctr::data::{read_dataset, write_dataset};
use star_ctr::eval::pcoc_svg;
use star_ctr::experiment::{
    ablation, evaluate, format_ablation, generate_split, manifest, parse_key_values, train, ExperimentConfig,
};
use star_ctr::gradcheck::{self, GradCheckConfig};
use star_ctr::model::checkpoint;
use star_ctr::serve::{fold, score_file, FoldedModel};
use star_ctr::{Error, Result};

#[derive(Parser)]
#[command(name = "star", version, about = "Multi-domain CTR experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train.tsv and test.tsv.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write model.ckpt, train.log and epochs.tsv.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training dataset file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write report.kv and report.json.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write pcoc.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Train and evaluate every ablation variant with aux on and off.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold a checkpoint into folded.json.
    Fold {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset with a folded model into predictions.tsv.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        folded: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::Version { .. }
        | Error::Index { .. }
        | Error::Domain { .. }
        | Error::Fold(_) => 3,
        _ => 4,
    }
}

fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>> {
    let mut pairs = match &args.config {
        Some(path) => parse_key_values(
            &fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        )?,
        None => Vec::new(),
    };
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn experiment_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    config.apply(&overrides(args)?)?;
    config.validate()?;
    Ok(config)
}

fn gradcheck_config(args: &ConfigArgs) -> Result<GradCheckConfig> {
    let mut cfg = GradCheckConfig::default();
    let mut unknown = Vec::new();
    for (k, v) in overrides(args)? {
        let bad = || Error::Config(format!("invalid value `{v}` for `{k}`"));
        match k.as_str() {
            "num_domains" => cfg.num_domains = v.parse().map_err(|_| bad())?,
            "embed_dim" => cfg.embed_dim = v.parse().map_err(|_| bad())?,
            "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad())?,
            "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
            "step" => cfg.step = v.parse().map_err(|_| bad())?,
            "tolerance" => cfg.tolerance = v.parse().map_err(|_| bad())?,
            "layers" => {
                cfg.layers = v
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?
            }
            _ => unknown.push(k),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_manifest(out: &Path, command: &str, config: &ExperimentConfig, inputs: &[(&str, &Path)]) -> Result<()> {
    let mut extra = BTreeMap::new();
    for (name, path) in inputs {
        extra.insert(format!("input.{name}"), path.display().to_string());
        extra.insert(format!("input.{name}.sha256"), file_hash(path)?);
    }
    fs::write(out.join(format!("{command}.manifest")), manifest(command, config, &extra))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let config = experiment_config(&cfg)?;
            fs::create_dir_all(&out)?;
            let split = generate_split(&config)?;
            write_dataset(out.join("train.tsv"), &split.train)?;
            write_dataset(out.join("test.tsv"), &split.test)?;
            write_manifest(&out, "gen-data", &config, &[])?;
            println!("{} train, {} test examples", split.train.len(), split.test.len());
        }
        Command::Train { cfg, data, out } => {
            let config = experiment_config(&cfg)?;
            let examples = read_dataset(&data)?;
            fs::create_dir_all(&out)?;
            let log = BufWriter::new(fs::File::create(out.join("train.log"))?);
            let (model, log) = train(&config, &examples, log)?;
            checkpoint::save(&model, out.join("model.ckpt"))?;
            let mut epochs = String::from("epoch\tbatches\tskipped\tmean_loss\n");
            for e in &log.epochs {
                epochs.push_str(&format!("{}\t{}\t{}\t{:.10e}\n", e.epoch, e.batches, e.skipped_batches, e.mean_loss));
            }
            fs::write(out.join("epochs.tsv"), &epochs)?;
            write_manifest(&out, "train", &config, &[("data", &data)])?;
            print!("{epochs}");
        }
        Command::Eval { cfg, checkpoint: ckpt, data, out, svg } => {
            let config = experiment_config(&cfg)?;
            let model = checkpoint::load(&ckpt)?;
            let examples = read_dataset(&data)?;
            let report = evaluate(&model, &examples)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.kv"), report.to_key_values())?;
            fs::write(out.join("report.json"), report.to_json())?;
            if svg {
                fs::write(out.join("pcoc.svg"), pcoc_svg(&[("model", report.pcoc_map())]))?;
            }
            write_manifest(&out, "eval", &config, &[("checkpoint", &ckpt), ("data", &data)])?;
            print!("{}", report.to_key_values());
        }
        Command::Ablation { cfg, train: train_path, test, out } => {
            let config = experiment_config(&cfg)?;
            let train_data = read_dataset(&train_path)?;
            let test_data = read_dataset(&test)?;
            let rows = ablation(&config, &train_data, &test_data)?;
            fs::create_dir_all(&out)?;
            let table = format_ablation(&rows);
            fs::write(out.join("ablation.tsv"), &table)?;
            write_manifest(&out, "ablation", &config, &[("train", &train_path), ("test", &test)])?;
            print!("{table}");
        }
        Command::Fold { cfg, checkpoint: ckpt, out } => {
            let config = experiment_config(&cfg)?;
            let folded = fold(&checkpoint::load(&ckpt)?)?;
            fs::create_dir_all(&out)?;
            folded.save(out.join("folded.json"))?;
            write_manifest(&out, "fold", &config, &[("checkpoint", &ckpt)])?;
        }
        Command::Score { cfg, folded, data, out } => {
            let config = experiment_config(&cfg)?;
            let model = FoldedModel::load(&folded)?;
            fs::create_dir_all(&out)?;
            let summary = score_file(&model, &data, out.join("predictions.tsv"))?;
            write_manifest(&out, "score", &config, &[("folded", &folded), ("data", &data)])?;
            let mut err = std::io::stderr().lock();
            for (line, msg) in &summary.rejected {
                writeln!(err, "line {line}: {msg}")?;
            }
            println!("scored {}, rejected {}", summary.scored, summary.rejected.len());
        }
        Command::Gradcheck { cfg } => {
            let report = gradcheck::run(&gradcheck_config(&cfg)?)?;
            print!("{report}");
            if !report.passed() {
                return Err(Error::Numeric(format!(
                    "max relative error {:.3e} exceeds {:.0e}",
                    report.max_error(),
                    report.tolerance
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
