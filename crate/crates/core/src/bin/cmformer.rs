use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmformer::harness::{
    ablate_with_progress, evaluate, render_split, report_row, run_gradcheck, split_file_names,
    train_with_progress, GradcheckOptions, HarnessError, TrainConfig,
};
use cmformer::synthbench::{read_dataset, write_dataset};

#[derive(Parser)]
#[command(name = "cmformer", version, about = "Content-enhanced mask attention: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes in one or more style domains.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated domain names, e.g. clear,dusk,fog.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
        /// Training scenes per domain.
        #[arg(long)]
        scenes: usize,
        /// First scene seed.
        #[arg(long)]
        seed: u64,
        /// Held-out scenes per domain (default: a quarter of --scenes).
        #[arg(long)]
        val_scenes: Option<usize>,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train on DIR/<source>_train.cmsb, validating on DIR/<source>_val.cmsb.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides CMA_SEED and the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and append one row to a CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and score every enhancement setting over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn load_config(path: &Path, cli_seed: Option<u64>) -> Result<TrainConfig, HarnessError> {
    let mut cfg = TrainConfig::load(path)?;
    let env = std::env::var("CMA_SEED").ok();
    cfg.resolve_seed(cli_seed, env.as_deref())?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::GenData {
            out,
            domains,
            scenes,
            seed,
            val_scenes,
            size,
        } => {
            if domains.is_empty() || scenes == 0 {
                return Err(HarnessError::Config("need at least one domain and one scene".into()));
            }
            let val_scenes = val_scenes.unwrap_or((scenes / 4).max(1));
            std::fs::create_dir_all(&out)?;
            let train_seeds = seed..seed + scenes as u64;
            let val_seeds = train_seeds.end..train_seeds.end + val_scenes as u64;
            for domain in &domains {
                let (train_name, val_name) = split_file_names(domain);
                for (name, seeds) in [(train_name, train_seeds.clone()), (val_name, val_seeds.clone())] {
                    let ds = render_split(domain, seeds, size)?;
                    let path = out.join(name);
                    write_dataset(&ds, &path)?;
                    println!("wrote {} ({} scenes)", path.display(), ds.len());
                }
            }
            Ok(true)
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let (train_name, val_name) = split_file_names(&cfg.source_domain);
            let train_ds = read_dataset(&data.join(train_name))?;
            let val_ds = read_dataset(&data.join(val_name))?;
            let outcome = train_with_progress(&cfg, &train_ds, &val_ds, &out, &mut |r| {
                let miou = r.val_miou.map_or("NA".into(), |m| format!("{m:.4}"));
                println!(
                    "epoch {:>3}  loss {:.4}  ce {:.4}  dice {:.4}  cls {:.4}  val mIoU {miou}",
                    r.epoch, r.loss, r.ce, r.dice, r.cls
                );
            })?;
            println!("log: {}", outcome.log_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            Ok(true)
        }
        Command::Eval {
            ckpt,
            data,
            domain,
            report,
        } => {
            let r = evaluate(&ckpt, &data, &domain, Some(&report))?;
            let seed = cmformer::segmodel::SegModel::load_checkpoint(&ckpt)?.seed;
            println!("{}", report_row(&r, seed));
            Ok(true)
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(&config, None)?;
            let table = ablate_with_progress(&cfg, &out, &mut |r| {
                let mean = r.mean_target_miou().map_or("NA".into(), |m| format!("{m:.4}"));
                println!("{:<8} seed {:<3} unseen mean mIoU {mean}", r.enhancement.to_string(), r.seed);
            })?;
            print!("{}", table.to_csv());
            Ok(true)
        }
        Command::Gradcheck => {
            let report = run_gradcheck(&GradcheckOptions::default());
            print!("{}", report.to_text());
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
