use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::data::{source_splits, split_file_names, target_split};
use super::eval::{checkpoint_id, evaluate_model};
use super::train::train;
use super::{HarnessError, TrainConfig};
use crate::segmodel::Enhancement;
use crate::synthbench::write_dataset;

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";

/// One trained configuration and seed, evaluated on every target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub enhancement: Enhancement,
    pub seed: u64,
    /// In-domain validation mIoU from the last epoch of the training log.
    pub source_miou: Option<f64>,
    /// One entry per target domain, in config order.
    pub target_miou: Vec<Option<f64>>,
    pub num_params: usize,
    pub checkpoint: String,
    pub run_dir: PathBuf,
}

impl AblationRun {
    /// Mean over target domains, if every domain produced a score.
    pub fn mean_target_miou(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.target_miou.iter().copied().collect();
        vals.filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub source_domain: String,
    pub domains: Vec<String>,
    pub runs: Vec<AblationRun>,
}

/// Mean and sample standard deviation; `None` when `xs` is empty.
pub fn mean_sd(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}

fn cell(stat: Option<(f64, f64)>) -> String {
    stat.map_or("NA".into(), |(m, s)| format!("{m:.4}±{s:.4}"))
}

impl AblationTable {
    pub fn runs_for(&self, enhancement: Enhancement) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.enhancement == enhancement)
    }

    /// Seed statistics of one configuration on one target domain.
    pub fn domain_stat(&self, enhancement: Enhancement, domain: usize) -> Option<(f64, f64)> {
        let xs: Vec<f64> = self
            .runs_for(enhancement)
            .filter_map(|r| r.target_miou.get(domain).copied().flatten())
            .collect();
        mean_sd(&xs)
    }

    /// Seed statistics of the per-run mean over all target domains.
    pub fn mean_stat(&self, enhancement: Enhancement) -> Option<(f64, f64)> {
        let xs: Vec<f64> = self
            .runs_for(enhancement)
            .filter_map(AblationRun::mean_target_miou)
            .collect();
        mean_sd(&xs)
    }

    /// Rows are the four enhancement settings, columns the target domains
    /// followed by their mean; cells read `mean±sd` over seeds.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config");
        for d in &self.domains {
            let _ = write!(s, ",{d}");
        }
        s.push_str(",mean\n");
        for enh in Enhancement::ABLATION {
            s.push_str(&enh.to_string());
            for d in 0..self.domains.len() {
                let _ = write!(s, ",{}", cell(self.domain_stat(enh, d)));
            }
            let _ = writeln!(s, ",{}", cell(self.mean_stat(enh)));
        }
        s
    }

    /// One line per run and domain, with full precision.
    pub fn runs_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:?}"));
        let mut s = String::from("config,seed,domain,miou,num_params,checkpoint\n");
        for r in &self.runs {
            let source = std::iter::once((self.source_domain.as_str(), r.source_miou));
            let targets = self.domains.iter().map(String::as_str).zip(r.target_miou.iter().copied());
            for (domain, miou) in source.chain(targets) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    r.enhancement,
                    r.seed,
                    domain,
                    fmt(miou),
                    r.num_params,
                    r.checkpoint
                );
            }
        }
        s
    }
}

/// Directory name of one ablation run, e.g. `32+16_seed2`.
pub fn run_dir_name(enhancement: Enhancement, seed: u64) -> String {
    format!("{enhancement}_seed{seed}")
}

pub fn ablate(cfg: &TrainConfig, out_dir: &Path) -> Result<AblationTable, HarnessError> {
    ablate_with_progress(cfg, out_dir, &mut |_| {})
}

/// Trains every enhancement setting of the ablation for every seed in
/// `cfg.ablation_seeds` on the source domain and scores each on all target
/// domains. Runs go to `out_dir/runs/<config>_seed<s>/`, the rendered data
/// to `out_dir/data/`, and the two CSV tables to `out_dir`.
pub fn ablate_with_progress(
    cfg: &TrainConfig,
    out_dir: &Path,
    on_run: &mut dyn FnMut(&AblationRun),
) -> Result<AblationTable, HarnessError> {
    cfg.validate()?;
    if cfg.ablation_seeds.is_empty() {
        return Err(HarnessError::Config("ablation_seeds is empty".into()));
    }
    let data_dir = out_dir.join("data");
    std::fs::create_dir_all(&data_dir)?;
    let (train_ds, val_ds) = source_splits(cfg)?;
    let (train_name, val_name) = split_file_names(&cfg.source_domain);
    write_dataset(&train_ds, &data_dir.join(train_name))?;
    write_dataset(&val_ds, &data_dir.join(val_name))?;
    let mut targets = Vec::with_capacity(cfg.target_domains.len());
    for domain in &cfg.target_domains {
        let ds = target_split(cfg, domain)?;
        write_dataset(&ds, &data_dir.join(split_file_names(domain).1))?;
        targets.push(ds);
    }

    let mut table = AblationTable {
        source_domain: cfg.source_domain.clone(),
        domains: cfg.target_domains.clone(),
        runs: Vec::new(),
    };
    for enhancement in Enhancement::ABLATION {
        for &seed in &cfg.ablation_seeds {
            let run_cfg = TrainConfig {
                seed,
                enhancement,
                ..cfg.clone()
            };
            let run_dir = out_dir.join("runs").join(run_dir_name(enhancement, seed));
            let outcome = train(&run_cfg, &train_ds, &val_ds, &run_dir)?;
            std::fs::write(run_dir.join("config.txt"), run_cfg.to_text())?;
            let bytes = std::fs::read(&outcome.checkpoint_path)?;
            let evaluated = outcome.model.quantized();
            let target_miou = targets
                .iter()
                .map(|ds| Ok(evaluate_model(&evaluated, ds)?.miou()))
                .collect::<Result<Vec<_>, HarnessError>>()?;
            let run = AblationRun {
                enhancement,
                seed,
                source_miou: outcome.log.last().and_then(|r| r.val_miou),
                target_miou,
                num_params: outcome.model.num_params(),
                checkpoint: checkpoint_id(&outcome.checkpoint_path, &bytes),
                run_dir,
            };
            on_run(&run);
            table.runs.push(run);
            std::fs::write(out_dir.join(ABLATION_RUNS_FILE), table.runs_csv())?;
        }
    }
    std::fs::write(out_dir.join(ABLATION_FILE), table.to_csv())?;
    Ok(table)
}
