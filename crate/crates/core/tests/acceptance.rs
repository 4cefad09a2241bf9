//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no test harness). The ablation behind criteria
//! 8 and 9 trains twelve full models, so expect this target to take the
//! better part of an hour on one core.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cmformer::harness::{
    ablate_with_progress, confusion_and_miou, required_checks, run_gradcheck, GradcheckOptions, TrainConfig,
    ABLATION_FILE, CHECKPOINT_FILE, LOG_FILE,
};
use cmformer::ndtensor::{Tape, Tensor};
use cmformer::objective::{bce_mask_loss, dice_loss, LossWeights};
use cmformer::segmodel::Enhancement;
use common::checks::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s <= budget_s, format!("{s:.1}s of {budget_s:.0}s"))
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let report = run_gradcheck(&GradcheckOptions::default());
    let (fast, time) = within(t.elapsed(), 60.0);
    let worst = report.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let complete = report.missing().is_empty() && required_checks().len() == report.results.len();
    let ok = report.passed() && complete && worst <= 1e-4 && fast;
    let mut detail = format!("{} checks, worst rel err {worst:.2e}, {time}", report.results.len());
    if !report.failures().is_empty() {
        detail += &format!(", failing: {}", report.failures().join(","));
    }
    verdict(ok, detail)
}

fn attention_oracles() -> Verdict {
    let t = Instant::now();
    let worst = (0..5).map(attention_vs_oracle).fold(0.0, f64::max);
    let (fast, time) = within(t.elapsed(), 10.0);
    verdict(worst <= 1e-10 && fast, format!("max |Δ| {worst:.2e}, {time}"))
}

fn cma_oracle() -> Verdict {
    let t = Instant::now();
    let worst = (0..5).map(|s| cma_vs_oracle(s, true)).fold(0.0, f64::max);
    let (fast, time) = within(t.elapsed(), 10.0);
    verdict(worst <= 1e-9 && fast, format!("max |Δ| {worst:.2e}, {time}"))
}

fn degenerate_reduction() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut counts_match = true;
    for seed in 0..3 {
        let (d, ok) = degenerate_decoder_deviation(seed);
        worst = worst.max(d);
        counts_match &= ok;
    }
    let fused = (0..5).map(fused_out_low_branch_deviation).fold(0.0, f64::max);
    verdict(
        worst <= 1e-12 && fused <= 1e-12 && counts_match,
        format!("decoder max |Δ| {worst:.1e}, [I|0] fusion max |Δ| {fused:.1e}, parameter counts match: {counts_match}"),
    )
}

fn hungarian() -> Verdict {
    let t = Instant::now();
    let bad = hungarian_disagreements(2024, 200);
    let (fast, time) = within(t.elapsed(), 5.0);
    verdict(bad == 0 && fast, format!("{bad} of 200 disagree with brute force, {time}"))
}

fn closed_forms() -> Verdict {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1, 4]));
    let dice = dice_loss(x, &[1.0; 4], 1.0).unwrap().item();
    let x = tape.constant(&Tensor::zeros(&[1, 4]));
    let bce = bce_mask_loss(x, &[1.0, 0.0, 0.0, 1.0]).unwrap().item();
    let miou = confusion_and_miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap().2.unwrap();
    let total = LossWeights::default().combine(1.0, 1.0, 1.0);
    let errs = [
        (dice - 2.0 / 7.0).abs(),
        (bce - std::f64::consts::LN_2).abs(),
        (miou - 7.0 / 12.0).abs(),
        (total - 12.0).abs(),
    ];
    verdict(
        errs.iter().all(|e| *e <= 1e-9),
        format!("dice {dice:.12}, bce {bce:.12}, mIoU {miou:.12}, weighted total {total}"),
    )
}

fn style_separation() -> Verdict {
    match content_is_style_invariant(0..100) {
        Ok(()) => verdict(true, "100 seeds × 5 domains, label maps identical"),
        Err(e) => verdict(false, e),
    }
}

fn cli_determinism(dir: &Path) -> Verdict {
    let exe = env!("CARGO_BIN_EXE_cmformer");
    let run = |args: &[&str]| -> bool {
        Command::new(exe)
            .args(args)
            .env_remove("CMA_SEED")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    };
    let p = |q: &Path| q.to_string_lossy().into_owned();
    let data = dir.join("data");
    let cfg = dir.join("train.cfg");
    if std::fs::write(&cfg, "seed = 12\nepochs = 2\nbatch_size = 4\n").is_err() {
        return verdict(false, "cannot write config");
    }
    if !run(&["gen-data", "--out", &p(&data), "--domains", "clear", "--scenes", "16", "--seed", "300"]) {
        return verdict(false, "gen-data failed");
    }
    for name in ["a", "b"] {
        if !run(&["train", "--config", &p(&cfg), "--data", &p(&data), "--out", &p(&dir.join(name))]) {
            return verdict(false, format!("train run {name} failed"));
        }
    }
    let same = |f: &str| std::fs::read(dir.join("a").join(f)).ok() == std::fs::read(dir.join("b").join(f)).ok();
    let (log, ckpt) = (same(LOG_FILE), same(CHECKPOINT_FILE));
    verdict(log && ckpt, format!("log identical: {log}, checkpoint identical: {ckpt}"))
}

fn format_round_trips_all() -> Verdict {
    for seed in [3, 4, 5] {
        if let Err(e) = format_round_trips(seed) {
            return verdict(false, e);
        }
    }
    verdict(true, "CMSB and CMCK bitwise; magic, version, truncation and random header damage typed")
}

fn parse_mean(cell: &str) -> Option<f64> {
    cell.split('±').next()?.parse().ok()
}

fn ablation_criteria(dir: &Path) -> (Verdict, Verdict) {
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let mut last = Instant::now();
    let mut full_runs = Duration::ZERO;
    let result = ablate_with_progress(&cfg, dir, &mut |r| {
        let took = last.elapsed();
        last = Instant::now();
        if r.enhancement == Enhancement::ALL {
            full_runs += took;
        }
        eprintln!(
            "  ablation run {:<8} seed {}: source {:.4}, unseen mean {:.4} ({:.0}s)",
            r.enhancement.to_string(),
            r.seed,
            r.source_miou.unwrap_or(f64::NAN),
            r.mean_target_miou().unwrap_or(f64::NAN),
            took.as_secs_f64()
        );
    });
    let total = start.elapsed();
    let table = match result {
        Ok(t) => t,
        Err(e) => {
            let msg = format!("ablation failed: {e}");
            return (verdict(false, msg.clone()), verdict(false, msg));
        }
    };

    let source: Vec<f64> = table
        .runs_for(Enhancement::ALL)
        .map(|r| r.source_miou.unwrap_or(0.0))
        .collect();
    let above = source.iter().filter(|&&m| m >= 0.60).count();
    let (fast8, time8) = within(full_runs, 30.0 * 60.0);
    let c8 = verdict(
        above == 3 && source.len() == 3 && fast8,
        format!(
            "in-domain mIoU {} ({above}/3 ≥ 0.60), {time8}",
            source.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", ")
        ),
    );

    let full = table.mean_stat(Enhancement::ALL).map(|s| s.0);
    let none = table.mean_stat(Enhancement::NONE).map(|s| s.0);
    let csv = std::fs::read_to_string(dir.join(ABLATION_FILE)).unwrap_or_default();
    let csv_mean = |row: &str| {
        csv.lines()
            .find(|l| l.split(',').next() == Some(row))
            .and_then(|l| l.split(',').next_back().and_then(parse_mean))
    };
    let (csv_full, csv_none) = (csv_mean("32+16+8"), csv_mean("none"));
    let (fast9, time9) = within(total, 2.5 * 3600.0);
    let c9 = match (full, none, csv_full, csv_none) {
        (Some(f), Some(n), Some(cf), Some(cn)) => verdict(
            f - n > 0.0 && cf >= cn && fast9,
            format!("unseen mean {{32,16,8}} {f:.4} vs {{none}} {n:.4}, Δ {:+.4}; CSV {cf:.4} vs {cn:.4}; {time9}", f - n),
        ),
        _ => verdict(false, "ablation table incomplete"),
    };
    eprint!("{csv}");
    (c8, c9)
}

fn main() -> ExitCode {
    let work = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&work);
    std::fs::create_dir_all(&work).expect("acceptance work directory");

    let mut lines: Vec<(u32, &str, Verdict)> = vec![
        (1, "gradient suite", gradient_suite()),
        (2, "attention oracles", attention_oracles()),
        (3, "content-enhanced layer oracle", cma_oracle()),
        (4, "degenerate reduction", degenerate_reduction()),
        (5, "hungarian vs brute force", hungarian()),
        (6, "loss and metric closed forms", closed_forms()),
        (7, "content/style separation", style_separation()),
    ];
    let det_dir = work.join("determinism");
    let _ = std::fs::create_dir_all(&det_dir);
    let (c8, c9) = ablation_criteria(&work.join("ablation"));
    lines.push((8, "end-to-end trainability", c8));
    lines.push((9, "directional generalization", c9));
    lines.push((10, "determinism", cli_determinism(&det_dir)));
    lines.push((11, "format round trips", format_round_trips_all()));

    let mut all = true;
    for (id, name, v) in &lines {
        all &= v.pass;
        println!("{} criterion {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
