//! Acceptance criteria, one PASS/FAIL line each.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use bevkit_core::check::{run_suites, SuiteReport};
use bevkit_core::config::Config;
use bevkit_core::training::{ablate, mean_map, ordering_violations, split_batches, TrainConfig};

/// Wall-time limit for the full property-suite run.
const CHECK_BUDGET_SECONDS: f64 = 300.0;

struct Line {
    id: usize,
    title: &'static str,
    ok: bool,
    detail: String,
}

fn from_suites(id: usize, title: &'static str, reports: &[SuiteReport], names: &[&str]) -> Line {
    let picked: Vec<&SuiteReport> = reports.iter().filter(|r| names.contains(&r.name)).collect();
    let ok = picked.len() == names.len() && picked.iter().all(|r| r.ok());
    let detail = picked
        .iter()
        .map(|r| {
            let mut s = format!("{} {}/{} in {:.2}s", r.name, r.passed, r.cases, r.seconds);
            if let Some(f) = &r.failure {
                s.push_str(&format!(" [{f}]"));
            }
            if r.over_budget() {
                s.push_str(" [over budget]");
            }
            s
        })
        .collect::<Vec<_>>()
        .join("; ");
    Line { id, title, ok, detail }
}

fn ablation_line() -> Line {
    let title = "directional ablation over three seeds";
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablate.toml");
    let run = || -> bevkit_core::Result<(bool, String)> {
        let cfg = Config::load(&path)?;
        let mut runs = Vec::new();
        for &seed in &cfg.ablate.seeds {
            let tc = TrainConfig { seed, ..cfg.train_config() };
            let (batch, held) = split_batches(&cfg.model, cfg.train.scenes, cfg.train.held_out, cfg.scene.boxes, seed)?;
            runs.push(ablate(&tc, &batch, &held)?);
        }
        let means = mean_map(&runs);
        let violations = ordering_violations(&means);
        let table = means.iter().map(|(n, m)| format!("{n} {m:.4}")).collect::<Vec<_>>().join(", ");
        let mut detail = format!("mean held-out mAP: {table}");
        if !violations.is_empty() {
            detail.push_str(&format!(" [violations: {}]", violations.join("; ")));
        }
        Ok((violations.is_empty(), detail))
    };
    match run() {
        Ok((ok, detail)) => Line { id: 10, title, ok, detail },
        Err(e) => Line { id: 10, title, ok: false, detail: e.to_string() },
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let reports = run_suites(None, None);
    let check_seconds = start.elapsed().as_secs_f64();
    let mut lines = vec![
        from_suites(1, "projection roundtrip", &reports, &["geometry-roundtrip"]),
        from_suites(2, "ray stream equals exhaustive scatter", &reports, &["ray-stream-oracle"]),
        from_suites(3, "one-hot concentration and point partition", &reports, &["one-hot-concentration", "point-partition"]),
        from_suites(4, "point stream equals per-point loop", &reports, &["point-stream-oracle"]),
        from_suites(5, "candidate selection equals brute-force scan", &reports, &["candidate-selection"]),
        from_suites(6, "Hungarian cost equals enumeration", &reports, &["hungarian"]),
        from_suites(7, "gradient checks", &reports, &["gradients"]),
        from_suites(8, "fuser exact identities", &reports, &["fuser-identities"]),
        from_suites(9, "depth pretraining and joint training progress", &reports, &["training"]),
    ];
    lines.push(ablation_line());
    lines.push(from_suites(11, "metrics sanity", &reports, &["metrics-sanity"]));
    lines.push(from_suites(12, "point BEV sparser than ray BEV, PGM dumps", &reports, &["bev-sparsity"]));
    lines.push(Line {
        id: 13,
        title: "full property-suite wall time",
        ok: check_seconds < CHECK_BUDGET_SECONDS,
        detail: format!("{check_seconds:.1}s of {CHECK_BUDGET_SECONDS}s on {} threads", rayon_threads()),
    });
    lines.sort_by_key(|l| l.id);
    let mut failed = 0;
    for l in &lines {
        println!("{} criterion {:>2}: {} -- {}", if l.ok { "PASS" } else { "FAIL" }, l.id, l.title, l.detail);
        failed += usize::from(!l.ok);
    }
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
