use std::path::{Path, PathBuf};
use std::process::ExitCode;

use kfqn::config::ExperimentConfig;
use kfqn::experiment::{run_experiment, RunOutcome};
use kfqn::verify::{self, SuiteReport};

const SEED: u64 = 0;

struct Outcome {
    id: usize,
    passed: bool,
    detail: String,
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn suite(id: usize, report: kfqn::Result<SuiteReport>, time_limit: Option<f64>) -> Outcome {
    match report {
        Ok(r) => {
            let in_time = time_limit.is_none_or(|t| r.seconds < t);
            let limit = time_limit
                .map(|t| format!(" (limit {t}s)"))
                .unwrap_or_default();
            Outcome {
                id,
                passed: r.passed() && in_time,
                detail: format!(
                    "{}: {} trials, {} failures, max error {:.3e} vs tolerance {:.1e}, {:.2}s{limit}",
                    r.name, r.trials, r.failures, r.max_error, r.tolerance, r.seconds
                ),
            }
        }
        Err(e) => Outcome {
            id,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn mnist_run(name: &str, scratch: &Path) -> kfqn::Result<RunOutcome> {
    let mut cfg =
        ExperimentConfig::from_path(&configs_dir().join(format!("mnist-subset-{name}.toml")))?;
    cfg.seed = SEED;
    cfg.epochs = 20;
    cfg.out = scratch.join(name);
    run_experiment(&cfg)
}

fn loss_ratio(run: &RunOutcome) -> Option<f64> {
    let last = run.final_train_loss()?;
    (last.is_finite() && !run.diverged()).then(|| last / run.initial.train_loss)
}

fn optimization(
    runs: &[(&str, kfqn::Result<RunOutcome>)],
    sgdm: &kfqn::Result<RunOutcome>,
) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, run) in runs {
        match run {
            Ok(r) => {
                let ratio = loss_ratio(r);
                passed &= ratio.is_some_and(|q| q <= 0.6);
                parts.push(format!(
                    "{name} {:.3} -> {:.3} (ratio {})",
                    r.initial.train_loss,
                    r.final_train_loss().unwrap_or(f64::NAN),
                    ratio.map_or("n/a".into(), |q| format!("{q:.3}"))
                ));
            }
            Err(e) => {
                passed = false;
                parts.push(format!("{name} error: {e}"));
            }
        }
    }
    let soft = match (&runs[0].1, sgdm) {
        (Ok(k), Ok(s)) => {
            let (a, b) = (
                k.final_train_loss().unwrap_or(f64::NAN),
                s.final_train_loss().unwrap_or(f64::NAN),
            );
            format!(
                "soft check kbfgs <= sgdm: {} ({a:.3} vs {b:.3})",
                if a <= b { "yes" } else { "no" }
            )
        }
        _ => "soft check kbfgs <= sgdm: unavailable".into(),
    };
    parts.push(soft);
    Outcome {
        id: 8,
        passed,
        detail: parts.join("; "),
    }
}

fn dd_rate(run: &kfqn::Result<RunOutcome>) -> Outcome {
    let run = match run {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                id: 9,
                passed: false,
                detail: format!("kbfgs-l run failed: {e}"),
            }
        }
    };
    let layers = run.records.first().map_or(0, |r| r.dd_fraction.len());
    let rates: Vec<Option<f64>> = (0..layers)
        .map(|l| {
            let seen: Vec<f64> = run
                .records
                .iter()
                .filter_map(|r| r.dd_fraction[l])
                .collect();
            (!seen.is_empty()).then(|| seen.iter().sum::<f64>() / seen.len() as f64)
        })
        .collect();
    let passed = layers > 0 && rates.iter().all(|r| r.is_some_and(|v| v >= 0.8));
    let shown: Vec<String> = rates
        .iter()
        .map(|r| r.map_or("n/a".into(), |v| format!("{v:.3}")))
        .collect();
    Outcome {
        id: 9,
        passed,
        detail: format!(
            "per-layer rate [{}], threshold 0.8, reference 0.9",
            shown.join(", ")
        ),
    }
}

fn strip_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let mut cols: Vec<&str> = line.split(',').collect();
            if cols.len() > 3 {
                cols.remove(3);
            }
            cols.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism(scratch: &Path) -> Outcome {
    let attempt = || -> kfqn::Result<(String, String)> {
        let mut cfg = ExperimentConfig::from_path(&configs_dir().join("tiny-grid.toml"))?;
        cfg.grid = None;
        let mut texts = Vec::new();
        for run in ["a", "b"] {
            cfg.out = scratch.join(format!("determinism-{run}"));
            let outcome = run_experiment(&cfg)?;
            texts.push(std::fs::read_to_string(outcome.csv_path)?);
        }
        Ok((texts.remove(0), texts.remove(0)))
    };
    match attempt() {
        Ok((a, b)) => {
            let same = strip_wall_time(&a) == strip_wall_time(&b);
            Outcome {
                id: 10,
                passed: same && a.lines().count() > 1,
                detail: format!(
                    "{} rows, identical apart from wall time: {same}",
                    a.lines().count() - 1
                ),
            }
        }
        Err(e) => Outcome {
            id: 10,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn report(results: &mut Vec<Outcome>, r: Outcome) {
    println!(
        "criterion {:>2}: {} {}",
        r.id,
        if r.passed { "PASS" } else { "FAIL" },
        r.detail
    );
    results.push(r);
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let seeds: Vec<u64> = (SEED..SEED + 10).collect();
    let mut results = Vec::new();

    report(
        &mut results,
        suite(
            1,
            Ok(verify::double_damping_suite(100_000, 50, SEED)),
            Some(10.0),
        ),
    );
    report(
        &mut results,
        suite(
            2,
            Ok(verify::broyden_equivalence_suite(1000, 20, SEED)),
            Some(5.0),
        ),
    );
    report(
        &mut results,
        suite(
            3,
            Ok(verify::lbfgs_equivalence_suite(
                &[1, 5, 100],
                &[3, 50, 200],
                100,
                SEED,
            )),
            Some(30.0),
        ),
    );
    report(
        &mut results,
        suite(4, verify::gradient_check_suite(&seeds, 1e-5), None),
    );
    report(
        &mut results,
        suite(5, verify::kronecker_hessian_suite(&seeds[..5], 1e-4), None),
    );
    report(
        &mut results,
        suite(6, verify::ha_spectrum_suite(200, 0.316, SEED), None),
    );
    report(
        &mut results,
        suite(7, verify::norm_growth_suite(200, SEED), None),
    );

    let runs: Vec<(&str, kfqn::Result<RunOutcome>)> = ["kbfgs", "kbfgs-l", "kfac"]
        .into_iter()
        .map(|name| (name, mnist_run(name, scratch.path())))
        .collect();
    let sgdm = mnist_run("sgdm", scratch.path());
    report(&mut results, optimization(&runs, &sgdm));
    report(&mut results, dd_rate(&runs[1].1));
    report(&mut results, determinism(scratch.path()));

    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
