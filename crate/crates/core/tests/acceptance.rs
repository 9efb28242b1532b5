//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 need nine trained desk-scale models (three variants by
//! three seeds). Checkpoints are cached under `target/ptd-acceptance` (or
//! `$PTD_ACCEPTANCE_CACHE`); missing ones are trained here, which takes
//! hours on one core. Set `PTD_ACCEPTANCE_NO_TRAIN` to report unfinished
//! checkpoints as failures instead of training.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use ptd_core::checkpoint::Checkpoint;
use ptd_core::experiment::{evaluate, median, Experiment};
use ptd_core::metrics::MetricPair;
use ptd_core::networks::Variant;
use ptd_core::training::{loss_and_grads, BatchDraw, Model, Sample, TrainConfig};
use ptd_core::verify::run_suite;
use ptd_core::PtdError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const VARIANTS: [Variant; 3] = [Variant::DIFF_ONLY, Variant::DIFF_CONTENT, Variant::FULL];
const BASELINE_TOLERANCE_DB: f64 = 0.5;
const STOCHASTIC_REPEATS: u64 = 4;

struct Outcome {
    passed: bool,
    summary: String,
    details: Vec<String>,
}

fn cache_dir() -> PathBuf {
    std::env::var_os("PTD_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/ptd-acceptance"))
}

fn baselines() -> BTreeMap<String, f64> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/baselines.txt");
    let Ok(text) = std::fs::read_to_string(path) else { return BTreeMap::new() };
    text.lines()
        .filter_map(|l| l.split('#').next())
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| Some((k.trim().to_string(), v.trim().parse().ok()?)))
        .collect()
}

fn suite_criterion(suite: &str, limit_s: f64) -> Outcome {
    let start = Instant::now();
    match run_suite(suite) {
        Ok(report) => {
            let secs = start.elapsed().as_secs_f64();
            let worst = report
                .worst()
                .map(|c| format!("worst {} = {:.3e} (tolerance {:.3e})", c.name, c.measured, c.tolerance))
                .unwrap_or_default();
            let failed: Vec<String> =
                report.checks.iter().filter(|c| !c.passed).map(|c| format!("failed: {}", c.name)).collect();
            Outcome {
                passed: report.passed() && secs < limit_s,
                summary: format!("{} checks, {}, {:.1} s (limit {} s)", report.checks.len(), worst, secs, limit_s),
                details: failed,
            }
        }
        Err(e) => Outcome { passed: false, summary: format!("error: {}", e), details: vec![] },
    }
}

fn experiment(variant: Variant, seed: u64) -> Experiment {
    Experiment { train: TrainConfig { variant, seed, ..TrainConfig::default() }, ..Experiment::default() }
}

fn psnrs(rows: &[MetricPair]) -> Vec<f64> {
    rows.iter().map(|m| m.psnr).collect()
}

/// Wall time of one default training iteration.
fn seconds_per_iteration(train: &[Sample]) -> ptd_core::Result<f64> {
    let exp = Experiment::default();
    let cfg = &exp.train;
    let params = ptd_core::training::initial_params(&exp.arch, cfg);
    let sched = cfg.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch: Vec<&Sample> = train.iter().take(cfg.batch).collect();
    let endpoints = ptd_core::training::batch_endpoints(&params, &exp.arch, cfg, &batch)?;
    let start = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        let draw = BatchDraw::sample(&batch, &endpoints, &sched, &mut rng)?;
        loss_and_grads(&params, &exp.arch, cfg, &sched, &batch, &draw)?;
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

struct Trained {
    models: BTreeMap<(&'static str, u64), Model>,
    test: Vec<Sample>,
    train_secs_per_iter: f64,
}

fn load_or_train() -> ptd_core::Result<Trained> {
    let cache = cache_dir();
    let mut models = BTreeMap::new();
    for seed in SEEDS {
        for variant in VARIANTS {
            let exp = experiment(variant, seed);
            if std::env::var_os("PTD_ACCEPTANCE_NO_TRAIN").is_some() {
                let path = cache.join(format!("{}.ptdc", exp.cache_key()));
                let step = Checkpoint::load(&path).map(|c| c.opt.step).unwrap_or(0);
                if (step as usize) < exp.train.iters {
                    return Err(PtdError::InvalidArgument(format!(
                        "{} is not fully trained ({} of {} iterations) and PTD_ACCEPTANCE_NO_TRAIN is set",
                        path.display(),
                        step,
                        exp.train.iters
                    )));
                }
            }
            let start = Instant::now();
            let ck = exp.train_or_load(Some(&cache), 250, |iter, loss| {
                if iter % 500 == 0 {
                    eprintln!("  training {} seed {}: iter {} loss {:.4}", variant.name(), seed, iter, loss.total);
                }
            })?;
            let secs = start.elapsed().as_secs_f64();
            if secs > 5.0 {
                eprintln!("  trained {} seed {} in {:.0} s", variant.name(), seed, secs);
            }
            models.insert((variant.name(), seed), Model::new(ck.arch, ck.params, &ck.cfg)?);
        }
    }
    let exp = Experiment::default();
    let test = exp.test_set()?;
    let train_secs_per_iter = seconds_per_iteration(&test)?;
    Ok(Trained { models, test, train_secs_per_iter })
}

fn check_baseline(base: &BTreeMap<String, f64>, key: &str, measured: f64, details: &mut Vec<String>) -> bool {
    match base.get(key) {
        Some(&b) => {
            let ok = (measured - b).abs() <= BASELINE_TOLERANCE_DB;
            details.push(format!(
                "baseline {}: {:.3} dB recorded, {:.3} dB now ({})",
                key,
                b,
                measured,
                if ok { "ok" } else { "drift" }
            ));
            ok
        }
        None => {
            details.push(format!("baseline {}: not recorded", key));
            true
        }
    }
}

fn criterion_end_to_end(t: &Trained) -> ptd_core::Result<Outcome> {
    let base = baselines();
    let mut details = Vec::new();
    let mut fbp_med = Vec::new();
    let mut init_med = Vec::new();
    let mut ptd1: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        for variant in VARIANTS {
            let model = &t.models[&(variant.name(), seed)];
            let ev = evaluate(model, &t.test, &[1], false, 0)?;
            let p = median(&psnrs(&ev.ptd[&1]));
            details.push(format!(
                "seed {} {:<13} fbp {:.3}  init {:.3}  ptd-1 {:.3} dB (ssim {:.4})",
                seed,
                variant.name(),
                median(&psnrs(&ev.fbp)),
                median(&psnrs(&ev.init)),
                p,
                median(&ev.ptd[&1].iter().map(|m| m.ssim).collect::<Vec<_>>())
            ));
            ptd1.entry(variant.name()).or_default().push(p);
            if variant == Variant::FULL {
                fbp_med.push(median(&psnrs(&ev.fbp)));
                init_med.push(median(&psnrs(&ev.init)));
            }
        }
    }
    let fbp = median(&fbp_med);
    let init = median(&init_med);
    let [diff, content, full] = VARIANTS.map(|v| median(&ptd1[v.name()]));
    let a = full >= fbp + 6.0;
    let b = init > fbp;
    let c = diff <= content && content <= full;
    let mut baseline_ok = true;
    for (key, value) in
        [("fbp", fbp), ("init", init), ("ptd1.diff", diff), ("ptd1.diff+content", content), ("ptd1.full", full)]
    {
        baseline_ok &= check_baseline(&base, key, value, &mut details);
    }
    let projected_h = t.train_secs_per_iter * 5000.0 * (SEEDS.len() * VARIANTS.len()) as f64 / 3600.0;
    details.push(format!(
        "training cost: {:.3} s/iteration, {:.1} h projected for all nine runs (target 2 h)",
        t.train_secs_per_iter, projected_h
    ));
    Ok(Outcome {
        passed: a && b && c && baseline_ok,
        summary: format!(
            "(a) ptd-1 {:.2} >= fbp {:.2} + 6 dB: {}; (b) init {:.2} > fbp: {}; (c) diff {:.2} <= +content {:.2} <= +guidance {:.2}: {}",
            full, fbp, a, init, b, diff, content, full, c
        ),
        details,
    })
}

fn criterion_step_tradeoff(t: &Trained) -> ptd_core::Result<Outcome> {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut med1 = Vec::new();
    let mut med8 = Vec::new();
    let mut spread = Vec::new();
    for seed in SEEDS {
        let model = &t.models[&(Variant::FULL.name(), seed)];
        let runs = (0..STOCHASTIC_REPEATS)
            .map(|r| evaluate(model, &t.test, &[1, 8], true, r))
            .collect::<ptd_core::Result<Vec<_>>>()?;
        let m1 = median(&psnrs(&runs[0].ptd[&1]));
        let m8 = median(&psnrs(&runs[0].ptd[&8]));
        // per-image standard deviation of PSNR across sampling seeds
        let stds = |steps: usize| -> f64 {
            let per_image: Vec<f64> = (0..t.test.len())
                .map(|i| {
                    let v: Vec<f64> = runs.iter().map(|r| r.ptd[&steps][i].psnr).collect();
                    let mu = v.iter().sum::<f64>() / v.len() as f64;
                    (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
                })
                .collect();
            per_image.iter().sum::<f64>() / per_image.len() as f64
        };
        let (s1, s8) = (stds(1), stds(8));
        let det = evaluate(model, &t.test, &[1, 8], false, 0)?;
        details.push(format!(
            "seed {}: ptd-1 {:.3} dB, ptd-8 {:.3} dB; sampling std ptd-1 {:.4} dB, ptd-8 {:.4} dB; posterior-mean ptd-8 {:.3} dB",
            seed,
            m1,
            m8,
            s1,
            s8,
            median(&psnrs(&det.ptd[&8]))
        ));
        med1.push(m1);
        med8.push(m8);
        spread.push(s8);
    }
    let (m1, m8) = (median(&med1), median(&med8));
    let secs = start.elapsed().as_secs_f64();
    let passed = m1 >= m8 && secs < 600.0;
    Ok(Outcome {
        passed,
        summary: format!(
            "median ptd-1 {:.2} dB >= ptd-8 {:.2} dB: {}; ptd-8 sampling std {:.3} dB over {} draws; {:.0} s (limit 600 s)",
            m1,
            m8,
            m1 >= m8,
            median(&spread),
            STOCHASTIC_REPEATS,
            secs
        ),
        details,
    })
}

type LateCriterion = fn(&Trained) -> ptd_core::Result<Outcome>;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // cargo passes libtest flags; only a bare name filter is honoured
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let filter = args.iter().skip(1).find(|a| !a.starts_with('-'));
    if filter.is_some_and(|f| !"acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }

    let suites: [(&str, &str, f64); 7] = [
        ("1 adjoint identity", "adjoint", 10.0),
        ("2 schedule identities", "schedule", 1.0),
        ("3 bridge moments and composition", "moments", 60.0),
        ("4 oracle denoiser exactness", "oracle", 5.0),
        ("5 gradient correctness", "gradient", 120.0),
        ("6 noise moments", "noise", 30.0),
        ("7 fbp view-count ordering", "fbp", 60.0),
    ];
    let mut results: Vec<(String, Outcome)> = Vec::new();
    for (name, suite, limit) in suites {
        let outcome = suite_criterion(suite, limit);
        report(name, &outcome);
        results.push((name.to_string(), outcome));
    }

    let trained = load_or_train();
    let late: [(&str, LateCriterion); 2] = [
        ("8 end-to-end training", criterion_end_to_end),
        ("9 step-count trade-off", criterion_step_tradeoff),
    ];
    for (name, run) in late {
        let outcome = match &trained {
            Ok(t) => run(t).unwrap_or_else(|e| Outcome { passed: false, summary: format!("error: {}", e), details: vec![] }),
            Err(e) => Outcome { passed: false, summary: format!("training failed: {}", e), details: vec![] },
        };
        report(name, &outcome);
        results.push((name.to_string(), outcome));
    }

    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}

fn report(name: &str, o: &Outcome) {
    println!("{} criterion {}: {}", if o.passed { "PASS" } else { "FAIL" }, name, o.summary);
    for d in &o.details {
        println!("    {}", d);
    }
}
