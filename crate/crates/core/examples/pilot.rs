//! Trains one desk-scale configuration and prints test-set PSNR.
//!
//! usage: pilot <variant> <seed> <iters> <cache-dir>

use std::path::PathBuf;
use std::time::Instant;

use ptd_core::experiment::{evaluate, median, Evaluation, Experiment};
use ptd_core::networks::Variant;
use ptd_core::training::{Model, TrainConfig};

fn main() -> ptd_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant = Variant::parse(args.get(1).map_or("full", |s| s.as_str()))?;
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let cache = PathBuf::from(args.get(4).map_or("target/pilot", |s| s.as_str()));
    let exp = Experiment { train: TrainConfig { variant, seed, iters, ..Default::default() }, ..Default::default() };
    let start = Instant::now();
    let mut window = Vec::new();
    let ck = exp.train_or_load(Some(&cache), 250, |i, l| {
        window.push(l.total);
        if i % 100 == 0 {
            let m = window.iter().sum::<f64>() / window.len() as f64;
            println!("iter {} mean_total {:.5} last {:?} {:.0?}", i, m, l, start.elapsed());
            window.clear();
        }
    })?;
    let model = Model::new(ck.arch, ck.params, &ck.cfg)?;
    let ev = evaluate(&model, &exp.test_set()?, &[1, 2, 5, 8], false, 0)?;
    let med = |rows: &[ptd_core::metrics::MetricPair]| median(&rows.iter().map(|m| m.psnr).collect::<Vec<_>>());
    println!("fbp median {:.3} mean {:.3}", med(&ev.fbp), Evaluation::mean_psnr(&ev.fbp));
    println!("init median {:.3} mean {:.3}", med(&ev.init), Evaluation::mean_psnr(&ev.init));
    for (n, rows) in &ev.ptd {
        println!("ptd-{} median {:.3} mean {:.3} ssim {:.4}", n, med(rows), Evaluation::mean_psnr(rows), Evaluation::mean_ssim(rows));
    }
    Ok(())
}
