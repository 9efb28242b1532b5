use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ptd_core::checkpoint::Checkpoint;
use ptd_core::error::file_err;
use ptd_core::fanbeam::FanBeamGeometry;
use ptd_core::formats::{read_image, read_sinogram, write_image, write_pgm, write_sinogram};
use ptd_core::metrics::MetricPair;
use ptd_core::networks::{ArchConfig, Variant};
use ptd_core::optim::AdamState;
use ptd_core::training::{
    initial_params, make_sample, reconstruct, sample_seed, train, BridgeEndpoint, Model, SimConfig, Split,
    TrainConfig,
};
use ptd_core::verify::{run_suite, SUITES};
use ptd_core::{PtdError, Result};

use crate::config::RunConfig;
use crate::dataset::{manifest_text, sample_name, Manifest, MANIFEST};

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    ChecksFailed,
}

fn echo(cfg: &RunConfig) {
    println!("# effective config");
    print!("{}", cfg);
    println!("# end config");
}

fn config_err(msg: impl Into<String>) -> PtdError {
    PtdError::Config(msg.into())
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(file_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(PtdError::InvalidArgument(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(file_err(dir))
}

fn split_of(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(config_err(format!("split: expected train or test, got {:?}", other))),
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<Outcome> {
    echo(cfg);
    let out = PathBuf::from(cfg.required("out")?);
    let n: usize = cfg.parse("n")?;
    if n == 0 {
        return Err(config_err("n must be at least 1"));
    }
    let sim = SimConfig {
        image_n: cfg.parse("image_n")?,
        n_views: cfg.parse("views")?,
        mu_per_mm: cfg.parse("mu_per_mm")?,
        i0: cfg.parse("i0")?,
        sigma_e2: cfg.parse("sigma_e2")?,
        ellipses: cfg.pair("ellipses")?,
        supersample: cfg.parse("supersample")?,
        seed: cfg.parse("seed")?,
    };
    sim.validate()?;
    let split = split_of(cfg.get("split"))?;
    prepare_out_dir(&out, cfg.flag("force")?)?;
    let geom = sim.geometry();
    for i in 0..n {
        let s = make_sample(&sim, &geom, sample_seed(sim.seed, split, i))?;
        write_image(&out.join(sample_name("x0", i, "imgf")), &s.x0)?;
        write_sinogram(&out.join(sample_name("y", i, "sinf")), &s.y)?;
        write_image(&out.join(sample_name("fbp", i, "imgf")), &s.x_fbp)?;
    }
    let manifest = out.join(MANIFEST);
    fs::write(&manifest, manifest_text(cfg, &geom, n)).map_err(file_err(&manifest))?;
    println!("wrote {} samples ({} views, {}x{}) to {}", n, geom.n_views(), sim.image_n, sim.image_n, out.display());
    Ok(Outcome::Ok)
}

fn train_config(cfg: &RunConfig, geom: &FanBeamGeometry) -> Result<(TrainConfig, ArchConfig)> {
    let weights: Vec<f64> = cfg
        .get("loss_weights")
        .split(',')
        .map(|w| w.trim().parse().map_err(|_| config_err(format!("loss_weights: bad value {:?}", w))))
        .collect::<Result<_>>()?;
    let loss_weights: [f64; 3] =
        weights.try_into().map_err(|_| config_err("loss_weights: expected three comma-separated values"))?;
    let train = TrainConfig {
        lr: cfg.parse("lr")?,
        iters: cfg.parse("iters")?,
        batch: cfg.parse("batch")?,
        n_views: geom.n_views(),
        n_train_steps: cfg.parse("n_train_steps")?,
        beta_max: cfg.parse("beta_max")?,
        seed: cfg.parse("seed")?,
        image_n: geom.grid.n,
        variant: Variant::parse(cfg.get("variant"))?,
        endpoint: BridgeEndpoint::parse(cfg.get("endpoint"))?,
        loss_weights,
    };
    train.validate()?;
    let mut arch = ArchConfig::default();
    for (k, v) in cfg.iter() {
        if let Some(ak) = k.strip_prefix("arch.") {
            arch.set(ak, v)?;
        }
    }
    arch.validate()?;
    Ok((train, arch))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<Outcome> {
    echo(cfg);
    let manifest = Manifest::load(Path::new(cfg.required("data")?))?;
    let out = PathBuf::from(cfg.required("out")?);
    let log_path = match cfg.get("log") {
        "" => PathBuf::from(format!("{}.loss.csv", out.display())),
        p => PathBuf::from(p),
    };
    let save_every: usize = cfg.parse("save_every")?;
    let (train_cfg, arch) = train_config(cfg, &manifest.geometry)?;
    let samples = manifest.load_all()?;

    let (mut params, mut opt, resumed) = match cfg.get("resume") {
        "" => {
            let p = initial_params(&arch, &train_cfg);
            let o = AdamState::new(&p);
            (p, o, false)
        }
        path => {
            let ck = Checkpoint::load(Path::new(path))?;
            if ck.arch != arch {
                return Err(PtdError::InvalidArgument("resume checkpoint has a different architecture".into()));
            }
            (ck.params, ck.opt, true)
        }
    };
    println!(
        "training {} parameters on {} samples from iteration {} to {}",
        params.scalar_count(),
        samples.len(),
        opt.step,
        train_cfg.iters
    );

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resumed)
        .write(true)
        .truncate(!resumed)
        .open(&log_path)
        .map_err(file_err(&log_path))?;
    if !resumed || log.metadata().map_err(file_err(&log_path))?.len() == 0 {
        writeln!(log, "iter,l_content,l_guidance,l_diff,l_total").map_err(file_err(&log_path))?;
    }
    let report_every = (train_cfg.iters / 20).max(1);
    train(&samples, &mut params, &mut opt, &arch, &train_cfg, |iter, loss, p, o| {
        writeln!(log, "{},{:.8e},{:.8e},{:.8e},{:.8e}", iter, loss.content, loss.guidance, loss.diff, loss.total)
            .map_err(file_err(&log_path))?;
        let it = iter as usize;
        if it.is_multiple_of(report_every) || it == train_cfg.iters {
            println!("iter {} l_total {:.6}", iter, loss.total);
        }
        if save_every > 0 && it.is_multiple_of(save_every) && it != train_cfg.iters {
            Checkpoint { params: p.clone(), opt: o.clone(), cfg: train_cfg.clone(), arch: arch.clone() }.save(&out)?;
        }
        Ok(())
    })?;
    Checkpoint { params, opt, cfg: train_cfg, arch }.save(&out)?;
    println!("saved {}", out.display());
    Ok(Outcome::Ok)
}

/// Inputs of a reconstruction run: sinogram paths and the geometry they use.
fn reconstruct_inputs(cfg: &RunConfig, ck: &Checkpoint) -> Result<(Vec<PathBuf>, FanBeamGeometry)> {
    let (data, sino) = (cfg.get("data"), cfg.get("sino"));
    let (paths, geom) = match (data.is_empty(), sino.is_empty()) {
        (false, true) => {
            let m = Manifest::load(Path::new(data))?;
            ((0..m.count).map(|i| m.path("y", i, "sinf")).collect(), m.geometry)
        }
        (true, false) => {
            (vec![PathBuf::from(sino)], FanBeamGeometry::desk_scale(ck.cfg.image_n, ck.cfg.n_views))
        }
        _ => return Err(config_err("give exactly one of data or sino")),
    };
    if geom.grid.n != ck.cfg.image_n || geom.n_views() != ck.cfg.n_views {
        return Err(PtdError::InvalidArgument(format!(
            "checkpoint expects {}x{} images from {} views, inputs have {}x{} from {}",
            ck.cfg.image_n,
            ck.cfg.image_n,
            ck.cfg.n_views,
            geom.grid.n,
            geom.grid.n,
            geom.n_views()
        )));
    }
    let limit: usize = cfg.parse("limit")?;
    let paths = if limit > 0 { paths.into_iter().take(limit).collect() } else { paths };
    Ok((paths, geom))
}

pub fn reconstruct_cmd(cfg: &RunConfig) -> Result<Outcome> {
    echo(cfg);
    let ck = Checkpoint::load(Path::new(cfg.required("checkpoint")?))?;
    let out = PathBuf::from(cfg.required("out")?);
    let steps: usize = cfg.parse("steps")?;
    let seed: u64 = cfg.parse("seed")?;
    let stochastic = !cfg.flag("deterministic")?;
    let pgm = cfg.flag("pgm")?;
    let window: (f64, f64) = cfg.pair("window")?;
    let (inputs, geom) = reconstruct_inputs(cfg, &ck)?;
    let model = Model::new(ck.arch.clone(), ck.params.clone(), &ck.cfg)?;
    fs::create_dir_all(&out).map_err(file_err(&out))?;
    for (i, path) in inputs.iter().enumerate() {
        let y = read_sinogram(path)?;
        if (y.n_views, y.n_det) != (geom.n_views(), geom.n_det) {
            return Err(PtdError::InvalidArgument(format!(
                "{}: sinogram is {}x{}, geometry expects {}x{}",
                path.display(),
                y.n_views,
                y.n_det,
                geom.n_views(),
                geom.n_det
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let rec = reconstruct(&model, &y, &geom, steps, &mut rng, stochastic)?;
        for (prefix, img) in [("fbp", &rec.x_fbp), ("init", &rec.x_init), ("out", &rec.x_out)] {
            write_image(&out.join(sample_name(prefix, i, "imgf")), img)?;
            if pgm {
                write_pgm(&out.join(sample_name(prefix, i, "pgm")), img, window)?;
            }
        }
    }
    println!("reconstructed {} inputs with {} step(s) into {}", inputs.len(), steps, out.display());
    Ok(Outcome::Ok)
}

fn list_indexed(dir: &Path, prefix: &str) -> Result<usize> {
    let mut count = 0;
    while dir.join(sample_name(prefix, count, "imgf")).exists() {
        count += 1;
    }
    Ok(count)
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() { "inf".to_string() } else { format!("{:.6}", v) }
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<Outcome> {
    echo(cfg);
    let truth_dir = PathBuf::from(cfg.required("truth")?);
    let recon_dir = PathBuf::from(cfg.required("recon")?);
    let methods: Vec<&str> = cfg.required("methods")?.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    let n_truth = list_indexed(&truth_dir, "x0")?;
    if n_truth == 0 {
        return Err(PtdError::InvalidArgument(format!("no x0_NNNN.imgf images in {}", truth_dir.display())));
    }
    let truths = (0..n_truth).map(|i| read_image(&truth_dir.join(sample_name("x0", i, "imgf")))).collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("method,index,psnr,ssim\n");
    println!("n_images={}", n_truth);
    for method in &methods {
        let n = list_indexed(&recon_dir, method)?;
        if n != n_truth {
            return Err(PtdError::InvalidArgument(format!(
                "{} has {} {}_NNNN.imgf images but {} has {} ground-truth images",
                recon_dir.display(),
                n,
                method,
                truth_dir.display(),
                n_truth
            )));
        }
        let mut rows = Vec::with_capacity(n);
        for (i, truth) in truths.iter().enumerate() {
            let img = read_image(&recon_dir.join(sample_name(method, i, "imgf")))?;
            let m = MetricPair::compute(truth, &img)?;
            println!("{}.{:04}.psnr={}", method, i, fmt_metric(m.psnr));
            println!("{}.{:04}.ssim={}", method, i, fmt_metric(m.ssim));
            csv.push_str(&format!("{},{},{},{}\n", method, i, fmt_metric(m.psnr), fmt_metric(m.ssim)));
            rows.push(m);
        }
        let mean_psnr = rows.iter().map(|m| m.psnr).sum::<f64>() / n as f64;
        let mean_ssim = rows.iter().map(|m| m.ssim).sum::<f64>() / n as f64;
        println!("{}.psnr={}", method, fmt_metric(mean_psnr));
        println!("{}.ssim={}", method, fmt_metric(mean_ssim));
        csv.push_str(&format!("{},mean,{},{}\n", method, fmt_metric(mean_psnr), fmt_metric(mean_ssim)));
    }
    if !cfg.get("csv").is_empty() {
        let path = PathBuf::from(cfg.get("csv"));
        fs::write(&path, csv).map_err(file_err(&path))?;
    }
    Ok(Outcome::Ok)
}

pub fn verify_cmd(cfg: &RunConfig) -> Result<Outcome> {
    echo(cfg);
    let which = cfg.get("suite");
    let names: Vec<&str> = if which == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&which) {
        vec![which]
    } else {
        return Err(config_err(format!("unknown suite {:?} (known: all, {})", which, SUITES.join(", "))));
    };
    let mut all_passed = true;
    for name in names {
        let report = run_suite(name)?;
        print!("{}", report);
        all_passed &= report.passed();
    }
    println!("{}", if all_passed { "verify: PASS" } else { "verify: FAIL" });
    Ok(if all_passed { Outcome::Ok } else { Outcome::ChecksFailed })
}
