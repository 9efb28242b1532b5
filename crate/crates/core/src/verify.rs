//! Property suites with measured values and tolerances: projector adjoint,
//! schedule identities, bridge moments, oracle sampling, gradients, noise
//! moments and FBP view-count ordering.

use std::fmt;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::dsb::{self, DiffusionSchedule};
use crate::error::{PtdError, Result};
use crate::fanbeam::{back_project, fbp, forward_project, FanBeamGeometry, Sinogram};
use crate::image::Image;
use crate::metrics::psnr;
use crate::networks::{init_params, ArchConfig, ParamStore};
use crate::noise::{bin_rng, noisy_counts, NoiseParams};
use crate::phantoms::shepp_logan;
use crate::tensor::{Padding, Tensor};
use crate::training::{loss_and_grads, make_dataset, BatchDraw, Sample, SimConfig, Split, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), measured, tolerance, passed: measured <= tolerance }
    }

    /// Passes when `measured < bound`.
    pub fn below(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self { name: name.into(), measured, tolerance: bound, passed: measured < bound }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&Check> {
        self.checks
            .iter()
            .max_by(|a, b| (a.measured / a.tolerance).total_cmp(&(b.measured / b.tolerance)))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {} {}: measured {:.3e} tolerance {:.3e}",
                if c.passed { "PASS" } else { "FAIL" },
                self.suite,
                c.name,
                c.measured,
                c.tolerance
            )?;
        }
        Ok(())
    }
}

pub const SUITES: [&str; 7] = ["adjoint", "schedule", "moments", "oracle", "gradient", "noise", "fbp"];

pub fn run_suite(name: &str) -> Result<SuiteReport> {
    match name {
        "adjoint" => adjoint_suite(20, 64, 60, 0),
        "schedule" => schedule_suite(),
        "moments" => moments_suite(16, 10_000, 20_000, 0),
        "oracle" => oracle_suite(),
        "gradient" => gradient_suite(0),
        "noise" => noise_suite(200_000, 0),
        "fbp" => fbp_views_suite(128),
        _ => Err(PtdError::Config(format!("unknown suite {:?} (expected one of {:?} or all)", name, SUITES))),
    }
}

fn gaussian_image<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Image {
    Image::from_fn(h, w, |_, _| StandardNormal.sample(rng))
}

/// `|<Ax, y> - <x, A^T y>| / (|Ax| |y|)` over random pairs.
pub fn adjoint_suite(pairs: usize, n: usize, views: usize, seed: u64) -> Result<SuiteReport> {
    let geom = FanBeamGeometry::desk_scale(n, views);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x = gaussian_image(n, n, &mut rng);
        let y = Sinogram::from_vec(
            geom.n_views(),
            geom.n_det,
            (0..geom.n_views() * geom.n_det).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )?;
        let ax = forward_project(&x, &geom)?;
        let aty = back_project(&y, &geom)?;
        let rel = (ax.dot(&y)? - x.dot(&aty)?).abs() / (ax.norm() * y.norm());
        worst = worst.max(rel);
    }
    Ok(SuiteReport {
        suite: "adjoint",
        checks: vec![Check::at_most(format!("max relative gap over {} pairs", pairs), worst, 1e-10)],
    })
}

pub fn schedule_suite() -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for n in [1usize, 2, 5, 8, 10, 50] {
        for bm in [0.1, 0.3, 1.0] {
            let s = DiffusionSchedule::build(n, bm)?;
            let total = s.total_variance();
            let constant = (0..=n)
                .map(|i| (s.sigma2[i] + s.sigma_bar2[i] - total).abs())
                .fold(0.0, f64::max);
            let telescope = (s.alpha2.iter().sum::<f64>() - s.sigma2[n]).abs();
            checks.push(Check::at_most(format!("n={} beta_max={} sigma2+sigma_bar2 constant", n, bm), constant, 1e-12));
            checks.push(Check::at_most(format!("n={} beta_max={} alpha2 telescopes", n, bm), telescope, 1e-12));
        }
    }
    Ok(SuiteReport { suite: "schedule", checks })
}

/// Pixel-pooled z-scores of the empirical mean and variance of `draw`
/// against the analytic `mean` image and scalar `var`.
fn pooled_moment_z(
    mean: &Image,
    var: f64,
    draws: usize,
    mut draw: impl FnMut() -> Result<Image>,
) -> Result<(f64, f64)> {
    let p = mean.len() as f64;
    let n = draws as f64;
    let mut sum = vec![0.0; mean.len()];
    let mut sum_sq = vec![0.0; mean.len()];
    for _ in 0..draws {
        let x = draw()?;
        for i in 0..mean.len() {
            let d = x.data()[i] - mean.data()[i];
            sum[i] += d;
            sum_sq[i] += d * d;
        }
    }
    if var == 0.0 {
        let spread = sum_sq.iter().sum::<f64>();
        let z = if spread == 0.0 { 0.0 } else { f64::INFINITY };
        return Ok((z, z));
    }
    let mean_dev = sum.iter().sum::<f64>() / (n * p);
    let mean_z = mean_dev.abs() / (var / (n * p)).sqrt();
    let pooled_var = (0..mean.len())
        .map(|i| (sum_sq[i] - sum[i] * sum[i] / n) / (n - 1.0))
        .sum::<f64>()
        / p;
    let var_z = (pooled_var - var).abs() / (var * (2.0 / ((n - 1.0) * p)).sqrt());
    Ok((mean_z, var_z))
}

fn smooth_pair(n: usize) -> (Image, Image) {
    let x0 = Image::from_fn(n, n, |r, c| 0.5 + 0.3 * ((r as f64 * 0.4).sin() * (c as f64 * 0.3).cos()));
    let x1 = Image::from_fn(n, n, |r, c| x0.get(r, c) + 0.2 * (((r + 2 * c) % 5) as f64 - 2.0) / 2.0);
    (x0, x1)
}

/// Bridge marginal and one-step posterior moments (pooled, 3 SE), and the
/// composition of the two (per-pixel max z <= 4).
pub fn moments_suite(n: usize, draws: usize, composition_draws: usize, seed: u64) -> Result<SuiteReport> {
    let sched = DiffusionSchedule::build(10, 0.3)?;
    let (x0, x1) = smooth_pair(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for t in 1..=sched.n_steps {
        let (c0, c1, var) = sched.marginal_coefficients(t);
        let mean = x0.zip_map(&x1, |a, b| c0 * a + c1 * b)?;
        let (mz, vz) = pooled_moment_z(&mean, var, draws, || dsb::q_sample(&x0, &x1, t, &sched, &mut rng))?;
        checks.push(Check::at_most(format!("marginal t_{} mean z", t), mz, 3.0));
        checks.push(Check::at_most(format!("marginal t_{} variance z", t), vz, 3.0));
    }
    for step in 0..sched.n_steps {
        let (a, b, var) = dsb::posterior_coefficients(sched.alpha2[step], sched.sigma2[step]);
        let mean = x0.zip_map(&x1, |h, x| a * h + b * x)?;
        let (mz, vz) = pooled_moment_z(&mean, var, draws, || {
            dsb::posterior_sample(&x0, &x1, step, &sched, &mut rng, true)
        })?;
        checks.push(Check::at_most(format!("posterior n={} mean z", step), mz, 3.0));
        checks.push(Check::at_most(format!("posterior n={} variance z", step), vz, 3.0));
    }
    for step in 1..sched.n_steps {
        let rep = dsb::verify_composition(&sched, step, &x0, &x1, composition_draws, &mut rng)?;
        checks.push(Check::at_most(format!("composition n={} max pixel z", step), rep.max_deviation(), 4.0));
    }
    Ok(SuiteReport { suite: "moments", checks })
}

/// Sampling with the analytic noise returns `x0` to machine precision.
pub fn oracle_suite() -> Result<SuiteReport> {
    let trained = DiffusionSchedule::build(10, 0.3)?;
    let (x0, x1) = smooth_pair(16);
    let mut checks = Vec::new();
    for steps in [1usize, 2, 5, 8, 10] {
        let oracle = |x: &Image, time: dsb::StepTime, target: &Image| x.zip_map(target, |a, b| (a - b) / time.sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(steps as u64);
        let out = dsb::sample_loop(oracle, &x1, &x0, steps, &trained, &mut rng, true)?;
        checks.push(Check::at_most(format!("{} steps max |x_out - x0|", steps), out.max_abs_diff(&x0)?, 1e-12));
    }
    Ok(SuiteReport { suite: "oracle", checks })
}

/// Norm-wise relative error `|g_ad - g_fd| / |g_fd|` of a scalar function
/// of several tensors.
pub fn finite_difference_error(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let ad = grads.get_or_zeros(&tape, *v);
        let mut fd = vec![0.0; inputs[k].len()];
        let mut ins = inputs.to_vec();
        #[allow(clippy::needless_range_loop)]
        for i in 0..fd.len() {
            let orig = ins[k].data()[i];
            ins[k].data_mut()[i] = orig + h;
            let up = eval(&ins)?;
            ins[k].data_mut()[i] = orig - h;
            let down = eval(&ins)?;
            ins[k].data_mut()[i] = orig;
            fd[i] = (up - down) / (2.0 * h);
        }
        let diff: f64 = ad.data().iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(if scale == 0.0 { diff } else { diff / scale });
    }
    Ok(worst)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero so the finite difference never straddles
/// the relu kink.
fn kink_free_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    random_tensor(shape, rng).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn primitive_checks(seed: u64, h: f64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-4;
    let mut checks = Vec::new();
    let mut push = |name: &str, err: f64| checks.push(Check::at_most(format!("{} rel error", name), err, tol));

    let target = |tape: &mut Tape, like: Var, seed: u64| -> Var {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.value(like).shape().to_vec();
        tape.constant(random_tensor(&shape, &mut r))
    };

    for (pad, label) in [(Padding::Same, "conv2d same"), (Padding::Valid, "conv2d valid")] {
        let ins = [
            random_tensor(&[2, 3, 6, 5], &mut rng),
            random_tensor(&[4, 3, 3, 3], &mut rng),
            random_tensor(&[4], &mut rng),
        ];
        let err = finite_difference_error(&ins, h, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), pad)?;
            let tg = target(t, y, 1);
            t.mse(y, tg)
        })?;
        push(label, err);
    }
    let err = finite_difference_error(&[kink_free_tensor(&[2, 3, 4, 4], &mut rng)], h, |t, v| {
        let y = t.leaky_relu(v[0], 0.2);
        let tg = target(t, y, 2);
        t.mse(y, tg)
    })?;
    push("leaky_relu", err);
    let err = finite_difference_error(&[random_tensor(&[2, 2, 4, 6], &mut rng)], h, |t, v| {
        let y = t.avg_pool2(v[0])?;
        let tg = target(t, y, 3);
        t.mse(y, tg)
    })?;
    push("avg_pool2", err);
    let err = finite_difference_error(&[random_tensor(&[1, 2, 3, 2], &mut rng)], h, |t, v| {
        let y = t.upsample2(v[0])?;
        let tg = target(t, y, 4);
        t.mse(y, tg)
    })?;
    push("upsample_nearest2", err);
    let ins = [random_tensor(&[2, 1, 3, 3], &mut rng), random_tensor(&[2, 2, 3, 3], &mut rng)];
    let err = finite_difference_error(&ins, h, |t, v| {
        let y = t.concat(v[0], v[1])?;
        let tg = target(t, y, 5);
        t.mse(y, tg)
    })?;
    push("concat", err);
    let ins = [random_tensor(&[2, 2, 3, 3], &mut rng), random_tensor(&[2, 2, 3, 3], &mut rng)];
    let err = finite_difference_error(&ins, h, |t, v| {
        let y = t.add(v[0], v[1])?;
        let s = t.scale(y, -1.7);
        let tg = target(t, s, 6);
        t.mse(s, tg)
    })?;
    push("add and scale", err);
    let ins = [random_tensor(&[2, 3, 3, 3], &mut rng), random_tensor(&[2, 3, 1, 1], &mut rng)];
    let err = finite_difference_error(&ins, h, |t, v| {
        let y = t.add_channel_bias(v[0], v[1])?;
        let tg = target(t, y, 7);
        t.mse(y, tg)
    })?;
    push("add_channel_bias", err);
    let ins = [random_tensor(&[3, 4], &mut rng), random_tensor(&[3, 4], &mut rng)];
    let err = finite_difference_error(&ins, h, |t, v| t.mse(v[0], v[1]))?;
    push("mse", err);
    Ok(checks)
}

/// Finite-difference checks of the full three-loss objective at 16x16:
/// the largest-gradient entry of every parameter tensor, plus one random
/// direction through all parameters at once.
pub fn composite_checks(seed: u64, h: f64) -> Result<Vec<Check>> {
    let arch = ArchConfig::default();
    let cfg = TrainConfig { image_n: 16, n_views: 16, batch: 2, seed, ..TrainConfig::default() };
    let sim = SimConfig { image_n: 16, n_views: 16, seed, ..SimConfig::default() };
    let data = make_dataset(2, &sim, Split::Train)?;
    let batch: Vec<&Sample> = data.iter().collect();
    let sched = cfg.schedule()?;
    let params = init_params(&arch, seed);
    let endpoints: Vec<Image> = batch.iter().map(|s| s.x_fbp.clone()).collect();
    let draw = BatchDraw::sample(&batch, &endpoints, &sched, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (_, grads) = loss_and_grads(&params, &arch, &cfg, &sched, &batch, &draw)?;
    let loss_at = |p: &ParamStore| -> Result<f64> { Ok(loss_and_grads(p, &arch, &cfg, &sched, &batch, &draw)?.0.total) };

    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut probe = params.clone();
    for (name, g) in &grads {
        let (idx, ad) = g
            .data()
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("non-empty gradient");
        if ad == 0.0 {
            continue;
        }
        let orig = params.get(name).expect("param").data()[idx];
        probe.get_mut(name).expect("param").data_mut()[idx] = orig + h;
        let up = loss_at(&probe)?;
        probe.get_mut(name).expect("param").data_mut()[idx] = orig - h;
        let down = loss_at(&probe)?;
        probe.get_mut(name).expect("param").data_mut()[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs());
        if rel > worst {
            worst = rel;
            worst_name = name.clone();
        }
    }
    let mut checks = vec![Check::at_most(
        format!("composite per-tensor max entry ({} tensors, worst {})", grads.len(), worst_name),
        worst,
        1e-4,
    )];

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
    let mut dir = ParamStore::new();
    let mut norm2 = 0.0;
    for (name, t) in params.iter() {
        let d = random_tensor(t.shape(), &mut rng);
        norm2 += d.data().iter().map(|v| v * v).sum::<f64>();
        dir.insert(name.clone(), d)?;
    }
    let inv = 1.0 / norm2.sqrt();
    let shifted = |sign: f64| -> ParamStore {
        let mut p = params.clone();
        for (name, t) in p.iter_mut() {
            let d = dir.get(name).expect("direction");
            for (v, dv) in t.data_mut().iter_mut().zip(d.data()) {
                *v += sign * h * inv * dv;
            }
        }
        p
    };
    let fd = (loss_at(&shifted(1.0))? - loss_at(&shifted(-1.0))?) / (2.0 * h);
    let ad: f64 = grads
        .iter()
        .map(|(name, g)| inv * g.data().iter().zip(dir.get(name).expect("direction").data()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    checks.push(Check::at_most(
        "composite random direction rel error",
        (ad - fd).abs() / ad.abs().max(fd.abs()),
        1e-4,
    ));
    Ok(checks)
}

pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    let mut checks = primitive_checks(seed, 1e-5)?;
    checks.extend(composite_checks(seed, 1e-5)?);
    Ok(SuiteReport { suite: "gradient", checks })
}

/// Mean and variance of raw counts for a zero line integral.
pub fn noise_suite(draws: usize, seed: u64) -> Result<SuiteReport> {
    let params = NoiseParams { seed, ..NoiseParams::default() };
    let counts = (0..draws as u64)
        .map(|bin| noisy_counts(0.0, &params, &mut bin_rng(seed, bin)))
        .collect::<Result<Vec<f64>>>()?;
    let n = draws as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let m2 = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = counts.iter().map(|c| (c - mean).powi(4)).sum::<f64>() / n;
    let expected_mean = params.i0;
    let expected_var = params.i0 + params.sigma_e2;
    let se_mean = (m2 / n).sqrt();
    let se_var = ((m4 - m2 * m2) / n).sqrt();
    Ok(SuiteReport {
        suite: "noise",
        checks: vec![
            Check::at_most("E[I] deviation in standard errors", (mean - expected_mean).abs() / se_mean, 3.0),
            Check::at_most("Var[I] deviation in standard errors", (m2 - expected_var).abs() / se_var, 3.0),
        ],
    })
}

/// PSNR of noisy FBP on the Shepp-Logan phantom at several view counts.
pub fn fbp_psnr_by_views(n: usize, views: &[usize], seed: u64) -> Result<Vec<f64>> {
    let sim = SimConfig { image_n: n, ..SimConfig::default() };
    let base = FanBeamGeometry::desk_scale(n, 1);
    let x0 = shepp_logan(&base.grid);
    views
        .iter()
        .map(|&v| {
            let geom = base.with_views(v);
            let y = crate::training::simulate_measurement(&x0, &geom, &sim, seed)?;
            psnr(&x0, &fbp(&y, &geom)?)
        })
        .collect()
}

pub fn fbp_views_suite(n: usize) -> Result<SuiteReport> {
    let p = fbp_psnr_by_views(n, &[360, 64, 32], 0)?;
    let checks = vec![
        Check::below("PSNR(64) - PSNR(360)", p[1] - p[0], 0.0),
        Check::below("PSNR(32) - PSNR(64)", p[2] - p[1], 0.0),
    ];
    Ok(SuiteReport { suite: "fbp", checks })
}
