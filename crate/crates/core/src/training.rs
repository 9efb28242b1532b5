//! Synthetic data, the three training losses, joint optimization and
//! full inference.
//!
//! Sinograms handed around here hold line integrals in image units times
//! millimetres, i.e. the output of [`forward_project`] on a normalized image.
//! The noise model needs physical attenuation, so the simulation multiplies
//! by `mu_per_mm` before adding noise and divides afterwards.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dsb::{self, DiffusionSchedule, StepTime};
use crate::error::{shape_err, PtdError, Result};
use crate::fanbeam::{fbp, forward_project, FanBeamGeometry, Sinogram};
use crate::image::{stack, Image};
use crate::networks::{
    denoiser, denoiser_forward, init_params, mhfg, mhfg_forward, ptd_rec, ptd_rec_forward, ArchConfig, Condition,
    ConditionBundle, ParamStore, ParamVars, Variant,
};
use crate::noise::{apply_noise, NoiseParams};
use crate::optim::{AdamConfig, AdamState};
use crate::phantoms::{random_phantom, rasterize};
use crate::tensor::{avg_pool2, Tensor};

/// Attenuation per millimetre of one normalized image unit; 0.5 is water.
pub const DEFAULT_MU_PER_MM: f64 = 0.04;

/// Which image the reverse chain starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BridgeEndpoint {
    Fbp,
    Init,
}

impl BridgeEndpoint {
    pub fn name(&self) -> &'static str {
        match self {
            BridgeEndpoint::Fbp => "fbp",
            BridgeEndpoint::Init => "init",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fbp" => Ok(BridgeEndpoint::Fbp),
            "init" => Ok(BridgeEndpoint::Init),
            _ => Err(PtdError::Config(format!("unknown endpoint {:?} (expected fbp or init)", s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub n_views: usize,
    pub n_train_steps: usize,
    pub beta_max: f64,
    pub seed: u64,
    pub image_n: usize,
    pub variant: Variant,
    pub endpoint: BridgeEndpoint,
    /// Weights on the content, guidance and diffusion losses.
    pub loss_weights: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            iters: 5000,
            batch: 4,
            n_views: 32,
            n_train_steps: 10,
            beta_max: 0.3,
            seed: 0,
            image_n: 64,
            variant: Variant::FULL,
            endpoint: BridgeEndpoint::Fbp,
            loss_weights: [1.0, 1.0, 1.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PtdError::Config(msg));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if self.iters == 0 || self.batch == 0 || self.n_views == 0 || self.n_train_steps == 0 {
            return bad("iters, batch, n_views and n_train_steps must be at least 1".into());
        }
        if !(self.beta_max > 0.0) {
            return bad(format!("beta_max must be positive, got {}", self.beta_max));
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad(format!("loss weights must be non-negative, got {:?}", self.loss_weights));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::build(self.n_train_steps, self.beta_max)
    }

    /// Flat key=value form, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let w = self.loss_weights;
        [
            ("lr", self.lr.to_string()),
            ("iters", self.iters.to_string()),
            ("batch", self.batch.to_string()),
            ("n_views", self.n_views.to_string()),
            ("n_train_steps", self.n_train_steps.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("seed", self.seed.to_string()),
            ("image_n", self.image_n.to_string()),
            ("variant", self.variant.name().to_string()),
            ("endpoint", self.endpoint.name().to_string()),
            ("loss_weights", format!("{},{},{}", w[0], w[1], w[2])),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one field from its string form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| PtdError::Config(format!("{}: cannot parse {:?}", key, v)))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "iters" => self.iters = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "n_views" => self.n_views = num(key, value)?,
            "n_train_steps" => self.n_train_steps = num(key, value)?,
            "beta_max" => self.beta_max = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "image_n" => self.image_n = num(key, value)?,
            "variant" => self.variant = Variant::parse(value.trim())?,
            "endpoint" => self.endpoint = BridgeEndpoint::parse(value.trim())?,
            "loss_weights" => {
                let parts: Vec<f64> = value.split(',').map(|p| num(key, p)).collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(PtdError::Config(format!("loss_weights needs 3 values, got {:?}", value)));
                }
                self.loss_weights = [parts[0], parts[1], parts[2]];
            }
            _ => return Err(PtdError::Config(format!("unknown training key {:?}", key))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Phantom simulation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub image_n: usize,
    pub n_views: usize,
    pub mu_per_mm: f64,
    pub i0: f64,
    pub sigma_e2: f64,
    pub ellipses: (usize, usize),
    pub supersample: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            image_n: 64,
            n_views: 32,
            mu_per_mm: DEFAULT_MU_PER_MM,
            i0: 1e6,
            sigma_e2: 10.0,
            ellipses: (3, 8),
            supersample: 2,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_n == 0 || self.n_views == 0 || self.supersample == 0 {
            return Err(PtdError::Config("image_n, n_views and supersample must be at least 1".into()));
        }
        if !(self.mu_per_mm > 0.0) {
            return Err(PtdError::Config(format!("mu_per_mm must be positive, got {}", self.mu_per_mm)));
        }
        let (lo, hi) = self.ellipses;
        if lo == 0 || hi < lo {
            return Err(PtdError::Config(format!("invalid ellipse range {}..{}", lo, hi)));
        }
        NoiseParams { i0: self.i0, sigma_e2: self.sigma_e2, seed: 0 }.validate()
    }

    pub fn geometry(&self) -> FanBeamGeometry {
        FanBeamGeometry::desk_scale(self.image_n, self.n_views)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x0: Image,
    pub y: Sinogram,
    pub x_fbp: Image,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a split; the two splits never share a seed
/// stream.
pub fn sample_seed(base: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x5452_4149_4e00_0000u64,
        Split::Test => 0x5445_5354_0000_0000u64,
    };
    splitmix64(splitmix64(base ^ tag) ^ index as u64)
}

/// Noisy sparse-view measurement of `x0` on `geom`.
pub fn simulate_measurement(x0: &Image, geom: &FanBeamGeometry, sim: &SimConfig, noise_seed: u64) -> Result<Sinogram> {
    let clean = forward_project(x0, geom)?;
    let physical = clean.map(|v| (v * sim.mu_per_mm).max(0.0));
    let noisy = apply_noise(&physical, &NoiseParams { i0: sim.i0, sigma_e2: sim.sigma_e2, seed: noise_seed })?;
    Ok(noisy.map(|v| v / sim.mu_per_mm))
}

pub fn make_sample(sim: &SimConfig, geom: &FanBeamGeometry, seed: u64) -> Result<Sample> {
    let spec = random_phantom(seed, sim.ellipses, geom.grid.object_radius_mm());
    let x0 = rasterize(&spec, &geom.grid, sim.supersample);
    let y = simulate_measurement(&x0, geom, sim, splitmix64(seed))?;
    let x_fbp = fbp(&y, geom)?;
    Ok(Sample { x0, y, x_fbp })
}

pub fn make_dataset(n: usize, sim: &SimConfig, split: Split) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(PtdError::InvalidArgument("dataset needs at least one sample".into()));
    }
    sim.validate()?;
    let geom = sim.geometry();
    (0..n).map(|i| make_sample(sim, &geom, sample_seed(sim.seed, split, i))).collect()
}

pub fn loss_content(x_init: &Image, x0: &Image) -> Result<f64> {
    Ok(x_init.zip_map(x0, |a, b| (a - b) * (a - b))?.mean())
}

/// Sum over scales of the MSE against the pooled ground truth.
pub fn loss_guidance(sr_outputs: &[Image], x0: &Image) -> Result<f64> {
    let mut target = x0.clone();
    let mut total = 0.0;
    for (k, sr) in sr_outputs.iter().enumerate() {
        target = target.downsample2()?;
        if sr.shape() != target.shape() {
            return Err(shape_err(
                "loss_guidance",
                format!("scale {} output {:?}, expected {:?}", k + 1, sr.shape(), target.shape()),
            ));
        }
        total += loss_content(sr, &target)?;
    }
    Ok(total)
}

pub fn loss_diff(eps_pred: &Image, x_t: &Image, x0: &Image, t_index: usize, sched: &DiffusionSchedule) -> Result<f64> {
    let target = dsb::epsilon_target(x_t, x0, t_index, sched)?;
    loss_content(eps_pred, &target)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub content: f64,
    pub guidance: f64,
    pub diff: f64,
    pub total: f64,
}

/// Random quantities of one training step, fixed before the graph is built
/// so that the loss is a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct BatchDraw {
    pub t_indices: Vec<usize>,
    pub x_t: Vec<Image>,
}

impl BatchDraw {
    pub fn sample(
        batch: &[&Sample],
        endpoints: &[Image],
        sched: &DiffusionSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut t_indices = Vec::with_capacity(batch.len());
        let mut x_t = Vec::with_capacity(batch.len());
        for (s, xn) in batch.iter().zip(endpoints) {
            let t = rng.random_range(1..=sched.n_steps);
            x_t.push(dsb::q_sample(&s.x0, xn, t, sched, rng)?);
            t_indices.push(t);
        }
        Ok(Self { t_indices, x_t })
    }
}

/// Loss nodes of one composite graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub content: Option<Var>,
    pub guidance: Option<Var>,
    pub diff: Var,
    pub total: Var,
}

/// Builds the weighted three-loss graph for a batch.
pub fn build_losses(
    tape: &mut Tape,
    p: &ParamVars,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    batch: &[&Sample],
    draw: &BatchDraw,
) -> Result<LossVars> {
    let x0s: Vec<&Image> = batch.iter().map(|s| &s.x0).collect();
    let fbps: Vec<&Image> = batch.iter().map(|s| &s.x_fbp).collect();
    let x0 = stack(&x0s)?;
    let x_fbp = tape.constant(stack(&fbps)?);
    let x0_var = tape.constant(x0.clone());

    let (x_c, content) = if cfg.variant.use_rec {
        let x_init = ptd_rec(tape, p, arch, x_fbp)?;
        let l = tape.mse(x_init, x0_var)?;
        (x_init, Some(l))
    } else {
        (x_fbp, None)
    };

    let guidance_out = if cfg.variant.use_mhfg { Some(mhfg(tape, p, arch, x_c)?) } else { None };
    let guidance = match &guidance_out {
        Some(out) => {
            let mut target = x0.clone();
            let mut sum: Option<Var> = None;
            for &sr in &out.sr {
                target = avg_pool2(&target)?;
                let t = tape.constant(target.clone());
                let l = tape.mse(sr, t)?;
                sum = Some(match sum {
                    Some(s) => tape.add(s, l)?,
                    None => l,
                });
            }
            sum
        }
        None => None,
    };

    let xt_refs: Vec<&Image> = draw.x_t.iter().collect();
    let x_t = tape.constant(stack(&xt_refs)?);
    let sigmas: Vec<f64> = draw.t_indices.iter().map(|&t| sched.sigma(t)).collect();
    let targets = batch
        .iter()
        .zip(&draw.x_t)
        .zip(&draw.t_indices)
        .map(|((s, xt), &t)| dsb::epsilon_target(xt, &s.x0, t, sched))
        .collect::<Result<Vec<_>>>()?;
    let target_refs: Vec<&Image> = targets.iter().collect();
    let target = tape.constant(stack(&target_refs)?);
    let cond = Condition { x_c, features: guidance_out.as_ref().map(|o| o.features.as_slice()) };
    let eps = denoiser(tape, p, arch, x_t, &sigmas, &cond)?;
    let diff = tape.mse(eps, target)?;

    let [wc, wg, wd] = cfg.loss_weights;
    let mut total = tape.scale(diff, wd);
    for (l, w) in [(content, wc), (guidance, wg)] {
        if let Some(l) = l {
            let s = tape.scale(l, w);
            total = tape.add(total, s)?;
        }
    }
    Ok(LossVars { content, guidance, diff, total })
}

fn read_losses(tape: &Tape, l: &LossVars) -> LossReport {
    let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    LossReport {
        content: get(l.content),
        guidance: get(l.guidance),
        diff: tape.value(l.diff).item(),
        total: tape.value(l.total).item(),
    }
}

/// Bridge endpoints for a batch under the configured endpoint choice.
pub fn batch_endpoints(params: &ParamStore, arch: &ArchConfig, cfg: &TrainConfig, batch: &[&Sample]) -> Result<Vec<Image>> {
    batch
        .iter()
        .map(|s| match (cfg.endpoint, cfg.variant.use_rec) {
            (BridgeEndpoint::Init, true) => ptd_rec_forward(params, arch, &s.x_fbp),
            _ => Ok(s.x_fbp.clone()),
        })
        .collect()
}

/// Loss value and gradients of the composite for fixed random draws.
pub fn loss_and_grads(
    params: &ParamStore,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    batch: &[&Sample],
    draw: &BatchDraw,
) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let p = params.register(&mut tape);
    let losses = build_losses(&mut tape, &p, arch, cfg, sched, batch, draw)?;
    let report = read_losses(&tape, &losses);
    if !report.total.is_finite() {
        return Err(PtdError::Numeric(format!("training loss is {:?}", report)));
    }
    let grads = tape.backward(losses.total)?;
    let map = p
        .iter()
        .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
        .collect();
    Ok((report, map))
}

/// One Adam step on the weighted sum of the three losses.
pub fn train_step(
    batch: &[&Sample],
    params: &mut ParamStore,
    opt: &mut AdamState,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(PtdError::InvalidArgument("empty batch".into()));
    }
    let endpoints = batch_endpoints(params, arch, cfg, batch)?;
    let draw = BatchDraw::sample(batch, &endpoints, sched, rng)?;
    let (report, grads) = loss_and_grads(params, arch, cfg, sched, batch, &draw)?;
    opt.update(params, &grads, &cfg.adam())?;
    Ok(report)
}

/// Random stream for one iteration; resuming at any iteration reproduces
/// an uninterrupted run.
pub fn iteration_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x4954_4552));
    rng.set_stream(iter);
    rng
}

/// Deterministic initial parameters for a run.
pub fn initial_params(arch: &ArchConfig, cfg: &TrainConfig) -> ParamStore {
    init_params(arch, splitmix64(cfg.seed ^ 0x494e_4954))
}

/// Runs iterations `opt.step .. cfg.iters`, calling `on_iter` after each.
pub fn train(
    samples: &[Sample],
    params: &mut ParamStore,
    opt: &mut AdamState,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(u64, &LossReport, &ParamStore, &AdamState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(PtdError::InvalidArgument("no training samples".into()));
    }
    params.check_arch(arch)?;
    let sched = cfg.schedule()?;
    while (opt.step as usize) < cfg.iters {
        let iter = opt.step;
        let mut rng = iteration_rng(cfg.seed, iter);
        let batch: Vec<&Sample> = (0..cfg.batch).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
        let report = train_step(&batch, params, opt, arch, cfg, &sched, &mut rng)?;
        on_iter(iter + 1, &report, params, opt)?;
    }
    Ok(())
}

/// Trained networks plus the settings that fix how they are wired.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ParamStore,
    pub variant: Variant,
    pub endpoint: BridgeEndpoint,
    pub schedule: DiffusionSchedule,
}

impl Model {
    pub fn new(arch: ArchConfig, params: ParamStore, cfg: &TrainConfig) -> Result<Self> {
        params.check_arch(&arch)?;
        Ok(Self { arch, params, variant: cfg.variant, endpoint: cfg.endpoint, schedule: cfg.schedule()? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub x_fbp: Image,
    pub x_init: Image,
    pub x_out: Image,
}

/// FBP, coarse prediction, then the reverse bridge from the endpoint.
pub fn reconstruct(
    model: &Model,
    y: &Sinogram,
    geom: &FanBeamGeometry,
    n_sample_steps: usize,
    rng: &mut ChaCha8Rng,
    stochastic: bool,
) -> Result<Reconstruction> {
    let x_fbp = fbp(y, geom)?;
    reconstruct_from_fbp(model, x_fbp, n_sample_steps, rng, stochastic)
}

pub fn reconstruct_from_fbp(
    model: &Model,
    x_fbp: Image,
    n_sample_steps: usize,
    rng: &mut ChaCha8Rng,
    stochastic: bool,
) -> Result<Reconstruction> {
    let x_init = if model.variant.use_rec {
        ptd_rec_forward(&model.params, &model.arch, &x_fbp)?
    } else {
        x_fbp.clone()
    };
    let mhfg_feats = if model.variant.use_mhfg {
        Some(mhfg_forward(&model.params, &model.arch, &x_init)?.1)
    } else {
        None
    };
    let bundle = ConditionBundle { x_c: x_init.clone(), mhfg_feats };
    let x_n = match model.endpoint {
        BridgeEndpoint::Fbp => &x_fbp,
        BridgeEndpoint::Init => &x_init,
    };
    let net = |x: &Image, time: StepTime, b: &ConditionBundle| denoiser_forward(&model.params, &model.arch, x, time.sigma, b);
    let x_out = dsb::sample_loop(net, x_n, &bundle, n_sample_steps, &model.schedule, rng, stochastic)?;
    Ok(Reconstruction { x_fbp, x_init, x_out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            rec_channels: 4,
            mhfg_channels: 3,
            unet_dims: vec![4, 6, 8, 10],
            time_embed_dim: 8,
            time_hidden: 6,
            ..ArchConfig::default()
        }
    }

    fn tiny_sim() -> SimConfig {
        SimConfig { image_n: 16, n_views: 16, ..SimConfig::default() }
    }

    fn img(n: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Image::from_fn(n, n, f)
    }

    #[test]
    fn content_loss_cases() {
        let a = img(8, |r, c| (r * 8 + c) as f64 / 64.0);
        assert_eq!(loss_content(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((loss_content(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(loss_content(&a, &b).unwrap(), loss_content(&b, &a).unwrap());
        assert!(loss_content(&a, &Image::zeros(8, 7)).is_err());
    }

    #[test]
    fn guidance_loss_cases() {
        let x0 = img(32, |r, c| ((r * 3 + c * 5) % 11) as f64 / 11.0);
        let mut exact = Vec::new();
        let mut d = x0.clone();
        for _ in 0..4 {
            d = d.downsample2().unwrap();
            exact.push(d.clone());
        }
        assert_eq!(loss_guidance(&exact, &x0).unwrap(), 0.0);
        let mut off = exact.clone();
        off[2] = off[2].map(|v| v + 0.3);
        assert!((loss_guidance(&off, &x0).unwrap() - 0.09).abs() < 1e-12);
        let all: Vec<Image> = exact.iter().map(|e| e.map(|v| v + 0.1)).collect();
        assert!((loss_guidance(&all, &x0).unwrap() - 4.0 * 0.01).abs() < 1e-12);
        let mut wrong = exact.clone();
        wrong[0] = Image::zeros(8, 8);
        assert!(loss_guidance(&wrong, &x0).is_err());
    }

    #[test]
    fn diff_loss_cases() {
        let sched = DiffusionSchedule::build(10, 0.3).unwrap();
        let x0 = img(8, |r, c| (r as f64 - c as f64) * 0.05);
        let xt = img(8, |r, c| ((r * c) as f64).sin() * 0.2);
        let target = dsb::epsilon_target(&xt, &x0, 4, &sched).unwrap();
        assert_eq!(loss_diff(&target, &xt, &x0, 4, &sched).unwrap(), 0.0);
        let zero = Image::zeros(8, 8);
        let sigma = sched.sigma(4);
        let expected: f64 = xt
            .data()
            .iter()
            .zip(x0.data())
            .map(|(a, b)| ((a - b) / sigma).powi(2))
            .sum::<f64>()
            / 64.0;
        assert!((loss_diff(&zero, &xt, &x0, 4, &sched).unwrap() - expected).abs() < 1e-12 * expected);
        let shifted = loss_diff(&zero, &xt.map(|v| v + 0.7), &x0.map(|v| v + 0.7), 4, &sched).unwrap();
        assert!((shifted - expected).abs() < 1e-9 * expected);
        assert!(loss_diff(&zero, &xt, &x0, 0, &sched).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_split() {
        let sim = tiny_sim();
        let a = make_dataset(2, &sim, Split::Train).unwrap();
        assert_eq!(a, make_dataset(2, &sim, Split::Train).unwrap());
        let t = make_dataset(2, &sim, Split::Test).unwrap();
        assert_ne!(a[0].x0, t[0].x0);
        assert!(make_dataset(0, &sim, Split::Train).is_err());
        for s in &a {
            assert_eq!(s.x_fbp, fbp(&s.y, &sim.geometry()).unwrap());
            assert_eq!(s.y.n_views, 16);
        }
    }

    #[test]
    fn sparse_fbp_loses_to_full_view() {
        let sim = SimConfig { image_n: 32, n_views: 32, ..SimConfig::default() };
        let sparse = make_dataset(3, &sim, Split::Test).unwrap();
        let full_geom = sim.geometry().with_views(360);
        for s in &sparse {
            let y_full = simulate_measurement(&s.x0, &full_geom, &sim, 99).unwrap();
            let full = fbp(&y_full, &full_geom).unwrap();
            let p_sparse = psnr(&s.x0, &s.x_fbp).unwrap();
            assert!(p_sparse.is_finite());
            assert!(p_sparse < psnr(&s.x0, &full).unwrap());
        }
    }

    #[test]
    fn config_pairs_roundtrip() {
        let cfg = TrainConfig {
            lr: 1e-3,
            seed: 9,
            variant: Variant::DIFF_CONTENT,
            endpoint: BridgeEndpoint::Init,
            loss_weights: [1.0, 0.5, 2.0],
            ..Default::default()
        };
        let pairs = cfg.to_pairs();
        let back = TrainConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::from_pairs([("bogus", "1")]).is_err());
        assert!(TrainConfig::from_pairs([("iters", "0")]).is_err());
        let d = TrainConfig::default();
        assert_eq!((d.lr, d.n_train_steps), (5e-4, 10));
    }

    fn tiny_setup() -> (ArchConfig, TrainConfig, Vec<Sample>) {
        let arch = tiny_arch();
        let cfg = TrainConfig { image_n: 16, n_views: 16, batch: 2, iters: 3, lr: 1e-3, ..Default::default() };
        let data = make_dataset(2, &tiny_sim(), Split::Train).unwrap();
        (arch, cfg, data)
    }

    #[test]
    fn all_three_networks_receive_updates() {
        let (arch, cfg, data) = tiny_setup();
        let mut params = initial_params(&arch, &cfg);
        let before = params.clone();
        let mut opt = AdamState::new(&params);
        let sched = cfg.schedule().unwrap();
        let batch: Vec<&Sample> = data.iter().collect();
        let mut rng = iteration_rng(1, 0);
        let rep = train_step(&batch, &mut params, &mut opt, &arch, &cfg, &sched, &mut rng).unwrap();
        assert!(rep.content > 0.0 && rep.guidance > 0.0 && rep.diff > 0.0);
        assert!((rep.total - rep.content - rep.guidance - rep.diff).abs() < 1e-12 * rep.total);
        for prefix in ["rec.", "mhfg.conv", "mhfg.proj", "enc1.", "time.", "out."] {
            let changed = params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix) && n.ends_with(".weight"))
                .any(|(n, t)| t != before.get(n).unwrap());
            assert!(changed, "{} unchanged", prefix);
        }
    }

    #[test]
    fn diff_only_leaves_rec_and_mhfg_alone() {
        let (arch, mut cfg, data) = tiny_setup();
        cfg.variant = Variant::DIFF_ONLY;
        let mut params = initial_params(&arch, &cfg);
        let before = params.clone();
        let mut opt = AdamState::new(&params);
        let sched = cfg.schedule().unwrap();
        let batch: Vec<&Sample> = data.iter().collect();
        let rep = train_step(&batch, &mut params, &mut opt, &arch, &cfg, &sched, &mut iteration_rng(0, 0)).unwrap();
        assert_eq!((rep.content, rep.guidance), (0.0, 0.0));
        for (n, t) in params.iter() {
            if n.starts_with("rec.") || n.starts_with("mhfg.") {
                assert_eq!(t, before.get(n).unwrap(), "{}", n);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (arch, cfg, data) = tiny_setup();
        let run = |iters: usize, from: Option<(ParamStore, AdamState)>| {
            let c = TrainConfig { iters, ..cfg.clone() };
            let (mut p, mut o) = from.unwrap_or_else(|| {
                let p = initial_params(&arch, &c);
                let o = AdamState::new(&p);
                (p, o)
            });
            train(&data, &mut p, &mut o, &arch, &c, |_, _, _, _| Ok(())).unwrap();
            (p, o)
        };
        let full = run(3, None);
        assert_eq!(full, run(3, None));
        let half = run(1, None);
        assert_eq!(half.1.step, 1);
        assert_eq!(run(3, Some(half)), full);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (arch, mut cfg, data) = tiny_setup();
        cfg.lr = 0.0;
        let mut p = initial_params(&arch, &cfg);
        let before = p.clone();
        let mut o = AdamState::new(&p);
        train(&data, &mut p, &mut o, &arch, &cfg, |_, _, _, _| Ok(())).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_reconstruction_is_single_prediction() {
        let (arch, cfg, data) = tiny_setup();
        let model = Model::new(arch.clone(), initial_params(&arch, &cfg), &cfg).unwrap();
        let geom = tiny_sim().geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = reconstruct(&model, &data[0].y, &geom, 1, &mut rng, true).unwrap();
        let (_, feats) = mhfg_forward(&model.params, &arch, &rec.x_init).unwrap();
        let bundle = ConditionBundle { x_c: rec.x_init.clone(), mhfg_feats: Some(feats) };
        let sigma1 = model.schedule.total_variance().sqrt();
        let eps = denoiser_forward(&model.params, &arch, &rec.x_fbp, sigma1, &bundle).unwrap();
        let expected = rec.x_fbp.zip_map(&eps, |x, e| x - sigma1 * e).unwrap();
        assert!(rec.x_out.max_abs_diff(&expected).unwrap() < 1e-12);

        let a = reconstruct(&model, &data[0].y, &geom, 3, &mut ChaCha8Rng::seed_from_u64(3), false).unwrap();
        let b = reconstruct(&model, &data[0].y, &geom, 3, &mut ChaCha8Rng::seed_from_u64(4), false).unwrap();
        assert_eq!(a, b);
    }
}
