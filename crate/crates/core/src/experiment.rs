//! Desk-scale train-and-evaluate runs with an on-disk checkpoint cache, so
//! that long runs can be interrupted, resumed and reused.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::metrics::{psnr, ssim, MetricPair};
use crate::networks::ArchConfig;
use crate::optim::AdamState;
use crate::training::{
    initial_params, make_dataset, reconstruct_from_fbp, train, LossReport, Model, Sample, SimConfig, Split,
    TrainConfig,
};

/// Bump when a change to the training code invalidates cached checkpoints.
pub const TRAINING_REVISION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub arch: ArchConfig,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            arch: ArchConfig::default(),
            n_train: 200,
            n_test: 20,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Experiment {
    /// Sim and geometry follow the training image size and view count.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig { image_n: self.train.image_n, n_views: self.train.n_views, ..self.sim.clone() }
    }

    /// Stable identifier of everything that determines the trained weights.
    pub fn cache_key(&self) -> String {
        let sim = self.sim_config();
        let mut text = format!(
            "rev={};n_train={};sim={:?};",
            TRAINING_REVISION, self.n_train, sim
        );
        for (k, v) in self.train.to_pairs().into_iter().chain(self.arch.to_pairs()) {
            text.push_str(&format!("{}={};", k, v));
        }
        format!(
            "{}-s{}-{:016x}",
            self.train.variant.name().replace('+', "_"),
            self.train.seed,
            fnv1a(text.as_bytes())
        )
    }

    pub fn train_set(&self) -> Result<Vec<Sample>> {
        make_dataset(self.n_train, &self.sim_config(), Split::Train)
    }

    pub fn test_set(&self) -> Result<Vec<Sample>> {
        make_dataset(self.n_test, &self.sim_config(), Split::Test)
    }

    /// Trains to completion, resuming from and saving to `cache_dir` when
    /// given. A finished cached run is loaded without training.
    pub fn train_or_load(
        &self,
        cache_dir: Option<&Path>,
        save_every: usize,
        mut on_iter: impl FnMut(u64, &LossReport),
    ) -> Result<Checkpoint> {
        let path: Option<PathBuf> = cache_dir.map(|d| d.join(format!("{}.ptdc", self.cache_key())));
        let mut ckpt = match &path {
            Some(p) if p.exists() => Checkpoint::load(p)?,
            _ => {
                let params = initial_params(&self.arch, &self.train);
                let opt = AdamState::new(&params);
                Checkpoint { params, opt, cfg: self.train.clone(), arch: self.arch.clone() }
            }
        };
        if (ckpt.opt.step as usize) >= self.train.iters {
            return Ok(ckpt);
        }
        if let Some(d) = cache_dir {
            std::fs::create_dir_all(d)?;
        }
        let data = self.train_set()?;
        let (cfg, arch) = (self.train.clone(), self.arch.clone());
        let Checkpoint { params, opt, .. } = &mut ckpt;
        train(&data, params, opt, &arch, &cfg, |iter, loss, p, o| {
            on_iter(iter, loss);
            let due = save_every > 0 && (iter as usize).is_multiple_of(save_every);
            if let (Some(path), true) = (&path, due || iter as usize == cfg.iters) {
                Checkpoint { params: p.clone(), opt: o.clone(), cfg: cfg.clone(), arch: arch.clone() }.save(path)?;
            }
            Ok(())
        })?;
        Ok(ckpt)
    }
}

/// Per-image metrics of one trained model on a test set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub fbp: Vec<MetricPair>,
    pub init: Vec<MetricPair>,
    /// Keyed by the number of sampling steps.
    pub ptd: BTreeMap<usize, Vec<MetricPair>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl Evaluation {
    pub fn mean_psnr(rows: &[MetricPair]) -> f64 {
        mean(&rows.iter().map(|m| m.psnr).collect::<Vec<_>>())
    }

    pub fn mean_ssim(rows: &[MetricPair]) -> f64 {
        mean(&rows.iter().map(|m| m.ssim).collect::<Vec<_>>())
    }
}

fn pair(x0: &crate::image::Image, x: &crate::image::Image) -> Result<MetricPair> {
    Ok(MetricPair { psnr: psnr(x0, x)?, ssim: ssim(x0, x)? })
}

/// Reconstructs every test sample for each step count. Deterministic
/// sampling uses posterior means; stochastic sampling draws from `seed`.
pub fn evaluate(model: &Model, test: &[Sample], steps: &[usize], stochastic: bool, seed: u64) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    for (i, s) in test.iter().enumerate() {
        for &n in steps {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 8) ^ n as u64);
            let rec = reconstruct_from_fbp(model, s.x_fbp.clone(), n, &mut rng, stochastic)?;
            if ev.fbp.len() == i {
                ev.fbp.push(pair(&s.x0, &rec.x_fbp)?);
                ev.init.push(pair(&s.x0, &rec.x_init)?);
            }
            ev.ptd.entry(n).or_default().push(pair(&s.x0, &rec.x_out)?);
        }
    }
    Ok(ev)
}
