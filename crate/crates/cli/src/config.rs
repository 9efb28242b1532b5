//! Flat `key=value` run configuration: built-in defaults, then an optional
//! config file, then command-line values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ptd_core::{PtdError, Result};

/// One documented key with its default (empty means no default).
#[derive(Debug, Clone, Copy)]
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(key: &'static str, default: &'static str, help: &'static str) -> KeyDoc {
    KeyDoc { key, default, help }
}

pub const GEN_DATA_KEYS: &[KeyDoc] = &[
    key("out", "", "output directory"),
    key("n", "100", "number of phantoms"),
    key("views", "32", "projection views over the full turn"),
    key("image_n", "64", "image side length in pixels"),
    key("seed", "0", "base seed of the phantom and noise streams"),
    key("split", "train", "seed partition: train or test"),
    key("i0", "1000000", "incident photons per detector bin"),
    key("sigma_e2", "10", "electronic noise variance"),
    key("mu_per_mm", "0.04", "attenuation per mm of one normalized unit"),
    key("ellipses", "3,8", "min,max ellipses per phantom"),
    key("supersample", "2", "sub-samples per pixel side when rasterizing"),
    key("force", "false", "allow writing into a non-empty directory"),
];

pub const TRAIN_KEYS: &[KeyDoc] = &[
    key("data", "", "dataset directory from gen-data"),
    key("out", "model.ptdc", "checkpoint path"),
    key("log", "", "loss CSV path (default: <out>.loss.csv)"),
    key("resume", "", "checkpoint to continue from"),
    key("save_every", "500", "iterations between checkpoints (0: only at the end)"),
    key("lr", "0.0005", "Adam learning rate"),
    key("iters", "5000", "total iterations"),
    key("batch", "4", "batch size"),
    key("n_train_steps", "10", "diffusion steps of the training grid"),
    key("beta_max", "0.3", "peak of the triangular diffusion rate"),
    key("seed", "0", "initialization and sampling seed"),
    key("variant", "full", "full, diff, diff+content or diff+guidance"),
    key("endpoint", "fbp", "bridge endpoint: fbp or init"),
    key("loss_weights", "1,1,1", "content,guidance,diffusion loss weights"),
    key("arch.rec_channels", "32", "coarse predictor width"),
    key("arch.rec_layers", "5", "coarse predictor depth"),
    key("arch.mhfg_channels", "16", "texture feature channels"),
    key("arch.mhfg_kernels", "9,1,5", "texture subnet kernel sizes"),
    key("arch.mhfg_scales", "4", "number of texture scales"),
    key("arch.unet_dims", "32,64,128,256", "U-Net stage widths"),
    key("arch.time_embed_dim", "64", "noise-level embedding size"),
    key("arch.time_hidden", "128", "noise-level MLP width"),
    key("arch.leaky_slope", "0.2", "leaky relu slope in the U-Net"),
];

pub const RECONSTRUCT_KEYS: &[KeyDoc] = &[
    key("checkpoint", "", "trained checkpoint"),
    key("data", "", "dataset directory (reconstructs every sinogram in it)"),
    key("sino", "", "single sinogram file (alternative to data)"),
    key("out", "", "output directory"),
    key("steps", "1", "sampling steps"),
    key("seed", "0", "sampling seed"),
    key("deterministic", "false", "use posterior means instead of sampling"),
    key("pgm", "false", "also write 16-bit PGM previews"),
    key("window", "-160,240", "PGM display window in HU"),
    key("limit", "0", "reconstruct only the first N inputs (0: all)"),
];

pub const EVAL_KEYS: &[KeyDoc] = &[
    key("truth", "", "dataset directory holding x0 images"),
    key("recon", "", "directory holding <method>_NNNN.imgf images"),
    key("methods", "fbp,init,out", "comma-separated method prefixes"),
    key("csv", "", "optional per-image CSV output"),
];

pub const VERIFY_KEYS: &[KeyDoc] = &[key(
    "suite",
    "all",
    "adjoint, schedule, moments, oracle, gradient, noise, fbp or all",
)];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    docs: &'static [KeyDoc],
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PtdError::Config(format!("line {}: expected key=value, got {:?}", no + 1, raw)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults(docs: &'static [KeyDoc]) -> Self {
        Self { values: docs.iter().map(|d| (d.key.to_string(), d.default.to_string())).collect(), docs }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.docs.iter().any(|d| d.key == key) {
            let known: Vec<&str> = self.docs.iter().map(|d| d.key).collect();
            return Err(PtdError::Config(format!("unknown key {:?} (known: {})", key, known.join(", "))));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Defaults, then the file, then the overrides.
    pub fn resolve(docs: &'static [KeyDoc], file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::defaults(docs);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PtdError::Config(format!("cannot read config {}: {}", path.display(), e)))?;
            for (k, v) in parse_pairs(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undocumented key {}", key))
    }

    pub fn required(&self, key: &str) -> Result<&str> {
        let v = self.get(key);
        if v.is_empty() {
            return Err(PtdError::Config(format!("missing required key {}", key)));
        }
        Ok(v)
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| PtdError::Config(format!("{}: cannot parse {:?}", key, v)))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" | "" => Ok(false),
            other => Err(PtdError::Config(format!("{}: expected true or false, got {:?}", key, other))),
        }
    }

    pub fn pair<T: std::str::FromStr>(&self, key: &str) -> Result<(T, T)> {
        let v = self.get(key);
        let bad = || PtdError::Config(format!("{}: expected two comma-separated values, got {:?}", key, v));
        let (a, b) = v.split_once(',').ok_or_else(bad)?;
        Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }

    /// Help text listing every key with its default.
    pub fn describe(docs: &[KeyDoc]) -> String {
        docs.iter()
            .map(|d| format!("  {:<22} {} [default: {}]", d.key, d.help, if d.default.is_empty() { "-" } else { d.default }))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// The effective configuration as a config file.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{}={}", k, v)?;
        }
        Ok(())
    }
}
