//! The three learnable parts of the pipeline:
//!
//! * the coarse predictor, a residual 5-layer CNN on the FBP image;
//! * the multiscale texture guidance stack: one shared three-layer
//!   restoration CNN (9x9 -> 1x1 -> 5x5) applied to the condition at scales
//!   1/2 .. 1/16, whose 16-channel middle activations are the texture
//!   features;
//! * the conditional U-Net denoiser `eps(x_t, sigma_t, x_c, features)`.
//!
//! Every forward is written against an autodiff [`Tape`] so the same code
//! serves training and inference.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, PtdError, Result};
use crate::image::Image;
use crate::tensor::{sinusoidal_embedding, Padding, Tensor};

/// Sigma values are multiplied by this before the sinusoidal embedding.
pub const TIME_EMBED_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub rec_channels: usize,
    pub rec_layers: usize,
    pub mhfg_channels: usize,
    pub mhfg_kernels: [usize; 3],
    pub mhfg_scales: usize,
    pub unet_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub time_hidden: usize,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            rec_channels: 32,
            rec_layers: 5,
            mhfg_channels: 16,
            mhfg_kernels: [9, 1, 5],
            mhfg_scales: 4,
            unet_dims: vec![32, 64, 128, 256],
            time_embed_dim: 64,
            time_hidden: 128,
            leaky_slope: 0.2,
        }
    }
}

/// One convolution layer in the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl LayerSpec {
    fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self { name: name.into(), in_ch, out_ch, kernel }
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }
}

impl ArchConfig {
    pub fn depth(&self) -> usize {
        self.unet_dims.len()
    }

    /// Input side length must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth().max(self.mhfg_scales)
    }

    fn decoder_out(&self, stage: usize) -> usize {
        // stage is 1-based; the last decoder stage keeps the first width
        if stage >= 2 {
            self.unet_dims[stage - 2]
        } else {
            self.unet_dims[0]
        }
    }

    /// Every convolution of the three networks, in initialization order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let c = self.rec_channels;
        for i in 0..self.rec_layers {
            let in_ch = if i == 0 { 1 } else { c };
            let out_ch = if i + 1 == self.rec_layers { 1 } else { c };
            out.push(LayerSpec::new(format!("rec.conv{}", i), in_ch, out_ch, 3));
        }

        let g = self.mhfg_channels;
        let [k1, k2, k3] = self.mhfg_kernels;
        out.push(LayerSpec::new("mhfg.conv0", 1, g, k1));
        out.push(LayerSpec::new("mhfg.conv1", g, g, k2));
        out.push(LayerSpec::new("mhfg.conv2", g, 1, k3));
        for k in 1..=self.mhfg_scales.min(self.depth()) {
            out.push(LayerSpec::new(format!("mhfg.proj{}", k), g, self.unet_dims[k - 1], 1));
        }

        let (e, h) = (self.time_embed_dim, self.time_hidden);
        out.push(LayerSpec::new("time.fc1", e, h, 1));
        out.push(LayerSpec::new("time.fc2", h, h, 1));
        let depth = self.depth();
        for k in 1..=depth {
            out.push(LayerSpec::new(format!("time.enc{}", k), h, self.unet_dims[k - 1], 1));
        }
        out.push(LayerSpec::new("time.mid", h, self.unet_dims[depth - 1], 1));
        for k in (1..=depth).rev() {
            out.push(LayerSpec::new(format!("time.dec{}", k), h, self.decoder_out(k), 1));
        }

        let mut prev = 2;
        for k in 1..=depth {
            let ch = self.unet_dims[k - 1];
            out.push(LayerSpec::new(format!("enc{}.conv1", k), prev, ch, 3));
            out.push(LayerSpec::new(format!("enc{}.conv2", k), ch, ch, 3));
            prev = ch;
        }
        out.push(LayerSpec::new("mid.conv", prev, prev, 3));
        for k in (1..=depth).rev() {
            let ch = self.unet_dims[k - 1];
            out.push(LayerSpec::new(format!("dec{}.conv", k), 2 * ch, self.decoder_out(k), 3));
        }
        out.push(LayerSpec::new("out.conv", self.unet_dims[0], 1, 3));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::param_count).sum()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        [
            ("rec_channels", self.rec_channels.to_string()),
            ("rec_layers", self.rec_layers.to_string()),
            ("mhfg_channels", self.mhfg_channels.to_string()),
            ("mhfg_kernels", join(&self.mhfg_kernels)),
            ("mhfg_scales", self.mhfg_scales.to_string()),
            ("unet_dims", join(&self.unet_dims)),
            ("time_embed_dim", self.time_embed_dim.to_string()),
            ("time_hidden", self.time_hidden.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || PtdError::Config(format!("{}: cannot parse {:?}", key, value));
        let list = || -> Result<Vec<usize>> {
            value.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
        };
        let one = || -> Result<usize> { value.trim().parse().map_err(|_| bad()) };
        match key {
            "rec_channels" => self.rec_channels = one()?,
            "rec_layers" => self.rec_layers = one()?,
            "mhfg_channels" => self.mhfg_channels = one()?,
            "mhfg_kernels" => {
                let k = list()?;
                self.mhfg_kernels = k.try_into().map_err(|_| bad())?;
            }
            "mhfg_scales" => self.mhfg_scales = one()?,
            "unet_dims" => self.unet_dims = list()?,
            "time_embed_dim" => self.time_embed_dim = one()?,
            "time_hidden" => self.time_hidden = one()?,
            "leaky_slope" => self.leaky_slope = value.trim().parse().map_err(|_| bad())?,
            _ => return Err(PtdError::Config(format!("unknown architecture key {:?}", key))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let odd = self.mhfg_kernels.iter().all(|k| k % 2 == 1);
        if self.rec_layers < 2
            || self.rec_channels == 0
            || self.mhfg_channels == 0
            || !odd
            || self.mhfg_scales == 0
            || self.mhfg_scales > self.unet_dims.len()
            || self.unet_dims.is_empty()
            || self.unet_dims.contains(&0)
            || self.time_embed_dim < 2
            || !self.time_embed_dim.is_multiple_of(2)
            || self.time_hidden == 0
        {
            return Err(PtdError::Config(format!("invalid architecture {:?}", self)));
        }
        Ok(())
    }
}

/// Which sub-networks take part in a forward/training pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    /// Coarse predictor on; otherwise the condition is the FBP image itself.
    pub use_rec: bool,
    /// Texture features injected into the denoiser.
    pub use_mhfg: bool,
}

impl Variant {
    pub const FULL: Variant = Variant { use_rec: true, use_mhfg: true };
    pub const DIFF_ONLY: Variant = Variant { use_rec: false, use_mhfg: false };
    pub const DIFF_CONTENT: Variant = Variant { use_rec: true, use_mhfg: false };

    pub fn name(&self) -> &'static str {
        match (self.use_rec, self.use_mhfg) {
            (true, true) => "full",
            (false, false) => "diff",
            (true, false) => "diff+content",
            (false, true) => "diff+guidance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::FULL),
            "diff" => Ok(Self::DIFF_ONLY),
            "diff+content" => Ok(Self::DIFF_CONTENT),
            "diff+guidance" => Ok(Variant { use_rec: false, use_mhfg: true }),
            _ => Err(PtdError::Config(format!(
                "unknown variant {:?} (expected full, diff, diff+content, diff+guidance)",
                s
            ))),
        }
    }
}

/// Named trainable tensors in a deterministic (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        t.check_finite(&name)?;
        if self.entries.contains_key(&name) {
            return Err(PtdError::InvalidArgument(format!("duplicate parameter {}", name)));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| PtdError::InvalidArgument(format!("missing parameter {}", name)))
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Same as [`register`](Self::register) but as constants (inference).
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// Checks that every layer of `arch` is present with the right shape.
    pub fn check_arch(&self, arch: &ArchConfig) -> Result<()> {
        for l in arch.layers() {
            let w = self.require(&format!("{}.weight", l.name))?;
            let b = self.require(&format!("{}.bias", l.name))?;
            if w.shape() != [l.out_ch, l.in_ch, l.kernel, l.kernel] || b.shape() != [l.out_ch] {
                return Err(shape_err(
                    "check_arch",
                    format!("{} has weight {:?}, bias {:?}", l.name, w.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Kaiming-uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`), zero biases.
pub fn init_params(arch: &ArchConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for l in arch.layers() {
        let fan_in = (l.in_ch * l.kernel * l.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = l.out_ch * l.in_ch * l.kernel * l.kernel;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        store
            .insert(
                format!("{}.weight", l.name),
                Tensor::from_vec(vec![l.out_ch, l.in_ch, l.kernel, l.kernel], w).expect("layer shape"),
            )
            .expect("fresh store");
        store
            .insert(format!("{}.bias", l.name), Tensor::zeros(&[l.out_ch]))
            .expect("fresh store");
    }
    store
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| PtdError::InvalidArgument(format!("missing parameter {}", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn conv(tape: &mut Tape, p: &ParamVars, layer: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{}.weight", layer))?;
    let b = p.get(&format!("{}.bias", layer))?;
    tape.conv2d(x, w, Some(b), Padding::Same)
}

fn check_spatial(tape: &Tape, x: Var, multiple: usize, op: &'static str) -> Result<()> {
    let s = tape.value(x).shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(shape_err(op, format!("expected [N,1,H,W], got {:?}", s)));
    }
    if !s[2].is_multiple_of(multiple) || !s[3].is_multiple_of(multiple) {
        return Err(shape_err(
            op,
            format!("spatial dims {}x{} must be divisible by {}", s[2], s[3], multiple),
        ));
    }
    Ok(())
}

/// Coarse predictor: `x + R(x)` with a plain relu CNN `R`.
pub fn ptd_rec(tape: &mut Tape, p: &ParamVars, arch: &ArchConfig, x_fbp: Var) -> Result<Var> {
    let mut h = x_fbp;
    for i in 0..arch.rec_layers {
        h = conv(tape, p, &format!("rec.conv{}", i), h)?;
        if i + 1 < arch.rec_layers {
            h = tape.relu(h);
        }
    }
    tape.add(x_fbp, h)
}

/// Outputs of the texture guidance stack, index `k - 1` for scale `2^-k`.
#[derive(Debug, Clone)]
pub struct MhfgOutput {
    pub sr: Vec<Var>,
    pub features: Vec<Var>,
}

pub fn mhfg(tape: &mut Tape, p: &ParamVars, arch: &ArchConfig, x_c: Var) -> Result<MhfgOutput> {
    check_spatial(tape, x_c, 1 << arch.mhfg_scales, "mhfg_forward")?;
    let mut sr = Vec::with_capacity(arch.mhfg_scales);
    let mut features = Vec::with_capacity(arch.mhfg_scales);
    let mut down = x_c;
    for _ in 0..arch.mhfg_scales {
        down = tape.avg_pool2(down)?;
        let h = conv(tape, p, "mhfg.conv0", down)?;
        let h = tape.relu(h);
        let h = conv(tape, p, "mhfg.conv1", h)?;
        let feat = tape.relu(h);
        let out = conv(tape, p, "mhfg.conv2", feat)?;
        sr.push(out);
        features.push(feat);
    }
    Ok(MhfgOutput { sr, features })
}

/// Conditioning handed to the denoiser.
#[derive(Debug, Clone)]
pub struct Condition<'a> {
    pub x_c: Var,
    /// Texture features at scales 1/2 .. 1/16; `None` disables injection.
    pub features: Option<&'a [Var]>,
}

fn time_bias(tape: &mut Tape, p: &ParamVars, stage: &str, hidden: Var) -> Result<Var> {
    conv(tape, p, &format!("time.{}", stage), hidden)
}

/// Conditional U-Net. `sigmas` holds one noise level per batch entry.
pub fn denoiser(
    tape: &mut Tape,
    p: &ParamVars,
    arch: &ArchConfig,
    x_t: Var,
    sigmas: &[f64],
    cond: &Condition<'_>,
) -> Result<Var> {
    check_spatial(tape, x_t, 1 << arch.depth(), "denoiser_forward")?;
    let xs = tape.value(x_t).shape().to_vec();
    if tape.value(cond.x_c).shape() != xs.as_slice() {
        return Err(shape_err(
            "denoiser_forward",
            format!("x_t {:?} vs x_c {:?}", xs, tape.value(cond.x_c).shape()),
        ));
    }
    if sigmas.len() != xs[0] {
        return Err(shape_err(
            "denoiser_forward",
            format!("{} noise levels for batch of {}", sigmas.len(), xs[0]),
        ));
    }
    if let Some(f) = cond.features {
        if f.len() < arch.mhfg_scales.min(arch.depth()) {
            return Err(shape_err("denoiser_forward", format!("{} feature maps", f.len())));
        }
    }
    let slope = arch.leaky_slope;
    let positions: Vec<f64> = sigmas.iter().map(|s| s * TIME_EMBED_SCALE).collect();
    let emb = tape.constant(sinusoidal_embedding(&positions, arch.time_embed_dim)?);
    let h = conv(tape, p, "time.fc1", emb)?;
    let h = tape.leaky_relu(h, slope);
    let h = conv(tape, p, "time.fc2", h)?;
    let temb = tape.leaky_relu(h, slope);

    let inject = |tape: &mut Tape, k: usize, x: Var| -> Result<Var> {
        match cond.features {
            Some(f) if k <= arch.mhfg_scales => {
                let proj = conv(tape, p, &format!("mhfg.proj{}", k), f[k - 1])?;
                tape.add(x, proj)
            }
            _ => Ok(x),
        }
    };

    let depth = arch.depth();
    let mut h = tape.concat(x_t, cond.x_c)?;
    let mut skips = Vec::with_capacity(depth);
    for k in 1..=depth {
        h = conv(tape, p, &format!("enc{}.conv1", k), h)?;
        let tb = time_bias(tape, p, &format!("enc{}", k), temb)?;
        h = tape.add_channel_bias(h, tb)?;
        h = tape.leaky_relu(h, slope);
        h = conv(tape, p, &format!("enc{}.conv2", k), h)?;
        h = tape.leaky_relu(h, slope);
        skips.push(h);
        h = tape.avg_pool2(h)?;
        h = inject(tape, k, h)?;
    }

    h = conv(tape, p, "mid.conv", h)?;
    let tb = time_bias(tape, p, "mid", temb)?;
    h = tape.add_channel_bias(h, tb)?;
    h = tape.leaky_relu(h, slope);

    for k in (1..=depth).rev() {
        h = inject(tape, k, h)?;
        h = tape.upsample2(h)?;
        h = tape.concat(h, skips[k - 1])?;
        h = conv(tape, p, &format!("dec{}.conv", k), h)?;
        let tb = time_bias(tape, p, &format!("dec{}", k), temb)?;
        h = tape.add_channel_bias(h, tb)?;
        h = tape.leaky_relu(h, slope);
    }
    conv(tape, p, "out.conv", h)
}

/// Inference-only wrappers around the tape forwards.
pub fn ptd_rec_forward(params: &ParamStore, arch: &ArchConfig, x_fbp: &Image) -> Result<Image> {
    let mut tape = Tape::new();
    let p = params.register_frozen(&mut tape);
    let x = tape.constant(x_fbp.to_tensor());
    let out = ptd_rec(&mut tape, &p, arch, x)?;
    tensor_to_image(tape.value(out))
}

/// Restoration outputs and feature maps of the guidance stack for one image.
pub fn mhfg_forward(params: &ParamStore, arch: &ArchConfig, x_c: &Image) -> Result<(Vec<Image>, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = params.register_frozen(&mut tape);
    let x = tape.constant(x_c.to_tensor());
    let out = mhfg(&mut tape, &p, arch, x)?;
    let sr = out
        .sr
        .iter()
        .map(|&v| tensor_to_image(tape.value(v)))
        .collect::<Result<Vec<_>>>()?;
    let feats = out.features.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((sr, feats))
}

/// Precomputed conditioning for repeated denoiser calls at inference.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub x_c: Image,
    pub mhfg_feats: Option<Vec<Tensor>>,
}

pub fn denoiser_forward(
    params: &ParamStore,
    arch: &ArchConfig,
    x_t: &Image,
    sigma: f64,
    bundle: &ConditionBundle,
) -> Result<Image> {
    let mut tape = Tape::new();
    let p = params.register_frozen(&mut tape);
    let xt = tape.constant(x_t.to_tensor());
    let xc = tape.constant(bundle.x_c.to_tensor());
    let feats: Option<Vec<Var>> = bundle
        .mhfg_feats
        .as_ref()
        .map(|fs| fs.iter().map(|f| tape.constant(f.clone())).collect());
    let cond = Condition { x_c: xc, features: feats.as_deref() };
    let out = denoiser(&mut tape, &p, arch, xt, &[sigma], &cond)?;
    tensor_to_image(tape.value(out))
}

fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(shape_err("tensor_to_image", format!("expected [1,1,H,W], got {:?}", s)));
    }
    Image::from_vec(s[2], s[3], t.data().to_vec())
}
