//! Flat-detector fan-beam geometry, a Joseph-style ray-driven projector with
//! its exact adjoint, and filtered backprojection.
//!
//! Conventions: the source for view angle `b` sits at `dso * (cos b, sin b)`,
//! the detector is centered on the opposite side of the isocenter at
//! distance `dsd - dso`, and detector coordinate `u` runs along
//! `(-sin b, cos b)` with element `d` at `(d - (n_det - 1) / 2) * pitch`.

use std::f64::consts::TAU;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{shape_err, PtdError, Result};
use crate::image::Image;
use crate::phantoms::{ImageGrid, FULL_SCALE_N};

pub const FULL_SCALE_DSO_MM: f64 = 595.0;
pub const FULL_SCALE_DSD_MM: f64 = 1085.6;
pub const FULL_SCALE_N_DET: usize = 368;
pub const FULL_SCALE_DET_SPACING_MM: f64 = 2.5716;

#[derive(Debug, Clone, PartialEq)]
pub struct FanBeamGeometry {
    pub dso: f64,
    pub dsd: f64,
    pub n_det: usize,
    pub det_spacing_mm: f64,
    pub angles: Vec<f64>,
    /// Reconstruction grid, centered on the isocenter.
    pub grid: ImageGrid,
}

/// `n` equally spaced angles over the full turn, first at 0.
pub fn full_turn_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| TAU * k as f64 / n as f64).collect()
}

impl FanBeamGeometry {
    pub fn new(
        dso: f64,
        dsd: f64,
        n_det: usize,
        det_spacing_mm: f64,
        angles: Vec<f64>,
        grid: ImageGrid,
    ) -> Result<Self> {
        let g = Self { dso, dsd, n_det, det_spacing_mm, angles, grid };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dso > 0.0 && self.dsd > self.dso) {
            return Err(PtdError::InvalidArgument(format!(
                "need dsd > dso > 0, got dso={} dsd={}",
                self.dso, self.dsd
            )));
        }
        if self.n_det == 0 || !(self.det_spacing_mm > 0.0) {
            return Err(PtdError::InvalidArgument("detector needs >= 1 element and positive pitch".into()));
        }
        if self.angles.is_empty() {
            return Err(PtdError::InvalidArgument("geometry has no views".into()));
        }
        if self.angles.iter().any(|a| !(0.0..TAU).contains(a)) {
            return Err(PtdError::InvalidArgument("angles must lie in [0, 2pi)".into()));
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PtdError::InvalidArgument("angles must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Full-scale distances with the detector and grid shrunk in proportion
    /// to an `n x n` image, keeping the same physical field of view and fan.
    pub fn desk_scale(image_n: usize, n_views: usize) -> Self {
        let n_det = ((FULL_SCALE_N_DET * image_n) as f64 / FULL_SCALE_N as f64).round().max(1.0) as usize;
        let det_spacing_mm = FULL_SCALE_DET_SPACING_MM * FULL_SCALE_N_DET as f64 / n_det as f64;
        Self {
            dso: FULL_SCALE_DSO_MM,
            dsd: FULL_SCALE_DSD_MM,
            n_det,
            det_spacing_mm,
            angles: full_turn_angles(n_views),
            grid: ImageGrid::desk_scale(image_n),
        }
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    #[inline]
    pub fn det_u(&self, d: usize) -> f64 {
        (d as f64 - 0.5 * (self.n_det as f64 - 1.0)) * self.det_spacing_mm
    }

    /// Same detector and grid with `n_views` equally spaced angles.
    pub fn with_views(&self, n_views: usize) -> Self {
        Self {
            angles: full_turn_angles(n_views),
            ..self.clone()
        }
    }

    /// Visits every pixel touched by the ray (view `v`, detector `d`) with
    /// its interpolation weight times the path length per step.
    fn trace_ray(&self, v: usize, d: usize, mut visit: impl FnMut(usize, f64)) {
        let n = self.grid.n;
        let p = self.grid.pixel_mm;
        let half = 0.5 * (n as f64 - 1.0);
        let (sb, cb) = self.angles[v].sin_cos();
        let (sx, sy) = (self.dso * cb, self.dso * sb);
        let back = self.dsd - self.dso;
        let u = self.det_u(d);
        let (px, py) = (-back * cb - u * sb, -back * sb + u * cb);
        let (dx, dy) = (px - sx, py - sy);
        if dx.abs() >= dy.abs() {
            let slope = dy / dx;
            let step = p * (1.0 + slope * slope).sqrt();
            for col in 0..n {
                let x = (col as f64 - half) * p;
                let y = sy + (x - sx) * slope;
                let fy = half - y / p;
                let r0 = fy.floor();
                let w1 = fy - r0;
                let r0 = r0 as isize;
                if r0 >= 0 && (r0 as usize) < n {
                    visit(r0 as usize * n + col, step * (1.0 - w1));
                }
                if r0 + 1 >= 0 && ((r0 + 1) as usize) < n {
                    visit((r0 + 1) as usize * n + col, step * w1);
                }
            }
        } else {
            let slope = dx / dy;
            let step = p * (1.0 + slope * slope).sqrt();
            for row in 0..n {
                let y = (half - row as f64) * p;
                let x = sx + (y - sy) * slope;
                let fx = x / p + half;
                let c0 = fx.floor();
                let w1 = fx - c0;
                let c0 = c0 as isize;
                if c0 >= 0 && (c0 as usize) < n {
                    visit(row * n + c0 as usize, step * (1.0 - w1));
                }
                if c0 + 1 >= 0 && ((c0 + 1) as usize) < n {
                    visit(row * n + (c0 + 1) as usize, step * w1);
                }
            }
        }
    }

    fn check_image(&self, img: &Image, op: &'static str) -> Result<()> {
        if img.shape() != (self.grid.n, self.grid.n) {
            return Err(shape_err(
                op,
                format!("image {:?} does not match {}x{} grid", img.shape(), self.grid.n, self.grid.n),
            ));
        }
        Ok(())
    }

    fn check_sinogram(&self, sino: &Sinogram, op: &'static str) -> Result<()> {
        if sino.n_views != self.n_views() || sino.n_det != self.n_det {
            return Err(shape_err(
                op,
                format!(
                    "sinogram {}x{} does not match geometry {}x{}",
                    sino.n_views,
                    sino.n_det,
                    self.n_views(),
                    self.n_det
                ),
            ));
        }
        Ok(())
    }
}

/// Views x detectors array of line integrals (mm x image units).
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub n_views: usize,
    pub n_det: usize,
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(n_views: usize, n_det: usize) -> Self {
        Self { n_views, n_det, data: vec![0.0; n_views * n_det] }
    }

    pub fn from_vec(n_views: usize, n_det: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_views * n_det {
            return Err(shape_err(
                "Sinogram::from_vec",
                format!("{}x{} sinogram needs {} values, got {}", n_views, n_det, n_views * n_det, data.len()),
            ));
        }
        Ok(Self { n_views, n_det, data })
    }

    #[inline]
    pub fn get(&self, view: usize, det: usize) -> f64 {
        self.data[view * self.n_det + det]
    }

    pub fn row(&self, view: usize) -> &[f64] {
        &self.data[view * self.n_det..(view + 1) * self.n_det]
    }

    pub fn dot(&self, other: &Sinogram) -> Result<f64> {
        if (self.n_views, self.n_det) != (other.n_views, other.n_det) {
            return Err(shape_err("Sinogram::dot", "shape mismatch"));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Sinogram {
        Sinogram {
            n_views: self.n_views,
            n_det: self.n_det,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn forward_project(img: &Image, geom: &FanBeamGeometry) -> Result<Sinogram> {
    geom.check_image(img, "forward_project")?;
    let pixels = img.data();
    let mut sino = Sinogram::zeros(geom.n_views(), geom.n_det);
    for v in 0..geom.n_views() {
        for d in 0..geom.n_det {
            let mut acc = 0.0;
            geom.trace_ray(v, d, |idx, w| acc += w * pixels[idx]);
            sino.data[v * geom.n_det + d] = acc;
        }
    }
    Ok(sino)
}

/// Exact adjoint of [`forward_project`].
pub fn back_project(sino: &Sinogram, geom: &FanBeamGeometry) -> Result<Image> {
    geom.check_sinogram(sino, "back_project")?;
    let n = geom.grid.n;
    let mut img = Image::zeros(n, n);
    let pixels = img.data_mut();
    for v in 0..geom.n_views() {
        for d in 0..geom.n_det {
            let val = sino.get(v, d);
            if val == 0.0 {
                continue;
            }
            geom.trace_ray(v, d, |idx, w| pixels[idx] += w * val);
        }
    }
    Ok(img)
}

/// Geometry with `n_views` angles uniformly covering the full turn.
pub fn sparse_geometry(geom: &FanBeamGeometry, n_views: usize) -> Result<FanBeamGeometry> {
    if n_views == 0 {
        return Err(PtdError::InvalidArgument("n_views must be at least 1".into()));
    }
    Ok(geom.with_views(n_views))
}

/// Keeps every `stride`-th view of a sinogram acquired on a full-turn grid.
pub fn subsample_views(sino: &Sinogram, stride: usize) -> Result<Sinogram> {
    if stride == 0 || !sino.n_views.is_multiple_of(stride) {
        return Err(PtdError::InvalidArgument(format!(
            "cannot take every {}th of {} views",
            stride, sino.n_views
        )));
    }
    let data = (0..sino.n_views)
        .step_by(stride)
        .flat_map(|v| sino.row(v).iter().copied())
        .collect();
    Sinogram::from_vec(sino.n_views / stride, sino.n_det, data)
}

/// Band-limited Ram-Lak kernel sampled at spacing `ds`, transformed into a
/// length-`len` circular frequency response.
fn ramp_response(n_det: usize, ds: f64, len: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex<f64>> {
    let mut h = vec![Complex::new(0.0, 0.0); len];
    h[0].re = 1.0 / (4.0 * ds * ds);
    for k in 1..n_det {
        if k % 2 == 1 {
            let v = -1.0 / (std::f64::consts::PI * std::f64::consts::PI * (k * k) as f64 * ds * ds);
            h[k].re = v;
            h[len - k].re = v;
        }
    }
    planner.plan_fft_forward(len).process(&mut h);
    h
}

/// Cosine-weighted, ramp-filtered views on the virtual detector through the
/// isocenter; returns the filtered rows and the virtual pitch.
fn filter_views(sino: &Sinogram, geom: &FanBeamGeometry) -> (Vec<Vec<f64>>, f64) {
    let mag = geom.dso / geom.dsd;
    let ds = geom.det_spacing_mm * mag;
    let len = (2 * geom.n_det).next_power_of_two();
    let mut planner = FftPlanner::new();
    let response = ramp_response(geom.n_det, ds, len, &mut planner);
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let weights: Vec<f64> = (0..geom.n_det)
        .map(|d| {
            let s = geom.det_u(d) * mag;
            geom.dso / (geom.dso * geom.dso + s * s).sqrt()
        })
        .collect();
    let rows = (0..sino.n_views)
        .map(|v| {
            let mut buf = vec![Complex::new(0.0, 0.0); len];
            for (d, (b, w)) in buf.iter_mut().zip(&weights).enumerate() {
                b.re = sino.get(v, d) * w;
            }
            fwd.process(&mut buf);
            for (b, h) in buf.iter_mut().zip(&response) {
                *b *= h;
            }
            inv.process(&mut buf);
            let scale = ds / len as f64;
            buf[..geom.n_det].iter().map(|c| c.re * scale).collect()
        })
        .collect();
    (rows, ds)
}

/// Fan-beam FBP for a flat equispaced detector over a full turn.
pub fn fbp(sino: &Sinogram, geom: &FanBeamGeometry) -> Result<Image> {
    geom.check_sinogram(sino, "fbp")?;
    let (rows, ds) = filter_views(sino, geom);
    let n = geom.grid.n;
    let dbeta = TAU / geom.n_views() as f64;
    let half_det = 0.5 * (geom.n_det as f64 - 1.0);
    let trig: Vec<(f64, f64)> = geom.angles.iter().map(|a| a.sin_cos()).collect();
    let mut img = Image::zeros(n, n);
    for r in 0..n {
        let y = geom.grid.row_y(r as f64);
        for c in 0..n {
            let x = geom.grid.col_x(c as f64);
            let mut acc = 0.0;
            for (row, &(sb, cb)) in rows.iter().zip(&trig) {
                let along = geom.dso - (x * cb + y * sb);
                let across = -x * sb + y * cb;
                let s = geom.dso * across / along;
                let fd = s / ds + half_det;
                let d0 = fd.floor();
                let w1 = fd - d0;
                let d0 = d0 as isize;
                let mut q = 0.0;
                if d0 >= 0 && (d0 as usize) < geom.n_det {
                    q += (1.0 - w1) * row[d0 as usize];
                }
                if d0 + 1 >= 0 && ((d0 + 1) as usize) < geom.n_det {
                    q += w1 * row[(d0 + 1) as usize];
                }
                let u = along / geom.dso;
                acc += q / (u * u);
            }
            img.set(r, c, 0.5 * dbeta * acc);
        }
    }
    Ok(img)
}
