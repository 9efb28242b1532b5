//! Diffusion bridge between a clean image `x0` (t = 0) and a degraded
//! endpoint `x1` (t = 1).
//!
//! The diffusion rate is the symmetric triangle `beta(t) = beta_max (1 - |2t - 1|)`,
//! so every accumulated variance has a closed form:
//!
//! * `sigma2(t)     = int_0^t beta`  (variance accumulated from the clean side)
//! * `sigma_bar2(t) = int_t^1 beta`  (variance accumulated from the degraded side)
//! * `alpha2[n]     = int_{t_n}^{t_{n+1}} beta`
//!
//! The time grid is quadratic, `t_i = (i / N)^2`, dense near the clean end.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PtdError, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub n_steps: usize,
    pub beta_max: f64,
    pub t_grid: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub sigma_bar2: Vec<f64>,
    pub alpha2: Vec<f64>,
}

/// `int_0^t beta` for the triangular profile.
fn cumulative_from_start(t: f64, beta_max: f64) -> f64 {
    if t <= 0.5 {
        beta_max * t * t
    } else {
        let r = 1.0 - t;
        beta_max * (0.5 - r * r)
    }
}

/// `int_t^1 beta` for the triangular profile.
fn cumulative_to_end(t: f64, beta_max: f64) -> f64 {
    if t >= 0.5 {
        let r = 1.0 - t;
        beta_max * r * r
    } else {
        beta_max * (0.5 - t * t)
    }
}

pub fn beta(t: f64, beta_max: f64) -> f64 {
    beta_max * (1.0 - (2.0 * t - 1.0).abs())
}

impl DiffusionSchedule {
    pub fn build(n_steps: usize, beta_max: f64) -> Result<Self> {
        if n_steps < 1 {
            return Err(PtdError::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_max > 0.0) {
            return Err(PtdError::InvalidArgument(format!("beta_max must be positive, got {}", beta_max)));
        }
        let t_grid: Vec<f64> = (0..=n_steps)
            .map(|i| {
                let s = i as f64 / n_steps as f64;
                s * s
            })
            .collect();
        let sigma2: Vec<f64> = t_grid.iter().map(|&t| cumulative_from_start(t, beta_max)).collect();
        let sigma_bar2: Vec<f64> = t_grid.iter().map(|&t| cumulative_to_end(t, beta_max)).collect();
        let alpha2 = sigma2.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self {
            n_steps,
            beta_max,
            t_grid,
            sigma2,
            sigma_bar2,
            alpha2,
        })
    }

    pub fn last(&self) -> usize {
        self.n_steps
    }

    /// `int_0^1 beta = beta_max / 2`.
    pub fn total_variance(&self) -> f64 {
        0.5 * self.beta_max
    }

    pub fn sigma(&self, index: usize) -> f64 {
        self.sigma2[index].sqrt()
    }

    fn check_index(&self, index: usize, op: &str) -> Result<()> {
        if index > self.n_steps {
            return Err(PtdError::InvalidArgument(format!(
                "{}: time index {} outside 0..={}",
                op, index, self.n_steps
            )));
        }
        Ok(())
    }

    /// Mean weights on (x0, x1) and the variance of the bridge marginal.
    pub fn marginal_coefficients(&self, index: usize) -> (f64, f64, f64) {
        let s2 = self.sigma2[index];
        let sb2 = self.sigma_bar2[index];
        let denom = s2 + sb2;
        let c0 = sb2 / denom;
        (c0, 1.0 - c0, s2 * sb2 / denom)
    }
}

/// Weights on (x0_hat, x_next) and variance of the one-step posterior,
/// given the step variance `alpha2` and `sigma2_n` at the target time.
pub fn posterior_coefficients(alpha2: f64, sigma2_n: f64) -> (f64, f64, f64) {
    let denom = alpha2 + sigma2_n;
    if denom == 0.0 {
        return (1.0, 0.0, 0.0);
    }
    let a = alpha2 / denom;
    (a, 1.0 - a, alpha2 * sigma2_n / denom)
}

fn add_gaussian<R: Rng + ?Sized>(img: &mut Image, std: f64, rng: &mut R) {
    if std == 0.0 {
        return;
    }
    for v in img.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += std * z;
    }
}

/// Draws `x_t ~ q(x_t | x0, x1)` at grid index `t_index`.
pub fn q_sample<R: Rng + ?Sized>(
    x0: &Image,
    x1: &Image,
    t_index: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Image> {
    sched.check_index(t_index, "q_sample")?;
    let (c0, c1, var) = sched.marginal_coefficients(t_index);
    let mut xt = x0.zip_map(x1, |a, b| c0 * a + c1 * b)?;
    add_gaussian(&mut xt, var.sqrt(), rng);
    Ok(xt)
}

/// Regression target `(x_t - x0) / sigma_t`.
pub fn epsilon_target(xt: &Image, x0: &Image, t_index: usize, sched: &DiffusionSchedule) -> Result<Image> {
    sched.check_index(t_index, "epsilon_target")?;
    if t_index == 0 {
        return Err(PtdError::InvalidArgument("epsilon target undefined at t = 0 (sigma = 0)".into()));
    }
    let sigma = sched.sigma(t_index);
    xt.zip_map(x0, |a, b| (a - b) / sigma)
}

/// `x0_hat = x_{n+1} - sigma_{n+1} * eps`.
pub fn predict_x0(x_next: &Image, eps: &Image, step_index: usize, sched: &DiffusionSchedule) -> Result<Image> {
    sched.check_index(step_index + 1, "predict_x0")?;
    let sigma = sched.sigma(step_index + 1);
    x_next.zip_map(eps, |x, e| x - sigma * e)
}

/// One reverse step `x_n ~ p(x_n | x0_hat, x_{n+1})`. With `stochastic`
/// false only the mean is returned; at `step_index = 0` the result is
/// `x0_hat` regardless.
pub fn posterior_sample<R: Rng + ?Sized>(
    x0_hat: &Image,
    x_next: &Image,
    step_index: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
    stochastic: bool,
) -> Result<Image> {
    sched.check_index(step_index + 1, "posterior_sample")?;
    let (a, b, var) = posterior_coefficients(sched.alpha2[step_index], sched.sigma2[step_index]);
    let mut out = x0_hat.zip_map(x_next, |h, x| a * h + b * x)?;
    if stochastic {
        add_gaussian(&mut out, var.sqrt(), rng);
    }
    Ok(out)
}

/// Time information handed to a denoiser at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTime {
    pub t: f64,
    pub sigma: f64,
}

/// Reverse chain from `x_n` at t = 1 down to t = 0 over a fresh quadratic
/// grid with `n_sample_steps` intervals on the trained rate profile.
pub fn sample_loop<C, R, F>(
    mut denoiser: F,
    x_n: &Image,
    cond: &C,
    n_sample_steps: usize,
    trained: &DiffusionSchedule,
    rng: &mut R,
    stochastic: bool,
) -> Result<Image>
where
    R: Rng + ?Sized,
    F: FnMut(&Image, StepTime, &C) -> Result<Image>,
{
    let sched = DiffusionSchedule::build(n_sample_steps, trained.beta_max)?;
    let mut x = x_n.clone();
    for n in (0..sched.n_steps).rev() {
        let time = StepTime {
            t: sched.t_grid[n + 1],
            sigma: sched.sigma(n + 1),
        };
        let eps = denoiser(&x, time, cond)?;
        let x0_hat = predict_x0(&x, &eps, n, &sched)?;
        x = posterior_sample(&x0_hat, &x, n, &sched, rng, stochastic)?;
        if !x.is_finite() {
            return Err(PtdError::Numeric(format!("non-finite sample at step {}", n)));
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositionReport {
    pub step: usize,
    pub draws: usize,
    /// Largest per-pixel z-score of the empirical mean.
    pub max_mean_z: f64,
    /// Largest per-pixel z-score of the empirical variance.
    pub max_var_z: f64,
}

impl CompositionReport {
    pub fn max_deviation(&self) -> f64 {
        self.max_mean_z.max(self.max_var_z)
    }
}

/// Monte-Carlo check that one posterior step applied to a bridge sample at
/// `n + 1` reproduces the bridge marginal at `n`.
pub fn verify_composition<R: Rng + ?Sized>(
    sched: &DiffusionSchedule,
    n: usize,
    x0: &Image,
    xn: &Image,
    mc: usize,
    rng: &mut R,
) -> Result<CompositionReport> {
    if n >= sched.last() {
        return Err(PtdError::InvalidArgument(format!("step {} must be below {}", n, sched.last())));
    }
    if mc < 2 {
        return Err(PtdError::InvalidArgument("need at least two draws".into()));
    }
    let len = x0.len();
    let mut sum = vec![0.0; len];
    let mut sum_sq = vec![0.0; len];
    let (c0, c1, var) = sched.marginal_coefficients(n);
    let target_mean = x0.zip_map(xn, |a, b| c0 * a + c1 * b)?;
    for _ in 0..mc {
        let x_next = q_sample(x0, xn, n + 1, sched, rng)?;
        let x = posterior_sample(x0, &x_next, n, sched, rng, true)?;
        // accumulate around the analytic mean for numerical stability
        for ((s, q), (v, m)) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(x.data().iter().zip(target_mean.data())) {
            let d = v - m;
            *s += d;
            *q += d * d;
        }
    }
    let mcf = mc as f64;
    let mut max_mean_z: f64 = 0.0;
    let mut max_var_z: f64 = 0.0;
    for (s, q) in sum.iter().zip(&sum_sq) {
        let mean_dev = s / mcf;
        let emp_var = (q - mcf * mean_dev * mean_dev) / (mcf - 1.0);
        if var == 0.0 {
            // point mass: any spread at all is a failure
            let dev = if mean_dev == 0.0 && emp_var == 0.0 { 0.0 } else { f64::INFINITY };
            max_mean_z = max_mean_z.max(dev);
            max_var_z = max_var_z.max(dev);
            continue;
        }
        max_mean_z = max_mean_z.max(mean_dev.abs() / (var / mcf).sqrt());
        max_var_z = max_var_z.max((emp_var - var).abs() / (var * (2.0 / (mcf - 1.0)).sqrt()));
    }
    Ok(CompositionReport {
        step: n,
        draws: mc,
        max_mean_z,
        max_var_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, k: f64) -> Image {
        Image::from_fn(h, w, |r, c| k * (r as f64 - c as f64 * 0.5))
    }

    #[test]
    fn schedule_identities() {
        for &n in &[1usize, 5, 8, 10, 50] {
            for &bm in &[0.1, 0.3, 1.0] {
                let s = DiffusionSchedule::build(n, bm).unwrap();
                let total = s.total_variance();
                assert_eq!(s.sigma2[0], 0.0);
                assert_eq!(s.sigma_bar2[n], 0.0);
                for i in 0..=n {
                    assert!((s.sigma2[i] + s.sigma_bar2[i] - total).abs() <= 1e-12);
                }
                assert!(s.sigma2.windows(2).all(|w| w[1] > w[0]));
                assert!(s.sigma_bar2.windows(2).all(|w| w[1] < w[0]));
                assert!(s.alpha2.iter().all(|&a| a > 0.0));
                let sum: f64 = s.alpha2.iter().sum();
                assert!((sum - s.sigma2[n]).abs() <= 1e-12);
                assert!((sum - bm / 2.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::build(1, 0.3).unwrap();
        assert_eq!(s.alpha2, vec![s.sigma2[1]]);
    }

    #[test]
    fn schedule_rejects_bad_args() {
        assert!(DiffusionSchedule::build(0, 0.3).is_err());
        assert!(DiffusionSchedule::build(4, 0.0).is_err());
    }

    #[test]
    fn closed_form_matches_quadrature() {
        // midpoint rule on the triangle as an independent check
        let bm = 0.3;
        let s = DiffusionSchedule::build(10, bm).unwrap();
        for (i, &t) in s.t_grid.iter().enumerate() {
            let m = 200_000;
            let h = t / m as f64;
            let q: f64 = (0..m).map(|k| beta((k as f64 + 0.5) * h, bm) * h).sum();
            assert!((q - s.sigma2[i]).abs() < 1e-9, "t={} {} vs {}", t, q, s.sigma2[i]);
        }
    }

    #[test]
    fn bridge_boundaries_exact() {
        let s = DiffusionSchedule::build(10, 0.3).unwrap();
        let x0 = ramp(4, 4, 0.1);
        let x1 = ramp(4, 4, -0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(q_sample(&x0, &x1, 0, &s, &mut rng).unwrap(), x0);
        assert_eq!(q_sample(&x0, &x1, 10, &s, &mut rng).unwrap(), x1);
        assert!(q_sample(&x0, &x1, 11, &s, &mut rng).is_err());
    }

    #[test]
    fn mean_coefficients_sum_to_one() {
        for &n in &[1usize, 5, 10, 50] {
            let s = DiffusionSchedule::build(n, 0.3).unwrap();
            for i in 0..=n {
                let (c0, c1, _) = s.marginal_coefficients(i);
                assert_eq!(c0 + c1, 1.0);
            }
        }
    }

    #[test]
    fn epsilon_target_cases() {
        let s = DiffusionSchedule::build(10, 0.3).unwrap();
        let x0 = ramp(3, 3, 0.2);
        assert!(epsilon_target(&x0, &x0, 4, &s).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(epsilon_target(&x0, &x0, 0, &s).is_err());
        let z = ramp(3, 3, 1.0);
        let sigma = s.sigma(6);
        let xt = z.scale(sigma);
        let got = epsilon_target(&xt, &Image::zeros(3, 3), 6, &s).unwrap();
        assert!(got.max_abs_diff(&z).unwrap() < 1e-14);
    }

    #[test]
    fn predict_x0_inverts_target() {
        let s = DiffusionSchedule::build(10, 0.3).unwrap();
        let x0 = ramp(5, 5, 0.05);
        let xt = ramp(5, 5, -0.2);
        let eps = epsilon_target(&xt, &x0, 7, &s).unwrap();
        let hat = predict_x0(&xt, &eps, 6, &s).unwrap();
        assert!(hat.max_abs_diff(&x0).unwrap() < 1e-14);
        assert_eq!(predict_x0(&xt, &Image::zeros(5, 5), 6, &s).unwrap(), xt);
        // scalar recomputation
        let sigma = (0.3f64 * 0.49 * 0.49).sqrt(); // t_7 = 0.49 < 0.5
        let e = Image::filled(5, 5, 0.25);
        let direct = xt.map(|v| v - sigma * 0.25);
        assert!(predict_x0(&xt, &e, 6, &s).unwrap().max_abs_diff(&direct).unwrap() < 1e-14);
    }

    #[test]
    fn posterior_boundaries() {
        let s = DiffusionSchedule::build(10, 0.3).unwrap();
        let hat = ramp(4, 4, 0.3);
        let next = ramp(4, 4, -0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(posterior_sample(&hat, &next, 0, &s, &mut rng, true).unwrap(), hat);
        let (a, b, var) = posterior_coefficients(0.0, 0.05);
        assert_eq!((a, b, var), (0.0, 1.0, 0.0));
    }

    #[test]
    fn oracle_denoiser_recovers_x0() {
        let s = DiffusionSchedule::build(10, 0.3).unwrap();
        let x0 = ramp(6, 6, 0.07);
        let xn = ramp(6, 6, -0.11).map(|v| v + 0.4);
        for steps in [1usize, 2, 5, 8, 10] {
            let mut rng = ChaCha8Rng::seed_from_u64(steps as u64);
            let out = sample_loop(
                |x: &Image, time: StepTime, _c: &()| x.zip_map(&x0, |a, b| (a - b) / time.sigma),
                &xn,
                &(),
                steps,
                &s,
                &mut rng,
                true,
            )
            .unwrap();
            assert!(out.max_abs_diff(&x0).unwrap() < 1e-12, "steps {}", steps);
        }
    }

    #[test]
    fn zero_denoiser_returns_endpoint() {
        let s = DiffusionSchedule::build(10, 0.3).unwrap();
        let xn = ramp(6, 6, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample_loop(
            |x: &Image, _t: StepTime, _c: &()| Ok(Image::zeros(x.height(), x.width())),
            &xn,
            &(),
            8,
            &s,
            &mut rng,
            false,
        )
        .unwrap();
        assert!(out.max_abs_diff(&xn).unwrap() < 1e-12);
    }

    #[test]
    fn one_step_loop_is_single_prediction() {
        let s = DiffusionSchedule::build(10, 0.3).unwrap();
        let xn = ramp(4, 4, 0.3);
        let eps = ramp(4, 4, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample_loop(|_x: &Image, _t: StepTime, _c: &()| Ok(eps.clone()), &xn, &(), 1, &s, &mut rng, true)
            .unwrap();
        let one = DiffusionSchedule::build(1, 0.3).unwrap();
        assert_eq!(out, predict_x0(&xn, &eps, 0, &one).unwrap());
    }

    #[test]
    fn composition_at_zero_is_point_mass() {
        let s = DiffusionSchedule::build(10, 0.3).unwrap();
        let x0 = ramp(4, 4, 0.1);
        let xn = ramp(4, 4, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rep = verify_composition(&s, 0, &x0, &xn, 100, &mut rng).unwrap();
        assert_eq!(rep.max_deviation(), 0.0);
        assert!(verify_composition(&s, 10, &x0, &xn, 100, &mut rng).is_err());
    }
}
