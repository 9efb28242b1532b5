//! Analytic ellipse phantoms used as ground-truth images.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

/// Pixel pitch of the full-scale 512 x 512 reconstruction grid, mm.
pub const FULL_SCALE_PIXEL_MM: f64 = 1.3282;
/// Pixel count per side of the full-scale grid.
pub const FULL_SCALE_N: usize = 512;

/// Fraction of the grid half-width used as the unit radius for phantoms.
/// Keeps the object inside the circle covered by the fan at every angle.
pub const OBJECT_RADIUS_FRACTION: f64 = 0.68;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub mu: f64,
}

impl Ellipse {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhantomSpec {
    pub ellipses: Vec<Ellipse>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageGrid {
    pub n: usize,
    pub pixel_mm: f64,
}

impl ImageGrid {
    pub fn new(n: usize, pixel_mm: f64) -> Self {
        assert!(n >= 8, "grid needs at least 8 pixels per side");
        assert!(pixel_mm > 0.0, "pixel pitch must be positive");
        Self { n, pixel_mm }
    }

    /// Grid of `n` pixels spanning the full-scale field of view.
    pub fn desk_scale(n: usize) -> Self {
        Self::new(n, FULL_SCALE_PIXEL_MM * FULL_SCALE_N as f64 / n as f64)
    }

    pub fn half_width_mm(&self) -> f64 {
        0.5 * self.n as f64 * self.pixel_mm
    }

    /// Radius (mm) of the disk phantoms are confined to.
    pub fn object_radius_mm(&self) -> f64 {
        OBJECT_RADIUS_FRACTION * self.half_width_mm()
    }

    /// Physical x of a column center; origin at the grid center.
    #[inline]
    pub fn col_x(&self, col: f64) -> f64 {
        (col - 0.5 * (self.n as f64 - 1.0)) * self.pixel_mm
    }

    /// Physical y of a row center; rows run top to bottom, y points up.
    #[inline]
    pub fn row_y(&self, row: f64) -> f64 {
        (0.5 * (self.n as f64 - 1.0) - row) * self.pixel_mm
    }
}

/// Random ellipse phantom: one body ellipse plus `k - 1` interior structures
/// whose additive attenuation lies in [-0.4, 0.4].
pub fn random_phantom(seed: u64, k_range: (usize, usize), radius_mm: f64) -> PhantomSpec {
    let (kmin, kmax) = k_range;
    assert!(kmin >= 1 && kmax >= kmin, "invalid ellipse count range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(kmin..=kmax);

    let body_a = radius_mm * rng.random_range(0.70..0.98);
    let body_b = radius_mm * rng.random_range(0.55..0.85);
    let body = Ellipse {
        cx: radius_mm * rng.random_range(-0.02..0.02),
        cy: radius_mm * rng.random_range(-0.02..0.02),
        a: body_a,
        b: body_b,
        theta: rng.random_range(-0.3..0.3),
        mu: rng.random_range(0.45..0.55),
    };
    let mut ellipses = vec![body];
    for _ in 1..k {
        // place the structure inside the body's inscribed disk
        let inner = body_a.min(body_b);
        let r = inner * rng.random_range(0.0f64..0.75).sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let size_max = 0.35 * inner;
        ellipses.push(Ellipse {
            cx: body.cx + r * phi.cos(),
            cy: body.cy + r * phi.sin(),
            a: rng.random_range(0.04 * inner..size_max),
            b: rng.random_range(0.04 * inner..size_max),
            theta: rng.random_range(0.0..std::f64::consts::PI),
            mu: rng.random_range(-0.4..0.4),
        });
    }
    PhantomSpec { ellipses }
}

/// Rasterizes with `supersample x supersample` sub-pixel points per pixel.
pub fn rasterize(spec: &PhantomSpec, grid: &ImageGrid, supersample: usize) -> Image {
    assert!(supersample >= 1, "supersample must be at least 1");
    let ss = supersample as f64;
    let offsets: Vec<f64> = (0..supersample).map(|i| (i as f64 + 0.5) / ss - 0.5).collect();
    let inv = 1.0 / (ss * ss);
    Image::from_fn(grid.n, grid.n, |row, col| {
        let mut acc = 0.0;
        for &oy in &offsets {
            let y = grid.row_y(row as f64 + oy);
            for &ox in &offsets {
                let x = grid.col_x(col as f64 + ox);
                let v: f64 = spec
                    .ellipses
                    .iter()
                    .filter(|e| e.contains(x, y))
                    .map(|e| e.mu)
                    .sum();
                acc += v.clamp(0.0, 1.0);
            }
        }
        (acc * inv).clamp(0.0, 1.0)
    })
}

/// Modified (high-contrast) Shepp-Logan table in unit coordinates:
/// (cx, cy, a, b, theta_deg, mu).
pub const SHEPP_LOGAN_TABLE: [(f64, f64, f64, f64, f64, f64); 10] = [
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    (0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
];

/// Shepp-Logan scaled to `radius_mm`.
pub fn shepp_logan_spec(radius_mm: f64) -> PhantomSpec {
    PhantomSpec {
        ellipses: SHEPP_LOGAN_TABLE
            .iter()
            .map(|&(cx, cy, a, b, deg, mu)| Ellipse {
                cx: cx * radius_mm,
                cy: cy * radius_mm,
                a: a * radius_mm,
                b: b * radius_mm,
                theta: deg.to_radians(),
                mu,
            })
            .collect(),
    }
}

pub fn shepp_logan(grid: &ImageGrid) -> Image {
    rasterize(&shepp_logan_spec(grid.object_radius_mm()), grid, 4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(random_phantom(11, (2, 6), 200.0), random_phantom(11, (2, 6), 200.0));
        assert_ne!(random_phantom(11, (2, 6), 200.0), random_phantom(12, (2, 6), 200.0));
    }

    #[test]
    fn single_ellipse_range() {
        for seed in 0..20 {
            assert_eq!(random_phantom(seed, (1, 1), 100.0).ellipses.len(), 1);
        }
    }

    #[test]
    fn values_clipped_over_many_seeds() {
        let grid = ImageGrid::desk_scale(16);
        for seed in 0..1000 {
            let img = rasterize(&random_phantom(seed, (1, 8), grid.object_radius_mm()), &grid, 1);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "seed {}", seed);
        }
    }

    #[test]
    fn empty_spec_is_zero() {
        let img = rasterize(&PhantomSpec::default(), &ImageGrid::new(8, 1.0), 2);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn covering_ellipse_gives_constant() {
        let spec = PhantomSpec {
            ellipses: vec![Ellipse { cx: 0.0, cy: 0.0, a: 100.0, b: 100.0, theta: 0.3, mu: 0.5 }],
        };
        let img = rasterize(&spec, &ImageGrid::new(16, 1.0), 3);
        assert!(img.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn disk_area_matches_analytic() {
        let grid = ImageGrid::new(256, 1.0);
        let r = 80.0;
        let spec = PhantomSpec {
            ellipses: vec![Ellipse { cx: 0.0, cy: 0.0, a: r, b: r, theta: 0.0, mu: 1.0 }],
        };
        let img = rasterize(&spec, &grid, 4);
        let area: f64 = img.data().iter().sum::<f64>() * grid.pixel_mm * grid.pixel_mm;
        let ratio = area / (std::f64::consts::PI * r * r);
        assert!((ratio - 1.0).abs() < 0.02, "ratio {}", ratio);
    }

    #[test]
    fn supersample_refinement_is_bounded() {
        // a pixel value moves by at most the boundary-crossing fraction of
        // its sub-pixel points, never more than the full pixel contrast
        let grid = ImageGrid::desk_scale(32);
        let spec = random_phantom(5, (3, 6), grid.object_radius_mm());
        let a = rasterize(&spec, &grid, 2);
        let b = rasterize(&spec, &grid, 4);
        let interior_equal = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| (*x - *y).abs() < 1e-12)
            .count();
        assert!(interior_equal > a.len() / 2);
        assert!(a.max_abs_diff(&b).unwrap() <= 1.0);
    }

    #[test]
    fn shepp_logan_basics() {
        let grid = ImageGrid::desk_scale(128);
        let img = shepp_logan(&grid);
        let c = img.get(64, 64);
        assert!((0.0..=1.0).contains(&c));
        assert!(img.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn shepp_logan_rasterization_commutes_with_mirror() {
        // the standard table is not itself mirror-symmetric (ellipse pairs at
        // x = +-0.22 and the small features near y = -0.6 differ), so the
        // check is that rasterizing the mirrored table gives the mirrored image
        let grid = ImageGrid::desk_scale(128);
        let img = shepp_logan(&grid);
        let mut mirrored = shepp_logan_spec(grid.object_radius_mm());
        for e in &mut mirrored.ellipses {
            e.cx = -e.cx;
            e.theta = -e.theta;
        }
        let mimg = rasterize(&mirrored, &grid, 4);
        let n = grid.n;
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                worst = worst.max((img.get(r, c) - mimg.get(r, n - 1 - c)).abs());
            }
        }
        assert!(worst <= 1e-12, "max mirror discrepancy {}", worst);
    }
}
