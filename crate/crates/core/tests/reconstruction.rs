use ptd_core::fanbeam::{fbp, forward_project, FanBeamGeometry};
use ptd_core::metrics::{psnr, ssim};
use ptd_core::phantoms::shepp_logan;
use ptd_core::training::{make_dataset, SimConfig, Split};
use ptd_core::verify::fbp_psnr_by_views;

/// Measured with the simulated noise at 128x128, 360 views, seed 0.
const SHEPP_LOGAN_360_VIEW_PSNR: f64 = 24.584;

#[test]
fn full_view_fbp_holds_its_baseline() {
    let p = fbp_psnr_by_views(128, &[360], 0).unwrap()[0];
    assert!(p >= SHEPP_LOGAN_360_VIEW_PSNR - 0.01, "{} dB", p);
}

#[test]
fn sparse_fbp_is_worse_over_fifty_phantoms() {
    let mean_psnr = |views| {
        let data = make_dataset(50, &SimConfig { n_views: views, ..SimConfig::default() }, Split::Test).unwrap();
        data.iter().map(|s| psnr(&s.x0, &s.x_fbp).unwrap()).sum::<f64>() / data.len() as f64
    };
    let (p32, p64) = (mean_psnr(32), mean_psnr(64));
    assert!(p32 < p64, "32 views {} dB, 64 views {} dB", p32, p64);
}

#[test]
fn ssim_of_inverted_phantom_is_low() {
    let geom = FanBeamGeometry::desk_scale(64, 1);
    let a = shepp_logan(&geom.grid);
    let inverted = a.map(|v| 1.0 - v);
    assert!(ssim(&a, &inverted).unwrap() < 0.5);
}

#[test]
fn noiseless_fbp_beats_noisy_fbp() {
    let geom = FanBeamGeometry::desk_scale(64, 128);
    let x = shepp_logan(&geom.grid);
    let clean = psnr(&x, &fbp(&forward_project(&x, &geom).unwrap(), &geom).unwrap()).unwrap();
    let noisy = fbp_psnr_by_views(64, &[128], 0).unwrap()[0];
    assert!(clean > noisy, "clean {} noisy {}", clean, noisy);
}
