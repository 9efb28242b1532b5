//! Dataset directories: `x0_NNNN.imgf`, `y_NNNN.sinf` and `fbp_NNNN.imgf`
//! per sample, described by a `manifest.txt` of `key=value` lines.

use std::fs;
use std::path::{Path, PathBuf};

use ptd_core::error::file_err;
use ptd_core::fanbeam::FanBeamGeometry;
use ptd_core::formats::{read_image, read_sinogram};
use ptd_core::phantoms::ImageGrid;
use ptd_core::training::Sample;
use ptd_core::{PtdError, Result};

use crate::config::{parse_pairs, RunConfig};

pub const MANIFEST: &str = "manifest.txt";
pub const MANIFEST_VERSION: u32 = 1;

pub fn sample_name(prefix: &str, index: usize, ext: &str) -> String {
    format!("{}_{:04}.{}", prefix, index, ext)
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn manifest_text(cfg: &RunConfig, geom: &FanBeamGeometry, count: usize) -> String {
    let mut s = String::from("# ptd dataset manifest\n");
    s.push_str(&format!("format={}\n", MANIFEST_VERSION));
    for (k, v) in cfg.iter() {
        if k != "out" && k != "force" {
            s.push_str(&format!("config.{}={}\n", k, v));
        }
    }
    s.push_str(&format!("geometry.image_n={}\n", geom.grid.n));
    s.push_str(&format!("geometry.pixel_mm={}\n", geom.grid.pixel_mm));
    s.push_str(&format!("geometry.dso={}\n", geom.dso));
    s.push_str(&format!("geometry.dsd={}\n", geom.dsd));
    s.push_str(&format!("geometry.n_det={}\n", geom.n_det));
    s.push_str(&format!("geometry.det_spacing_mm={}\n", geom.det_spacing_mm));
    s.push_str(&format!("geometry.n_views={}\n", geom.n_views()));
    s.push_str(&format!("geometry.angles={}\n", join_f64(&geom.angles)));
    s.push_str(&format!("count={}\n", count));
    for i in 0..count {
        s.push_str(&format!(
            "sample.{:04}={} {} {}\n",
            i,
            sample_name("x0", i, "imgf"),
            sample_name("y", i, "sinf"),
            sample_name("fbp", i, "imgf")
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub dir: PathBuf,
    pub geometry: FanBeamGeometry,
    pub count: usize,
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| PtdError::Format(format!("manifest is missing {}", key)))
}

fn num<T: std::str::FromStr>(pairs: &[(String, String)], key: &str) -> Result<T> {
    let v = lookup(pairs, key)?;
    v.parse().map_err(|_| PtdError::Format(format!("manifest {}: cannot parse {:?}", key, v)))
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(file_err(&path))?;
        let pairs = parse_pairs(&text).map_err(|e| PtdError::Format(format!("{}: {}", path.display(), e)))?;
        let version: u32 = num(&pairs, "format")?;
        if version != MANIFEST_VERSION {
            return Err(PtdError::UnsupportedVersion { found: version, supported: MANIFEST_VERSION });
        }
        let angles = lookup(&pairs, "geometry.angles")?
            .split(',')
            .map(|a| a.parse::<f64>().map_err(|_| PtdError::Format(format!("bad angle {:?}", a))))
            .collect::<Result<Vec<_>>>()?;
        let grid = ImageGrid::new(num(&pairs, "geometry.image_n")?, num(&pairs, "geometry.pixel_mm")?);
        let geometry = FanBeamGeometry::new(
            num(&pairs, "geometry.dso")?,
            num(&pairs, "geometry.dsd")?,
            num(&pairs, "geometry.n_det")?,
            num(&pairs, "geometry.det_spacing_mm")?,
            angles,
            grid,
        )?;
        if geometry.n_views() != num::<usize>(&pairs, "geometry.n_views")? {
            return Err(PtdError::Format("manifest angle list disagrees with n_views".into()));
        }
        Ok(Self { dir: dir.to_path_buf(), geometry, count: num(&pairs, "count")? })
    }

    pub fn path(&self, prefix: &str, index: usize, ext: &str) -> PathBuf {
        self.dir.join(sample_name(prefix, index, ext))
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let x0 = read_image(&self.path("x0", index, "imgf"))?;
        let y = read_sinogram(&self.path("y", index, "sinf"))?;
        let x_fbp = read_image(&self.path("fbp", index, "imgf"))?;
        let n = self.geometry.grid.n;
        if x0.shape() != (n, n) || x_fbp.shape() != (n, n) {
            return Err(PtdError::Format(format!("sample {} images are not {}x{}", index, n, n)));
        }
        if (y.n_views, y.n_det) != (self.geometry.n_views(), self.geometry.n_det) {
            return Err(PtdError::Format(format!("sample {} sinogram does not match the geometry", index)));
        }
        Ok(Sample { x0, y, x_fbp })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.count).map(|i| self.load_sample(i)).collect()
    }
}
