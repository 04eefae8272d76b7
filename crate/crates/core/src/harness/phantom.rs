//! Synthetic ellipsoid phantoms.
//!
//! Each foreground class gets a few axis-aligned ellipsoids placed fully
//! inside the volume; classes are painted in increasing order, so a later
//! class overwrites an earlier one where they overlap. Intensity is
//! `label · intensity_step` plus Gaussian noise, then z-scored over the volume.

use super::vol3d::Vol3d;
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub extent: [usize; 3],
    /// foreground classes K
    pub classes: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// semi-axis range in voxels
    pub radius_min: f64,
    pub radius_max: f64,
    pub intensity_step: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// number of cases written by the `phantom` command
    pub count: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: [32; 3],
            classes: 4,
            blobs_min: 1,
            blobs_max: 3,
            radius_min: 4.0,
            radius_max: 8.0,
            intensity_step: 1.0,
            noise_sigma: 0.3,
            seed: 0,
            count: 8,
        }
    }
}

/// Regeneration attempts when a class is painted over completely.
const MAX_ATTEMPTS: usize = 64;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let spec = |m: String| Err(Error::Spec(m));
        if self.extent.iter().any(|&e| e == 0) {
            return spec(format!("empty phantom extent {:?}", self.extent));
        }
        if self.classes == 0 || self.classes >= u16::MAX as usize {
            return spec(format!("{} classes", self.classes));
        }
        if self.blobs_min > self.blobs_max {
            return spec(format!("blobs_min {} > blobs_max {}", self.blobs_min, self.blobs_max));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return spec(format!("radius range [{}, {}]", self.radius_min, self.radius_max));
        }
        let smallest = *self.extent.iter().min().unwrap() as f64;
        if 2.0 * self.radius_max > smallest {
            return spec(format!("blob radius {} does not fit a volume of extent {smallest}", self.radius_max));
        }
        if !(self.noise_sigma >= 0.0 && self.intensity_step.is_finite() && self.noise_sigma.is_finite()) {
            return spec("noise sigma and intensity step must be finite, sigma non-negative".into());
        }
        Ok(())
    }

    pub(crate) fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("{k}: cannot parse '{v}'")));
        let int = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("{k}: cannot parse '{v}'")));
        match k {
            "phantom.extent" => {
                let parts: Vec<usize> = v.split(['x', ',']).map(|p| int(p.trim())).collect::<Result<_>>()?;
                self.extent = match parts[..] {
                    [n] => [n; 3],
                    [d, h, w] => [d, h, w],
                    _ => return Err(Error::Config(format!("{k}: expected N or DxHxW, got '{v}'"))),
                };
            }
            "phantom.classes" => self.classes = int(v)?,
            "phantom.blobs_min" => self.blobs_min = int(v)?,
            "phantom.blobs_max" => self.blobs_max = int(v)?,
            "phantom.radius_min" => self.radius_min = num(v)?,
            "phantom.radius_max" => self.radius_max = num(v)?,
            "phantom.intensity_step" => self.intensity_step = num(v)?,
            "phantom.noise_sigma" => self.noise_sigma = num(v)?,
            "phantom.seed" => self.seed = v.parse().map_err(|_| Error::Config(format!("{k}: cannot parse '{v}'")))?,
            "phantom.count" => self.count = int(v)?,
            _ => return Err(Error::Config(format!("unknown key '{k}'"))),
        }
        Ok(())
    }

    pub(crate) fn pairs(&self) -> Vec<(String, String)> {
        let [d, h, w] = self.extent;
        vec![
            ("phantom.extent".into(), format!("{d}x{h}x{w}")),
            ("phantom.classes".into(), self.classes.to_string()),
            ("phantom.blobs_min".into(), self.blobs_min.to_string()),
            ("phantom.blobs_max".into(), self.blobs_max.to_string()),
            ("phantom.radius_min".into(), self.radius_min.to_string()),
            ("phantom.radius_max".into(), self.radius_max.to_string()),
            ("phantom.intensity_step".into(), self.intensity_step.to_string()),
            ("phantom.noise_sigma".into(), self.noise_sigma.to_string()),
            ("phantom.seed".into(), self.seed.to_string()),
            ("phantom.count".into(), self.count.to_string()),
        ]
    }

    /// Standalone spec file for the `phantom` command: only `phantom.*` keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = PhantomSpec::default();
        for (k, v) in super::config::parse_pairs(text)? {
            s.set(&k, &v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }
}

fn paint(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> (Vec<u16>, Vec<usize>) {
    let [d, h, w] = spec.extent;
    let mut labels = vec![0u16; d * h * w];
    let mut blobs = Vec::with_capacity(spec.classes);
    for class in 1..=spec.classes {
        let n = rng.gen_range(spec.blobs_min..=spec.blobs_max);
        blobs.push(n);
        for _ in 0..n {
            let r: [f64; 3] = std::array::from_fn(|_| rng.gen_range(spec.radius_min..=spec.radius_max));
            let c: [f64; 3] = std::array::from_fn(|a| rng.gen_range(r[a]..=spec.extent[a] as f64 - r[a]));
            // voxel centres sit at i + 0.5
            let lo: [usize; 3] = std::array::from_fn(|a| (c[a] - r[a]).floor().max(0.0) as usize);
            let hi: [usize; 3] = std::array::from_fn(|a| ((c[a] + r[a]).ceil() as usize).min(spec.extent[a]));
            for z in lo[0]..hi[0] {
                let dz = (z as f64 + 0.5 - c[0]) / r[0];
                for y in lo[1]..hi[1] {
                    let dy = (y as f64 + 0.5 - c[1]) / r[1];
                    for x in lo[2]..hi[2] {
                        let dx = (x as f64 + 0.5 - c[2]) / r[2];
                        if dz * dz + dy * dy + dx * dx <= 1.0 {
                            labels[(z * h + y) * w + x] = class as u16;
                        }
                    }
                }
            }
        }
    }
    (labels, blobs)
}

/// `(intensity, labels)`, deterministic per `spec.seed`.
///
/// A class that was given blobs but ended up painted over entirely is
/// regenerated (the whole layout is redrawn from the continuing random
/// stream), so with one or more blobs per class every class is present.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(Vol3d, Vol3d)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut labels, mut blobs) = paint(spec, &mut rng);
    for _ in 1..MAX_ATTEMPTS {
        let mut present = vec![false; spec.classes + 1];
        labels.iter().for_each(|&l| present[l as usize] = true);
        if (1..=spec.classes).all(|c| present[c] || blobs[c - 1] == 0) {
            break;
        }
        (labels, blobs) = paint(spec, &mut rng);
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
    let raw: Vec<f64> = labels.iter().map(|&l| l as f64 * spec.intensity_step + noise.sample(&mut rng)).collect();
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let sd = (raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
    let intensity = raw.iter().map(|v| ((v - mean) * scale) as f32).collect();
    Ok((Vol3d::intensity(spec.extent, 1, intensity)?, Vol3d::labels(spec.extent, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = PhantomSpec::default();
        assert_eq!(gen_phantom(&s).unwrap(), gen_phantom(&s).unwrap());
        assert_ne!(gen_phantom(&s).unwrap().1, gen_phantom(&s.with_seed(1)).unwrap().1);
    }

    #[test]
    fn zero_blobs_is_background_noise() {
        let s = PhantomSpec { blobs_min: 0, blobs_max: 0, ..PhantomSpec::default() };
        let (img, lab) = gen_phantom(&s).unwrap();
        assert!(lab.as_labels().unwrap().iter().all(|&l| l == 0));
        let (_, v) = img.as_f32().unwrap();
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-5);
    }

    #[test]
    fn oversized_blob_is_a_spec_error() {
        let s = PhantomSpec { radius_max: 16.5, ..PhantomSpec::default() };
        assert!(matches!(gen_phantom(&s), Err(Error::Spec(_))));
        let s = PhantomSpec { extent: [32, 32, 8], ..PhantomSpec::default() };
        assert!(matches!(gen_phantom(&s), Err(Error::Spec(_))));
    }

    #[test]
    fn labels_in_range_and_intensity_tracks_class() {
        let s = PhantomSpec::default();
        let (img, lab) = gen_phantom(&s).unwrap();
        let (_, v) = img.as_f32().unwrap();
        let lab = lab.as_labels().unwrap();
        let mut sums = vec![(0.0f64, 0usize); s.classes + 1];
        for (&l, &x) in lab.iter().zip(v) {
            assert!((l as usize) <= s.classes);
            sums[l as usize].0 += x as f64;
            sums[l as usize].1 += 1;
        }
        let means: Vec<f64> = sums.iter().map(|(s, n)| s / *n as f64).collect();
        assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
    }

    #[test]
    fn spec_file_parsing() {
        let s = PhantomSpec::parse("phantom.extent = 16x32x32\nphantom.classes = 2\nphantom.radius_max = 6\n").unwrap();
        assert_eq!(s.extent, [16, 32, 32]);
        assert!(PhantomSpec::parse("phantom.extnt = 3").is_err());
        assert!(PhantomSpec::parse("train.seed = 3").is_err());
    }
}
