//! Blur, resolution loss, noise and illumination applied to clean renders.
//!
//! Stages always run in the same order: Gaussian blur, motion blur,
//! defocus, down/up-sampling, additive noise, illumination ramp, clamp.
//! A stage whose parameter is at its neutral value is skipped entirely.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use crate::error::{Error, Result};

pub const MAX_GAUSSIAN_SIGMA: f64 = 2.5;
pub const MOTION_LENGTHS: [u32; 5] = [0, 3, 5, 7, 9];
pub const MAX_DEFOCUS_RADIUS: u32 = 3;
pub const DOWNSAMPLE_FACTORS: [u32; 3] = [1, 2, 4];
pub const MAX_NOISE_SIGMA: f64 = 0.05;
pub const MAX_ILLUM_SLOPE: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationRecipe {
    pub gaussian_sigma: f64,
    pub motion_len: u32,
    pub motion_angle: f64,
    pub defocus_radius: u32,
    pub downsample: u32,
    pub noise_sigma: f64,
    pub illum_slope: f64,
}

impl Default for DegradationRecipe {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl DegradationRecipe {
    pub const IDENTITY: Self = Self {
        gaussian_sigma: 0.0,
        motion_len: 0,
        motion_angle: 0.0,
        defocus_radius: 0,
        downsample: 1,
        noise_sigma: 0.0,
        illum_slope: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Data(format!("recipe {what} out of range: {self:?}")));
        if !(0.0..=MAX_GAUSSIAN_SIGMA).contains(&self.gaussian_sigma) {
            return bad("gaussian_sigma");
        }
        if !MOTION_LENGTHS.contains(&self.motion_len) {
            return bad("motion_len");
        }
        if !(0.0..180.0).contains(&self.motion_angle) {
            return bad("motion_angle");
        }
        if self.defocus_radius > MAX_DEFOCUS_RADIUS {
            return bad("defocus_radius");
        }
        if !DOWNSAMPLE_FACTORS.contains(&self.downsample) {
            return bad("downsample");
        }
        if !(0.0..=MAX_NOISE_SIGMA).contains(&self.noise_sigma) {
            return bad("noise_sigma");
        }
        if !(-MAX_ILLUM_SLOPE..=MAX_ILLUM_SLOPE).contains(&self.illum_slope) {
            return bad("illum_slope");
        }
        Ok(())
    }

    /// Compact JSON with fields in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    /// Number of stages that actually alter the image.
    pub fn active_stages(&self) -> usize {
        [
            self.gaussian_sigma > 0.0,
            self.motion_len > 0,
            self.defocus_radius > 0,
            self.downsample > 1,
            self.noise_sigma > 0.0,
            self.illum_slope != 0.0,
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

/// Centred 2-D convolution kernel with odd extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    fn normalized(height: usize, width: usize, mut weights: Vec<f64>) -> Self {
        let s: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= s;
        }
        Self {
            height,
            width,
            weights,
        }
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Sampled Gaussian of radius `⌈3σ⌉`, normalized to sum 1.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for w in &mut k {
        *w /= s;
    }
    k
}

/// Line of `len` taps through the centre at `angle_deg` (counter-clockwise
/// from the +x axis, image y pointing down).
pub fn motion_kernel(len: u32, angle_deg: f64) -> Kernel {
    let n = len as usize;
    let c = (n / 2) as f64;
    let (s, co) = angle_deg.to_radians().sin_cos();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let t = i as f64 - c;
        let x = (c + t * co).round() as usize;
        let y = (c - t * s).round() as usize;
        w[y * n + x] = 1.0;
    }
    Kernel::normalized(n, n, w)
}

/// Uniform disk of the given radius.
pub fn disk_kernel(radius: u32) -> Kernel {
    let r = radius as isize;
    let n = (2 * r + 1) as usize;
    let w = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| if dx * dx + dy * dy <= r * r { 1.0 } else { 0.0 }))
        .collect();
    Kernel::normalized(n, n, w)
}

/// 2-D convolution with replicate padding.
pub fn convolve(img: &GrayImage, k: &Kernel) -> GrayImage {
    let (ry, rx) = ((k.height / 2) as isize, (k.width / 2) as isize);
    let mut out = GrayImage::new(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut acc = 0.0;
            for ky in 0..k.height {
                for kx in 0..k.width {
                    let w = k.weights[ky * k.width + kx];
                    if w != 0.0 {
                        acc += w * img.get_clamped(
                            y as isize + ky as isize - ry,
                            x as isize + kx as isize - rx,
                        );
                    }
                }
            }
            out.set(y, x, acc);
        }
    }
    out
}

/// Horizontal then vertical pass of a symmetric 1-D kernel, replicate padding.
pub fn convolve_separable(img: &GrayImage, k: &[f64]) -> GrayImage {
    let r = (k.len() / 2) as isize;
    let mut tmp = GrayImage::new(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let acc = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * img.get_clamped(y as isize, x as isize + i as isize - r))
                .sum();
            tmp.set(y, x, acc);
        }
    }
    let mut out = GrayImage::new(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let acc = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp.get_clamped(y as isize + i as isize - r, x as isize))
                .sum();
            out.set(y, x, acc);
        }
    }
    out
}

/// Box-average down by `factor`, then nearest-neighbour back to full size.
pub fn resample(img: &GrayImage, factor: usize) -> GrayImage {
    let (sh, sw) = (img.height.div_ceil(factor), img.width.div_ceil(factor));
    let mut small = GrayImage::new(sh, sw, 0.0);
    for by in 0..sh {
        for bx in 0..sw {
            let (mut s, mut n) = (0.0, 0usize);
            for y in by * factor..((by + 1) * factor).min(img.height) {
                for x in bx * factor..((bx + 1) * factor).min(img.width) {
                    s += img.get(y, x);
                    n += 1;
                }
            }
            small.set(by, bx, s / n as f64);
        }
    }
    let mut out = GrayImage::new(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(y, x, small.get(y / factor, x / factor));
        }
    }
    out
}

pub fn degrade<R: Rng + ?Sized>(
    img: &GrayImage,
    recipe: &DegradationRecipe,
    rng: &mut R,
) -> GrayImage {
    let mut out = img.clone();
    if recipe.gaussian_sigma > 0.0 {
        out = convolve_separable(&out, &gaussian_kernel_1d(recipe.gaussian_sigma));
    }
    if recipe.motion_len > 0 {
        out = convolve(&out, &motion_kernel(recipe.motion_len, recipe.motion_angle));
    }
    if recipe.defocus_radius > 0 {
        out = convolve(&out, &disk_kernel(recipe.defocus_radius));
    }
    if recipe.downsample > 1 {
        out = resample(&out, recipe.downsample as usize);
    }
    if recipe.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, recipe.noise_sigma).expect("finite sigma");
        for v in &mut out.data {
            *v += normal.sample(rng);
        }
    }
    if recipe.illum_slope != 0.0 {
        let denom = (out.width.max(2) - 1) as f64;
        for y in 0..out.height {
            for x in 0..out.width {
                let v = out.get(y, x) + recipe.illum_slope * (x as f64 / denom - 0.5);
                out.set(y, x, v);
            }
        }
    }
    out.clamp01();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noisy_image(seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..32 * 96).map(|_| rng.random::<f64>()).collect();
        GrayImage::from_data(32, 96, data).unwrap()
    }

    #[test]
    fn kernels_sum_to_one() {
        for s in [0.3, 1.0, 2.0, 2.5] {
            assert!((gaussian_kernel_1d(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for &l in &MOTION_LENGTHS[1..] {
            for a in [0.0, 30.0, 45.0, 90.0, 135.0, 179.9] {
                let k = motion_kernel(l, a);
                assert!((k.sum() - 1.0).abs() < 1e-12);
                assert!(k.weights.iter().filter(|&&w| w > 0.0).count() >= (l as usize).div_ceil(2));
            }
        }
        for r in 1..=MAX_DEFOCUS_RADIUS {
            assert!((disk_kernel(r).sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(gaussian_kernel_1d(2.0).len(), 13);
    }

    #[test]
    fn horizontal_motion_is_a_row() {
        let k = motion_kernel(5, 0.0);
        let mid = &k.weights[2 * 5..3 * 5];
        assert!(mid.iter().all(|&w| (w - 0.2).abs() < 1e-15));
        assert!((k.weights.iter().sum::<f64>() - mid.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn identity_recipe_is_identity() {
        let img = noisy_image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(degrade(&img, &DegradationRecipe::IDENTITY, &mut rng), img);
    }

    #[test]
    fn constant_image_survives_every_blur() {
        let img = GrayImage::new(32, 96, 0.37);
        let recipe = DegradationRecipe {
            gaussian_sigma: 2.5,
            motion_len: 9,
            motion_angle: 33.0,
            defocus_radius: 3,
            downsample: 4,
            ..DegradationRecipe::IDENTITY
        };
        let out = degrade(&img, &recipe, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(out.data.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn gaussian_blur_reduces_variance() {
        for seed in 0..5 {
            let img = noisy_image(seed);
            let blurred = convolve_separable(&img, &gaussian_kernel_1d(2.0));
            assert!(blurred.variance() < img.variance());
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let r = DegradationRecipe {
            gaussian_sigma: 1.234_567_890_123,
            motion_len: 7,
            motion_angle: 91.5,
            defocus_radius: 2,
            downsample: 4,
            noise_sigma: 0.031,
            illum_slope: -0.27,
        };
        let s = r.to_json();
        assert!(s.starts_with("{\"gaussian_sigma\":"));
        assert_eq!(DegradationRecipe::from_json(&s).unwrap(), r);
        let bad = DegradationRecipe { motion_len: 4, ..r };
        assert!(DegradationRecipe::from_json(&bad.to_json()).is_err());
        assert!(DegradationRecipe::from_json("{\"gaussian_sigma\":0}").is_err());
    }
}
