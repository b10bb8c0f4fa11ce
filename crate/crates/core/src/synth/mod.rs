//! Synthetic plate rendering, degradation, and dataset files.

pub mod dataset;
pub mod degrade;
mod font;
pub mod image;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{load_dataset, make_dataset, Dataset, Manifest};
pub use degrade::{degrade, DegradationRecipe};
pub use image::GrayImage;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, splitmix64};

pub const ALPHABET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
pub const PLATE_LEN: usize = 7;
pub const IMAGE_H: usize = 32;
pub const IMAGE_W: usize = 96;

const BACKGROUND: f64 = 0.85;
const INK: f64 = 0.15;

pub fn alphabet() -> Vec<char> {
    ALPHABET.chars().collect()
}

pub fn char_index(c: char) -> Option<usize> {
    ALPHABET.chars().position(|a| a == c)
}

pub fn validate_label(label: &str, len: usize) -> Result<()> {
    if let Some(c) = label.chars().find(|&c| char_index(c).is_none()) {
        return Err(Error::InvalidChar(c));
    }
    let n = label.chars().count();
    if n != len {
        return Err(Error::Data(format!(
            "label {label:?} has {n} characters, expected {len}"
        )));
    }
    Ok(())
}

/// Fixed geometry of a rendered plate: `len` equal-width character slots
/// laid out left to right, each glyph scaled to fill its slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlateLayout {
    pub height: usize,
    pub width: usize,
    pub len: usize,
}

impl Default for PlateLayout {
    fn default() -> Self {
        Self {
            height: IMAGE_H,
            width: IMAGE_W,
            len: PLATE_LEN,
        }
    }
}

impl PlateLayout {
    fn slot_width(&self) -> usize {
        self.width / self.len
    }

    fn margin(&self) -> usize {
        (self.width - self.slot_width() * self.len) / 2
    }

    fn scale(&self) -> (usize, usize) {
        let sx = (self.slot_width().saturating_sub(2) / font::GLYPH_W).max(1);
        let sy = (self.height.saturating_sub(4) / font::GLYPH_H).max(1);
        (sx, sy)
    }

    /// Column range `[x0, x1)` of slot `k`; the slot spans the full height.
    pub fn slot_bounds(&self, k: usize) -> (usize, usize) {
        let x0 = self.margin() + k * self.slot_width();
        (x0, x0 + self.slot_width())
    }

    /// Top-left pixel of the glyph drawn in slot `k`.
    pub fn glyph_origin(&self, k: usize) -> (usize, usize) {
        let (sx, sy) = self.scale();
        let x = self.slot_bounds(k).0 + (self.slot_width() - sx * font::GLYPH_W) / 2;
        let y = (self.height - sy * font::GLYPH_H) / 2;
        (y, x)
    }

    pub fn glyph_size(&self) -> (usize, usize) {
        let (sx, sy) = self.scale();
        (sy * font::GLYPH_H, sx * font::GLYPH_W)
    }
}

/// Dark glyphs on a light background, one per slot.
pub fn render_plate(label: &str, layout: &PlateLayout) -> Result<GrayImage> {
    validate_label(label, layout.len)?;
    let mut img = GrayImage::new(layout.height, layout.width, BACKGROUND);
    let (sx, sy) = layout.scale();
    for (k, c) in label.chars().enumerate() {
        let rows = font::glyph(c).ok_or(Error::InvalidChar(c))?;
        let (oy, ox) = layout.glyph_origin(k);
        for gy in 0..font::GLYPH_H {
            for gx in 0..font::GLYPH_W {
                if font::pixel(&rows, gx, gy) {
                    for dy in 0..sy {
                        for dx in 0..sx {
                            img.set(oy + gy * sy + dy, ox + gx * sx + dx, INK);
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Clean,
    TrainDegraded,
    EvalHard,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "train-degraded" => Ok(Self::TrainDegraded),
            "eval-hard" => Ok(Self::EvalHard),
            _ => Err(Error::Config(format!(
                "unknown profile {s:?} (expected clean, train-degraded or eval-hard)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::TrainDegraded => "train-degraded",
            Self::EvalHard => "eval-hard",
        }
    }

    /// Draws a recipe. `train-degraded` switches each stage on with
    /// probability 1/2 and samples its full range; `eval-hard` switches on 2
    /// or 3 stages, each drawn from the upper half of its range.
    pub fn sample_recipe<R: Rng + ?Sized>(&self, rng: &mut R) -> DegradationRecipe {
        use degrade::*;
        let mut r = DegradationRecipe::IDENTITY;
        let stages: Vec<usize> = match self {
            Profile::Clean => return r,
            Profile::TrainDegraded => (0..6).filter(|_| rng.random_bool(0.5)).collect(),
            Profile::EvalHard => {
                let n = rng.random_range(2..=3);
                let mut v = sample_indices(rng, 6, n).into_vec();
                v.sort_unstable();
                v
            }
        };
        let hard = *self == Profile::EvalHard;
        let lo = |max: f64| if hard { max / 2.0 } else { 0.0 };
        for s in stages {
            match s {
                0 => {
                    let v = rng.random_range(lo(MAX_GAUSSIAN_SIGMA)..=MAX_GAUSSIAN_SIGMA);
                    r.gaussian_sigma = v.max(0.1);
                }
                1 => {
                    let choices: &[u32] = if hard { &[5, 7, 9] } else { &[3, 5, 7, 9] };
                    r.motion_len = choices[rng.random_range(0..choices.len())];
                    r.motion_angle = rng.random_range(0.0..180.0);
                }
                2 => {
                    r.defocus_radius = if hard {
                        rng.random_range(2..=MAX_DEFOCUS_RADIUS)
                    } else {
                        rng.random_range(1..=MAX_DEFOCUS_RADIUS)
                    };
                }
                3 => {
                    r.downsample = if hard {
                        4
                    } else {
                        [2, 4][rng.random_range(0..2)]
                    };
                }
                4 => {
                    let v = rng.random_range(lo(MAX_NOISE_SIGMA)..=MAX_NOISE_SIGMA);
                    r.noise_sigma = v.max(0.005);
                }
                _ => {
                    let mag = rng.random_range(lo(MAX_ILLUM_SLOPE).max(0.05)..=MAX_ILLUM_SLOPE);
                    r.illum_slope = if rng.random_bool(0.5) { mag } else { -mag };
                }
            }
        }
        r
    }
}

/// One generated plate.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateSample {
    pub image: GrayImage,
    pub label: String,
    pub recipe: DegradationRecipe,
    pub sample_seed: u64,
}

/// Seed of sample `index` in a dataset generated with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed) ^ index
}

fn sample_rng(sample_seed: u64) -> ChaCha8Rng {
    derive_rng(sample_seed, 0)
}

fn draw_label<R: Rng + ?Sized>(rng: &mut R, len: usize) -> String {
    let chars = alphabet();
    (0..len)
        .map(|_| chars[rng.random_range(0..chars.len())])
        .collect()
}

/// The label a sample seed produces, without rendering.
pub fn sample_label(sample_seed: u64, len: usize) -> String {
    draw_label(&mut sample_rng(sample_seed), len)
}

/// Label, recipe, render and degradation all from one seeded stream.
pub fn generate_sample(
    sample_seed: u64,
    profile: Profile,
    layout: &PlateLayout,
) -> Result<PlateSample> {
    let mut rng = sample_rng(sample_seed);
    let label = draw_label(&mut rng, layout.len);
    let recipe = profile.sample_recipe(&mut rng);
    let clean = render_plate(&label, layout)?;
    let image = degrade(&clean, &recipe, &mut rng);
    Ok(PlateSample {
        image,
        label,
        recipe,
        sample_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let l = PlateLayout::default();
        assert_eq!(l.slot_bounds(0), (2, 15));
        assert_eq!(l.slot_bounds(6), (80, 93));
        assert_eq!(l.glyph_size(), (28, 10));
        assert_eq!(l.glyph_origin(0), (2, 3));
    }

    #[test]
    fn render_is_deterministic() {
        let l = PlateLayout::default();
        assert_eq!(
            render_plate("AB12345", &l).unwrap(),
            render_plate("AB12345", &l).unwrap()
        );
    }

    #[test]
    fn single_char_change_stays_in_its_slot() {
        let l = PlateLayout::default();
        for (a, b, k) in [
            ("AB12345", "AB12845", 4),
            ("K000000", "X000000", 0),
            ("ZZZZZZ9", "ZZZZZZ8", 6),
        ] {
            let ia = render_plate(a, &l).unwrap();
            let ib = render_plate(b, &l).unwrap();
            let (x0, x1) = l.slot_bounds(k);
            let mut differs = false;
            for y in 0..l.height {
                for x in 0..l.width {
                    if ia.get(y, x) != ib.get(y, x) {
                        assert!((x0..x1).contains(&x), "pixel ({y},{x}) outside slot {k}");
                        differs = true;
                    }
                }
            }
            assert!(differs);
        }
    }

    #[test]
    fn repeated_glyph_patches_match() {
        let l = PlateLayout::default();
        let img = render_plate("8888888", &l).unwrap();
        let (x0, x1) = l.slot_bounds(0);
        for k in 1..7 {
            let (o, _) = l.slot_bounds(k);
            for y in 0..l.height {
                for dx in 0..(x1 - x0) {
                    assert_eq!(img.get(y, x0 + dx), img.get(y, o + dx));
                }
            }
        }
    }

    #[test]
    fn bad_labels_name_the_problem() {
        let l = PlateLayout::default();
        match render_plate("AB1234a", &l) {
            Err(Error::InvalidChar('a')) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(render_plate("AB123", &l).is_err());
    }

    #[test]
    fn recipes_respect_ranges_and_profiles() {
        let mut rng = derive_rng(9, 9);
        for _ in 0..2000 {
            assert_eq!(
                Profile::Clean.sample_recipe(&mut rng),
                DegradationRecipe::IDENTITY
            );
            let t = Profile::TrainDegraded.sample_recipe(&mut rng);
            t.validate().unwrap();
            let h = Profile::EvalHard.sample_recipe(&mut rng);
            h.validate().unwrap();
            assert!((2..=3).contains(&h.active_stages()), "{h:?}");
            if h.gaussian_sigma > 0.0 {
                assert!(h.gaussian_sigma >= 1.25);
            }
            if h.noise_sigma > 0.0 {
                assert!(h.noise_sigma >= 0.025);
            }
            if h.illum_slope != 0.0 {
                assert!(h.illum_slope.abs() >= 0.2);
            }
        }
    }

    #[test]
    fn sample_seed_reproduces_bytes() {
        let l = PlateLayout::default();
        let a = generate_sample(sample_seed(3, 17), Profile::EvalHard, &l).unwrap();
        let b = generate_sample(a.sample_seed, Profile::EvalHard, &l).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label, sample_label(a.sample_seed, 7));
        assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn label_characters_are_uniform_per_position() {
        let n = 10_000usize;
        let mut counts = vec![[0usize; 36]; PLATE_LEN];
        for i in 0..n {
            for (k, c) in sample_label(sample_seed(42, i as u64), PLATE_LEN)
                .chars()
                .enumerate()
            {
                counts[k][char_index(c).unwrap()] += 1;
            }
        }
        let p = 1.0 / 36.0;
        let bound = 3.0 * (n as f64 * p * (1.0 - p)).sqrt();
        let mut outside = 0;
        for row in &counts {
            for &c in row {
                if (c as f64 - n as f64 * p).abs() > bound {
                    outside += 1;
                }
            }
        }
        // 252 cells at 3 sigma expect about 0.7 excursions by chance
        assert!(outside <= 3, "{outside} cells outside the 3-sigma band");
    }
}
