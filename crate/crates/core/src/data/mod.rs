//! Paired images, RAW frames, augmentation and synthetic low-light data.

mod png;
mod raw;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use png::{load_image, load_pair_dir, match_names, pair_paths, save_image, BitDepth, PairSet};
pub use raw::{
    decode_raw, encode_raw, pack_bayer, preprocess_raw, read_raw, unpack_bayer, write_raw, BayerPattern, RawFrame,
    MAX_EXPOSURE_RATIO, RAW_MAGIC,
};

use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};

/// `.raw` and `.lanraw` files hold the RAW container.
pub fn is_raw_path(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("raw") || e.eq_ignore_ascii_case("lanraw"))
}

/// Network input read from disk: a PNG for RGB models, the RAW container
/// (packed and normalized) for Bayer models.
pub fn load_input(path: &Path) -> Result<Tensor<f32>> {
    if is_raw_path(path) {
        let frame = read_raw(path)?;
        preprocess_raw(&pack_bayer(&frame)?, &frame)
    } else {
        load_image(path)
    }
}

/// A degraded image and its reference, `[C, H, W]` and `[3, H*s, W*s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub input: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub id: String,
}

impl ImagePair {
    /// Ratio of reference to input resolution.
    pub fn scale(&self) -> Result<usize> {
        let (i, g) = (self.input.shape(), self.gt.shape());
        if i.len() != 3 || g.len() != 3 || i[1] == 0 || i[2] == 0 {
            return Err(Error::invalid(
                "image pair",
                format!("expected [C, H, W] images, got {i:?} and {g:?}"),
            ));
        }
        let s = g[1] / i[1];
        if s == 0 || g[1] != i[1] * s || g[2] != i[2] * s {
            return Err(Error::invalid(
                "image pair",
                format!("reference {g:?} is not an integer multiple of {i:?}"),
            ));
        }
        Ok(s)
    }
}

/// One of the eight symmetries of the square: an optional horizontal flip
/// followed by `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        flip: false,
        quarter_turns: 0,
    };

    pub fn from_index(i: usize) -> Self {
        Self {
            flip: i >= 4,
            quarter_turns: (i % 4) as u8,
        }
    }

    pub fn index(self) -> usize {
        self.quarter_turns as usize + if self.flip { 4 } else { 0 }
    }

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(Self::from_index)
    }

    /// Whether the transform swaps height and width.
    pub fn transposes(self) -> bool {
        self.quarter_turns % 2 == 1
    }

    /// Applies to the last two axes.
    pub fn apply<T: Element>(self, t: &Tensor<T>) -> Tensor<T> {
        let w_axis = t.rank() - 1;
        let mut out = if self.flip { t.flip(w_axis) } else { t.clone() };
        for _ in 0..self.quarter_turns {
            out = out.rot90();
        }
        out
    }
}

/// Draws a dihedral transform from `seed`; rotations by a quarter turn on a
/// non-square patch are replaced by a draw among the four flips.
pub fn draw_dihedral(seed: u64, square: bool) -> Dihedral {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Dihedral::from_index(rng.random_range(0..8));
    if square || !d.transposes() {
        return d;
    }
    Dihedral {
        flip: rng.random(),
        quarter_turns: 2 * rng.random_range(0..2u8),
    }
}

/// Random rotation/flip applied identically to both images.
pub fn augment(pair: &ImagePair, seed: u64) -> (ImagePair, Dihedral) {
    let s = pair.input.shape();
    let square = s[s.len() - 1] == s[s.len() - 2];
    let d = draw_dihedral(seed, square);
    (
        ImagePair {
            input: d.apply(&pair.input),
            gt: d.apply(&pair.gt),
            id: pair.id.clone(),
        },
        d,
    )
}

fn crop_chw<T: Element>(t: &Tensor<T>, y: usize, x: usize, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    let src_w = s[2];
    Tensor::from_fn(vec![s[0], h, w], |i| {
        t.data()[(i[0] * s[1] + y + i[1]) * src_w + x + i[2]]
    })
}

/// Aligned `size x size` crop; the reference crop is scaled by the pair's
/// resolution ratio.
pub fn random_crop(pair: &ImagePair, size: usize, seed: u64) -> Result<ImagePair> {
    let s = pair.scale()?;
    let (h, w) = (pair.input.shape()[1], pair.input.shape()[2]);
    if size == 0 || size > h || size > w {
        return Err(Error::invalid(
            "random_crop",
            format!("crop {size} does not fit a {h}x{w} image"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    Ok(ImagePair {
        input: crop_chw(&pair.input, y, x, size, size),
        gt: crop_chw(&pair.gt, y * s, x * s, size * s, size * s),
        id: pair.id.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub gamma: f64,
    pub gain: f64,
    pub noise_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            gain: 0.25,
            noise_sigma: 0.01,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) {
            return Err(Error::config(
                "synth.gamma",
                format!("must be >= 1, got {}", self.gamma),
            ));
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::config(
                "synth.gain",
                format!("must lie in (0, 1], got {}", self.gain),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("synth.noise_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

/// `clip(gain * gt^gamma + n, 0, 1)` with seeded Gaussian noise `n`.
pub fn synth_lowlight(gt: &Tensor<f32>, params: &SynthParams, seed: u64) -> Result<ImagePair> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = gt
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            let clean = params.gain * (v as f64).max(0.0).powf(params.gamma);
            (clean + params.noise_sigma * n).clamp(0.0, 1.0) as f32
        })
        .collect();
    let input = Tensor::new(gt.shape().to_vec(), data)?;
    Ok(ImagePair {
        input,
        gt: gt.clone(),
        id: format!("synth-{seed}"),
    })
}

/// Seeded clean image: a colour gradient with rectangles, discs and a
/// sinusoidal texture.
pub fn procedural_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.15..0.95)) };
    let corners = [color(&mut rng), color(&mut rng), color(&mut rng), color(&mut rng)];
    let mut img = vec![0.0f64; 3 * h * w];
    let (hf, wf) = ((h.max(2) - 1) as f64, (w.max(2) - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / wf, y as f64 / hf);
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bot = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                img[(c * h + y) * w + x] = top * (1.0 - v) + bot * v;
            }
        }
    }
    let shapes = rng.random_range(2..6);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let r = rng.random_range(0.1..0.35) * h.min(w) as f64;
        let disc = rng.random::<bool>();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r && dx.abs() <= r * 0.7
                };
                if inside {
                    for c in 0..3 {
                        img[(c * h + y) * w + x] = col[c];
                    }
                }
            }
        }
    }
    let (fy, fx) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
    let amp = rng.random_range(0.02..0.08);
    for y in 0..h {
        for x in 0..w {
            let t = amp * ((y as f64 * fy).sin() * (x as f64 * fx).cos());
            for c in 0..3 {
                let v = &mut img[(c * h + y) * w + x];
                *v = (*v + t).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], img.into_iter().map(|v| v as f32).collect()).expect("sized buffer")
}

/// Directory names of a generated paired dataset.
pub const SYNTH_INPUT_DIR: &str = "low";
pub const SYNTH_GT_DIR: &str = "high";

/// Writes `count` procedural pairs as `low/NNNN.png` and `high/NNNN.png`.
///
/// Refuses to replace existing files unless `overwrite` is set.
pub fn write_synth_dataset(
    out_dir: &Path,
    count: usize,
    size: usize,
    params: &SynthParams,
    seed: u64,
    overwrite: bool,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    params.validate()?;
    let low = out_dir.join(SYNTH_INPUT_DIR);
    let high = out_dir.join(SYNTH_GT_DIR);
    let paths: Vec<(PathBuf, PathBuf)> = (0..count)
        .map(|i| {
            let name = format!("{i:04}.png");
            (low.join(&name), high.join(&name))
        })
        .collect();
    if !overwrite {
        let existing: Vec<String> = paths
            .iter()
            .flat_map(|(a, b)| [a, b])
            .filter(|p| p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !existing.is_empty() {
            return Err(Error::invalid(
                "synth",
                format!(
                    "{} files already exist (first: {}); pass the overwrite flag to replace them",
                    existing.len(),
                    existing[0]
                ),
            ));
        }
    }
    for d in [&low, &high] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (a, b) in &paths {
        let img_seed: u64 = rng.random();
        let gt = procedural_image(size, size, img_seed);
        let pair = synth_lowlight(&gt, params, img_seed ^ 0x5eed)?;
        save_image(&pair.input, a, BitDepth::Eight)?;
        save_image(&pair.gt, b, BitDepth::Eight)?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: usize, w: usize, s: usize) -> ImagePair {
        let input = Tensor::from_fn(vec![3, h, w], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f32);
        let gt = Tensor::from_fn(vec![3, h * s, w * s], |i| {
            (i[0] * 1000 + (i[1] / s) * 10 + i[2] / s) as f32
        });
        ImagePair {
            input,
            gt,
            id: "p".into(),
        }
    }

    #[test]
    fn identity_draw_and_involution() {
        let p = pair(4, 4, 1);
        assert_eq!(Dihedral::IDENTITY.apply(&p.input), p.input);
        let f = Dihedral {
            flip: true,
            quarter_turns: 0,
        };
        assert_eq!(f.apply(&f.apply(&p.input)), p.input);
        let r = Dihedral {
            flip: false,
            quarter_turns: 1,
        };
        let mut t = p.input.clone();
        for _ in 0..4 {
            t = r.apply(&t);
        }
        assert_eq!(t, p.input);
    }

    #[test]
    fn all_eight_are_distinct() {
        let t = Tensor::<f32>::from_fn(vec![1, 3, 3], |i| (i[1] * 3 + i[2]) as f32);
        let imgs: Vec<_> = Dihedral::all().iter().map(|d| d.apply(&t)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(imgs[i], imgs[j], "{i} {j}");
            }
        }
    }

    #[test]
    fn augment_keeps_alignment_at_scale_two() {
        let p = pair(4, 4, 2);
        for seed in 0..16 {
            let (a, _) = augment(&p, seed);
            let down = Tensor::from_fn(vec![3, 4, 4], |i| a.gt.at(&[i[0], 2 * i[1], 2 * i[2]]) % 1000.0);
            let expect = a.input.map(|v| v % 100.0);
            assert_eq!(down, expect);
        }
    }

    #[test]
    fn non_square_never_transposes() {
        for seed in 0..200 {
            assert!(!draw_dihedral(seed, false).transposes());
        }
    }

    #[test]
    fn crop_alignment_and_full_size() {
        let p = pair(8, 6, 2);
        let c = random_crop(&p, 4, 3).unwrap();
        assert_eq!(c.gt.shape(), &[3, 8, 8]);
        assert_eq!(c.gt.at(&[0, 0, 0]) % 1000.0, c.input.at(&[0, 0, 0]));
        let q = pair(5, 5, 1);
        assert_eq!(random_crop(&q, 5, 9).unwrap(), q);
        assert!(random_crop(&q, 6, 0).is_err());
    }

    #[test]
    fn synth_identities() {
        let gt = procedural_image(16, 16, 1);
        let same = synth_lowlight(
            &gt,
            &SynthParams {
                gamma: 1.0,
                gain: 1.0,
                noise_sigma: 0.0,
            },
            0,
        )
        .unwrap();
        assert_eq!(same.input, gt);
        let ones = Tensor::<f32>::ones(vec![3, 8, 8]);
        let dark = synth_lowlight(
            &ones,
            &SynthParams {
                gamma: 2.0,
                gain: 0.25,
                noise_sigma: 0.0,
            },
            0,
        )
        .unwrap();
        assert!(dark.input.data().iter().all(|&v| v == 0.25));
        assert!(synth_lowlight(
            &ones,
            &SynthParams {
                gamma: 0.5,
                ..SynthParams::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn synth_noise_is_zero_mean() {
        let gt = Tensor::<f32>::full(vec![1, 256, 256], 0.5);
        let p = SynthParams {
            gamma: 1.0,
            gain: 0.5,
            noise_sigma: 0.01,
        };
        let out = synth_lowlight(&gt, &p, 4).unwrap();
        let mean = out.input.data().iter().map(|&v| v as f64 - 0.25).sum::<f64>() / 65536.0;
        assert!(mean.abs() < 3.0 * 0.01 / 256.0);
        assert_eq!(out, synth_lowlight(&gt, &p, 4).unwrap());
    }

    #[test]
    fn procedural_images_are_seeded() {
        assert_eq!(procedural_image(12, 10, 5), procedural_image(12, 10, 5));
        assert_ne!(procedural_image(12, 10, 5), procedural_image(12, 10, 6));
        let t = procedural_image(12, 10, 5);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synth_dataset_collision() {
        let dir = tempfile::tempdir().unwrap();
        let p = SynthParams::default();
        let paths = write_synth_dataset(dir.path(), 2, 16, &p, 1, false).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(write_synth_dataset(dir.path(), 2, 16, &p, 1, false).is_err());
        write_synth_dataset(dir.path(), 2, 16, &p, 1, true).unwrap();
    }
}
