use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};

use super::{is_raw_path, load_input, ImagePair};
use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Reads an image as `[3, H, W]` in [0, 1]; grey is replicated, alpha dropped.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planar = |px: &dyn Fn(usize, usize, usize) -> f32| Tensor::from_fn(vec![3, h, w], |i| px(i[0], i[1], i[2]));
    Ok(if sixteen {
        let buf = img.to_rgb16();
        planar(&|c, y, x| buf.get_pixel(x as u32, y as u32)[c] as f32 / 65535.0)
    } else {
        let buf = img.to_rgb8();
        planar(&|c, y, x| buf.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    })
}

fn interleave(t: &Tensor<f32>, max: f64) -> Result<(u32, u32, Vec<f64>)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("save_image", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (t.data()[(c * h + y) * w + x] as f64).clamp(0.0, 1.0);
                out.push((v * max).round());
            }
        }
    }
    Ok((w as u32, h as u32, out))
}

/// Writes `[3, H, W]` values (clamped to [0, 1]) as a PNG.
pub fn save_image(t: &Tensor<f32>, path: &Path, depth: BitDepth) -> Result<()> {
    let (w, h, vals) = interleave(t, depth.max_value())?;
    let err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = vals.into_iter().map(|v| v as u8).collect();
            let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, raw).expect("buffer size");
            buf.save_with_format(path, image::ImageFormat::Png).map_err(err)
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = vals.into_iter().map(|v| v as u16).collect();
            let buf: ImageBuffer<Rgb<u16>, _> = ImageBuffer::from_raw(w, h, raw).expect("buffer size");
            buf.save_with_format(path, image::ImageFormat::Png).map_err(err)
        }
    }
}

fn list_files(dir: &Path) -> Result<BTreeSet<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            out.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(out)
}

/// Matched names and the names present on only one side.
pub fn match_names(inputs: &BTreeSet<String>, gts: &BTreeSet<String>) -> (Vec<String>, Vec<String>) {
    let matched = inputs.intersection(gts).cloned().collect();
    let orphans = inputs.symmetric_difference(gts).cloned().collect();
    (matched, orphans)
}

/// A paired dataset plus the files that had no partner.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub pairs: Vec<ImagePair>,
    pub orphans: Vec<String>,
}

/// Name a file is paired under: RAW inputs pair with the PNG of the same stem.
fn pairing_key(name: &str) -> String {
    if is_raw_path(Path::new(name)) {
        let stem = Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy())
            .unwrap_or_default();
        format!("{stem}.png")
    } else {
        name.to_string()
    }
}

/// (input, gt) file paths.
pub type PathPairs = Vec<(PathBuf, PathBuf)>;

/// Paths of name-matched files in the two directories, plus the orphans.
pub fn pair_paths(input_dir: &Path, gt_dir: &Path) -> Result<(PathPairs, Vec<String>)> {
    let inputs: BTreeMap<String, String> = list_files(input_dir)?
        .into_iter()
        .map(|n| (pairing_key(&n), n))
        .collect();
    let keys: BTreeSet<String> = inputs.keys().cloned().collect();
    let (matched, orphans) = match_names(&keys, &list_files(gt_dir)?);
    let orphans: Vec<String> = orphans
        .into_iter()
        .map(|k| inputs.get(&k).cloned().unwrap_or(k))
        .collect();
    if matched.is_empty() {
        return Err(Error::UnmatchedFiles { orphans });
    }
    if !orphans.is_empty() {
        log::warn!("{} unmatched files: {}", orphans.len(), orphans.join(", "));
    }
    let paths = matched
        .iter()
        .map(|k| (input_dir.join(&inputs[k]), gt_dir.join(k)))
        .collect();
    Ok((paths, orphans))
}

/// Loads every matched pair; RAW inputs go through packing and normalization.
pub fn load_pair_dir(input_dir: &Path, gt_dir: &Path) -> Result<PairSet> {
    let (paths, orphans) = pair_paths(input_dir, gt_dir)?;
    let pairs = paths
        .into_iter()
        .map(|(i, g)| {
            Ok(ImagePair {
                input: load_input(&i)?,
                gt: load_image(&g)?,
                id: i
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PairSet { pairs, orphans })
}
