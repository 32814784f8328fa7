//! Whole-image inference: reflection padding to the network's spatial
//! multiple, forward pass, crop and clamp.

pub use crate::data::load_input;
use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};
use crate::network::{LanModel, SPATIAL_MULTIPLE};

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Pads `[C, H, W]` on the bottom and right by reflection up to the next
/// multiple of `multiple`.
pub fn reflect_pad<T: Element>(t: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let [c, h, w] = <[usize; 3]>::try_from(t.shape())
        .map_err(|_| Error::invalid("reflect_pad", format!("expected [C, H, W], got {:?}", t.shape())))?;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::invalid(
            "reflect_pad",
            format!("cannot pad an empty image {:?}", t.shape()),
        ));
    }
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let d = t.data();
    Ok(Tensor::from_fn(vec![c, ph, pw], |i| {
        d[(i[0] * h + reflect(i[1] as isize, h)) * w + reflect(i[2] as isize, w)]
    }))
}

/// Top-left `[C, h, w]` window of a `[C, H, W]` tensor.
pub fn crop_top_left<T: Element>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    if s[1] == h && s[2] == w {
        return t.clone();
    }
    let d = t.data();
    Tensor::from_fn(vec![s[0], h, w], |i| d[(i[0] * s[1] + i[1]) * s[2] + i[2]])
}

/// Runs the network on one `[C, H, W]` image of any size; the result is
/// `[3, H * s, W * s]` clamped to [0, 1].
pub fn enhance<T: Element>(model: &LanModel<T>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != model.config.in_channels {
        return Err(Error::invalid(
            "enhance",
            format!("model expects [{}, H, W] input, got {:?}", model.config.in_channels, s),
        ));
    }
    let (h, w) = (s[1], s[2]);
    let padded = reflect_pad(image, SPATIAL_MULTIPLE)?;
    let out = model.forward(&padded.cast::<T>().unsqueeze0())?.index_first(0);
    let up = model.config.upscale;
    Ok(crop_top_left(&out.cast::<f32>(), h * up, w * up).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_lan, LanConfig};

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let t = Tensor::<f32>::from_fn(vec![2, 5, 3], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f32);
        let p = reflect_pad(&t, 8).unwrap();
        assert_eq!(p.shape(), &[2, 8, 8]);
        assert_eq!(p.at(&[0, 5, 0]), t.at(&[0, 3, 0]));
        assert_eq!(p.at(&[1, 0, 3]), t.at(&[1, 0, 1]));
        assert_eq!(crop_top_left(&p, 5, 3), t);
        assert!(reflect_pad(&Tensor::<f32>::zeros(vec![3, 0, 4]), 8).is_err());
    }

    #[test]
    fn odd_sizes_keep_their_extent() {
        let model = build_lan::<f32>(&LanConfig::preset("tiny").unwrap()).unwrap();
        let img = Tensor::<f32>::full(vec![3, 13, 7], 0.3);
        let out = enhance(&model, &img).unwrap();
        assert_eq!(out.shape(), &[3, 13, 7]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
