//! Gaussian-window structural similarity, single- and multi-scale.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::engine::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Canonical per-scale exponents, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Lower bound applied to the similarity terms before exponentiation.
pub const SSIM_TERM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MsSsimConfig {
    pub scales: usize,
    /// Luminance exponents; only the coarsest one is used.
    pub alphas: Vec<f64>,
    /// Contrast-structure exponents, one per scale.
    pub betas: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            scales: 5,
            alphas: MS_SSIM_WEIGHTS.to_vec(),
            betas: MS_SSIM_WEIGHTS.to_vec(),
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl MsSsimConfig {
    /// Plain SSIM: one scale, unit exponents.
    pub fn single_scale() -> Self {
        Self {
            scales: 1,
            alphas: vec![1.0],
            betas: vec![1.0],
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.alphas.len() < self.scales || self.betas.len() < self.scales {
            return Err(Error::config("ms_ssim.scales", "need one alpha and one beta per scale"));
        }
        if self.alphas[..self.scales]
            .iter()
            .chain(&self.betas[..self.scales])
            .any(|&e| e <= 0.0 || !e.is_finite())
        {
            return Err(Error::config("ms_ssim.weights", "exponents must be positive"));
        }
        if self.window == 0 || self.window.is_multiple_of(2) || self.sigma <= 0.0 {
            return Err(Error::config("ms_ssim.window", "window must be odd and sigma positive"));
        }
        Ok(())
    }

    /// Largest usable scale count for a `min_extent`-sized image.
    pub fn max_scales(&self, min_extent: usize) -> usize {
        let mut m = 0;
        while m < self.scales && self.window << m <= min_extent {
            m += 1;
        }
        m
    }

    /// The first `m` scales with exponents renormalized to the original total.
    pub fn truncated(&self, m: usize) -> Self {
        if m >= self.scales {
            return self.clone();
        }
        let renorm = |v: &[f64]| {
            let full: f64 = v[..self.scales].iter().sum();
            let kept: f64 = v[..m].iter().sum();
            v[..m].iter().map(|x| x * full / kept).collect()
        };
        Self {
            scales: m,
            alphas: renorm(&self.alphas),
            betas: renorm(&self.betas),
            ..self.clone()
        }
    }
}

/// Normalized 2-D Gaussian window `[1, 1, k, k]`.
pub fn gaussian_window<T: Element>(size: usize, sigma: f64) -> Tensor<T> {
    let c = (size / 2) as f64;
    let g1: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
    Tensor::from_fn(vec![1, 1, size, size], |i| T::from_f64(g1[i[2]] * g1[i[3]]))
}

/// Luminance and contrast-structure maps of two `[B, 1, H, W]` planes.
fn ssim_maps<T: Element>(g: &mut Graph<T>, p: Var, t: Var, window: Var, c1: f64, c2: f64) -> Result<(Var, Var)> {
    let filt = |g: &mut Graph<T>, x: Var| g.conv2d(x, window, None, 1, 0);
    let mu_p = filt(g, p)?;
    let mu_t = filt(g, t)?;
    let pp = g.mul(p, p)?;
    let tt = g.mul(t, t)?;
    let pt = g.mul(p, t)?;
    let e_pp = filt(g, pp)?;
    let e_tt = filt(g, tt)?;
    let e_pt = filt(g, pt)?;
    let mu_pp = g.mul(mu_p, mu_p)?;
    let mu_tt = g.mul(mu_t, mu_t)?;
    let mu_pt = g.mul(mu_p, mu_t)?;
    let var_p = g.sub(e_pp, mu_pp)?;
    let var_t = g.sub(e_tt, mu_tt)?;
    let cov = g.sub(e_pt, mu_pt)?;

    let l_num = g.scale(mu_pt, 2.0)?;
    let l_num = g.add_scalar(l_num, c1)?;
    let l_den = g.add(mu_pp, mu_tt)?;
    let l_den = g.add_scalar(l_den, c1)?;
    let l = g.div(l_num, l_den)?;

    let cs_num = g.scale(cov, 2.0)?;
    let cs_num = g.add_scalar(cs_num, c2)?;
    let cs_den = g.add(var_p, var_t)?;
    let cs_den = g.add_scalar(cs_den, c2)?;
    let cs = g.div(cs_num, cs_den)?;
    Ok((l, cs))
}

fn as_planes<T: Element>(g: &mut Graph<T>, x: Var, op: &'static str) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid(op, format!("expected [N, C, H, W], got {s:?}")));
    }
    g.reshape(x, vec![s[0] * s[1], 1, s[2], s[3]])
}

static REDUCED_WARNING: AtomicBool = AtomicBool::new(false);

/// MS-SSIM of `pred` and `gt` (`[N, C, H, W]`) as a graph scalar.
///
/// Scales that do not fit the image are dropped (with a one-time warning)
/// and the remaining exponents renormalized.
pub fn ms_ssim_graph<T: Element>(g: &mut Graph<T>, pred: Var, gt: Var, cfg: &MsSsimConfig) -> Result<Var> {
    cfg.validate()?;
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::ShapeMismatch {
            op: "ms_ssim",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(gt).to_vec(),
        });
    }
    let mut p = as_planes(g, pred, "ms_ssim")?;
    let mut t = as_planes(g, gt, "ms_ssim")?;
    let min_extent = g.shape(p)[2].min(g.shape(p)[3]);
    let m = cfg.max_scales(min_extent);
    if m == 0 {
        return Err(Error::invalid(
            "ms_ssim",
            format!(
                "images of extent {min_extent} are smaller than the {} px window",
                cfg.window
            ),
        ));
    }
    if m < cfg.scales && !REDUCED_WARNING.swap(true, Ordering::Relaxed) {
        log::warn!(
            "ms_ssim: {min_extent} px images support {m} of {} scales; using the first {m} with renormalized exponents",
            cfg.scales
        );
    }
    let cfg = cfg.truncated(m);
    let window = g.constant(gaussian_window(cfg.window, cfg.sigma));
    let mut value: Option<Var> = None;
    for scale in 0..m {
        let (l, cs) = ssim_maps(g, p, t, window, cfg.c1(), cfg.c2())?;
        let factor = if scale + 1 == m {
            let lcs = g.mul(l, cs)?;
            let s = g.mean(lcs)?;
            let s = g.clamp_min(s, SSIM_TERM_FLOOR)?;
            let mut f = g.powf(s, cfg.betas[scale])?;
            let extra = cfg.alphas[scale] - cfg.betas[scale];
            if extra != 0.0 {
                let lm = g.mean(l)?;
                let lm = g.clamp_min(lm, SSIM_TERM_FLOOR)?;
                let lf = g.powf(lm, extra)?;
                f = g.mul(f, lf)?;
            }
            f
        } else {
            let c = g.mean(cs)?;
            let c = g.clamp_min(c, SSIM_TERM_FLOOR)?;
            g.powf(c, cfg.betas[scale])?
        };
        value = Some(match value {
            None => factor,
            Some(v) => g.mul(v, factor)?,
        });
        if scale + 1 < m {
            p = g.avg_pool2(p)?;
            t = g.avg_pool2(t)?;
        }
    }
    Ok(value.expect("at least one scale"))
}

/// Mean of the single-scale SSIM map, without the floor.
pub fn ssim_graph<T: Element>(g: &mut Graph<T>, pred: Var, gt: Var, cfg: &MsSsimConfig) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(gt).to_vec(),
        });
    }
    let p = as_planes(g, pred, "ssim")?;
    let t = as_planes(g, gt, "ssim")?;
    let (h, w) = (g.shape(p)[2], g.shape(p)[3]);
    if h < cfg.window || w < cfg.window {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} is smaller than the {} px window", cfg.window),
        ));
    }
    let window = g.constant(gaussian_window(cfg.window, cfg.sigma));
    let (l, cs) = ssim_maps(g, p, t, window, cfg.c1(), cfg.c2())?;
    let map = g.mul(l, cs)?;
    g.mean(map)
}

fn eval_pair<T: Element>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let v = f(&mut g, p, t)?;
    Ok(g.value(v).item().to_f64())
}

pub fn ms_ssim<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, cfg: &MsSsimConfig) -> Result<f64> {
    eval_pair(pred, gt, |g, p, t| ms_ssim_graph(g, p, t, cfg))
}

pub fn ms_ssim_loss<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, cfg: &MsSsimConfig) -> Result<f64> {
    Ok(1.0 - ms_ssim(pred, gt, cfg)?)
}

/// Single-scale SSIM map mean of `[N, C, H, W]` images.
pub fn ssim_mean<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    eval_pair(pred, gt, |g, p, t| ssim_graph(g, p, t, &MsSsimConfig::single_scale()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn window_sums_to_one() {
        let w = gaussian_window::<f64>(11, 1.5);
        assert!((w.sum() - 1.0).abs() < 1e-14);
        assert_eq!(w.at(&[0, 0, 5, 5]), w.data().iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::uniform(vec![1, 3, 48, 48], 0.0, 1.0, &mut rng);
        assert!((ms_ssim(&x, &x, &MsSsimConfig::default()).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim_mean(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::uniform(vec![1, 2, 40, 40], 0.0, 1.0, &mut rng);
        let b = a.map(|v| (v * 0.7 + 0.1).min(1.0));
        let cfg = MsSsimConfig::default();
        let ab = ms_ssim(&a, &b, &cfg).unwrap();
        let ba = ms_ssim(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0 && ab > 0.0);
    }

    #[test]
    fn scales_reduce_to_fit() {
        let cfg = MsSsimConfig::default();
        assert_eq!(cfg.max_scales(176), 5);
        assert_eq!(cfg.max_scales(175), 4);
        assert_eq!(cfg.max_scales(64), 3);
        assert_eq!(cfg.max_scales(10), 0);
        let t = cfg.truncated(3);
        assert!((t.betas.iter().sum::<f64>() - MS_SSIM_WEIGHTS.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn too_small_is_rejected() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 8, 8]);
        assert!(ms_ssim(&x, &x, &MsSsimConfig::default()).is_err());
        assert!(ssim_mean(&x, &x).is_err());
    }
}
