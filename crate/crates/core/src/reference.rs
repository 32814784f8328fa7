//! Direct loop implementations used as independent oracles by the
//! verification suite. Slow, double precision, no shared kernels.

use crate::attention::LasaParams;
use crate::engine::Tensor;

/// Zero-padded cross-correlation, `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = <[usize; 4]>::try_from(x.shape()).expect("rank 4 input");
    let [co, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).expect("rank 4 kernel");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor::from_fn(vec![n, co, oh, ow], |i| {
        let (b_i, o, y, xo) = (i[0], i[1], i[2], i[3]);
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xo * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    acc += x.at(&[b_i, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                }
            }
        }
        acc
    })
}

/// `[m, k] x [k, n]`.
pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(vec![m, n], |i| {
        (0..k).map(|j| a.at(&[i[0], j]) * b.at(&[j, i[1]])).sum()
    })
}

pub fn l1(pred: &Tensor<f64>, gt: &Tensor<f64>) -> f64 {
    let mut acc = 0.0;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        acc += (p - g).abs();
    }
    acc / pred.numel() as f64
}

/// `[N, C s^2, H, W] -> [N, C, H s, W s]`.
pub fn pixel_shuffle(x: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let [n, cs, h, w] = <[usize; 4]>::try_from(x.shape()).expect("rank 4 input");
    let c = cs / (s * s);
    Tensor::from_fn(vec![n, c, h * s, w * s], |i| {
        let (y, xo) = (i[2], i[3]);
        let ch = i[1] * s * s + (y % s) * s + xo % s;
        x.at(&[i[0], ch, y / s, xo / s])
    })
}

/// Everything LASA computes for one `[C, H, W]` map, token by token.
#[derive(Clone, Debug)]
pub struct LasaReference {
    pub attention: Tensor<f64>,
    pub ax: Tensor<f64>,
    pub ay: Tensor<f64>,
    pub a3d: Tensor<f64>,
    pub out: Tensor<f64>,
}

fn affine(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|r| b.data()[r] + (0..cols).map(|c| w.at(&[r, c]) * x[c]).sum::<f64>())
        .collect()
}

pub fn lasa(f: &Tensor<f64>, p: &LasaParams<f64>) -> LasaReference {
    let [c, h, w] = <[usize; 3]>::try_from(f.shape()).expect("rank 3 map");
    let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(w + h);
    for i in 0..w {
        tokens.push(
            (0..c)
                .map(|ch| (0..h).map(|j| f.at(&[ch, j, i])).sum::<f64>() / h as f64)
                .collect(),
        );
    }
    for j in 0..h {
        tokens.push(
            (0..c)
                .map(|ch| (0..w).map(|i| f.at(&[ch, j, i])).sum::<f64>() / w as f64)
                .collect(),
        );
    }
    let t = tokens.len();
    let qkv: Vec<Vec<f64>> = tokens
        .iter()
        .map(|tok| affine(&p.qkv_weight, &p.qkv_bias, tok))
        .collect();
    let scale = if p.scale_qk { 1.0 / (c as f64).sqrt() } else { 1.0 };
    let mut attention = vec![0.0; t * t];
    let mut gates: Vec<Vec<f64>> = Vec::with_capacity(t);
    for a in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|b| (0..c).map(|k| qkv[a][k] * qkv[b][c + k]).sum::<f64>() * scale)
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut global = tokens[a].clone();
        for b in 0..t {
            let wgt = exps[b] / z;
            attention[a * t + b] = wgt;
            for k in 0..c {
                global[k] += wgt * qkv[b][2 * c + k];
            }
        }
        let hidden: Vec<f64> = affine(&p.mlp_w1, &p.mlp_b1, &global)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        gates.push(
            affine(&p.mlp_w2, &p.mlp_b2, &hidden)
                .into_iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
        );
    }
    let ax = Tensor::from_fn(vec![c, w], |i| gates[i[1]][i[0]]);
    let ay = Tensor::from_fn(vec![c, h], |i| gates[w + i[1]][i[0]]);
    let a3d = Tensor::from_fn(vec![c, h, w], |i| ax.at(&[i[0], i[2]]) * ay.at(&[i[0], i[1]]));
    let out = Tensor::from_fn(vec![c, h, w], |i| f.at(i) * a3d.at(i));
    LasaReference {
        attention: Tensor::new(vec![t, t], attention).expect("t x t"),
        ax,
        ay,
        a3d,
        out,
    }
}

/// Mean SSIM over every channel and valid window position of two
/// `[C, H, W]` images.
pub fn ssim(x: &Tensor<f64>, y: &Tensor<f64>, window: usize, sigma: f64, k1: f64, k2: f64, data_range: f64) -> f64 {
    let [c, h, w] = <[usize; 3]>::try_from(x.shape()).expect("rank 3 image");
    let center = (window / 2) as f64;
    let mut kern = vec![0.0; window * window];
    for ky in 0..window {
        for kx in 0..window {
            let d2 = (ky as f64 - center).powi(2) + (kx as f64 - center).powi(2);
            kern[ky * window + kx] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|v| *v /= total);
    let c1 = (k1 * data_range).powi(2);
    let c2 = (k2 * data_range).powi(2);
    let (oh, ow) = (h - window + 1, w - window + 1);
    let mut acc = 0.0;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..window {
                    for kx in 0..window {
                        let g = kern[ky * window + kx];
                        let a = x.at(&[ch, oy + ky, ox + kx]);
                        let b = y.at(&[ch, oy + ky, ox + kx]);
                        mx += g * a;
                        my += g * b;
                        sxx += g * a * a;
                        syy += g * b * b;
                        sxy += g * a * b;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    acc / (c * oh * ow) as f64
}

/// Adam recurrence on a flat parameter vector, one gradient per step.
pub fn adam(params: &[f64], grads: &[Vec<f64>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (step, g) in grads.iter().enumerate() {
        let t = (step + 1) as i32;
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - beta1.powi(t));
            let v_hat = v[i] / (1.0 - beta2.powi(t));
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::engine::{kernels, Adam, ParamStore};
    use crate::losses::{l1_loss, ssim_mean};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn conv_and_matmul_match_kernels() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(vec![2, 3, 7, 6], 1.0, &mut r);
        let w = Tensor::<f64>::randn(vec![4, 3, 3, 3], 1.0, &mut r);
        let b = Tensor::<f64>::randn(vec![4], 1.0, &mut r);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let fast = kernels::conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            assert!(fast.max_abs_diff(&conv2d(&x, &w, Some(&b), stride, pad)) < 1e-12);
        }
        let a = Tensor::<f64>::randn(vec![5, 3], 1.0, &mut r);
        let bm = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut r);
        assert!(kernels::matmul(&a, &bm).unwrap().max_abs_diff(&matmul(&a, &bm)) < 1e-12);
    }

    #[test]
    fn shuffle_and_losses_match() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(vec![1, 12, 3, 2], 1.0, &mut r);
        assert_eq!(kernels::pixel_shuffle(&x, 2).unwrap(), pixel_shuffle(&x, 2));
        let p = Tensor::<f64>::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut r);
        let g = Tensor::<f64>::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut r);
        assert!((l1_loss(&p, &g).unwrap() - l1(&p, &g)).abs() < 1e-12);
        let s = ssim(&p.index_first(0), &g.index_first(0), 11, 1.5, 0.01, 0.03, 1.0);
        assert!((ssim_mean(&p, &g).unwrap() - s).abs() < 1e-8);
    }

    #[test]
    fn adam_matches_optimizer() {
        let mut r = rng();
        let start = Tensor::<f64>::randn(vec![5], 1.0, &mut r);
        let grads: Vec<Vec<f64>> = (0..4)
            .map(|_| Tensor::<f64>::randn(vec![5], 1.0, &mut r).into_data())
            .collect();
        let mut store = ParamStore::new();
        store.insert("p", start.clone()).unwrap();
        let mut opt = Adam::new(1e-3);
        for g in &grads {
            let gt = Tensor::new(vec![5], g.clone()).unwrap();
            opt.step_with(&mut store, [("p", &gt)]).unwrap();
        }
        let expect = adam(start.data(), &grads, 1e-3, 0.9, 0.999, 1e-8);
        for (a, b) in store.get("p").unwrap().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
