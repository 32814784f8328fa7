//! PSNR and SSIM, plus per-image CSV reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};
use crate::losses::ssim_mean;

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images match.
pub fn psnr<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, max_val: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let n = pred.numel().max(1) as f64;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

fn batched<T: Element>(t: &Tensor<T>) -> Result<Tensor<f64>> {
    match t.rank() {
        3 => Ok(t.cast::<f64>().unsqueeze0()),
        4 => Ok(t.cast()),
        _ => Err(Error::invalid(
            "ssim",
            format!("expected [C, H, W] or [N, C, H, W], got {:?}", t.shape()),
        )),
    }
}

/// Channel-averaged SSIM (11 px Gaussian window, sigma 1.5).
pub fn ssim<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    ssim_mean(&batched(pred)?, &batched(gt)?)
}

/// Formats a dB value, writing `inf` for identical images.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub path: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, path: impl Into<String>, psnr_db: f64, ssim: f64) {
        self.rows.push(MetricRow {
            path: path.into(),
            psnr_db,
            ssim,
        });
    }

    /// Arithmetic means of (psnr_db, ssim).
    pub fn mean(&self) -> (f64, f64) {
        let n = self.rows.len().max(1) as f64;
        let p = self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let s = self.rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        (p, s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.path, format_db(r.psnr_db), r.ssim);
        }
        let (p, s) = self.mean();
        let _ = writeln!(out, "mean,{},{}", format_db(p), s);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses a report written by [`MetricReport::to_csv`], dropping the mean row.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut report = Self::default();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.rsplitn(3, ',').collect();
            let [s, p, path] = fields[..] else {
                return Err(Error::Format(format!("bad report row `{line}`")));
            };
            if path == "mean" {
                continue;
            }
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number `{v}` in `{line}`")))
            };
            report.push(path, num(p)?, num(s)?);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn psnr_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::uniform(vec![3, 8, 8], 0.0, 0.9, &mut rng);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let off = x.map(|v| v + 0.1);
        assert!((psnr(&off, &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &Tensor::zeros(vec![3, 8, 7]), 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(vec![3, 16, 16], 0.0, 1.0, &mut rng);
        let noise = Tensor::<f64>::randn(vec![3, 16, 16], 1.0, &mut rng);
        let vals: Vec<f64> = [0.01, 0.05, 0.2]
            .iter()
            .map(|&a| psnr(&x.zip_map(&noise, |v, n| v + a * n).unwrap(), &x, 1.0).unwrap())
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2]);
    }

    #[test]
    fn ssim_accepts_chw() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::uniform(vec![3, 16, 16], 0.0, 1.0, &mut rng);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert!(ssim(&Tensor::<f32>::zeros(vec![3, 10, 16]), &Tensor::zeros(vec![3, 10, 16])).is_err());
    }

    #[test]
    fn csv_round_trip_and_mean() {
        let mut r = MetricReport::default();
        r.push("a.png", f64::INFINITY, 1.0);
        r.push("b.png", 20.0, 0.5);
        let text = r.to_csv();
        assert!(text.contains("a.png,inf,1"));
        assert!(text.ends_with("mean,inf,0.75\n"));
        assert_eq!(MetricReport::parse_csv(&text).unwrap(), r);
    }
}
