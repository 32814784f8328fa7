//! Training objective: L1, MS-SSIM and contrastive terms and their mix.

mod contrastive;
mod ssim;

pub use contrastive::{
    contrastive_graph, contrastive_loss, FeatureExtractor, IdentityExtractor, RandomConvExtractor, DENOMINATOR_FLOOR,
    EXTRACTOR_WIDTHS,
};
pub use ssim::{
    gaussian_window, ms_ssim, ms_ssim_graph, ms_ssim_loss, ssim_graph, ssim_mean, MsSsimConfig, MS_SSIM_WEIGHTS,
    SSIM_TERM_FLOOR,
};

use crate::config::{join_list, KvConfig};
use crate::engine::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Per feature layer, summing to one.
    pub layer_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.2,
            lambda3: 0.1,
            layer_weights: vec![0.25; EXTRACTOR_WIDTHS.len()],
        }
    }
}

impl LossWeights {
    /// Pure L1.
    pub fn l1_only() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3];
        if lambdas.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err(Error::config("loss.lambda", "weights must be finite and non-negative"));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::config("loss.lambda", "at least one weight must be positive"));
        }
        if self.layer_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::config("loss.layer_weights", "must be non-negative"));
        }
        let s: f64 = self.layer_weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::config("loss.layer_weights", format!("must sum to 1, got {s}")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("lambda1", self.lambda1);
        kv.set("lambda2", self.lambda2);
        kv.set("lambda3", self.lambda3);
        kv.set("layer_weights", join_list(&self.layer_weights));
        kv
    }

    pub fn from_kv(kv: &KvConfig, base: LossWeights) -> Result<Self> {
        let lw = Self {
            lambda1: kv.get_or("lambda1", base.lambda1)?,
            lambda2: kv.get_or("lambda2", base.lambda2)?,
            lambda3: kv.get_or("lambda3", base.lambda3)?,
            layer_weights: kv.get_list("layer_weights")?.unwrap_or(base.layer_weights),
        };
        lw.validate()?;
        Ok(lw)
    }
}

pub fn l1_graph<T: Element>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(gt).to_vec(),
        });
    }
    let d = g.sub(pred, gt)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Mean absolute difference.
pub fn l1_loss<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let v = l1_graph(&mut g, p, t)?;
    Ok(g.value(v).item().to_f64())
}

/// Graph handles of the mixed loss; terms with zero weight are skipped.
#[derive(Clone, Copy, Debug)]
pub struct MixLoss {
    pub l1: Option<Var>,
    /// `1 - MS-SSIM`.
    pub ms_ssim: Option<Var>,
    pub contrastive: Option<Var>,
    pub total: Var,
}

/// Scalar readout of a [`MixLoss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixLossValues {
    pub l1: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub contrastive: Option<f64>,
    pub total: f64,
}

impl MixLoss {
    pub fn values<T: Element>(&self, g: &Graph<T>) -> MixLossValues {
        let read = |v: Option<Var>| v.map(|v| g.value(v).item().to_f64());
        MixLossValues {
            l1: read(self.l1),
            ms_ssim: read(self.ms_ssim),
            contrastive: read(self.contrastive),
            total: g.value(self.total).item().to_f64(),
        }
    }
}

/// `l1 * L1 + l2 * (1 - MS-SSIM) + l3 * sum_i w_i * CL_i`.
pub fn mix_loss_graph<T: Element>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    input: Var,
    lw: &LossWeights,
    cfg: &MsSsimConfig,
    fx: &dyn FeatureExtractor<T>,
) -> Result<MixLoss> {
    lw.validate()?;
    let mut terms = Vec::new();
    let l1 = if lw.lambda1 > 0.0 {
        let v = l1_graph(g, pred, gt)?;
        terms.push(g.scale(v, lw.lambda1)?);
        Some(v)
    } else {
        None
    };
    let ms = if lw.lambda2 > 0.0 {
        let s = ms_ssim_graph(g, pred, gt, cfg)?;
        let neg = g.scale(s, -1.0)?;
        let v = g.add_scalar(neg, 1.0)?;
        terms.push(g.scale(v, lw.lambda2)?);
        Some(v)
    } else {
        None
    };
    let cl = if lw.lambda3 > 0.0 {
        let v = contrastive_graph(g, pred, gt, input, fx, &lw.layer_weights)?;
        terms.push(g.scale(v, lw.lambda3)?);
        Some(v)
    } else {
        None
    };
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(MixLoss {
        l1,
        ms_ssim: ms,
        contrastive: cl,
        total,
    })
}

pub fn mix_loss<T: Element>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    input: &Tensor<T>,
    lw: &LossWeights,
    cfg: &MsSsimConfig,
    fx: &dyn FeatureExtractor<T>,
) -> Result<MixLossValues> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let i = g.constant(input.clone());
    let m = mix_loss_graph(&mut g, p, t, i, lw, cfg, fx)?;
    Ok(m.values(&g))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn triple() -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = Tensor::uniform(vec![1, 3, 16, 16], 0.1, 0.9, &mut rng);
        let input = gt.map(|v| v * 0.3);
        let pred = Tensor::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut rng);
        (pred, gt, input)
    }

    #[test]
    fn l1_values() {
        let (_, gt, _) = triple();
        assert_eq!(l1_loss(&gt, &gt).unwrap(), 0.0);
        let off = gt.map(|v| v + 0.5);
        assert!((l1_loss(&off, &gt).unwrap() - 0.5).abs() < 1e-12);
        assert!(l1_loss(&gt, &Tensor::zeros(vec![1, 3, 16, 8])).is_err());
    }

    #[test]
    fn perfect_prediction_zero_mix() {
        let (_, gt, input) = triple();
        let fx = RandomConvExtractor::standard(3, 0);
        let v = mix_loss(&gt, &gt, &input, &LossWeights::default(), &MsSsimConfig::default(), &fx).unwrap();
        assert!(v.total.abs() < 1e-9, "{v:?}");
    }

    #[test]
    fn l1_only_is_exactly_l1() {
        let (pred, gt, input) = triple();
        let lw = LossWeights {
            lambda1: 0.7,
            ..LossWeights::l1_only()
        };
        let v = mix_loss(&pred, &gt, &input, &lw, &MsSsimConfig::default(), &IdentityExtractor).unwrap();
        assert_eq!(v.total, 0.7 * l1_loss(&pred, &gt).unwrap());
        assert!(v.ms_ssim.is_none() && v.contrastive.is_none());
    }

    #[test]
    fn weights_are_validated() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..LossWeights::default()
        };
        assert!(zero.validate().is_err());
        let bad = LossWeights {
            layer_weights: vec![0.5, 0.6],
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let lw = LossWeights {
            lambda2: 0.5,
            layer_weights: vec![0.1, 0.2, 0.3, 0.4],
            ..LossWeights::default()
        };
        let back = LossWeights::from_kv(
            &KvConfig::parse(&lw.to_kv().to_string()).unwrap(),
            LossWeights::default(),
        );
        assert_eq!(back.unwrap(), lw);
    }
}
