use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::init::conv_params;
use crate::engine::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor for the distance to the degraded input.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Frozen network mapping an image to a list of feature maps.
///
/// Its own tensors enter the graph as constants, so gradients reach the
/// input image but never the extractor.
pub trait FeatureExtractor<T: Element> {
    fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>>;

    fn layer_count(&self) -> usize;
}

/// Returns the image itself as the only feature map.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Element> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, _g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }

    fn layer_count(&self) -> usize {
        1
    }
}

/// Seeded random stack of stride-2 3x3 convolutions with leaky ReLU,
/// tapped after every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomConvExtractor<T> {
    stages: Vec<(Tensor<T>, Tensor<T>)>,
    slope: f64,
}

pub const EXTRACTOR_WIDTHS: [usize; 4] = [8, 16, 32, 64];

impl<T: Element> RandomConvExtractor<T> {
    pub fn new(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = in_channels;
        let stages = widths
            .iter()
            .map(|&w| {
                let p = conv_params(w, cin, 3, &mut rng);
                cin = w;
                p
            })
            .collect();
        Self { stages, slope: 0.2 }
    }

    pub fn standard(in_channels: usize, seed: u64) -> Self {
        Self::new(in_channels, &EXTRACTOR_WIDTHS, seed)
    }
}

impl<T: Element> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            h = g.conv2d(h, wv, Some(bv), 2, 1)?;
            h = g.leaky_relu(h, self.slope)?;
            out.push(h);
        }
        Ok(out)
    }

    fn layer_count(&self) -> usize {
        self.stages.len()
    }
}

fn mean_abs_diff<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `sum_i w_i * D(G_i(pred), G_i(gt)) / max(D(G_i(pred), G_i(input)), floor)`.
pub fn contrastive_graph<T: Element>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    input: Var,
    fx: &dyn FeatureExtractor<T>,
    weights: &[f64],
) -> Result<Var> {
    for other in [gt, input] {
        if g.shape(pred) != g.shape(other) {
            return Err(Error::ShapeMismatch {
                op: "contrastive_loss",
                lhs: g.shape(pred).to_vec(),
                rhs: g.shape(other).to_vec(),
            });
        }
    }
    if g.value(input).data() == g.value(gt).data() {
        return Err(Error::invalid(
            "contrastive_loss",
            "degenerate anchor: the input image equals the ground truth, so the negative distance vanishes",
        ));
    }
    if weights.len() != fx.layer_count() {
        return Err(Error::invalid(
            "contrastive_loss",
            format!(
                "{} layer weights for {} feature layers",
                weights.len(),
                fx.layer_count()
            ),
        ));
    }
    let fp = fx.features(g, pred)?;
    let fg = fx.features(g, gt)?;
    let fi = fx.features(g, input)?;
    let mut total: Option<Var> = None;
    for (i, &w) in weights.iter().enumerate() {
        let pos = mean_abs_diff(g, fp[i], fg[i])?;
        let neg = mean_abs_diff(g, fp[i], fi[i])?;
        let neg = g.clamp_min(neg, DENOMINATOR_FLOOR)?;
        let ratio = g.div(pos, neg)?;
        let term = g.scale(ratio, w)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("contrastive_loss", "no feature layers"))
}

pub fn contrastive_loss<T: Element>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    input: &Tensor<T>,
    fx: &dyn FeatureExtractor<T>,
    weights: &[f64],
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let i = g.constant(input.clone());
    let v = contrastive_graph(&mut g, p, t, i, fx, weights)?;
    Ok(g.value(v).item().to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images() -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = Tensor::uniform(vec![1, 3, 16, 16], 0.2, 1.0, &mut rng);
        let input = gt.map(|v| v * 0.2);
        (gt, input)
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let (gt, input) = images();
        let fx = RandomConvExtractor::standard(3, 0);
        assert_eq!(contrastive_loss(&gt, &gt, &input, &fx, &[0.25; 4]).unwrap(), 0.0);
    }

    #[test]
    fn predicting_the_input_is_positive() {
        let (gt, input) = images();
        let fx = RandomConvExtractor::standard(3, 0);
        let v = contrastive_loss(&input, &gt, &input, &fx, &[0.25; 4]).unwrap();
        assert!(v > 0.0 && v.is_finite());
    }

    #[test]
    fn midpoint_under_identity_features_is_one() {
        let (gt, input) = images();
        let mid = gt.zip_map(&input, |a, b| (a + b) / 2.0).unwrap();
        let v = contrastive_loss(&mid, &gt, &input, &IdentityExtractor, &[1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn degenerate_anchor_is_rejected() {
        let (gt, _) = images();
        let err = contrastive_loss(&gt, &gt, &gt, &IdentityExtractor, &[1.0])
            .unwrap_err()
            .to_string();
        assert!(err.contains("degenerate anchor"), "{err}");
    }

    #[test]
    fn extractor_is_deterministic_and_frozen() {
        let a = RandomConvExtractor::<f64>::standard(3, 7);
        assert_eq!(a, RandomConvExtractor::standard(3, 7));
        let (gt, input) = images();
        let mut g = Graph::new();
        let p = g.param("pred", &input);
        let t = g.constant(gt);
        let i = g.constant(input.map(|v| v * 0.5));
        let loss = contrastive_graph(&mut g, p, t, i, &a, &[0.25; 4]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params().count(), 1);
        assert!(grads.wrt(p).unwrap().data().iter().any(|&v| v != 0.0));
    }
}
