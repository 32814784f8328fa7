//! CBAM and SimAM, the 3-D attention baselines LASA is compared against.

use rand::Rng;

use super::lasa::hidden_width;
use crate::engine::init::{conv_params, linear_params};
use crate::engine::{Element, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Default SimAM regulariser.
pub const SIMAM_LAMBDA: f64 = 1e-4;

/// CBAM kernel for the spatial gate.
pub const CBAM_SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct CbamParams<T> {
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
    /// `[1, 2, 7, 7]` over (channel mean, channel max).
    pub spatial_w: Tensor<T>,
    pub spatial_b: Tensor<T>,
}

impl<T: Element> CbamParams<T> {
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = hidden_width(channels, reduction);
        let (mlp_w1, mlp_b1) = linear_params(hidden, channels, rng);
        let (mlp_w2, mlp_b2) = linear_params(channels, hidden, rng);
        let (spatial_w, spatial_b) = conv_params(1, 2, CBAM_SPATIAL_KERNEL, rng);
        Self {
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            spatial_w,
            spatial_b,
        }
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = hidden_width(channels, reduction);
        let k = CBAM_SPATIAL_KERNEL;
        Self {
            mlp_w1: Tensor::zeros(vec![hidden, channels]),
            mlp_b1: Tensor::zeros(vec![hidden]),
            mlp_w2: Tensor::zeros(vec![channels, hidden]),
            mlp_b2: Tensor::zeros(vec![channels]),
            spatial_w: Tensor::zeros(vec![1, 2, k, k]),
            spatial_b: Tensor::zeros(vec![1]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 6] {
        [
            ("mlp1.weight", &self.mlp_w1),
            ("mlp1.bias", &self.mlp_b1),
            ("mlp2.weight", &self.mlp_w2),
            ("mlp2.bias", &self.mlp_b2),
            ("spatial.weight", &self.spatial_w),
            ("spatial.bias", &self.spatial_b),
        ]
    }

    pub fn insert_into(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        for (name, t) in self.named() {
            store.insert(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, prefix: &str) -> CbamVars {
        let v = self.named().map(|(n, t)| g.param(&format!("{prefix}.{n}"), t));
        CbamVars::from_array(v)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CbamVars {
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub spatial_w: Var,
    pub spatial_b: Var,
}

impl CbamVars {
    fn from_array([mlp_w1, mlp_b1, mlp_w2, mlp_b2, spatial_w, spatial_b]: [Var; 6]) -> Self {
        Self {
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            spatial_w,
            spatial_b,
        }
    }

    pub fn from_store<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let names = [
            "mlp1.weight",
            "mlp1.bias",
            "mlp2.weight",
            "mlp2.bias",
            "spatial.weight",
            "spatial.bias",
        ];
        let mut vars = Vec::with_capacity(6);
        for n in names {
            let name = format!("{prefix}.{n}");
            vars.push(g.param(&name, store.get(&name)?));
        }
        Ok(Self::from_array(vars.try_into().expect("six names")))
    }
}

fn rank4<T: Element>(g: &Graph<T>, f: Var, op: &'static str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(g.shape(f))
        .map_err(|_| Error::invalid(op, format!("expected [N, C, H, W], got {:?}", g.shape(f))))
}

/// Channel gate (shared MLP over mean- and max-pooled descriptors) then
/// spatial gate (7x7 convolution over channel mean and max maps).
pub fn cbam<T: Element>(g: &mut Graph<T>, f: Var, p: &CbamVars) -> Result<Var> {
    let [n, c, h, w] = rank4(g, f, "cbam")?;
    let flat = g.reshape(f, vec![n, c, h * w])?;
    let avg = g.mean_axis(flat, 2, false)?;
    let max = g.max_axis(flat, 2, false)?;
    let mlp = |g: &mut Graph<T>, d: Var| -> Result<Var> {
        let hdn = g.linear(d, p.mlp_w1, Some(p.mlp_b1))?;
        let hdn = g.relu(hdn)?;
        g.linear(hdn, p.mlp_w2, Some(p.mlp_b2))
    };
    let ma = mlp(g, avg)?;
    let mm = mlp(g, max)?;
    let logits = g.add(ma, mm)?;
    let gate_c = g.sigmoid(logits)?;
    let gate_c = g.reshape(gate_c, vec![n, c, 1, 1])?;
    let x1 = g.mul(f, gate_c)?;

    let cmean = g.mean_axis(x1, 1, true)?;
    let cmax = g.max_axis(x1, 1, true)?;
    let desc = g.concat(&[cmean, cmax], 1)?;
    let k = g.shape(p.spatial_w)[2];
    let s = g.conv2d(desc, p.spatial_w, Some(p.spatial_b), 1, k / 2)?;
    let gate_s = g.sigmoid(s)?;
    g.mul(x1, gate_s)
}

/// Parameter-free energy attention.
///
/// For each channel, `t = x - mean`, `v = sum(t^2) / (HW - 1)`, and the
/// inverse energy `t^2 / (4 (v + lambda)) + 1/2` is squashed by a sigmoid.
pub fn simam<T: Element>(g: &mut Graph<T>, f: Var, lambda: f64) -> Result<Var> {
    let [n, c, h, w] = rank4(g, f, "simam")?;
    let hw = h * w;
    let denom_count = hw.saturating_sub(1).max(1);
    let flat = g.reshape(f, vec![n, c, hw])?;
    let mu = g.mean_axis(flat, 2, true)?;
    let d = g.sub(flat, mu)?;
    let d2 = g.mul(d, d)?;
    let mean_d2 = g.mean_axis(d2, 2, true)?;
    // 4 (v + lambda) with v = sum / (HW - 1)
    let v4 = g.scale(mean_d2, 4.0 * hw as f64 / denom_count as f64)?;
    let denom = g.add_scalar(v4, 4.0 * lambda)?;
    let ratio = g.div(d2, denom)?;
    let energy = g.add_scalar(ratio, 0.5)?;
    let gate = g.sigmoid(energy)?;
    let out = g.mul(flat, gate)?;
    g.reshape(out, vec![n, c, h, w])
}

/// Tensor-level CBAM on a `[C, H, W]` map.
pub fn cbam_forward<T: Element>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = p.bind(&mut g, "cbam");
    let x = g.constant(f.unsqueeze0());
    let out = cbam(&mut g, x, &vars)?;
    Ok(g.value(out).index_first(0))
}

/// Tensor-level SimAM on a `[C, H, W]` map.
pub fn simam_forward<T: Element>(f: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(f.unsqueeze0());
    let out = simam(&mut g, x, lambda)?;
    Ok(g.value(out).index_first(0))
}
