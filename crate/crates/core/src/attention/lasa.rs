//! Linear Array Self-attention.
//!
//! A `C x H x W` map is pooled along each spatial axis into `W + H` tokens
//! of width `C` (column means first, then row means). Single-head
//! self-attention runs over those tokens with a residual connection, a
//! per-token MLP and a sigmoid turn each token into a `C`-vector of weights
//! in (0, 1), and the column and row weights are multiplied back together
//! into a `C x H x W` weight volume that rescales the input.
//!
//! Attention cost is quadratic in `H + W` rather than in `H * W`.

use rand::Rng;

use crate::engine::init::linear_params;
use crate::engine::{Element, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// FLOP scope covering `softmax(Q K^T) V`.
pub const ATTENTION_CORE: &str = "attention_core";

#[derive(Clone, Debug, PartialEq)]
pub struct LasaParams<T> {
    /// Per-token projection `C -> 3C`, stored `[3C, C]`.
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    /// `[hidden, C]`
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    /// `[C, hidden]`
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
    pub reduction: usize,
    pub scale_qk: bool,
}

/// MLP hidden width `ceil(C / r)`, never below 1.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1)).max(1)
}

impl<T: Element> LasaParams<T> {
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, scale_qk: bool, rng: &mut R) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::invalid("lasa", "channels and reduction must be positive"));
        }
        let hidden = hidden_width(channels, reduction);
        let (qkv_weight, qkv_bias) = linear_params(3 * channels, channels, rng);
        let (mlp_w1, mlp_b1) = linear_params(hidden, channels, rng);
        let (mlp_w2, mlp_b2) = linear_params(channels, hidden, rng);
        Ok(Self {
            qkv_weight,
            qkv_bias,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            reduction,
            scale_qk,
        })
    }

    pub fn channels(&self) -> usize {
        self.qkv_weight.shape()[1]
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 6] {
        [
            ("qkv.weight", &self.qkv_weight),
            ("qkv.bias", &self.qkv_bias),
            ("mlp1.weight", &self.mlp_w1),
            ("mlp1.bias", &self.mlp_b1),
            ("mlp2.weight", &self.mlp_w2),
            ("mlp2.bias", &self.mlp_b2),
        ]
    }

    pub fn insert_into(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        for (name, t) in self.named() {
            store.insert(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore<T>, prefix: &str, reduction: usize, scale_qk: bool) -> Result<Self> {
        let get = |n: &str| store.get(&format!("{prefix}.{n}")).cloned();
        Ok(Self {
            qkv_weight: get("qkv.weight")?,
            qkv_bias: get("qkv.bias")?,
            mlp_w1: get("mlp1.weight")?,
            mlp_b1: get("mlp1.bias")?,
            mlp_w2: get("mlp2.weight")?,
            mlp_b2: get("mlp2.bias")?,
            reduction,
            scale_qk,
        })
    }

    /// Registers every tensor as a named graph parameter.
    pub fn bind(&self, g: &mut Graph<T>, prefix: &str) -> LasaVars {
        let mut v = self
            .named()
            .map(|(n, t)| g.param(&format!("{prefix}.{n}"), t))
            .into_iter();
        let mut next = || v.next().expect("six tensors");
        LasaVars {
            qkv_weight: next(),
            qkv_bias: next(),
            mlp_w1: next(),
            mlp_b1: next(),
            mlp_w2: next(),
            mlp_b2: next(),
            scale_qk: self.scale_qk,
        }
    }
}

/// Graph handles for a bound [`LasaParams`].
#[derive(Clone, Copy, Debug)]
pub struct LasaVars {
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub scale_qk: bool,
}

impl LasaVars {
    pub fn from_store<T: Element>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &str,
        scale_qk: bool,
    ) -> Result<Self> {
        let mut p = |n: &str| -> Result<Var> {
            let name = format!("{prefix}.{n}");
            Ok(g.param(&name, store.get(&name)?))
        };
        Ok(Self {
            qkv_weight: p("qkv.weight")?,
            qkv_bias: p("qkv.bias")?,
            mlp_w1: p("mlp1.weight")?,
            mlp_b1: p("mlp1.bias")?,
            mlp_w2: p("mlp2.weight")?,
            mlp_b2: p("mlp2.bias")?,
            scale_qk,
        })
    }
}

/// Directional summaries of a `[C, H, W]` map.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalEncoding<T> {
    /// `[C, W]`, mean over rows for each column.
    pub fx: Tensor<T>,
    /// `[C, H]`, mean over columns for each row.
    pub fy: Tensor<T>,
}

impl<T: Element> DirectionalEncoding<T> {
    pub fn token_count(&self) -> usize {
        self.fx.shape()[1] + self.fy.shape()[1]
    }

    /// `[T, C]` token matrix, column tokens first.
    pub fn tokens(&self) -> Tensor<T> {
        let c = self.fx.shape()[0];
        let (w, h) = (self.fx.shape()[1], self.fy.shape()[1]);
        Tensor::from_fn(vec![w + h, c], |i| {
            let (t, ch) = (i[0], i[1]);
            if t < w {
                self.fx.at(&[ch, t])
            } else {
                self.fy.at(&[ch, t - w])
            }
        })
    }
}

/// Directional encoding of a single `[C, H, W]` feature map.
pub fn directional_encode<T: Element>(f: &Tensor<T>) -> Result<DirectionalEncoding<T>> {
    if f.rank() != 3 || f.numel() == 0 {
        return Err(Error::invalid(
            "directional_encode",
            format!("expected [C, H, W], got {:?}", f.shape()),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(f.unsqueeze0());
    let (fx, fy) = encode(&mut g, x)?;
    Ok(DirectionalEncoding {
        fx: g.value(fx).index_first(0),
        fy: g.value(fy).index_first(0),
    })
}

/// `[N, C, H, W] -> ([N, C, W], [N, C, H])`.
pub fn encode<T: Element>(g: &mut Graph<T>, f: Var) -> Result<(Var, Var)> {
    if g.shape(f).len() != 4 {
        return Err(Error::invalid(
            "lasa",
            format!("expected [N, C, H, W], got {:?}", g.shape(f)),
        ));
    }
    let fx = g.mean_axis(f, 2, false)?;
    let fy = g.mean_axis(f, 3, false)?;
    Ok((fx, fy))
}

/// Every intermediate of one LASA evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LasaTrace {
    /// `[N, C, W]`
    pub fx: Var,
    /// `[N, C, H]`
    pub fy: Var,
    /// `[N, T, C]`
    pub tokens: Var,
    /// `[N, T, T]`, rows sum to one.
    pub attention: Var,
    /// `[N, T, C]`, `softmax(Q K^T) V`.
    pub attended: Var,
    /// `[N, T, C]`, `attended + tokens`.
    pub global: Var,
    /// `[N, C, W]`
    pub ax: Var,
    /// `[N, C, H]`
    pub ay: Var,
    /// `[N, C, H, W]`, `a3d(c, j, i) = ax(c, i) * ay(c, j)`.
    pub weights: Var,
    /// `[N, C, H, W]`, input times weights.
    pub out: Var,
}

/// Q, K, V projection, softmax attention and the residual connection.
///
/// `tokens` is `[N, T, C]`; returns (attention, attended, global).
pub(crate) fn token_attention<T: Element>(
    g: &mut Graph<T>,
    tokens: Var,
    qkv_weight: Var,
    qkv_bias: Var,
    scale_qk: bool,
) -> Result<(Var, Var, Var)> {
    let c = *g.shape(tokens).last().unwrap();
    if g.shape(qkv_weight) != [3 * c, c] {
        return Err(Error::ShapeMismatch {
            op: "lasa qkv",
            lhs: g.shape(tokens).to_vec(),
            rhs: g.shape(qkv_weight).to_vec(),
        });
    }
    let qkv = g.linear(tokens, qkv_weight, Some(qkv_bias))?;
    let parts = g.split(qkv, 2, &[c, c, c])?;
    let (q, k, v) = (parts[0], parts[1], parts[2]);
    let kt = g.transpose_last2(k)?;
    let (attention, attended) = g.scoped(ATTENTION_CORE, |g| -> Result<(Var, Var)> {
        let mut scores = g.matmul(q, kt)?;
        if scale_qk {
            scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
        }
        let a = g.softmax_last(scores)?;
        let av = g.matmul(a, v)?;
        Ok((a, av))
    })?;
    let global = g.add(attended, tokens)?;
    Ok((attention, attended, global))
}

/// Per-token MLP followed by a sigmoid.
pub(crate) fn token_gates<T: Element>(g: &mut Graph<T>, global: Var, p: &LasaVars) -> Result<Var> {
    let h = g.linear(global, p.mlp_w1, Some(p.mlp_b1))?;
    let h = g.relu(h)?;
    let o = g.linear(h, p.mlp_w2, Some(p.mlp_b2))?;
    g.sigmoid(o)
}

/// Full LASA refinement of `f: [N, C, H, W]`.
pub fn lasa<T: Element>(g: &mut Graph<T>, f: Var, p: &LasaVars) -> Result<LasaTrace> {
    let (fx, fy) = encode(g, f)?;
    let [n, c, h, w] = <[usize; 4]>::try_from(g.shape(f)).expect("rank checked");
    let tokens_ct = g.concat(&[fx, fy], 2)?;
    let tokens = g.transpose_last2(tokens_ct)?;
    let (attention, attended, global) = token_attention(g, tokens, p.qkv_weight, p.qkv_bias, p.scale_qk)?;
    let gates = token_gates(g, global, p)?;
    let gates_ct = g.transpose_last2(gates)?;
    let dirs = g.split(gates_ct, 2, &[w, h])?;
    let (ax, ay) = (dirs[0], dirs[1]);
    let ax4 = g.reshape(ax, vec![n, c, 1, w])?;
    let ay4 = g.reshape(ay, vec![n, c, h, 1])?;
    let weights = g.mul(ay4, ax4)?;
    let out = g.mul(f, weights)?;
    Ok(LasaTrace {
        fx,
        fy,
        tokens,
        attention,
        attended,
        global,
        ax,
        ay,
        weights,
        out,
    })
}

/// 3-D weight volume with its two directional factors.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights3D<T> {
    /// `[C, H, W]`
    pub a3d: Tensor<T>,
    /// `[C, W]`
    pub ax: Tensor<T>,
    /// `[C, H]`
    pub ay: Tensor<T>,
    /// `[T, T]`
    pub attention: Tensor<T>,
}

fn check_channels<T: Element>(enc_c: usize, p: &LasaParams<T>) -> Result<()> {
    if enc_c != p.channels() {
        return Err(Error::invalid(
            "lasa",
            format!("feature map has {} channels, parameters expect {}", enc_c, p.channels()),
        ));
    }
    Ok(())
}

/// Weights from a precomputed encoding.
pub fn lasa_weights<T: Element>(enc: &DirectionalEncoding<T>, p: &LasaParams<T>) -> Result<AttentionWeights3D<T>> {
    let c = enc.fx.shape()[0];
    check_channels(c, p)?;
    let (w, h) = (enc.fx.shape()[1], enc.fy.shape()[1]);
    let mut g = Graph::new();
    let vars = p.bind(&mut g, "lasa");
    let tokens = g.constant(enc.tokens().unsqueeze0());
    let (attention, _, global) = token_attention(&mut g, tokens, vars.qkv_weight, vars.qkv_bias, vars.scale_qk)?;
    let gates = token_gates(&mut g, global, &vars)?;
    let gates = g.value(gates).index_first(0); // [T, C]
    let ax = Tensor::from_fn(vec![c, w], |i| gates.at(&[i[1], i[0]]));
    let ay = Tensor::from_fn(vec![c, h], |i| gates.at(&[w + i[1], i[0]]));
    let a3d = Tensor::from_fn(vec![c, h, w], |i| ax.at(&[i[0], i[2]]) * ay.at(&[i[0], i[1]]));
    Ok(AttentionWeights3D {
        a3d,
        ax,
        ay,
        attention: g.value(attention).index_first(0),
    })
}

/// `f * a3d` for a single `[C, H, W]` map.
pub fn lasa_forward<T: Element>(f: &Tensor<T>, p: &LasaParams<T>) -> Result<Tensor<T>> {
    if f.rank() != 3 {
        return Err(Error::invalid(
            "lasa_forward",
            format!("expected [C, H, W], got {:?}", f.shape()),
        ));
    }
    check_channels(f.shape()[0], p)?;
    let mut g = Graph::new();
    let vars = p.bind(&mut g, "lasa");
    let x = g.constant(f.unsqueeze0());
    let trace = lasa(&mut g, x, &vars)?;
    Ok(g.value(trace.out).index_first(0))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn constant_map_gives_constant_tokens() {
        let f = Tensor::<f64>::full(vec![3, 4, 5], 0.7);
        let enc = directional_encode(&f).unwrap();
        assert_eq!(enc.token_count(), 9);
        assert!(enc.tokens().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn column_index_map() {
        let (c, h, w) = (2, 3, 5);
        let f = Tensor::<f64>::from_fn(vec![c, h, w], |i| i[2] as f64);
        let enc = directional_encode(&f).unwrap();
        for ch in 0..c {
            for i in 0..w {
                assert!((enc.fx.at(&[ch, i]) - i as f64).abs() < 1e-14);
            }
            for j in 0..h {
                assert!((enc.fy.at(&[ch, j]) - (w as f64 - 1.0) / 2.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_pixel_gives_two_equal_tokens() {
        let f = Tensor::<f64>::from_f64(vec![3, 1, 1], &[0.1, 0.2, 0.3]).unwrap();
        let tokens = directional_encode(&f).unwrap().tokens();
        assert_eq!(tokens.shape(), &[2, 3]);
        assert_eq!(tokens.data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn weights_in_open_unit_interval_and_rows_normalised() {
        let mut r = rng();
        let p = LasaParams::<f64>::init(4, 4, false, &mut r).unwrap();
        let f = Tensor::randn(vec![4, 6, 5], 3.0, &mut r);
        let w = lasa_weights(&directional_encode(&f).unwrap(), &p).unwrap();
        assert_eq!(w.attention.shape(), &[11, 11]);
        assert!(w.a3d.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for row in w.attention.data().chunks(11) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_never_exceeds_input() {
        let mut r = rng();
        let p = LasaParams::<f64>::init(3, 2, true, &mut r).unwrap();
        let f = Tensor::randn(vec![3, 4, 4], 1.0, &mut r);
        let out = lasa_forward(&f, &p).unwrap();
        for (&o, &i) in out.data().iter().zip(f.data()) {
            assert!(o.abs() < i.abs() || i == 0.0);
        }
        let zero = Tensor::zeros(vec![3, 4, 4]);
        assert_eq!(lasa_forward(&zero, &p).unwrap(), zero);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = LasaParams::<f64>::init(3, 4, false, &mut rng()).unwrap();
        assert!(lasa_forward(&Tensor::zeros(vec![2, 4, 4]), &p).is_err());
    }

    #[test]
    fn hidden_width_clamps() {
        assert_eq!(hidden_width(8, 4), 2);
        assert_eq!(hidden_width(5, 4), 2);
        assert_eq!(hidden_width(3, 16), 1);
    }
}
