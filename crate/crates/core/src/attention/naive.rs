//! Full self-attention over all `H * W` positions.
//!
//! Uses the same projection, residual, MLP and gating as LASA but one token
//! per pixel, so its attention core costs `O((HW)^2)`. Only meant for the
//! complexity comparison.

use super::lasa::{token_attention, token_gates, LasaParams, LasaVars};
use crate::engine::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default token cap (a 64 x 64 map).
pub const DEFAULT_TOKEN_CAP: usize = 64 * 64;

#[derive(Clone, Copy, Debug)]
pub struct NaiveTrace {
    /// `[N, HW, HW]`
    pub attention: Var,
    pub out: Var,
}

pub fn naive_attention<T: Element>(g: &mut Graph<T>, f: Var, p: &LasaVars, token_cap: usize) -> Result<NaiveTrace> {
    let [n, c, h, w] = <[usize; 4]>::try_from(g.shape(f)).map_err(|_| {
        Error::invalid(
            "naive_global_attention",
            format!("expected [N, C, H, W], got {:?}", g.shape(f)),
        )
    })?;
    if h * w > token_cap {
        return Err(Error::invalid(
            "naive_global_attention",
            format!("{} tokens exceed the cap of {}", h * w, token_cap),
        ));
    }
    let flat = g.reshape(f, vec![n, c, h * w])?;
    let tokens = g.transpose_last2(flat)?;
    let (attention, _, global) = token_attention(g, tokens, p.qkv_weight, p.qkv_bias, p.scale_qk)?;
    let gates = token_gates(g, global, p)?;
    let gates = g.transpose_last2(gates)?;
    let gates = g.reshape(gates, vec![n, c, h, w])?;
    let out = g.mul(f, gates)?;
    Ok(NaiveTrace { attention, out })
}

/// Tensor-level wrapper; returns (refined map, attention matrix).
pub fn naive_global_attention<T: Element>(
    f: &Tensor<T>,
    p: &LasaParams<T>,
    token_cap: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let vars = p.bind(&mut g, "naive");
    let x = g.constant(f.unsqueeze0());
    let trace = naive_attention(&mut g, x, &vars, token_cap)?;
    Ok((
        g.value(trace.out).index_first(0),
        g.value(trace.attention).index_first(0),
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn attention_is_square_over_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LasaParams::<f64>::init(2, 4, false, &mut rng).unwrap();
        let f = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);
        let (out, a) = naive_global_attention(&f, &p, DEFAULT_TOKEN_CAP).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4]);
        assert_eq!(a.shape(), &[12, 12]);
        for row in a.data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cap_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LasaParams::<f32>::init(1, 4, false, &mut rng).unwrap();
        let f = Tensor::zeros(vec![1, 8, 8]);
        let err = naive_global_attention(&f, &p, 32).unwrap_err().to_string();
        assert!(err.contains("cap of 32"), "{err}");
    }
}
