//! Feature-refinement attention units.

mod baselines;
mod lasa;
mod naive;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use baselines::{
    cbam, cbam_forward, simam, simam_forward, CbamParams, CbamVars, CBAM_SPATIAL_KERNEL, SIMAM_LAMBDA,
};
pub use lasa::{
    directional_encode, encode, hidden_width, lasa, lasa_forward, lasa_weights, AttentionWeights3D,
    DirectionalEncoding, LasaParams, LasaTrace, LasaVars, ATTENTION_CORE,
};
pub use naive::{naive_attention, naive_global_attention, NaiveTrace, DEFAULT_TOKEN_CAP};

use crate::engine::{Element, Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Which refinement unit a block carries after its convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    None,
    Lasa,
    Cbam,
    Simam,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [Self::None, Self::Lasa, Self::Cbam, Self::Simam];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Lasa => "lasa",
            Self::Cbam => "cbam",
            Self::Simam => "simam",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("attention", format!("unknown attention kind `{s}`")))
    }
}

/// Hyper-parameters shared by the attention units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSettings {
    pub reduction: usize,
    pub scale_qk: bool,
    pub simam_lambda: f64,
}

impl Default for AttentionSettings {
    fn default() -> Self {
        Self {
            reduction: 4,
            scale_qk: false,
            simam_lambda: SIMAM_LAMBDA,
        }
    }
}

/// Initializes the parameters of `kind` for a `channels`-wide map under `prefix`.
pub fn init_attention<T: Element, R: Rng + ?Sized>(
    kind: AttentionKind,
    channels: usize,
    settings: &AttentionSettings,
    store: &mut ParamStore<T>,
    prefix: &str,
    rng: &mut R,
) -> Result<()> {
    match kind {
        AttentionKind::None | AttentionKind::Simam => Ok(()),
        AttentionKind::Lasa => {
            LasaParams::init(channels, settings.reduction, settings.scale_qk, rng)?.insert_into(store, prefix)
        }
        AttentionKind::Cbam => CbamParams::init(channels, settings.reduction, rng).insert_into(store, prefix),
    }
}

/// Applies `kind` to `x` with parameters looked up under `prefix`.
pub fn apply_attention<T: Element>(
    g: &mut Graph<T>,
    kind: AttentionKind,
    settings: &AttentionSettings,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    match kind {
        AttentionKind::None => Ok(x),
        AttentionKind::Lasa => {
            let vars = LasaVars::from_store(g, store, prefix, settings.scale_qk)?;
            Ok(lasa(g, x, &vars)?.out)
        }
        AttentionKind::Cbam => {
            let vars = CbamVars::from_store(g, store, prefix)?;
            cbam(g, x, &vars)
        }
        AttentionKind::Simam => simam(g, x, settings.simam_lambda),
    }
}
