//! Linear Array Self-attention (LASA) and the Linear Array Network (LAN)
//! for low-light image enhancement, on a small self-contained tensor engine.

// `!(x > y)` is the NaN-rejecting form of range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod reference;
pub mod train;
pub mod verify;

pub use engine::{Adam, Element, Gradients, Graph, OpKind, ParamStore, Tensor, Var};
pub use error::{Error, Result};
pub use network::{build_lan, LanConfig, LanModel};
