//! Differentiable layer primitives.
//!
//! Each layer comes in two forms: a graph form operating on tape [`Var`]s,
//! which networks compose and differentiate, and a plain form on
//! [`TimeSeriesMatrix`] values for direct use.
//!
//! [`Var`]: crate::autodiff::Var
//! [`TimeSeriesMatrix`]: crate::TimeSeriesMatrix

mod attention;
mod conv;
mod mlp;
mod norm;

pub(crate) use attention::check_heads;
pub use attention::{
    attention_causal, attention_graph, attention_regular, attention_sparse, build_sparse_masks,
    causal_band_mask, AttentionKind, AttentionMask, AttentionParams, AttentionVars,
    DEFAULT_NEG_LARGE,
};
pub use conv::{
    conv_causal, conv_causal_graph, conv_regular, conv_regular_graph, ConvKind, ConvParams,
    ConvVars,
};
pub use mlp::{mlp_block, mlp_graph, MlpParams, MlpVars};
pub use norm::{
    batch_norm, batch_norm_eval_graph, batch_norm_train_graph, layer_norm_graph,
    power_iteration_step, spectral_normalize, spectral_normalize_graph, NormKind, NormMode,
    NormState, BN_EPS, SN_EPS,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};

/// Element-wise activation functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Identity,
    LeakyRelu {
        slope: f64,
    },
    /// Gaussian-error linear unit (tanh form).
    Gelu,
    Tanh,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu { slope: 0.2 }
    }

    pub fn apply<F: Real>(self, g: &mut Graph<F>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu { slope } => g.leaky_relu(x, slope),
            Activation::Tanh => g.tanh(x),
            Activation::Gelu => g.gelu(x),
        }
    }

    /// Scalar reference used by oracles.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }
}
