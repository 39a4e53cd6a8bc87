use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::layers::{Activation, NormKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Tagan,
    Ttgan,
}

/// Extra channels derived from the discriminator input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    #[default]
    None,
    /// Append the running sum of each channel (log-price from returns).
    Cumsum,
    /// Append first differences, zero in the first row.
    Returns,
}

impl Augment {
    pub fn width(self, d: usize) -> usize {
        match self {
            Augment::None => d,
            Augment::Cumsum | Augment::Returns => 2 * d,
        }
    }
}

/// Generator architecture. Fields that belong to the other family are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub family: Family,
    pub l: usize,
    pub f: usize,
    pub d_n: usize,
    pub d: usize,
    pub d_h: usize,
    pub n_k: usize,
    pub l1: usize,
    pub l2: usize,
    pub layers: usize,
    pub per_layer_rfs: Vec<usize>,
    pub n_h: usize,
    pub n_a: usize,
    pub n_m: usize,
    pub activation: Activation,
    pub norm: NormKind,
    pub spectral_norm: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self::ttgan(128, 127, 1)
    }
}

/// Splits a total receptive field over `layers` causal layers so that
/// `f - 1 = sum(f_j - 1)`, front-loading any remainder.
pub fn split_rfs(f: usize, layers: usize) -> Vec<usize> {
    if layers == 0 || f == 0 {
        return Vec::new();
    }
    let shrink = f - 1;
    let base = shrink / layers;
    let extra = shrink % layers;
    (0..layers)
        .map(|j| 1 + base + usize::from(j < extra))
        .collect()
}

impl GeneratorSpec {
    pub fn tagan(l: usize, f: usize, d: usize) -> Self {
        Self {
            family: Family::Tagan,
            l,
            f,
            d_n: 3,
            d,
            d_h: 64,
            n_k: 2,
            l1: 3,
            l2: 3,
            layers: 0,
            per_layer_rfs: Vec::new(),
            n_h: 4,
            n_a: 64,
            n_m: 0,
            activation: Activation::leaky(),
            norm: NormKind::Batch,
            spectral_norm: true,
        }
    }

    pub fn ttgan(l: usize, f: usize, d: usize) -> Self {
        Self {
            family: Family::Ttgan,
            l,
            f,
            d_n: 3,
            d,
            d_h: 64,
            n_k: 1,
            l1: 0,
            l2: 0,
            layers: 5,
            per_layer_rfs: split_rfs(f, 5),
            n_h: 4,
            n_a: 64,
            n_m: 128,
            activation: Activation::Gelu,
            norm: NormKind::Batch,
            spectral_norm: true,
        }
    }

    /// Receptive field of the single causal attention layer in the TAGAN generator.
    pub fn tagan_attention_rfs(&self) -> i64 {
        self.f as i64 - 2 * (self.l1 + self.l2) as i64 * (self.n_k as i64 - 1)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.l >= 1 && self.f >= 1,
            Config,
            "l and f must be positive"
        );
        ensure!(
            self.d_n >= 1 && self.d >= 1 && self.d_h >= 1,
            Config,
            "channel counts must be positive"
        );
        ensure!(
            self.norm != NormKind::Spectral,
            Config,
            "generator norm must be batch or layer"
        );
        crate::layers::check_heads(self.n_a, self.n_h, crate::layers::AttentionKind::Regular)?;
        match self.family {
            Family::Tagan => {
                ensure!(self.n_k >= 1, Config, "kernel size must be positive");
                let rfs = self.tagan_attention_rfs();
                ensure!(
                    rfs >= 1,
                    Config,
                    "inconsistent RFS budget: f - 2(L1+L2)(n_k-1) = {rfs} < 1 for f={}, L1={}, L2={}, n_k={}",
                    self.f,
                    self.l1,
                    self.l2,
                    self.n_k
                );
            }
            Family::Ttgan => {
                ensure!(
                    self.layers >= 1,
                    Config,
                    "ttgan needs at least one attention layer"
                );
                ensure!(
                    self.per_layer_rfs.len() == self.layers,
                    Config,
                    "per_layer_rfs has {} entries for {} layers",
                    self.per_layer_rfs.len(),
                    self.layers
                );
                ensure!(
                    self.per_layer_rfs.iter().all(|&r| r >= 1),
                    Config,
                    "per-layer RFS must be positive"
                );
                let shrink: usize = self.per_layer_rfs.iter().map(|r| r - 1).sum();
                ensure!(
                    shrink + 1 == self.f,
                    Config,
                    "inconsistent RFS budget: 1 + sum(f_j - 1) = {} but f = {}",
                    shrink + 1,
                    self.f
                );
                ensure!(self.n_m >= 1, Config, "mlp hidden size must be positive");
            }
        }
        Ok(())
    }
}

/// Discriminator architecture. Fields that belong to the other family are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub family: Family,
    pub l: usize,
    pub d: usize,
    pub augment: Augment,
    pub d_s: usize,
    pub d_m: usize,
    pub n_k: usize,
    pub l1: usize,
    pub l2: usize,
    pub d_h: usize,
    pub layers: usize,
    pub n_h: usize,
    pub n_a: usize,
    pub n_m: usize,
    pub activation: Activation,
    pub norm: NormKind,
    pub spectral_norm: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self::ttgan(128, 1)
    }
}

impl DiscriminatorSpec {
    pub fn tagan(l: usize, d: usize) -> Self {
        Self {
            family: Family::Tagan,
            l,
            d,
            augment: Augment::None,
            d_s: 32,
            d_m: 128,
            n_k: 3,
            l1: 2,
            l2: 2,
            d_h: 0,
            layers: 0,
            n_h: 4,
            n_a: 64,
            n_m: 0,
            activation: Activation::leaky(),
            norm: NormKind::Layer,
            spectral_norm: true,
        }
    }

    pub fn ttgan(l: usize, d: usize) -> Self {
        Self {
            family: Family::Ttgan,
            l,
            d,
            augment: Augment::None,
            d_s: 0,
            d_m: 0,
            n_k: 1,
            l1: 0,
            l2: 0,
            d_h: 64,
            layers: 3,
            n_h: 4,
            n_a: 64,
            n_m: 128,
            activation: Activation::Gelu,
            norm: NormKind::Layer,
            spectral_norm: true,
        }
    }

    /// Channel count of the TAGAN conv block at 1-based depth `j`.
    pub fn channels_at(&self, j: usize) -> usize {
        let shift = (j.max(1) - 1).min(usize::BITS as usize - 1);
        self.d_s
            .saturating_mul(1usize.checked_shl(shift as u32).unwrap_or(usize::MAX))
            .min(self.d_m)
    }

    /// Sequence length left for the TAGAN head after all stride-2 blocks.
    pub fn head_length(&self) -> usize {
        let mut n = self.l;
        for _ in 0..self.l1 + self.l2 {
            n /= 2;
        }
        n
    }

    pub fn input_width(&self) -> usize {
        self.augment.width(self.d)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.l >= 1 && self.d >= 1,
            Config,
            "l and d must be positive"
        );
        ensure!(
            self.norm != NormKind::Spectral,
            Config,
            "discriminator norm must be batch or layer"
        );
        match self.family {
            Family::Tagan => {
                ensure!(
                    self.d_s >= 1 && self.d_m >= self.d_s,
                    Config,
                    "need 1 <= d_s <= d_m"
                );
                ensure!(
                    self.n_k % 2 == 1,
                    Config,
                    "regular convolution needs an odd kernel, got {}",
                    self.n_k
                );
                ensure!(
                    self.head_length() >= 1,
                    Config,
                    "length {} too short for {} stride-2 blocks",
                    self.l,
                    self.l1 + self.l2
                );
                crate::layers::check_heads(
                    self.n_a,
                    self.n_h,
                    crate::layers::AttentionKind::Regular,
                )?;
            }
            Family::Ttgan => {
                ensure!(
                    self.d_h >= 1 && self.layers >= 1 && self.n_m >= 1,
                    Config,
                    "ttgan sizes must be positive"
                );
                crate::layers::check_heads(
                    self.n_a,
                    self.n_h,
                    crate::layers::AttentionKind::Sparse,
                )?;
                ensure!(
                    self.n_h <= self.d_h,
                    Config,
                    "head weight needs n_h <= d_h ({} > {})",
                    self.n_h,
                    self.d_h
                );
            }
        }
        Ok(())
    }
}
