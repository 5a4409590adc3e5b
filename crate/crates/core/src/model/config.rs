use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrunkVariant {
    Mlp,
    Conv,
    VitMicro,
}

impl fmt::Display for TrunkVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrunkVariant::Mlp => "mlp",
            TrunkVariant::Conv => "conv",
            TrunkVariant::VitMicro => "vit-micro",
        })
    }
}

impl FromStr for TrunkVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(TrunkVariant::Mlp),
            "conv" => Ok(TrunkVariant::Conv),
            "vit-micro" | "vit" => Ok(TrunkVariant::VitMicro),
            other => Err(Error::Argument(format!(
                "unknown trunk `{other}` (expected mlp, conv or vit-micro)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub key_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            patch_size: 4,
            embed_dim: 16,
            heads: 2,
            key_dim: 8,
        }
    }
}

/// Trunk shape. `width` is the channel count for conv, the hidden size for
/// mlp, and the token-MLP hidden size for vit-micro.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub variant: TrunkVariant,
    pub depth: usize,
    pub width: usize,
    pub resolution: usize,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub vit: VitConfig,
}

impl TrunkConfig {
    pub fn default_for(variant: TrunkVariant) -> TrunkConfig {
        let (depth, width) = match variant {
            TrunkVariant::Conv => (2, 64),
            TrunkVariant::Mlp => (1, 64),
            TrunkVariant::VitMicro => (1, 32),
        };
        TrunkConfig {
            variant,
            depth,
            width,
            resolution: 16,
            residual: false,
            vit: VitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.resolution == 0 {
            return Err(Error::Config(format!(
                "depth, width and resolution must be positive (got {}, {}, {})",
                self.depth, self.width, self.resolution
            )));
        }
        match self.variant {
            TrunkVariant::Conv => {
                let f = 1usize.checked_shl(self.depth as u32).unwrap_or(0);
                if f == 0 || self.resolution % f != 0 {
                    return Err(Error::Config(format!(
                        "conv trunk of depth {} needs a resolution divisible by 2^{}, got {}",
                        self.depth, self.depth, self.resolution
                    )));
                }
            }
            TrunkVariant::VitMicro => {
                let v = &self.vit;
                if v.patch_size == 0 || v.heads == 0 || v.key_dim == 0 {
                    return Err(Error::Config(
                        "vit patch size, heads and key dim must be positive".into(),
                    ));
                }
                if self.resolution % v.patch_size != 0 {
                    return Err(Error::Config(format!(
                        "resolution {} is not a multiple of the vit patch size {}",
                        self.resolution, v.patch_size
                    )));
                }
                if v.embed_dim != v.heads * v.key_dim {
                    return Err(Error::Config(format!(
                        "embed dim {} must equal heads × key dim ({} × {})",
                        v.embed_dim, v.heads, v.key_dim
                    )));
                }
            }
            TrunkVariant::Mlp => {}
        }
        if self.residual && self.variant != TrunkVariant::Conv {
            return Err(Error::Config(
                "residual connections are only defined for the conv trunk".into(),
            ));
        }
        Ok(())
    }

    /// Length of the feature vector the heads read.
    pub fn feature_dim(&self) -> usize {
        match self.variant {
            TrunkVariant::VitMicro => self.vit.embed_dim,
            _ => self.width,
        }
    }

    pub fn tokens(&self) -> usize {
        let g = self.resolution / self.vit.patch_size;
        g * g
    }
}

/// Compound depth/width/resolution scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
    /// `(d₀, w₀, r₀)`.
    pub base: (usize, usize, usize),
}

/// `(round(d₀·α^φ), round(w₀·β^φ), round(r₀·γ^φ))`.
pub fn compound_scale(s: &ScalingConfig) -> Result<(usize, usize, usize)> {
    for (name, v) in [("alpha", s.alpha), ("beta", s.beta), ("gamma", s.gamma)] {
        if !(v >= 1.0) {
            return Err(Error::Constraint(format!(
                "{name} must be at least 1, got {v}"
            )));
        }
    }
    if !(s.phi >= 0.0) {
        return Err(Error::Constraint(format!(
            "phi must be non-negative, got {}",
            s.phi
        )));
    }
    let budget = s.alpha * s.beta.powi(2) * s.gamma.powi(2);
    if !(1.9..=2.1).contains(&budget) {
        log::warn!("alpha·beta²·gamma² = {budget:.4}, outside [1.9, 2.1]");
    }
    let scale = |base: usize, f: f64| ((base as f64 * f.powf(s.phi)).round() as usize).max(base);
    Ok((
        scale(s.base.0, s.alpha),
        scale(s.base.1, s.beta),
        scale(s.base.2, s.gamma),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadLoss {
    #[default]
    Mse,
    SoftCrossEntropy,
}

impl FromStr for HeadLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(HeadLoss::Mse),
            "soft-cross-entropy" | "soft-ce" => Ok(HeadLoss::SoftCrossEntropy),
            other => Err(Error::Argument(format!(
                "unknown head loss `{other}` (expected mse or soft-cross-entropy)"
            ))),
        }
    }
}

impl fmt::Display for HeadLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadLoss::Mse => "mse",
            HeadLoss::SoftCrossEntropy => "soft-cross-entropy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub head_loss: HeadLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 40.0,
            head_loss: HeadLoss::Mse,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Argument(format!(
                "lambda must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}
