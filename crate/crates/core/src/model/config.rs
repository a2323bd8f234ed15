use std::fmt;
use std::str::FromStr;

use crate::error::{Result, RetoError};

/// Architecture variant; the three ablations drop RoPE, the sin/cos encoder, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoRope,
    NoSincos,
    Neither,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoRope, Variant::NoSincos, Variant::Neither];

    pub fn uses_rope(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSincos)
    }

    pub fn uses_sincos(self) -> bool {
        matches!(self, Variant::Full | Variant::NoRope)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRope => "no_rope",
            Variant::NoSincos => "no_sincos",
            Variant::Neither => "neither",
        }
    }

    /// Row label in ablation tables.
    pub fn table_label(self) -> &'static str {
        match self {
            Variant::Full => "RETO",
            Variant::NoRope => "v1: w/o RoPE",
            Variant::NoSincos => "v2: w/o sin-cos",
            Variant::Neither => "v3: w/o RoPE & sin-cos",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::NoRope => 1,
            Variant::NoSincos => 2,
            Variant::Neither => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Variant::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = RetoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_rope" | "v1" => Ok(Variant::NoRope),
            "no_sincos" | "v2" => Ok(Variant::NoSincos),
            "neither" | "v3" => Ok(Variant::Neither),
            other => Err(RetoError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Network topology. Defaults: 5 blocks, 8 heads, latent width 256, 84 frequencies' worth of
/// per-axis encoding (3m = 252), 512-wide encoder/decoder hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub latent_dim: usize,
    pub per_axis_dim: usize,
    pub ffn_hidden_ratio: f64,
    pub out_channels: usize,
    pub encoder_hidden: usize,
    pub variant: Variant,
    pub wavelength_base: f64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 5,
            num_heads: 8,
            latent_dim: 256,
            per_axis_dim: 84,
            ffn_hidden_ratio: 2.0,
            out_channels: 3,
            encoder_hidden: 512,
            variant: Variant::Full,
            wavelength_base: 10_000.0,
            rope_base: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(RetoError::Config(m));
        if self.num_blocks < 1 {
            return err("at least one physics block is required".into());
        }
        if self.num_heads < 1 || !self.latent_dim.is_multiple_of(self.num_heads) {
            return err(format!(
                "latent width {} not divisible by {} heads",
                self.latent_dim, self.num_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return err(format!("head width {} must be even", self.head_dim()));
        }
        if self.out_channels < 1 {
            return err("at least one output channel is required".into());
        }
        if self.encoder_hidden < 1 {
            return err("encoder hidden width must be positive".into());
        }
        if self.per_axis_dim < 2 || !self.per_axis_dim.is_multiple_of(2) {
            return err(format!("per-axis dimension {} must be even and >= 2", self.per_axis_dim));
        }
        if !(self.ffn_hidden_ratio > 0.0) || self.ffn_hidden() == 0 {
            return err(format!("invalid feed-forward ratio {}", self.ffn_hidden_ratio));
        }
        if !(self.wavelength_base > 1.0) || !(self.rope_base > 1.0) {
            return err("wavelength and rotary bases must exceed 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.num_heads.max(1)
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.ffn_hidden_ratio * self.latent_dim as f64).round() as usize
    }

    /// Encoder input width: `3m` with the spectral encoder, 3 for raw coordinates.
    pub fn input_dim(&self) -> usize {
        if self.variant.uses_sincos() {
            3 * self.per_axis_dim
        } else {
            3
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 32);
        assert_eq!(c.input_dim(), 252);
        assert_eq!(c.ffn_hidden(), 512);
    }

    #[test]
    fn variant_flags_and_parsing() {
        assert!(Variant::Full.uses_rope() && Variant::Full.uses_sincos());
        assert!(!Variant::NoRope.uses_rope() && Variant::NoRope.uses_sincos());
        assert!(Variant::NoSincos.uses_rope() && !Variant::NoSincos.uses_sincos());
        assert!(!Variant::Neither.uses_rope() && !Variant::Neither.uses_sincos());
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_code(v.code()), Some(v));
        }
        assert!("bogus".parse::<Variant>().is_err());
        let c = ModelConfig { variant: Variant::NoSincos, ..Default::default() };
        assert_eq!(c.input_dim(), 3);
    }

    #[test]
    fn invalid_topologies() {
        let bad = [
            ModelConfig { latent_dim: 250, ..Default::default() },
            ModelConfig { num_heads: 3, latent_dim: 9, ..Default::default() },
            ModelConfig { num_blocks: 0, ..Default::default() },
            ModelConfig { out_channels: 0, ..Default::default() },
            ModelConfig { per_axis_dim: 5, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(RetoError::Config(_))), "{c:?}");
        }
    }
}
