use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scaling applied to `QK^T` before the row softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionScale {
    /// `1/sqrt(d)` with `d` the full embedding dimension.
    #[default]
    FullDim,
    /// `1/sqrt(d_h)` with `d_h` the per-head dimension.
    HeadDim,
}

/// Architecture of a ViT; every GEMM shape in the pipeline derives from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub num_encoders: usize,
    pub tokens: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    #[serde(default)]
    pub attention_scale: AttentionScale,
}

impl ViTConfig {
    pub fn new(
        num_encoders: usize,
        tokens: usize,
        embed_dim: usize,
        num_heads: usize,
        mlp_ratio: f64,
        num_classes: usize,
    ) -> Result<Self> {
        let cfg = ViTConfig {
            num_encoders,
            tokens,
            embed_dim,
            num_heads,
            mlp_ratio,
            num_classes,
            attention_scale: AttentionScale::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// DeiT-S: 12 encoders, 197 tokens, d=384, 6 heads, MLP ratio 4, 1000 classes.
    pub fn deit_s() -> Self {
        Self::new(12, 197, 384, 6, 4.0, 1000).expect("valid preset")
    }

    /// LV-ViT-S: 16 encoders, 197 tokens, d=384, 6 heads, MLP ratio 3, 1000 classes.
    pub fn lvvit_s() -> Self {
        Self::new(16, 197, 384, 6, 3.0, 1000).expect("valid preset")
    }

    /// Small model used for desk-scale end-to-end runs.
    pub fn toy(num_encoders: usize) -> Self {
        Self::new(num_encoders, 8, 32, 4, 2.0, 10).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_encoders == 0 {
            return bad("num_encoders must be >= 1".into());
        }
        if self.tokens == 0 {
            return bad("tokens must be >= 1".into());
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            return bad("embed_dim and num_heads must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return bad(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            ));
        }
        let hidden = self.mlp_ratio * self.embed_dim as f64;
        if (hidden - hidden.round()).abs() > 1e-9 || hidden.round() < 1.0 {
            return bad(format!(
                "mlp_ratio * embed_dim = {hidden} is not a positive integer"
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn attention_scale_factor(&self) -> f64 {
        let denom = match self.attention_scale {
            AttentionScale::FullDim => self.embed_dim,
            AttentionScale::HeadDim => self.head_dim(),
        };
        1.0 / (denom as f64).sqrt()
    }

    /// Parses the flat `key = value` configuration format.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: ViTConfig =
            toml::from_str(src).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("ViTConfig serializes")
    }
}

/// A path: which encoders keep their attention module. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EffortConfig {
    num_encoders: usize,
    active: Vec<usize>,
}

impl EffortConfig {
    pub fn new(num_encoders: usize, active: Vec<usize>) -> Result<Self> {
        if num_encoders == 0 {
            return Err(Error::domain("effort config needs at least one encoder"));
        }
        if let Some(&bad) = active.iter().find(|&&i| i == 0 || i > num_encoders) {
            return Err(Error::domain(format!(
                "encoder index {bad} outside [1, {num_encoders}]"
            )));
        }
        if active.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain(
                "active encoder indices must be strictly increasing",
            ));
        }
        Ok(EffortConfig {
            num_encoders,
            active,
        })
    }

    pub fn all_active(num_encoders: usize) -> Self {
        EffortConfig {
            num_encoders,
            active: (1..=num_encoders).collect(),
        }
    }

    /// Builds a config from the set of encoders whose attention is skipped.
    pub fn from_inactive(num_encoders: usize, inactive: &[usize]) -> Result<Self> {
        if let Some(&bad) = inactive.iter().find(|&&i| i == 0 || i > num_encoders) {
            return Err(Error::domain(format!(
                "encoder index {bad} outside [1, {num_encoders}]"
            )));
        }
        let active = (1..=num_encoders)
            .filter(|i| !inactive.contains(i))
            .collect();
        Self::new(num_encoders, active)
    }

    pub fn num_encoders(&self) -> usize {
        self.num_encoders
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn inactive(&self) -> Vec<usize> {
        (1..=self.num_encoders)
            .filter(|i| !self.is_active(*i))
            .collect()
    }

    pub fn effort(&self) -> usize {
        self.active.len()
    }

    pub fn is_active(&self, encoder: usize) -> bool {
        self.active.binary_search(&encoder).is_ok()
    }

    /// Copy of this config with one more attention skipped.
    pub fn without(&self, encoder: usize) -> Option<Self> {
        let pos = self.active.binary_search(&encoder).ok()?;
        let mut active = self.active.clone();
        active.remove(pos);
        Some(EffortConfig {
            num_encoders: self.num_encoders,
            active,
        })
    }

    pub fn check_matches(&self, vit: &ViTConfig) -> Result<()> {
        if self.num_encoders != vit.num_encoders {
            return Err(Error::domain(format!(
                "effort config describes {} encoders but the ViT has {}",
                self.num_encoders, vit.num_encoders
            )));
        }
        Ok(())
    }
}

impl fmt::Display for EffortConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (n, i) in self.active.iter().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "]/{}", self.num_encoders)
    }
}
