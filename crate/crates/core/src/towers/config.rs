use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TowerKind {
    Image,
    Text,
}

impl TowerKind {
    pub const BOTH: [TowerKind; 2] = [TowerKind::Image, TowerKind::Text];

    pub fn prefix(self) -> &'static str {
        match self {
            TowerKind::Image => "image",
            TowerKind::Text => "text",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TowerInput {
    Image { grid: usize, patch: usize, channels: usize },
    Text { vocab: usize, max_len: usize },
}

/// Shape of one transformer tower.
///
/// Head and FFN widths are stored per layer because pruned towers are ragged;
/// a freshly constructed tower has `heads[l] * head_dim == hidden`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub hidden: usize,
    pub head_dim: usize,
    pub heads: Vec<usize>,
    pub ffn: Vec<usize>,
    pub input: TowerInput,
}

impl TowerConfig {
    pub fn uniform(layers: usize, hidden: usize, heads: usize, ffn: usize, input: TowerInput) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::invalid(format!("hidden dim {hidden} is not divisible by {heads} heads")));
        }
        let cfg = TowerConfig { hidden, head_dim: hidden / heads, heads: vec![heads; layers], ffn: vec![ffn; layers], input };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layers(&self) -> usize {
        self.heads.len()
    }

    /// Sequence length seen by the blocks (patches + class token, or text length).
    pub fn tokens(&self) -> usize {
        match self.input {
            TowerInput::Image { grid, patch, .. } => (grid / patch) * (grid / patch) + 1,
            TowerInput::Text { max_len, .. } => max_len,
        }
    }

    pub fn total_heads(&self) -> usize {
        self.heads.iter().sum()
    }

    pub fn total_ffn(&self) -> usize {
        self.ffn.iter().sum()
    }

    /// Offset of layer `l`'s first head in the flattened head-mask vector.
    pub fn head_offset(&self, l: usize) -> usize {
        self.heads[..l].iter().sum()
    }

    pub fn ffn_offset(&self, l: usize) -> usize {
        self.ffn[..l].iter().sum()
    }

    /// Parameters of the MHA and FFN weights, the only ones masks can remove.
    pub fn maskable_params(&self) -> usize {
        4 * self.head_dim * self.total_heads() * self.hidden + 2 * self.total_ffn() * self.hidden
    }

    /// Every parameter of the tower including embeddings, norms and projection.
    pub fn param_count(&self, projection: usize) -> usize {
        let d = self.hidden;
        let embed = match self.input {
            TowerInput::Image { patch, channels, .. } => channels * patch * patch * d + d + self.tokens() * d,
            TowerInput::Text { vocab, max_len } => (vocab + max_len) * d,
        };
        let blocks: usize = (0..self.layers()).map(|l| 4 * d + 4 * d * self.heads[l] * self.head_dim + 2 * d * self.ffn[l]).sum();
        embed + blocks + 2 * d + d * projection
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.len() != self.ffn.len() {
            return Err(Error::invalid(format!(
                "per-layer heads ({}) and ffn ({}) lengths differ",
                self.heads.len(),
                self.ffn.len()
            )));
        }
        if self.hidden == 0 || self.head_dim == 0 {
            return Err(Error::invalid("hidden and head dims must be positive"));
        }
        match self.input {
            TowerInput::Image { grid, patch, channels } => {
                if patch == 0 || grid % patch != 0 || channels == 0 {
                    return Err(Error::invalid(format!("grid {grid} not tiled by patch {patch}")));
                }
            }
            TowerInput::Text { vocab, max_len } => {
                if vocab < 2 || max_len == 0 {
                    return Err(Error::invalid("text tower needs vocab >= 2 and max_len >= 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: TowerConfig,
    pub text: TowerConfig,
    pub projection: usize,
}

impl ModelConfig {
    /// Default single-core configuration: 4 layers, width 64, 4 heads, FFN 128,
    /// projection 32, 16x16 RGB images in 4x4 patches, vocab 64, length 12.
    pub fn desk() -> Self {
        Self::small(4, 64, 4, 128, 32)
    }

    pub fn small(layers: usize, hidden: usize, heads: usize, ffn: usize, projection: usize) -> Self {
        let image = TowerInput::Image { grid: 16, patch: 4, channels: 3 };
        let text = TowerInput::Text { vocab: 64, max_len: 12 };
        ModelConfig {
            image: TowerConfig::uniform(layers, hidden, heads, ffn, image).expect("valid image tower"),
            text: TowerConfig::uniform(layers, hidden, heads, ffn, text).expect("valid text tower"),
            projection,
        }
    }

    pub fn tower(&self, kind: TowerKind) -> &TowerConfig {
        match kind {
            TowerKind::Image => &self.image,
            TowerKind::Text => &self.text,
        }
    }

    pub fn tower_mut(&mut self, kind: TowerKind) -> &mut TowerConfig {
        match kind {
            TowerKind::Image => &mut self.image,
            TowerKind::Text => &mut self.text,
        }
    }

    pub fn maskable_params(&self) -> usize {
        self.image.maskable_params() + self.text.maskable_params()
    }

    pub fn param_count(&self) -> usize {
        self.image.param_count(self.projection) + self.text.param_count(self.projection) + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if !matches!(self.image.input, TowerInput::Image { .. }) || !matches!(self.text.input, TowerInput::Text { .. }) {
            return Err(Error::invalid("tower input kinds are swapped"));
        }
        if self.projection == 0 {
            return Err(Error::invalid("projection dim must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_shapes() {
        let c = ModelConfig::desk();
        assert_eq!(c.image.tokens(), 17);
        assert_eq!(c.text.tokens(), 12);
        assert_eq!(c.image.head_dim, 16);
        assert_eq!(c.image.maskable_params(), 4 * (4 * 64 * 64 + 2 * 128 * 64));
        c.validate().unwrap();
        let m = crate::towers::TwoTowerModel::<f32>::init(c.clone(), 0).unwrap();
        assert_eq!(c.param_count(), m.params.count());
    }

    #[test]
    fn heads_must_divide_hidden() {
        let input = TowerInput::Text { vocab: 8, max_len: 4 };
        assert!(TowerConfig::uniform(2, 10, 4, 8, input).is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let c = ModelConfig::desk();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
