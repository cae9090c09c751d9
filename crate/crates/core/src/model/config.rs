use crate::error::{Error, Result};

/// Geometry and component switches of a frequency-aware mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Pixels per image side.
    pub image_size: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
    pub channels_in: usize,
    /// Channel width `C` of the token features.
    pub embed_dim: usize,
    /// Number of (filter, mixer) layer pairs.
    pub depth: usize,
    pub token_mlp_dim: usize,
    pub channel_mlp_dim: usize,
    pub num_classes: usize,
    /// Truncation rank of the low-rank enhancement.
    pub lre_rank: usize,
    /// Channel reduction factor of the low-rank bottleneck.
    pub lre_reduction: usize,
    pub aff_enabled: bool,
    pub lre_enabled: bool,
}

impl Default for ModelConfig {
    /// The desk-scale "MLP-T" configuration.
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels_in: 1,
            embed_dim: 64,
            depth: 4,
            token_mlp_dim: 32,
            channel_mlp_dim: 128,
            num_classes: 7,
            lre_rank: 4,
            lre_reduction: 4,
            aff_enabled: true,
            lre_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count `T = (image_size / patch_size)²`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length `S²·channels_in`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels_in
    }

    pub fn reduced_dim(&self) -> usize {
        self.embed_dim / self.lre_reduction
    }

    pub fn lre_active(&self) -> bool {
        self.aff_enabled && self.lre_enabled
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels_in", self.channels_in),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("token_mlp_dim", self.token_mlp_dim),
            ("channel_mlp_dim", self.channel_mlp_dim),
            ("num_classes", self.num_classes),
            ("lre_rank", self.lre_rank),
            ("lre_reduction", self.lre_reduction),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Parameter(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.lre_enabled && !self.aff_enabled {
            return Err(Error::Parameter("low-rank enhancement requires the Fourier filter".into()));
        }
        if self.lre_active() {
            if self.embed_dim % self.lre_reduction != 0 {
                return Err(Error::Parameter(format!(
                    "lre_reduction {} does not divide embed_dim {}",
                    self.lre_reduction, self.embed_dim
                )));
            }
            let max_rank = self.reduced_dim().min(self.tokens());
            if self.lre_rank > max_rank {
                return Err(Error::Parameter(format!(
                    "lre_rank {} exceeds min(embed_dim/lre_reduction, tokens) = {max_rank}",
                    self.lre_rank
                )));
            }
        }
        Ok(())
    }

    /// Closed-form count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let (c, t) = (self.embed_dim, self.tokens());
        let mixer = 4 * c + 2 * t * self.token_mlp_dim + 2 * c * self.channel_mlp_dim;
        let aff = if self.aff_enabled { 2 * c * t } else { 0 };
        let lre = if self.lre_active() { 2 * c * self.reduced_dim() } else { 0 };
        self.patch_dim() * c + self.depth * (mixer + aff + lre) + c * self.num_classes
    }

    /// `key=value` pairs in a fixed order, used by checkpoints and config echoes.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("channels_in", self.channels_in.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("token_mlp_dim", self.token_mlp_dim.to_string()),
            ("channel_mlp_dim", self.channel_mlp_dim.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("lre_rank", self.lre_rank.to_string()),
            ("lre_reduction", self.lre_reduction.to_string()),
            ("aff_enabled", self.aff_enabled.to_string()),
            ("lre_enabled", self.lre_enabled.to_string()),
        ]
    }

    /// Applies one `key=value` setting; `prefix` is only used in error paths.
    pub fn set(&mut self, key: &str, value: &str, prefix: &str) -> Result<()> {
        let err = |msg: String| Error::Config {
            key: format!("{prefix}{key}"),
            msg,
        };
        let parse_usize = |v: &str| v.trim().parse::<usize>().map_err(|e| err(format!("expected a count: {e}")));
        let parse_bool = |v: &str| v.trim().parse::<bool>().map_err(|e| err(format!("expected true/false: {e}")));
        match key {
            "image_size" => self.image_size = parse_usize(value)?,
            "patch_size" => self.patch_size = parse_usize(value)?,
            "channels_in" => self.channels_in = parse_usize(value)?,
            "embed_dim" => self.embed_dim = parse_usize(value)?,
            "depth" => self.depth = parse_usize(value)?,
            "token_mlp_dim" => self.token_mlp_dim = parse_usize(value)?,
            "channel_mlp_dim" => self.channel_mlp_dim = parse_usize(value)?,
            "num_classes" => self.num_classes = parse_usize(value)?,
            "lre_rank" => self.lre_rank = parse_usize(value)?,
            "lre_reduction" => self.lre_reduction = parse_usize(value)?,
            "aff_enabled" => self.aff_enabled = parse_bool(value)?,
            "lre_enabled" => self.lre_enabled = parse_bool(value)?,
            _ => return Err(err("unknown key".into())),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_mlp_t() {
        let c = ModelConfig::default();
        assert_eq!(c.tokens(), 16);
        assert_eq!(c.patch_dim(), 64);
        c.validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_geometry() {
        let mut c = ModelConfig {
            patch_size: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        c.patch_size = 8;
        c.lre_rank = 17;
        assert!(c.validate().is_err());
        c.lre_rank = 4;
        c.aff_enabled = false;
        assert!(c.validate().is_err(), "lre without aff");
        c.lre_enabled = false;
        c.validate().unwrap();
    }

    #[test]
    fn set_reports_key_path() {
        let mut c = ModelConfig::default();
        let err = c.set("depth", "four", "model.").unwrap_err().to_string();
        assert!(err.contains("model.depth"), "{err}");
        assert!(c.set("nonsense", "1", "model.").is_err());
    }
}
