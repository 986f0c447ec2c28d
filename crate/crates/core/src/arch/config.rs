use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the multi-scale pooling subpaths are brought back to the baseline
/// resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Bilinear,
    Deconv,
    GroupDeconv,
}

impl UpsampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UpsampleMode::Bilinear => "bilinear",
            UpsampleMode::Deconv => "deconv",
            UpsampleMode::GroupDeconv => "group_deconv",
        }
    }
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(UpsampleMode::Bilinear),
            "deconv" => Ok(UpsampleMode::Deconv),
            "group_deconv" => Ok(UpsampleMode::GroupDeconv),
            other => Err(Error::config(
                "ms_upsample_mode",
                format!("unknown mode `{other}` (expected bilinear, deconv or group_deconv)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub classes: usize,
    pub base_channels: usize,
    pub encoder_pool_ratios: Vec<usize>,
    pub ms_pooling: bool,
    pub ms_subpath_ratios: Vec<usize>,
    pub ms_upsample_mode: UpsampleMode,
    pub ms_group: usize,
    pub ms_compression_channels: usize,
    pub dense_decoder: bool,
    pub dense_decoder_ratios: Vec<usize>,
    pub dropout_p: f64,
    /// Width of every decoder conv block and inner upsampling layer.
    pub decoder_channels: usize,
    /// 3x3 conv layers before each downsampling stage.
    pub convs_per_stage: usize,
    /// 3x3 conv layers at the deepest resolution.
    pub bottleneck_convs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 108,
            classes: 3,
            base_channels: 64,
            encoder_pool_ratios: vec![2, 2, 3],
            ms_pooling: true,
            ms_subpath_ratios: vec![2, 6, 18, 36],
            ms_upsample_mode: UpsampleMode::GroupDeconv,
            ms_group: 32,
            ms_compression_channels: 32,
            dense_decoder: true,
            dense_decoder_ratios: vec![3, 6],
            dropout_p: 0.5,
            decoder_channels: 128,
            convs_per_stage: 4,
            bottleneck_convs: 3,
        }
    }
}

impl ModelConfig {
    /// Small variant on 36x36 inputs used for full-model gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            input_size: 36,
            base_channels: 4,
            ms_subpath_ratios: vec![2, 6, 18],
            ms_group: 2,
            ms_compression_channels: 4,
            decoder_channels: 4,
            ..ModelConfig::default()
        }
    }

    /// Spatial size after all encoder downsampling.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size / self.encoder_pool_ratios.iter().product::<usize>().max(1)
    }

    /// Resolutions of the skip taps, finest first.
    pub fn tap_sizes(&self) -> Vec<usize> {
        let mut size = self.input_size;
        self.encoder_pool_ratios
            .iter()
            .map(|r| {
                let s = size;
                size /= r;
                s
            })
            .collect()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::config("model", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_size", self.input_size),
            ("base_channels", self.base_channels),
            ("decoder_channels", self.decoder_channels),
            ("convs_per_stage", self.convs_per_stage),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::config(
                "classes",
                format!("need at least 2 classes, got {}", self.classes),
            ));
        }
        if self.classes > 255 {
            return Err(Error::config(
                "classes",
                "at most 255 classes are supported",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(
                "dropout_p",
                format!("must lie in [0, 1), got {}", self.dropout_p),
            ));
        }

        let pools = &self.encoder_pool_ratios;
        if pools.is_empty() {
            return Err(Error::config(
                "encoder_pool_ratios",
                "need at least one downsampling stage",
            ));
        }
        if let Some(r) = pools.iter().find(|&&r| r < 2) {
            return Err(Error::config(
                "encoder_pool_ratios",
                format!("ratio {r} must be >= 2"),
            ));
        }
        let product: usize = pools.iter().product();
        if self.input_size % product != 0 {
            return Err(Error::config(
                "encoder_pool_ratios",
                format!(
                    "input_size {} not divisible by total downsampling {product}",
                    self.input_size
                ),
            ));
        }

        if self.ms_pooling {
            self.validate_ms()?;
        }
        if self.dense_decoder {
            self.validate_dense()?;
        }
        Ok(())
    }

    fn validate_ms(&self) -> Result<()> {
        let field = "ms_subpath_ratios";
        let ratios = &self.ms_subpath_ratios;
        let Some(&first) = ratios.first() else {
            return Err(Error::config(field, "need at least one subpath"));
        };
        if first != self.encoder_pool_ratios[0] {
            return Err(Error::config(
                field,
                format!(
                    "first ratio {first} must equal the first encoder pool ratio {}",
                    self.encoder_pool_ratios[0]
                ),
            ));
        }
        for pair in ratios.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::config(
                    field,
                    format!(
                        "ratios must increase strictly, got {} then {}",
                        pair[0], pair[1]
                    ),
                ));
            }
        }
        for &r in ratios {
            if self.input_size % r != 0 {
                return Err(Error::config(
                    field,
                    format!("ratio {r} does not divide input_size {}", self.input_size),
                ));
            }
            if r % first != 0 {
                return Err(Error::config(
                    field,
                    format!("ratio {r} is not a multiple of the baseline ratio {first}"),
                ));
            }
        }
        if self.ms_compression_channels == 0 {
            return Err(Error::config("ms_compression_channels", "must be positive"));
        }
        if self.ms_upsample_mode == UpsampleMode::GroupDeconv {
            if self.ms_group == 0 {
                return Err(Error::config("ms_group", "must be positive"));
            }
            if self.ms_compression_channels % self.ms_group != 0 {
                return Err(Error::config(
                    "ms_group",
                    format!(
                        "compression channels {} not divisible by group {}",
                        self.ms_compression_channels, self.ms_group
                    ),
                ));
            }
        }
        Ok(())
    }

    fn validate_dense(&self) -> Result<()> {
        let field = "dense_decoder_ratios";
        let ratios = &self.dense_decoder_ratios;
        let Some(&max) = ratios.iter().max() else {
            return Err(Error::config(field, "need at least one upsampling path"));
        };
        if let Some(r) = ratios.iter().find(|&&r| r < 2) {
            return Err(Error::config(field, format!("ratio {r} must be >= 2")));
        }
        if let Some(r) = ratios.iter().find(|&&r| max % r != 0) {
            return Err(Error::config(
                field,
                format!("ratio {r} does not divide the largest ratio {max}"),
            ));
        }
        let target = self.bottleneck_size() * max;
        if !self.tap_sizes().contains(&target) {
            return Err(Error::config(
                field,
                format!(
                    "largest path reaches {target} px, which matches no skip tap {:?}",
                    self.tap_sizes()
                ),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_downsample_twelve_times() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.encoder_pool_ratios.iter().product::<usize>(), 12);
        assert_eq!(c.bottleneck_size(), 9);
        assert_eq!(c.tap_sizes(), vec![108, 54, 27]);
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = ModelConfig {
            ms_upsample_mode: UpsampleMode::Bilinear,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = ModelConfig::from_toml("dense_decoder = false\n").unwrap();
        assert!(!partial.dense_decoder);
        assert_eq!(partial.base_channels, 64);
    }

    #[test]
    fn invalid_fields_are_named() {
        let cases = [
            (
                ModelConfig {
                    input_size: 100,
                    ..Default::default()
                },
                "encoder_pool_ratios",
            ),
            (
                ModelConfig {
                    ms_subpath_ratios: vec![3, 6],
                    ..Default::default()
                },
                "ms_subpath_ratios",
            ),
            (
                ModelConfig {
                    ms_subpath_ratios: vec![2, 6, 6],
                    ..Default::default()
                },
                "ms_subpath_ratios",
            ),
            (
                ModelConfig {
                    ms_subpath_ratios: vec![2, 5],
                    ..Default::default()
                },
                "ms_subpath_ratios",
            ),
            (
                ModelConfig {
                    ms_group: 5,
                    ..Default::default()
                },
                "ms_group",
            ),
            (
                ModelConfig {
                    dense_decoder_ratios: vec![4],
                    ..Default::default()
                },
                "dense_decoder_ratios",
            ),
            (
                ModelConfig {
                    dropout_p: 1.0,
                    ..Default::default()
                },
                "dropout_p",
            ),
            (
                ModelConfig {
                    classes: 1,
                    ..Default::default()
                },
                "classes",
            ),
        ];
        for (cfg, field) in cases {
            match cfg.validate() {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error on {field}, got {other:?}"),
            }
        }
        assert!(ModelConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn group_constraint_only_applies_to_group_mode() {
        let c = ModelConfig {
            ms_group: 5,
            ms_upsample_mode: UpsampleMode::Deconv,
            ..Default::default()
        };
        c.validate().unwrap();
    }
}
