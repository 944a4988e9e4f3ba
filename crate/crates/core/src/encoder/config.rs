use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::chunking::ConvContext;
use crate::frontend::N_MELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Large,
    Base,
    Tiny,
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "large" => Ok(Self::Large),
            "base" => Ok(Self::Base),
            "tiny" => Ok(Self::Tiny),
            other => Err(ConfigError(format!("unknown preset '{other}'"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Large => "large",
            Self::Base => "base",
            Self::Tiny => "tiny",
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("encoder config error: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    pub dropout: f32,
    /// Channels of both subsampling conv layers.
    pub subsample_channels: usize,
    pub n_mels: usize,
    pub conv_context: ConvContext,
}

impl EncoderConfig {
    pub fn large() -> Self {
        Self {
            d_model: 848,
            n_layers: 24,
            n_heads: 8,
            ffn_expansion: 4,
            conv_kernel: 15,
            dropout: 0.1,
            subsample_channels: 848,
            n_mels: N_MELS,
            conv_context: ConvContext::WithinChunk,
        }
    }

    pub fn base() -> Self {
        Self {
            d_model: 576,
            n_layers: 12,
            subsample_channels: 576,
            ..Self::large()
        }
    }

    /// Test-scale model.
    pub fn tiny() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            subsample_channels: 16,
            dropout: 0.0,
            ..Self::large()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Large => Self::large(),
            Preset::Base => Self::base(),
            Preset::Tiny => Self::tiny(),
        }
    }

    /// "large", "base" or "tiny" when the dims equal a preset, else "custom".
    pub fn preset_name(&self) -> &'static str {
        for p in [Preset::Large, Preset::Base, Preset::Tiny] {
            if *self == Self::preset(p) {
                return match p {
                    Preset::Large => "large",
                    Preset::Base => "base",
                    Preset::Tiny => "tiny",
                };
            }
        }
        "custom"
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ConfigError(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(ConfigError(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if self.n_layers == 0 || self.ffn_expansion == 0 || self.subsample_channels == 0 {
            return Err(ConfigError("layer, ffn and channel counts must be positive".into()));
        }
        if self.n_mels < 3 {
            return Err(ConfigError("n_mels must be >= 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Mel bins left after the two stride-2 subsampling convolutions.
    pub fn subsampled_mels(&self) -> usize {
        let half = |n: usize| (n - 1) / 2 + 1;
        half(half(self.n_mels))
    }

    pub fn to_kv(&self, prefix: &str, out: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            out.insert(format!("{prefix}{k}"), v);
        };
        put("d_model", self.d_model.to_string());
        put("n_layers", self.n_layers.to_string());
        put("n_heads", self.n_heads.to_string());
        put("ffn_expansion", self.ffn_expansion.to_string());
        put("conv_kernel", self.conv_kernel.to_string());
        put("dropout", self.dropout.to_string());
        put("subsample_channels", self.subsample_channels.to_string());
        put("n_mels", self.n_mels.to_string());
        put("conv_context", self.conv_context.to_string());
    }

    pub fn from_kv(prefix: &str, kv: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        fn get<T: FromStr>(kv: &BTreeMap<String, String>, key: String) -> Result<T, ConfigError> {
            kv.get(&key)
                .ok_or_else(|| ConfigError(format!("missing key {key}")))?
                .parse()
                .map_err(|_| ConfigError(format!("bad value for {key}")))
        }
        let cfg = Self {
            d_model: get(kv, format!("{prefix}d_model"))?,
            n_layers: get(kv, format!("{prefix}n_layers"))?,
            n_heads: get(kv, format!("{prefix}n_heads"))?,
            ffn_expansion: get(kv, format!("{prefix}ffn_expansion"))?,
            conv_kernel: get(kv, format!("{prefix}conv_kernel"))?,
            dropout: get(kv, format!("{prefix}dropout"))?,
            subsample_channels: get(kv, format!("{prefix}subsample_channels"))?,
            n_mels: get(kv, format!("{prefix}n_mels"))?,
            conv_context: get(kv, format!("{prefix}conv_context"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Large, Preset::Base, Preset::Tiny] {
            EncoderConfig::preset(p).validate().unwrap();
        }
        assert_eq!(EncoderConfig::large().d_model, 848);
        assert_eq!(EncoderConfig::large().n_layers, 24);
        assert_eq!(EncoderConfig::base().d_model, 576);
        assert_eq!(EncoderConfig::base().n_layers, 12);
        assert_eq!(EncoderConfig::tiny().subsampled_mels(), 20);
    }

    #[test]
    fn rejects_bad_dims() {
        let mut c = EncoderConfig::tiny();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::tiny();
        c.conv_kernel = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let mut kv = BTreeMap::new();
        let mut c = EncoderConfig::base();
        c.conv_context = ConvContext::CausalPast;
        c.to_kv("encoder.", &mut kv);
        assert_eq!(EncoderConfig::from_kv("encoder.", &kv).unwrap(), c);
    }
}
