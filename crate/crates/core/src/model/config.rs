use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geocode::MAX_LEVEL;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub poi_dim: usize,
    pub geo_dim: usize,
    pub time_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub geo_layers: usize,
    pub ngram: usize,
    pub level: u8,
    pub window_step: f64,
    pub dropout: f64,
    /// Scale attention logits by `1/sqrt(d_head)`.
    pub scaled_attention: bool,
    pub max_len: usize,
    /// Bound of the uniform initialisation of embedding tables.
    pub init_scale: f64,
    pub use_temporal_prompt: bool,
    pub use_time_embedding: bool,
    pub use_shifted_window: bool,
    pub use_geo_encoder: bool,
    pub use_user_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            poi_dim: 50,
            geo_dim: 50,
            time_dim: 100,
            model_dim: 100,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            geo_layers: 2,
            ngram: 4,
            level: 17,
            window_step: 0.25,
            dropout: 0.5,
            scaled_attention: false,
            max_len: 100,
            init_scale: 0.05,
            use_temporal_prompt: true,
            use_time_embedding: true,
            use_shifted_window: true,
            use_geo_encoder: true,
            use_user_embedding: false,
        }
    }
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim;
        if self.poi_dim + self.geo_dim != d || self.time_dim != d {
            return Err(Error::invalid(format!(
                "dimensions must satisfy poi_dim + geo_dim = time_dim = model_dim, got {} + {} / {} / {d}",
                self.poi_dim, self.geo_dim, self.time_dim
            )));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) || !self.geo_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} heads do not divide model_dim {d} and geo_dim {}",
                self.heads, self.geo_dim
            )));
        }
        if !(1..=MAX_LEVEL).contains(&self.level) || self.ngram == 0 || self.ngram > self.level as usize {
            return Err(Error::invalid(format!(
                "need 1 <= ngram <= level <= {MAX_LEVEL}, got ngram {} level {}",
                self.ngram, self.level
            )));
        }
        if self.ngram > 12 {
            return Err(Error::invalid("ngram width above 12 gives an oversized vocabulary"));
        }
        if !(self.window_step > 0.0 && self.window_step <= 1.0) {
            return Err(Error::invalid(format!("window_step {} outside (0, 1]", self.window_step)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len == 0 || !(self.init_scale >= 0.0) {
            return Err(Error::invalid("max_len must be positive and init_scale non-negative"));
        }
        Ok(())
    }

    /// Switches off one component: `tp` temporal prompt, `te` time
    /// embedding, `sw` shifted windows, `ge` geography encoder.
    pub fn ablate(&mut self, component: &str) -> Result<()> {
        match component {
            "tp" => self.use_temporal_prompt = false,
            "te" => self.use_time_embedding = false,
            "sw" => self.use_shifted_window = false,
            "ge" => self.use_geo_encoder = false,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown ablation {component:?}; expected tp, te, sw or ge"
                )))
            }
        }
        Ok(())
    }

    /// Sets a field by its key-file name. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "poi_dim" => self.poi_dim = parse_value(key, value)?,
            "geo_dim" => self.geo_dim = parse_value(key, value)?,
            "time_dim" => self.time_dim = parse_value(key, value)?,
            "model_dim" => self.model_dim = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "encoder_layers" => self.encoder_layers = parse_value(key, value)?,
            "decoder_layers" => self.decoder_layers = parse_value(key, value)?,
            "geo_layers" => self.geo_layers = parse_value(key, value)?,
            "ngram" => self.ngram = parse_value(key, value)?,
            "level" => self.level = parse_value(key, value)?,
            "window_step" => self.window_step = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "scaled_attention" => self.scaled_attention = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "init_scale" => self.init_scale = parse_value(key, value)?,
            "use_temporal_prompt" => self.use_temporal_prompt = parse_value(key, value)?,
            "use_time_embedding" => self.use_time_embedding = parse_value(key, value)?,
            "use_shifted_window" => self.use_shifted_window = parse_value(key, value)?,
            "use_geo_encoder" => self.use_geo_encoder = parse_value(key, value)?,
            "use_user_embedding" => self.use_user_embedding = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Key-file rendering; floats use the shortest exact representation.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let fields: [(&str, String); 20] = [
            ("poi_dim", self.poi_dim.to_string()),
            ("geo_dim", self.geo_dim.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("geo_layers", self.geo_layers.to_string()),
            ("ngram", self.ngram.to_string()),
            ("level", self.level.to_string()),
            ("window_step", self.window_step.to_string()),
            ("dropout", self.dropout.to_string()),
            ("scaled_attention", self.scaled_attention.to_string()),
            ("max_len", self.max_len.to_string()),
            ("init_scale", self.init_scale.to_string()),
            ("use_temporal_prompt", self.use_temporal_prompt.to_string()),
            ("use_time_embedding", self.use_time_embedding.to_string()),
            ("use_shifted_window", self.use_shifted_window.to_string()),
            ("use_geo_encoder", self.use_geo_encoder.to_string()),
            ("use_user_embedding", self.use_user_embedding.to_string()),
        ];
        for (k, v) in fields {
            writeln!(s, "{k}={v}").expect("writing to a string");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_roundtrip() {
        let mut cfg = ModelConfig {
            window_step: 0.3,
            use_user_embedding: true,
            ..ModelConfig::default()
        };
        cfg.ablate("tp").unwrap();
        let mut back = ModelConfig::default();
        for line in cfg.to_key_values().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set(k, v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(cfg.ablate("xx").is_err());
    }

    #[test]
    fn validation() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig {
            time_dim: 64,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
