//! Run configuration: flat `key = value` text, every key overridable.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctdg::SamplingStrategy;
use crate::dct::AttentionKind;
use crate::error::{Error, Result};
use crate::memory::Aggregation;
use crate::tape::Activation;
use crate::time_codec::TimeVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub d_t: usize,
    pub epsilon: usize,
    pub layers: usize,
    pub heads: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub time_variant: TimeVariant,
    pub attention: AttentionKind,
    pub use_short_term: bool,
    pub sampling: SamplingStrategy,
    pub activation: Activation,
    pub precision: Precision,
    pub train_proportion: f64,
    pub split: (f64, f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            d_t: 64,
            epsilon: 10,
            layers: 1,
            heads: 2,
            lr: 1e-3,
            lambda: 1e-3,
            batch_size: 200,
            epochs: 10,
            seed: 0,
            aggregation: Aggregation::Last,
            time_variant: TimeVariant::Bochner,
            attention: AttentionKind::Dsacf,
            use_short_term: true,
            sampling: SamplingStrategy::MostRecent,
            activation: Activation::Silu,
            precision: Precision::F64,
            train_proportion: 1.0,
            split: (0.8, 0.1, 0.1),
        }
    }
}

/// Named model variants of the ablation study.
pub const VARIANTS: [&str; 6] = ["full", "no-short", "sum", "position", "mean", "2l"];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

impl TrainConfig {
    /// Set one key. Unknown keys return `Ok(false)` so callers can route
    /// them elsewhere.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "d" => self.d = parse(key, v)?,
            "d_t" => self.d_t = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "aggregation" => self.aggregation = v.parse().map_err(cfg)?,
            "time_variant" => self.time_variant = v.parse().map_err(cfg)?,
            "attention" => self.attention = v.parse().map_err(cfg)?,
            "use_short_term" => self.use_short_term = parse_bool(key, v)?,
            "sampling" => self.sampling = v.parse().map_err(cfg)?,
            "activation" => self.activation = v.parse().map_err(cfg)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("invalid precision '{v}'"))),
                }
            }
            "train_proportion" => self.train_proportion = parse(key, v)?,
            "split" => {
                let parts: Vec<f64> = v
                    .split([',', '/'])
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Config(format!("split needs three ratios, got '{v}'")));
                }
                self.split = (parts[0], parts[1], parts[2]);
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Apply a named ablation variant on top of this configuration.
    pub fn with_variant(&self, variant: &str) -> Result<TrainConfig> {
        let mut c = self.clone();
        match variant {
            "full" => {}
            "no-short" => c.use_short_term = false,
            "sum" => c.attention = AttentionKind::Sum,
            "position" => c.time_variant = TimeVariant::Position,
            "mean" => c.aggregation = Aggregation::Mean,
            "2l" => c.layers = 2,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown variant '{other}' (expected one of {})",
                    VARIANTS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.d_t == 0 || !self.d_t.is_multiple_of(2) {
            return bad(format!("d_t must be even and positive, got {}", self.d_t));
        }
        if self.epsilon == 0 {
            return bad("epsilon must be at least 1".into());
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.train_proportion > 0.0 && self.train_proportion <= 1.0) {
            return bad(format!("train_proportion must lie in (0, 1], got {}", self.train_proportion));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

fn cfg(e: Error) -> Error {
    Error::Config(e.to_string())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: k as u64 + 1,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Render a config as `key = value` text that [`parse_kv`] and
/// [`TrainConfig::set`] read back.
pub fn to_kv(config: &TrainConfig) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    let mut out = String::new();
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            let text = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Array(a) => a
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {text}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut c = TrainConfig::default();
        c.lr = 1e-4;
        c.aggregation = Aggregation::Mean;
        c.sampling = SamplingStrategy::Uniform;
        c.split = (0.7, 0.2, 0.1);
        c.use_short_term = false;
        let text = to_kv(&c);
        let mut back = TrainConfig::default();
        for (k, v) in parse_kv(&text).unwrap() {
            assert!(back.set(&k, &v).unwrap(), "key {k}");
        }
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn invalid_values() {
        let mut c = TrainConfig::default();
        assert!(c.set("lr", "fast").is_err());
        assert!(c.set("aggregation", "attention").is_err());
        assert!(!c.set("nonsense", "1").unwrap());
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(parse_kv("d 4").is_err());
        assert_eq!(parse_kv("# c\n d = 4 # x\n").unwrap(), vec![("d".into(), "4".into())]);
    }

    #[test]
    fn variants() {
        let base = TrainConfig::default();
        assert!(!base.with_variant("no-short").unwrap().use_short_term);
        assert_eq!(base.with_variant("2l").unwrap().layers, 2);
        assert_eq!(base.with_variant("sum").unwrap().attention, AttentionKind::Sum);
        assert_eq!(base.with_variant("position").unwrap().time_variant, TimeVariant::Position);
        assert_eq!(base.with_variant("mean").unwrap().aggregation, Aggregation::Mean);
        assert_eq!(base.with_variant("full").unwrap(), base);
        assert!(base.with_variant("deep").is_err());
    }
}
