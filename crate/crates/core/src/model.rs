//! A complete text-conditioned noise predictor: text front end plus U-Net
//! weights in single precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::inference::{EpsilonModel, EpsilonPrediction};
use crate::text::{TextConfig, TextEncoding, TextFrontend};
use crate::unet::{UNet, UNetConfig};

/// Architecture, text backend and signal format. Hashed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub text: TextConfig,
    pub sample_rate: u32,
    /// Fixed waveform length `L` seen by the network.
    pub segment_length: usize,
}

impl ModelConfig {
    /// 24 kHz, `L = 262 144`, pretrained-encoder width 768.
    pub fn full(text: TextConfig) -> Self {
        Self {
            unet: UNetConfig::full(768),
            text,
            sample_rate: 24_000,
            segment_length: 262_144,
        }
    }

    /// 8 kHz, `L = 4096`, toy text encoder.
    pub fn toy(speaker_count: usize) -> Self {
        let text = TextConfig::default();
        Self {
            unet: UNetConfig::toy(text.toy.d_text, speaker_count),
            text,
            sample_rate: 8_000,
            segment_length: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.unet
            .bottleneck_len(self.segment_length)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if let Some(d) = self.text.d_text_hint() {
            if d != self.unet.d_text {
                return Err(Error::Config(format!(
                    "text encoder width {d} does not match unet.d_text {}",
                    self.unet.d_text
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }
}

/// JSON with object keys sorted, no whitespace.
pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<_> = map.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        Value::Array(items) => format!(
            "[{}]",
            items
                .iter()
                .map(canonical_json)
                .collect::<Vec<_>>()
                .join(",")
        ),
        other => other.to_string(),
    }
}

/// Lines describing where two configurations differ, as `path: a -> b`.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value;
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<_> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    walk(
                        &p,
                        x.get(k).unwrap_or(&Value::Null),
                        y.get(k).unwrap_or(&Value::Null),
                        out,
                    );
                }
            }
            _ if a != b => out.push(format!("{path}: {a} -> {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(
        "",
        &serde_json::to_value(a).expect("config serialises"),
        &serde_json::to_value(b).expect("config serialises"),
        &mut out,
    );
    out
}

#[derive(Clone, Debug)]
pub struct TtsModel {
    pub config: ModelConfig,
    pub unet: UNet,
    pub params: ParamStore<f32>,
    pub text: TextFrontend,
}

impl TtsModel {
    /// Freshly initialised weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let text = TextFrontend::from_config(&config.text)?;
        if text.d_text() != config.unet.d_text {
            return Err(Error::Config(format!(
                "text encoder width {} does not match unet.d_text {}",
                text.d_text(),
                config.unet.d_text
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (unet, params) = UNet::new::<f32, _>(config.unet.clone(), &mut rng)?;
        Ok(Self {
            config,
            unet,
            params,
            text,
        })
    }

    pub fn encode_text(&self, text: &str) -> Result<TextEncoding> {
        self.text.encode_text(text)
    }
}

impl EpsilonModel for TtsModel {
    fn segment_length(&self) -> usize {
        self.config.segment_length
    }

    fn predict(
        &self,
        noisy: &[f64],
        sqrt_alpha_bar: f64,
        text: &TextEncoding,
        speaker: Option<usize>,
    ) -> Result<EpsilonPrediction> {
        let tape = Tape::<f32>::no_grad();
        let x = ndarray::Array2::from_shape_fn((1, noisy.len()), |(_, j)| noisy[j] as f32);
        let out = self.unet.forward(
            &tape,
            &self.params,
            &Var::constant(x),
            sqrt_alpha_bar,
            text,
            speaker,
        )?;
        Ok(EpsilonPrediction {
            epsilon: out.epsilon.value().iter().map(|&v| v as f64).collect(),
            omega: (out.log_omega.item() as f64).exp(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ModelConfig::toy(0);
        assert_eq!(a.hash(), ModelConfig::toy(0).hash());
        let mut b = a.clone();
        b.unet.cond_dim += 1;
        assert_ne!(a.hash(), b.hash());
        let diff = config_diff(&a, &b);
        assert_eq!(diff.len(), 1);
        assert!(diff[0].starts_with("unet.cond_dim: 64 -> 65"), "{diff:?}");
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v: serde_json::Value =
            serde_json::from_str(r#"{"b": [1, {"d": 2, "c": 3}], "a": "x"}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":"x","b":[1,{"c":3,"d":2}]}"#);
    }

    #[test]
    fn full_config_is_consistent() {
        let cfg = ModelConfig::full(TextConfig::default());
        cfg.unet.validate().unwrap();
        assert_eq!(cfg.unet.bottleneck_len(cfg.segment_length).unwrap(), 64);
    }

    #[test]
    fn toy_model_predicts_full_length() {
        let m = TtsModel::new(ModelConfig::toy(2), 1).unwrap();
        let enc = m.encode_text("hi there").unwrap();
        let p = m.predict(&vec![0.1; 4096], 0.5, &enc, Some(1)).unwrap();
        assert_eq!(p.epsilon.len(), 4096);
        assert!(p.omega > 0.0);
    }
}
