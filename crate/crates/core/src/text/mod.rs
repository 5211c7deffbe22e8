//! Text front end: tokenisation and a frozen encoder whose hidden states
//! form the cross-attention memory.

mod bert;
mod encoder;
mod tokenizer;

use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bert::load_bert;
pub use encoder::{
    build_toy_encoder, pad_encoding, EncoderStack, ToyEncoderConfig, TransformerLayer,
};
pub use tokenizer::{TokenSequence, Tokenizer, Vocabulary, CLS, PAD, SEP, UNK};

/// Padded encoder output with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding {
    vectors: Array2<f64>,
    mask: Vec<bool>,
}

impl TextEncoding {
    /// Rows flagged invalid must be zero and at least one row must be valid.
    pub fn new(vectors: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "mask has {} entries for {} rows",
                mask.len(),
                vectors.nrows()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Input("text encoding has no valid positions".into()));
        }
        for (i, &valid) in mask.iter().enumerate() {
            if !valid && vectors.row(i).iter().any(|&v| v != 0.0) {
                return Err(Error::Input(format!(
                    "masked text position {i} is not zero"
                )));
            }
        }
        Ok(Self { vectors, mask })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn d_text(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn length_max(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextBackend {
    Toy,
    Bert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub backend: TextBackend,
    pub length_max: usize,
    /// Weights of the pretrained backend (safetensors).
    pub weights_path: Option<PathBuf>,
    /// One token per line; required by the pretrained backend.
    pub vocab_path: Option<PathBuf>,
    pub bert_heads: usize,
    pub toy: ToyEncoderConfig,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            backend: TextBackend::Toy,
            length_max: 64,
            weights_path: None,
            vocab_path: None,
            bert_heads: 12,
            toy: ToyEncoderConfig::default(),
        }
    }
}

impl TextConfig {
    /// Width of the produced encoding without loading any weights, when known.
    pub fn d_text_hint(&self) -> Option<usize> {
        match self.backend {
            TextBackend::Toy => Some(self.toy.d_text),
            TextBackend::Bert => None,
        }
    }
}

/// Tokeniser plus frozen encoder.
#[derive(Clone, Debug)]
pub struct TextFrontend {
    tokenizer: Tokenizer,
    stack: EncoderStack,
    length_max: usize,
}

impl TextFrontend {
    pub fn from_config(cfg: &TextConfig) -> Result<Self> {
        match cfg.backend {
            TextBackend::Toy => {
                let tokenizer = Tokenizer::new(Vocabulary::characters(), cfg.length_max)?;
                let stack = build_toy_encoder(&cfg.toy, tokenizer.vocab().len(), cfg.length_max)?;
                Ok(Self {
                    tokenizer,
                    stack,
                    length_max: cfg.length_max,
                })
            }
            TextBackend::Bert => {
                let weights = cfg.weights_path.as_ref().ok_or_else(|| {
                    Error::Config(
                        "text encoder backend 'bert' is unavailable: no weights_path configured"
                            .into(),
                    )
                })?;
                let vocab = cfg.vocab_path.as_ref().ok_or_else(|| {
                    Error::Config(
                        "text encoder backend 'bert' is unavailable: no vocab_path configured"
                            .into(),
                    )
                })?;
                if !vocab.exists() {
                    return Err(Error::Config(format!(
                        "text encoder backend 'bert' is unavailable: vocabulary {} not found",
                        vocab.display()
                    )));
                }
                let stack = load_bert(weights, cfg.bert_heads)?;
                let tokenizer = Tokenizer::new(Vocabulary::from_file(vocab)?, cfg.length_max)?;
                Ok(Self {
                    tokenizer,
                    stack,
                    length_max: cfg.length_max,
                })
            }
        }
    }

    pub fn d_text(&self) -> usize {
        self.stack.d_model()
    }

    pub fn length_max(&self) -> usize {
        self.length_max
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn encoder(&self) -> &EncoderStack {
        &self.stack
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.tokenizer.tokenize(text)
    }

    pub fn encode_tokens(&self, tokens: &TokenSequence) -> Result<TextEncoding> {
        encoder::encode_with(&self.stack, tokens, self.length_max)
    }

    pub fn encode_text(&self, text: &str) -> Result<TextEncoding> {
        self.encode_tokens(&self.tokenize(text)?)
    }
}

#[cfg(test)]
mod tests;
