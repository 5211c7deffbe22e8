use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, sinusoidal_positions, LayerNorm, Linear};

use super::{TextEncoding, TokenSequence};

/// Post-norm transformer encoder layer (attention, then a GELU feed-forward).
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub attn_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn forward(
        &self,
        tape: &Tape<f64>,
        params: &ParamStore<f64>,
        x: &Var<f64>,
    ) -> Result<Var<f64>> {
        let q = self.query.forward(tape, params, x);
        let k = self.key.forward(tape, params, x);
        let v = self.value.forward(tape, params, x);
        let attn = multi_head_attention(tape, &q, &k, &v, self.heads, None)?;
        let h = tape.add(x, &self.attn_out.forward(tape, params, &attn));
        let h = self.attn_norm.forward(tape, params, &h);
        let ff = self.ff_in.forward(tape, params, &h);
        let ff = self.ff_out.forward(tape, params, &tape.gelu(&ff));
        Ok(self.ff_norm.forward(tape, params, &tape.add(&h, &ff)))
    }
}

/// Input embedding table layout shared by both backends.
#[derive(Clone, Debug)]
pub(crate) struct Embeddings {
    pub word: crate::autograd::ParamId,
    /// `[max_positions, d]`, learned (pretrained) or fixed sinusoidal.
    pub position: crate::autograd::ParamId,
    /// Segment-0 embedding added to every position, if the backend has one.
    pub token_type: Option<crate::autograd::ParamId>,
    pub norm: Option<LayerNorm>,
}

/// Frozen encoder: embeddings followed by a stack of transformer layers.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub(crate) params: ParamStore<f64>,
    pub(crate) embeddings: Embeddings,
    pub(crate) layers: Vec<TransformerLayer>,
    pub(crate) d_model: usize,
}

impl EncoderStack {
    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    fn max_positions(&self) -> usize {
        self.params.get(self.embeddings.position).nrows()
    }

    fn vocab_size(&self) -> usize {
        self.params.get(self.embeddings.word).nrows()
    }

    /// Final-layer hidden states `[len, d]` for a token sequence.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Array2<f64>> {
        if ids.is_empty() {
            return Err(Error::Input("no tokens to encode".into()));
        }
        if ids.len() > self.max_positions() {
            return Err(Error::Input(format!(
                "{} tokens exceed the encoder's {} positions",
                ids.len(),
                self.max_positions()
            )));
        }
        let vocab = self.vocab_size();
        let idx: Vec<usize> = ids
            .iter()
            .map(|&i| {
                let i = i as usize;
                if i < vocab {
                    Ok(i)
                } else {
                    Err(Error::Input(format!(
                        "token id {i} outside vocabulary of {vocab}"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        let tape = Tape::no_grad();
        let p = &self.params;
        let word = tape.param(p, self.embeddings.word);
        let mut x = tape.gather_rows(&word, &idx);
        let pos = p
            .get(self.embeddings.position)
            .slice(s![..ids.len(), ..])
            .to_owned();
        x = tape.add(&x, &Var::constant(pos));
        if let Some(tt) = self.embeddings.token_type {
            x = tape.add_row(&x, &tape.param(p, tt));
        }
        if let Some(norm) = &self.embeddings.norm {
            x = norm.forward(&tape, p, &x);
        }
        for layer in &self.layers {
            x = layer.forward(&tape, p, &x)?;
        }
        Ok(x.into_array())
    }
}

/// Settings of the self-contained toy encoder.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ToyEncoderConfig {
    pub d_text: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            d_text: 32,
            layers: 2,
            heads: 4,
            ff_dim: 64,
            seed: 0x7e47,
        }
    }
}

/// Builds a randomly initialised (seeded, frozen) encoder.
pub fn build_toy_encoder(
    cfg: &ToyEncoderConfig,
    vocab_size: usize,
    max_positions: usize,
) -> Result<EncoderStack> {
    if cfg.d_text == 0 || cfg.heads == 0 || !cfg.d_text.is_multiple_of(cfg.heads) {
        return Err(Error::Config(format!(
            "toy text encoder width {} must be a positive multiple of {} heads",
            cfg.d_text, cfg.heads
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_text;
    let mut params = ParamStore::new();
    let word = params.add_randn("word_embeddings", (vocab_size, d), 1.0, false, &mut rng);
    let position = params.add(
        "position_embeddings",
        sinusoidal_positions(max_positions, d),
        false,
    );
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let name = |part: &str| format!("layer{l}.{part}");
        let std_d = 1.0 / (d as f64).sqrt();
        let std_ff = 1.0 / (cfg.ff_dim as f64).sqrt();
        let norm = |params: &mut ParamStore<f64>, part: &str| {
            let mut n = LayerNorm::new(params, &name(part), d, false);
            n.eps = 1e-5;
            n
        };
        let query = Linear::new(&mut params, &name("query"), d, d, std_d, false, &mut rng);
        let key = Linear::new(&mut params, &name("key"), d, d, std_d, false, &mut rng);
        let value = Linear::new(&mut params, &name("value"), d, d, std_d, false, &mut rng);
        let attn_out = Linear::new(&mut params, &name("attn_out"), d, d, std_d, false, &mut rng);
        let attn_norm = norm(&mut params, "attn_norm");
        let ff_in = Linear::new(
            &mut params,
            &name("ff_in"),
            d,
            cfg.ff_dim,
            std_d,
            false,
            &mut rng,
        );
        let ff_out = Linear::new(
            &mut params,
            &name("ff_out"),
            cfg.ff_dim,
            d,
            std_ff,
            false,
            &mut rng,
        );
        let ff_norm = norm(&mut params, "ff_norm");
        layers.push(TransformerLayer {
            query,
            key,
            value,
            attn_out,
            attn_norm,
            ff_in,
            ff_out,
            ff_norm,
            heads: cfg.heads,
        });
    }
    Ok(EncoderStack {
        params,
        embeddings: Embeddings {
            word,
            position,
            token_type: None,
            norm: None,
        },
        layers,
        d_model: d,
    })
}

/// Pads hidden states to `length_max` rows and builds the validity mask.
pub fn pad_encoding(hidden: Array2<f64>, length_max: usize) -> Result<TextEncoding> {
    let (len, d) = hidden.dim();
    if len > length_max {
        return Err(Error::Shape(format!(
            "{len} encoded positions exceed length_max {length_max}"
        )));
    }
    let mut vectors = Array2::zeros((length_max, d));
    vectors.slice_mut(s![..len, ..]).assign(&hidden);
    let mask = (0..length_max).map(|i| i < len).collect();
    TextEncoding::new(vectors, mask)
}

pub(crate) fn encode_with(
    stack: &EncoderStack,
    tokens: &TokenSequence,
    length_max: usize,
) -> Result<TextEncoding> {
    pad_encoding(stack.hidden_states(&tokens.ids)?, length_max)
}
