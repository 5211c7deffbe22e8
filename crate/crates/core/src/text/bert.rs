//! Loader for BERT-style encoder weights stored as safetensors.

use std::path::Path;

use ndarray::Array2;
use safetensors::{Dtype, SafeTensors};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

use super::encoder::{Embeddings, EncoderStack, TransformerLayer};

struct Source<'a> {
    tensors: SafeTensors<'a>,
    prefix: &'static str,
}

impl Source<'_> {
    fn has(&self, name: &str) -> bool {
        self.tensors
            .tensor(&format!("{}{name}", self.prefix))
            .is_ok()
    }

    fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let full = format!("{}{name}", self.prefix);
        let view = self
            .tensors
            .tensor(&full)
            .map_err(|_| Error::Config(format!("text encoder weights lack tensor {full}")))?;
        let data = view.data();
        let values: Vec<f64> = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect(),
            other => {
                return Err(Error::Config(format!(
                    "tensor {full} has unsupported dtype {other:?}; convert the weights to F32"
                )))
            }
        };
        let shape = match view.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Config(format!(
                    "tensor {full} has unsupported rank {}",
                    s.len()
                )))
            }
        };
        Array2::from_shape_vec(shape, values)
            .map_err(|e| Error::Config(format!("tensor {full}: {e}")))
    }

    /// LayerNorm parameters, accepting both `weight/bias` and `gamma/beta`.
    fn norm(&self, name: &str) -> Result<(Array2<f64>, Array2<f64>)> {
        if self.has(&format!("{name}.weight")) {
            Ok((
                self.matrix(&format!("{name}.weight"))?,
                self.matrix(&format!("{name}.bias"))?,
            ))
        } else {
            Ok((
                self.matrix(&format!("{name}.gamma"))?,
                self.matrix(&format!("{name}.beta"))?,
            ))
        }
    }
}

fn add_linear(
    params: &mut ParamStore<f64>,
    src: &Source,
    name: &str,
    d_in: usize,
) -> Result<Linear> {
    // stored as [out, in]
    let w = src.matrix(&format!("{name}.weight"))?;
    let b = src.matrix(&format!("{name}.bias"))?;
    if w.ncols() != d_in || b.len() != w.nrows() {
        return Err(Error::Config(format!(
            "tensor {name} has shape {:?}, expected input width {d_in}",
            w.dim()
        )));
    }
    let out_dim = w.nrows();
    Ok(Linear {
        weight: params.add(format!("{name}.weight"), w.t().to_owned(), false),
        bias: params.add(
            format!("{name}.bias"),
            b.into_shape_with_order((1, out_dim)).expect("bias row"),
            false,
        ),
        in_dim: d_in,
        out_dim,
    })
}

fn add_norm(params: &mut ParamStore<f64>, src: &Source, name: &str, d: usize) -> Result<LayerNorm> {
    let (g, b) = src.norm(name)?;
    if g.len() != d || b.len() != d {
        return Err(Error::Config(format!(
            "layer norm {name} has width {}, expected {d}",
            g.len()
        )));
    }
    Ok(LayerNorm {
        gamma: params.add(
            format!("{name}.gamma"),
            g.into_shape_with_order((1, d)).expect("row"),
            false,
        ),
        beta: params.add(
            format!("{name}.beta"),
            b.into_shape_with_order((1, d)).expect("row"),
            false,
        ),
        eps: 1e-12,
    })
}

/// Reads a BERT encoder (Hugging Face tensor names, with or without a
/// `bert.` prefix) into a frozen [`EncoderStack`].
pub fn load_bert(path: &Path, heads: usize) -> Result<EncoderStack> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "text encoder backend 'bert' is unavailable: weights file {} not found",
            path.display()
        )));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Config(format!("{} is not a safetensors file: {e}", path.display())))?;
    let prefix = if tensors
        .tensor("bert.embeddings.word_embeddings.weight")
        .is_ok()
    {
        "bert."
    } else {
        ""
    };
    let src = Source { tensors, prefix };

    let mut params = ParamStore::new();
    let word = src.matrix("embeddings.word_embeddings.weight")?;
    let d = word.ncols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "hidden width {d} is not divisible by {heads} heads"
        )));
    }
    let position = src.matrix("embeddings.position_embeddings.weight")?;
    let word = params.add("embeddings.word", word, false);
    let position = params.add("embeddings.position", position, false);
    let token_type = if src.has("embeddings.token_type_embeddings.weight") {
        let tt = src.matrix("embeddings.token_type_embeddings.weight")?;
        Some(params.add(
            "embeddings.token_type",
            tt.row(0).to_owned().insert_axis(ndarray::Axis(0)),
            false,
        ))
    } else {
        None
    };
    let norm = Some(add_norm(&mut params, &src, "embeddings.LayerNorm", d)?);

    let mut layers = Vec::new();
    while src.has(&format!(
        "encoder.layer.{}.attention.self.query.weight",
        layers.len()
    )) {
        let p = format!("encoder.layer.{}", layers.len());
        let query = add_linear(&mut params, &src, &format!("{p}.attention.self.query"), d)?;
        let key = add_linear(&mut params, &src, &format!("{p}.attention.self.key"), d)?;
        let value = add_linear(&mut params, &src, &format!("{p}.attention.self.value"), d)?;
        let attn_out = add_linear(&mut params, &src, &format!("{p}.attention.output.dense"), d)?;
        let attn_norm = add_norm(
            &mut params,
            &src,
            &format!("{p}.attention.output.LayerNorm"),
            d,
        )?;
        let ff_in = add_linear(&mut params, &src, &format!("{p}.intermediate.dense"), d)?;
        let ff_out = add_linear(
            &mut params,
            &src,
            &format!("{p}.output.dense"),
            ff_in.out_dim,
        )?;
        let ff_norm = add_norm(&mut params, &src, &format!("{p}.output.LayerNorm"), d)?;
        layers.push(TransformerLayer {
            query,
            key,
            value,
            attn_out,
            attn_norm,
            ff_in,
            ff_out,
            ff_norm,
            heads,
        });
    }
    if layers.is_empty() {
        return Err(Error::Config(format!(
            "{} contains no encoder layers",
            path.display()
        )));
    }
    Ok(EncoderStack {
        params,
        embeddings: Embeddings {
            word,
            position,
            token_type,
            norm,
        },
        layers,
        d_model: d,
    })
}
