use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One resolution block; every entry of `strides` starts a level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub base_dimension: usize,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    /// Kernel bank size per level; a missing or zero entry means FiLM.
    #[serde(default)]
    pub adaptive_kernel: Vec<usize>,
    pub block_counts: Vec<usize>,
    #[serde(default)]
    pub self_attention: Vec<bool>,
    #[serde(default)]
    pub cross_attention: Vec<bool>,
    #[serde(default)]
    pub attention_heads: Vec<usize>,
}

/// Resolved settings of a single level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSpec {
    pub block: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bank: Option<usize>,
    pub res_blocks: usize,
    pub self_attention: bool,
    pub cross_attention: bool,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub blocks: Vec<BlockConfig>,
    pub d_text: usize,
    /// 0 leaves the model speaker-unconditioned.
    pub speaker_count: usize,
    #[serde(default)]
    pub toy_scale: bool,
    pub noise_embed_dim: usize,
    pub speaker_embed_dim: usize,
    pub cond_dim: usize,
    pub omega_hidden: usize,
    pub norm_groups: usize,
    /// Kernel width of the full-resolution input and output convolutions.
    pub io_kernel: usize,
}

impl UNetConfig {
    /// Four-block layout with the given base text width.
    pub fn full(d_text: usize) -> Self {
        let plain = |dim: usize, n: usize| BlockConfig {
            base_dimension: dim,
            kernel_sizes: vec![5, 5],
            strides: vec![],
            adaptive_kernel: vec![],
            block_counts: vec![],
            self_attention: vec![false; n],
            cross_attention: vec![false; n],
            attention_heads: vec![],
        };
        Self {
            blocks: vec![
                BlockConfig {
                    strides: vec![2, 2],
                    adaptive_kernel: vec![8, 8],
                    block_counts: vec![2, 2],
                    ..plain(128, 2)
                },
                BlockConfig {
                    strides: vec![2, 2],
                    adaptive_kernel: vec![4, 4],
                    block_counts: vec![2, 2],
                    ..plain(256, 2)
                },
                BlockConfig {
                    strides: vec![4],
                    adaptive_kernel: vec![2],
                    block_counts: vec![2],
                    ..plain(512, 1)
                },
                BlockConfig {
                    base_dimension: 1024,
                    kernel_sizes: vec![3; 5],
                    strides: vec![4, 2, 2, 2, 2],
                    adaptive_kernel: vec![],
                    block_counts: vec![1; 5],
                    self_attention: vec![true; 5],
                    cross_attention: vec![true; 5],
                    attention_heads: vec![8; 5],
                },
            ],
            d_text,
            speaker_count: 0,
            toy_scale: false,
            noise_embed_dim: 128,
            speaker_embed_dim: 128,
            cond_dim: 512,
            omega_hidden: 128,
            norm_groups: 32,
            io_kernel: 5,
        }
    }

    /// Small configuration for desk-scale training (stride product 64).
    pub fn toy(d_text: usize, speaker_count: usize) -> Self {
        Self {
            blocks: vec![
                BlockConfig {
                    base_dimension: 16,
                    kernel_sizes: vec![5, 5],
                    strides: vec![2, 2],
                    adaptive_kernel: vec![4, 4],
                    block_counts: vec![1, 1],
                    self_attention: vec![false; 2],
                    cross_attention: vec![false; 2],
                    attention_heads: vec![],
                },
                BlockConfig {
                    base_dimension: 32,
                    kernel_sizes: vec![5],
                    strides: vec![4],
                    adaptive_kernel: vec![2],
                    block_counts: vec![1],
                    self_attention: vec![false],
                    cross_attention: vec![false],
                    attention_heads: vec![],
                },
                BlockConfig {
                    base_dimension: 64,
                    kernel_sizes: vec![3, 3],
                    strides: vec![2, 2],
                    adaptive_kernel: vec![],
                    block_counts: vec![1, 1],
                    self_attention: vec![true; 2],
                    cross_attention: vec![true; 2],
                    attention_heads: vec![4, 4],
                },
            ],
            d_text,
            speaker_count,
            toy_scale: true,
            noise_embed_dim: 32,
            speaker_embed_dim: 16,
            cond_dim: 64,
            omega_hidden: 32,
            norm_groups: 8,
            io_kernel: 5,
        }
    }

    /// Minimal configuration with every mechanism enabled, for gradient checks.
    pub fn tiny(d_text: usize, speaker_count: usize) -> Self {
        Self {
            blocks: vec![
                BlockConfig {
                    base_dimension: 4,
                    kernel_sizes: vec![3],
                    strides: vec![2],
                    adaptive_kernel: vec![2],
                    block_counts: vec![1],
                    self_attention: vec![false],
                    cross_attention: vec![false],
                    attention_heads: vec![],
                },
                BlockConfig {
                    base_dimension: 6,
                    kernel_sizes: vec![3],
                    strides: vec![2],
                    adaptive_kernel: vec![],
                    block_counts: vec![1],
                    self_attention: vec![true],
                    cross_attention: vec![true],
                    attention_heads: vec![2],
                },
            ],
            d_text,
            speaker_count,
            toy_scale: true,
            noise_embed_dim: 8,
            speaker_embed_dim: 4,
            cond_dim: 8,
            omega_hidden: 4,
            norm_groups: 2,
            io_kernel: 3,
        }
    }

    /// Total downsampling factor.
    pub fn stride_product(&self) -> usize {
        self.blocks.iter().flat_map(|b| b.strides.iter()).product()
    }

    pub fn bottleneck_len(&self, input_len: usize) -> Result<usize> {
        let p = self.stride_product();
        if input_len == 0 || !input_len.is_multiple_of(p) {
            return Err(Error::Shape(format!(
                "waveform length {input_len} must be a positive multiple of {p}"
            )));
        }
        Ok(input_len / p)
    }

    pub fn base_channels(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.base_dimension)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.blocks.is_empty() {
            return bad("U-Net needs at least one block".into());
        }
        for (name, v) in [
            ("noise_embed_dim", self.noise_embed_dim),
            ("cond_dim", self.cond_dim),
            ("omega_hidden", self.omega_hidden),
            ("norm_groups", self.norm_groups),
            ("d_text", self.d_text),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.noise_embed_dim.is_multiple_of(2) {
            return bad("noise_embed_dim must be even".into());
        }
        if self.io_kernel.is_multiple_of(2) {
            return bad("io_kernel must be odd".into());
        }
        if self.speaker_count > 0 && self.speaker_embed_dim == 0 {
            return bad("speaker_embed_dim must be positive".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let n = b.strides.len();
            if n == 0 {
                return bad(format!("block {i} has no strides"));
            }
            if b.base_dimension == 0 {
                return bad(format!("block {i} has zero channels"));
            }
            if b.kernel_sizes.len() < n {
                return bad(format!(
                    "block {i} lists {} kernel sizes for {n} levels",
                    b.kernel_sizes.len()
                ));
            }
            if b.block_counts.len() != n {
                return bad(format!(
                    "block {i} lists {} block counts for {n} levels",
                    b.block_counts.len()
                ));
            }
            if b.adaptive_kernel.len() > n {
                return bad(format!(
                    "block {i} lists {} kernel banks for {n} levels",
                    b.adaptive_kernel.len()
                ));
            }
            if b.strides.contains(&0) {
                return bad(format!("block {i} has a zero stride"));
            }
            if b.kernel_sizes.iter().any(|k| k % 2 == 0) {
                return bad(format!("block {i} kernel sizes must be odd"));
            }
            for level in 0..n {
                let sa = b.self_attention.get(level).copied().unwrap_or(false);
                let ca = b.cross_attention.get(level).copied().unwrap_or(false);
                if sa || ca {
                    let h = b.attention_heads.get(level).copied().unwrap_or(0);
                    if h == 0 || b.base_dimension % h != 0 {
                        return bad(format!(
                            "block {i} level {level}: {} channels cannot be split into {h} heads",
                            b.base_dimension
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Levels in downsampling order.
    pub fn levels(&self) -> Vec<LevelSpec> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            for (li, &stride) in b.strides.iter().enumerate() {
                out.push(LevelSpec {
                    block: bi,
                    channels: b.base_dimension,
                    kernel: b.kernel_sizes[li],
                    stride,
                    bank: b.adaptive_kernel.get(li).copied().filter(|&k| k > 0),
                    res_blocks: b.block_counts[li],
                    self_attention: b.self_attention.get(li).copied().unwrap_or(false),
                    cross_attention: b.cross_attention.get(li).copied().unwrap_or(false),
                    heads: b.attention_heads.get(li).copied().unwrap_or(0),
                });
            }
        }
        out
    }

    /// Number of scalar parameters of the network built from this config.
    pub fn parameter_count(&self) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let conv = |i: usize, o: usize, k: usize| o * i * k + o;
        let e = self.noise_embed_dim;
        let cd = self.cond_dim;
        let spk = if self.speaker_count > 0 {
            self.speaker_embed_dim
        } else {
            0
        };
        let mut n = self.speaker_count * spk;
        n += lin(e + spk, cd) + lin(cd, cd);
        n += lin(e, self.omega_hidden) + lin(self.omega_hidden, 1);
        let c0 = self.base_channels();
        n += conv(1, c0, self.io_kernel);
        let mut prev = c0;
        for l in self.levels() {
            let c = l.channels;
            n += conv(prev, c, l.kernel) + conv(c, prev, l.kernel);
            let mut stage = 0;
            let first = match l.bank {
                Some(bank) => bank * c * c * l.kernel + c + lin(cd, bank),
                None => conv(c, c, l.kernel) + lin(cd, 2 * c),
            };
            stage += l.res_blocks * (4 * c + first + conv(c, c, l.kernel));
            if l.self_attention {
                stage += 2 * c + lin(c, 3 * c) + lin(c, c);
            }
            if l.cross_attention {
                stage += 2 * c + 2 * lin(c, c) + 2 * lin(self.d_text, c);
            }
            n += 2 * stage;
            prev = c;
        }
        n + 2 * c0 + conv(c0, 1, self.io_kernel)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
