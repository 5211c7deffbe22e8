//! One-dimensional U-Net that predicts the injected noise of a waveform.

mod config;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{cast, ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    multi_head_attention, norm_groups, sinusoidal_positions, AdaptiveConv, Conv1d, Film, GroupNorm,
    Linear,
};
use crate::text::TextEncoding;

pub use config::{BlockConfig, LevelSpec, UNetConfig};

/// Scale applied to `√ᾱ` before the sinusoidal features.
const NOISE_EMBED_SCALE: f64 = 1000.0;

/// Sinusoidal features of the continuous noise level: `sin` then `cos` of
/// `1000·√ᾱ` at geometrically spaced frequencies.
pub fn noise_level_embedding(sqrt_alpha_bar: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = NOISE_EMBED_SCALE.powf(-(i as f64) / half as f64);
        let angle = NOISE_EMBED_SCALE * sqrt_alpha_bar * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

#[derive(Clone, Debug)]
enum FirstConv {
    Plain(Conv1d),
    Adaptive(AdaptiveConv),
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: FirstConv,
    norm2: GroupNorm,
    film: Option<Film>,
    conv2: Conv1d,
}

impl ResBlock {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &UNetConfig,
        level: &LevelSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let c = level.channels;
        let groups = norm_groups(c, cfg.norm_groups);
        let conv1 = match level.bank {
            Some(bank) => FirstConv::Adaptive(AdaptiveConv::new(
                store,
                &format!("{name}.conv1"),
                cfg.cond_dim,
                c,
                c,
                level.kernel,
                bank,
                rng,
            )?),
            None => FirstConv::Plain(Conv1d::new(
                store,
                &format!("{name}.conv1"),
                c,
                c,
                level.kernel,
                1,
                1.0,
                rng,
            )),
        };
        let film = level
            .bank
            .is_none()
            .then(|| Film::new(store, &format!("{name}.film"), cfg.cond_dim, c, rng));
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c, groups),
            conv1,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c, groups),
            film,
            conv2: Conv1d::new(
                store,
                &format!("{name}.conv2"),
                c,
                c,
                level.kernel,
                1,
                0.0,
                rng,
            ),
        })
    }

    fn forward<F: Scalar>(
        &self,
        t: &Tape<F>,
        p: &ParamStore<F>,
        x: &Var<F>,
        cond: &Var<F>,
    ) -> Result<Var<F>> {
        let h = t.silu(&self.norm1.forward(t, p, x));
        let h = match &self.conv1 {
            FirstConv::Plain(conv) => conv.forward(t, p, &h),
            FirstConv::Adaptive(conv) => conv.forward(t, p, &h, cond)?,
        };
        let mut h = self.norm2.forward(t, p, &h);
        if let Some(film) = &self.film {
            h = film.forward(t, p, &h, cond)?;
        }
        let h = self.conv2.forward(t, p, &t.silu(&h));
        Ok(t.add(x, &h))
    }
}

/// Multi-head self-attention over time with absolute sinusoidal positions.
#[derive(Clone, Debug)]
struct SelfAttention {
    norm: GroupNorm,
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        groups: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups),
            qkv: Linear::init(store, &format!("{name}.qkv"), channels, 3 * channels, rng),
            out: Linear::new(
                store,
                &format!("{name}.out"),
                channels,
                channels,
                0.0,
                true,
                rng,
            ),
            heads,
        }
    }

    fn forward<F: Scalar>(&self, t: &Tape<F>, p: &ParamStore<F>, x: &Var<F>) -> Result<Var<F>> {
        let (c, len) = x.shape();
        let h = t.transpose(&self.norm.forward(t, p, x));
        let h = t.add(&h, &Var::constant(sinusoidal_positions::<F>(len, c)));
        let qkv = self.qkv.forward(t, p, &h);
        let q = t.slice_cols(&qkv, 0, c);
        let k = t.slice_cols(&qkv, c, 2 * c);
        let v = t.slice_cols(&qkv, 2 * c, 3 * c);
        let ctx = multi_head_attention(t, &q, &k, &v, self.heads, None)?;
        let o = self.out.forward(t, p, &ctx);
        Ok(t.add(x, &t.transpose(&o)))
    }
}

/// Attention from feature positions (queries) to text positions (keys and
/// values).
#[derive(Clone, Debug)]
pub struct CrossAttention {
    norm: GroupNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        d_text: usize,
        groups: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups),
            query: Linear::init(store, &format!("{name}.query"), channels, channels, rng),
            key: Linear::init(store, &format!("{name}.key"), d_text, channels, rng),
            value: Linear::init(store, &format!("{name}.value"), d_text, channels, rng),
            out: Linear::new(
                store,
                &format!("{name}.out"),
                channels,
                channels,
                0.0,
                true,
                rng,
            ),
            heads,
        }
    }

    /// Attention context `[time, channels]` before the output projection.
    pub fn attend<F: Scalar>(
        &self,
        t: &Tape<F>,
        p: &ParamStore<F>,
        x: &Var<F>,
        text: &Var<F>,
        mask: &[bool],
    ) -> Result<Var<F>> {
        if text.cols() != self.key.in_dim {
            return Err(Error::Shape(format!(
                "text width {} does not match the model's {}",
                text.cols(),
                self.key.in_dim
            )));
        }
        let h = t.transpose(&self.norm.forward(t, p, x));
        let q = self.query.forward(t, p, &h);
        let k = self.key.forward(t, p, text);
        let v = self.value.forward(t, p, text);
        multi_head_attention(t, &q, &k, &v, self.heads, Some(mask))
    }

    pub fn forward<F: Scalar>(
        &self,
        t: &Tape<F>,
        p: &ParamStore<F>,
        x: &Var<F>,
        text: &Var<F>,
        mask: &[bool],
    ) -> Result<Var<F>> {
        let ctx = self.attend(t, p, x, text, mask)?;
        let o = self.out.forward(t, p, &ctx);
        Ok(t.add(x, &t.transpose(&o)))
    }

    pub fn value_projection(&self) -> &Linear {
        &self.value
    }
}

#[derive(Clone, Debug)]
struct Stage {
    res: Vec<ResBlock>,
    self_attn: Option<SelfAttention>,
    cross_attn: Option<CrossAttention>,
}

impl Stage {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &UNetConfig,
        level: &LevelSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let groups = norm_groups(level.channels, cfg.norm_groups);
        let res = (0..level.res_blocks)
            .map(|i| ResBlock::new(store, &format!("{name}.res{i}"), cfg, level, rng))
            .collect::<Result<_>>()?;
        let self_attn = level.self_attention.then(|| {
            SelfAttention::new(
                store,
                &format!("{name}.self_attn"),
                level.channels,
                groups,
                level.heads,
                rng,
            )
        });
        let cross_attn = level.cross_attention.then(|| {
            CrossAttention::new(
                store,
                &format!("{name}.cross_attn"),
                level.channels,
                cfg.d_text,
                groups,
                level.heads,
                rng,
            )
        });
        Ok(Self {
            res,
            self_attn,
            cross_attn,
        })
    }

    fn forward<F: Scalar>(
        &self,
        t: &Tape<F>,
        p: &ParamStore<F>,
        x: Var<F>,
        cond: &Var<F>,
        text: &Var<F>,
        mask: &[bool],
    ) -> Result<Var<F>> {
        let mut x = x;
        for block in &self.res {
            x = block.forward(t, p, &x, cond)?;
        }
        if let Some(sa) = &self.self_attn {
            x = sa.forward(t, p, &x)?;
        }
        if let Some(ca) = &self.cross_attn {
            x = ca.forward(t, p, &x, text, mask)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct Level {
    spec: LevelSpec,
    down: Conv1d,
    down_stage: Stage,
    up_stage: Stage,
    up: Conv1d,
}

/// Network output: predicted noise `[1, L]` and the log of the loss
/// variance weight `[1, 1]`.
pub struct UNetOutput<F> {
    pub epsilon: Var<F>,
    pub log_omega: Var<F>,
    pub bottleneck_len: usize,
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    speaker_table: Option<ParamId>,
    cond_in: Linear,
    cond_out: Linear,
    omega_in: Linear,
    omega_out: Linear,
    conv_in: Conv1d,
    levels: Vec<Level>,
    out_norm: GroupNorm,
    conv_out: Conv1d,
}

impl UNet {
    /// Builds the network and its freshly initialised parameters.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        config: UNetConfig,
        rng: &mut R,
    ) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let mut s = ParamStore::new();
        let speaker_table = (config.speaker_count > 0).then(|| {
            s.add_randn(
                "speaker_embedding",
                (config.speaker_count, config.speaker_embed_dim),
                1.0,
                true,
                rng,
            )
        });
        let spk_dim = if config.speaker_count > 0 {
            config.speaker_embed_dim
        } else {
            0
        };
        let cond_in = Linear::init(
            &mut s,
            "cond.in",
            config.noise_embed_dim + spk_dim,
            config.cond_dim,
            rng,
        );
        let cond_out = Linear::init(&mut s, "cond.out", config.cond_dim, config.cond_dim, rng);
        let omega_in = Linear::init(
            &mut s,
            "omega.in",
            config.noise_embed_dim,
            config.omega_hidden,
            rng,
        );
        let omega_out = Linear::new(&mut s, "omega.out", config.omega_hidden, 1, 0.0, true, rng);

        let c0 = config.base_channels();
        let conv_in = Conv1d::new(&mut s, "conv_in", 1, c0, config.io_kernel, 1, 1.0, rng);
        let mut levels = Vec::new();
        let mut prev = c0;
        for (i, spec) in config.levels().into_iter().enumerate() {
            let name = format!("level{i}");
            let down = Conv1d::new(
                &mut s,
                &format!("{name}.down"),
                prev,
                spec.channels,
                spec.kernel,
                spec.stride,
                1.0,
                rng,
            );
            let down_stage = Stage::new(&mut s, &format!("{name}.enc"), &config, &spec, rng)?;
            let up_stage = Stage::new(&mut s, &format!("{name}.dec"), &config, &spec, rng)?;
            let up = Conv1d::new(
                &mut s,
                &format!("{name}.up"),
                spec.channels,
                prev,
                spec.kernel,
                1,
                1.0,
                rng,
            );
            prev = spec.channels;
            levels.push(Level {
                spec,
                down,
                down_stage,
                up_stage,
                up,
            });
        }
        let out_norm = GroupNorm::new(&mut s, "out_norm", c0, norm_groups(c0, config.norm_groups));
        let conv_out = Conv1d::new(&mut s, "conv_out", c0, 1, config.io_kernel, 1, 0.0, rng);
        Ok((
            Self {
                config,
                speaker_table,
                cond_in,
                cond_out,
                omega_in,
                omega_out,
                conv_in,
                levels,
                out_norm,
                conv_out,
            },
            s,
        ))
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Conditioning vector `[1, cond_dim]` from the noise level and speaker.
    /// Without a speaker table every request maps to the same null embedding.
    pub fn conditioning<F: Scalar>(
        &self,
        t: &Tape<F>,
        p: &ParamStore<F>,
        sqrt_alpha_bar: f64,
        speaker: Option<usize>,
    ) -> Result<Var<F>> {
        let emb = self.noise_embedding::<F>(sqrt_alpha_bar);
        let joined = match self.speaker_table {
            Some(table) => {
                let spk = match speaker {
                    Some(i) if i < self.config.speaker_count => {
                        t.gather_rows(&t.param(p, table), &[i])
                    }
                    Some(i) => {
                        return Err(Error::Input(format!(
                            "speaker index {i} outside the model's {} speakers",
                            self.config.speaker_count
                        )))
                    }
                    None => Var::constant(Array2::zeros((1, self.config.speaker_embed_dim))),
                };
                t.concat_cols(&[&emb, &spk])
            }
            None => emb,
        };
        let h = t.silu(&self.cond_in.forward(t, p, &joined));
        Ok(self.cond_out.forward(t, p, &h))
    }

    fn noise_embedding<F: Scalar>(&self, sqrt_alpha_bar: f64) -> Var<F> {
        let e = noise_level_embedding(sqrt_alpha_bar, self.config.noise_embed_dim);
        Var::constant(Array2::from_shape_fn((1, e.len()), |(_, j)| cast(e[j])))
    }

    /// `ln ω` `[1, 1]` as a function of the noise level only.
    pub fn log_omega<F: Scalar>(
        &self,
        t: &Tape<F>,
        p: &ParamStore<F>,
        sqrt_alpha_bar: f64,
    ) -> Var<F> {
        let emb = self.noise_embedding::<F>(sqrt_alpha_bar);
        let h = t.silu(&self.omega_in.forward(t, p, &emb));
        self.omega_out.forward(t, p, &h)
    }

    /// Predicts the noise in `noisy` (`[1, L]`).
    pub fn forward<F: Scalar>(
        &self,
        t: &Tape<F>,
        p: &ParamStore<F>,
        noisy: &Var<F>,
        sqrt_alpha_bar: f64,
        text: &TextEncoding,
        speaker: Option<usize>,
    ) -> Result<UNetOutput<F>> {
        if noisy.rows() != 1 {
            return Err(Error::Shape(format!(
                "expected a single waveform row, got {:?}",
                noisy.shape()
            )));
        }
        let bottleneck_len = self.config.bottleneck_len(noisy.cols())?;
        if !(sqrt_alpha_bar > 0.0 && sqrt_alpha_bar <= 1.0) {
            return Err(Error::Domain(format!(
                "noise level √ᾱ = {sqrt_alpha_bar} outside (0, 1]"
            )));
        }
        if text.d_text() != self.config.d_text {
            return Err(Error::Config(format!(
                "text encoding width {} does not match the model's d_text {}",
                text.d_text(),
                self.config.d_text
            )));
        }
        let text_var = Var::constant(text.vectors().mapv(cast::<F>));
        let mask = text.mask();
        let cond = self.conditioning(t, p, sqrt_alpha_bar, speaker)?;

        let x0 = self.conv_in.forward(t, p, noisy);
        let mut x = x0.clone();
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            x = level.down.forward(t, p, &x);
            x = level.down_stage.forward(t, p, x, &cond, &text_var, mask)?;
            skips.push(x.clone());
        }
        debug_assert_eq!(x.cols(), bottleneck_len);
        for level in self.levels.iter().rev() {
            let skip = skips.pop().expect("one skip per level");
            x = t.add(&x, &skip);
            x = level.up_stage.forward(t, p, x, &cond, &text_var, mask)?;
            x = t.upsample(&x, level.spec.stride);
            x = level.up.forward(t, p, &x);
        }
        let x = t.add(&x, &x0);
        let x = t.silu(&self.out_norm.forward(t, p, &x));
        let epsilon = self.conv_out.forward(t, p, &x);
        Ok(UNetOutput {
            epsilon,
            log_omega: self.log_omega(t, p, sqrt_alpha_bar),
            bottleneck_len,
        })
    }

    /// First cross-attention layer, if any (exposed for inspection).
    pub fn first_cross_attention(&self) -> Option<&CrossAttention> {
        self.levels
            .iter()
            .find_map(|l| l.down_stage.cross_attn.as_ref())
    }

    /// Per-mechanism layer counts.
    pub fn mechanism_counts(&self) -> MechanismCounts {
        let mut m = MechanismCounts::default();
        for l in &self.levels {
            for st in [&l.down_stage, &l.up_stage] {
                for r in &st.res {
                    if r.film.is_some() {
                        m.film += 1;
                    }
                    if matches!(r.conv1, FirstConv::Adaptive(_)) {
                        m.adaptive += 1;
                    }
                }
                m.self_attention += st.self_attn.is_some() as usize;
                m.cross_attention += st.cross_attn.is_some() as usize;
            }
        }
        m
    }
}

/// How many residual blocks and attention layers use each mechanism.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MechanismCounts {
    pub film: usize,
    pub adaptive: usize,
    pub self_attention: usize,
    pub cross_attention: usize,
}

#[cfg(test)]
mod tests;
