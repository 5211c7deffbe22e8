//! Parameterised layers built on the autograd tape.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{cast, ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// `y = x·W + b` on row vectors; `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_randn(
            format!("{name}.weight"),
            (in_dim, out_dim),
            weight_std,
            trainable,
            rng,
        );
        let bias = store.add_filled(format!("{name}.bias"), (1, out_dim), 0.0, trainable);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Default initialisation with standard deviation `1/√in`.
    pub fn init<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(
            store,
            name,
            in_dim,
            out_dim,
            1.0 / (in_dim as f64).sqrt(),
            true,
            rng,
        )
    }

    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, params: &ParamStore<F>, x: &Var<F>) -> Var<F> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.add_row(&tape.matmul(x, &w), &b)
    }
}

/// Strided 1-D convolution over `[channels, time]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        weight_scale: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel) as f64;
        let weight = store.add_randn(
            format!("{name}.weight"),
            (out_channels, in_channels * kernel),
            weight_scale / fan_in.sqrt(),
            true,
            rng,
        );
        let bias = store.add_filled(format!("{name}.bias"), (out_channels, 1), 0.0, true);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, params: &ParamStore<F>, x: &Var<F>) -> Var<F> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.conv1d(x, &w, &b, self.kernel, self.stride)
    }
}

/// Number of normalisation groups used for `channels` given a preferred count.
pub fn norm_groups(channels: usize, preferred: usize) -> usize {
    gcd(channels, preferred.max(1))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), (channels, 1), 1.0, true),
            beta: store.add_filled(format!("{name}.beta"), (channels, 1), 0.0, true),
            groups,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, params: &ParamStore<F>, x: &Var<F>) -> Var<F> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.group_norm(x, &g, &b, self.groups, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        trainable: bool,
    ) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), (1, width), 1.0, trainable),
            beta: store.add_filled(format!("{name}.beta"), (1, width), 0.0, trainable),
            eps: 1e-12,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, params: &ParamStore<F>, x: &Var<F>) -> Var<F> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.layer_norm(x, &g, &b, self.eps)
    }
}

/// Feature-wise linear modulation: a projection of the conditioning vector
/// yields a per-channel scale and bias, `out = scale ⊙ x + bias`.
#[derive(Clone, Debug)]
pub struct Film {
    pub proj: Linear,
    pub channels: usize,
}

impl Film {
    /// The projection starts at zero weight with scale bias 1 and shift bias
    /// 0, so a fresh layer is the identity.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cond_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(
            store,
            &format!("{name}.proj"),
            cond_dim,
            2 * channels,
            0.0,
            true,
            rng,
        );
        let bias = store.value_mut(proj.bias);
        for c in 0..channels {
            bias[[0, c]] = F::one();
        }
        Self { proj, channels }
    }

    /// Per-channel `(scale, bias)`, each `[channels, 1]`.
    pub fn scale_bias<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &ParamStore<F>,
        cond: &Var<F>,
    ) -> (Var<F>, Var<F>) {
        let sb = self.proj.forward(tape, params, &tape.silu(cond));
        let scale = tape.transpose(&tape.slice_cols(&sb, 0, self.channels));
        let bias = tape.transpose(&tape.slice_cols(&sb, self.channels, 2 * self.channels));
        (scale, bias)
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &ParamStore<F>,
        x: &Var<F>,
        cond: &Var<F>,
    ) -> Result<Var<F>> {
        if x.rows() != self.channels {
            return Err(Error::Shape(format!(
                "FiLM projector built for {} channels, features have {}",
                self.channels,
                x.rows()
            )));
        }
        let (scale, bias) = self.scale_bias(tape, params, cond);
        Ok(tape.add_col(&tape.mul_col(x, &scale), &bias))
    }
}

/// Convolution whose kernel is a softmax-weighted mixture of a learned bank,
/// with the mixture weights predicted from the conditioning vector.
#[derive(Clone, Debug)]
pub struct AdaptiveConv {
    /// `[bank, out·in·kernel]`, each row one candidate kernel.
    pub bank: ParamId,
    pub bias: ParamId,
    pub selector: Linear,
    pub bank_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl AdaptiveConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cond_dim: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bank_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if bank_size == 0 {
            return Err(Error::Parameter(
                "adaptive kernel bank must hold at least one kernel".into(),
            ));
        }
        let fan_in = (in_channels * kernel) as f64;
        let bank = store.add_randn(
            format!("{name}.bank"),
            (bank_size, out_channels * in_channels * kernel),
            1.0 / fan_in.sqrt(),
            true,
            rng,
        );
        let bias = store.add_filled(format!("{name}.bias"), (out_channels, 1), 0.0, true);
        let selector = Linear::new(
            store,
            &format!("{name}.selector"),
            cond_dim,
            bank_size,
            0.0,
            true,
            rng,
        );
        Ok(Self {
            bank,
            bias,
            selector,
            bank_size,
            in_channels,
            out_channels,
            kernel,
        })
    }

    /// Softmax mixture weights `[1, bank]` for a conditioning vector.
    pub fn mixture<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &ParamStore<F>,
        cond: &Var<F>,
    ) -> Var<F> {
        let logits = self.selector.forward(tape, params, &tape.silu(cond));
        tape.softmax_rows(&logits, None)
    }

    /// Convolution with an explicit set of mixture weights.
    pub fn forward_with_weights<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &ParamStore<F>,
        x: &Var<F>,
        weights: &Var<F>,
    ) -> Result<Var<F>> {
        if x.rows() != self.in_channels {
            return Err(Error::Shape(format!(
                "adaptive conv expects {} input channels, got {}",
                self.in_channels,
                x.rows()
            )));
        }
        if weights.shape() != (1, self.bank_size) {
            return Err(Error::Shape(format!(
                "mixture weights must be [1, {}], got {:?}",
                self.bank_size,
                weights.shape()
            )));
        }
        let bank = tape.param(params, self.bank);
        let flat = tape.matmul(weights, &bank);
        let kernel = tape.reshape(&flat, self.out_channels, self.in_channels * self.kernel);
        let bias = tape.param(params, self.bias);
        Ok(tape.conv1d(x, &kernel, &bias, self.kernel, 1))
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &Tape<F>,
        params: &ParamStore<F>,
        x: &Var<F>,
        cond: &Var<F>,
    ) -> Result<Var<F>> {
        let weights = self.mixture(tape, params, cond);
        self.forward_with_weights(tape, params, x, &weights)
    }
}

/// Scaled dot-product attention split across `heads`; `q: [Lq, C]`,
/// `k, v: [Lk, C]`, `key_mask` marks attendable key rows.
pub fn multi_head_attention<F: Scalar>(
    tape: &Tape<F>,
    q: &Var<F>,
    k: &Var<F>,
    v: &Var<F>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var<F>> {
    let width = q.cols();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Parameter(format!(
            "{width} channels cannot be split into {heads} heads"
        )));
    }
    if k.cols() != width || v.cols() != width || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention operands q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(mask) = key_mask {
        if mask.len() != k.rows() {
            return Err(Error::Shape(format!(
                "key mask has {} entries for {} keys",
                mask.len(),
                k.rows()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Input("every attention key is masked".into()));
        }
    }
    let head_dim = width / heads;
    let scale = cast::<F>(1.0 / (head_dim as f64).sqrt());
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let range = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, range.0, range.1);
        let kh = tape.slice_cols(k, range.0, range.1);
        let vh = tape.slice_cols(v, range.0, range.1);
        let scores = tape.scale(&tape.matmul_nt(&qh, &kh), scale);
        let probs = tape.softmax_rows(&scores, key_mask);
        outputs.push(tape.matmul(&probs, &vh));
    }
    if outputs.len() == 1 {
        return Ok(outputs.pop().unwrap());
    }
    let refs: Vec<&Var<F>> = outputs.iter().collect();
    Ok(tape.concat_cols(&refs))
}

/// Fixed sinusoidal position table `[len, width]`.
pub fn sinusoidal_positions<F: Scalar>(len: usize, width: usize) -> Array2<F> {
    let half = width / 2;
    Array2::from_shape_fn((len, width), |(pos, i)| {
        let j = if i < half { i } else { i - half };
        let freq = 1.0 / 10000f64.powf(j as f64 / half.max(1) as f64);
        let angle = pos as f64 * freq;
        if i < half {
            cast(angle.sin())
        } else if i < 2 * half {
            cast(angle.cos())
        } else {
            F::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn film_starts_as_identity() {
        let mut store = ParamStore::<f64>::new();
        let film = Film::new(&mut store, "film", 4, 3, &mut rng());
        let t = Tape::no_grad();
        let x = Var::constant(array![[1.0, -2.0], [0.5, 0.0], [3.0, 4.0]]);
        let cond = Var::constant(array![[0.3, -0.1, 2.0, 0.7]]);
        let y = film.forward(&t, &store, &x, &cond).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn film_zero_scale_broadcasts_bias() {
        let mut store = ParamStore::<f64>::new();
        let film = Film::new(&mut store, "film", 2, 2, &mut rng());
        *store.value_mut(film.proj.bias) = array![[0.0, 0.0, 0.25, -1.0]];
        let t = Tape::no_grad();
        let x = Var::constant(array![[9.0, 8.0, 7.0], [1.0, 2.0, 3.0]]);
        let y = film
            .forward(&t, &store, &x, &Var::constant(array![[1.0, 2.0]]))
            .unwrap();
        assert_eq!(y.value(), &array![[0.25, 0.25, 0.25], [-1.0, -1.0, -1.0]]);
    }

    #[test]
    fn film_channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let film = Film::new(&mut store, "film", 2, 3, &mut rng());
        let t = Tape::no_grad();
        let x = Var::constant(Array2::zeros((2, 5)));
        assert!(matches!(
            film.forward(&t, &store, &x, &Var::constant(Array2::zeros((1, 2)))),
            Err(Error::Shape(_))
        ));
    }

    fn plain_conv(
        store: &ParamStore<f64>,
        ac: &AdaptiveConv,
        k: usize,
        x: &Var<f64>,
    ) -> Array2<f64> {
        let t = Tape::no_grad();
        let row = store.get(ac.bank).row(k).to_owned();
        let w = Array2::from_shape_vec((ac.out_channels, ac.in_channels * ac.kernel), row.to_vec())
            .unwrap();
        t.conv1d(
            x,
            &Var::constant(w),
            &Var::constant(store.get(ac.bias).clone()),
            ac.kernel,
            1,
        )
        .into_array()
    }

    #[test]
    fn adaptive_conv_one_hot_equals_plain_conv() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let ac = AdaptiveConv::new(&mut store, "ac", 3, 2, 4, 5, 3, &mut r).unwrap();
        let x = Var::constant(Array2::from_shape_fn((2, 9), |(i, j)| {
            (i as f64 + 1.0) * (j as f64).sin()
        }));
        let t = Tape::no_grad();
        for k in 0..3 {
            let mut onehot = Array2::zeros((1, 3));
            onehot[[0, k]] = 1.0;
            let y = ac
                .forward_with_weights(&t, &store, &x, &Var::constant(onehot))
                .unwrap();
            let direct = plain_conv(&store, &ac, k, &x);
            let err = (y.value() - &direct)
                .mapv(f64::abs)
                .fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn adaptive_conv_single_kernel_ignores_conditioning() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let ac = AdaptiveConv::new(&mut store, "ac", 3, 2, 2, 3, 1, &mut r).unwrap();
        store.set(ac.selector.weight, Array2::from_elem((3, 1), 0.7));
        let x = Var::constant(Array2::from_shape_fn((2, 6), |(i, j)| {
            (i * 6 + j) as f64 * 0.1
        }));
        let t = Tape::no_grad();
        let a = ac
            .forward(&t, &store, &x, &Var::constant(array![[1.0, 2.0, 3.0]]))
            .unwrap();
        let b = ac
            .forward(&t, &store, &x, &Var::constant(array![[-5.0, 0.0, 9.0]]))
            .unwrap();
        assert_eq!(a.value(), b.value());
        let direct = plain_conv(&store, &ac, 0, &x);
        let err = (a.value() - &direct)
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-12);
    }

    #[test]
    fn adaptive_conv_identical_bank_ignores_weights() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let ac = AdaptiveConv::new(&mut store, "ac", 2, 2, 2, 3, 2, &mut r).unwrap();
        let row = store.get(ac.bank).row(0).to_owned();
        store.value_mut(ac.bank).row_mut(1).assign(&row);
        let x = Var::constant(Array2::from_shape_fn((2, 7), |(i, j)| {
            ((i + 2 * j) as f64).cos()
        }));
        let t = Tape::no_grad();
        let a = ac
            .forward_with_weights(&t, &store, &x, &Var::constant(array![[0.9, 0.1]]))
            .unwrap();
        let b = ac
            .forward_with_weights(&t, &store, &x, &Var::constant(array![[0.2, 0.8]]))
            .unwrap();
        let err = (a.value() - b.value())
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-12);
    }

    #[test]
    fn empty_bank_rejected() {
        let mut store = ParamStore::<f64>::new();
        assert!(AdaptiveConv::new(&mut store, "ac", 2, 2, 2, 3, 0, &mut rng()).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one_and_ignore_masked_keys() {
        let t = Tape::<f64>::no_grad();
        let q = Var::constant(Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.3));
        let k = Var::constant(Array2::from_shape_fn((5, 4), |(i, j)| {
            (i * j) as f64 * 0.1 - 0.2
        }));
        // Each value row is constant so the output equals the attention-weighted row index.
        let v = Var::constant(Array2::from_shape_fn((5, 4), |_| 1.0));
        let mask = [true, true, false, true, false];
        let out = multi_head_attention(&t, &q, &k, &v, 2, Some(&mask)).unwrap();
        for x in out.value().iter() {
            assert!((x - 1.0).abs() < 1e-12);
        }
        // Changing masked keys and values does not move the output.
        let v2 = Var::constant(Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64));
        let mut k3 = k.value().clone();
        let mut v3 = v2.value().clone();
        for row in [2, 4] {
            k3.row_mut(row).fill(100.0);
            v3.row_mut(row).fill(-50.0);
        }
        let a = multi_head_attention(&t, &q, &k, &v2, 2, Some(&mask)).unwrap();
        let b = multi_head_attention(
            &t,
            &q,
            &Var::constant(k3),
            &Var::constant(v3),
            2,
            Some(&mask),
        )
        .unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn attention_all_masked_is_input_error() {
        let t = Tape::<f64>::no_grad();
        let q = Var::constant(Array2::zeros((2, 4)));
        let k = Var::constant(Array2::zeros((3, 4)));
        let r = multi_head_attention(&t, &q, &k, &k, 2, Some(&[false, false, false]));
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn norm_group_choice() {
        assert_eq!(norm_groups(128, 32), 32);
        assert_eq!(norm_groups(24, 32), 8);
        assert_eq!(norm_groups(6, 4), 2);
    }
}
