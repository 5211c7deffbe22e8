//! Minimal reverse-mode automatic differentiation over 2-D matrices.
//!
//! Every activation in the network is a `[rows, cols]` matrix: feature maps
//! are `[channels, time]`, token sequences are `[positions, width]`. A
//! [`Tape`] records the operations applied to tracked [`Var`]s; calling
//! [`Tape::backward`] on a `[1, 1]` loss returns gradients for every
//! trainable parameter that contributed to it. A tape built with
//! [`Tape::no_grad`] records nothing, so intermediate values are freed as
//! soon as they go out of scope.

mod conv;
mod params;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, NdFloat, Zip};
use num_traits::FromPrimitive;

pub use params::{Gradients, Param, ParamId, ParamStore};

/// Floating point element type usable by the tape (`f32` or `f64`).
pub trait Scalar: NdFloat + FromPrimitive + std::iter::Sum {}

impl<T: NdFloat + FromPrimitive + std::iter::Sum> Scalar for T {}

/// Converts an `f64` constant into the working precision.
#[inline]
pub fn cast<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}

#[inline]
pub(crate) fn to_f64<F: Scalar>(x: F) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

type BackwardFn<F> = Box<dyn Fn(&Array2<F>, &[bool]) -> Vec<Option<Array2<F>>>>;

struct Node<F> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<F>>,
    param: Option<ParamId>,
}

/// A value flowing through the tape.
#[derive(Clone, Debug)]
pub struct Var<F> {
    value: Arc<Array2<F>>,
    node: Option<usize>,
}

impl<F: Scalar> Var<F> {
    /// An untracked value (data, fixed embeddings, masks).
    pub fn constant(value: Array2<F>) -> Self {
        Self {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Array2<F> {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn rows(&self) -> usize {
        self.value.nrows()
    }

    pub fn cols(&self) -> usize {
        self.value.ncols()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a `[1, 1]` var.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.shape(), (1, 1));
        self.value[[0, 0]]
    }

    pub fn into_array(self) -> Array2<F> {
        Arc::try_unwrap(self.value).unwrap_or_else(|arc| (*arc).clone())
    }
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<F: Scalar> {
    grad_enabled: bool,
    nodes: RefCell<Vec<Node<F>>>,
    leaves: RefCell<HashMap<ParamId, usize>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            grad_enabled: true,
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Brings a parameter onto the tape. Frozen parameters come back untracked.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<F> {
        let value = store.get_arc(id);
        if !self.grad_enabled || !store.is_trainable(id) {
            return Var { value, node: None };
        }
        let mut leaves = self.leaves.borrow_mut();
        let node = *leaves.entry(id).or_insert_with(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
                param: Some(id),
            });
            nodes.len() - 1
        });
        Var {
            value,
            node: Some(node),
        }
    }

    fn record(
        &self,
        value: Array2<F>,
        parents: &[&Var<F>],
        backward: impl Fn(&Array2<F>, &[bool]) -> Vec<Option<Array2<F>>> + 'static,
    ) -> Var<F> {
        let tracked = self.grad_enabled && parents.iter().any(|p| p.node.is_some());
        if !tracked {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.node).collect(),
            backward: Some(Box::new(backward)),
            param: None,
        });
        Var {
            value: Arc::new(value),
            node: Some(nodes.len() - 1),
        }
    }

    /// Back-propagates from a `[1, 1]` loss and returns parameter gradients.
    pub fn backward(&self, loss: &Var<F>) -> Gradients<F> {
        assert_eq!(loss.shape(), (1, 1), "backward expects a scalar loss");
        let mut out = Gradients::new();
        let Some(root) = loss.node else {
            return out;
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Array2::from_elem((1, 1), F::one()));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if let Some(id) = node.param {
                out.accumulate(id, g);
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(pg)) = (parent, pg) {
                    match &mut grads[*p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        out
    }

    // ---------------------------------------------------------------------
    // Linear algebra

    pub fn matmul(&self, a: &Var<F>, b: &Var<F>) -> Var<F> {
        assert_eq!(a.cols(), b.rows(), "matmul inner dimensions");
        let value = a.value.dot(&*b.value);
        let (av, bv) = (Arc::clone(&a.value), Arc::clone(&b.value));
        self.record(value, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.dot(&bv.t())),
                needs[1].then(|| av.t().dot(g)),
            ]
        })
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: &Var<F>, b: &Var<F>) -> Var<F> {
        assert_eq!(a.cols(), b.cols(), "matmul_nt inner dimensions");
        let value = a.value.dot(&b.value.t());
        let (av, bv) = (Arc::clone(&a.value), Arc::clone(&b.value));
        self.record(value, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.dot(&*bv)),
                needs[1].then(|| g.t().dot(&*av)),
            ]
        })
    }

    pub fn transpose(&self, x: &Var<F>) -> Var<F> {
        let value = x.value.t().as_standard_layout().into_owned();
        self.record(value, &[x], |g, _| {
            vec![Some(g.t().as_standard_layout().into_owned())]
        })
    }

    /// Row-major reshape.
    pub fn reshape(&self, x: &Var<F>, rows: usize, cols: usize) -> Var<F> {
        let (r0, c0) = x.shape();
        assert_eq!(r0 * c0, rows * cols, "reshape element count");
        let flat: Vec<F> = x.value.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        self.record(value, &[x], move |g, _| {
            let flat: Vec<F> = g.iter().copied().collect();
            vec![Some(
                Array2::from_shape_vec((r0, c0), flat).expect("reshape"),
            )]
        })
    }

    // ---------------------------------------------------------------------
    // Elementwise and broadcasting

    pub fn add(&self, a: &Var<F>, b: &Var<F>) -> Var<F> {
        assert_eq!(a.shape(), b.shape(), "add shapes");
        let value = &*a.value + &*b.value;
        self.record(value, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, a: &Var<F>, b: &Var<F>) -> Var<F> {
        assert_eq!(a.shape(), b.shape(), "sub shapes");
        let value = &*a.value - &*b.value;
        self.record(value, &[a, b], |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.mapv(|v| -v)),
            ]
        })
    }

    pub fn mul(&self, a: &Var<F>, b: &Var<F>) -> Var<F> {
        assert_eq!(a.shape(), b.shape(), "mul shapes");
        let value = &*a.value * &*b.value;
        let (av, bv) = (Arc::clone(&a.value), Arc::clone(&b.value));
        self.record(value, &[a, b], move |g, needs| {
            vec![needs[0].then(|| g * &*bv), needs[1].then(|| g * &*av)]
        })
    }

    pub fn scale(&self, x: &Var<F>, factor: F) -> Var<F> {
        let value = x.value.mapv(|v| v * factor);
        self.record(value, &[x], move |g, _| vec![Some(g.mapv(|v| v * factor))])
    }

    /// `x[r, c] + b[r, 0]`
    pub fn add_col(&self, x: &Var<F>, b: &Var<F>) -> Var<F> {
        assert_eq!(b.shape(), (x.rows(), 1), "add_col bias shape");
        let value = &*x.value + &*b.value;
        self.record(value, &[x, b], |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.sum_axis(Axis(1)).insert_axis(Axis(1))),
            ]
        })
    }

    /// `x[r, c] + b[0, c]`
    pub fn add_row(&self, x: &Var<F>, b: &Var<F>) -> Var<F> {
        assert_eq!(b.shape(), (1, x.cols()), "add_row bias shape");
        let value = &*x.value + &*b.value;
        self.record(value, &[x, b], |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            ]
        })
    }

    /// `x[r, c] · s[r, 0]`
    pub fn mul_col(&self, x: &Var<F>, s: &Var<F>) -> Var<F> {
        assert_eq!(s.shape(), (x.rows(), 1), "mul_col scale shape");
        let value = &*x.value * &*s.value;
        let (xv, sv) = (Arc::clone(&x.value), Arc::clone(&s.value));
        self.record(value, &[x, s], move |g, needs| {
            vec![
                needs[0].then(|| g * &*sv),
                needs[1].then(|| (g * &*xv).sum_axis(Axis(1)).insert_axis(Axis(1))),
            ]
        })
    }

    pub fn silu(&self, x: &Var<F>) -> Var<F> {
        let value = x.value.mapv(|v| v * sigmoid(v));
        let xv = Arc::clone(&x.value);
        self.record(value, &[x], move |g, _| {
            let mut gx = g.clone();
            Zip::from(&mut gx).and(&*xv).for_each(|gv, &v| {
                let s = sigmoid(v);
                *gv = *gv * s * (F::one() + v * (F::one() - s));
            });
            vec![Some(gx)]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, x: &Var<F>) -> Var<F> {
        let value = x.value.mapv(|v| {
            let vf = to_f64(v);
            cast(0.5 * vf * (1.0 + erf(vf / std::f64::consts::SQRT_2)))
        });
        let xv = Arc::clone(&x.value);
        self.record(value, &[x], move |g, _| {
            let mut gx = g.clone();
            Zip::from(&mut gx).and(&*xv).for_each(|gv, &v| {
                let vf = to_f64(v);
                let cdf = 0.5 * (1.0 + erf(vf / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * vf * vf).exp() / (2.0 * std::f64::consts::PI).sqrt();
                *gv *= cast::<F>(cdf + vf * pdf);
            });
            vec![Some(gx)]
        })
    }

    pub fn tanh(&self, x: &Var<F>) -> Var<F> {
        let value = x.value.mapv(|v| v.tanh());
        let yv = Arc::new(value.clone());
        self.record(value, &[x], move |g, _| {
            let mut gx = g.clone();
            Zip::from(&mut gx)
                .and(&*yv)
                .for_each(|gv, &y| *gv *= F::one() - y * y);
            vec![Some(gx)]
        })
    }

    pub fn exp(&self, x: &Var<F>) -> Var<F> {
        let value = x.value.mapv(|v| v.exp());
        let yv = Arc::new(value.clone());
        self.record(value, &[x], move |g, _| vec![Some(g * &*yv)])
    }

    pub fn sum_all(&self, x: &Var<F>) -> Var<F> {
        let (r, c) = x.shape();
        let value = Array2::from_elem((1, 1), x.value.sum());
        self.record(value, &[x], move |g, _| {
            vec![Some(Array2::from_elem((r, c), g[[0, 0]]))]
        })
    }

    /// `Σ w·(pred − target)² / Σ w` as a `[1, 1]` var.
    pub fn weighted_mse(&self, pred: &Var<F>, target: &Array2<F>, weights: &Array2<F>) -> Var<F> {
        assert_eq!(pred.shape(), target.dim(), "weighted_mse target shape");
        assert_eq!(pred.shape(), weights.dim(), "weighted_mse weight shape");
        let wsum: F = weights.sum();
        assert!(wsum > F::zero(), "weighted_mse needs positive total weight");
        let diff = &*pred.value - target;
        let value: F = Zip::from(&diff)
            .and(weights)
            .fold(F::zero(), |acc, &d, &w| acc + w * d * d)
            / wsum;
        let w = weights.clone();
        self.record(Array2::from_elem((1, 1), value), &[pred], move |g, _| {
            let two = cast::<F>(2.0) * g[[0, 0]] / wsum;
            let mut gp = diff.clone();
            Zip::from(&mut gp)
                .and(&w)
                .for_each(|d, &wv| *d = *d * wv * two);
            vec![Some(gp)]
        })
    }

    // ---------------------------------------------------------------------
    // Structural

    pub fn slice_cols(&self, x: &Var<F>, start: usize, end: usize) -> Var<F> {
        assert!(start <= end && end <= x.cols(), "slice_cols range");
        let value = x.value.slice(s![.., start..end]).to_owned();
        let (r, c) = x.shape();
        self.record(value, &[x], move |g, _| {
            let mut gx = Array2::zeros((r, c));
            gx.slice_mut(s![.., start..end]).assign(g);
            vec![Some(gx)]
        })
    }

    pub fn concat_cols(&self, parts: &[&Var<F>]) -> Var<F> {
        assert!(!parts.is_empty());
        let rows = parts[0].rows();
        let views: Vec<_> = parts.iter().map(|p| p.value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols rows");
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        debug_assert!(parts.iter().all(|p| p.rows() == rows));
        self.record(value, parts, move |g, needs| {
            let mut start = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let part = need.then(|| g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                    part
                })
                .collect()
        })
    }

    /// Selects rows of a table (embedding lookup).
    pub fn gather_rows(&self, table: &Var<F>, indices: &[usize]) -> Var<F> {
        let (rows, cols) = table.shape();
        let mut value = Array2::zeros((indices.len(), cols));
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < rows, "gather index {idx} out of range {rows}");
            value.row_mut(i).assign(&table.value.row(idx));
        }
        let indices = indices.to_vec();
        self.record(value, &[table], move |g, _| {
            let mut gt = Array2::zeros((rows, cols));
            for (i, &idx) in indices.iter().enumerate() {
                let mut row = gt.row_mut(idx);
                row += &g.row(i);
            }
            vec![Some(gt)]
        })
    }

    /// Nearest-neighbour upsampling along columns.
    pub fn upsample(&self, x: &Var<F>, factor: usize) -> Var<F> {
        assert!(factor >= 1);
        let (r, c) = x.shape();
        let mut value = Array2::zeros((r, c * factor));
        Zip::from(value.rows_mut())
            .and(x.value.rows())
            .for_each(|mut out, inp| {
                for (t, &v) in inp.iter().enumerate() {
                    out.slice_mut(s![t * factor..(t + 1) * factor]).fill(v);
                }
            });
        self.record(value, &[x], move |g, _| {
            let mut gx = Array2::zeros((r, c));
            Zip::from(gx.rows_mut())
                .and(g.rows())
                .for_each(|mut out, gin| {
                    for (t, v) in out.iter_mut().enumerate() {
                        *v = gin.slice(s![t * factor..(t + 1) * factor]).sum();
                    }
                });
            vec![Some(gx)]
        })
    }

    // ---------------------------------------------------------------------
    // Normalisation and attention primitives

    /// Row-wise softmax. Columns with `mask[c] == false` receive zero
    /// probability (−∞ logits).
    pub fn softmax_rows(&self, x: &Var<F>, mask: Option<&[bool]>) -> Var<F> {
        let (r, c) = x.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), c, "softmax mask length");
            assert!(m.iter().any(|&v| v), "softmax with every column masked");
        }
        let mut value = Array2::zeros((r, c));
        for (mut out, row) in value.rows_mut().into_iter().zip(x.value.rows()) {
            let allowed = |j: usize| mask.is_none_or(|m| m[j]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| allowed(*j))
                .map(|(_, &v)| v)
                .fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for (j, (o, &v)) in out.iter_mut().zip(row.iter()).enumerate() {
                if allowed(j) {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            out.mapv_inplace(|v| v / total);
        }
        let pv = Arc::new(value.clone());
        self.record(value, &[x], move |g, _| {
            let mut gx = Array2::zeros(g.dim());
            Zip::from(gx.rows_mut())
                .and(g.rows())
                .and(pv.rows())
                .for_each(|mut gxr, gr, pr| {
                    let dot: F = gr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum();
                    Zip::from(&mut gxr)
                        .and(&gr)
                        .and(&pr)
                        .for_each(|o, &gv, &p| *o = p * (gv - dot));
                });
            vec![Some(gx)]
        })
    }

    /// Group normalisation over `[channels, time]` with per-channel affine
    /// parameters `gamma`, `beta` of shape `[channels, 1]`.
    pub fn group_norm(
        &self,
        x: &Var<F>,
        gamma: &Var<F>,
        beta: &Var<F>,
        groups: usize,
        eps: f64,
    ) -> Var<F> {
        let (c, l) = x.shape();
        assert!(
            groups >= 1 && c % groups == 0,
            "group_norm: {c} channels, {groups} groups"
        );
        assert_eq!(gamma.shape(), (c, 1));
        assert_eq!(beta.shape(), (c, 1));
        let per = c / groups;
        let n = (per * l) as f64;
        let mut xhat = Array2::<F>::zeros((c, l));
        let mut inv_std = vec![0.0f64; groups];
        for gi in 0..groups {
            let block = x.value.slice(s![gi * per..(gi + 1) * per, ..]);
            let mean = block.iter().map(|&v| to_f64(v)).sum::<f64>() / n;
            let var = block
                .iter()
                .map(|&v| {
                    let d = to_f64(v) - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[gi] = istd;
            let (mean_f, istd_f) = (cast::<F>(mean), cast::<F>(istd));
            Zip::from(xhat.slice_mut(s![gi * per..(gi + 1) * per, ..]))
                .and(&block)
                .for_each(|o, &v| *o = (v - mean_f) * istd_f);
        }
        let mut value = xhat.clone();
        Zip::from(value.rows_mut())
            .and(gamma.value.rows())
            .and(beta.value.rows())
            .for_each(|mut row, gm, bt| {
                let (gm, bt) = (gm[0], bt[0]);
                row.mapv_inplace(|v| v * gm + bt);
            });
        let gv = Arc::clone(&gamma.value);
        self.record(value, &[x, gamma, beta], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut dxhat = g.clone();
                Zip::from(dxhat.rows_mut())
                    .and(gv.rows())
                    .for_each(|mut row, gm| {
                        let gm = gm[0];
                        row.mapv_inplace(|v| v * gm);
                    });
                let mut gx = Array2::zeros((c, l));
                for gi in 0..groups {
                    let rows = gi * per..(gi + 1) * per;
                    let dh = dxhat.slice(s![rows.clone(), ..]);
                    let xh = xhat.slice(s![rows.clone(), ..]);
                    let sum_dh = dh.iter().map(|&v| to_f64(v)).sum::<f64>();
                    let sum_dh_xh = dh
                        .iter()
                        .zip(xh.iter())
                        .map(|(&a, &b)| to_f64(a) * to_f64(b))
                        .sum::<f64>();
                    let k = cast::<F>(inv_std[gi] / n);
                    let (n_f, s1, s2) = (cast::<F>(n), cast::<F>(sum_dh), cast::<F>(sum_dh_xh));
                    Zip::from(gx.slice_mut(s![rows, ..]))
                        .and(&dh)
                        .and(&xh)
                        .for_each(|o, &d, &h| *o = k * (n_f * d - s1 - h * s2));
                }
                gx
            });
            let ggamma = needs[1].then(|| (g * &xhat).sum_axis(Axis(1)).insert_axis(Axis(1)));
            let gbeta = needs[2].then(|| g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            vec![gx, ggamma, gbeta]
        })
    }

    /// Layer normalisation of each row of `[positions, width]`, with affine
    /// parameters of shape `[1, width]`.
    pub fn layer_norm(&self, x: &Var<F>, gamma: &Var<F>, beta: &Var<F>, eps: f64) -> Var<F> {
        let (r, d) = x.shape();
        assert_eq!(gamma.shape(), (1, d));
        assert_eq!(beta.shape(), (1, d));
        let n = d as f64;
        let mut xhat = Array2::<F>::zeros((r, d));
        let mut inv_std = vec![0.0f64; r];
        for (i, row) in x.value.rows().into_iter().enumerate() {
            let mean = row.iter().map(|&v| to_f64(v)).sum::<f64>() / n;
            let var = row.iter().map(|&v| (to_f64(v) - mean).powi(2)).sum::<f64>() / n;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            let (m, s) = (cast::<F>(mean), cast::<F>(istd));
            Zip::from(xhat.row_mut(i))
                .and(&row)
                .for_each(|o, &v| *o = (v - m) * s);
        }
        let value = &(&xhat * &*gamma.value) + &*beta.value;
        let gv = Arc::clone(&gamma.value);
        self.record(value, &[x, gamma, beta], move |g, needs| {
            let gx = needs[0].then(|| {
                let dxhat = g * &*gv;
                let mut gx = Array2::zeros((r, d));
                for i in 0..r {
                    let dh = dxhat.row(i);
                    let xh = xhat.row(i);
                    let s1 = dh.iter().map(|&v| to_f64(v)).sum::<f64>();
                    let s2 = dh
                        .iter()
                        .zip(xh.iter())
                        .map(|(&a, &b)| to_f64(a) * to_f64(b))
                        .sum::<f64>();
                    let k = cast::<F>(inv_std[i] / n);
                    let (n_f, s1, s2) = (cast::<F>(n), cast::<F>(s1), cast::<F>(s2));
                    Zip::from(gx.row_mut(i))
                        .and(&dh)
                        .and(&xh)
                        .for_each(|o, &dv, &h| *o = k * (n_f * dv - s1 - h * s2));
                }
                gx
            });
            let ggamma = needs[1].then(|| (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
            let gbeta = needs[2].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            vec![gx, ggamma, gbeta]
        })
    }
}

#[inline]
fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}
