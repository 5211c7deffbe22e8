use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn text(d: usize, valid: usize, len: usize) -> TextEncoding {
    let v = Array2::from_shape_fn((len, d), |(i, j)| {
        if i < valid {
            ((i * d + j) as f64 * 0.37).sin()
        } else {
            0.0
        }
    });
    TextEncoding::new(v, (0..len).map(|i| i < valid).collect()).unwrap()
}

fn wave(len: usize) -> Var<f64> {
    Var::constant(Array2::from_shape_fn((1, len), |(_, j)| {
        (j as f64 * 0.05).sin() * 0.5
    }))
}

/// Replaces zero-initialised weights so every path carries signal.
fn randomise(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.param(id).name.clone();
        let zero_init = [
            "conv2.weight",
            ".out.weight",
            "film.proj.weight",
            "selector.weight",
        ];
        if zero_init.iter().any(|z| name.ends_with(z)) || name.starts_with("conv_out") {
            let shape = store.get(id).dim();
            let fresh = Array2::from_shape_simple_fn(shape, || {
                use rand_distr::Distribution;
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                0.2 * z
            });
            store.set(id, fresh);
        }
    }
}

#[test]
fn full_config_layout() {
    let c = UNetConfig::full(768);
    c.validate().unwrap();
    let dims: Vec<_> = c.blocks.iter().map(|b| b.base_dimension).collect();
    assert_eq!(dims, [128, 256, 512, 1024]);
    let strides: Vec<_> = c.blocks.iter().map(|b| b.strides.clone()).collect();
    assert_eq!(
        strides,
        [vec![2, 2], vec![2, 2], vec![4], vec![4, 2, 2, 2, 2]]
    );
    let kernels: Vec<_> = c.blocks.iter().map(|b| b.kernel_sizes.clone()).collect();
    assert_eq!(
        kernels,
        [vec![5, 5], vec![5, 5], vec![5, 5], vec![3, 3, 3, 3, 3]]
    );
    let banks: Vec<_> = c.blocks.iter().map(|b| b.adaptive_kernel.clone()).collect();
    assert_eq!(banks, [vec![8, 8], vec![4, 4], vec![2], vec![]]);
    let counts: Vec<_> = c.blocks.iter().map(|b| b.block_counts.clone()).collect();
    assert_eq!(counts, [vec![2, 2], vec![2, 2], vec![2], vec![1; 5]]);
    for (i, b) in c.blocks.iter().enumerate() {
        let on = i == 3;
        assert!(b.self_attention.iter().all(|&f| f == on));
        assert!(b.cross_attention.iter().all(|&f| f == on));
    }
    assert_eq!(c.blocks[3].attention_heads, vec![8; 5]);
    assert_eq!(c.stride_product(), 4096);
    assert_eq!(c.bottleneck_len(262_144).unwrap(), 64);
}

#[test]
fn full_config_parameter_count_is_stable() {
    assert_eq!(
        UNetConfig::full(768).parameter_count(),
        FULL_PARAMETER_COUNT
    );
}

/// Regression value for `UNetConfig::full(768)`.
const FULL_PARAMETER_COUNT: usize = 218_358_378;

#[test]
fn analytic_parameter_count_matches_built_model() {
    for cfg in [
        UNetConfig::toy(32, 4),
        UNetConfig::tiny(6, 2),
        UNetConfig::tiny(6, 0),
    ] {
        let (_, store) =
            UNet::new::<f64, _>(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(store.num_elements(), cfg.parameter_count());
    }
}

#[test]
fn config_toml_round_trip() {
    let c = UNetConfig::toy(32, 3);
    assert_eq!(UNetConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
}

#[test]
fn toy_shapes() {
    let cfg = UNetConfig::toy(8, 0);
    assert_eq!(cfg.stride_product(), 64);
    let (net, store) = UNet::new::<f64, _>(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let t = Tape::no_grad();
    let out = net
        .forward(&t, &store, &wave(1024), 0.5, &text(8, 5, 12), None)
        .unwrap();
    assert_eq!(out.bottleneck_len, 16);
    assert_eq!(out.epsilon.shape(), (1, 1024));
    assert_eq!(out.log_omega.shape(), (1, 1));
}

#[test]
fn indivisible_length_names_multiple() {
    let (net, store) =
        UNet::new::<f64, _>(UNetConfig::toy(8, 0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let t = Tape::no_grad();
    match net.forward(&t, &store, &wave(1000), 0.5, &text(8, 5, 12), None) {
        Err(Error::Shape(msg)) => assert!(msg.contains("64"), "{msg}"),
        other => panic!(
            "expected shape error, got {:?}",
            other.map(|o| o.bottleneck_len)
        ),
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = UNetConfig::tiny(6, 2);
    let (net, mut store) = UNet::new::<f64, _>(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    randomise(&mut store, 3);
    let t = Tape::no_grad();
    let a = net
        .forward(&t, &store, &wave(16), 0.3, &text(6, 3, 5), Some(1))
        .unwrap();
    let b = net
        .forward(&t, &store, &wave(16), 0.3, &text(6, 3, 5), Some(1))
        .unwrap();
    assert_eq!(a.epsilon.value(), b.epsilon.value());
    let c = net
        .forward(&t, &store, &wave(16), 0.3, &text(6, 3, 5), Some(0))
        .unwrap();
    assert_ne!(a.epsilon.value(), c.epsilon.value());
}

#[test]
fn unconditioned_model_ignores_speaker() {
    let (net, mut store) =
        UNet::new::<f64, _>(UNetConfig::tiny(6, 0), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    randomise(&mut store, 5);
    let t = Tape::no_grad();
    let a = net
        .forward(&t, &store, &wave(16), 0.7, &text(6, 3, 5), Some(0))
        .unwrap();
    let b = net
        .forward(&t, &store, &wave(16), 0.7, &text(6, 3, 5), Some(7))
        .unwrap();
    assert_eq!(a.epsilon.value(), b.epsilon.value());
}

#[test]
fn unknown_speaker_rejected() {
    let (net, store) =
        UNet::new::<f64, _>(UNetConfig::tiny(6, 2), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let r = net.forward(
        &Tape::no_grad(),
        &store,
        &wave(16),
        0.7,
        &text(6, 3, 5),
        Some(2),
    );
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn mechanisms_present_in_tiny_and_full() {
    let (net, _) =
        UNet::new::<f64, _>(UNetConfig::tiny(6, 2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let m = net.mechanism_counts();
    assert!(m.film > 0 && m.adaptive > 0 && m.self_attention > 0 && m.cross_attention > 0);
}

#[test]
fn fresh_model_has_unit_omega_and_zero_output() {
    let (net, store) =
        UNet::new::<f64, _>(UNetConfig::tiny(6, 2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let out = net
        .forward(
            &Tape::no_grad(),
            &store,
            &wave(16),
            0.4,
            &text(6, 3, 5),
            Some(0),
        )
        .unwrap();
    assert_eq!(out.log_omega.item(), 0.0);
    assert!(out.epsilon.value().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_attention_single_valid_position_returns_its_value() {
    let (net, mut store) =
        UNet::new::<f64, _>(UNetConfig::tiny(6, 0), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    randomise(&mut store, 7);
    let ca = net.first_cross_attention().unwrap();
    let t = Tape::no_grad();
    let enc = text(6, 1, 4);
    let x = Var::constant(Array2::from_shape_fn((6, 5), |(i, j)| {
        ((i + 3 * j) as f64).cos()
    }));
    let tv = Var::constant(enc.vectors().clone());
    let ctx = ca.attend(&t, &store, &x, &tv, enc.mask()).unwrap();
    let row0 = Var::constant(enc.vectors().slice(ndarray::s![0..1, ..]).to_owned());
    let v = ca.value_projection().forward(&t, &store, &row0);
    for q in 0..ctx.rows() {
        for c in 0..ctx.cols() {
            assert!((ctx.value()[[q, c]] - v.value()[[0, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_padding_rows_do_not_change_output() {
    let (net, mut store) =
        UNet::new::<f64, _>(UNetConfig::tiny(6, 0), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    randomise(&mut store, 9);
    let t = Tape::no_grad();
    let short = text(6, 3, 3);
    let long = text(6, 3, 9);
    let a = net
        .forward(&t, &store, &wave(16), 0.5, &short, None)
        .unwrap();
    let b = net
        .forward(&t, &store, &wave(16), 0.5, &long, None)
        .unwrap();
    let diff = (a.epsilon.value() - b.epsilon.value())
        .mapv(f64::abs)
        .fold(0.0f64, |m, &v| m.max(v));
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn text_width_mismatch_is_config_error() {
    let (net, store) =
        UNet::new::<f64, _>(UNetConfig::tiny(6, 0), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let r = net.forward(
        &Tape::no_grad(),
        &store,
        &wave(16),
        0.5,
        &text(5, 3, 4),
        None,
    );
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn film_projector_gradient_matches_finite_differences() {
    use crate::nn::Film;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let film = Film::new(&mut store, "f", 3, 2, &mut rng);
    store.set(
        film.proj.weight,
        Array2::from_shape_fn((3, 4), |(i, j)| 0.3 * (i as f64 - j as f64)),
    );
    let x = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
    let cond = array![[0.4, -0.9, 1.3]];
    let loss = |t: &Tape<f64>, s: &ParamStore<f64>| {
        let y = film
            .forward(
                t,
                s,
                &Var::constant(x.clone()),
                &Var::constant(cond.clone()),
            )
            .unwrap();
        let w = Var::constant(array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]]);
        t.sum_all(&t.mul(&y, &w))
    };
    let t = Tape::new();
    let grads = t.backward(&loss(&t, &store));
    for id in [film.proj.weight, film.proj.bias] {
        let g = grads.get(id).unwrap().clone();
        for k in 0..g.len() {
            let orig = store.get(id).as_slice().unwrap()[k];
            let h = 1e-6;
            store.value_mut(id).as_slice_mut().unwrap()[k] = orig + h;
            let up = loss(&Tape::no_grad(), &store).item();
            store.value_mut(id).as_slice_mut().unwrap()[k] = orig - h;
            let down = loss(&Tape::no_grad(), &store).item();
            store.value_mut(id).as_slice_mut().unwrap()[k] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = g.as_slice().unwrap()[k];
            assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-8) <= 1e-3);
        }
    }
}

#[test]
fn noise_embedding_basics() {
    let a = noise_level_embedding(0.1, 64);
    assert_eq!(a, noise_level_embedding(0.1, 64));
    assert_ne!(a, noise_level_embedding(0.9, 64));
}

proptest! {
    #[test]
    fn noise_embedding_norm_bounded(s in 1e-6f64..=1.0, half in 1usize..64) {
        let dim = 2 * half;
        let e = noise_level_embedding(s, dim);
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm <= (dim as f64).sqrt() + 1e-9);
    }

    #[test]
    fn noise_embedding_is_lipschitz(s in 1e-3f64..0.99, d in 1e-9f64..1e-3) {
        let a = noise_level_embedding(s, 32);
        let b = noise_level_embedding((s + d).min(1.0), 32);
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        // each coordinate moves at most 1000·|Δ|
        prop_assert!(dist <= 1000.0 * d * (32f64).sqrt() + 1e-12);
    }
}
