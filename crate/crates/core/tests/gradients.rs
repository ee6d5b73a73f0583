//! Reverse-mode gradients against central finite differences.

use ndarray::Array2;
use proptest::prelude::*;
use wsd_core::nn::{Activation, Mlp, MlpSpec};
use wsd_core::rng::{standard_normal, stream};
use wsd_core::warmstart::nll_from_raw;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn spec(input: usize, hidden: Vec<usize>, output: usize, activation: Activation, n_scalars: usize) -> MlpSpec {
    MlpSpec {
        input_dim: input,
        hidden_dims: hidden,
        output_dim: output,
        activation,
        embed_dim: 6,
        n_scalars,
    }
}

/// Random parameters including the conditioning maps, which start at zero
/// after `init_params` and would otherwise go untested.
fn random_params(mlp: &Mlp, seed: u64) -> Vec<f64> {
    standard_normal(&mut stream(seed, 99), mlp.n_params())
        .into_iter()
        .map(|v| 0.5 * v)
        .collect()
}

fn max_rel_err<F>(params: &[f64], analytic: &[f64], loss: F) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + H;
        let up = loss(&p);
        p[i] = orig - H;
        let down = loss(&p);
        p[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    worst
}

fn check_linear_loss(sp: MlpSpec, batch: usize, seed: u64) -> f64 {
    let mlp = Mlp::new(sp.clone()).unwrap();
    let params = random_params(&mlp, seed);
    let mut rng = stream(seed, 1);
    let x = Array2::from_shape_vec((batch, sp.input_dim), standard_normal(&mut rng, batch * sp.input_dim)).unwrap();
    let u = Array2::from_shape_fn((batch, sp.n_scalars), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 10.0);
    let up = Array2::from_shape_vec((batch, sp.output_dim), standard_normal(&mut rng, batch * sp.output_dim)).unwrap();
    let (_, tape) = mlp.forward_train(&params, x.view(), u.view()).unwrap();
    let (grads, _) = mlp.backward_batch(&params, &tape, up.view()).unwrap();
    max_rel_err(&params, &grads, |p| {
        (&mlp.forward_batch(p, x.view(), u.view()).unwrap() * &up).sum()
    })
}

#[test]
fn network_2_8_1_matches_finite_differences() {
    for act in [Activation::Silu, Activation::Tanh] {
        let err = check_linear_loss(spec(2, vec![8], 1, act, 0), 3, 5);
        assert!(err < TOL, "{act:?}: {err}");
    }
}

#[test]
fn conditioned_network_matches_finite_differences() {
    let err = check_linear_loss(spec(3, vec![8, 6], 2, Activation::Silu, 2), 4, 11);
    assert!(err < TOL, "{err}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let sp = spec(3, vec![5], 2, Activation::Tanh, 1);
    let mlp = Mlp::new(sp).unwrap();
    let params = random_params(&mlp, 2);
    let x = Array2::from_shape_vec((1, 3), vec![0.3, -0.7, 1.1]).unwrap();
    let u = Array2::from_elem((1, 1), 0.4);
    let up = Array2::from_shape_vec((1, 2), vec![1.0, -0.5]).unwrap();
    let (_, tape) = mlp.forward_train(&params, x.view(), u.view()).unwrap();
    let (_, dx) = mlp.backward_batch(&params, &tape, up.view()).unwrap();
    for j in 0..3 {
        let f = |d: f64| {
            let mut xx = x.clone();
            xx[[0, j]] += d;
            (&mlp.forward_batch(&params, xx.view(), u.view()).unwrap() * &up).sum()
        };
        let fd = (f(H) - f(-H)) / (2.0 * H);
        assert!(rel_err(dx[[0, j]], fd) < TOL);
    }
}

#[test]
fn gaussian_nll_through_network_matches_finite_differences() {
    let sp = spec(2, vec![8], 4, Activation::Silu, 0);
    let mlp = Mlp::new(sp).unwrap();
    let params = random_params(&mlp, 3);
    let x = Array2::from_shape_vec((3, 2), vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8]).unwrap();
    let targets = [[0.1, -0.4], [1.2, 0.0], [-0.7, 0.9]];
    let none = Array2::<f64>::zeros((3, 0));
    let total_nll = |p: &[f64]| {
        let raw = mlp.forward_batch(p, x.view(), none.view()).unwrap();
        raw.outer_iter()
            .zip(&targets)
            .map(|(r, t)| nll_from_raw(&r.to_vec(), t, 0.01).unwrap().0)
            .sum::<f64>()
    };
    let (raw, tape) = mlp.forward_train(&params, x.view(), none.view()).unwrap();
    let mut up = Array2::zeros(raw.raw_dim());
    for ((r, t), mut g) in raw.outer_iter().zip(&targets).zip(up.outer_iter_mut()) {
        let (_, gr) = nll_from_raw(&r.to_vec(), t, 0.01).unwrap();
        for (gi, v) in g.iter_mut().zip(gr) {
            *gi = v;
        }
    }
    let (grads, _) = mlp.backward_batch(&params, &tape, up.view()).unwrap();
    let err = max_rel_err(&params, &grads, total_nll);
    assert!(err < TOL, "{err}");
}

#[test]
fn nll_raw_gradient_matches_finite_differences() {
    let raw = [0.3, -1.2, 0.5, 2.0];
    let x0 = [1.0, -0.5];
    let (_, g) = nll_from_raw(&raw, &x0, 0.01).unwrap();
    for i in 0..4 {
        let mut r = raw;
        r[i] += H;
        let up = nll_from_raw(&r, &x0, 0.01).unwrap().0;
        r[i] -= 2.0 * H;
        let down = nll_from_raw(&r, &x0, 0.01).unwrap().0;
        assert!(rel_err(g[i], (up - down) / (2.0 * H)) < TOL);
    }
}

#[test]
fn squared_error_loss_matches_finite_differences() {
    let sp = spec(4, vec![7], 2, Activation::Silu, 2);
    let mlp = Mlp::new(sp).unwrap();
    let params = random_params(&mlp, 8);
    let mut rng = stream(8, 2);
    let x = Array2::from_shape_vec((5, 4), standard_normal(&mut rng, 20)).unwrap();
    let u = Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64 / 6.0);
    let target = Array2::from_shape_vec((5, 2), standard_normal(&mut rng, 10)).unwrap();
    let n = 10.0;
    let loss = |p: &[f64]| {
        let r = mlp.forward_batch(p, x.view(), u.view()).unwrap() - &target;
        r.mapv(|v| v * v).sum() / n
    };
    let (pred, tape) = mlp.forward_train(&params, x.view(), u.view()).unwrap();
    let up = (pred - &target) * (2.0 / n);
    let (grads, _) = mlp.backward_batch(&params, &tape, up.view()).unwrap();
    let err = max_rel_err(&params, &grads, loss);
    assert!(err < TOL, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn small_networks_match_finite_differences(
        input in 1usize..4,
        h1 in 1usize..10,
        h2 in 0usize..8,
        output in 1usize..3,
        n_scalars in 0usize..3,
        act in prop_oneof![Just(Activation::Silu), Just(Activation::Tanh)],
        seed in 0u64..1000,
    ) {
        let hidden = if h2 == 0 { vec![h1] } else { vec![h1, h2] };
        let sp = spec(input, hidden, output, act, n_scalars);
        prop_assume!(Mlp::new(sp.clone()).unwrap().n_params() <= 1000);
        let err = check_linear_loss(sp, 2, seed);
        prop_assert!(err < TOL, "{}", err);
    }
}
