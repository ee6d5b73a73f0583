//! Ground-truth generators against independent Monte-Carlo checks.

use nalgebra::{DMatrix, DVector};
use wsd_core::flowmatch::{GenerativeModel, TrainMode};
use wsd_core::nn::{Activation, Mlp, MlpSpec};
use wsd_core::rng::{standard_normal, stream};
use wsd_core::solvers::{GridKind, Method, ModelBundle, SolverSpec};
use wsd_core::tasks::{
    rollout, AnalyticConfig, AnalyticTask, ConditionalTask, Context, ForecastConfig, ForecastTask, InpaintingConfig,
    InpaintingTask,
};

/// Standardised residuals `(x0 - mean(C)) / std(C)` over joint draws must be
/// zero-mean and unit-variance when the closed-form conditionals are right.
fn check_standardised_residuals(task: &AnalyticTask, n: usize) {
    let mut rng = stream(77, 0);
    let d = task.config().target_dim;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for _ in 0..n {
        let (s, law) = task.draw(&mut rng);
        let (m, sd) = (law.mean(), law.std());
        for i in 0..d {
            let z = (s.x0.data()[i] - m[i]) / sd[i];
            sum[i] += z;
            sq[i] += z * z;
        }
    }
    let nf = n as f64;
    for i in 0..d {
        let mean = sum[i] / nf;
        let var = sq[i] / nf - mean * mean;
        assert!(mean.abs() < 3.0 / nf.sqrt(), "dim {i}: mean {mean}");
        // unit-variance check; standard error of the variance is sqrt(2/n) for
        // Gaussians, inflated here to cover the heavier mixture tails
        assert!((var - 1.0).abs() < 3.0 * (3.0 / nf).sqrt(), "dim {i}: var {var}");
    }
}

#[test]
fn analytic_conditionals_match_monte_carlo() {
    check_standardised_residuals(&AnalyticTask::new(AnalyticConfig::correlated(3, 0.8), 1).unwrap(), 100_000);
    check_standardised_residuals(&AnalyticTask::new(AnalyticConfig::mixture(2, 0.6, 1.5, 0.7), 2).unwrap(), 100_000);
}

#[test]
fn analytic_conditional_sampler_matches_its_moments() {
    let task = AnalyticTask::new(AnalyticConfig::mixture(1, 0.5, 1.0, 0.8), 0).unwrap();
    let law = task.conditional(&[0.2]);
    let n = 100_000;
    let mut rng = stream(3, 0);
    let xs: Vec<f64> = (0..n).map(|_| law.sample(&mut rng)[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = law.std()[0];
    assert!((mean - law.mean()[0]).abs() < 3.0 * sd / (n as f64).sqrt());
    assert!((var.sqrt() - sd).abs() / sd < 0.01);
}

#[test]
fn grf_sample_covariance_matches_kernel() {
    let task = InpaintingTask::new(InpaintingConfig::default(), 5).unwrap();
    let pairs = [(0, 0), (0, 1), (0, 2), (0, 16), (0, 17), (17, 51), (100, 103), (120, 136), (200, 255), (37, 37)];
    let n = 10_000;
    let mut acc = vec![0.0; pairs.len()];
    for i in 0..n {
        let img = task.sample(i).x0;
        for (k, &(a, b)) in pairs.iter().enumerate() {
            acc[k] += img.data()[a] * img.data()[b];
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let want = task.covariance(a, b);
        num += (acc[k] / n as f64 - want).powi(2);
        den += want * want;
    }
    let rel = (num / den).sqrt();
    assert!(rel < 0.05, "relative RMS covariance error {rel}");
}

#[test]
fn grf_conditioning_matches_pathwise_monte_carlo() {
    // 4x4 image, 2 visible pixels; conditional samples by pathwise update
    // f + K_av K_vv^-1 (y - f_v) of unconditional prior draws
    let cfg = InpaintingConfig {
        size: 4,
        length_scale: 4.0,
        visible_min: 0.1,
        visible_max: 0.1,
    };
    let task = InpaintingTask::new(cfg, 9).unwrap();
    let sample = task.sample(0);
    let Context::Inpainting { masked, mask } = &sample.context else { panic!("wrong context") };
    let vis: Vec<usize> = (0..16).filter(|&i| mask.data()[i] > 0.5).collect();
    assert_eq!(vis.len(), 2);
    let (mean, std) = task.oracle_moments(&sample.context).unwrap();

    let kfull = DMatrix::from_fn(16, 16, |a, b| task.covariance(a, b));
    let chol = (kfull.clone() + DMatrix::identity(16, 16) * 1e-10).cholesky().unwrap().l();
    let kvv = DMatrix::from_fn(2, 2, |a, b| task.covariance(vis[a], vis[b]));
    let kav = DMatrix::from_fn(16, 2, |a, b| task.covariance(a, vis[b]));
    let gain = &kav * kvv.try_inverse().unwrap();
    let y = DVector::from_iterator(2, vis.iter().map(|&i| masked.data()[i]));

    let n = 40_000;
    let mut rng = stream(10, 0);
    let (mut s1, mut s2) = (vec![0.0; 16], vec![0.0; 16]);
    for _ in 0..n {
        let f = &chol * DVector::from_vec(standard_normal(&mut rng, 16));
        let fv = DVector::from_iterator(2, vis.iter().map(|&i| f[i]));
        let post = &f + &gain * (&y - fv);
        for i in 0..16 {
            s1[i] += post[i];
            s2[i] += post[i] * post[i];
        }
    }
    for i in 0..16 {
        let m = s1[i] / n as f64;
        let sd = (s2[i] / n as f64 - m * m).max(0.0).sqrt();
        let se = std.data()[i] / (n as f64).sqrt();
        assert!((m - mean.data()[i]).abs() <= 3.0 * se + 1e-9, "pixel {i}: mean {m} vs {}", mean.data()[i]);
        let se_sd = std.data()[i] / (2.0 * n as f64).sqrt();
        assert!((sd - std.data()[i]).abs() <= 3.0 * se_sd + 1e-6, "pixel {i}: sd {sd} vs {}", std.data()[i]);
    }
}

#[test]
fn forecast_spectrum_follows_the_power_law() {
    let task = ForecastTask::new(ForecastConfig::default(), 0).unwrap();
    let n = 64;
    let mut rng = stream(12, 0);
    let mut prev = vec![0.0; n];
    let mut now = vec![0.0; n];
    let mut planner = rustfft::FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut power = vec![0.0; n / 2];
    let (burn, steps) = (200, 10_000);
    for t in 0..burn + steps {
        let next = task.step(&prev, &now, &mut rng);
        prev = std::mem::replace(&mut now, next);
        if t >= burn {
            let mut buf: Vec<_> = now.iter().map(|&v| rustfft::num_complex::Complex::new(v, 0.0)).collect();
            fft.process(&mut buf);
            for k in 1..n / 2 {
                power[k] += buf[k].norm_sqr();
            }
        }
    }
    // log-log least squares over k = 1..n/2-1
    let pts: Vec<(f64, f64)> = (1..n / 2).map(|k| ((k as f64).ln(), power[k].ln())).collect();
    let m = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / m, pts.iter().map(|p| p.1).sum::<f64>() / m);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope + 3.0).abs() < 0.3, "spectral slope {slope}");
}

#[test]
fn task_samples_are_reproducible() {
    let f = ForecastTask::new(ForecastConfig::default(), 4).unwrap();
    assert_eq!(f.sample(17), f.sample(17));
    assert_ne!(f.sample(17), f.sample(18));
    let g = InpaintingTask::new(InpaintingConfig::default(), 4).unwrap();
    assert_eq!(g.sample(3), g.sample(3));
}

fn tiny_forecast_bundle(length: usize) -> ModelBundle {
    let spec = MlpSpec {
        input_dim: GenerativeModel::input_dim(length, 2 * length),
        hidden_dims: vec![16],
        output_dim: length,
        activation: Activation::Silu,
        embed_dim: 8,
        n_scalars: 2,
    };
    let generator = GenerativeModel::new(spec.clone(), TrainMode::Baseline, vec![length], 2 * length).unwrap();
    let params = Mlp::new(spec).unwrap().init_params(&mut stream(0, 0));
    ModelBundle::new(None, generator, params).unwrap()
}

#[test]
fn rollout_accounting_and_determinism() {
    let length = 8;
    let task = ForecastTask::new(ForecastConfig { length, ..Default::default() }, 1).unwrap();
    let (p, c) = task.initial_condition(0);
    let (p, c) = (wsd_core::Field::from_vec(p).unwrap(), wsd_core::Field::from_vec(c).unwrap());
    let bundle = tiny_forecast_bundle(length);
    let spec = SolverSpec::new(Method::Midpoint, GridKind::Uniform, 4);

    let none = rollout(&bundle, &p, &c, 0, 3, &spec, 5).unwrap();
    assert!(none.members.iter().all(|m| m == &vec![c.clone()]));
    assert_eq!(bundle.velocity_evals(), 0);

    let a = rollout(&bundle, &p, &c, 5, 4, &spec, 5).unwrap();
    assert_eq!(bundle.velocity_evals(), 4 * 5 * 4);
    let b = rollout(&bundle, &p, &c, 5, 4, &spec, 5).unwrap();
    assert_eq!(a, b);
    assert!(a.members.iter().all(|m| m.len() == 6));
    assert!(a.truncated.iter().all(Option::is_none));
    // members differ only by their noise stream
    assert_ne!(a.members[0][1], a.members[1][1]);
    let other = rollout(&bundle, &p, &c, 5, 4, &spec, 6).unwrap();
    assert_ne!(a, other);
}

#[test]
fn batched_and_single_sampling_agree() {
    let length = 8;
    let bundle = tiny_forecast_bundle(length);
    let task = ForecastTask::new(ForecastConfig { length, ..Default::default() }, 2).unwrap();
    let contexts: Vec<Context> = (0..5).map(|i| task.sample(i).context).collect();
    let spec = SolverSpec::new(Method::Rk4, GridKind::LogSnr, 8);
    let batch = bundle.sample_contexts(&contexts, &spec, 3, 10).unwrap();
    for (i, ctx) in contexts.iter().enumerate() {
        let single = bundle.sample_contexts(std::slice::from_ref(ctx), &spec, 3, 10 + i as u64).unwrap();
        for (a, b) in single[0].data().iter().zip(batch[i].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
