use wsd_core::metrics::{crps_ensemble, energy_distance, power_spectrum_ratio};
use wsd_core::rng::{standard_normal, stream};
use wsd_core::tasks::{AnalyticConfig, AnalyticTask};
use wsd_core::Field;

fn gaussian_scalars(seed: u64, n: usize, shift: f64) -> Vec<Field> {
    standard_normal(&mut stream(seed, 0), n)
        .into_iter()
        .map(|z| Field::from_vec(vec![z + shift]).unwrap())
        .collect()
}

#[test]
fn large_gaussian_ensemble_crps_matches_closed_form() {
    // CRPS(N(0,1), 0) = 2 phi(0) - 1/sqrt(pi)
    let exact = 2.0 / (2.0 * std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
    assert!((exact - 0.2337).abs() < 1e-4);
    let truth = Field::from_vec(vec![0.0]).unwrap();
    // the estimator is dominated by mean |X|, whose standard deviation is sqrt(1 - 2/pi)
    let se = |m: usize| (1.0 - 2.0 / std::f64::consts::PI).sqrt() / (m as f64).sqrt();
    let small = crps_ensemble(&gaussian_scalars(1, 10_000, 0.0), &truth).unwrap();
    assert!((small - exact).abs() < 3.0 * se(10_000), "crps {small}");
    let large = crps_ensemble(&gaussian_scalars(1, 1_000_000, 0.0), &truth).unwrap();
    assert!((large - exact).abs() / exact < 0.01, "crps {large}");
}

#[test]
fn energy_distance_separates_shifted_samples() {
    let a = gaussian_scalars(2, 10_000, 0.0);
    let b = gaussian_scalars(3, 10_000, 0.0);
    let c = gaussian_scalars(4, 2_000, 1.0);
    let same = energy_distance(&a, &b).unwrap();
    assert!(same < 0.02, "same-law distance {same}");
    // 2E|X-Y| - E|X-X'| - E|Y-Y'| for a unit shift
    let shifted = energy_distance(&a[..2_000], &c).unwrap();
    assert!(shifted > 0.3, "shifted distance {shifted}");
    assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
}

#[test]
fn spectrum_self_ratio_is_one() {
    let fields: Vec<Field> = (0..20).map(|i| Field::from_vec(standard_normal(&mut stream(5, i), 32)).unwrap()).collect();
    let r = power_spectrum_ratio(&fields, &fields).unwrap();
    assert!(r.eta.iter().all(|&e| e == 1.0));
    assert_eq!(r.summary, 0.0);
}

#[test]
fn crps_prefers_the_true_conditional_over_a_biased_sampler() {
    let task = AnalyticTask::new(AnalyticConfig::correlated(1, 0.8), 11).unwrap();
    let mut rng = stream(12, 0);
    let n_ctx = 1_000;
    let mut diffs = Vec::with_capacity(n_ctx);
    for _ in 0..n_ctx {
        let (sample, law) = task.draw(&mut rng);
        let sd = law.std()[0];
        let members: Vec<Field> = (0..50).map(|_| Field::from_vec(law.sample(&mut rng)).unwrap()).collect();
        let biased: Vec<Field> = members.iter().map(|m| Field::from_vec(vec![m.data()[0] + 0.5 * sd]).unwrap()).collect();
        let good = crps_ensemble(&members, &sample.x0).unwrap();
        let bad = crps_ensemble(&biased, &sample.x0).unwrap();
        diffs.push(bad - good);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    assert!(t > 3.0, "paired t statistic {t}");
}
