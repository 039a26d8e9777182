mod common;

use common::rng;
use deep_glr::data::{generate_phantom, sample_counts, simulate_lowdose, NoiseConfig, PhantomSpec};
use deep_glr::{Geometry, Sinogram};
use proptest::prelude::*;

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var)
}

#[test]
fn counts_are_poisson_dispersed() {
    let mut r = rng(7);
    for lambda in [3.5, 60.0, 700.0, 4096.0, 4096.0 * (-4.0f64).exp()] {
        let draws: Vec<f64> = (0..100_000).map(|_| sample_counts(&mut r, lambda)).collect();
        assert!(draws.iter().all(|&k| k >= 0.0 && k.fract() == 0.0));
        let (m, v) = mean_var(&draws);
        assert!((v / m - 1.0).abs() < 0.02, "lambda {lambda}: mean {m} var {v}");
        assert!((m / lambda - 1.0).abs() < 0.02);
    }
}

fn flat(len: usize, value: f64) -> Sinogram {
    Sinogram::new(1, len, vec![value; len]).unwrap()
}

#[test]
fn huge_photon_budget_recovers_clean_sinogram() {
    let g = Geometry::new(64, 13.0, 60, 95).unwrap();
    let p = deep_glr::Projector::new(g).unwrap();
    let x = generate_phantom(&PhantomSpec::default(), &g);
    let clean = p.forward(&x).unwrap();
    let cfg = NoiseConfig {
        n0: 1e12,
        ..NoiseConfig::default()
    };
    let noisy = simulate_lowdose(&clean, &cfg);
    let n = clean.data().len() as f64;
    let rms = (clean
        .data()
        .iter()
        .zip(noisy.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
        .sqrt();
    assert!(rms < 1e-3, "{rms}");
}

/// With no attenuation the log-ratio has mean `1 / (2 n0 mu_max)` to second
/// order (from `E[-ln(k/n0)]` with `Var k = n0`), and that offset is close to
/// three standard errors at 10^5 bins, so it is part of the oracle here.
#[test]
fn unattenuated_bins_are_nearly_unbiased() {
    let cfg = NoiseConfig::default();
    let noisy = simulate_lowdose(&flat(100_000, 0.0), &cfg);
    let (m, v) = mean_var(noisy.data());
    let se = (v / 100_000.0).sqrt();
    let bias = 1.0 / (2.0 * cfg.n0 * cfg.mu_max);
    assert!((m - bias).abs() < 3.0 * se, "mean {m}, predicted {bias}, se {se}");
    assert!(m.abs() < 5.0 * se);
}

#[test]
fn more_attenuation_means_fewer_counts() {
    let cfg = NoiseConfig::default();
    let mut last = f64::INFINITY;
    for y in [0.0, 1.0, 3.0, 6.0, 10.0] {
        // Mean transmitted fraction from the simulated line integrals.
        let noisy = simulate_lowdose(&flat(20_000, y), &cfg);
        let counts = noisy
            .data()
            .iter()
            .map(|v| (-cfg.mu_max * v).exp())
            .sum::<f64>();
        assert!(counts < last);
        last = counts;
    }
}

#[test]
fn noise_is_seeded() {
    let s = flat(500, 2.0);
    let a = simulate_lowdose(&s, &NoiseConfig::default());
    let b = simulate_lowdose(&s, &NoiseConfig::default());
    let c = simulate_lowdose(
        &s,
        &NoiseConfig {
            rng_seed: 99,
            ..NoiseConfig::default()
        },
    );
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn phantoms_stay_in_range_with_empty_border() {
    let g = Geometry::new(32, 13.0, 1, 1).unwrap();
    for seed in 0..1000 {
        let x = generate_phantom(
            &PhantomSpec {
                rng_seed: seed,
                ..PhantomSpec::default()
            },
            &g,
        );
        assert!(x.min() >= 0.0 && x.max() <= 1.0);
        let n = 32;
        for k in 0..n {
            for (r, c) in [(0, k), (n - 1, k), (k, 0), (k, n - 1)] {
                assert_eq!(x.get(r, c), 0.0, "seed {seed}");
            }
        }
    }
}

proptest! {
    #[test]
    fn log_transform_never_produces_nan(
        values in proptest::collection::vec(0.0f64..1e6, 1..64),
        n0 in 1.0f64..1e7,
        seed in any::<u64>(),
    ) {
        let clean = Sinogram::new(1, values.len(), values).unwrap();
        let cfg = NoiseConfig { n0, mu_max: 0.37, rng_seed: seed };
        let noisy = simulate_lowdose(&clean, &cfg);
        prop_assert!(noisy.data().iter().all(|v| v.is_finite()));
    }
}
