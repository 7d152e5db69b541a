use cohort_dp::data::{ClientShard, Dataset};
use cohort_dp::federation::{dp_cohort_round, ClientConfig, CohortRuntime, Mechanism};
use cohort_dp::nn::{self, LayerShapes, Matrix};
use cohort_dp::privacy::{self, CohortLedger, NoiseSpec, DEFAULT_ROUND_CAP};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn gaussian_noise_moments() {
    let spec = NoiseSpec::new(2.0, 1.5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let draws = privacy::gaussian_noise(200_000, &spec, &mut rng);
    let (mean, std) = mean_and_std(&draws);
    // Standard errors: 3 / sqrt(2e5) ~ 0.0067 for the mean, ~0.5% for the std.
    assert!(mean.abs() < 0.03, "mean {mean}");
    assert!((std / 3.0 - 1.0).abs() < 0.02, "std {std}");
    let zero = NoiseSpec::new(1.0, 0.0).unwrap();
    assert!(privacy::gaussian_noise(10, &zero, &mut rng).iter().all(|&v| v == 0.0));
}

fn shard(id: usize) -> ClientShard {
    let features = Matrix::from_vec(3, 4, (0..12).map(|v| v as f64 / 7.0).collect()).unwrap();
    ClientShard {
        client_id: id,
        cohort_id: 0,
        label_ids: vec![0, 1],
        data: Dataset::new(features, vec![0, 1, 0]).unwrap(),
    }
}

/// With zero-length local training every client delta is zero, so the cohort
/// delta is pure noise: `S * sigma / m` per coordinate, here 1/4.
#[test]
fn cohort_noise_is_scaled_by_sample_size() {
    let shapes = LayerShapes::new(vec![4, 200, 9]).unwrap();
    let global = nn::init_params(&shapes, 1);
    let mut cohort = CohortRuntime::new(0, (0..8).map(shard).collect(), None, 4, 6.0).unwrap();
    let mechanism = Mechanism::Private(NoiseSpec::new(1.0, 1.0).unwrap());
    let client = ClientConfig {
        epochs: 0,
        ..ClientConfig::default()
    };
    let out = dp_cohort_round(&mut cohort, &global, &mechanism, &client, 7, 0).unwrap();
    assert!(out.participated);
    assert_eq!(cohort.client_queries, 4);
    let (mean, std) = mean_and_std(out.delta.values());
    let n = out.delta.len() as f64;
    assert!(mean.abs() < 4.0 * 0.25 / n.sqrt(), "mean {mean}");
    assert!((std - 0.25).abs() < 4.0 * 0.25 / (2.0 * n).sqrt(), "std {std}");
}

#[test]
fn delta_trajectory_is_increasing_and_stops_past_the_threshold() {
    for (q, eps) in [(0.05, 6.0), (0.1, 6.0), (0.05, 8.0)] {
        let rows = privacy::delta_trajectory(q, 1.0, eps, 1e-5, DEFAULT_ROUND_CAP).unwrap();
        assert!(rows.windows(2).all(|w| w[1].1 > w[0].1 && w[1].0 == w[0].0 + 1));
        let (last, before) = (rows[rows.len() - 1].1, rows[rows.len() - 2].1);
        assert!(last > 1e-5 && before <= 1e-5);
        let t = privacy::rounds_to_exhaustion(q, 1.0, eps, 1e-5, DEFAULT_ROUND_CAP).unwrap();
        assert_eq!(rows.len() as u64, t);
    }
}

#[test]
fn ledger_admits_exactly_the_allowance() {
    let t = privacy::rounds_to_exhaustion(0.1, 1.0, 6.0, 1e-5, DEFAULT_ROUND_CAP).unwrap();
    let mut ledger = CohortLedger::new(6.0, 1e-5, 0.1, 1.0).unwrap();
    let mut admitted = 0;
    while ledger.admit_round() {
        ledger.accumulate_round().unwrap();
        admitted += 1;
        assert!(ledger.delta_spent() <= 1e-5);
    }
    assert_eq!(admitted, t - 1);
    assert!(ledger.exhausted);
    assert!(!ledger.admit_round());

    ledger.relax(3).unwrap();
    let mut extra = 0;
    while ledger.admit_round() {
        ledger.accumulate_round().unwrap();
        extra += 1;
    }
    assert_eq!(extra, 3);
}
