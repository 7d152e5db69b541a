use cohort_dp::data::{self, SynthSpec};
use cohort_dp::metrics::{confusion, f1_report};
use cohort_dp::nn::{self, AdagradState, Gradient, LayerShapes, Matrix, ParamVector};
use cohort_dp::privacy::clip_update;
use proptest::prelude::*;

fn shapes_for(len: usize) -> LayerShapes {
    LayerShapes::new(vec![len - 1, 1]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        seed in any::<u64>(),
        scale in 0.1f64..20.0,
        inputs in prop::collection::vec(-50.0f64..50.0, 5 * 6),
    ) {
        let shapes = LayerShapes::new(vec![6, 4, 3]).unwrap();
        let mut params = nn::init_params(&shapes, seed);
        params.scale_in_place(scale);
        let features = Matrix::from_vec(5, 6, inputs).unwrap();
        let probs = nn::forward(&params, &features).unwrap();
        for r in 0..probs.rows() {
            let row = probs.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p) && p.is_finite()));
        }
    }

    #[test]
    fn clipping_bounds_norm_and_is_idempotent(
        values in prop::collection::vec(-100.0f64..100.0, 2..40),
        s in 0.01f64..10.0,
    ) {
        let v = ParamVector::from_values(&shapes_for(values.len()), values).unwrap();
        let once = clip_update(&v, s);
        prop_assert!(once.l2_norm() <= s * (1.0 + 1e-12));
        let twice = clip_update(&once, s);
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * s);
        }
        if v.l2_norm() <= s {
            prop_assert_eq!(once, v);
        }
    }

    #[test]
    fn adagrad_steps_never_grow(
        grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..12),
    ) {
        let shapes = LayerShapes::new(vec![1, 2]).unwrap();
        let mut params = ParamVector::zeros(&shapes);
        let mut state = AdagradState::new(4, 0.1, nn::DEFAULT_ADAGRAD_STABILITY);
        let mut last_rate = vec![f64::INFINITY; 4];
        for g in grads {
            let before = state.accumulator.clone();
            nn::adagrad_step(&mut params, &mut state, &Gradient { values: g }).unwrap();
            for i in 0..4 {
                prop_assert!(state.accumulator[i] >= before[i]);
                let rate = state.learning_rate / (state.accumulator[i] + state.stability).sqrt();
                prop_assert!(rate <= last_rate[i]);
                last_rate[i] = rate;
            }
        }
    }

    #[test]
    fn micro_f1_is_accuracy(
        pairs in prop::collection::vec((0usize..9, 0usize..9), 1..300),
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = confusion(&preds, &labels, 9).unwrap();
        let report = f1_report(&cm).unwrap();
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        prop_assert_eq!(report.micro, correct as f64 / labels.len() as f64);
    }

    #[test]
    fn f1_report_ignores_row_order(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..100),
        rotate in 0usize..100,
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        let (p2, l2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        let a = f1_report(&confusion(&preds, &labels, 5).unwrap()).unwrap();
        let b = f1_report(&confusion(&p2, &l2, 5).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn sorted_rows(d: &data::Dataset, keep: &[usize]) -> Vec<(usize, Vec<u64>)> {
    let mut rows: Vec<(usize, Vec<u64>)> = (0..d.len())
        .filter(|&r| keep.contains(&d.labels[r]))
        .map(|r| (d.labels[r], d.features.row(r).iter().map(|v| v.to_bits()).collect()))
        .collect();
    rows.sort();
    rows
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn client_partition_is_complete_and_disjoint(
        num_cohorts in 1usize..5,
        clients in 1usize..12,
        seed in any::<u64>(),
    ) {
        let spec = SynthSpec { counts: vec![300, 40, 40, 40, 40, 40, 40, 40, 40], separation: 3.0, width: 3, family_spread: 1.0 };
        let d = data::synth_generate(&spec, seed).unwrap();
        let assignment = data::partition_cohorts(&[1, 2, 3, 4, 5, 6, 7, 8], num_cohorts, seed).unwrap();
        let shards = data::partition_clients(&d, &assignment, clients, seed).unwrap();
        prop_assert_eq!(shards.len(), num_cohorts * clients);

        let mut all_rows = Vec::new();
        for s in &shards {
            prop_assert_eq!(s.label_ids[0], data::BENIGN_ID);
            prop_assert!(s.data.labels.iter().all(|l| s.label_ids.contains(l)));
            let own = &assignment.cohort_label_sets[s.cohort_id];
            prop_assert!(s.label_ids[1..].iter().all(|l| own.contains(l)));
            all_rows.extend(sorted_rows(&s.data, &(0..9).collect::<Vec<_>>()));
        }
        all_rows.sort();
        prop_assert_eq!(all_rows, sorted_rows(&d, &(0..9).collect::<Vec<_>>()));
    }
}
