//! Property tests over persistence round trips and metric invariants.

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use probadapt::adapters::{forward_deterministic, ModelConfig, ModelState};
use probadapt::evaluation::{ece, energy_score, phndd_metrics};
use probadapt::feature_provider::{
    build_task_stream, load_feature_store, save_feature_store, synth_stream, SynthSpec,
};
use probadapt::memory::herding_select;
use probadapt::trainer::{load_checkpoint, save_checkpoint};

fn small_spec() -> impl Strategy<Value = SynthSpec> {
    (
        1usize..4,
        1usize..4,
        1usize..6,
        1usize..9,
        1usize..4,
        any::<u64>(),
    )
        .prop_map(|(t, c, n, d, l, seed)| SynthSpec {
            num_tasks: t,
            classes_per_task: c,
            samples_per_class: n,
            test_samples_per_class: n,
            dim: d,
            num_templates: l,
            seed,
            ..SynthSpec::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn feature_store_round_trips(spec in small_spec()) {
        let (store, _) = synth_stream(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_feature_store(&store, dir.path()).unwrap();
        prop_assert_eq!(load_feature_store(dir.path()).unwrap(), store);
    }

    #[test]
    fn streams_partition_classes(spec in small_spec(), shuffle in proptest::option::of(any::<u64>())) {
        let (store, _) = synth_stream(&spec).unwrap();
        let stream = build_task_stream(&store, spec.num_tasks, shuffle).unwrap();
        let mut order = stream.class_order();
        order.sort_unstable();
        prop_assert_eq!(order, (0..store.num_classes() as u32).collect::<Vec<_>>());
        let rows: usize = stream.tasks.iter().map(|t| t.train_rows.len()).sum();
        prop_assert_eq!(rows, store.train.len());
    }

    #[test]
    fn checkpoint_preserves_predictions(d in 2usize..9, sizes in proptest::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
        let mut state = ModelState::new(ModelConfig::for_dim(d), seed).unwrap();
        let mut texts = Vec::new();
        for (t, &n) in sizes.iter().enumerate() {
            let templates = Array3::from_shape_fn((n, 2, d), |(c, l, j)| ((c * 7 + l * 3 + j + t) as f64).sin());
            state.add_task(n, templates.view(), seed ^ t as u64).unwrap();
            texts.push(probadapt::feature_provider::class_prototypes(&templates));
        }
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        let images = Array2::from_shape_fn((3, d), |(i, j)| ((i + 2 * j) as f64).cos());
        let a = forward_deterministic(&state, images.view(), &texts).unwrap();
        let b = forward_deterministic(&loaded, images.view(), &texts).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn herding_is_a_permutation_prefix(n in 1usize..12, d in 1usize..5, seed in any::<u64>()) {
        let x = Array2::from_shape_fn((n, d), |(i, j)| ((seed as f64 * 1e-3) + (i * d + j) as f64 * 1.7).sin() + 0.1);
        let all = herding_select(x.view(), n).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        for k in 0..n {
            prop_assert_eq!(&herding_select(x.view(), k).unwrap()[..], &all[..k]);
        }
    }

    #[test]
    fn detection_metrics_are_bounded(
        seen in proptest::collection::vec(-5.0f64..5.0, 1..40),
        novel in proptest::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let m = phndd_metrics(&seen, &novel).unwrap();
        for v in [m.fpr95, m.auroc, m.aupr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let swapped = phndd_metrics(&novel, &seen).unwrap();
        prop_assert!((m.auroc + swapped.auroc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ece_is_bounded(rows in proptest::collection::vec((0.0f64..1.0, 0usize..2), 1..60), bins in 1usize..20) {
        let probs = Array2::from_shape_fn((rows.len(), 2), |(i, j)| if j == 0 { rows[i].0 } else { 1.0 - rows[i].0 });
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let e = ece(probs.view(), &labels, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn energy_is_a_soft_minimum(logits in proptest::collection::vec(-20.0f64..20.0, 1..10), temp in 0.1f64..4.0) {
        let n = logits.len();
        let row = Array2::from_shape_vec((1, n), logits.clone()).unwrap();
        let e = energy_score(row.view(), temp)[0];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(e <= -max + 1e-9);
        prop_assert!(e >= -max - temp * (n as f64).ln() - 1e-9);
    }
}
