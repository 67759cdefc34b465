use mlzsl::metrics::{average_precision, evaluate, mean_average_precision, topk_prf, PredictionMatrix, Task};
use mlzsl::par::Parallelism;
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    (1usize..15, 1usize..8).prop_flat_map(|(n, c)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, c), n),
            prop::collection::vec(prop::collection::btree_set(0..c, 0..=c), n)
                .prop_map(|t| t.into_iter().map(|s| s.into_iter().collect()).collect()),
        )
    })
}

fn matrix(scores: &[Vec<f64>]) -> PredictionMatrix {
    PredictionMatrix::new(Task::Gzsl, (0..scores[0].len()).collect(), scores.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn metrics_lie_in_unit_interval((scores, truth) in instance(), k in 1usize..8) {
        let pred = matrix(&scores);
        let k = k.min(pred.cols());
        let p = topk_prf(&pred, &truth, k).unwrap();
        for v in [p.precision, p.recall, p.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Ok(m) = mean_average_precision(&pred, &truth) {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn strictly_increasing_transforms_change_nothing((scores, truth) in instance(), k in 1usize..8, a in 0.1f64..3.0, b in -2.0f64..2.0) {
        let pred = matrix(&scores);
        let k = k.min(pred.cols());
        let moved = pred.map_scores(|v| (a * v + b).exp());
        prop_assert_eq!(topk_prf(&pred, &truth, k).unwrap(), topk_prf(&moved, &truth, k).unwrap());
        prop_assert_eq!(
            mean_average_precision(&pred, &truth).ok(),
            mean_average_precision(&moved, &truth).ok()
        );
    }

    #[test]
    fn recall_at_all_columns_is_one((scores, truth) in instance()) {
        let pred = matrix(&scores);
        prop_assume!(truth.iter().any(|t| !t.is_empty()));
        let r = topk_prf(&pred, &truth, pred.cols()).unwrap();
        prop_assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn truth_as_scores_gives_perfect_ap((scores, truth) in instance()) {
        let oracle: Vec<Vec<f64>> = scores
            .iter()
            .enumerate()
            .map(|(i, row)| (0..row.len()).map(|c| if truth[i].contains(&c) { 1.0 } else { 0.0 }).collect())
            .collect();
        let pred = matrix(&oracle);
        for c in 0..pred.cols() {
            if let Some(ap) = average_precision(&pred, &truth, c) {
                prop_assert_eq!(ap, 1.0);
            }
        }
    }

    #[test]
    fn parallel_evaluation_matches_sequential((scores, truth) in instance()) {
        let pred = matrix(&scores);
        prop_assume!(truth.iter().any(|t| !t.is_empty()));
        let ks = [1, pred.cols()];
        let a = evaluate(&pred, &truth, &ks, Parallelism::Sequential).unwrap();
        let b = evaluate(&pred, &truth, &ks, Parallelism::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn hand_computed_example() {
    // Two samples, three labels.
    let pred = matrix(&[vec![0.9, 0.1, 0.5], vec![0.2, 0.8, 0.3]]);
    let truth = vec![vec![0, 1], vec![2]];
    let p = topk_prf(&pred, &truth, 1).unwrap();
    assert_eq!((p.precision, p.recall), (0.5, 1.0 / 3.0));
    // Label 0: relevant sample ranked 1st -> AP 1. Label 1: relevant sample 0
    // ranked 2nd -> 1/2. Label 2: relevant sample 1 ranked 2nd -> 1/2.
    let m = mean_average_precision(&pred, &truth).unwrap();
    assert!((m - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn invalid_inputs_are_rejected() {
    let pred = matrix(&[vec![0.0, 1.0]]);
    assert!(topk_prf(&pred, &[vec![0]], 3).is_err());
    assert!(topk_prf(&pred, &[vec![0]], 0).is_err());
    assert!(topk_prf(&pred, &[vec![5]], 1).is_err());
    assert!(mean_average_precision(&pred, &[vec![]]).is_err());
    assert!(PredictionMatrix::new(Task::Zsl, vec![0, 1], vec![vec![f64::NAN, 0.0]]).is_err());
}
