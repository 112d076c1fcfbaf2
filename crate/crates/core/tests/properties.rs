use proptest::prelude::*;
use xmodal_core::ctc::{collapse, ctc_logprob_bruteforce, ctc_loss, min_frames};
use xmodal_core::decode::{beam_search, exhaustive_decode, greedy_decode, greedy_path, BeamConfig};
use xmodal_core::distill::{combined_loss, grid_entropy, kd_loss, LossWeights};
use xmodal_core::eval::{brute_force_edit_cost, wer};
use xmodal_core::{Alphabet, Matrix, PosteriorGrid};

const LETTERS: [char; 3] = ['a', 'b', 'c'];

/// Logits of `frames` x (`graphemes` + blank).
fn logits(
    frames: std::ops::RangeInclusive<usize>,
    graphemes: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = Matrix<f64>> {
    (frames, graphemes).prop_flat_map(|(t, g)| {
        proptest::collection::vec(-4.0f64..4.0, t * (g + 1)).prop_map(move |v| Matrix::from_vec(t, g + 1, v).unwrap())
    })
}

/// Logits plus a target over the non-blank symbols that fits the frames.
fn instance() -> impl Strategy<Value = (Matrix<f64>, Vec<usize>)> {
    logits(1..=6, 1..=3).prop_flat_map(|m| {
        let graphemes = m.cols() - 1;
        let frames = m.rows();
        proptest::collection::vec(0..graphemes, 0..=4)
            .prop_filter("target must fit", move |t| min_frames(t) <= frames)
            .prop_map(move |t| (m.clone(), t))
    })
}

/// Teacher and student logits of one shape.
fn same_shape() -> impl Strategy<Value = (Matrix<f64>, Matrix<f64>)> {
    (1usize..=8, 2usize..=5).prop_flat_map(|(t, c)| {
        let m = move || {
            proptest::collection::vec(-4.0f64..4.0, t * c).prop_map(move |v| Matrix::from_vec(t, c, v).unwrap())
        };
        (m(), m())
    })
}

fn words() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(
        prop_oneof![Just("x"), Just("y"), Just("z")].prop_map(String::from),
        0..=6,
    )
}

proptest! {
    #[test]
    fn ctc_matches_path_enumeration((m, target) in instance()) {
        let r = ctc_loss(&m, &target).unwrap();
        let grid = PosteriorGrid::from_logits(&m).unwrap();
        let brute = ctc_logprob_bruteforce(&grid, &target).unwrap();
        prop_assert!(r.loss >= 0.0);
        prop_assert!((r.loss + brute).abs() <= 1e-9 * (1.0 + r.loss));
    }

    #[test]
    fn ctc_gradient_rows_sum_to_zero_and_occupancy_to_one((m, target) in instance()) {
        let r = ctc_loss(&m, &target).unwrap();
        for t in 0..m.rows() {
            prop_assert!(r.grad_logits.row(t).iter().sum::<f64>().abs() < 1e-9);
            prop_assert!((r.occupancy.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ctc_ignores_per_frame_logit_shifts((m, target) in instance(), shift in -10.0f64..10.0) {
        let shifted = Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) + shift * (r as f64 + 1.0));
        let a = ctc_loss(&m, &target).unwrap().loss;
        let b = ctc_loss(&shifted, &target).unwrap().loss;
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }

    #[test]
    fn kd_is_bounded_below_by_teacher_entropy((teacher, student) in same_shape()) {
        let grid = PosteriorGrid::from_logits(&teacher).unwrap();
        let entropy = grid_entropy(&grid);
        let (loss, _) = kd_loss(&grid, &student).unwrap();
        prop_assert!(loss >= entropy - 1e-9);
        let (own, grad) = kd_loss(&grid, &teacher).unwrap();
        prop_assert!((own - entropy).abs() < 1e-9);
        prop_assert!(grad.frobenius_norm() < 1e-9);
    }

    #[test]
    fn combined_loss_is_the_weighted_sum((m, target) in instance(), lc in 0.0f64..5.0, lk in 0.0f64..20.0) {
        let teacher = PosteriorGrid::from_logits(&Matrix::from_fn(m.rows(), m.cols(), |r, c| ((r + 2 * c) % 3) as f64)).unwrap();
        let r = combined_loss(&teacher, &m, &target, LossWeights::new(lc, lk).unwrap()).unwrap();
        let ctc = ctc_loss(&m, &target).unwrap().loss;
        let (kd, _) = kd_loss(&teacher, &m).unwrap();
        prop_assert!((r.total - (lc * ctc + lk * kd)).abs() < 1e-9 * (1.0 + r.total));
    }

    #[test]
    fn collapse_inverts_blank_interleaving(labels in proptest::collection::vec(0usize..3, 0..8), stretch in 1usize..3) {
        // each label repeated, separated by blanks
        let path: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, stretch).chain([3])).collect();
        prop_assert_eq!(collapse(&path, 3), labels.clone());
        prop_assert!(min_frames(&labels) <= path.len());
    }

    #[test]
    fn greedy_is_the_collapsed_best_path(m in logits(1..=8, 1..=4)) {
        let grid = PosteriorGrid::from_logits(&m).unwrap();
        prop_assert_eq!(greedy_decode(&grid), collapse(&greedy_path(&grid), grid.blank_id()));
    }

    #[test]
    fn decoders_never_beat_the_exhaustive_optimum(m in logits(1..=5, 1..=3), width in 1usize..16) {
        let grid = PosteriorGrid::from_logits(&m).unwrap();
        let alphabet = Alphabet::new(LETTERS[..grid.num_symbols() - 1].iter().copied()).unwrap();
        let (_, best) = exhaustive_decode(&grid).unwrap();
        let beam = beam_search(&grid, &alphabet, &BeamConfig::with_width(width), None).unwrap();
        prop_assert!(beam.score <= best + 1e-9);
        let greedy = ctc_logprob_bruteforce(&grid, &greedy_decode(&grid)).unwrap();
        prop_assert!(greedy <= best + 1e-9);
    }

    #[test]
    fn wer_counts_are_a_metric(r in words(), h in words()) {
        prop_assume!(!r.is_empty() && !h.is_empty());
        let forward = wer(&r, &h).unwrap();
        prop_assert_eq!(forward.errors(), brute_force_edit_cost(&r, &h));
        prop_assert_eq!(forward.errors(), wer(&h, &r).unwrap().errors());
        prop_assert!(forward.errors() <= r.len().max(h.len()));
        prop_assert_eq!(wer(&r, &r).unwrap().errors(), 0);
    }
}
