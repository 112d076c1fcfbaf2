use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::matrix::Matrix;
use crate::numeric::relative_error;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn tiny_with_dropout() -> ModelConfig {
    let mut c = ModelConfig::tiny(3, 4);
    c.blocks[0].dropout = 0.25;
    c.dilated.dropout = 0.1;
    c
}

fn objective(m: &ModelParams<f64>, xs: &[Matrix<f64>], gs: &[Matrix<f64>], mode: Mode) -> f64 {
    let refs: Vec<&Matrix<f64>> = xs.iter().collect();
    let (out, _) = m.forward_batch(&refs, mode).unwrap();
    out.iter()
        .zip(gs)
        .map(|(o, g)| o.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn setup(seed: u64) -> (ModelParams<f64>, Vec<Matrix<f64>>, Vec<Matrix<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelParams::<f64>::init(&tiny_with_dropout(), seed).unwrap();
    let xs = vec![random(&mut rng, 5, 3), random(&mut rng, 3, 3)];
    let gs = xs.iter().map(|x| random(&mut rng, 2 * x.rows(), 4)).collect();
    (model, xs, gs)
}

#[test]
fn output_has_twice_the_input_frames() {
    let m = ModelParams::<f32>::init(&ModelConfig::tiny(6, 29), 1).unwrap();
    for frames in [1, 2, 7, 30] {
        let x = Matrix::filled(frames, 6, 0.5f32);
        let (y, _) = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), (2 * frames, 29));
        assert!(y.all_finite());
    }
    let bad = Matrix::zeros(4, 5);
    assert!(matches!(m.forward(&bad, Mode::Eval), Err(Error::ShapeMismatch(_))));
}

#[test]
fn zero_weights_give_identical_frames() {
    let mut m = ModelParams::<f64>::init(&ModelConfig::tiny(3, 5), 2).unwrap();
    m.weights_mut().iter_mut().for_each(|w| *w = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (y, _) = m
        .forward(&random(&mut rng, 6, 3), Mode::Train { dropout_seed: 0 })
        .unwrap();
    for t in 1..y.rows() {
        assert_eq!(y.row(t), y.row(0));
    }
}

#[test]
fn forward_and_backward_are_deterministic_across_thread_counts() {
    let (m, xs, gs) = setup(4);
    let refs: Vec<&Matrix<f64>> = xs.iter().collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (y, cache) = m.forward_batch(&refs, Mode::Train { dropout_seed: 9 }).unwrap();
            let (g, dx) = m.backward(&cache, &gs).unwrap();
            (y, g, dx)
        })
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a, b);
    let again = ModelParams::<f64>::init(&tiny_with_dropout(), 4).unwrap();
    assert_eq!(again, m);
}

#[test]
fn dropout_masks_depend_on_seed_only_in_training() {
    let (m, xs, _) = setup(5);
    let x = &xs[0];
    let y = |mode| m.forward(x, mode).unwrap().0;
    assert_eq!(y(Mode::Train { dropout_seed: 1 }), y(Mode::Train { dropout_seed: 1 }));
    assert_ne!(y(Mode::Train { dropout_seed: 1 }), y(Mode::Train { dropout_seed: 2 }));
    assert_eq!(y(Mode::Eval), y(Mode::Eval));
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let (m, xs, gs) = setup(6);
    let refs: Vec<&Matrix<f64>> = xs.iter().collect();
    let (_, cache) = m.forward_batch(&refs, Mode::Train { dropout_seed: 0 }).unwrap();
    let zeros: Vec<_> = gs.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
    let (g, dx) = m.backward(&cache, &zeros).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    assert!(dx.iter().all(|d| d.as_slice().iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_is_linear_in_upstream_gradient() {
    let (m, xs, gs) = setup(7);
    let refs: Vec<&Matrix<f64>> = xs.iter().collect();
    let (_, cache) = m.forward_batch(&refs, Mode::Train { dropout_seed: 0 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let hs: Vec<_> = gs.iter().map(|g| random(&mut rng, g.rows(), g.cols())).collect();
    let combo: Vec<_> = gs
        .iter()
        .zip(&hs)
        .map(|(g, h)| {
            let mut c = g.scale(2.0);
            c.add_scaled(h, -3.0).unwrap();
            c
        })
        .collect();
    let (ga, _) = m.backward(&cache, &gs).unwrap();
    let (gb, _) = m.backward(&cache, &hs).unwrap();
    let (gc, _) = m.backward(&cache, &combo).unwrap();
    for i in 0..ga.len() {
        assert!((gc[i] - (2.0 * ga[i] - 3.0 * gb[i])).abs() < 1e-10);
    }
}

#[test]
fn backward_rejects_mismatched_gradients() {
    let (m, xs, gs) = setup(8);
    let refs: Vec<&Matrix<f64>> = xs.iter().collect();
    let (_, cache) = m.forward_batch(&refs, Mode::Eval).unwrap();
    assert!(matches!(m.backward(&cache, &gs[..1]), Err(Error::StaleCache(_))));
    let wrong = vec![gs[0].clone(), Matrix::zeros(5, 4)];
    assert!(matches!(m.backward(&cache, &wrong), Err(Error::StaleCache(_))));
    let mut m2 = m.clone();
    assert!(matches!(m2.update_running_stats(&cache), Err(Error::StaleCache(_))));
}

fn central_differences(
    m: &ModelParams<f64>,
    xs: &[Matrix<f64>],
    gs: &[Matrix<f64>],
    mode: Mode,
) -> (Vec<f64>, Vec<f64>) {
    let eps = 1e-6;
    let mut probe = m.clone();
    let mut gw = Vec::with_capacity(m.num_params());
    for i in 0..m.num_params() {
        let orig = probe.weights()[i];
        probe.weights_mut()[i] = orig + eps;
        let up = objective(&probe, xs, gs, mode);
        probe.weights_mut()[i] = orig - eps;
        let down = objective(&probe, xs, gs, mode);
        probe.weights_mut()[i] = orig;
        gw.push((up - down) / (2.0 * eps));
    }
    let mut gx = Vec::new();
    let mut xp = xs.to_vec();
    for n in 0..xs.len() {
        for i in 0..xs[n].as_slice().len() {
            let orig = xp[n].as_slice()[i];
            xp[n].as_mut_slice()[i] = orig + eps;
            let up = objective(m, &xp, gs, mode);
            xp[n].as_mut_slice()[i] = orig - eps;
            let down = objective(m, &xp, gs, mode);
            xp[n].as_mut_slice()[i] = orig;
            gx.push((up - down) / (2.0 * eps));
        }
    }
    (gw, gx)
}

#[test]
fn gradients_match_finite_differences_f64() {
    for seed in [11, 12, 13] {
        let (m, xs, gs) = setup(seed);
        for mode in [Mode::Train { dropout_seed: seed }, Mode::Eval] {
            let refs: Vec<&Matrix<f64>> = xs.iter().collect();
            let (_, cache) = m.forward_batch(&refs, mode).unwrap();
            let (gw, dx) = m.backward(&cache, &gs).unwrap();
            let gx: Vec<f64> = dx.iter().flat_map(|d| d.as_slice().to_vec()).collect();
            let (nw, nx) = central_differences(&m, &xs, &gs, mode);
            let ew = relative_error(&gw, &nw, 1e-8);
            let ex = relative_error(&gx, &nx, 1e-8);
            assert!(ew <= 1e-6, "seed {seed} {mode:?}: weight rel err {ew}");
            assert!(ex <= 1e-6, "seed {seed} {mode:?}: input rel err {ex}");
        }
    }
}

#[test]
fn f32_gradients_match_f64_reference() {
    for seed in [21, 22, 23] {
        let (m, xs, gs) = setup(seed);
        let m32 = m.cast::<f32>();
        let m64 = m32.cast::<f64>();
        let mode = Mode::Train { dropout_seed: seed };
        let xs32: Vec<Matrix<f32>> = xs.iter().map(Matrix::cast).collect();
        let gs32: Vec<Matrix<f32>> = gs.iter().map(Matrix::cast).collect();
        let refs: Vec<&Matrix<f32>> = xs32.iter().collect();
        let (_, cache) = m32.forward_batch(&refs, mode).unwrap();
        let (g32, _) = m32.backward(&cache, &gs32).unwrap();
        let g32: Vec<f64> = g32.iter().map(|&v| v as f64).collect();
        let xs64: Vec<Matrix<f64>> = xs32.iter().map(Matrix::cast).collect();
        let gs64: Vec<Matrix<f64>> = gs32.iter().map(Matrix::cast).collect();
        let (nw, _) = central_differences(&m64, &xs64, &gs64, mode);
        let err = relative_error(&g32, &nw, 1e-6);
        assert!(err <= 1e-4, "seed {seed}: rel err {err}");
    }
}

#[test]
fn running_statistics_follow_exponential_average() {
    let (m, xs, _) = setup(30);
    let refs: Vec<&Matrix<f64>> = xs.iter().collect();
    let (_, cache) = m.forward_batch(&refs, Mode::Train { dropout_seed: 0 }).unwrap();
    let r0 = m.running_stats().to_vec();
    let mut once = m.clone();
    once.update_running_stats(&cache).unwrap();
    let mut twice = once.clone();
    twice.update_running_stats(&cache).unwrap();
    // With a fixed batch b: r1 = 0.9 r0 + 0.1 b and r2 = 0.81 r0 + 0.19 b.
    for i in 0..r0.len() {
        let b = (once.running_stats()[i] - 0.9 * r0[i]) / 0.1;
        let expect = 0.81 * r0[i] + 0.19 * b;
        assert!((twice.running_stats()[i] - expect).abs() < 1e-12);
    }
    assert_eq!(once.weights(), m.weights());
}

#[test]
fn eval_matches_train_once_running_stats_converge() {
    let mut m = ModelParams::<f64>::init(&ModelConfig::tiny(3, 4), 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&mut rng, 6, 3);
    let (train_out, _) = m.forward(&x, Mode::Train { dropout_seed: 0 }).unwrap();
    // Each layer's batch statistics depend only on earlier layers, which do
    // not change, so repeated updates converge geometrically.
    for _ in 0..400 {
        let (_, cache) = m.forward(&x, Mode::Train { dropout_seed: 0 }).unwrap();
        m.update_running_stats(&cache).unwrap();
    }
    let (eval_out, _) = m.forward(&x, Mode::Eval).unwrap();
    assert!(train_out.max_abs_diff(&eval_out).unwrap() < 1e-6);
}

#[test]
fn eval_batches_match_single_sequences() {
    let (m, xs, _) = setup(32);
    let refs: Vec<&Matrix<f64>> = xs.iter().collect();
    let (batch, _) = m.forward_batch(&refs, Mode::Eval).unwrap();
    for (x, y) in xs.iter().zip(&batch) {
        let (single, _) = m.forward(x, Mode::Eval).unwrap();
        assert_eq!(&single, y);
    }
}

#[test]
fn desk_parameter_count_matches_closed_form() {
    let (d, c) = (40, 29);
    let config = ModelConfig::desk(d, c);
    let m = ModelParams::<f32>::init(&config, 0).unwrap();
    let conv = |k: usize, i: usize, o: usize| k * i * o;
    let norm = |o: usize| 2 * o;
    let mut expect = conv(11, d, 64) + norm(64);
    let mut ch = 64;
    for (k, o) in [(11, 64), (13, 96), (17, 128)] {
        expect += conv(k, ch, o) + conv(k, o, o) + 2 * norm(o);
        if ch != o {
            expect += conv(1, ch, o) + o;
        }
        ch = o;
    }
    expect += conv(29, 128, 160) + norm(160);
    expect += conv(1, 160, 192) + norm(192);
    expect += conv(1, 192, c) + c;
    assert_eq!(m.num_params(), expect);
    let decayed = m.decay_mask().iter().filter(|&&b| b).count();
    assert!(decayed < expect && decayed > expect / 2);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let m = ModelParams::<f32>::init(&tiny_with_dropout(), 40).unwrap();
    let bytes = m.to_bytes();
    assert_eq!(&bytes[..4], b"JLIP");
    assert_eq!(ModelParams::<f32>::from_bytes(&bytes).unwrap(), m);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        ModelParams::<f32>::from_bytes(&bad),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        ModelParams::<f32>::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Format { .. })
    ));
    let mut long = bytes;
    long.push(0);
    assert!(ModelParams::<f32>::from_bytes(&long).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jlip");
    m.save(&path).unwrap();
    assert_eq!(ModelParams::<f32>::load(&path).unwrap(), m);
}
