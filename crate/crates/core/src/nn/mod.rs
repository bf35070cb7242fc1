//! Shallow softmax classifiers trained from scratch.
//!
//! One model type covers the fusion policy networks (linear or one hidden
//! layer), the base classifier used for out-of-fold noise detection and the
//! feature-fusion head.

mod checkpoint;
mod gradcheck;
mod network;
mod optim;
mod train;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint};
pub use gradcheck::{finite_diff_check, GradCheckReport, RELATIVE_FLOOR};
pub use network::{softmax_in_place, Activation, Differentiable, LayerView, Network, NetworkLayout};
pub use optim::{sgd_step, AdamState, OptimizerKind};
pub use train::{train, EpochRecord, LabeledData, TrainConfig, TrainedModel};

pub(crate) use network::log_sum_exp;

#[cfg(test)]
pub(crate) mod testutil {
    use rand::Rng as _;

    use crate::matrix::Matrix;
    use crate::rng;

    /// Two classes split by the line x0 + x1 = 0 with a gap of width `margin`.
    pub fn separable(n: usize, margin: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = rng::seeded(seed);
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        while rows.len() < n {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let signed = (x[0] + x[1]) / 2f64.sqrt();
            if signed.abs() < margin / 2.0 {
                continue;
            }
            labels.push(usize::from(signed > 0.0));
            rows.push(x);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    pub fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = rng::seeded(seed);
        let data: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (Matrix::from_vec(n, dim, data).unwrap(), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::{random_batch, separable};
    use super::*;
    use crate::error::Error;
    use crate::matrix::Matrix;
    use crate::metrics;

    #[test]
    fn init_is_seeded_with_zero_bias_and_glorot_bounds() {
        let layout = NetworkLayout::with_hidden(4, Some(6), 3);
        let a = Network::init(layout, 11).unwrap();
        assert_eq!(a, Network::init(layout, 11).unwrap());
        assert_ne!(a, Network::init(layout, 12).unwrap());
        let layers = a.layers();
        assert_eq!((layers[0].rows, layers[0].cols), (6, 4));
        assert_eq!((layers[1].rows, layers[1].cols), (3, 6));
        for l in &layers {
            assert!(l.bias.iter().all(|&b| b == 0.0));
            let limit = (6.0 / (l.rows + l.cols) as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= limit));
        }
        assert!(Network::init(NetworkLayout::with_hidden(4, Some(0), 3), 0).is_err());
    }

    #[test]
    fn zero_network_is_uniform() {
        let net = Network::from_params(NetworkLayout::linear(3, 4), vec![0.0; 16], 0).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 5.0], [0.0, 0.0, 0.0]]).unwrap();
        let p = net.forward(&x).unwrap();
        for i in 0..2 {
            assert_eq!(p.row(i), &[0.25; 4]);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // Identity weights turn the input into the logits [0, ln 3].
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let net = Network::from_params(NetworkLayout::linear(2, 2), params, 0).unwrap();
        let x = Matrix::from_rows(&[[0.0, 3f64.ln()]]).unwrap();
        let p = net.forward(&x).unwrap();
        assert!((p.row(0)[0] - 0.25).abs() < 1e-15);
        assert!((p.row(0)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn huge_inputs_stay_finite() {
        let net = Network::init(NetworkLayout::two_layer(3, 5), 3).unwrap();
        let x = Matrix::from_rows(&[[1e300, 0.0, -1.0], [0.0, -1e300, 1e6]]).unwrap();
        let p = net.forward(&x).unwrap();
        for i in 0..2 {
            assert!(p.row(i).iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = Network::init(NetworkLayout::linear(3, 2), 0).unwrap();
        let wrong = Matrix::zeros(1, 2);
        assert!(matches!(net.forward(&wrong), Err(Error::Dimension(_))));
        let nan = Matrix::from_rows(&[[0.0, f64::NAN, 1.0]]).unwrap();
        assert!(matches!(net.forward(&nan), Err(Error::NonFinite(_))));
        let x = Matrix::zeros(1, 3);
        assert!(net.loss_and_grad(&x, &[2]).is_err());
    }

    #[test]
    fn uniform_loss_is_log_c() {
        let net = Network::from_params(NetworkLayout::linear(5, 27), vec![0.0; 27 * 6], 0).unwrap();
        let (x, labels) = random_batch(10, 5, 27, 1);
        let (loss, _) = net.loss_and_grad(&x, &labels).unwrap();
        assert!((loss - 27f64.ln()).abs() < 1e-12);
        assert!((loss - 3.295_837).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_predictions_have_vanishing_loss() {
        let mut params = vec![0.0; 6];
        for scale in [10.0, 100.0, 1000.0] {
            params[0] = scale;
            params[3] = scale;
            let net = Network::from_params(NetworkLayout::linear(2, 2), params.clone(), 0).unwrap();
            let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
            let loss = net.loss(&x, &[0, 1]).unwrap();
            assert!(loss < 1e-4 * (10.0 / scale) + 1e-300, "{loss}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            for hidden in [None, Some(6)] {
                let net = Network::init(NetworkLayout::with_hidden(5, hidden, 3), seed).unwrap();
                let (x, y) = random_batch(8, 5, 3, seed + 100);
                let r = finite_diff_check(&net, &x, &y, 1e-5).unwrap();
                assert!(r.max_rel_error < 1e-5, "seed {seed} {hidden:?}: {r:?}");
            }
        }
    }

    #[test]
    fn symmetric_point_has_zero_gradient() {
        // Two copies of one input with opposite labels cancel exactly.
        let net = Network::from_params(NetworkLayout::linear(3, 2), vec![0.0; 8], 0).unwrap();
        let x = Matrix::from_rows(&[[0.3, -1.2, 2.0], [0.3, -1.2, 2.0]]).unwrap();
        let (_, g) = net.loss_and_grad(&x, &[0, 1]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let r = finite_diff_check(&net, &x, &[0, 1], 1e-5).unwrap();
        assert!(r.max_abs_error < 1e-7, "{r:?}");
    }

    #[test]
    fn finite_difference_error_shrinks_with_step() {
        let net = Network::init(NetworkLayout::with_hidden(5, Some(6), 3), 9).unwrap();
        let (x, y) = random_batch(8, 5, 3, 9);
        let coarse = finite_diff_check(&net, &x, &y, 1e-2).unwrap();
        let fine = finite_diff_check(&net, &x, &y, 1e-5).unwrap();
        assert!(coarse.max_abs_error > fine.max_abs_error, "{coarse:?} vs {fine:?}");
    }

    #[test]
    fn single_epoch_keeps_that_epoch() {
        let (x, y) = separable(50, 1.0, 1);
        let data = LabeledData::new(&x, &y).unwrap();
        let config = TrainConfig { epochs: 1, ..Default::default() };
        let net = Network::init(NetworkLayout::linear(2, 2), 0).unwrap();
        let trained = train(net.clone(), data, data, &config).unwrap();
        assert_eq!(trained.best_epoch, 1);
        assert_eq!(trained.history.len(), 1);

        // Replaying one epoch by hand gives the same weights.
        let mut manual = net;
        let mut adam = AdamState::new(manual.params().len(), 0.9, 0.999, 1e-8);
        let mut order: Vec<usize> = (0..50).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut crate::rng::seeded(config.shuffle_seed));
        for batch in order.chunks(64) {
            let xb = x.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let (_, g) = manual.loss_and_grad(&xb, &yb).unwrap();
            adam.step(manual.params_mut(), &g, 0.01).unwrap();
        }
        assert_eq!(trained.best_network, manual);
    }

    #[test]
    fn separable_toy_reaches_perfect_validation() {
        let (x, y) = separable(200, 1.0, 2);
        let (vx, vy) = separable(200, 1.0, 3);
        let net = Network::init(NetworkLayout::linear(2, 2), 4).unwrap();
        let trained = train(
            net,
            LabeledData::new(&x, &y).unwrap(),
            LabeledData::new(&vx, &vy).unwrap(),
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(trained.best_val_score, 1.0);
        assert!(trained.best_epoch <= 40);
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_is_max() {
        let (x, y) = random_batch(150, 4, 3, 5);
        let (vx, vy) = random_batch(60, 4, 3, 6);
        let run = || {
            let net = Network::init(NetworkLayout::two_layer(4, 3), 8).unwrap();
            let config = TrainConfig { epochs: 15, batch_size: 16, shuffle_seed: 3, ..Default::default() };
            train(net, LabeledData::new(&x, &y).unwrap(), LabeledData::new(&vx, &vy).unwrap(), &config).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let max = a.history.iter().map(|h| h.val_macro_f1).fold(f64::MIN, f64::max);
        assert_eq!(a.best_val_score, max);
        let first = a.history.iter().find(|h| h.val_macro_f1 == max).unwrap();
        assert_eq!(a.best_epoch, first.epoch);
        let rescored = metrics::macro_f1(&a.best_network.predict(&vx).unwrap(), &vy, 3).unwrap();
        assert_eq!(rescored, a.best_val_score);
    }

    #[test]
    fn small_lr_sgd_descends_on_convex_problem() {
        let (x, y) = random_batch(40, 4, 3, 12);
        let mut net = Network::init(NetworkLayout::linear(4, 3), 1).unwrap();
        let mut last = net.loss(&x, &y).unwrap();
        for _ in 0..5 {
            let (_, g) = net.loss_and_grad(&x, &y).unwrap();
            sgd_step(net.params_mut(), &g, 1e-2).unwrap();
            let now = net.loss(&x, &y).unwrap();
            assert!(now <= last);
            last = now;
        }
    }

    #[test]
    fn train_rejects_empty_sets() {
        let x = Matrix::zeros(0, 2);
        let (vx, vy) = separable(4, 1.0, 0);
        let net = Network::init(NetworkLayout::linear(2, 2), 0).unwrap();
        let r = train(net, LabeledData::new(&x, &[]).unwrap(), LabeledData::new(&vx, &vy).unwrap(), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (x, y) = random_batch(30, 3, 2, 1);
        let net = Network::init(NetworkLayout::two_layer(3, 2), 2).unwrap();
        let config = TrainConfig { epochs: 3, ..Default::default() };
        let d = LabeledData::new(&x, &y).unwrap();
        let trained = train(net, d, d, &config).unwrap();
        let text = checkpoint_to_string(&trained).unwrap();
        let back = checkpoint_from_str(&text).unwrap();
        assert_eq!(back, trained);
        for (a, b) in back.best_network.params().iter().zip(trained.best_network.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(checkpoint_to_string(&back).unwrap(), text);
    }
}
