//! Local training and evaluation. Minibatches are drawn with replacement
//! from the training split using the caller's stream, so a fixed stream
//! fixes the whole trajectory.

use rand::Rng;

use super::{Dataset, LearnError, LossKind, ModelSpec, ParamVector, Split, TrainerConfig};

/// Runs `cfg.local_steps` SGD steps from `start`, returning the final
/// iterate. `prox` adds `lambda * (theta - anchor)` to every batch gradient.
fn sgd_loop<R: Rng>(
    spec: &ModelSpec,
    start: &ParamVector,
    data: &Dataset,
    cfg: &TrainerConfig,
    prox: Option<(&ParamVector, f64)>,
    rng: &mut R,
) -> Result<ParamVector, LearnError> {
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(LearnError::Dataset("training split is empty".into()));
    }
    let mut theta = start.clone();
    let mut grad = start.zeros_like();
    for step in 0..cfg.local_steps {
        grad.scale(0.0);
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let row = train[rng.random_range(0..train.len())];
            loss_sum +=
                spec.sample_loss_grad(&theta, data.row(row), data.label(row), Some(&mut grad));
        }
        grad.scale(1.0 / cfg.batch_size as f64);
        if let Some((anchor, lambda)) = prox {
            let pull = theta.sub(anchor)?;
            grad.add_scaled(&pull, lambda)?;
        }
        if !loss_sum.is_finite() || !grad.all_finite() {
            return Err(LearnError::Numerical { step });
        }
        theta.add_scaled(&grad, -cfg.learning_rate)?;
    }
    Ok(theta)
}

/// Plain local SGD; returns the parameter delta `theta_Q - params`.
pub fn local_train_sgd<R: Rng>(
    params: &ParamVector,
    data: &Dataset,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<ParamVector, LearnError> {
    cfg.validate()?;
    let spec = ModelSpec::for_data(cfg.model, cfg.loss, data)?;
    spec.check_shape(params)?;
    let theta = sgd_loop(&spec, params, data, cfg, None, rng)?;
    theta.sub(params)
}

/// Personalized training: a plain SGD leg from the global parameters
/// produces the shared delta, then the personal parameters take the same
/// number of steps with an added pull of strength `ditto_lambda` toward the
/// global parameters. Returns `(shared_delta, new_local)`.
pub fn local_train_ditto<R: Rng>(
    global: &ParamVector,
    local: &ParamVector,
    data: &Dataset,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<(ParamVector, ParamVector), LearnError> {
    cfg.validate()?;
    let lambda = cfg
        .ditto_lambda
        .ok_or_else(|| LearnError::Config("ditto_lambda is not set".into()))?;
    let spec = ModelSpec::for_data(cfg.model, cfg.loss, data)?;
    spec.check_shape(global)?;
    spec.check_shape(local)?;
    let theta = sgd_loop(&spec, global, data, cfg, None, rng)?;
    let shared_delta = theta.sub(global)?;
    let new_local = sgd_loop(&spec, local, data, cfg, Some((global, lambda)), rng)?;
    Ok((shared_delta, new_local))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    /// Mean per-instance loss over the evaluated rows.
    pub loss: f64,
    /// Fraction of correct argmax predictions; `None` under squared error.
    pub accuracy: Option<f64>,
    /// Number of rows evaluated.
    pub count: usize,
}

/// Evaluates over explicit row indices.
pub fn evaluate_indices(
    params: &ParamVector,
    data: &Dataset,
    loss: LossKind,
    indices: &[usize],
) -> Result<EvalOutcome, LearnError> {
    if indices.is_empty() {
        return Err(LearnError::EmptyEvaluation);
    }
    let spec = ModelSpec::from_params(params, loss, data)?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for &i in indices {
        loss_sum += spec.sample_loss(params, data.row(i), data.label(i));
        if let Some(pred) = spec.predict_class(params, data.row(i)) {
            if pred == data.label(i) as usize {
                correct += 1;
            }
        }
    }
    let n = indices.len();
    let accuracy = match loss {
        LossKind::CrossEntropy => Some(correct as f64 / n as f64),
        LossKind::SquaredError => None,
    };
    Ok(EvalOutcome {
        loss: loss_sum / n as f64,
        accuracy,
        count: n,
    })
}

/// Evaluates over one of the dataset's splits.
pub fn evaluate(
    params: &ParamVector,
    data: &Dataset,
    loss: LossKind,
    which: Split,
) -> Result<EvalOutcome, LearnError> {
    evaluate_indices(params, data, loss, data.split(which))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::super::ModelKind;
    use super::*;
    use crate::simnet::SeededRng;

    fn quad_cfg(local_steps: u32, learning_rate: f64) -> TrainerConfig {
        TrainerConfig {
            local_steps,
            learning_rate,
            batch_size: 1,
            loss: LossKind::SquaredError,
            model: ModelKind::Quadratic,
            share_list: BTreeSet::new(),
            ditto_lambda: None,
            dp_sigma: None,
        }
    }

    fn one_point(x: f64, y: f64) -> Dataset {
        Dataset::unsplit(vec![vec![x]], vec![y], 0).unwrap()
    }

    fn w(vals: &[f64]) -> ParamVector {
        ParamVector::new(vec![("w".into(), vals.to_vec())]).unwrap()
    }

    #[test]
    fn sgd_single_step_halves_the_gap() {
        // f(t) = (t - 1)^2 / 2 from t = 0, eta = 0.5: one step lands at 0.5.
        let seeds = SeededRng::new(1);
        let delta = local_train_sgd(
            &w(&[0.0]),
            &one_point(1.0, 1.0),
            &quad_cfg(1, 0.5),
            &mut seeds.stream("train", 0, 0),
        )
        .unwrap();
        assert_eq!(delta.group("w").unwrap(), &[0.5]);
    }

    #[test]
    fn sgd_three_steps_follow_geometric_decay() {
        // Iterates 0.5, 0.75, 0.875: gap shrinks by (1 - eta) each step.
        let seeds = SeededRng::new(1);
        let delta = local_train_sgd(
            &w(&[0.0]),
            &one_point(1.0, 1.0),
            &quad_cfg(3, 0.5),
            &mut seeds.stream("train", 0, 0),
        )
        .unwrap();
        assert_eq!(delta.group("w").unwrap(), &[0.875]);
    }

    #[test]
    fn sgd_leaves_input_params_untouched() {
        let params = w(&[0.25]);
        let before = params.clone();
        let seeds = SeededRng::new(2);
        local_train_sgd(
            &params,
            &one_point(1.0, 1.0),
            &quad_cfg(2, 0.5),
            &mut seeds.stream("train", 0, 0),
        )
        .unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_is_deterministic_per_stream() {
        let seeds = SeededRng::new(3);
        let features: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0, 1.0]).collect();
        let labels: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let data = Dataset::unsplit(features, labels, 2).unwrap();
        let cfg = TrainerConfig {
            local_steps: 5,
            learning_rate: 0.1,
            batch_size: 3,
            loss: LossKind::CrossEntropy,
            model: ModelKind::Logistic,
            share_list: BTreeSet::new(),
            ditto_lambda: None,
            dp_sigma: None,
        };
        let spec = ModelSpec::for_data(cfg.model, cfg.loss, &data).unwrap();
        let params = ParamVector::zeros(&spec.group_shapes()).unwrap();
        let a = local_train_sgd(&params, &data, &cfg, &mut seeds.stream("t", 7, 0)).unwrap();
        let b = local_train_sgd(&params, &data, &cfg, &mut seeds.stream("t", 7, 0)).unwrap();
        let c = local_train_sgd(&params, &data, &cfg, &mut seeds.stream("t", 8, 0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sgd_reports_the_step_that_went_non_finite() {
        let seeds = SeededRng::new(4);
        // Step 0: loss overflows immediately.
        let err = local_train_sgd(
            &w(&[1.0]),
            &one_point(1e200, 0.0),
            &quad_cfg(3, 0.5),
            &mut seeds.stream("t", 0, 0),
        )
        .unwrap_err();
        assert!(matches!(err, LearnError::Numerical { step: 0 }), "{err:?}");

        // Step 0 stays finite, the overflow shows up at step 1.
        let err = local_train_sgd(
            &w(&[1e-200]),
            &one_point(1e200, 0.0),
            &quad_cfg(3, 0.5),
            &mut seeds.stream("t", 0, 0),
        )
        .unwrap_err();
        assert!(matches!(err, LearnError::Numerical { step: 1 }), "{err:?}");
    }

    #[test]
    fn ditto_with_zero_lambda_matches_plain_sgd_from_local() {
        let data = one_point(2.0, 1.0);
        let mut cfg = quad_cfg(4, 0.1);
        cfg.ditto_lambda = Some(0.0);
        let global = w(&[1.0]);
        let local = w(&[0.2]);
        let seeds = SeededRng::new(5);
        let (_, new_local) =
            local_train_ditto(&global, &local, &data, &cfg, &mut seeds.stream("d", 0, 0)).unwrap();
        // One data point, so batch draws cannot change the trajectory.
        let plain = local_train_sgd(&local, &data, &cfg, &mut seeds.stream("d", 0, 0)).unwrap();
        let mut expected = local.clone();
        expected.add_scaled(&plain, 1.0).unwrap();
        assert_eq!(new_local, expected);
    }

    #[test]
    fn ditto_pure_prox_step_pulls_toward_global() {
        // x = 0 kills the data gradient, leaving v <- v - eta*lambda*(v - g).
        let data = one_point(0.0, 0.0);
        let mut cfg = quad_cfg(1, 0.1);
        cfg.ditto_lambda = Some(2.0);
        let global = w(&[1.0]);
        let local = w(&[0.2]);
        let seeds = SeededRng::new(6);
        let (shared_delta, new_local) =
            local_train_ditto(&global, &local, &data, &cfg, &mut seeds.stream("d", 0, 0)).unwrap();
        assert_eq!(shared_delta.group("w").unwrap(), &[0.0]);
        let expected = 0.2 - 0.1 * (2.0 * (0.2 - 1.0));
        assert_eq!(new_local.group("w").unwrap(), &[expected]);
    }

    #[test]
    fn ditto_single_step_matches_hand_derivation() {
        // Shared leg: pred 2, grad 2, theta 1 - 0.2 = 0.8, delta -0.2.
        // Local leg: pred 0.4, data grad -1.2, prox -0.8, v 0.2 + 0.2 = 0.4.
        let data = one_point(2.0, 1.0);
        let mut cfg = quad_cfg(1, 0.1);
        cfg.ditto_lambda = Some(1.0);
        let global = w(&[1.0]);
        let local = w(&[0.2]);
        let seeds = SeededRng::new(7);
        let (shared_delta, new_local) =
            local_train_ditto(&global, &local, &data, &cfg, &mut seeds.stream("d", 0, 0)).unwrap();
        assert!((shared_delta.group("w").unwrap()[0] - (-0.2)).abs() < 1e-12);
        assert!((new_local.group("w").unwrap()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ditto_distance_to_global_shrinks_as_lambda_grows() {
        let seeds = SeededRng::new(8);
        let mut gen = seeds.stream("data", 0, 0);
        let features: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| gen.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<f64> = (0..8).map(|_| gen.random_range(-1.0..1.0)).collect();
        let data = Dataset::unsplit(features, labels, 0).unwrap();
        let global = w(&[0.5, -0.5, 0.25]);
        let local = w(&[0.0, 0.0, 0.0]);

        let mut cfg = quad_cfg(5, 0.1);
        cfg.batch_size = 4;
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 0.1, 1.0, 10.0] {
            cfg.ditto_lambda = Some(lambda);
            // Identical stream per lambda so batch draws match exactly.
            let (_, new_local) =
                local_train_ditto(&global, &local, &data, &cfg, &mut seeds.stream("d", 1, 0))
                    .unwrap();
            let dist = new_local.l2_distance_sq(&global).unwrap().sqrt();
            assert!(
                dist <= prev + 1e-9,
                "distance grew at lambda {lambda}: {dist} > {prev}"
            );
            prev = dist;
        }
    }

    #[test]
    fn minibatch_gradient_is_unbiased() {
        // Mean of 1e4 size-4 minibatch gradients vs the full-batch gradient.
        // Entry standard error is about 0.005 here, so 0.02 is a 4-sigma band.
        let seeds = SeededRng::new(9);
        let mut gen = seeds.stream("data", 0, 0);
        let features: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..2).map(|_| gen.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<f64> = (0..16).map(|_| gen.random_range(-1.0..1.0)).collect();
        let data = Dataset::unsplit(features, labels, 0).unwrap();
        let theta = w(&[0.3, -0.7]);
        let spec =
            ModelSpec::for_data(ModelKind::Quadratic, LossKind::SquaredError, &data).unwrap();

        let mut full = theta.zeros_like();
        for i in 0..data.len() {
            spec.sample_loss_grad(&theta, data.row(i), data.label(i), Some(&mut full));
        }
        full.scale(1.0 / data.len() as f64);

        let mut est = theta.zeros_like();
        let mut rng = seeds.stream("mb", 0, 0);
        let draws = 10_000usize;
        let batch = 4usize;
        for _ in 0..draws {
            for _ in 0..batch {
                let i = rng.random_range(0..data.len());
                spec.sample_loss_grad(&theta, data.row(i), data.label(i), Some(&mut est));
            }
        }
        est.scale(1.0 / (draws * batch) as f64);

        for (e, f) in est.group("w").unwrap().iter().zip(full.group("w").unwrap()) {
            assert!((e - f).abs() < 0.02, "estimate {e} vs full {f}");
        }
    }

    #[test]
    fn evaluate_squared_error_by_hand() {
        // preds 2, 4, 6 against 1, 2, 2: losses 0.5, 2, 8, mean 3.5.
        let data = Dataset::unsplit(
            vec![vec![1.0], vec![2.0], vec![3.0]],
            vec![1.0, 2.0, 2.0],
            0,
        )
        .unwrap();
        let out = evaluate(&w(&[2.0]), &data, LossKind::SquaredError, Split::Train).unwrap();
        assert_eq!(out.loss, 3.5);
        assert_eq!(out.accuracy, None);
        assert_eq!(out.count, 3);
    }

    #[test]
    fn evaluate_zero_logistic_on_balanced_binary() {
        let data = Dataset::unsplit(
            vec![
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![0.5, 0.5],
            ],
            vec![0.0, 1.0, 0.0, 1.0],
            2,
        )
        .unwrap();
        let spec = ModelSpec::new(ModelKind::Logistic, LossKind::CrossEntropy, 2, 2).unwrap();
        let params = ParamVector::zeros(&spec.group_shapes()).unwrap();
        let out = evaluate(&params, &data, LossKind::CrossEntropy, Split::Train).unwrap();
        assert!((out.loss - (2.0f64).ln()).abs() < 1e-15);
        // Ties predict class 0, which is half the rows.
        assert_eq!(out.accuracy, Some(0.5));
    }

    #[test]
    fn evaluate_separable_data_with_fitted_weights() {
        // Large-margin weights on linearly separable data classify perfectly.
        let data = Dataset::unsplit(
            vec![
                vec![2.0, 0.1],
                vec![1.5, -0.2],
                vec![0.1, 1.8],
                vec![-0.3, 2.2],
            ],
            vec![0.0, 0.0, 1.0, 1.0],
            2,
        )
        .unwrap();
        let params = ParamVector::new(vec![
            ("w".into(), vec![10.0, 0.0, 0.0, 10.0]),
            ("b".into(), vec![0.0, 0.0]),
        ])
        .unwrap();
        let out = evaluate(&params, &data, LossKind::CrossEntropy, Split::Train).unwrap();
        assert_eq!(out.accuracy, Some(1.0));
        assert!(out.loss < 0.2);
    }

    #[test]
    fn evaluate_empty_split_is_an_error() {
        let data = one_point(1.0, 1.0);
        let err = evaluate(&w(&[0.0]), &data, LossKind::SquaredError, Split::Test).unwrap_err();
        assert!(matches!(err, LearnError::EmptyEvaluation));
    }

    #[test]
    fn training_on_empty_split_is_an_error() {
        let splits = super::super::Splits {
            train: vec![],
            validation: vec![0],
            test: vec![],
        };
        let data = Dataset::new(vec![vec![1.0]], vec![1.0], 0, splits).unwrap();
        let seeds = SeededRng::new(10);
        let err = local_train_sgd(
            &w(&[0.0]),
            &data,
            &quad_cfg(1, 0.5),
            &mut seeds.stream("t", 0, 0),
        )
        .unwrap_err();
        assert!(matches!(err, LearnError::Dataset(_)));
    }
}
