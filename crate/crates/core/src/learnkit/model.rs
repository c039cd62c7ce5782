//! Model zoo: a linear model under squared error, multinomial logistic
//! regression, and a one-hidden-layer tanh network. Gradients are exact
//! per-sample and accumulate into a caller-supplied `ParamVector`.

use rand::Rng;

use super::{Dataset, LearnError, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Linear predictor `w . x`; pairs with squared error.
    Quadratic,
    /// Multinomial logistic regression; pairs with cross entropy.
    Logistic,
    /// One hidden tanh layer of the given width.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

/// A model kind bound to concrete input dimensions, the single place that
/// knows group names, shapes, and the forward/backward math.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub loss: LossKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(
        kind: ModelKind,
        loss: LossKind,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<Self, LearnError> {
        if input_dim == 0 {
            return Err(LearnError::Config("input_dim must be >= 1".into()));
        }
        match (kind, loss) {
            (ModelKind::Quadratic, LossKind::CrossEntropy) => {
                return Err(LearnError::Config(
                    "quadratic model requires squared error loss".into(),
                ));
            }
            (ModelKind::Logistic, LossKind::SquaredError) => {
                return Err(LearnError::Config(
                    "logistic model requires cross entropy loss".into(),
                ));
            }
            _ => {}
        }
        if loss == LossKind::CrossEntropy && num_classes < 2 {
            return Err(LearnError::Config(
                "cross entropy requires num_classes >= 2".into(),
            ));
        }
        if let ModelKind::Mlp { hidden } = kind {
            if hidden == 0 {
                return Err(LearnError::Config("hidden width must be >= 1".into()));
            }
        }
        Ok(ModelSpec {
            kind,
            loss,
            input_dim,
            num_classes,
        })
    }

    /// Binds a kind/loss pair to a dataset's dimensions.
    pub fn for_data(kind: ModelKind, loss: LossKind, data: &Dataset) -> Result<Self, LearnError> {
        ModelSpec::new(kind, loss, data.dim(), data.num_classes())
    }

    /// Output width: class scores under cross entropy, one value otherwise.
    fn output_dim(&self) -> usize {
        match self.loss {
            LossKind::CrossEntropy => self.num_classes,
            LossKind::SquaredError => 1,
        }
    }

    /// Group names and flat lengths, in canonical order.
    pub fn group_shapes(&self) -> Vec<(String, usize)> {
        let d = self.input_dim;
        match self.kind {
            ModelKind::Quadratic => vec![("w".into(), d)],
            ModelKind::Logistic => vec![
                ("w".into(), self.num_classes * d),
                ("b".into(), self.num_classes),
            ],
            ModelKind::Mlp { hidden } => {
                let out = self.output_dim();
                vec![
                    ("w1".into(), hidden * d),
                    ("b1".into(), hidden),
                    ("w2".into(), out * hidden),
                    ("b2".into(), out),
                ]
            }
        }
    }

    /// Starting parameters. Linear models start at zero; the MLP gets small
    /// uniform weights from the supplied stream so hidden units differ.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamVector {
        let mut params = ParamVector::zeros(&self.group_shapes()).expect("canonical shapes");
        if let ModelKind::Mlp { hidden } = self.kind {
            let bound1 = 1.0 / (self.input_dim as f64).sqrt();
            let bound2 = 1.0 / (hidden as f64).sqrt();
            for x in params.group_mut("w1").expect("w1 exists") {
                *x = rng.random_range(-bound1..bound1);
            }
            for x in params.group_mut("w2").expect("w2 exists") {
                *x = rng.random_range(-bound2..bound2);
            }
        }
        params
    }

    pub fn check_shape(&self, params: &ParamVector) -> Result<(), LearnError> {
        let expected = ParamVector::zeros(&self.group_shapes()).expect("canonical shapes");
        if expected.same_shape(params) {
            Ok(())
        } else {
            Err(LearnError::ShapeMismatch {
                expected: expected.shape_desc(),
                got: params.shape_desc(),
            })
        }
    }

    /// Recovers the model spec from a parameter vector's shapes; used where
    /// only the loss and the data travel with the parameters.
    pub fn from_params(
        params: &ParamVector,
        loss: LossKind,
        data: &Dataset,
    ) -> Result<Self, LearnError> {
        let names: Vec<&str> = params.groups().iter().map(|(n, _)| n.as_str()).collect();
        let kind = match names.as_slice() {
            ["w"] => ModelKind::Quadratic,
            ["w", "b"] => ModelKind::Logistic,
            ["w1", "b1", "w2", "b2"] => ModelKind::Mlp {
                hidden: params.group("b1").expect("b1 exists").len(),
            },
            _ => {
                return Err(LearnError::ShapeMismatch {
                    expected: "w | w b | w1 b1 w2 b2".into(),
                    got: params.shape_desc(),
                })
            }
        };
        let spec = ModelSpec::new(kind, loss, data.dim(), data.num_classes())?;
        spec.check_shape(params)?;
        Ok(spec)
    }

    /// Per-sample loss; adds the sample's gradient into `grad` when given.
    ///
    /// `grad` must share `params`'s shape; callers pass `zeros_like` output.
    pub fn sample_loss_grad(
        &self,
        params: &ParamVector,
        x: &[f64],
        y: f64,
        mut grad: Option<&mut ParamVector>,
    ) -> f64 {
        match self.kind {
            ModelKind::Quadratic => {
                let w = params.group("w").expect("checked shape");
                let pred: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
                let r = pred - y;
                if let Some(g) = grad.as_deref_mut() {
                    let dw = g.group_mut("w").expect("checked shape");
                    for (j, xi) in x.iter().enumerate() {
                        dw[j] += r * xi;
                    }
                }
                0.5 * r * r
            }
            ModelKind::Logistic => {
                let k = self.num_classes;
                let d = self.input_dim;
                let w = params.group("w").expect("checked shape");
                let b = params.group("b").expect("checked shape");
                let mut z = vec![0.0; k];
                for c in 0..k {
                    let row = &w[c * d..(c + 1) * d];
                    z[c] = b[c] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                }
                let (loss, probs) = cross_entropy(&z, y);
                if let Some(g) = grad.as_deref_mut() {
                    let target = y as usize;
                    {
                        let dw = g.group_mut("w").expect("checked shape");
                        for c in 0..k {
                            let gc = probs[c] - if c == target { 1.0 } else { 0.0 };
                            for (j, xi) in x.iter().enumerate() {
                                dw[c * d + j] += gc * xi;
                            }
                        }
                    }
                    let db = g.group_mut("b").expect("checked shape");
                    for c in 0..k {
                        db[c] += probs[c] - if c == target { 1.0 } else { 0.0 };
                    }
                }
                loss
            }
            ModelKind::Mlp { hidden } => {
                let d = self.input_dim;
                let out = self.output_dim();
                let w1 = params.group("w1").expect("checked shape");
                let b1 = params.group("b1").expect("checked shape");
                let w2 = params.group("w2").expect("checked shape");
                let b2 = params.group("b2").expect("checked shape");

                let mut h = vec![0.0; hidden];
                for i in 0..hidden {
                    let row = &w1[i * d..(i + 1) * d];
                    let z = b1[i] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                    h[i] = z.tanh();
                }
                let mut z2 = vec![0.0; out];
                for o in 0..out {
                    let row = &w2[o * hidden..(o + 1) * hidden];
                    z2[o] = b2[o] + row.iter().zip(&h).map(|(wi, hi)| wi * hi).sum::<f64>();
                }

                let (loss, delta2) = match self.loss {
                    LossKind::SquaredError => {
                        let r = z2[0] - y;
                        (0.5 * r * r, vec![r])
                    }
                    LossKind::CrossEntropy => {
                        let (loss, probs) = cross_entropy(&z2, y);
                        let target = y as usize;
                        let delta: Vec<f64> = probs
                            .iter()
                            .enumerate()
                            .map(|(c, p)| p - if c == target { 1.0 } else { 0.0 })
                            .collect();
                        (loss, delta)
                    }
                };

                if let Some(g) = grad {
                    let mut delta1 = vec![0.0; hidden];
                    for i in 0..hidden {
                        let upstream: f64 = (0..out).map(|o| w2[o * hidden + i] * delta2[o]).sum();
                        delta1[i] = upstream * (1.0 - h[i] * h[i]);
                    }
                    {
                        let dw2 = g.group_mut("w2").expect("checked shape");
                        for o in 0..out {
                            for i in 0..hidden {
                                dw2[o * hidden + i] += delta2[o] * h[i];
                            }
                        }
                    }
                    {
                        let db2 = g.group_mut("b2").expect("checked shape");
                        for o in 0..out {
                            db2[o] += delta2[o];
                        }
                    }
                    {
                        let dw1 = g.group_mut("w1").expect("checked shape");
                        for i in 0..hidden {
                            for (j, xi) in x.iter().enumerate() {
                                dw1[i * d + j] += delta1[i] * xi;
                            }
                        }
                    }
                    let db1 = g.group_mut("b1").expect("checked shape");
                    for i in 0..hidden {
                        db1[i] += delta1[i];
                    }
                }
                loss
            }
        }
    }

    pub fn sample_loss(&self, params: &ParamVector, x: &[f64], y: f64) -> f64 {
        self.sample_loss_grad(params, x, y, None)
    }

    /// Predicted class under cross entropy (lowest index wins ties); `None`
    /// for squared-error models, which have no class output.
    pub fn predict_class(&self, params: &ParamVector, x: &[f64]) -> Option<usize> {
        if self.loss != LossKind::CrossEntropy {
            return None;
        }
        let scores: Vec<f64> = match self.kind {
            ModelKind::Logistic => {
                let k = self.num_classes;
                let d = self.input_dim;
                let w = params.group("w").expect("checked shape");
                let b = params.group("b").expect("checked shape");
                (0..k)
                    .map(|c| {
                        b[c] + w[c * d..(c + 1) * d]
                            .iter()
                            .zip(x)
                            .map(|(wi, xi)| wi * xi)
                            .sum::<f64>()
                    })
                    .collect()
            }
            ModelKind::Mlp { hidden } => {
                let d = self.input_dim;
                let w1 = params.group("w1").expect("checked shape");
                let b1 = params.group("b1").expect("checked shape");
                let w2 = params.group("w2").expect("checked shape");
                let b2 = params.group("b2").expect("checked shape");
                let h: Vec<f64> = (0..hidden)
                    .map(|i| {
                        (b1[i]
                            + w1[i * d..(i + 1) * d]
                                .iter()
                                .zip(x)
                                .map(|(wi, xi)| wi * xi)
                                .sum::<f64>())
                        .tanh()
                    })
                    .collect();
                (0..self.num_classes)
                    .map(|o| {
                        b2[o]
                            + w2[o * hidden..(o + 1) * hidden]
                                .iter()
                                .zip(&h)
                                .map(|(wi, hi)| wi * hi)
                                .sum::<f64>()
                    })
                    .collect()
            }
            ModelKind::Quadratic => unreachable!("quadratic never pairs with cross entropy"),
        };
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        Some(best)
    }
}

/// Stable log-sum-exp cross entropy; returns (loss, softmax probabilities).
fn cross_entropy(z: &[f64], y: f64) -> (f64, Vec<f64>) {
    let target = y as usize;
    debug_assert!(
        target < z.len(),
        "label {y} out of range for {} classes",
        z.len()
    );
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|zi| (zi - m).exp()).sum();
    let lse = m + sum.ln();
    let probs = z.iter().map(|zi| (zi - lse).exp()).collect();
    (lse - z[target], probs)
}

#[cfg(test)]
mod tests {
    use super::super::Dataset;
    use super::*;
    use crate::simnet::SeededRng;

    fn specs_under_test() -> Vec<(ModelSpec, &'static str)> {
        vec![
            (
                ModelSpec::new(ModelKind::Quadratic, LossKind::SquaredError, 3, 0).unwrap(),
                "quadratic/se",
            ),
            (
                ModelSpec::new(ModelKind::Logistic, LossKind::CrossEntropy, 3, 4).unwrap(),
                "logistic/ce",
            ),
            (
                ModelSpec::new(ModelKind::Mlp { hidden: 5 }, LossKind::SquaredError, 3, 0).unwrap(),
                "mlp/se",
            ),
            (
                ModelSpec::new(ModelKind::Mlp { hidden: 5 }, LossKind::CrossEntropy, 3, 4).unwrap(),
                "mlp/ce",
            ),
        ]
    }

    fn random_point<R: rand::Rng>(spec: &ModelSpec, rng: &mut R) -> (ParamVector, Vec<f64>, f64) {
        let mut params = ParamVector::zeros(&spec.group_shapes()).unwrap();
        let names: Vec<String> = params.groups().iter().map(|(n, _)| n.clone()).collect();
        for name in &names {
            for v in params.group_mut(name).unwrap() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let x: Vec<f64> = (0..spec.input_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let y = match spec.loss {
            LossKind::CrossEntropy => rng.random_range(0..spec.num_classes) as f64,
            LossKind::SquaredError => rng.random_range(-1.0..1.0),
        };
        (params, x, y)
    }

    /// Central-difference check of every gradient coordinate.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        let seeds = SeededRng::new(0x6A11);
        for (spec, tag) in specs_under_test() {
            for point in 0..100u64 {
                let mut rng = seeds.stream("gradcheck", point, 0);
                let (params, x, y) = random_point(&spec, &mut rng);
                let mut grad = params.zeros_like();
                spec.sample_loss_grad(&params, &x, y, Some(&mut grad));

                let names: Vec<String> = params.groups().iter().map(|(n, _)| n.clone()).collect();
                for name in &names {
                    let len = params.group(name).unwrap().len();
                    for i in 0..len {
                        let base = params.group(name).unwrap()[i];
                        let eps = 1e-6 * (1.0 + base.abs());
                        let mut plus = params.clone();
                        plus.group_mut(name).unwrap()[i] = base + eps;
                        let mut minus = params.clone();
                        minus.group_mut(name).unwrap()[i] = base - eps;
                        let numeric = (spec.sample_loss(&plus, &x, y)
                            - spec.sample_loss(&minus, &x, y))
                            / (2.0 * eps);
                        let analytic = grad.group(name).unwrap()[i];
                        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
                        assert!(
                            (analytic - numeric).abs() / denom <= 1e-5,
                            "{tag} point {point} {name}[{i}]: analytic {analytic} vs numeric {numeric}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn quadratic_loss_and_grad_by_hand() {
        let spec = ModelSpec::new(ModelKind::Quadratic, LossKind::SquaredError, 2, 0).unwrap();
        let params = ParamVector::new(vec![("w".into(), vec![2.0, -1.0])]).unwrap();
        // pred = 2*3 + (-1)*1 = 5, r = 5 - 1 = 4, loss = 8, grad = 4 * x.
        let mut grad = params.zeros_like();
        let loss = spec.sample_loss_grad(&params, &[3.0, 1.0], 1.0, Some(&mut grad));
        assert_eq!(loss, 8.0);
        assert_eq!(grad.group("w").unwrap(), &[12.0, 4.0]);
    }

    #[test]
    fn zero_logistic_gives_uniform_loss() {
        let spec = ModelSpec::new(ModelKind::Logistic, LossKind::CrossEntropy, 4, 3).unwrap();
        let params = ParamVector::zeros(&spec.group_shapes()).unwrap();
        let loss = spec.sample_loss(&params, &[0.3, -0.2, 0.8, 0.0], 2.0);
        assert!((loss - (3.0f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn logistic_grad_sums_to_zero_over_classes() {
        // Softmax probabilities sum to one, so bias gradients sum to zero.
        let spec = ModelSpec::new(ModelKind::Logistic, LossKind::CrossEntropy, 2, 3).unwrap();
        let seeds = SeededRng::new(7);
        let mut rng = seeds.stream("lgrad", 0, 0);
        let (params, x, y) = random_point(&spec, &mut rng);
        let mut grad = params.zeros_like();
        spec.sample_loss_grad(&params, &x, y, Some(&mut grad));
        let s: f64 = grad.group("b").unwrap().iter().sum();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn predict_class_ties_go_to_lowest_index() {
        let spec = ModelSpec::new(ModelKind::Logistic, LossKind::CrossEntropy, 1, 3).unwrap();
        let params = ParamVector::zeros(&spec.group_shapes()).unwrap();
        assert_eq!(spec.predict_class(&params, &[1.0]), Some(0));
    }

    #[test]
    fn predict_class_none_for_squared_error() {
        let spec = ModelSpec::new(ModelKind::Quadratic, LossKind::SquaredError, 1, 0).unwrap();
        let params = ParamVector::zeros(&spec.group_shapes()).unwrap();
        assert_eq!(spec.predict_class(&params, &[1.0]), None);
    }

    #[test]
    fn init_params_deterministic_and_zero_for_linear() {
        let seeds = SeededRng::new(11);
        let lin = ModelSpec::new(ModelKind::Logistic, LossKind::CrossEntropy, 3, 2).unwrap();
        let p = lin.init_params(&mut seeds.stream("init", 0, 0));
        assert_eq!(p.l2_norm(), 0.0);

        let mlp =
            ModelSpec::new(ModelKind::Mlp { hidden: 4 }, LossKind::CrossEntropy, 3, 2).unwrap();
        let a = mlp.init_params(&mut seeds.stream("init", 0, 0));
        let b = mlp.init_params(&mut seeds.stream("init", 0, 0));
        assert_eq!(a, b);
        assert!(a.l2_norm() > 0.0);
        assert_eq!(a.group("b1").unwrap().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn invalid_combinations_rejected() {
        assert!(ModelSpec::new(ModelKind::Quadratic, LossKind::CrossEntropy, 2, 3).is_err());
        assert!(ModelSpec::new(ModelKind::Logistic, LossKind::SquaredError, 2, 3).is_err());
        assert!(ModelSpec::new(ModelKind::Logistic, LossKind::CrossEntropy, 2, 1).is_err());
        assert!(
            ModelSpec::new(ModelKind::Mlp { hidden: 0 }, LossKind::SquaredError, 2, 0).is_err()
        );
        assert!(ModelSpec::new(ModelKind::Quadratic, LossKind::SquaredError, 0, 0).is_err());
    }

    #[test]
    fn from_params_recovers_each_kind() {
        let data = Dataset::unsplit(vec![vec![0.0, 0.0, 0.0]], vec![1.0], 4).unwrap();
        for (spec, tag) in specs_under_test() {
            let params = ParamVector::zeros(&spec.group_shapes()).unwrap();
            let got = ModelSpec::from_params(&params, spec.loss, &data).unwrap();
            assert_eq!(got.kind, spec.kind, "{tag}");
            assert_eq!(got.loss, spec.loss, "{tag}");
            assert_eq!(got.input_dim, 3, "{tag}");
        }
    }
}
