//! Penalties shared by the primal and adversarial trainers.
//!
//! The invariance penalty is the squared derivative of a loss with respect to
//! a fixed multiplier `w` on the model output, evaluated at `w = 1`. A model
//! whose output is already optimally scaled in every setting pays nothing.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::Mlp;

/// Per-setting training telemetry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyReport {
    pub setting_id: usize,
    pub base_loss: f64,
    pub penalty_value: f64,
    pub penalty_grad_norm: f64,
    pub lambda: f64,
}

/// A loss parameterised by a multiplier `w` on the model's score.
pub trait ScalarPredictorLoss {
    fn loss_at(&self, w: f64) -> f64;
    /// `dL/dw`, one entry per output coordinate the multiplier acts on.
    fn grad_w(&self, w: f64) -> Vec<f64>;
}

/// `||dL/dw||^2` at `w = at_w`.
pub fn irm_scalar_penalty<L: ScalarPredictorLoss + ?Sized>(loss: &L, at_w: f64) -> f64 {
    loss.grad_w(at_w).iter().map(|g| g * g).sum()
}

/// Negative log-likelihood of an exponential family with sufficient
/// statistics `phi`, summarised by the empirical mean of the statistics and
/// a log-partition `log_z(w)` with known gradient.
pub struct ExpFamilyLoss<'a> {
    pub empirical: &'a [f64],
    pub log_z: &'a dyn Fn(f64) -> f64,
    /// Model mean of the statistics at multiplier `w`.
    pub model_mean: &'a dyn Fn(f64) -> Vec<f64>,
}

impl ScalarPredictorLoss for ExpFamilyLoss<'_> {
    fn loss_at(&self, w: f64) -> f64 {
        -(w * self.empirical.iter().sum::<f64>() - (self.log_z)(w))
    }

    fn grad_w(&self, w: f64) -> Vec<f64> {
        self.empirical
            .iter()
            .zip((self.model_mean)(w))
            .map(|(e, m)| -(e - m))
            .collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log sigma(z)` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Binary logistic loss in minimisation form,
/// `-(mean_E log sigma(w z) + mean_pi log sigma(-w z))`, with optional
/// per-example weights (normalised within each batch).
#[derive(Debug, Clone)]
pub struct LogisticLoss {
    pub expert_logits: Vec<f64>,
    pub policy_logits: Vec<f64>,
    pub expert_weights: Vec<f64>,
    pub policy_weights: Vec<f64>,
}

impl LogisticLoss {
    pub fn new(expert_logits: Vec<f64>, policy_logits: Vec<f64>) -> Self {
        let ne = expert_logits.len();
        let np = policy_logits.len();
        Self {
            expert_logits,
            policy_logits,
            expert_weights: vec![1.0 / ne.max(1) as f64; ne],
            policy_weights: vec![1.0 / np.max(1) as f64; np],
        }
    }

    pub fn weighted(expert_logits: Vec<f64>, expert_weights: Vec<f64>, policy_logits: Vec<f64>, policy_weights: Vec<f64>) -> Self {
        Self {
            expert_logits,
            policy_logits,
            expert_weights,
            policy_weights,
        }
    }

    fn dw(&self, w: f64) -> f64 {
        let e: f64 = self
            .expert_logits
            .iter()
            .zip(&self.expert_weights)
            .map(|(&z, &c)| c * sigmoid(-w * z) * z)
            .sum();
        let p: f64 = self
            .policy_logits
            .iter()
            .zip(&self.policy_weights)
            .map(|(&z, &c)| c * sigmoid(w * z) * z)
            .sum();
        p - e
    }

    /// Gradient of `(dL/dw at w = 1)^2` with respect to every logit, as
    /// (expert, policy) vectors.
    pub fn penalty_logit_grads(&self) -> (Vec<f64>, Vec<f64>) {
        let g = self.dw(1.0);
        let ge = self
            .expert_logits
            .iter()
            .zip(&self.expert_weights)
            .map(|(&z, &c)| -2.0 * g * c * sigmoid(-z) * (1.0 - z * sigmoid(z)))
            .collect();
        let gp = self
            .policy_logits
            .iter()
            .zip(&self.policy_weights)
            .map(|(&z, &c)| 2.0 * g * c * sigmoid(z) * (1.0 + z * sigmoid(-z)))
            .collect();
        (ge, gp)
    }
}

impl ScalarPredictorLoss for LogisticLoss {
    fn loss_at(&self, w: f64) -> f64 {
        let e: f64 = self
            .expert_logits
            .iter()
            .zip(&self.expert_weights)
            .map(|(&z, &c)| c * log_sigmoid(w * z))
            .sum();
        let p: f64 = self
            .policy_logits
            .iter()
            .zip(&self.policy_weights)
            .map(|(&z, &c)| c * log_sigmoid(-w * z))
            .sum();
        -(e + p)
    }

    fn grad_w(&self, w: f64) -> Vec<f64> {
        vec![self.dw(w)]
    }
}

/// `lambda ||v||^2` and its gradient `2 lambda v`.
pub fn l2_penalty(values: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let value = lambda * values.iter().map(|v| v * v).sum::<f64>();
    (value, values.iter().map(|v| 2.0 * lambda * v).collect())
}

/// Persistent power-iteration vectors, one pair per layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpectralState {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Power iteration on `w` (rows x cols) starting from `u`. Returns the
/// estimate after every step, with `u` and `v` updated in place.
pub fn power_iteration(w: &ndarray::Array2<f64>, u: &mut Vec<f64>, v: &mut Vec<f64>, iters: usize) -> Vec<f64> {
    let (rows, cols) = w.dim();
    if u.len() != rows {
        *u = (0..rows).map(|i| 1.0 + 0.1 * i as f64).collect();
        normalize(u);
    }
    v.resize(cols, 0.0);
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..rows).map(|i| w[[i, j]] * u[i]).sum();
        }
        normalize(v);
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..cols).map(|j| w[[i, j]] * v[j]).sum();
        }
        let sigma = normalize(u);
        history.push(sigma);
    }
    history
}

/// Sum over layers of the squared top singular value, with the gradient
/// `2 sigma u v^T` placed on each weight block of the flat parameter vector.
pub fn spectral_norm_penalty(mlp: &Mlp, state: &mut SpectralState, iters: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if iters == 0 {
        return Err(Error::InvalidInput("power iteration needs at least one step".into()));
    }
    let n_layers = mlp.layers.len();
    state.u.resize(n_layers, Vec::new());
    state.v.resize(n_layers, Vec::new());
    let mut grad = vec![0.0; mlp.n_params()];
    let mut sigmas = Vec::with_capacity(n_layers);
    let mut total = 0.0;
    for ((layer, off), (u, v)) in mlp
        .layers
        .iter()
        .zip(mlp.layer_offsets())
        .zip(state.u.iter_mut().zip(state.v.iter_mut()))
    {
        let sigma = *power_iteration(&layer.weight, u, v, iters).last().unwrap();
        total += sigma * sigma;
        sigmas.push(sigma);
        let cols = layer.weight.ncols();
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                grad[off + i * cols + j] = 2.0 * sigma * ui * vj;
            }
        }
    }
    Ok((total, grad, sigmas))
}

/// `mean_x (||grad_x f(x)|| - 1)^2` for a scalar-output network, with its
/// exact parameter gradient (second-order terms included).
pub fn input_gradient_penalty(mlp: &Mlp, inputs: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if mlp.output_dim() != 1 {
        return Err(Error::InvalidInput("input-gradient penalty needs a scalar output".into()));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidInput("no inputs for the input-gradient penalty".into()));
    }
    let n_layers = mlp.layers.len();
    let offsets = mlp.layer_offsets();
    let act = mlp.activation;
    let mut grad = vec![0.0; mlp.n_params()];
    let mut total = 0.0;
    let scale = 1.0 / inputs.len() as f64;
    for x in inputs {
        let cache = mlp.forward(x);
        let h = &cache.inputs;
        // backward pass for the input gradient, keeping every intermediate
        let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut gh: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        deltas[n_layers - 1] = vec![1.0];
        for l in (0..n_layers).rev() {
            let w = &mlp.layers[l].weight;
            let d = &deltas[l];
            gh[l] = (0..w.ncols()).map(|j| (0..w.nrows()).map(|i| w[[i, j]] * d[i]).sum::<f64>()).collect();
            if l > 0 {
                deltas[l - 1] = gh[l]
                    .iter()
                    .zip(&h[l])
                    .map(|(g, &y)| g * act.deriv_from_output(y))
                    .collect();
            }
        }
        let norm = gh[0].iter().map(|g| g * g).sum::<f64>().sqrt();
        total += scale * (norm - 1.0).powi(2);
        if norm == 0.0 {
            continue;
        }
        // adjoint of the input gradient
        let mut gh_bar: Vec<f64> = gh[0].iter().map(|g| scale * 2.0 * (norm - 1.0) * g / norm).collect();
        // adjoints of hidden pre-activations collected on the way up
        let mut a_bar: Vec<Vec<f64>> = (0..n_layers).map(|l| vec![0.0; mlp.layers[l].weight.nrows()]).collect();
        for l in 0..n_layers {
            let w = &mlp.layers[l].weight;
            let cols = w.ncols();
            let d = &deltas[l];
            for (i, di) in d.iter().enumerate() {
                for (j, gb) in gh_bar.iter().enumerate() {
                    grad[offsets[l] + i * cols + j] += di * gb;
                }
            }
            if l + 1 == n_layers {
                break;
            }
            let delta_bar: Vec<f64> = (0..w.nrows())
                .map(|i| (0..cols).map(|j| w[[i, j]] * gh_bar[j]).sum::<f64>())
                .collect();
            // delta_l = gh_{l+1} * s_l with s_l = act'(a_l), h_{l+1} = act(a_l)
            let y = &h[l + 1];
            gh_bar = delta_bar
                .iter()
                .zip(y)
                .map(|(db, &yi)| db * act.deriv_from_output(yi))
                .collect();
            for i in 0..y.len() {
                a_bar[l][i] += delta_bar[i] * gh[l + 1][i] * act.second_deriv_from_output(y[i]);
            }
        }
        // reverse through the forward graph
        for l in (0..n_layers.saturating_sub(1)).rev() {
            let w = &mlp.layers[l].weight;
            let cols = w.ncols();
            let bias_off = offsets[l] + w.len();
            for (i, ab) in a_bar[l].iter().enumerate() {
                if *ab == 0.0 {
                    continue;
                }
                for (j, hj) in h[l].iter().enumerate() {
                    grad[offsets[l] + i * cols + j] += ab * hj;
                }
                grad[bias_off + i] += ab;
            }
            if l > 0 {
                for j in 0..cols {
                    let hb: f64 = (0..w.nrows()).map(|i| w[[i, j]] * a_bar[l][i]).sum();
                    a_bar[l - 1][j] += hb * act.deriv_from_output(h[l][j]);
                }
            }
        }
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Activation, Mlp};
    use crate::oracles::{finite_diff, jacobi_singular_values, max_rel_error};
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Constant;
    impl ScalarPredictorLoss for Constant {
        fn loss_at(&self, _w: f64) -> f64 {
            2.5
        }
        fn grad_w(&self, _w: f64) -> Vec<f64> {
            vec![0.0]
        }
    }

    #[test]
    fn constant_loss_has_no_penalty() {
        assert_eq!(irm_scalar_penalty(&Constant, 1.0), 0.0);
    }

    #[test]
    fn single_expert_logistic_penalty() {
        for z in [-3.0, -0.4, 0.0, 0.7, 2.5] {
            let loss = LogisticLoss::new(vec![z], vec![]);
            let expected = sigmoid(-z).powi(2) * z * z;
            assert!((irm_scalar_penalty(&loss, 1.0) - expected).abs() < 1e-15);
            let fd = finite_diff(|w| loss.loss_at(w[0]), &[1.0], 1e-6).unwrap()[0];
            assert!((fd * fd - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn logistic_penalty_logit_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ze: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let zp: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let loss = LogisticLoss::new(ze.clone(), zp.clone());
        let (ge, gp) = loss.penalty_logit_grads();
        let mut all = ze.clone();
        all.extend(&zp);
        let fd = finite_diff(
            |z| irm_scalar_penalty(&LogisticLoss::new(z[..4].to_vec(), z[4..].to_vec()), 1.0),
            &all,
            1e-6,
        )
        .unwrap();
        let mut analytic = ge;
        analytic.extend(gp);
        assert!(max_rel_error(&analytic, &fd, 1e-8) < 1e-5);
    }

    #[test]
    fn exp_family_penalty_is_squared_residual() {
        // two-point family on {0, 1} with statistic phi(x) = x
        let log_z = |w: f64| (1.0 + w.exp()).ln();
        let mean = |w: f64| vec![sigmoid(w)];
        let empirical = [0.9];
        let loss = ExpFamilyLoss {
            empirical: &empirical,
            log_z: &log_z,
            model_mean: &mean,
        };
        let c = 0.9 - sigmoid(1.0);
        assert!((irm_scalar_penalty(&loss, 1.0) - c * c).abs() < 1e-15);
        let fd = finite_diff(|w| loss.loss_at(w[0]), &[1.0], 1e-6).unwrap()[0];
        assert!((fd * fd - c * c).abs() < 1e-9);
    }

    #[test]
    fn l2_checks() {
        assert_eq!(l2_penalty(&[0.0, 0.0], 1e-3).0, 0.0);
        let v = [0.3, -1.2, 2.0];
        let (_, g) = l2_penalty(&v, 1e-3);
        let fd = finite_diff(|x| l2_penalty(x, 1e-3).0, &v, 1e-5).unwrap();
        assert!(max_rel_error(&g, &fd, 1e-12) < 1e-6);
    }

    fn single_layer(w: Array2<f64>) -> Mlp {
        let mut m = Mlp::zeros(&[w.ncols(), w.nrows()], Activation::Tanh).unwrap();
        m.layers[0].weight = w;
        m
    }

    #[test]
    fn spectral_known_matrices() {
        let mut st = SpectralState::default();
        let (p, _, s) = spectral_norm_penalty(&single_layer(Array2::eye(3)), &mut st, 10).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && (p - 1.0).abs() < 1e-12);
        let mut st = SpectralState::default();
        let (p, _, _) = spectral_norm_penalty(&single_layer(arr2(&[[3.0, 0.0], [0.0, 1.0]])), &mut st, 10).unwrap();
        assert!((p - 9.0).abs() < 1e-6);
    }

    #[test]
    fn spectral_matches_jacobi_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let exact = jacobi_singular_values(&w)[0];
        let mut u = Vec::new();
        let mut v = Vec::new();
        let hist = power_iteration(&w, &mut u, &mut v, 200);
        assert!((hist.last().unwrap() - exact).abs() < 1e-6);
        for pair in hist.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12);
        }
    }

    #[test]
    fn spectral_gradient_matches_fd_at_converged_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let mut st = SpectralState::default();
        let (_, g, _) = spectral_norm_penalty(&mlp, &mut st, 500).unwrap();
        let fd = finite_diff(
            |p| {
                let mut m = mlp.clone();
                m.set_params(p).unwrap();
                m.layers
                    .iter()
                    .map(|l| jacobi_singular_values(&l.weight)[0].powi(2))
                    .sum()
            },
            &mlp.params(),
            1e-6,
        )
        .unwrap();
        assert!(max_rel_error(&g, &fd, 1e-6) < 1e-3);
    }

    #[test]
    fn linear_discriminator_gradient_penalty() {
        let unit = single_layer(arr2(&[[0.6, 0.8]]));
        let xs = vec![vec![0.1, 0.2], vec![-1.0, 3.0]];
        assert!(input_gradient_penalty(&unit, &xs).unwrap().0.abs() < 1e-15);
        let three = single_layer(arr2(&[[3.0, 0.0]]));
        assert!((input_gradient_penalty(&three, &xs).unwrap().0 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_penalty_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for sizes in [vec![3, 4, 1], vec![2, 3, 3, 1], vec![4, 1]] {
            let mlp = Mlp::new(&sizes, Activation::Tanh, &mut rng).unwrap();
            let xs: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..sizes[0]).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect();
            let (_, g) = input_gradient_penalty(&mlp, &xs).unwrap();
            let fd = finite_diff(
                |p| {
                    let mut m = mlp.clone();
                    m.set_params(p).unwrap();
                    input_gradient_penalty(&m, &xs).unwrap().0
                },
                &mlp.params(),
                1e-5,
            )
            .unwrap();
            assert!(max_rel_error(&g, &fd, 1e-7) < 1e-3, "{sizes:?}");
        }
    }

    proptest! {
        #[test]
        fn logistic_penalty_nonnegative_and_zero_at_stationarity(
            ze in prop::collection::vec(-4.0f64..4.0, 1..5),
            zp in prop::collection::vec(-4.0f64..4.0, 1..5),
        ) {
            let loss = LogisticLoss::new(ze.clone(), zp.clone());
            let p = irm_scalar_penalty(&loss, 1.0);
            prop_assert!(p >= 0.0);
            let g = loss.grad_w(1.0)[0];
            prop_assert!((p == 0.0) == (g == 0.0));
        }
    }
}
