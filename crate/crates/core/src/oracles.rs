//! Brute-force reference implementations for tests and `--verify` checks.
//!
//! Nothing here calls into the planners or the training code; everything is
//! recomputed from the raw transition tensor. All routines are exponential
//! or cubic and guarded against large inputs.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Random dense (or 40% sparse) transition tensor and initial distribution.
/// Every action has at least one successor.
pub fn random_mdp(rng: &mut ChaCha8Rng, n_s: usize, n_a: usize, horizon: usize, sparse: bool) -> TabularMdp {
    let mut t = Array3::zeros((n_s, n_a, n_s));
    for s in 0..n_s {
        for a in 0..n_a {
            let mut row: Vec<f64> = (0..n_s)
                .map(|_| if sparse && rng.gen::<f64>() < 0.4 { 0.0 } else { rng.gen::<f64>() + 0.05 })
                .collect();
            if row.iter().all(|&p| p == 0.0) {
                row[rng.gen_range(0..n_s)] = 1.0;
            }
            let total: f64 = row.iter().sum();
            for (n, p) in row.iter().enumerate() {
                t[[s, a, n]] = p / total;
            }
        }
    }
    let mut mu: Vec<f64> = (0..n_s).map(|_| rng.gen::<f64>()).collect();
    let total: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|m| *m /= total);
    let mdp = TabularMdp::new(t.clone(), Array1::from_vec(mu.clone()), 0.9, horizon);
    match mdp {
        Ok(m) => m,
        Err(_) => {
            for s in 0..n_s {
                for a in 0..n_a {
                    let total: f64 = (0..n_s).map(|n| t[[s, a, n]]).sum();
                    for n in 0..n_s {
                        t[[s, a, n]] /= total;
                    }
                }
            }
            TabularMdp::new(t, Array1::from_vec(mu), 0.9, horizon).unwrap()
        }
    }
}

/// Upper bound on enumerated trajectories.
pub const ENUMERATION_LIMIT: f64 = 1e6;

/// Every trajectory of length `horizon` with positive dynamics probability,
/// with its exact log probability under the Gibbs model
/// `mu0(s_0) prod_t p(s_{t+1}|s_t,a_t) exp(sum_t r(s_t))`.
#[derive(Debug, Clone)]
pub struct EnumeratedModel {
    pub trajectories: Vec<(Vec<usize>, Vec<usize>)>,
    pub log_probs: Vec<f64>,
    pub log_z: f64,
}

impl EnumeratedModel {
    /// Per-timestep state occupancy, `horizon x n_states`.
    pub fn state_marginals(&self, n_states: usize) -> Array2<f64> {
        let horizon = self.trajectories.first().map_or(0, |t| t.0.len());
        let mut out = Array2::zeros((horizon, n_states));
        for ((states, _), lp) in self.trajectories.iter().zip(&self.log_probs) {
            let p = lp.exp();
            for (t, &s) in states.iter().enumerate() {
                out[[t, s]] += p;
            }
        }
        out
    }

    /// `E[sum_t phi(s_t)]` for a per-state feature table.
    pub fn feature_expectation(&self, features: &Array2<f64>) -> Vec<f64> {
        let mut out = vec![0.0; features.ncols()];
        for ((states, _), lp) in self.trajectories.iter().zip(&self.log_probs) {
            let p = lp.exp();
            for &s in states {
                for (o, f) in out.iter_mut().zip(features.row(s)) {
                    *o += p * f;
                }
            }
        }
        out
    }

    /// Log probability of a full-length trajectory, `-inf` if absent.
    pub fn log_prob_of(&self, states: &[usize], actions: &[usize]) -> f64 {
        self.trajectories
            .iter()
            .position(|(s, a)| s == states && a == actions)
            .map_or(f64::NEG_INFINITY, |i| self.log_probs[i])
    }
}

fn count_paths(mdp: &TabularMdp, horizon: usize) -> f64 {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let t = mdp.transition();
    let mut count = vec![n_a as f64; n_s];
    for _ in 1..horizon {
        count = (0..n_s)
            .map(|s| {
                let mut c = 0.0;
                for a in 0..n_a {
                    for n in 0..n_s {
                        if t[[s, a, n]] > 0.0 {
                            c += count[n];
                        }
                    }
                }
                c
            })
            .collect();
    }
    let mu0 = mdp.initial_dist();
    (0..n_s).filter(|&s| mu0[s] > 0.0).map(|s| count[s]).sum()
}

/// Exhaustive enumeration of the Gibbs trajectory model with state reward.
pub fn enumerate_gibbs(mdp: &TabularMdp, reward: &[f64], horizon: usize) -> Result<EnumeratedModel> {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    if reward.len() != n_s {
        return Err(Error::InvalidInput(format!("reward has {} entries, expected {n_s}", reward.len())));
    }
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    let n_paths = count_paths(mdp, horizon);
    if n_paths > ENUMERATION_LIMIT {
        return Err(Error::TooLarge(format!(
            "{n_paths:.0} trajectories exceed the enumeration limit {ENUMERATION_LIMIT:.0}"
        )));
    }
    let t = mdp.transition();
    let mu0 = mdp.initial_dist();
    let mut trajectories = Vec::with_capacity(n_paths as usize);
    let mut unnorm = Vec::with_capacity(n_paths as usize);

    // explicit stack of partial paths: (states, actions, log weight)
    let mut stack: Vec<(Vec<usize>, Vec<usize>, f64)> = (0..n_s)
        .rev()
        .filter(|&s| mu0[s] > 0.0)
        .map(|s| (vec![s], vec![], mu0[s].ln() + reward[s]))
        .collect();
    while let Some((states, actions, lw)) = stack.pop() {
        let s = *states.last().unwrap();
        for a in (0..n_a).rev() {
            let mut acts = actions.clone();
            acts.push(a);
            if states.len() == horizon {
                trajectories.push((states.clone(), acts));
                unnorm.push(lw);
                continue;
            }
            for n in (0..n_s).rev() {
                let p = t[[s, a, n]];
                if p > 0.0 {
                    let mut st = states.clone();
                    st.push(n);
                    stack.push((st, acts.clone(), lw + p.ln() + reward[n]));
                }
            }
        }
    }
    let m = unnorm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + unnorm.iter().map(|w| (w - m).exp()).sum::<f64>().ln();
    let log_probs = unnorm.iter().map(|w| w - log_z).collect();
    Ok(EnumeratedModel {
        trajectories,
        log_probs,
        log_z,
    })
}

/// Log probability of a trajectory under the dynamics alone, without the
/// reward tilt and without the final action.
pub fn dynamics_log_prob(mdp: &TabularMdp, states: &[usize], actions: &[usize]) -> f64 {
    let t = mdp.transition();
    let mut lp = mdp.initial_dist()[states[0]].ln();
    for i in 0..states.len() - 1 {
        lp += t[[states[i], actions[i], states[i + 1]]].ln();
    }
    lp
}

/// Central differences, coordinate by coordinate.
pub fn finite_diff<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step {h} must be positive")));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Max over coordinates of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Jensen-Shannon divergence in nats between two discrete distributions.
pub fn discrete_js(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// Value of `E_p[log D] + E_q[log(1 - D)]` at the optimal `D = p / (p + q)`.
pub fn optimal_bce_objective(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            total += a * (a / (a + b)).ln();
        }
        if b > 0.0 {
            total += b * (b / (a + b)).ln();
        }
    }
    total
}

/// Solves `(I - gamma P_pi) V = r` by Gaussian elimination with partial
/// pivoting.
pub fn policy_evaluation(mdp: &TabularMdp, reward: &[f64], actions: &[usize]) -> Result<Vec<f64>> {
    let n = mdp.n_states();
    if reward.len() != n || actions.len() != n {
        return Err(Error::InvalidInput("reward and policy must cover every state".into()));
    }
    if n > 2000 {
        return Err(Error::TooLarge(format!("{n} states is too many for a dense solve")));
    }
    let t = mdp.transition();
    let g = mdp.discount();
    let mut a = vec![vec![0.0; n + 1]; n];
    for s in 0..n {
        for n2 in 0..n {
            a[s][n2] = -g * t[[s, actions[s], n2]];
        }
        a[s][s] += 1.0;
        a[s][n] = reward[s];
    }
    solve_augmented(a)
}

fn solve_augmented(mut a: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-14 {
            return Err(Error::InvalidInput("singular linear system".into()));
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (a[row][n] - tail) / a[row][row];
    }
    Ok(x)
}

/// Singular values, descending, by one-sided Jacobi rotations.
pub fn jacobi_singular_values(m: &Array2<f64>) -> Vec<f64> {
    // work on columns of the taller orientation
    let a = if m.nrows() >= m.ncols() { m.clone() } else { m.t().to_owned() };
    let (rows, cols) = a.dim();
    let mut u: Vec<Vec<f64>> = (0..cols).map(|j| a.column(j).to_vec()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..cols {
            for j in i + 1..cols {
                let alpha: f64 = u[i].iter().map(|x| x * x).sum();
                let beta: f64 = u[j].iter().map(|x| x * x).sum();
                let gamma: f64 = u[i].iter().zip(&u[j]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let (x, y) = (u[i][k], u[j][k]);
                    u[i][k] = c * x - s * y;
                    u[j][k] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = u.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};

    fn one_state() -> TabularMdp {
        TabularMdp::new(Array3::from_elem((1, 1, 1), 1.0), Array1::from_elem(1, 1.0), 0.9, 4).unwrap()
    }

    #[test]
    fn single_path_has_probability_one() {
        let m = enumerate_gibbs(&one_state(), &[0.7], 4).unwrap();
        assert_eq!(m.trajectories.len(), 1);
        assert!(m.log_probs[0].abs() < 1e-15);
        assert!((m.log_z - 2.8).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_gives_dynamics_prior() {
        let mut t = Array3::zeros((2, 2, 2));
        t[[0, 0, 0]] = 0.3;
        t[[0, 0, 1]] = 0.7;
        t[[0, 1, 1]] = 1.0;
        t[[1, 0, 0]] = 0.5;
        t[[1, 0, 1]] = 0.5;
        t[[1, 1, 1]] = 1.0;
        let mdp = TabularMdp::new(t, Array1::from_vec(vec![0.4, 0.6]), 0.9, 3).unwrap();
        let m = enumerate_gibbs(&mdp, &[0.25, 0.25], 3).unwrap();
        let total: f64 = m.log_probs.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for ((s, a), lp) in m.trajectories.iter().zip(&m.log_probs) {
            // actions are uniform: 2 choices at each of 3 steps
            let expected = dynamics_log_prob(&mdp, s, a) - 3.0 * 2f64.ln();
            assert!((lp - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn guard_rejects_large_instances() {
        let n = 10;
        let t = Array3::from_elem((n, 2, n), 1.0 / n as f64);
        let mdp = TabularMdp::new(t, Array1::from_elem(n, 1.0 / n as f64), 0.9, 8).unwrap();
        assert!(matches!(enumerate_gibbs(&mdp, &vec![0.0; n], 8), Err(Error::TooLarge(_))));
    }

    #[test]
    fn finite_diff_polynomials() {
        let g = finite_diff(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        for h in [1e-1, 1e-3, 1.0] {
            let g = finite_diff(|x| 2.0 * x[0] - 0.5 * x[1], &[1.0, -4.0], h).unwrap();
            assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
        }
        assert!(finite_diff(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn js_of_disjoint_and_identical() {
        assert!(discrete_js(&[0.5, 0.5], &[0.5, 0.5]).abs() < 1e-15);
        assert!((discrete_js(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-15);
        let p = [0.1, 0.2, 0.3, 0.4];
        let q = [0.25, 0.25, 0.4, 0.1];
        let lhs = optimal_bce_objective(&p, &q);
        assert!((lhs - (2.0 * discrete_js(&p, &q) - 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn linear_solve_two_state() {
        let mut t = Array3::zeros((2, 1, 2));
        t[[0, 0, 1]] = 1.0;
        t[[1, 0, 1]] = 1.0;
        let mdp = TabularMdp::new(t, Array1::from_vec(vec![1.0, 0.0]), 0.9, 5).unwrap();
        let v = policy_evaluation(&mdp, &[0.0, 1.0], &[0, 0]).unwrap();
        assert!((v[1] - 10.0).abs() < 1e-12);
        assert!((v[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_known_spectra() {
        let d = ndarray::arr2(&[[3.0, 0.0], [0.0, 1.0]]);
        let sv = jacobi_singular_values(&d);
        assert!((sv[0] - 3.0).abs() < 1e-14 && (sv[1] - 1.0).abs() < 1e-14);
        // rank one: u v^T with |u| = 5, |v| = 2
        let r = ndarray::arr2(&[[6.0, 0.0, 0.0], [8.0, 0.0, 0.0]]);
        let sv = jacobi_singular_values(&r.t().to_owned());
        assert!((sv[0] - 10.0).abs() < 1e-12);
        let m = ndarray::arr2(&[[1.0, 2.0, 0.5], [-1.0, 0.3, 2.0], [0.0, 1.0, 1.0], [2.0, -0.5, 0.1]]);
        let sv = jacobi_singular_values(&m);
        let frob: f64 = m.iter().map(|x| x * x).sum();
        assert!((sv.iter().map(|s| s * s).sum::<f64>() - frob).abs() < 1e-10);
    }

    #[test]
    fn oracles_stay_independent() {
        let src = include_str!("oracles.rs");
        for line in src.lines().filter(|l| l.trim_start().starts_with("use crate::")) {
            for banned in ["maxent", "features", "solver", "dual", "regularizers"] {
                assert!(!line.contains(banned), "{line}");
            }
        }
    }
}
