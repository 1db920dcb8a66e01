//! Exact planners on tabular MDPs.
//!
//! Two soft backups are provided. [`SoftBackup::Trajectory`] computes the
//! exact log-partition of the trajectory-level Gibbs model
//! `p(xi) ∝ mu0(s_0) prod p(s'|s,a) exp(sum_t r(s_t, a_t))`, and its
//! [`SoftPolicy`] reproduces that model exactly when paired with the
//! reward-tilted successor distribution returned by
//! [`SoftPolicy::successor_dist`]. [`SoftBackup::Causal`] is the
//! maximum-causal-entropy backup `Q = r + E[V']`, the right choice for an
//! agent that has to act under the true dynamics. Both coincide on
//! deterministic MDPs.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::trajectories::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftBackup {
    Trajectory,
    Causal,
}

/// Finite-horizon stochastic policy from a soft backward recursion.
///
/// `soft_values` has `horizon + 1` rows; the last row is the terminal value 0.
#[derive(Debug, Clone)]
pub struct SoftPolicy {
    pub backup: SoftBackup,
    pub probs: Array3<f64>,
    pub soft_q: Array3<f64>,
    pub soft_values: Array2<f64>,
    /// Model successor weights per step, flattened in `mdp.successors` order.
    weights: Vec<f64>,
    offsets: Vec<usize>,
}

impl SoftPolicy {
    pub fn horizon(&self) -> usize {
        self.probs.dim().0
    }

    pub fn n_states(&self) -> usize {
        self.probs.dim().1
    }

    pub fn n_actions(&self) -> usize {
        self.probs.dim().2
    }

    pub fn action_probs(&self, t: usize, s: usize) -> ndarray::ArrayView1<'_, f64> {
        self.probs.slice(ndarray::s![t, s, ..])
    }

    /// `log Z`: logsumexp over initial states of `log mu0(s) + V(0, s)` for
    /// the trajectory backup, `sum_s mu0(s) V(0, s)` for the causal one.
    pub fn log_partition(&self, mdp: &TabularMdp) -> f64 {
        let mu0 = mdp.initial_dist();
        match self.backup {
            SoftBackup::Trajectory => logsumexp(
                (0..self.n_states())
                    .filter(|&s| mu0[s] > 0.0)
                    .map(|s| mu0[s].ln() + self.soft_values[[0, s]]),
            ),
            SoftBackup::Causal => (0..self.n_states())
                .filter(|&s| mu0[s] > 0.0)
                .map(|s| mu0[s] * self.soft_values[[0, s]])
                .sum(),
        }
    }

    /// Distribution of the first state under the model.
    pub fn start_dist(&self, mdp: &TabularMdp) -> Vec<f64> {
        let mu0 = mdp.initial_dist();
        match self.backup {
            SoftBackup::Causal => mu0.to_vec(),
            SoftBackup::Trajectory => {
                let log_z = self.log_partition(mdp);
                (0..self.n_states())
                    .map(|s| {
                        if mu0[s] > 0.0 {
                            (mu0[s].ln() + self.soft_values[[0, s]] - log_z).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    }

    /// Successor weights used by the model at step `t`, aligned with
    /// `mdp.successors(s, a)`. For the trajectory backup these are
    /// `p(s'|s,a) exp(V(t+1, s')) / exp(Q(t,s,a) - r(s,a))`, for the causal
    /// backup the dynamics themselves.
    pub fn successor_weights(&self, t: usize, s: usize, a: usize) -> &[f64] {
        let i = s * self.n_actions() + a;
        let base = t * self.offsets[self.offsets.len() - 1];
        &self.weights[base + self.offsets[i]..base + self.offsets[i + 1]]
    }

    /// Successor distribution at step `t` as `(next_state, prob)` pairs.
    pub fn successor_dist(&self, mdp: &TabularMdp, t: usize, s: usize, a: usize) -> Vec<(usize, f64)> {
        mdp.successors(s, a)
            .iter()
            .zip(self.successor_weights(t, s, a))
            .map(|(&(n, _), &w)| (n, w))
            .collect()
    }
}

/// Single-pass log-sum-exp with a running maximum.
pub(crate) fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let mut m = f64::NEG_INFINITY;
    let mut acc = 0.0;
    for v in values {
        if v == f64::NEG_INFINITY {
            continue;
        }
        if v > m {
            acc = acc * (m - v).exp() + 1.0;
            m = v;
        } else {
            acc += (v - m).exp();
        }
    }
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + acc.ln()
}

fn check_reward_table(mdp: &TabularMdp, reward: &Array2<f64>) -> Result<()> {
    if reward.dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::InvalidInput(format!(
            "reward table has shape {:?}, expected ({}, {})",
            reward.dim(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    if let Some(v) = reward.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite reward entry {v}")));
    }
    Ok(())
}

/// Broadcasts a state reward over actions.
pub fn state_reward_table(mdp: &TabularMdp, reward: &[f64]) -> Result<Array2<f64>> {
    if reward.len() != mdp.n_states() {
        return Err(Error::InvalidInput(format!(
            "reward has {} entries, expected {}",
            reward.len(),
            mdp.n_states()
        )));
    }
    Ok(Array2::from_shape_fn((mdp.n_states(), mdp.n_actions()), |(s, _)| reward[s]))
}

/// Soft value iteration for the trajectory-level Gibbs model of a state reward.
pub fn soft_value_iteration(mdp: &TabularMdp, reward: &[f64]) -> Result<SoftPolicy> {
    let table = state_reward_table(mdp, reward)?;
    soft_value_iteration_with(mdp, &table, SoftBackup::Trajectory)
}

/// Finite-horizon undiscounted soft backup over `t = T-1 .. 0` with
/// terminal value 0.
pub fn soft_value_iteration_with(
    mdp: &TabularMdp,
    reward: &Array2<f64>,
    backup: SoftBackup,
) -> Result<SoftPolicy> {
    check_reward_table(mdp, reward)?;
    let (n_s, n_a, horizon) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let mut offsets = Vec::with_capacity(n_s * n_a + 1);
    offsets.push(0);
    for s in 0..n_s {
        for a in 0..n_a {
            offsets.push(offsets.last().unwrap() + mdp.successors(s, a).len());
        }
    }
    let per_step = offsets[n_s * n_a];
    let mut weights = vec![0.0; horizon * per_step];
    let mut values = Array2::<f64>::zeros((horizon + 1, n_s));
    let mut q = Array3::<f64>::zeros((horizon, n_s, n_a));
    let mut probs = Array3::<f64>::zeros((horizon, n_s, n_a));
    let mut scaled = vec![0.0; n_s];
    for t in (0..horizon).rev() {
        let next = values.row(t + 1).to_owned();
        let shift = next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (e, v) in scaled.iter_mut().zip(next.iter()) {
            *e = (v - shift).exp();
        }
        let w_t = &mut weights[t * per_step..(t + 1) * per_step];
        for s in 0..n_s {
            for a in 0..n_a {
                let succ = mdp.successors(s, a);
                let w = &mut w_t[offsets[s * n_a + a]..offsets[s * n_a + a + 1]];
                let cont = match backup {
                    SoftBackup::Causal => {
                        for (wi, &(_, p)) in w.iter_mut().zip(succ) {
                            *wi = p;
                        }
                        succ.iter().map(|&(n, p)| p * next[n]).sum()
                    }
                    SoftBackup::Trajectory => {
                        let den: f64 = succ.iter().map(|&(n, p)| p * scaled[n]).sum();
                        if den > 1e-250 {
                            for (wi, &(n, p)) in w.iter_mut().zip(succ) {
                                *wi = p * scaled[n] / den;
                            }
                            shift + den.ln()
                        } else {
                            let c = logsumexp(succ.iter().map(|&(n, p)| p.ln() + next[n]));
                            for (wi, &(n, p)) in w.iter_mut().zip(succ) {
                                *wi = p * (next[n] - c).exp();
                            }
                            c
                        }
                    }
                };
                q[[t, s, a]] = reward[[s, a]] + cont;
            }
            let v = logsumexp((0..n_a).map(|a| q[[t, s, a]]));
            values[[t, s]] = v;
            for a in 0..n_a {
                probs[[t, s, a]] = (q[[t, s, a]] - v).exp();
            }
        }
    }
    Ok(SoftPolicy {
        backup,
        probs,
        soft_q: q,
        soft_values: values,
        weights,
        offsets,
    })
}

/// Deterministic stationary policy from discounted value iteration.
#[derive(Debug, Clone)]
pub struct HardPolicy {
    pub action: Vec<usize>,
    pub values: Vec<f64>,
    /// Sup-norm change of the value vector at every sweep.
    pub residual_history: Vec<f64>,
}

fn bellman_q(mdp: &TabularMdp, reward: &Array2<f64>, values: &[f64], s: usize, a: usize) -> f64 {
    reward[[s, a]]
        + mdp.discount()
            * mdp
                .successors(s, a)
                .iter()
                .map(|&(n, p)| p * values[n])
                .sum::<f64>()
}

/// Discounted value iteration on a state reward.
pub fn value_iteration(mdp: &TabularMdp, reward: &[f64], tol: f64) -> Result<HardPolicy> {
    let table = state_reward_table(mdp, reward)?;
    value_iteration_table(mdp, &table, tol)
}

pub fn value_iteration_table(mdp: &TabularMdp, reward: &Array2<f64>, tol: f64) -> Result<HardPolicy> {
    check_reward_table(mdp, reward)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance {tol} must be positive")));
    }
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut values = vec![0.0; n_s];
    let mut history = Vec::new();
    loop {
        let next: Vec<f64> = (0..n_s)
            .map(|s| {
                (0..n_a)
                    .map(|a| bellman_q(mdp, reward, &values, s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let delta = next
            .iter()
            .zip(&values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        values = next;
        history.push(delta);
        // residual of `values` is at most discount * delta
        if delta * mdp.discount() <= tol {
            break;
        }
    }
    let action = (0..n_s)
        .map(|s| {
            let mut best = 0;
            let mut best_q = f64::NEG_INFINITY;
            for a in 0..n_a {
                let q = bellman_q(mdp, reward, &values, s, a);
                if q > best_q {
                    best_q = q;
                    best = a;
                }
            }
            best
        })
        .collect();
    Ok(HardPolicy {
        action,
        values,
        residual_history: history,
    })
}

/// Sup-norm Bellman optimality residual of `values`.
pub fn bellman_residual(mdp: &TabularMdp, reward: &Array2<f64>, values: &[f64]) -> f64 {
    (0..mdp.n_states())
        .map(|s| {
            let best = (0..mdp.n_actions())
                .map(|a| bellman_q(mdp, reward, values, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            (best - values[s]).abs()
        })
        .fold(0.0, f64::max)
}

pub trait Policy {
    fn sample_action(&self, t: usize, s: usize, rng: &mut ChaCha8Rng) -> usize;
}

impl Policy for SoftPolicy {
    fn sample_action(&self, t: usize, s: usize, rng: &mut ChaCha8Rng) -> usize {
        let t = t.min(self.horizon() - 1);
        sample_index(self.action_probs(t, s).iter().copied(), rng.gen())
    }
}

impl Policy for HardPolicy {
    fn sample_action(&self, _t: usize, s: usize, _rng: &mut ChaCha8Rng) -> usize {
        self.action[s]
    }
}

/// Inverse-CDF draw; `u` in [0, 1).
pub(crate) fn sample_index(probs: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[derive(Debug, Clone)]
pub struct Rollouts {
    pub trajectories: Vec<Trajectory>,
    /// Undiscounted ground-truth return of each trajectory.
    pub returns: Vec<f64>,
    pub mean_return: f64,
}

/// Sum of `truth` over the visited states.
pub fn trajectory_return(traj: &Trajectory, truth: &[f64]) -> f64 {
    traj.states.iter().map(|&s| truth[s]).sum()
}

/// Samples `n` episodes under the true dynamics. Episodes stop after the
/// first visit to an absorbing state, or after `horizon` steps.
pub fn rollout<P: Policy>(
    mdp: &TabularMdp,
    policy: &P,
    n: usize,
    seed: u64,
    truth: &[f64],
) -> Result<Rollouts> {
    if n == 0 {
        return Err(Error::InvalidInput("rollout count must be at least 1".into()));
    }
    if truth.len() != mdp.n_states() {
        return Err(Error::InvalidInput(format!(
            "ground-truth reward has {} entries, expected {}",
            truth.len(),
            mdp.n_states()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n);
    let mut returns = Vec::with_capacity(n);
    for _ in 0..n {
        let traj = sample_episode(mdp, policy, &mut rng);
        returns.push(trajectory_return(&traj, truth));
        trajectories.push(traj);
    }
    let mean_return = returns.iter().sum::<f64>() / n as f64;
    Ok(Rollouts {
        trajectories,
        returns,
        mean_return,
    })
}

pub(crate) fn sample_episode<P: Policy>(mdp: &TabularMdp, policy: &P, rng: &mut ChaCha8Rng) -> Trajectory {
    let mut s = sample_index(mdp.initial_dist().iter().copied(), rng.gen());
    let mut states = Vec::with_capacity(mdp.horizon());
    let mut actions = Vec::with_capacity(mdp.horizon());
    for t in 0..mdp.horizon() {
        let a = policy.sample_action(t, s, rng);
        states.push(s);
        actions.push(a);
        if mdp.is_absorbing(s) || t + 1 == mdp.horizon() {
            break;
        }
        let succ = mdp.successors(s, a);
        let k = sample_index(succ.iter().map(|&(_, p)| p), rng.gen());
        s = succ[k].0;
    }
    Trajectory {
        states,
        actions,
        setting_id: 0,
    }
}
