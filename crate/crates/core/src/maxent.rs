//! Primal maximum-entropy IRL with the causal-invariance penalty.
//!
//! Demonstrations are modelled by the Gibbs trajectory distribution
//! `p(xi) ∝ mu0(s_0) prod_t p(s_{t+1}|s_t,a_t) exp(sum_t r(s_t))` over
//! trajectories of exactly `horizon` steps. Demonstrations that stop early in
//! an absorbing state are padded by staying there.
//!
//! Rewards are `r(s) = 1 . phi_eff(s)` with effective features
//! `phi_eff = psi * phi` (elementwise). For setting `e` the feature-matching
//! residual is `C_e = E_data[phi_eff(xi)] - E_model[phi_eff(xi)]`, which is
//! the gradient of the log-likelihood with respect to a multiplier `w` on the
//! effective features at `w = 1`; the invariance penalty is `||C_e||^2`.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{NetConfig, RewardModel, RmsProp};
use crate::mdp::TabularMdp;
use crate::regularizers::{l2_penalty, spectral_norm_penalty, PenaltyReport, SpectralState};
use crate::solver::{soft_value_iteration_with, state_reward_table, SoftBackup, SoftPolicy};
use crate::trajectories::{SettingDataset, Trajectory};

/// Model-side quantities of the Gibbs distribution for one reward.
#[derive(Debug, Clone)]
pub struct ModelExpectation {
    /// `horizon x n_states`, each row a distribution.
    pub svf: Array2<f64>,
    /// Expected visit count per state; sums to the horizon.
    pub state_marginal: Array1<f64>,
    pub feature_expectation: Vec<f64>,
    pub log_partition: f64,
    pub policy: SoftPolicy,
}

/// Expert-side sufficient statistics of one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SettingStats {
    pub setting_id: usize,
    /// Mean visit count per state over padded trajectories.
    pub visits: Array1<f64>,
    /// Mean of `log mu0(s_0) + sum_t log p(s_{t+1}|s_t,a_t)`.
    pub base_log_prob: f64,
    pub n_trajectories: usize,
}

/// Pads a trajectory that ended in an absorbing state to `horizon` steps.
pub fn pad_to_horizon(traj: &Trajectory, mdp: &TabularMdp) -> Result<Trajectory> {
    let horizon = mdp.horizon();
    if traj.is_empty() || traj.len() > horizon {
        return Err(Error::InvalidInput(format!(
            "trajectory length {} not in 1..={horizon}",
            traj.len()
        )));
    }
    let mut out = traj.clone();
    if traj.len() < horizon {
        let last = *traj.states.last().unwrap();
        if !mdp.is_absorbing(last) {
            return Err(Error::InvalidInput(format!(
                "trajectory of length {} stops in non-absorbing state {last}",
                traj.len()
            )));
        }
        let a = *traj.actions.last().unwrap();
        out.states.resize(horizon, last);
        out.actions.resize(horizon, a);
    }
    Ok(out)
}

impl SettingStats {
    pub fn new(mdp: &TabularMdp, ds: &SettingDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::InvalidInput(format!("setting {} is empty", ds.setting_id)));
        }
        let mut visits = Array1::zeros(mdp.n_states());
        let mut base = 0.0;
        for t in &ds.trajectories {
            t.validate(mdp)?;
            let p = pad_to_horizon(t, mdp)?;
            base += mdp.initial_dist()[p.states[0]].ln();
            for i in 0..p.len() {
                visits[p.states[i]] += 1.0;
                if i + 1 < p.len() {
                    base += mdp.prob(p.states[i], p.actions[i], p.states[i + 1]).ln();
                }
            }
        }
        let n = ds.len() as f64;
        Ok(Self {
            setting_id: ds.setting_id,
            visits: visits / n,
            base_log_prob: base / n,
            n_trajectories: ds.len(),
        })
    }

    pub fn feature_expectation(&self, features: &Array2<f64>) -> Vec<f64> {
        self.visits.dot(features).to_vec()
    }
}

/// Per-timestep state distribution of a soft policy. For the trajectory
/// backup the first row and the successors are reward-tilted, which makes
/// the result the exact marginal of the Gibbs model; for the causal backup
/// the first row is `mu0` and the successors follow the true dynamics.
pub fn expected_svf(mdp: &TabularMdp, policy: &SoftPolicy) -> Array2<f64> {
    let (horizon, n_s, n_a) = (policy.horizon(), mdp.n_states(), mdp.n_actions());
    let mut svf = Array2::zeros((horizon, n_s));
    svf.row_mut(0).assign(&Array1::from_vec(policy.start_dist(mdp)));
    for t in 0..horizon.saturating_sub(1) {
        for s in 0..n_s {
            let m = svf[[t, s]];
            if m == 0.0 {
                continue;
            }
            for a in 0..n_a {
                let pa = policy.probs[[t, s, a]];
                if pa == 0.0 {
                    continue;
                }
                let mp = m * pa;
                for (&(n, _), &w) in mdp.successors(s, a).iter().zip(policy.successor_weights(t, s, a)) {
                    svf[[t + 1, n]] += mp * w;
                }
            }
        }
    }
    svf
}

/// Directional derivative of the Gibbs state occupancy (`horizon x
/// n_states`) and of `log Z` when the state reward moves along `direction`.
/// Equivalently the product of the visit-count covariance with `direction`.
pub fn svf_jvp(mdp: &TabularMdp, policy: &SoftPolicy, direction: &[f64]) -> Result<(Array2<f64>, f64)> {
    if policy.backup != SoftBackup::Trajectory {
        return Err(Error::InvalidInput("occupancy derivative needs the trajectory backup".into()));
    }
    let (horizon, n_s, n_a) = (policy.horizon(), mdp.n_states(), mdp.n_actions());
    if direction.len() != n_s {
        return Err(Error::InvalidInput(format!("direction has {} entries, expected {n_s}", direction.len())));
    }
    let succ_weights = |t: usize, s: usize, a: usize| {
        mdp.successors(s, a)
            .iter()
            .zip(policy.successor_weights(t, s, a))
            .map(|(&(n, _), &w)| (n, w))
    };
    let mut v_dot = Array2::<f64>::zeros((horizon + 1, n_s));
    for t in (0..horizon).rev() {
        for s in 0..n_s {
            let mut acc = 0.0;
            for a in 0..n_a {
                let pa = policy.probs[[t, s, a]];
                if pa == 0.0 {
                    continue;
                }
                let cont: f64 = succ_weights(t, s, a).map(|(n, q)| q * v_dot[[t + 1, n]]).sum();
                acc += pa * (direction[s] + cont);
            }
            v_dot[[t, s]] = acc;
        }
    }
    let start = policy.start_dist(mdp);
    let log_z_dot: f64 = (0..n_s).map(|s| start[s] * v_dot[[0, s]]).sum();
    let mut svf = Array2::<f64>::zeros((horizon, n_s));
    let mut svf_dot = Array2::<f64>::zeros((horizon, n_s));
    for s in 0..n_s {
        svf[[0, s]] = start[s];
        svf_dot[[0, s]] = start[s] * (v_dot[[0, s]] - log_z_dot);
    }
    for t in 0..horizon.saturating_sub(1) {
        for s in 0..n_s {
            let (m, m_dot) = (svf[[t, s]], svf_dot[[t, s]]);
            if m == 0.0 && m_dot == 0.0 {
                continue;
            }
            for a in 0..n_a {
                let pa = policy.probs[[t, s, a]];
                if pa == 0.0 {
                    continue;
                }
                for (n, q) in succ_weights(t, s, a) {
                    let w = pa * q;
                    let w_dot = w * (direction[s] + v_dot[[t + 1, n]] - v_dot[[t, s]]);
                    svf[[t + 1, n]] += m * w;
                    svf_dot[[t + 1, n]] += m_dot * w + m * w_dot;
                }
            }
        }
    }
    Ok((svf_dot, log_z_dot))
}

/// Exact model expectation for a per-state effective feature table.
pub fn model_expectation(mdp: &TabularMdp, features: &Array2<f64>) -> Result<ModelExpectation> {
    if features.nrows() != mdp.n_states() {
        return Err(Error::InvalidInput(format!(
            "feature table has {} rows, expected {}",
            features.nrows(),
            mdp.n_states()
        )));
    }
    let reward: Vec<f64> = features.sum_axis(Axis(1)).to_vec();
    let table = state_reward_table(mdp, &reward)?;
    let policy = soft_value_iteration_with(mdp, &table, SoftBackup::Trajectory)?;
    let svf = expected_svf(mdp, &policy);
    let state_marginal = svf.sum_axis(Axis(0));
    Ok(ModelExpectation {
        feature_expectation: state_marginal.dot(features).to_vec(),
        log_partition: policy.log_partition(mdp),
        state_marginal,
        svf,
        policy,
    })
}

/// Effective features `psi * phi(s)`, one row per state.
pub fn effective_features(model: &RewardModel) -> Array2<f64> {
    let mut phi = model.net.eval_all();
    for mut row in phi.rows_mut() {
        row.iter_mut().zip(&model.head).for_each(|(f, h)| *f *= h);
    }
    phi
}

fn loss_from(stats: &SettingStats, reward: &Array1<f64>, log_z: f64) -> f64 {
    stats.base_log_prob + stats.visits.dot(reward) - log_z
}

/// Mean log-likelihood of the setting's demonstrations under the Gibbs model.
pub fn mle_loss(mdp: &TabularMdp, model: &RewardModel, ds: &SettingDataset) -> Result<f64> {
    let stats = SettingStats::new(mdp, ds)?;
    let eff = effective_features(model);
    let me = model_expectation(mdp, &eff)?;
    Ok(loss_from(&stats, &eff.sum_axis(Axis(1)), me.log_partition))
}

/// Gradient of [`mle_loss`] with respect to the head `psi`:
/// `E_data[phi(xi)] - E_model[phi(xi)]` with the raw network features.
pub fn mle_gradient_psi(mdp: &TabularMdp, model: &RewardModel, ds: &SettingDataset) -> Result<Vec<f64>> {
    let stats = SettingStats::new(mdp, ds)?;
    let me = model_expectation(mdp, &effective_features(model))?;
    let phi = model.net.eval_all();
    let diff = &stats.visits - &me.state_marginal;
    Ok(diff.dot(&phi).to_vec())
}

/// Feature-matching residual of one setting on effective features.
pub fn feature_residual(stats: &SettingStats, me: &ModelExpectation, features: &Array2<f64>) -> Vec<f64> {
    (&stats.visits - &me.state_marginal).dot(features).to_vec()
}

pub fn ci_penalty(c: &[f64]) -> f64 {
    c.iter().map(|x| x * x).sum()
}

/// How the penalty gradient treats the model expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyGradient {
    /// Differentiates through the model expectation as well.
    #[default]
    Exact,
    /// Holds the model occupancy fixed: upstream `2 (rho - D) C`.
    FrozenModel,
}

/// Gradient of `||C_e||^2` with respect to the effective feature table.
pub fn ci_penalty_feature_grad(
    mdp: &TabularMdp,
    stats: &SettingStats,
    me: &ModelExpectation,
    features: &Array2<f64>,
    c: &[f64],
    mode: PenaltyGradient,
) -> Result<Array2<f64>> {
    let (n_s, d) = features.dim();
    let diff = &stats.visits - &me.state_marginal;
    let mut up = Array2::zeros((n_s, d));
    for s in 0..n_s {
        for k in 0..d {
            up[[s, k]] = 2.0 * c[k] * diff[s];
        }
    }
    if mode == PenaltyGradient::Exact && c.iter().any(|&x| x != 0.0) {
        let u = features.dot(&Array1::from_vec(c.to_vec()));
        let (svf_dot, _) = svf_jvp(mdp, &me.policy, u.as_slice().unwrap())?;
        let g = svf_dot.sum_axis(Axis(0));
        for s in 0..n_s {
            for k in 0..d {
                up[[s, k]] -= 2.0 * g[s];
            }
        }
    }
    Ok(up)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SettingMode {
    /// Every update sums the per-setting objectives.
    #[default]
    SumOverSettings,
    /// Update `i` uses setting `i mod E` only.
    RoundRobin,
}

/// How the per-setting likelihoods enter the risk term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RiskWeighting {
    /// Mean log-likelihood over the union of all demonstrations: setting
    /// `e` is weighted by `n_e / N`.
    #[default]
    Pooled,
    /// Unweighted sum of per-setting mean log-likelihoods.
    PerSetting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub lambda_ci: f64,
    #[serde(default)]
    pub lambda_l2: f64,
    #[serde(default)]
    pub lambda_lip: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub setting_mode: SettingMode,
    #[serde(default)]
    pub risk_weighting: RiskWeighting,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default = "default_spectral_iters")]
    pub spectral_iters: usize,
    #[serde(default)]
    pub penalty_gradient: PenaltyGradient,
}

fn default_lr() -> f64 {
    crate::features::DEFAULT_LR
}

fn default_iters() -> usize {
    300
}

fn default_grad_tol() -> f64 {
    1e-5
}

fn default_spectral_iters() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ci: 0.0,
            lambda_l2: 0.0,
            lambda_lip: 0.0,
            lr: default_lr(),
            iters: default_iters(),
            seed: 0,
            setting_mode: SettingMode::default(),
            risk_weighting: RiskWeighting::default(),
            grad_tol: default_grad_tol(),
            net: NetConfig::default(),
            spectral_iters: default_spectral_iters(),
            penalty_gradient: PenaltyGradient::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ci", self.lambda_ci),
            ("lambda_l2", self.lambda_l2),
            ("lambda_lip", self.lambda_lip),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} = {v} must be a finite non-negative number")));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidInput(format!("learning rate {} must be positive", self.lr)));
        }
        if self.iters == 0 {
            return Err(Error::InvalidInput("iters must be at least 1".into()));
        }
        if self.spectral_iters == 0 {
            return Err(Error::InvalidInput("spectral_iters must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::InvalidInput(format!("grad_tol {} must be non-negative", self.grad_tol)));
        }
        Ok(())
    }

    /// `"erm"` when no regularizer is active.
    pub fn method_label(&self) -> String {
        let mut parts = Vec::new();
        if self.lambda_ci > 0.0 {
            parts.push(format!("ci-{}", self.lambda_ci));
        }
        if self.lambda_l2 > 0.0 {
            parts.push(format!("l2-{}", self.lambda_l2));
        }
        if self.lambda_lip > 0.0 {
            parts.push(format!("lip-{}", self.lambda_lip));
        }
        if parts.is_empty() {
            "erm".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub settings: Vec<PenaltyReport>,
    /// Value of the minimised objective before the update.
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: RewardModel,
    pub trace: Vec<IterationRecord>,
    /// True when the gradient-norm threshold stopped training early.
    pub stopped_early: bool,
}

/// Objective and gradient of one training step.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub objective: f64,
    pub grad: Vec<f64>,
    pub reports: Vec<PenaltyReport>,
}

/// Everything needed to evaluate the training objective for a fixed
/// demonstration set.
pub struct Objective<'a> {
    pub mdp: &'a TabularMdp,
    pub stats: Vec<SettingStats>,
    pub cfg: &'a TrainConfig,
}

impl<'a> Objective<'a> {
    pub fn new(mdp: &'a TabularMdp, settings: &[SettingDataset], cfg: &'a TrainConfig) -> Result<Self> {
        if settings.is_empty() {
            return Err(Error::InvalidInput("training needs at least one setting".into()));
        }
        let stats = settings.iter().map(|s| SettingStats::new(mdp, s)).collect::<Result<_>>()?;
        Ok(Self { mdp, stats, cfg })
    }

    /// Objective `sum_e [-w_e L_e + lambda_ci ||C_e||^2] + l2 + spectral` over
    /// the `active` settings, with its gradient on `model.params()`.
    pub fn evaluate(&self, model: &mut RewardModel, spectral: &mut SpectralState, active: &[usize]) -> Result<StepEval> {
        let cfg = self.cfg;
        let phi = model.net.forward_all();
        let mut eff = phi.clone();
        for mut row in eff.rows_mut() {
            row.iter_mut().zip(&model.head).for_each(|(f, h)| *f *= h);
        }
        let reward = eff.sum_axis(Axis(1));
        let me = model_expectation(self.mdp, &eff)?;
        let (n_s, d) = eff.dim();

        let to_params = |model: &RewardModel, up: &Array2<f64>| -> Result<Vec<f64>> {
            let mut up_phi = up.clone();
            for mut row in up_phi.rows_mut() {
                row.iter_mut().zip(&model.head).for_each(|(u, h)| *u *= h);
            }
            let mut g = model.net.backward_table(&up_phi)?;
            g.extend((0..d).map(|k| (0..n_s).map(|s| up[[s, k]] * phi[[s, k]]).sum::<f64>()));
            Ok(g)
        };

        let total: usize = self.stats.iter().map(|s| s.n_trajectories).sum();
        let risk_weight = |stats: &SettingStats| match cfg.risk_weighting {
            RiskWeighting::Pooled => stats.n_trajectories as f64 / total as f64,
            RiskWeighting::PerSetting => 1.0,
        };
        let mut objective = 0.0;
        let mut upstream = Array2::<f64>::zeros((n_s, d));
        let mut reports = Vec::with_capacity(self.stats.len());
        for (e, stats) in self.stats.iter().enumerate() {
            let loss = loss_from(stats, &reward, me.log_partition);
            let c = feature_residual(stats, &me, &eff);
            let pen = ci_penalty(&c);
            let pen_up = ci_penalty_feature_grad(self.mdp, stats, &me, &eff, &c, cfg.penalty_gradient)?;
            let pen_grad_norm = norm(&to_params(model, &pen_up)?);
            if active.contains(&e) {
                let w = risk_weight(stats);
                objective += -w * loss + cfg.lambda_ci * pen;
                let diff = &stats.visits - &me.state_marginal;
                for s in 0..n_s {
                    for k in 0..d {
                        upstream[[s, k]] += -w * diff[s] + cfg.lambda_ci * pen_up[[s, k]];
                    }
                }
            }
            reports.push(PenaltyReport {
                setting_id: stats.setting_id,
                base_loss: loss,
                penalty_value: pen,
                penalty_grad_norm: pen_grad_norm,
                lambda: cfg.lambda_ci,
            });
        }
        let mut grad = to_params(model, &upstream)?;
        if cfg.lambda_l2 > 0.0 {
            let flat: Vec<f64> = phi.iter().copied().collect();
            let (value, g) = l2_penalty(&flat, cfg.lambda_l2);
            objective += value;
            let g = Array2::from_shape_vec((n_s, d), g).map_err(|e| Error::InvalidInput(e.to_string()))?;
            let net_g = model.net.backward_table(&g)?;
            grad.iter_mut().zip(net_g).for_each(|(a, b)| *a += b);
        }
        if cfg.lambda_lip > 0.0 {
            let (value, g, _) = spectral_norm_penalty(&model.net.mlp, spectral, cfg.spectral_iters)?;
            objective += cfg.lambda_lip * value;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += cfg.lambda_lip * b);
        }
        Ok(StepEval {
            objective,
            grad,
            reports,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Feature-matching IRL with the invariance penalty, trained with RMSProp.
pub fn train_ci_fmirl(
    mdp: &TabularMdp,
    settings: &[SettingDataset],
    model: RewardModel,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if model.n_states() != mdp.n_states() {
        return Err(Error::InvalidInput(format!(
            "reward model covers {} states, MDP has {}",
            model.n_states(),
            mdp.n_states()
        )));
    }
    let objective = Objective::new(mdp, settings, cfg)?;
    let mut model = model;
    let mut opt = RmsProp::new(model.n_params(), cfg.lr);
    let mut spectral = SpectralState::default();
    let mut trace: Vec<IterationRecord> = Vec::with_capacity(cfg.iters);
    let all: Vec<usize> = (0..settings.len()).collect();
    let mut stopped_early = false;
    for it in 0..cfg.iters {
        let active = match cfg.setting_mode {
            SettingMode::SumOverSettings => all.clone(),
            SettingMode::RoundRobin => vec![it % settings.len()],
        };
        let step = objective.evaluate(&mut model, &mut spectral, &active)?;
        let grad_norm = norm(&step.grad);
        let finite = step.objective.is_finite()
            && grad_norm.is_finite()
            && step
                .reports
                .iter()
                .all(|r| r.base_loss.is_finite() && r.penalty_value.is_finite() && r.penalty_grad_norm.is_finite());
        if !finite {
            return Err(Error::TrainingDiverged { iteration: it, trace });
        }
        trace.push(IterationRecord {
            iteration: it,
            settings: step.reports,
            objective: step.objective,
            grad_norm,
        });
        if grad_norm < cfg.grad_tol {
            stopped_early = true;
            break;
        }
        let mut params = model.params();
        opt.step(&mut params, &step.grad);
        model.set_params(&params)?;
    }
    log::debug!("trained {} for {} iterations", cfg.method_label(), trace.len());
    Ok(TrainResult {
        model,
        trace,
        stopped_early,
    })
}

/// Wide trace CSV: iteration, per-setting loss, per-setting penalty,
/// per-setting penalty gradient norm, objective, total gradient norm.
pub fn trace_csv(trace: &[IterationRecord]) -> String {
    let n = trace.first().map_or(0, |r| r.settings.len());
    let mut out = String::from("iteration");
    for e in 0..n {
        let _ = write!(out, ",loss_{e}");
    }
    for e in 0..n {
        let _ = write!(out, ",penalty_{e}");
    }
    for e in 0..n {
        let _ = write!(out, ",penalty_grad_norm_{e}");
    }
    out.push_str(",objective,grad_norm\n");
    for r in trace {
        let _ = write!(out, "{}", r.iteration);
        for s in &r.settings {
            let _ = write!(out, ",{}", s.base_loss);
        }
        for s in &r.settings {
            let _ = write!(out, ",{}", s.penalty_value);
        }
        for s in &r.settings {
            let _ = write!(out, ",{}", s.penalty_grad_norm);
        }
        let _ = writeln!(out, ",{},{}", r.objective, r.grad_norm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Activation, Encoder, FeatureNet, InputEncoding, Mlp};
    use crate::mdp::{build_gridworld, Cell, GridworldSpec};
    use crate::oracles::{enumerate_gibbs, finite_diff, max_rel_error};
    use crate::solver::tests::random_mdp;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot_model(n_s: usize, d: usize, seed: u64) -> RewardModel {
        // a 1 x n grid so one-hot inputs cover n states
        let enc = Encoder::states(InputEncoding::OneHot, n_s, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = FeatureNet::from_mlp(enc, Mlp::new(&[n_s, 3, d], Activation::Tanh, &mut rng).unwrap());
        RewardModel {
            net,
            head: (0..d).map(|_| rng.gen_range(0.5..1.5)).collect(),
        }
    }

    fn sample_dataset(mdp: &TabularMdp, n: usize, seed: u64) -> SettingDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = crate::solver::soft_value_iteration(mdp, &vec![0.0; mdp.n_states()]).unwrap();
        let trajs = (0..n)
            .map(|_| {
                let t = crate::solver::sample_episode(mdp, &policy, &mut rng);
                pad_to_horizon(&t, mdp).unwrap_or(t)
            })
            .filter(|t| t.len() == mdp.horizon())
            .collect();
        SettingDataset::new(0, trajs, "").unwrap()
    }

    fn nonabsorbing_mdp(rng: &mut ChaCha8Rng, n_s: usize, horizon: usize) -> TabularMdp {
        loop {
            let m = random_mdp(rng, n_s, 2, horizon, false);
            if (0..n_s).all(|s| !m.is_absorbing(s)) {
                return m;
            }
        }
    }

    #[test]
    fn deterministic_chain_svf_is_one_hot() {
        let n = 4;
        let mut t = Array3::zeros((n, 1, n));
        for s in 0..n {
            t[[s, 0, (s + 1).min(n - 1)]] = 1.0;
        }
        let mut mu = Array1::zeros(n);
        mu[0] = 1.0;
        let mdp = TabularMdp::new(t, mu, 0.9, 4).unwrap();
        let p = soft_value_iteration_with(&mdp, &state_reward_table(&mdp, &[0.3, 0.1, -0.2, 1.0]).unwrap(), SoftBackup::Trajectory).unwrap();
        let svf = expected_svf(&mdp, &p);
        for t in 0..4 {
            for s in 0..4 {
                assert_eq!(svf[[t, s]], if s == t { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn svf_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for backup in [SoftBackup::Trajectory, SoftBackup::Causal] {
            let mdp = random_mdp(&mut rng, 5, 3, 6, true);
            let table = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-2.0..2.0));
            let p = soft_value_iteration_with(&mdp, &table, backup).unwrap();
            for row in expected_svf(&mdp, &p).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_svf_matches_policy_enumeration_on_2x2_grid() {
        let spec = GridworldSpec {
            width: 2,
            height: 2,
            obstacles: Default::default(),
            start_cells: [Cell(0, 0)].into(),
            goal_cells: [Cell(1, 1)].into(),
            slip_prob: 0.2,
            goal_reward: 1.0,
            step_reward: -0.1,
            discount: 0.9,
            horizon: 3,
        };
        let world = build_gridworld(&spec).unwrap();
        let mdp = &world.mdp;
        let p = soft_value_iteration_with(mdp, &state_reward_table(mdp, &world.truth).unwrap(), SoftBackup::Causal).unwrap();
        let svf = expected_svf(mdp, &p);
        // enumerate policy x dynamics over (s0, a0, s1, a1, s2)
        let mut brute = Array2::<f64>::zeros((3, 4));
        let t = mdp.transition();
        let mu = mdp.initial_dist();
        for s0 in 0..4 {
            for a0 in 0..5 {
                for s1 in 0..4 {
                    for a1 in 0..5 {
                        for s2 in 0..4 {
                            let pr = mu[s0] * p.probs[[0, s0, a0]] * t[[s0, a0, s1]] * p.probs[[1, s1, a1]] * t[[s1, a1, s2]];
                            brute[[0, s0]] += pr;
                            brute[[1, s1]] += pr;
                            brute[[2, s2]] += pr;
                        }
                    }
                }
            }
        }
        // the first two rows are counted once per (a1, s2) continuation
        let diff = (&svf - &brute).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn gibbs_svf_and_log_z_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..10 {
            let n_s = 2 + case % 3;
            let horizon = 1 + case % 4;
            let mdp = random_mdp(&mut rng, n_s, 2, horizon, true);
            let reward: Vec<f64> = (0..n_s).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let features = Array2::from_shape_fn((n_s, 1), |(s, _)| reward[s]);
            let me = model_expectation(&mdp, &features).unwrap();
            let oracle = enumerate_gibbs(&mdp, &reward, horizon).unwrap();
            let brute = oracle.state_marginals(n_s);
            let diff = (&me.svf - &brute).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(diff < 1e-10, "case {case}: {diff}");
            assert!((me.log_partition - oracle.log_z).abs() < 1e-10);
            assert!((me.state_marginal.sum() - horizon as f64).abs() < 1e-10);
            let fe = oracle.feature_expectation(&features);
            assert!((fe[0] - me.feature_expectation[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mdp = random_mdp(&mut rng, 5, 3, 5, true);
        let reward: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dir: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let me_at = |eps: f64| {
            let r: Vec<f64> = reward.iter().zip(&dir).map(|(r, u)| r + eps * u).collect();
            model_expectation(&mdp, &Array2::from_shape_fn((5, 1), |(s, _)| r[s])).unwrap()
        };
        let me = me_at(0.0);
        let (svf_dot, lz_dot) = svf_jvp(&mdp, &me.policy, &dir).unwrap();
        let h = 1e-5;
        let (up, down) = (me_at(h), me_at(-h));
        let fd = (&up.svf - &down.svf) / (2.0 * h);
        let diff = (&svf_dot - &fd).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-8, "{diff}");
        let lz_fd = (up.log_partition - down.log_partition) / (2.0 * h);
        assert!((lz_dot - lz_fd).abs() < 1e-8);
        // d log Z / d eps = D . u
        assert!((lz_dot - me.state_marginal.dot(&Array1::from_vec(dir.clone()))).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_loss_is_dynamics_log_prob() {
        let mut t = Array3::zeros((3, 1, 3));
        t[[0, 0, 1]] = 0.4;
        t[[0, 0, 2]] = 0.6;
        t[[1, 0, 1]] = 1.0;
        t[[2, 0, 0]] = 0.5;
        t[[2, 0, 2]] = 0.5;
        let mdp = TabularMdp::new(t, Array1::from_vec(vec![1.0, 0.0, 0.0]), 0.9, 3).unwrap();
        let mut model = one_hot_model(3, 1, 2);
        model.net.mlp.layers.iter_mut().for_each(|l| l.weight.fill(0.0));
        model.net.mlp.layers.last_mut().unwrap().bias.fill(0.37);
        let traj = Trajectory {
            states: vec![0, 2, 2],
            actions: vec![0, 0, 0],
            setting_id: 0,
        };
        let ds = SettingDataset::new(0, vec![traj], "").unwrap();
        let loss = mle_loss(&mdp, &model, &ds).unwrap();
        assert!((loss - (0.6f64 * 0.5).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_enumeration_and_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = nonabsorbing_mdp(&mut rng, 3, 2);
        let model = one_hot_model(3, 2, 4);
        let ds = sample_dataset(&mdp, 6, 5);
        let loss = mle_loss(&mdp, &model, &ds).unwrap();
        let reward = model.state_rewards();
        let oracle = enumerate_gibbs(&mdp, &reward, 2).unwrap();
        let expected: f64 = ds
            .trajectories
            .iter()
            .map(|t| oracle.log_prob_of(&t.states, &t.actions))
            .sum::<f64>()
            / ds.len() as f64;
        assert!((loss - expected).abs() < 1e-10);
        let mut shifted = model.clone();
        let last = shifted.net.mlp.layers.len() - 1;
        // +c on the first output raises every reward by c * psi_0
        shifted.net.mlp.layers[last].bias[0] += 2.5;
        assert!((mle_loss(&mdp, &shifted, &ds).unwrap() - loss).abs() < 1e-9);
    }

    #[test]
    fn psi_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..10u64 {
            let mdp = nonabsorbing_mdp(&mut rng, 4, 3);
            let model = one_hot_model(4, 2, 30 + case);
            let ds = sample_dataset(&mdp, 5, case);
            let analytic = mle_gradient_psi(&mdp, &model, &ds).unwrap();
            let fd = finite_diff(
                |psi| {
                    let mut m = model.clone();
                    m.head = psi.to_vec();
                    mle_loss(&mdp, &m, &ds).unwrap()
                },
                &model.head,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_error(&analytic, &fd, 1e-6) <= 1e-4, "case {case}");
        }
    }

    #[test]
    fn model_generated_expectation_gives_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = random_mdp(&mut rng, 4, 2, 3, true);
        let eff = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let me = model_expectation(&mdp, &eff).unwrap();
        let stats = SettingStats {
            setting_id: 0,
            visits: me.state_marginal.clone(),
            base_log_prob: 0.0,
            n_trajectories: 1,
        };
        let c = feature_residual(&stats, &me, &eff);
        assert!(ci_penalty(&c) < 1e-28);
        assert_eq!(ci_penalty(&[3.0, 4.0]), 25.0);
        let up = ci_penalty_feature_grad(&mdp, &stats, &me, &eff, &[0.0, 0.0], PenaltyGradient::Exact).unwrap();
        assert!(up.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn penalty_feature_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mdp = nonabsorbing_mdp(&mut rng, 4, 4);
        let ds = sample_dataset(&mdp, 7, 3);
        let stats = SettingStats::new(&mdp, &ds).unwrap();
        let eff = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let pen = |e: &[f64]| {
            let f = Array2::from_shape_vec((4, 2), e.to_vec()).unwrap();
            let me = model_expectation(&mdp, &f).unwrap();
            ci_penalty(&feature_residual(&stats, &me, &f))
        };
        let me = model_expectation(&mdp, &eff).unwrap();
        let c = feature_residual(&stats, &me, &eff);
        let up = ci_penalty_feature_grad(&mdp, &stats, &me, &eff, &c, PenaltyGradient::Exact).unwrap();
        let fd = finite_diff(pen, eff.as_slice().unwrap(), 1e-6).unwrap();
        assert!(max_rel_error(up.as_slice().unwrap(), &fd, 1e-6) < 1e-5);
        let frozen = ci_penalty_feature_grad(&mdp, &stats, &me, &eff, &c, PenaltyGradient::FrozenModel).unwrap();
        assert!(max_rel_error(frozen.as_slice().unwrap(), &fd, 1e-6) > 1e-3);
    }

    #[test]
    fn objective_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = nonabsorbing_mdp(&mut rng, 4, 3);
        let settings = vec![sample_dataset(&mdp, 6, 1), {
            let mut d = sample_dataset(&mdp, 3, 2);
            d.setting_id = 1;
            d.trajectories.iter_mut().for_each(|t| t.setting_id = 1);
            d
        }];
        let cfg = TrainConfig {
            lambda_ci: 0.7,
            lambda_l2: 0.05,
            lambda_lip: 0.1,
            spectral_iters: 400,
            ..Default::default()
        };
        let obj = Objective::new(&mdp, &settings, &cfg).unwrap();
        let model = one_hot_model(4, 2, 11);
        let mut m = model.clone();
        let mut st = SpectralState::default();
        let step = obj.evaluate(&mut m, &mut st, &[0, 1]).unwrap();
        let fd = finite_diff(
            |p| {
                let mut m = model.clone();
                m.set_params(p).unwrap();
                // fresh power iteration converges to the exact top singular value
                let mut st = SpectralState::default();
                obj.evaluate(&mut m, &mut st, &[0, 1]).unwrap().objective
            },
            &model.params(),
            1e-6,
        )
        .unwrap();
        assert!(max_rel_error(&step.grad, &fd, 1e-5) < 1e-3);
    }

    #[test]
    fn single_setting_recovers_expert_visitation() {
        let spec = GridworldSpec {
            width: 4,
            height: 4,
            obstacles: Default::default(),
            start_cells: [Cell(0, 0)].into(),
            goal_cells: [Cell(3, 3)].into(),
            slip_prob: 0.0,
            goal_reward: 1.0,
            step_reward: -0.1,
            discount: 0.9,
            horizon: 8,
        };
        let world = build_gridworld(&spec).unwrap();
        let mdp = &world.mdp;
        let iv = crate::trajectories::PreferenceIntervention {
            bonus_cells: vec![Cell(0, 3)],
            bonus_magnitude: 0.5,
            n_trajectories: 4000,
        };
        let ds = crate::trajectories::gen_expert_settings(&world, &[iv], 0.5, 3).unwrap();
        let enc = Encoder::states(InputEncoding::OneHot, 4, 4);
        let mut mlp = Mlp::zeros(&[16, 1], Activation::Linear).unwrap();
        mlp.layers[0].weight.fill(0.0);
        let model = RewardModel {
            net: FeatureNet::from_mlp(enc, mlp),
            head: vec![1.0],
        };
        // step-size annealing by restarting from the previous solution
        let mut model = model;
        for lr in [0.05, 0.005, 0.0005] {
            let cfg = TrainConfig {
                lr,
                iters: 800,
                ..Default::default()
            };
            model = train_ci_fmirl(mdp, &ds, model, &cfg).unwrap().model;
        }
        let res = TrainResult {
            model,
            trace: vec![],
            stopped_early: false,
        };
        let stats = SettingStats::new(mdp, &ds[0]).unwrap();
        let me = model_expectation(mdp, &effective_features(&res.model)).unwrap();
        // per-timestep expert occupancy
        let mut emp = Array2::<f64>::zeros((8, 16));
        for t in &ds[0].trajectories {
            let p = pad_to_horizon(t, mdp).unwrap();
            for (i, &s) in p.states.iter().enumerate() {
                emp[[i, s]] += 1.0 / ds[0].len() as f64;
            }
        }
        for t in 0..8 {
            let tv: f64 = (0..16).map(|s| (emp[[t, s]] - me.svf[[t, s]]).abs()).sum::<f64>() * 0.5;
            assert!(tv <= 0.05, "t {t}: tv {tv}");
        }
        assert!(ci_penalty(&feature_residual(&stats, &me, &effective_features(&res.model))) < 1e-2);
    }

    #[test]
    fn huge_lambda_shrinks_penalty() {
        let spec = GridworldSpec {
            width: 4,
            height: 4,
            obstacles: Default::default(),
            start_cells: [Cell(0, 0)].into(),
            goal_cells: [Cell(3, 3)].into(),
            slip_prob: 0.1,
            goal_reward: 1.0,
            step_reward: -0.1,
            discount: 0.9,
            horizon: 10,
        };
        let world = build_gridworld(&spec).unwrap();
        let ivs: Vec<_> = [(Cell(3, 0), 8), (Cell(0, 3), 2)]
            .iter()
            .map(|&(c, n)| crate::trajectories::PreferenceIntervention {
                bonus_cells: vec![c],
                bonus_magnitude: 0.8,
                n_trajectories: n,
            })
            .collect();
        let ds = crate::trajectories::gen_expert_settings(&world, &ivs, 0.3, 1).unwrap();
        let enc = Encoder::states(InputEncoding::Coordinates, 4, 4);
        // total penalty per iteration
        let run = |lambda: f64| -> Vec<f64> {
            let cfg = TrainConfig {
                lambda_ci: lambda,
                iters: 30,
                lr: 0.01,
                ..Default::default()
            };
            let model = RewardModel::new(enc, &cfg.net, 5).unwrap();
            let res = train_ci_fmirl(&world.mdp, &ds, model, &cfg).unwrap();
            res.trace
                .iter()
                .map(|r| r.settings.iter().map(|s| s.penalty_value).sum())
                .collect()
        };
        let (ci, erm) = (run(1e6), run(0.0));
        assert!(ci.windows(2).all(|w| w[1] <= w[0]), "{ci:?}");
        assert!(ci[29] < erm[29], "{ci:?} vs {erm:?}");
    }

    #[test]
    fn trace_csv_shape() {
        let rec = IterationRecord {
            iteration: 0,
            settings: vec![
                PenaltyReport {
                    setting_id: 0,
                    base_loss: -1.0,
                    penalty_value: 0.5,
                    penalty_grad_norm: 0.1,
                    lambda: 0.0,
                };
                2
            ],
            objective: 2.0,
            grad_norm: 0.3,
        };
        let csv = trace_csv(&[rec.clone(), IterationRecord { iteration: 1, ..rec }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "iteration,loss_0,loss_1,penalty_0,penalty_1,penalty_grad_norm_0,penalty_grad_norm_1,objective,grad_norm"
        );
        assert_eq!(lines[2], "1,-1,-1,0.5,0.5,0.1,0.1,2,0.3");
    }
}
