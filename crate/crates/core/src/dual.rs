//! Adversarial side: a logistic discriminator between expert and policy
//! transitions, its invariance penalty, the importance-sampled dual
//! gradient, and a small adversarial IRL loop with an exact soft agent.

use std::f64::consts::LN_2;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Adam, Checkpoint, Encoder, FeatureNet, InputEncoding, NamedTensor, NetConfig, RewardFunction, RewardModel};
use crate::maxent::{pad_to_horizon, SettingStats};
use crate::mdp::{GridWorld, TabularMdp};
use crate::oracles::enumerate_gibbs;
use crate::regularizers::{irm_scalar_penalty, log_sigmoid, sigmoid, LogisticLoss};
use crate::solver::{rollout, sample_index, soft_value_iteration_with, state_reward_table, SoftBackup, SoftPolicy};
use crate::trajectories::{SettingDataset, Trajectory};

/// A `(state, action)` pair.
pub type Transition = (usize, usize);

/// Every `(s_t, a_t)` pair of the given trajectories.
pub fn transitions<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Vec<Transition> {
    trajs
        .into_iter()
        .flat_map(|t| t.states.iter().copied().zip(t.actions.iter().copied()))
        .collect()
}

/// Logit `z(s, a) = psi . phi(s, a)`; `g_D = sigmoid(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: FeatureNet,
    pub head: Vec<f64>,
    pub n_actions: usize,
}

impl Discriminator {
    /// With `state_only` the action is not part of the input.
    pub fn new(
        width: usize,
        height: usize,
        n_actions: usize,
        state_only: bool,
        cfg: &NetConfig,
        seed: u64,
    ) -> Result<Self> {
        let encoder = Encoder {
            encoding: cfg.encoding,
            width,
            height,
            n_actions: (!state_only).then_some(n_actions),
        };
        let net = FeatureNet::new(encoder, cfg, seed)?;
        let head = vec![1.0; net.output_dim()];
        Ok(Self { net, head, n_actions })
    }

    pub fn from_net(net: FeatureNet, n_actions: usize) -> Self {
        let head = vec![1.0; net.output_dim()];
        Self { net, head, n_actions }
    }

    pub fn state_only(&self) -> bool {
        self.net.encoder.n_actions.is_none()
    }

    pub fn n_states(&self) -> usize {
        self.net.encoder.n_states()
    }

    fn item(&self, (s, a): Transition) -> Result<usize> {
        if s >= self.n_states() || a >= self.n_actions {
            return Err(Error::InvalidInput(format!("transition ({s}, {a}) out of range")));
        }
        Ok(if self.state_only() { s } else { s * self.n_actions + a })
    }

    fn item_logits(&self, phi: &Array2<f64>) -> Vec<f64> {
        phi.rows()
            .into_iter()
            .map(|r| r.iter().zip(&self.head).map(|(f, h)| f * h).sum())
            .collect()
    }

    pub fn logit(&self, t: Transition) -> Result<f64> {
        let phi = self.net.eval(self.item(t)?)?;
        Ok(phi.iter().zip(&self.head).map(|(f, h)| f * h).sum())
    }

    pub fn prob(&self, t: Transition) -> Result<f64> {
        Ok(sigmoid(self.logit(t)?))
    }

    /// `n_states x n_actions` table of logits.
    pub fn logit_table(&self) -> Array2<f64> {
        let z = self.item_logits(&self.net.eval_all());
        let (n_s, n_a) = (self.n_states(), self.n_actions);
        if self.state_only() {
            Array2::from_shape_fn((n_s, n_a), |(s, _)| z[s])
        } else {
            Array2::from_shape_fn((n_s, n_a), |(s, a)| z[s * n_a + a])
        }
    }

    /// Network parameters followed by the head.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.net.params();
        p.extend(&self.head);
        p
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params() + self.head.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.net.n_params();
        if params.len() != n + self.head.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                n + self.head.len(),
                params.len()
            )));
        }
        self.net.set_params(&params[..n])?;
        self.head.copy_from_slice(&params[n..]);
        Ok(())
    }
}

impl Discriminator {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_net("discriminator", &self.net);
        c.tensors.push(NamedTensor {
            name: "head".into(),
            shape: vec![self.head.len()],
            data: self.head.clone(),
        });
        c
    }

    /// `n_actions` is only consulted for state-only discriminators; otherwise
    /// it must agree with the encoder.
    pub fn from_checkpoint(c: &Checkpoint, n_actions: usize) -> Result<Self> {
        c.expect_kind("discriminator")?;
        if let Some(n) = c.encoder.n_actions {
            if n != n_actions {
                return Err(Error::InvalidInput(format!(
                    "discriminator encodes {n} actions, expected {n_actions}"
                )));
            }
        }
        let net = c.to_net()?;
        let head = c.tensor("head", &[net.output_dim()])?.to_vec();
        Ok(Self { net, head, n_actions })
    }
}

impl RewardFunction for Discriminator {
    fn reward_table(&self, mdp: &TabularMdp) -> Result<Array2<f64>> {
        if mdp.n_states() != self.n_states() || mdp.n_actions() != self.n_actions {
            return Err(Error::InvalidInput(format!(
                "discriminator covers {}x{} but the MDP has {}x{}",
                self.n_states(),
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(self.logit_table())
    }
}

/// Loss, penalty and gradient of one discriminator evaluation.
#[derive(Debug, Clone)]
pub struct DiscEval {
    /// `E_expert[log g_D] + E_policy[log(1 - g_D)]`.
    pub objective: f64,
    /// `(objective + ln 4) / 2`, clipped to `[0, ln 2]`.
    pub js_estimate: f64,
    pub penalty: f64,
    /// Gradient of `-objective + lambda * penalty`.
    pub grad: Vec<f64>,
    pub saturated: bool,
}

pub const SATURATION_LOGIT: f64 = 20.0;

pub fn js_from_objective(objective: f64) -> f64 {
    ((objective + 4f64.ln()) / 2.0).clamp(0.0, LN_2)
}

fn check_batches(expert: &[Transition], policy: &[Transition]) -> Result<()> {
    if expert.is_empty() || policy.is_empty() {
        return Err(Error::InvalidInput("discriminator batches must be non-empty".into()));
    }
    Ok(())
}

/// BCE objective plus `lambda` times the invariance penalty, with gradients
/// with respect to [`Discriminator::params`].
pub fn evaluate_discriminator(
    disc: &mut Discriminator,
    expert: &[Transition],
    policy: &[Transition],
    lambda: f64,
) -> Result<DiscEval> {
    let items_e = expert.iter().map(|&t| disc.item(t)).collect::<Result<Vec<_>>>()?;
    let items_p = policy.iter().map(|&t| disc.item(t)).collect::<Result<Vec<_>>>()?;
    let phi = disc.net.forward_all();
    let z = disc.item_logits(&phi);
    let ze: Vec<f64> = items_e.iter().map(|&i| z[i]).collect();
    let zp: Vec<f64> = items_p.iter().map(|&i| z[i]).collect();
    let (ce, cp) = (1.0 / ze.len().max(1) as f64, 1.0 / zp.len().max(1) as f64);

    let objective = ce * ze.iter().map(|&v| log_sigmoid(v)).sum::<f64>()
        + cp * zp.iter().map(|&v| log_sigmoid(-v)).sum::<f64>();
    let loss = LogisticLoss::new(ze.clone(), zp.clone());
    let penalty = irm_scalar_penalty(&loss, 1.0);

    let mut dz = vec![0.0; z.len()];
    for (&i, &v) in items_e.iter().zip(&ze) {
        dz[i] -= ce * sigmoid(-v);
    }
    for (&i, &v) in items_p.iter().zip(&zp) {
        dz[i] += cp * sigmoid(v);
    }
    if lambda != 0.0 {
        let (ge, gp) = loss.penalty_logit_grads();
        for (&i, g) in items_e.iter().zip(ge) {
            dz[i] += lambda * g;
        }
        for (&i, g) in items_p.iter().zip(gp) {
            dz[i] += lambda * g;
        }
    }
    let grad = logit_backward(disc, &phi, &dz)?;
    let saturated = ze.iter().chain(&zp).all(|v| v.abs() > SATURATION_LOGIT);
    Ok(DiscEval {
        objective,
        js_estimate: js_from_objective(objective),
        penalty,
        grad,
        saturated,
    })
}

fn logit_backward(disc: &Discriminator, phi: &Array2<f64>, dz: &[f64]) -> Result<Vec<f64>> {
    let d = disc.head.len();
    let mut upstream = Array2::zeros((dz.len(), d));
    let mut head_grad = vec![0.0; d];
    for (i, &g) in dz.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for k in 0..d {
            upstream[[i, k]] = g * disc.head[k];
            head_grad[k] += g * phi[[i, k]];
        }
    }
    let mut grad = disc.net.backward_table(&upstream)?;
    grad.extend(head_grad);
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct BceResult {
    pub objective: f64,
    pub js_estimate: f64,
    /// Gradient of the loss `-objective`.
    pub grad: Vec<f64>,
}

/// Maximisation-form BCE objective with uniform weights per batch.
pub fn bce_loss(disc: &mut Discriminator, expert: &[Transition], policy: &[Transition]) -> Result<BceResult> {
    check_batches(expert, policy)?;
    let ev = evaluate_discriminator(disc, expert, policy, 0.0)?;
    Ok(BceResult {
        objective: ev.objective,
        js_estimate: ev.js_estimate,
        grad: ev.grad,
    })
}

#[derive(Debug, Clone)]
pub struct BcePenalty {
    pub setting_id: usize,
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `(d L_BCE(w z) / dw at w = 1)^2` and its parameter gradient.
pub fn ci_bce_penalty(
    disc: &mut Discriminator,
    expert: &[Transition],
    policy: &[Transition],
    setting_id: usize,
) -> Result<BcePenalty> {
    check_batches(expert, policy)?;
    let with = evaluate_discriminator(disc, expert, policy, 1.0)?;
    let without = evaluate_discriminator(disc, expert, policy, 0.0)?;
    Ok(BcePenalty {
        setting_id,
        value: with.penalty,
        grad: with.grad.iter().zip(&without.grad).map(|(a, b)| a - b).collect(),
    })
}

/// Samples from a sampling distribution `q` with their densities under `q`
/// and under the Gibbs model `p`.
#[derive(Debug, Clone)]
pub struct SamplerEstimate {
    pub samples: Vec<Trajectory>,
    pub log_q: Vec<f64>,
    pub log_p: Vec<f64>,
    /// `q / p` per sample.
    pub ratios: Vec<f64>,
    /// Weight of each sample in an expectation over `q`: `q(xi)` for an
    /// exhaustive list, `1 / N` for draws.
    pub masses: Vec<f64>,
    pub exact: bool,
}

/// `log p(xi)` under the Gibbs model with state reward `reward`, after
/// padding to the horizon.
pub fn gibbs_log_prob(mdp: &TabularMdp, reward: &[f64], log_z: f64, traj: &Trajectory) -> Result<f64> {
    let t = pad_to_horizon(traj, mdp)?;
    let mut lp = mdp.initial_dist()[t.states[0]].ln() - log_z;
    for i in 0..t.len() {
        lp += reward[t.states[i]];
        if i + 1 < t.len() {
            lp += mdp.prob(t.states[i], t.actions[i], t.states[i + 1]).ln();
        }
    }
    Ok(lp)
}

/// Full-horizon draws from the Gibbs model represented by a trajectory-backup
/// soft policy.
pub fn sample_gibbs(mdp: &TabularMdp, policy: &SoftPolicy, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if policy.backup != SoftBackup::Trajectory {
        return Err(Error::InvalidInput("Gibbs sampling needs the trajectory backup".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = policy.start_dist(mdp);
    let horizon = policy.horizon();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = sample_index(start.iter().copied(), rng.gen());
        let mut states = Vec::with_capacity(horizon);
        let mut actions = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let a = sample_index(policy.action_probs(t, s).iter().copied(), rng.gen());
            states.push(s);
            actions.push(a);
            if t + 1 < horizon {
                let succ = policy.successor_dist(mdp, t, s, a);
                s = succ[sample_index(succ.iter().map(|&(_, p)| p), rng.gen())].0;
            }
        }
        out.push(Trajectory {
            states,
            actions,
            setting_id: 0,
        });
    }
    Ok(out)
}

impl SamplerEstimate {
    pub fn new(
        samples: Vec<Trajectory>,
        log_q: Vec<f64>,
        log_p: Vec<f64>,
        masses: Vec<f64>,
        exact: bool,
    ) -> Result<Self> {
        let n = samples.len();
        if n == 0 || log_q.len() != n || log_p.len() != n || masses.len() != n {
            return Err(Error::InvalidInput("sampler fields must be non-empty and of equal length".into()));
        }
        if log_q.iter().chain(&log_p).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("sampler densities must be finite".into()));
        }
        if masses.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(Error::InvalidInput("sample masses must be positive".into()));
        }
        let ratios = log_q.iter().zip(&log_p).map(|(q, p)| (q - p).exp()).collect();
        Ok(Self {
            samples,
            log_q,
            log_p,
            ratios,
            masses,
            exact,
        })
    }

    /// Draws from `q` with known log densities; `p` is evaluated exactly.
    pub fn from_draws(mdp: &TabularMdp, model: &RewardModel, samples: Vec<Trajectory>, log_q: Vec<f64>) -> Result<Self> {
        let (reward, log_z) = model_log_partition(mdp, model)?;
        let log_p = samples
            .iter()
            .map(|t| gibbs_log_prob(mdp, &reward, log_z, t))
            .collect::<Result<Vec<_>>>()?;
        let n = samples.len().max(1) as f64;
        let masses = vec![1.0 / n; samples.len()];
        Self::new(samples, log_q, log_p, masses, false)
    }

    /// Every trajectory of the model with `q = p`; `log_q` comes from brute
    /// force enumeration and `log_p` from the planner's partition function.
    pub fn enumerate_model(mdp: &TabularMdp, model: &RewardModel) -> Result<Self> {
        let (reward, log_z) = model_log_partition(mdp, model)?;
        let en = enumerate_gibbs(mdp, &reward, mdp.horizon())?;
        let samples: Vec<Trajectory> = en
            .trajectories
            .into_iter()
            .map(|(states, actions)| Trajectory {
                states,
                actions,
                setting_id: 0,
            })
            .collect();
        let log_p = samples
            .iter()
            .map(|t| gibbs_log_prob(mdp, &reward, log_z, t))
            .collect::<Result<Vec<_>>>()?;
        let masses = en.log_probs.iter().map(|l| l.exp()).collect();
        Self::new(samples, en.log_probs, log_p, masses, true)
    }

    /// `n` draws from the model itself (`q = p`).
    pub fn sample_model(mdp: &TabularMdp, model: &RewardModel, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("sample count must be at least 1".into()));
        }
        let reward = model.state_rewards();
        let policy = soft_value_iteration_with(
            mdp,
            &state_reward_table(mdp, &reward)?,
            SoftBackup::Trajectory,
        )?;
        let log_z = policy.log_partition(mdp);
        let samples = sample_gibbs(mdp, &policy, n, seed)?;
        let log_p = samples
            .iter()
            .map(|t| gibbs_log_prob(mdp, &reward, log_z, t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, log_p.clone(), log_p, vec![1.0 / n as f64; n], false)
    }

    /// Importance weights `p / q`.
    pub fn importance_weights(&self) -> Vec<f64> {
        self.ratios.iter().map(|r| 1.0 / r).collect()
    }

    /// Estimate of the entropy of `q`.
    pub fn entropy(&self) -> f64 {
        let total: f64 = self.masses.iter().sum();
        -self.masses.iter().zip(&self.log_q).map(|(m, l)| m * l).sum::<f64>() / total
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn model_log_partition(mdp: &TabularMdp, model: &RewardModel) -> Result<(Vec<f64>, f64)> {
    let reward = model.state_rewards();
    let policy = soft_value_iteration_with(
        mdp,
        &state_reward_table(mdp, &reward)?,
        SoftBackup::Trajectory,
    )?;
    let log_z = policy.log_partition(mdp);
    Ok((reward, log_z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    SelfNormalized,
    Unnormalized,
}

pub const MIN_EFFECTIVE_SAMPLES: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct DualGradient {
    pub grad: Vec<f64>,
    /// Per-coordinate standard error of the model term; zero for exhaustive
    /// samplers.
    pub std_error: Vec<f64>,
    pub effective_sample_size: f64,
    pub warning: Option<String>,
}

/// `E_data[phi(xi)] - E_q[(p / q) phi(xi)]` with per-state features
/// `features` summed along each padded trajectory.
pub fn dual_gradient_from_features(
    mdp: &TabularMdp,
    features: &Array2<f64>,
    expert: &SettingDataset,
    sampler: &SamplerEstimate,
    weighting: Weighting,
) -> Result<DualGradient> {
    let d = features.ncols();
    if features.nrows() != mdp.n_states() {
        return Err(Error::InvalidInput(format!(
            "feature table has {} rows, expected {}",
            features.nrows(),
            mdp.n_states()
        )));
    }
    let stats = SettingStats::new(mdp, expert)?;
    let data = stats.feature_expectation(features);

    let weights: Vec<f64> = sampler
        .masses
        .iter()
        .zip(sampler.importance_weights())
        .map(|(m, w)| m * w)
        .collect();
    let total: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if sq > 0.0 { total * total / sq } else { 0.0 };
    let norm = match weighting {
        Weighting::SelfNormalized => total,
        Weighting::Unnormalized => 1.0,
    };
    let phis = sampler
        .samples
        .iter()
        .map(|t| {
            let p = pad_to_horizon(t, mdp)?;
            let mut f = vec![0.0; d];
            for &s in &p.states {
                f.iter_mut().zip(features.row(s)).for_each(|(a, b)| *a += b);
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = vec![0.0; d];
    for (f, w) in phis.iter().zip(&weights) {
        model.iter_mut().zip(f).for_each(|(m, x)| *m += w * x / norm);
    }
    let std_error = if sampler.exact {
        vec![0.0; d]
    } else {
        let mu: Vec<f64> = (0..d)
            .map(|k| phis.iter().zip(&weights).map(|(f, w)| w * f[k]).sum::<f64>() / total)
            .collect();
        (0..d)
            .map(|k| {
                phis.iter()
                    .zip(&weights)
                    .map(|(f, w)| (w / total).powi(2) * (f[k] - mu[k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    };
    let warning = (!sampler.exact && ess < MIN_EFFECTIVE_SAMPLES).then(|| {
        let msg = format!("effective sample size {ess:.2} below {MIN_EFFECTIVE_SAMPLES}");
        log::warn!("{msg}");
        msg
    });
    Ok(DualGradient {
        grad: data.iter().zip(&model).map(|(a, b)| a - b).collect(),
        std_error,
        effective_sample_size: ess,
        warning,
    })
}

/// Importance-sampled gradient of the mean log-likelihood with respect to
/// the head, using the model's raw features.
pub fn dual_gradient_is(
    mdp: &TabularMdp,
    model: &RewardModel,
    expert: &SettingDataset,
    sampler: &SamplerEstimate,
    weighting: Weighting,
) -> Result<DualGradient> {
    dual_gradient_from_features(mdp, &model.net.eval_all(), expert, sampler, weighting)
}

fn default_airl_net() -> NetConfig {
    NetConfig {
        hidden: vec![16],
        output_dim: 4,
        encoding: InputEncoding::OneHot,
        ..NetConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AirlConfig {
    pub lambda_ci: f64,
    pub outer_iters: usize,
    /// Episodes collected into the shared policy buffer per outer step.
    pub n_policy_rollouts: usize,
    pub lr: f64,
    pub seed: u64,
    pub state_only: bool,
    pub net: NetConfig,
}

impl Default for AirlConfig {
    fn default() -> Self {
        Self {
            lambda_ci: 0.0,
            outer_iters: 200,
            n_policy_rollouts: 64,
            lr: 1e-2,
            seed: 0,
            state_only: false,
            net: default_airl_net(),
        }
    }
}

impl AirlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ci >= 0.0) || !self.lambda_ci.is_finite() {
            return Err(Error::InvalidInput(format!("lambda_ci must be >= 0, got {}", self.lambda_ci)));
        }
        if self.outer_iters == 0 || self.n_policy_rollouts == 0 {
            return Err(Error::InvalidInput("outer_iters and n_policy_rollouts must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidInput(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AirlRecord {
    pub iteration: usize,
    pub setting_id: usize,
    pub bce: f64,
    pub ci_penalty: f64,
    pub js: f64,
    pub agent_return: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone)]
pub struct AirlResult {
    pub discriminator: Discriminator,
    pub agent: SoftPolicy,
    pub trace: Vec<AirlRecord>,
    /// Set when any update saw every logit beyond the saturation bound.
    pub degenerate: bool,
}

fn agent_policy(mdp: &TabularMdp, disc: &Discriminator) -> Result<SoftPolicy> {
    soft_value_iteration_with(mdp, &disc.logit_table(), SoftBackup::Causal)
}

/// Alternates buffer collection, one discriminator step per setting and one
/// agent update after each discriminator step.
pub fn train_ci_airl_toy(world: &GridWorld, settings: &[SettingDataset], cfg: &AirlConfig) -> Result<AirlResult> {
    cfg.validate()?;
    if settings.is_empty() {
        return Err(Error::InvalidInput("at least one expert setting is required".into()));
    }
    let mdp = &world.mdp;
    let expert: Vec<Vec<Transition>> = settings
        .iter()
        .map(|ds| {
            ds.trajectories.iter().try_for_each(|t| t.validate(mdp))?;
            let tr = transitions(&ds.trajectories);
            if tr.is_empty() {
                return Err(Error::InvalidInput(format!("setting {} has no transitions", ds.setting_id)));
            }
            Ok(tr)
        })
        .collect::<Result<_>>()?;
    let mut disc = Discriminator::new(
        world.spec.width,
        world.spec.height,
        mdp.n_actions(),
        cfg.state_only,
        &cfg.net,
        cfg.seed,
    )?;
    let mut opt = Adam::new(disc.n_params(), cfg.lr);
    let mut agent = agent_policy(mdp, &disc)?;
    let mut trace = Vec::with_capacity(cfg.outer_iters * settings.len());
    let mut degenerate = false;
    for it in 0..cfg.outer_iters {
        let seed = cfg
            .seed
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(it as u64 + 1));
        let buffer = rollout(mdp, &agent, cfg.n_policy_rollouts, seed, &world.truth)?;
        let policy_batch = transitions(&buffer.trajectories);
        for (ds, exp) in settings.iter().zip(&expert) {
            let ev = evaluate_discriminator(&mut disc, exp, &policy_batch, cfg.lambda_ci)?;
            if !ev.objective.is_finite() || ev.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "discriminator diverged at iteration {it}"
                )));
            }
            if ev.saturated && !degenerate {
                log::warn!("discriminator saturated at iteration {it}: every logit beyond ±{SATURATION_LOGIT}");
            }
            degenerate |= ev.saturated;
            trace.push(AirlRecord {
                iteration: it,
                setting_id: ds.setting_id,
                bce: -ev.objective,
                ci_penalty: ev.penalty,
                js: ev.js_estimate,
                agent_return: buffer.mean_return,
                saturated: ev.saturated,
            });
            let mut params = disc.params();
            opt.step(&mut params, &ev.grad);
            disc.set_params(&params)?;
            agent = agent_policy(mdp, &disc)?;
        }
    }
    Ok(AirlResult {
        discriminator: disc,
        agent,
        trace,
        degenerate,
    })
}

pub const AIRL_TRACE_HEADER: &str = "iteration,setting_id,bce,ci_penalty,js,agent_return,saturated";

pub fn airl_trace_csv(trace: &[AirlRecord]) -> String {
    let mut out = format!("{AIRL_TRACE_HEADER}\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration, r.setting_id, r.bce, r.ci_penalty, r.js, r.agent_return, r.saturated
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Activation, Mlp};
    use crate::maxent::mle_gradient_psi;
    use crate::mdp::{build_gridworld, Cell, GridworldSpec};
    use crate::regularizers::ScalarPredictorLoss;
    use crate::oracles::{discrete_js, finite_diff, max_rel_error, optimal_bce_objective, random_mdp};
    use crate::trajectories::{gen_expert_settings, PreferenceIntervention};

    fn atom_disc(logits: &[f64]) -> Discriminator {
        let enc = Encoder::states(InputEncoding::OneHot, logits.len(), 1);
        let mut mlp = Mlp::zeros(&[logits.len(), 1], Activation::Linear).unwrap();
        for (i, z) in logits.iter().enumerate() {
            mlp.layers[0].weight[[0, i]] = *z;
        }
        Discriminator::from_net(FeatureNet::from_mlp(enc, mlp), 1)
    }

    fn batch(counts: &[usize]) -> Vec<Transition> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(s, &c)| std::iter::repeat_n((s, 0), c))
            .collect()
    }

    #[test]
    fn bce_indistinguishable_and_separable() {
        let mut d = atom_disc(&[0.0, 0.0]);
        let r = bce_loss(&mut d, &batch(&[1, 1]), &batch(&[2, 0])).unwrap();
        assert!((r.objective - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(r.js_estimate, 0.0);
        let mut d = atom_disc(&[40.0, -40.0]);
        let r = bce_loss(&mut d, &batch(&[3, 0]), &batch(&[0, 5])).unwrap();
        assert!((r.js_estimate - LN_2).abs() < 1e-12);
        let mut d = atom_disc(&[0.7, -1.3]);
        let same = batch(&[2, 3]);
        assert_eq!(bce_loss(&mut d, &same, &same).unwrap().js_estimate, 0.0);
        assert!(bce_loss(&mut d, &[], &same).is_err());
    }

    #[test]
    fn bce_at_optimal_discriminator_matches_js() {
        let p: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
        let q = [0.4, 0.3, 0.2, 0.1];
        let logits: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a / b).ln()).collect();
        let mut d = atom_disc(&logits);
        let r = bce_loss(&mut d, &batch(&[1, 2, 3, 4]), &batch(&[4, 3, 2, 1])).unwrap();
        assert!((r.objective - optimal_bce_objective(&p, &q)).abs() < 1e-10);
        assert!((r.js_estimate - discrete_js(&p, &q)).abs() < 1e-10);
    }

    #[test]
    fn single_expert_penalty_closed_form() {
        for z in [-2.0, -0.3, 0.0, 0.8, 3.0] {
            let mut d = atom_disc(&[z]);
            let p = ci_bce_penalty(&mut d, &[(0, 0)], &[(0, 0)], 0).unwrap();
            let lone = LogisticLoss::new(vec![z], vec![]);
            let expected = (sigmoid(-z) * z).powi(2);
            assert!((irm_scalar_penalty(&lone, 1.0) - expected).abs() < 1e-14);
            let h = 1e-6;
            let fd = (LogisticLoss::new(vec![z], vec![]).loss_at(1.0 + h) - LogisticLoss::new(vec![z], vec![]).loss_at(1.0 - h)) / (2.0 * h);
            assert!((fd * fd - expected).abs() < 1e-8);
            assert!(p.value >= 0.0);
        }
        let mut d = atom_disc(&[0.0, 0.0]);
        assert_eq!(ci_bce_penalty(&mut d, &batch(&[2, 1]), &batch(&[1, 2]), 0).unwrap().value, 0.0);
    }

    fn random_disc(seed: u64) -> Discriminator {
        let cfg = NetConfig {
            hidden: vec![3],
            output_dim: 2,
            encoding: InputEncoding::Coordinates,
            activation: Activation::Tanh,
        };
        let mut d = Discriminator::new(3, 2, 2, false, &cfg, seed).unwrap();
        d.head = vec![1.3, -0.7];
        d
    }

    #[test]
    fn penalty_and_bce_grads_match_finite_differences() {
        for seed in 0..5 {
            let mut d = random_disc(seed);
            let expert = vec![(0, 1), (3, 0), (5, 1), (0, 1)];
            let policy = vec![(2, 0), (4, 1), (1, 1)];
            let p0 = d.params();
            let pen = ci_bce_penalty(&mut d, &expert, &policy, 0).unwrap();
            let fd = finite_diff(
                |x| {
                    let mut dd = d.clone();
                    dd.set_params(x).unwrap();
                    evaluate_discriminator(&mut dd, &expert, &policy, 0.0).unwrap().penalty
                },
                &p0,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_error(&pen.grad, &fd, 1e-6) <= 1e-3, "seed {seed}");
            let bce = bce_loss(&mut d, &expert, &policy).unwrap();
            let fd = finite_diff(
                |x| {
                    let mut dd = d.clone();
                    dd.set_params(x).unwrap();
                    -evaluate_discriminator(&mut dd, &expert, &policy, 0.0).unwrap().objective
                },
                &p0,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_error(&bce.grad, &fd, 1e-6) <= 1e-4);
        }
    }

    fn one_hot_model(n_s: usize, seed: u64) -> RewardModel {
        let enc = Encoder::states(InputEncoding::OneHot, n_s, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = FeatureNet::from_mlp(enc, Mlp::new(&[n_s, 3, 2], Activation::Tanh, &mut rng).unwrap());
        RewardModel {
            net,
            head: vec![0.8, 1.2],
        }
    }

    fn expert_for(mdp: &TabularMdp, seed: u64) -> SettingDataset {
        let policy = crate::solver::soft_value_iteration(mdp, &vec![0.0; mdp.n_states()]).unwrap();
        let ro = rollout(mdp, &policy, 30, seed, &vec![0.0; mdp.n_states()]).unwrap();
        let trajs = ro
            .trajectories
            .into_iter()
            .map(|t| pad_to_horizon(&t, mdp).unwrap())
            .collect();
        SettingDataset::new(0, trajs, "").unwrap()
    }

    #[test]
    fn enumerated_dual_gradient_equals_primal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..6 {
            let n_s = 2 + case % 3;
            let mdp = random_mdp(&mut rng, n_s, 2, 2 + case % 3, case % 2 == 0);
            let model = one_hot_model(n_s, case as u64);
            let ds = expert_for(&mdp, case as u64);
            let sampler = SamplerEstimate::enumerate_model(&mdp, &model).unwrap();
            assert!(sampler.ratios.iter().all(|r| (r - 1.0).abs() < 1e-12));
            let primal = mle_gradient_psi(&mdp, &model, &ds).unwrap();
            for w in [Weighting::SelfNormalized, Weighting::Unnormalized] {
                let dual = dual_gradient_is(&mdp, &model, &ds, &sampler, w).unwrap();
                for (a, b) in dual.grad.iter().zip(&primal) {
                    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn sampled_dual_gradient_within_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = random_mdp(&mut rng, 3, 2, 3, false);
        let model = one_hot_model(3, 1);
        let ds = expert_for(&mdp, 2);
        let sampler = SamplerEstimate::sample_model(&mdp, &model, 20_000, 9).unwrap();
        let primal = mle_gradient_psi(&mdp, &model, &ds).unwrap();
        let dual = dual_gradient_is(&mdp, &model, &ds, &sampler, Weighting::SelfNormalized).unwrap();
        for k in 0..primal.len() {
            assert!((dual.grad[k] - primal[k]).abs() <= 3.0 * dual.std_error[k], "{k}");
        }
        assert!(dual.warning.is_none());
    }

    #[test]
    fn degenerate_and_single_atom_samplers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = random_mdp(&mut rng, 3, 2, 2, false);
        let ds = expert_for(&mdp, 0);
        let model = one_hot_model(3, 0);
        let sampler = SamplerEstimate::enumerate_model(&mdp, &model).unwrap();
        let empty = Array2::<f64>::zeros((3, 0));
        let g = dual_gradient_from_features(&mdp, &empty, &ds, &sampler, Weighting::SelfNormalized).unwrap();
        assert!(g.grad.is_empty());

        let xi = sampler.samples[3].clone();
        let one = SamplerEstimate::new(vec![xi.clone()], vec![0.0], vec![sampler.log_p[3]], vec![1.0], false).unwrap();
        let phi = model.net.eval_all();
        let g = dual_gradient_is(&mdp, &model, &ds, &one, Weighting::Unnormalized).unwrap();
        let data = SettingStats::new(&mdp, &ds).unwrap().feature_expectation(&phi);
        let w = one.importance_weights()[0];
        assert!((w - sampler.log_p[3].exp()).abs() < 1e-15);
        for k in 0..2 {
            let f: f64 = xi.states.iter().map(|&s| phi[[s, k]]).sum();
            assert!((data[k] - g.grad[k] - w * f).abs() < 1e-12);
        }
        assert!(g.warning.is_some());
    }

    fn small_world() -> GridWorld {
        build_gridworld(&GridworldSpec {
            width: 5,
            height: 5,
            obstacles: Default::default(),
            start_cells: [Cell(0, 0)].into(),
            goal_cells: [Cell(4, 4)].into(),
            slip_prob: 0.0,
            goal_reward: 1.0,
            step_reward: 0.0,
            discount: 0.95,
            horizon: 12,
        })
        .unwrap()
    }

    #[test]
    fn airl_trace_shape_and_determinism() {
        let w = small_world();
        let iv = PreferenceIntervention {
            bonus_cells: vec![],
            bonus_magnitude: 0.0,
            n_trajectories: 20,
        };
        let settings = gen_expert_settings(&w, &[iv], 0.1, 3).unwrap();
        let cfg = AirlConfig {
            outer_iters: 3,
            n_policy_rollouts: 8,
            lambda_ci: 1.0,
            ..AirlConfig::default()
        };
        let a = train_ci_airl_toy(&w, &settings, &cfg).unwrap();
        let b = train_ci_airl_toy(&w, &settings, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 3);
        let csv = airl_trace_csv(&a.trace);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(AIRL_TRACE_HEADER));
        assert!(a.trace.iter().all(|r| (0.0..=LN_2).contains(&r.js)));
        let t = a.discriminator.reward_table(&w.mdp).unwrap();
        assert_eq!(t.dim(), (25, 5));
    }

    #[test]
    fn discriminator_checkpoint_round_trip() {
        let w = small_world();
        for state_only in [false, true] {
            let d = Discriminator::new(5, 5, 5, state_only, &default_airl_net(), 4).unwrap();
            let json = serde_json::to_string(&d.to_checkpoint()).unwrap();
            let back = Discriminator::from_checkpoint(&serde_json::from_str(&json).unwrap(), 5).unwrap();
            assert_eq!(back.logit_table(), d.reward_table(&w.mdp).unwrap());
        }
        let d = Discriminator::new(5, 5, 5, false, &default_airl_net(), 4).unwrap();
        assert!(Discriminator::from_checkpoint(&d.to_checkpoint(), 4).is_err());
    }
}
