//! Demonstration data: trajectories, per-setting datasets, expert generation
//! by preference interventions, and the line-oriented dataset file format.
//!
//! File format (version 1):
//!
//! ```text
//! #ci-irl-trajectories v1 width=16 height=16
//! #provenance <free text, single line>
//! 0;0,3;1,3;17,0;...
//! ```
//!
//! Each record is `setting_id;s1,a1;s2,a2;...` with state and action indices.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Cell, GridWorld, TabularMdp};
use crate::solver::{self, SoftBackup};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const DATASET_MAGIC: &str = "#ci-irl-trajectories";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub setting_id: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Checks index ranges and that every step has positive probability
    /// under `mdp`.
    pub fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        if self.states.len() != self.actions.len() {
            return Err(Error::InvalidInput(format!(
                "trajectory has {} states but {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        if self.states.is_empty() {
            return Err(Error::InvalidInput("empty trajectory".into()));
        }
        if self.states.len() > mdp.horizon() {
            return Err(Error::InvalidInput(format!(
                "trajectory length {} exceeds horizon {}",
                self.states.len(),
                mdp.horizon()
            )));
        }
        for (&s, &a) in self.states.iter().zip(&self.actions) {
            if s >= mdp.n_states() || a >= mdp.n_actions() {
                return Err(Error::InvalidInput(format!("state/action ({s}, {a}) out of range")));
            }
        }
        if mdp.initial_dist()[self.states[0]] <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "trajectory starts in state {} with zero initial probability",
                self.states[0]
            )));
        }
        for t in 0..self.states.len() - 1 {
            let (s, a, next) = (self.states[t], self.actions[t], self.states[t + 1]);
            if mdp.prob(s, a, next) <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "impossible transition {s} --{a}--> {next} at step {t}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettingDataset {
    pub setting_id: usize,
    pub trajectories: Vec<Trajectory>,
    pub provenance: String,
}

impl SettingDataset {
    pub fn new(setting_id: usize, trajectories: Vec<Trajectory>, provenance: impl Into<String>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::InvalidInput(format!("setting {setting_id} has no trajectories")));
        }
        if let Some(t) = trajectories.iter().find(|t| t.setting_id != setting_id) {
            return Err(Error::InvalidInput(format!(
                "trajectory tagged with setting {} in dataset for setting {setting_id}",
                t.setting_id
            )));
        }
        Ok(Self {
            setting_id,
            trajectories,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// An expert whose reward is the ground truth plus a bonus on some cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceIntervention {
    pub bonus_cells: Vec<Cell>,
    pub bonus_magnitude: f64,
    pub n_trajectories: usize,
}

impl PreferenceIntervention {
    fn describe(&self) -> String {
        let mut s = format!(
            "bonus_magnitude={} n_trajectories={} bonus_cells=",
            self.bonus_magnitude, self.n_trajectories
        );
        for c in &self.bonus_cells {
            let _ = write!(s, "({},{})", c.x(), c.y());
        }
        s
    }
}

/// Seed offset between consecutive settings.
const SETTING_SEED_STRIDE: u64 = 0x9E37_79B9;

/// Generates one dataset per intervention. Each expert solves the causal
/// soft backup on `(truth + bonus) / temperature` and is rolled out from the
/// MDP's start distribution.
pub fn gen_expert_settings(
    world: &GridWorld,
    interventions: &[PreferenceIntervention],
    temperature: f64,
    seed: u64,
) -> Result<Vec<SettingDataset>> {
    if interventions.is_empty() {
        return Err(Error::InvalidInput("no interventions given".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidInput(format!("temperature {temperature} must be positive")));
    }
    let spec = &world.spec;
    let mdp = &world.mdp;
    let mut out = Vec::with_capacity(interventions.len());
    for (e, iv) in interventions.iter().enumerate() {
        if iv.n_trajectories == 0 {
            return Err(Error::InvalidInput(format!("intervention {e} requests 0 trajectories")));
        }
        let mut reward = world.truth.clone();
        for &c in &iv.bonus_cells {
            if !spec.contains(c) {
                return Err(Error::InvalidInput(format!(
                    "bonus cell ({}, {}) outside the grid",
                    c.x(),
                    c.y()
                )));
            }
            reward[spec.state(c)] += iv.bonus_magnitude;
        }
        reward.iter_mut().for_each(|r| *r /= temperature);
        let table = solver::state_reward_table(mdp, &reward)?;
        let policy = solver::soft_value_iteration_with(mdp, &table, SoftBackup::Causal)?;
        let seed_e = seed.wrapping_add(SETTING_SEED_STRIDE.wrapping_mul(e as u64 + 1));
        let rollouts = solver::rollout(mdp, &policy, iv.n_trajectories, seed_e, &world.truth)?;
        let trajectories = rollouts
            .trajectories
            .into_iter()
            .map(|mut t| {
                t.setting_id = e;
                t
            })
            .collect();
        out.push(SettingDataset::new(
            e,
            trajectories,
            format!("temperature={temperature} seed={seed_e} {}", iv.describe()),
        )?);
    }
    Ok(out)
}

/// Undiscounted sum of per-state features along the trajectory. `features`
/// has one row per state.
pub fn trajectory_features(traj: &Trajectory, features: &Array2<f64>) -> Vec<f64> {
    let mut out = vec![0.0; features.ncols()];
    for &s in &traj.states {
        for (o, f) in out.iter_mut().zip(features.row(s)) {
            *o += f;
        }
    }
    out
}

/// Discounted variant, `sum_t discount^t phi(s_t)`.
pub fn discounted_trajectory_features(traj: &Trajectory, features: &Array2<f64>, discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; features.ncols()];
    let mut w = 1.0;
    for &s in &traj.states {
        for (o, f) in out.iter_mut().zip(features.row(s)) {
            *o += w * f;
        }
        w *= discount;
    }
    out
}

pub fn empirical_feature_expectation(ds: &SettingDataset, features: &Array2<f64>) -> Result<Vec<f64>> {
    if ds.trajectories.is_empty() {
        return Err(Error::InvalidInput(format!("setting {} is empty", ds.setting_id)));
    }
    let mut mean = vec![0.0; features.ncols()];
    for t in &ds.trajectories {
        for (m, f) in mean.iter_mut().zip(trajectory_features(t, features)) {
            *m += f;
        }
    }
    let n = ds.trajectories.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub width: usize,
    pub height: usize,
}

pub fn write_dataset(ds: &SettingDataset, width: usize, height: usize) -> String {
    let mut out = format!("{DATASET_MAGIC} v{DATASET_FORMAT_VERSION} width={width} height={height}\n");
    let provenance = ds.provenance.replace(['\n', '\r'], " ");
    let _ = writeln!(out, "#provenance {provenance}");
    for t in &ds.trajectories {
        let _ = write!(out, "{}", t.setting_id);
        for (s, a) in t.states.iter().zip(&t.actions) {
            let _ = write!(out, ";{s},{a}");
        }
        out.push('\n');
    }
    out
}

/// Parses a dataset file. When `mdp` is given every trajectory is validated
/// against it, and the grid dimensions must match its state count.
pub fn parse_dataset(text: &str, mdp: Option<&TabularMdp>) -> Result<(DatasetHeader, SettingDataset)> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let header = parse_header(first)?;
    if let Some(mdp) = mdp {
        if header.width * header.height != mdp.n_states() {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "{}x{} grid does not match an MDP with {} states",
                    header.width,
                    header.height,
                    mdp.n_states()
                ),
            });
        }
    }
    let mut provenance = String::new();
    let mut trajectories = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if let Some(rest) = line.strip_prefix("#provenance") {
            provenance = rest.trim().to_string();
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let traj = parse_record(line).map_err(|msg| Error::Parse { line: lineno, msg })?;
        if let Some(mdp) = mdp {
            traj.validate(mdp).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        } else if traj.states.iter().any(|&s| s >= header.width * header.height) {
            return Err(Error::Parse {
                line: lineno,
                msg: "state index outside the grid".into(),
            });
        }
        trajectories.push(traj);
    }
    let setting_id = trajectories
        .first()
        .map(|t| t.setting_id)
        .ok_or(Error::Parse {
            line: 1,
            msg: "dataset has no trajectories".into(),
        })?;
    let ds = SettingDataset::new(setting_id, trajectories, provenance).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    Ok((header, ds))
}

fn parse_header(line: &str) -> Result<DatasetHeader> {
    let err = |msg: String| Error::Parse { line: 1, msg };
    let mut parts = line.split_whitespace();
    if parts.next() != Some(DATASET_MAGIC) {
        return Err(err(format!("missing '{DATASET_MAGIC}' header")));
    }
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| err("missing format version".into()))?;
    if version != DATASET_FORMAT_VERSION {
        return Err(err(format!("unsupported format version {version}")));
    }
    let mut width = None;
    let mut height = None;
    for kv in parts {
        match kv.split_once('=') {
            Some(("width", v)) => width = v.parse().ok(),
            Some(("height", v)) => height = v.parse().ok(),
            _ => return Err(err(format!("unexpected header field '{kv}'"))),
        }
    }
    match (width, height) {
        (Some(width), Some(height)) if width > 0 && height > 0 => Ok(DatasetHeader {
            version,
            width,
            height,
        }),
        _ => Err(err("header needs positive width and height".into())),
    }
}

fn parse_record(line: &str) -> std::result::Result<Trajectory, String> {
    let mut fields = line.split(';');
    let setting_id = fields
        .next()
        .and_then(|f| f.trim().parse::<usize>().ok())
        .ok_or("bad setting id")?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for f in fields {
        let (s, a) = f.split_once(',').ok_or_else(|| format!("bad step '{f}'"))?;
        states.push(s.trim().parse::<usize>().map_err(|_| format!("bad state '{s}'"))?);
        actions.push(a.trim().parse::<usize>().map_err(|_| format!("bad action '{a}'"))?);
    }
    if states.is_empty() {
        return Err("record has no steps".into());
    }
    Ok(Trajectory {
        states,
        actions,
        setting_id,
    })
}
