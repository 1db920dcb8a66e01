//! Experiment driver behind the `ci-irl` binary: JSON configs, expert
//! datasets with a hashed manifest, training runs, heatmap rendering,
//! transfer sweeps and the one-shot reward-comparison pipeline.
//!
//! Every command is a plain function returning the text it would print, so
//! the whole surface can be exercised in-process.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dual::{airl_trace_csv, train_ci_airl_toy, AirlConfig, Discriminator};
use crate::error::{Error, Result};
use crate::eval::{results_csv, spearman, sweep, MethodSpec, RewardScaling, SweepOptions, SweepTable};
use crate::features::{Checkpoint, Encoder, RewardFunction, RewardModel};
use crate::maxent::{trace_csv, train_ci_fmirl, TrainConfig, TrainResult};
use crate::mdp::{
    apply_perturbation, build_gridworld, goal_distance, Cell, GridWorld, GridworldSpec, Perturbation, TabularMdp,
    GRID_ACTIONS,
};
use crate::trajectories::{gen_expert_settings, parse_dataset, write_dataset, PreferenceIntervention, SettingDataset};

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Group sizes of the three corridor experts in the default experiment.
pub const DEFAULT_GROUP_SIZES: [usize; 3] = [40, 10, 1];
/// Larger alternative group sizes.
pub const LARGE_GROUP_SIZES: [usize; 3] = [400, 25, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    #[default]
    Fmirl,
    AirlToy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Rollout seeds; one results row per seed.
    #[serde(default = "default_eval_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_n_rollouts")]
    pub n_rollouts: usize,
    #[serde(default)]
    pub scaling: RewardScaling,
}

fn default_eval_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_n_rollouts() -> usize {
    10
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            seeds: default_eval_seeds(),
            n_rollouts: default_n_rollouts(),
            scaling: RewardScaling::default(),
        }
    }
}

/// A full experiment. `seed` is the master seed: it drives expert sampling
/// and network initialization, and overrides `train.seed` and `airl.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub gridworld: GridworldSpec,
    pub interventions: Vec<PreferenceIntervention>,
    #[serde(default = "default_temperature")]
    pub expert_temperature: f64,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub airl: AirlConfig,
    #[serde(default)]
    pub perturbations: Vec<Perturbation>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_temperature() -> f64 {
    0.1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Three monotone routes from `(0, 0)` to `(n-1, n-1)`: along the bottom
/// row then up the right column, a diagonal staircase, and up the left
/// column then along the top row.
pub fn corridors(n: usize) -> Vec<Vec<Cell>> {
    let m = n - 1;
    let lower = (0..n).map(|x| Cell(x, 0)).chain((1..n).map(|y| Cell(m, y))).collect();
    let stair = (0..2 * m + 1).map(|i| Cell((i + 1) / 2, i / 2)).collect();
    let upper = (0..n).map(|y| Cell(0, y)).chain((1..n).map(|x| Cell(x, m))).collect();
    vec![lower, stair, upper]
}

/// A wall across row `n/2` from column `n/4` to the right edge.
pub fn wall_perturbation(n: usize) -> Perturbation {
    Perturbation::AddObstacles {
        cells: (n / 4..n).map(|x| Cell(x, n / 2)).collect(),
    }
}

impl ExperimentConfig {
    /// The 16x16 corridor experiment with the given expert group sizes.
    pub fn corridor(group_sizes: [usize; 3]) -> Self {
        let n = 16;
        let gridworld = GridworldSpec {
            width: n,
            height: n,
            obstacles: Default::default(),
            start_cells: [Cell(0, 0)].into(),
            goal_cells: [Cell(n - 1, n - 1)].into(),
            slip_prob: 0.1,
            goal_reward: 1.0,
            step_reward: -0.1,
            discount: 0.95,
            horizon: 60,
        };
        let interventions = corridors(n)
            .into_iter()
            .zip(group_sizes)
            .map(|(bonus_cells, n_trajectories)| PreferenceIntervention {
                bonus_cells,
                bonus_magnitude: 0.5,
                n_trajectories,
            })
            .collect();
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            gridworld,
            interventions,
            expert_temperature: default_temperature(),
            pipeline: Pipeline::Fmirl,
            train: TrainConfig {
                lr: 1e-2,
                iters: 300,
                ..TrainConfig::default()
            },
            airl: AirlConfig::default(),
            perturbations: vec![Perturbation::identity(), wall_perturbation(n)],
            eval: EvalSettings::default(),
            output_dir: default_output_dir(),
        }
    }

    /// A deterministic 5x5 world with one expert, trained adversarially.
    pub fn airl_toy() -> Self {
        let n = 5;
        let gridworld = GridworldSpec {
            width: n,
            height: n,
            obstacles: Default::default(),
            start_cells: [Cell(0, 0)].into(),
            goal_cells: [Cell(n - 1, n - 1)].into(),
            slip_prob: 0.0,
            goal_reward: 1.0,
            step_reward: 0.0,
            discount: 0.95,
            horizon: 12,
        };
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            gridworld,
            interventions: vec![PreferenceIntervention {
                bonus_cells: Vec::new(),
                bonus_magnitude: 0.0,
                n_trajectories: 200,
            }],
            expert_temperature: default_temperature(),
            pipeline: Pipeline::AirlToy,
            train: TrainConfig::default(),
            airl: AirlConfig::default(),
            perturbations: vec![Perturbation::identity()],
            eval: EvalSettings::default(),
            output_dir: default_output_dir(),
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Corridor => Self::corridor(DEFAULT_GROUP_SIZES),
            Preset::CorridorLarge => Self::corridor(LARGE_GROUP_SIZES),
            Preset::AirlToy => Self::airl_toy(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path, "config")?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::InvalidInput(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Sets the master seed and propagates it to the trainers.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.airl.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidInput(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let world = build_gridworld(&self.gridworld)?;
        if self.interventions.is_empty() {
            return Err(Error::InvalidInput("config lists no interventions".into()));
        }
        if !(self.expert_temperature > 0.0) || !self.expert_temperature.is_finite() {
            return Err(Error::InvalidInput(format!(
                "expert_temperature {} must be positive",
                self.expert_temperature
            )));
        }
        self.train.validate()?;
        self.airl.validate()?;
        for p in &self.perturbations {
            apply_perturbation(&world, p)?;
        }
        if self.eval.seeds.is_empty() || self.eval.n_rollouts == 0 {
            return Err(Error::InvalidInput("eval needs at least one seed and one rollout".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> Result<GridWorld> {
        build_gridworld(&self.gridworld)
    }

    pub fn experts(&self, world: &GridWorld) -> Result<Vec<SettingDataset>> {
        gen_expert_settings(world, &self.interventions, self.expert_temperature, self.seed)
    }

    /// Label of the configured training run.
    pub fn run_label(&self) -> String {
        match self.pipeline {
            Pipeline::Fmirl => self.train.method_label(),
            Pipeline::AirlToy if self.airl.lambda_ci > 0.0 => format!("airl-ci-{}", self.airl.lambda_ci),
            Pipeline::AirlToy => "airl-erm".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Corridor,
    CorridorLarge,
    AirlToy,
}

fn read_text(path: &Path, label: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                label: label.into(),
                path: path.into(),
            }
        } else {
            Error::io(path, e)
        }
    })
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub setting_id: usize,
    pub file: String,
    pub n_trajectories: usize,
    pub sha256: String,
}

/// Provenance of a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub expert_temperature: f64,
    pub gridworld: GridworldSpec,
    pub interventions: Vec<PreferenceIntervention>,
    pub files: Vec<ManifestEntry>,
}

pub fn dataset_file_name(setting_id: usize) -> String {
    format!("setting_{setting_id}.traj")
}

/// Writes one dataset file per setting plus `manifest.json` into `dir`.
pub fn cmd_gen_experts(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let world = cfg.world()?;
    let settings = cfg.experts(&world)?;
    let mut files = Vec::with_capacity(settings.len());
    for ds in &settings {
        let text = write_dataset(ds, cfg.gridworld.width, cfg.gridworld.height);
        let file = dataset_file_name(ds.setting_id);
        write_atomic(&dir.join(&file), text.as_bytes())?;
        files.push(ManifestEntry {
            setting_id: ds.setting_id,
            file,
            n_trajectories: ds.len(),
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        seed: cfg.seed,
        expert_temperature: cfg.expert_temperature,
        gridworld: cfg.gridworld.clone(),
        interventions: cfg.interventions.clone(),
        files,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// Reads a dataset directory, checking every file against its recorded hash.
pub fn load_experts(dir: &Path, mdp: &TabularMdp) -> Result<(Manifest, Vec<SettingDataset>)> {
    let manifest: Manifest = serde_json::from_str(&read_text(&dir.join(MANIFEST_FILE), "manifest")?)?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let mut out = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let path = dir.join(&entry.file);
        let text = read_text(&path, &format!("setting {}", entry.setting_id))?;
        let hash = sha256_hex(text.as_bytes());
        if hash != entry.sha256 {
            return Err(Error::InvalidInput(format!(
                "{}: sha256 {hash} does not match the manifest ({})",
                path.display(),
                entry.sha256
            )));
        }
        let (_, ds) = parse_dataset(&text, Some(mdp))?;
        out.push(ds);
    }
    Ok((manifest, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub label: String,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub iterations: usize,
    pub stopped_early: bool,
}

fn checkpoint_path(dir: &Path, label: &str) -> PathBuf {
    dir.join(format!("{label}.checkpoint.json"))
}

fn trace_path(dir: &Path, label: &str) -> PathBuf {
    dir.join(format!("{label}.trace.csv"))
}

fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let mut json = serde_json::to_string(c)?;
    json.push('\n');
    write_atomic(path, json.as_bytes())
}

pub fn read_checkpoint(path: &Path, label: &str) -> Result<Checkpoint> {
    Ok(serde_json::from_str(&read_text(path, label)?)?)
}

fn fmirl_run(world: &GridWorld, settings: &[SettingDataset], cfg: &TrainConfig) -> Result<TrainResult> {
    let spec = &world.spec;
    let model = RewardModel::new(
        Encoder::states(cfg.net.encoding, spec.width, spec.height),
        &cfg.net,
        cfg.seed,
    )?;
    train_ci_fmirl(&world.mdp, settings, model, cfg)
}

/// Trains one feature-matching run and writes its checkpoint and trace.
/// A diverged run still leaves its partial trace on disk.
fn train_fmirl_to(world: &GridWorld, settings: &[SettingDataset], cfg: &TrainConfig, dir: &Path) -> Result<(TrainSummary, TrainResult)> {
    let label = cfg.method_label();
    let trace = trace_path(dir, &label);
    let result = match fmirl_run(world, settings, cfg) {
        Ok(r) => r,
        Err(Error::TrainingDiverged { iteration, trace: records }) => {
            write_atomic(&trace, trace_csv(&records).as_bytes())?;
            return Err(Error::TrainingDiverged { iteration, trace: records });
        }
        Err(e) => return Err(e),
    };
    write_atomic(&trace, trace_csv(&result.trace).as_bytes())?;
    let mut ckpt = result.model.to_checkpoint();
    ckpt.label = Some(label.clone());
    ckpt.lambda = Some(cfg.lambda_ci);
    let checkpoint = checkpoint_path(dir, &label);
    write_checkpoint(&checkpoint, &ckpt)?;
    if result.stopped_early {
        log::warn!("{label}: gradient norm fell below tolerance after {} iterations", result.trace.len());
    }
    Ok((
        TrainSummary {
            label,
            checkpoint,
            trace,
            iterations: result.trace.len(),
            stopped_early: result.stopped_early,
        },
        result,
    ))
}

/// Trains the configured pipeline. Experts come from `data` when given,
/// otherwise they are regenerated from the master seed.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path, data: Option<&Path>) -> Result<TrainSummary> {
    let world = cfg.world()?;
    let settings = match data {
        Some(d) => {
            let (manifest, settings) = load_experts(d, &world.mdp)?;
            if manifest.gridworld != cfg.gridworld {
                return Err(Error::InvalidInput(format!(
                    "{}: datasets were generated for a different gridworld",
                    d.display()
                )));
            }
            settings
        }
        None => cfg.experts(&world)?,
    };
    match cfg.pipeline {
        Pipeline::Fmirl => Ok(train_fmirl_to(&world, &settings, &cfg.train, dir)?.0),
        Pipeline::AirlToy => {
            let label = cfg.run_label();
            let result = train_ci_airl_toy(&world, &settings, &cfg.airl)?;
            let trace = trace_path(dir, &label);
            write_atomic(&trace, airl_trace_csv(&result.trace).as_bytes())?;
            let mut ckpt = result.discriminator.to_checkpoint();
            ckpt.label = Some(label.clone());
            ckpt.lambda = Some(cfg.airl.lambda_ci);
            let checkpoint = checkpoint_path(dir, &label);
            write_checkpoint(&checkpoint, &ckpt)?;
            if result.degenerate {
                log::warn!("{label}: discriminator saturated during training");
            }
            Ok(TrainSummary {
                label,
                checkpoint,
                trace,
                iterations: cfg.airl.outer_iters,
                stopped_early: false,
            })
        }
    }
}

/// A reward loaded from either kind of checkpoint.
#[derive(Debug, Clone)]
pub enum LoadedReward {
    Model(RewardModel),
    Discriminator(Discriminator),
}

impl LoadedReward {
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        match c.kind.as_str() {
            "discriminator" => {
                let n_a = c.encoder.n_actions.unwrap_or(GRID_ACTIONS);
                Ok(Self::Discriminator(Discriminator::from_checkpoint(c, n_a)?))
            }
            _ => Ok(Self::Model(RewardModel::from_checkpoint(c)?)),
        }
    }

    /// Per-state reward; discriminator logits are averaged over actions.
    pub fn state_rewards(&self) -> Vec<f64> {
        match self {
            Self::Model(m) => m.state_rewards(),
            Self::Discriminator(d) => d.logit_table().rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect(),
        }
    }
}

impl RewardFunction for LoadedReward {
    fn reward_table(&self, mdp: &TabularMdp) -> Result<ndarray::Array2<f64>> {
        match self {
            Self::Model(m) => m.reward_table(mdp),
            Self::Discriminator(d) => d.reward_table(mdp),
        }
    }
}

/// Min-max normalization to `0..=255`. A constant input maps to 128;
/// non-finite entries map to the nearest end (NaN to 0).
pub fn gray_levels(values: &[f64]) -> Vec<u8> {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if v.is_nan() || v == f64::NEG_INFINITY {
                0
            } else if v == f64::INFINITY {
                255
            } else if hi > lo {
                (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        })
        .collect()
}

/// Plain-text graymap, one grid row per line starting at `y = 0`.
pub fn pgm(width: usize, height: usize, values: &[f64]) -> Result<String> {
    check_shape(width, height, values.len())?;
    let px = gray_levels(values);
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in px.chunks(width) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn reward_matrix_csv(width: usize, height: usize, values: &[f64]) -> Result<String> {
    check_shape(width, height, values.len())?;
    let mut out = String::new();
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Inverse of [`reward_matrix_csv`]: `(width, height, values)`.
pub fn parse_reward_matrix_csv(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("'{f}': {e}"),
                })
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {w} columns, found {}", row.len()),
                })
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::Parse {
        line: 1,
        msg: "empty matrix".into(),
    })?;
    Ok((width, height, values))
}

fn check_shape(width: usize, height: usize, n: usize) -> Result<()> {
    if width == 0 || height == 0 || width * height != n {
        return Err(Error::InvalidInput(format!("{n} values do not fill a {width}x{height} grid")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub pgm: PathBuf,
    pub csv: PathBuf,
}

fn render_values(width: usize, height: usize, values: &[f64], dir: &Path, stem: &str) -> Result<RenderOutput> {
    let out = RenderOutput {
        pgm: dir.join(format!("{stem}.pgm")),
        csv: dir.join(format!("{stem}.csv")),
    };
    write_atomic(&out.pgm, pgm(width, height, values)?.as_bytes())?;
    write_atomic(&out.csv, reward_matrix_csv(width, height, values)?.as_bytes())?;
    Ok(out)
}

fn file_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for suffix in [".checkpoint.json", ".json", ".csv"] {
        if let Some(s) = name.strip_suffix(suffix) {
            return s.to_string();
        }
    }
    name
}

/// Heatmap and CSV matrix of the per-state reward stored in a checkpoint.
pub fn cmd_render(checkpoint: &Path, dir: &Path) -> Result<RenderOutput> {
    let stem = file_stem(checkpoint);
    let c = read_checkpoint(checkpoint, &stem)?;
    let reward = LoadedReward::from_checkpoint(&c)?;
    render_values(c.encoder.width, c.encoder.height, &reward.state_rewards(), dir, &stem)
}

/// Re-renders a CSV matrix written by [`cmd_render`].
pub fn cmd_render_csv(csv: &Path, dir: &Path) -> Result<RenderOutput> {
    let stem = file_stem(csv);
    let (w, h, values) = parse_reward_matrix_csv(&read_text(csv, &stem)?)?;
    render_values(w, h, &values, dir, &stem)
}

/// `LABEL=PATH`, or a bare path labeled by the checkpoint itself.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointArg {
    pub label: Option<String>,
    pub path: PathBuf,
}

impl std::str::FromStr for CheckpointArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once('=') {
            Some((l, p)) if !l.is_empty() && !p.is_empty() => Ok(Self {
                label: Some(l.into()),
                path: p.into(),
            }),
            Some(_) => Err(format!("malformed checkpoint argument '{s}'")),
            None => Ok(Self {
                label: None,
                path: s.into(),
            }),
        }
    }
}

fn sweep_options(cfg: &ExperimentConfig, jobs: usize) -> SweepOptions {
    SweepOptions {
        n_rollouts: cfg.eval.n_rollouts,
        scaling: cfg.eval.scaling,
        jobs: jobs.max(1),
    }
}

fn finish_sweep(table: SweepTable, path: &Path) -> Result<SweepTable> {
    write_atomic(path, results_csv(&table.rows).as_bytes())?;
    if !table.failures.is_empty() {
        let msgs: Vec<String> = table
            .failures
            .iter()
            .map(|f| {
                format!(
                    "{} seed {} {}: {}",
                    f.method_label,
                    f.seed,
                    f.perturbation.as_deref().unwrap_or("training"),
                    f.error
                )
            })
            .collect();
        return Err(Error::InvalidInput(format!(
            "{} sweep cell(s) failed: {}",
            msgs.len(),
            msgs.join("; ")
        )));
    }
    Ok(table)
}

/// Transfer evaluation of saved checkpoints under every configured
/// perturbation and eval seed. Writes `results.csv` into `dir`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoints: &[CheckpointArg], dir: &Path, jobs: usize) -> Result<SweepTable> {
    if cfg.perturbations.is_empty() {
        return Err(Error::InvalidInput("no perturbations configured; nothing to evaluate".into()));
    }
    if checkpoints.is_empty() {
        return Err(Error::Usage("at least one checkpoint is required".into()));
    }
    let world = cfg.world()?;
    let mut methods = Vec::with_capacity(checkpoints.len());
    for arg in checkpoints {
        let name = arg.label.clone().unwrap_or_else(|| file_stem(&arg.path));
        let c = read_checkpoint(&arg.path, &name)?;
        let reward = LoadedReward::from_checkpoint(&c)?;
        methods.push(MethodSpec {
            label: arg.label.clone().or(c.label.clone()).unwrap_or(name),
            lambda: c.lambda.unwrap_or(0.0),
            config: reward,
        });
    }
    let table = sweep(
        &methods,
        &cfg.perturbations,
        &cfg.eval.seeds,
        &world,
        sweep_options(cfg, jobs),
        |m, _| Ok(m.config.clone()),
    )?;
    finish_sweep(table, &dir.join("results.csv"))
}

/// Spearman correlation between a per-state reward and the negated
/// shortest-path distance to the goal, over `cells`.
pub fn goal_alignment(spec: &GridworldSpec, cells: &[Cell], rewards: &[f64]) -> Result<f64> {
    let r: Vec<f64> = cells.iter().map(|&c| rewards[spec.state(c)]).collect();
    let d: Vec<f64> = cells.iter().map(|&c| -(goal_distance(spec, c) as f64)).collect();
    spearman(&r, &d)
}

/// Distinct cells receiving a bonus in any intervention; every free cell
/// when there are none.
pub fn demonstrated_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let cells: BTreeSet<Cell> = cfg.interventions.iter().flat_map(|iv| iv.bonus_cells.iter().copied()).collect();
    if !cells.is_empty() {
        return cells.into_iter().collect();
    }
    let spec = &cfg.gridworld;
    (0..spec.height)
        .flat_map(|y| (0..spec.width).map(move |x| Cell(x, y)))
        .filter(|c| !spec.obstacles.contains(c))
        .collect()
}

/// The four reward comparisons: plain, L2 weight decay, and two strengths
/// of the invariance penalty.
pub fn fig2_methods(base: &TrainConfig) -> Vec<TrainConfig> {
    [(0.0, 0.0), (0.0, 1e-3), (0.01, 0.0), (0.05, 0.0)]
        .into_iter()
        .map(|(ci, l2)| TrainConfig {
            lambda_ci: ci,
            lambda_l2: l2,
            ..base.clone()
        })
        .collect()
}

pub const FIG2_SUMMARY_HEADER: &str = "method,lambda_ci,lambda_l2,goal_alignment,iterations,stopped_early";

#[derive(Debug, Clone, PartialEq)]
pub struct Fig2Row {
    pub label: String,
    pub lambda_ci: f64,
    pub lambda_l2: f64,
    pub goal_alignment: f64,
    pub iterations: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct Fig2Summary {
    pub rows: Vec<Fig2Row>,
    pub sweep: SweepTable,
}

pub fn fig2_summary_csv(rows: &[Fig2Row]) -> String {
    let mut out = format!("{FIG2_SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label, r.lambda_ci, r.lambda_l2, r.goal_alignment, r.iterations, r.stopped_early
        );
    }
    out
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Experts, four trained rewards with heatmaps, the goal-alignment summary
/// and the transfer table, all under `dir`.
pub fn cmd_repro_fig2(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<Fig2Summary> {
    if cfg.perturbations.is_empty() {
        return Err(Error::InvalidInput("no perturbations configured; nothing to evaluate".into()));
    }
    let world = cfg.world()?;
    cmd_gen_experts(cfg, &dir.join("experts"))?;
    let settings = cfg.experts(&world)?;
    let methods = fig2_methods(&cfg.train);
    let runs: Vec<Result<(TrainSummary, TrainResult)>> = in_pool(jobs, || {
        methods
            .par_iter()
            .map(|m| train_fmirl_to(&world, &settings, m, dir))
            .collect()
    })?;
    let runs: Vec<(TrainSummary, TrainResult)> = runs.into_iter().collect::<Result<_>>()?;
    let cells = demonstrated_cells(cfg);
    let mut rows = Vec::with_capacity(runs.len());
    let mut specs = Vec::with_capacity(runs.len());
    for ((summary, result), m) in runs.iter().zip(&methods) {
        let rewards = result.model.state_rewards();
        render_values(cfg.gridworld.width, cfg.gridworld.height, &rewards, dir, &summary.label)?;
        rows.push(Fig2Row {
            label: summary.label.clone(),
            lambda_ci: m.lambda_ci,
            lambda_l2: m.lambda_l2,
            goal_alignment: goal_alignment(&cfg.gridworld, &cells, &rewards)?,
            iterations: summary.iterations,
            stopped_early: summary.stopped_early,
        });
        specs.push(MethodSpec {
            label: summary.label.clone(),
            lambda: m.lambda_ci,
            config: result.model.clone(),
        });
    }
    write_atomic(&dir.join("fig2_summary.csv"), fig2_summary_csv(&rows).as_bytes())?;
    let table = sweep(
        &specs,
        &cfg.perturbations,
        &cfg.eval.seeds,
        &world,
        sweep_options(cfg, jobs),
        |m, _| Ok(m.config.clone()),
    )?;
    let sweep = finish_sweep(table, &dir.join("results.csv"))?;
    Ok(Fig2Summary { rows, sweep })
}

#[derive(Debug, Parser)]
#[command(name = "ci-irl", version, about = "Causally invariant inverse reinforcement learning on gridworlds")]
pub struct Cli {
    /// Experiment config (JSON). Defaults to the built-in corridor experiment.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample expert demonstrations for every intervention.
    GenExperts,
    /// Train the configured pipeline and write a checkpoint and trace.
    Train {
        /// Dataset directory from `gen-experts` instead of resampling.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render a checkpoint (or a CSV reward matrix) as a PGM heatmap.
    Render {
        #[arg(long, required_unless_present = "csv", conflicts_with = "csv")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Transfer evaluation of checkpoints under the configured perturbations.
    Eval {
        /// `LABEL=PATH` or `PATH`; repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<CheckpointArg>,
    },
    /// Train, render and evaluate the four-way reward comparison.
    ReproFig2,
    /// Print a preset config.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Corridor)]
        preset: Preset,
    },
}

impl Cli {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::corridor(DEFAULT_GROUP_SIZES),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
    }
}

/// Runs a parsed command line and returns what should go to stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let mut out = String::new();
    match &cli.command {
        Command::Config { preset } => {
            let cfg = ExperimentConfig::preset(*preset);
            let cfg = match cli.seed {
                Some(s) => cfg.with_seed(s),
                None => cfg,
            };
            out.push_str(&cfg.to_json());
        }
        Command::GenExperts => {
            let cfg = cli.experiment()?;
            let dir = cli.out_dir(&cfg);
            let m = cmd_gen_experts(&cfg, &dir)?;
            for f in &m.files {
                let _ = writeln!(out, "{}\t{}\t{}", dir.join(&f.file).display(), f.n_trajectories, f.sha256);
            }
        }
        Command::Train { data } => {
            let cfg = cli.experiment()?;
            let s = cmd_train(&cfg, &cli.out_dir(&cfg), data.as_deref())?;
            let _ = writeln!(out, "{}: {} iterations", s.label, s.iterations);
            if s.stopped_early {
                let _ = writeln!(out, "{}: stopped early (gradient norm below tolerance)", s.label);
            }
            let _ = writeln!(out, "checkpoint {}\ntrace {}", s.checkpoint.display(), s.trace.display());
        }
        Command::Render { checkpoint, csv } => {
            let dir = match &cli.out {
                Some(d) => d.clone(),
                None => default_output_dir(),
            };
            let r = match (checkpoint, csv) {
                (Some(c), _) => cmd_render(c, &dir)?,
                (None, Some(c)) => cmd_render_csv(c, &dir)?,
                (None, None) => return Err(Error::Usage("render needs --checkpoint or --csv".into())),
            };
            let _ = writeln!(out, "{}\n{}", r.pgm.display(), r.csv.display());
        }
        Command::Eval { checkpoints } => {
            let cfg = cli.experiment()?;
            let dir = cli.out_dir(&cfg);
            let table = cmd_eval(&cfg, checkpoints, &dir, cli.jobs)?;
            out.push_str(&results_csv(&table.rows));
        }
        Command::ReproFig2 => {
            let cfg = cli.experiment()?;
            let dir = cli.out_dir(&cfg);
            let s = cmd_repro_fig2(&cfg, &dir, cli.jobs)?;
            out.push_str(&fig2_summary_csv(&s.rows));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_levels_linear_and_constant() {
        assert_eq!(gray_levels(&[0.0, 1.0, 2.0, 3.0]), vec![0, 85, 170, 255]);
        assert_eq!(gray_levels(&[0.7; 6]), vec![128; 6]);
        assert_eq!(gray_levels(&[f64::NAN, 0.0, 1.0, f64::INFINITY]), vec![0, 0, 255, 255]);
    }

    #[test]
    fn pgm_layout() {
        let p = pgm(2, 2, &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p, "P2\n2 2\n255\n0 85\n170 255\n");
        assert!(pgm(3, 2, &[0.0; 4]).is_err());
    }

    #[test]
    fn matrix_csv_round_trip() {
        let v = [0.1, -2.5e-9, 3.0, 1.0 / 3.0, -0.0, 7.25];
        let text = reward_matrix_csv(3, 2, &v).unwrap();
        let (w, h, back) = parse_reward_matrix_csv(&text).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, v);
        assert!(parse_reward_matrix_csv("1,2\n3\n").is_err());
        assert!(parse_reward_matrix_csv("").is_err());
    }

    #[test]
    fn corridor_geometry() {
        let c = corridors(16);
        for path in &c {
            assert_eq!(path.len(), 31);
            assert_eq!(path[0], Cell(0, 0));
            assert_eq!(*path.last().unwrap(), Cell(15, 15));
            for w in path.windows(2) {
                let step = (w[1].x() - w[0].x()) + (w[1].y() - w[0].y());
                assert_eq!(step, 1);
            }
        }
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        for p in [Preset::Corridor, Preset::CorridorLarge, Preset::AirlToy] {
            let cfg = ExperimentConfig::preset(p);
            cfg.validate().unwrap();
            assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
        let sizes: Vec<usize> = ExperimentConfig::corridor(DEFAULT_GROUP_SIZES)
            .interventions
            .iter()
            .map(|i| i.n_trajectories)
            .collect();
        assert_eq!(sizes, vec![40, 10, 1]);
    }

    #[test]
    fn strict_config_parsing() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::airl_toy().to_json()).unwrap();
        v["train"]["lamda_ci"] = 0.1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::airl_toy().to_json()).unwrap();
        v["version"] = 2.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn seed_propagates() {
        let cfg = ExperimentConfig::airl_toy().with_seed(9);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.airl.seed), (9, 9, 9));
    }

    #[test]
    fn checkpoint_arguments() {
        let a: CheckpointArg = "ci=runs/a.json".parse().unwrap();
        assert_eq!(a.label.as_deref(), Some("ci"));
        let b: CheckpointArg = "runs/b.checkpoint.json".parse().unwrap();
        assert_eq!(b.label, None);
        assert_eq!(file_stem(&b.path), "b");
        assert!("=x".parse::<CheckpointArg>().is_err());
    }

    #[test]
    fn method_labels() {
        let labels: Vec<String> = fig2_methods(&TrainConfig::default()).iter().map(|m| m.method_label()).collect();
        assert_eq!(labels, vec!["erm", "l2-0.001", "ci-0.01", "ci-0.05"]);
    }
}
