//! Experiment configuration.
//!
//! Configurations are TOML documents whose every key has a default; a file
//! only lists what it changes. Unknown keys are rejected with the full
//! dotted path of the offending key. `key=value` overrides are applied on
//! top of the file before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::power::PowerModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub link: LinkConfig,
    pub power: PowerModelConfig,
    pub environment: EnvConfig,
    pub agents: AgentsConfig,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Room size (x, y, z) in m.
    pub room: [f64; 3],
    pub ap_positions: Vec<[f64; 3]>,
    pub led_half_angle_deg: f64,
    /// Half-angles below this are rejected.
    pub min_half_angle_deg: f64,
    pub irs: IrsConfig,
    pub users: UsersConfig,
    pub detector: DetectorConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room: [5.0, 5.0, 3.0],
            ap_positions: vec![
                [1.25, 1.25, 3.0],
                [1.25, 3.75, 3.0],
                [3.75, 1.25, 3.0],
                [3.75, 3.75, 3.0],
            ],
            led_half_angle_deg: 60.0,
            min_half_angle_deg: 1.0,
            irs: IrsConfig::default(),
            users: UsersConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

/// Wall carrying the mirror array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wall {
    /// Array in the x–z plane at y = 0; zero angles face into the room.
    Y0,
    /// Array in the y–z plane at x = 0.
    X0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrsConfig {
    pub rows: usize,
    pub cols: usize,
    pub element_width: f64,
    pub element_height: f64,
    /// Gap between adjacent elements in m.
    pub spacing: f64,
    pub wall: Wall,
    pub center: [f64; 3],
    pub reflectance: f64,
}

impl Default for IrsConfig {
    fn default() -> Self {
        Self {
            rows: 7,
            cols: 7,
            element_width: 0.25,
            element_height: 0.15,
            spacing: 0.10,
            wall: Wall::Y0,
            center: [2.5, 0.0, 1.5],
            reflectance: 0.95,
        }
    }
}

impl IrsConfig {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UsersConfig {
    pub count: usize,
    /// Receiver heights are drawn once per reset from this range.
    pub height_range: [f64; 2],
    /// Fixed user positions; when set, reset places users here.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 3]>>,
}

impl Default for UsersConfig {
    fn default() -> Self {
        Self {
            count: 5,
            height_range: [0.8, 1.2],
            positions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub area: f64,
    pub fov_deg: f64,
    pub responsivity: f64,
    pub filter_gain: f64,
    /// Stored for reference; no concentrator gain is applied.
    pub refractive_index: f64,
    /// (azimuth, elevation) in degrees of each photodiode of a receiver.
    pub orientations_deg: Vec<[f64; 2]>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            area: 1e-4,
            fov_deg: 85.0,
            responsivity: 0.5,
            filter_gain: 1.0,
            refractive_index: 1.5,
            orientations_deg: vec![[0.0, 90.0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    /// Transmitted optical power in W.
    pub p_opt: f64,
    /// Electrical-to-optical conversion ratio q, with P_e = P_opt / q.
    pub conversion_ratio: f64,
    pub bandwidth: f64,
    pub noise_psd: f64,
    /// Electrical power budget in W.
    pub p_max: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            p_opt: 2.0,
            conversion_ratio: 1.0,
            bandwidth: 20e6,
            noise_psd: 1e-21,
            p_max: 5.0,
        }
    }
}

impl LinkConfig {
    pub fn p_elec(&self) -> f64 {
        self.p_opt / self.conversion_ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    Episode,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Seconds of motion per step.
    pub dt: f64,
    /// Minimum-rate demand range in bit/s.
    pub rmin_range: [f64; 2],
    pub traffic_resample: Resample,
    /// Stationary probability that a user–AP direct path is blocked.
    pub blockage_probability: f64,
    /// Mean blocked duration in s.
    pub blockage_mean_duration: f64,
    /// Walking speed range in m/s.
    pub speed_range: [f64; 2],
    /// Pause range at waypoints in s.
    pub pause_range: [f64; 2],
    /// Users keep this distance in m from the side walls.
    pub wall_margin: f64,
    pub reward: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            rmin_range: [1e6, 1e6],
            traffic_resample: Resample::Episode,
            blockage_probability: 0.1,
            blockage_mean_duration: 2.0,
            speed_range: [0.0, 2.0],
            pause_range: [0.0, 1.0],
            wall_margin: 0.1,
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub w_ee: f64,
    pub w_jain: f64,
    /// SEE normaliser in bit/J.
    pub see_ref: f64,
    pub lambda_qos: f64,
    pub lambda_power: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_ee: 1.0,
            w_jain: 1.0,
            see_ref: 1e7,
            lambda_qos: 1.0,
            lambda_power: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetUpdate {
    Step,
    Episode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentsConfig {
    pub power_actor_hidden: Vec<usize>,
    pub angle_actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Hidden layers of the single joint actor baseline.
    pub joint_actor_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub target_update: TargetUpdate,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub noise_decay: f64,
    pub noise_min: f64,
    pub episodes: usize,
    pub steps: usize,
    /// Global-norm gradient clip; zero or negative disables clipping.
    pub grad_clip: f64,
    /// Bootstrap through the step cap instead of treating the last step of
    /// an episode as terminal. The observation carries no time index, so a
    /// terminal cap makes equal observations have different values.
    pub bootstrap_at_time_limit: bool,
    pub dqn: DqnConfig,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        Self {
            power_actor_hidden: vec![128, 128],
            angle_actor_hidden: vec![64, 64],
            critic_hidden: vec![256, 256],
            joint_actor_hidden: vec![128, 128],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            gamma: 0.99,
            tau: 0.001,
            target_update: TargetUpdate::Step,
            buffer_capacity: 100_000,
            batch_size: 128,
            noise_sigma: 0.2,
            noise_decay: 0.9999,
            noise_min: 0.01,
            episodes: 2000,
            steps: 100,
            grad_clip: 1.0,
            bootstrap_at_time_limit: false,
            dqn: DqnConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub power_profiles: usize,
    pub angle_presets: usize,
    pub lr: f64,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            power_profiles: 8,
            angle_presets: 8,
            lr: 1e-3,
            epsilon_start: 1.0,
            epsilon_decay: 0.9999,
            epsilon_min: 0.05,
        }
    }
}

/// Which optimiser drives the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Power agent and mirror agent with centralised critics.
    TwoAgent,
    SingleAgentDdpg,
    RandomIrs,
    NoIrs,
    FixedPower,
    DqnCodebook,
    GridOracle,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::TwoAgent,
        Scheme::SingleAgentDdpg,
        Scheme::RandomIrs,
        Scheme::NoIrs,
        Scheme::FixedPower,
        Scheme::DqnCodebook,
        Scheme::GridOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::TwoAgent => "two_agent",
            Scheme::SingleAgentDdpg => "single_agent_ddpg",
            Scheme::RandomIrs => "random_irs",
            Scheme::NoIrs => "no_irs",
            Scheme::FixedPower => "fixed_power",
            Scheme::DqnCodebook => "dqn_codebook",
            Scheme::GridOracle => "grid_oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        Scheme::ALL.into_iter().find(|x| x.name() == s)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub scheme: Scheme,
    pub eval_episodes: usize,
    /// Checkpoint period in episodes; zero writes only the final one.
    pub checkpoint_every: usize,
    /// Coefficients used by the fixed-power scheme; uniform when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_power: Option<Vec<f64>>,
    /// Upper bound on the number of cells a sweep may run.
    pub max_sweep_cells: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            output_dir: "runs".into(),
            scheme: Scheme::TwoAgent,
            eval_episodes: 10,
            checkpoint_every: 100,
            fixed_power: None,
            max_sweep_cells: 500,
        }
    }
}

impl ExperimentConfig {
    /// Loads `source` (a TOML path, or `default` for built-in values),
    /// applies `key=value` overrides and validates the result.
    pub fn load(source: &str, overrides: &[String]) -> Result<Self> {
        let table = if source == "default" {
            toml::Table::new()
        } else {
            let text = std::fs::read_to_string(Path::new(source))
                .map_err(|e| Error::config("--config", format!("cannot read {source}: {e}")))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::config("--config", format!("invalid TOML in {source}: {e}")))?
        };
        Self::from_table(table, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| Error::config("--config", format!("invalid TOML: {e}")))?;
        Self::from_table(table, overrides)
    }

    fn from_table(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let value = toml::Value::Table(table);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every resolved value, as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn num_users(&self) -> usize {
        self.scene.users.count
    }

    pub fn num_mirrors(&self) -> usize {
        self.scene.irs.count()
    }

    pub fn num_aps(&self) -> usize {
        self.scene.ap_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        }
        fn nonneg(key: &str, v: f64) -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be non-negative, got {v}")))
            }
        }
        fn range(key: &str, r: [f64; 2]) -> Result<()> {
            nonneg(key, r[0])?;
            nonneg(key, r[1])?;
            if r[0] > r[1] {
                return Err(Error::config(key, format!("lower bound {} exceeds upper {}", r[0], r[1])));
            }
            Ok(())
        }
        let s = &self.scene;
        for (i, v) in s.room.iter().enumerate() {
            positive(&format!("scene.room[{i}]"), *v)?;
        }
        if s.ap_positions.is_empty() {
            return Err(Error::config("scene.ap_positions", "at least one AP is required"));
        }
        if !(s.led_half_angle_deg >= s.min_half_angle_deg && s.led_half_angle_deg < 90.0) {
            return Err(Error::config(
                "scene.led_half_angle_deg",
                format!("must lie in [{}, 90), got {}", s.min_half_angle_deg, s.led_half_angle_deg),
            ));
        }
        positive("scene.irs.element_width", s.irs.element_width)?;
        positive("scene.irs.element_height", s.irs.element_height)?;
        nonneg("scene.irs.spacing", s.irs.spacing)?;
        if !(s.irs.reflectance > 0.0 && s.irs.reflectance <= 1.0) {
            return Err(Error::config("scene.irs.reflectance", "must lie in (0, 1]"));
        }
        if s.users.count == 0 {
            return Err(Error::config("scene.users.count", "at least one user is required"));
        }
        range("scene.users.height_range", s.users.height_range)?;
        if let Some(p) = &s.users.positions {
            if p.len() != s.users.count {
                return Err(Error::config(
                    "scene.users.positions",
                    format!("{} positions given for {} users", p.len(), s.users.count),
                ));
            }
        }
        positive("scene.detector.area", s.detector.area)?;
        if !(s.detector.fov_deg > 0.0 && s.detector.fov_deg <= 90.0) {
            return Err(Error::config("scene.detector.fov_deg", "must lie in (0, 90]"));
        }
        positive("scene.detector.responsivity", s.detector.responsivity)?;
        positive("scene.detector.filter_gain", s.detector.filter_gain)?;
        if s.detector.orientations_deg.is_empty() {
            return Err(Error::config("scene.detector.orientations_deg", "at least one detector is required"));
        }

        let l = &self.link;
        positive("link.p_opt", l.p_opt)?;
        positive("link.conversion_ratio", l.conversion_ratio)?;
        positive("link.bandwidth", l.bandwidth)?;
        positive("link.noise_psd", l.noise_psd)?;
        positive("link.p_max", l.p_max)?;

        let p = &self.power;
        for (key, v) in [
            ("power.circuit_tx", p.circuit_tx),
            ("power.led_driver", p.led_driver),
            ("power.amplifier", p.amplifier),
            ("power.filter_tx", p.filter_tx),
            ("power.dac", p.dac),
            ("power.mirror_element", p.mirror_element),
            ("power.circuit_rx", p.circuit_rx),
            ("power.filter_rx", p.filter_rx),
            ("power.tia", p.tia),
            ("power.adc", p.adc),
        ] {
            nonneg(key, v)?;
        }

        let e = &self.environment;
        positive("environment.dt", e.dt)?;
        range("environment.rmin_range", e.rmin_range)?;
        if !(0.0..=1.0).contains(&e.blockage_probability) {
            return Err(Error::config("environment.blockage_probability", "must lie in [0, 1]"));
        }
        positive("environment.blockage_mean_duration", e.blockage_mean_duration)?;
        range("environment.speed_range", e.speed_range)?;
        range("environment.pause_range", e.pause_range)?;
        nonneg("environment.wall_margin", e.wall_margin)?;
        if 2.0 * e.wall_margin >= s.room[0].min(s.room[1]) {
            return Err(Error::config("environment.wall_margin", "leaves no floor area"));
        }
        positive("environment.reward.see_ref", e.reward.see_ref)?;

        let a = &self.agents;
        nonneg("agents.actor_lr", a.actor_lr)?;
        nonneg("agents.critic_lr", a.critic_lr)?;
        if !(0.0..=1.0).contains(&a.gamma) {
            return Err(Error::config("agents.gamma", "must lie in [0, 1]"));
        }
        if !(a.tau > 0.0 && a.tau <= 1.0) {
            return Err(Error::config("agents.tau", "must lie in (0, 1]"));
        }
        if a.batch_size == 0 {
            return Err(Error::config("agents.batch_size", "must be positive"));
        }
        if a.buffer_capacity < a.batch_size {
            return Err(Error::config("agents.buffer_capacity", "must be at least the batch size"));
        }
        nonneg("agents.noise_sigma", a.noise_sigma)?;
        if !(a.noise_decay > 0.0 && a.noise_decay <= 1.0) {
            return Err(Error::config("agents.noise_decay", "must lie in (0, 1]"));
        }
        nonneg("agents.noise_min", a.noise_min)?;
        if a.steps == 0 {
            return Err(Error::config("agents.steps", "must be positive"));
        }
        for (key, layers) in [
            ("agents.power_actor_hidden", &a.power_actor_hidden),
            ("agents.angle_actor_hidden", &a.angle_actor_hidden),
            ("agents.critic_hidden", &a.critic_hidden),
            ("agents.joint_actor_hidden", &a.joint_actor_hidden),
            ("agents.dqn.hidden", &a.dqn.hidden),
        ] {
            if layers.contains(&0) {
                return Err(Error::config(key, "hidden layer widths must be positive"));
            }
        }
        if a.dqn.power_profiles == 0 || a.dqn.angle_presets == 0 {
            return Err(Error::config("agents.dqn", "codebook sizes must be positive"));
        }
        if a.dqn.power_profiles * a.dqn.angle_presets > 4096 {
            return Err(Error::config("agents.dqn", "codebook larger than 4096 actions"));
        }

        let r = &self.run;
        if r.seeds.is_empty() {
            return Err(Error::config("run.seeds", "at least one seed is required"));
        }
        if let Some(fp) = &r.fixed_power {
            if fp.len() != s.users.count {
                return Err(Error::config("run.fixed_power", "length must equal the user count"));
            }
            crate::noma::check_simplex(fp).map_err(|e| Error::config("run.fixed_power", e.to_string()))?;
        }
        Ok(())
    }
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// value, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must have the form key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::config(assignment, "empty key"));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(key, format!("`{part}` is not a section"))),
        };
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
