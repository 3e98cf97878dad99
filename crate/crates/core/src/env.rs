//! The downlink as a Markov decision process.
//!
//! One step applies the mirror angles and the power split, measures the
//! resulting rates and efficiency, then advances mobility, traffic and
//! blockage by `dt`. Agent `l` allocates power and observes SINRs, demands
//! and mirror angles; agent `m` steers the mirrors and observes SINRs,
//! coefficients and demands.

use std::f64::consts::FRAC_PI_2;

use ndarray::Array2;
use rand::Rng as _;

use crate::channel::{self, ChannelGains, LedAp, MirrorElement, PhotoDetector, Scene, UserTerminal, Vec3};
use crate::config::{EnvConfig, ExperimentConfig, IrsConfig, Resample, RewardConfig, Wall};
use crate::error::{Error, Result};
use crate::noma::{self, DecodingOrder, LinkParams, PowerAllocation};
use crate::power::{self, PowerBreakdown};
use crate::rng::{self, Rng};

/// Bound on every mirror angle.
pub const ANGLE_LIMIT: f64 = FRAC_PI_2;

/// Rates in observations are expressed in Mbit/s.
const RATE_SCALE: f64 = 1e6;

// ---------------------------------------------------------------- mobility

#[derive(Debug, Clone, PartialEq)]
pub struct UserMotion {
    pub position: Vec3,
    pub waypoint: Vec3,
    pub speed: f64,
    /// Remaining pause at the current waypoint in s.
    pub pause: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityState {
    pub users: Vec<UserMotion>,
}

/// Random-waypoint parameters over a rectangular footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RwpModel {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub speed_range: [f64; 2],
    pub pause_range: [f64; 2],
}

impl RwpModel {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let room = cfg.scene.room;
        let m = cfg.environment.wall_margin;
        Self {
            x_range: [m, room[0] - m],
            y_range: [m, room[1] - m],
            speed_range: cfg.environment.speed_range,
            pause_range: cfg.environment.pause_range,
        }
    }

    fn waypoint(&self, z: f64, rng: &mut Rng) -> Vec3 {
        Vec3::new(
            rng.random_range(self.x_range[0]..=self.x_range[1]),
            rng.random_range(self.y_range[0]..=self.y_range[1]),
            z,
        )
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (self.x_range[0]..=self.x_range[1]).contains(&p.x) && (self.y_range[0]..=self.y_range[1]).contains(&p.y)
    }

    /// Users at `positions`, each heading for a fresh waypoint.
    pub fn start(&self, positions: &[Vec3], rng: &mut Rng) -> MobilityState {
        let users = positions
            .iter()
            .map(|&p| UserMotion {
                position: p,
                waypoint: self.waypoint(p.z, rng),
                speed: rng.random_range(self.speed_range[0]..=self.speed_range[1]),
                pause: 0.0,
            })
            .collect();
        MobilityState { users }
    }
}

/// Advances every user by `dt` seconds. A user walks straight towards its
/// waypoint; on arrival it pauses for a sampled time, then draws a new
/// waypoint and speed.
pub fn rwp_step(state: &MobilityState, dt: f64, model: &RwpModel, rng: &mut Rng) -> Result<MobilityState> {
    if !(dt > 0.0) {
        return Err(Error::Domain { what: "time step", value: dt });
    }
    let mut next = state.clone();
    for u in &mut next.users {
        if u.pause > 0.0 {
            u.pause -= dt;
            if u.pause <= 0.0 {
                u.pause = 0.0;
                u.waypoint = model.waypoint(u.position.z, rng);
                u.speed = rng.random_range(model.speed_range[0]..=model.speed_range[1]);
            }
            continue;
        }
        let to_go = u.waypoint - u.position;
        let dist = to_go.norm();
        let travel = u.speed * dt;
        if travel <= 0.0 {
            continue;
        }
        if travel >= dist {
            u.position = u.waypoint;
            u.pause = rng.random_range(model.pause_range[0]..=model.pause_range[1]);
            if u.pause <= 0.0 {
                u.waypoint = model.waypoint(u.position.z, rng);
                u.speed = rng.random_range(model.speed_range[0]..=model.speed_range[1]);
            }
        } else {
            u.position = u.position + to_go * (travel / dist);
        }
    }
    Ok(next)
}

// ----------------------------------------------------------------- traffic

/// Minimum-rate demand of every user in bit/s.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficDemand(pub Vec<f64>);

impl TrafficDemand {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn sample_traffic(k: usize, range: [f64; 2], rng: &mut Rng) -> TrafficDemand {
    TrafficDemand((0..k).map(|_| rng.random_range(range[0]..=range[1])).collect())
}

// ---------------------------------------------------------------- blockage

/// Two-state Markov blockage of each direct user–AP path.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockageProcess {
    pub mask: Array2<bool>,
    p_clear: f64,
    p_block: f64,
    always: Option<bool>,
}

impl BlockageProcess {
    /// `probability` is the stationary blocked fraction; `mean_duration`
    /// the mean length of a blocked interval.
    pub fn new(k: usize, l: usize, probability: f64, mean_duration: f64, dt: f64, rng: &mut Rng) -> Self {
        let always = if probability <= 0.0 {
            Some(false)
        } else if probability >= 1.0 {
            Some(true)
        } else {
            None
        };
        let p_clear = (dt / mean_duration).min(1.0);
        let p_block = (probability / (1.0 - probability) * p_clear).min(1.0);
        let mask = Array2::from_shape_fn((k, l), |_| match always {
            Some(b) => b,
            None => rng.random::<f64>() < probability,
        });
        Self {
            mask,
            p_clear,
            p_block,
            always,
        }
    }

    pub fn step(&mut self, rng: &mut Rng) {
        if let Some(b) = self.always {
            self.mask.fill(b);
            return;
        }
        for b in self.mask.iter_mut() {
            let u: f64 = rng.random();
            *b = if *b { u >= self.p_clear } else { u < self.p_block };
        }
    }
}

// ----------------------------------------------------------------- actions

/// Power action as a point on the simplex; the environment assigns it to
/// users in inverse gain order when applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionPower {
    simplex: Vec<f64>,
}

impl ActionPower {
    pub fn from_simplex(p: Vec<f64>) -> Result<Self> {
        noma::check_simplex(&p)?;
        Ok(Self { simplex: p })
    }

    /// Softmax of unconstrained logits.
    pub fn from_logits(raw: &[f64]) -> Result<Self> {
        Ok(Self { simplex: softmax(raw)? })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            simplex: vec![1.0 / k as f64; k],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.simplex
    }

    pub fn len(&self) -> usize {
        self.simplex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.simplex.is_empty()
    }

    pub fn ordered(&self, order: &DecodingOrder) -> Result<PowerAllocation> {
        noma::enforce_inverse_order(&self.simplex, order)
    }
}

/// Mirror angles `(yaw, roll)` per mirror, inside `[-π/2, π/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionAngles {
    angles: Vec<(f64, f64)>,
}

impl ActionAngles {
    pub fn zeros(m: usize) -> Self {
        Self {
            angles: vec![(0.0, 0.0); m],
        }
    }

    pub fn new(angles: Vec<(f64, f64)>) -> Result<Self> {
        for &(a, b) in &angles {
            for v in [a, b] {
                if !v.is_finite() || v.abs() > ANGLE_LIMIT {
                    return Err(Error::Domain { what: "mirror angle", value: v });
                }
            }
        }
        Ok(Self { angles })
    }

    /// Angles from values in `[-1, 1]`, laid out as all yaws then all rolls.
    pub fn from_unit(u: &[f64]) -> Result<Self> {
        if u.len() % 2 != 0 {
            return Err(Error::Dimension {
                what: "angle action",
                expected: u.len() + 1,
                got: u.len(),
            });
        }
        let m = u.len() / 2;
        let mut angles = Vec::with_capacity(m);
        for i in 0..m {
            let (a, b) = (u[i], u[m + i]);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::NonFinite("angle action"));
            }
            angles.push((
                (a.clamp(-1.0, 1.0)) * ANGLE_LIMIT,
                (b.clamp(-1.0, 1.0)) * ANGLE_LIMIT,
            ));
        }
        Ok(Self { angles })
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.angles
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// Yaws followed by rolls.
    pub fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.angles.iter().map(|a| a.0).collect();
        v.extend(self.angles.iter().map(|a| a.1));
        v
    }
}

pub fn softmax(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Simplex("empty logits".into()));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("power logits"));
    }
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Softmax of the logits, assigned in inverse gain order.
pub fn decode_action_power(raw: &[f64], order: &DecodingOrder) -> Result<PowerAllocation> {
    noma::enforce_inverse_order(&softmax(raw)?, order)
}

/// `tanh(raw)·π/2`, with the first half of `raw` giving yaws and the second
/// half rolls.
pub fn decode_action_angles(raw: &[f64]) -> Result<ActionAngles> {
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("angle logits"));
    }
    let t: Vec<f64> = raw.iter().map(|x| x.tanh()).collect();
    ActionAngles::from_unit(&t)
}

// ------------------------------------------------------------------ reward

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTerms {
    pub reward: f64,
    pub qos_violations: usize,
    pub power_violation: bool,
}

pub fn reward(see: f64, jain: f64, rates: &[f64], demands: &TrafficDemand, p_elec: f64, p_max: f64, cfg: &RewardConfig) -> RewardTerms {
    let qos = rates.iter().zip(demands.as_slice()).filter(|(r, d)| r < d).count();
    let pv = p_elec > p_max;
    let r = cfg.w_ee * see / cfg.see_ref + cfg.w_jain * jain
        - cfg.lambda_qos * qos as f64
        - cfg.lambda_power * if pv { 1.0 } else { 0.0 };
    RewardTerms {
        reward: r,
        qos_violations: qos,
        power_violation: pv,
    }
}

// ------------------------------------------------------------------- scene

/// Mirror centres of a `rows × cols` array on the configured wall.
pub fn mirror_array(irs: &IrsConfig) -> Vec<MirrorElement> {
    let mut out = Vec::with_capacity(irs.count());
    let pitch_w = irs.element_width + irs.spacing;
    let pitch_h = irs.element_height + irs.spacing;
    let [cx, cy, cz] = irs.center;
    for r in 0..irs.rows {
        let dz = (r as f64 - (irs.rows as f64 - 1.0) / 2.0) * pitch_h;
        for c in 0..irs.cols {
            let dw = (c as f64 - (irs.cols as f64 - 1.0) / 2.0) * pitch_w;
            let center = match irs.wall {
                Wall::Y0 => Vec3::new(cx + dw, cy, cz + dz),
                Wall::X0 => Vec3::new(cx, cy + dw, cz + dz),
            };
            out.push(MirrorElement {
                center,
                width: irs.element_width,
                height: irs.element_height,
                reflectance: irs.reflectance,
                yaw: 0.0,
                roll: 0.0,
            });
        }
    }
    out
}

pub fn user_terminal(cfg: &ExperimentConfig, position: Vec3) -> UserTerminal {
    let d = &cfg.scene.detector;
    let detectors = d
        .orientations_deg
        .iter()
        .map(|[az, el]| PhotoDetector {
            position,
            normal: PhotoDetector::normal_from_az_el(az.to_radians(), el.to_radians()),
            area: d.area,
            fov: d.fov_deg.to_radians(),
            responsivity: d.responsivity,
            filter_gain: d.filter_gain,
        })
        .collect();
    UserTerminal { detectors }
}

pub fn build_scene(cfg: &ExperimentConfig, user_positions: &[Vec3]) -> Result<Scene> {
    let s = &cfg.scene;
    let aps = s
        .ap_positions
        .iter()
        .map(|p| LedAp::new(Vec3::from_array(*p), s.led_half_angle_deg.to_radians()))
        .collect();
    let users = user_positions.iter().map(|&p| user_terminal(cfg, p)).collect();
    Scene::new(Vec3::from_array(s.room), aps, mirror_array(&s.irs), users)
}

pub fn link_params(cfg: &ExperimentConfig) -> LinkParams {
    LinkParams {
        p_elec: cfg.link.p_elec(),
        bandwidth: cfg.link.bandwidth,
        noise_psd: cfg.link.noise_psd,
        responsivity: cfg.scene.detector.responsivity,
    }
}

// ------------------------------------------------------------- environment

/// Everything measured for one (allocation, angles) pair on a frozen state.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMetrics {
    pub gains: Vec<f64>,
    pub order: Vec<usize>,
    pub alpha: Vec<f64>,
    pub sinr: Vec<f64>,
    pub rates: Vec<f64>,
    pub sum_rate: f64,
    pub power: PowerBreakdown,
    pub see: f64,
    pub jain: f64,
    pub objective: f64,
    pub terms: RewardTerms,
}

impl SnapshotMetrics {
    pub fn feasible(&self) -> bool {
        self.terms.qos_violations == 0 && !self.terms.power_violation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    /// Power agent: SINR features, demands, yaws, rolls.
    pub l: Vec<f64>,
    /// Mirror agent: SINR features, coefficients, demands.
    pub m: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub qos_violations: usize,
    pub power_violation: bool,
    pub metrics: SnapshotMetrics,
    pub next: Observations,
    /// Set on the last step of an episode.
    pub done: bool,
}

#[derive(Debug, Clone)]
struct Streams {
    placement: Rng,
    mobility: Rng,
    traffic: Rng,
    blockage: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            placement: rng::stream(seed, "environment.placement"),
            mobility: rng::stream(seed, "environment.mobility"),
            traffic: rng::stream(seed, "environment.traffic"),
            blockage: rng::stream(seed, "environment.blockage"),
        }
    }
}

#[derive(Debug, Clone)]
struct State {
    scene: Scene,
    mobility: MobilityState,
    traffic: TrafficDemand,
    blockage: BlockageProcess,
    alpha: PowerAllocation,
    angles: ActionAngles,
    sinr: Vec<f64>,
    step: usize,
    streams: Streams,
}

#[derive(Debug, Clone)]
pub struct Environment {
    cfg: ExperimentConfig,
    link: LinkParams,
    rwp: RwpModel,
    steps_per_episode: usize,
    state: Option<State>,
}

impl Environment {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            link: link_params(cfg),
            rwp: RwpModel::from_config(cfg),
            steps_per_episode: cfg.agents.steps,
            state: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn num_users(&self) -> usize {
        self.cfg.num_users()
    }

    pub fn num_mirrors(&self) -> usize {
        self.cfg.num_mirrors()
    }

    pub fn obs_dim_l(&self) -> usize {
        2 * self.num_users() + 2 * self.num_mirrors()
    }

    pub fn obs_dim_m(&self) -> usize {
        3 * self.num_users()
    }

    pub fn link(&self) -> &LinkParams {
        &self.link
    }

    pub fn scene(&self) -> Result<&Scene> {
        Ok(&self.state()?.scene)
    }

    pub fn demands(&self) -> Result<&TrafficDemand> {
        Ok(&self.state()?.traffic)
    }

    pub fn blockage_mask(&self) -> Result<&Array2<bool>> {
        Ok(&self.state()?.blockage.mask)
    }

    pub fn current_angles(&self) -> Result<&ActionAngles> {
        Ok(&self.state()?.angles)
    }

    pub fn current_alpha(&self) -> Result<&PowerAllocation> {
        Ok(&self.state()?.alpha)
    }

    fn state(&self) -> Result<&State> {
        self.state.as_ref().ok_or(Error::NotReset)
    }

    /// Starts a new episode. Every random stream is re-derived from `seed`.
    pub fn reset(&mut self, seed: u64) -> Result<Observations> {
        let mut streams = Streams::new(seed);
        let k = self.num_users();
        let users = &self.cfg.scene.users;
        let positions: Vec<Vec3> = match &users.positions {
            Some(p) => p.iter().map(|a| Vec3::from_array(*a)).collect(),
            None => (0..k)
                .map(|_| {
                    let z = streams.placement.random_range(users.height_range[0]..=users.height_range[1]);
                    self.rwp.waypoint(z, &mut streams.placement)
                })
                .collect(),
        };
        let scene = build_scene(&self.cfg, &positions)?;
        let mobility = self.rwp.start(&positions, &mut streams.mobility);
        let env = &self.cfg.environment;
        let traffic = sample_traffic(k, env.rmin_range, &mut streams.traffic);
        let blockage = BlockageProcess::new(
            k,
            self.cfg.num_aps(),
            env.blockage_probability,
            env.blockage_mean_duration,
            env.dt,
            &mut streams.blockage,
        );
        let mut state = State {
            scene,
            mobility,
            traffic,
            blockage,
            alpha: PowerAllocation::uniform(k),
            angles: ActionAngles::zeros(self.num_mirrors()),
            sinr: vec![0.0; k],
            step: 0,
            streams,
        };
        refresh_sinr(&mut state, &self.link)?;
        let obs = observe(&state);
        self.state = Some(state);
        Ok(obs)
    }

    /// Measures an allocation and angle setting on the current state without
    /// advancing it.
    pub fn evaluate_snapshot(&self, power: &ActionPower, angles: &ActionAngles) -> Result<SnapshotMetrics> {
        self.check_dims(power, angles)?;
        let gains = self.snapshot_gains(angles)?;
        self.measure_gains(&gains, power, angles)
    }

    /// Channel gains of the current state with the mirrors set to `angles`.
    pub fn snapshot_gains(&self, angles: &ActionAngles) -> Result<ChannelGains> {
        let st = self.state()?;
        if angles.len() != self.num_mirrors() {
            return Err(Error::Dimension {
                what: "angle action",
                expected: self.num_mirrors(),
                got: angles.len(),
            });
        }
        let mut scene = st.scene.clone();
        apply_angles(&mut scene, angles);
        channel::channel_matrix(&scene, Some(&st.blockage.mask))
    }

    /// Metrics of `power` on gains previously obtained for `angles`.
    pub fn measure_gains(&self, gains: &ChannelGains, power: &ActionPower, angles: &ActionAngles) -> Result<SnapshotMetrics> {
        let st = self.state()?;
        self.check_dims(power, angles)?;
        let changed = if self.cfg.power.irs_changed_only {
            angles.as_slice().iter().zip(st.angles.as_slice()).filter(|(a, b)| a != b).count()
        } else {
            angles.len()
        };
        measure(&self.cfg, &self.link, gains, power, &st.traffic, changed)
    }

    fn check_dims(&self, power: &ActionPower, angles: &ActionAngles) -> Result<()> {
        if power.len() != self.num_users() {
            return Err(Error::Dimension {
                what: "power action",
                expected: self.num_users(),
                got: power.len(),
            });
        }
        if angles.len() != self.num_mirrors() {
            return Err(Error::Dimension {
                what: "angle action",
                expected: self.num_mirrors(),
                got: angles.len(),
            });
        }
        Ok(())
    }

    pub fn step(&mut self, power: &ActionPower, angles: &ActionAngles) -> Result<StepOutcome> {
        let metrics = self.evaluate_snapshot(power, angles)?;
        let env: &EnvConfig = &self.cfg.environment;
        let k = self.cfg.num_users();
        let st = self.state.as_mut().ok_or(Error::NotReset)?;

        apply_angles(&mut st.scene, angles);
        st.angles = angles.clone();
        st.alpha = PowerAllocation::new(metrics.alpha.clone())?;

        st.mobility = rwp_step(&st.mobility, env.dt, &self.rwp, &mut st.streams.mobility)?;
        for (user, motion) in st.scene.users.iter_mut().zip(&st.mobility.users) {
            user.set_position(motion.position);
        }
        if env.traffic_resample == Resample::Step {
            st.traffic = sample_traffic(k, env.rmin_range, &mut st.streams.traffic);
        }
        st.blockage.step(&mut st.streams.blockage);
        st.step += 1;

        refresh_sinr(st, &self.link)?;
        let next = observe(st);
        Ok(StepOutcome {
            reward: metrics.terms.reward,
            qos_violations: metrics.terms.qos_violations,
            power_violation: metrics.terms.power_violation,
            metrics,
            next,
            done: st.step >= self.steps_per_episode,
        })
    }
}

fn apply_angles(scene: &mut Scene, angles: &ActionAngles) {
    for (m, &(yaw, roll)) in scene.mirrors.iter_mut().zip(angles.as_slice()) {
        m.yaw = yaw;
        m.roll = roll;
    }
}

fn measure(
    cfg: &ExperimentConfig,
    link: &LinkParams,
    gains: &ChannelGains,
    power: &ActionPower,
    demands: &TrafficDemand,
    mirrors_charged: usize,
) -> Result<SnapshotMetrics> {
    let order = noma::sort_users_by_gain(&gains.combined);
    let alpha = power.ordered(&order)?;
    let sinr = noma::sinrs(&alpha, &gains.combined, &order, link);
    let rates: Vec<f64> = sinr.iter().map(|&g| noma::rate(g, link.bandwidth)).collect();
    let sum_rate = noma::sum_rate(&rates);
    let breakdown = power::total_power(link.p_elec, cfg.num_aps(), mirrors_charged, cfg.num_users(), &cfg.power);
    let see = power::see(sum_rate, breakdown.p_total)?;
    let jain = power::jain(&rates);
    let terms = reward(see, jain, &rates, demands, link.p_elec, cfg.link.p_max, &cfg.environment.reward);
    Ok(SnapshotMetrics {
        gains: gains.combined.clone(),
        order: order.as_slice().to_vec(),
        alpha: alpha.as_slice().to_vec(),
        sinr,
        rates,
        sum_rate,
        power: breakdown,
        see,
        jain,
        objective: power::objective(jain, see),
        terms,
    })
}

/// SINRs under the held coefficients, reassigned to the current gain order.
fn refresh_sinr(st: &mut State, link: &LinkParams) -> Result<()> {
    let gains = channel::channel_matrix(&st.scene, Some(&st.blockage.mask))?;
    let order = noma::sort_users_by_gain(&gains.combined);
    let alpha = noma::enforce_inverse_order(st.alpha.as_slice(), &order)?;
    st.sinr = noma::sinrs(&alpha, &gains.combined, &order, link);
    st.alpha = alpha;
    Ok(())
}

fn observe(st: &State) -> Observations {
    let snr: Vec<f64> = st.sinr.iter().map(|g| (1.0 + g).log10()).collect();
    let demand: Vec<f64> = st.traffic.as_slice().iter().map(|r| r / RATE_SCALE).collect();
    let mut l = snr.clone();
    l.extend_from_slice(&demand);
    l.extend(st.angles.flat());
    let mut m = snr;
    m.extend_from_slice(st.alpha.as_slice());
    m.extend_from_slice(&demand);
    Observations { l, m }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::load(
            "default",
            &[
                "scene.ap_positions=[[2.5,2.5,3.0]]".into(),
                "scene.irs.rows=1".into(),
                "scene.irs.cols=1".into(),
                "scene.users.count=2".into(),
                "scene.users.positions=[[1.5,2.0,1.0],[3.5,3.0,1.0]]".into(),
                "environment.speed_range=[0.0,0.0]".into(),
                "environment.blockage_probability=0.0".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn reset_dimensions_and_initial_state() {
        let cfg = ExperimentConfig::default();
        let mut env = Environment::new(&cfg).unwrap();
        let o = env.reset(11).unwrap();
        assert_eq!(o.l.len(), 108);
        assert_eq!(o.m.len(), 15);
        assert_eq!(env.current_alpha().unwrap().as_slice(), &[0.2; 5]);
        assert_eq!(&o.m[5..10], &[0.2; 5]);
        assert!(o.l[10..].iter().all(|&a| a == 0.0));
        assert_eq!(env.reset(11).unwrap(), o);
        assert_ne!(env.reset(12).unwrap(), o);
    }

    #[test]
    fn unreset_step_fails() {
        let mut env = Environment::new(&ExperimentConfig::default()).unwrap();
        let r = env.step(&ActionPower::uniform(5), &ActionAngles::zeros(49));
        assert!(matches!(r, Err(Error::NotReset)));
    }

    #[test]
    fn step_determinism_and_dimension_checks() {
        let cfg = ExperimentConfig::default();
        let mut a = Environment::new(&cfg).unwrap();
        let mut b = Environment::new(&cfg).unwrap();
        a.reset(5).unwrap();
        b.reset(5).unwrap();
        let p = ActionPower::from_logits(&[0.3, -0.1, 0.5, 0.0, 1.0]).unwrap();
        let ang = decode_action_angles(&(0..98).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        for _ in 0..20 {
            assert_eq!(a.step(&p, &ang).unwrap(), b.step(&p, &ang).unwrap());
        }
        assert!(a.step(&ActionPower::uniform(4), &ang).is_err());
        assert!(a.step(&p, &ActionAngles::zeros(3)).is_err());
    }

    #[test]
    fn episode_ends_after_configured_steps() {
        let mut cfg = tiny();
        cfg.agents.steps = 3;
        let mut env = Environment::new(&cfg).unwrap();
        env.reset(0).unwrap();
        let p = ActionPower::uniform(2);
        let a = ActionAngles::zeros(1);
        assert!(!env.step(&p, &a).unwrap().done);
        assert!(!env.step(&p, &a).unwrap().done);
        assert!(env.step(&p, &a).unwrap().done);
    }

    #[test]
    fn tiny_fixture_matches_scripted_pipeline() {
        use std::f64::consts::{E, PI};
        let cfg = tiny();
        let mut env = Environment::new(&cfg).unwrap();
        env.reset(3).unwrap();
        let power = ActionPower::from_simplex(vec![0.35, 0.65]).unwrap();
        let angles = ActionAngles::new(vec![(0.2, 1.1)]).unwrap();
        let out = env.step(&power, &angles).unwrap();

        // Straight-line evaluation of the whole pipeline.
        let n = -(2.0f64).ln() / (60f64.to_radians().cos()).ln();
        let ap: [f64; 3] = [2.5, 2.5, 3.0];
        let mc: [f64; 3] = [2.5, 0.0, 1.5];
        let (area, fov, rp) = (1e-4, 85f64.to_radians(), 0.5);
        let (w, h, rho) = (0.25, 0.15, 0.95);
        let (yaw, roll): (f64, f64) = (0.2, 1.1);
        let nm = [yaw.sin() * roll.cos(), yaw.cos() * roll.cos(), roll.sin()];
        let users: [[f64; 3]; 2] = [[1.5, 2.0, 1.0], [3.5, 3.0, 1.0]];
        let mut g = [0.0; 2];
        for (k, u) in users.iter().enumerate() {
            let d = [u[0] - ap[0], u[1] - ap[1], u[2] - ap[2]];
            let dd = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let c = -d[2] / dd;
            let los = if c.acos() <= fov { (n + 1.0) * area * c.powf(n) * c / (2.0 * PI * dd * dd) } else { 0.0 };
            let a = [mc[0] - ap[0], mc[1] - ap[1], mc[2] - ap[2]];
            let da = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let b = [mc[0] - u[0], mc[1] - u[1], mc[2] - u[2]];
            let db = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            let c1 = -a[2] / da;
            let c2 = -(nm[0] * a[0] + nm[1] * a[1] + nm[2] * a[2]) / da;
            let c3 = (nm[0] * b[0] + nm[1] * b[1] + nm[2] * b[2]) / db;
            let c4 = b[2] / db;
            let irs = if c1 >= 0.0 && c2 >= 0.0 && c3 >= 0.0 && c4.acos() <= fov {
                (n + 1.0) * rho * area * w * h * c1.powf(n) * c2 * c3 * c4 / (2.0 * PI * PI * da * da * db * db)
            } else {
                0.0
            };
            g[k] = los + irs;
        }
        let (weak, strong) = if g[0] <= g[1] { (0, 1) } else { (1, 0) };
        let mut alpha = [0.0; 2];
        alpha[weak] = 0.65;
        alpha[strong] = 0.35;
        let noise = 20e6 * 1e-21;
        let s = |k: usize| (rp * g[k]).powi(2) * 2.0;
        let mut sinr = [0.0; 2];
        sinr[weak] = s(weak) * alpha[weak] / (s(weak) * alpha[strong] + noise);
        sinr[strong] = s(strong) * alpha[strong] / noise;
        let rates: Vec<f64> = sinr.iter().map(|x| 20e6 * (1.0 + E / (2.0 * PI) * x).log2()).collect();
        let sum = rates[0] + rates[1];
        let p_total = 2.0 + 6.4655 + 0.1 + 2.0 * 2.5994;
        let see = sum / p_total;
        let jain = sum * sum / (2.0 * (rates[0] * rates[0] + rates[1] * rates[1]));
        let qos = rates.iter().filter(|&&r| r < 1e6).count() as f64;

        let m = &out.metrics;
        for k in 0..2 {
            assert_relative_eq!(m.gains[k], g[k], max_relative = 1e-12);
            assert_relative_eq!(m.alpha[k], alpha[k], max_relative = 1e-15);
            assert_relative_eq!(m.rates[k], rates[k], max_relative = 1e-12);
        }
        assert_relative_eq!(m.power.p_total, p_total, max_relative = 1e-14);
        assert_relative_eq!(m.see, see, max_relative = 1e-12);
        assert_relative_eq!(m.jain, jain, max_relative = 1e-12);
        assert_relative_eq!(out.reward, see / 1e7 + jain - qos, max_relative = 1e-12);
        assert!(m.gains.iter().zip(&g).all(|(a, b)| *a > 0.0 && *b > 0.0));
    }

    #[test]
    fn zero_mirror_configuration() {
        let mut cfg = tiny();
        cfg.scene.irs.rows = 0;
        let mut env = Environment::new(&cfg).unwrap();
        let o = env.reset(1).unwrap();
        assert_eq!(o.l.len(), 4);
        let out = env.step(&ActionPower::uniform(2), &ActionAngles::zeros(0)).unwrap();
        let scene = build_scene(&cfg, &[Vec3::new(1.5, 2.0, 1.0), Vec3::new(3.5, 3.0, 1.0)]).unwrap();
        let g = channel::channel_matrix(&scene, None).unwrap();
        assert_eq!(out.metrics.gains, g.combined);
        assert_eq!(out.metrics.power.p_irs, 0.0);
    }

    #[test]
    fn full_blockage_without_mirrors_silences_everyone() {
        let mut cfg = tiny();
        cfg.scene.irs.rows = 0;
        cfg.environment.blockage_probability = 1.0;
        let mut env = Environment::new(&cfg).unwrap();
        env.reset(1).unwrap();
        let out = env.step(&ActionPower::uniform(2), &ActionAngles::zeros(0)).unwrap();
        assert!(out.metrics.rates.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn power_decoding_examples() {
        let order = noma::sort_users_by_gain(&[1e-6, 2e-6]);
        let a = decode_action_power(&[1.0, 0.0], &order).unwrap();
        assert_relative_eq!(a.as_slice()[0], 0.7310585786300049, max_relative = 1e-15);
        assert_relative_eq!(a.as_slice()[1], 0.2689414213699951, max_relative = 1e-15);
        let u = decode_action_power(&[3.0; 4], &noma::sort_users_by_gain(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!(u.as_slice().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let shifted = decode_action_power(&[4.0, 3.0], &order).unwrap();
        assert!(shifted.as_slice().iter().zip(a.as_slice()).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!(decode_action_power(&[f64::NAN, 0.0], &order).is_err());
    }

    #[test]
    fn angle_decoding_examples() {
        let z = decode_action_angles(&[0.0; 4]).unwrap();
        assert!(z.as_slice().iter().all(|&(a, b)| a == 0.0 && b == 0.0));
        let one = decode_action_angles(&[1.0, 1.0]).unwrap();
        assert_relative_eq!(one.as_slice()[0].0, 1.196309302683775, max_relative = 1e-14);
        let big = decode_action_angles(&[1e6, -1e6]).unwrap();
        assert_eq!(big.as_slice()[0], (FRAC_PI_2, -FRAC_PI_2));
        assert!(decode_action_angles(&[f64::INFINITY, 0.0]).is_err());
        assert!(decode_action_angles(&[0.0]).is_err());
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        let d = TrafficDemand(vec![1e6; 3]);
        let ok = reward(1e7, 1.0, &[2e6; 3], &d, 2.0, 5.0, &cfg);
        assert_relative_eq!(ok.reward, 2.0);
        assert_eq!((ok.qos_violations, ok.power_violation), (0, false));
        let two = reward(1e7, 1.0, &[0.5e6, 0.9e6, 2e6], &d, 2.0, 5.0, &cfg);
        assert_eq!(two.qos_violations, 2);
        assert_relative_eq!(ok.reward - two.reward, 2.0);
        assert!(!reward(1e7, 1.0, &[2e6; 3], &d, 5.0, 5.0, &cfg).power_violation);
        assert!(reward(1e7, 1.0, &[2e6; 3], &d, 5.1, 5.0, &cfg).power_violation);
    }

    #[test]
    fn traffic_sampling() {
        let mut r = Rng::seed_from_u64(0);
        assert_eq!(sample_traffic(5, [1e6, 1e6], &mut r).0, vec![1e6; 5]);
        assert_eq!(sample_traffic(3, [2e6, 2e6], &mut r).0, vec![2e6; 3]);
        for _ in 0..10_000 {
            let d = sample_traffic(1, [1e6, 3e6], &mut r);
            assert!((1e6..=3e6).contains(&d.0[0]));
        }
    }

    #[test]
    fn blockage_extremes_and_stationary_fraction() {
        let mut r = Rng::seed_from_u64(9);
        let mut never = BlockageProcess::new(3, 2, 0.0, 2.0, 0.1, &mut r);
        let mut always = BlockageProcess::new(3, 2, 1.0, 2.0, 0.1, &mut r);
        for _ in 0..100 {
            never.step(&mut r);
            always.step(&mut r);
            assert!(never.mask.iter().all(|b| !b));
            assert!(always.mask.iter().all(|&b| b));
        }
        let mut p = BlockageProcess::new(1, 1, 0.1, 2.0, 0.1, &mut r);
        let n = 100_000;
        let mut blocked = 0usize;
        for _ in 0..n {
            p.step(&mut r);
            blocked += p.mask[(0, 0)] as usize;
        }
        let frac = blocked as f64 / n as f64;
        assert!((frac - 0.1).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn rwp_kinematics() {
        let model = RwpModel {
            x_range: [0.0, 5.0],
            y_range: [0.0, 5.0],
            speed_range: [0.0, 2.0],
            pause_range: [0.0, 1.0],
        };
        let mut r = Rng::seed_from_u64(4);
        let still = MobilityState {
            users: vec![UserMotion {
                position: Vec3::new(1.0, 1.0, 1.0),
                waypoint: Vec3::new(4.0, 4.0, 1.0),
                speed: 0.0,
                pause: 0.0,
            }],
        };
        assert_eq!(rwp_step(&still, 0.1, &model, &mut r).unwrap().users[0].position, Vec3::new(1.0, 1.0, 1.0));
        assert!(rwp_step(&still, 0.0, &model, &mut r).is_err());

        let mut st = model.start(&[Vec3::new(2.0, 2.0, 1.0), Vec3::new(0.5, 4.5, 1.1)], &mut r);
        for _ in 0..100_000 {
            let next = rwp_step(&st, 0.1, &model, &mut r).unwrap();
            for (a, b) in st.users.iter().zip(&next.users) {
                assert!((b.position - a.position).norm() <= a.speed * 0.1 + 1e-12);
                assert!(model.contains(b.position));
                assert!((0.0..=2.0).contains(&b.speed));
                assert_eq!(b.position.z, a.position.z);
            }
            st = next;
        }
    }

    #[test]
    fn mirror_array_geometry() {
        let irs = IrsConfig::default();
        let m = mirror_array(&irs);
        assert_eq!(m.len(), 49);
        assert_relative_eq!(m[0].center.x, 2.5 - 3.0 * 0.35, max_relative = 1e-15);
        assert_relative_eq!(m[0].center.z, 1.5 - 3.0 * 0.25, max_relative = 1e-15);
        assert_eq!(m[24].center, Vec3::new(2.5, 0.0, 1.5));
        assert!(m.iter().all(|e| e.center.y == 0.0));
        for side in [2usize, 3, 5, 7] {
            let a = mirror_array(&IrsConfig { rows: side, cols: side, ..irs.clone() });
            assert_eq!(a.len(), side * side);
            let cx: f64 = a.iter().map(|e| e.center.x).sum::<f64>() / a.len() as f64;
            assert!((cx - 2.5).abs() < 1e-12);
        }
    }
}
