//! Episode loop shared by every learning scheme, plus checkpointing.
//!
//! A `Trainer` owns one environment, the learning state of one scheme and
//! the random streams for exploration, minibatch sampling and baseline
//! draws. Training is single-threaded; independent seeds run as independent
//! trainers.

use rand::SeedableRng;

use crate::baselines::{random_angles, Codebook, DqnAgent, DqnBuffer, DqnTransition};
use crate::config::{ExperimentConfig, Scheme, TargetUpdate};
use crate::drl::{ActionPart, AgentSpec, Batch, Dims, ExplorationSchedule, Learner, ObsView, ReplayBuffer, Transition};
use crate::env::{ActionAngles, ActionPower, Environment, Observations, ANGLE_LIMIT};
use crate::error::{Error, Result};
use crate::metrics::{EpisodeAccumulator, EpisodeSummary};
use crate::neural::{put_u32, Reader};
use crate::rng::{self, Rng};

const CHECKPOINT_TAG: &[u8; 4] = b"IRSC";
const EVAL_SALT: u64 = 0x5eed_e7a1_0000_0001;

/// Seed of episode `episode` of a run; splitmix64 finaliser over the pair.
pub fn episode_seed(run_seed: u64, episode: u64) -> u64 {
    let mut z = run_seed ^ episode.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of evaluation episode `episode`; disjoint from training seeds.
pub fn evaluation_seed(run_seed: u64, episode: u64) -> u64 {
    episode_seed(run_seed ^ EVAL_SALT, episode)
}

/// The configuration a scheme actually runs with.
pub fn effective_config(cfg: &ExperimentConfig, scheme: Scheme) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.run.scheme = scheme;
    if scheme == Scheme::NoIrs {
        c.scene.irs.rows = 0;
        c.scene.irs.cols = 0;
    }
    c
}

#[derive(Debug, Clone)]
enum Brain {
    Ddpg {
        learner: Learner,
        buffer: ReplayBuffer<Transition>,
    },
    Dqn {
        agent: DqnAgent,
        codebook: Codebook,
        buffer: DqnBuffer,
    },
}

#[derive(Debug, Clone)]
struct Streams {
    exploration: Rng,
    sample: Rng,
    baseline: Rng,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: ExperimentConfig,
    scheme: Scheme,
    seed: u64,
    env: Environment,
    brain: Brain,
    schedule: ExplorationSchedule,
    streams: Streams,
    episodes_done: usize,
    /// Power split used when no agent controls power.
    fixed_power: Vec<f64>,
}

fn agent_specs(cfg: &ExperimentConfig, scheme: Scheme) -> Vec<AgentSpec> {
    let a = &cfg.agents;
    let spec = |view, part, hidden: &Vec<usize>| AgentSpec {
        view,
        part,
        actor_hidden: hidden.clone(),
        critic_hidden: a.critic_hidden.clone(),
        actor_lr: a.actor_lr,
        critic_lr: a.critic_lr,
    };
    match scheme {
        Scheme::TwoAgent => vec![
            spec(ObsView::L, ActionPart::Power, &a.power_actor_hidden),
            spec(ObsView::M, ActionPart::Angles, &a.angle_actor_hidden),
        ],
        Scheme::SingleAgentDdpg => vec![spec(ObsView::Both, ActionPart::Joint, &a.joint_actor_hidden)],
        Scheme::RandomIrs | Scheme::NoIrs => vec![spec(ObsView::L, ActionPart::Power, &a.power_actor_hidden)],
        Scheme::FixedPower => vec![spec(ObsView::M, ActionPart::Angles, &a.angle_actor_hidden)],
        Scheme::DqnCodebook | Scheme::GridOracle => vec![],
    }
}

fn schedule_for(cfg: &ExperimentConfig, scheme: Scheme) -> ExplorationSchedule {
    let a = &cfg.agents;
    if scheme == Scheme::DqnCodebook {
        ExplorationSchedule::new(a.dqn.epsilon_start, a.dqn.epsilon_decay, a.dqn.epsilon_min)
    } else {
        ExplorationSchedule::new(a.noise_sigma, a.noise_decay, a.noise_min)
    }
}

fn write_rng(out: &mut Vec<u8>, r: &Rng) {
    out.extend_from_slice(&r.get_seed());
    out.extend_from_slice(&r.get_stream().to_le_bytes());
    out.extend_from_slice(&r.get_word_pos().to_le_bytes());
}

fn read_rng(r: &mut Reader<'_>) -> Result<Rng> {
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let mut g = Rng::from_seed(seed);
    g.set_stream(stream);
    g.set_word_pos(pos);
    Ok(g)
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Reader<'_>) -> Result<String> {
    let n = r.u64()?;
    let n = usize::try_from(n).map_err(|_| Error::Checkpoint("string length overflow".into()))?;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}

/// FNV-1a over the checkpoint body, appended so bit rot is caught.
fn digest(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, scheme: Scheme, seed: u64) -> Result<Self> {
        if scheme == Scheme::GridOracle {
            return Err(Error::config("run.scheme", "grid_oracle is not trainable; use the oracle subcommand"));
        }
        let cfg = effective_config(cfg, scheme);
        let env = Environment::new(&cfg)?;
        let k = env.num_users();
        let dims = Dims {
            obs_l: env.obs_dim_l(),
            obs_m: env.obs_dim_m(),
            power: k,
            angles: 2 * env.num_mirrors(),
        };
        let mut init = rng::stream(seed, "init");
        let a = &cfg.agents;
        let brain = if scheme == Scheme::DqnCodebook {
            let d = &a.dqn;
            let codebook = Codebook::new(k, env.num_mirrors(), d.power_profiles, d.angle_presets)?;
            let agent = DqnAgent::new(dims.obs_l + dims.obs_m, codebook.len(), &d.hidden, d.lr, a.gamma, a.tau, a.grad_clip, &mut init)?;
            Brain::Dqn {
                agent,
                codebook,
                buffer: DqnBuffer::new(a.buffer_capacity),
            }
        } else {
            let agents = agent_specs(&cfg, scheme)
                .iter()
                .map(|s| crate::drl::AgentBundle::new(s, &dims, &mut init))
                .collect::<Result<Vec<_>>>()?;
            Brain::Ddpg {
                learner: Learner {
                    agents,
                    dims,
                    gamma: a.gamma,
                    tau: a.tau,
                    grad_clip: a.grad_clip,
                },
                buffer: ReplayBuffer::new(a.buffer_capacity),
            }
        };
        let fixed_power = cfg.run.fixed_power.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
        Ok(Self {
            schedule: schedule_for(&cfg, scheme),
            streams: Streams {
                exploration: rng::stream(seed, "exploration"),
                sample: rng::stream(seed, "sample"),
                baseline: rng::stream(seed, "baseline"),
            },
            cfg,
            scheme,
            seed,
            env,
            brain,
            episodes_done: 0,
            fixed_power,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    pub fn sigma(&self) -> f64 {
        self.schedule.sigma()
    }

    pub fn buffer_len(&self) -> usize {
        match &self.brain {
            Brain::Ddpg { buffer, .. } => buffer.len(),
            Brain::Dqn { buffer, .. } => buffer.len(),
        }
    }

    pub fn learner(&self) -> Option<&Learner> {
        match &self.brain {
            Brain::Ddpg { learner, .. } => Some(learner),
            Brain::Dqn { .. } => None,
        }
    }

    /// Hash of every network parameter.
    pub fn checksum(&self) -> u64 {
        match &self.brain {
            Brain::Ddpg { learner, .. } => learner.checksum(),
            Brain::Dqn { agent, .. } => agent.checksum(),
        }
    }

    fn unit_angles(angles: &ActionAngles) -> Vec<f64> {
        angles.flat().into_iter().map(|a| a / ANGLE_LIMIT).collect()
    }

    /// Per-episode frozen angles of the random-orientation baseline.
    fn episode_angles(&self, rng: &mut Rng) -> Vec<f64> {
        let m = self.env.num_mirrors();
        if self.scheme == Scheme::RandomIrs {
            Self::unit_angles(&random_angles(m, rng))
        } else {
            vec![0.0; 2 * m]
        }
    }

    /// Joint action (simplex point, unit angles) and the codebook index
    /// when one was used.
    fn choose(&self, obs: &Observations, sigma: f64, frozen: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>, Option<usize>)> {
        match &self.brain {
            Brain::Ddpg { learner, .. } => {
                let mut a_l = self.fixed_power.clone();
                let mut a_m = frozen.to_vec();
                for (part, a) in learner.act(&obs.l, &obs.m, sigma, rng)? {
                    match part {
                        ActionPart::Power => a_l = a,
                        ActionPart::Angles => a_m = a,
                        ActionPart::Joint => {
                            let k = a_l.len();
                            a_m = a[k..].to_vec();
                            a_l = a[..k].to_vec();
                        }
                    }
                }
                Ok((a_l, a_m, None))
            }
            Brain::Dqn { agent, codebook, .. } => {
                let o = [obs.l.as_slice(), obs.m.as_slice()].concat();
                let idx = if sigma > 0.0 { agent.select(&o, sigma, rng)? } else { agent.greedy(&o)? };
                let (p, a) = codebook.action(idx)?;
                Ok((p.as_slice().to_vec(), Self::unit_angles(&a), Some(idx)))
            }
        }
    }

    /// Runs one training episode: noisy actions, store, learn once the
    /// buffer holds a full minibatch.
    pub fn train_episode(&mut self) -> Result<EpisodeSummary> {
        let episode = self.episodes_done;
        let mut obs = self.env.reset(episode_seed(self.seed, episode as u64))?;
        let mut baseline = std::mem::replace(&mut self.streams.baseline, Rng::seed_from_u64(0));
        let frozen = self.episode_angles(&mut baseline);
        self.streams.baseline = baseline;
        let batch_size = self.cfg.agents.batch_size;
        let per_step = self.cfg.agents.target_update == TargetUpdate::Step;
        let terminal_cap = !self.cfg.agents.bootstrap_at_time_limit;
        let mut acc = EpisodeAccumulator::default();
        loop {
            let sigma = self.schedule.sigma();
            let mut explore = self.streams.exploration.clone();
            let (a_l, a_m, idx) = self.choose(&obs, sigma, &frozen, &mut explore)?;
            self.streams.exploration = explore;
            let out = self.env.step(&ActionPower::from_simplex(a_l.clone())?, &ActionAngles::from_unit(&a_m)?)?;
            acc.push(out.reward, &out.metrics);
            match &mut self.brain {
                Brain::Ddpg { learner, buffer } => {
                    buffer.push(Transition {
                        o_l: obs.l,
                        o_m: obs.m,
                        a_l,
                        a_m,
                        r: out.reward,
                        o_l2: out.next.l.clone(),
                        o_m2: out.next.m.clone(),
                        done: out.done && terminal_cap,
                    });
                    if buffer.len() >= batch_size {
                        let items = buffer.sample(batch_size, &mut self.streams.sample);
                        let refs: Vec<&Transition> = items.iter().collect();
                        let batch = Batch::from_transitions(&refs, &learner.dims);
                        learner.update(&batch, per_step)?;
                    }
                }
                Brain::Dqn { agent, buffer, .. } => {
                    buffer.push(DqnTransition {
                        o: [obs.l.as_slice(), obs.m.as_slice()].concat(),
                        a: idx.expect("codebook action"),
                        r: out.reward,
                        o2: [out.next.l.as_slice(), out.next.m.as_slice()].concat(),
                        done: out.done && terminal_cap,
                    });
                    if buffer.len() >= batch_size {
                        let items = buffer.sample(batch_size, &mut self.streams.sample);
                        let refs: Vec<&DqnTransition> = items.iter().collect();
                        agent.update(&refs, per_step)?;
                    }
                }
            }
            self.schedule.advance();
            obs = out.next;
            if out.done {
                break;
            }
        }
        if !per_step {
            match &mut self.brain {
                Brain::Ddpg { learner, .. } => learner.soft_update_targets()?,
                Brain::Dqn { agent, .. } => crate::neural::soft_update(&mut agent.target, &agent.q, agent.tau)?,
            }
        }
        self.episodes_done += 1;
        Ok(acc.finish(episode, self.schedule.sigma()))
    }

    /// Noise-free rollouts on evaluation seeds. Nothing in the trainer is
    /// touched.
    pub fn evaluate(&self, episodes: usize) -> Result<Vec<EpisodeSummary>> {
        self.evaluate_in(self.env.clone(), self.seed, episodes)
    }

    /// As `evaluate`, with episode seeds derived from `seed` instead of the
    /// run seed.
    pub fn evaluate_seeded(&self, seed: u64, episodes: usize) -> Result<Vec<EpisodeSummary>> {
        self.evaluate_in(self.env.clone(), seed, episodes)
    }

    /// Evaluates the current policy in a differently configured environment
    /// with the same observation and action sizes (a different optical
    /// power, say).
    pub fn evaluate_on(&self, cfg: &ExperimentConfig, episodes: usize) -> Result<Vec<EpisodeSummary>> {
        self.evaluate_on_seeded(cfg, self.seed, episodes)
    }

    pub fn evaluate_on_seeded(&self, cfg: &ExperimentConfig, seed: u64, episodes: usize) -> Result<Vec<EpisodeSummary>> {
        let env = Environment::new(&effective_config(cfg, self.scheme))?;
        if env.num_users() != self.env.num_users() || env.num_mirrors() != self.env.num_mirrors() {
            return Err(Error::config(
                "scene",
                format!(
                    "policy trained for {} users and {} mirrors cannot act in a scene with {} and {}",
                    self.env.num_users(),
                    self.env.num_mirrors(),
                    env.num_users(),
                    env.num_mirrors()
                ),
            ));
        }
        self.evaluate_in(env, seed, episodes)
    }

    fn evaluate_in(&self, mut env: Environment, run_seed: u64, episodes: usize) -> Result<Vec<EpisodeSummary>> {
        let mut out = Vec::with_capacity(episodes);
        for ep in 0..episodes {
            let seed = evaluation_seed(run_seed, ep as u64);
            let mut obs = env.reset(seed)?;
            let mut draws = rng::stream(seed, "evaluation");
            let frozen = self.episode_angles(&mut draws);
            let mut acc = EpisodeAccumulator::default();
            loop {
                let (a_l, a_m, _) = self.choose(&obs, 0.0, &frozen, &mut draws)?;
                let step = env.step(&ActionPower::from_simplex(a_l)?, &ActionAngles::from_unit(&a_m)?)?;
                acc.push(step.reward, &step.metrics);
                obs = step.next;
                if step.done {
                    break;
                }
            }
            out.push(acc.finish(ep, 0.0));
        }
        Ok(out)
    }

    /// Greedy action for the environment's first step after `reset(seed)`;
    /// used to compare a policy against the grid oracle on a frozen state.
    pub fn greedy_first_action(&self, seed: u64) -> Result<(Environment, ActionPower, ActionAngles)> {
        let mut env = self.env.clone();
        let obs = env.reset(seed)?;
        let mut draws = rng::stream(seed, "evaluation");
        let frozen = self.episode_angles(&mut draws);
        let (a_l, a_m, _) = self.choose(&obs, 0.0, &frozen, &mut draws)?;
        Ok((env, ActionPower::from_simplex(a_l)?, ActionAngles::from_unit(&a_m)?))
    }

    /// Serialises networks, optimiser states, schedule position and random
    /// streams. The replay buffer is not saved.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_TAG);
        put_u32(&mut out, crate::neural::FORMAT_VERSION);
        write_str(&mut out, &self.cfg.to_toml());
        write_str(&mut out, self.scheme.name());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.episodes_done as u64).to_le_bytes());
        out.extend_from_slice(&self.schedule.steps.to_le_bytes());
        for r in [&self.streams.exploration, &self.streams.sample, &self.streams.baseline] {
            write_rng(&mut out, r);
        }
        match &self.brain {
            Brain::Ddpg { learner, .. } => {
                put_u32(&mut out, 0);
                learner.encode(&mut out);
            }
            Brain::Dqn { agent, .. } => {
                put_u32(&mut out, 1);
                agent.encode(&mut out);
            }
        }
        let d = digest(&out);
        out.extend_from_slice(&d.to_le_bytes());
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_TAG, "checkpoint")?;
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if digest(body).to_le_bytes() != tail {
            return Err(Error::Checkpoint("checksum mismatch: file is corrupt".into()));
        }
        let mut r = Reader::new(body);
        r.magic(CHECKPOINT_TAG, "checkpoint")?;
        let cfg = ExperimentConfig::from_toml_str(&read_str(&mut r)?, &[])
            .map_err(|e| Error::Checkpoint(format!("embedded configuration: {e}")))?;
        let name = read_str(&mut r)?;
        let scheme = Scheme::parse(&name).ok_or_else(|| Error::Checkpoint(format!("unknown scheme {name}")))?;
        let seed = r.u64()?;
        let mut t = Self::new(&cfg, scheme, seed)?;
        t.episodes_done = r.u64()? as usize;
        t.schedule.steps = r.u64()?;
        t.streams = Streams {
            exploration: read_rng(&mut r)?,
            sample: read_rng(&mut r)?,
            baseline: read_rng(&mut r)?,
        };
        let tag = r.u32()?;
        match (&mut t.brain, tag) {
            (Brain::Ddpg { learner, .. }, 0) => {
                let decoded = Learner::decode(&mut r)?;
                if decoded.dims != learner.dims || decoded.agents.len() != learner.agents.len() {
                    return Err(Error::Checkpoint("networks do not match the embedded configuration".into()));
                }
                *learner = decoded;
            }
            (Brain::Dqn { agent, .. }, 1) => *agent = DqnAgent::decode(&mut r)?,
            _ => return Err(Error::Checkpoint(format!("learner kind {tag} does not match scheme {name}"))),
        }
        r.finish()?;
        Ok(t)
    }
}
