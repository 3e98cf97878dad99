//! Actor–critic learning with centralised critics.
//!
//! Every learning agent owns an actor that sees only its own observation
//! and a critic that sees both observations and the full joint action. The
//! same machinery drives the two-agent scheme and the single-agent and
//! partial baselines; what differs is which observation an actor reads and
//! which part of the joint action it writes.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::neural::{soft_update, Activation, Adam, Mlp};
use crate::rng::Rng;

/// Which observation an actor reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsView {
    L,
    M,
    Both,
}

/// Which part of the joint action an actor writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionPart {
    /// Simplex point over users.
    Power,
    /// Mirror angles scaled to `[-1, 1]`, yaws then rolls.
    Angles,
    /// Power followed by angles.
    Joint,
}

impl ObsView {
    fn tag(self) -> u32 {
        self as u32
    }

    fn from_tag(t: u32) -> Result<Self> {
        [ObsView::L, ObsView::M, ObsView::Both]
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("unknown observation view {t}")))
    }
}

impl ActionPart {
    fn tag(self) -> u32 {
        self as u32
    }

    fn from_tag(t: u32) -> Result<Self> {
        [ActionPart::Power, ActionPart::Angles, ActionPart::Joint]
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("unknown action part {t}")))
    }
}

/// Sizes of the joint observation and action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub obs_l: usize,
    pub obs_m: usize,
    /// Power action length, K.
    pub power: usize,
    /// Angle action length, 2M.
    pub angles: usize,
}

impl Dims {
    pub fn obs(&self, v: ObsView) -> usize {
        match v {
            ObsView::L => self.obs_l,
            ObsView::M => self.obs_m,
            ObsView::Both => self.obs_l + self.obs_m,
        }
    }

    pub fn action(&self, p: ActionPart) -> usize {
        match p {
            ActionPart::Power => self.power,
            ActionPart::Angles => self.angles,
            ActionPart::Joint => self.power + self.angles,
        }
    }

    pub fn critic_input(&self) -> usize {
        self.obs_l + self.obs_m + self.power + self.angles
    }

    /// Column range of `p` inside the critic input.
    fn action_columns(&self, p: ActionPart) -> std::ops::Range<usize> {
        let base = self.obs_l + self.obs_m;
        match p {
            ActionPart::Power => base..base + self.power,
            ActionPart::Angles => base + self.power..base + self.power + self.angles,
            ActionPart::Joint => base..base + self.power + self.angles,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub o_l: Vec<f64>,
    pub o_m: Vec<f64>,
    /// Power action as emitted by the policy, before gain ordering.
    pub a_l: Vec<f64>,
    /// Angle action scaled to `[-1, 1]`.
    pub a_m: Vec<f64>,
    pub r: f64,
    pub o_l2: Vec<f64>,
    pub o_m2: Vec<f64>,
    /// The episode ended with this transition.
    pub done: bool,
}

/// Fixed-width flat encoding of an experience. The replay buffer keeps all
/// rows in one block; millions of small vectors interleaved with the
/// per-update temporaries fragment the heap badly.
pub trait Record: Sized {
    /// Field lengths needed to decode a row.
    type Shape: Copy + PartialEq + std::fmt::Debug;

    fn shape(&self) -> Self::Shape;
    fn width(shape: &Self::Shape) -> usize;
    fn write(&self, row: &mut [f64]);
    fn read(row: &[f64], shape: &Self::Shape) -> Self;
}

/// Copies `src` to the front of `row` and returns the rest.
pub(crate) fn put<'a>(row: &'a mut [f64], src: &[f64]) -> &'a mut [f64] {
    let (head, tail) = row.split_at_mut(src.len());
    head.copy_from_slice(src);
    tail
}

/// Splits `n` values off the front of `row`.
pub(crate) fn take<'a>(row: &mut &'a [f64], n: usize) -> Vec<f64> {
    let (head, tail) = row.split_at(n);
    *row = tail;
    head.to_vec()
}

impl Record for Transition {
    /// Lengths of `o_l`, `o_m`, `a_l`, `a_m`.
    type Shape = [usize; 4];

    fn shape(&self) -> [usize; 4] {
        [self.o_l.len(), self.o_m.len(), self.a_l.len(), self.a_m.len()]
    }

    fn width(s: &[usize; 4]) -> usize {
        2 * (s[0] + s[1]) + s[2] + s[3] + 2
    }

    fn write(&self, row: &mut [f64]) {
        let row = put(row, &self.o_l);
        let row = put(row, &self.o_m);
        let row = put(row, &self.a_l);
        let row = put(row, &self.a_m);
        let row = put(row, &[self.r]);
        let row = put(row, &self.o_l2);
        let row = put(row, &self.o_m2);
        row[0] = if self.done { 1.0 } else { 0.0 };
    }

    fn read(mut row: &[f64], s: &[usize; 4]) -> Self {
        let o_l = take(&mut row, s[0]);
        let o_m = take(&mut row, s[1]);
        let a_l = take(&mut row, s[2]);
        let a_m = take(&mut row, s[3]);
        let r = take(&mut row, 1)[0];
        let o_l2 = take(&mut row, s[0]);
        let o_m2 = take(&mut row, s[1]);
        Self {
            o_l,
            o_m,
            a_l,
            a_m,
            r,
            o_l2,
            o_m2,
            done: row[0] != 0.0,
        }
    }
}

/// Fixed-capacity FIFO of experiences, sampled uniformly with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T: Record> {
    rows: Vec<f64>,
    shape: Option<T::Shape>,
    width: usize,
    len: usize,
    capacity: usize,
    next: usize,
}

impl<T: Record> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            rows: Vec::new(),
            shape: None,
            width: 0,
            len: 0,
            capacity,
            next: 0,
        }
    }

    /// Panics if `t` is shaped differently from earlier experiences.
    pub fn push(&mut self, t: T) {
        let shape = t.shape();
        match self.shape {
            None => {
                self.shape = Some(shape);
                self.width = T::width(&shape);
            }
            Some(s) => assert_eq!(s, shape, "experience shape changed within one buffer"),
        }
        let w = self.width;
        if self.len < self.capacity {
            self.rows.resize(self.rows.len() + w, 0.0);
            self.len += 1;
        }
        t.write(&mut self.rows[self.next * w..(self.next + 1) * w]);
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn get(&self, i: usize) -> T {
        let shape = self.shape.as_ref().expect("non-empty buffer has a shape");
        T::read(&self.rows[i * self.width..(i + 1) * self.width], shape)
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        let split = if self.len < self.capacity { 0 } else { self.next };
        (split..self.len).chain(0..split).map(|i| self.get(i))
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<T> {
        (0..n).map(|_| self.get(rng.random_range(0..self.len))).collect()
    }
}

/// A minibatch laid out as matrices, one row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub o_l: Array2<f64>,
    pub o_m: Array2<f64>,
    pub a_l: Array2<f64>,
    pub a_m: Array2<f64>,
    pub r: Array1<f64>,
    pub o_l2: Array2<f64>,
    pub o_m2: Array2<f64>,
    pub done: Vec<bool>,
}

fn rows(items: &[&Transition], width: usize, f: impl Fn(&Transition) -> &[f64]) -> Array2<f64> {
    let mut a = Array2::zeros((items.len(), width));
    for (i, t) in items.iter().enumerate() {
        a.row_mut(i).assign(&ndarray::ArrayView1::from(f(t)));
    }
    a
}

impl Batch {
    pub fn from_transitions(items: &[&Transition], dims: &Dims) -> Self {
        Self {
            o_l: rows(items, dims.obs_l, |t| &t.o_l),
            o_m: rows(items, dims.obs_m, |t| &t.o_m),
            a_l: rows(items, dims.power, |t| &t.a_l),
            a_m: rows(items, dims.angles, |t| &t.a_m),
            r: items.iter().map(|t| t.r).collect(),
            o_l2: rows(items, dims.obs_l, |t| &t.o_l2),
            o_m2: rows(items, dims.obs_m, |t| &t.o_m2),
            done: items.iter().map(|t| t.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    fn obs(&self, v: ObsView, next: bool) -> Array2<f64> {
        let (l, m) = if next { (&self.o_l2, &self.o_m2) } else { (&self.o_l, &self.o_m) };
        match v {
            ObsView::L => l.clone(),
            ObsView::M => m.clone(),
            ObsView::Both => concatenate![Axis(1), *l, *m],
        }
    }
}

fn critic_input(o_l: &Array2<f64>, o_m: &Array2<f64>, a_l: &Array2<f64>, a_m: &Array2<f64>) -> Array2<f64> {
    concatenate![Axis(1), *o_l, *o_m, *a_l, *a_m]
}

/// Writes an actor's output into the joint action matrices.
fn place(part: ActionPart, out: ArrayView2<f64>, a_l: &mut Array2<f64>, a_m: &mut Array2<f64>) {
    match part {
        ActionPart::Power => a_l.assign(&out),
        ActionPart::Angles => a_m.assign(&out),
        ActionPart::Joint => {
            let k = a_l.ncols();
            a_l.assign(&out.slice(s![.., ..k]));
            a_m.assign(&out.slice(s![.., k..]));
        }
    }
}

/// Gaussian exploration scale with multiplicative decay per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationSchedule {
    pub sigma0: f64,
    pub decay: f64,
    pub min: f64,
    pub steps: u64,
}

impl ExplorationSchedule {
    pub fn new(sigma0: f64, decay: f64, min: f64) -> Self {
        Self {
            sigma0,
            decay,
            min,
            steps: 0,
        }
    }

    pub fn sigma(&self) -> f64 {
        let s = self.sigma0 * self.decay.powf(self.steps as f64);
        s.max(self.min).min(self.sigma0.max(self.min))
    }

    pub fn advance(&mut self) {
        self.steps += 1;
    }
}

/// Networks and optimiser state of one learning agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    pub view: ObsView,
    pub part: ActionPart,
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

/// Output head used for each action part.
pub fn head(part: ActionPart, dims: &Dims) -> Activation {
    match part {
        ActionPart::Power => Activation::Softmax,
        ActionPart::Angles => Activation::Tanh,
        ActionPart::Joint if dims.angles == 0 => Activation::Softmax,
        ActionPart::Joint => Activation::SoftmaxTanh(dims.power),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub view: ObsView,
    pub part: ActionPart,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

impl AgentBundle {
    pub fn new(spec: &AgentSpec, dims: &Dims, rng: &mut Rng) -> Result<Self> {
        let mut a_sizes = vec![dims.obs(spec.view)];
        a_sizes.extend(&spec.actor_hidden);
        a_sizes.push(dims.action(spec.part));
        let actor = Mlp::new(&a_sizes, Activation::Relu, head(spec.part, dims), rng)?;
        let mut c_sizes = vec![dims.critic_input()];
        c_sizes.extend(&spec.critic_hidden);
        c_sizes.push(1);
        let critic = Mlp::new(&c_sizes, Activation::Relu, Activation::Linear, rng)?;
        Ok(Self {
            view: spec.view,
            part: spec.part,
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor_opt: Adam::new(&actor, spec.actor_lr),
            critic_opt: Adam::new(&critic, spec.critic_lr),
            actor,
            critic,
        })
    }

    /// Action for one observation. Noise of scale `sigma` is added before
    /// the output head, which is then re-applied; `sigma = 0` is the
    /// deterministic policy.
    pub fn select_action(&self, obs: &[f64], sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        if sigma == 0.0 {
            return self.actor.forward(obs);
        }
        let mut z = self.actor.forward_logits(obs)?;
        for v in &mut z {
            let n: f64 = rng.sample(StandardNormal);
            *v += sigma * n;
        }
        self.actor.output_activation().apply_slice(&mut z);
        Ok(z)
    }

    /// Mean squared error step towards `y`; returns the loss before the step.
    pub fn critic_update(&mut self, batch: &Batch, y: &Array1<f64>, grad_clip: f64) -> Result<f64> {
        let x = critic_input(&batch.o_l, &batch.o_m, &batch.a_l, &batch.a_m);
        let tape = self.critic.forward_tape(x.view())?;
        let q = tape.output().column(0).to_owned();
        let diff = &q - y;
        let n = batch.len() as f64;
        let loss = diff.mapv(|d| d * d).sum() / n;
        let upstream = (diff * (2.0 / n)).insert_axis(Axis(1));
        let (mut g, _) = self.critic.backward(tape, upstream.view())?;
        if grad_clip > 0.0 {
            g.clip_global_norm(grad_clip);
        }
        self.critic_opt.step(&mut self.critic, &g)?;
        Ok(loss)
    }

    /// Ascends the critic's value of this actor's action, other parts of the
    /// joint action taken from the batch. Returns the mean value before the
    /// step.
    pub fn actor_update(&mut self, batch: &Batch, dims: &Dims, grad_clip: f64) -> Result<f64> {
        let obs = batch.obs(self.view, false);
        let a_tape = self.actor.forward_tape(obs.view())?;
        let mut a_l = batch.a_l.clone();
        let mut a_m = batch.a_m.clone();
        place(self.part, a_tape.output().view(), &mut a_l, &mut a_m);
        let x = critic_input(&batch.o_l, &batch.o_m, &a_l, &a_m);
        let q_tape = self.critic.forward_tape(x.view())?;
        let n = batch.len() as f64;
        let value = q_tape.output().sum() / n;
        let upstream = Array2::from_elem((batch.len(), 1), -1.0 / n);
        let dx = self.critic.input_gradient(q_tape, upstream.view())?;
        let da = dx.slice(s![.., dims.action_columns(self.part)]).to_owned();
        let (mut g, _) = self.actor.backward(a_tape, da.view())?;
        if grad_clip > 0.0 {
            g.clip_global_norm(grad_clip);
        }
        self.actor_opt.step(&mut self.actor, &g)?;
        Ok(value)
    }

    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.target_actor, &self.actor, tau)?;
        soft_update(&mut self.target_critic, &self.critic, tau)
    }

    pub fn checksum(&self) -> u64 {
        [&self.actor, &self.critic, &self.target_actor, &self.target_critic]
            .iter()
            .fold(0u64, |h, n| h.rotate_left(7) ^ n.checksum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_value: f64,
}

/// All learning agents of a scheme, trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub agents: Vec<AgentBundle>,
    pub dims: Dims,
    pub gamma: f64,
    pub tau: f64,
    pub grad_clip: f64,
}

impl Learner {
    /// Joint next action from every target actor; parts no agent controls
    /// are carried over from the batch.
    pub fn target_actions(&self, batch: &Batch) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut a_l = batch.a_l.clone();
        let mut a_m = batch.a_m.clone();
        for ag in &self.agents {
            let out = ag.target_actor.predict(batch.obs(ag.view, true).view())?;
            place(ag.part, out.view(), &mut a_l, &mut a_m);
        }
        Ok((a_l, a_m))
    }

    /// `y = r + γ·Q′(o′, μ′(o′))`, with bootstrapping suppressed on
    /// episode-final transitions.
    pub fn critic_target(&self, agent: usize, batch: &Batch, next: &(Array2<f64>, Array2<f64>)) -> Result<Array1<f64>> {
        let x = critic_input(&batch.o_l2, &batch.o_m2, &next.0, &next.1);
        let q = self.agents[agent].target_critic.predict(x.view())?;
        Ok(Array1::from_shape_fn(batch.len(), |i| {
            if batch.done[i] {
                batch.r[i]
            } else {
                batch.r[i] + self.gamma * q[(i, 0)]
            }
        }))
    }

    /// One critic and one actor step for every agent, plus an optional soft
    /// update of the targets.
    pub fn update(&mut self, batch: &Batch, soft: bool) -> Result<UpdateStats> {
        let next = self.target_actions(batch)?;
        let ys = (0..self.agents.len())
            .map(|i| self.critic_target(i, batch, &next))
            .collect::<Result<Vec<_>>>()?;
        let mut stats = UpdateStats::default();
        let dims = self.dims;
        for (ag, y) in self.agents.iter_mut().zip(&ys) {
            stats.critic_loss += ag.critic_update(batch, y, self.grad_clip)?;
            stats.actor_value += ag.actor_update(batch, &dims, self.grad_clip)?;
        }
        if soft {
            self.soft_update_targets()?;
        }
        Ok(stats)
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        for ag in &mut self.agents {
            ag.soft_update_targets(self.tau)?;
        }
        Ok(())
    }

    /// Actions from every actor, each fed only its own observation.
    pub fn act(&self, o_l: &[f64], o_m: &[f64], sigma: f64, rng: &mut Rng) -> Result<Vec<(ActionPart, Vec<f64>)>> {
        self.agents
            .iter()
            .map(|ag| {
                let obs = match ag.view {
                    ObsView::L => o_l.to_vec(),
                    ObsView::M => o_m.to_vec(),
                    ObsView::Both => [o_l, o_m].concat(),
                };
                Ok((ag.part, ag.select_action(&obs, sigma, rng)?))
            })
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        self.agents.iter().fold(0u64, |h, a| h.rotate_left(13) ^ a.checksum())
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        use crate::neural::{put_f64, put_u32};
        put_u32(out, self.agents.len() as u32);
        for d in [self.dims.obs_l, self.dims.obs_m, self.dims.power, self.dims.angles] {
            put_u32(out, d as u32);
        }
        put_f64(out, self.gamma);
        put_f64(out, self.tau);
        put_f64(out, self.grad_clip);
        for ag in &self.agents {
            put_u32(out, ag.view.tag());
            put_u32(out, ag.part.tag());
            ag.actor.encode(out);
            ag.critic.encode(out);
            ag.target_actor.encode(out);
            ag.target_critic.encode(out);
            ag.actor_opt.encode(out);
            ag.critic_opt.encode(out);
        }
    }

    pub fn decode(r: &mut crate::neural::Reader<'_>) -> Result<Self> {
        let n = r.u32()? as usize;
        if n > 16 {
            return Err(Error::Checkpoint(format!("implausible agent count {n}")));
        }
        let dims = Dims {
            obs_l: r.u32()? as usize,
            obs_m: r.u32()? as usize,
            power: r.u32()? as usize,
            angles: r.u32()? as usize,
        };
        let gamma = r.f64()?;
        let tau = r.f64()?;
        let grad_clip = r.f64()?;
        let mut agents = Vec::with_capacity(n);
        for _ in 0..n {
            let view = ObsView::from_tag(r.u32()?)?;
            let part = ActionPart::from_tag(r.u32()?)?;
            let actor = Mlp::decode(r)?;
            let critic = Mlp::decode(r)?;
            let target_actor = Mlp::decode(r)?;
            let target_critic = Mlp::decode(r)?;
            let actor_opt = Adam::decode(r, &actor)?;
            let critic_opt = Adam::decode(r, &critic)?;
            if actor.input_dim() != dims.obs(view)
                || actor.output_dim() != dims.action(part)
                || critic.input_dim() != dims.critic_input()
            {
                return Err(Error::Checkpoint("agent networks do not match the recorded dimensions".into()));
            }
            agents.push(AgentBundle {
                view,
                part,
                actor,
                critic,
                target_actor,
                target_critic,
                actor_opt,
                critic_opt,
            });
        }
        Ok(Self {
            agents,
            dims,
            gamma,
            tau,
            grad_clip,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Layer;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn dims() -> Dims {
        Dims {
            obs_l: 3,
            obs_m: 2,
            power: 2,
            angles: 2,
        }
    }

    fn spec(view: ObsView, part: ActionPart) -> AgentSpec {
        AgentSpec {
            view,
            part,
            actor_hidden: vec![5],
            critic_hidden: vec![6],
            actor_lr: 1e-2,
            critic_lr: 1e-2,
        }
    }

    fn learner(seed: u64) -> Learner {
        let d = dims();
        let mut r = rng(seed);
        Learner {
            agents: vec![
                AgentBundle::new(&spec(ObsView::L, ActionPart::Power), &d, &mut r).unwrap(),
                AgentBundle::new(&spec(ObsView::M, ActionPart::Angles), &d, &mut r).unwrap(),
            ],
            dims: d,
            gamma: 0.9,
            tau: 0.1,
            grad_clip: 0.0,
        }
    }

    fn transition(i: usize, done: bool) -> Transition {
        let f = |k: usize| (0..k).map(|j| ((i * 7 + j) as f64 * 0.61).sin()).collect::<Vec<_>>();
        Transition {
            o_l: f(3),
            o_m: f(2),
            a_l: vec![0.3, 0.7],
            a_m: vec![(i as f64 * 0.3).sin(), -0.2],
            r: (i as f64).cos(),
            o_l2: f(3).iter().map(|x| x + 0.1).collect(),
            o_m2: f(2).iter().map(|x| x - 0.1).collect(),
            done,
        }
    }

    fn batch(n: usize) -> Batch {
        let ts: Vec<Transition> = (0..n).map(|i| transition(i, i % 3 == 0)).collect();
        let refs: Vec<&Transition> = ts.iter().collect();
        Batch::from_transitions(&refs, &dims())
    }

    impl Record for f64 {
        type Shape = ();

        fn shape(&self) {}

        fn width(_: &()) -> usize {
            1
        }

        fn write(&self, row: &mut [f64]) {
            row[0] = *self;
        }

        fn read(row: &[f64], _: &()) -> Self {
            row[0]
        }
    }

    #[test]
    fn buffer_is_fifo() {
        let mut b = ReplayBuffer::new(5);
        for i in 0..8 {
            b.push(i as f64);
        }
        assert_eq!(b.len(), 5);
        assert_eq!(b.iter().collect::<Vec<_>>(), vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        let mut r = rng(0);
        assert!(b.sample(100, &mut r).iter().all(|x| (3.0..8.0).contains(x)));
    }

    #[test]
    fn transitions_round_trip_through_rows() {
        let mut b = ReplayBuffer::new(3);
        let ts: Vec<Transition> = (0..4).map(|i| transition(i, i % 2 == 0)).collect();
        for t in &ts {
            b.push(t.clone());
        }
        assert_eq!(b.iter().collect::<Vec<_>>(), ts[1..].to_vec());
    }

    #[test]
    fn exploration_schedule() {
        let mut s = ExplorationSchedule::new(0.2, 0.9999, 0.01);
        assert_eq!(s.sigma(), 0.2);
        let mut last = s.sigma();
        for _ in 0..100_000 {
            s.advance();
            assert!(s.sigma() <= last && s.sigma() >= 0.01);
            last = s.sigma();
        }
        assert_eq!(s.sigma(), 0.01);
        s.steps = 1;
        assert_relative_eq!(s.sigma(), 0.2 * 0.9999);
    }

    #[test]
    fn actions_respect_constraints() {
        let l = learner(1);
        let mut r = rng(2);
        for sigma in [0.0, 0.2, 5.0, 100.0] {
            for _ in 0..50 {
                let acts = l.act(&[0.1, 0.5, -1.0], &[2.0, 0.0], sigma, &mut r).unwrap();
                let (_, p) = &acts[0];
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
                let (_, a) = &acts[1];
                assert!(a.iter().all(|&x| (-1.0..=1.0).contains(&x)));
            }
        }
        let a = l.act(&[0.1, 0.5, -1.0], &[2.0, 0.0], 0.0, &mut r).unwrap();
        let b = l.act(&[0.1, 0.5, -1.0], &[2.0, 0.0], 0.0, &mut r).unwrap();
        assert_eq!(a, b);
        assert!(l.act(&[0.1], &[2.0, 0.0], 0.0, &mut r).is_err());
    }

    #[test]
    fn critic_target_cases() {
        let mut l = learner(3);
        let b = batch(6);
        let next = l.target_actions(&b).unwrap();
        let y = l.critic_target(0, &b, &next).unwrap();
        for i in 0..6 {
            if b.done[i] {
                assert_eq!(y[i], b.r[i]);
            } else {
                assert_ne!(y[i], b.r[i]);
            }
        }
        l.gamma = 0.0;
        assert_eq!(l.critic_target(0, &b, &next).unwrap(), b.r);
    }

    #[test]
    fn critic_target_hand_arithmetic() {
        // Scalar nets: actor a = tanh(2·o_m), critic Q = 0.5·o_l + o_m + 3·a_m - 1.
        let d = Dims {
            obs_l: 1,
            obs_m: 1,
            power: 0,
            angles: 1,
        };
        let actor = Mlp::from_layers(vec![Layer {
            w: array![[2.0]],
            b: array![0.0],
            act: Activation::Tanh,
        }])
        .unwrap();
        let critic = Mlp::from_layers(vec![Layer {
            w: array![[0.5, 1.0, 3.0]],
            b: array![-1.0],
            act: Activation::Linear,
        }])
        .unwrap();
        let ag = AgentBundle {
            view: ObsView::M,
            part: ActionPart::Angles,
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor_opt: Adam::new(&actor, 0.0),
            critic_opt: Adam::new(&critic, 0.0),
            actor,
            critic,
        };
        let l = Learner {
            agents: vec![ag],
            dims: d,
            gamma: 0.99,
            tau: 0.001,
            grad_clip: 0.0,
        };
        let t = Transition {
            o_l: vec![0.0],
            o_m: vec![0.0],
            a_l: vec![],
            a_m: vec![0.5],
            r: 0.25,
            o_l2: vec![2.0],
            o_m2: vec![0.3],
            done: false,
        };
        let b = Batch::from_transitions(&[&t], &d);
        let y = l.critic_target(0, &b, &l.target_actions(&b).unwrap()).unwrap();
        let expect = 0.25 + 0.99 * (0.5 * 2.0 + 0.3 + 3.0 * (0.6f64).tanh() - 1.0);
        assert_relative_eq!(y[0], expect, max_relative = 1e-15);
    }

    #[test]
    fn target_evaluation_leaves_optimizers_alone() {
        let l = learner(4);
        let before = l.clone();
        let b = batch(5);
        let next = l.target_actions(&b).unwrap();
        l.critic_target(0, &b, &next).unwrap();
        l.critic_target(1, &b, &next).unwrap();
        assert_eq!(l, before);
    }

    #[test]
    fn zero_learning_rates_freeze_parameters() {
        let mut l = learner(5);
        for ag in &mut l.agents {
            ag.actor_opt.lr = 0.0;
            ag.critic_opt.lr = 0.0;
        }
        let actors: Vec<Mlp> = l.agents.iter().map(|a| a.actor.clone()).collect();
        let critics: Vec<Mlp> = l.agents.iter().map(|a| a.critic.clone()).collect();
        l.update(&batch(8), false).unwrap();
        for (i, ag) in l.agents.iter().enumerate() {
            assert_eq!(ag.actor, actors[i]);
            assert_eq!(ag.critic, critics[i]);
        }
    }

    #[test]
    fn critic_at_target_has_zero_loss() {
        let mut l = learner(6);
        let b = batch(4);
        let x = critic_input(&b.o_l, &b.o_m, &b.a_l, &b.a_m);
        let y = l.agents[0].critic.predict(x.view()).unwrap().column(0).to_owned();
        let before = l.agents[0].critic.clone();
        let loss = l.agents[0].critic_update(&b, &y, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(l.agents[0].critic, before);
    }

    fn critic_loss(ag: &AgentBundle, b: &Batch, y: &Array1<f64>) -> f64 {
        let x = critic_input(&b.o_l, &b.o_m, &b.a_l, &b.a_m);
        let q = ag.critic.predict(x.view()).unwrap();
        (0..b.len()).map(|i| (q[(i, 0)] - y[i]).powi(2)).sum::<f64>() / b.len() as f64
    }

    fn actor_objective(ag: &AgentBundle, b: &Batch) -> f64 {
        let out = ag.actor.predict(b.obs(ag.view, false).view()).unwrap();
        let mut a_l = b.a_l.clone();
        let mut a_m = b.a_m.clone();
        place(ag.part, out.view(), &mut a_l, &mut a_m);
        ag.critic.predict(critic_input(&b.o_l, &b.o_m, &a_l, &a_m).view()).unwrap().mean().unwrap()
    }

    fn fd_param_grad<F: Fn(&Mlp) -> f64>(net: &Mlp, f: F, li: usize, idx: (usize, usize)) -> f64 {
        let h = 1e-5;
        let mut p = net.clone();
        p.layers_mut()[li].w[idx] += h;
        let mut m = net.clone();
        m.layers_mut()[li].w[idx] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        let l = learner(7);
        let b = batch(6);
        let y = Array1::from_shape_fn(6, |i| i as f64 * 0.1);
        let ag = &l.agents[0];
        let x = critic_input(&b.o_l, &b.o_m, &b.a_l, &b.a_m);
        let tape = ag.critic.forward_tape(x.view()).unwrap();
        let q = tape.output().column(0).to_owned();
        let up = ((&q - &y) * (2.0 / 6.0)).insert_axis(Axis(1));
        let (g, _) = ag.critic.backward(tape, up.view()).unwrap();
        for li in 0..2 {
            let (rows, cols) = ag.critic.layers()[li].w.dim();
            for i in 0..rows {
                for j in 0..cols {
                    let fd = fd_param_grad(
                        &ag.critic,
                        |c| {
                            let mut a = ag.clone();
                            a.critic = c.clone();
                            critic_loss(&a, &b, &y)
                        },
                        li,
                        (i, j),
                    );
                    let an = g.layers[li].0[(i, j)];
                    assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "{fd} vs {an}");
                }
            }
        }
    }

    /// The chained gradient `∇θ μ · ∇a Q` for each agent against finite
    /// differences of `Q(o, μ(o))`.
    #[test]
    fn actor_chain_gradient_matches_finite_differences() {
        let mut l = learner(8);
        l.agents.push(AgentBundle::new(&spec(ObsView::Both, ActionPart::Joint), &dims(), &mut rng(9)).unwrap());
        let b = batch(5);
        let d = l.dims;
        for ag in &l.agents {
            let obs = b.obs(ag.view, false);
            let a_tape = ag.actor.forward_tape(obs.view()).unwrap();
            let mut a_l = b.a_l.clone();
            let mut a_m = b.a_m.clone();
            place(ag.part, a_tape.output().view(), &mut a_l, &mut a_m);
            let x = critic_input(&b.o_l, &b.o_m, &a_l, &a_m);
            let q_tape = ag.critic.forward_tape(x.view()).unwrap();
            let up = Array2::from_elem((5, 1), 1.0 / 5.0);
            let dx = ag.critic.input_gradient(q_tape, up.view()).unwrap();
            let da = dx.slice(s![.., d.action_columns(ag.part)]).to_owned();
            let (g, _) = ag.actor.backward(a_tape, da.view()).unwrap();
            for li in 0..ag.actor.layers().len() {
                let (rows, cols) = ag.actor.layers()[li].w.dim();
                for i in 0..rows {
                    for j in 0..cols {
                        let fd = fd_param_grad(
                            &ag.actor,
                            |a| {
                                let mut x = ag.clone();
                                x.actor = a.clone();
                                actor_objective(&x, &b)
                            },
                            li,
                            (i, j),
                        );
                        let an = g.layers[li].0[(i, j)];
                        assert!(
                            (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6),
                            "{:?} layer {li} ({i},{j}): {fd} vs {an}",
                            ag.part
                        );
                    }
                }
            }
        }
    }

    /// Linear actor `a = tanh(w·o + b)` under the quadratic critic
    /// `Q(a) = -(a - c)²`, represented at each step by its tangent line.
    #[test]
    fn actor_moves_towards_quadratic_optimum() {
        let d = Dims {
            obs_l: 1,
            obs_m: 1,
            power: 0,
            angles: 1,
        };
        for (c, w0) in [(0.4, 0.1), (-0.3, 0.5)] {
            let actor = Mlp::from_layers(vec![Layer {
                w: array![[w0]],
                b: array![0.0],
                act: Activation::Tanh,
            }])
            .unwrap();
            let critic = Mlp::from_layers(vec![Layer {
                w: array![[0.0, 0.0, 0.0]],
                b: array![0.0],
                act: Activation::Linear,
            }])
            .unwrap();
            let mut ag = AgentBundle {
                view: ObsView::M,
                part: ActionPart::Angles,
                target_actor: actor.clone(),
                target_critic: critic.clone(),
                actor_opt: Adam::new(&actor, 0.01),
                critic_opt: Adam::new(&critic, 0.0),
                actor,
                critic,
            };
            let o = 1.5;
            let t = Transition {
                o_l: vec![0.0],
                o_m: vec![o],
                a_l: vec![],
                a_m: vec![0.0],
                r: 0.0,
                o_l2: vec![0.0],
                o_m2: vec![o],
                done: true,
            };
            let b = Batch::from_transitions(&[&t], &d);
            for _ in 0..400 {
                let layer = &ag.actor.layers()[0];
                let a = (layer.w[(0, 0)] * o + layer.b[0]).tanh();
                let slope = -2.0 * (a - c);
                ag.critic.layers_mut()[0].w[(0, 2)] = slope;

                // Closed form: dQ/dw = slope·(1 - a²)·o.
                let obs = b.obs(ObsView::M, false);
                let tape = ag.actor.forward_tape(obs.view()).unwrap();
                let x = critic_input(&b.o_l, &b.o_m, &b.a_l, tape.output());
                let q_tape = ag.critic.forward_tape(x.view()).unwrap();
                let dx = ag.critic.input_gradient(q_tape, array![[1.0]].view()).unwrap();
                let (g, _) = ag.actor.backward(tape, dx.slice(s![.., 2..3]).view()).unwrap();
                assert_relative_eq!(g.layers[0].0[(0, 0)], slope * (1.0 - a * a) * o, max_relative = 1e-12);

                ag.actor_update(&b, &d, 0.0).unwrap();
            }
            let a = ag.actor.forward(&[o]).unwrap()[0];
            assert!((a - c).abs() < 0.02, "c = {c}, a = {a}");
        }
    }

    #[test]
    fn zero_actor_learning_rate_is_a_no_op() {
        let mut l = learner(12);
        let b = batch(4);
        let d = l.dims;
        l.agents[0].actor_opt.lr = 0.0;
        let before = l.agents[0].actor.clone();
        l.agents[0].actor_update(&b, &d, 0.0).unwrap();
        assert_eq!(l.agents[0].actor, before);
    }

    #[test]
    fn soft_updates_track_frozen_online_nets() {
        let mut l = learner(10);
        let online: Vec<f64> = l.agents[0].actor.flat_params();
        let start: Vec<f64> = online.iter().map(|x| x + 1.0).collect();
        {
            let ta = &mut l.agents[0].target_actor;
            let mut i = 0;
            for layer in ta.layers_mut() {
                for w in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                    *w = start[i];
                    i += 1;
                }
            }
        }
        for _ in 0..7 {
            l.soft_update_targets().unwrap();
        }
        let got = l.agents[0].target_actor.flat_params();
        for ((g, o), s0) in got.iter().zip(&online).zip(&start) {
            let expect = o + 0.9f64.powi(7) * (s0 - o);
            assert!((g - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut l = learner(11);
        l.update(&batch(4), true).unwrap();
        let mut buf = Vec::new();
        l.encode(&mut buf);
        let mut r = crate::neural::Reader::new(&buf);
        let back = Learner::decode(&mut r).unwrap();
        r.finish().unwrap();
        assert_eq!(back, l);
    }
}
