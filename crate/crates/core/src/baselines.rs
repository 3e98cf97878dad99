//! Comparison schemes that are not plain two-agent learning: a discrete
//! Q-learning agent over a fixed codebook, random mirror orientations, and
//! an exhaustive grid search used as ground truth on tiny instances.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::drl::{put, take, Record, ReplayBuffer};
use crate::env::{ActionAngles, ActionPower, Environment, SnapshotMetrics, ANGLE_LIMIT};
use crate::error::{Error, Result};
use crate::neural::{soft_update, Activation, Adam, Mlp, Reader};
use crate::rng::Rng;

/// Largest number of joint points the grid oracle will evaluate.
pub const ORACLE_BUDGET: u128 = 1_000_000;

/// Mirror angles drawn uniformly from the allowed box.
pub fn random_angles(m: usize, rng: &mut Rng) -> ActionAngles {
    let angles = (0..m)
        .map(|_| {
            (
                rng.random_range(-ANGLE_LIMIT..=ANGLE_LIMIT),
                rng.random_range(-ANGLE_LIMIT..=ANGLE_LIMIT),
            )
        })
        .collect();
    ActionAngles::new(angles).expect("drawn inside the box")
}

// ----------------------------------------------------------------- codebook

/// Discrete joint actions: power profiles × shared mirror presets. Action
/// `i` pairs profile `i / presets` with preset `i % presets`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub powers: Vec<Vec<f64>>,
    /// One `(yaw, roll)` per preset, applied to every mirror.
    pub presets: Vec<(f64, f64)>,
    pub mirrors: usize,
}

impl Codebook {
    /// Profile `i` of `n_p` is geometric with ratio `(i + 1) / n_p`, so the
    /// last profile is uniform. Presets are the centres of an
    /// `n_yaw × n_roll` grid over the angle box.
    pub fn new(k: usize, m: usize, n_p: usize, n_a: usize) -> Result<Self> {
        if k == 0 || n_p == 0 || n_a == 0 || n_p * n_a > 4096 {
            return Err(Error::config("agents.dqn", format!("codebook {n_p}×{n_a} outside 1..=4096 actions")));
        }
        let powers = (0..n_p)
            .map(|i| {
                let ratio = (i + 1) as f64 / n_p as f64;
                let raw: Vec<f64> = (0..k).map(|j| ratio.powi(j as i32)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let n_roll = (1..=n_a).filter(|d| n_a % d == 0 && d * d <= n_a).max().unwrap_or(1);
        let n_yaw = n_a / n_roll;
        let centre = |i: usize, n: usize| -ANGLE_LIMIT + (i as f64 + 0.5) * PI / n as f64;
        let mut presets = Vec::with_capacity(n_a);
        for i in 0..n_yaw {
            for j in 0..n_roll {
                presets.push((centre(i, n_yaw), centre(j, n_roll)));
            }
        }
        Ok(Self { powers, presets, mirrors: m })
    }

    pub fn len(&self) -> usize {
        self.powers.len() * self.presets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn action(&self, index: usize) -> Result<(ActionPower, ActionAngles)> {
        if index >= self.len() {
            return Err(Error::Dimension {
                what: "codebook index",
                expected: self.len(),
                got: index,
            });
        }
        let p = &self.powers[index / self.presets.len()];
        let a = self.presets[index % self.presets.len()];
        Ok((ActionPower::from_simplex(p.clone())?, ActionAngles::new(vec![a; self.mirrors])?))
    }
}

// ---------------------------------------------------------------------- dqn

#[derive(Debug, Clone, PartialEq)]
pub struct DqnTransition {
    pub o: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub o2: Vec<f64>,
    pub done: bool,
}

impl Record for DqnTransition {
    /// Observation length.
    type Shape = usize;

    fn shape(&self) -> usize {
        self.o.len()
    }

    fn width(n: &usize) -> usize {
        2 * n + 3
    }

    fn write(&self, row: &mut [f64]) {
        let row = put(row, &self.o);
        let row = put(row, &[self.a as f64, self.r]);
        let row = put(row, &self.o2);
        row[0] = if self.done { 1.0 } else { 0.0 };
    }

    fn read(mut row: &[f64], n: &usize) -> Self {
        let o = take(&mut row, *n);
        let ar = take(&mut row, 2);
        let o2 = take(&mut row, *n);
        Self {
            o,
            a: ar[0] as usize,
            r: ar[1],
            o2,
            done: row[0] != 0.0,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqnAgent {
    pub q: Mlp,
    pub target: Mlp,
    pub opt: Adam,
    pub gamma: f64,
    pub tau: f64,
    pub grad_clip: f64,
}

impl DqnAgent {
    pub fn new(obs: usize, actions: usize, hidden: &[usize], lr: f64, gamma: f64, tau: f64, grad_clip: f64, rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![obs];
        sizes.extend(hidden);
        sizes.push(actions);
        let q = Mlp::new(&sizes, Activation::Relu, Activation::Linear, rng)?;
        Ok(Self {
            target: q.clone(),
            opt: Adam::new(&q, lr),
            q,
            gamma,
            tau,
            grad_clip,
        })
    }

    pub fn q_values(&self, o: &[f64]) -> Result<Vec<f64>> {
        self.q.forward(o)
    }

    pub fn greedy(&self, o: &[f64]) -> Result<usize> {
        Ok(argmax(&self.q_values(o)?))
    }

    /// ε-greedy choice.
    pub fn select(&self, o: &[f64], epsilon: f64, rng: &mut Rng) -> Result<usize> {
        let explore: f64 = rng.random();
        if explore < epsilon {
            Ok(rng.random_range(0..self.q.output_dim()))
        } else {
            self.greedy(o)
        }
    }

    /// One regression step of the taken actions' values towards
    /// `r + γ·max Q′(o′)`; returns the loss before the step.
    pub fn update(&mut self, batch: &[&DqnTransition], soft: bool) -> Result<f64> {
        let n = batch.len();
        let d = self.q.input_dim();
        let mut o = Array2::zeros((n, d));
        let mut o2 = Array2::zeros((n, d));
        for (i, t) in batch.iter().enumerate() {
            o.row_mut(i).assign(&Array1::from(t.o.clone()));
            o2.row_mut(i).assign(&Array1::from(t.o2.clone()));
        }
        let next = self.target.predict(o2.view())?;
        let tape = self.q.forward_tape(o.view())?;
        let q = tape.output();
        let mut upstream = Array2::zeros(q.raw_dim());
        let mut loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let y = if t.done {
                t.r
            } else {
                let best = next.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                t.r + self.gamma * best
            };
            let diff = q[(i, t.a)] - y;
            loss += diff * diff;
            upstream[(i, t.a)] = 2.0 * diff / n as f64;
        }
        let (mut g, _) = self.q.backward(tape, upstream.view())?;
        if self.grad_clip > 0.0 {
            g.clip_global_norm(self.grad_clip);
        }
        self.opt.step(&mut self.q, &g)?;
        if soft {
            soft_update(&mut self.target, &self.q, self.tau)?;
        }
        Ok(loss / n as f64)
    }

    pub fn checksum(&self) -> u64 {
        self.q.checksum() ^ self.target.checksum().rotate_left(17)
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        use crate::neural::put_f64;
        put_f64(out, self.gamma);
        put_f64(out, self.tau);
        put_f64(out, self.grad_clip);
        self.q.encode(out);
        self.target.encode(out);
        self.opt.encode(out);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let gamma = r.f64()?;
        let tau = r.f64()?;
        let grad_clip = r.f64()?;
        let q = Mlp::decode(r)?;
        let target = Mlp::decode(r)?;
        let opt = Adam::decode(r, &q)?;
        Ok(Self {
            q,
            target,
            opt,
            gamma,
            tau,
            grad_clip,
        })
    }
}

/// Replay buffer specialised to codebook transitions.
pub type DqnBuffer = ReplayBuffer<DqnTransition>;

// ------------------------------------------------------------------- oracle

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    /// The power simplex is sampled with step `1 / power_steps`.
    pub power_steps: usize,
    /// Points per angle axis, evenly spaced over `[-π/2, π/2]`.
    pub angle_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePoint {
    pub power: Vec<f64>,
    pub angles: Vec<(f64, f64)>,
    pub metrics: SnapshotMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Best point meeting every user's minimum rate and the power budget.
    pub best_feasible: Option<OraclePoint>,
    /// Best point regardless of feasibility.
    pub best_overall: OraclePoint,
    pub evaluated: usize,
}

impl OracleResult {
    /// The feasible optimum when one exists, else the overall one.
    pub fn best(&self) -> &OraclePoint {
        self.best_feasible.as_ref().unwrap_or(&self.best_overall)
    }
}

/// All compositions of `n` into `k` non-negative parts, scaled by `1/n`.
pub fn simplex_grid(k: usize, n: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for i in (0..=left).rev() {
            cur.push(i);
            rec(k - 1, left - i, cur, out);
            cur.pop();
        }
    }
    let mut raw = Vec::new();
    rec(k, n, &mut Vec::new(), &mut raw);
    raw.into_iter()
        .map(|c| c.into_iter().map(|x| x as f64 / n as f64).collect())
        .collect()
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

pub fn linspace_angles(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| -ANGLE_LIMIT + 2.0 * ANGLE_LIMIT * i as f64 / (n - 1) as f64)
        .collect()
}

/// Number of joint points `grid_oracle` would evaluate.
pub fn grid_size(k: usize, m: usize, spec: &GridSpec) -> u128 {
    let p = binomial((spec.power_steps + k - 1) as u128, (k - 1) as u128);
    let a = (spec.angle_points as u128).saturating_pow(2 * m as u32);
    p.saturating_mul(a)
}

/// Exhaustive search of `J·SEE` over the power and angle grids on the
/// environment's current (frozen) state. Every evaluated point is passed to
/// `visit`. Strict improvement is required to replace the incumbent, so
/// the result is deterministic.
pub fn grid_oracle(
    env: &Environment,
    spec: &GridSpec,
    mut visit: impl FnMut(&OraclePoint),
) -> Result<OracleResult> {
    let k = env.num_users();
    let m = env.num_mirrors();
    if spec.power_steps == 0 || spec.angle_points == 0 {
        return Err(Error::config("oracle", "grid resolutions must be positive"));
    }
    let requested = grid_size(k, m, spec);
    if requested > ORACLE_BUDGET {
        return Err(Error::Budget {
            requested,
            limit: ORACLE_BUDGET,
        });
    }
    let powers = simplex_grid(k, spec.power_steps);
    let axis = linspace_angles(spec.angle_points);
    let n_angles = 2 * m;
    let combos = axis.len().pow(n_angles as u32);

    let mut best_overall: Option<OraclePoint> = None;
    let mut best_feasible: Option<OraclePoint> = None;
    let mut evaluated = 0;
    let mut idx = vec![0usize; n_angles];
    for c in 0..combos {
        let mut rem = c;
        for slot in idx.iter_mut().rev() {
            *slot = rem % axis.len();
            rem /= axis.len();
        }
        let angles: Vec<(f64, f64)> = (0..m).map(|i| (axis[idx[2 * i]], axis[idx[2 * i + 1]])).collect();
        let action_angles = ActionAngles::new(angles.clone())?;
        let gains = env.snapshot_gains(&action_angles)?;
        for p in &powers {
            let power = ActionPower::from_simplex(p.clone())?;
            let metrics = env.measure_gains(&gains, &power, &action_angles)?;
            evaluated += 1;
            let point = OraclePoint {
                power: p.clone(),
                angles: angles.clone(),
                metrics,
            };
            visit(&point);
            if best_overall.as_ref().is_none_or(|b| point.metrics.objective > b.metrics.objective) {
                best_overall = Some(point.clone());
            }
            if point.metrics.feasible()
                && best_feasible.as_ref().is_none_or(|b| point.metrics.objective > b.metrics.objective)
            {
                best_feasible = Some(point);
            }
        }
    }
    Ok(OracleResult {
        best_feasible,
        best_overall: best_overall.expect("grid is non-empty"),
        evaluated,
    })
}
