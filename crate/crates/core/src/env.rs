//! Deterministic toy control tasks with scripted policies of graded quality.
//!
//! | env         | state | action | notes                                  |
//! |-------------|-------|--------|----------------------------------------|
//! | pointmass2d | 4     | 2      | damped point mass, goal at the origin  |
//! | swing       | 3     | 1      | torque-limited pendulum, upright goal  |
//! | arm2        | 6     | 2      | planar two-link arm reaching a target  |
//!
//! The arm2 state is `[t1, t2, w1, w2, ex, ey]`: joint angles, joint
//! velocities and the target's offset from the arm tip.
//!
//! Rewards are the negative distance to the goal after the step, so they lie
//! in a bounded interval. Actions are clipped to `[-1, 1]` before use.

use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::{Error, Result};

pub const HORIZON: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    PointMass2D,
    Swing,
    Arm2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::PointMass2D, EnvKind::Swing, EnvKind::Arm2];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointMass2D => "pointmass2d",
            EnvKind::Swing => "swing",
            EnvKind::Arm2 => "arm2",
        }
    }

    pub fn spec(self) -> EnvSpec {
        let (state_dim, action_dim) = match self {
            EnvKind::PointMass2D => (4, 2),
            EnvKind::Swing => (3, 1),
            EnvKind::Arm2 => (6, 2),
        };
        EnvSpec {
            kind: self,
            state_dim,
            action_dim,
            horizon: HORIZON,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown env {s:?} (expected pointmass2d, swing or arm2)")))
    }
}

// Arm link lengths.
const L1: f32 = 0.5;
const L2: f32 = 0.5;
/// Joint angles are limited rather than wrapped so the observation stays
/// continuous; every target is reachable well inside the limit.
const JOINT_LIMIT: f32 = 1.5 * PI;
const DLS_DAMPING: f32 = 0.01;

fn wrap_angle(a: f32) -> f32 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a < -PI {
        a = -PI;
    }
    a
}

fn clip_action(action: &[f32]) -> [f32; 2] {
    let mut out = [0.0; 2];
    for (o, a) in out.iter_mut().zip(action) {
        *o = a.clamp(-1.0, 1.0);
    }
    out
}

fn arm_tip(t1: f32, t2: f32) -> (f32, f32) {
    (
        L1 * t1.cos() + L2 * (t1 + t2).cos(),
        L1 * t1.sin() + L2 * (t1 + t2).sin(),
    )
}

/// Initial state drawn from `rng`.
pub fn reset_with(kind: EnvKind, rng: &mut impl Rng) -> Vec<f32> {
    match kind {
        EnvKind::PointMass2D => {
            let x = rng.random_range(-1.0f32..1.0);
            let y = rng.random_range(-1.0f32..1.0);
            vec![x, y, 0.0, 0.0]
        }
        EnvKind::Swing => {
            let theta = rng.random_range(-PI..PI);
            let omega = rng.random_range(-0.5f32..0.5);
            vec![theta.cos(), theta.sin(), omega]
        }
        EnvKind::Arm2 => {
            let t1 = rng.random_range(-1.0f32..1.0);
            let t2 = rng.random_range(-1.0f32..1.0);
            let (px, py) = arm_tip(t1, t2);
            // target a bounded distance from the tip, inside the reachable annulus
            loop {
                let d = rng.random_range(0.4f32..0.6);
                let phi = rng.random_range(-PI..PI);
                let (ex, ey) = (d * phi.cos(), d * phi.sin());
                let r = ((px + ex).powi(2) + (py + ey).powi(2)).sqrt();
                if (0.2..=0.9).contains(&r) {
                    break vec![t1, t2, 0.0, 0.0, ex, ey];
                }
            }
        }
    }
}

/// Initial state for episode `seed`.
pub fn reset(kind: EnvKind, seed: u64) -> Vec<f32> {
    reset_with(kind, &mut substream(seed, "reset"))
}

/// Advances one step. Returns the next state and the reward.
pub fn step(kind: EnvKind, state: &[f32], action: &[f32]) -> Result<(Vec<f32>, f32)> {
    let spec = kind.spec();
    if state.len() != spec.state_dim {
        return Err(Error::Dimension {
            what: "state",
            expected: spec.state_dim,
            got: state.len(),
        });
    }
    if action.len() != spec.action_dim {
        return Err(Error::Dimension {
            what: "action",
            expected: spec.action_dim,
            got: action.len(),
        });
    }
    let a = clip_action(action);
    Ok(match kind {
        EnvKind::PointMass2D => {
            let vx = 0.95 * state[2] + 0.1 * a[0];
            let vy = 0.95 * state[3] + 0.1 * a[1];
            let x = (state[0] + 0.1 * vx).clamp(-2.0, 2.0);
            let y = (state[1] + 0.1 * vy).clamp(-2.0, 2.0);
            let reward = -(x * x + y * y).sqrt();
            (vec![x, y, vx, vy], reward)
        }
        EnvKind::Swing => {
            // theta = 0 is upright; gravity pushes away from it.
            let theta = state[1].atan2(state[0]);
            let alpha = 2.0 * theta.sin() + 4.0 * a[0] - 0.2 * state[2];
            let omega = (state[2] + 0.05 * alpha).clamp(-8.0, 8.0);
            let theta = wrap_angle(theta + 0.05 * omega);
            (vec![theta.cos(), theta.sin(), omega], -theta.abs())
        }
        EnvKind::Arm2 => {
            let w1 = 0.9 * state[2] + 0.3 * a[0];
            let w2 = 0.9 * state[3] + 0.3 * a[1];
            let t1 = (state[0] + 0.1 * w1).clamp(-JOINT_LIMIT, JOINT_LIMIT);
            let t2 = (state[1] + 0.1 * w2).clamp(-JOINT_LIMIT, JOINT_LIMIT);
            // the target stays put; the observation carries its offset from the tip
            let (ox, oy) = arm_tip(state[0], state[1]);
            let (tx, ty) = (ox + state[4], oy + state[5]);
            let (px, py) = arm_tip(t1, t2);
            let (ex, ey) = (tx - px, ty - py);
            let reward = -(ex * ex + ey * ey).sqrt();
            (vec![t1, t2, w1, w2, ex, ey], reward)
        }
    })
}

/// Noise-free controller that defines the expert tier.
pub fn expert_action(kind: EnvKind, state: &[f32]) -> Vec<f32> {
    match kind {
        EnvKind::PointMass2D => vec![
            (-2.0 * state[0] - 3.0 * state[2]).clamp(-1.0, 1.0),
            (-2.0 * state[1] - 3.0 * state[3]).clamp(-1.0, 1.0),
        ],
        EnvKind::Swing => {
            let theta = state[1].atan2(state[0]);
            vec![(-1.5 * theta - 0.6 * state[2] - 0.5 * theta.sin()).clamp(-1.0, 1.0)]
        }
        EnvKind::Arm2 => {
            // Damped least-squares reach with velocity damping.
            let (t1, t2) = (state[0], state[1]);
            let (ex, ey) = (state[4], state[5]);
            let (s1, c1) = t1.sin_cos();
            let (s12, c12) = (t1 + t2).sin_cos();
            let (a, b) = (-L1 * s1 - L2 * s12, -L2 * s12);
            let (c, d) = (L1 * c1 + L2 * c12, L2 * c12);
            // J^T (J J^T + damping I)^-1 e
            let (m11, m12, m22) = (a * a + b * b + DLS_DAMPING, a * c + b * d, c * c + d * d + DLS_DAMPING);
            let det = m11 * m22 - m12 * m12;
            let (y1, y2) = ((m22 * ex - m12 * ey) / det, (m11 * ey - m12 * ex) / det);
            let (q1, q2) = (a * y1 + c * y2, b * y1 + d * y2);
            vec![
                (3.0 * q1 - 0.8 * state[2]).clamp(-1.0, 1.0),
                (3.0 * q2 - 0.8 * state[3]).clamp(-1.0, 1.0),
            ]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Random,
    Medium,
    Expert,
}

impl Quality {
    pub fn name(self) -> &'static str {
        match self {
            Quality::Random => "random",
            Quality::Medium => "medium",
            Quality::Expert => "expert",
        }
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Quality::Random),
            "medium" => Ok(Quality::Medium),
            "expert" => Ok(Quality::Expert),
            _ => Err(Error::Config(format!("unknown policy quality {s:?}"))),
        }
    }
}

/// Expert tier: controller action plus N(0, 0.1) noise, which keeps the
/// expert data from collapsing onto a single path per start state.
pub const EXPERT_NOISE_STD: f32 = 0.1;
/// Medium tier: controller action plus N(0, 0.3) noise, replaced by a uniform
/// random action on 20% of steps.
pub const MEDIUM_NOISE_STD: f32 = 0.3;
pub const MEDIUM_RANDOM_PROB: f64 = 0.2;

pub struct ScriptedPolicy {
    kind: EnvKind,
    quality: Quality,
    rng: ChaCha8Rng,
}

impl ScriptedPolicy {
    pub fn new(kind: EnvKind, quality: Quality, seed: u64) -> Self {
        ScriptedPolicy {
            kind,
            quality,
            rng: substream(seed, "policy-noise"),
        }
    }

    pub fn act(&mut self, state: &[f32]) -> Vec<f32> {
        let dim = self.kind.spec().action_dim;
        let uniform = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        match self.quality {
            Quality::Random => uniform(&mut self.rng),
            Quality::Expert => {
                let noise = Normal::new(0.0f32, EXPERT_NOISE_STD).expect("positive std");
                expert_action(self.kind, state)
                    .into_iter()
                    .map(|a| (a + noise.sample(&mut self.rng)).clamp(-1.0, 1.0))
                    .collect()
            }
            Quality::Medium => {
                if self.rng.random_bool(MEDIUM_RANDOM_PROB) {
                    return uniform(&mut self.rng);
                }
                let noise = Normal::new(0.0f32, MEDIUM_NOISE_STD).expect("positive std");
                expert_action(self.kind, state)
                    .into_iter()
                    .map(|a| (a + noise.sample(&mut self.rng)).clamp(-1.0, 1.0))
                    .collect()
            }
        }
    }
}

/// One episode. `states[t]` is the observation before `actions[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub total_return: f32,
}

impl Trajectory {
    pub fn new(states: Vec<f32>, actions: Vec<f32>, rewards: Vec<f32>) -> Result<Self> {
        let total_return = *crate::dt::compute_rtg(&rewards)?.first().expect("nonempty");
        Ok(Trajectory {
            states,
            actions,
            rewards,
            total_return,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Runs one full-horizon episode with `policy` from the reset state of `episode_seed`.
pub fn rollout(kind: EnvKind, policy: &mut ScriptedPolicy, episode_seed: u64) -> Result<Trajectory> {
    let spec = kind.spec();
    let mut state = reset(kind, episode_seed);
    let mut states = Vec::with_capacity(spec.horizon * spec.state_dim);
    let mut actions = Vec::with_capacity(spec.horizon * spec.action_dim);
    let mut rewards = Vec::with_capacity(spec.horizon);
    for _ in 0..spec.horizon {
        let action: Vec<f32> = policy.act(&state).into_iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let (next, r) = step(kind, &state, &action)?;
        states.extend_from_slice(&state);
        actions.extend_from_slice(&action);
        rewards.push(r);
        state = next;
    }
    Trajectory::new(states, actions, rewards)
}

/// Monte-Carlo reference returns used for score normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub random: f64,
    pub medium: f64,
    pub expert: f64,
}

pub const REFERENCE_EPISODES: usize = 100;
pub const REFERENCE_SEED: u64 = 0x5EED_0F_2EF5;

fn mean_return(kind: EnvKind, quality: Quality, episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0f64;
    for ep in 0..episodes as u64 {
        let mut policy = ScriptedPolicy::new(kind, quality, crate::rng::derive_seed(seed, &format!("{quality:?}/{ep}")));
        total += rollout(kind, &mut policy, crate::rng::derive_seed(seed, &format!("episode/{ep}")))?.total_return as f64;
    }
    Ok(total / episodes as f64)
}

impl References {
    /// 100-episode Monte-Carlo estimate per tier under a fixed seed. Fails
    /// unless `random < medium < expert`.
    pub fn compute(kind: EnvKind) -> Result<Self> {
        let refs = References {
            random: mean_return(kind, Quality::Random, REFERENCE_EPISODES, REFERENCE_SEED)?,
            medium: mean_return(kind, Quality::Medium, REFERENCE_EPISODES, REFERENCE_SEED)?,
            expert: mean_return(kind, Quality::Expert, REFERENCE_EPISODES, REFERENCE_SEED)?,
        };
        if !(refs.random < refs.medium && refs.medium < refs.expert) {
            return Err(Error::DegenerateReferences(format!(
                "{kind}: expected random < medium < expert, got {:.3} / {:.3} / {:.3}",
                refs.random, refs.medium, refs.expert
            )));
        }
        Ok(refs)
    }

    /// `100 * (raw - random) / (expert - random)`.
    pub fn normalize(&self, raw: f64) -> Result<f64> {
        let span = self.expert - self.random;
        if span == 0.0 || !span.is_finite() {
            return Err(Error::DegenerateReferences(format!(
                "expert and random references coincide at {}",
                self.expert
            )));
        }
        Ok(100.0 * (raw - self.random) / span)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointmass_rest_stays_put() {
        let s = vec![0.3, -0.4, 0.0, 0.0];
        let (next, r) = step(EnvKind::PointMass2D, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(&next[..2], &s[..2]);
        assert!((r + 0.5).abs() < 1e-6);
    }

    #[test]
    fn actions_are_clipped() {
        let s = reset(EnvKind::Arm2, 4);
        let a = [0.7f32, -0.9];
        let big: Vec<f32> = a.iter().map(|x| 5.0 * x).collect();
        let clipped: Vec<f32> = big.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        assert_eq!(
            step(EnvKind::Arm2, &s, &big).unwrap(),
            step(EnvKind::Arm2, &s, &clipped).unwrap()
        );
    }

    #[test]
    fn arm2_target_is_fixed_in_the_world() {
        let mut s = reset(EnvKind::Arm2, 11);
        let (px, py) = arm_tip(s[0], s[1]);
        let target = (px + s[4], py + s[5]);
        let d0 = (s[4] * s[4] + s[5] * s[5]).sqrt();
        assert!((0.4..=0.6).contains(&d0), "{d0}");
        for t in 0..30 {
            let a = [((t as f32) * 0.7).sin(), ((t as f32) * 0.3).cos()];
            let (next, r) = step(EnvKind::Arm2, &s, &a).unwrap();
            let (px, py) = arm_tip(next[0], next[1]);
            assert!((px + next[4] - target.0).abs() < 1e-5 && (py + next[5] - target.1).abs() < 1e-5);
            assert!((r + (next[4] * next[4] + next[5] * next[5]).sqrt()).abs() < 1e-6);
            s = next;
        }
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            step(EnvKind::Swing, &[0.0; 4], &[0.0]),
            Err(Error::Dimension { what: "state", .. })
        ));
        assert!(matches!(
            step(EnvKind::Swing, &[1.0, 0.0, 0.0], &[0.0, 0.0]),
            Err(Error::Dimension { what: "action", .. })
        ));
    }

    #[test]
    fn normalization_endpoints() {
        let refs = References {
            random: -80.0,
            medium: -40.0,
            expert: -10.0,
        };
        assert_eq!(refs.normalize(-80.0).unwrap(), 0.0);
        assert_eq!(refs.normalize(-10.0).unwrap(), 100.0);
        assert_eq!(refs.normalize(-45.0).unwrap(), 50.0);
        let flat = References { expert: -80.0, ..refs };
        assert!(flat.normalize(-3.0).is_err());
    }

    #[test]
    fn names_parse() {
        for k in EnvKind::ALL {
            assert_eq!(k.name().parse::<EnvKind>().unwrap(), k);
        }
        assert!("hopper".parse::<EnvKind>().is_err());
    }
}
