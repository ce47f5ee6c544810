//! Synthetic data: two-agent composition of single-person clips, the
//! procedural conflict-reach task and teleoperation-paired pose sets.
//!
//! World frame is z-up, meters. Generated scenes are deterministic
//! functions of the config seed and the episode index.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, DatasetError, Episode, EpisodeSource};
use crate::pose::{AgentKind, JointLayout, Pose, PoseTrajectory, CANONICAL_HZ};
use crate::retarget::{retarget_trajectory, MarkerLayout, Side};

pub const CONFLICT_REACH_TASK: &str = "conflict_reach";

const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub min_separation: f64,
    pub workspace_radius: f64,
    pub yaw_range: f64,
    pub seed: u64,
    pub objects: Vec<[f64; 3]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_separation: 0.3,
            workspace_radius: 1.5,
            yaw_range: std::f64::consts::PI,
            seed: 0,
            objects: vec![[-0.15, 0.5, 1.1], [0.15, 0.5, 1.1]],
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DatasetError> {
        if !(self.min_separation > 0.0) {
            return Err(DatasetError::Config("min_separation must be positive".into()));
        }
        Ok(())
    }
}

/// Minimum-jerk interpolation `x0 + (xf - x0)(10t^3 - 15t^4 + 6t^5)`,
/// with `tau` clamped to `[0, 1]`.
pub fn min_jerk(x0: f64, xf: f64, tau: f64) -> f64 {
    x0 + (xf - x0) * min_jerk_progress(tau)
}

fn min_jerk_progress(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

fn root_of(frame: &[f64]) -> Vector3<f64> {
    Vector3::new(frame[0], frame[1], frame[2])
}

fn single_human(ep: &Episode) -> Result<&Agent, DatasetError> {
    match ep.agents.as_slice() {
        [a] if a.layout.kind() == AgentKind::Human => Ok(a),
        _ => Err(DatasetError::Config(format!(
            "episode {} must contain exactly one human agent",
            ep.id
        ))),
    }
}

fn min_pair_distance(a: &[f64], b: &[f64], dim: usize, n: usize) -> f64 {
    let mut best = f64::INFINITY;
    for t in 0..n {
        let fa = &a[t * dim..(t + 1) * dim];
        let fb = &b[t * dim..(t + 1) * dim];
        for p in fa.chunks_exact(3) {
            for q in fb.chunks_exact(3) {
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
    }
    best
}

/// Places `clip_b` next to `clip_a` with a random yaw and horizontal offset,
/// resampling until the agents keep `min_separation` apart in every frame.
pub fn compose_synthetic_pair(clip_a: &Episode, clip_b: &Episode, cfg: &SynthConfig) -> Result<Episode, DatasetError> {
    cfg.validate()?;
    let a = single_human(clip_a)?;
    let b = single_human(clip_b)?;
    for ep in [clip_a, clip_b] {
        if (ep.frame_hz - CANONICAL_HZ).abs() > 1e-9 {
            return Err(DatasetError::FrameRate(ep.id.clone(), ep.frame_hz));
        }
    }
    let n = a.num_frames().min(b.num_frames());
    let dim = a.layout.total_dim();
    let frames_a = a.frames[..n * dim].to_vec();
    let frames_b = &b.frames[..n * dim];
    let anchor_a = root_of(&frames_a);
    let anchor_b = root_of(frames_b);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let yaw = if cfg.yaw_range > 0.0 {
            rng.gen_range(-cfg.yaw_range..=cfg.yaw_range)
        } else {
            0.0
        };
        let radius = cfg.workspace_radius * rng.gen::<f64>().sqrt();
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let target = anchor_a + Vector3::new(radius * angle.cos(), radius * angle.sin(), 0.0);
        let shift = Vector3::new(target.x - anchor_b.x, target.y - anchor_b.y, 0.0);
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        let placed: Vec<f64> = frames_b
            .chunks_exact(3)
            .flat_map(|p| {
                let v = rot * (Vector3::new(p[0], p[1], p[2]) - anchor_b) + anchor_b + shift;
                [v.x, v.y, v.z]
            })
            .collect();
        if min_pair_distance(&frames_a, &placed, dim, n) >= cfg.min_separation {
            return Ok(Episode {
                id: format!("{}+{}", clip_a.id, clip_b.id),
                task: clip_a.task.clone(),
                frame_hz: CANONICAL_HZ,
                source: EpisodeSource::SyntheticPair,
                agents: vec![
                    Agent {
                        name: a.name.clone(),
                        layout: a.layout,
                        frames: frames_a,
                    },
                    Agent {
                        name: b.name.clone(),
                        layout: b.layout,
                        frames: placed,
                    },
                ],
                annotations: BTreeMap::new(),
            });
        }
    }
    Err(DatasetError::Placement {
        min_separation: cfg.min_separation,
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}

const EPISODE_FRAMES: usize = 64;
const SHOULDER_HALF_WIDTH: f64 = 0.18;
const SHOULDER_RISE: f64 = 0.05;
const UPPER_ARM: f64 = 0.28;
const FOREARM: f64 = 0.25;
const HAND: f64 = 0.08;
const MAX_LEAN: f64 = 0.15;
/// Fraction of the partner's reach after which its target is unambiguous.
const COMMIT_PROGRESS: f64 = 0.2;

/// Upper body of one agent standing at `root`, facing `forward`.
struct Body {
    root: Vector3<f64>,
    forward: Vector3<f64>,
}

impl Body {
    fn right(&self) -> Vector3<f64> {
        self.forward.cross(&Vector3::z())
    }

    fn shoulder(&self, root: &Vector3<f64>, side: Side) -> Vector3<f64> {
        let sign = if side == Side::Right { 1.0 } else { -1.0 };
        root + self.right() * (sign * SHOULDER_HALF_WIDTH) + Vector3::z() * SHOULDER_RISE
    }

    fn rest_hand(&self, shoulder: &Vector3<f64>) -> Vector3<f64> {
        shoulder - Vector3::z() * UPPER_ARM + self.forward * (FOREARM + HAND)
    }

    /// Two-link arm reaching for `hand`, elbow bent downwards.
    fn arm(&self, shoulder: &Vector3<f64>, hand: &Vector3<f64>) -> [Vector3<f64>; 3] {
        let reach = hand - shoulder;
        let dir = reach.normalize();
        let mut wrist = hand - dir * HAND;
        let mut span = wrist - shoulder;
        let d = span
            .norm()
            .clamp((UPPER_ARM - FOREARM).abs() + 1e-4, UPPER_ARM + FOREARM - 1e-4);
        span = span.normalize() * d;
        wrist = shoulder + span;
        let hand = wrist + dir * HAND;
        let axis = span / d;
        let along = (UPPER_ARM * UPPER_ARM - FOREARM * FOREARM + d * d) / (2.0 * d);
        let height = (UPPER_ARM * UPPER_ARM - along * along).max(0.0).sqrt();
        let down = -Vector3::z();
        let mut bend = down - axis * down.dot(&axis);
        if bend.norm() < 1e-6 {
            bend = -self.forward;
        }
        let elbow = shoulder + axis * along + bend.normalize() * height;
        [elbow, wrist, hand]
    }

    /// 27-D pose with the given trunk root and hand positions per side.
    fn pose(&self, root: Vector3<f64>, left: Option<Vector3<f64>>, right: Option<Vector3<f64>>) -> [f64; 27] {
        let ls = self.shoulder(&root, Side::Left);
        let rs = self.shoulder(&root, Side::Right);
        let [le, lw, lh] = self.arm(&ls, &left.unwrap_or_else(|| self.rest_hand(&ls)));
        let [re, rw, rh] = self.arm(&rs, &right.unwrap_or_else(|| self.rest_hand(&rs)));
        let joints = [root, ls, rs, le, re, lw, rw, lh, rh];
        let mut out = [0.0; 27];
        for (j, p) in joints.iter().enumerate() {
            out[3 * j..3 * j + 3].copy_from_slice(p.as_slice());
        }
        out
    }
}

/// Scripted reach: trunk lean plus one hand moving to `target` under a
/// minimum-jerk profile starting at `onset` and lasting `duration` frames.
struct Reach {
    onset: usize,
    duration: usize,
    target: Vector3<f64>,
    side: Side,
}

impl Reach {
    fn progress(&self, t: usize) -> f64 {
        if t <= self.onset {
            0.0
        } else {
            min_jerk_progress((t - self.onset) as f64 / self.duration as f64)
        }
    }
}

struct Sway {
    amplitude: f64,
    period: f64,
    phase: f64,
}

impl Sway {
    fn at(&self, t: usize) -> Vector3<f64> {
        let a = std::f64::consts::TAU * t as f64 / self.period + self.phase;
        Vector3::new(self.amplitude * a.sin(), 0.5 * self.amplitude * a.cos(), 0.0)
    }
}

fn animate(body: &Body, sway: &Sway, reach: &Reach, n: usize) -> Vec<f64> {
    let lean_dir = {
        let mut h = reach.target - body.root;
        h.z = 0.0;
        h.normalize()
    };
    let mut frames = Vec::with_capacity(n * 27);
    for t in 0..n {
        let s = reach.progress(t);
        let root = body.root + sway.at(t) + lean_dir * (MAX_LEAN * s);
        let start = body.rest_hand(&body.shoulder(&(body.root + sway.at(t)), reach.side));
        let hand = start + (reach.target - start) * s;
        let (left, right) = match reach.side {
            Side::Left => (Some(hand), None),
            Side::Right => (None, Some(hand)),
        };
        let pose = body.pose(root, left, right);
        frames.extend_from_slice(&pose);
    }
    frames
}

/// Every random draw of one conflict-reach episode except the partner's
/// object choice, which is drawn last so the pre-commit scene does not
/// depend on it.
struct ReachScript {
    human: Body,
    partner: Body,
    human_sway: Sway,
    partner_sway: Sway,
    partner_onset: usize,
    partner_duration: usize,
    human_delay: usize,
    human_duration: usize,
    choice: usize,
}

impl ReachScript {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let jitter = |rng: &mut ChaCha8Rng| Vector3::new(rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), 0.0);
        let human = Body {
            root: Vector3::new(0.0, 0.0, 1.35) + jitter(rng),
            forward: Vector3::y(),
        };
        let partner = Body {
            root: Vector3::new(0.0, 1.0, 1.35) + jitter(rng),
            forward: -Vector3::y(),
        };
        let sway = |rng: &mut ChaCha8Rng| Sway {
            amplitude: rng.gen_range(0.004..0.01),
            period: rng.gen_range(40.0..60.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        };
        let human_sway = sway(rng);
        let partner_sway = sway(rng);
        let partner_onset = rng.gen_range(8..=34);
        let partner_duration = rng.gen_range(12..=18);
        let human_delay = rng.gen_range(2..=4);
        let human_duration = rng.gen_range(12..=18);
        let choice = rng.gen_range(0..2);
        Self {
            human,
            partner,
            human_sway,
            partner_sway,
            partner_onset,
            partner_duration,
            human_delay,
            human_duration,
            choice,
        }
    }

    fn commit_frame(&self) -> usize {
        let reach = Reach {
            onset: self.partner_onset,
            duration: self.partner_duration,
            target: Vector3::zeros(),
            side: Side::Right,
        };
        (self.partner_onset..)
            .find(|&t| reach.progress(t) >= COMMIT_PROGRESS)
            .expect("progress reaches 1")
    }

    fn human_onset(&self) -> usize {
        self.commit_frame() + self.human_delay
    }

    /// Returns (human frames, partner frames, annotations).
    fn render(&self, objects: &[[f64; 3]]) -> (Vec<f64>, Vec<f64>, BTreeMap<String, i64>) {
        let partner_obj = Vector3::from(objects[self.choice]);
        let human_obj = Vector3::from(objects[1 - self.choice]);
        // The human reaches with the arm on the object's side.
        let lateral = (human_obj - self.human.root).dot(&self.human.right());
        let human_side = if lateral >= 0.0 { Side::Right } else { Side::Left };
        let partner_reach = Reach {
            onset: self.partner_onset,
            duration: self.partner_duration,
            target: partner_obj,
            side: Side::Right,
        };
        let human_reach = Reach {
            onset: self.human_onset(),
            duration: self.human_duration,
            target: human_obj,
            side: human_side,
        };
        let human = animate(&self.human, &self.human_sway, &human_reach, EPISODE_FRAMES);
        let partner = animate(&self.partner, &self.partner_sway, &partner_reach, EPISODE_FRAMES);
        let mut notes = BTreeMap::new();
        notes.insert("commit_frame".into(), self.commit_frame() as i64);
        notes.insert("human_onset".into(), self.human_onset() as i64);
        notes.insert("partner_onset".into(), self.partner_onset as i64);
        notes.insert("partner_target".into(), self.choice as i64);
        notes.insert("human_target".into(), 1 - self.choice as i64);
        (human, partner, notes)
    }
}

fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn check_objects(cfg: &SynthConfig) -> Result<(), DatasetError> {
    cfg.validate()?;
    if cfg.objects.len() != 2 {
        return Err(DatasetError::Config(format!(
            "conflict reach needs exactly 2 objects, got {}",
            cfg.objects.len()
        )));
    }
    Ok(())
}

fn reach_episode(
    cfg: &SynthConfig,
    index: usize,
    choice: Option<usize>,
) -> (Vec<f64>, Vec<f64>, BTreeMap<String, i64>) {
    let mut script = ReachScript::draw(&mut episode_rng(cfg.seed, index));
    if let Some(c) = choice {
        script.choice = c;
    }
    script.render(&cfg.objects)
}

fn to_robot(partner_frames: Vec<f64>) -> Result<PoseTrajectory, DatasetError> {
    let teleop = PoseTrajectory::new(JointLayout::HUMAN, partner_frames, CANONICAL_HZ)?;
    Ok(retarget_trajectory(&teleop, Side::Right, &MarkerLayout::default())?)
}

fn assemble(id: String, task: &str, agents: Vec<Agent>, annotations: BTreeMap<String, i64>) -> Episode {
    Episode {
        id,
        task: task.to_string(),
        frame_hz: CANONICAL_HZ,
        source: EpisodeSource::Procedural,
        agents,
        annotations,
    }
}

/// Conflict-reach episodes: the partner reaches for one of two objects and
/// the human, after the partner commits, reaches for the other one. With a
/// robot partner the robot tracks a teleoperator's right hand.
pub fn gen_conflict_reach(
    cfg: &SynthConfig,
    n_episodes: usize,
    partner: AgentKind,
) -> Result<Vec<Episode>, DatasetError> {
    match partner {
        AgentKind::Robot => Ok(gen_teleop_sessions(cfg, n_episodes)?
            .into_iter()
            .map(|s| s.interaction)
            .collect()),
        AgentKind::Human => {
            check_objects(cfg)?;
            Ok((0..n_episodes)
                .map(|i| {
                    let (human, partner, notes) = reach_episode(cfg, i, None);
                    assemble(
                        format!("cr-{}-{i:05}", cfg.seed),
                        CONFLICT_REACH_TASK,
                        vec![
                            Agent {
                                name: "human".into(),
                                layout: JointLayout::HUMAN,
                                frames: human,
                            },
                            Agent {
                                name: "partner".into(),
                                layout: JointLayout::HUMAN,
                                frames: partner,
                            },
                        ],
                        notes,
                    )
                })
                .collect())
        }
    }
}

/// A human-robot interaction episode together with the recording of the
/// teleoperator that drove the robot.
#[derive(Clone, Debug, PartialEq)]
pub struct TeleopSession {
    pub interaction: Episode,
    pub teleop: Episode,
}

pub fn gen_teleop_sessions(cfg: &SynthConfig, n_episodes: usize) -> Result<Vec<TeleopSession>, DatasetError> {
    check_objects(cfg)?;
    (0..n_episodes)
        .map(|i| {
            let (human, operator, notes) = reach_episode(cfg, i, None);
            let robot = to_robot(operator.clone())?;
            let id = format!("crr-{}-{i:05}", cfg.seed);
            let robot_agent = Agent::from_trajectory("robot", &robot);
            Ok(TeleopSession {
                interaction: assemble(
                    id.clone(),
                    CONFLICT_REACH_TASK,
                    vec![
                        Agent {
                            name: "human".into(),
                            layout: JointLayout::HUMAN,
                            frames: human,
                        },
                        robot_agent.clone(),
                    ],
                    notes.clone(),
                ),
                teleop: assemble(
                    format!("{id}-teleop"),
                    "teleop",
                    vec![
                        Agent {
                            name: "teleoperator".into(),
                            layout: JointLayout::HUMAN,
                            frames: operator,
                        },
                        robot_agent,
                    ],
                    notes,
                ),
            })
        })
        .collect()
}

/// Simultaneous robot and teleoperator poses.
#[derive(Clone, Debug, PartialEq)]
pub struct PosePair {
    pub robot: Pose,
    pub human: Pose,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedPoseDataset {
    pub pairs: Vec<PosePair>,
    pub source_episode_ids: Vec<String>,
}

impl PairedPoseDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn extend(&mut self, other: PairedPoseDataset) {
        self.pairs.extend(other.pairs);
        self.source_episode_ids.extend(other.source_episode_ids);
    }
}

/// One pair per frame of a teleoperation episode. Robot poses come from the
/// recorded robot agent when present, otherwise from retargeting the
/// teleoperator's right arm.
pub fn build_paired_set(teleop_ep: &Episode) -> Result<PairedPoseDataset, DatasetError> {
    let human = teleop_ep
        .agents
        .iter()
        .find(|a| a.layout.kind() == AgentKind::Human)
        .ok_or_else(|| DatasetError::Config(format!("episode {} has no human agent", teleop_ep.id)))?;
    let n = human.num_frames();
    if n == 0 {
        return Ok(PairedPoseDataset {
            pairs: Vec::new(),
            source_episode_ids: vec![teleop_ep.id.clone()],
        });
    }
    let robot_frames = match teleop_ep.agents.iter().find(|a| a.layout.kind() == AgentKind::Robot) {
        Some(robot) => {
            if robot.num_frames() != n {
                return Err(DatasetError::FrameCountMismatch {
                    first_agent: human.name.clone(),
                    first: n,
                    other_agent: robot.name.clone(),
                    other: robot.num_frames(),
                });
            }
            robot.frames.clone()
        }
        None => to_robot(human.frames.clone())?.data().to_vec(),
    };
    let pairs = (0..n)
        .map(|i| PosePair {
            robot: Pose::new(JointLayout::ROBOT, robot_frames[i * 6..(i + 1) * 6].to_vec())
                .expect("validated robot frame"),
            human: Pose::new(JointLayout::HUMAN, human.frame(i).to_vec()).expect("validated human frame"),
        })
        .collect();
    Ok(PairedPoseDataset {
        pairs,
        source_episode_ids: vec![teleop_ep.id.clone()],
    })
}
