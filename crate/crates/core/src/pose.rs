//! Pose and trajectory types, temporal DCT transforms, scene centering and
//! displacement metrics.
//!
//! All coordinates are meters. A pose is a flat vector of 3-D joint
//! positions laid out joint-major (`[x0, y0, z0, x1, y1, z1, ...]`).
//! Trajectories store frames row-major, one pose per row.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical frame rate: one second of motion is [`HORIZON`] frames.
pub const CANONICAL_HZ: f64 = 15.0;

/// Default history / forecast length in frames.
pub const HORIZON: usize = 15;

/// Upper-body joints tracked for humans, in storage order.
pub const HUMAN_JOINTS: [&str; 9] = [
    "upper_back",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hand",
    "r_hand",
];

/// End-effector marker points tracked for the robot.
pub const ROBOT_POINTS: [&str; 2] = ["ee_hand_point", "ee_wrist_point"];

/// Pose dimension of a human (9 joints x 3).
pub const HUMAN_DIM: usize = 27;
/// Pose dimension of a robot (2 markers x 3).
pub const ROBOT_DIM: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("pose has {got} coordinates, layout {layout:?} expects {expected}")]
    Length {
        layout: AgentKind,
        expected: usize,
        got: usize,
    },
    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("trajectory must have at least one frame")]
    Empty,
    #[error("layout mismatch: {0:?} vs {1:?}")]
    LayoutMismatch(AgentKind, AgentKind),
    #[error("frame count mismatch: {0} vs {1}")]
    FrameMismatch(usize, usize),
    #[error("unknown joint layout {0:?}")]
    UnknownLayout(Vec<String>),
    #[error("matrix shape {rows}x{cols} does not fit data of length {len}")]
    MatrixShape { rows: usize, cols: usize, len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Human,
    Robot,
}

/// Named joint layout. Only the two fixed layouts exist, so this is `Copy`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct JointLayout {
    kind: AgentKind,
}

impl JointLayout {
    pub const HUMAN: JointLayout = JointLayout { kind: AgentKind::Human };
    pub const ROBOT: JointLayout = JointLayout { kind: AgentKind::Robot };

    pub fn human() -> Self {
        Self::HUMAN
    }

    pub fn robot() -> Self {
        Self::ROBOT
    }

    pub fn for_kind(kind: AgentKind) -> Self {
        Self { kind }
    }

    /// Resolves a layout from its joint names, rejecting anything but the
    /// exact canonical lists.
    pub fn from_names<S: AsRef<str>>(kind: AgentKind, names: &[S]) -> Result<Self, PoseError> {
        let layout = Self { kind };
        let canonical = layout.joint_names();
        if names.len() == canonical.len() && names.iter().zip(canonical).all(|(a, b)| a.as_ref() == *b) {
            Ok(layout)
        } else {
            Err(PoseError::UnknownLayout(
                names.iter().map(|s| s.as_ref().to_string()).collect(),
            ))
        }
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn joint_names(&self) -> &'static [&'static str] {
        match self.kind {
            AgentKind::Human => &HUMAN_JOINTS,
            AgentKind::Robot => &ROBOT_POINTS,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names().len()
    }

    pub fn dims_per_joint(&self) -> usize {
        3
    }

    pub fn total_dim(&self) -> usize {
        3 * self.num_joints()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names().iter().position(|n| *n == name)
    }
}

fn check_finite(values: &[f64]) -> Result<(), PoseError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(PoseError::NonFinite(i)),
        None => Ok(()),
    }
}

/// A single agent's joint coordinates at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    layout: JointLayout,
    coords: Vec<f64>,
}

impl Pose {
    pub fn new(layout: JointLayout, coords: Vec<f64>) -> Result<Self, PoseError> {
        if coords.len() != layout.total_dim() {
            return Err(PoseError::Length {
                layout: layout.kind(),
                expected: layout.total_dim(),
                got: coords.len(),
            });
        }
        check_finite(&coords)?;
        Ok(Self { layout, coords })
    }

    pub fn zeros(layout: JointLayout) -> Self {
        Self {
            layout,
            coords: vec![0.0; layout.total_dim()],
        }
    }

    pub fn layout(&self) -> JointLayout {
        self.layout
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn joint(&self, index: usize) -> [f64; 3] {
        let c = &self.coords[3 * index..3 * index + 3];
        [c[0], c[1], c[2]]
    }

    pub fn translated(&self, v: [f64; 3]) -> Self {
        let mut coords = self.coords.clone();
        translate_points(&mut coords, v);
        Self {
            layout: self.layout,
            coords,
        }
    }
}

/// A pose sequence sampled at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrajectory {
    layout: JointLayout,
    frames: Vec<f64>,
    len: usize,
    frame_hz: f64,
}

impl PoseTrajectory {
    /// Builds a trajectory from row-major frame data.
    pub fn new(layout: JointLayout, frames: Vec<f64>, frame_hz: f64) -> Result<Self, PoseError> {
        let dim = layout.total_dim();
        if frames.is_empty() {
            return Err(PoseError::Empty);
        }
        if !frames.len().is_multiple_of(dim) {
            return Err(PoseError::Length {
                layout: layout.kind(),
                expected: dim,
                got: frames.len() % dim,
            });
        }
        check_finite(&frames)?;
        Ok(Self {
            layout,
            len: frames.len() / dim,
            frames,
            frame_hz,
        })
    }

    pub fn from_poses(poses: &[Pose], frame_hz: f64) -> Result<Self, PoseError> {
        let first = poses.first().ok_or(PoseError::Empty)?;
        let layout = first.layout();
        let mut frames = Vec::with_capacity(poses.len() * layout.total_dim());
        for p in poses {
            if p.layout() != layout {
                return Err(PoseError::LayoutMismatch(layout.kind(), p.layout().kind()));
            }
            frames.extend_from_slice(p.coords());
        }
        Self::new(layout, frames, frame_hz)
    }

    pub fn layout(&self) -> JointLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn frame_hz(&self) -> f64 {
        self.frame_hz
    }

    pub fn dim(&self) -> usize {
        self.layout.total_dim()
    }

    /// Row-major `len x dim` coordinates.
    pub fn data(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.frames[i * d..(i + 1) * d]
    }

    pub fn pose(&self, i: usize) -> Pose {
        Pose {
            layout: self.layout,
            coords: self.frame(i).to_vec(),
        }
    }

    pub fn last_pose(&self) -> Pose {
        self.pose(self.len - 1)
    }

    pub fn translated(&self, v: [f64; 3]) -> Self {
        let mut frames = self.frames.clone();
        translate_points(&mut frames, v);
        Self {
            layout: self.layout,
            frames,
            len: self.len,
            frame_hz: self.frame_hz,
        }
    }
}

/// Adds `v` to every consecutive 3-D point of `coords`.
pub fn translate_points(coords: &mut [f64], v: [f64; 3]) {
    for p in coords.chunks_exact_mut(3) {
        p[0] += v[0];
        p[1] += v[1];
        p[2] += v[2];
    }
}

fn subtract_points(coords: &mut [f64], v: [f64; 3]) {
    for p in coords.chunks_exact_mut(3) {
        p[0] -= v[0];
        p[1] -= v[1];
        p[2] -= v[2];
    }
}

/// The interaction context: both agents' histories, the partner's future
/// action and, for supervised use, the observed human's future.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneWindow {
    pub human_history: PoseTrajectory,
    pub partner_history: PoseTrajectory,
    pub partner_future_action: Pose,
    pub target_future: Option<PoseTrajectory>,
}

impl SceneWindow {
    pub fn new(
        human_history: PoseTrajectory,
        partner_history: PoseTrajectory,
        partner_future_action: Pose,
        target_future: Option<PoseTrajectory>,
    ) -> Result<Self, PoseError> {
        if human_history.layout() != JointLayout::HUMAN {
            return Err(PoseError::LayoutMismatch(
                AgentKind::Human,
                human_history.layout().kind(),
            ));
        }
        if human_history.len() != partner_history.len() {
            return Err(PoseError::FrameMismatch(human_history.len(), partner_history.len()));
        }
        if partner_future_action.layout() != partner_history.layout() {
            return Err(PoseError::LayoutMismatch(
                partner_history.layout().kind(),
                partner_future_action.layout().kind(),
            ));
        }
        if let Some(target) = &target_future {
            if target.layout() != JointLayout::HUMAN {
                return Err(PoseError::LayoutMismatch(AgentKind::Human, target.layout().kind()));
            }
            if target.len() != human_history.len() {
                return Err(PoseError::FrameMismatch(human_history.len(), target.len()));
            }
        }
        Ok(Self {
            human_history,
            partner_history,
            partner_future_action,
            target_future,
        })
    }

    pub fn horizon(&self) -> usize {
        self.human_history.len()
    }

    pub fn partner_kind(&self) -> AgentKind {
        self.partner_history.layout().kind()
    }

    /// Rigidly translates every point in the scene.
    pub fn translated(&self, v: [f64; 3]) -> Self {
        Self {
            human_history: self.human_history.translated(v),
            partner_history: self.partner_history.translated(v),
            partner_future_action: self.partner_future_action.translated(v),
            target_future: self.target_future.as_ref().map(|t| t.translated(v)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneOffset {
    pub translation: [f64; 3],
}

impl SceneOffset {
    pub const ZERO: SceneOffset = SceneOffset { translation: [0.0; 3] };
}

/// Moves the scene origin to the observed human's upper back at the final
/// history frame.
pub fn center_scene(window: &SceneWindow) -> (SceneWindow, SceneOffset) {
    let last = window.human_history.len() - 1;
    let root = window.human_history.frame(last);
    let offset = [root[0], root[1], root[2]];
    let shift = |t: &PoseTrajectory| {
        let mut frames = t.frames.clone();
        subtract_points(&mut frames, offset);
        PoseTrajectory { frames, ..t.clone() }
    };
    let mut action = window.partner_future_action.coords.clone();
    subtract_points(&mut action, offset);
    let centered = SceneWindow {
        human_history: shift(&window.human_history),
        partner_history: shift(&window.partner_history),
        partner_future_action: Pose {
            layout: window.partner_future_action.layout,
            coords: action,
        },
        target_future: window.target_future.as_ref().map(shift),
    };
    (centered, SceneOffset { translation: offset })
}

pub fn uncenter(traj: &PoseTrajectory, offset: SceneOffset) -> PoseTrajectory {
    traj.translated(offset.translation)
}

/// Dense row-major real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, PoseError> {
        if rows * cols != data.len() {
            return Err(PoseError::MatrixShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Orthonormal DCT-II basis, `t x t`, row `k` holding frequency `k`.
pub fn dct_matrix(t: usize) -> Vec<f64> {
    let n = t as f64;
    let mut m = vec![0.0; t * t];
    for k in 0..t {
        let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..t {
            let angle = std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n);
            m[k * t + i] = alpha * angle.cos();
        }
    }
    m
}

/// Applies the DCT along the time axis of a row-major `t x channels` block.
pub fn dct_time_axis(data: &[f64], t: usize, channels: usize) -> Vec<f64> {
    apply_time_matrix(&dct_matrix(t), false, data, t, channels)
}

/// Inverse of [`dct_time_axis`].
pub fn idct_time_axis(data: &[f64], t: usize, channels: usize) -> Vec<f64> {
    apply_time_matrix(&dct_matrix(t), true, data, t, channels)
}

fn apply_time_matrix(basis: &[f64], transpose: bool, data: &[f64], t: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * channels];
    for k in 0..t {
        let row = &mut out[k * channels..(k + 1) * channels];
        for i in 0..t {
            let w = if transpose { basis[i * t + k] } else { basis[k * t + i] };
            let src = &data[i * channels..(i + 1) * channels];
            for (o, s) in row.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    out
}

/// Per-channel DCT coefficients of a trajectory (`T x total_dim`).
pub fn dct_forward(traj: &PoseTrajectory) -> Matrix {
    Matrix {
        rows: traj.len(),
        cols: traj.dim(),
        data: dct_time_axis(traj.data(), traj.len(), traj.dim()),
    }
}

pub fn dct_inverse(coeffs: &Matrix, layout: JointLayout, frame_hz: f64) -> Result<PoseTrajectory, PoseError> {
    if coeffs.cols != layout.total_dim() {
        return Err(PoseError::Length {
            layout: layout.kind(),
            expected: layout.total_dim(),
            got: coeffs.cols,
        });
    }
    PoseTrajectory::new(layout, idct_time_axis(&coeffs.data, coeffs.rows, coeffs.cols), frame_hz)
}

/// Mean per-joint Euclidean distance at the final frame.
pub fn fde(pred: &PoseTrajectory, truth: &PoseTrajectory) -> Result<f64, PoseError> {
    if pred.layout() != truth.layout() {
        return Err(PoseError::LayoutMismatch(pred.layout().kind(), truth.layout().kind()));
    }
    if pred.len() != truth.len() {
        return Err(PoseError::FrameMismatch(pred.len(), truth.len()));
    }
    let last = pred.len() - 1;
    Ok(final_frame_distance(pred.frame(last), truth.frame(last)))
}

/// Mean Euclidean distance between corresponding 3-D points.
pub fn final_frame_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() / 3;
    let total: f64 = a
        .chunks_exact(3)
        .zip(b.chunks_exact(3))
        .map(|(p, q)| {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let dz = p[2] - q[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        })
        .sum();
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_dct(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|k| {
                let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                alpha
                    * x.iter()
                        .enumerate()
                        .map(|(t, v)| v * (std::f64::consts::PI * (2.0 * t as f64 + 1.0) * k as f64 / (2.0 * n)).cos())
                        .sum::<f64>()
            })
            .collect()
    }

    fn human_traj(frames: Vec<f64>) -> PoseTrajectory {
        PoseTrajectory::new(JointLayout::HUMAN, frames, CANONICAL_HZ).unwrap()
    }

    #[test]
    fn dct_constant_and_impulse() {
        let c = dct_time_axis(&[1.0, 1.0], 2, 1);
        assert!((c[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!(c[1].abs() < 1e-12);
        let c = dct_time_axis(&[1.0, 0.0], 2, 1);
        assert_eq!(c, naive_dct(&[1.0, 0.0]));
        assert!((c[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let back = idct_time_axis(&[2f64.sqrt(), 0.0], 2, 1);
        assert!((back[0] - 1.0).abs() < 1e-12 && (back[1] - 1.0).abs() < 1e-12);
        assert_eq!(idct_time_axis(&[0.0; 6], 3, 2), vec![0.0; 6]);
    }

    #[test]
    fn dct_matches_direct_sum_on_15x27() {
        let data: Vec<f64> = (0..15 * 27).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let traj = human_traj(data.clone());
        let coeffs = dct_forward(&traj);
        for c in 0..27 {
            let channel: Vec<f64> = (0..15).map(|t| data[t * 27 + c]).collect();
            let expect = naive_dct(&channel);
            for k in 0..15 {
                assert!((coeffs.get(k, c) - expect[k]).abs() < 1e-12);
            }
        }
        let back = dct_inverse(&coeffs, JointLayout::HUMAN, CANONICAL_HZ).unwrap();
        for (a, b) in back.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_invariants() {
        assert_eq!(JointLayout::HUMAN.total_dim(), HUMAN_DIM);
        assert_eq!(JointLayout::ROBOT.total_dim(), ROBOT_DIM);
        assert!(JointLayout::from_names(AgentKind::Human, &HUMAN_JOINTS).is_ok());
        assert!(JointLayout::from_names(AgentKind::Robot, &["ee_hand_point"]).is_err());
        assert!(JointLayout::from_names(AgentKind::Robot, &HUMAN_JOINTS).is_err());
    }

    #[test]
    fn pose_rejects_bad_input() {
        assert!(Pose::new(JointLayout::ROBOT, vec![0.0; 5]).is_err());
        let mut c = vec![0.0; 6];
        c[4] = f64::NAN;
        assert_eq!(Pose::new(JointLayout::ROBOT, c), Err(PoseError::NonFinite(4)));
    }

    fn window_with_root(root: [f64; 3]) -> SceneWindow {
        let mut hist = vec![0.0; 2 * 27];
        for j in 0..9 {
            hist[j * 3] = j as f64 * 0.125;
            hist[27 + j * 3 + 1] = j as f64 * 0.25;
        }
        hist[27] = root[0];
        hist[28] = root[1];
        hist[29] = root[2];
        let h = human_traj(hist);
        let partner = PoseTrajectory::new(JointLayout::ROBOT, vec![0.5; 12], CANONICAL_HZ).unwrap();
        let action = Pose::new(JointLayout::ROBOT, vec![0.25; 6]).unwrap();
        SceneWindow::new(h.clone(), partner, action, Some(h)).unwrap()
    }

    #[test]
    fn centering_offsets() {
        let w = window_with_root([0.0, 0.0, 0.0]);
        let (c, off) = center_scene(&w);
        assert_eq!(off, SceneOffset::ZERO);
        assert_eq!(c, w);

        let w = window_with_root([1.0, 2.0, 3.0]);
        let (c, off) = center_scene(&w);
        assert_eq!(off.translation, [1.0, 2.0, 3.0]);
        assert_eq!(&c.human_history.frame(1)[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(c.partner_future_action.coords()[..3], [-0.75, -1.75, -2.75]);

        let shifted = w.translated([0.5, -0.25, 4.0]);
        let (c2, _) = center_scene(&shifted);
        // Dyadic values keep the arithmetic exact.
        assert_eq!(c2, c);
    }

    #[test]
    fn uncenter_cases() {
        let single = human_traj(vec![0.0; 27]);
        let moved = uncenter(
            &single,
            SceneOffset {
                translation: [1.0, 0.0, 0.0],
            },
        );
        for p in moved.data().chunks_exact(3) {
            assert_eq!(p, &[1.0, 0.0, 0.0]);
        }
        assert_eq!(uncenter(&single, SceneOffset::ZERO), single);
        let w = window_with_root([1.0, 2.0, 3.0]);
        let (c, off) = center_scene(&w);
        assert_eq!(uncenter(c.target_future.as_ref().unwrap(), off), w.human_history);
    }

    #[test]
    fn fde_cases() {
        let truth = human_traj((0..54).map(|i| i as f64 * 0.01).collect());
        assert_eq!(fde(&truth, &truth).unwrap(), 0.0);
        let shifted = truth.translated([0.05, 0.0, 0.0]);
        assert!((fde(&shifted, &truth).unwrap() - 0.05).abs() < 1e-12);

        let mut data = truth.data().to_vec();
        data[27 + 3 * 2 + 1] += 0.1;
        data[27 + 3 * 7 + 2] -= 0.3;
        let pred = human_traj(data);
        assert!((fde(&pred, &truth).unwrap() - 0.4 / 9.0).abs() < 1e-12);

        let robot = PoseTrajectory::new(JointLayout::ROBOT, vec![0.0; 12], CANONICAL_HZ).unwrap();
        assert!(fde(&robot, &truth).is_err());
        let short = human_traj(vec![0.0; 27]);
        assert!(fde(&short, &truth).is_err());
    }

    proptest! {
        #[test]
        fn dct_is_orthonormal(x in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let n = x.len();
            let c = dct_time_axis(&x, n, 1);
            let norm_x: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm_c: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm_x - norm_c).abs() <= 1e-9);
            let back = idct_time_axis(&c, n, 1);
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn fde_translation_invariant(
            a in proptest::collection::vec(-2.0f64..2.0, 27),
            b in proptest::collection::vec(-2.0f64..2.0, 27),
            v in proptest::array::uniform3(-5.0f64..5.0),
        ) {
            let pa = human_traj(a);
            let pb = human_traj(b);
            let base = fde(&pa, &pb).unwrap();
            prop_assert!(base >= 0.0);
            let moved = fde(&pa.translated(v), &pb.translated(v)).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
        }

        #[test]
        fn center_uncenter_roundtrip_close(
            frames in proptest::collection::vec(-3.0f64..3.0, 54),
        ) {
            let h = human_traj(frames);
            let partner = h.clone();
            let w = SceneWindow::new(h.clone(), partner, h.last_pose(), Some(h.clone())).unwrap();
            let (c, off) = center_scene(&w);
            let back = uncenter(&c.human_history, off);
            for (a, b) in back.data().iter().zip(h.data()) {
                prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * 8.0);
            }
        }
    }
}
