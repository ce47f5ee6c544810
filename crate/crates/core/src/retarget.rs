//! Human arm to robot end-effector correspondence.
//!
//! The hand joint gives the end-effector position and the wrist-to-hand bone
//! gives its orientation. The bone only fixes a direction, so orientation is
//! the minimal (roll-free) rotation taking the rest direction `+x` onto it.
//! Downstream the end-effector is represented by two rigidly attached marker
//! points.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::pose::{JointLayout, Pose, PoseError, PoseTrajectory};

/// Bones shorter than this (meters) have no usable direction.
pub const MIN_BONE_LENGTH: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum RetargetError {
    #[error("degenerate wrist-hand bone ({length:.2e} m) at frame {frame}")]
    DegenerateBone { frame: usize, length: f64 },
    #[error("expected a human pose, got {0:?}")]
    NotHuman(crate::pose::AgentKind),
    #[error("marker offsets must be distinct")]
    CoincidentMarkers,
    #[error(transparent)]
    Pose(#[from] PoseError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn joints(self) -> (usize, usize) {
        let layout = JointLayout::HUMAN;
        let (wrist, hand) = match self {
            Side::Left => ("l_wrist", "l_hand"),
            Side::Right => ("r_wrist", "r_hand"),
        };
        (
            layout.joint_index(wrist).expect("wrist joint"),
            layout.joint_index(hand).expect("hand joint"),
        )
    }
}

impl std::str::FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(format!("unknown side {other:?}")),
        }
    }
}

/// 6-DoF end-effector pose. Orientation is `(w, x, y, z)` with `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EEPose {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

impl EEPose {
    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation;
        UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z))
    }
}

/// Marker points expressed in the end-effector frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarkerLayout {
    hand_offset: [f64; 3],
    wrist_offset: [f64; 3],
}

impl MarkerLayout {
    pub fn new(hand_offset: [f64; 3], wrist_offset: [f64; 3]) -> Result<Self, RetargetError> {
        if hand_offset == wrist_offset {
            return Err(RetargetError::CoincidentMarkers);
        }
        Ok(Self {
            hand_offset,
            wrist_offset,
        })
    }

    pub fn hand_offset(&self) -> [f64; 3] {
        self.hand_offset
    }

    pub fn wrist_offset(&self) -> [f64; 3] {
        self.wrist_offset
    }

    pub fn marker_distance(&self) -> f64 {
        (Vector3::from(self.hand_offset) - Vector3::from(self.wrist_offset)).norm()
    }
}

impl Default for MarkerLayout {
    /// A 10 cm gripper body behind the tool point.
    fn default() -> Self {
        Self {
            hand_offset: [0.0, 0.0, 0.0],
            wrist_offset: [-0.10, 0.0, 0.0],
        }
    }
}

/// Shortest-arc rotation from `+x` to the unit vector `dir`.
fn rotation_from_x(dir: Vector3<f64>) -> [f64; 4] {
    let dot = dir.x;
    if dot < -1.0 + 1e-12 {
        // Antiparallel: any perpendicular axis works, pick +z.
        return [0.0, 0.0, 0.0, 1.0];
    }
    // q = (1 + x.d, x cross d), normalized. For x = (1,0,0): cross = (0, -dz, dy).
    let q = [1.0 + dot, 0.0, -dir.z, dir.y];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut q = q.map(|v| v / norm);
    if q[0] < 0.0 {
        q = q.map(|v| -v);
    }
    q
}

fn hand_frame_at(coords: &[f64], side: Side, frame: usize) -> Result<EEPose, RetargetError> {
    let (wrist, hand) = side.joints();
    let w = Vector3::new(coords[3 * wrist], coords[3 * wrist + 1], coords[3 * wrist + 2]);
    let h = Vector3::new(coords[3 * hand], coords[3 * hand + 1], coords[3 * hand + 2]);
    let bone = h - w;
    let length = bone.norm();
    if length < MIN_BONE_LENGTH {
        return Err(RetargetError::DegenerateBone { frame, length });
    }
    Ok(EEPose {
        position: [h.x, h.y, h.z],
        orientation: rotation_from_x(bone / length),
    })
}

/// End-effector pose implied by one human arm.
pub fn hand_frame(human_pose: &Pose, side: Side) -> Result<EEPose, RetargetError> {
    if human_pose.layout() != JointLayout::HUMAN {
        return Err(RetargetError::NotHuman(human_pose.layout().kind()));
    }
    hand_frame_at(human_pose.coords(), side, 0)
}

fn marker_coords(ee: &EEPose, layout: &MarkerLayout) -> [f64; 6] {
    let r = ee.rotation();
    let p = Vector3::from(ee.position);
    let a = r.transform_vector(&Vector3::from(layout.hand_offset)) + p;
    let b = r.transform_vector(&Vector3::from(layout.wrist_offset)) + p;
    [a.x, a.y, a.z, b.x, b.y, b.z]
}

/// Robot two-marker pose for an end-effector pose.
pub fn ee_to_marker_pose(ee: &EEPose, layout: &MarkerLayout) -> Pose {
    Pose::new(JointLayout::ROBOT, marker_coords(ee, layout).to_vec())
        .expect("rigid transform of finite points is finite")
}

/// Frame-wise retargeting of a human trajectory to robot markers.
pub fn retarget_trajectory(
    human: &PoseTrajectory,
    side: Side,
    layout: &MarkerLayout,
) -> Result<PoseTrajectory, RetargetError> {
    if human.layout() != JointLayout::HUMAN {
        return Err(RetargetError::NotHuman(human.layout().kind()));
    }
    let mut frames = Vec::with_capacity(human.len() * 6);
    for i in 0..human.len() {
        let ee = hand_frame_at(human.frame(i), side, i)?;
        frames.extend_from_slice(&marker_coords(&ee, layout));
    }
    Ok(PoseTrajectory::new(JointLayout::ROBOT, frames, human.frame_hz())?)
}
