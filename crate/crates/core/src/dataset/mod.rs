//! Episode storage, validation, resampling, windowing and splitting.
//!
//! An episode is one recorded or generated interaction of one or two agents.
//! On disk it is a single JSON document; a dataset directory holds one file
//! per episode plus a `manifest.json` with split assignments.

mod synth;

pub use synth::{
    build_paired_set, compose_synthetic_pair, gen_conflict_reach, gen_teleop_sessions, min_jerk, PairedPoseDataset,
    PosePair, SynthConfig, TeleopSession, CONFLICT_REACH_TASK,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{AgentKind, JointLayout, PoseError, PoseTrajectory, SceneWindow, CANONICAL_HZ, HORIZON};
use crate::retarget::RetargetError;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("schema violation at {field}: {message}")]
    Schema { field: String, message: String },
    #[error("agent frame counts differ: {first_agent} has {first} frames, {other_agent} has {other}")]
    FrameCountMismatch {
        first_agent: String,
        first: usize,
        other_agent: String,
        other: usize,
    },
    #[error("episode {0} must be at {CANONICAL_HZ} Hz to be windowed, found {1} Hz")]
    FrameRate(String, f64),
    #[error("episode {0} has a single agent; compose it into a pair before windowing")]
    SingleAgent(String),
    #[error("split ratios {0:?} leave a split empty for {1} episodes")]
    EmptySplit((u32, u32, u32), usize),
    #[error("no placement satisfied the {min_separation} m separation after {attempts} attempts")]
    Placement { min_separation: f64, attempts: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Retarget(#[from] RetargetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeSource {
    Recorded,
    SyntheticPair,
    Procedural,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub name: String,
    pub layout: JointLayout,
    /// Row-major `N x total_dim`.
    pub frames: Vec<f64>,
}

impl Agent {
    pub fn from_trajectory(name: impl Into<String>, traj: &PoseTrajectory) -> Self {
        Self {
            name: name.into(),
            layout: traj.layout(),
            frames: traj.data().to_vec(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.layout.total_dim()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let d = self.layout.total_dim();
        &self.frames[i * d..(i + 1) * d]
    }

    /// Frames `[start, start + len)` as a trajectory.
    pub fn slice(&self, start: usize, len: usize, frame_hz: f64) -> Result<PoseTrajectory, PoseError> {
        let d = self.layout.total_dim();
        PoseTrajectory::new(
            self.layout,
            self.frames[start * d..(start + len) * d].to_vec(),
            frame_hz,
        )
    }

    pub fn trajectory(&self, frame_hz: f64) -> Result<PoseTrajectory, PoseError> {
        PoseTrajectory::new(self.layout, self.frames.clone(), frame_hz)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub task: String,
    pub frame_hz: f64,
    pub source: EpisodeSource,
    pub agents: Vec<Agent>,
    /// Integer event markers, e.g. `commit_frame` for generated episodes.
    pub annotations: BTreeMap<String, i64>,
}

impl Episode {
    pub fn num_frames(&self) -> usize {
        self.agents.first().map_or(0, Agent::num_frames)
    }

    pub fn annotation(&self, key: &str) -> Option<i64> {
        self.annotations.get(key).copied()
    }

    /// Checks every schema invariant of a stored episode.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let schema = |field: String, message: String| DatasetError::Schema { field, message };
        if !(self.frame_hz.is_finite() && self.frame_hz > 0.0) {
            return Err(schema(
                "frame_hz".into(),
                format!("must be positive, got {}", self.frame_hz),
            ));
        }
        if self.agents.is_empty() || self.agents.len() > 2 {
            return Err(schema(
                "agents".into(),
                format!("expected 1 or 2 agents, found {}", self.agents.len()),
            ));
        }
        let robots = self
            .agents
            .iter()
            .filter(|a| a.layout.kind() == AgentKind::Robot)
            .count();
        if robots > 1 {
            return Err(schema("agents".into(), "at most one robot agent".into()));
        }
        for (ai, agent) in self.agents.iter().enumerate() {
            let d = agent.layout.total_dim();
            if agent.frames.len() % d != 0 {
                return Err(schema(
                    format!("agents[{ai}].frames"),
                    format!("length {} is not a multiple of {d}", agent.frames.len()),
                ));
            }
            if let Some(i) = agent.frames.iter().position(|v| !v.is_finite()) {
                return Err(schema(
                    format!("agents[{ai}].frames[{}][{}]", i / d, i % d),
                    "non-finite coordinate".into(),
                ));
            }
        }
        let first = &self.agents[0];
        for other in &self.agents[1..] {
            if other.num_frames() != first.num_frames() {
                return Err(DatasetError::FrameCountMismatch {
                    first_agent: first.name.clone(),
                    first: first.num_frames(),
                    other_agent: other.name.clone(),
                    other: other.num_frames(),
                });
            }
        }
        if first.num_frames() < 2 {
            return Err(schema(
                "agents[0].frames".into(),
                format!("need at least 2 frames, found {}", first.num_frames()),
            ));
        }
        Ok(())
    }

    /// The observed human and its partner, if the episode is a pair.
    fn roles(&self) -> Option<(&Agent, &Agent)> {
        match self.agents.as_slice() {
            [a, b] if a.layout.kind() == AgentKind::Human => Some((a, b)),
            [a, b] if b.layout.kind() == AgentKind::Human => Some((b, a)),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeFile {
    id: String,
    task: String,
    frame_hz: f64,
    source: EpisodeSource,
    agents: Vec<AgentFile>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    annotations: BTreeMap<String, i64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    name: String,
    kind: AgentKind,
    joint_names: Vec<String>,
    frames: Vec<Vec<f64>>,
}

impl EpisodeFile {
    fn into_episode(self) -> Result<Episode, DatasetError> {
        let mut agents = Vec::with_capacity(self.agents.len());
        for (ai, a) in self.agents.into_iter().enumerate() {
            let layout = JointLayout::from_names(a.kind, &a.joint_names).map_err(|e| DatasetError::Schema {
                field: format!("agents[{ai}].joint_names"),
                message: e.to_string(),
            })?;
            let d = layout.total_dim();
            let mut frames = Vec::with_capacity(a.frames.len() * d);
            for (fi, row) in a.frames.iter().enumerate() {
                if row.len() != d {
                    return Err(DatasetError::Schema {
                        field: format!("agents[{ai}].frames[{fi}]"),
                        message: format!("expected {d} values, found {}", row.len()),
                    });
                }
                frames.extend_from_slice(row);
            }
            agents.push(Agent {
                name: a.name,
                layout,
                frames,
            });
        }
        let ep = Episode {
            id: self.id,
            task: self.task,
            frame_hz: self.frame_hz,
            source: self.source,
            agents,
            annotations: self.annotations,
        };
        ep.validate()?;
        Ok(ep)
    }

    fn from_episode(ep: &Episode) -> Self {
        Self {
            id: ep.id.clone(),
            task: ep.task.clone(),
            frame_hz: ep.frame_hz,
            source: ep.source,
            agents: ep
                .agents
                .iter()
                .map(|a| AgentFile {
                    name: a.name.clone(),
                    kind: a.layout.kind(),
                    joint_names: a.layout.joint_names().iter().map(|s| s.to_string()).collect(),
                    frames: a
                        .frames
                        .chunks_exact(a.layout.total_dim())
                        .map(<[f64]>::to_vec)
                        .collect(),
                })
                .collect(),
            annotations: ep.annotations.clone(),
        }
    }
}

/// Parses and validates an episode document.
pub fn parse_episode(text: &str, origin: &Path) -> Result<Episode, DatasetError> {
    let file: EpisodeFile = serde_json::from_str(text).map_err(|source| DatasetError::Json {
        path: origin.to_path_buf(),
        source,
    })?;
    file.into_episode()
}

/// Canonical serialized form: compact JSON with a trailing newline.
pub fn episode_to_string(ep: &Episode) -> String {
    let mut s = serde_json::to_string(&EpisodeFile::from_episode(ep)).expect("episode serializes");
    s.push('\n');
    s
}

pub fn load_episode(path: impl AsRef<Path>) -> Result<Episode, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_episode(&text, path)
}

pub fn save_episode(ep: &Episode, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    fs::write(path, episode_to_string(ep)).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Linear resampling onto a uniform endpoint-inclusive grid at `target_hz`.
pub fn resample(ep: &Episode, target_hz: f64) -> Episode {
    let n = ep.num_frames();
    let duration = (n - 1) as f64 / ep.frame_hz;
    let steps = (duration * target_hz + 1e-9).floor() as usize;
    let ratio = ep.frame_hz / target_hz;
    let agents = ep
        .agents
        .iter()
        .map(|agent| {
            let d = agent.layout.total_dim();
            let mut frames = Vec::with_capacity((steps + 1) * d);
            for i in 0..=steps {
                let pos = i as f64 * ratio;
                let lo = (pos + 1e-9).floor() as usize;
                let frac = pos - lo as f64;
                if lo >= n - 1 {
                    frames.extend_from_slice(agent.frame(n - 1));
                } else if frac.abs() < 1e-9 {
                    frames.extend_from_slice(agent.frame(lo));
                } else {
                    let a = agent.frame(lo);
                    let b = agent.frame(lo + 1);
                    frames.extend(a.iter().zip(b).map(|(x, y)| x + (y - x) * frac));
                }
            }
            Agent {
                name: agent.name.clone(),
                layout: agent.layout,
                frames,
            }
        })
        .collect();
    Episode {
        frame_hz: target_hz,
        agents,
        ..ep.clone()
    }
}

/// One supervised example: history, partner future action and target future.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow {
    pub scene: SceneWindow,
    pub episode_id: String,
    pub task: String,
    pub start_frame: usize,
}

/// Sliding windows of `2 * HORIZON` frames.
pub fn make_windows(ep: &Episode, stride: usize) -> Result<Vec<TrainingWindow>, DatasetError> {
    make_windows_with_horizon(ep, stride, HORIZON)
}

pub fn make_windows_with_horizon(
    ep: &Episode,
    stride: usize,
    horizon: usize,
) -> Result<Vec<TrainingWindow>, DatasetError> {
    if stride == 0 {
        return Err(DatasetError::Config("window stride must be at least 1".into()));
    }
    if (ep.frame_hz - CANONICAL_HZ).abs() > 1e-9 {
        return Err(DatasetError::FrameRate(ep.id.clone(), ep.frame_hz));
    }
    let (human, partner) = ep.roles().ok_or_else(|| DatasetError::SingleAgent(ep.id.clone()))?;
    let n = ep.num_frames();
    let span = 2 * horizon;
    if n < span {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity((n - span) / stride + 1);
    for start in (0..=n - span).step_by(stride) {
        let scene = SceneWindow::new(
            human.slice(start, horizon, ep.frame_hz)?,
            partner.slice(start, horizon, ep.frame_hz)?,
            partner.slice(start + span - 1, 1, ep.frame_hz)?.pose(0),
            Some(human.slice(start + horizon, horizon, ep.frame_hz)?),
        )?;
        out.push(TrainingWindow {
            scene,
            episode_id: ep.id.clone(),
            task: ep.task.clone(),
            start_frame: start,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: (u32, u32, u32),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: (8, 1, 1),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle followed by contiguous assignment; remainders go to train.
pub fn split_episodes<T>(items: Vec<T>, spec: &SplitSpec) -> Result<Splits<T>, DatasetError> {
    let n = items.len();
    let (a, b, c) = spec.ratios;
    let total = (a + b + c) as usize;
    if a == 0 || b == 0 || c == 0 {
        return Err(DatasetError::EmptySplit(spec.ratios, n));
    }
    let n_val = n * b as usize / total;
    let n_test = n * c as usize / total;
    let n_train = n - n_val - n_test;
    if n_val == 0 || n_test == 0 || n_train == 0 {
        return Err(DatasetError::EmptySplit(spec.ratios, n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take =
        |idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| slots[i].take().expect("each index once")).collect() };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(Splits { train, val, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub split: SplitName,
}

/// Listing of a dataset directory. `teleop` holds the paired
/// teleoperation recordings used for representation alignment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub episodes: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub teleop: Vec<String>,
}

/// An in-memory dataset: split episodes plus optional teleop recordings.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub splits: Splits<Episode>,
    pub teleop: Vec<Episode>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn episode_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.json")
}

pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<DatasetManifest, DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = DatasetManifest::default();
    let groups = [
        (SplitName::Train, &dataset.splits.train),
        (SplitName::Val, &dataset.splits.val),
        (SplitName::Test, &dataset.splits.test),
    ];
    for (split, eps) in groups {
        for ep in eps {
            let file = episode_file_name(&ep.id);
            save_episode(ep, dir.join(&file))?;
            manifest.episodes.push(ManifestEntry {
                id: ep.id.clone(),
                file,
                split,
            });
        }
    }
    for ep in &dataset.teleop {
        let file = episode_file_name(&ep.id);
        save_episode(ep, dir.join(&file))?;
        manifest.teleop.push(file);
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.clone(),
        source,
    })?;
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for entry in &manifest.episodes {
        let ep = load_episode(dir.join(&entry.file))?;
        if ep.id != entry.id {
            return Err(DatasetError::Schema {
                field: format!("manifest.episodes[{}].id", entry.id),
                message: format!("file holds episode {:?}", ep.id),
            });
        }
        match entry.split {
            SplitName::Train => splits.train.push(ep),
            SplitName::Val => splits.val.push(ep),
            SplitName::Test => splits.test.push(ep),
        }
    }
    let teleop = manifest
        .teleop
        .iter()
        .map(|f| load_episode(dir.join(f)))
        .collect::<Result<_, _>>()?;
    Ok(Dataset { splits, teleop })
}

/// Windows of every episode, in input order.
pub fn windows_for(eps: &[Episode], stride: usize, horizon: usize) -> Result<Vec<TrainingWindow>, DatasetError> {
    let mut out = Vec::new();
    for ep in eps {
        out.extend(make_windows_with_horizon(ep, stride, horizon)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn human_agent(name: &str, n: usize, f: impl Fn(usize, usize) -> f64) -> Agent {
        let frames = (0..n * 27).map(|i| f(i / 27, i % 27)).collect();
        Agent {
            name: name.into(),
            layout: JointLayout::HUMAN,
            frames,
        }
    }

    fn episode(agents: Vec<Agent>, hz: f64) -> Episode {
        Episode {
            id: "ep".into(),
            task: "test".into(),
            frame_hz: hz,
            source: EpisodeSource::Recorded,
            agents,
            annotations: BTreeMap::new(),
        }
    }

    fn pair(n: usize) -> Episode {
        episode(
            vec![
                human_agent("a", n, |t, c| t as f64 * 0.01 + c as f64),
                human_agent("b", n, |t, c| -(t as f64) * 0.02 + c as f64),
            ],
            CANONICAL_HZ,
        )
    }

    #[test]
    fn minimal_file_loads() {
        let text = format!(
            r#"{{"id":"x","task":"t","frame_hz":15.0,"source":"recorded","agents":[{{"name":"h","kind":"human","joint_names":{},"frames":[{},{}]}}]}}"#,
            serde_json::to_string(&crate::pose::HUMAN_JOINTS).unwrap(),
            serde_json::to_string(&vec![0.5; 27]).unwrap(),
            serde_json::to_string(&vec![0.25; 27]).unwrap(),
        );
        let ep = parse_episode(&text, Path::new("mem")).unwrap();
        assert_eq!(ep.num_frames(), 2);
        assert_eq!(ep.agents[0].layout, JointLayout::HUMAN);
    }

    #[test]
    fn unequal_frame_counts_rejected() {
        let ep = episode(
            vec![human_agent("a", 3, |_, _| 0.0), human_agent("b", 4, |_, _| 0.0)],
            15.0,
        );
        let text = episode_to_string(&ep);
        let err = parse_episode(&text, Path::new("mem")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn bad_rows_and_layouts_rejected() {
        let ep = pair(3);
        let mut v: serde_json::Value = serde_json::from_str(&episode_to_string(&ep)).unwrap();
        v["agents"][1]["frames"][2].as_array_mut().unwrap().pop();
        let err = parse_episode(&v.to_string(), Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("agents[1].frames[2]"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&episode_to_string(&ep)).unwrap();
        v["agents"][0]["joint_names"][0] = "pelvis".into();
        assert!(parse_episode(&v.to_string(), Path::new("mem")).is_err());

        let mut v: serde_json::Value = serde_json::from_str(&episode_to_string(&ep)).unwrap();
        v["agents"][0]["frames"][1][0] = serde_json::Value::Null;
        assert!(parse_episode(&v.to_string(), Path::new("mem")).is_err());
    }

    #[test]
    fn save_load_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        let mut ep = pair(5);
        ep.annotations.insert("commit_frame".into(), 3);
        save_episode(&ep, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_episode(&path).unwrap();
        assert_eq!(loaded, ep);
        save_episode(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let ep = pair(7);
        assert_eq!(resample(&ep, 15.0), ep);
    }

    #[test]
    fn resample_frame_count() {
        // 8 s at 120 Hz has 961 frames; at 15 Hz the grid has 8 * 15 + 1 points.
        let ep = episode(vec![human_agent("a", 961, |t, _| t as f64)], 120.0);
        let out = resample(&ep, 15.0);
        let oracle = (0..).take_while(|i| *i as f64 / 15.0 <= 8.0 + 1e-12).count();
        assert_eq!(out.num_frames(), oracle);
        assert_eq!(out.num_frames(), 121);
        assert_eq!(out.agents[0].frame(120), ep.agents[0].frame(960));
        assert_eq!(out.agents[0].frame(0), ep.agents[0].frame(0));
    }

    #[test]
    fn resample_preserves_ramps() {
        let ep = episode(vec![human_agent("a", 41, |t, c| 0.3 * t as f64 + c as f64)], 20.0);
        for hz in [7.0, 15.0, 33.0, 60.0] {
            let out = resample(&ep, hz);
            for i in 0..out.num_frames() {
                let t_src = i as f64 * 20.0 / hz;
                for (c, v) in out.agents[0].frame(i).iter().enumerate() {
                    assert!((v - (0.3 * t_src + c as f64)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&pair(450), 1).unwrap().len(), 421);
        assert_eq!(make_windows(&pair(450), 15).unwrap().len(), 29);
        assert!(make_windows(&pair(29), 1).unwrap().is_empty());
    }

    #[test]
    fn window_contents() {
        let ep = pair(40);
        let ws = make_windows(&ep, 5).unwrap();
        let w = &ws[1];
        assert_eq!(w.start_frame, 5);
        assert_eq!(w.scene.human_history.frame(0), ep.agents[0].frame(5));
        assert_eq!(
            w.scene.target_future.as_ref().unwrap().frame(14),
            ep.agents[0].frame(34)
        );
        assert_eq!(w.scene.partner_future_action.coords(), ep.agents[1].frame(34));
    }

    #[test]
    fn single_agent_and_rate_rejected() {
        let single = episode(vec![human_agent("a", 40, |_, _| 0.0)], 15.0);
        assert!(matches!(make_windows(&single, 1), Err(DatasetError::SingleAgent(_))));
        let mut fast = pair(40);
        fast.frame_hz = 120.0;
        assert!(matches!(make_windows(&fast, 1), Err(DatasetError::FrameRate(..))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_episodes((0..270).collect::<Vec<_>>(), &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (216, 27, 27));
        let s10 = split_episodes((0..10).collect::<Vec<_>>(), &SplitSpec::default()).unwrap();
        assert_eq!((s10.train.len(), s10.val.len(), s10.test.len()), (8, 1, 1));
        let again = split_episodes((0..270).collect::<Vec<_>>(), &SplitSpec::default()).unwrap();
        assert_eq!(s, again);
        let mut all: Vec<i32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..270).collect::<Vec<_>>());
        assert!(split_episodes((0..5).collect::<Vec<_>>(), &SplitSpec::default()).is_err());
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = pair(31);
        a.id = "a".into();
        let mut b = pair(32);
        b.id = "b".into();
        let mut c = pair(33);
        c.id = "c/1".into();
        let ds = Dataset {
            splits: Splits {
                train: vec![a],
                val: vec![b],
                test: vec![c],
            },
            teleop: vec![],
        };
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }
}
