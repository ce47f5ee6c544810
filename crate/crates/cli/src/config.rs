//! Run configuration: a JSON file layered over built-in defaults, then
//! command-line flags, then `dotted.key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use interact::dataset::SynthConfig;
use interact::model::{ModelConfig, VariantName};
use interact::pose::HORIZON;
use interact::training::{AdamConfig, LossWeights, Stage, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub const SEED_ENV: &str = "INTERACT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Pretrain,
    Finetune,
    Eval,
    Predict,
    Retarget,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Predict => "predict",
            Command::Retarget => "retarget",
            Command::Verify => "verify",
        }
    }

    fn required(self) -> &'static [&'static str] {
        match self {
            Command::Pretrain | Command::Finetune => &["data.dir"],
            Command::Eval => &["data.dir", "eval.checkpoints"],
            Command::Predict => &["predict.checkpoint", "predict.window"],
            Command::Retarget => &["retarget.episode"],
            Command::Synth | Command::Verify => &[],
        }
    }
}

/// Usage and configuration problems; the process exits with status 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub output: OutputSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub predict: PredictSection,
    pub retarget: RetargetSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    /// Frames between consecutive training and evaluation windows.
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub episodes: usize,
    pub teleop_sessions: usize,
    pub split: [u32; 3],
    pub min_separation: f64,
    pub workspace_radius: f64,
    pub yaw_range: f64,
    pub objects: Vec<[f64; 3]>,
    /// Single-person clips to pair up, first with second and so on. When
    /// set, `synth` composes these instead of generating conflict-reach data.
    pub compose: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub horizon: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Chosen from the command when unset.
    pub variant: Option<VariantName>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub lambda_p: f64,
    pub lambda_h: f64,
    pub lambda_f: f64,
    pub align: bool,
    pub align_pairs_per_batch: usize,
    pub freeze_human_embeddings: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Checkpoint to fine-tune from; without one the model starts fresh.
    pub init: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoints: Vec<PathBuf>,
    pub split: String,
    /// Number of episodes that get a per-frame error trace.
    pub traces: usize,
    pub svg: bool,
    pub dump_raw: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    pub checkpoint: Option<PathBuf>,
    pub window: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetargetSection {
    pub episode: Option<PathBuf>,
    pub side: String,
    pub hand_offset: [f64; 3],
    pub wrist_offset: [f64; 3],
}

/// The full default tree for `cmd`. Every accepted key appears here, with
/// `null` for values that have no default.
pub fn defaults(cmd: Command) -> Value {
    let stage = if cmd == Command::Finetune {
        Stage::Finetune
    } else {
        Stage::Pretrain
    };
    let t = TrainConfig::for_stage(stage);
    let m = ModelConfig::default();
    let s = SynthConfig::default();
    json!({
        "seed": null,
        "data": { "dir": null, "stride": 1 },
        "output": { "dir": "out" },
        "synth": {
            "episodes": 200,
            "teleop_sessions": 40,
            "split": [8, 1, 1],
            "min_separation": s.min_separation,
            "workspace_radius": s.workspace_radius,
            "yaw_range": s.yaw_range,
            "objects": s.objects,
            "compose": [],
        },
        "model": {
            "horizon": HORIZON,
            "embed_dim": m.embed_dim,
            "layers": m.layers,
            "heads": m.heads,
            "variant": null,
        },
        "train": {
            "epochs": t.epochs,
            "batch_size": t.batch_size,
            "lr": t.base_lr,
            "milestones": t.milestones,
            "gamma": t.gamma,
            "lambda_p": t.weights.lambda_p,
            "lambda_h": t.weights.lambda_h,
            "lambda_f": t.weights.lambda_f,
            "align": false,
            "align_pairs_per_batch": t.align_pairs_per_batch,
            "freeze_human_embeddings": false,
            "beta1": t.adam.beta1,
            "beta2": t.adam.beta2,
            "eps": t.adam.eps,
            "weight_decay": t.adam.weight_decay,
            "init": null,
        },
        "eval": { "checkpoints": [], "split": "test", "traces": 3, "svg": true, "dump_raw": false },
        "predict": { "checkpoint": null, "window": null },
        "retarget": { "episode": null, "side": "right", "hand_offset": [0.0, 0.0, 0.0], "wrist_offset": [-0.1, 0.0, 0.0] },
    })
}

fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<(), ConfigError> {
    let Value::Object(patch) = patch else {
        return err(format!(
            "{}: expected an object",
            if prefix.is_empty() { "config" } else { prefix }
        ));
    };
    let base = base.as_object_mut().expect("merge target is an object");
    for (k, v) in patch {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let Some(slot) = base.get_mut(&k) else {
            return err(format!("unknown key {path}"));
        };
        if slot.is_object() && v.is_object() {
            merge(slot, v, &path)?;
        } else {
            *slot = v;
        }
    }
    Ok(())
}

/// Parses `key=value`. The value is read as JSON when it parses, else as a
/// plain string, so `train.lr=1e-3` and `eval.split=val` both work.
pub fn parse_override(arg: &str) -> Result<(String, Value), ConfigError> {
    let Some((key, raw)) = arg.split_once('=') else {
        return err(format!("override {arg:?} is not of the form key=value"));
    };
    if key.is_empty() {
        return err(format!("override {arg:?} has an empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = match node {
            Value::Object(m) => m,
            _ => return err(format!("unknown key {key}")),
        };
        let Some(next) = map.get_mut(*part) else {
            return err(format!("unknown key {key}"));
        };
        if i + 1 == parts.len() {
            if next.is_object() && value.is_object() {
                return merge(next, value, key);
            }
            *next = value;
            return Ok(());
        }
        node = next;
    }
    unreachable!("split yields at least one part")
}

fn lookup<'a>(tree: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(tree, |node, part| node.get(part))
}

/// Layers `file`, `flags` and `overrides` over the defaults for `cmd` and
/// type-checks the result. `env_seed` is the value of [`SEED_ENV`], used only
/// when no seed is configured.
pub fn resolve(
    cmd: Command,
    file: Option<&Path>,
    flags: &[(String, Value)],
    overrides: &[(String, Value)],
    env_seed: Option<&str>,
) -> Result<RunConfig, ConfigError> {
    let mut tree = defaults(cmd);
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("config {} is not valid JSON: {e}", path.display())))?;
        merge(&mut tree, value, "")?;
    }
    for (k, v) in flags.iter().chain(overrides) {
        set_path(&mut tree, k, v.clone())?;
    }
    if tree["seed"].is_null() {
        tree["seed"] = match env_seed {
            Some(s) => json!(s
                .trim()
                .parse::<u64>()
                .map_err(|_| ConfigError(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?),
            None => json!(0),
        };
    }
    for key in cmd.required() {
        let missing = match lookup(&tree, key) {
            None | Some(Value::Null) => true,
            Some(Value::Array(a)) => a.is_empty(),
            Some(_) => false,
        };
        if missing {
            return err(format!("missing required key {key}"));
        }
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(tree)
        .map_err(|e| ConfigError(format!("type error at {}: {}", e.path(), e.inner())))?;
    cfg.check()?;
    Ok(cfg)
}

impl RunConfig {
    fn check(&self) -> Result<(), ConfigError> {
        if self.data.stride == 0 {
            return err("data.stride must be at least 1");
        }
        if !["train", "val", "test"].contains(&self.eval.split.as_str()) {
            return err(format!(
                "eval.split must be train, val or test, got {:?}",
                self.eval.split
            ));
        }
        if self.synth.compose.len() % 2 == 1 {
            return err("synth.compose needs an even number of clips");
        }
        self.retarget
            .side
            .parse::<interact::retarget::Side>()
            .map_err(|e| ConfigError(format!("retarget.side: {e}")))?;
        self.model_config(VariantName::Interact)
            .validate()
            .map_err(|e| ConfigError(format!("model: {e}")))?;
        self.train_config(Stage::Pretrain)
            .schedule()
            .map_err(|e| ConfigError(format!("train: {e}")))?;
        Ok(())
    }

    pub fn model_config(&self, variant: VariantName) -> ModelConfig {
        ModelConfig {
            horizon: self.model.horizon,
            embed_dim: self.model.embed_dim,
            layers: self.model.layers,
            heads: self.model.heads,
            variant,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.lr,
            milestones: t.milestones.clone(),
            gamma: t.gamma,
            weights: LossWeights {
                lambda_p: t.lambda_p,
                lambda_h: t.lambda_h,
                lambda_f: t.lambda_f,
            },
            seed: self.seed,
            align_enabled: t.align,
            align_pairs_per_batch: t.align_pairs_per_batch,
            freeze_human_embeddings: t.freeze_human_embeddings,
            adam: AdamConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
            },
        }
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            min_separation: self.synth.min_separation,
            workspace_radius: self.synth.workspace_radius,
            yaw_range: self.synth.yaw_range,
            seed,
            objects: self.synth.objects.clone(),
        }
    }
}
