//! Losses, optimisation and the two-stage training loop.

pub mod checkpoint;
pub mod optim;

use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PairedPoseDataset, PosePair};
use crate::diff::{DiffError, GradStore, ParameterStore, Scalar, Tape, Tensor, Var};
use crate::model::{AlignTarget, Batch, InteractModel, ModelError};
use crate::pose::{final_frame_distance, PoseError, PoseTrajectory, SceneWindow, HUMAN_DIM, ROBOT_DIM};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use optim::{Adam, AdamConfig, LrSchedule};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite update for parameter {0}")]
    NonFiniteUpdate(String),
    #[error("validation FDE is NaN at epoch {0}")]
    NanValidation(usize),
    #[error("no training windows")]
    EmptyTrainingSet,
    #[error("alignment needs at least one pose pair")]
    EmptyPairs,
    #[error("metrics log: {0}")]
    Metrics(String),
}

impl From<csv::Error> for TrainError {
    fn from(e: csv::Error) -> Self {
        TrainError::Metrics(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_h: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_h: 0.1,
            lambda_f: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub align_enabled: bool,
    /// Pose pairs drawn per batch for each alignment term.
    pub align_pairs_per_batch: usize,
    pub freeze_human_embeddings: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Pretrain)
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (epochs, batch_size, base_lr) = match stage {
            Stage::Pretrain => (50, 256, 3e-4),
            Stage::Finetune => (30, 64, 1e-4),
        };
        Self {
            stage,
            epochs,
            batch_size,
            base_lr,
            milestones: vec![15, 25, 35, 40],
            gamma: 0.1,
            weights: LossWeights::default(),
            seed: 0,
            align_enabled: false,
            align_pairs_per_batch: 256,
            freeze_human_embeddings: false,
            adam: AdamConfig::default(),
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule, TrainError> {
        LrSchedule::new(self.base_lr, self.milestones.clone(), self.gamma)
    }

    pub fn validate(&self, paired: Option<&PairedPoseDataset>) -> Result<(), TrainError> {
        self.schedule()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        let w = self.weights;
        if w.lambda_p < 0.0 || w.lambda_h < 0.0 || w.lambda_f < 0.0 {
            return Err(TrainError::Config("loss weights must be nonnegative".into()));
        }
        if self.align_enabled {
            if self.stage != Stage::Finetune {
                return Err(TrainError::Config("alignment is a fine-tuning option".into()));
            }
            if paired.is_none_or(|p| p.is_empty()) {
                return Err(TrainError::EmptyPairs);
            }
            if self.align_pairs_per_batch == 0 {
                return Err(TrainError::Config("align_pairs_per_batch must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Mean over frames of the squared norm of the full pose error.
pub fn loss_pred(pred: &PoseTrajectory, truth: &PoseTrajectory) -> Result<f64, TrainError> {
    if pred.layout() != truth.layout() || pred.len() != truth.len() {
        return Err(PoseError::FrameMismatch(pred.len(), truth.len()).into());
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / pred.len() as f64)
}

pub fn loss_total(pred: f64, hist_align: f64, fut_align: f64, w: &LossWeights) -> f64 {
    w.lambda_p * pred + w.lambda_h * hist_align + w.lambda_f * fut_align
}

fn pair_tensors<F: Scalar>(pairs: &[&PosePair]) -> Result<(Tensor<F>, Tensor<F>), DiffError> {
    let n = pairs.len();
    let r = pairs
        .iter()
        .flat_map(|p| p.robot.coords())
        .map(|v| F::lit(*v))
        .collect();
    let h = pairs
        .iter()
        .flat_map(|p| p.human.coords())
        .map(|v| F::lit(*v))
        .collect();
    Ok((Tensor::new(&[n, ROBOT_DIM], r)?, Tensor::new(&[n, HUMAN_DIM], h)?))
}

fn align_term<F: Scalar>(
    tape: &mut Tape<F>,
    model: &InteractModel<F>,
    store: &ParameterStore<F>,
    pairs: &[&PosePair],
    which: AlignTarget,
) -> Result<Var, TrainError> {
    let (r, h) = pair_tensors(pairs)?;
    let (er, eh) = model.align_embeddings_with(tape, store, &r, &h, which)?;
    Ok(tape.cosine_align(er, eh)?)
}

/// Mean over pairs of `1 - cos` between robot and human embeddings.
pub fn loss_align<F: Scalar>(
    model: &InteractModel<F>,
    pairs: &[PosePair],
    which: AlignTarget,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let refs: Vec<&PosePair> = pairs.iter().collect();
    let mut tape = Tape::new();
    let v = align_term(&mut tape, model, model.store(), &refs, which)?;
    Ok(tape.value(v).item().to_f64().unwrap_or(f64::NAN))
}

/// Weighted training objective on one batch. Alignment terms are included
/// only when `pairs` is given.
pub fn objective<F: Scalar>(
    tape: &mut Tape<F>,
    model: &InteractModel<F>,
    store: &ParameterStore<F>,
    batch: &Batch<F>,
    pairs: Option<&[&PosePair]>,
    w: &LossWeights,
) -> Result<(Var, Var), TrainError> {
    let target = batch
        .target
        .as_ref()
        .ok_or_else(|| TrainError::Config("training windows need targets".into()))?;
    let out = model.forward_with(tape, store, batch)?;
    let pred = tape.mpjpe_loss(out, target)?;
    let mut total = tape.scale(pred, F::lit(w.lambda_p))?;
    if let Some(p) = pairs {
        let h = align_term(tape, model, store, p, AlignTarget::Hist)?;
        let h = tape.scale(h, F::lit(w.lambda_h))?;
        let f = align_term(tape, model, store, p, AlignTarget::Fut)?;
        let f = tape.scale(f, F::lit(w.lambda_f))?;
        total = tape.add(total, h)?;
        total = tape.add(total, f)?;
    }
    Ok((total, pred))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_fde: Option<f64>,
    pub lr: f64,
}

/// Appends rows to a metrics CSV, writing the header for a new file.
pub fn append_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<(), TrainError> {
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| TrainError::Metrics(e.to_string()))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| TrainError::Metrics(e.to_string()))?;
    Ok(())
}

/// Mean prediction loss and mean FDE of `model` over `windows`, in
/// centered coordinates.
pub fn validate(model: &InteractModel<f32>, windows: &[SceneWindow]) -> Result<(f64, f64), TrainError> {
    const CHUNK: usize = 256;
    let (mut loss, mut fde) = (0.0, 0.0);
    let t = model.config().horizon;
    for chunk in windows.chunks(CHUNK) {
        let refs: Vec<&SceneWindow> = chunk.iter().collect();
        let batch = model.batch(&refs)?;
        let target = batch
            .target
            .as_ref()
            .ok_or_else(|| TrainError::Config("validation windows need targets".into()))?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch)?;
        let pred = tape.value(out).to_f64();
        let truth = target.to_f64();
        let per = t * HUMAN_DIM;
        for (p, q) in pred.chunks(per).zip(truth.chunks(per)) {
            loss += p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t as f64;
            fde += final_frame_distance(&p[per - HUMAN_DIM..], &q[per - HUMAN_DIM..]);
        }
    }
    let n = windows.len() as f64;
    Ok((loss / n, fde / n))
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val_fde: Option<f64>,
}

/// Resumable state of one training stage.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub optimizer: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    best: Option<(f64, usize, ParameterStore<f32>)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &InteractModel<f32>) -> Self {
        let mut optimizer = Adam::new(cfg.adam.clone(), model.store());
        if cfg.freeze_human_embeddings {
            for name in ["hist_h.w", "hist_h.b", "fut_h.w", "fut_h.b"] {
                optimizer
                    .frozen
                    .insert(model.store().id(name).expect("embedding registered"));
            }
        }
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            optimizer,
            epoch: 0,
            history: Vec::new(),
            best: None,
        }
    }

    /// Continues from a checkpoint written mid-stage.
    pub fn resume(cfg: TrainConfig, model: &InteractModel<f32>, ckpt: &Checkpoint) -> Self {
        let mut t = Self::new(cfg, model);
        if let Some(opt) = &ckpt.optimizer {
            t.optimizer = opt.clone();
        }
        if let Some(rng) = &ckpt.rng {
            t.rng = rng.clone();
        }
        t.epoch = ckpt.epoch;
        t
    }

    pub fn checkpoint(&self, model: &InteractModel<f32>) -> Checkpoint {
        Checkpoint::capture(
            model,
            Some(&self.cfg),
            Some(&self.optimizer),
            Some(&self.rng),
            self.epoch,
        )
    }

    pub fn run_epoch(
        &mut self,
        model: &mut InteractModel<f32>,
        train: &[SceneWindow],
        val: &[SceneWindow],
        paired: Option<&PairedPoseDataset>,
    ) -> Result<EpochMetrics, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        let lr = self.cfg.schedule()?.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let pairs = if self.cfg.align_enabled { paired } else { None };
        let mut sum = 0.0;
        for idx in order.chunks(self.cfg.batch_size) {
            let windows: Vec<&SceneWindow> = idx.iter().map(|&i| &train[i]).collect();
            let batch = model.batch(&windows)?;
            let sampled: Option<Vec<&PosePair>> = pairs.map(|p| {
                let k = self.cfg.align_pairs_per_batch.min(p.len());
                rand::seq::index::sample(&mut self.rng, p.len(), k)
                    .into_iter()
                    .map(|i| &p.pairs[i])
                    .collect()
            });
            let mut tape = Tape::new();
            let (total, _) = objective(
                &mut tape,
                model,
                model.store(),
                &batch,
                sampled.as_deref(),
                &self.cfg.weights,
            )?;
            sum += tape.value(total).item() as f64 * windows.len() as f64;
            let mut grads = GradStore::new(model.store());
            tape.backward(total)?.accumulate_into(&mut grads);
            drop(tape);
            self.optimizer.step(model.store_mut(), &grads, lr)?;
        }
        let (val_loss, val_fde) = if val.is_empty() {
            (None, None)
        } else {
            let (l, f) = validate(model, val)?;
            if f.is_nan() {
                return Err(TrainError::NanValidation(self.epoch));
            }
            if self.best.as_ref().is_none_or(|(b, _, _)| f < *b) {
                self.best = Some((f, self.epoch, model.store().clone()));
            }
            (Some(l * self.cfg.weights.lambda_p), Some(f))
        };
        let m = EpochMetrics {
            epoch: self.epoch,
            stage: self.cfg.stage,
            train_loss: sum / train.len() as f64,
            val_loss,
            val_fde,
            lr,
        };
        self.history.push(m.clone());
        self.epoch += 1;
        Ok(m)
    }

    /// Restores the best-validation weights, if any epoch was validated.
    pub fn finish(self, model: &mut InteractModel<f32>) -> StageReport {
        let (best_val_fde, best_epoch) = match self.best {
            Some((f, e, store)) => {
                *model.store_mut() = store;
                (Some(f), Some(e))
            }
            None => (None, None),
        };
        StageReport {
            epochs: self.history,
            best_epoch,
            best_val_fde,
        }
    }
}

/// Trains for `cfg.epochs` epochs and keeps the best validation snapshot.
pub fn run_stage(
    model: &mut InteractModel<f32>,
    train: &[SceneWindow],
    val: &[SceneWindow],
    cfg: &TrainConfig,
    paired: Option<&PairedPoseDataset>,
) -> Result<StageReport, TrainError> {
    cfg.validate(paired)?;
    let mut trainer = Trainer::new(cfg.clone(), model);
    while trainer.epoch < cfg.epochs {
        trainer.run_epoch(model, train, val, paired)?;
    }
    Ok(trainer.finish(model))
}
