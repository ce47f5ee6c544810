//! The forecasting network and its baseline variants.
//!
//! Histories are centered on the observed human, moved to the DCT domain per
//! channel, embedded per agent, and encoded by a local stack (human only)
//! and a global stack (human and partner). A single query, the partner's
//! future action or the last observed human pose, attends to both
//! encodings through the decoder. The decoded vector is expanded to the
//! horizon, mapped to joints, and inverted back to the time domain.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::nn::{sinusoid_table, DecoderLayer, EncoderLayer, LayerNorm, Linear};
use crate::diff::{DiffError, ParameterStore, Scalar, Tape, Tensor, Var};
use crate::pose::{
    center_scene, dct_matrix, dct_time_axis, uncenter, AgentKind, Pose, PoseError, PoseTrajectory, SceneOffset,
    SceneWindow, HORIZON, HUMAN_DIM, ROBOT_DIM,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error("window horizon {got} does not match model horizon {expected}")]
    Horizon { expected: usize, got: usize },
    #[error("batch mixes human and robot partners")]
    MixedPartners,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantName {
    Marginal,
    MarginalHist,
    #[serde(rename = "InteRACT")]
    Interact,
    #[serde(rename = "InteRACT_Align")]
    InteractAlign,
    OnlyFineTuned,
}

impl VariantName {
    pub const ALL: [VariantName; 5] = [
        VariantName::Marginal,
        VariantName::MarginalHist,
        VariantName::Interact,
        VariantName::InteractAlign,
        VariantName::OnlyFineTuned,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantName::Marginal => "Marginal",
            VariantName::MarginalHist => "MarginalHist",
            VariantName::Interact => "InteRACT",
            VariantName::InteractAlign => "InteRACT_Align",
            VariantName::OnlyFineTuned => "OnlyFineTuned",
        }
    }

    pub fn spec(self) -> VariantSpec {
        use QuerySource::*;
        let (uses_partner_history, query_source, align_enabled) = match self {
            VariantName::Marginal => (false, LastObservedHumanPose, false),
            VariantName::MarginalHist => (true, LastObservedHumanPose, false),
            VariantName::Interact | VariantName::OnlyFineTuned => (true, PartnerFutureAction, false),
            VariantName::InteractAlign => (true, PartnerFutureAction, true),
        };
        VariantSpec {
            name: self,
            uses_partner_history,
            query_source,
            align_enabled,
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VariantName::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    LastObservedHumanPose,
    PartnerFutureAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: VariantName,
    pub uses_partner_history: bool,
    pub query_source: QuerySource,
    pub align_enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: usize,
    pub human_dim: usize,
    pub robot_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub variant: VariantName,
    /// Seed for weight initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: HORIZON,
            human_dim: HUMAN_DIM,
            robot_dim: ROBOT_DIM,
            embed_dim: 32,
            layers: 3,
            heads: 4,
            variant: VariantName::Interact,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.human_dim != HUMAN_DIM || self.robot_dim != ROBOT_DIM {
            return Err(ModelError::Config(format!(
                "pose dims are fixed at {HUMAN_DIM}/{ROBOT_DIM}, got {}/{}",
                self.human_dim, self.robot_dim
            )));
        }
        if self.horizon == 0 || self.embed_dim == 0 || self.layers == 0 {
            return Err(ModelError::Config(
                "horizon, embed_dim and layers must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "{} heads do not divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (d, j, e, t, l) = (
            self.human_dim,
            self.robot_dim,
            self.embed_dim,
            self.horizon,
            self.layers,
        );
        let embeddings = 2 * (d + 1) * e + 2 * (j + 1) * e;
        let encoders = 2 * l * (12 * e * e + 12 * e) + 2 * 2 * e;
        let decoder = l * (16 * e * e + 17 * e) + 2 * e;
        let expansion = e * t * e + t * e + e * e + e;
        let head = e * d + d;
        embeddings + encoders + decoder + expansion + head
    }
}

/// Centered, DCT-transformed model inputs for a homogeneous batch.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub size: usize,
    pub partner_kind: AgentKind,
    human_hist: Tensor<F>,
    partner_hist: Tensor<F>,
    last_human: Tensor<F>,
    action: Tensor<F>,
    /// Centered targets `[B,T,d]`, present when every window has one.
    pub target: Option<Tensor<F>>,
    pub offsets: Vec<SceneOffset>,
    frame_hz: f64,
}

impl<F: Scalar> Batch<F> {
    pub fn from_windows(windows: &[&SceneWindow], horizon: usize) -> Result<Self, ModelError> {
        let first = windows.first().ok_or(ModelError::EmptyBatch)?;
        let partner_kind = first.partner_kind();
        let b = windows.len();
        let pd = first.partner_history.dim();
        let (mut hh, mut ph, mut last, mut act, mut tgt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut offsets = Vec::with_capacity(b);
        let mut all_targets = true;
        let cast = |v: &[f64], out: &mut Vec<F>| out.extend(v.iter().map(|x| F::lit(*x)));
        for w in windows {
            if w.horizon() != horizon {
                return Err(ModelError::Horizon {
                    expected: horizon,
                    got: w.horizon(),
                });
            }
            if w.partner_kind() != partner_kind {
                return Err(ModelError::MixedPartners);
            }
            let (c, off) = center_scene(w);
            offsets.push(off);
            cast(&dct_time_axis(c.human_history.data(), horizon, HUMAN_DIM), &mut hh);
            cast(&dct_time_axis(c.partner_history.data(), horizon, pd), &mut ph);
            cast(c.human_history.frame(horizon - 1), &mut last);
            cast(c.partner_future_action.coords(), &mut act);
            match &c.target_future {
                Some(t) => cast(t.data(), &mut tgt),
                None => all_targets = false,
            }
        }
        Ok(Self {
            size: b,
            partner_kind,
            human_hist: Tensor::new(&[b, horizon, HUMAN_DIM], hh)?,
            partner_hist: Tensor::new(&[b, horizon, pd], ph)?,
            last_human: Tensor::new(&[b, 1, HUMAN_DIM], last)?,
            action: Tensor::new(&[b, 1, pd], act)?,
            target: if all_targets {
                Some(Tensor::new(&[b, horizon, HUMAN_DIM], tgt)?)
            } else {
                None
            },
            offsets,
            frame_hz: first.human_history.frame_hz(),
        })
    }
}

/// Encoder memory for one window, `[3T, D]` (or `[2T, D]` without partner).
#[derive(Clone, Debug)]
pub struct ContextEncoding<F> {
    pub memory: Tensor<F>,
}

/// Embedded query for one window.
#[derive(Clone, Debug)]
pub struct ActionQuery<F> {
    pub embedding: Tensor<F>,
    pub raw: Pose,
}

/// Which pair of embedding layers an alignment term ties together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignTarget {
    Hist,
    Fut,
}

#[derive(Clone, Debug)]
struct Network {
    hist_h: Linear,
    hist_r: Linear,
    fut_h: Linear,
    fut_r: Linear,
    local: Vec<EncoderLayer>,
    local_norm: LayerNorm,
    global: Vec<EncoderLayer>,
    global_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    expand: Linear,
    step: Linear,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct InteractModel<F> {
    cfg: ModelConfig,
    spec: VariantSpec,
    store: ParameterStore<F>,
    net: Network,
    pe: Tensor<F>,
    pe_double: Tensor<F>,
    idct: Vec<F>,
}

/// Input embedding rescaled to unit RMS, so two embeddings with the same
/// direction feed the encoders identically.
fn embed<F: Scalar>(tape: &mut Tape<F>, s: &ParameterStore<F>, layer: &Linear, x: Var) -> Result<Var, DiffError> {
    let y = layer.forward(tape, s, x)?;
    tape.rms_norm(y, F::lit(EMBED_EPS))
}

const EMBED_EPS: f64 = 1e-6;

impl<F: Scalar> InteractModel<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut s = ParameterStore::new();
        let (d, j, e, h) = (cfg.human_dim, cfg.robot_dim, cfg.embed_dim, cfg.heads);
        let rng = &mut rng;
        let hist_h = Linear::new(&mut s, "hist_h", d, e, rng);
        let hist_r = Linear::new(&mut s, "hist_r", j, e, rng);
        let fut_h = Linear::new(&mut s, "fut_h", d, e, rng);
        let fut_r = Linear::new(&mut s, "fut_r", j, e, rng);
        let local = (0..cfg.layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("local.{i}"), e, h, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let local_norm = LayerNorm::new(&mut s, "local.norm", e);
        let global = (0..cfg.layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("global.{i}"), e, h, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let global_norm = LayerNorm::new(&mut s, "global.norm", e);
        let decoder = (0..cfg.layers)
            .map(|i| DecoderLayer::new(&mut s, &format!("decoder.{i}"), e, h, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let decoder_norm = LayerNorm::new(&mut s, "decoder.norm", e);
        let expand = Linear::new(&mut s, "expand", e, cfg.horizon * e, rng);
        let step = Linear::new(&mut s, "step", e, e, rng);
        let head = Linear::new(&mut s, "head", e, d, rng);
        let t = cfg.horizon;
        let basis = dct_matrix(t);
        let mut idct = vec![F::zero(); t * t];
        for k in 0..t {
            for i in 0..t {
                idct[i * t + k] = F::lit(basis[k * t + i]);
            }
        }
        Ok(Self {
            spec: cfg.variant.spec(),
            pe: sinusoid_table(t, e),
            pe_double: sinusoid_table(2 * t, e),
            cfg,
            store: s,
            net: Network {
                hist_h,
                hist_r,
                fut_h,
                fut_r,
                local,
                local_norm,
                global,
                global_norm,
                decoder,
                decoder_norm,
                expand,
                step,
                head,
            },
            idct,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> VariantSpec {
        self.spec
    }

    /// Switches routing (e.g. a fine-tuned copy of a pre-trained model).
    pub fn set_variant(&mut self, v: VariantName) {
        self.cfg.variant = v;
        self.spec = v.spec();
    }

    pub fn store(&self) -> &ParameterStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<F> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same architecture and weights in another float type.
    pub fn cast<G: Scalar>(&self) -> InteractModel<G> {
        let mut m = InteractModel::<G>::new(self.cfg.clone()).expect("config already validated");
        m.store = self.store.cast();
        m
    }

    pub fn batch(&self, windows: &[&SceneWindow]) -> Result<Batch<F>, ModelError> {
        Batch::from_windows(windows, self.cfg.horizon)
    }

    fn stack(
        &self,
        tape: &mut Tape<F>,
        s: &ParameterStore<F>,
        layers: &[EncoderLayer],
        norm: &LayerNorm,
        mut x: Var,
    ) -> Result<Var, DiffError> {
        for l in layers {
            x = l.forward(tape, s, x)?;
        }
        norm.forward(tape, s, x)
    }

    /// Memory `[B, 3T, D]`, or `[B, 2T, D]` when partner history is unused.
    pub fn encode_with(&self, tape: &mut Tape<F>, s: &ParameterStore<F>, batch: &Batch<F>) -> Result<Var, ModelError> {
        let n = &self.net;
        let hh = tape.constant(batch.human_hist.clone());
        let eh = embed(tape, s, &n.hist_h, hh)?;
        let local_in = tape.add_const(eh, &self.pe)?;
        let local = self.stack(tape, s, &n.local, &n.local_norm, local_in)?;
        let global_in = if self.spec.uses_partner_history {
            let ph = tape.constant(batch.partner_hist.clone());
            let ep = match batch.partner_kind {
                AgentKind::Human => embed(tape, s, &n.hist_h, ph)?,
                AgentKind::Robot => embed(tape, s, &n.hist_r, ph)?,
            };
            let joint = tape.concat_seq(eh, ep)?;
            tape.add_const(joint, &self.pe_double)?
        } else {
            local_in
        };
        let global = self.stack(tape, s, &n.global, &n.global_norm, global_in)?;
        Ok(tape.concat_seq(local, global)?)
    }

    /// Query `[B, 1, D]`.
    pub fn query_with(&self, tape: &mut Tape<F>, s: &ParameterStore<F>, batch: &Batch<F>) -> Result<Var, ModelError> {
        let n = &self.net;
        let v = match self.spec.query_source {
            QuerySource::LastObservedHumanPose => {
                let x = tape.constant(batch.last_human.clone());
                embed(tape, s, &n.fut_h, x)?
            }
            QuerySource::PartnerFutureAction => {
                let x = tape.constant(batch.action.clone());
                match batch.partner_kind {
                    AgentKind::Human => embed(tape, s, &n.fut_h, x)?,
                    AgentKind::Robot => embed(tape, s, &n.fut_r, x)?,
                }
            }
        };
        Ok(v)
    }

    /// Centered forecast `[B, T, d]`.
    pub fn forward_with(&self, tape: &mut Tape<F>, s: &ParameterStore<F>, batch: &Batch<F>) -> Result<Var, ModelError> {
        let n = &self.net;
        let (b, t, e) = (batch.size, self.cfg.horizon, self.cfg.embed_dim);
        let memory = self.encode_with(tape, s, batch)?;
        let mut q = self.query_with(tape, s, batch)?;
        for layer in &n.decoder {
            q = layer.forward(tape, s, q, memory)?;
        }
        let q = n.decoder_norm.forward(tape, s, q)?;
        let z = tape.reshape(q, &[b, e])?;
        let z = n.expand.forward(tape, s, z)?;
        let z = tape.relu(z)?;
        let z = tape.reshape(z, &[b, t, e])?;
        let z = n.step.forward(tape, s, z)?;
        let coeffs = n.head.forward(tape, s, z)?;
        Ok(tape.time_mix(coeffs, &self.idct)?)
    }

    pub fn forward(&self, tape: &mut Tape<F>, batch: &Batch<F>) -> Result<Var, ModelError> {
        self.forward_with(tape, &self.store, batch)
    }

    /// Embeds paired robot `[N, j]` and human `[N, d]` poses with the
    /// matching pair of layers.
    pub fn align_embeddings_with(
        &self,
        tape: &mut Tape<F>,
        s: &ParameterStore<F>,
        robot: &Tensor<F>,
        human: &Tensor<F>,
        which: AlignTarget,
    ) -> Result<(Var, Var), ModelError> {
        let (lr, lh) = match which {
            AlignTarget::Hist => (&self.net.hist_r, &self.net.hist_h),
            AlignTarget::Fut => (&self.net.fut_r, &self.net.fut_h),
        };
        let r = tape.constant(robot.clone());
        let h = tape.constant(human.clone());
        Ok((embed(tape, s, lr, r)?, embed(tape, s, lh, h)?))
    }

    pub fn encode_context(&self, window: &SceneWindow) -> Result<ContextEncoding<F>, ModelError> {
        let batch = self.batch(&[window])?;
        let mut tape = Tape::new();
        let m = self.encode_with(&mut tape, &self.store, &batch)?;
        let v = tape.value(m);
        let rows = v.shape()[1];
        Ok(ContextEncoding {
            memory: v.clone().reshaped(&[rows, self.cfg.embed_dim])?,
        })
    }

    pub fn build_query(&self, window: &SceneWindow) -> Result<ActionQuery<F>, ModelError> {
        let (centered, _) = center_scene(window);
        let raw = match self.spec.query_source {
            QuerySource::LastObservedHumanPose => centered.human_history.last_pose(),
            QuerySource::PartnerFutureAction => centered.partner_future_action,
        };
        let batch = self.batch(&[window])?;
        let mut tape = Tape::new();
        let q = self.query_with(&mut tape, &self.store, &batch)?;
        Ok(ActionQuery {
            embedding: tape.value(q).clone().reshaped(&[1, self.cfg.embed_dim])?,
            raw,
        })
    }

    /// World-frame forecasts for a batch.
    pub fn predict_batch(&self, windows: &[&SceneWindow]) -> Result<Vec<PoseTrajectory>, ModelError> {
        let batch = self.batch(windows)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &batch)?;
        let t = self.cfg.horizon;
        let per = t * HUMAN_DIM;
        tape.value(out)
            .to_f64()
            .chunks(per)
            .zip(&batch.offsets)
            .map(|(c, off)| {
                let traj = PoseTrajectory::new(crate::pose::JointLayout::HUMAN, c.to_vec(), batch.frame_hz)?;
                Ok(uncenter(&traj, *off))
            })
            .collect()
    }

    pub fn predict_intent(&self, window: &SceneWindow) -> Result<PoseTrajectory, ModelError> {
        Ok(self.predict_batch(&[window])?.remove(0))
    }
}
