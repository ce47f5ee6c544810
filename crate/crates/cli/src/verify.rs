//! Build self-test: finite-difference gradient checks, DCT roundtrips and
//! translation equivariance. Inputs come from fixed seeds so results do not
//! depend on the run seed.

use interact::dataset::{build_paired_set, gen_teleop_sessions, windows_for, PosePair, SynthConfig};
use interact::diff::nn::{attention, DecoderLayer, EncoderLayer, MultiHeadAttention};
use interact::diff::{grad_check, grad_check_store, DiffError, GradCheckReport, ParameterStore, Tape, Tensor, Var};
use interact::model::{InteractModel, ModelConfig, ModelError, VariantName};
use interact::pose::{dct_time_axis, idct_time_axis, AgentKind, JointLayout, PoseTrajectory, SceneWindow};
use interact::training::{objective, LossWeights, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const H: f64 = 1e-5;
pub const GRAD_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    pub fn pass(&self) -> bool {
        self.value.is_finite() && self.value <= self.threshold
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..t.value(y).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    t.weighted_sum(y, &w)
}

fn op_reports(r: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>, DiffError> {
    let mut out = Vec::new();
    let i = [rand_t(r, &[3, 4]), rand_t(r, &[4, 5]), rand_t(r, &[5])];
    out.push(grad_check("linear", &i, H, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        project(t, y, 1)
    })?);
    let i = [rand_t(r, &[3, 5])];
    out.push(grad_check("softmax", &i, H, |t, v| {
        let y = t.softmax(v[0])?;
        project(t, y, 2)
    })?);
    let i = [rand_t(r, &[3, 6]), rand_t(r, &[6]), rand_t(r, &[6])];
    out.push(grad_check("layer_norm", &i, H, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, 3)
    })?);
    let i = [rand_t(r, &[3, 6])];
    out.push(grad_check("rms_norm", &i, H, |t, v| {
        let y = t.rms_norm(v[0], 1e-6)?;
        project(t, y, 4)
    })?);
    let i = [rand_t(r, &[2, 2, 4]), rand_t(r, &[2, 5, 4]), rand_t(r, &[2, 5, 4])];
    out.push(grad_check("attention", &i, H, |t, v| {
        let y = attention(t, v[0], v[1], v[2], 2)?;
        project(t, y, 5)
    })?);
    let mut s = ParameterStore::new();
    let mha = MultiHeadAttention::new(&mut s, "mha", 8, 2, r)?;
    let (q, c) = (rand_t(r, &[2, 3, 8]), rand_t(r, &[2, 4, 8]));
    out.push(grad_check_store("multi_head_attention", &mut s, H, |t, s| {
        let (q, c) = (t.constant(q.clone()), t.constant(c.clone()));
        let y = mha.forward(t, s, q, c)?;
        project(t, y, 6)
    })?);
    let mut s = ParameterStore::new();
    let enc = EncoderLayer::new(&mut s, "enc", 8, 2, r)?;
    let dec = DecoderLayer::new(&mut s, "dec", 8, 2, r)?;
    let (x, q) = (rand_t(r, &[2, 3, 8]), rand_t(r, &[2, 1, 8]));
    out.push(grad_check_store("encoder+decoder", &mut s, H, |t, s| {
        let x = t.constant(x.clone());
        let mem = enc.forward(t, s, x)?;
        let q = t.constant(q.clone());
        let y = dec.forward(t, s, q, mem)?;
        project(t, y, 7)
    })?);
    Ok(out)
}

/// Small model through the full objective, alignment terms included.
fn model_report() -> Result<GradCheckReport, String> {
    let s = |e: &dyn std::fmt::Display| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = InteractModel::<f64>::new(ModelConfig {
        horizon: 4,
        embed_dim: 8,
        layers: 1,
        heads: 2,
        variant: VariantName::InteractAlign,
        ..ModelConfig::default()
    })
    .map_err(|e| s(&e))?;
    let sessions = gen_teleop_sessions(&SynthConfig::default(), 1).map_err(|e| s(&e))?;
    let ws: Vec<SceneWindow> = windows_for(&[sessions[0].interaction.clone()], 20, 4)
        .map_err(|e| s(&e))?
        .into_iter()
        .take(2)
        .map(|w| w.scene)
        .collect();
    let mut batch = m.batch(&ws.iter().collect::<Vec<_>>()).map_err(|e| s(&e))?;
    let mut t0 = Tape::new();
    let out = m.forward(&mut t0, &batch).map_err(|e| s(&e))?;
    let near = t0
        .value(out)
        .data()
        .iter()
        .map(|v| v + rng.gen_range(-0.05..0.05))
        .collect();
    batch.target = Some(Tensor::new(t0.shape(out), near).map_err(|e| s(&e))?);
    let paired = build_paired_set(&sessions[0].teleop).map_err(|e| s(&e))?;
    let pairs: Vec<&PosePair> = paired.pairs.iter().step_by(16).collect();
    let mut store = m.store().clone();
    grad_check_store("model+objective", &mut store, H, |tape, st| {
        objective(tape, &m, st, &batch, Some(&pairs), &LossWeights::default())
            .map(|(total, _)| total)
            .map_err(|e| match e {
                TrainError::Diff(d) | TrainError::Model(ModelError::Diff(d)) => d,
                _ => DiffError::NonFinite("objective"),
            })
    })
    .map_err(|e| s(&e))
}

fn grad_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ops = match op_reports(&mut rng) {
        Ok(reports) => {
            let worst = reports
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .expect("at least one op");
            Check {
                name: "grad-check max rel error (ops)".into(),
                value: worst.max_rel_error,
                threshold: GRAD_THRESHOLD,
                detail: format!("{} ops, worst {}", reports.len(), worst.op),
            }
        }
        Err(e) => failed("grad-check max rel error (ops)", GRAD_THRESHOLD, e.to_string()),
    };
    let model = match model_report() {
        Ok(r) => Check {
            name: "grad-check max rel error (model)".into(),
            value: r.max_rel_error,
            threshold: GRAD_THRESHOLD,
            detail: format!("{} coordinates, worst {}[{}]", r.coords_checked, r.worst.0, r.worst.1),
        },
        Err(e) => failed("grad-check max rel error (model)", GRAD_THRESHOLD, e),
    };
    vec![ops, model]
}

fn failed(name: &str, threshold: f64, detail: String) -> Check {
    Check {
        name: name.into(),
        value: f64::INFINITY,
        threshold,
        detail,
    }
}

fn dct_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut rt, mut norm) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c = dct_time_axis(&x, 15, 1);
        let back = idct_time_axis(&c, 15, 1);
        rt = rt.max(x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        norm = norm.max((nx - nc).abs());
    }
    vec![
        Check {
            name: "DCT roundtrip".into(),
            value: rt,
            threshold: 1e-9,
            detail: "1000 random length-15 signals".into(),
        },
        Check {
            name: "DCT norm preservation".into(),
            value: norm,
            threshold: 1e-9,
            detail: "1000 random length-15 signals".into(),
        },
    ]
}

fn random_traj(rng: &mut ChaCha8Rng, layout: JointLayout, base: [f64; 3]) -> PoseTrajectory {
    let data = (0..15 * layout.total_dim())
        .map(|i| base[i % 3] + rng.gen_range(-0.4..0.4))
        .collect();
    PoseTrajectory::new(layout, data, 15.0).expect("finite random frames")
}

fn equivariance_check() -> Check {
    let name = "translation equivariance";
    let m = match InteractModel::<f32>::new(ModelConfig::default()) {
        Ok(m) => m,
        Err(e) => return failed(name, 1e-6, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let kind = if i % 2 == 0 { AgentKind::Human } else { AgentKind::Robot };
        let base = [
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(0.5..1.5),
        ];
        let layout = JointLayout::for_kind(kind);
        let partner = random_traj(&mut rng, layout, base);
        let action = random_traj(&mut rng, layout, base).pose(0);
        let human = random_traj(&mut rng, JointLayout::HUMAN, base);
        let w = SceneWindow::new(human, partner, action, None).expect("consistent window");
        let v = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        ];
        let (a, b) = match (m.predict_intent(&w), m.predict_intent(&w.translated(v))) {
            (Ok(a), Ok(b)) => (a.translated(v), b),
            (Err(e), _) | (_, Err(e)) => return failed(name, 1e-6, e.to_string()),
        };
        worst = worst.max(
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        );
    }
    Check {
        name: name.into(),
        value: worst,
        threshold: 1e-6,
        detail: "20 random windows, f32 model".into(),
    }
}

pub fn run() -> Vec<Check> {
    let mut checks = grad_checks();
    checks.extend(dct_checks());
    checks.push(equivariance_check());
    checks
}
