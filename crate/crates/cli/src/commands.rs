use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use interact::dataset::{
    build_paired_set, compose_synthetic_pair, gen_conflict_reach, gen_teleop_sessions, load_episode, read_dataset,
    save_episode, split_episodes, windows_for, write_dataset, Agent, Dataset, Episode, PairedPoseDataset, SplitSpec,
    Splits, TrainingWindow,
};
use interact::eval::{aggregate, error_trace, evaluate_raw, table_svg, trace_svg, write_raw_csv, Forecaster, Labeled};
use interact::model::{InteractModel, VariantName};
use interact::pose::{AgentKind, JointLayout, Pose, PoseTrajectory, SceneWindow, CANONICAL_HZ};
use interact::retarget::{retarget_trajectory, MarkerLayout, Side};
use interact::training::{
    append_metrics_csv, load_checkpoint, save_checkpoint, Checkpoint, Stage, TrainConfig, Trainer,
};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{Command, RunConfig};
use crate::manifest::RunManifest;
use crate::verify;

/// Offset between the human-human and human-robot generator seeds, so the
/// two synthetic sets never share an episode.
const HR_SEED_OFFSET: u64 = 1_000_000;

/// Files and directories the run reads, for hashing into the manifest.
pub fn inputs(cmd: Command, cfg: &RunConfig, config_file: Option<&Path>) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = config_file.map(Path::to_path_buf).into_iter().collect();
    match cmd {
        Command::Synth => v.extend(cfg.synth.compose.iter().cloned()),
        Command::Pretrain => v.extend(cfg.data.dir.clone()),
        Command::Finetune => {
            v.extend(cfg.data.dir.clone());
            v.extend(cfg.train.init.clone());
        }
        Command::Eval => {
            v.extend(cfg.data.dir.clone());
            v.extend(cfg.eval.checkpoints.iter().cloned());
        }
        Command::Predict => {
            v.extend(cfg.predict.checkpoint.clone());
            v.extend(cfg.predict.window.clone());
        }
        Command::Retarget => v.extend(cfg.retarget.episode.clone()),
        Command::Verify => {}
    }
    v
}

pub fn execute(cmd: Command, cfg: &RunConfig, m: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::Synth => synth(cfg, m),
        Command::Pretrain => pretrain(cfg, m),
        Command::Finetune => finetune(cfg, m),
        Command::Eval => eval(cfg, m),
        Command::Predict => predict(cfg, m),
        Command::Retarget => retarget(cfg, m),
        Command::Verify => run_verify(cfg, m),
    }
}

fn out_dir(cfg: &RunConfig) -> &Path {
    &cfg.output.dir
}

fn write_json(path: &Path, value: &Value, m: &mut RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    m.output(path)
}

fn stamped(m: &RunManifest, mut body: Value) -> Value {
    body["run"] = m.stamp();
    body
}

fn synth(cfg: &RunConfig, m: &mut RunManifest) -> Result<()> {
    let out = out_dir(cfg);
    if !cfg.synth.compose.is_empty() {
        for (i, pair) in cfg.synth.compose.chunks(2).enumerate() {
            let a = load_episode(&pair[0])?;
            let b = load_episode(&pair[1])?;
            let ep = compose_synthetic_pair(&a, &b, &cfg.synth_config(cfg.seed.wrapping_add(i as u64)))?;
            let path = out.join(format!("{}.json", file_stem(&ep.id)));
            save_episode(&ep, &path)?;
            m.output(&path)?;
            println!("composed {} ({} frames)", ep.id, ep.num_frames());
        }
        return Ok(());
    }
    let [a, b, c] = cfg.synth.split;
    let spec = SplitSpec {
        ratios: (a, b, c),
        seed: cfg.seed,
    };
    if cfg.synth.episodes > 0 {
        let eps = gen_conflict_reach(&cfg.synth_config(cfg.seed), cfg.synth.episodes, AgentKind::Human)?;
        let splits = split_episodes(eps, &spec).context("human-human split")?;
        report_splits("hh", &splits);
        let dir = out.join("hh");
        write_dataset(
            &dir,
            &Dataset {
                splits,
                teleop: Vec::new(),
            },
        )?;
        m.output(&dir.join("manifest.json"))?;
    }
    if cfg.synth.teleop_sessions > 0 {
        let sessions = gen_teleop_sessions(
            &cfg.synth_config(cfg.seed.wrapping_add(HR_SEED_OFFSET)),
            cfg.synth.teleop_sessions,
        )?;
        let s = split_episodes(sessions, &spec).context("human-robot split")?;
        // Teleoperator recordings of training sessions only; held-out
        // sessions stay unseen by alignment.
        let teleop = s.train.iter().map(|t| t.teleop.clone()).collect();
        let pick = |v: Vec<interact::dataset::TeleopSession>| v.into_iter().map(|t| t.interaction).collect();
        let splits = Splits {
            train: pick(s.train),
            val: pick(s.val),
            test: pick(s.test),
        };
        report_splits("hr", &splits);
        let dir = out.join("hr");
        write_dataset(&dir, &Dataset { splits, teleop })?;
        m.output(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn report_splits(name: &str, s: &Splits<Episode>) {
    println!(
        "{name}: {} train, {} val, {} test episodes",
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data.dir.as_ref().expect("data.dir is required");
    read_dataset(dir).with_context(|| format!("cannot load dataset {}", dir.display()))
}

fn scenes(eps: &[Episode], cfg: &RunConfig) -> Result<Vec<SceneWindow>> {
    Ok(windows_for(eps, cfg.data.stride, cfg.model.horizon)?
        .into_iter()
        .map(|w| w.scene)
        .collect())
}

fn train_loop(
    model: &mut InteractModel<f32>,
    ds: &Dataset,
    cfg: &RunConfig,
    tcfg: &TrainConfig,
    paired: Option<&PairedPoseDataset>,
    m: &mut RunManifest,
) -> Result<()> {
    let train = scenes(&ds.splits.train, cfg)?;
    let val = scenes(&ds.splits.val, cfg)?;
    if train.is_empty() {
        bail!("empty split: no training windows");
    }
    tcfg.validate(paired)?;
    let out = out_dir(cfg);
    let log = out.join("train_metrics.csv");
    if log.exists() {
        fs::remove_file(&log).with_context(|| format!("cannot replace {}", log.display()))?;
    }
    eprintln!(
        "{}: {} ({} params), {} train / {} val windows",
        tcfg.stage,
        model.config().variant,
        model.num_params(),
        train.len(),
        val.len()
    );
    let mut trainer = Trainer::new(tcfg.clone(), model);
    while trainer.epoch < tcfg.epochs {
        trainer.run_epoch(model, &train, &val, paired)?;
        let row = trainer.history.last().expect("epoch recorded").clone();
        append_metrics_csv(&log, std::slice::from_ref(&row))?;
        eprintln!(
            "epoch {:>3}  train {:.5}  val_fde {}  lr {:e}",
            row.epoch,
            row.train_loss,
            row.val_fde.map_or("-".into(), |v| format!("{v:.5}")),
            row.lr
        );
    }
    let report = trainer.finish(model);
    m.output(&log)?;
    let ckpt_path = out.join("model.ckpt");
    save_checkpoint(
        &Checkpoint::capture(model, Some(tcfg), None, None, tcfg.epochs),
        &ckpt_path,
    )?;
    m.output(&ckpt_path)?;
    let summary = stamped(
        m,
        json!({
            "variant": model.config().variant,
            "stage": tcfg.stage,
            "epochs": tcfg.epochs,
            "best_epoch": report.best_epoch,
            "best_val_fde": report.best_val_fde,
            "final_train_loss": report.epochs.last().map(|e| e.train_loss),
        }),
    );
    write_json(&out.join("train_summary.json"), &summary, m)?;
    match report.best_val_fde {
        Some(f) => println!("best validation FDE {f:.5} at epoch {}", report.best_epoch.unwrap_or(0)),
        None => println!("trained {} epochs (no validation windows)", tcfg.epochs),
    }
    Ok(())
}

fn pretrain(cfg: &RunConfig, m: &mut RunManifest) -> Result<()> {
    let ds = load_data(cfg)?;
    let variant = cfg.model.variant.unwrap_or(VariantName::Interact);
    let mut model = InteractModel::<f32>::new(cfg.model_config(variant))?;
    train_loop(&mut model, &ds, cfg, &cfg.train_config(Stage::Pretrain), None, m)
}

fn finetune(cfg: &RunConfig, m: &mut RunManifest) -> Result<()> {
    let ds = load_data(cfg)?;
    let mut model = match &cfg.train.init {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("cannot load {}", path.display()))?;
            let mut model = ckpt.to_model()?;
            let default = if cfg.train.align {
                VariantName::InteractAlign
            } else {
                VariantName::Interact
            };
            model.set_variant(cfg.model.variant.unwrap_or(default));
            model
        }
        None => {
            let variant = cfg.model.variant.unwrap_or(VariantName::OnlyFineTuned);
            InteractModel::<f32>::new(cfg.model_config(variant))?
        }
    };
    let paired = if cfg.train.align {
        let mut p = PairedPoseDataset::default();
        for ep in &ds.teleop {
            p.extend(build_paired_set(ep)?);
        }
        eprintln!("alignment: {} pose pairs from {} recordings", p.len(), ds.teleop.len());
        Some(p)
    } else {
        None
    };
    train_loop(
        &mut model,
        &ds,
        cfg,
        &cfg.train_config(Stage::Finetune),
        paired.as_ref(),
        m,
    )
}

fn split_of<'a>(ds: &'a Dataset, name: &str) -> &'a [Episode] {
    match name {
        "train" => &ds.splits.train,
        "val" => &ds.splits.val,
        _ => &ds.splits.test,
    }
}

fn eval(cfg: &RunConfig, m: &mut RunManifest) -> Result<()> {
    let ds = load_data(cfg)?;
    let eps = split_of(&ds, &cfg.eval.split);
    let windows: Vec<TrainingWindow> = windows_for(eps, cfg.data.stride, cfg.model.horizon)?;
    if windows.is_empty() {
        bail!("empty split: no {} windows to evaluate", cfg.eval.split);
    }
    let mut models = Vec::new();
    for path in &cfg.eval.checkpoints {
        let model = load_checkpoint(path)
            .with_context(|| format!("cannot load {}", path.display()))?
            .to_model()?;
        models.push((model.config().variant.to_string(), path, model));
    }
    // Two checkpoints of the same variant are told apart by file name.
    let labels: Vec<String> = models
        .iter()
        .map(|(v, path, _)| {
            if models.iter().filter(|(o, _, _)| o == v).count() > 1 {
                format!(
                    "{v}:{}",
                    path.file_stem()
                        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
                )
            } else {
                v.clone()
            }
        })
        .collect();
    let labeled: Vec<Labeled<'_, InteractModel<f32>>> = models
        .iter()
        .zip(&labels)
        .map(|((_, _, model), l)| Labeled(l.as_str(), model))
        .collect();
    let forecasters: Vec<&dyn Forecaster> = labeled.iter().map(|l| l as &dyn Forecaster).collect();

    let mut raw = Vec::new();
    for f in &forecasters {
        raw.extend(evaluate_raw(*f, &windows)?);
    }
    let table = aggregate(&raw)?;
    let out = out_dir(cfg);
    let metrics = out.join("metrics.csv");
    table.write_csv(&metrics)?;
    m.output(&metrics)?;
    if cfg.eval.dump_raw {
        let p = out.join("raw_fde.csv");
        write_raw_csv(&p, &raw)?;
        m.output(&p)?;
    }
    if cfg.eval.svg {
        let p = out.join("metrics.svg");
        fs::write(&p, table_svg(&table))?;
        m.output(&p)?;
    }
    let long_enough = eps.iter().filter(|e| e.num_frames() >= 2 * cfg.model.horizon);
    for ep in long_enough.take(cfg.eval.traces) {
        let trace = error_trace(&forecasters, ep, cfg.model.horizon)?;
        let p = trace.write_csv(out)?;
        m.output(&p)?;
        if cfg.eval.svg {
            let svg = p.with_extension("svg");
            fs::write(&svg, trace_svg(&trace))?;
            m.output(&svg)?;
        }
    }
    print!("{}", table.to_csv()?);
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowFile {
    human_history: Vec<Vec<f64>>,
    partner_history: Vec<Vec<f64>>,
    partner_future_action: Vec<f64>,
    #[serde(default)]
    target_future: Option<Vec<Vec<f64>>>,
}

fn trajectory(field: &str, rows: &[Vec<f64>], layout: JointLayout) -> Result<PoseTrajectory> {
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != layout.total_dim()) {
        bail!("{field}[{i}] has {} values, expected {}", r.len(), layout.total_dim());
    }
    PoseTrajectory::new(layout, rows.concat(), CANONICAL_HZ).with_context(|| field.to_string())
}

fn parse_window(path: &Path) -> Result<SceneWindow> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let w: WindowFile =
        serde_json::from_str(&text).with_context(|| format!("{} is not a valid window file", path.display()))?;
    let partner = match w.partner_future_action.len() {
        27 => JointLayout::HUMAN,
        6 => JointLayout::ROBOT,
        n => bail!("partner_future_action has {n} values; expected 27 (human) or 6 (robot)"),
    };
    let target = w
        .target_future
        .as_deref()
        .map(|t| trajectory("target_future", t, JointLayout::HUMAN))
        .transpose()?;
    Ok(SceneWindow::new(
        trajectory("human_history", &w.human_history, JointLayout::HUMAN)?,
        trajectory("partner_history", &w.partner_history, partner)?,
        Pose::new(partner, w.partner_future_action.clone()).context("partner_future_action")?,
        target,
    )?)
}

fn predict(cfg: &RunConfig, m: &mut RunManifest) -> Result<()> {
    let ckpt = cfg.predict.checkpoint.as_ref().expect("required");
    let model = load_checkpoint(ckpt)
        .with_context(|| format!("cannot load {}", ckpt.display()))?
        .to_model()?;
    let window = parse_window(cfg.predict.window.as_ref().expect("required"))?;
    let pred = model.predict_intent(&window)?;
    let rows: Vec<&[f64]> = (0..pred.len()).map(|i| pred.frame(i)).collect();
    let mut body = json!({ "variant": model.config().variant, "forecast": rows });
    if let Some(t) = &window.target_future {
        body["fde"] = json!(interact::pose::fde(&pred, t)?);
    }
    let body = stamped(m, body);
    write_json(&out_dir(cfg).join("forecast.json"), &body, m)?;
    println!("{}", serde_json::to_string(&body).expect("json value serializes"));
    Ok(())
}

fn retarget(cfg: &RunConfig, m: &mut RunManifest) -> Result<()> {
    let r = &cfg.retarget;
    let ep = load_episode(r.episode.as_ref().expect("required"))?;
    let human = ep
        .agents
        .iter()
        .find(|a| a.layout.kind() == AgentKind::Human)
        .ok_or_else(|| anyhow!("episode {} has no human agent", ep.id))?;
    let side: Side = r.side.parse().map_err(|e: String| anyhow!(e))?;
    let layout = MarkerLayout::new(r.hand_offset, r.wrist_offset)?;
    let robot = retarget_trajectory(&human.trajectory(ep.frame_hz)?, side, &layout)?;
    let out_ep = Episode {
        id: format!("{}-robot", ep.id),
        task: ep.task.clone(),
        frame_hz: ep.frame_hz,
        source: ep.source,
        agents: vec![human.clone(), Agent::from_trajectory("robot", &robot)],
        annotations: ep.annotations.clone(),
    };
    out_ep.validate()?;
    let out = out_dir(cfg);
    let ep_path = out.join(format!("{}.json", file_stem(&out_ep.id)));
    save_episode(&out_ep, &ep_path)?;
    m.output(&ep_path)?;
    let paired = build_paired_set(&out_ep)?;
    let pairs: Vec<Value> = paired
        .pairs
        .iter()
        .map(|p| json!({ "human": p.human.coords(), "robot": p.robot.coords() }))
        .collect();
    let body = stamped(
        m,
        json!({ "source_episode_ids": paired.source_episode_ids, "pairs": pairs }),
    );
    write_json(&out.join("pairs.json"), &body, m)?;
    println!("retargeted {} frames of {} ({} side)", robot.len(), ep.id, r.side);
    Ok(())
}

fn run_verify(cfg: &RunConfig, m: &mut RunManifest) -> Result<()> {
    let report = verify::run();
    for c in &report {
        println!(
            "[{}] {}: {:.3e} (threshold {:.0e})",
            if c.pass() { "ok" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    let body = stamped(m, json!({ "checks": report }));
    write_json(&out_dir(cfg).join("verify.json"), &body, m)?;
    let failed: Vec<&str> = report.iter().filter(|c| !c.pass()).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("verification failed: {}", failed.join(", "));
    }
    Ok(())
}
