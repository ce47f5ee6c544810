//! FDE tables, per-episode error traces and variant comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{make_windows_with_horizon, DatasetError, Episode, TrainingWindow};
use crate::diff::Scalar;
use crate::model::{InteractModel, ModelError};
use crate::pose::{fde, PoseError, PoseTrajectory, SceneWindow};

const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty split: no windows to evaluate")]
    Empty,
    #[error("window {0} has no ground-truth future")]
    MissingTarget(usize),
    #[error("episode {id} has {frames} frames, needs at least {needed}")]
    ShortEpisode { id: String, frames: usize, needed: usize },
    #[error("tables disagree on keys: {0}")]
    KeyMismatch(String),
    #[error("forecaster returned {got} predictions for {expected} windows")]
    Count { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that maps scene windows to world-frame forecasts.
pub trait Forecaster {
    fn label(&self) -> String;
    fn forecast(&self, windows: &[&SceneWindow]) -> Result<Vec<PoseTrajectory>, EvalError>;
}

impl<F: Scalar> Forecaster for InteractModel<F> {
    fn label(&self) -> String {
        self.config().variant.to_string()
    }

    fn forecast(&self, windows: &[&SceneWindow]) -> Result<Vec<PoseTrajectory>, EvalError> {
        Ok(self.predict_batch(windows)?)
    }
}

/// Renames a forecaster in tables and traces.
pub struct Labeled<'a, M: Forecaster + ?Sized>(pub &'a str, pub &'a M);

impl<M: Forecaster + ?Sized> Forecaster for Labeled<'_, M> {
    fn label(&self) -> String {
        self.0.to_string()
    }

    fn forecast(&self, windows: &[&SceneWindow]) -> Result<Vec<PoseTrajectory>, EvalError> {
        self.1.forecast(windows)
    }
}

/// FDE of one window, as dumped by `--dump-raw`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowFde {
    pub variant: String,
    pub episode_id: String,
    pub task: String,
    pub start_frame: usize,
    pub fde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub task: String,
    /// Window-weighted mean.
    pub mean_fde: f64,
    /// Population std of the per-episode means.
    pub std_fde: f64,
    pub n_episodes: usize,
    pub n_windows: usize,
    /// Mean of the per-episode means.
    #[serde(skip)]
    pub episode_mean_fde: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn get(&self, variant: &str, task: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.variant == variant && r.task == task)
    }

    pub fn merge(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    fn keys(&self) -> Vec<(String, String)> {
        let mut k: Vec<_> = self.rows.iter().map(|r| (r.variant.clone(), r.task.clone())).collect();
        k.sort();
        k
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Per-window FDE of `model` on `windows`, in window order.
pub fn evaluate_raw<M: Forecaster + ?Sized>(
    model: &M,
    windows: &[TrainingWindow],
) -> Result<Vec<WindowFde>, EvalError> {
    if windows.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = windows.iter().position(|w| w.scene.target_future.is_none()) {
        return Err(EvalError::MissingTarget(i));
    }
    let label = model.label();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(CHUNK) {
        let scenes: Vec<&SceneWindow> = chunk.iter().map(|w| &w.scene).collect();
        let preds = model.forecast(&scenes)?;
        if preds.len() != chunk.len() {
            return Err(EvalError::Count {
                expected: chunk.len(),
                got: preds.len(),
            });
        }
        for (w, p) in chunk.iter().zip(&preds) {
            let truth = w.scene.target_future.as_ref().expect("checked above");
            out.push(WindowFde {
                variant: label.clone(),
                episode_id: w.episode_id.clone(),
                task: w.task.clone(),
                start_frame: w.start_frame,
                fde: fde(p, truth)?,
            });
        }
    }
    Ok(out)
}

/// Groups raw FDEs by (variant, task). Sums run in input order, so the
/// result is reproducible from a dump.
pub fn aggregate(raw: &[WindowFde]) -> Result<MetricsTable, EvalError> {
    if raw.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups: BTreeMap<(&str, &str), Vec<&WindowFde>> = BTreeMap::new();
    for r in raw {
        groups.entry((&r.variant, &r.task)).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|((variant, task), rs)| {
            let mean = rs.iter().map(|r| r.fde).sum::<f64>() / rs.len() as f64;
            let mut per_ep: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for r in &rs {
                let e = per_ep.entry(&r.episode_id).or_default();
                e.0 += r.fde;
                e.1 += 1;
            }
            let ep_means: Vec<f64> = per_ep.values().map(|(s, n)| s / *n as f64).collect();
            let ep_mean = ep_means.iter().sum::<f64>() / ep_means.len() as f64;
            let var = ep_means.iter().map(|m| (m - ep_mean).powi(2)).sum::<f64>() / ep_means.len() as f64;
            MetricsRow {
                variant: variant.to_string(),
                task: task.to_string(),
                mean_fde: mean,
                std_fde: var.sqrt(),
                n_episodes: ep_means.len(),
                n_windows: rs.len(),
                episode_mean_fde: ep_mean,
            }
        })
        .collect();
    Ok(MetricsTable { rows })
}

pub fn evaluate<M: Forecaster + ?Sized>(model: &M, windows: &[TrainingWindow]) -> Result<MetricsTable, EvalError> {
    aggregate(&evaluate_raw(model, windows)?)
}

pub fn write_raw_csv(path: &Path, raw: &[WindowFde]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in raw {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_csv(path: &Path) -> Result<Vec<WindowFde>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// FDE over time for one episode, one series per forecaster.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTrace {
    pub episode_id: String,
    /// Last observed frame of each window.
    pub frames: Vec<usize>,
    pub series: Vec<(String, Vec<f64>)>,
    /// Event frames such as the partner's commit.
    pub annotations: BTreeMap<String, usize>,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    frame: usize,
    variant: &'a str,
    fde: f64,
    annotation: String,
}

impl ErrorTrace {
    pub fn annotation_at(&self, frame: usize) -> String {
        self.annotations
            .iter()
            .filter(|(_, &f)| f == frame)
            .map(|(k, _)| k.as_str())
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Mean of a series over frames at or after `from`.
    pub fn mean_from(&self, series: usize, from: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .frames
            .iter()
            .zip(&self.series[series].1)
            .filter(|(f, _)| **f >= from)
            .map(|(_, v)| *v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (i, &frame) in self.frames.iter().enumerate() {
            let annotation = self.annotation_at(frame);
            for (name, vals) in &self.series {
                w.serialize(TraceRecord {
                    frame,
                    variant: name,
                    fde: vals[i],
                    annotation: annotation.clone(),
                })?;
            }
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }

    /// Writes `trace_<episode>.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<PathBuf, EvalError> {
        let path = dir.join(format!("trace_{}.csv", sanitize(&self.episode_id)));
        std::fs::write(&path, self.to_csv()?)?;
        Ok(path)
    }
}

pub(crate) fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Slides a stride-1 window over `episode` and records each model's FDE.
pub fn error_trace(models: &[&dyn Forecaster], episode: &Episode, horizon: usize) -> Result<ErrorTrace, EvalError> {
    let needed = 2 * horizon;
    if episode.num_frames() < needed {
        return Err(EvalError::ShortEpisode {
            id: episode.id.clone(),
            frames: episode.num_frames(),
            needed,
        });
    }
    let windows = make_windows_with_horizon(episode, 1, horizon)?;
    let series = models
        .iter()
        .map(|m| {
            Ok((
                m.label(),
                evaluate_raw(*m, &windows)?.into_iter().map(|r| r.fde).collect(),
            ))
        })
        .collect::<Result<_, EvalError>>()?;
    let annotations = episode
        .annotations
        .iter()
        .filter(|(k, v)| (k.ends_with("_frame") || k.ends_with("_onset")) && **v >= 0)
        .map(|(k, v)| (k.clone(), *v as usize))
        .collect();
    Ok(ErrorTrace {
        episode_id: episode.id.clone(),
        frames: windows.iter().map(|w| w.start_frame + horizon - 1).collect(),
        series,
        annotations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: String,
    pub baseline: String,
    pub variant: String,
    /// Medians over tables.
    pub baseline_fde: f64,
    pub variant_fde: f64,
    /// Median of per-table `variant - baseline`.
    pub delta: f64,
    /// Median of per-table `100 (baseline - variant) / baseline`.
    pub improvement_pct: f64,
    pub n_tables: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn get(&self, task: &str, baseline: &str, variant: &str) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.baseline == baseline && r.variant == variant)
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Pairwise variant comparison per task. Each table is one seed; all tables
/// must cover the same (variant, task) keys. Variants are ordered by first
/// appearance in the first table, and every earlier variant serves as the
/// baseline for every later one.
pub fn compare(tables: &[MetricsTable]) -> Result<ComparisonReport, EvalError> {
    let first = tables.first().ok_or(EvalError::Empty)?;
    if first.rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let keys = first.keys();
    for (i, t) in tables.iter().enumerate().skip(1) {
        if t.keys() != keys {
            return Err(EvalError::KeyMismatch(format!("table {i} differs from table 0")));
        }
    }
    let mut variants: Vec<&str> = Vec::new();
    let mut tasks: Vec<&str> = Vec::new();
    for r in &first.rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
    }
    let mut rows = Vec::new();
    for task in &tasks {
        for (i, base) in variants.iter().enumerate() {
            for var in &variants[i + 1..] {
                let mut b = Vec::new();
                let mut v = Vec::new();
                for t in tables {
                    match (t.get(base, task), t.get(var, task)) {
                        (Some(x), Some(y)) => {
                            b.push(x.mean_fde);
                            v.push(y.mean_fde);
                        }
                        _ => {
                            return Err(EvalError::KeyMismatch(format!("{base}/{var} missing task {task}")));
                        }
                    }
                }
                let deltas: Vec<f64> = b.iter().zip(&v).map(|(x, y)| y - x).collect();
                let pcts: Vec<f64> = b.iter().zip(&v).map(|(x, y)| 100.0 * (x - y) / x).collect();
                rows.push(ComparisonRow {
                    task: task.to_string(),
                    baseline: base.to_string(),
                    variant: var.to_string(),
                    baseline_fde: median(&b),
                    variant_fde: median(&v),
                    delta: median(&deltas),
                    improvement_pct: median(&pcts),
                    n_tables: tables.len(),
                });
            }
        }
    }
    Ok(ComparisonReport { rows })
}

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Line chart of a trace, with annotated frames as dashed verticals.
pub fn trace_svg(trace: &ErrorTrace) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let x0 = *trace.frames.first().unwrap_or(&0) as f64;
    let x1 = (*trace.frames.last().unwrap_or(&1) as f64).max(x0 + 1.0);
    let ymax = trace
        .series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let sx = |f: f64| pad + (f - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - v / ymax * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="20">FDE over time, {}</text>"#,
        xml_escape(&trace.episode_id)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {} V{} H{}" fill="none" stroke="black"/>"#,
        pad,
        h - pad,
        w - pad
    );
    let _ = writeln!(s, r#"<text x="4" y="{}">{ymax:.3} m</text>"#, pad + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}">frame</text>"#, w / 2.0, h - 12.0);
    for (name, &f) in &trace.annotations {
        let x = sx(f as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{pad}" x2="{x:.1}" y2="{}" stroke="#888" stroke-dasharray="4 3"/><text x="{:.1}" y="{}" fill="#555">{}</text>"##,
            h - pad,
            x + 3.0,
            pad + 12.0,
            xml_escape(name)
        );
    }
    for (i, (name, vals)) in trace.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = trace
            .frames
            .iter()
            .zip(vals)
            .map(|(&f, &v)| format!("{:.1},{:.1}", sx(f as f64), sy(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - pad - 120.0,
            pad + 16.0 * i as f64,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart of mean FDE per (task, variant) with std whiskers.
pub fn table_svg(table: &MetricsTable) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let n = table.rows.len().max(1) as f64;
    let ymax = table
        .rows
        .iter()
        .map(|r| r.mean_fde + r.std_fde)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let bw = (w - 2.0 * pad) / n;
    let sy = |v: f64| h - pad - v / ymax * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="20">Final displacement error (m)</text>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(s, r#"<text x="4" y="{}">{ymax:.3}</text>"#, pad + 4.0);
    for (i, r) in table.rows.iter().enumerate() {
        let x = pad + bw * i as f64 + bw * 0.15;
        let color = PALETTE[i % PALETTE.len()];
        let top = sy(r.mean_fde);
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
            bw * 0.7,
            h - pad - top
        );
        let cx = x + bw * 0.35;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            sy(r.mean_fde + r.std_fde),
            sy((r.mean_fde - r.std_fde).max(0.0))
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{}">{}</text><text x="{x:.1}" y="{}">{}</text>"#,
            h - pad + 14.0,
            xml_escape(&r.variant),
            h - pad + 28.0,
            xml_escape(&r.task)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
