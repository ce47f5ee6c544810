//! The `interact` command-line tool.
//!
//! Exit status is 0 on success, 1 when a run fails and 2 for usage or
//! configuration errors. Errors go to standard error prefixed with
//! `interact: usage error:`, `interact: config error:` or `interact: error:`.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod verify;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{parse_override, resolve, Command, ConfigError, SEED_ENV};
use manifest::{hash_input, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "interact", version, about = "Action-conditioned human motion forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file layered over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed [config: seed; fallback: $INTERACT_SEED, then 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [config: output.dir].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides, e.g. `train.lambda_h=0.2`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Generate conflict-reach datasets, or compose single-person clips.
    Synth {
        #[command(flatten)]
        common: Common,
        /// [config: synth.episodes]
        #[arg(long)]
        episodes: Option<usize>,
        /// [config: synth.teleop_sessions]
        #[arg(long)]
        teleop_sessions: Option<usize>,
        /// Clip to compose; give an even number [config: synth.compose].
        #[arg(long)]
        compose: Vec<PathBuf>,
    },
    /// Train on human-human interaction data.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [config: data.dir].
        #[arg(long)]
        data: Option<PathBuf>,
        /// [config: train.epochs]
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Adapt a model to human-robot data.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// [config: data.dir]
        #[arg(long)]
        data: Option<PathBuf>,
        /// [config: train.epochs]
        #[arg(long)]
        epochs: Option<usize>,
        /// Starting checkpoint [config: train.init].
        #[arg(long)]
        init: Option<PathBuf>,
        /// Align robot and human embeddings on teleoperation pairs [config: train.align].
        #[arg(long)]
        align: bool,
    },
    /// Score checkpoints on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// [config: data.dir]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Repeatable [config: eval.checkpoints].
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// [config: eval.split]
        #[arg(long)]
        split: Option<String>,
        /// Also write per-window errors [config: eval.dump_raw].
        #[arg(long)]
        dump_raw: bool,
    },
    /// Forecast one window given as JSON.
    Predict {
        #[command(flatten)]
        common: Common,
        /// [config: predict.checkpoint]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// [config: predict.window]
        #[arg(long)]
        window: Option<PathBuf>,
    },
    /// Map a human arm to robot markers and pair the poses.
    Retarget {
        #[command(flatten)]
        common: Common,
        /// [config: retarget.episode]
        #[arg(long)]
        episode: Option<PathBuf>,
        /// left or right [config: retarget.side]
        #[arg(long)]
        side: Option<String>,
    },
    /// Run the numerical self-checks.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn path(p: &std::path::Path) -> Value {
    json!(p)
}

/// Splits parsed arguments into the command, common options and the
/// config keys set by dedicated flags.
fn flags(sub: Sub) -> (Command, Common, Vec<(String, Value)>) {
    let mut f: Vec<(String, Value)> = Vec::new();
    let mut set = |k: &str, v: Value| f.push((k.to_string(), v));
    let (cmd, common) = match sub {
        Sub::Synth {
            common,
            episodes,
            teleop_sessions,
            compose,
        } => {
            if let Some(v) = episodes {
                set("synth.episodes", json!(v))
            }
            if let Some(v) = teleop_sessions {
                set("synth.teleop_sessions", json!(v))
            }
            if !compose.is_empty() {
                set("synth.compose", json!(compose));
            }
            (Command::Synth, common)
        }
        Sub::Pretrain { common, data, epochs } => {
            if let Some(v) = data.as_ref() {
                set("data.dir", path(v))
            }
            if let Some(v) = epochs {
                set("train.epochs", json!(v))
            }
            (Command::Pretrain, common)
        }
        Sub::Finetune {
            common,
            data,
            epochs,
            init,
            align,
        } => {
            if let Some(v) = data.as_ref() {
                set("data.dir", path(v))
            }
            if let Some(v) = epochs {
                set("train.epochs", json!(v))
            }
            if let Some(v) = init.as_ref() {
                set("train.init", path(v))
            }
            if align {
                set("train.align", json!(true));
            }
            (Command::Finetune, common)
        }
        Sub::Eval {
            common,
            data,
            checkpoints,
            split,
            dump_raw,
        } => {
            if let Some(v) = data.as_ref() {
                set("data.dir", path(v))
            }
            if !checkpoints.is_empty() {
                set("eval.checkpoints", json!(checkpoints));
            }
            if let Some(v) = split {
                set("eval.split", json!(v))
            }
            if dump_raw {
                set("eval.dump_raw", json!(true));
            }
            (Command::Eval, common)
        }
        Sub::Predict {
            common,
            checkpoint,
            window,
        } => {
            if let Some(v) = checkpoint.as_ref() {
                set("predict.checkpoint", path(v))
            }
            if let Some(v) = window.as_ref() {
                set("predict.window", path(v))
            }
            (Command::Predict, common)
        }
        Sub::Retarget { common, episode, side } => {
            if let Some(v) = episode.as_ref() {
                set("retarget.episode", path(v))
            }
            if let Some(v) = side {
                set("retarget.side", json!(v))
            }
            (Command::Retarget, common)
        }
        Sub::Verify { common } => (Command::Verify, common),
    };
    if let Some(s) = common.seed {
        f.push(("seed".into(), json!(s)));
    }
    if let Some(o) = &common.out {
        f.push(("output.dir".into(), path(o)));
    }
    (cmd, common, f)
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!(
                "interact: usage error: {}",
                msg.trim_start_matches("error: ").trim_end()
            );
            return 2;
        }
    };
    let (cmd, common, flag_keys) = flags(cli.command);
    let resolved = common
        .overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<Result<Vec<_>, ConfigError>>()
        .and_then(|ov| {
            let env_seed = std::env::var(SEED_ENV).ok();
            resolve(cmd, common.config.as_deref(), &flag_keys, &ov, env_seed.as_deref())
        });
    let cfg = match resolved {
        Ok(c) => c,
        Err(e) => {
            eprintln!("interact: config error: {e}");
            return 2;
        }
    };

    let hashed = commands::inputs(cmd, &cfg, common.config.as_deref())
        .iter()
        .map(|p| hash_input(p))
        .collect::<anyhow::Result<Vec<_>>>();
    let mut manifest = match hashed.map(|inputs| RunManifest::new(cmd.name(), &cfg, inputs)) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("interact: error: {e:#}");
            return 1;
        }
    };
    if let Err(e) = manifest.write() {
        eprintln!("interact: error: {e:#}");
        return 1;
    }
    let result = commands::execute(cmd, &cfg, &mut manifest);
    let err = result.as_ref().err().map(|e| format!("{e:#}"));
    let finished = manifest.finish(err.clone());
    match (err, finished) {
        (Some(e), _) => {
            eprintln!("interact: error: {e}");
            1
        }
        (None, Err(e)) => {
            eprintln!("interact: error: {e:#}");
            1
        }
        (None, Ok(())) => 0,
    }
}
