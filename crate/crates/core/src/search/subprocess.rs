//! Evaluator backed by two external commands, run through `sh -c`.
//!
//! Training: the fold's `d_m` is written to `<workdir>/fold_<k>/train/` and
//! `train_cmd` runs with `SMALLAUG_MANIFEST` (manifest path),
//! `SMALLAUG_FOLD` (fold index) and `SMALLAUG_OUT` (directory for the model).
//! It must exit 0 and print the model artifact path as its last non-empty
//! stdout line.
//!
//! Scoring: the augmented dataset is written to
//! `<workdir>/fold_<k>/eval_<n>/` and `loss_cmd` runs with
//! `SMALLAUG_MANIFEST`, `SMALLAUG_MODEL` and `SMALLAUG_FOLD`. Its last
//! non-empty stdout line must be `{"loss": <finite number>}`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicU64, Ordering};

use serde_json::Value;

use super::{EvaluatorError, LossEvaluator};
use crate::data::{write_manifest, Dataset};

#[derive(Debug)]
pub struct SubprocessEvaluator {
    train_cmd: String,
    loss_cmd: String,
    workdir: PathBuf,
    /// Keep per-evaluation directories after a successful call.
    pub keep_eval_dirs: bool,
    counter: AtomicU64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubprocessModel {
    pub fold: u32,
    pub artifact: String,
}

impl SubprocessEvaluator {
    pub fn new(train_cmd: impl Into<String>, loss_cmd: impl Into<String>, workdir: impl Into<PathBuf>) -> Self {
        SubprocessEvaluator {
            train_cmd: train_cmd.into(),
            loss_cmd: loss_cmd.into(),
            workdir: workdir.into(),
            keep_eval_dirs: false,
            counter: AtomicU64::new(0),
        }
    }

    fn run(&self, cmd: &str, envs: &[(&str, String)], cwd: &Path) -> Result<Output, EvaluatorError> {
        let mut command = Command::new("sh");
        command.arg("-c").arg(cmd).current_dir(cwd);
        for (k, v) in envs {
            command.env(k, v);
        }
        let output = command
            .output()
            .map_err(|e| EvaluatorError::protocol(format!("failed to spawn `{cmd}`: {e}"), ""))?;
        if !output.status.success() {
            return Err(EvaluatorError::protocol(
                format!("`{cmd}` exited with {}", output.status),
                String::from_utf8_lossy(&output.stderr),
            ));
        }
        Ok(output)
    }
}

fn last_line(output: &Output) -> Option<String> {
    String::from_utf8_lossy(&output.stdout)
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_owned())
}

/// Parse a `{"loss": x}` line; `x` must be a finite number.
pub(crate) fn parse_loss_line(line: &str) -> Result<f64, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("unparseable loss line `{line}`: {e}"))?;
    match v.get("loss") {
        Some(Value::Number(n)) => n
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("non-finite loss in `{line}`")),
        Some(Value::String(s)) if s.parse::<f64>().is_ok_and(|x| !x.is_finite()) => {
            Err(format!("non-finite loss in `{line}`"))
        }
        _ => Err(format!("missing numeric `loss` in `{line}`")),
    }
}

fn abs(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl LossEvaluator for SubprocessEvaluator {
    type Model = SubprocessModel;

    fn train(&self, d_m: &Dataset, fold: u32) -> Result<SubprocessModel, EvaluatorError> {
        let fold_dir = abs(&self.workdir.join(format!("fold_{fold}")));
        let train_dir = fold_dir.join("train");
        let out_dir = fold_dir.join("model");
        fs::create_dir_all(&out_dir).map_err(|e| EvaluatorError::Other(format!("{}: {e}", out_dir.display())))?;
        let manifest = write_manifest(d_m, &train_dir)?;
        let output = self.run(
            &self.train_cmd,
            &[
                ("SMALLAUG_MANIFEST", manifest.display().to_string()),
                ("SMALLAUG_FOLD", fold.to_string()),
                ("SMALLAUG_OUT", out_dir.display().to_string()),
            ],
            &fold_dir,
        )?;
        let artifact = last_line(&output).ok_or_else(|| {
            EvaluatorError::protocol(
                "training command printed no model path",
                String::from_utf8_lossy(&output.stderr),
            )
        })?;
        Ok(SubprocessModel { fold, artifact })
    }

    fn loss(&self, model: &SubprocessModel, d: &Dataset) -> Result<f64, EvaluatorError> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let fold_dir = abs(&self.workdir.join(format!("fold_{}", model.fold)));
        let eval_dir = fold_dir.join(format!("eval_{n}"));
        let manifest = write_manifest(d, &eval_dir)?;
        let output = self.run(
            &self.loss_cmd,
            &[
                ("SMALLAUG_MANIFEST", manifest.display().to_string()),
                ("SMALLAUG_MODEL", model.artifact.clone()),
                ("SMALLAUG_FOLD", model.fold.to_string()),
            ],
            &fold_dir,
        )?;
        let stderr = String::from_utf8_lossy(&output.stderr).into_owned();
        let line = last_line(&output)
            .ok_or_else(|| EvaluatorError::protocol("loss command printed nothing", stderr.clone()))?;
        let loss = parse_loss_line(&line).map_err(|m| EvaluatorError::protocol(m, stderr))?;
        if !self.keep_eval_dirs {
            let _ = fs::remove_dir_all(&eval_dir);
        }
        Ok(loss)
    }

    fn concurrent(&self) -> bool {
        true
    }
}
